//! The full two-branch network: encoders, mask heads and hash coders, with
//! per-instance forward passes and backward routing for the alternating
//! optimization phases.
//!
//! Parameter groups follow the min-max partition: encoders and hash coders
//! form the similarity-preserving side, the two mask heads form the
//! generative side. During a discriminator step the binary masks are
//! constants (no gradient reaches the mask heads); during a generator step
//! gradients reach only the mask heads, through the straight-through
//! estimator.

use rand::rngs::StdRng;
use rand::SeedableRng;

use crate::attention::{
    split, split_backward_features, split_backward_mask, AttentionMask, ImageMaskCache,
    ImageMaskHead, MaskMode, SplitFeatures, TextMaskCache, TextMaskHead,
};
use crate::encoders::{
    ImageEncCache, ImageEncoder, ImageInstance, TextEncCache, TextEncoder, TextInstance,
};
use crate::hashcoder::{ImageHashCache, ImageHashHead, RelaxedCode, TextHashCache, TextHashHead};
use crate::kernel::{DualTensor, Tensor};
use crate::{Error, Result};

/// Network dimensions. The attention thresholds are derived: 1/(H*W) for the
/// image grid and 1/C_T for the text vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ModelDims {
    pub img_h: usize,
    pub img_w: usize,
    pub img_c: usize,
    pub patch: usize,
    pub feat_c: usize,
    pub vocab: usize,
    pub txt_hidden: usize,
    pub txt_dim: usize,
    pub hash_hidden: usize,
    pub q: usize,
}

impl ModelDims {
    pub fn grid_h(&self) -> usize {
        self.img_h / self.patch
    }

    pub fn grid_w(&self) -> usize {
        self.img_w / self.patch
    }

    pub fn img_flat(&self) -> usize {
        self.grid_h() * self.grid_w() * self.feat_c
    }

    pub fn validate(&self) -> Result<()> {
        let all = [
            self.img_h,
            self.img_w,
            self.img_c,
            self.patch,
            self.feat_c,
            self.vocab,
            self.txt_hidden,
            self.txt_dim,
            self.hash_hidden,
            self.q,
        ];
        if all.contains(&0) {
            return Err(Error::Config(
                "all model dimensions must be positive".into(),
            ));
        }
        if !self.img_h.is_multiple_of(self.patch) || !self.img_w.is_multiple_of(self.patch) {
            return Err(Error::Config(format!(
                "patch {} must divide image extents {}x{}",
                self.patch, self.img_h, self.img_w
            )));
        }
        Ok(())
    }
}

/// Which parameters a backward pass feeds and an update step moves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    /// Encoders and hash coders (the min side).
    EncoderHash,
    /// Mask heads (the max side).
    Generator,
    /// Everything; used by gradient checks.
    All,
}

#[derive(Clone)]
pub struct Model {
    pub dims: ModelDims,
    pub img_enc: ImageEncoder,
    pub txt_enc: TextEncoder,
    pub img_mask: ImageMaskHead,
    pub txt_mask: TextMaskHead,
    pub img_hash: ImageHashHead,
    pub txt_hash: TextHashHead,
}

/// Full image-branch forward state: features, mask, splits, both codes and
/// every cache needed for the backward pass.
pub struct ImageForward {
    pub feat: Tensor,
    pub mask: AttentionMask,
    pub splits: SplitFeatures,
    pub code_fg: RelaxedCode,
    pub code_bg: RelaxedCode,
    enc_cache: ImageEncCache,
    mask_cache: ImageMaskCache,
    hash_cache_fg: ImageHashCache,
    hash_cache_bg: ImageHashCache,
}

pub struct TextForward {
    pub feat: Tensor,
    pub mask: AttentionMask,
    pub splits: SplitFeatures,
    pub code_fg: RelaxedCode,
    pub code_bg: RelaxedCode,
    enc_cache: TextEncCache,
    mask_cache: TextMaskCache,
    hash_cache_fg: TextHashCache,
    hash_cache_bg: TextHashCache,
}

impl Model {
    pub fn init(dims: ModelDims, seed: u64) -> Result<Model> {
        dims.validate()?;
        let mut rng = StdRng::seed_from_u64(seed);
        Ok(Model {
            dims,
            img_enc: ImageEncoder::init(
                dims.img_h,
                dims.img_w,
                dims.img_c,
                dims.patch,
                dims.feat_c,
                &mut rng,
            )?,
            txt_enc: TextEncoder::init(dims.vocab, dims.txt_hidden, dims.txt_dim, &mut rng),
            img_mask: ImageMaskHead::init(dims.feat_c, &mut rng),
            txt_mask: TextMaskHead::init(dims.txt_dim, &mut rng),
            img_hash: ImageHashHead::init(dims.img_flat(), dims.hash_hidden, dims.q, &mut rng),
            txt_hash: TextHashHead::init(dims.txt_dim, dims.q, &mut rng),
        })
    }

    /// encode -> mask -> split -> hash both splits, one image instance.
    pub fn forward_image(&self, img: &ImageInstance, mode: MaskMode) -> Result<ImageForward> {
        let (feat, enc_cache) = self.img_enc.forward(img)?;
        let (mask, mask_cache) = self.img_mask.forward(&feat, mode)?;
        let splits = split(&feat, &mask.z);
        let (code_fg, hash_cache_fg) = self.img_hash.forward(&splits.foreground)?;
        let (code_bg, hash_cache_bg) = self.img_hash.forward(&splits.background)?;
        Ok(ImageForward {
            feat,
            mask,
            splits,
            code_fg,
            code_bg,
            enc_cache,
            mask_cache,
            hash_cache_fg,
            hash_cache_bg,
        })
    }

    pub fn forward_text(&self, txt: &TextInstance, mode: MaskMode) -> Result<TextForward> {
        let (feat, enc_cache) = self.txt_enc.forward(txt)?;
        let (mask, mask_cache) = self.txt_mask.forward(&feat, mode)?;
        let splits = split(&feat, &mask.z);
        let (code_fg, hash_cache_fg) = self.txt_hash.forward(&splits.foreground)?;
        let (code_bg, hash_cache_bg) = self.txt_hash.forward(&splits.background)?;
        Ok(TextForward {
            feat,
            mask,
            splits,
            code_fg,
            code_bg,
            enc_cache,
            mask_cache,
            hash_cache_fg,
            hash_cache_bg,
        })
    }

    /// Backward for one image instance given code cotangents. `scope`
    /// selects the paths: `EncoderHash` treats the mask as a constant,
    /// `Generator` feeds only the mask head (through the STE), `All` feeds
    /// both paths.
    pub fn backward_image(
        &mut self,
        fwd: &ImageForward,
        grad_code_fg: &Tensor,
        grad_code_bg: &Tensor,
        scope: ParamGroup,
    ) -> Result<()> {
        let grad_fg = self.img_hash.backward(&fwd.hash_cache_fg, grad_code_fg)?;
        let grad_bg = self.img_hash.backward(&fwd.hash_cache_bg, grad_code_bg)?;
        match scope {
            ParamGroup::EncoderHash => {
                let grad_feat = split_backward_features(&fwd.mask.z, &grad_fg, &grad_bg);
                self.img_enc.backward(&fwd.enc_cache, &grad_feat)?;
            }
            ParamGroup::Generator => {
                let grad_z = split_backward_mask(&fwd.feat, fwd.mask.z.shape(), &grad_fg, &grad_bg);
                self.img_mask.backward(&fwd.mask_cache, &grad_z)?;
            }
            ParamGroup::All => {
                let mut grad_feat = split_backward_features(&fwd.mask.z, &grad_fg, &grad_bg);
                let grad_z = split_backward_mask(&fwd.feat, fwd.mask.z.shape(), &grad_fg, &grad_bg);
                let via_proj = self.img_mask.backward(&fwd.mask_cache, &grad_z)?;
                for (a, b) in grad_feat.data_mut().iter_mut().zip(via_proj.data()) {
                    *a += b;
                }
                self.img_enc.backward(&fwd.enc_cache, &grad_feat)?;
            }
        }
        Ok(())
    }

    pub fn backward_text(
        &mut self,
        fwd: &TextForward,
        grad_code_fg: &Tensor,
        grad_code_bg: &Tensor,
        scope: ParamGroup,
    ) -> Result<()> {
        let grad_fg = self.txt_hash.backward(&fwd.hash_cache_fg, grad_code_fg)?;
        let grad_bg = self.txt_hash.backward(&fwd.hash_cache_bg, grad_code_bg)?;
        match scope {
            ParamGroup::EncoderHash => {
                let grad_feat = split_backward_features(&fwd.mask.z, &grad_fg, &grad_bg);
                self.txt_enc.backward(&fwd.enc_cache, &grad_feat)?;
            }
            ParamGroup::Generator => {
                let grad_z = split_backward_mask(&fwd.feat, fwd.mask.z.shape(), &grad_fg, &grad_bg);
                self.txt_mask.backward(&fwd.mask_cache, &grad_z)?;
            }
            ParamGroup::All => {
                let mut grad_feat = split_backward_features(&fwd.mask.z, &grad_fg, &grad_bg);
                let grad_z = split_backward_mask(&fwd.feat, fwd.mask.z.shape(), &grad_fg, &grad_bg);
                let via_proj = self.txt_mask.backward(&fwd.mask_cache, &grad_z)?;
                for (a, b) in grad_feat.data_mut().iter_mut().zip(via_proj.data()) {
                    *a += b;
                }
                self.txt_enc.backward(&fwd.enc_cache, &grad_feat)?;
            }
        }
        Ok(())
    }

    /// Named parameter tensors in checkpoint order.
    pub fn param_names() -> [&'static str; 18] {
        [
            "img_enc.patch_proj.w",
            "img_enc.patch_proj.b",
            "img_enc.cell_fc.w",
            "img_enc.cell_fc.b",
            "txt_enc.fc1.w",
            "txt_enc.fc1.b",
            "txt_enc.fc2.w",
            "txt_enc.fc2.b",
            "img_mask.proj.w",
            "img_mask.proj.b",
            "txt_mask.proj.w",
            "txt_mask.proj.b",
            "img_hash.fc1.w",
            "img_hash.fc1.b",
            "img_hash.fc2.w",
            "img_hash.fc2.b",
            "txt_hash.fc.w",
            "txt_hash.fc.b",
        ]
    }

    pub fn params(&self) -> Vec<(&'static str, &DualTensor)> {
        let names = Self::param_names();
        let refs: [&DualTensor; 18] = [
            &self.img_enc.patch_proj.weight,
            &self.img_enc.patch_proj.bias,
            &self.img_enc.cell_fc.weight,
            &self.img_enc.cell_fc.bias,
            &self.txt_enc.fc1.weight,
            &self.txt_enc.fc1.bias,
            &self.txt_enc.fc2.weight,
            &self.txt_enc.fc2.bias,
            &self.img_mask.proj.weight,
            &self.img_mask.proj.bias,
            &self.txt_mask.proj.weight,
            &self.txt_mask.proj.bias,
            &self.img_hash.fc1.weight,
            &self.img_hash.fc1.bias,
            &self.img_hash.fc2.weight,
            &self.img_hash.fc2.bias,
            &self.txt_hash.fc.weight,
            &self.txt_hash.fc.bias,
        ];
        names.into_iter().zip(refs).collect()
    }

    pub fn params_mut(&mut self) -> Vec<(&'static str, &mut DualTensor)> {
        let names = Self::param_names();
        let refs: [&mut DualTensor; 18] = [
            &mut self.img_enc.patch_proj.weight,
            &mut self.img_enc.patch_proj.bias,
            &mut self.img_enc.cell_fc.weight,
            &mut self.img_enc.cell_fc.bias,
            &mut self.txt_enc.fc1.weight,
            &mut self.txt_enc.fc1.bias,
            &mut self.txt_enc.fc2.weight,
            &mut self.txt_enc.fc2.bias,
            &mut self.img_mask.proj.weight,
            &mut self.img_mask.proj.bias,
            &mut self.txt_mask.proj.weight,
            &mut self.txt_mask.proj.bias,
            &mut self.img_hash.fc1.weight,
            &mut self.img_hash.fc1.bias,
            &mut self.img_hash.fc2.weight,
            &mut self.img_hash.fc2.bias,
            &mut self.txt_hash.fc.weight,
            &mut self.txt_hash.fc.bias,
        ];
        names.into_iter().zip(refs).collect()
    }

    /// Whether a named parameter belongs to the generator (mask) side.
    pub fn is_generator_param(name: &str) -> bool {
        name.starts_with("img_mask.") || name.starts_with("txt_mask.")
    }

    pub fn zero_grads(&mut self) {
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::finite_diff_check;

    fn tiny_dims() -> ModelDims {
        ModelDims {
            img_h: 8,
            img_w: 8,
            img_c: 1,
            patch: 2,
            feat_c: 3,
            vocab: 12,
            txt_hidden: 8,
            txt_dim: 6,
            hash_hidden: 10,
            q: 8,
        }
    }

    fn tiny_inputs(seed: u64) -> (ImageInstance, TextInstance) {
        let mut rng = StdRng::seed_from_u64(seed);
        let mut px = Tensor::uniform(&[8, 8, 1], 1.0, &mut rng);
        px.data_mut().iter_mut().for_each(|v| *v = v.abs());
        let mut bow = Tensor::uniform(&[12], 1.0, &mut rng);
        bow.data_mut().iter_mut().for_each(|v| *v = v.abs());
        (ImageInstance { pixels: px }, TextInstance { bow })
    }

    #[test]
    fn forward_shapes_and_mask_binarity() {
        let model = Model::init(tiny_dims(), 1).unwrap();
        let (img, txt) = tiny_inputs(2);
        let fi = model.forward_image(&img, MaskMode::Hard).unwrap();
        assert_eq!(fi.feat.shape(), &[4, 4, 3]);
        assert_eq!(fi.code_fg.len(), 8);
        assert!(fi.mask.z.data().iter().all(|&v| v == 0.0 || v == 1.0));
        // Split identity.
        for i in 0..fi.feat.len() {
            assert_eq!(
                fi.splits.foreground.data()[i] + fi.splits.background.data()[i],
                fi.feat.data()[i]
            );
        }
        let ft = model.forward_text(&txt, MaskMode::Hard).unwrap();
        assert_eq!(ft.feat.shape(), &[6]);
        assert_eq!(ft.code_bg.len(), 8);
    }

    #[test]
    fn both_splits_share_hash_parameters() {
        // Perturbing the single image hash head moves both codes.
        let mut model = Model::init(tiny_dims(), 3).unwrap();
        let (img, _) = tiny_inputs(4);
        let before = model.forward_image(&img, MaskMode::Hard).unwrap();
        model.img_hash.fc2.bias.value.data_mut()[0] += 0.25;
        let after = model.forward_image(&img, MaskMode::Hard).unwrap();
        assert_ne!(before.code_fg.0.data()[0], after.code_fg.0.data()[0]);
        assert_ne!(before.code_bg.0.data()[0], after.code_bg.0.data()[0]);
    }

    #[test]
    fn generator_scope_touches_only_mask_grads() {
        let mut model = Model::init(tiny_dims(), 3).unwrap();
        let (img, txt) = tiny_inputs(6);
        let fi = model.forward_image(&img, MaskMode::Hard).unwrap();
        let ft = model.forward_text(&txt, MaskMode::Hard).unwrap();
        // Precondition for a live gradient path into the mask head.
        assert!(fi.feat.data().iter().any(|&v| v != 0.0));
        let g = Tensor::from_vec(&[8], vec![0.3; 8]);
        model.zero_grads();
        model
            .backward_image(&fi, &Tensor::zeros(&[8]), &g, ParamGroup::Generator)
            .unwrap();
        model
            .backward_text(&ft, &Tensor::zeros(&[8]), &g, ParamGroup::Generator)
            .unwrap();
        // Encoder grads untouched in generator scope.
        assert!(model
            .img_enc
            .patch_proj
            .weight
            .grad
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(model
            .txt_enc
            .fc1
            .weight
            .grad
            .data()
            .iter()
            .all(|&v| v == 0.0));
        // Mask grads generally nonzero.
        assert!(model
            .img_mask
            .proj
            .weight
            .grad
            .data()
            .iter()
            .any(|&v| v != 0.0));
    }

    #[test]
    fn discriminator_scope_leaves_mask_grads_zero() {
        let mut model = Model::init(tiny_dims(), 7).unwrap();
        let (img, _) = tiny_inputs(8);
        let fi = model.forward_image(&img, MaskMode::Hard).unwrap();
        let g = Tensor::from_vec(&[8], vec![0.5; 8]);
        model.zero_grads();
        model
            .backward_image(&fi, &g, &g, ParamGroup::EncoderHash)
            .unwrap();
        assert!(model
            .img_mask
            .proj
            .weight
            .grad
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(model
            .img_enc
            .patch_proj
            .weight
            .grad
            .data()
            .iter()
            .any(|&v| v != 0.0));
    }

    #[test]
    fn soft_mode_full_scope_matches_finite_differences() {
        // Weighted sum of fg and bg codes as the scalar loss, image branch.
        let model = Model::init(tiny_dims(), 9).unwrap();
        let (img, _) = tiny_inputs(10);
        let mut rng = StdRng::seed_from_u64(11);
        let wf = Tensor::uniform(&[8], 1.0, &mut rng);
        let wb = Tensor::uniform(&[8], 1.0, &mut rng);

        let loss = |m: &Model| -> f64 {
            let f = m.forward_image(&img, MaskMode::Soft).unwrap();
            let a: f64 = f
                .code_fg
                .0
                .data()
                .iter()
                .zip(wf.data())
                .map(|(x, y)| x * y)
                .sum();
            let b: f64 = f
                .code_bg
                .0
                .data()
                .iter()
                .zip(wb.data())
                .map(|(x, y)| x * y)
                .sum();
            a + b
        };

        let mut mb = Model::init(tiny_dims(), 9).unwrap();
        let fwd = mb.forward_image(&img, MaskMode::Soft).unwrap();
        mb.zero_grads();
        mb.backward_image(&fwd, &wf, &wb, ParamGroup::All).unwrap();

        for (name, grad) in [
            (
                "img_enc.patch_proj.w",
                mb.img_enc.patch_proj.weight.grad.clone(),
            ),
            ("img_mask.proj.w", mb.img_mask.proj.weight.grad.clone()),
            ("img_hash.fc1.w", mb.img_hash.fc1.weight.grad.clone()),
        ] {
            let base = match name {
                "img_enc.patch_proj.w" => model.img_enc.patch_proj.weight.value.clone(),
                "img_mask.proj.w" => model.img_mask.proj.weight.value.clone(),
                _ => model.img_hash.fc1.weight.value.clone(),
            };
            let mut f = |wt: &Tensor| -> f64 {
                let mut m2 = Model::init(tiny_dims(), 9).unwrap();
                match name {
                    "img_enc.patch_proj.w" => m2.img_enc.patch_proj.weight.value = wt.clone(),
                    "img_mask.proj.w" => m2.img_mask.proj.weight.value = wt.clone(),
                    _ => m2.img_hash.fc1.weight.value = wt.clone(),
                }
                loss(&m2)
            };
            let rep = finite_diff_check(&mut f, &base, &grad, 1e-4).unwrap();
            assert!(rep.passed, "{} rel err {}", name, rep.max_rel_err);
        }
    }

    #[test]
    fn param_listing_is_complete_and_consistent() {
        let mut model = Model::init(tiny_dims(), 13).unwrap();
        let names: Vec<&str> = model.params().iter().map(|(n, _)| *n).collect();
        assert_eq!(names.len(), 18);
        let gen_count = names
            .iter()
            .filter(|n| Model::is_generator_param(n))
            .count();
        assert_eq!(gen_count, 4);
        for (_, p) in model.params_mut() {
            assert_eq!(p.value.shape(), p.grad.shape());
        }
    }
}
