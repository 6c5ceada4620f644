//! Feature learning components mapping raw modality inputs to high-level
//! representations.
//!
//! The image encoder embeds non-overlapping PxP pixel patches and applies a
//! per-cell fully-connected layer with relu, producing an HxWxC feature grid.
//! The text encoder is a two-layer MLP over bag-of-words counts producing a
//! feature vector.

use rand::Rng;

use crate::kernel::{
    affine_backward, affine_forward, relu_backward, relu_forward, AffineParams, Tensor,
};
use crate::{Error, Result};

/// Raw image input: H0 x W0 x C0 pixel grid with values in [0, 1].
#[derive(Clone, Debug)]
pub struct ImageInstance {
    pub pixels: Tensor,
}

/// Raw text input: non-negative bag-of-words counts of length V.
#[derive(Clone, Debug)]
pub struct TextInstance {
    pub bow: Tensor,
}

/// Patch-embedding grid encoder. Each non-overlapping PxP*C0 patch is
/// projected to a C-dim feature, followed by one per-cell affine + relu.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub patch_proj: AffineParams,
    pub cell_fc: AffineParams,
    img_h: usize,
    img_w: usize,
    img_c: usize,
    patch: usize,
}

/// Forward activations kept for the backward pass.
pub struct ImageEncCache {
    patches: Tensor,
    proj_out: Tensor,
    pre_relu: Tensor,
}

impl ImageEncoder {
    pub fn init<R: Rng>(
        img_h: usize,
        img_w: usize,
        img_c: usize,
        patch: usize,
        feat_c: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if patch == 0 || !img_h.is_multiple_of(patch) || !img_w.is_multiple_of(patch) {
            return Err(Error::Config(format!(
                "patch size {} does not divide image extents {}x{}",
                patch, img_h, img_w
            )));
        }
        let patch_dim = patch * patch * img_c;
        Ok(ImageEncoder {
            patch_proj: AffineParams::init(feat_c, patch_dim, rng),
            cell_fc: AffineParams::init(feat_c, feat_c, rng),
            img_h,
            img_w,
            img_c,
            patch,
        })
    }

    pub fn grid_h(&self) -> usize {
        self.img_h / self.patch
    }

    pub fn grid_w(&self) -> usize {
        self.img_w / self.patch
    }

    pub fn feat_c(&self) -> usize {
        self.patch_proj.out_dim()
    }

    fn extract_patches(&self, img: &ImageInstance) -> Result<Tensor> {
        let expect = [self.img_h, self.img_w, self.img_c];
        if img.pixels.shape() != expect {
            return Err(Error::Dim(format!(
                "image shape {:?} does not match encoder config {:?}",
                img.pixels.shape(),
                expect
            )));
        }
        let (gh, gw, p, c0) = (self.grid_h(), self.grid_w(), self.patch, self.img_c);
        let patch_dim = p * p * c0;
        let px = img.pixels.data();
        let mut out = vec![0.0; gh * gw * patch_dim];
        for ch in 0..gh {
            for cw in 0..gw {
                let dst = &mut out[(ch * gw + cw) * patch_dim..(ch * gw + cw + 1) * patch_dim];
                let mut k = 0;
                for dy in 0..p {
                    let y = ch * p + dy;
                    for dx in 0..p {
                        let x = cw * p + dx;
                        for cc in 0..c0 {
                            dst[k] = px[(y * self.img_w + x) * c0 + cc];
                            k += 1;
                        }
                    }
                }
            }
        }
        Ok(Tensor::from_vec(&[gh * gw, patch_dim], out))
    }

    /// Maps an image to its HxWxC feature grid.
    pub fn forward(&self, img: &ImageInstance) -> Result<(Tensor, ImageEncCache)> {
        let patches = self.extract_patches(img)?;
        let proj_out = affine_forward(&patches, &self.patch_proj)?;
        let pre_relu = affine_forward(&proj_out, &self.cell_fc)?;
        let feat = relu_forward(&pre_relu);
        let grid = feat.reshaped(&[self.grid_h(), self.grid_w(), self.feat_c()]);
        Ok((
            grid,
            ImageEncCache {
                patches,
                proj_out,
                pre_relu,
            },
        ))
    }

    /// Accumulates parameter gradients for one instance. The gradient with
    /// respect to raw pixels is not needed and is discarded.
    pub fn backward(&mut self, cache: &ImageEncCache, grad_grid: &Tensor) -> Result<()> {
        let cells = self.grid_h() * self.grid_w();
        let g = grad_grid.reshaped(&[cells, self.feat_c()]);
        let g_pre = relu_backward(&cache.pre_relu, &g);
        let g_proj = affine_backward(&cache.proj_out, &mut self.cell_fc, &g_pre)?;
        affine_backward(&cache.patches, &mut self.patch_proj, &g_proj)?;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.patch_proj.zero_grad();
        self.cell_fc.zero_grad();
    }
}

/// Two fully-connected layers with relu between: V -> hidden -> C_T.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub fc1: AffineParams,
    pub fc2: AffineParams,
}

pub struct TextEncCache {
    bow: Tensor,
    pre_relu: Tensor,
    hidden: Tensor,
}

impl TextEncoder {
    pub fn init<R: Rng>(vocab: usize, hidden: usize, txt_dim: usize, rng: &mut R) -> Self {
        TextEncoder {
            fc1: AffineParams::init(hidden, vocab, rng),
            fc2: AffineParams::init(txt_dim, hidden, rng),
        }
    }

    pub fn txt_dim(&self) -> usize {
        self.fc2.out_dim()
    }

    /// Maps bag-of-words counts to a C_T feature vector.
    pub fn forward(&self, txt: &TextInstance) -> Result<(Tensor, TextEncCache)> {
        if txt.bow.shape() != [self.fc1.in_dim()] {
            return Err(Error::Dim(format!(
                "bow length {:?} does not match vocab {}",
                txt.bow.shape(),
                self.fc1.in_dim()
            )));
        }
        let pre_relu = affine_forward(&txt.bow, &self.fc1)?;
        let hidden = relu_forward(&pre_relu);
        let feat = affine_forward(&hidden, &self.fc2)?;
        Ok((
            feat,
            TextEncCache {
                bow: txt.bow.clone(),
                pre_relu,
                hidden,
            },
        ))
    }

    pub fn backward(&mut self, cache: &TextEncCache, grad_feat: &Tensor) -> Result<()> {
        let g_hidden = affine_backward(&cache.hidden, &mut self.fc2, grad_feat)?;
        let g_pre = relu_backward(&cache.pre_relu, &g_hidden);
        affine_backward(&cache.bow, &mut self.fc1, &g_pre)?;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.fc1.zero_grad();
        self.fc2.zero_grad();
    }
}
