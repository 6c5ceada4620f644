//! Generative attention: binary masks over feature grids/vectors and the
//! foreground/background feature split.
//!
//! The mask chain is `project -> softmax -> threshold`. The threshold output
//! is exactly binary; its backward pass is the straight-through estimator, so
//! the cotangent arriving at the binary mask z is handed to the distribution
//! p unchanged. A soft mode replaces the threshold with the identity (z = p)
//! so the full chain becomes differentiable for gradient checking.

use rand::Rng;

use crate::kernel::{
    affine_backward, affine_forward, grid_softmax_backward, grid_softmax_forward, relu_backward,
    relu_forward, threshold_forward, threshold_ste_backward, AffineParams, Tensor,
};
use crate::Result;

/// Threshold behaviour: `Hard` is the real binary mask; `Soft` is the
/// identity test hook (z = p) used by finite-difference checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskMode {
    Hard,
    Soft,
}

/// Pre-threshold activation m, distribution p, mask z and the threshold.
/// Under `Hard` every z entry is exactly 0 or 1 with z = [p >= alpha].
#[derive(Clone, Debug)]
pub struct AttentionMask {
    pub pre_mask: Tensor,
    pub p: Tensor,
    pub z: Tensor,
    pub alpha: f64,
}

impl AttentionMask {
    /// Fraction of entries selected as foreground.
    pub fn occupancy(&self) -> f64 {
        if self.z.is_empty() {
            return 0.0;
        }
        self.z.data().iter().sum::<f64>() / self.z.len() as f64
    }
}

/// Foreground and background parts of a feature tensor. Their sum equals the
/// input exactly and their supports are disjoint per cell.
#[derive(Clone, Debug)]
pub struct SplitFeatures {
    pub foreground: Tensor,
    pub background: Tensor,
}

/// Splits features by a mask broadcast over the trailing channel extent:
/// fg = z * f and bg = (1 - z) * f per cell.
pub fn split(f: &Tensor, z: &Tensor) -> SplitFeatures {
    let cells = z.len();
    assert!(
        cells > 0 && f.len().is_multiple_of(cells),
        "mask with {} cells cannot broadcast over features of length {}",
        cells,
        f.len()
    );
    let ch = f.len() / cells;
    let mut fg = vec![0.0; f.len()];
    let mut bg = vec![0.0; f.len()];
    for cell in 0..cells {
        let zv = z.data()[cell];
        for c in 0..ch {
            let idx = cell * ch + c;
            let v = f.data()[idx];
            fg[idx] = zv * v;
            bg[idx] = (1.0 - zv) * v;
        }
    }
    SplitFeatures {
        foreground: Tensor::from_vec(f.shape(), fg),
        background: Tensor::from_vec(f.shape(), bg),
    }
}

/// Gradient of the split with respect to the features, mask held constant:
/// grad_f = z * grad_fg + (1 - z) * grad_bg.
pub fn split_backward_features(z: &Tensor, grad_fg: &Tensor, grad_bg: &Tensor) -> Tensor {
    let cells = z.len();
    let ch = grad_fg.len() / cells;
    let mut out = vec![0.0; grad_fg.len()];
    for cell in 0..cells {
        let zv = z.data()[cell];
        for c in 0..ch {
            let idx = cell * ch + c;
            out[idx] = zv * grad_fg.data()[idx] + (1.0 - zv) * grad_bg.data()[idx];
        }
    }
    Tensor::from_vec(grad_fg.shape(), out)
}

/// Gradient of the split with respect to the mask, features held constant:
/// grad_z(cell) = sum_c f(cell, c) * (grad_fg - grad_bg)(cell, c).
pub fn split_backward_mask(
    f: &Tensor,
    z_shape: &[usize],
    grad_fg: &Tensor,
    grad_bg: &Tensor,
) -> Tensor {
    let cells: usize = z_shape.iter().product();
    let ch = f.len() / cells;
    let mut out = vec![0.0; cells];
    for (cell, slot) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for c in 0..ch {
            let idx = cell * ch + c;
            acc += f.data()[idx] * (grad_fg.data()[idx] - grad_bg.data()[idx]);
        }
        *slot = acc;
    }
    Tensor::from_vec(z_shape, out)
}

/// Intersection-over-union between a learned binary mask and a planted
/// reference mask of the same cell count.
pub fn mask_iou(z: &Tensor, planted: &[u8]) -> f64 {
    assert_eq!(z.len(), planted.len(), "mask cell counts differ");
    let mut inter = 0usize;
    let mut union = 0usize;
    for (zv, &pv) in z.data().iter().zip(planted) {
        let a = *zv > 0.5;
        let b = pv == 1;
        if a && b {
            inter += 1;
        }
        if a || b {
            union += 1;
        }
    }
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Per-cell scalar projection of an HxWxC grid (a 1x1 convolution), then
/// softmax over the whole grid and threshold at alpha = 1/(H*W).
#[derive(Clone, Debug)]
pub struct ImageMaskHead {
    pub proj: AffineParams,
}

pub struct ImageMaskCache {
    cells: Tensor,
    p: Tensor,
}

impl ImageMaskHead {
    pub fn init<R: Rng>(feat_c: usize, rng: &mut R) -> Self {
        ImageMaskHead {
            proj: AffineParams::init(1, feat_c, rng),
        }
    }

    pub fn forward(&self, f: &Tensor, mode: MaskMode) -> Result<(AttentionMask, ImageMaskCache)> {
        let (h, w, c) = (f.shape()[0], f.shape()[1], f.shape()[2]);
        let cells = f.reshaped(&[h * w, c]);
        let m = affine_forward(&cells, &self.proj)?.reshaped(&[h, w]);
        let p = grid_softmax_forward(&m);
        let alpha = 1.0 / (h * w) as f64;
        let z = match mode {
            MaskMode::Hard => threshold_forward(&p, alpha),
            MaskMode::Soft => p.clone(),
        };
        Ok((
            AttentionMask {
                pre_mask: m,
                p: p.clone(),
                z,
                alpha,
            },
            ImageMaskCache { cells, p },
        ))
    }

    /// Backward through threshold (straight-through), softmax and the
    /// projection. Returns the gradient with respect to the feature grid
    /// along the projection path.
    pub fn backward(&mut self, cache: &ImageMaskCache, grad_z: &Tensor) -> Result<Tensor> {
        let grad_p = threshold_ste_backward(grad_z);
        let grad_m = grid_softmax_backward(&cache.p, &grad_p);
        let cells = cache.cells.shape()[0];
        let g = grad_m.reshaped(&[cells, 1]);
        let grad_cells = affine_backward(&cache.cells, &mut self.proj, &g)?;
        let (h, w) = (cache.p.shape()[0], cache.p.shape()[1]);
        Ok(grad_cells.reshaped(&[h, w, self.proj.in_dim()]))
    }

    pub fn zero_grad(&mut self) {
        self.proj.zero_grad();
    }
}

/// Fully-connected mask pipeline for feature vectors:
/// m = relu(W f + b), p = softmax(m), z = threshold(p, 1/C_T).
#[derive(Clone, Debug)]
pub struct TextMaskHead {
    pub proj: AffineParams,
}

pub struct TextMaskCache {
    feat: Tensor,
    pre_relu: Tensor,
    p: Tensor,
}

impl TextMaskHead {
    pub fn init<R: Rng>(txt_dim: usize, rng: &mut R) -> Self {
        TextMaskHead {
            proj: AffineParams::init(txt_dim, txt_dim, rng),
        }
    }

    pub fn forward(&self, f: &Tensor, mode: MaskMode) -> Result<(AttentionMask, TextMaskCache)> {
        let pre_relu = affine_forward(f, &self.proj)?;
        let m = relu_forward(&pre_relu);
        let p = grid_softmax_forward(&m);
        let alpha = 1.0 / f.len() as f64;
        let z = match mode {
            MaskMode::Hard => threshold_forward(&p, alpha),
            MaskMode::Soft => p.clone(),
        };
        Ok((
            AttentionMask {
                pre_mask: m,
                p: p.clone(),
                z,
                alpha,
            },
            TextMaskCache {
                feat: f.clone(),
                pre_relu,
                p,
            },
        ))
    }

    pub fn backward(&mut self, cache: &TextMaskCache, grad_z: &Tensor) -> Result<Tensor> {
        let grad_p = threshold_ste_backward(grad_z);
        let grad_m = grid_softmax_backward(&cache.p, &grad_p);
        let grad_pre = relu_backward(&cache.pre_relu, &grad_m);
        affine_backward(&cache.feat, &mut self.proj, &grad_pre)
    }

    pub fn zero_grad(&mut self) {
        self.proj.zero_grad();
    }
}
