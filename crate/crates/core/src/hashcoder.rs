//! Discriminative hash coders mapping features to q-dimensional relaxed
//! codes and their sign binarization.
//!
//! One coder exists per modality and is applied to both the foreground and
//! the background feature split with the same parameters. The tanh output
//! keeps relaxed codes strictly inside (-1, 1); retrieval binarizes them to
//! {-1, +1} with ties at exactly 0 mapping to +1.

use rand::Rng;

use crate::kernel::{
    affine_backward, affine_forward, relu_backward, relu_forward, tanh_backward, tanh_forward,
    AffineParams, Tensor,
};
use crate::{Error, Result};

/// q-dim tanh output in (-1, 1).
#[derive(Clone, Debug)]
pub struct RelaxedCode(pub Tensor);

impl RelaxedCode {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// q bits, each -1 or +1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BinaryCode {
    pub bits: Vec<i8>,
}

impl BinaryCode {
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    /// Display form: +1 -> '1', -1 -> '0'.
    pub fn to_bit_string(&self) -> String {
        self.bits
            .iter()
            .map(|&b| if b > 0 { '1' } else { '0' })
            .collect()
    }

    pub fn from_bit_string(s: &str) -> Result<Self> {
        let mut bits = Vec::with_capacity(s.len());
        for ch in s.chars() {
            match ch {
                '1' => bits.push(1),
                '0' => bits.push(-1),
                other => {
                    return Err(Error::Format {
                        path: "<bit string>".into(),
                        msg: format!("invalid bit character {:?}", other),
                    })
                }
            }
        }
        Ok(BinaryCode { bits })
    }
}

/// Sign binarization: +1 where the relaxed value is >= 0, else -1.
pub fn binarize(code: &RelaxedCode) -> BinaryCode {
    let bits = code
        .0
        .data()
        .iter()
        .map(|&v| if v >= 0.0 { 1i8 } else { -1i8 })
        .collect();
    BinaryCode { bits }
}

/// Image hash coder: flattened grid -> hidden affine + relu -> affine -> tanh.
#[derive(Clone, Debug)]
pub struct ImageHashHead {
    pub fc1: AffineParams,
    pub fc2: AffineParams,
}

pub struct ImageHashCache {
    flat: Tensor,
    pre_relu: Tensor,
    hidden: Tensor,
    code: Tensor,
    grid_shape: Vec<usize>,
}

impl ImageHashHead {
    pub fn init<R: Rng>(flat_dim: usize, hidden: usize, q: usize, rng: &mut R) -> Self {
        ImageHashHead {
            fc1: AffineParams::init(hidden, flat_dim, rng),
            fc2: AffineParams::init(q, hidden, rng),
        }
    }

    pub fn q(&self) -> usize {
        self.fc2.out_dim()
    }

    pub fn forward(&self, grid: &Tensor) -> Result<(RelaxedCode, ImageHashCache)> {
        if grid.len() != self.fc1.in_dim() {
            return Err(Error::Dim(format!(
                "feature grid with {} values does not match hash head input {}",
                grid.len(),
                self.fc1.in_dim()
            )));
        }
        let flat = grid.reshaped(&[grid.len()]);
        let pre_relu = affine_forward(&flat, &self.fc1)?;
        let hidden = relu_forward(&pre_relu);
        let pre_tanh = affine_forward(&hidden, &self.fc2)?;
        let code = tanh_forward(&pre_tanh);
        Ok((
            RelaxedCode(code.clone()),
            ImageHashCache {
                flat,
                pre_relu,
                hidden,
                code,
                grid_shape: grid.shape().to_vec(),
            },
        ))
    }

    /// Accumulates parameter gradients and returns the gradient with respect
    /// to the input feature grid.
    pub fn backward(&mut self, cache: &ImageHashCache, grad_code: &Tensor) -> Result<Tensor> {
        let g_pre_tanh = tanh_backward(&cache.code, grad_code);
        let g_hidden = affine_backward(&cache.hidden, &mut self.fc2, &g_pre_tanh)?;
        let g_pre = relu_backward(&cache.pre_relu, &g_hidden);
        let g_flat = affine_backward(&cache.flat, &mut self.fc1, &g_pre)?;
        Ok(g_flat.reshaped(&cache.grid_shape))
    }

    pub fn zero_grad(&mut self) {
        self.fc1.zero_grad();
        self.fc2.zero_grad();
    }
}

/// Text hash coder: one affine layer followed by tanh.
#[derive(Clone, Debug)]
pub struct TextHashHead {
    pub fc: AffineParams,
}

pub struct TextHashCache {
    feat: Tensor,
    code: Tensor,
}

impl TextHashHead {
    pub fn init<R: Rng>(txt_dim: usize, q: usize, rng: &mut R) -> Self {
        TextHashHead {
            fc: AffineParams::init(q, txt_dim, rng),
        }
    }

    pub fn q(&self) -> usize {
        self.fc.out_dim()
    }

    pub fn forward(&self, feat: &Tensor) -> Result<(RelaxedCode, TextHashCache)> {
        if feat.shape() != [self.fc.in_dim()] {
            return Err(Error::Dim(format!(
                "text feature shape {:?} does not match hash head input {}",
                feat.shape(),
                self.fc.in_dim()
            )));
        }
        let pre_tanh = affine_forward(feat, &self.fc)?;
        let code = tanh_forward(&pre_tanh);
        Ok((
            RelaxedCode(code.clone()),
            TextHashCache {
                feat: feat.clone(),
                code,
            },
        ))
    }

    pub fn backward(&mut self, cache: &TextHashCache, grad_code: &Tensor) -> Result<Tensor> {
        let g_pre_tanh = tanh_backward(&cache.code, grad_code);
        affine_backward(&cache.feat, &mut self.fc, &g_pre_tanh)
    }

    pub fn zero_grad(&mut self) {
        self.fc.zero_grad();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernel::finite_diff_check;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    #[test]
    fn zero_grid_zero_biases_gives_zero_code() {
        let mut head = ImageHashHead {
            fc1: AffineParams::zeros(4, 12),
            fc2: AffineParams::zeros(8, 4),
        };
        head.fc1.bias.value.fill(0.0);
        head.fc2.bias.value.fill(0.0);
        let grid = Tensor::zeros(&[2, 2, 3]);
        let (code, _) = head.forward(&grid).unwrap();
        assert!(code.0.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn code_length_matches_q() {
        let mut rng = StdRng::seed_from_u64(1);
        for q in [16usize, 32, 64] {
            let head = ImageHashHead::init(12, 6, q, &mut rng);
            let grid = Tensor::uniform(&[2, 2, 3], 1.0, &mut rng);
            let (code, _) = head.forward(&grid).unwrap();
            assert_eq!(code.len(), q);
        }
    }

    #[test]
    fn relaxed_codes_strictly_inside_unit_box() {
        let mut rng = StdRng::seed_from_u64(2);
        let head = TextHashHead::init(5, 16, &mut rng);
        let mut f = Tensor::uniform(&[5], 1.0, &mut rng);
        f.data_mut().iter_mut().for_each(|v| *v *= 3.0);
        let (code, _) = head.forward(&f).unwrap();
        for &v in code.0.data() {
            assert!(v > -1.0 && v < 1.0);
        }
    }

    #[test]
    fn text_head_is_deterministic() {
        let mut rng = StdRng::seed_from_u64(3);
        let head = TextHashHead::init(5, 8, &mut rng);
        let f = Tensor::uniform(&[5], 1.0, &mut rng);
        let (a, _) = head.forward(&f).unwrap();
        let (b, _) = head.forward(&f).unwrap();
        assert_eq!(a.0.data(), b.0.data());
    }

    #[test]
    fn grid_shape_mismatch_is_error() {
        let mut rng = StdRng::seed_from_u64(4);
        let head = ImageHashHead::init(12, 6, 8, &mut rng);
        let grid = Tensor::zeros(&[2, 2, 4]);
        assert!(matches!(head.forward(&grid), Err(Error::Dim(_))));
    }

    #[test]
    fn binarize_sign_rule_and_tie() {
        let code = RelaxedCode(Tensor::from_vec(&[2], vec![0.3, -0.7]));
        assert_eq!(binarize(&code).bits, vec![1, -1]);
        let tie = RelaxedCode(Tensor::from_vec(&[2], vec![0.0, -0.0]));
        // Exact zero maps to +1 (and -0.0 >= 0.0 in IEEE comparison).
        assert_eq!(binarize(&tie).bits, vec![1, 1]);
    }

    #[test]
    fn binarize_is_idempotent() {
        let code = RelaxedCode(Tensor::from_vec(&[3], vec![0.9, -0.2, 0.4]));
        let b1 = binarize(&code);
        let as_real = RelaxedCode(Tensor::from_vec(
            &[3],
            b1.bits.iter().map(|&b| b as f64).collect(),
        ));
        assert_eq!(binarize(&as_real), b1);
    }

    #[test]
    fn binarization_invariant_to_positive_rescaling() {
        let mut rng = StdRng::seed_from_u64(5);
        let v = Tensor::uniform(&[16], 1.0, &mut rng);
        let a = binarize(&RelaxedCode(v.clone()));
        let mut scaled = v.clone();
        scaled.data_mut().iter_mut().for_each(|x| *x *= 7.25);
        let b = binarize(&RelaxedCode(scaled));
        assert_eq!(a, b);
    }

    #[test]
    fn bit_string_round_trip() {
        let code = BinaryCode {
            bits: vec![1, -1, -1, 1, 1],
        };
        let s = code.to_bit_string();
        assert_eq!(s, "10011");
        assert_eq!(BinaryCode::from_bit_string(&s).unwrap(), code);
        assert!(BinaryCode::from_bit_string("10x1").is_err());
    }

    #[test]
    fn image_head_gradcheck() {
        let mut rng = StdRng::seed_from_u64(6);
        let head = ImageHashHead::init(12, 5, 4, &mut rng);
        let grid = Tensor::uniform(&[2, 2, 3], 1.0, &mut rng);
        let wsum = Tensor::uniform(&[4], 1.0, &mut rng);

        let mut hb = head.clone();
        let (code, cache) = hb.forward(&grid).unwrap();
        assert_eq!(code.len(), 4);
        let gin = hb.backward(&cache, &wsum).unwrap();

        let mut f = |gt: &Tensor| -> f64 {
            let (c, _) = head.forward(gt).unwrap();
            c.0.data().iter().zip(wsum.data()).map(|(a, b)| a * b).sum()
        };
        let rep = finite_diff_check(&mut f, &grid, &gin, 1e-4).unwrap();
        assert!(rep.passed, "grad_in rel err {}", rep.max_rel_err);

        let mut fw = |wt: &Tensor| -> f64 {
            let mut h2 = head.clone();
            h2.fc1.weight.value = wt.clone();
            let (c, _) = h2.forward(&grid).unwrap();
            c.0.data().iter().zip(wsum.data()).map(|(a, b)| a * b).sum()
        };
        let rep =
            finite_diff_check(&mut fw, &head.fc1.weight.value, &hb.fc1.weight.grad, 1e-4).unwrap();
        assert!(rep.passed, "grad_w rel err {}", rep.max_rel_err);
    }
}
