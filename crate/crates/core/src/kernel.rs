//! Differentiable numeric primitives with explicit forward and backward passes.
//!
//! Every higher-level component composes these functions, so the gradient
//! guarantees established here (central finite differences at rel-err 1e-4,
//! double precision) carry through the whole network. The one deliberate
//! exception is the threshold: its backward is the straight-through rule,
//! which passes the cotangent unchanged instead of the true (almost
//! everywhere zero) derivative.

use rand::Rng;

use crate::{Error, Result};

/// Dense row-major tensor of `f64` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; len],
        }
    }

    /// Builds a tensor from flat row-major data. Panics if the element count
    /// does not match the shape.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Self {
        let len: usize = shape.iter().product();
        assert_eq!(
            len,
            data.len(),
            "tensor data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Uniform values in [-s, s], used for parameter initialization.
    pub fn uniform<R: Rng>(shape: &[usize], s: f64, rng: &mut R) -> Self {
        let len: usize = shape.iter().product();
        let data = (0..len).map(|_| rng.gen_range(-s..s)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Reinterprets the same data under a new shape with equal element count.
    pub fn reshaped(&self, shape: &[usize]) -> Tensor {
        Tensor::from_vec(shape, self.data.clone())
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }
}

/// A value tensor paired with its gradient accumulator.
#[derive(Clone, Debug)]
pub struct DualTensor {
    pub value: Tensor,
    pub grad: Tensor,
}

impl DualTensor {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        DualTensor { value, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Weight matrix (out x in) and bias vector (out) of one affine layer.
#[derive(Clone, Debug)]
pub struct AffineParams {
    pub weight: DualTensor,
    pub bias: DualTensor,
}

impl AffineParams {
    /// Uniform init in [-s, s] with s = 1/sqrt(fan_in).
    pub fn init<R: Rng>(out_dim: usize, in_dim: usize, rng: &mut R) -> Self {
        let s = 1.0 / (in_dim as f64).sqrt();
        AffineParams {
            weight: DualTensor::new(Tensor::uniform(&[out_dim, in_dim], s, rng)),
            bias: DualTensor::new(Tensor::uniform(&[out_dim], s, rng)),
        }
    }

    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        AffineParams {
            weight: DualTensor::new(Tensor::zeros(&[out_dim, in_dim])),
            bias: DualTensor::new(Tensor::zeros(&[out_dim])),
        }
    }

    pub fn out_dim(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn in_dim(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn zero_grad(&mut self) {
        self.weight.zero_grad();
        self.bias.zero_grad();
    }
}

fn check_affine_input(x: &Tensor, params: &AffineParams) -> Result<(usize, usize)> {
    let in_dim = params.in_dim();
    let (batch, inner) = match x.shape() {
        [n] => (1usize, *n),
        [b, n] => (*b, *n),
        other => {
            return Err(Error::Dim(format!(
                "affine input must be 1-D or 2-D, got {:?}",
                other
            )))
        }
    };
    if inner != in_dim {
        return Err(Error::Dim(format!(
            "affine input extent {} does not match weight in-dim {}",
            inner, in_dim
        )));
    }
    Ok((batch, in_dim))
}

/// y = W x + b, applied per row when `x` has a leading batch extent.
pub fn affine_forward(x: &Tensor, params: &AffineParams) -> Result<Tensor> {
    let (batch, in_dim) = check_affine_input(x, params)?;
    let out_dim = params.out_dim();
    let w = params.weight.value.data();
    let b = params.bias.value.data();
    let mut out = vec![0.0; batch * out_dim];
    for bi in 0..batch {
        let xi = &x.data()[bi * in_dim..(bi + 1) * in_dim];
        let yi = &mut out[bi * out_dim..(bi + 1) * out_dim];
        for o in 0..out_dim {
            let row = &w[o * in_dim..(o + 1) * in_dim];
            let mut acc = b[o];
            for (wv, xv) in row.iter().zip(xi.iter()) {
                acc += wv * xv;
            }
            yi[o] = acc;
        }
    }
    let shape: Vec<usize> = if x.shape().len() == 1 {
        vec![out_dim]
    } else {
        vec![batch, out_dim]
    };
    Ok(Tensor::from_vec(&shape, out))
}

/// Reverse rule for `affine_forward`. Accumulates dW = g (outer) x and
/// db = g (summed over the batch) into the parameter grads and returns
/// grad_x = W^T g.
pub fn affine_backward(x: &Tensor, params: &mut AffineParams, grad_out: &Tensor) -> Result<Tensor> {
    let (batch, in_dim) = check_affine_input(x, params)?;
    let out_dim = params.out_dim();
    let expected: usize = batch * out_dim;
    if grad_out.len() != expected {
        return Err(Error::Dim(format!(
            "affine grad_out has {} elements, expected {}",
            grad_out.len(),
            expected
        )));
    }
    let w = params.weight.value.data().to_vec();
    let gw = params.weight.grad.data_mut();
    let mut gx = vec![0.0; batch * in_dim];
    for bi in 0..batch {
        let xi = &x.data()[bi * in_dim..(bi + 1) * in_dim];
        let gi = &grad_out.data()[bi * out_dim..(bi + 1) * out_dim];
        let gxi = &mut gx[bi * in_dim..(bi + 1) * in_dim];
        for o in 0..out_dim {
            let g = gi[o];
            if g == 0.0 {
                continue;
            }
            let row = &w[o * in_dim..(o + 1) * in_dim];
            let grow = &mut gw[o * in_dim..(o + 1) * in_dim];
            for i in 0..in_dim {
                grow[i] += g * xi[i];
                gxi[i] += g * row[i];
            }
        }
    }
    let gb = params.bias.grad.data_mut();
    for bi in 0..batch {
        let gi = &grad_out.data()[bi * out_dim..(bi + 1) * out_dim];
        for o in 0..out_dim {
            gb[o] += gi[o];
        }
    }
    Ok(Tensor::from_vec(x.shape(), gx))
}

/// Elementwise max(0, x).
pub fn relu_forward(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::from_vec(x.shape(), data)
}

/// Masks the cotangent where x <= 0 (subgradient at 0 defined as 0).
pub fn relu_backward(x: &Tensor, grad_out: &Tensor) -> Tensor {
    assert_eq!(x.shape(), grad_out.shape(), "relu backward shape mismatch");
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&xv, &g)| if xv > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

/// Elementwise tanh.
pub fn tanh_forward(x: &Tensor) -> Tensor {
    let data = x.data().iter().map(|&v| v.tanh()).collect();
    Tensor::from_vec(x.shape(), data)
}

/// Backward for tanh given the forward output y: (1 - y^2) * grad_out.
pub fn tanh_backward(y: &Tensor, grad_out: &Tensor) -> Tensor {
    assert_eq!(y.shape(), grad_out.shape(), "tanh backward shape mismatch");
    let data = y
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&yv, &g)| (1.0 - yv * yv) * g)
        .collect();
    Tensor::from_vec(y.shape(), data)
}

/// Softmax over every element of the tensor (the whole grid forms one
/// probability distribution). Max-subtracted for stability: the result sums
/// to 1 and is strictly positive for any finite input.
pub fn grid_softmax_forward(m: &Tensor) -> Tensor {
    let max = m.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut data: Vec<f64> = m.data().iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = data.iter().sum();
    data.iter_mut().for_each(|v| *v /= sum);
    Tensor::from_vec(m.shape(), data)
}

/// Jacobian-vector rule for the whole-grid softmax:
/// grad_m = p * (grad_out - sum(grad_out * p)).
pub fn grid_softmax_backward(p: &Tensor, grad_out: &Tensor) -> Tensor {
    assert_eq!(
        p.shape(),
        grad_out.shape(),
        "softmax backward shape mismatch"
    );
    let dot: f64 = p
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&pv, &g)| pv * g)
        .sum();
    let data = p
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&pv, &g)| pv * (g - dot))
        .collect();
    Tensor::from_vec(p.shape(), data)
}

/// Binary threshold: 1 where p >= alpha, 0 elsewhere. The comparison is
/// inclusive, so an exactly uniform distribution thresholded at 1/len is
/// all ones.
pub fn threshold_forward(p: &Tensor, alpha: f64) -> Tensor {
    assert!(alpha > 0.0, "threshold alpha must be positive");
    let data = p
        .data()
        .iter()
        .map(|&v| if v >= alpha { 1.0 } else { 0.0 })
        .collect();
    Tensor::from_vec(p.shape(), data)
}

/// Straight-through estimator: the cotangent at p is the cotangent at z,
/// verbatim. The true derivative of the threshold is zero almost everywhere
/// and would block backpropagation.
pub fn threshold_ste_backward(grad_out: &Tensor) -> Tensor {
    grad_out.clone()
}

/// Outcome of one finite-difference gradient comparison.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Step used for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Compares an analytic gradient against central finite differences of `f`
/// at `x`. Relative error per element uses max(|analytic|, |numeric|) as the
/// denominator, falling back to absolute error when both are tiny.
pub fn finite_diff_check(
    f: &mut dyn FnMut(&Tensor) -> f64,
    x: &Tensor,
    analytic_grad: &Tensor,
    tol: f64,
) -> Result<GradCheckReport> {
    assert_eq!(x.shape(), analytic_grad.shape(), "gradcheck shape mismatch");
    if !f(x).is_finite() {
        return Err(Error::NonFinite("f(x) in finite_diff_check".into()));
    }
    let mut probe = x.clone();
    let mut max_rel_err = 0.0f64;
    let mut worst_index = 0usize;
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + FD_STEP;
        let fp = f(&probe);
        probe.data_mut()[i] = orig - FD_STEP;
        let fm = f(&probe);
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!(
                "f(x +/- h) at element {} in finite_diff_check",
                i
            )));
        }
        let numeric = (fp - fm) / (2.0 * FD_STEP);
        let analytic = analytic_grad.data()[i];
        let denom = analytic.abs().max(numeric.abs());
        let err = if denom < 1e-7 {
            (analytic - numeric).abs()
        } else {
            (analytic - numeric).abs() / denom
        };
        if err > max_rel_err {
            max_rel_err = err;
            worst_index = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_err,
        worst_index,
        tol,
        passed: max_rel_err <= tol,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn affine_identity_passes_input_through() {
        let x = Tensor::from_vec(&[2], vec![1.0, 0.0]);
        let mut p = AffineParams::zeros(2, 2);
        p.weight.value.data_mut()[0] = 1.0;
        p.weight.value.data_mut()[3] = 1.0;
        let y = affine_forward(&x, &p).unwrap();
        assert_eq!(y.data(), &[1.0, 0.0]);
    }

    #[test]
    fn affine_hand_case() {
        // x=[1,2], W=[[1,1],[0,1]], b=[1,-1] -> [1*1+1*2+1, 0*1+1*2-1] = [4,1]
        let x = Tensor::from_vec(&[2], vec![1.0, 2.0]);
        let mut p = AffineParams::zeros(2, 2);
        p.weight.value = Tensor::from_vec(&[2, 2], vec![1.0, 1.0, 0.0, 1.0]);
        p.bias.value = Tensor::from_vec(&[2], vec![1.0, -1.0]);
        let y = affine_forward(&x, &p).unwrap();
        assert_eq!(y.data(), &[4.0, 1.0]);
    }

    #[test]
    fn affine_zero_input_yields_bias() {
        let x = Tensor::zeros(&[3]);
        let mut rng = StdRng::seed_from_u64(7);
        let mut p = AffineParams::init(2, 3, &mut rng);
        p.bias.value = Tensor::from_vec(&[2], vec![5.0, 5.0]);
        let y = affine_forward(&x, &p).unwrap();
        assert_eq!(y.data(), &[5.0, 5.0]);
    }

    #[test]
    fn affine_batched_matches_per_row() {
        let mut rng = StdRng::seed_from_u64(3);
        let p = AffineParams::init(3, 4, &mut rng);
        let x = Tensor::uniform(&[5, 4], 1.0, &mut rng);
        let batched = affine_forward(&x, &p).unwrap();
        for bi in 0..5 {
            let row = Tensor::from_vec(&[4], x.data()[bi * 4..(bi + 1) * 4].to_vec());
            let single = affine_forward(&row, &p).unwrap();
            assert_eq!(&batched.data()[bi * 3..(bi + 1) * 3], single.data());
        }
    }

    #[test]
    fn affine_shape_mismatch_is_error() {
        let x = Tensor::zeros(&[3]);
        let p = AffineParams::zeros(2, 2);
        assert!(matches!(affine_forward(&x, &p), Err(Error::Dim(_))));
    }

    #[test]
    fn affine_backward_zero_cotangent() {
        let mut rng = StdRng::seed_from_u64(11);
        let mut p = AffineParams::init(3, 2, &mut rng);
        let x = Tensor::uniform(&[2], 1.0, &mut rng);
        let g = Tensor::zeros(&[3]);
        let gx = affine_backward(&x, &mut p, &g).unwrap();
        assert!(gx.data().iter().all(|&v| v == 0.0));
        assert!(p.weight.grad.data().iter().all(|&v| v == 0.0));
        assert!(p.bias.grad.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn affine_backward_identity_weight_passes_grad() {
        let mut p = AffineParams::zeros(2, 2);
        p.weight.value = Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let x = Tensor::from_vec(&[2], vec![0.3, -0.4]);
        let g = Tensor::from_vec(&[2], vec![2.0, -7.0]);
        let gx = affine_backward(&x, &mut p, &g).unwrap();
        assert_eq!(gx.data(), g.data());
    }

    #[test]
    fn affine_backward_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(21);
        for _ in 0..20 {
            let p = AffineParams::init(3, 4, &mut rng);
            let x = Tensor::uniform(&[4], 1.0, &mut rng);
            let g = Tensor::uniform(&[3], 1.0, &mut rng);

            // loss = <g, affine(x)>; check grad wrt x.
            let mut pc = p.clone();
            let gx = affine_backward(&x, &mut pc, &g).unwrap();
            let mut f = |xt: &Tensor| -> f64 {
                let y = affine_forward(xt, &p).unwrap();
                y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
            };
            let rep = finite_diff_check(&mut f, &x, &gx, 1e-4).unwrap();
            assert!(rep.passed, "grad_x rel err {}", rep.max_rel_err);

            // Check grad wrt W (flattened) and b.
            let mut fw = |wt: &Tensor| -> f64 {
                let mut pw = p.clone();
                pw.weight.value = wt.clone();
                let y = affine_forward(&x, &pw).unwrap();
                y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
            };
            let rep = finite_diff_check(&mut fw, &p.weight.value, &pc.weight.grad, 1e-4).unwrap();
            assert!(rep.passed, "grad_W rel err {}", rep.max_rel_err);

            let mut fb = |bt: &Tensor| -> f64 {
                let mut pb = p.clone();
                pb.bias.value = bt.clone();
                let y = affine_forward(&x, &pb).unwrap();
                y.data().iter().zip(g.data()).map(|(a, b)| a * b).sum()
            };
            let rep = finite_diff_check(&mut fb, &p.bias.value, &pc.bias.grad, 1e-4).unwrap();
            assert!(rep.passed, "grad_b rel err {}", rep.max_rel_err);
        }
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let mut rng = StdRng::seed_from_u64(5);
        let mut p = AffineParams::init(2, 3, &mut rng);
        let x = Tensor::uniform(&[3], 1.0, &mut rng);
        let g = Tensor::uniform(&[2], 1.0, &mut rng);
        affine_backward(&x, &mut p, &g).unwrap();
        let once = p.weight.grad.clone();
        affine_backward(&x, &mut p, &g).unwrap();
        for (a, b) in p.weight.grad.data().iter().zip(once.data()) {
            assert_eq!(*a, 2.0 * b);
        }
    }

    #[test]
    fn relu_sign_cases() {
        let x = Tensor::from_vec(&[3], vec![-1.0, 0.0, 2.0]);
        assert_eq!(relu_forward(&x).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn relu_backward_mask_rule() {
        let x = Tensor::from_vec(&[2], vec![-1.0, 2.0]);
        let g = Tensor::from_vec(&[2], vec![5.0, 5.0]);
        assert_eq!(relu_backward(&x, &g).data(), &[0.0, 5.0]);
    }

    #[test]
    fn relu_backward_matches_finite_differences_away_from_kink() {
        let mut rng = StdRng::seed_from_u64(31);
        for _ in 0..20 {
            let mut x = Tensor::uniform(&[8], 1.0, &mut rng);
            // Keep all samples away from the kink at 0.
            for v in x.data_mut() {
                if v.abs() < 1e-3 {
                    *v += 0.1;
                }
            }
            let g = Tensor::uniform(&[8], 1.0, &mut rng);
            let gx = relu_backward(&x, &g);
            let mut f = |xt: &Tensor| -> f64 {
                relu_forward(xt)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(a, b)| a * b)
                    .sum()
            };
            let rep = finite_diff_check(&mut f, &x, &gx, 1e-4).unwrap();
            assert!(rep.passed, "relu rel err {}", rep.max_rel_err);
        }
    }

    #[test]
    fn tanh_odd_and_bounded() {
        let x = Tensor::from_vec(&[3], vec![0.0, 15.0, -15.0]);
        let y = tanh_forward(&x);
        assert_eq!(y.data()[0], 0.0);
        assert!(y.data()[1] < 1.0 && y.data()[1] > 0.0);
        assert!(y.data()[2] > -1.0 && y.data()[2] < 0.0);
        // Far in the tails f64 rounding saturates to exactly +/-1; the
        // magnitude never exceeds 1.
        let extreme = tanh_forward(&Tensor::from_vec(&[2], vec![1e3, -1e3]));
        assert!(extreme.data().iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn tanh_backward_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(41);
        for _ in 0..20 {
            let x = Tensor::uniform(&[6], 2.0, &mut rng);
            let g = Tensor::uniform(&[6], 1.0, &mut rng);
            let y = tanh_forward(&x);
            let gx = tanh_backward(&y, &g);
            let mut f = |xt: &Tensor| -> f64 {
                tanh_forward(xt)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(a, b)| a * b)
                    .sum()
            };
            let rep = finite_diff_check(&mut f, &x, &gx, 1e-4).unwrap();
            assert!(rep.passed, "tanh rel err {}", rep.max_rel_err);
        }
    }

    #[test]
    fn softmax_uniform_case() {
        let m = Tensor::from_vec(&[2, 3], vec![4.2; 6]);
        let p = grid_softmax_forward(&m);
        for &v in p.data() {
            assert!(close(v, 1.0 / 6.0, 1e-12));
        }
    }

    #[test]
    fn softmax_hand_case() {
        // m = [[ln 3, 0], [0, 0]] -> p = [3/6, 1/6, 1/6, 1/6]
        let m = Tensor::from_vec(&[2, 2], vec![3.0f64.ln(), 0.0, 0.0, 0.0]);
        let p = grid_softmax_forward(&m);
        assert!(close(p.data()[0], 0.5, 1e-12));
        for &v in &p.data()[1..] {
            assert!(close(v, 1.0 / 6.0, 1e-12));
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let mut rng = StdRng::seed_from_u64(51);
        let m = Tensor::uniform(&[3, 3], 2.0, &mut rng);
        let mut shifted = m.clone();
        shifted.data_mut().iter_mut().for_each(|v| *v += 123.456);
        let p0 = grid_softmax_forward(&m);
        let p1 = grid_softmax_forward(&shifted);
        for (a, b) in p0.data().iter().zip(p1.data()) {
            assert!(close(*a, *b, 1e-12));
        }
    }

    #[test]
    fn softmax_survives_large_inputs() {
        let m = Tensor::from_vec(&[2], vec![1e4, -1e4]);
        let p = grid_softmax_forward(&m);
        assert!(p.all_finite());
        assert!(close(p.data().iter().sum::<f64>(), 1.0, 1e-9));
    }

    #[test]
    fn softmax_backward_constant_cotangent_annihilated() {
        let mut rng = StdRng::seed_from_u64(61);
        let m = Tensor::uniform(&[2, 4], 2.0, &mut rng);
        let p = grid_softmax_forward(&m);
        let g = Tensor::from_vec(&[2, 4], vec![3.7; 8]);
        let gm = grid_softmax_backward(&p, &g);
        for &v in gm.data() {
            assert!(v.abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_backward_uniform_one_hot_case() {
        // Uniform p over 4 cells, one-hot cotangent at cell 0:
        // grad_m = p * (onehot - 1/(HW)).
        let p = Tensor::from_vec(&[2, 2], vec![0.25; 4]);
        let mut g = Tensor::zeros(&[2, 2]);
        g.data_mut()[0] = 1.0;
        let gm = grid_softmax_backward(&p, &g);
        assert!(close(gm.data()[0], 0.25 * (1.0 - 0.25), 1e-12));
        for &v in &gm.data()[1..] {
            assert!(close(v, 0.25 * (0.0 - 0.25), 1e-12));
        }
    }

    #[test]
    fn softmax_backward_matches_finite_differences() {
        let mut rng = StdRng::seed_from_u64(71);
        for _ in 0..20 {
            let m = Tensor::uniform(&[3, 4], 2.0, &mut rng);
            let g = Tensor::uniform(&[3, 4], 1.0, &mut rng);
            let p = grid_softmax_forward(&m);
            let gm = grid_softmax_backward(&p, &g);
            let mut f = |mt: &Tensor| -> f64 {
                grid_softmax_forward(mt)
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(a, b)| a * b)
                    .sum()
            };
            let rep = finite_diff_check(&mut f, &m, &gm, 1e-4).unwrap();
            assert!(rep.passed, "softmax rel err {}", rep.max_rel_err);
        }
    }

    #[test]
    fn threshold_uniform_boundary_is_all_ones() {
        let hw = 6;
        let p = Tensor::from_vec(&[2, 3], vec![1.0 / hw as f64; hw]);
        let z = threshold_forward(&p, 1.0 / hw as f64);
        assert!(z.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn threshold_hand_case() {
        let p = Tensor::from_vec(&[2, 2], vec![0.5, 0.3, 0.1, 0.1]);
        let z = threshold_forward(&p, 0.25);
        assert_eq!(z.data(), &[1.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn threshold_all_below_is_all_zeros() {
        let p = Tensor::from_vec(&[3], vec![0.1, 0.2, 0.15]);
        let z = threshold_forward(&p, 0.5);
        assert!(z.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn ste_backward_is_identity() {
        let g = Tensor::from_vec(&[4], vec![1.5, -2.25, 0.0, 1e-9]);
        let back = threshold_ste_backward(&g);
        assert_eq!(back.data(), g.data());
        let zero = threshold_ste_backward(&Tensor::zeros(&[4]));
        assert!(zero.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradcheck_passes_for_sum_of_tanh() {
        let mut rng = StdRng::seed_from_u64(81);
        let x = Tensor::uniform(&[10], 2.0, &mut rng);
        let y = tanh_forward(&x);
        let analytic = tanh_backward(&y, &Tensor::from_vec(&[10], vec![1.0; 10]));
        let mut f = |xt: &Tensor| tanh_forward(xt).data().iter().sum();
        let rep = finite_diff_check(&mut f, &x, &analytic, 1e-4).unwrap();
        assert!(rep.passed);
    }

    #[test]
    fn gradcheck_rejects_non_finite() {
        let x = Tensor::from_vec(&[1], vec![0.0]);
        let analytic = Tensor::zeros(&[1]);
        let mut f = |_: &Tensor| f64::NAN;
        assert!(matches!(
            finite_diff_check(&mut f, &x, &analytic, 1e-4),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn gradcheck_detects_sign_bug() {
        // A deliberately wrong gradient (sign flipped) must fail the check.
        let mut rng = StdRng::seed_from_u64(91);
        let x = Tensor::uniform(&[6], 2.0, &mut rng);
        let y = tanh_forward(&x);
        let mut wrong = tanh_backward(&y, &Tensor::from_vec(&[6], vec![1.0; 6]));
        wrong.data_mut().iter_mut().for_each(|v| *v = -*v);
        let mut f = |xt: &Tensor| tanh_forward(xt).data().iter().sum();
        let rep = finite_diff_check(&mut f, &x, &wrong, 1e-4).unwrap();
        assert!(!rep.passed);
    }

    proptest! {
        #[test]
        fn softmax_sums_to_one_and_positive(vals in proptest::collection::vec(-50.0f64..50.0, 1..64)) {
            let n = vals.len();
            let m = Tensor::from_vec(&[n], vals);
            let p = grid_softmax_forward(&m);
            let sum: f64 = p.data().iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-9);
            prop_assert!(p.data().iter().all(|&v| v > 0.0));
        }

        #[test]
        fn threshold_is_binary_and_monotone(
            vals in proptest::collection::vec(0.0f64..1.0, 2..32),
            raise_idx in 0usize..32,
            alpha in 0.01f64..0.9,
        ) {
            let n = vals.len();
            let idx = raise_idx % n;
            let p = Tensor::from_vec(&[n], vals.clone());
            let z = threshold_forward(&p, alpha);
            prop_assert!(z.data().iter().all(|&v| v == 0.0 || v == 1.0));

            // Raising one entry never turns any 1 into a 0.
            let mut raised = vals;
            raised[idx] += 0.5;
            let z2 = threshold_forward(&Tensor::from_vec(&[n], raised), alpha);
            for (a, b) in z.data().iter().zip(z2.data()) {
                prop_assert!(*b >= *a);
            }
        }
    }
}
