//! Finite-difference verification suite covering every differentiable
//! primitive, the encoder/mask/hash chains and the composed objective with
//! the threshold replaced by its identity hook.
//!
//! The threshold itself is exempt from finite differences by construction
//! (its backward is the straight-through rule, a biased estimator); the
//! suite instead asserts the pass-through identity bitwise.

use rand::rngs::StdRng;
use rand::SeedableRng;

use crate::attention::MaskMode;
use crate::encoders::{ImageInstance, TextInstance};
use crate::kernel::{
    affine_backward, affine_forward, finite_diff_check, grid_softmax_backward,
    grid_softmax_forward, relu_backward, relu_forward, tanh_backward, tanh_forward,
    threshold_ste_backward, AffineParams, Tensor,
};
use crate::losses::{
    adversarial_loss, cross_modal_loss, sample_triplets, triplet_hinge, AdversarialTriplets,
    CrossModalTriplets, LossConfig, Triplet,
};
use crate::model::{Model, ModelDims, ParamGroup};
use crate::{data, Result};

/// Worst relative error observed for one checked operation.
#[derive(Clone, Debug)]
pub struct OpReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

impl OpReport {
    fn new(name: &str, max_rel_err: f64, tol: f64) -> Self {
        OpReport {
            name: name.to_string(),
            max_rel_err,
            tol,
            passed: max_rel_err <= tol,
        }
    }
}

const INSTANCES: usize = 20;

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

fn check_affine(seed: u64, tol: f64) -> Result<OpReport> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..INSTANCES {
        let p = AffineParams::init(5, 4, &mut rng);
        let x = Tensor::uniform(&[4], 1.0, &mut rng);
        let g = Tensor::uniform(&[5], 1.0, &mut rng);
        let mut pb = p.clone();
        let gx = affine_backward(&x, &mut pb, &g)?;

        let mut fx = |t: &Tensor| dot(&affine_forward(t, &p).unwrap(), &g);
        worst = worst.max(finite_diff_check(&mut fx, &x, &gx, tol)?.max_rel_err);

        let mut fw = |t: &Tensor| {
            let mut p2 = p.clone();
            p2.weight.value = t.clone();
            dot(&affine_forward(&x, &p2).unwrap(), &g)
        };
        worst = worst
            .max(finite_diff_check(&mut fw, &p.weight.value, &pb.weight.grad, tol)?.max_rel_err);

        let mut fb = |t: &Tensor| {
            let mut p2 = p.clone();
            p2.bias.value = t.clone();
            dot(&affine_forward(&x, &p2).unwrap(), &g)
        };
        worst =
            worst.max(finite_diff_check(&mut fb, &p.bias.value, &pb.bias.grad, tol)?.max_rel_err);
    }
    Ok(OpReport::new("affine", worst, tol))
}

fn check_relu(seed: u64, tol: f64) -> Result<OpReport> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..INSTANCES {
        let mut x = Tensor::uniform(&[12], 1.0, &mut rng);
        for v in x.data_mut() {
            if v.abs() < 1e-3 {
                *v += 0.05; // keep samples away from the kink
            }
        }
        let g = Tensor::uniform(&[12], 1.0, &mut rng);
        let gx = relu_backward(&x, &g);
        let mut f = |t: &Tensor| dot(&relu_forward(t), &g);
        worst = worst.max(finite_diff_check(&mut f, &x, &gx, tol)?.max_rel_err);
    }
    Ok(OpReport::new("relu", worst, tol))
}

fn check_tanh(seed: u64, tol: f64) -> Result<OpReport> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..INSTANCES {
        let x = Tensor::uniform(&[12], 2.0, &mut rng);
        let g = Tensor::uniform(&[12], 1.0, &mut rng);
        let y = tanh_forward(&x);
        let gx = tanh_backward(&y, &g);
        let mut f = |t: &Tensor| dot(&tanh_forward(t), &g);
        worst = worst.max(finite_diff_check(&mut f, &x, &gx, tol)?.max_rel_err);
    }
    Ok(OpReport::new("tanh", worst, tol))
}

fn check_softmax(seed: u64, tol: f64) -> Result<OpReport> {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..INSTANCES {
        let m = Tensor::uniform(&[4, 4], 2.0, &mut rng);
        let g = Tensor::uniform(&[4, 4], 1.0, &mut rng);
        let p = grid_softmax_forward(&m);
        let gm = grid_softmax_backward(&p, &g);
        let mut f = |t: &Tensor| dot(&grid_softmax_forward(t), &g);
        worst = worst.max(finite_diff_check(&mut f, &m, &gm, tol)?.max_rel_err);
    }
    Ok(OpReport::new("grid_softmax", worst, tol))
}

/// Exact identity, not finite differences: the straight-through rule.
fn check_ste(seed: u64, tol: f64) -> OpReport {
    let mut rng = StdRng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..INSTANCES {
        let g = Tensor::uniform(&[4, 4], 2.0, &mut rng);
        let back = threshold_ste_backward(&g);
        for (a, b) in back.data().iter().zip(g.data()) {
            if a.to_bits() != b.to_bits() {
                worst = f64::INFINITY;
            }
        }
    }
    OpReport::new("threshold_ste_passthrough", worst, tol)
}

fn check_hinge(seed: u64, tol: f64) -> Result<OpReport> {
    let mut rng = StdRng::seed_from_u64(seed);
    let cfg = LossConfig {
        margin: 0.5,
        squared: true,
        weights: [1.0; 6],
    };
    let mut worst = 0.0f64;
    let mut checked = 0;
    while checked < INSTANCES {
        let a = Tensor::uniform(&[8], 1.0, &mut rng);
        let p = Tensor::uniform(&[8], 1.0, &mut rng);
        let n = Tensor::uniform(&[8], 1.0, &mut rng);
        let (val, ga, _, _) = triplet_hinge(&a, &p, &n, &cfg)?;
        // Away from the hinge kink: the active branch must hold with slack.
        let dp: f64 = a
            .data()
            .iter()
            .zip(p.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        let dn: f64 = a
            .data()
            .iter()
            .zip(n.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        if (cfg.margin + dp - dn).abs() < 1e-3 || val == 0.0 {
            continue;
        }
        let mut f = |t: &Tensor| triplet_hinge(t, &p, &n, &cfg).unwrap().0;
        worst = worst.max(finite_diff_check(&mut f, &a, &ga, tol)?.max_rel_err);
        checked += 1;
    }
    Ok(OpReport::new("triplet_hinge", worst, tol))
}

fn suite_dims() -> ModelDims {
    ModelDims {
        img_h: 8,
        img_w: 8,
        img_c: 1,
        patch: 2,
        feat_c: 3,
        vocab: 12,
        txt_hidden: 8,
        txt_dim: 6,
        hash_hidden: 16,
        q: 8,
    }
}

fn random_inputs(
    dims: &ModelDims,
    count: usize,
    rng: &mut StdRng,
) -> (Vec<ImageInstance>, Vec<TextInstance>) {
    let images = (0..count)
        .map(|_| {
            let mut px = Tensor::uniform(&[dims.img_h, dims.img_w, dims.img_c], 0.5, rng);
            px.data_mut().iter_mut().for_each(|v| *v = v.abs());
            ImageInstance { pixels: px }
        })
        .collect();
    let texts = (0..count)
        .map(|_| {
            let mut bow = Tensor::uniform(&[dims.vocab], 1.0, rng);
            bow.data_mut().iter_mut().for_each(|v| *v = v.abs());
            TextInstance { bow }
        })
        .collect();
    (images, texts)
}

fn check_encoders(seed: u64, tol: f64) -> Result<OpReport> {
    let dims = suite_dims();
    let mut rng = StdRng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..INSTANCES {
        let model = Model::init(dims, seed.wrapping_add(i as u64))?;
        let (images, texts) = random_inputs(&dims, 1, &mut rng);

        // Image encoder: loss = sum of the feature grid.
        let mut mb = model.clone();
        let (grid, cache) = mb.img_enc.forward(&images[0])?;
        let ones = Tensor::from_vec(grid.shape(), vec![1.0; grid.len()]);
        mb.img_enc.backward(&cache, &ones)?;
        let mut f = |t: &Tensor| {
            let mut m2 = model.clone();
            m2.img_enc.patch_proj.weight.value = t.clone();
            let (g, _) = m2.img_enc.forward(&images[0]).unwrap();
            g.data().iter().sum()
        };
        worst = worst.max(
            finite_diff_check(
                &mut f,
                &model.img_enc.patch_proj.weight.value,
                &mb.img_enc.patch_proj.weight.grad,
                tol,
            )?
            .max_rel_err,
        );

        // Text encoder: loss = sum of the feature vector.
        let mut tb = model.clone();
        let (feat, tcache) = tb.txt_enc.forward(&texts[0])?;
        let ones = Tensor::from_vec(&[feat.len()], vec![1.0; feat.len()]);
        tb.txt_enc.backward(&tcache, &ones)?;
        let mut f = |t: &Tensor| {
            let mut m2 = model.clone();
            m2.txt_enc.fc1.weight.value = t.clone();
            let (v, _) = m2.txt_enc.forward(&texts[0]).unwrap();
            v.data().iter().sum()
        };
        worst = worst.max(
            finite_diff_check(
                &mut f,
                &model.txt_enc.fc1.weight.value,
                &tb.txt_enc.fc1.weight.grad,
                tol,
            )?
            .max_rel_err,
        );
    }
    Ok(OpReport::new("encoders", worst, tol))
}

fn check_hash_heads(seed: u64, tol: f64) -> Result<OpReport> {
    let dims = suite_dims();
    let mut rng = StdRng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for i in 0..INSTANCES {
        let model = Model::init(dims, seed.wrapping_add(100 + i as u64))?;
        let grid = Tensor::uniform(&[dims.grid_h(), dims.grid_w(), dims.feat_c], 1.0, &mut rng);
        let w = Tensor::uniform(&[dims.q], 1.0, &mut rng);

        let mut mb = model.clone();
        let (_, cache) = mb.img_hash.forward(&grid)?;
        let gin = mb.img_hash.backward(&cache, &w)?;
        let mut f = |t: &Tensor| {
            let (c, _) = model.img_hash.forward(t).unwrap();
            dot(&c.0, &w)
        };
        worst = worst.max(finite_diff_check(&mut f, &grid, &gin, tol)?.max_rel_err);

        let feat = Tensor::uniform(&[dims.txt_dim], 1.0, &mut rng);
        let mut tb = model.clone();
        let (_, tcache) = tb.txt_hash.forward(&feat)?;
        tb.txt_hash.backward(&tcache, &w)?;
        let mut f = |t: &Tensor| {
            let mut m2 = model.clone();
            m2.txt_hash.fc.weight.value = t.clone();
            let (c, _) = m2.txt_hash.forward(&feat).unwrap();
            dot(&c.0, &w)
        };
        worst = worst.max(
            finite_diff_check(
                &mut f,
                &model.txt_hash.fc.weight.value,
                &tb.txt_hash.fc.weight.grad,
                tol,
            )?
            .max_rel_err,
        );
    }
    Ok(OpReport::new("hash_heads", worst, tol))
}

/// Full pipeline + objective with the soft threshold hook, checked against
/// finite differences over every parameter tensor. The batch holds 10
/// aligned pairs (20 instances).
fn check_composed(seed: u64, tol: f64) -> Result<OpReport> {
    let dims = suite_dims();
    let batch = 10usize;
    let mut rng = StdRng::seed_from_u64(seed.wrapping_add(777));
    let model = Model::init(dims, seed.wrapping_add(13))?;
    let (images, texts) = random_inputs(&dims, batch, &mut rng);
    let labels: Vec<Vec<u16>> = (0..batch).map(|i| vec![(i % 2) as u16]).collect();
    let sim = data::build_similarity(&labels)?;
    let indices: Vec<usize> = (0..batch).collect();
    let cfg = LossConfig {
        margin: 1.0,
        squared: true,
        weights: [1.0; 6],
    };
    let mut trng = StdRng::seed_from_u64(seed.wrapping_add(31));
    let cm_triplets = CrossModalTriplets {
        t2i: sample_triplets(&sim, &indices, 2, &mut trng),
        i2t: sample_triplets(&sim, &indices, 2, &mut trng),
        i2i: sample_triplets(&sim, &indices, 2, &mut trng),
        t2t: sample_triplets(&sim, &indices, 2, &mut trng),
    };
    let adv_triplets = AdversarialTriplets {
        t2i_bg: sample_triplets(&sim, &indices, 2, &mut trng),
        i2t_bg: sample_triplets(&sim, &indices, 2, &mut trng),
    };

    struct Tables {
        img_fg: Vec<Tensor>,
        txt_fg: Vec<Tensor>,
        img_bg: Vec<Tensor>,
        txt_bg: Vec<Tensor>,
    }
    let forward_tables = |m: &Model| -> Result<Tables> {
        let mut t = Tables {
            img_fg: Vec::new(),
            txt_fg: Vec::new(),
            img_bg: Vec::new(),
            txt_bg: Vec::new(),
        };
        for i in 0..batch {
            let fi = m.forward_image(&images[i], MaskMode::Soft)?;
            let ft = m.forward_text(&texts[i], MaskMode::Soft)?;
            t.img_fg.push(fi.code_fg.0.clone());
            t.img_bg.push(fi.code_bg.0.clone());
            t.txt_fg.push(ft.code_fg.0.clone());
            t.txt_bg.push(ft.code_bg.0.clone());
        }
        Ok(t)
    };
    let objective = |m: &Model| -> Result<f64> {
        let t = forward_tables(m)?;
        let cm = cross_modal_loss(&t.img_fg, &t.txt_fg, &cm_triplets, &cfg);
        let adv = adversarial_loss(
            &t.img_fg,
            &t.txt_fg,
            &t.img_bg,
            &t.txt_bg,
            &adv_triplets,
            &cfg,
        );
        Ok(cm.total + adv.total)
    };

    // Kink guard: every sampled triple must be strictly inside one hinge
    // branch at the evaluation point.
    {
        let t = forward_tables(&model)?;
        let margin_of = |a: &Tensor, p: &Tensor, n: &Tensor| -> f64 {
            let d = |x: &Tensor, y: &Tensor| -> f64 {
                x.data()
                    .iter()
                    .zip(y.data())
                    .map(|(u, v)| (u - v) * (u - v))
                    .sum()
            };
            cfg.margin + d(a, p) - d(a, n)
        };
        let check = |anchors: &[Tensor], db: &[Tensor], triples: &[Triplet]| {
            for tr in triples {
                let m = margin_of(&anchors[tr.anchor], &db[tr.pos], &db[tr.neg]);
                assert!(
                    m.abs() > 1e-3,
                    "triple at a hinge kink; choose another suite seed"
                );
            }
        };
        check(&t.txt_fg, &t.img_fg, &cm_triplets.t2i);
        check(&t.img_fg, &t.txt_fg, &cm_triplets.i2t);
        check(&t.img_fg, &t.img_fg, &cm_triplets.i2i);
        check(&t.txt_fg, &t.txt_fg, &cm_triplets.t2t);
        check(&t.txt_fg, &t.img_bg, &adv_triplets.t2i_bg);
        check(&t.img_fg, &t.txt_bg, &adv_triplets.i2t_bg);
    }

    // Analytic gradients through the full backward (both split paths).
    let mut mb = model.clone();
    mb.zero_grads();
    {
        let mut img_fwd = Vec::new();
        let mut txt_fwd = Vec::new();
        for i in 0..batch {
            img_fwd.push(mb.forward_image(&images[i], MaskMode::Soft)?);
            txt_fwd.push(mb.forward_text(&texts[i], MaskMode::Soft)?);
        }
        let img_fg: Vec<Tensor> = img_fwd.iter().map(|f| f.code_fg.0.clone()).collect();
        let img_bg: Vec<Tensor> = img_fwd.iter().map(|f| f.code_bg.0.clone()).collect();
        let txt_fg: Vec<Tensor> = txt_fwd.iter().map(|f| f.code_fg.0.clone()).collect();
        let txt_bg: Vec<Tensor> = txt_fwd.iter().map(|f| f.code_bg.0.clone()).collect();
        let cm = cross_modal_loss(&img_fg, &txt_fg, &cm_triplets, &cfg);
        let adv = adversarial_loss(&img_fg, &txt_fg, &img_bg, &txt_bg, &adv_triplets, &cfg);
        for i in 0..batch {
            let mut gi = cm.grad_img[i].clone();
            for (a, b) in gi.data_mut().iter_mut().zip(adv.grad_img_fg[i].data()) {
                *a += b;
            }
            let mut gt = cm.grad_txt[i].clone();
            for (a, b) in gt.data_mut().iter_mut().zip(adv.grad_txt_fg[i].data()) {
                *a += b;
            }
            mb.backward_image(&img_fwd[i], &gi, &adv.grad_img_bg[i], ParamGroup::All)?;
            mb.backward_text(&txt_fwd[i], &gt, &adv.grad_txt_bg[i], ParamGroup::All)?;
        }
    }

    let mut worst = 0.0f64;
    let names = Model::param_names();
    for (pi, name) in names.iter().enumerate() {
        let base = model.params()[pi].1.value.clone();
        let analytic = mb.params()[pi].1.grad.clone();
        let mut f = |t: &Tensor| {
            let mut m2 = model.clone();
            m2.params_mut()[pi].1.value = t.clone();
            objective(&m2).unwrap()
        };
        let rep = finite_diff_check(&mut f, &base, &analytic, tol)?;
        if rep.max_rel_err > worst {
            worst = rep.max_rel_err;
        }
        if !rep.passed {
            return Ok(OpReport::new(
                &format!("composed_objective[{}]", name),
                worst,
                tol,
            ));
        }
    }
    Ok(OpReport::new("composed_objective", worst, tol))
}

/// Runs the whole verification suite. Every differentiable op is checked on
/// 20 random instances; the composed objective uses the soft threshold hook.
pub fn run_full_suite(seed: u64, tol: f64) -> Result<Vec<OpReport>> {
    Ok(vec![
        check_affine(seed, tol)?,
        check_relu(seed.wrapping_add(1), tol)?,
        check_tanh(seed.wrapping_add(2), tol)?,
        check_softmax(seed.wrapping_add(3), tol)?,
        check_ste(seed.wrapping_add(4), tol),
        check_hinge(seed.wrapping_add(5), tol)?,
        check_encoders(seed.wrapping_add(6), tol)?,
        check_hash_heads(seed.wrapping_add(7), tol)?,
        check_composed(seed.wrapping_add(8), tol)?,
    ])
}
