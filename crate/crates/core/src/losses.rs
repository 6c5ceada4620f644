//! Triplet ranking losses: the four-direction cross-modal retrieval loss,
//! the two-term adversarial retrieval loss on background codes, and
//! within-batch triplet sampling.
//!
//! Each term sums max{0, margin + d(anchor, pos) - d(anchor, neg)} over its
//! triples. Anchors and the cross-modal databases use foreground codes; the
//! adversarial terms pair foreground anchors of one modality with background
//! codes of the other.

use rand::Rng;

use crate::data::SimilarityMatrix;
use crate::kernel::Tensor;
use crate::{Error, Result};

/// Query-to-database direction of one loss term.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    TextToImage,
    ImageToText,
    ImageToImage,
    TextToText,
    /// Text anchors against background image codes (adversarial term).
    TextToImageBg,
    /// Image anchors against background text codes (adversarial term).
    ImageToTextBg,
}

impl Direction {
    pub fn index(self) -> usize {
        match self {
            Direction::TextToImage => 0,
            Direction::ImageToText => 1,
            Direction::ImageToImage => 2,
            Direction::TextToText => 3,
            Direction::TextToImageBg => 4,
            Direction::ImageToTextBg => 5,
        }
    }
}

/// Index triple (anchor, positive, negative) into a batch's code tables,
/// with S(anchor, pos) = 1 and S(anchor, neg) = 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Triplet {
    pub anchor: usize,
    pub pos: usize,
    pub neg: usize,
}

/// Triples for one direction.
#[derive(Clone, Debug)]
pub struct TripletBatch {
    pub direction: Direction,
    pub triples: Vec<Triplet>,
}

/// Margin, distance choice and per-term weights of the objective.
#[derive(Clone, Debug)]
pub struct LossConfig {
    pub margin: f64,
    /// Squared Euclidean distance when true, plain Euclidean otherwise.
    pub squared: bool,
    /// Weight per `Direction::index()`; the published objective is the
    /// unweighted sum.
    pub weights: [f64; 6],
}

impl LossConfig {
    /// Margin scaled with code length: margin = q/4, squared distance.
    pub fn for_code_len(q: usize) -> Self {
        LossConfig {
            margin: q as f64 / 4.0,
            squared: true,
            weights: [1.0; 6],
        }
    }
}

fn assert_same_len(a: &Tensor, b: &Tensor) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Dim(format!(
            "code lengths differ: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

fn distance(a: &Tensor, b: &Tensor, squared: bool) -> f64 {
    let sq: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum();
    if squared {
        sq
    } else {
        sq.sqrt()
    }
}

/// d distance gradient wrt the first argument, scaled by `scale`;
/// accumulated into `out`. The gradient wrt the second argument is the
/// negation, accumulated into `out_other` when provided.
fn accumulate_dist_grad(
    a: &Tensor,
    b: &Tensor,
    squared: bool,
    scale: f64,
    out_a: &mut Tensor,
    out_b: &mut Tensor,
) {
    if scale == 0.0 {
        return;
    }
    let factor = if squared {
        2.0 * scale
    } else {
        let d = distance(a, b, false);
        if d == 0.0 {
            return; // subgradient 0 at the cusp
        }
        scale / d
    };
    for i in 0..a.len() {
        let diff = a.data()[i] - b.data()[i];
        out_a.data_mut()[i] += factor * diff;
        out_b.data_mut()[i] -= factor * diff;
    }
}

/// max{0, margin + d(a,p) - d(a,n)} with subgradients; all three gradients
/// are zero when the hinge is inactive.
pub fn triplet_hinge(
    anchor: &Tensor,
    pos: &Tensor,
    neg: &Tensor,
    cfg: &LossConfig,
) -> Result<(f64, Tensor, Tensor, Tensor)> {
    assert_same_len(anchor, pos)?;
    assert_same_len(anchor, neg)?;
    let dp = distance(anchor, pos, cfg.squared);
    let dn = distance(anchor, neg, cfg.squared);
    let value = cfg.margin + dp - dn;
    let mut ga = Tensor::zeros(anchor.shape());
    let mut gp = Tensor::zeros(pos.shape());
    let mut gn = Tensor::zeros(neg.shape());
    if value > 0.0 {
        accumulate_dist_grad(anchor, pos, cfg.squared, 1.0, &mut ga, &mut gp);
        accumulate_dist_grad(anchor, neg, cfg.squared, -1.0, &mut ga, &mut gn);
        Ok((value, ga, gp, gn))
    } else {
        Ok((0.0, ga, gp, gn))
    }
}

/// Sums the hinge over `triples` with anchors drawn from `anchors` and
/// positives/negatives from `db`, accumulating weighted gradients into the
/// matching grad tables.
fn term_sum(
    anchors: &[Tensor],
    db: &[Tensor],
    triples: &[Triplet],
    cfg: &LossConfig,
    weight: f64,
    grad_anchors: &mut [Tensor],
    grad_db: &mut [Tensor],
) -> f64 {
    let mut total = 0.0;
    for t in triples {
        let a = &anchors[t.anchor];
        let p = &db[t.pos];
        let n = &db[t.neg];
        let dp = distance(a, p, cfg.squared);
        let dn = distance(a, n, cfg.squared);
        let value = cfg.margin + dp - dn;
        if value > 0.0 {
            total += value;
            if weight != 0.0 {
                // Anchor and database tables are distinct here; the
                // intra-modal case (same table on both sides) goes through
                // intra_term instead.
                accumulate_dist_grad(
                    a,
                    p,
                    cfg.squared,
                    weight,
                    &mut grad_anchors[t.anchor],
                    &mut grad_db[t.pos],
                );
                accumulate_dist_grad(
                    a,
                    n,
                    cfg.squared,
                    -weight,
                    &mut grad_anchors[t.anchor],
                    &mut grad_db[t.neg],
                );
            }
        }
    }
    total
}

/// Triples for the four cross-modal/intra-modal directions.
#[derive(Clone, Debug, Default)]
pub struct CrossModalTriplets {
    pub t2i: Vec<Triplet>,
    pub i2t: Vec<Triplet>,
    pub i2i: Vec<Triplet>,
    pub t2t: Vec<Triplet>,
}

/// Per-direction sums and code gradients of the cross-modal retrieval loss.
#[derive(Clone, Debug)]
pub struct CrossModalLoss {
    pub f_t2i: f64,
    pub f_i2t: f64,
    pub f_i2i: f64,
    pub f_t2t: f64,
    pub total: f64,
    pub grad_img: Vec<Tensor>,
    pub grad_txt: Vec<Tensor>,
}

/// F_{T->I} + F_{I->T} + F_{I->I} + F_{T->T} over foreground codes.
pub fn cross_modal_loss(
    img_codes: &[Tensor],
    txt_codes: &[Tensor],
    triplets: &CrossModalTriplets,
    cfg: &LossConfig,
) -> CrossModalLoss {
    let mut grad_img: Vec<Tensor> = img_codes.iter().map(|c| Tensor::zeros(c.shape())).collect();
    let mut grad_txt: Vec<Tensor> = txt_codes.iter().map(|c| Tensor::zeros(c.shape())).collect();

    let f_t2i = term_sum(
        txt_codes,
        img_codes,
        &triplets.t2i,
        cfg,
        cfg.weights[Direction::TextToImage.index()],
        &mut grad_txt,
        &mut grad_img,
    );
    let f_i2t = term_sum(
        img_codes,
        txt_codes,
        &triplets.i2t,
        cfg,
        cfg.weights[Direction::ImageToText.index()],
        &mut grad_img,
        &mut grad_txt,
    );

    // Intra-modal terms: anchor and database are the same table, so gradients
    // are accumulated through a scratch copy to keep borrows disjoint.
    let f_i2i = intra_term(
        img_codes,
        &triplets.i2i,
        cfg,
        cfg.weights[Direction::ImageToImage.index()],
        &mut grad_img,
    );
    let f_t2t = intra_term(
        txt_codes,
        &triplets.t2t,
        cfg,
        cfg.weights[Direction::TextToText.index()],
        &mut grad_txt,
    );

    CrossModalLoss {
        f_t2i,
        f_i2t,
        f_i2i,
        f_t2t,
        total: f_t2i + f_i2t + f_i2i + f_t2t,
        grad_img,
        grad_txt,
    }
}

fn intra_term(
    codes: &[Tensor],
    triples: &[Triplet],
    cfg: &LossConfig,
    weight: f64,
    grads: &mut [Tensor],
) -> f64 {
    let mut total = 0.0;
    for t in triples {
        let a = &codes[t.anchor];
        let p = &codes[t.pos];
        let n = &codes[t.neg];
        let dp = distance(a, p, cfg.squared);
        let dn = distance(a, n, cfg.squared);
        let value = cfg.margin + dp - dn;
        if value > 0.0 {
            total += value;
            if weight != 0.0 {
                let mut ga = Tensor::zeros(a.shape());
                let mut gp = Tensor::zeros(p.shape());
                let mut gn = Tensor::zeros(n.shape());
                accumulate_dist_grad(a, p, cfg.squared, weight, &mut ga, &mut gp);
                accumulate_dist_grad(a, n, cfg.squared, -weight, &mut ga, &mut gn);
                add_into(&mut grads[t.anchor], &ga);
                add_into(&mut grads[t.pos], &gp);
                add_into(&mut grads[t.neg], &gn);
            }
        }
    }
    total
}

fn add_into(dst: &mut Tensor, src: &Tensor) {
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s;
    }
}

/// Triples for the two adversarial terms.
#[derive(Clone, Debug, Default)]
pub struct AdversarialTriplets {
    pub t2i_bg: Vec<Triplet>,
    pub i2t_bg: Vec<Triplet>,
}

/// Sums and gradients of F_{T->I^} + F_{I->T^}. Anchor gradients flow to the
/// foreground tables and are produced unconditionally; the caller decides
/// which parameters consume them.
#[derive(Clone, Debug)]
pub struct AdversarialLoss {
    pub f_t2i_bg: f64,
    pub f_i2t_bg: f64,
    pub total: f64,
    pub grad_img_bg: Vec<Tensor>,
    pub grad_txt_bg: Vec<Tensor>,
    pub grad_img_fg: Vec<Tensor>,
    pub grad_txt_fg: Vec<Tensor>,
}

/// Adversarial retrieval loss: foreground anchors of one modality against
/// background codes of the other.
pub fn adversarial_loss(
    img_fg: &[Tensor],
    txt_fg: &[Tensor],
    img_bg: &[Tensor],
    txt_bg: &[Tensor],
    triplets: &AdversarialTriplets,
    cfg: &LossConfig,
) -> AdversarialLoss {
    let mut grad_img_bg: Vec<Tensor> = img_bg.iter().map(|c| Tensor::zeros(c.shape())).collect();
    let mut grad_txt_bg: Vec<Tensor> = txt_bg.iter().map(|c| Tensor::zeros(c.shape())).collect();
    let mut grad_img_fg: Vec<Tensor> = img_fg.iter().map(|c| Tensor::zeros(c.shape())).collect();
    let mut grad_txt_fg: Vec<Tensor> = txt_fg.iter().map(|c| Tensor::zeros(c.shape())).collect();

    let f_t2i_bg = term_sum(
        txt_fg,
        img_bg,
        &triplets.t2i_bg,
        cfg,
        cfg.weights[Direction::TextToImageBg.index()],
        &mut grad_txt_fg,
        &mut grad_img_bg,
    );
    let f_i2t_bg = term_sum(
        img_fg,
        txt_bg,
        &triplets.i2t_bg,
        cfg,
        cfg.weights[Direction::ImageToTextBg.index()],
        &mut grad_img_fg,
        &mut grad_txt_bg,
    );

    AdversarialLoss {
        f_t2i_bg,
        f_i2t_bg,
        total: f_t2i_bg + f_i2t_bg,
        grad_img_bg,
        grad_txt_bg,
        grad_img_fg,
        grad_txt_fg,
    }
}

/// Samples up to `per_anchor` (positive, negative) pairs for every batch
/// position. `batch` holds dataset indices; emitted triples use batch
/// positions. Anchors with no in-batch positive or negative are skipped;
/// exact duplicate triples are dropped.
pub fn sample_triplets<R: Rng>(
    sim: &SimilarityMatrix,
    batch: &[usize],
    per_anchor: usize,
    rng: &mut R,
) -> Vec<Triplet> {
    let mut out = Vec::new();
    for (a_pos, &a_idx) in batch.iter().enumerate() {
        let mut positives = Vec::new();
        let mut negatives = Vec::new();
        for (b_pos, &b_idx) in batch.iter().enumerate() {
            if sim.similar(a_idx, b_idx) {
                positives.push(b_pos);
            } else {
                negatives.push(b_pos);
            }
        }
        if positives.is_empty() || negatives.is_empty() {
            continue;
        }
        let mut seen: Vec<(usize, usize)> = Vec::with_capacity(per_anchor);
        for _ in 0..per_anchor {
            let p = positives[rng.gen_range(0..positives.len())];
            let n = negatives[rng.gen_range(0..negatives.len())];
            if !seen.contains(&(p, n)) {
                seen.push((p, n));
                out.push(Triplet {
                    anchor: a_pos,
                    pos: p,
                    neg: n,
                });
            }
        }
    }
    out
}
