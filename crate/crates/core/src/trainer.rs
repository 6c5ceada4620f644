//! Alternating min-max training: several discriminator steps (encoders +
//! hash coders, minimizing the full objective) per generator step (mask
//! heads, maximizing the adversarial terms), with ADAM updates and a
//! step-decayed learning-rate schedule.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::attention::MaskMode;
use crate::checkpoint::save_model;
use crate::data::{build_similarity, Dataset, SimilarityMatrix};
use crate::kernel::{DualTensor, Tensor};
use crate::losses::{
    adversarial_loss, cross_modal_loss, sample_triplets, AdversarialTriplets, CrossModalTriplets,
    LossConfig,
};
use crate::model::{ImageForward, Model, ModelDims, ParamGroup, TextForward};
use crate::{Error, Result};

const ADAM_EPS: f64 = 1e-8;

/// Distance used inside the triplet hinge.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Distance {
    Squared,
    Euclidean,
}

impl std::str::FromStr for Distance {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "squared" => Ok(Distance::Squared),
            "euclidean" => Ok(Distance::Euclidean),
            other => Err(Error::Config(format!(
                "distance must be `squared` or `euclidean`, got {:?}",
                other
            ))),
        }
    }
}

impl std::fmt::Display for Distance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Distance::Squared => write!(f, "squared"),
            Distance::Euclidean => write!(f, "euclidean"),
        }
    }
}

/// Every field maps 1:1 to a `key = value` line in the config file.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub lr_decay: f64,
    pub lr_decay_every: usize,
    pub adam_alpha: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub d_steps_per_g_step: usize,
    pub seed: u64,
    pub q: usize,
    /// Hinge margin; defaults to q/4 when absent.
    pub margin: Option<f64>,
    pub distance: Distance,
    pub triplets_per_anchor: usize,
    pub patch: usize,
    pub feat_c: usize,
    pub txt_hidden: usize,
    pub txt_dim: usize,
    pub hash_hidden: usize,
    /// Emit a checkpoint every N epochs; 0 keeps only the final one.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            epochs: 100,
            base_lr: 0.005,
            lr_decay: 0.1,
            lr_decay_every: 20,
            adam_alpha: 0.0002,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            d_steps_per_g_step: 4,
            seed: 1,
            q: 16,
            margin: None,
            distance: Distance::Squared,
            triplets_per_anchor: 4,
            patch: 2,
            feat_c: 32,
            txt_hidden: 128,
            txt_dim: 64,
            hash_hidden: 256,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.base_lr < 0.0 || self.adam_alpha < 0.0 {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("adam betas must be in [0, 1)".into()));
        }
        if self.lr_decay <= 0.0 || self.lr_decay_every == 0 {
            return Err(Error::Config(
                "lr decay factor and period must be positive".into(),
            ));
        }
        if self.d_steps_per_g_step < 1 {
            return Err(Error::Config("d_steps_per_g_step must be >= 1".into()));
        }
        if self.q == 0 || self.patch == 0 || self.feat_c == 0 {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        if let Some(m) = self.margin {
            if m <= 0.0 {
                return Err(Error::Config("margin must be positive".into()));
            }
        }
        if self.triplets_per_anchor == 0 {
            return Err(Error::Config("triplets_per_anchor must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate for a 1-based epoch: base decayed every
    /// `lr_decay_every` epochs.
    pub fn lr_for_epoch(&self, epoch: usize) -> f64 {
        let stages = (epoch.max(1) - 1) / self.lr_decay_every;
        self.base_lr * self.lr_decay.powi(stages as i32)
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            margin: self.margin.unwrap_or(self.q as f64 / 4.0),
            squared: self.distance == Distance::Squared,
            weights: [1.0; 6],
        }
    }

    pub fn model_dims(&self, data: &Dataset) -> ModelDims {
        ModelDims {
            img_h: data.img_h,
            img_w: data.img_w,
            img_c: data.img_c,
            patch: self.patch,
            feat_c: self.feat_c,
            vocab: data.vocab,
            txt_hidden: self.txt_hidden,
            txt_dim: self.txt_dim,
            hash_hidden: self.hash_hidden,
            q: self.q,
        }
    }

    /// Parses `key = value` lines; `#` starts a comment. Unknown keys and
    /// malformed lines are errors carrying the line number.
    pub fn parse(text: &str) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected `key = value`", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            let bad = |what: &str| {
                Error::Config(format!(
                    "line {}: invalid value {:?} for `{}`",
                    lineno + 1,
                    value,
                    what
                ))
            };
            match key {
                "batch_size" => cfg.batch_size = value.parse().map_err(|_| bad(key))?,
                "epochs" => cfg.epochs = value.parse().map_err(|_| bad(key))?,
                "base_lr" => cfg.base_lr = value.parse().map_err(|_| bad(key))?,
                "lr_decay" => cfg.lr_decay = value.parse().map_err(|_| bad(key))?,
                "lr_decay_every" => cfg.lr_decay_every = value.parse().map_err(|_| bad(key))?,
                "adam_alpha" => cfg.adam_alpha = value.parse().map_err(|_| bad(key))?,
                "adam_beta1" => cfg.adam_beta1 = value.parse().map_err(|_| bad(key))?,
                "adam_beta2" => cfg.adam_beta2 = value.parse().map_err(|_| bad(key))?,
                "d_steps_per_g_step" => {
                    cfg.d_steps_per_g_step = value.parse().map_err(|_| bad(key))?
                }
                "seed" => cfg.seed = value.parse().map_err(|_| bad(key))?,
                "q" => cfg.q = value.parse().map_err(|_| bad(key))?,
                "margin" => cfg.margin = Some(value.parse().map_err(|_| bad(key))?),
                "distance" => cfg.distance = value.parse()?,
                "triplets_per_anchor" => {
                    cfg.triplets_per_anchor = value.parse().map_err(|_| bad(key))?
                }
                "patch" => cfg.patch = value.parse().map_err(|_| bad(key))?,
                "feat_c" => cfg.feat_c = value.parse().map_err(|_| bad(key))?,
                "txt_hidden" => cfg.txt_hidden = value.parse().map_err(|_| bad(key))?,
                "txt_dim" => cfg.txt_dim = value.parse().map_err(|_| bad(key))?,
                "hash_hidden" => cfg.hash_hidden = value.parse().map_err(|_| bad(key))?,
                "checkpoint_every" => cfg.checkpoint_every = value.parse().map_err(|_| bad(key))?,
                other => {
                    return Err(Error::Config(format!(
                        "line {}: unknown key `{}`",
                        lineno + 1,
                        other
                    )))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<TrainConfig> {
        let text = fs::read_to_string(path)?;
        Self::parse(&text)
    }
}

/// First/second moment estimates for one parameter tensor.
#[derive(Clone, Debug)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
    pub t: u64,
}

impl AdamState {
    pub fn for_param(param: &DualTensor) -> Self {
        AdamState {
            m: Tensor::zeros(param.value.shape()),
            v: Tensor::zeros(param.value.shape()),
            t: 0,
        }
    }
}

/// Bias-corrected ADAM step on one parameter tensor; `maximize` flips the
/// gradient for ascent.
pub fn adam_update(
    param: &mut DualTensor,
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    maximize: bool,
) {
    state.t += 1;
    let bc1 = 1.0 - beta1.powi(state.t as i32);
    let bc2 = 1.0 - beta2.powi(state.t as i32);
    for i in 0..param.value.len() {
        let mut g = param.grad.data()[i];
        if maximize {
            g = -g;
        }
        let m = beta1 * state.m.data()[i] + (1.0 - beta1) * g;
        let v = beta2 * state.v.data()[i] + (1.0 - beta2) * g * g;
        state.m.data_mut()[i] = m;
        state.v.data_mut()[i] = v;
        let m_hat = m / bc1;
        let v_hat = v / bc2;
        param.value.data_mut()[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

/// Optimization phase of one step.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    D,
    G,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Phase::D => write!(f, "D"),
            Phase::G => write!(f, "G"),
        }
    }
}

/// One log line: all six loss components, mask occupancies and the
/// discriminator learning rate in effect.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainLogRecord {
    pub epoch: usize,
    pub step: usize,
    pub phase: Phase,
    pub f_t2i: f64,
    pub f_i2t: f64,
    pub f_i2i: f64,
    pub f_t2t: f64,
    pub f_t2i_bg: f64,
    pub f_i2t_bg: f64,
    pub img_occupancy: f64,
    pub txt_occupancy: f64,
    pub lr: f64,
}

impl TrainLogRecord {
    pub fn to_line(&self) -> String {
        format!(
            "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}",
            self.epoch,
            self.step,
            self.phase,
            self.f_t2i,
            self.f_i2t,
            self.f_i2i,
            self.f_t2t,
            self.f_t2i_bg,
            self.f_i2t_bg,
            self.img_occupancy,
            self.txt_occupancy,
            self.lr
        )
    }

    pub fn parse_line(line: &str) -> Result<TrainLogRecord> {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 12 {
            return Err(Error::Format {
                path: "<log line>".into(),
                msg: format!("expected 12 fields, found {}", fields.len()),
            });
        }
        let num = |s: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Format {
                path: "<log line>".into(),
                msg: format!("bad number {:?}", s),
            })
        };
        let phase = match fields[2] {
            "D" => Phase::D,
            "G" => Phase::G,
            other => {
                return Err(Error::Format {
                    path: "<log line>".into(),
                    msg: format!("bad phase {:?}", other),
                })
            }
        };
        Ok(TrainLogRecord {
            epoch: num(fields[0])? as usize,
            step: num(fields[1])? as usize,
            phase,
            f_t2i: num(fields[3])?,
            f_i2t: num(fields[4])?,
            f_i2i: num(fields[5])?,
            f_t2t: num(fields[6])?,
            f_t2i_bg: num(fields[7])?,
            f_i2t_bg: num(fields[8])?,
            img_occupancy: num(fields[9])?,
            txt_occupancy: num(fields[10])?,
            lr: num(fields[11])?,
        })
    }

    pub fn components(&self) -> [f64; 6] {
        [
            self.f_t2i,
            self.f_i2t,
            self.f_i2i,
            self.f_t2t,
            self.f_t2i_bg,
            self.f_i2t_bg,
        ]
    }
}

/// Alternating trainer over one dataset.
pub struct Trainer<'a> {
    pub model: Model,
    data: &'a Dataset,
    sim: SimilarityMatrix,
    cfg: TrainConfig,
    loss_cfg: LossConfig,
    adam: Vec<AdamState>,
    rng: StdRng,
    global_step: usize,
    epoch: usize,
}

struct BatchForward {
    images: Vec<ImageForward>,
    texts: Vec<TextForward>,
    img_fg: Vec<Tensor>,
    txt_fg: Vec<Tensor>,
    img_bg: Vec<Tensor>,
    txt_bg: Vec<Tensor>,
}

impl<'a> Trainer<'a> {
    pub fn new(data: &'a Dataset, cfg: TrainConfig) -> Result<Trainer<'a>> {
        cfg.validate()?;
        if data.splits.train.is_empty() {
            return Err(Error::Data("dataset has no training split".into()));
        }
        let sim = build_similarity(&data.labels)?;
        let model = Model::init(cfg.model_dims(data), cfg.seed)?;
        let adam = model
            .params()
            .iter()
            .map(|(_, p)| AdamState::for_param(p))
            .collect();
        let loss_cfg = cfg.loss_config();
        // Separate stream from parameter init, so batch order is independent
        // of model width.
        let rng =
            StdRng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(1));
        Ok(Trainer {
            model,
            data,
            sim,
            cfg,
            loss_cfg,
            adam,
            rng,
            global_step: 0,
            epoch: 1,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn global_step(&self) -> usize {
        self.global_step
    }

    /// Phase of the next step: `d_steps_per_g_step` discriminator steps,
    /// then one generator step, repeating.
    pub fn next_phase(&self) -> Phase {
        let cycle = self.cfg.d_steps_per_g_step + 1;
        if self.global_step % cycle < self.cfg.d_steps_per_g_step {
            Phase::D
        } else {
            Phase::G
        }
    }

    fn forward_batch(&self, batch: &[usize]) -> Result<BatchForward> {
        let mut images = Vec::with_capacity(batch.len());
        let mut texts = Vec::with_capacity(batch.len());
        for &idx in batch {
            images.push(
                self.model
                    .forward_image(&self.data.image(idx), MaskMode::Hard)?,
            );
            texts.push(
                self.model
                    .forward_text(&self.data.text(idx), MaskMode::Hard)?,
            );
        }
        let img_fg = images.iter().map(|f| f.code_fg.0.clone()).collect();
        let img_bg = images.iter().map(|f| f.code_bg.0.clone()).collect();
        let txt_fg = texts.iter().map(|f| f.code_fg.0.clone()).collect();
        let txt_bg = texts.iter().map(|f| f.code_bg.0.clone()).collect();
        Ok(BatchForward {
            images,
            texts,
            img_fg,
            txt_fg,
            img_bg,
            txt_bg,
        })
    }

    /// Triplet sampling is seeded from the batch content, so the same batch
    /// always mines the same triples regardless of step position.
    fn triplet_rng(&self, batch: &[usize]) -> StdRng {
        let mut h = self.cfg.seed ^ 0xABCD_EF01_2345_6789;
        for &i in batch {
            h = h
                .wrapping_mul(0x0000_0100_0000_01B3)
                .wrapping_add(i as u64 + 1);
        }
        StdRng::seed_from_u64(h)
    }

    fn sample_all_triplets(&self, batch: &[usize]) -> (CrossModalTriplets, AdversarialTriplets) {
        let mut rng = self.triplet_rng(batch);
        let k = self.cfg.triplets_per_anchor;
        let cm = CrossModalTriplets {
            t2i: sample_triplets(&self.sim, batch, k, &mut rng),
            i2t: sample_triplets(&self.sim, batch, k, &mut rng),
            i2i: sample_triplets(&self.sim, batch, k, &mut rng),
            t2t: sample_triplets(&self.sim, batch, k, &mut rng),
        };
        let adv = AdversarialTriplets {
            t2i_bg: sample_triplets(&self.sim, batch, k, &mut rng),
            i2t_bg: sample_triplets(&self.sim, batch, k, &mut rng),
        };
        (cm, adv)
    }

    fn occupancies(fwd: &BatchForward) -> (f64, f64) {
        let n = fwd.images.len().max(1) as f64;
        let img = fwd.images.iter().map(|f| f.mask.occupancy()).sum::<f64>() / n;
        let txt = fwd.texts.iter().map(|f| f.mask.occupancy()).sum::<f64>() / n;
        (img, txt)
    }

    fn check_finite(&self, record: &TrainLogRecord) -> Result<()> {
        if record.components().iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(format!(
                "loss diverged at epoch {} step {} ({:?} phase): components {:?}",
                record.epoch,
                record.step,
                record.phase,
                record.components()
            )))
        }
    }

    /// One discriminator step: minimize the full objective over encoder and
    /// hash-coder parameters; masks are constants and mask heads stay put.
    pub fn d_step(&mut self, batch: &[usize]) -> Result<TrainLogRecord> {
        let fwd = self.forward_batch(batch)?;
        let (cm_triplets, adv_triplets) = self.sample_all_triplets(batch);
        let cm = cross_modal_loss(&fwd.img_fg, &fwd.txt_fg, &cm_triplets, &self.loss_cfg);
        let adv = adversarial_loss(
            &fwd.img_fg,
            &fwd.txt_fg,
            &fwd.img_bg,
            &fwd.txt_bg,
            &adv_triplets,
            &self.loss_cfg,
        );

        let (img_occ, txt_occ) = Self::occupancies(&fwd);
        let lr = self.cfg.lr_for_epoch(self.epoch);
        let record = TrainLogRecord {
            epoch: self.epoch,
            step: self.global_step,
            phase: Phase::D,
            f_t2i: cm.f_t2i,
            f_i2t: cm.f_i2t,
            f_i2i: cm.f_i2i,
            f_t2t: cm.f_t2t,
            f_t2i_bg: adv.f_t2i_bg,
            f_i2t_bg: adv.f_i2t_bg,
            img_occupancy: img_occ,
            txt_occupancy: txt_occ,
            lr,
        };
        self.check_finite(&record)?;

        self.model.zero_grads();
        for (i, (ifwd, tfwd)) in fwd.images.iter().zip(&fwd.texts).enumerate() {
            // Foreground codes collect the cross-modal gradient plus the
            // adversarial anchor gradient; background codes only the
            // adversarial one.
            let mut g_img_fg = cm.grad_img[i].clone();
            add(&mut g_img_fg, &adv.grad_img_fg[i]);
            let mut g_txt_fg = cm.grad_txt[i].clone();
            add(&mut g_txt_fg, &adv.grad_txt_fg[i]);
            self.model.backward_image(
                ifwd,
                &g_img_fg,
                &adv.grad_img_bg[i],
                ParamGroup::EncoderHash,
            )?;
            self.model.backward_text(
                tfwd,
                &g_txt_fg,
                &adv.grad_txt_bg[i],
                ParamGroup::EncoderHash,
            )?;
        }
        self.update_params(ParamGroup::EncoderHash, lr, false);
        self.global_step += 1;
        Ok(record)
    }

    /// One generator step: ascend the adversarial terms through the
    /// straight-through estimator into the mask heads only. Anchor codes are
    /// constants here.
    pub fn g_step(&mut self, batch: &[usize]) -> Result<TrainLogRecord> {
        let fwd = self.forward_batch(batch)?;
        let (cm_triplets, adv_triplets) = self.sample_all_triplets(batch);
        // Cross-modal components are computed for the log; only the
        // adversarial terms feed gradients in this phase.
        let cm = cross_modal_loss(&fwd.img_fg, &fwd.txt_fg, &cm_triplets, &self.loss_cfg);
        let adv = adversarial_loss(
            &fwd.img_fg,
            &fwd.txt_fg,
            &fwd.img_bg,
            &fwd.txt_bg,
            &adv_triplets,
            &self.loss_cfg,
        );

        let (img_occ, txt_occ) = Self::occupancies(&fwd);
        let record = TrainLogRecord {
            epoch: self.epoch,
            step: self.global_step,
            phase: Phase::G,
            f_t2i: cm.f_t2i,
            f_i2t: cm.f_i2t,
            f_i2i: cm.f_i2i,
            f_t2t: cm.f_t2t,
            f_t2i_bg: adv.f_t2i_bg,
            f_i2t_bg: adv.f_i2t_bg,
            img_occupancy: img_occ,
            txt_occupancy: txt_occ,
            lr: self.cfg.lr_for_epoch(self.epoch),
        };
        self.check_finite(&record)?;

        self.model.zero_grads();
        let zero = Tensor::zeros(&[self.cfg.q]);
        for (i, (ifwd, tfwd)) in fwd.images.iter().zip(&fwd.texts).enumerate() {
            self.model
                .backward_image(ifwd, &zero, &adv.grad_img_bg[i], ParamGroup::Generator)?;
            self.model
                .backward_text(tfwd, &zero, &adv.grad_txt_bg[i], ParamGroup::Generator)?;
        }
        self.update_params(ParamGroup::Generator, self.cfg.adam_alpha, true);
        self.global_step += 1;
        Ok(record)
    }

    /// Runs the step matching the alternation schedule.
    pub fn step(&mut self, batch: &[usize]) -> Result<TrainLogRecord> {
        match self.next_phase() {
            Phase::D => self.d_step(batch),
            Phase::G => self.g_step(batch),
        }
    }

    fn update_params(&mut self, group: ParamGroup, lr: f64, maximize: bool) {
        let (beta1, beta2) = (self.cfg.adam_beta1, self.cfg.adam_beta2);
        for (idx, (name, param)) in self.model.params_mut().into_iter().enumerate() {
            let in_group = match group {
                ParamGroup::Generator => Model::is_generator_param(name),
                ParamGroup::EncoderHash => !Model::is_generator_param(name),
                ParamGroup::All => true,
            };
            if in_group {
                adam_update(param, &mut self.adam[idx], lr, beta1, beta2, maximize);
            }
        }
    }

    fn set_epoch(&mut self, epoch: usize) {
        self.epoch = epoch;
    }

    fn shuffled_train_indices(&mut self) -> Vec<usize> {
        let mut idx: Vec<usize> = self.data.splits.train.iter().map(|&i| i as usize).collect();
        for i in (1..idx.len()).rev() {
            let j = self.rng.gen_range(0..=i);
            idx.swap(i, j);
        }
        idx
    }
}

fn add(dst: &mut Tensor, src: &Tensor) {
    for (a, b) in dst.data_mut().iter_mut().zip(src.data()) {
        *a += b;
    }
}

/// Result of a full training run.
pub struct TrainRun {
    pub records: Vec<TrainLogRecord>,
    pub model: Model,
    pub checkpoint: Option<PathBuf>,
}

/// Trains for `cfg.epochs` epochs over the dataset's train split in the
/// alternating schedule, writing `train.log` and `model.ckpt` under
/// `out_dir` when given. Deterministic for a fixed (seed, config, dataset).
pub fn train(data: &Dataset, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainRun> {
    cfg.validate()?;
    let mut trainer = Trainer::new(data, cfg.clone())?;
    let mut records = Vec::new();

    let mut log_file = match out_dir {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            Some(fs::File::create(dir.join("train.log"))?)
        }
        None => None,
    };

    for epoch in 1..=cfg.epochs {
        trainer.set_epoch(epoch);
        let order = trainer.shuffled_train_indices();
        for batch in order.chunks(cfg.batch_size) {
            let record = trainer.step(batch)?;
            if let Some(f) = log_file.as_mut() {
                writeln!(f, "{}", record.to_line())?;
            }
            records.push(record);
        }
        if cfg.checkpoint_every > 0 && epoch % cfg.checkpoint_every == 0 {
            if let Some(dir) = out_dir {
                save_model(
                    &trainer.model,
                    &dir.join(format!("model_epoch{}.ckpt", epoch)),
                )?;
            }
        }
    }

    let checkpoint = match out_dir {
        Some(dir) => {
            let path = dir.join("model.ckpt");
            save_model(&trainer.model, &path)?;
            Some(path)
        }
        None => None,
    };
    if let Some(f) = log_file.as_mut() {
        f.sync_all()?;
    }

    Ok(TrainRun {
        records,
        model: trainer.model,
        checkpoint,
    })
}
