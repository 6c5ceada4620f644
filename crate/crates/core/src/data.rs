//! Synthetic paired multimodal dataset with planted foreground masks,
//! similarity-matrix construction, splits and directory I/O.
//!
//! Each instance carries 1-3 labels. Its image places label-coding texture
//! inside a randomly positioned rectangle (the planted mask, covering 25-50%
//! of grid cells) over background noise; its bag-of-words vector sets the
//! label-indicative vocabulary blocks plus noise words. Two instances are
//! similar iff their label sets intersect.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};

use crate::encoders::{ImageInstance, TextInstance};
use crate::kernel::Tensor;
use crate::{Error, Result};

pub const DATASET_VERSION: u32 = 1;

/// Parameters of the synthetic generator.
#[derive(Clone, Debug)]
pub struct GenConfig {
    pub n: usize,
    pub classes: usize,
    pub img_size: usize,
    pub grid_size: usize,
    pub vocab: usize,
    pub noise: f32,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            n: 2400,
            classes: 4,
            img_size: 16,
            grid_size: 8,
            vocab: 256,
            noise: 0.1,
            seed: 42,
        }
    }
}

/// Train/test(query)/retrieval index lists. Test and retrieval are disjoint;
/// train is a subset of retrieval.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<u32>,
    pub test: Vec<u32>,
    pub retrieval: Vec<u32>,
}

/// Aligned image/text instances with multi-label annotations, planted
/// ground-truth masks and splits. Raw arrays are stored in `f32` so that
/// directory round-trips are bitwise exact.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub n: usize,
    pub classes: usize,
    pub vocab: usize,
    pub img_h: usize,
    pub img_w: usize,
    pub img_c: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub noise: f32,
    pub seed: u64,
    pub images: Vec<f32>,
    pub bow: Vec<f32>,
    pub labels: Vec<Vec<u16>>,
    /// Planted binary masks, grid_h x grid_w per instance; present for
    /// synthetic data only. Never visible to training.
    pub masks: Option<Vec<u8>>,
    pub splits: Splits,
}

impl Dataset {
    pub fn image_len(&self) -> usize {
        self.img_h * self.img_w * self.img_c
    }

    pub fn image(&self, i: usize) -> ImageInstance {
        let len = self.image_len();
        let data = self.images[i * len..(i + 1) * len]
            .iter()
            .map(|&v| v as f64)
            .collect();
        ImageInstance {
            pixels: Tensor::from_vec(&[self.img_h, self.img_w, self.img_c], data),
        }
    }

    pub fn text(&self, i: usize) -> TextInstance {
        let data = self.bow[i * self.vocab..(i + 1) * self.vocab]
            .iter()
            .map(|&v| v as f64)
            .collect();
        TextInstance {
            bow: Tensor::from_vec(&[self.vocab], data),
        }
    }

    pub fn planted_mask(&self, i: usize) -> Option<&[u8]> {
        let cells = self.grid_h * self.grid_w;
        self.masks.as_ref().map(|m| &m[i * cells..(i + 1) * cells])
    }

    pub fn split_indices(&self, split: Split) -> &[u32] {
        match split {
            Split::Train => &self.splits.train,
            Split::Test => &self.splits.test,
            Split::Retrieval => &self.splits.retrieval,
        }
    }
}

/// Named dataset split.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
    Retrieval,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "retrieval" => Ok(Split::Retrieval),
            other => Err(Error::Config(format!("unknown split {:?}", other))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Test => write!(f, "test"),
            Split::Retrieval => write!(f, "retrieval"),
        }
    }
}

/// Binary ground-truth relevance backed by per-instance label bitmasks:
/// S(i,j) = 1 iff the label sets of i and j intersect.
#[derive(Clone, Debug)]
pub struct SimilarityMatrix {
    masks: Vec<u64>,
}

impl SimilarityMatrix {
    pub fn from_labels(labels: &[Vec<u16>]) -> Result<Self> {
        let mut masks = Vec::with_capacity(labels.len());
        for (i, ls) in labels.iter().enumerate() {
            if ls.is_empty() {
                return Err(Error::Data(format!("instance {} has no labels", i)));
            }
            let mut m = 0u64;
            for &l in ls {
                if l >= 64 {
                    return Err(Error::Data(format!(
                        "label {} out of supported range (< 64)",
                        l
                    )));
                }
                m |= 1u64 << l;
            }
            masks.push(m);
        }
        Ok(SimilarityMatrix { masks })
    }

    pub fn len(&self) -> usize {
        self.masks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.masks.is_empty()
    }

    pub fn similar(&self, i: usize, j: usize) -> bool {
        self.masks[i] & self.masks[j] != 0
    }
}

/// Builds S from labels; S(i,j) = 1 iff the label sets intersect, which
/// makes S symmetric and reflexive.
pub fn build_similarity(labels: &[Vec<u16>]) -> Result<SimilarityMatrix> {
    SimilarityMatrix::from_labels(labels)
}

/// Deterministic per-class texture value in [0.3, 0.95], tiled 4x4.
fn class_texture(class: u16, y: usize, x: usize) -> f32 {
    let mut h = (class as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    h ^= ((y % 4) as u64).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    h ^= ((x % 4) as u64).wrapping_mul(0x94D0_49BB_1331_11EB);
    h ^= h >> 31;
    h = h.wrapping_mul(0xD6E8_FEB8_6659_FD93);
    h ^= h >> 27;
    let unit = (h >> 16 & 0xFFFF) as f32 / 65536.0;
    0.3 + 0.65 * unit
}

/// Samples a rectangle in grid cells whose area covers 25-50% of the grid.
fn sample_rectangle(
    grid_h: usize,
    grid_w: usize,
    rng: &mut StdRng,
) -> (usize, usize, usize, usize) {
    let cells = grid_h * grid_w;
    let lo = cells.div_ceil(4);
    let hi = cells / 2;
    loop {
        let h = rng.gen_range(1..=grid_h);
        let w = rng.gen_range(1..=grid_w);
        if h * w >= lo && h * w <= hi {
            let top = rng.gen_range(0..=grid_h - h);
            let left = rng.gen_range(0..=grid_w - w);
            return (top, left, h, w);
        }
    }
}

/// A mask drawn from the same rectangle distribution the generator plants
/// (occupancy 25-50%), for Monte-Carlo IoU baselines.
pub fn random_rectangle_mask(grid_h: usize, grid_w: usize, rng: &mut StdRng) -> Vec<u8> {
    let (top, left, h, w) = sample_rectangle(grid_h, grid_w, rng);
    let mut mask = vec![0u8; grid_h * grid_w];
    for gy in top..top + h {
        for gx in left..left + w {
            mask[gy * grid_w + gx] = 1;
        }
    }
    mask
}

/// Generates the synthetic planted-foreground dataset. Deterministic under
/// the seed; splits are left empty and assigned separately.
pub fn generate_synthetic(cfg: &GenConfig) -> Result<Dataset> {
    if cfg.n == 0 {
        return Err(Error::Config("n must be positive".into()));
    }
    if cfg.classes < 2 {
        return Err(Error::Config("at least 2 classes required".into()));
    }
    if cfg.classes > 64 {
        return Err(Error::Config("at most 64 classes supported".into()));
    }
    if cfg.grid_size == 0 || !cfg.img_size.is_multiple_of(cfg.grid_size) {
        return Err(Error::Config(format!(
            "grid size {} must divide image size {}",
            cfg.grid_size, cfg.img_size
        )));
    }
    if cfg.grid_size * cfg.grid_size < 4 {
        return Err(Error::Config(
            "grid too small to plant a 25-50% mask".into(),
        ));
    }
    if cfg.vocab < 2 * cfg.classes {
        return Err(Error::Config(format!(
            "vocab {} too small for {} classes",
            cfg.vocab, cfg.classes
        )));
    }
    if !(0.0..=1.0).contains(&cfg.noise) {
        return Err(Error::Config("noise level must be in [0, 1]".into()));
    }

    let mut rng = StdRng::seed_from_u64(cfg.seed);
    let (h0, w0, c0) = (cfg.img_size, cfg.img_size, 1usize);
    let (gh, gw) = (cfg.grid_size, cfg.grid_size);
    let cell = h0 / gh;
    let block = cfg.vocab / (2 * cfg.classes);
    let noise_words_start = cfg.classes * block;
    let noise = cfg.noise;

    let mut images = Vec::with_capacity(cfg.n * h0 * w0 * c0);
    let mut bow = Vec::with_capacity(cfg.n * cfg.vocab);
    let mut labels = Vec::with_capacity(cfg.n);
    let mut masks = Vec::with_capacity(cfg.n * gh * gw);

    for _ in 0..cfg.n {
        // 1-3 distinct labels.
        let count = rng.gen_range(1..=3.min(cfg.classes));
        let mut ls: Vec<u16> = Vec::with_capacity(count);
        while ls.len() < count {
            let l = rng.gen_range(0..cfg.classes) as u16;
            if !ls.contains(&l) {
                ls.push(l);
            }
        }
        ls.sort_unstable();

        // Planted rectangle, recorded as the ground-truth mask.
        let (top, left, rh, rw) = sample_rectangle(gh, gw, &mut rng);
        let mut mask = vec![0u8; gh * gw];
        for gy in top..top + rh {
            for gx in left..left + rw {
                mask[gy * gw + gx] = 1;
            }
        }

        // Pixels: label-coding texture inside the rectangle (indexed by
        // position relative to the rectangle origin), noise outside.
        let (top_px, left_px) = (top * cell, left * cell);
        for y in 0..h0 {
            for x in 0..w0 {
                let inside = mask[(y / cell) * gw + (x / cell)] == 1;
                let v = if inside {
                    let u = y - top_px;
                    let w = x - left_px;
                    let mut acc = 0.0f32;
                    for &l in &ls {
                        acc += class_texture(l, u, w);
                    }
                    let base = acc / ls.len() as f32;
                    let jitter = noise * (rng.gen_range(0.0f32..1.0) - 0.5);
                    (base + jitter).clamp(0.0, 1.0)
                } else {
                    noise * rng.gen_range(0.0f32..1.0)
                };
                images.push(v);
            }
        }

        // Bag-of-words: indicative blocks per label plus noise words.
        let mut counts = vec![0.0f32; cfg.vocab];
        for &l in &ls {
            let start = l as usize * block;
            for (k, c) in counts[start..start + block].iter_mut().enumerate() {
                // The first word of each block is always present, which keeps
                // shared-label overlap certain at any noise level.
                if k == 0 || rng.gen_range(0.0f32..1.0) >= noise / 2.0 {
                    *c = 1.0;
                }
            }
        }
        for c in counts[noise_words_start..].iter_mut() {
            if rng.gen_range(0.0f32..1.0) < noise / 4.0 {
                *c = 1.0;
            }
        }
        bow.extend_from_slice(&counts);

        labels.push(ls);
        masks.extend_from_slice(&mask);
    }

    Ok(Dataset {
        n: cfg.n,
        classes: cfg.classes,
        vocab: cfg.vocab,
        img_h: h0,
        img_w: w0,
        img_c: c0,
        grid_h: gh,
        grid_w: gw,
        noise: cfg.noise,
        seed: cfg.seed,
        images,
        bow,
        labels,
        masks: Some(masks),
        splits: Splits {
            train: Vec::new(),
            test: Vec::new(),
            retrieval: Vec::new(),
        },
    })
}

/// Draws the test set uniformly, takes the remainder as the retrieval set,
/// and draws the training set uniformly from the retrieval set.
pub fn make_splits(n: usize, n_test: usize, n_train: usize, seed: u64) -> Result<Splits> {
    if n_test + 1 > n {
        return Err(Error::Config(format!(
            "test size {} leaves no retrieval set for n = {}",
            n_test, n
        )));
    }
    if n_train > n - n_test {
        return Err(Error::Config(format!(
            "train size {} exceeds retrieval set size {}",
            n_train,
            n - n_test
        )));
    }
    let mut rng = StdRng::seed_from_u64(seed);
    let mut indices: Vec<u32> = (0..n as u32).collect();
    shuffle(&mut indices, &mut rng);
    let mut test: Vec<u32> = indices[..n_test].to_vec();
    let mut retrieval: Vec<u32> = indices[n_test..].to_vec();
    test.sort_unstable();
    retrieval.sort_unstable();

    let mut pool = retrieval.clone();
    shuffle(&mut pool, &mut rng);
    let mut train: Vec<u32> = pool[..n_train].to_vec();
    train.sort_unstable();

    Ok(Splits {
        train,
        test,
        retrieval,
    })
}

fn shuffle<R: Rng>(v: &mut [u32], rng: &mut R) {
    for i in (1..v.len()).rev() {
        let j = rng.gen_range(0..=i);
        v.swap(i, j);
    }
}

// ---------------------------------------------------------------------------
// Directory format: manifest, images.f32, bow.f32, labels.txt, masks.u8,
// splits.txt. Arrays are raw little-endian.
// ---------------------------------------------------------------------------

fn fmt_err(path: &Path, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.display().to_string(),
        msg: msg.into(),
    }
}

fn write_f32s(path: &Path, values: &[f32]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn read_f32s(path: &Path, expect: usize) -> Result<Vec<f32>> {
    let bytes = fs::read(path)?;
    if bytes.len() != expect * 4 {
        return Err(fmt_err(
            path,
            format!("expected {} bytes, found {}", expect * 4, bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = format!(
        "version = {}\nn = {}\nclasses = {}\nvocab = {}\nimg_h = {}\nimg_w = {}\nimg_c = {}\ngrid_h = {}\ngrid_w = {}\nnoise = {}\nseed = {}\n",
        DATASET_VERSION,
        ds.n,
        ds.classes,
        ds.vocab,
        ds.img_h,
        ds.img_w,
        ds.img_c,
        ds.grid_h,
        ds.grid_w,
        ds.noise,
        ds.seed
    );
    fs::write(dir.join("manifest"), manifest)?;
    write_f32s(&dir.join("images.f32"), &ds.images)?;
    write_f32s(&dir.join("bow.f32"), &ds.bow)?;

    let mut labels = String::new();
    for (i, ls) in ds.labels.iter().enumerate() {
        labels.push_str(&format!("{}:", i));
        for l in ls {
            labels.push_str(&format!(" {}", l));
        }
        labels.push('\n');
    }
    fs::write(dir.join("labels.txt"), labels)?;

    if let Some(masks) = &ds.masks {
        fs::write(dir.join("masks.u8"), masks)?;
    }

    let mut splits = String::new();
    for (name, list) in [
        ("train", &ds.splits.train),
        ("test", &ds.splits.test),
        ("retrieval", &ds.splits.retrieval),
    ] {
        splits.push_str(name);
        splits.push(':');
        for idx in list {
            splits.push_str(&format!(" {}", idx));
        }
        splits.push('\n');
    }
    fs::write(dir.join("splits.txt"), splits)?;
    Ok(())
}

fn parse_manifest(path: &Path) -> Result<Vec<(String, String)>> {
    let file = fs::File::open(path)?;
    let mut pairs = Vec::new();
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| fmt_err(path, format!("line {}: expected `key = value`", lineno + 1)))?;
        pairs.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(pairs)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest");
    let pairs = parse_manifest(&manifest_path)?;
    let get = |key: &str| -> Result<&str> {
        pairs
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
            .ok_or_else(|| fmt_err(&manifest_path, format!("missing key {:?}", key)))
    };
    let parse_usize = |key: &str| -> Result<usize> {
        get(key)?
            .parse()
            .map_err(|_| fmt_err(&manifest_path, format!("key {:?} is not an integer", key)))
    };

    let version: u32 = parse_usize("version")? as u32;
    if version != DATASET_VERSION {
        return Err(fmt_err(
            &manifest_path,
            format!(
                "unsupported dataset version {} (expected {})",
                version, DATASET_VERSION
            ),
        ));
    }
    let n = parse_usize("n")?;
    let classes = parse_usize("classes")?;
    let vocab = parse_usize("vocab")?;
    let img_h = parse_usize("img_h")?;
    let img_w = parse_usize("img_w")?;
    let img_c = parse_usize("img_c")?;
    let grid_h = parse_usize("grid_h")?;
    let grid_w = parse_usize("grid_w")?;
    let noise: f32 = get("noise")?
        .parse()
        .map_err(|_| fmt_err(&manifest_path, "key \"noise\" is not a number"))?;
    let seed: u64 = get("seed")?
        .parse()
        .map_err(|_| fmt_err(&manifest_path, "key \"seed\" is not an integer"))?;

    let images = read_f32s(&dir.join("images.f32"), n * img_h * img_w * img_c)?;
    let bow = read_f32s(&dir.join("bow.f32"), n * vocab)?;

    let labels_path = dir.join("labels.txt");
    let mut labels: Vec<Vec<u16>> = vec![Vec::new(); n];
    let file = fs::File::open(&labels_path)?;
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (id, rest) = line
            .split_once(':')
            .ok_or_else(|| fmt_err(&labels_path, format!("line {}: missing `:`", lineno + 1)))?;
        let id: usize = id.trim().parse().map_err(|_| {
            fmt_err(
                &labels_path,
                format!("line {}: bad instance id", lineno + 1),
            )
        })?;
        if id >= n {
            return Err(fmt_err(
                &labels_path,
                format!("line {}: instance id {} out of range", lineno + 1, id),
            ));
        }
        for tok in rest.split_whitespace() {
            let l: u16 = tok.parse().map_err(|_| {
                fmt_err(
                    &labels_path,
                    format!("line {}: bad label {:?}", lineno + 1, tok),
                )
            })?;
            labels[id].push(l);
        }
    }

    let masks_path = dir.join("masks.u8");
    let masks = if masks_path.exists() {
        let mut bytes = Vec::new();
        fs::File::open(&masks_path)?.read_to_end(&mut bytes)?;
        if bytes.len() != n * grid_h * grid_w {
            return Err(fmt_err(
                &masks_path,
                format!(
                    "expected {} bytes, found {}",
                    n * grid_h * grid_w,
                    bytes.len()
                ),
            ));
        }
        if bytes.iter().any(|&b| b > 1) {
            return Err(fmt_err(&masks_path, "mask bytes must be 0 or 1"));
        }
        Some(bytes)
    } else {
        None
    };

    let splits_path = dir.join("splits.txt");
    let mut splits = Splits {
        train: Vec::new(),
        test: Vec::new(),
        retrieval: Vec::new(),
    };
    let file = fs::File::open(&splits_path)?;
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let (name, rest) = line
            .split_once(':')
            .ok_or_else(|| fmt_err(&splits_path, format!("line {}: missing `:`", lineno + 1)))?;
        let mut list = Vec::new();
        for tok in rest.split_whitespace() {
            let idx: u32 = tok.parse().map_err(|_| {
                fmt_err(
                    &splits_path,
                    format!("line {}: bad index {:?}", lineno + 1, tok),
                )
            })?;
            if idx as usize >= n {
                return Err(fmt_err(
                    &splits_path,
                    format!("line {}: index {} out of range", lineno + 1, idx),
                ));
            }
            list.push(idx);
        }
        match name.trim() {
            "train" => splits.train = list,
            "test" => splits.test = list,
            "retrieval" => splits.retrieval = list,
            other => {
                return Err(fmt_err(
                    &splits_path,
                    format!("line {}: unknown split {:?}", lineno + 1, other),
                ))
            }
        }
    }

    Ok(Dataset {
        n,
        classes,
        vocab,
        img_h,
        img_w,
        img_c,
        grid_h,
        grid_w,
        noise,
        seed,
        images,
        bow,
        labels,
        masks,
        splits,
    })
}

/// Writes a text file atomically (temp file + rename).
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
