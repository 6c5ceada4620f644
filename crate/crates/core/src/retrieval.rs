//! Test-time encoding (foreground codes only), Hamming ranking over
//! bit-packed codes, average precision / MAP and precision-recall curves.
//!
//! Ranking ties are broken by ascending id so reports are reproducible.
//! Queries are evaluated in parallel across threads (capped by the
//! XMH_THREADS environment variable) with results merged in query order, so
//! the output is identical to sequential evaluation.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use crate::attention::{AttentionMask, MaskMode};
use crate::data::{Dataset, SimilarityMatrix};
use crate::hashcoder::{binarize, BinaryCode};
use crate::model::Model;
use crate::{Error, Result};

/// Which modality a code database holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Image,
    Text,
}

impl std::str::FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(Modality::Image),
            "text" => Ok(Modality::Text),
            other => Err(Error::Config(format!("unknown modality {:?}", other))),
        }
    }
}

impl std::fmt::Display for Modality {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Modality::Image => write!(f, "image"),
            Modality::Text => write!(f, "text"),
        }
    }
}

/// Bit-packed binary codes with instance ids. Bit = 1 encodes +1.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodeDatabase {
    pub modality: Modality,
    pub q: usize,
    pub ids: Vec<u32>,
    packed: Vec<u64>,
}

fn words_per_code(q: usize) -> usize {
    q.div_ceil(64)
}

/// Packs a {-1,+1} code into u64 words, bit i of word i/64 set iff +1.
pub fn pack_code(code: &BinaryCode) -> Vec<u64> {
    let mut words = vec![0u64; words_per_code(code.len())];
    for (i, &b) in code.bits.iter().enumerate() {
        if b > 0 {
            words[i / 64] |= 1u64 << (i % 64);
        }
    }
    words
}

pub fn unpack_code(words: &[u64], q: usize) -> BinaryCode {
    let bits = (0..q)
        .map(|i| {
            if words[i / 64] >> (i % 64) & 1 == 1 {
                1i8
            } else {
                -1i8
            }
        })
        .collect();
    BinaryCode { bits }
}

/// Hamming distance between two packed codes (XOR + popcount).
pub fn hamming_packed(a: &[u64], b: &[u64]) -> u32 {
    a.iter()
        .zip(b.iter())
        .map(|(x, y)| (x ^ y).count_ones())
        .sum()
}

impl CodeDatabase {
    pub fn new(modality: Modality, q: usize) -> Self {
        CodeDatabase {
            modality,
            q,
            ids: Vec::new(),
            packed: Vec::new(),
        }
    }

    pub fn push(&mut self, id: u32, code: &BinaryCode) -> Result<()> {
        if code.len() != self.q {
            return Err(Error::Dim(format!(
                "code length {} does not match database q {}",
                code.len(),
                self.q
            )));
        }
        self.ids.push(id);
        self.packed.extend(pack_code(code));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn code_words(&self, i: usize) -> &[u64] {
        let w = words_per_code(self.q);
        &self.packed[i * w..(i + 1) * w]
    }

    pub fn code(&self, i: usize) -> BinaryCode {
        unpack_code(self.code_words(i), self.q)
    }

    /// Binary file: one text header line, ids as u32 LE, codes as u64 LE.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut bytes = format!(
            "xmh-codes v1 modality={} q={} count={}\n",
            self.modality,
            self.q,
            self.len()
        )
        .into_bytes();
        for id in &self.ids {
            bytes.extend_from_slice(&id.to_le_bytes());
        }
        for w in &self.packed {
            bytes.extend_from_slice(&w.to_le_bytes());
        }
        fs::write(path, bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<CodeDatabase> {
        let fmt_err = |msg: String| Error::Format {
            path: path.display().to_string(),
            msg,
        };
        let bytes = fs::read(path)?;
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| fmt_err("missing header".into()))?;
        let header = std::str::from_utf8(&bytes[..nl])
            .map_err(|_| fmt_err("header is not valid UTF-8".into()))?;
        let mut tokens = header.split_whitespace();
        if tokens.next() != Some("xmh-codes") || tokens.next() != Some("v1") {
            return Err(fmt_err("bad magic or version".into()));
        }
        let mut modality = None;
        let mut q = None;
        let mut count = None;
        for tok in tokens {
            let (k, v) = tok
                .split_once('=')
                .ok_or_else(|| fmt_err(format!("bad header token {:?}", tok)))?;
            match k {
                "modality" => modality = Some(v.parse::<Modality>()?),
                "q" => q = Some(v.parse::<usize>().map_err(|_| fmt_err("bad q".into()))?),
                "count" => {
                    count = Some(
                        v.parse::<usize>()
                            .map_err(|_| fmt_err("bad count".into()))?,
                    )
                }
                other => return Err(fmt_err(format!("unknown header key {:?}", other))),
            }
        }
        let modality = modality.ok_or_else(|| fmt_err("missing modality".into()))?;
        let q = q.ok_or_else(|| fmt_err("missing q".into()))?;
        let count = count.ok_or_else(|| fmt_err("missing count".into()))?;
        let w = words_per_code(q);
        let expect = nl + 1 + count * 4 + count * w * 8;
        if bytes.len() != expect {
            return Err(fmt_err(format!(
                "expected {} bytes, found {}",
                expect,
                bytes.len()
            )));
        }
        let mut ids = Vec::with_capacity(count);
        let mut off = nl + 1;
        for _ in 0..count {
            ids.push(u32::from_le_bytes([
                bytes[off],
                bytes[off + 1],
                bytes[off + 2],
                bytes[off + 3],
            ]));
            off += 4;
        }
        let mut packed = Vec::with_capacity(count * w);
        for _ in 0..count * w {
            let mut arr = [0u8; 8];
            arr.copy_from_slice(&bytes[off..off + 8]);
            packed.push(u64::from_le_bytes(arr));
            off += 8;
        }
        Ok(CodeDatabase {
            modality,
            q,
            ids,
            packed,
        })
    }

    /// Text record file: `id<TAB>q<TAB>bits` with the {0,1} display map.
    pub fn save_tsv(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path)?;
        for i in 0..self.len() {
            writeln!(
                f,
                "{}\t{}\t{}",
                self.ids[i],
                self.q,
                self.code(i).to_bit_string()
            )?;
        }
        Ok(())
    }

    pub fn load_tsv(path: &Path, modality: Modality) -> Result<CodeDatabase> {
        let fmt_err = |lineno: usize, msg: String| Error::Format {
            path: path.display().to_string(),
            msg: format!("line {}: {}", lineno, msg),
        };
        let file = fs::File::open(path)?;
        let mut db: Option<CodeDatabase> = None;
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(fmt_err(
                    lineno + 1,
                    "expected 3 tab-separated fields".into(),
                ));
            }
            let id: u32 = fields[0]
                .parse()
                .map_err(|_| fmt_err(lineno + 1, "bad id".into()))?;
            let q: usize = fields[1]
                .parse()
                .map_err(|_| fmt_err(lineno + 1, "bad q".into()))?;
            let code = BinaryCode::from_bit_string(fields[2])?;
            if code.len() != q {
                return Err(fmt_err(
                    lineno + 1,
                    "bit string length differs from q".into(),
                ));
            }
            let db = db.get_or_insert_with(|| CodeDatabase::new(modality, q));
            db.push(id, &code)?;
        }
        db.ok_or_else(|| Error::Format {
            path: path.display().to_string(),
            msg: "empty code file".into(),
        })
    }
}

/// Full ranking of one query over a database.
#[derive(Clone, Debug)]
pub struct RetrievalResult {
    pub query_id: u32,
    /// (database id, Hamming distance), distance ascending, ties by
    /// ascending id.
    pub ranked: Vec<(u32, u32)>,
}

/// Ranks the whole database by Hamming distance from the query.
pub fn hamming_rank(query: &BinaryCode, db: &CodeDatabase) -> Result<RetrievalResult> {
    if query.len() != db.q {
        return Err(Error::Dim(format!(
            "query length {} does not match database q {}",
            query.len(),
            db.q
        )));
    }
    let qwords = pack_code(query);
    Ok(rank_packed(&qwords, 0, db))
}

fn rank_packed(query_words: &[u64], query_id: u32, db: &CodeDatabase) -> RetrievalResult {
    let mut ranked: Vec<(u32, u32)> = (0..db.len())
        .map(|i| (db.ids[i], hamming_packed(query_words, db.code_words(i))))
        .collect();
    ranked.sort_unstable_by(|a, b| a.1.cmp(&b.1).then(a.0.cmp(&b.0)));
    RetrievalResult { query_id, ranked }
}

/// AP over ranked binary relevance flags: mean of precision at the rank of
/// every relevant item. Zero relevant items scores 0 and is still counted.
pub fn average_precision(flags: &[bool]) -> f64 {
    let total_rel = flags.iter().filter(|&&f| f).count();
    if total_rel == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank0, &rel) in flags.iter().enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (rank0 + 1) as f64;
        }
    }
    sum / total_rel as f64
}

/// AP truncated at rank `k`, normalized by min(R, k) with R the number of
/// relevant items in the full ranking.
pub fn average_precision_at(flags: &[bool], k: usize) -> f64 {
    let total_rel = flags.iter().filter(|&&f| f).count();
    let denom = total_rel.min(k);
    if denom == 0 {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank0, &rel) in flags.iter().take(k).enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (rank0 + 1) as f64;
        }
    }
    sum / denom as f64
}

/// (recall, precision) at every rank cutoff 1..=len.
pub fn pr_points(flags: &[bool]) -> Vec<(f64, f64)> {
    let total_rel = flags.iter().filter(|&&f| f).count();
    let mut out = Vec::with_capacity(flags.len());
    let mut hits = 0usize;
    for (rank0, &rel) in flags.iter().enumerate() {
        if rel {
            hits += 1;
        }
        let precision = hits as f64 / (rank0 + 1) as f64;
        let recall = if total_rel == 0 {
            0.0
        } else {
            hits as f64 / total_rel as f64
        };
        out.push((recall, precision));
    }
    out
}

/// Interpolated precision on a recall grid: at grid value r, the maximum
/// precision among cutoffs with recall >= r (0 when none reaches r).
pub fn interpolate_pr(points: &[(f64, f64)], grid: &[f64]) -> Vec<(f64, f64)> {
    grid.iter()
        .map(|&r| {
            let best = points
                .iter()
                .filter(|(recall, _)| *recall >= r)
                .map(|(_, p)| *p)
                .fold(0.0f64, f64::max);
            (r, best)
        })
        .collect()
}

/// Evenly spaced recall grid over [0, 1] with `points` entries.
pub fn recall_grid(points: usize) -> Vec<f64> {
    let n = points.max(2);
    (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
}

/// MAP, per-query APs and the averaged interpolated PR curve for one
/// query-database direction.
#[derive(Clone, Debug)]
pub struct EvalReport {
    pub query_modality: Modality,
    pub db_modality: Modality,
    pub q: usize,
    pub map: f64,
    pub per_query_ap: Vec<f64>,
    pub pr: Vec<(f64, f64)>,
    pub map_cutoff: Option<usize>,
}

impl EvalReport {
    pub fn direction(&self) -> String {
        let tag = |m: Modality| match m {
            Modality::Image => "I",
            Modality::Text => "T",
        };
        format!("{}2{}", tag(self.query_modality), tag(self.db_modality))
    }

    /// Machine-readable rows: `metric<TAB>direction<TAB>q<TAB>value`.
    pub fn metric_rows(&self) -> String {
        let mut s = String::new();
        let name = match self.map_cutoff {
            Some(k) => format!("map@{}", k),
            None => "map".to_string(),
        };
        s.push_str(&format!(
            "{}\t{}\t{}\t{:.6}\n",
            name,
            self.direction(),
            self.q,
            self.map
        ));
        s
    }

    /// PR points as `recall,precision` CSV lines with a header.
    pub fn pr_csv(&self) -> String {
        let mut s = String::from("recall,precision\n");
        for (r, p) in &self.pr {
            s.push_str(&format!("{:.6},{:.6}\n", r, p));
        }
        s
    }
}

/// Number of worker threads: XMH_THREADS when set, else all cores.
pub fn thread_count() -> usize {
    if let Ok(v) = std::env::var("XMH_THREADS") {
        if let Ok(n) = v.parse::<usize>() {
            if n >= 1 {
                return n;
            }
        }
    }
    std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
}

/// Evaluates all queries against the database: full Hamming ranking per
/// query, AP (optionally truncated) and interpolated PR averaged over
/// queries. Relevance of (query, item) is S(query, item) = 1.
pub fn evaluate(
    queries: &CodeDatabase,
    db: &CodeDatabase,
    sim: &SimilarityMatrix,
    grid: &[f64],
    map_cutoff: Option<usize>,
) -> Result<EvalReport> {
    if queries.q != db.q {
        return Err(Error::Dim(format!(
            "query q {} does not match database q {}",
            queries.q, db.q
        )));
    }
    let max_id = queries.ids.iter().chain(db.ids.iter()).copied().max();
    if let Some(max_id) = max_id {
        if max_id as usize >= sim.len() {
            return Err(Error::Data(format!(
                "instance id {} outside ground-truth range {}",
                max_id,
                sim.len()
            )));
        }
    }

    let nq = queries.len();
    let per_query = |qi: usize| -> (f64, Vec<f64>) {
        let res = rank_packed(queries.code_words(qi), queries.ids[qi], db);
        let flags: Vec<bool> = res
            .ranked
            .iter()
            .map(|&(id, _)| sim.similar(res.query_id as usize, id as usize))
            .collect();
        let ap = match map_cutoff {
            Some(k) => average_precision_at(&flags, k),
            None => average_precision(&flags),
        };
        let interp = interpolate_pr(&pr_points(&flags), grid)
            .into_iter()
            .map(|(_, p)| p)
            .collect();
        (ap, interp)
    };

    let threads = thread_count().min(nq.max(1));
    let mut aps = vec![0.0f64; nq];
    let mut prs: Vec<Vec<f64>> = vec![Vec::new(); nq];
    if threads <= 1 || nq < 2 {
        for qi in 0..nq {
            let (ap, pr) = per_query(qi);
            aps[qi] = ap;
            prs[qi] = pr;
        }
    } else {
        // Disjoint chunks, results placed at query positions: identical to
        // the sequential order.
        let chunk = nq.div_ceil(threads);
        std::thread::scope(|scope| {
            let mut ap_rest: &mut [f64] = &mut aps;
            let mut pr_rest: &mut [Vec<f64>] = &mut prs;
            let mut start = 0usize;
            while start < nq {
                let take = chunk.min(nq - start);
                let (ap_chunk, ap_tail) = ap_rest.split_at_mut(take);
                let (pr_chunk, pr_tail) = pr_rest.split_at_mut(take);
                ap_rest = ap_tail;
                pr_rest = pr_tail;
                let begin = start;
                let per_query = &per_query;
                scope.spawn(move || {
                    for (off, (ap_slot, pr_slot)) in
                        ap_chunk.iter_mut().zip(pr_chunk.iter_mut()).enumerate()
                    {
                        let (ap, pr) = per_query(begin + off);
                        *ap_slot = ap;
                        *pr_slot = pr;
                    }
                });
                start += take;
            }
        });
    }

    let map = if nq == 0 {
        0.0
    } else {
        aps.iter().sum::<f64>() / nq as f64
    };
    let pr = grid
        .iter()
        .enumerate()
        .map(|(gi, &r)| {
            let avg = if nq == 0 {
                0.0
            } else {
                prs.iter().map(|p| p[gi]).sum::<f64>() / nq as f64
            };
            (r, avg)
        })
        .collect();

    Ok(EvalReport {
        query_modality: queries.modality,
        db_modality: db.modality,
        q: queries.q,
        map,
        per_query_ap: aps,
        pr,
        map_cutoff,
    })
}

/// Codes plus masks produced by encoding a corpus split.
pub struct EncodedCorpus {
    pub foreground: CodeDatabase,
    /// Present only when background codes were requested.
    pub background: Option<CodeDatabase>,
    pub masks: Vec<(u32, AttentionMask)>,
    /// Relaxed (pre-binarization) foreground codes, for debug dumps.
    pub relaxed: Vec<(u32, Vec<f64>)>,
}

/// Encodes instances through the trained pipeline: encode -> mask -> split ->
/// hash the foreground -> binarize. Background codes are produced only when
/// `with_background` is set.
pub fn encode_corpus(
    model: &Model,
    data: &Dataset,
    indices: &[u32],
    modality: Modality,
    with_background: bool,
) -> Result<EncodedCorpus> {
    let q = model.dims.q;
    let mut foreground = CodeDatabase::new(modality, q);
    let mut background = if with_background {
        Some(CodeDatabase::new(modality, q))
    } else {
        None
    };
    let mut masks = Vec::with_capacity(indices.len());
    let mut relaxed = Vec::with_capacity(indices.len());
    for &idx in indices {
        match modality {
            Modality::Image => {
                let fwd = model.forward_image(&data.image(idx as usize), MaskMode::Hard)?;
                foreground.push(idx, &binarize(&fwd.code_fg))?;
                if let Some(bg) = background.as_mut() {
                    bg.push(idx, &binarize(&fwd.code_bg))?;
                }
                relaxed.push((idx, fwd.code_fg.0.data().to_vec()));
                masks.push((idx, fwd.mask));
            }
            Modality::Text => {
                let fwd = model.forward_text(&data.text(idx as usize), MaskMode::Hard)?;
                foreground.push(idx, &binarize(&fwd.code_fg))?;
                if let Some(bg) = background.as_mut() {
                    bg.push(idx, &binarize(&fwd.code_bg))?;
                }
                relaxed.push((idx, fwd.code_fg.0.data().to_vec()));
                masks.push((idx, fwd.mask));
            }
        }
    }
    Ok(EncodedCorpus {
        foreground,
        background,
        masks,
        relaxed,
    })
}

/// Mask dump record: `id, alpha, H, W, z-bits row-major`.
pub fn mask_dump_line(id: u32, mask: &AttentionMask) -> String {
    let (h, w) = match mask.z.shape() {
        [h, w] => (*h, *w),
        [n] => (1usize, *n),
        other => (other.iter().product::<usize>(), 1),
    };
    let bits: String = mask
        .z
        .data()
        .iter()
        .map(|&v| if v > 0.5 { '1' } else { '0' })
        .collect();
    format!("{},{},{},{},{}", id, mask.alpha, h, w, bits)
}
