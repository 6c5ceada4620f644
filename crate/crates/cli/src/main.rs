//! Command-line pipeline: synthetic data generation, adversarial training,
//! corpus encoding, Hamming retrieval, MAP/PR evaluation, the gradient
//! verification suite and attention-mask diagnostics.
//!
//! Exit codes: 0 success, 1 validation error, 2 numeric failure,
//! 3 I/O error.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rand::rngs::StdRng;
use rand::SeedableRng;

use xmh_core::attention::mask_iou;
use xmh_core::checkpoint::load_model;
use xmh_core::data::{
    build_similarity, generate_synthetic, load_dataset, make_splits, random_rectangle_mask,
    save_dataset, GenConfig, Split,
};
use xmh_core::gradcheck::run_full_suite;
use xmh_core::kernel::Tensor;
use xmh_core::retrieval::{
    encode_corpus, evaluate, hamming_rank, mask_dump_line, recall_grid, CodeDatabase, Modality,
};
use xmh_core::trainer::{train, Phase, TrainConfig};
use xmh_core::{Error, Result};

#[derive(Parser)]
#[command(
    name = "xmh",
    version,
    about = "Attention-aware adversarial cross-modal hashing"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired image/text dataset with planted masks.
    GenData(GenDataArgs),
    /// Train the adversarial hashing model.
    Train(TrainArgs),
    /// Encode a dataset split into binary codes (foreground by default).
    Encode(EncodeArgs),
    /// Rank a code database against a set of query codes.
    Retrieve(RetrieveArgs),
    /// Evaluate retrieval: MAP and precision-recall curves.
    Eval(EvalArgs),
    /// Run the finite-difference gradient verification suite.
    Gradcheck(GradcheckArgs),
    /// Attention-mask occupancy and IoU diagnostics against planted masks.
    MaskStats(MaskStatsArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output dataset directory.
    #[arg(long)]
    out: PathBuf,
    /// Number of aligned image/text pairs.
    #[arg(long, default_value_t = 2400)]
    n: usize,
    /// Number of label classes (>= 2).
    #[arg(long, default_value_t = 4)]
    classes: usize,
    /// Bag-of-words vocabulary size.
    #[arg(long, default_value_t = 256)]
    vocab: usize,
    /// Image side length in pixels.
    #[arg(long, default_value_t = 16)]
    img_size: usize,
    /// Planted-mask grid side length.
    #[arg(long, default_value_t = 8)]
    grid_size: usize,
    /// Noise level in [0, 1].
    #[arg(long, default_value_t = 0.1)]
    noise: f32,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Test (query) split size.
    #[arg(long, default_value_t = 200)]
    test: usize,
    /// Training split size (drawn from the retrieval set).
    #[arg(long, default_value_t = 1000)]
    train: usize,
    /// Overwrite an existing non-empty output directory.
    #[arg(long, default_value_t = false)]
    force: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Dataset directory from gen-data.
    #[arg(long)]
    data: PathBuf,
    /// `key = value` config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for train.log and checkpoints.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EncodeArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Which split to encode: train | test | retrieval.
    #[arg(long)]
    split: String,
    /// image | text.
    #[arg(long)]
    modality: String,
    /// Output code-database file; a `.tsv` text twin is written next to it.
    #[arg(long)]
    out: PathBuf,
    /// Also dump binary masks as `<out>.masks.txt`.
    #[arg(long, default_value_t = false)]
    dump_masks: bool,
    /// Also dump relaxed (pre-binarization) codes as `<out>.relaxed.csv`.
    #[arg(long, default_value_t = false)]
    dump_relaxed: bool,
    /// Also produce background codes as `<out>.bg` (diagnostic).
    #[arg(long, default_value_t = false)]
    with_background: bool,
}

#[derive(Args)]
struct RetrieveArgs {
    /// Query code-database file.
    #[arg(long)]
    queries: PathBuf,
    /// Database code file.
    #[arg(long)]
    db: PathBuf,
    /// Output TSV of ranked results.
    #[arg(long)]
    out: PathBuf,
    /// Keep only the best K results per query (full ranking by default).
    #[arg(long)]
    top: Option<usize>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    db: PathBuf,
    /// Dataset directory providing the ground-truth labels.
    #[arg(long)]
    data: PathBuf,
    /// t2i | i2t; checked against the code files' modalities.
    #[arg(long)]
    direction: Option<String>,
    /// Output prefix: writes <out>.metrics.tsv, <out>.ap.tsv, <out>.pr.csv.
    #[arg(long)]
    out: PathBuf,
    /// Truncate AP at this rank (full-ranking MAP by default).
    #[arg(long)]
    map_at: Option<usize>,
    /// Number of recall grid points for the PR curve.
    #[arg(long, default_value_t = 101)]
    pr_points: usize,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 1e-4)]
    tol: f64,
}

#[derive(Args)]
struct MaskStatsArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    split: String,
    /// Output CSV (`id,occupancy,iou`); stdout summary only when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Monte-Carlo samples per instance for the random-rectangle baseline.
    #[arg(long, default_value_t = 16)]
    baseline_samples: usize,
    #[arg(long, default_value_t = 99)]
    baseline_seed: u64,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are not errors.
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", e);
            let code = match e {
                Error::Config(_) | Error::Dim(_) | Error::Data(_) => 1,
                Error::NonFinite(_) => 2,
                Error::Io(_) | Error::Format { .. } => 3,
            };
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::GenData(args) => gen_data(args),
        Command::Train(args) => train_cmd(args),
        Command::Encode(args) => encode_cmd(args),
        Command::Retrieve(args) => retrieve_cmd(args),
        Command::Eval(args) => eval_cmd(args),
        Command::Gradcheck(args) => gradcheck_cmd(args),
        Command::MaskStats(args) => mask_stats_cmd(args),
    }
}

fn gen_data(args: GenDataArgs) -> Result<ExitCode> {
    if args.out.exists() {
        let non_empty = fs::read_dir(&args.out)?.next().is_some();
        if non_empty && !args.force {
            return Err(Error::Config(format!(
                "output directory {} is not empty (use --force to overwrite)",
                args.out.display()
            )));
        }
    }
    let cfg = GenConfig {
        n: args.n,
        classes: args.classes,
        img_size: args.img_size,
        grid_size: args.grid_size,
        vocab: args.vocab,
        noise: args.noise,
        seed: args.seed,
    };
    let mut ds = generate_synthetic(&cfg)?;
    ds.splits = make_splits(args.n, args.test, args.train, args.seed)?;
    save_dataset(&ds, &args.out)?;
    println!(
        "dataset: n={} classes={} vocab={} image={}x{} grid={}x{} train={} test={} retrieval={}",
        ds.n,
        ds.classes,
        ds.vocab,
        ds.img_h,
        ds.img_w,
        ds.grid_h,
        ds.grid_w,
        ds.splits.train.len(),
        ds.splits.test.len(),
        ds.splits.retrieval.len()
    );
    Ok(ExitCode::SUCCESS)
}

fn train_cmd(args: TrainArgs) -> Result<ExitCode> {
    let data = load_dataset(&args.data)?;
    let cfg = match &args.config {
        Some(path) => TrainConfig::load(path)?,
        None => TrainConfig::default(),
    };
    let run = train(&data, &cfg, Some(&args.out))?;

    // Per-epoch summary over the six components.
    let mut by_epoch: HashMap<usize, (usize, [f64; 6], usize)> = HashMap::new();
    for rec in &run.records {
        let entry = by_epoch.entry(rec.epoch).or_insert((0, [0.0; 6], 0));
        entry.0 += 1;
        for (acc, c) in entry.1.iter_mut().zip(rec.components()) {
            *acc += c;
        }
        if rec.phase == Phase::G {
            entry.2 += 1;
        }
    }
    let mut epochs: Vec<usize> = by_epoch.keys().copied().collect();
    epochs.sort_unstable();
    for e in epochs {
        let (steps, sums, g_steps) = &by_epoch[&e];
        let mean: Vec<String> = sums
            .iter()
            .map(|s| format!("{:.3}", s / *steps as f64))
            .collect();
        println!(
            "epoch {:>3}  steps {:>3} (g {:>2})  lr {:<9.3e} mean losses [t2i i2t i2i t2t t2i^ i2t^] = {}",
            e,
            steps,
            g_steps,
            cfg.lr_for_epoch(e),
            mean.join(" ")
        );
    }
    if let Some(path) = &run.checkpoint {
        println!("checkpoint: {}", path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn parse_split(s: &str) -> Result<Split> {
    s.parse()
}

fn parse_modality(s: &str) -> Result<Modality> {
    s.parse()
}

fn encode_cmd(args: EncodeArgs) -> Result<ExitCode> {
    let data = load_dataset(&args.data)?;
    let model = load_model(&args.checkpoint)?;
    if model.dims.img_h != data.img_h
        || model.dims.img_w != data.img_w
        || model.dims.img_c != data.img_c
        || model.dims.vocab != data.vocab
    {
        return Err(Error::Config(format!(
            "checkpoint dimensions (image {}x{}x{}, vocab {}) do not match dataset (image {}x{}x{}, vocab {})",
            model.dims.img_h,
            model.dims.img_w,
            model.dims.img_c,
            model.dims.vocab,
            data.img_h,
            data.img_w,
            data.img_c,
            data.vocab
        )));
    }
    let split = parse_split(&args.split)?;
    let modality = parse_modality(&args.modality)?;
    let indices = data.split_indices(split).to_vec();
    let encoded = encode_corpus(&model, &data, &indices, modality, args.with_background)?;

    encoded.foreground.save(&args.out)?;
    let tsv = twin_path(&args.out, "tsv");
    encoded.foreground.save_tsv(&tsv)?;
    println!(
        "encoded {} {} instances (q={}) -> {}",
        encoded.foreground.len(),
        modality,
        encoded.foreground.q,
        args.out.display()
    );

    if let Some(bg) = &encoded.background {
        let bg_path = twin_path(&args.out, "bg");
        bg.save(&bg_path)?;
        bg.save_tsv(&twin_path(&args.out, "bg.tsv"))?;
        println!("background codes -> {}", bg_path.display());
    }
    if args.dump_masks {
        let mask_path = twin_path(&args.out, "masks.txt");
        let mut f = fs::File::create(&mask_path)?;
        for (id, mask) in &encoded.masks {
            writeln!(f, "{}", mask_dump_line(*id, mask))?;
        }
        println!("masks -> {}", mask_path.display());
    }
    if args.dump_relaxed {
        let relaxed_path = twin_path(&args.out, "relaxed.csv");
        let mut f = fs::File::create(&relaxed_path)?;
        for (id, values) in &encoded.relaxed {
            let cols: Vec<String> = values.iter().map(|v| format!("{:.9}", v)).collect();
            writeln!(f, "{},{}", id, cols.join(","))?;
        }
        println!("relaxed codes -> {}", relaxed_path.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn twin_path(base: &Path, suffix: &str) -> PathBuf {
    let mut name = base.file_name().unwrap_or_default().to_os_string();
    name.push(".");
    name.push(suffix);
    base.with_file_name(name)
}

fn retrieve_cmd(args: RetrieveArgs) -> Result<ExitCode> {
    let queries = CodeDatabase::load(&args.queries)?;
    let db = CodeDatabase::load(&args.db)?;
    let mut f = fs::File::create(&args.out)?;
    writeln!(f, "query_id\tdb_id\thamming\trank")?;
    for qi in 0..queries.len() {
        let res = hamming_rank(&queries.code(qi), &db)?;
        let take = args.top.unwrap_or(res.ranked.len());
        for (rank, (id, dist)) in res.ranked.iter().take(take).enumerate() {
            writeln!(f, "{}\t{}\t{}\t{}", res.query_id, id, dist, rank + 1)?;
        }
    }
    println!(
        "ranked {} queries over {} database codes -> {}",
        queries.len(),
        db.len(),
        args.out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn eval_cmd(args: EvalArgs) -> Result<ExitCode> {
    let queries = CodeDatabase::load(&args.queries)?;
    let db = CodeDatabase::load(&args.db)?;
    if let Some(dir) = &args.direction {
        let (want_q, want_db) = match dir.to_ascii_lowercase().as_str() {
            "t2i" => (Modality::Text, Modality::Image),
            "i2t" => (Modality::Image, Modality::Text),
            other => {
                return Err(Error::Config(format!(
                    "direction must be t2i or i2t, got {:?}",
                    other
                )))
            }
        };
        if queries.modality != want_q || db.modality != want_db {
            return Err(Error::Config(format!(
                "direction {} does not match code files (queries are {}, database is {})",
                dir, queries.modality, db.modality
            )));
        }
    }
    let data = load_dataset(&args.data)?;
    let sim = build_similarity(&data.labels)?;
    let grid = recall_grid(args.pr_points);
    let report = evaluate(&queries, &db, &sim, &grid, args.map_at)?;

    let metrics_path = twin_path(&args.out, "metrics.tsv");
    fs::write(&metrics_path, report.metric_rows())?;
    let ap_path = twin_path(&args.out, "ap.tsv");
    let mut f = fs::File::create(&ap_path)?;
    for (qi, ap) in report.per_query_ap.iter().enumerate() {
        writeln!(f, "{}\t{:.6}", queries.ids[qi], ap)?;
    }
    let pr_path = twin_path(&args.out, "pr.csv");
    fs::write(&pr_path, report.pr_csv())?;

    let cutoff = match args.map_at {
        Some(k) => format!("MAP@{}", k),
        None => "MAP".to_string(),
    };
    println!(
        "{} [{}, q={}]: {:.4}  ({} queries, {} database codes)",
        cutoff,
        report.direction(),
        report.q,
        report.map,
        queries.len(),
        db.len()
    );
    println!(
        "wrote {}, {}, {}",
        metrics_path.display(),
        ap_path.display(),
        pr_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn gradcheck_cmd(args: GradcheckArgs) -> Result<ExitCode> {
    let reports = run_full_suite(args.seed, args.tol)?;
    let mut all_passed = true;
    for r in &reports {
        println!(
            "{:<28} max rel err {:>12.3e}  tol {:.0e}  {}",
            r.name,
            r.max_rel_err,
            r.tol,
            if r.passed { "PASS" } else { "FAIL" }
        );
        all_passed &= r.passed;
    }
    if all_passed {
        Ok(ExitCode::SUCCESS)
    } else {
        Err(Error::NonFinite("gradient check failed".into()))
    }
}

fn mask_stats_cmd(args: MaskStatsArgs) -> Result<ExitCode> {
    let data = load_dataset(&args.data)?;
    let model = load_model(&args.checkpoint)?;
    let split = parse_split(&args.split)?;
    let indices = data.split_indices(split).to_vec();
    let encoded = encode_corpus(&model, &data, &indices, Modality::Image, false)?;

    let have_planted = data.masks.is_some();
    if !have_planted {
        eprintln!("warning: dataset has no planted masks; IoU omitted");
    }
    let grid_cells_match = model.dims.grid_h() == data.grid_h && model.dims.grid_w() == data.grid_w;
    if have_planted && !grid_cells_match {
        eprintln!(
            "warning: model grid {}x{} differs from planted grid {}x{}; IoU omitted",
            model.dims.grid_h(),
            model.dims.grid_w(),
            data.grid_h,
            data.grid_w
        );
    }
    let with_iou = have_planted && grid_cells_match;

    let mut occ_sum = 0.0;
    let mut iou_sum = 0.0;
    let mut rows = String::from("id,occupancy,iou\n");
    for (id, mask) in &encoded.masks {
        let occ = mask.occupancy();
        occ_sum += occ;
        if with_iou {
            let planted = data.planted_mask(*id as usize).unwrap();
            let iou = mask_iou(&mask.z, planted);
            iou_sum += iou;
            rows.push_str(&format!("{},{:.6},{:.6}\n", id, occ, iou));
        } else {
            rows.push_str(&format!("{},{:.6},\n", id, occ));
        }
    }
    if let Some(out) = &args.out {
        fs::write(out, rows)?;
    }

    let n = encoded.masks.len().max(1) as f64;
    println!("instances: {}", encoded.masks.len());
    println!("mean occupancy: {:.4}", occ_sum / n);
    if with_iou {
        let mean_iou = iou_sum / n;
        // Monte-Carlo baseline: random rectangles from the planting
        // distribution scored against the same planted masks.
        let mut rng = StdRng::seed_from_u64(args.baseline_seed);
        let mut base_sum = 0.0;
        let mut base_n = 0usize;
        for (id, _) in &encoded.masks {
            let planted = data.planted_mask(*id as usize).unwrap();
            for _ in 0..args.baseline_samples {
                let rect = random_rectangle_mask(data.grid_h, data.grid_w, &mut rng);
                let z = Tensor::from_vec(
                    &[data.grid_h, data.grid_w],
                    rect.iter().map(|&b| b as f64).collect(),
                );
                base_sum += mask_iou(&z, planted);
                base_n += 1;
            }
        }
        let baseline = base_sum / base_n.max(1) as f64;
        println!("mean IoU vs planted: {:.4}", mean_iou);
        println!("random-rectangle baseline IoU: {:.4}", baseline);
        println!("IoU lift over baseline: {:+.4}", mean_iou - baseline);
    }
    Ok(ExitCode::SUCCESS)
}
