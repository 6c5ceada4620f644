//! Drives the compiled binary through the whole pipeline and checks the
//! documented exit codes.

use std::path::Path;
use std::process::{Command, Output};

fn xmh(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xmh"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn assert_code(out: &Output, want: i32) {
    let got = out.status.code().unwrap_or(-1);
    assert_eq!(
        got,
        want,
        "exit code {} != {}\nstdout: {}\nstderr: {}",
        got,
        want,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn full_pipeline_via_binary() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();

    let out = xmh(
        &[
            "gen-data",
            "--out",
            "data",
            "--n",
            "120",
            "--classes",
            "3",
            "--vocab",
            "48",
            "--test",
            "20",
            "--train",
            "80",
            "--seed",
            "9",
        ],
        cwd,
    );
    assert_code(&out, 0);

    std::fs::write(
        cwd.join("cfg.txt"),
        "epochs = 2\nq = 16\nseed = 4\nfeat_c = 8\ntxt_hidden = 16\ntxt_dim = 12\nhash_hidden = 24\nbatch_size = 20\n",
    )
    .unwrap();
    let out = xmh(
        &[
            "train", "--data", "data", "--config", "cfg.txt", "--out", "run",
        ],
        cwd,
    );
    assert_code(&out, 0);
    assert!(cwd.join("run/model.ckpt").exists());
    assert!(cwd.join("run/train.log").exists());

    let out = xmh(
        &[
            "encode",
            "--data",
            "data",
            "--checkpoint",
            "run/model.ckpt",
            "--split",
            "test",
            "--modality",
            "text",
            "--out",
            "txt.codes",
            "--dump-masks",
            "--dump-relaxed",
            "--with-background",
        ],
        cwd,
    );
    assert_code(&out, 0);
    assert!(cwd.join("txt.codes").exists());
    assert!(cwd.join("txt.codes.tsv").exists());
    assert!(cwd.join("txt.codes.bg").exists());
    assert!(cwd.join("txt.codes.masks.txt").exists());
    let relaxed = std::fs::read_to_string(cwd.join("txt.codes.relaxed.csv")).unwrap();
    // id plus q comma-separated values per record, all strictly inside (-1, 1).
    let first = relaxed.lines().next().unwrap();
    assert_eq!(first.split(',').count(), 1 + 16);
    for v in first.split(',').skip(1) {
        let v: f64 = v.parse().unwrap();
        assert!(v.abs() < 1.0);
    }

    let out = xmh(
        &[
            "encode",
            "--data",
            "data",
            "--checkpoint",
            "run/model.ckpt",
            "--split",
            "retrieval",
            "--modality",
            "image",
            "--out",
            "img.codes",
        ],
        cwd,
    );
    assert_code(&out, 0);

    let out = xmh(
        &[
            "retrieve",
            "--queries",
            "txt.codes",
            "--db",
            "img.codes",
            "--out",
            "ranks.tsv",
            "--top",
            "5",
        ],
        cwd,
    );
    assert_code(&out, 0);
    let ranks = std::fs::read_to_string(cwd.join("ranks.tsv")).unwrap();
    // Header plus 20 queries x 5 rows.
    assert_eq!(ranks.lines().count(), 1 + 20 * 5);

    let out = xmh(
        &[
            "eval",
            "--queries",
            "txt.codes",
            "--db",
            "img.codes",
            "--data",
            "data",
            "--direction",
            "t2i",
            "--out",
            "report",
        ],
        cwd,
    );
    assert_code(&out, 0);
    assert!(cwd.join("report.metrics.tsv").exists());
    assert!(cwd.join("report.ap.tsv").exists());
    assert!(cwd.join("report.pr.csv").exists());
    let metrics = std::fs::read_to_string(cwd.join("report.metrics.tsv")).unwrap();
    assert!(metrics.starts_with("map\tT2I\t16\t"));
    let pr = std::fs::read_to_string(cwd.join("report.pr.csv")).unwrap();
    assert!(pr.starts_with("recall,precision\n"));

    // --map-at changes only the cutoff.
    let out = xmh(
        &[
            "eval",
            "--queries",
            "txt.codes",
            "--db",
            "img.codes",
            "--data",
            "data",
            "--out",
            "report50",
            "--map-at",
            "50",
        ],
        cwd,
    );
    assert_code(&out, 0);
    let metrics = std::fs::read_to_string(cwd.join("report50.metrics.tsv")).unwrap();
    assert!(metrics.starts_with("map@50\tT2I\t16\t"));

    let out = xmh(
        &[
            "mask-stats",
            "--data",
            "data",
            "--checkpoint",
            "run/model.ckpt",
            "--split",
            "test",
            "--out",
            "masks.csv",
            "--baseline-samples",
            "4",
        ],
        cwd,
    );
    assert_code(&out, 0);
    let stats = String::from_utf8_lossy(&out.stdout).to_string();
    assert!(stats.contains("mean occupancy"));
    assert!(stats.contains("random-rectangle baseline"));
    let csv = std::fs::read_to_string(cwd.join("masks.csv")).unwrap();
    assert!(csv.starts_with("id,occupancy,iou\n"));
    assert_eq!(csv.lines().count(), 1 + 20);
}

#[test]
fn gen_data_is_deterministic_and_respects_force() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    let args = [
        "gen-data",
        "--out",
        "a",
        "--n",
        "40",
        "--classes",
        "2",
        "--vocab",
        "16",
        "--test",
        "8",
        "--train",
        "20",
        "--seed",
        "5",
    ];
    assert_code(&xmh(&args, cwd), 0);
    let mut args_b = args;
    args_b[2] = "b";
    assert_code(&xmh(&args_b, cwd), 0);
    for file in [
        "manifest",
        "images.f32",
        "bow.f32",
        "labels.txt",
        "masks.u8",
        "splits.txt",
    ] {
        let a = std::fs::read(cwd.join("a").join(file)).unwrap();
        let b = std::fs::read(cwd.join("b").join(file)).unwrap();
        assert_eq!(a, b, "{} differs between identical seeds", file);
    }

    // Existing non-empty dir without --force is a validation error.
    assert_code(&xmh(&args, cwd), 1);
    let mut forced = args.to_vec();
    forced.push("--force");
    assert_code(&xmh(&forced, cwd), 0);
}

#[test]
fn validation_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();

    // classes < 2 rejected.
    let out = xmh(
        &[
            "gen-data",
            "--out",
            "d",
            "--n",
            "10",
            "--classes",
            "1",
            "--test",
            "2",
            "--train",
            "5",
        ],
        cwd,
    );
    assert_code(&out, 1);

    // Unknown flag rejected.
    let out = xmh(&["gen-data", "--out", "d", "--bogus-flag"], cwd);
    assert_code(&out, 1);

    // Malformed config key is named with its line.
    assert_code(
        &xmh(
            &[
                "gen-data",
                "--out",
                "d",
                "--n",
                "40",
                "--classes",
                "2",
                "--vocab",
                "16",
                "--test",
                "8",
                "--train",
                "20",
            ],
            cwd,
        ),
        0,
    );
    std::fs::write(cwd.join("bad.cfg"), "epochs = 1\nwhatami = 3\n").unwrap();
    let out = xmh(
        &[
            "train", "--data", "d", "--config", "bad.cfg", "--out", "run",
        ],
        cwd,
    );
    assert_code(&out, 1);
    let stderr = String::from_utf8_lossy(&out.stderr).to_string();
    assert!(stderr.contains("whatami"), "stderr: {}", stderr);
    assert!(stderr.contains("line 2"), "stderr: {}", stderr);
}

#[test]
fn io_errors_exit_3() {
    let dir = tempfile::tempdir().unwrap();
    let out = xmh(
        &["train", "--data", "missing-dir", "--out", "run"],
        dir.path(),
    );
    assert_code(&out, 3);
}

#[test]
fn eval_direction_mismatch_is_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cwd = dir.path();
    assert_code(
        &xmh(
            &[
                "gen-data",
                "--out",
                "data",
                "--n",
                "40",
                "--classes",
                "2",
                "--vocab",
                "16",
                "--test",
                "8",
                "--train",
                "20",
            ],
            cwd,
        ),
        0,
    );
    std::fs::write(
        cwd.join("cfg.txt"),
        "epochs = 1\nq = 8\nfeat_c = 4\ntxt_hidden = 8\ntxt_dim = 6\nhash_hidden = 8\nbatch_size = 10\n",
    )
    .unwrap();
    assert_code(
        &xmh(
            &[
                "train", "--data", "data", "--config", "cfg.txt", "--out", "run",
            ],
            cwd,
        ),
        0,
    );
    assert_code(
        &xmh(
            &[
                "encode",
                "--data",
                "data",
                "--checkpoint",
                "run/model.ckpt",
                "--split",
                "test",
                "--modality",
                "text",
                "--out",
                "txt.codes",
            ],
            cwd,
        ),
        0,
    );
    assert_code(
        &xmh(
            &[
                "encode",
                "--data",
                "data",
                "--checkpoint",
                "run/model.ckpt",
                "--split",
                "test",
                "--modality",
                "image",
                "--out",
                "img.codes",
            ],
            cwd,
        ),
        0,
    );
    // Queries are text codes; claiming i2t is a mismatch.
    let out = xmh(
        &[
            "eval",
            "--queries",
            "txt.codes",
            "--db",
            "img.codes",
            "--data",
            "data",
            "--direction",
            "i2t",
            "--out",
            "r",
        ],
        cwd,
    );
    assert_code(&out, 1);
}
