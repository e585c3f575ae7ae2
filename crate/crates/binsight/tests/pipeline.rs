//! End-to-end CLI pipeline over a synthetic corpus: convert -> pretrain
//! (with resume) -> finetune -> evaluate (direct and hierarchy-collapsed) ->
//! detect -> recon-eval, including exit codes and emitted files.

mod common;

use std::path::{Path, PathBuf};
use std::process::Command;

use binsight::cli;

/// Small model geometry for plumbing tests (the standard desk-scale config is
/// exercised by the acceptance suite).
const MODEL_FLAGS: [&str; 16] = [
    "--image-size",
    "32",
    "--patch-size",
    "8",
    "--encoder-dim",
    "32",
    "--encoder-blocks",
    "2",
    "--heads",
    "2",
    "--decoder-dim",
    "16",
    "--decoder-blocks",
    "1",
    "--decoder-heads",
    "2",
];

fn run(args: &[&str]) -> i32 {
    let mut full = vec!["binsight"];
    full.extend_from_slice(args);
    cli::run(full)
}

struct Corpus {
    root: tempfile::TempDir,
    raw_dir: PathBuf,
    img_dir: PathBuf,
    hierarchy: PathBuf,
    manifest: PathBuf,
    benign_file: PathBuf,
    malware_file: PathBuf,
}

/// 12 synthetic binaries (6 per class), one DEX fixture, one empty file.
fn build_corpus() -> Corpus {
    let root = tempfile::tempdir().unwrap();
    let raw_dir = root.path().join("raw");
    let img_dir = root.path().join("images");
    std::fs::create_dir_all(&raw_dir).unwrap();

    let mut benign_file = PathBuf::new();
    let mut malware_file = PathBuf::new();
    for i in 0..12 {
        let class = i % 2;
        let bytes = common::toy_binary(class, 256, 4096 + 256 * i, 900 + i as u64);
        let name = format!("sample{i:02}_{}.bin", if class == 0 { "clean" } else { "mal" });
        let path = raw_dir.join(&name);
        std::fs::write(&path, bytes).unwrap();
        if i == 0 {
            benign_file = path;
        } else if i == 1 {
            malware_file = path;
        }
    }
    std::fs::write(raw_dir.join("fixture.dex"), common::fixture_dex()).unwrap();
    std::fs::write(raw_dir.join("empty.bin"), b"").unwrap();

    let hierarchy = root.path().join("hierarchy.csv");
    std::fs::write(
        &hierarchy,
        "family,type,binary\nclean,benign,benign\nstripeworm,trojan,malicious\n",
    )
    .unwrap();

    Corpus {
        manifest: root.path().join("manifest.csv"),
        root,
        raw_dir,
        img_dir,
        hierarchy,
        benign_file,
        malware_file,
    }
}

fn write_manifest(corpus: &Corpus) {
    // 8 train (4+4), 4 test (2+2); paths relative to the manifest location.
    let mut body = String::from("image_path,binary_label,type_label,family_label,split\n");
    for i in 0..12 {
        let class = i % 2;
        let name = format!(
            "images/sample{i:02}_{}.bin.png",
            if class == 0 { "clean" } else { "mal" }
        );
        let (binary, ty, family) = if class == 0 {
            ("benign", "benign", "clean")
        } else {
            ("malicious", "trojan", "stripeworm")
        };
        let split = if i < 8 { "train" } else { "test" };
        body.push_str(&format!("{name},{binary},{ty},{family},{split}\n"));
    }
    std::fs::write(&corpus.manifest, body).unwrap();
}

#[test]
#[allow(clippy::needless_range_loop)] // index pairs drive two matrices at once
fn full_pipeline_runs_end_to_end() {
    let corpus = build_corpus();
    let raw = corpus.raw_dir.to_str().unwrap();
    let img = corpus.img_dir.to_str().unwrap();

    // -- convert ------------------------------------------------------------
    let code = run(&["convert", "--input", raw, "--output", img]);
    assert_eq!(code, 0, "convert must succeed (empty file is skipped, not fatal)");
    let log = std::fs::read_to_string(corpus.img_dir.join("conversion.log")).unwrap();
    assert_eq!(log.lines().filter(|l| l.contains("\tok\t")).count(), 13); // 12 + fixture.dex
    assert_eq!(log.lines().filter(|l| l.contains("\tskip\t")).count(), 1); // empty.bin
    assert!(corpus.img_dir.join("sample00_clean.bin.png").exists());
    assert!(corpus.img_dir.join("fixture.dex.png").exists());

    // strict mode flips the skip into a failure
    let strict_dir = corpus.root.path().join("images_strict");
    let code = run(&[
        "convert",
        "--input",
        raw,
        "--output",
        strict_dir.to_str().unwrap(),
        "--strict",
    ]);
    assert_eq!(code, 1);

    // deterministic: a second run produces byte-identical PNGs
    let again_dir = corpus.root.path().join("images_again");
    assert_eq!(run(&["convert", "--input", raw, "--output", again_dir.to_str().unwrap()]), 0);
    let a = std::fs::read(corpus.img_dir.join("sample03_mal.bin.png")).unwrap();
    let b = std::fs::read(again_dir.join("sample03_mal.bin.png")).unwrap();
    assert_eq!(a, b);

    // a single file as input also works and matches the directory conversion
    let single_dir = corpus.root.path().join("images_single");
    assert_eq!(
        run(&[
            "convert",
            "--input",
            corpus.malware_file.to_str().unwrap(),
            "--output",
            single_dir.to_str().unwrap(),
        ]),
        0
    );
    let single = std::fs::read(single_dir.join("sample01_mal.bin.png")).unwrap();
    let from_dir = std::fs::read(corpus.img_dir.join("sample01_mal.bin.png")).unwrap();
    assert_eq!(single, from_dir);

    write_manifest(&corpus);
    let manifest = corpus.manifest.to_str().unwrap();
    let hierarchy = corpus.hierarchy.to_str().unwrap();

    // -- pretrain + resume ---------------------------------------------------
    let pre_dir = corpus.root.path().join("pretrain");
    let mut args = vec![
        "pretrain",
        "--manifest",
        manifest,
        "--hierarchy",
        hierarchy,
        "--output",
        pre_dir.to_str().unwrap(),
        "--epochs",
        "2",
        "--batch",
        "4",
        "--lr",
        "0.001",
        "--seed",
        "7",
    ];
    args.extend_from_slice(&MODEL_FLAGS);
    assert_eq!(run(&args), 0);
    assert!(pre_dir.join("mae_epoch1.ckpt").exists());
    assert!(pre_dir.join("mae_epoch2.ckpt").exists());
    let loss_before = std::fs::read_to_string(pre_dir.join("loss.csv")).unwrap();
    assert!(loss_before.starts_with("epoch,step,loss\n"));
    let steps_before = loss_before.lines().count() - 1;
    assert_eq!(steps_before, 4); // 2 epochs x ceil(8/4)

    let ckpt2 = pre_dir.join("mae_epoch2.ckpt");
    let mut resume_args = vec![
        "pretrain",
        "--manifest",
        manifest,
        "--hierarchy",
        hierarchy,
        "--output",
        pre_dir.to_str().unwrap(),
        "--resume",
        ckpt2.to_str().unwrap(),
        "--epochs",
        "1",
        "--batch",
        "4",
        "--lr",
        "0.001",
        "--seed",
        "7",
    ];
    resume_args.extend_from_slice(&MODEL_FLAGS);
    assert_eq!(run(&resume_args), 0);
    assert!(pre_dir.join("mae_epoch3.ckpt").exists());
    let loss_after = std::fs::read_to_string(pre_dir.join("loss.csv")).unwrap();
    assert!(loss_after.starts_with(&loss_before), "resume must append to the trace");
    let last = loss_after.lines().last().unwrap();
    assert!(last.starts_with("3,6,"), "continued epoch/step numbering, got `{last}`");

    // resume with a mismatched geometry errors out
    let mut bad_args = vec![
        "pretrain",
        "--manifest",
        manifest,
        "--hierarchy",
        hierarchy,
        "--output",
        pre_dir.to_str().unwrap(),
        "--resume",
        ckpt2.to_str().unwrap(),
        "--epochs",
        "1",
    ];
    bad_args.extend_from_slice(&["--image-size", "64", "--patch-size", "8"]);
    assert_eq!(run(&bad_args), 1);

    // -- finetune -------------------------------------------------------------
    let ft_dir = corpus.root.path().join("finetune");
    let mut ft_args = vec![
        "finetune",
        "--manifest",
        manifest,
        "--hierarchy",
        hierarchy,
        "--output",
        ft_dir.to_str().unwrap(),
        "--task",
        "binary",
        "--from",
        ckpt2.to_str().unwrap(),
        "--epochs",
        "80",
        "--batch",
        "8",
        "--lr",
        "0.002",
        "--seed",
        "3",
    ];
    ft_args.extend_from_slice(&MODEL_FLAGS);
    assert_eq!(run(&ft_args), 0);
    let binary_model = ft_dir.join("model_binary.ckpt");
    assert!(binary_model.exists());

    // missing init choice -> error
    let code = run(&[
        "finetune",
        "--manifest",
        manifest,
        "--hierarchy",
        hierarchy,
        "--output",
        ft_dir.to_str().unwrap(),
        "--task",
        "binary",
    ]);
    assert_eq!(code, 1);

    // --from with mismatched config -> error (image size differs)
    let mut mismatch_args = vec![
        "finetune",
        "--manifest",
        manifest,
        "--hierarchy",
        hierarchy,
        "--output",
        ft_dir.to_str().unwrap(),
        "--task",
        "binary",
        "--from",
        ckpt2.to_str().unwrap(),
        "--image-size",
        "64",
    ];
    mismatch_args.extend_from_slice(&MODEL_FLAGS[2..]);
    assert_eq!(run(&mismatch_args), 1);

    // scratch family model for the hierarchy-collapse path
    let mut fam_args = vec![
        "finetune",
        "--manifest",
        manifest,
        "--hierarchy",
        hierarchy,
        "--output",
        ft_dir.to_str().unwrap(),
        "--task",
        "family",
        "--scratch",
        "--epochs",
        "40",
        "--batch",
        "8",
        "--lr",
        "0.002",
        "--seed",
        "4",
    ];
    fam_args.extend_from_slice(&MODEL_FLAGS);
    assert_eq!(run(&fam_args), 0);
    let family_model = ft_dir.join("model_family.ckpt");
    assert!(family_model.exists());

    // -- evaluate --------------------------------------------------------------
    let eval_dir = corpus.root.path().join("eval_binary");
    assert_eq!(
        run(&[
            "evaluate",
            "--manifest",
            manifest,
            "--hierarchy",
            hierarchy,
            "--model",
            binary_model.to_str().unwrap(),
            "--output",
            eval_dir.to_str().unwrap(),
            "--split",
            "test",
        ]),
        0
    );
    for f in ["metrics.json", "confusion.csv", "confusion.png", "roc.csv", "roc.png"] {
        assert!(eval_dir.join(f).exists(), "missing {f}");
    }
    let metrics: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval_dir.join("metrics.json")).unwrap())
            .unwrap();
    assert_eq!(metrics["n_samples"], 4);
    assert!(metrics["accuracy"].as_f64().unwrap() >= 0.0);

    let eval_fam = corpus.root.path().join("eval_family");
    assert_eq!(
        run(&[
            "evaluate",
            "--manifest",
            manifest,
            "--hierarchy",
            hierarchy,
            "--model",
            family_model.to_str().unwrap(),
            "--output",
            eval_fam.to_str().unwrap(),
            "--split",
            "test",
            "--infer-coarse",
        ]),
        0
    );
    for f in ["metrics.json", "metrics_coarse.json", "confusion.csv", "confusion_coarse.csv"] {
        assert!(eval_fam.join(f).exists(), "missing {f}");
    }
    // ROC only for binary-probability outputs
    assert!(!eval_fam.join("roc.csv").exists());
    // collapse equivalence: coarse confusion == lookup-collapsed fine confusion
    let fine = read_confusion(&eval_fam.join("confusion.csv"));
    let coarse = read_confusion(&eval_fam.join("confusion_coarse.csv"));
    let collapse = |label: &str| -> usize {
        // toy hierarchy: family `clean` is benign, everything else malicious
        usize::from(label != "clean")
    };
    let mut collapsed = [[0u64; 2]; 2];
    for (i, row_label) in fine.labels.iter().enumerate() {
        for (j, col_label) in fine.labels.iter().enumerate() {
            collapsed[collapse(row_label)][collapse(col_label)] += fine.counts[i][j];
        }
    }
    assert_eq!(coarse.labels, vec!["benign", "malicious"]);
    for i in 0..2 {
        for j in 0..2 {
            assert_eq!(coarse.counts[i][j], collapsed[i][j], "cell {i},{j}");
        }
    }

    // evaluating an empty split errors
    assert_eq!(
        run(&[
            "evaluate",
            "--manifest",
            manifest,
            "--hierarchy",
            hierarchy,
            "--model",
            binary_model.to_str().unwrap(),
            "--output",
            eval_dir.to_str().unwrap(),
            "--split",
            "val",
        ]),
        1
    );

    // --infer-coarse is only meaningful for fine-grained models
    assert_eq!(
        run(&[
            "evaluate",
            "--manifest",
            manifest,
            "--hierarchy",
            hierarchy,
            "--model",
            binary_model.to_str().unwrap(),
            "--output",
            eval_dir.to_str().unwrap(),
            "--infer-coarse",
        ]),
        1
    );

    // -- detect (real process, real exit codes) --------------------------------
    let exe = env!("CARGO_BIN_EXE_binsight");
    let detect = |file: &Path| -> (i32, String) {
        let out = Command::new(exe)
            .args([
                "detect",
                file.to_str().unwrap(),
                "--model",
                binary_model.to_str().unwrap(),
                "--hierarchy",
                hierarchy,
            ])
            .output()
            .expect("binary runs");
        (
            out.status.code().unwrap_or(-1),
            String::from_utf8_lossy(&out.stdout).into_owned(),
        )
    };
    let (code, stdout) = detect(&corpus.malware_file);
    assert_eq!(code, 2, "training malware sample must be flagged: {stdout}");
    assert!(stdout.contains("MALICIOUS p="), "{stdout}");
    assert!(stdout.contains("convert "), "timing line expected: {stdout}");

    let (code, stdout) = detect(&corpus.benign_file);
    assert_eq!(code, 0, "training benign sample must pass: {stdout}");
    assert!(stdout.contains("BENIGN p="), "{stdout}");

    let (code, _) = detect(Path::new("/nonexistent/file.bin"));
    assert_eq!(code, 1);

    // -- recon-eval -------------------------------------------------------------
    let recon_dir = corpus.root.path().join("recon");
    let mut recon_args = vec![
        "recon-eval",
        "--manifest",
        manifest,
        "--hierarchy",
        hierarchy,
        "--model",
        ckpt2.to_str().unwrap(),
        "--output",
        recon_dir.to_str().unwrap(),
        "--split",
        "test",
        "--seed",
        "11",
        "--n-masks-eval",
        "3",
    ];
    recon_args.extend_from_slice(&MODEL_FLAGS);
    assert_eq!(run(&recon_args), 0);
    let recon = std::fs::read_to_string(recon_dir.join("recon_by_class.csv")).unwrap();
    assert!(recon.starts_with("class,mean_abs_error,n_images\n"));
    let rows: Vec<&str> = recon.lines().skip(1).collect();
    // one row per used type plus the overall row; counts sum to the split size
    let n_total: usize = rows
        .iter()
        .filter(|l| !l.starts_with("__overall__"))
        .map(|l| l.rsplit(',').next().unwrap().parse::<usize>().unwrap())
        .sum();
    assert_eq!(n_total, 4);
    assert!(rows.iter().any(|l| l.starts_with("benign,")));
    assert!(rows.iter().any(|l| l.starts_with("trojan,")));

    // deterministic under --seed
    let recon_dir2 = corpus.root.path().join("recon2");
    let mut recon_args2 = recon_args.clone();
    let pos = recon_args2.iter().position(|a| *a == "--output").unwrap();
    recon_args2[pos + 1] = recon_dir2.to_str().unwrap();
    assert_eq!(run(&recon_args2), 0);
    assert_eq!(
        recon,
        std::fs::read_to_string(recon_dir2.join("recon_by_class.csv")).unwrap()
    );
}

#[test]
fn missing_manifest_is_an_operational_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("hierarchy.csv"),
        "family,type,binary\nclean,benign,benign\nworm,trojan,malicious\n",
    )
    .unwrap();
    let code = run(&[
        "pretrain",
        "--manifest",
        dir.path().join("nope.csv").to_str().unwrap(),
        "--hierarchy",
        dir.path().join("hierarchy.csv").to_str().unwrap(),
        "--output",
        dir.path().join("out").to_str().unwrap(),
    ]);
    assert_eq!(code, 1);
    assert!(!dir.path().join("out").exists(), "no partial outputs on error");
}

#[test]
fn config_file_flags_precedence() {
    // config errors must be caught before any side effect
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let code = run(&[
        "convert",
        "--input",
        dir.path().to_str().unwrap(),
        "--output",
        out.to_str().unwrap(),
        "--width",
        "0",
    ]);
    assert_eq!(code, 1);
    assert!(!out.exists(), "invalid config must not create outputs");
}

struct CsvMatrix {
    labels: Vec<String>,
    counts: Vec<Vec<u64>>,
}

fn read_confusion(path: &Path) -> CsvMatrix {
    let text = std::fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header = lines.next().unwrap();
    let labels: Vec<String> = header.split(',').skip(1).map(str::to_string).collect();
    let counts = lines
        .map(|l| l.split(',').skip(1).map(|v| v.parse().unwrap()).collect())
        .collect();
    CsvMatrix { labels, counts }
}
