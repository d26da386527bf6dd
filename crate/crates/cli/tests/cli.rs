use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sparsecomp::codec::{read_interchange, CompressedImage};
use sparsecomp::image_io::{split_files, write_cifar10_file};
use sparsecomp::{ImageTensor, Split};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_sparsecomp"))
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("spawn");
    if !out.status.success() {
        eprintln!("stderr: {}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn image(seed: usize) -> ImageTensor<f32> {
    let f = 0.15 + 0.05 * (seed % 5) as f32;
    let data = (0..32 * 32 * 3)
        .map(|i| {
            let (r, c, ch) = (i / 96, (i / 3) % 32, i % 3);
            0.5 + 0.35 * ((r as f32 * f + c as f32 * 0.7 * f) + seed as f32 + ch as f32).sin()
        })
        .collect();
    ImageTensor::from_vec(32, 32, 3, data).unwrap()
}

fn dataset(dir: &Path, per_file: usize) {
    for (n, path) in split_files(dir, Split::Train)
        .into_iter()
        .chain(split_files(dir, Split::Test))
        .enumerate()
    {
        let imgs: Vec<_> = (0..per_file).map(|i| image(n * per_file + i)).collect();
        let labels: Vec<u8> = (0..per_file).map(|i| (i % 10) as u8).collect();
        write_cifar10_file(path, &imgs, &labels).unwrap();
    }
}

const TINY_DICT: &[&str] = &[
    "--atoms", "8", "--patch", "4", "--stride", "2", "--batch-size", "4", "--epochs", "1", "--iterations", "60",
    "--lambda", "0.05",
];

#[test]
fn usage_errors_exit_2_and_runtime_errors_exit_1() {
    let out = run(&["compress", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));

    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope");
    let out_dir = tmp.path().join("out");
    let out = run(&["compress", "--data-dir", missing.to_str().unwrap(), "--out-dir", out_dir.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn train_dict_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    dataset(tmp.path(), 2);
    let data = tmp.path().to_str().unwrap();
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let dict = tmp.path().join(format!("{name}.scd"));
        let hist = tmp.path().join(format!("{name}.csv"));
        let mut args = vec![
            "--threads", "2", "train-dict", "--data-dir", data, "--limit", "8", "--mask", "random", "--seed", "5",
            "--out", dict.to_str().unwrap(), "--history", hist.to_str().unwrap(),
        ];
        args.extend_from_slice(TINY_DICT);
        assert!(run(&args).status.success());
        outputs.push((fs::read(&dict).unwrap(), fs::read_to_string(&hist).unwrap()));
    }
    assert_eq!(outputs[0], outputs[1]);
    let hist = &outputs[0].1;
    assert!(hist.starts_with("epoch,batch,energy,sparsity,psnr\n"));
    assert_eq!(hist.lines().count(), 1 + 2);
}

#[test]
fn train_ae_is_deterministic() {
    let tmp = tempfile::tempdir().unwrap();
    dataset(tmp.path(), 2);
    let data = tmp.path().to_str().unwrap();
    let mut models = Vec::new();
    for name in ["a", "b"] {
        let model = tmp.path().join(format!("{name}.sca"));
        let hist = tmp.path().join(format!("{name}.csv"));
        let args = [
            "train-ae", "--data-dir", data, "--limit", "6", "--batch-size", "3", "--epochs", "2", "--seed", "9",
            "--out", model.to_str().unwrap(), "--history", hist.to_str().unwrap(),
        ];
        assert!(run(&args).status.success());
        assert_eq!(fs::read_to_string(&hist).unwrap().lines().count(), 1 + 4);
        models.push(fs::read(&model).unwrap());
    }
    assert_eq!(models[0], models[1]);
    assert_eq!(&models[0][..4], b"SCAE");
}

#[test]
fn compress_decompress_keeps_stored_bytes() {
    let tmp = tempfile::tempdir().unwrap();
    dataset(tmp.path(), 2);
    let data = tmp.path().to_str().unwrap();
    let dict = tmp.path().join("d.scd");
    let mut args = vec!["train-dict", "--data-dir", data, "--limit", "4", "--out", dict.to_str().unwrap()];
    args.extend_from_slice(TINY_DICT);
    assert!(run(&args).status.success());

    for mask in ["checkerboard", "random"] {
        let sci = tmp.path().join(format!("sci-{mask}"));
        let rec = tmp.path().join(format!("rec-{mask}"));
        let out = run(&[
            "compress", "--data-dir", data, "--split", "test", "--mask", mask, "--seed", "3", "--out-dir",
            sci.to_str().unwrap(),
        ]);
        assert!(out.status.success());
        if mask == "checkerboard" {
            assert!(String::from_utf8_lossy(&out.stderr).contains("payload ratio 0.5000"));
        }
        let out = run(&[
            "decompress", "--input-dir", sci.to_str().unwrap(), "--dict", dict.to_str().unwrap(), "--iterations",
            "40", "--out-dir", rec.to_str().unwrap(),
        ]);
        assert!(out.status.success());

        let (entries, recons) = read_interchange(&rec).unwrap();
        assert_eq!(recons.len(), 2);
        assert_eq!(entries[0].method, mask);
        for (i, r) in recons.iter().enumerate() {
            let c = CompressedImage::from_bytes(&fs::read(sci.join(format!("{i:05}.sci"))).unwrap()).unwrap();
            let (known, m) = c.known_image().unwrap();
            let stored = known.to_bytes().bytes;
            let got = r.to_bytes().bytes;
            for p in m.kept_positions() {
                assert_eq!(got[p * 3..p * 3 + 3], stored[p * 3..p * 3 + 3]);
            }
        }
    }
}

#[test]
fn sweep_writes_one_row_per_lambda() {
    let tmp = tempfile::tempdir().unwrap();
    dataset(tmp.path(), 2);
    let data = tmp.path().to_str().unwrap();
    let csv = tmp.path().join("sweep.csv");
    let out = run(&[
        "sweep-lambda", "--data-dir", data, "--limit", "4", "--holdout", "2", "--atoms", "8", "--patch", "4",
        "--batch-size", "4", "--iterations", "40", "--lambdas", "0.4,0.01,0.02,0.05,0.1,0.2,0.03,0.3,0.5", "--out",
        csv.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let text = fs::read_to_string(&csv).unwrap();
    let rows: Vec<&str> = text.lines().collect();
    assert_eq!(rows[0], "lambda,mean_sparsity,mean_psnr");
    assert_eq!(rows.len(), 10);
    assert!(rows[1].starts_with("0.01,"));
}

#[test]
fn evaluate_identical_sets_reports_unit_ssim() {
    let tmp = tempfile::tempdir().unwrap();
    dataset(tmp.path(), 3);
    let data = tmp.path().to_str().unwrap();
    let orig = tmp.path().join("orig");
    assert!(run(&[
        "export-recons", "--data-dir", data, "--split", "test", "--method", "original", "--out-dir",
        orig.to_str().unwrap()
    ])
    .status
    .success());
    let (entries, _) = read_interchange(&orig).unwrap();
    assert_eq!(entries.len(), 3);
    assert_eq!(entries[1].label, Some(1));

    let csv = tmp.path().join("report.csv");
    let out = run(&[
        "evaluate", "--data-dir", data, "--split", "test", "--recon", orig.to_str().unwrap(), "--csv",
        csv.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().nth(1).unwrap(), "original,100.000,1.000,3");
    assert!(String::from_utf8_lossy(&out.stdout).contains("original"));
}

#[test]
fn config_file_supplies_flags() {
    let tmp = tempfile::tempdir().unwrap();
    dataset(tmp.path(), 2);
    let cfg = tmp.path().join("run.cfg");
    let sci = tmp.path().join("sci");
    fs::write(
        &cfg,
        format!(
            "data_dir = {}\nsplit = test\nmask = random\nseed = 11\nout-dir = {}\n",
            tmp.path().display(),
            sci.display()
        ),
    )
    .unwrap();
    assert!(run(&["--config", cfg.to_str().unwrap(), "compress"]).status.success());
    let c = CompressedImage::from_bytes(&fs::read(sci.join("00000.sci")).unwrap()).unwrap();
    assert!(matches!(c.mask, sparsecomp::MaskKind::Random { keep_count: 512, .. }));

    fs::write(&cfg, "mask = diagonal\n").unwrap();
    let out = run(&["--config", cfg.to_str().unwrap(), "compress", "--out-dir", "x"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn ae_roundtrip_and_export_agree_on_shape() {
    let tmp = tempfile::tempdir().unwrap();
    dataset(tmp.path(), 2);
    let data = tmp.path().to_str().unwrap();
    let model = tmp.path().join("m.sca");
    assert!(run(&[
        "train-ae", "--data-dir", data, "--limit", "4", "--epochs", "1", "--code-channels", "12", "--out",
        model.to_str().unwrap()
    ])
    .status
    .success());
    let rt = tmp.path().join("rt");
    let out = run(&[
        "ae-roundtrip", "--data-dir", data, "--split", "test", "--model", model.to_str().unwrap(), "--out-dir",
        rt.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let (entries, recons) = read_interchange(&rt).unwrap();
    assert_eq!(entries[0].method, "bottleneck");
    assert_eq!(recons[0].dims(), (32, 32, 3));
    assert!(recons.iter().all(|r| r.data.iter().all(|&v| v >= 0.0)));

    let out = run(&[
        "export-recons", "--data-dir", data, "--split", "test", "--method", "bottleneck", "--out-dir",
        tmp.path().join("ex").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
}
