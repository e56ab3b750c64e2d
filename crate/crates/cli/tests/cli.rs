use std::path::Path;
use std::process::{Command, Output};

use specmask::data::{write_batch_file, Dataset};
use specmask::{Real, Tensor};

fn specmask(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_specmask"))
        .args(args)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Class-dependent colour blocks plus a little texture, quantized by the
/// writer to bytes exactly like real CIFAR-10 batches.
fn synthetic_set(n: usize, offset: usize) -> Dataset {
    let mut data = Vec::with_capacity(n * 3072);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = (i + offset) % 10;
        for c in 0..3 {
            for y in 0..32 {
                for x in 0..32 {
                    let base = ((label * (c + 3) * 37) % 200) as Real / 255.0;
                    let tex = (((x * 7 + y * 13 + i * 5 + c) % 17) as Real) / 255.0;
                    data.push(base + tex);
                }
            }
        }
        labels.push(label);
    }
    Dataset::new(Tensor::from_vec(&[n, 3, 32, 32], data).unwrap(), labels).unwrap()
}

fn fixture(dir: &Path) {
    write_batch_file(&dir.join("data_batch_1.bin"), &synthetic_set(40, 0)).unwrap();
    write_batch_file(&dir.join("test_batch.bin"), &synthetic_set(20, 3)).unwrap();
}

fn train_lenet(data: &Path, out: &Path) -> Output {
    specmask(&[
        "train",
        "--arch",
        "lenet",
        "--mask",
        "on",
        "--seed",
        "7",
        "--epochs",
        "2",
        "--batch-size",
        "8",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ])
}

#[test]
fn repeated_training_runs_write_identical_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    fixture(tmp.path());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let ra = train_lenet(tmp.path(), &a);
    assert!(ra.status.success(), "{}", stderr(&ra));
    let rb = train_lenet(tmp.path(), &b);
    assert!(rb.status.success(), "{}", stderr(&rb));
    let ma = std::fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert_eq!(ma, std::fs::read_to_string(b.join("metrics.csv")).unwrap());
    assert!(ma.starts_with("epoch,loss,train_acc,test_acc,conv1_mask_pct,conv2_mask_pct\n"));
    assert_eq!(ma.lines().count(), 3);
    assert_eq!(
        std::fs::read(a.join("checkpoint.bin")).unwrap(),
        std::fs::read(b.join("checkpoint.bin")).unwrap()
    );
    assert!(stdout(&ra).contains("final train_acc"));

    let report = specmask(&[
        "report-masks",
        "--checkpoint",
        a.join("checkpoint.bin").to_str().unwrap(),
    ]);
    assert!(report.status.success(), "{}", stderr(&report));
    let text = stdout(&report);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2);
    for (line, name) in lines.iter().zip(["conv1", "conv2"]) {
        let (n, v) = line.split_once(", ").unwrap();
        assert_eq!(n, name);
        assert_eq!(v.len(), 6, "four decimals: {v}");
        let v: f64 = v.parse().unwrap();
        assert!((0.0..=1.0).contains(&v));
    }

    let ck = a.join("checkpoint.bin");
    let data = tmp.path().to_str().unwrap();
    let clean = specmask(&[
        "eval",
        "--checkpoint",
        ck.to_str().unwrap(),
        "--data",
        data,
        "--corruption",
        "contrast",
        "--severity",
        "0",
    ]);
    assert!(clean.status.success(), "{}", stderr(&clean));
    let csv = stdout(&clean);
    let mut rows = csv.lines();
    assert_eq!(rows.next(), Some("variant,clear,impulse_noise,fog,contrast"));
    let cells: Vec<&str> = rows.next().unwrap().split(',').collect();
    assert_eq!(cells[0], "a");
    assert_eq!(cells[1], cells[4], "severity 0 must equal clean accuracy");
    assert_eq!((cells[2], cells[3]), ("", ""));

    let out_csv = tmp.path().join("table.csv");
    for _ in 0..2 {
        let r = specmask(&[
            "eval",
            "--checkpoint",
            ck.to_str().unwrap(),
            "--data",
            data,
            "--severity",
            "1",
            "--out",
            out_csv.to_str().unwrap(),
        ]);
        assert!(r.status.success(), "{}", stderr(&r));
    }
    let table = std::fs::read_to_string(&out_csv).unwrap();
    assert_eq!(table.lines().count(), 3);
    assert_eq!(table.matches("variant").count(), 1);
}

#[test]
fn mask_free_report_says_so() {
    let tmp = tempfile::tempdir().unwrap();
    fixture(tmp.path());
    let out = tmp.path().join("nomask");
    let r = specmask(&[
        "train",
        "--arch",
        "lenet",
        "--mask",
        "off",
        "--epochs",
        "1",
        "--data",
        tmp.path().to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{}", stderr(&r));
    let report = specmask(&[
        "report-masks",
        "--checkpoint",
        out.join("checkpoint.bin").to_str().unwrap(),
    ]);
    assert!(report.status.success());
    assert!(stdout(&report).starts_with("no masks"));
}

#[test]
fn missing_data_flag_is_a_user_error() {
    let r = specmask(&["train", "--arch", "lenet"]);
    assert_eq!(r.status.code(), Some(1));
    assert!(stderr(&r).contains("--data"), "{}", stderr(&r));
}

#[test]
fn unknown_flags_and_subcommands_exit_one() {
    assert_eq!(specmask(&["train", "--data", "x", "--bogus"]).status.code(), Some(1));
    assert_eq!(specmask(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(specmask(&[]).status.code(), Some(1));
}

#[test]
fn help_and_version_exit_zero() {
    let h = specmask(&["--help"]);
    assert_eq!(h.status.code(), Some(0));
    assert!(stdout(&h).contains("report-masks"));
    assert_eq!(specmask(&["--version"]).status.code(), Some(0));
}

#[test]
fn invalid_values_are_user_errors() {
    let tmp = tempfile::tempdir().unwrap();
    fixture(tmp.path());
    let data = tmp.path().to_str().unwrap();
    let r = specmask(&["train", "--data", data, "--lr", "-1"]);
    assert_eq!(r.status.code(), Some(1), "{}", stderr(&r));
    let r = specmask(&["train", "--data", data, "--stages", "4"]);
    assert_eq!(r.status.code(), Some(1), "{}", stderr(&r));
}

#[test]
fn unreadable_data_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("data_batch_1.bin"), [0u8; 100]).unwrap();
    std::fs::write(tmp.path().join("test_batch.bin"), [0u8; 100]).unwrap();
    let r = specmask(&[
        "train",
        "--data",
        tmp.path().to_str().unwrap(),
        "--out",
        tmp.path().join("o").to_str().unwrap(),
    ]);
    assert_eq!(r.status.code(), Some(2), "{}", stderr(&r));
}

#[test]
fn corrupt_preview_writes_pngs_and_dumps() {
    let tmp = tempfile::tempdir().unwrap();
    fixture(tmp.path());
    let input = tmp.path().join("test_batch.bin");
    let out = tmp.path().join("preview");
    let r = specmask(&[
        "corrupt-preview",
        "--input",
        input.to_str().unwrap(),
        "--count",
        "4",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{}", stderr(&r));
    for kind in ["impulse_noise", "fog", "contrast"] {
        assert!(out.join(format!("{kind}.png")).exists());
    }

    let dump = tmp.path().join("dump");
    let r = specmask(&[
        "corrupt-preview",
        "--input",
        input.to_str().unwrap(),
        "--corruption",
        "fog",
        "--dump",
        "--out",
        dump.to_str().unwrap(),
    ]);
    assert!(r.status.success(), "{}", stderr(&r));
    assert!(dump.join("fog_s3.bin").exists());
}
