use std::path::Path;
use std::process::{Command, Output};

fn sista(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sista"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = sista(args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn single_shot_workflow_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let t = |name: &str| tmp.path().join(name);

    ok(&["shapes", "--per-class", "10", "--seed", "3", "--out", p(&t("src"))]);
    let shifted = ok(&["shift", "--in", p(&t("src")), "--domain", "C", "--out", p(&t("tgt"))]);
    assert!(shifted.starts_with("30 images shifted"), "{shifted}");
    ok(&[
        "train-source",
        "--data",
        p(&t("src")),
        "--epochs",
        "2",
        "--out",
        p(&t("cls.ckpt")),
    ]);

    let shot = t("tgt").join("images/00000.png");
    ok(&[
        "invert",
        "--image",
        p(&shot),
        "--steps",
        "5",
        "--out",
        p(&t("inv.json")),
    ]);
    let ft = ok(&[
        "finetune",
        "--image",
        p(&shot),
        "--inv",
        p(&t("inv.json")),
        "--iters",
        "3",
        "--out",
        p(&t("gen.ckpt")),
    ]);
    assert!(ft.contains("over 3 iterations"), "{ft}");
    let sampled = ok(&[
        "sample",
        "--ckpt",
        p(&t("gen.ckpt")),
        "--count",
        "16",
        "--out",
        p(&t("syn")),
    ]);
    assert!(sampled.starts_with("16 images"), "{sampled}");

    let adapted = ok(&[
        "adapt",
        "--model",
        p(&t("cls.ckpt")),
        "--data",
        p(&t("syn")),
        "--eval",
        p(&t("tgt")),
        "--epochs",
        "1",
        "--head-only",
        "--out",
        p(&t("adapted.ckpt")),
    ]);
    assert!(
        adapted.contains("accuracy before") && adapted.contains("accuracy after"),
        "{adapted}"
    );
    assert!(t("adapted.ckpt").exists());
}

#[test]
fn domain_d_without_a_corruption_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let src = tmp.path().join("src");
    ok(&["shapes", "--per-class", "1", "--out", p(&src)]);
    let out = sista(&[
        "shift",
        "--in",
        p(&src),
        "--domain",
        "D",
        "--out",
        p(&tmp.path().join("d")),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("frost"));
}

#[test]
fn missing_checkpoint_fails_cleanly() {
    let tmp = tempfile::tempdir().unwrap();
    let out = sista(&[
        "sample",
        "--ckpt",
        p(&tmp.path().join("none.ckpt")),
        "--out",
        p(&tmp.path().join("s")),
    ]);
    assert!(!out.status.success());
    assert!(!String::from_utf8_lossy(&out.stderr).contains("panicked"));
}
