use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_gestcall");

fn gestcall(args: &[&str], cwd: &Path) -> Output {
    Command::new(BIN).args(args).current_dir(cwd).env("GC_LOG_LEVEL", "error").output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn synth_train_eval_classify_detect() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = gestcall(&["synth", "--out", "corpus", "--per-class", "20", "--seed", "3"], d);
    assert!(o.status.success());
    assert!(d.join("corpus/truth.txt").exists());
    assert!(d.join("corpus/3_0007.ppm").exists());

    let o = gestcall(&["train", "--data", "corpus", "--model", "m.txt"], d);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("epochs "));
    assert!(d.join("m.txt.exemplars").exists());

    let o = gestcall(&["eval", "--data", "corpus", "--model", "m.txt"], d);
    let acc: f64 = stdout(&o).trim().strip_prefix("accuracy ").unwrap().parse().unwrap();
    assert!(acc >= 0.9, "{acc}");
    let o = gestcall(&["eval", "--data", "corpus", "--model", "m.txt", "--baseline"], d);
    assert!(stdout(&o).starts_with("accuracy "));

    let o = gestcall(&["classify", "--model", "m.txt", "--image", "corpus/3_0001.ppm"], d);
    assert!(stdout(&o).starts_with("3 nurse "), "{}", stdout(&o));

    let o = gestcall(&["detect", "--image", "corpus/2_0000.ppm", "--overlay", "ov.ppm"], d);
    let text = stdout(&o);
    assert_eq!(text.lines().next(), Some("tips 2"));
    assert_eq!(text.lines().count(), 3);
    assert!(std::fs::read(d.join("ov.ppm")).unwrap().starts_with(b"P6"));
}

#[test]
fn usage_and_runtime_errors_have_distinct_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(gestcall(&["frobnicate"], dir.path()).status.code(), Some(2));
    assert_eq!(
        gestcall(&["run", "--model", "m", "--frames", "f", "--dest", "x:1", "--patient", "a b"], dir.path())
            .status
            .code(),
        Some(2)
    );
    let o = gestcall(&["eval", "--data", "missing", "--model", "m.txt"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).starts_with("error: "));
}
