use std::process::Command;

fn logtgn() -> Command {
    Command::new(env!("CARGO_BIN_EXE_logtgn"))
}

#[test]
fn pipeline_on_a_tiny_corpus() {
    let tmp = tempfile::tempdir().unwrap();
    let out = logtgn()
        .args(["--seed", "3", "--hops", "0,1,2", "--out-dir"])
        .arg(tmp.path())
        .arg("pipeline")
        .env("LOGTGN_SYNTH_N_EVENTS", "2000")
        .env("LOGTGN_SYNTH_N_TEMPLATES", "8")
        .env("LOGTGN_SYNTH_BURST_TEMPLATES", "4")
        .env("LOGTGN_TRAIN_EPOCHS", "1")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("f1"), "{stdout}");
    assert!(tmp.path().join("verdicts.csv").exists());

    let header = std::fs::read_to_string(tmp.path().join("verdicts.csv")).unwrap();
    assert!(header.starts_with("seq_index,timestamp,template_id,p_h0,p_h1,p_h2,"));

    let eval = logtgn().arg("--out-dir").arg(tmp.path()).arg("eval").output().unwrap();
    assert!(eval.status.success());
    assert!(stdout.contains(String::from_utf8_lossy(&eval.stdout).trim()));
}

#[test]
fn bad_input_fails_with_message() {
    let tmp = tempfile::tempdir().unwrap();
    let out = logtgn()
        .arg("--out-dir")
        .arg(tmp.path())
        .args(["parse", "/nonexistent/input.log"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("/nonexistent/input.log"));

    let bad = logtgn().args(["--threshold", "1.5", "eval"]).output().unwrap();
    assert!(!bad.status.success());
}
