use std::path::Path;
use std::process::{Command, Output};

fn ctvseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ctvseg")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn tiny_config(dir: &Path, extra: &str) -> String {
    let path = dir.join("exp.cfg");
    let text = format!(
        "# tiny run\ngrid = 24x24x12\npatch = 24x24x12\nspacing = 2,2,4\nchannels = 4,8\nalign_heads = 2\nalign_blocks = 1\n\
         lm_dim = 16\nlm_layers = 1\nlm_heads = 2\nlm_steps = 5\nlm_sentences = 50\ntrain_cases = 2\ntest_cases = 2\nepochs = 1\n{extra}"
    );
    std::fs::write(&path, text).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn usage_and_config_errors_exit_with_two() {
    assert_eq!(code(&ctvseg(&["frobnicate"])), 2);
    assert_eq!(code(&ctvseg(&["gen", "--out", "x"])), 2);
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path(), "learning_rate = 1\n");
    let o = ctvseg(&["train", "--config", &cfg, "--out", dir.path().join("m.ckpt").to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("learning_rate"));
    let cfg = tiny_config(dir.path(), "");
    assert_eq!(code(&ctvseg(&["ablate", "--kind", "dropout", "--config", &cfg, "--out", "x"])), 2);
}

#[test]
fn data_errors_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("m.txt");
    std::fs::write(&manifest, "r.rec v.vol m.mask\n").unwrap();
    let cfg = tiny_config(dir.path(), &format!("variant = vision-only\ntrain_manifest = {}\n", manifest.display()));
    let o = ctvseg(&["train", "--config", &cfg, "--out", dir.path().join("m.ckpt").to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    std::fs::write(dir.path().join("bad.ckpt"), b"CKP1\x04").unwrap();
    let o = ctvseg(&["eval", "--ckpt", dir.path().join("bad.ckpt").to_str().unwrap(), "--manifest", manifest.to_str().unwrap(), "--report", "r"]);
    assert_eq!(code(&o), 3);
}

#[test]
fn generate_train_evaluate_and_infer() {
    let dir = tempfile::tempdir().unwrap();
    let d = |n: &str| dir.path().join(n).to_str().unwrap().to_string();
    let o = ctvseg(&["gen", "--n", "2", "--out", &d("data"), "--seed", "3", "--grid", "24x24x12", "--spacing", "2,2,4"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = d("data/manifest.txt");
    assert!(Path::new(&manifest).exists());

    let cfg = tiny_config(dir.path(), &format!("train_manifest = {manifest}\n"));
    let o = ctvseg(&["train", "--config", &cfg, "--out", &d("m.ckpt")]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(std::fs::read_to_string(d("m.ckpt.loss")).unwrap().starts_with("1 "));
    assert_eq!(std::fs::read_to_string(d("m.ckpt.vocab")).unwrap().lines().nth(2), Some("[SEG]"));

    let reuse = tiny_config(dir.path(), &format!("train_manifest = {manifest}\nlm_checkpoint = {}\n", d("m.ckpt.lm")));
    let o = ctvseg(&["train", "--config", &reuse, "--out", &d("m2.ckpt")]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!Path::new(&d("m2.ckpt.lm")).exists());

    let o = ctvseg(&["eval", "--ckpt", &d("m.ckpt"), "--manifest", &manifest, "--report", &d("report.txt")]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(std::fs::read_to_string(d("report.txt")).unwrap().contains("dice"));

    let entries = std::fs::read_to_string(&manifest).unwrap();
    let first: Vec<&str> = entries.lines().next().unwrap().split_whitespace().collect();
    let abs = |p: &str| if Path::new(p).is_absolute() { p.to_string() } else { d(&format!("data/{p}")) };
    let o = ctvseg(&["infer", "--ckpt", &d("m.ckpt"), "--volume", &abs(first[1]), "--record", &abs(first[0]), "--out", &d("pred.ctv")]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let pred = ctvseg::phantom::read_volume(Path::new(&d("pred.ctv"))).unwrap().into_mask().unwrap();
    assert_eq!(pred.dims(), [24, 24, 12]);
}

#[test]
fn gradcheck_passes() {
    let o = ctvseg(&["gradcheck"]);
    let out = String::from_utf8_lossy(&o.stdout);
    assert_eq!(code(&o), 0, "{out}");
    assert!(out.contains("TotalLoss"));
    assert!(out.lines().count() >= 25);
}
