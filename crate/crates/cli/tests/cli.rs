use std::path::Path;
use std::process::{Command, Output};

fn c5(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_c5")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(code(&c5(&["--help"])), 0);
    assert_eq!(code(&c5(&[])), 1);
    assert_eq!(code(&c5(&["frobnicate"])), 1);
    assert_eq!(code(&c5(&["eval", "--manifest", "m.jsonl", "--policy", "bright"])), 1);
}

#[test]
fn missing_files_are_data_errors() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.jsonl");
    let o = c5(&["eval", "--manifest", p(&missing)]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    let o = c5(&["infer", "--weights", p(&dir.path().join("w.c5w")), p(&dir.path().join("q.pfm"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn gradcheck_passes() {
    let o = c5(&["gradcheck", "--ops-only", "--seed", "3"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).lines().count() >= 15);
    assert!(!stdout(&o).contains("FAILED"));
}

#[test]
fn synthesize_augment_train_infer_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let synth = d.join("synth");
    let o = c5(&["synth-camera", "--count", "2", "--images", "6", "--size", "32x24", "--seed", "5", "-o", p(&synth)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(stdout(&o).lines().count(), 2);
    let manifest = synth.join("manifest.jsonl");
    assert_eq!(std::fs::read_to_string(&manifest).unwrap().lines().count(), 2 + 12);

    let aug = d.join("aug");
    let o = c5(&["augment", "--source", p(&manifest), "--target", p(&manifest), "--count", "8", "-o", p(&aug)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(std::fs::read_dir(&aug).unwrap().count(), 9);

    let cfg = d.join("train.toml");
    std::fs::write(
        &cfg,
        "epochs = 2\nbatch_sizes = [4]\nbatch_switch_epochs = []\nval_fraction = 0.25\n\
         [arch]\nn = 16\nm = 3\ndepth = 2\nbase_channels = 4\nconvs_per_block = 1\n\
         [hist]\nn = 16\n",
    )
    .unwrap();
    let model = d.join("model.c5w");
    let o = c5(&["train", "--config", p(&cfg), "--manifest", p(&manifest), "--holdout", "synth-1", "--resolution", "32x24", "-o", p(&model)]);
    assert_eq!(code(&o), 0, "{}\n{}", stdout(&o), String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("epoch   2"));

    let img = |i: usize| synth.join(format!("synth-1_{i:04}.pfm"));
    let heat = d.join("heat.pfm");
    let o = c5(&["infer", "--weights", p(&model), p(&img(0)), p(&img(1)), p(&img(2)), "--heatmap", p(&heat), "--filters", p(&d.join("params"))]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rgb: Vec<f64> = stdout(&o).split_whitespace().map(|v| v.parse().unwrap()).collect();
    assert_eq!(rgb.len(), 3);
    assert!(rgb.iter().all(|&c| c > 0.0) && (rgb.iter().map(|c| c * c).sum::<f64>() - 1.0).abs() < 1e-5);
    assert!(heat.exists() && d.join("params_bias.pfm").exists() && d.join("params_filter1.pfm").exists());

    let eval = |extra: &[&str]| {
        let mut args = vec!["eval", "--manifest", p(&manifest), "--camera", "synth-1", "--repeats", "3", "--resolution", "32x24"];
        args.extend_from_slice(extra);
        let o = c5(&args);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        stdout(&o)
    };
    let gw = eval(&[]);
    assert!(gw.contains("mean"));
    assert_eq!(eval(&["--policy", "cross-camera"]), gw, "gray world ignores additional images");
    let a = eval(&["--weights", p(&model), "--seed", "9"]);
    assert_eq!(eval(&["--weights", p(&model), "--seed", "9"]), a);
}
