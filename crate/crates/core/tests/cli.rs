use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use flowcast::train::load_checkpoint;

const TINY: &[&str] = &[
    "--model.look_back=16",
    "--model.d_model=8",
    "--model.n_heads=2",
    "--model.n_enc_layers=1",
    "--model.n_dec_layers=1",
    "--model.n_denoise_layers=1",
    "--model.ff_mult=2",
    "--data.stride=8",
    "--data.eval_stride=12",
    "--data.n_bins=4",
    "--train.epochs=1",
];

fn flowcast(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flowcast"))
        .arg("--out-dir")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "exit {:?}\nstderr: {}",
        o.status.code(),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn synth(dir: &Path, name: &str, n: usize, seed: u64) -> PathBuf {
    let path = dir.join(name);
    let n = n.to_string();
    let seed = seed.to_string();
    ok(&flowcast(
        dir,
        &["synth", "--kind", "sine", "--n", &n, "--seed", &seed, "--out", path.to_str().unwrap()],
    ));
    path
}

fn train(dir: &Path, data: &[&Path], extra: &[&str]) -> Output {
    let mut args = vec!["train"];
    for d in data {
        args.push("--data");
        args.push(d.to_str().unwrap());
    }
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    flowcast(dir, &args)
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn manifest(dir: &Path, command: &str) -> serde_json::Value {
    serde_json::from_str(&read(&dir.join(format!("{command}_manifest.json")))).unwrap()
}

#[test]
fn synth_writes_single_column_csv() {
    let dir = tempfile::tempdir().unwrap();
    let path = synth(dir.path(), "s.csv", 2000, 1);
    let text = read(&path);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2001);
    assert!(lines[1..].iter().all(|l| !l.contains(',') && l.parse::<f64>().is_ok()));
    let m = manifest(dir.path(), "synth");
    assert_eq!(m["settings"]["n"], 2000);
    assert_eq!(m["settings"]["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn usage_and_config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.csv");
    let o = flowcast(dir.path(), &["train", "--data", missing.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nope.csv"));

    let data = synth(dir.path(), "s.csv", 300, 0);
    let o = flowcast(dir.path(), &["train", "--data", data.to_str().unwrap(), "--train.learning_rate=1"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("did you mean"));

    let cfg = dir.path().join("bad.ini");
    std::fs::write(&cfg, "[train]\nepochs = 0\n").unwrap();
    let o = flowcast(dir.path(), &["--config", cfg.to_str().unwrap(), "train", "--data", data.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    let o = flowcast(dir.path(), &["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));

    let spec = dir.path().join("sweep.ini");
    std::fs::write(&spec, "[sweep]\naxis = colour\n").unwrap();
    let o = flowcast(dir.path(), &["sweep", spec.to_str().unwrap(), "--data", data.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn malformed_data_exits_3_and_divergence_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "a,b\n1,2\n3\n").unwrap();
    let o = flowcast(dir.path(), &["train", "--data", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3));

    let data = synth(dir.path(), "s.csv", 300, 0);
    let o = train(dir.path(), &[&data], &["--model.horizon=12", "--train.lr=1e300"]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn train_forecast_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "s.csv", 700, 2);
    ok(&train(dir.path(), &[&data], &["--model.horizon=48", "--train.lr=5e-4"]));
    for f in ["best.ckpt", "last.ckpt", "history.csv", "train_manifest.json"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let m = manifest(dir.path(), "train");
    assert_eq!(m["config"]["train.lr"], "0.0005");
    assert_eq!(m["settings"]["lr"], 0.0005);
    assert_eq!(m["inputs"][0]["sha256"].as_str().unwrap().len(), 64);
    let ckpt = dir.path().join("best.ckpt");
    let ck = load_checkpoint(&ckpt).unwrap();
    assert!(ck.meta.contains_key("bins.0"));
    assert!(load_checkpoint(&dir.path().join("last.ckpt")).unwrap().optimizer.is_some());

    let c = ckpt.to_str().unwrap();
    let d = data.to_str().unwrap();
    ok(&flowcast(dir.path(), &["forecast", "--checkpoint", c, "--input", d, "--horizon", "20", "--samples", "30"]));
    let fc = read(&dir.path().join("forecast.csv"));
    let lines: Vec<&str> = fc.lines().collect();
    assert_eq!(lines[0], "step,mean,q10,q25,q75,q90");
    assert_eq!(lines.len(), 21);
    for l in &lines[1..] {
        let v: Vec<f64> = l.split(',').skip(1).map(|x| x.parse().unwrap()).collect();
        assert!(v[1] <= v[2] && v[2] <= v[3] && v[3] <= v[4], "{l}");
    }

    ok(&flowcast(dir.path(), &["forecast", "--checkpoint", c, "--input", d, "--samples", "1", "--nfe", "2"]));
    let fc = read(&dir.path().join("forecast.csv"));
    assert_eq!(fc.lines().count(), 49);
    for l in fc.lines().skip(1) {
        let v: Vec<&str> = l.split(',').collect();
        assert!(v[2..].iter().all(|q| *q == v[1]), "{l}");
    }
    assert_eq!(manifest(dir.path(), "forecast")["settings"]["nfe"], 2);

    let o = flowcast(dir.path(), &["forecast", "--checkpoint", c, "--input", d, "--horizon", "50"]);
    assert_eq!(o.status.code(), Some(2));

    ok(&flowcast(dir.path(), &["eval", "--checkpoint", c, "--data", d, "--samples", "20"]));
    let first = read(&dir.path().join("eval.csv"));
    let rows: Vec<&str> = first.lines().collect();
    assert_eq!(rows[0], "dataset,horizon,seed,mse,mae,coverage50,coverage80,nfe");
    let horizons: Vec<&str> = rows[1..].iter().map(|r| r.split(',').nth(1).unwrap()).collect();
    assert_eq!(horizons, ["12", "24", "36", "48"]);
    ok(&flowcast(dir.path(), &["eval", "--checkpoint", c, "--data", d, "--samples", "20", "--threads", "3"]));
    assert_eq!(read(&dir.path().join("eval.csv")), first);

    ok(&flowcast(dir.path(), &["eval", "--checkpoint", c, "--data", d, "--horizons", "12"]));
    assert_eq!(read(&dir.path().join("eval.csv")).lines().count(), 2);
}

#[test]
fn equal_seeds_give_identical_history_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "s.csv", 300, 3);
    let run = |sub: &str| {
        let out = dir.path().join(sub);
        std::fs::create_dir_all(&out).unwrap();
        ok(&train(&out, &[&data], &["--model.horizon=12", "--seed", "5"]));
        let c = out.join("best.ckpt");
        ok(&flowcast(
            &out,
            &["eval", "--checkpoint", c.to_str().unwrap(), "--data", data.to_str().unwrap(), "--horizons", "12", "--threads", "1"],
        ));
        (
            read(&out.join("history.csv")),
            read(&out.join("eval.csv")),
            std::fs::read(&c).unwrap(),
        )
    };
    assert_eq!(run("a"), run("b"));
}

#[test]
fn two_datasets_are_pooled() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), "a.csv", 300, 0);
    let b = synth(dir.path(), "b.csv", 300, 1);
    ok(&train(dir.path(), &[&a, &b], &["--model.horizon=12"]));
    let m = manifest(dir.path(), "train");
    assert_eq!(m["inputs"].as_array().unwrap().len(), 2);
    let ck = load_checkpoint(&dir.path().join("best.ckpt")).unwrap();
    assert!(ck.meta.contains_key("bins.0") && ck.meta.contains_key("bins.1"));
    assert_ne!(ck.meta["bins.0"], ck.meta["bins.1"]);
}

#[test]
fn sweep_reports_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data = synth(dir.path(), "s.csv", 300, 4);
    let spec = dir.path().join("nfe.ini");
    std::fs::write(&spec, "[sweep]\naxis = nfe\nseeds = 0, 1\n[eval]\nhorizons = 4, 8\nsamples = 2\n").unwrap();
    let run = || {
        let mut args = vec!["sweep", spec.to_str().unwrap(), "--data", data.to_str().unwrap()];
        args.extend_from_slice(TINY);
        ok(&flowcast(dir.path(), &args));
        read(&dir.path().join("sweep.csv"))
    };
    let first = run();
    assert_eq!(first.lines().count(), 1 + 3 * 2 * 2);
    assert!(first.starts_with("axis,cell,dataset,horizon,seed,mse,mae,coverage50,coverage80,nfe,wallclock_ms\n"));
    assert_eq!(run(), first);
}
