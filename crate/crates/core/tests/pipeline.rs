use std::fs;
use std::path::Path;
use std::process::Command;

use quadkan::analyze::export_all;
use quadkan::config::RunConfig;
use quadkan::diff::checkpoint;
use quadkan::envsim::{Env, TerrainKind};
use quadkan::eval::{compute_cov, cov, evaluate, write_report, Actor, EvalReport, LoadedPolicy};
use quadkan::perception::Variant;
use quadkan::train::{infer, read_metrics_column, run_training, METRICS_COLUMNS};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const BIN: &str = env!("CARGO_BIN_EXE_quadkan");

fn tiny(variant: Variant, updates: u64) -> RunConfig {
    let mut c = RunConfig::default();
    c.variant = variant;
    c.ppo.num_envs = 2;
    c.ppo.samples_per_update = 256;
    c.ppo.minibatch = 128;
    c.ppo.total_steps = 256 * updates;
    c.checkpoint_every = 2;
    c
}

fn read(p: &Path) -> String {
    fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn without_wall_time(csv: &str) -> Vec<String> {
    csv.lines().map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_string()).collect()
}

#[test]
fn dry_run_echoes_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(BIN).args(["train", "--dry-run", "--out"]).arg(dir.path()).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for line in [
        "horizon = 999",
        "samples_per_update = 16384",
        "minibatch = 1024",
        "epochs = 3",
        "gamma = 0.99",
        "lambda = 0.95",
        "clip = 0.2",
        "entropy_coef = 0.005",
        "lr = 0.0001",
        "total_steps = 200000",
    ] {
        assert!(text.lines().any(|l| l == line), "missing {line:?}");
    }
    let full = Command::new(BIN).args(["train", "--dry-run", "--full-scale", "--out"]).arg(dir.path()).output().unwrap();
    assert!(String::from_utf8(full.stdout).unwrap().contains("total_steps = 10000000"));
    assert!(fs::read_dir(dir.path()).unwrap().next().is_none());
}

#[test]
fn unknown_config_key_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.txt");
    fs::write(&cfg, "variant = proprio_only\nlearning_rate = 0.1\n").unwrap();
    let out = Command::new(BIN).args(["train", "--config"]).arg(&cfg).arg("--out").arg(dir.path().join("o")).output().unwrap();
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains("learning_rate") && err.contains("line 2"), "{err}");
    assert!(RunConfig::from_text("minibatch = 1000").is_err());
}

#[test]
fn cli_round_trip_train_eval_analyze_cov() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.txt");
    fs::write(&cfg, "variant = proprio_only\nnum_envs = 2\nsamples_per_update = 256\nminibatch = 128\ntotal_steps = 768\n").unwrap();
    let run = dir.path().join("run");
    let st = Command::new(BIN).args(["train", "--seed", "3", "--config"]).arg(&cfg).arg("--out").arg(&run).status().unwrap();
    assert!(st.success());
    assert_eq!(read(&run.join("metrics.csv")).lines().count(), 4);

    let ev = dir.path().join("ev");
    let out = Command::new(BIN)
        .args(["eval", "--episodes", "2", "--random-baseline", "--checkpoint"])
        .arg(run.join("checkpoint"))
        .arg("--out")
        .arg(&ev)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let table = String::from_utf8(out.stdout).unwrap();
    for col in ["Return", "Collisions", "Distance", "proprio_only", "random"] {
        assert!(table.contains(col), "{table}");
    }
    assert!(ev.join("eval_summary.csv").exists() && ev.join("eval_episodes.csv").exists());

    let an = dir.path().join("an");
    let st = Command::new(BIN).args(["analyze", "--checkpoint"]).arg(run.join("checkpoint")).arg("--out").arg(&an).status().unwrap();
    assert!(st.success());
    assert!(an.join("param_counts.csv").exists());

    let out = Command::new(BIN).arg("cov").arg(run.join("metrics.csv")).output().unwrap();
    assert!(out.status.success());
    assert!(String::from_utf8(out.stdout).unwrap().contains("metrics.csv\t"));
}

#[test]
fn metrics_csv_layout() {
    let dir = tempfile::tempdir().unwrap();
    run_training(tiny(Variant::ProprioOnly, 3), dir.path(), |_| {}).unwrap();
    let text = read(&dir.path().join("metrics.csv"));
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), METRICS_COLUMNS.join(","));
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 3);
    for (i, r) in rows.iter().enumerate() {
        let f: Vec<&str> = r.split(',').collect();
        assert_eq!(f.len(), METRICS_COLUMNS.len());
        assert_eq!(f[0], (i + 1).to_string());
        assert_eq!(f[1], (256 * (i + 1)).to_string());
    }
    let saved = RunConfig::from_file(&dir.path().join("config.txt")).unwrap();
    assert_eq!(saved, tiny(Variant::ProprioOnly, 3));
}

#[test]
fn same_seed_runs_write_identical_metrics() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        run_training(tiny(Variant::ProprioOnly, 3), d.path(), |_| {}).unwrap();
    }
    let (ta, tb) = (read(&a.path().join("metrics.csv")), read(&b.path().join("metrics.csv")));
    assert_eq!(without_wall_time(&ta), without_wall_time(&tb));
}

#[test]
fn zero_learning_rate_keeps_policy_and_metrics_constant() {
    let mut cfg = tiny(Variant::ProprioOnly, 4);
    cfg.ppo.lr = 0.0;
    cfg.net.state_dependent_std = false;
    let dir = tempfile::tempdir().unwrap();
    run_training(cfg.clone(), dir.path(), |_| {}).unwrap();
    let loaded = LoadedPolicy::load(&dir.path().join("checkpoint")).unwrap();
    let init = LoadedPolicy::init(cfg).unwrap();
    for ((_, n, a), (_, _, b)) in loaded.store.iter().zip(init.store.iter()) {
        assert_eq!(a.value, b.value, "{n}");
    }
    let m = dir.path().join("metrics.csv");
    let col = |c| read_metrics_column(&m, c).unwrap();
    let ent = col("entropy");
    assert!(ent.iter().all(|&e| e == ent[0]));
    assert!(col("approx_kl").iter().all(|k| k.abs() < 1e-12));
    assert!(col("clip_fraction").iter().all(|&c| c == 0.0));
    assert!(col("epochs_run").iter().all(|&e| e == 3.0));
}

#[test]
fn resume_continues_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let t = run_training(tiny(Variant::ProprioOnly, 2), dir.path(), |_| {}).unwrap();
    assert_eq!(t.update, 2);
    let mut rows = 0;
    let t = run_training(tiny(Variant::ProprioOnly, 4), dir.path(), |_| rows += 1).unwrap();
    assert_eq!((t.update, rows), (4, 2));
    let ups = read_metrics_column(&dir.path().join("metrics.csv"), "update").unwrap();
    assert_eq!(ups, vec![1.0, 2.0, 3.0, 4.0]);

    let mut other = tiny(Variant::ProprioOnly, 6);
    other.ppo.lr = 1e-3;
    assert!(run_training(other, dir.path(), |_| {}).is_err());
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    for v in [Variant::QuadKan, Variant::MlpFusion] {
        let mut cfg = RunConfig::default();
        cfg.variant = v;
        cfg.seed = 4;
        let src = LoadedPolicy::init(cfg.clone()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        checkpoint::save(&src.store, dir.path(), v.name()).unwrap();
        fs::write(dir.path().join("config.txt"), cfg.to_text()).unwrap();
        // Same architecture from a different seed, then overwritten.
        let mut other = cfg.clone();
        other.seed = 99;
        let mut dst = LoadedPolicy::init(other).unwrap();
        checkpoint::load_into(&mut dst.store, dir.path()).unwrap();
        let loaded = LoadedPolicy::load(dir.path()).unwrap();
        let mut env = Env::new(cfg.env_config(), 1);
        let mut obs = vec![env.reset()];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..7 {
            obs.push(env.step(&Env::random_action(&mut rng)).unwrap().obs);
        }
        let refs: Vec<_> = obs.iter().collect();
        let want = infer(&src.net, &src.store, &refs).unwrap();
        assert_eq!(infer(&dst.net, &dst.store, &refs).unwrap(), want);
        assert_eq!(infer(&loaded.net, &loaded.store, &refs).unwrap(), want);
    }
}

#[test]
fn checkpoint_variant_mismatch_is_reported() {
    let mut cfg = RunConfig::default();
    cfg.variant = Variant::ProprioOnly;
    let p = LoadedPolicy::init(cfg.clone()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    checkpoint::save(&p.store, dir.path(), "proprio_only").unwrap();
    cfg.variant = Variant::VisionOnlyKan;
    fs::write(dir.path().join("config.txt"), cfg.to_text()).unwrap();
    let err = LoadedPolicy::load(dir.path()).err().unwrap().to_string();
    assert!(err.contains("proprio_only"), "{err}");
}

#[test]
fn evaluation_is_deterministic() {
    let mut cfg = RunConfig::default();
    cfg.variant = Variant::ProprioOnly;
    let p = LoadedPolicy::init(cfg.clone()).unwrap();
    let a = evaluate(&Actor::Deterministic(&p), &cfg, TerrainKind::ThinObstacle, 2, 7).unwrap();
    let b = evaluate(&Actor::Deterministic(&p), &cfg, TerrainKind::ThinObstacle, 2, 7).unwrap();
    // n = 0 statistics are NaN, so compare renderings.
    assert_eq!(format!("{a:?}"), format!("{b:?}"));
    assert!(a.0.distance.mean.abs() < 2.0, "{:?}", a.0.distance);
    let (row, eps) = a;
    assert_eq!(row.runs, 2);
    assert!(!eps.is_empty());
    let dir = tempfile::tempdir().unwrap();
    let report = EvalReport { rows: vec![row], episodes: eps };
    write_report(&report, dir.path()).unwrap();
    let first = read(&dir.path().join("eval_summary.csv"));
    write_report(&report, dir.path()).unwrap();
    assert_eq!(read(&dir.path().join("eval_summary.csv")), first);
    assert!(first.lines().next().unwrap().contains("return_mean"), "{first}");
}

#[test]
fn analysis_exports_one_row_per_unit_and_are_reproducible() {
    let mut cfg = RunConfig::default();
    cfg.variant = Variant::QuadKan;
    let p = LoadedPolicy::init(cfg).unwrap();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let stats = export_all(&p.net, &p.store, a.path()).unwrap();
    export_all(&p.net, &p.store, b.path()).unwrap();
    assert!(!stats.is_empty());
    for (s, l) in stats.iter().zip(p.net.kan_layers()) {
        let units = read(&a.path().join("layers").join(format!("{}_units.csv", s.layer)));
        assert_eq!(units.lines().count() - 1, l.d_out);
        let curves = read(&a.path().join("layers").join(format!("{}_curves.csv", s.layer)));
        assert_eq!(curves.lines().next().unwrap().split(',').count(), 1 + l.d_out);
    }
    let summary = read(&a.path().join("layer_summary.csv"));
    assert_eq!(summary.lines().count() - 1, stats.len());
    for entry in walk(a.path()) {
        let rel = entry.strip_prefix(a.path()).unwrap();
        assert_eq!(fs::read(&entry).unwrap(), fs::read(b.path().join(rel)).unwrap(), "{}", rel.display());
    }
    let counts = read(&a.path().join("param_counts.csv"));
    assert!(counts.starts_with("component,params\n"));
    let total: usize = counts.lines().last().unwrap().split(',').nth(1).unwrap().parse().unwrap();
    assert_eq!(total, p.store.iter().map(|(_, _, e)| e.value.len()).sum::<usize>());
}

fn walk(dir: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            out.extend(walk(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

#[test]
fn coefficient_of_variation() {
    assert!((cov(&[1.0, 3.0]).unwrap() - 0.5f64.sqrt()).abs() < 1e-12);
    let r = [4.0, 7.5, 5.25, 9.0];
    let c = cov(&r).unwrap();
    let scaled: Vec<f64> = r.iter().map(|x| x * 13.0).collect();
    assert!((cov(&scaled).unwrap() - c).abs() < 1e-12);
    assert!(cov(&[1.0]).is_err());
    assert!(cov(&[1.0, -1.0]).is_err());

    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("metrics.csv");
    let mut text = METRICS_COLUMNS.join(",") + "\n";
    for ret in ["1", "nan", "3"] {
        let row: Vec<&str> = METRICS_COLUMNS.iter().map(|&c| if c == "return_mean" { ret } else { "0" }).collect();
        text += &(row.join(",") + "\n");
    }
    fs::write(&m, text).unwrap();
    assert!((compute_cov(&m).unwrap() - 0.5f64.sqrt()).abs() < 1e-12);
}
