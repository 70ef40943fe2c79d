use std::ffi::{OsStr, OsString};
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use autoscale_core::analytics::ClusterModel;
use autoscale_core::cluster_ga::synthetic_ratio;
use autoscale_core::engine::read_log_file;

const BIN: &str = env!("CARGO_BIN_EXE_autoscale");

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn autoscale<S: AsRef<OsStr>>(args: &[S]) -> Output {
    Command::new(BIN).args(args).env("AUTOSCALE_LOG", "error").output().expect("binary runs")
}

fn demo_args(out: &str, rest: &[&str]) -> Vec<OsString> {
    let mut v: Vec<OsString> = vec!["--config".into(), configs().join("demo.toml").into(), "--out".into(), out.into()];
    v.extend(rest.iter().map(OsString::from));
    v
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// One completed demo run shared by read-only tests.
fn demo() -> &'static Path {
    static DIR: OnceLock<tempfile::TempDir> = OnceLock::new();
    DIR.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        let o = autoscale(&demo_args(out, &["run"]));
        assert!(o.status.success(), "demo run failed: {}", stderr(&o));
        dir
    })
    .path()
}

fn copy_dir(from: &Path, to: &Path) {
    fs::create_dir_all(to).unwrap();
    for e in fs::read_dir(from).unwrap() {
        let e = e.unwrap();
        if e.file_type().unwrap().is_file() {
            fs::copy(e.path(), to.join(e.file_name())).unwrap();
        }
    }
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records().map(|x| x.unwrap().iter().map(str::to_string).collect()).collect()
}

#[test]
fn demo_run_writes_all_rounds_and_a_summary() {
    let dir = demo();
    let log = read_log_file(&dir.join("rounds.jsonl")).unwrap();
    assert_eq!(log.len(), 4);
    assert!(log.iter().skip(1).all(|r| r.selected.len() == 120));
    let summary = csv_rows(&dir.join("summary.csv"));
    assert_eq!(summary.len(), 4);
    assert_eq!(summary[3][0], "3");
    for f in ["real.jsonl", "syn.jsonl", "cal.jsonl", "embeddings.csv", "graph_rae.bin", "cluster_model.json", "assignments.csv"] {
        assert!(dir.join(f).is_file(), "{f} missing");
    }
}

#[test]
fn identical_config_and_seed_reproduce_every_output() {
    let other = tempfile::tempdir().unwrap();
    let o = autoscale(&demo_args(other.path().to_str().unwrap(), &["run"]));
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["rounds.jsonl", "summary.csv", "embeddings.csv", "graph_rae.bin", "assignments.csv", "cluster_model.json"] {
        assert_eq!(fs::read(demo().join(f)).unwrap(), fs::read(other.path().join(f)).unwrap(), "{f} differs");
    }
}

#[test]
fn resume_finishes_a_truncated_log_identically() {
    let dir = tempfile::tempdir().unwrap();
    copy_dir(demo(), dir.path());
    let full = fs::read_to_string(demo().join("rounds.jsonl")).unwrap();
    let head: String = full.lines().take(2).map(|l| format!("{l}\n")).collect();
    fs::write(dir.path().join("rounds.jsonl"), head).unwrap();
    let o = autoscale(&demo_args(dir.path().to_str().unwrap(), &["run", "--resume"]));
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(dir.path().join("rounds.jsonl")).unwrap(), full);
}

#[test]
fn optimize_needs_two_rounds() {
    let dir = tempfile::tempdir().unwrap();
    copy_dir(demo(), dir.path());
    let full = fs::read_to_string(dir.path().join("rounds.jsonl")).unwrap();
    fs::write(dir.path().join("rounds.jsonl"), format!("{}\n", full.lines().next().unwrap())).unwrap();
    let o = autoscale(&demo_args(dir.path().to_str().unwrap(), &["optimize"]));
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("insufficient history"), "{}", stderr(&o));
}

#[test]
fn optimize_and_select_plan_the_next_round() {
    let dir = tempfile::tempdir().unwrap();
    copy_dir(demo(), dir.path());
    let out = dir.path().to_str().unwrap();
    let o = autoscale(&demo_args(out, &["--rounds", "4", "optimize"]));
    assert!(o.status.success(), "{}", stderr(&o));
    let step: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("optimize.json")).unwrap()).unwrap();
    assert_eq!(step["round"], 4);
    let w: f64 = step["target_mixture"].as_array().unwrap().iter().map(|x| x.as_f64().unwrap()).sum();
    assert!((w - 1.0).abs() < 1e-9);
    let o = autoscale(&demo_args(out, &["optimize"]));
    assert_eq!(o.status.code(), Some(1), "complete log cannot be extended without raising rounds");
    for m in ["autoscale", "uniform", "iwr", "chameleon"] {
        let o = autoscale(&demo_args(out, &["--rounds", "4", "select", m]));
        assert!(o.status.success(), "{m}: {}", stderr(&o));
        let rows = csv_rows(&dir.path().join(format!("selection_{m}.csv")));
        assert_eq!(rows.len(), 120, "{m}");
        assert!(rows.iter().all(|r| r[0] == m));
    }
}

#[test]
fn report_tabulates_the_log_without_touching_it() {
    let dir = tempfile::tempdir().unwrap();
    copy_dir(demo(), dir.path());
    let log_before = fs::read(dir.path().join("rounds.jsonl")).unwrap();
    let o = autoscale(&demo_args(dir.path().to_str().unwrap(), &["report"]));
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read(dir.path().join("rounds.jsonl")).unwrap(), log_before);
    let rep = dir.path().join("report");
    let log = read_log_file(&dir.path().join("rounds.jsonl")).unwrap();
    assert_eq!(csv_rows(&rep.join("rounds.csv")).len(), log.len());
    let clusters = csv_rows(&rep.join("clusters.csv"));
    assert_eq!(clusters.len(), log.len() * 8);
    let model: ClusterModel<f64> = ClusterModel::from_json(&fs::read_to_string(dir.path().join("cluster_model.json")).unwrap()).unwrap();
    let n_total = model.n0.iter().sum::<usize>() + 120;
    for rec in &log {
        let r = synthetic_ratio(&rec.mixture, &model.n0, n_total);
        for (k, &rk) in r.iter().enumerate() {
            let row = &clusters[rec.round * 8 + k];
            let shown: f64 = row[4].parse().unwrap();
            assert!((shown - rk).abs() <= 1e-8 * rk.abs().max(1.0), "round {} cluster {k}", rec.round);
        }
    }
    let selected: usize = log.iter().map(|r| r.selected.len()).sum();
    assert_eq!(csv_rows(&rep.join("selection.csv")).len(), selected);
    let pca = csv_rows(&rep.join("pca.csv"));
    assert_eq!(pca.len(), 240 + 960 + 160);
    assert!(pca.iter().all(|r| r.len() == 4 && !r[1].is_empty()));
}

#[test]
fn report_on_a_single_round_log_has_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let full = fs::read_to_string(demo().join("rounds.jsonl")).unwrap();
    fs::write(dir.path().join("rounds.jsonl"), format!("{}\n", full.lines().next().unwrap())).unwrap();
    let o = autoscale(&["--out", dir.path().to_str().unwrap(), "report"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(csv_rows(&dir.path().join("report/rounds.csv")).len(), 1);
    assert_eq!(csv_rows(&dir.path().join("report/clusters.csv")).len(), 8);
}

#[test]
fn corrupt_log_is_a_validation_error_naming_the_line() {
    let dir = tempfile::tempdir().unwrap();
    let full = fs::read_to_string(demo().join("rounds.jsonl")).unwrap();
    let cut = &full[..full.len() - 40];
    fs::write(dir.path().join("rounds.jsonl"), cut).unwrap();
    let o = autoscale(&["--out", dir.path().to_str().unwrap(), "report"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 4"), "{}", stderr(&o));
}

#[test]
fn score_writes_per_scene_and_summary_tables() {
    let dir = tempfile::tempdir().unwrap();
    let data = demo().join("cal.jsonl");
    let o = autoscale(&["--out", dir.path().to_str().unwrap(), "score", "--data", data.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = csv_rows(&dir.path().join("scores.csv"));
    assert_eq!(rows.len(), 160);
    for r in &rows {
        let (p, e): (f64, f64) = (r[1].parse().unwrap(), r[2].parse().unwrap());
        assert!((0.0..=1.0).contains(&p) && (0.0..=1.0).contains(&e));
    }
    let summary = csv_rows(&dir.path().join("scores_summary.csv"));
    assert_eq!(summary[0][..2], ["160".to_string(), "160".to_string()]);
}

#[test]
fn gen_world_embed_cluster_chain() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    for step in ["gen-world", "embed", "cluster"] {
        let o = autoscale(&demo_args(out, &[step]));
        assert!(o.status.success(), "{step}: {}", stderr(&o));
    }
    for f in ["real.jsonl", "embeddings.csv", "assignments.csv", "cluster_model.json"] {
        assert_eq!(fs::read(dir.path().join(f)).unwrap(), fs::read(demo().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn bad_inputs_exit_with_status_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "budget = 10\nbudgte = 3\n").unwrap();
    let o = autoscale(&["--config", cfg.to_str().unwrap(), "report"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("budgte"), "{}", stderr(&o));
    let o = autoscale(&["--config", dir.path().join("missing.toml").to_str().unwrap(), "report"]);
    assert_eq!(o.status.code(), Some(1));
    let o = autoscale(&["--method", "greedy", "report"]);
    assert_eq!(o.status.code(), Some(1));
    let o = autoscale(&["--out", dir.path().to_str().unwrap(), "embed"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("real.jsonl"), "{}", stderr(&o));
    let o = autoscale(&["--out", dir.path().to_str().unwrap(), "select", "autoscale"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn foreign_datasets_are_rejected_by_run() {
    let dir = tempfile::tempdir().unwrap();
    copy_dir(demo(), dir.path());
    let other_world = dir.path().join("w.toml");
    let spec = fs::read_to_string(configs().join("demo_world.toml")).unwrap().replace("seed = 7", "seed = 8");
    fs::write(&other_world, spec).unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "budget = 120\nrounds = 3\npca_dim = 16\nworld = \"w.toml\"\n[paths]\nout = \".\"\n").unwrap();
    let o = autoscale(&["--config", cfg.to_str().unwrap(), "run"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("not generated by the configured world"), "{}", stderr(&o));
}
