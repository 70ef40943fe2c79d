use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use autoscale_core::analytics::{write_assignments, PcaModel};
use autoscale_core::engine::{
    next_selection, optimize_step, prepare, read_log_file, run_prepared, write_record, EngineConfig, Method, Pools,
    Prepared, RoundRecord,
};
use autoscale_core::graph_rae::{embed_scenes, read_embeddings_csv, train, write_embeddings_csv, write_params};
use autoscale_core::harness::{generate_world, WorldSpec};
use autoscale_core::metrics::{epdms, pdms};
use autoscale_core::retrieval::write_selection_csv;
use autoscale_core::scalar::normalized;
use autoscale_core::scene::{Dataset, SceneGraph};

use crate::config::RunConfig;
use crate::error::{runtime, validation, CliError};
use crate::table::{fmt9, opt9, write_csv};

const EMBEDDINGS: &str = "embeddings.csv";
const LOG: &str = "rounds.jsonl";

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn require(path: &Path, what: &str, hint: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(validation(format!("{what} {} not found; {hint}", path.display())))
    }
}

fn world_spec(cfg: &RunConfig, over: Option<&Path>) -> Result<WorldSpec, CliError> {
    match over.or(cfg.world.as_deref()) {
        Some(p) => {
            require(p, "world spec", "check the `world` key")?;
            let text = fs::read_to_string(p)?;
            WorldSpec::from_toml(&text).map_err(|e| CliError::from(e).context(format!("world spec {}", p.display())))
        }
        None => Ok(WorldSpec::default()),
    }
}

fn save_world(cfg: &RunConfig, spec: &WorldSpec) -> Result<(), CliError> {
    let world = generate_world(spec)?;
    for (d, p) in [(&world.real, &cfg.paths.real), (&world.syn_pool, &cfg.paths.syn), (&world.cal, &cfg.paths.cal)] {
        let mut w = create(p)?;
        d.write_jsonl(&mut w)?;
        w.flush()?;
    }
    let mut w = create(&cfg.out_file("world.toml"))?;
    w.write_all(spec.to_toml().as_bytes())?;
    w.flush()?;
    Ok(())
}

pub fn gen_world(cfg: &RunConfig, world: Option<&Path>) -> Result<(), CliError> {
    let spec = world_spec(cfg, world)?;
    save_world(cfg, &spec)?;
    println!(
        "wrote {} real, {} pool and {} calibration scenes under {}",
        spec.n_real,
        spec.n_pool,
        spec.n_cal,
        cfg.paths.out.display()
    );
    Ok(())
}

struct Datasets {
    real: Dataset,
    syn: Dataset,
    cal: Dataset,
}

fn load_dataset(path: &Path) -> Result<Dataset, CliError> {
    require(path, "dataset", "run gen-world first or set [paths]")?;
    Dataset::load(path).map_err(|e| CliError::from(e).context(format!("dataset {}", path.display())))
}

fn load_datasets(cfg: &RunConfig) -> Result<Datasets, CliError> {
    Ok(Datasets { real: load_dataset(&cfg.paths.real)?, syn: load_dataset(&cfg.paths.syn)?, cal: load_dataset(&cfg.paths.cal)? })
}

fn graphs(d: &Dataset) -> Vec<&SceneGraph> {
    d.ids().filter_map(|id| d.graph(id)).collect()
}

fn ids(d: &Dataset) -> Vec<String> {
    d.ids().map(str::to_string).collect()
}

fn write_embeddings(cfg: &RunConfig, data: &Datasets) -> Result<(), CliError> {
    let t_len = graphs(&data.real).first().map(|g| g.t_len).ok_or_else(|| validation("real dataset has no scene graphs"))?;
    let model = train::<f32>(&data.real, &cfg.graph_rae(t_len))?;
    let mut w = create(&cfg.out_file("graph_rae.bin"))?;
    write_params(&model.params, &mut w)?;
    w.flush()?;
    let mut all_ids = Vec::new();
    let mut all = Vec::new();
    for d in [&data.real, &data.syn, &data.cal] {
        if graphs(d).len() != d.len() {
            return Err(validation("every token needs a scene graph to be embedded"));
        }
        all.extend(embed_scenes(&graphs(d), &model.params, 64)?);
        all_ids.extend(d.ids());
    }
    let mut w = create(&cfg.out_file(EMBEDDINGS))?;
    write_embeddings_csv(&all_ids, &all, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn embed(cfg: &RunConfig) -> Result<(), CliError> {
    let data = load_datasets(cfg)?;
    write_embeddings(cfg, &data)?;
    println!("wrote {}", cfg.out_file(EMBEDDINGS).display());
    Ok(())
}

fn load_pools(cfg: &RunConfig, data: &Datasets) -> Result<Pools<f64>, CliError> {
    let path = cfg.out_file(EMBEDDINGS);
    require(&path, "embeddings", "run embed first")?;
    let rows = read_embeddings_csv::<f64, _>(File::open(&path)?)
        .map_err(|e| CliError::from(e).context(format!("embeddings {}", path.display())))?;
    let by_id: HashMap<String, Vec<f64>> = rows.into_iter().map(|(id, e)| (id, e.v)).collect();
    let lookup = |d: &Dataset| -> Result<Vec<Vec<f64>>, CliError> {
        d.ids()
            .map(|id| {
                by_id.get(id).cloned().ok_or_else(|| {
                    validation(format!("token {id} has no embedding in {}; rerun embed", path.display()))
                })
            })
            .collect()
    };
    Ok(Pools {
        real_emb: lookup(&data.real)?,
        pool_emb: lookup(&data.syn)?,
        cal_emb: lookup(&data.cal)?,
        real_ids: ids(&data.real),
        pool_ids: ids(&data.syn),
        cal_ids: ids(&data.cal),
    })
}

fn write_clusters(cfg: &RunConfig, pools: &Pools<f64>, prep: &Prepared<f64>) -> Result<(), CliError> {
    let mut w = create(&cfg.out_file("cluster_model.json"))?;
    w.write_all(prep.model.to_json()?.as_bytes())?;
    w.flush()?;
    let ids: Vec<&str> = pools.real_ids.iter().chain(&pools.pool_ids).chain(&pools.cal_ids).map(String::as_str).collect();
    let clusters: Vec<usize> =
        prep.real_clusters.iter().chain(&prep.pool_clusters).chain(&prep.cal_clusters).copied().collect();
    write_assignments(&ids, &clusters, create(&cfg.out_file("assignments.csv"))?)?;
    Ok(())
}

pub fn cluster(cfg: &RunConfig) -> Result<(), CliError> {
    let data = load_datasets(cfg)?;
    let pools = load_pools(cfg, &data)?;
    let prep = prepare(&pools, &cfg.engine)?;
    write_clusters(cfg, &pools, &prep)?;
    println!("clustered into {} clusters; n0 = {:?}", prep.model.k, prep.model.n0);
    Ok(())
}

fn log_path(cfg: &RunConfig, log: Option<&Path>) -> PathBuf {
    log.map_or_else(|| cfg.out_file(LOG), Path::to_path_buf)
}

fn read_records(path: &Path) -> Result<Vec<RoundRecord>, CliError> {
    require(path, "round log", "run the engine first or pass --log")?;
    read_log_file(path).map_err(|e| CliError::from(e).context(format!("round log {}", path.display())))
}

pub fn optimize(cfg: &RunConfig, log: Option<&Path>) -> Result<(), CliError> {
    let path = log_path(cfg, log);
    let records = read_records(&path)?;
    if records.len() < 2 {
        return Err(validation(format!(
            "insufficient history: {} has {} round(s), optimize needs at least 2",
            path.display(),
            records.len()
        )));
    }
    let data = load_datasets(cfg)?;
    let pools = load_pools(cfg, &data)?;
    let engine = EngineConfig { method: records[0].method, ..cfg.engine.clone() };
    let prep = prepare(&pools, &engine)?;
    let step = optimize_step(&prep, &engine, &records)?;
    let mut w = create(&cfg.out_file("optimize.json"))?;
    serde_json::to_writer_pretty(&mut w, &step)?;
    w.write_all(b"\n")?;
    w.flush()?;
    let target: Vec<String> = step.target_mixture.iter().map(|&x| fmt9(x)).collect();
    println!("round {} from warm start {}: target mixture [{}]", step.round, step.warm_start, target.join(", "));
    Ok(())
}

pub fn select(cfg: &RunConfig, method: Method, log: Option<&Path>) -> Result<(), CliError> {
    let engine = EngineConfig { method, ..cfg.engine.clone() };
    let records = match method {
        Method::Autoscale => read_records(&log_path(cfg, log))?,
        _ => Vec::new(),
    };
    let data = load_datasets(cfg)?;
    let pools = load_pools(cfg, &data)?;
    let prep = prepare(&pools, &engine)?;
    let rows = next_selection(&prep, &pools, &engine, &records)?;
    let path = cfg.out_file(&format!("selection_{}.csv", method.name()));
    write_selection_csv(&rows, create(&path)?)?;
    println!("selected {} tokens into {}", rows.len(), path.display());
    Ok(())
}

fn check_world(data: &Datasets, world: &autoscale_core::harness::World, cfg: &RunConfig) -> Result<(), CliError> {
    let (real, pool, cal) = world.ids();
    if ids(&data.real) != real || ids(&data.syn) != pool || ids(&data.cal) != cal {
        return Err(validation(format!(
            "datasets under {} were not generated by the configured world spec",
            cfg.paths.real.parent().unwrap_or(Path::new(".")).display()
        )));
    }
    Ok(())
}

pub fn run(cfg: &RunConfig, resume: bool) -> Result<(), CliError> {
    let spec = world_spec(cfg, None)?;
    let present = [&cfg.paths.real, &cfg.paths.syn, &cfg.paths.cal].iter().filter(|p| p.is_file()).count();
    match present {
        0 => {
            log::info!("generating world datasets");
            save_world(cfg, &spec)?;
        }
        3 => {}
        _ => return Err(validation("only some of the real/syn/cal datasets exist; regenerate them with gen-world")),
    }
    let world = generate_world(&spec)?;
    let data = load_datasets(cfg)?;
    check_world(&data, &world, cfg)?;
    if !cfg.out_file(EMBEDDINGS).is_file() {
        log::info!("embedding datasets");
        write_embeddings(cfg, &data)?;
    }
    let pools = load_pools(cfg, &data)?;
    let prep = prepare(&pools, &cfg.engine)?;
    write_clusters(cfg, &pools, &prep)?;
    let path = cfg.out_file(LOG);
    let records = if resume && path.is_file() { read_records(&path)? } else { Vec::new() };
    let mut file = if records.is_empty() {
        create(&path)?
    } else {
        BufWriter::new(OpenOptions::new().append(true).open(&path)?)
    };
    let oracle = world.oracle();
    let records = run_prepared(&prep, &pools, &oracle, &cfg.engine, records, &mut |r| {
        write_record(&mut file, r)?;
        file.flush()?;
        Ok(())
    })
    .map_err(|e| CliError::from(e).context(format!("partial log kept at {}", path.display())))?;
    let rows = records.iter().map(|r| {
        vec![r.round.to_string(), r.method.name().to_string(), fmt9(r.overall), r.selected.len().to_string()]
    });
    write_csv(&cfg.out_file("summary.csv"), &["round", "method", "overall", "selected"], rows)?;
    let last = records.last().ok_or_else(|| runtime("engine produced no rounds"))?;
    println!("{} rounds of {}: overall {} -> {}", records.len(), last.method.name(), fmt9(records[0].overall), fmt9(last.overall));
    Ok(())
}

pub fn score(cfg: &RunConfig, data: Option<&Path>) -> Result<(), CliError> {
    let path = data.unwrap_or(&cfg.paths.cal);
    let d = load_dataset(path)?;
    let mut rows = Vec::new();
    let (mut sum_p, mut sum_e) = (0.0, 0.0);
    for id in d.ids() {
        let Some(m) = d.metrics(id) else { continue };
        let bad = |e| validation(format!("token {id} in {}: {e}", path.display()));
        let (p, e) = (pdms(m).map_err(bad)?, epdms(m).map_err(bad)?);
        sum_p += p;
        sum_e += e;
        rows.push(vec![id.to_string(), fmt9(p), fmt9(e)]);
    }
    let n = rows.len();
    fs::create_dir_all(&cfg.paths.out)?;
    write_csv(&cfg.out_file("scores.csv"), &["token_id", "pdms", "epdms"], rows)?;
    let mean = |s: f64| if n == 0 { String::new() } else { fmt9(s / n as f64) };
    write_csv(
        &cfg.out_file("scores_summary.csv"),
        &["scenes", "scored", "mean_pdms", "mean_epdms"],
        [vec![d.len().to_string(), n.to_string(), mean(sum_p), mean(sum_e)]],
    )?;
    println!("scored {n} of {} scenes", d.len());
    Ok(())
}

pub fn report(cfg: &RunConfig, log: Option<&Path>) -> Result<(), CliError> {
    let records = read_records(&log_path(cfg, log))?;
    let dir = cfg.out_file("report");
    fs::create_dir_all(&dir)?;
    write_csv(
        &dir.join("rounds.csv"),
        &["round", "method", "overall"],
        records.iter().map(|r| vec![r.round.to_string(), r.method.name().to_string(), fmt9(r.overall)]),
    )?;
    let cluster_rows = records.iter().flat_map(|r| {
        (0..r.mixture.len()).map(move |k| {
            vec![
                r.round.to_string(),
                k.to_string(),
                fmt9(r.mixture[k]),
                opt9(r.cluster_scores.get(k).copied().flatten()),
                opt9(r.synthetic_ratio.get(k).copied()),
                opt9(r.gains.as_ref().and_then(|g| g.alpha.get(k).copied())),
                r.delta.as_ref().and_then(|d| d.get(k)).map_or_else(String::new, |d| d.to_string()),
            ]
        })
    });
    write_csv(&dir.join("clusters.csv"), &["round", "cluster", "w", "s_bar", "r", "alpha", "delta"], cluster_rows)?;
    let selection_rows = records.iter().flat_map(|r| {
        r.selected.iter().enumerate().map(move |(i, id)| vec![r.round.to_string(), (i + 1).to_string(), id.clone()])
    });
    write_csv(&dir.join("selection.csv"), &["round", "rank", "token_id"], selection_rows)?;
    let (emb, assign) = (cfg.out_file(EMBEDDINGS), cfg.out_file("assignments.csv"));
    if emb.is_file() && assign.is_file() {
        write_pca(&emb, &assign, &dir.join("pca.csv"))?;
    } else {
        log::warn!("no embeddings or assignments under {}; skipping pca.csv", cfg.paths.out.display());
    }
    println!("wrote report for {} rounds to {}", records.len(), dir.display());
    Ok(())
}

fn write_pca(emb: &Path, assign: &Path, out: &Path) -> Result<(), CliError> {
    let rows = read_embeddings_csv::<f64, _>(File::open(emb)?)?;
    let clusters: HashMap<String, usize> = autoscale_core::analytics::read_assignments(File::open(assign)?)?.into_iter().collect();
    let unit: Vec<Vec<f64>> = rows
        .iter()
        .map(|(id, e)| normalized(&e.v).ok_or_else(|| validation(format!("embedding of {id} has zero norm"))))
        .collect::<Result<_, _>>()?;
    let dims = unit.first().map_or(0, Vec::len).min(2);
    let pca = PcaModel::fit(&unit, dims)?;
    let table = rows.iter().zip(&unit).map(|((id, _), v)| {
        let p = pca.transform(v);
        vec![
            id.clone(),
            clusters.get(id).map_or_else(String::new, |c| c.to_string()),
            opt9(p.first().copied()),
            opt9(p.get(1).copied()),
        ]
    });
    write_csv(out, &["token_id", "cluster", "pc1", "pc2"], table)
}
