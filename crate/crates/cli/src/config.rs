//! Run configuration: engine keys at the top level plus `world`,
//! `[paths]` and an optional `[graph_rae]` table. Relative paths resolve
//! against the config file's directory; flags override file values.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use autoscale_core::engine::{EngineConfig, Method};
use autoscale_core::graph_rae::GraphRaeConfig;
use serde::Deserialize;

use crate::error::{validation, CliError};

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PathsFile {
    real: Option<PathBuf>,
    syn: Option<PathBuf>,
    cal: Option<PathBuf>,
    out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Paths {
    pub real: PathBuf,
    pub syn: PathBuf,
    pub cal: PathBuf,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub engine: EngineConfig,
    pub paths: Paths,
    /// World spec TOML; `None` uses the default desk-scale world.
    pub world: Option<PathBuf>,
    pub graph_rae: GraphRaeConfig,
    /// Whether `[graph_rae]` fixed its own seed.
    graph_rae_seeded: bool,
}

/// Command-line values that take precedence over the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub budget: Option<usize>,
    pub rounds: Option<usize>,
    pub clusters: Option<usize>,
    pub method: Option<Method>,
    pub out: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, o: &Overrides) -> Result<Self, CliError> {
        let (text, base) = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .with_context(|| format!("cannot read config {}", p.display()))
                    .map_err(CliError::Validation)?;
                (text, p.parent().map(Path::to_path_buf).unwrap_or_default())
            }
            None => (String::new(), PathBuf::new()),
        };
        let origin = path.map_or_else(|| "<defaults>".to_string(), |p| p.display().to_string());
        Self::parse(&text, &base, o).map_err(|e| validation(format!("{origin}: {e:#}")))
    }

    pub fn parse(text: &str, base: &Path, o: &Overrides) -> anyhow::Result<Self> {
        let mut table: toml::Table = text.parse().context("invalid TOML")?;
        let paths: PathsFile = match table.remove("paths") {
            Some(v) => v.try_into().context("in [paths]")?,
            None => PathsFile::default(),
        };
        let world = match table.remove("world") {
            Some(toml::Value::String(s)) => Some(base.join(s)),
            Some(other) => return Err(anyhow!("key `world` must be a path string, got {}", other.type_str())),
            None => None,
        };
        let (graph_rae, graph_rae_seeded) = match table.remove("graph_rae") {
            Some(v) => {
                let seeded = v.as_table().is_some_and(|t| t.contains_key("seed"));
                (v.try_into::<GraphRaeConfig>().context("in [graph_rae]")?, seeded)
            }
            None => (GraphRaeConfig::default(), false),
        };
        let mut engine: EngineConfig = toml::Value::Table(table).try_into().context("in engine keys")?;
        if let Some(v) = o.seed {
            engine.seed = v;
        }
        if let Some(v) = o.budget {
            engine.budget = v;
        }
        if let Some(v) = o.rounds {
            engine.rounds = v;
        }
        if let Some(v) = o.clusters {
            engine.clusters = v;
        }
        if let Some(v) = o.method {
            engine.method = v;
        }
        engine.validate().map_err(|e| anyhow!("{e}"))?;
        let out = o.out.clone().unwrap_or_else(|| base.join(paths.out.unwrap_or_else(|| "out".into())));
        let resolve = |p: Option<PathBuf>, name: &str| p.map_or_else(|| out.join(name), |p| base.join(p));
        let paths = Paths {
            real: resolve(paths.real, "real.jsonl"),
            syn: resolve(paths.syn, "syn.jsonl"),
            cal: resolve(paths.cal, "cal.jsonl"),
            out,
        };
        Ok(Self { engine, paths, world, graph_rae, graph_rae_seeded })
    }

    /// Graph-RAE settings; the seed follows the engine seed unless
    /// `[graph_rae]` sets one.
    pub fn graph_rae(&self, t_len: usize) -> GraphRaeConfig {
        let mut g = self.graph_rae.clone();
        g.dims.t_len = t_len;
        if !self.graph_rae_seeded {
            g.seed = self.engine.seed;
        }
        g
    }

    pub fn out_file(&self, name: &str) -> PathBuf {
        self.paths.out.join(name)
    }
}
