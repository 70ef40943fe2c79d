use autoscale_core::analytics::AnalyticsError;
use autoscale_core::engine::EngineError;
use autoscale_core::graph_rae::GraphRaeError;
use autoscale_core::harness::HarnessError;
use autoscale_core::scene::SceneError;

/// Exit status 1 for bad input, 2 for failures while running.
#[derive(Debug)]
pub enum CliError {
    Validation(anyhow::Error),
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 1,
            CliError::Runtime(_) => 2,
        }
    }

    pub fn context(self, what: impl std::fmt::Display) -> Self {
        match self {
            CliError::Validation(e) => CliError::Validation(e.context(what.to_string())),
            CliError::Runtime(e) => CliError::Runtime(e.context(what.to_string())),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(e) | CliError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

pub fn validation(msg: impl std::fmt::Display) -> CliError {
    CliError::Validation(anyhow::anyhow!("{msg}"))
}

pub fn runtime(msg: impl std::fmt::Display) -> CliError {
    CliError::Runtime(anyhow::anyhow!("{msg}"))
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::Config(_)
            | EngineError::Input(_)
            | EngineError::Log { .. }
            | EngineError::Resume(_)
            | EngineError::InsufficientHistory { .. } => CliError::Validation(e.into()),
            other => CliError::Runtime(other.into()),
        }
    }
}

impl From<SceneError> for CliError {
    fn from(e: SceneError) -> Self {
        match e {
            SceneError::Io(_) => CliError::Runtime(e.into()),
            other => CliError::Validation(other.into()),
        }
    }
}

impl From<HarnessError> for CliError {
    fn from(e: HarnessError) -> Self {
        match e {
            HarnessError::Spec(_) | HarnessError::Toml(_) => CliError::Validation(e.into()),
            other => CliError::Runtime(other.into()),
        }
    }
}

impl From<GraphRaeError> for CliError {
    fn from(e: GraphRaeError) -> Self {
        match e {
            GraphRaeError::Io(_) => CliError::Runtime(e.into()),
            GraphRaeError::Format(_) | GraphRaeError::Csv(_) => CliError::Validation(e.into()),
            other => CliError::Runtime(other.into()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl From<csv::Error> for CliError {
    fn from(e: csv::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl From<AnalyticsError> for CliError {
    fn from(e: AnalyticsError) -> Self {
        CliError::Runtime(e.into())
    }
}
