//! Scenario documents: a seed, a drive configuration, a code database and
//! an insert/remove schedule.
//!
//! ```json
//! {"seed": 7, "config": {"read_retries": 2}, "db": "codedb.json",
//!  "events": [{"t_ms": 1000, "action": "insert", "disc": "discs/a.json"},
//!             {"t_ms": 1500, "action": "insert",
//!              "disc": {"serial": "TD-0001", "tag": {"code": "0b1010", "band": "HF_13_56MHz"}}},
//!             {"t_ms": 2000, "action": "remove"}]}
//! ```
//!
//! Relative paths resolve against the scenario file's directory. A disc
//! document may name a sealed image file under `"image"`.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::content::{ContentError, SealedImage};
use crate::controller::{simulate, ControllerError, ScenarioRun, ScheduledEvent};
use crate::exec::Execution;
use crate::model::{CodeDatabase, Disc, DriveConfig, ModelError, RfidTag, VisibleSerial};
use crate::persist::{load_codedb, PersistError};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {reason}")]
    Parse { path: PathBuf, reason: String },
    #[error("event {index}: {reason}")]
    Event { index: usize, reason: String },
    #[error(transparent)]
    Persist(#[from] PersistError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("{path}: {source}")]
    Image { path: PathBuf, source: ContentError },
    #[error(transparent)]
    Controller(#[from] ControllerError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiscSpec {
    pub serial: VisibleSerial,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub title: String,
    #[serde(default)]
    pub tag: Option<RfidTag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DiscRef {
    Path(PathBuf),
    Inline(DiscSpec),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EventAction {
    Insert,
    Remove,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventSpec {
    pub t_ms: u64,
    pub action: EventAction,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub disc: Option<DiscRef>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioFile {
    pub seed: u64,
    #[serde(default)]
    pub config: DriveConfig,
    pub db: PathBuf,
    pub events: Vec<EventSpec>,
}

fn read_text(path: &Path) -> Result<String, ScenarioError> {
    fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.to_owned(),
        source,
    })
}

impl ScenarioFile {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("scenario serializes");
        s.push('\n');
        s
    }

    pub fn load(path: &Path) -> Result<Self, ScenarioError> {
        Self::from_json(&read_text(path)?).map_err(|e| ScenarioError::Parse {
            path: path.to_owned(),
            reason: e.to_string(),
        })
    }

    /// Loads everything the scenario references, relative to `base`.
    pub fn resolve(&self, base: &Path) -> Result<Scenario, ScenarioError> {
        self.config.validate()?;
        let db = load_codedb(&base.join(&self.db))?;
        let mut events = Vec::with_capacity(self.events.len());
        for (index, ev) in self.events.iter().enumerate() {
            let scheduled = match (ev.action, &ev.disc) {
                (EventAction::Insert, Some(d)) => {
                    ScheduledEvent::insert(ev.t_ms, resolve_disc(d, base)?)
                }
                (EventAction::Insert, None) => {
                    return Err(ScenarioError::Event {
                        index,
                        reason: "insert needs a disc".into(),
                    })
                }
                (EventAction::Remove, None) => ScheduledEvent::remove(ev.t_ms),
                (EventAction::Remove, Some(_)) => {
                    return Err(ScenarioError::Event {
                        index,
                        reason: "remove takes no disc".into(),
                    })
                }
            };
            events.push(scheduled);
        }
        Ok(Scenario {
            seed: self.seed,
            config: self.config.clone(),
            db,
            events,
        })
    }
}

fn resolve_disc(disc: &DiscRef, base: &Path) -> Result<Disc, ScenarioError> {
    let (spec, dir) = match disc {
        DiscRef::Inline(spec) => (spec.clone(), base.to_owned()),
        DiscRef::Path(p) => {
            let path = base.join(p);
            let spec: DiscSpec =
                serde_json::from_str(&read_text(&path)?).map_err(|e| ScenarioError::Parse {
                    path: path.clone(),
                    reason: e.to_string(),
                })?;
            let dir = path.parent().map(Path::to_owned).unwrap_or_default();
            (spec, dir)
        }
    };
    let content = match &spec.image {
        Some(p) => {
            let path = dir.join(p);
            let bytes = fs::read(&path).map_err(|source| ScenarioError::Io {
                path: path.clone(),
                source,
            })?;
            Some(
                SealedImage::from_bytes(&bytes)
                    .map_err(|source| ScenarioError::Image { path, source })?,
            )
        }
        None => None,
    };
    Ok(Disc {
        serial: spec.serial,
        tag: spec.tag,
        content,
        title: spec.title,
    })
}

/// A fully loaded scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub seed: u64,
    pub config: DriveConfig,
    pub db: CodeDatabase,
    pub events: Vec<ScheduledEvent>,
}

impl Scenario {
    pub fn run(&self) -> Result<ScenarioRun, ControllerError> {
        simulate(&self.events, &self.db, &self.config, self.seed)
    }
}

/// Runs independent scenarios, one per item, preserving order.
pub fn simulate_batch(
    scenarios: &[Scenario],
    exec: Execution,
) -> Vec<Result<ScenarioRun, ControllerError>> {
    exec.map(scenarios, Scenario::run)
}
