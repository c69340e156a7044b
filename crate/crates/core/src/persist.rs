//! Versioned JSON documents for the vendor registry and the host code database.
//!
//! ```text
//! registry.json {"version":1,"width":W,"entries":[{"serial":s,"blob":b64,"provisioned_at":iso8601}]}
//! codedb.json   {"version":1,"width":W,"entries":[{"code":canonical,"serial":s,"activated_at":iso8601,
//!                                                   "source":"RemoteActivation"|"LocalProvision"}]}
//! ```
//!
//! Entries are written sorted (by serial, by code) so output is stable.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::activation::{ActivationBlob, RegistryEntry, SerialRegistry};
use crate::model::{ActivationRecord, ActivationSource, CodeDatabase, TagCode, VisibleSerial};

pub const DOCUMENT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PersistError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("corrupt document: {0}")]
    Corrupt(String),
    #[error("unsupported document version {0}")]
    UnsupportedVersion(u32),
}

fn corrupt(e: impl ToString) -> PersistError {
    PersistError::Corrupt(e.to_string())
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegistryDoc {
    version: u32,
    width: u32,
    entries: Vec<RegistryEntryDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RegistryEntryDoc {
    serial: VisibleSerial,
    blob: String,
    provisioned_at: DateTime<Utc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CodeDbDoc {
    version: u32,
    width: u32,
    entries: Vec<CodeDbEntryDoc>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CodeDbEntryDoc {
    code: String,
    serial: VisibleSerial,
    activated_at: DateTime<Utc>,
    source: ActivationSource,
}

fn check_version(v: u32) -> Result<(), PersistError> {
    if v != DOCUMENT_VERSION {
        return Err(PersistError::UnsupportedVersion(v));
    }
    Ok(())
}

fn to_pretty<T: Serialize>(doc: &T) -> String {
    let mut s = serde_json::to_string_pretty(doc).expect("document serializes");
    s.push('\n');
    s
}

pub fn registry_to_json(registry: &SerialRegistry) -> String {
    to_pretty(&RegistryDoc {
        version: DOCUMENT_VERSION,
        width: registry.width(),
        entries: registry
            .iter()
            .map(|(serial, e)| RegistryEntryDoc {
                serial: serial.clone(),
                blob: e.blob.to_base64(),
                provisioned_at: e.provisioned_at,
            })
            .collect(),
    })
}

pub fn registry_from_json(text: &str) -> Result<SerialRegistry, PersistError> {
    let doc: RegistryDoc = serde_json::from_str(text).map_err(corrupt)?;
    check_version(doc.version)?;
    let mut registry = SerialRegistry::new(doc.width).map_err(corrupt)?;
    for e in doc.entries {
        let blob = ActivationBlob::from_base64(&e.blob).map_err(corrupt)?;
        registry
            .insert(
                e.serial.clone(),
                RegistryEntry {
                    blob,
                    provisioned_at: e.provisioned_at,
                },
            )
            .map_err(|_| corrupt(format!("duplicate serial {}", e.serial)))?;
    }
    Ok(registry)
}

pub fn codedb_to_json(db: &CodeDatabase) -> String {
    to_pretty(&CodeDbDoc {
        version: DOCUMENT_VERSION,
        width: db.width(),
        entries: db
            .iter()
            .map(|(code, r)| CodeDbEntryDoc {
                code: code.canonical(),
                serial: r.serial.clone(),
                activated_at: r.activated_at,
                source: r.source,
            })
            .collect(),
    })
}

pub fn codedb_from_json(text: &str) -> Result<CodeDatabase, PersistError> {
    let doc: CodeDbDoc = serde_json::from_str(text).map_err(corrupt)?;
    check_version(doc.version)?;
    let mut db = CodeDatabase::new(doc.width).map_err(corrupt)?;
    for e in doc.entries {
        let code = TagCode::parse(&e.code, doc.width).map_err(corrupt)?;
        let record = ActivationRecord {
            serial: e.serial,
            activated_at: e.activated_at,
            source: e.source,
        };
        if !db.restore(code, record).map_err(corrupt)? {
            return Err(corrupt(format!("duplicate code {}", e.code)));
        }
    }
    Ok(db)
}

fn read(path: &Path) -> Result<String, PersistError> {
    fs::read_to_string(path).map_err(|source| PersistError::Io {
        path: path.to_owned(),
        source,
    })
}

/// Writes through a sibling temp file and a rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), PersistError> {
    let io_err = |source| PersistError::Io {
        path: path.to_owned(),
        source,
    };
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(io_err)?;
    fs::rename(&tmp, path).map_err(io_err)
}

pub fn load_registry(path: &Path) -> Result<SerialRegistry, PersistError> {
    registry_from_json(&read(path)?)
}

pub fn save_registry(path: &Path, registry: &SerialRegistry) -> Result<(), PersistError> {
    write_atomic(path, registry_to_json(registry).as_bytes())
}

pub fn load_codedb(path: &Path) -> Result<CodeDatabase, PersistError> {
    codedb_from_json(&read(path)?)
}

pub fn save_codedb(path: &Path, db: &CodeDatabase) -> Result<(), PersistError> {
    write_atomic(path, codedb_to_json(db).as_bytes())
}
