//! Snapshot/resume and append-only run logs.
//!
//! Everything written here uses canonical JSON: object keys sorted, floats
//! rendered with 17 significant digits, one record per line in logs. Two
//! serializations of equal data are byte-identical, which is what makes
//! golden-file comparison and resume equivalence checkable at the byte
//! level. Snapshot writes are atomic (temp file in the target directory,
//! then rename), so a crash never leaves a partial file at the target path.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::audit::audit_state;
use crate::model::{Genome, PopulationState, RunConfig};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum PersistenceError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parse error in {path}: {detail}")]
    Parse { path: PathBuf, detail: String },
    #[error("schema version mismatch: found {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("invariant violation in snapshot: {0}")]
    Invariant(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PersistenceError + '_ {
    move |source| PersistenceError::Io {
        path: path.to_path_buf(),
        source,
    }
}

// ---------------------------------------------------------------------------
// Canonical JSON
// ---------------------------------------------------------------------------

/// Serialize to canonical JSON: sorted keys, 17-significant-digit floats.
pub fn to_canonical_json<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("value must serialize to JSON");
    let mut out = String::new();
    write_canonical(&v, &mut out);
    out
}

fn write_canonical(v: &Value, out: &mut String) {
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if let Some(i) = n.as_i64() {
                out.push_str(&i.to_string());
            } else if let Some(u) = n.as_u64() {
                out.push_str(&u.to_string());
            } else {
                let f = n.as_f64().expect("numeric");
                assert!(f.is_finite(), "non-finite float cannot be serialized");
                out.push_str(&format!("{f:.16e}"));
            }
        }
        Value::String(s) => {
            out.push_str(&serde_json::to_string(s).expect("string serializes"))
        }
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_canonical(item, out);
            }
            out.push(']');
        }
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            out.push('{');
            for (i, k) in keys.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(k).expect("key serializes"));
                out.push(':');
                write_canonical(&map[*k], out);
            }
            out.push('}');
        }
    }
}

// ---------------------------------------------------------------------------
// Config files
// ---------------------------------------------------------------------------

#[derive(Deserialize)]
struct ConfigFile {
    #[serde(flatten)]
    run: RunConfig,
    #[serde(default)]
    landscape: Option<crate::oracles::LandscapeInput>,
}

/// Parse a run configuration. The file carries every `RunConfig` field
/// (missing fields take defaults) plus an optional top-level `landscape`
/// block whose anchor texts are resolved into unit centers.
pub fn parse_config_str(raw: &str, origin: &Path) -> Result<RunConfig, PersistenceError> {
    let file: ConfigFile = serde_json::from_str(raw).map_err(|e| PersistenceError::Parse {
        path: origin.to_path_buf(),
        detail: e.to_string(),
    })?;
    let mut cfg = file.run;
    if let Some(input) = &file.landscape {
        let spec = crate::oracles::resolve_landscape(input, cfg.distance.d_g).map_err(|e| {
            PersistenceError::Parse {
                path: origin.to_path_buf(),
                detail: e.to_string(),
            }
        })?;
        cfg.oracles.landscape = Some(spec);
    }
    Ok(cfg)
}

/// Load and resolve a config file from disk.
pub fn load_config(path: &Path) -> Result<RunConfig, PersistenceError> {
    let raw = fs::read_to_string(path).map_err(io_err(path))?;
    parse_config_str(&raw, path)
}

/// Load seed prompts: one prompt per line, UTF-8, blank lines skipped.
pub fn load_prompts(path: &Path) -> Result<Vec<String>, PersistenceError> {
    let raw = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(raw
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .map(str::to_string)
        .collect())
}

// ---------------------------------------------------------------------------
// Timestamps
// ---------------------------------------------------------------------------

/// RFC3339 UTC timestamp. Honors SOURCE_DATE_EPOCH so reproducible runs can
/// pin snapshot timestamps.
pub fn timestamp_now() -> String {
    let secs = std::env::var("SOURCE_DATE_EPOCH")
        .ok()
        .and_then(|s| s.parse::<u64>().ok())
        .unwrap_or_else(|| {
            std::time::SystemTime::now()
                .duration_since(std::time::UNIX_EPOCH)
                .map(|d| d.as_secs())
                .unwrap_or(0)
        });
    format_epoch(secs)
}

fn format_epoch(secs: u64) -> String {
    let days = (secs / 86400) as i64;
    let rem = secs % 86400;
    let (y, m, d) = civil_from_days(days);
    format!(
        "{y:04}-{m:02}-{d:02}T{:02}:{:02}:{:02}Z",
        rem / 3600,
        (rem % 3600) / 60,
        rem % 60
    )
}

fn civil_from_days(z: i64) -> (i64, u32, u32) {
    let z = z + 719_468;
    let era = if z >= 0 { z } else { z - 146_096 } / 146_097;
    let doe = (z - era * 146_097) as u64;
    let yoe = (doe - doe / 1_460 + doe / 36_524 - doe / 146_096) / 365;
    let y = yoe as i64 + era * 400;
    let doy = doe - (365 * yoe + yoe / 4 - yoe / 100);
    let mp = (5 * doy + 2) / 153;
    let d = (doy - (153 * mp + 2) / 5 + 1) as u32;
    let m = if mp < 10 { mp + 3 } else { mp - 9 } as u32;
    (if m <= 2 { y + 1 } else { y }, m, d)
}

// ---------------------------------------------------------------------------
// Snapshots
// ---------------------------------------------------------------------------

/// Serialized position of the deterministic seed stream.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    /// ChaCha word position as a decimal string (u128).
    pub word_pos: String,
}

impl RngState {
    pub fn new(seed: u64, word_pos: u128) -> Self {
        RngState {
            seed,
            word_pos: word_pos.to_string(),
        }
    }

    pub fn word_pos_u128(&self) -> Result<u128, PersistenceError> {
        self.word_pos
            .parse::<u128>()
            .map_err(|e| PersistenceError::Parse {
                path: PathBuf::from("<rng_state>"),
                detail: format!("bad word_pos {:?}: {e}", self.word_pos),
            })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Snapshot {
    pub schema_version: u32,
    pub cfg: RunConfig,
    pub state: PopulationState,
    pub rng_state: RngState,
    pub created_at: String,
}

impl Snapshot {
    pub fn new(cfg: RunConfig, state: PopulationState, rng_state: RngState) -> Self {
        Snapshot {
            schema_version: SCHEMA_VERSION,
            cfg,
            state,
            rng_state,
            created_at: timestamp_now(),
        }
    }
}

/// Atomic canonical-JSON write: temp file in the target directory, then
/// rename onto the destination.
pub fn save_snapshot(snapshot: &Snapshot, path: &Path) -> Result<(), PersistenceError> {
    let bytes = format!("{}\n", to_canonical_json(snapshot));
    atomic_write(path, bytes.as_bytes())
}

pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), PersistenceError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io_err(path))?;
    tmp.write_all(bytes).map_err(io_err(path))?;
    tmp.flush().map_err(io_err(path))?;
    tmp.persist(path)
        .map_err(|e| PersistenceError::Io {
            path: path.to_path_buf(),
            source: e.error,
        })?;
    Ok(())
}

/// Load a snapshot, checking the schema version and every state invariant
/// before returning.
pub fn load_snapshot(path: &Path) -> Result<Snapshot, PersistenceError> {
    let raw = fs::read_to_string(path).map_err(io_err(path))?;
    let snapshot: Snapshot =
        serde_json::from_str(&raw).map_err(|e| PersistenceError::Parse {
            path: path.to_path_buf(),
            detail: e.to_string(),
        })?;
    if snapshot.schema_version != SCHEMA_VERSION {
        return Err(PersistenceError::VersionMismatch {
            found: snapshot.schema_version,
            expected: SCHEMA_VERSION,
        });
    }
    let violations = audit_state(&snapshot.state, &snapshot.cfg);
    if let Some(v) = violations.first() {
        return Err(PersistenceError::Invariant(v.to_string()));
    }
    Ok(snapshot)
}

// ---------------------------------------------------------------------------
// Run directory
// ---------------------------------------------------------------------------

/// Per-run file layout: config.json, snapshot-<gen>.json, run.log.jsonl,
/// archive.jsonl (one genome per line) and metrics/*.csv.
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub fn create(root: &Path) -> Result<RunDir, PersistenceError> {
        fs::create_dir_all(root.join("metrics")).map_err(io_err(root))?;
        Ok(RunDir {
            root: root.to_path_buf(),
        })
    }

    pub fn open(root: &Path) -> RunDir {
        RunDir {
            root: root.to_path_buf(),
        }
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.json")
    }

    pub fn log_path(&self) -> PathBuf {
        self.root.join("run.log.jsonl")
    }

    pub fn archive_path(&self) -> PathBuf {
        self.root.join("archive.jsonl")
    }

    pub fn snapshot_path(&self, generation: u32) -> PathBuf {
        self.root.join(format!("snapshot-{generation}.json"))
    }

    pub fn metrics_dir(&self) -> PathBuf {
        self.root.join("metrics")
    }

    pub fn write_config(&self, cfg: &RunConfig) -> Result<(), PersistenceError> {
        let bytes = format!("{}\n", to_canonical_json(cfg));
        atomic_write(&self.config_path(), bytes.as_bytes())
    }

    /// Append canonical JSON lines to the run log.
    pub fn append_log<T: Serialize>(&self, events: &[T]) -> Result<(), PersistenceError> {
        self.append_lines(&self.log_path(), events)
    }

    /// Append archived genomes, one canonical JSON object per line.
    pub fn append_archive(&self, genomes: &[&Genome]) -> Result<(), PersistenceError> {
        self.append_lines(&self.archive_path(), genomes)
    }

    fn append_lines<T: Serialize>(&self, path: &Path, items: &[T]) -> Result<(), PersistenceError> {
        if items.is_empty() {
            return Ok(());
        }
        let mut file = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(path)
            .map_err(io_err(path))?;
        let mut buf = String::new();
        for item in items {
            buf.push_str(&to_canonical_json(item));
            buf.push('\n');
        }
        file.write_all(buf.as_bytes()).map_err(io_err(path))?;
        Ok(())
    }

    /// Largest-generation snapshot in the directory, if any.
    pub fn latest_snapshot_path(&self) -> Option<(u32, PathBuf)> {
        let mut best: Option<(u32, PathBuf)> = None;
        let entries = fs::read_dir(&self.root).ok()?;
        for entry in entries.flatten() {
            let name = entry.file_name();
            let name = name.to_string_lossy();
            if let Some(rest) = name.strip_prefix("snapshot-") {
                if let Some(gen) = rest.strip_suffix(".json").and_then(|g| g.parse::<u32>().ok()) {
                    if best.as_ref().map_or(true, |(b, _)| gen > *b) {
                        best = Some((gen, entry.path()));
                    }
                }
            }
        }
        best
    }
}
