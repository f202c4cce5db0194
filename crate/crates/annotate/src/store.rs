//! On-disk layout under the data directory:
//!
//! ```text
//! images/<id>.png|ppm|pgm         source images, id = file stem
//! assignments.txt                 optional `user: id, id, ...` lines
//! annotations/<id>/<user>.jsonl   append-only stroke log
//! annotations/<id>/<user>.png     rendered mask, written on submit
//! annotations/<id>/<user>.submitted  submit marker (JSON timestamp)
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::ServiceError;
use crate::render::Stroke;

const IMAGE_EXTENSIONS: [&str; 4] = ["png", "ppm", "pgm", "pnm"];

#[derive(Clone, Debug)]
pub struct ImageEntry {
    pub path: PathBuf,
    pub width: u32,
    pub height: u32,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct LogLine {
    /// Milliseconds since the Unix epoch.
    t: u64,
    stroke: Stroke,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    InProgress,
    Submitted,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TracingRecord {
    pub image_id: String,
    pub annotator: String,
    pub strokes: Vec<Stroke>,
    pub status: Status,
    pub created_at: Option<u64>,
    pub updated_at: Option<u64>,
    pub submitted_at: Option<u64>,
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn safe_component(s: &str) -> bool {
    !s.is_empty()
        && s != "."
        && s != ".."
        && s.chars().all(|c| c.is_ascii_alphanumeric() || "-_.".contains(c))
}

pub struct Store {
    root: PathBuf,
    images: BTreeMap<String, ImageEntry>,
    assignments: Option<HashMap<String, BTreeSet<String>>>,
}

impl Store {
    /// Scans `images/` and reads the optional assignments file.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, ServiceError> {
        let root = root.into();
        let dir = root.join("images");
        let entries = fs::read_dir(&dir)
            .map_err(|e| ServiceError::Config(format!("{}: {e}", dir.display())))?;
        let mut images = BTreeMap::new();
        for entry in entries {
            let path = entry?.path();
            let ext = path
                .extension()
                .and_then(|e| e.to_str())
                .map(str::to_ascii_lowercase);
            let Some(stem) = path.file_stem().and_then(|s| s.to_str()) else { continue };
            if !ext.is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.as_str())) || !safe_component(stem) {
                continue;
            }
            let (width, height) = image::image_dimensions(&path)
                .map_err(|e| ServiceError::Config(format!("{}: {e}", path.display())))?;
            images.insert(stem.to_string(), ImageEntry { path, width, height });
        }
        let assignments_path = root.join("assignments.txt");
        let assignments = if assignments_path.is_file() {
            Some(parse_assignments(&fs::read_to_string(&assignments_path)?)?)
        } else {
            None
        };
        fs::create_dir_all(root.join("annotations"))?;
        Ok(Store {
            root,
            images,
            assignments,
        })
    }

    pub fn image(&self, id: &str) -> Result<&ImageEntry, ServiceError> {
        self.images
            .get(id)
            .ok_or_else(|| ServiceError::NotFound(format!("no image '{id}'")))
    }

    pub fn image_ids(&self) -> impl Iterator<Item = &String> {
        self.images.keys()
    }

    /// Without an assignments file every image is assigned to everyone.
    pub fn is_assigned(&self, user: &str, id: &str) -> bool {
        match &self.assignments {
            None => self.images.contains_key(id),
            Some(a) => a.get(user).is_some_and(|s| s.contains(id)),
        }
    }

    fn stream_path(&self, id: &str, user: &str, ext: &str) -> Result<PathBuf, ServiceError> {
        if !safe_component(id) || !safe_component(user) {
            return Err(ServiceError::BadRequest("invalid identifier".into()));
        }
        Ok(self.root.join("annotations").join(id).join(format!("{user}.{ext}")))
    }

    pub fn is_submitted(&self, id: &str, user: &str) -> Result<bool, ServiceError> {
        Ok(self.stream_path(id, user, "submitted")?.is_file())
    }

    pub fn has_strokes(&self, id: &str, user: &str) -> Result<bool, ServiceError> {
        Ok(self.stream_path(id, user, "jsonl")?.is_file())
    }

    /// Appends a batch with a single write so a batch is never split.
    pub fn append(&self, id: &str, user: &str, strokes: &[Stroke]) -> Result<(), ServiceError> {
        let path = self.stream_path(id, user, "jsonl")?;
        fs::create_dir_all(path.parent().expect("stream path has a parent"))?;
        let t = now_ms();
        let mut buf = Vec::new();
        for stroke in strokes {
            serde_json::to_writer(&mut buf, &LogLine { t, stroke: stroke.clone() })
                .map_err(|e| ServiceError::BadRequest(e.to_string()))?;
            buf.push(b'\n');
        }
        let mut f = OpenOptions::new().create(true).append(true).open(&path)?;
        f.write_all(&buf)?;
        f.sync_data()?;
        Ok(())
    }

    pub fn record(&self, id: &str, user: &str) -> Result<TracingRecord, ServiceError> {
        let path = self.stream_path(id, user, "jsonl")?;
        let mut strokes = Vec::new();
        let (mut created, mut updated) = (None, None);
        if path.is_file() {
            for line in fs::read_to_string(&path)?.lines().filter(|l| !l.trim().is_empty()) {
                let entry: LogLine = serde_json::from_str(line).map_err(|e| {
                    ServiceError::Config(format!("corrupt stroke log {}: {e}", path.display()))
                })?;
                created.get_or_insert(entry.t);
                updated = Some(entry.t);
                strokes.push(entry.stroke);
            }
        }
        let marker = self.stream_path(id, user, "submitted")?;
        let submitted_at = if marker.is_file() {
            let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&marker)?)
                .map_err(|e| ServiceError::Config(e.to_string()))?;
            v.get("submitted_at").and_then(|t| t.as_u64())
        } else {
            None
        };
        Ok(TracingRecord {
            image_id: id.to_string(),
            annotator: user.to_string(),
            strokes,
            status: if marker.is_file() { Status::Submitted } else { Status::InProgress },
            created_at: created,
            updated_at: updated,
            submitted_at,
        })
    }

    /// Persists the rendered mask, then the marker; both are fsynced.
    pub fn submit(&self, id: &str, user: &str, mask_png: &[u8]) -> Result<(), ServiceError> {
        let png = self.stream_path(id, user, "png")?;
        write_synced(&png, mask_png)?;
        let marker = self.stream_path(id, user, "submitted")?;
        write_synced(&marker, serde_json::json!({ "submitted_at": now_ms() }).to_string().as_bytes())?;
        if let Some(dir) = marker.parent() {
            File::open(dir)?.sync_all()?;
        }
        Ok(())
    }

    pub fn mask_path(&self, id: &str, user: &str) -> Result<PathBuf, ServiceError> {
        self.stream_path(id, user, "png")
    }

    /// Annotators with a submitted tracing of `id`, sorted.
    pub fn submitted_annotators(&self, id: &str) -> Result<Vec<String>, ServiceError> {
        let dir = self.root.join("annotations").join(id);
        let mut out = Vec::new();
        if dir.is_dir() {
            for entry in fs::read_dir(dir)? {
                let path = entry?.path();
                if path.extension().is_some_and(|e| e == "submitted") {
                    if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                        out.push(stem.to_string());
                    }
                }
            }
        }
        out.sort();
        Ok(out)
    }
}

fn write_synced(path: &Path, bytes: &[u8]) -> Result<(), ServiceError> {
    let tmp = path.with_extension("tmp");
    let mut f = File::create(&tmp)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn parse_assignments(text: &str) -> Result<HashMap<String, BTreeSet<String>>, ServiceError> {
    let mut out: HashMap<String, BTreeSet<String>> = HashMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (user, ids) = line.split_once(':').ok_or_else(|| {
            ServiceError::Config(format!("assignments line {}: expected 'user: id, id'", i + 1))
        })?;
        out.entry(user.trim().to_string()).or_default().extend(
            ids.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(String::from),
        );
    }
    Ok(out)
}
