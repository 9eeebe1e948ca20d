//! On-disk layout:
//!
//! ```text
//! <dir>/base_state.json
//! <dir>/events/000000-<event id>.json
//! <dir>/events/000001-<event id>.json
//! ```
//!
//! Event files hold exactly the serialized event and are written once.
//! The base-state file is replaced atomically through a temp file.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::StateError;
use crate::events::{deserialize_event, serialize_event, Event};

pub const BASE_STATE_FILE: &str = "base_state.json";
pub const EVENTS_DIR: &str = "events";

#[derive(Debug, Clone)]
pub struct PersistenceDir {
    root: PathBuf,
}

impl PersistenceDir {
    pub fn create(root: impl Into<PathBuf>) -> Result<Self, StateError> {
        let root = root.into();
        fs::create_dir_all(root.join(EVENTS_DIR)).map_err(|e| persist_err(&root, e))?;
        Ok(PersistenceDir { root })
    }

    pub fn open(root: impl Into<PathBuf>) -> Self {
        PersistenceDir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn base_state_path(&self) -> PathBuf {
        self.root.join(BASE_STATE_FILE)
    }

    pub fn events_dir(&self) -> PathBuf {
        self.root.join(EVENTS_DIR)
    }

    pub fn event_file_name(index: usize, event: &Event) -> String {
        format!("{index:06}-{}.json", event.id)
    }

    pub fn write_event(&self, index: usize, event: &Event) -> Result<(), StateError> {
        let path = self.events_dir().join(Self::event_file_name(index, event));
        let mut file = fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(|e| persist_err(&path, e))?;
        file.write_all(serialize_event(event).as_bytes())
            .and_then(|_| file.sync_data())
            .map_err(|e| {
                let _ = fs::remove_file(&path);
                persist_err(&path, e)
            })
    }

    pub fn write_base_state(&self, json: &str) -> Result<(), StateError> {
        let path = self.base_state_path();
        let tmp = self.root.join(format!("{BASE_STATE_FILE}.tmp"));
        let result = (|| {
            let mut file = fs::File::create(&tmp)?;
            file.write_all(json.as_bytes())?;
            file.sync_data()?;
            fs::rename(&tmp, &path)
        })();
        result.map_err(|e| persist_err(&path, e))
    }

    pub fn read_base_state(&self) -> Result<String, StateError> {
        let path = self.base_state_path();
        fs::read_to_string(&path).map_err(|e| StateError::CorruptState(format!("{}: {e}", path.display())))
    }

    /// Loads every event file in filename order.
    pub fn read_events(&self) -> Result<Vec<Event>, StateError> {
        let dir = self.events_dir();
        let mut names: Vec<String> = match fs::read_dir(&dir) {
            Ok(entries) => entries
                .filter_map(|entry| entry.ok())
                .map(|entry| entry.file_name().to_string_lossy().into_owned())
                .filter(|name| name.ends_with(".json"))
                .collect(),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(StateError::CorruptState(format!("{}: {e}", dir.display()))),
        };
        names.sort();
        names
            .into_iter()
            .map(|name| {
                let path = dir.join(&name);
                let text = fs::read_to_string(&path).map_err(|e| StateError::CorruptEvent {
                    file: name.clone(),
                    reason: e.to_string(),
                })?;
                deserialize_event(&text).map_err(|e| StateError::CorruptEvent { file: name, reason: e.to_string() })
            })
            .collect()
    }
}

fn persist_err(path: &Path, e: std::io::Error) -> StateError {
    StateError::PersistenceFailure(format!("{}: {e}", path.display()))
}
