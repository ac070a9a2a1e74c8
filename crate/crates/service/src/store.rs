use std::collections::HashMap;
use std::fs::{self, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex as StdMutex, RwLock};
use std::time::{Duration, Instant};

use empathy_core::decoder::DecodingConfig;
use serde::{Deserialize, Serialize};
use tokio::sync::Mutex;

use crate::error::ServiceError;
use crate::session::{ChatSession, ChatTurn, DecodingOverrides};

pub type SessionHandle = Arc<Mutex<ChatSession>>;

struct Entry {
    session: SessionHandle,
    last_active: StdMutex<Instant>,
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
enum Record {
    Session {
        id: String,
        decoding: DecodingConfig,
        created_at: u64,
    },
    Turn(ChatTurn),
}

/// In-memory sessions, each behind its own lock, with optional append-only
/// JSON-lines files (one per session) that survive restarts.
pub struct SessionStore {
    sessions: RwLock<HashMap<String, Entry>>,
    defaults: DecodingConfig,
    persist_dir: Option<PathBuf>,
    ttl: Option<Duration>,
}

fn storage<E: std::fmt::Display>(path: &Path) -> impl FnOnce(E) -> ServiceError + '_ {
    move |e| ServiceError::Storage(format!("{}: {e}", path.display()))
}

impl SessionStore {
    pub fn in_memory(defaults: DecodingConfig) -> Self {
        SessionStore {
            sessions: RwLock::new(HashMap::new()),
            defaults,
            persist_dir: None,
            ttl: None,
        }
    }

    /// Store backed by `dir`; sessions already on disk are restored.
    pub fn persistent(defaults: DecodingConfig, dir: impl Into<PathBuf>) -> Result<Self, ServiceError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(storage(&dir))?;
        let mut sessions = HashMap::new();
        for entry in fs::read_dir(&dir).map_err(storage(&dir))? {
            let path = entry.map_err(storage(&dir))?.path();
            if path.extension().is_some_and(|e| e == "jsonl") {
                let session = read_session(&path)?;
                sessions.insert(
                    session.id.clone(),
                    Entry {
                        session: Arc::new(Mutex::new(session)),
                        last_active: StdMutex::new(Instant::now()),
                    },
                );
            }
        }
        Ok(SessionStore {
            sessions: RwLock::new(sessions),
            defaults,
            persist_dir: Some(dir),
            ttl: None,
        })
    }

    /// Sessions idle for longer than `ttl` are dropped on next access.
    pub fn with_ttl(mut self, ttl: Duration) -> Self {
        self.ttl = Some(ttl);
        self
    }

    pub fn defaults(&self) -> &DecodingConfig {
        &self.defaults
    }

    pub fn len(&self) -> usize {
        self.sessions.read().expect("session map poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn create(&self, overrides: &DecodingOverrides) -> Result<ChatSession, ServiceError> {
        let decoding = overrides.apply(&self.defaults)?;
        let session = ChatSession::new(uuid::Uuid::new_v4().to_string(), decoding);
        if let Some(path) = self.file_for(&session.id) {
            let record = Record::Session {
                id: session.id.clone(),
                decoding: session.decoding.clone(),
                created_at: session.created_at,
            };
            append_records(&path, std::iter::once(&record))?;
        }
        let mut map = self.sessions.write().expect("session map poisoned");
        map.insert(
            session.id.clone(),
            Entry {
                session: Arc::new(Mutex::new(session.clone())),
                last_active: StdMutex::new(Instant::now()),
            },
        );
        Ok(session)
    }

    pub fn get(&self, id: &str) -> Result<SessionHandle, ServiceError> {
        {
            let map = self.sessions.read().expect("session map poisoned");
            let entry = map.get(id).ok_or_else(|| ServiceError::NotFound(id.to_string()))?;
            let mut last = entry.last_active.lock().expect("activity clock poisoned");
            if !self.ttl.is_some_and(|ttl| last.elapsed() > ttl) {
                *last = Instant::now();
                return Ok(entry.session.clone());
            }
        }
        self.delete(id)?;
        Err(ServiceError::NotFound(id.to_string()))
    }

    pub fn delete(&self, id: &str) -> Result<(), ServiceError> {
        let removed = self.sessions.write().expect("session map poisoned").remove(id);
        if removed.is_none() {
            return Err(ServiceError::NotFound(id.to_string()));
        }
        if let Some(path) = self.file_for(id) {
            if path.exists() {
                fs::remove_file(&path).map_err(storage(&path))?;
            }
        }
        Ok(())
    }

    /// Persists turns from index `from` onward.
    pub fn record_turns(&self, session: &ChatSession, from: usize) -> Result<(), ServiceError> {
        if let Some(path) = self.file_for(&session.id) {
            let records: Vec<Record> = session.turns[from..].iter().cloned().map(Record::Turn).collect();
            append_records(&path, records.iter())?;
        }
        Ok(())
    }

    fn file_for(&self, id: &str) -> Option<PathBuf> {
        self.persist_dir.as_ref().map(|d| d.join(format!("{id}.jsonl")))
    }
}

fn append_records<'a>(path: &Path, records: impl Iterator<Item = &'a Record>) -> Result<(), ServiceError> {
    let mut buf = Vec::new();
    for record in records {
        serde_json::to_writer(&mut buf, record).map_err(storage(path))?;
        buf.push(b'\n');
    }
    let mut file = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(storage(path))?;
    file.write_all(&buf).map_err(storage(path))
}

fn read_session(path: &Path) -> Result<ChatSession, ServiceError> {
    let file = fs::File::open(path).map_err(storage(path))?;
    let mut session: Option<ChatSession> = None;
    for line in BufReader::new(file).lines() {
        let line = line.map_err(storage(path))?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<Record>(&line).map_err(storage(path))? {
            Record::Session {
                id,
                decoding,
                created_at,
            } => {
                let mut s = ChatSession::new(id, decoding);
                s.created_at = created_at;
                session = Some(s);
            }
            Record::Turn(turn) => session
                .as_mut()
                .ok_or_else(|| ServiceError::Storage(format!("{}: turn before session header", path.display())))?
                .turns
                .push(turn),
        }
    }
    session.ok_or_else(|| ServiceError::Storage(format!("{}: empty session file", path.display())))
}
