use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use super::{digest_key, ChatResponse};
use crate::error::LlmError;

/// One line of the cache file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub key: String,
    pub request_digest: String,
    pub text: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub created_at: String,
}

impl CacheEntry {
    pub fn new(key: String, request_digest: String, response: &ChatResponse) -> Self {
        CacheEntry {
            key,
            request_digest,
            text: response.text.clone(),
            prompt_tokens: response.prompt_tokens,
            completion_tokens: response.completion_tokens,
            created_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
        }
    }

    pub fn response(&self) -> ChatResponse {
        ChatResponse {
            text: self.text.clone(),
            prompt_tokens: self.prompt_tokens,
            completion_tokens: self.completion_tokens,
            latency_ms: 0,
            from_cache: true,
            retries: 0,
        }
    }
}

pub type CacheHandle = Arc<ResponseCache>;

/// Append-only JSONL response store with an in-memory index.
#[derive(Debug)]
pub struct ResponseCache {
    path: Option<PathBuf>,
    index: RwLock<HashMap<String, CacheEntry>>,
    writer: Mutex<Option<File>>,
    corrupt_lines: Vec<usize>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        ResponseCache {
            path: None,
            index: RwLock::new(HashMap::new()),
            writer: Mutex::new(None),
            corrupt_lines: Vec::new(),
        }
    }

    /// Opens (creating if needed) the cache file at `path`.
    ///
    /// Unreadable records are skipped and reported through
    /// [`corrupt_lines`](Self::corrupt_lines); a partial trailing record left
    /// by a crash is truncated away.
    pub fn open(path: &Path) -> Result<Self, LlmError> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        let mut index = HashMap::new();
        let mut corrupt_lines = Vec::new();
        if path.exists() {
            let bytes = fs::read(path)?;
            let complete_len = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
            if complete_len < bytes.len() {
                log::warn!("discarding partial trailing record in {}", path.display());
                OpenOptions::new().write(true).open(path)?.set_len(complete_len as u64)?;
            }
            for (i, line) in bytes[..complete_len].split(|&b| b == b'\n').enumerate() {
                if line.iter().all(u8::is_ascii_whitespace) {
                    continue;
                }
                match serde_json::from_slice::<CacheEntry>(line) {
                    Ok(entry) if digest_key(&entry.request_digest) == entry.key => {
                        index.insert(entry.key.clone(), entry);
                    }
                    _ => {
                        log::warn!("{}", LlmError::CacheCorrupt(i + 1));
                        corrupt_lines.push(i + 1);
                    }
                }
            }
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(ResponseCache {
            path: Some(path.to_path_buf()),
            index: RwLock::new(index),
            writer: Mutex::new(Some(file)),
            corrupt_lines,
        })
    }

    pub fn handle(self) -> CacheHandle {
        Arc::new(self)
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn get(&self, key: &str) -> Option<ChatResponse> {
        self.index.read().unwrap().get(key).map(CacheEntry::response)
    }

    pub fn insert(&self, entry: CacheEntry) -> Result<(), LlmError> {
        let mut writer = self.writer.lock().unwrap();
        if let Some(file) = writer.as_mut() {
            let mut line = serde_json::to_string(&entry).expect("cache entry serializes");
            line.push('\n');
            file.write_all(line.as_bytes())?;
            file.flush()?;
        }
        self.index.write().unwrap().insert(entry.key.clone(), entry);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.index.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// 1-based line numbers skipped while loading.
    pub fn corrupt_lines(&self) -> &[usize] {
        &self.corrupt_lines
    }
}
