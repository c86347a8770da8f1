//! JSON-lines event log shared by the long-running components.

use std::io::Write;
use std::sync::{Arc, Mutex};

use serde_json::{Map, Value};

/// Cloneable sink writing one JSON object per line.
#[derive(Clone)]
pub struct EventLog {
    inner: Arc<Mutex<Box<dyn Write + Send>>>,
}

impl std::fmt::Debug for EventLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("EventLog")
    }
}

impl EventLog {
    pub fn new(writer: impl Write + Send + 'static) -> Self {
        Self {
            inner: Arc::new(Mutex::new(Box::new(writer))),
        }
    }

    pub fn stderr() -> Self {
        Self::new(std::io::stderr())
    }

    pub fn null() -> Self {
        Self::new(std::io::sink())
    }

    /// In-memory log; the returned buffer sees every record.
    pub fn memory() -> (Self, MemoryLog) {
        let buf = MemoryLog::default();
        (Self::new(buf.clone()), buf)
    }

    /// Writes `{"ts": .., "level": .., "event": .., ...fields}`.
    pub fn emit(&self, level: &str, event: &str, fields: Value) {
        let mut record = Map::new();
        record.insert("ts".into(), Value::String(chrono::Utc::now().to_rfc3339()));
        record.insert("level".into(), Value::String(level.into()));
        record.insert("event".into(), Value::String(event.into()));
        if let Value::Object(extra) = fields {
            record.extend(extra);
        }
        let mut line = Value::Object(record).to_string();
        line.push('\n');
        if let Ok(mut w) = self.inner.lock() {
            let _ = w.write_all(line.as_bytes());
            let _ = w.flush();
        }
    }

    pub fn info(&self, event: &str, fields: Value) {
        self.emit("info", event, fields);
    }

    pub fn warn(&self, event: &str, fields: Value) {
        self.emit("warn", event, fields);
    }

    pub fn error(&self, event: &str, fields: Value) {
        self.emit("error", event, fields);
    }
}

/// Shared byte buffer backing [`EventLog::memory`].
#[derive(Clone, Default)]
pub struct MemoryLog(Arc<Mutex<Vec<u8>>>);

impl MemoryLog {
    pub fn records(&self) -> Vec<Value> {
        let bytes = self.0.lock().map(|b| b.clone()).unwrap_or_default();
        String::from_utf8_lossy(&bytes)
            .lines()
            .filter_map(|l| serde_json::from_str(l).ok())
            .collect()
    }

    /// Records whose `event` field equals `event`.
    pub fn events(&self, event: &str) -> Vec<Value> {
        self.records()
            .into_iter()
            .filter(|r| r["event"] == event)
            .collect()
    }
}

impl Write for MemoryLog {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        self.0
            .lock()
            .map_err(|_| std::io::Error::other("poisoned log buffer"))?
            .extend_from_slice(buf);
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn records_are_json_lines() {
        let (log, mem) = EventLog::memory();
        log.info("bank_loaded", json!({"maskers": 3}));
        log.warn("dropped_window", json!({"index": 1}));
        let recs = mem.records();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[0]["maskers"], 3);
        assert_eq!(recs[1]["level"], "warn");
        assert_eq!(mem.events("dropped_window").len(), 1);
    }
}
