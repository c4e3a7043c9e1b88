//! Ordered event log. One JSON object per line with the fields `tick`,
//! `component`, `event` and a flat `details` object.

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

pub type Tick = u64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub tick: Tick,
    pub component: String,
    pub event: String,
    pub details: Map<String, Value>,
}

impl EventRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("event records always serialize")
    }

    pub fn detail_str(&self, key: &str) -> Option<&str> {
        self.details.get(key).and_then(Value::as_str)
    }

    pub fn detail_i64(&self, key: &str) -> Option<i64> {
        self.details.get(key).and_then(Value::as_i64)
    }
}

#[derive(Debug, Default, Clone)]
pub struct EventLog {
    records: Vec<EventRecord>,
    flushed: usize,
}

impl EventLog {
    pub fn new() -> Self {
        Self::default()
    }

    /// `details` must be a JSON object; anything else is stored under `value`.
    pub fn push(&mut self, tick: Tick, component: &str, event: &str, details: Value) {
        let details = match details {
            Value::Object(map) => map,
            Value::Null => Map::new(),
            other => {
                let mut map = Map::new();
                map.insert("value".into(), other);
                map
            }
        };
        self.records.push(EventRecord {
            tick,
            component: component.to_owned(),
            event: event.to_owned(),
            details,
        });
    }

    pub fn records(&self) -> &[EventRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&r.to_line());
            out.push('\n');
        }
        out
    }

    /// Writes records not yet written to `sink` and flushes it.
    pub fn flush_to(&mut self, sink: &mut dyn Write) -> io::Result<()> {
        for r in &self.records[self.flushed..] {
            writeln!(sink, "{}", r.to_line())?;
        }
        self.flushed = self.records.len();
        sink.flush()
    }
}
