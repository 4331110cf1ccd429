//! Append-only event log: one JSON object per line with fields in the order
//! `tick`, `seq`, `source`, `type`, `payload`. Payload objects have sorted
//! keys, so a log is byte-identical for identical runs.

use std::io::{self, BufRead, Write};

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EventRecord {
    pub tick: u64,
    pub seq: u64,
    pub source: String,
    #[serde(rename = "type")]
    pub kind: String,
    pub payload: Value,
}

impl EventRecord {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("records serialize")
    }
}

/// Assigns `seq` numbers, restarting at 0 on every new tick.
#[derive(Debug, Clone, Default)]
pub struct Recorder {
    tick: u64,
    next_seq: u64,
    pending: Vec<EventRecord>,
}

impl Recorder {
    pub fn new() -> Self {
        Recorder::default()
    }

    pub fn record(&mut self, tick: u64, source: &str, kind: &str, payload: Value) {
        assert!(tick >= self.tick, "log ticks must not go backwards");
        if tick != self.tick {
            self.tick = tick;
            self.next_seq = 0;
        }
        self.pending.push(EventRecord {
            tick,
            seq: self.next_seq,
            source: source.to_string(),
            kind: kind.to_string(),
            payload,
        });
        self.next_seq += 1;
    }

    /// Records a value whose serialized form carries its own `type` tag.
    pub fn record_tagged<T: Serialize>(&mut self, tick: u64, source: &str, value: &T) {
        let (kind, payload) = split_tag(serde_json::to_value(value).expect("events serialize"));
        self.record(tick, source, &kind, payload);
    }

    pub fn record_value<T: Serialize>(&mut self, tick: u64, source: &str, kind: &str, value: &T) {
        self.record(
            tick,
            source,
            kind,
            serde_json::to_value(value).expect("events serialize"),
        );
    }

    pub fn take(&mut self) -> Vec<EventRecord> {
        std::mem::take(&mut self.pending)
    }
}

/// Pulls the `type` field out of a tagged object.
pub fn split_tag(v: Value) -> (String, Value) {
    match v {
        Value::Object(mut m) => match m.remove("type") {
            Some(Value::String(t)) => (t, Value::Object(m)),
            Some(other) => {
                m.insert("type".into(), other);
                ("Untyped".into(), Value::Object(m))
            }
            None => ("Untyped".into(), Value::Object(m)),
        },
        Value::String(s) => (s, Value::Object(Map::new())),
        other => ("Untyped".into(), other),
    }
}

pub fn write_records(w: &mut impl Write, records: &[EventRecord]) -> io::Result<()> {
    for r in records {
        w.write_all(r.to_line().as_bytes())?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Raw lines of a log, without the trailing newline.
pub fn read_lines(r: impl BufRead) -> io::Result<Vec<String>> {
    r.lines().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn field_order_and_key_order_are_fixed() {
        let mut rec = Recorder::new();
        rec.record(
            0,
            "kernel",
            "Test",
            json!({"zeta": 1, "alpha": [2, {"b": 1, "a": 0}]}),
        );
        let line = rec.take()[0].to_line();
        assert_eq!(
            line,
            r#"{"tick":0,"seq":0,"source":"kernel","type":"Test","payload":{"alpha":[2,{"a":0,"b":1}],"zeta":1}}"#
        );
    }

    #[test]
    fn seq_restarts_each_tick() {
        let mut rec = Recorder::new();
        for t in [0, 0, 1, 1, 1, 4] {
            rec.record(t, "s", "T", Value::Null);
        }
        let seqs: Vec<_> = rec.take().iter().map(|r| (r.tick, r.seq)).collect();
        assert_eq!(seqs, vec![(0, 0), (0, 1), (1, 0), (1, 1), (1, 2), (4, 0)]);
    }

    #[test]
    fn tag_moves_to_record_type() {
        #[derive(Serialize)]
        #[serde(tag = "type")]
        enum E {
            Thing { x: u8 },
        }
        let mut rec = Recorder::new();
        rec.record_tagged(2, "a", &E::Thing { x: 3 });
        let r = &rec.take()[0];
        assert_eq!(r.kind, "Thing");
        assert_eq!(r.payload, json!({"x": 3}));
    }
}
