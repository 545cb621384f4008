use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{Catalog, CatalogStats, ItemRecord};
use crate::error::{Error, Result};

/// One JSONL line as written by the synthetic generator and accepted by ingestion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawEvent {
    pub user: String,
    pub item: String,
    pub timestamp: i64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub title: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub brand: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub price: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
}

impl RawEvent {
    pub fn write_jsonl<W: Write>(events: &[RawEvent], mut out: W) -> std::io::Result<()> {
        for e in events {
            serde_json::to_writer(&mut out, e)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Ingested interactions: per-user chronological item sequences over a deduplicated catalog.
#[derive(Debug, Clone, Default)]
pub struct Corpus {
    pub catalog: Catalog,
    /// `(user key, item indices)` in order of first appearance of the user.
    pub sequences: Vec<(String, Vec<usize>)>,
}

impl Corpus {
    pub fn n_interactions(&self) -> usize {
        self.sequences.iter().map(|(_, s)| s.len()).sum()
    }

    pub fn stats(&self) -> CatalogStats {
        CatalogStats::compute(self.sequences.len(), self.catalog.len(), self.n_interactions())
    }
}

pub fn ingest_jsonl(path: impl AsRef<Path>) -> Result<Corpus> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_reader(BufReader::new(file)).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

struct Event {
    item: usize,
    timestamp: f64,
    order: usize,
}

pub fn ingest_reader<R: BufRead>(reader: R) -> Result<Corpus> {
    let mut catalog = Catalog::new();
    let mut users: Vec<(String, Vec<Event>)> = Vec::new();
    let mut user_index: HashMap<String, usize> = HashMap::new();

    for (n, line) in reader.lines().enumerate() {
        let line_no = n + 1;
        let line = line.map_err(|e| Error::io("<reader>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value = serde_json::from_str(&line).map_err(|e| Error::MalformedLine {
            line: line_no,
            message: e.to_string(),
        })?;
        let obj = value.as_object().ok_or_else(|| Error::MalformedLine {
            line: line_no,
            message: "expected a json object".into(),
        })?;

        let user = key_field(obj, "user", line_no)?;
        let item = key_field(obj, "item", line_no)?;
        let timestamp = match obj.get("timestamp") {
            None | Some(Value::Null) => {
                return Err(Error::MissingField {
                    line: line_no,
                    field: "timestamp",
                })
            }
            Some(v) => number(v).ok_or_else(|| Error::MalformedLine {
                line: line_no,
                message: format!("timestamp is not a number: {v}"),
            })?,
        };

        let record = ItemRecord {
            item_id: item,
            title: text_field(obj, "title"),
            brand: text_field(obj, "brand"),
            price: obj.get("price").and_then(price),
            category: text_field(obj, "category"),
        };
        let item_idx = catalog.upsert(record);

        let slot = *user_index.entry(user.clone()).or_insert_with(|| {
            users.push((user, Vec::new()));
            users.len() - 1
        });
        let events = &mut users[slot].1;
        let order = events.len();
        events.push(Event {
            item: item_idx,
            timestamp,
            order,
        });
    }

    let sequences = users
        .into_iter()
        .map(|(user, mut events)| {
            events.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp).then(a.order.cmp(&b.order)));
            (user, events.into_iter().map(|e| e.item).collect())
        })
        .collect();
    Ok(Corpus { catalog, sequences })
}

fn key_field(obj: &serde_json::Map<String, Value>, field: &'static str, line: usize) -> Result<String> {
    match obj.get(field) {
        None | Some(Value::Null) => Err(Error::MissingField { line, field }),
        Some(Value::String(s)) => Ok(s.clone()),
        Some(Value::Number(n)) => Ok(n.to_string()),
        Some(other) => Err(Error::MalformedLine {
            line,
            message: format!("field `{field}` must be a string or number, got {other}"),
        }),
    }
}

fn text_field(obj: &serde_json::Map<String, Value>, field: &str) -> Option<String> {
    match obj.get(field)? {
        Value::String(s) if !s.trim().is_empty() => Some(s.clone()),
        Value::Array(parts) => {
            // category paths are commonly lists of strings
            let joined: Vec<&str> = parts.iter().filter_map(Value::as_str).collect();
            (!joined.is_empty()).then(|| joined.join(" "))
        }
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn number(v: &Value) -> Option<f64> {
    match v {
        Value::Number(n) => n.as_f64(),
        Value::String(s) => s.trim().parse().ok(),
        _ => None,
    }
}

fn price(v: &Value) -> Option<f64> {
    match v {
        Value::String(s) => s.trim().trim_start_matches('$').replace(',', "").parse().ok(),
        other => number(other),
    }
    .filter(|p: &f64| p.is_finite())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ingest(text: &str) -> Result<Corpus> {
        ingest_reader(text.as_bytes())
    }

    #[test]
    fn sorts_each_user_by_timestamp() {
        let corpus = ingest(
            r#"{"user":"u","item":"c","timestamp":30}
{"user":"u","item":"a","timestamp":10}
{"user":"u","item":"b","timestamp":20}"#,
        )
        .unwrap();
        assert_eq!(corpus.sequences.len(), 1);
        let keys: Vec<&str> = corpus.sequences[0]
            .1
            .iter()
            .map(|&i| corpus.catalog.get(i).item_id.as_str())
            .collect();
        assert_eq!(keys, ["a", "b", "c"]);
    }

    #[test]
    fn timestamp_ties_keep_input_order() {
        let corpus = ingest(
            r#"{"user":"u","item":"x","timestamp":5}
{"user":"u","item":"y","timestamp":5}
{"user":"u","item":"w","timestamp":1}"#,
        )
        .unwrap();
        let keys: Vec<&str> = corpus.sequences[0]
            .1
            .iter()
            .map(|&i| corpus.catalog.get(i).item_id.as_str())
            .collect();
        assert_eq!(keys, ["w", "x", "y"]);
    }

    #[test]
    fn duplicate_events_are_both_kept() {
        let corpus = ingest(
            r#"{"user":"u","item":"a","timestamp":1}
{"user":"u","item":"a","timestamp":1}"#,
        )
        .unwrap();
        assert_eq!(corpus.sequences[0].1, vec![0, 0]);
        let stats = corpus.stats();
        assert_eq!(stats.n_interactions, 2);
        assert_eq!(stats.n_items, 1);
        assert_eq!(stats.items_per_user, 2.0);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = ingest("{\"user\":\"u\",\"item\":\"a\",\"timestamp\":1}\n{not json").unwrap_err();
        assert!(matches!(err, Error::MalformedLine { line: 2, .. }), "{err}");
    }

    #[test]
    fn missing_field_is_named() {
        let err = ingest(r#"{"user":"u","timestamp":1}"#).unwrap_err();
        assert!(matches!(err, Error::MissingField { line: 1, field: "item" }), "{err}");
        let err = ingest(r#"{"user":"u","item":"a"}"#).unwrap_err();
        assert!(err.to_string().contains("timestamp"));
    }

    #[test]
    fn metadata_is_parsed() {
        let corpus = ingest(
            r#"{"user":1,"item":"a","timestamp":1,"title":"Blue Stapler","price":"$1,234.50","category":["Office","Staplers"]}"#,
        )
        .unwrap();
        let rec = corpus.catalog.get(0);
        assert_eq!(rec.title.as_deref(), Some("Blue Stapler"));
        assert_eq!(rec.price, Some(1234.5));
        assert_eq!(rec.category.as_deref(), Some("Office Staplers"));
        assert_eq!(rec.brand, None);
        assert_eq!(corpus.sequences[0].0, "1");
    }
}
