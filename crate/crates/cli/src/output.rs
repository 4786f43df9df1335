//! Aligned text tables, or one JSON object per line with `--json`.

use serde_json::{Map, Value};

pub struct Table {
    kind: String,
    headers: Vec<String>,
    rows: Vec<Vec<Value>>,
}

impl Table {
    pub fn new(kind: &str, headers: &[&str]) -> Self {
        Self {
            kind: kind.to_string(),
            headers: headers.iter().map(|h| h.to_string()).collect(),
            rows: Vec::new(),
        }
    }

    pub fn row(&mut self, cells: Vec<Value>) {
        debug_assert_eq!(cells.len(), self.headers.len());
        self.rows.push(cells);
    }
}

fn cell(v: &Value) -> String {
    match v {
        Value::Number(n) if n.is_f64() => format!("{:.4}", n.as_f64().unwrap_or(f64::NAN)),
        Value::String(s) => s.clone(),
        Value::Null => "-".to_string(),
        other => other.to_string(),
    }
}

pub struct Out {
    json: bool,
}

impl Out {
    pub fn new(json: bool) -> Self {
        Self { json }
    }

    pub fn table(&self, t: &Table) {
        if self.json {
            for row in &t.rows {
                let mut obj = Map::new();
                obj.insert("kind".into(), Value::String(t.kind.clone()));
                for (h, v) in t.headers.iter().zip(row) {
                    obj.insert(h.clone(), v.clone());
                }
                println!("{}", Value::Object(obj));
            }
            return;
        }
        let text: Vec<Vec<String>> = t.rows.iter().map(|r| r.iter().map(cell).collect()).collect();
        let widths: Vec<usize> = (0..t.headers.len())
            .map(|c| text.iter().map(|r| r[c].len()).chain([t.headers[c].len()]).max().unwrap_or(0))
            .collect();
        let line = |cells: &[String]| {
            cells
                .iter()
                .zip(&widths)
                .map(|(c, w)| format!("{c:>w$}"))
                .collect::<Vec<_>>()
                .join("  ")
        };
        println!("{}", line(&t.headers));
        for r in &text {
            println!("{}", line(r));
        }
    }

    /// A single named record: `key: value` lines, or one JSON object.
    pub fn record(&self, kind: &str, value: Value) {
        if self.json {
            let mut obj = Map::new();
            obj.insert("kind".into(), Value::String(kind.to_string()));
            if let Value::Object(fields) = value {
                obj.extend(fields);
            }
            println!("{}", Value::Object(obj));
            return;
        }
        if let Value::Object(fields) = value {
            for (k, v) in fields {
                println!("{kind}.{k}: {}", cell(&v));
            }
        }
    }
}
