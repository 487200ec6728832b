//! CSV and JSON writers. Floats are printed in shortest round-trip form, so
//! identical runs give identical bytes.

use std::fs;
use std::path::Path;

use serde_json::{Map, Value};
use t1t2_core::trainer::{Metrics, PassCounters, Summary, TrajectoryRecord};
use t1t2_core::HyperParams;

use crate::config::fmt_f64;
use crate::error::{LabError, Result};

/// A table with a fixed header; every row must match its width.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new<S: Into<String>>(header: impl IntoIterator<Item = S>) -> Self {
        Self {
            header: header.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.header.len(), "row width differs from header");
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new());
        // writing to a Vec cannot fail
        w.write_record(&self.header).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 fields")
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_text(path, &self.to_csv())
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| LabError::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| LabError::io(path, e))
}

pub fn write_json(path: &Path, value: &Value) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| LabError::Format {
        path: path.into(),
        message: e.to_string(),
    })?;
    text.push('\n');
    write_text(path, &text)
}

pub fn num(v: f64) -> String {
    fmt_f64(v)
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

pub fn hyper_names(h: &HyperParams) -> Vec<String> {
    h.indices().into_iter().map(|ix| h.name(ix)).collect()
}

pub fn hypers_json(h: &HyperParams) -> Value {
    let mut m = Map::new();
    for ix in h.indices() {
        m.insert(h.name(ix), Value::from(h.get(ix)));
    }
    Value::Object(m)
}

fn metrics_json(m: &Metrics) -> Value {
    serde_json::json!({ "xent": m.xent, "error": m.error })
}

fn counters_json(c: &PassCounters) -> Value {
    serde_json::json!({ "forward": c.forward, "backward": c.backward, "tangent": c.tangent })
}

/// One row per record. Absent values (no hypergradient at this step, no
/// full evaluation) are empty cells.
pub fn trajectory_table(initial: &HyperParams, records: &[TrajectoryRecord]) -> Table {
    let names = hyper_names(initial);
    let mut header: Vec<String> = ["step", "epoch", "c1_batch", "c2_batch"].map(String::from).to_vec();
    header.extend(names.iter().cloned());
    header.extend(names.iter().map(|n| format!("g_{n}")));
    header.extend(names.iter().map(|n| format!("cos_{n}")));
    header.extend(
        [
            "t1_xent", "t1_error", "val_xent", "val_error", "test_xent", "test_error", "sec_elementary",
            "sec_hyper", "sec_eval",
        ]
        .map(String::from),
    );
    let mut t = Table::new(header);
    for r in records {
        let mut row = vec![r.step.to_string(), r.epoch.to_string(), num(r.c1_batch), num(r.c2_batch)];
        row.extend(r.hypers.indices().into_iter().map(|ix| num(r.hypers.get(ix))));
        match &r.hypergrad {
            Some(g) => {
                row.extend(g.values.indices().into_iter().map(|ix| num(g.values.get(ix))));
                let cos = g.cosines();
                // cosines are per layer; tied layouts leave them blank
                if cos.len() == names.len() {
                    row.extend(cos.into_iter().map(opt));
                } else {
                    row.extend(names.iter().map(|_| String::new()));
                }
            }
            None => row.extend(std::iter::repeat_n(String::new(), 2 * names.len())),
        }
        match &r.full {
            Some(f) => {
                for m in [f.t1, f.t2, f.test] {
                    row.push(num(m.xent));
                    row.push(num(m.error));
                }
            }
            None => row.extend(std::iter::repeat_n(String::new(), 6)),
        }
        row.extend([r.seconds.elementary, r.seconds.hyper, r.seconds.eval].map(num));
        t.push(row);
    }
    t
}

/// Summary object; `config` is the canonical config text.
pub fn summary_json(s: &Summary, config: &str) -> Value {
    serde_json::json!({
        "initial_hypers": hypers_json(&s.initial_hypers),
        "final_hypers": hypers_json(&s.final_hypers),
        "final_t1": metrics_json(&s.final_eval.t1),
        "final_val_error": s.final_eval.t2.error,
        "final_val_xent": s.final_eval.t2.xent,
        "final_test_error": s.final_eval.test.error,
        "final_test_xent": s.final_eval.test.xent,
        "hyper_update_count": s.hyper_update_count,
        "steps": s.steps,
        "pass_counters": counters_json(&s.pass_counters),
        "phase_seconds": {
            "elementary": s.seconds.elementary,
            "hyper": s.seconds.hyper,
            "eval": s.seconds.eval,
        },
        "wallclock_s": s.wallclock_s,
        "config": config,
    })
}
