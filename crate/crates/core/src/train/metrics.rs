//! JSON-lines metrics: one `fold` record per fold and a closing `aggregate`
//! record.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::train::fold::FoldResult;
use crate::train::stats::Aggregate;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum MetricsRecord {
    Fold(FoldResult),
    Aggregate(Aggregate),
}

pub fn write_metrics(out: &mut impl Write, folds: &[FoldResult], aggregate: &Aggregate) -> Result<()> {
    let io = |e: std::io::Error| Error::Serialization(e.to_string());
    for f in folds {
        let line = serde_json::to_string(&MetricsRecord::Fold(f.clone()))
            .map_err(|e| Error::Serialization(e.to_string()))?;
        writeln!(out, "{line}").map_err(io)?;
    }
    let line = serde_json::to_string(&MetricsRecord::Aggregate(aggregate.clone()))
        .map_err(|e| Error::Serialization(e.to_string()))?;
    writeln!(out, "{line}").map_err(io)
}

pub fn parse_metrics(text: &str) -> Result<Vec<MetricsRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::Format {
                path: "metrics".into(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}
