use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const METRICS_HEADER: &str = "step,split,loss,accuracy,lr,grad_norm";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

/// One line of the metrics file. Missing values are written as empty fields.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub split: Split,
    pub loss: f64,
    pub accuracy: Option<f64>,
    pub lr: f64,
    pub grad_norm: Option<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:?}")).unwrap_or_default()
}

impl MetricRow {
    /// Floats use the shortest representation that parses back exactly.
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{:?},{},{:?},{}",
            self.step,
            self.split.name(),
            self.loss,
            opt(self.accuracy),
            self.lr,
            opt(self.grad_norm)
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let bad = || Error::Format(format!("malformed metrics line {line:?}"));
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 6 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        let opt_num = |s: &str| if s.is_empty() { Ok(None) } else { num(s).map(Some) };
        Ok(MetricRow {
            step: f[0].parse().map_err(|_| bad())?,
            split: match f[1] {
                "train" => Split::Train,
                "eval" => Split::Eval,
                _ => return Err(bad()),
            },
            loss: num(f[2])?,
            accuracy: opt_num(f[3])?,
            lr: num(f[4])?,
            grad_norm: opt_num(f[5])?,
        })
    }
}

pub fn render_metrics(rows: &[MetricRow]) -> String {
    let mut out = String::with_capacity(64 * (rows.len() + 1));
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.to_csv());
    }
    out
}

pub fn parse_metrics(text: &str) -> Result<Vec<MetricRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Format("metrics file lacks the expected header".into()));
    }
    lines.filter(|l| !l.is_empty()).map(MetricRow::parse).collect()
}
