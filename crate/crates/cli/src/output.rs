//! Trajectory tables (CSV) and JSON artifacts.

use std::path::Path;

use serde::Serialize;

use sddej::frame_bundle::BundlePath;
use sddej::solver::SolutionPath;

use crate::error::CliError;

/// A numeric table with a header row. Floats are written in the shortest
/// decimal form that parses back to the same value, so a table survives a
/// parse/write round trip byte for byte.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

fn frame_columns(n: usize) -> impl Iterator<Item = String> {
    (1..=n).flat_map(move |a| {
        (1..=n).map(move |i| if n < 10 { format!("e_{a}{i}") } else { format!("e_{a}_{i}") })
    })
}

fn header(n: usize, frames: bool) -> Vec<String> {
    let mut cols = vec!["t".to_string()];
    cols.extend((1..=n).map(|i| format!("x_{i}")));
    if frames {
        cols.extend(frame_columns(n));
    }
    cols
}

fn row(t: f64, x: &[f64], frame: Option<&nalgebra::DMatrix<f64>>) -> Vec<f64> {
    let mut r = Vec::with_capacity(1 + x.len() * (x.len() + 1));
    r.push(t);
    r.extend_from_slice(x);
    if let Some(e) = frame {
        let n = x.len();
        for a in 0..n {
            for i in 0..n {
                r.push(e[(a, i)]);
            }
        }
    }
    r
}

impl Trajectory {
    /// One row per grid node; a jump node contributes its left limit first.
    pub fn from_solution(sol: &SolutionPath, frames: bool) -> Self {
        let n = sol.nodes()[0].x.len();
        let rows = sol
            .rows()
            .map(|(t, s)| row(t, s.x.as_slice(), frames.then_some(&s.frame)))
            .collect();
        Self {
            columns: header(n, frames),
            rows,
        }
    }

    pub fn from_bundle(bundle: &BundlePath) -> Self {
        let n = bundle.nodes()[0].base.dim();
        let mut rows = Vec::with_capacity(bundle.nodes().len());
        for (i, (&t, p)) in bundle.times().iter().zip(bundle.nodes()).enumerate() {
            if let Some(l) = bundle.left(i) {
                rows.push(row(t, l.base.coords.as_slice(), Some(&l.frame)));
            }
            rows.push(row(t, p.base.coords.as_slice(), Some(&p.frame)));
        }
        Self {
            columns: header(n, true),
            rows,
        }
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.columns).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r.iter().map(|v| v.to_string())).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory flush")).expect("ascii output")
    }

    pub fn parse(text: &str) -> Result<Self, CliError> {
        let bad = |msg: String| CliError::Config(format!("malformed table: {msg}"));
        let mut reader = csv::Reader::from_reader(text.as_bytes());
        let columns: Vec<String> = reader
            .headers()
            .map_err(|e| bad(e.to_string()))?
            .iter()
            .map(str::to_string)
            .collect();
        let mut rows = Vec::new();
        for record in reader.records() {
            let record = record.map_err(|e| bad(e.to_string()))?;
            let values = record
                .iter()
                .map(|s| s.trim().parse::<f64>().map_err(|e| bad(format!("{s:?}: {e}"))))
                .collect::<Result<Vec<_>, _>>()?;
            rows.push(values);
        }
        Ok(Self { columns, rows })
    }
}

/// The càdlàg structure behind a trajectory file: jump times, marks and the
/// fill curves, enough to rebuild the path with its fills.
#[derive(Debug, Serialize)]
pub struct PathSidecar {
    pub manifold: String,
    pub dim: usize,
    pub delay: f64,
    pub step: f64,
    pub horizon: f64,
    pub columns: Vec<String>,
    pub jump_times: Vec<f64>,
    pub marks: Vec<Vec<f64>>,
    pub fills: Vec<Vec<Vec<f64>>>,
}

impl PathSidecar {
    pub fn new(manifold: &str, sol: &SolutionPath, columns: &[String]) -> Self {
        let path = sol.path();
        Self {
            manifold: manifold.to_string(),
            dim: path.dim(),
            delay: sol.delay(),
            step: sol.step(),
            horizon: path.end_time(),
            columns: columns.to_vec(),
            jump_times: path.jump_times().to_vec(),
            marks: sol.driver().schedule().marks().to_vec(),
            fills: path
                .fills()
                .iter()
                .map(|f| f.curve.points().iter().map(|p| p.iter().copied().collect()).collect())
                .collect(),
        }
    }
}

pub fn write_text(dir: &Path, name: &str, text: &str) -> Result<(), CliError> {
    let path = dir.join(name);
    std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))
}

pub fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable report");
    text.push('\n');
    write_text(dir, name, &text)
}
