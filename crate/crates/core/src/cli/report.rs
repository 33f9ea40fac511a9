//! Output writers: CSV tables and the JSON check report.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize, Serializer};

use crate::error::{Error, Result};

/// Report schema identifier.
pub const REPORT_VERSION: &str = "forgetlab.report/1";

#[derive(Clone, Debug, PartialEq)]
pub enum Cell {
    Num(f64),
    Text(String),
}

impl From<f64> for Cell {
    fn from(x: f64) -> Self {
        Cell::Num(x)
    }
}

impl From<&str> for Cell {
    fn from(s: &str) -> Self {
        Cell::Text(s.to_string())
    }
}

impl From<String> for Cell {
    fn from(s: String) -> Self {
        Cell::Text(s)
    }
}

/// A table with a fixed column order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new<S: Into<String>>(columns: impl IntoIterator<Item = S>) -> Self {
        Table {
            columns: columns.into_iter().map(Into::into).collect(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.columns.join(",");
        out.push('\n');
        for row in &self.rows {
            let cells: Vec<String> = row.iter().map(format_cell).collect();
            out.push_str(&cells.join(","));
            out.push('\n');
        }
        out
    }
}

/// Doubles are written with 17 significant digits so they round-trip.
pub fn format_f64(x: f64) -> String {
    if x.is_nan() {
        "NaN".into()
    } else if x.is_infinite() {
        if x > 0.0 {
            "inf".into()
        } else {
            "-inf".into()
        }
    } else {
        let mut s = String::new();
        write!(s, "{x:.16e}").expect("write to string");
        s
    }
}

fn format_cell(c: &Cell) -> String {
    match c {
        Cell::Num(x) => format_f64(*x),
        Cell::Text(t) => {
            if t.contains([',', '"', '\n']) {
                format!("\"{}\"", t.replace('"', "\"\""))
            } else {
                t.clone()
            }
        }
    }
}

/// Non-finite doubles become JSON `null`.
pub fn finite_or_null<S: Serializer>(x: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if x.is_finite() {
        s.serialize_f64(*x)
    } else {
        s.serialize_none()
    }
}

fn null_as_nan<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::NAN))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Pass,
    Fail,
    /// The check could not be evaluated.
    Error,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub name: String,
    pub paper_ref: String,
    pub status: Status,
    #[serde(serialize_with = "finite_or_null", deserialize_with = "null_as_nan")]
    pub measured: f64,
    #[serde(serialize_with = "finite_or_null", deserialize_with = "null_as_nan")]
    pub tolerance: f64,
    pub runtime_ms: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub version: String,
    pub seed: u64,
    pub checks: Vec<CheckRecord>,
}

impl CheckReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.status == Status::Pass)
    }

    pub fn failures(&self) -> Vec<&CheckRecord> {
        self.checks.iter().filter(|c| c.status != Status::Pass).collect()
    }

    pub fn to_table(&self) -> Table {
        let mut t = Table::new(["name", "paper_ref", "status", "measured", "tolerance"]);
        for c in &self.checks {
            let status = match c.status {
                Status::Pass => "pass",
                Status::Fail => "fail",
                Status::Error => "error",
            };
            t.push(vec![
                c.name.as_str().into(),
                c.paper_ref.as_str().into(),
                status.into(),
                c.measured.into(),
                c.tolerance.into(),
            ]);
        }
        t
    }
}

pub fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

pub fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

pub fn to_json<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Io(format!("json encoding: {e}")))?;
    s.push('\n');
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn doubles_round_trip() {
        for x in [0.1, 1.0 / 3.0, -2.5e-300, 6.02214076e23, 0.0] {
            let s = format_f64(x);
            assert_eq!(s.parse::<f64>().unwrap(), x, "{s}");
            assert!(!s.contains(','));
        }
        assert_eq!(format_f64(f64::NAN), "NaN");
    }

    #[test]
    fn text_cells_are_quoted() {
        let mut t = Table::new(["a", "b"]);
        t.push(vec!["x,y".into(), 1.5.into()]);
        assert_eq!(t.to_csv(), "a,b\n\"x,y\",1.5000000000000000e0\n");
    }

    #[test]
    fn report_serializes_non_finite_as_null() {
        let r = CheckReport {
            version: REPORT_VERSION.into(),
            seed: 1,
            checks: vec![CheckRecord {
                name: "n".into(),
                paper_ref: "p".into(),
                status: Status::Error,
                measured: f64::NAN,
                tolerance: 1.0,
                runtime_ms: 0,
            }],
        };
        let s = to_json(&r).unwrap();
        assert!(s.contains("\"measured\": null"));
        let back: CheckReport = serde_json::from_str(&s).unwrap();
        assert!(back.checks[0].measured.is_nan());
    }
}
