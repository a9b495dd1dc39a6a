//! Schema-tagged CSV tables. Every file starts with a
//! `#schema neurovol.<name> v<version>` line followed by a header row.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// A CSV table held as strings, with an empty cell meaning null.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: &'static str,
    pub header: Vec<&'static str>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(name: &'static str, header: &[&'static str]) -> Self {
        Table {
            name,
            header: header.to_vec(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(row.len(), self.header.len(), "row width for table {}", self.name);
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Result<usize> {
        self.header
            .iter()
            .position(|h| *h == name)
            .ok_or_else(|| Error::Format(format!("table {} has no column {name}", self.name)))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let mut buf = format!("#schema neurovol.{} v{SCHEMA_VERSION}\n", self.name).into_bytes();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            w.write_record(&self.header)?;
            for r in &self.rows {
                w.write_record(r)?;
            }
            w.flush().map_err(|e| Error::io(path, e))?;
        }
        fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    /// Reads a table written by [`Table::write`], checking the schema tag and
    /// header. A missing file is reported against `stage`.
    pub fn read(path: impl AsRef<Path>, name: &'static str, header: &[&'static str], stage: &str) -> Result<Table> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingStage {
                stage: stage.to_string(),
                path: path.to_path_buf(),
            });
        }
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let (first, rest) = text.split_once('\n').unwrap_or((&text, ""));
        let expected = format!("#schema neurovol.{name} v{SCHEMA_VERSION}");
        if first.trim_end() != expected {
            return Err(Error::Format(format!(
                "{}: schema `{}` does not match `{expected}`",
                path.display(),
                first.trim_end()
            )));
        }
        let mut r = csv::Reader::from_reader(rest.as_bytes());
        let got: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
        if got != header {
            return Err(Error::Format(format!("{}: unexpected columns {got:?}", path.display())));
        }
        let mut t = Table::new(name, header);
        for rec in r.records() {
            t.push(rec?.iter().map(str::to_string).collect());
        }
        Ok(t)
    }
}

/// Shortest round-trip decimal; non-finite values become null.
pub fn num(v: f64) -> String {
    if v.is_finite() {
        format!("{v}")
    } else {
        String::new()
    }
}

pub fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, num)
}

/// Parses a cell written by [`num`]/[`opt`].
pub fn parse_opt(s: &str) -> Result<Option<f64>> {
    if s.is_empty() {
        Ok(None)
    } else {
        s.parse()
            .map(Some)
            .map_err(|_| Error::Format(format!("not a number: `{s}`")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_schema_check() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.csv");
        let mut t = Table::new("demo", &["a", "b"]);
        t.push(vec!["x,y".into(), num(0.1)]);
        t.push(vec!["z".into(), opt(None)]);
        t.write(&p).unwrap();
        let back = Table::read(&p, "demo", &["a", "b"], "demo-stage").unwrap();
        assert_eq!(back, t);
        assert_eq!(parse_opt(&back.rows[0][1]).unwrap(), Some(0.1));
        assert_eq!(parse_opt(&back.rows[1][1]).unwrap(), None);

        assert!(matches!(Table::read(&p, "other", &["a", "b"], "s"), Err(Error::Format(_))));
        assert!(matches!(Table::read(&p, "demo", &["a"], "s"), Err(Error::Format(_))));
        let text = std::fs::read_to_string(&p).unwrap().replace(" v1", " v2");
        std::fs::write(&p, text).unwrap();
        assert!(matches!(Table::read(&p, "demo", &["a", "b"], "s"), Err(Error::Format(_))));
        match Table::read(dir.path().join("none.csv"), "demo", &["a"], "validate-seg") {
            Err(Error::MissingStage { stage, .. }) => assert_eq!(stage, "validate-seg"),
            other => panic!("{other:?}"),
        }
    }
}
