//! CSV outputs. Each file opens with a `# schema: <name>/v<version>` line
//! naming the column layout, followed by a header row.

use std::io::Write;
use std::path::Path;

use crate::error::{Result, SimError};
use crate::formats::write_atomic;

pub const SCHEMA_VERSION: u32 = 1;

/// Column layout of one CSV product.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Schema {
    pub name: &'static str,
    pub columns: &'static [&'static str],
}

pub const TRAINING_LOG: Schema = Schema {
    name: "training-log",
    columns: &["epoch", "iteration", "lr", "train_loss", "validation", "wall_seconds"],
};

pub const SWEEP: Schema = Schema {
    name: "sweep",
    columns: &["axis", "value", "method", "mean", "std_error", "n"],
};

pub const SAMPLES: Schema = Schema {
    name: "samples",
    columns: &["method", "realization", "utility"],
};

pub const CDF: Schema = Schema {
    name: "cdf",
    columns: &["method", "rank", "min_rate", "cdf"],
};

pub const IRS_RESPONSE: Schema = Schema {
    name: "irs-response",
    columns: &["azimuth", "elevation", "response"],
};

pub const BS_RESPONSE: Schema = Schema {
    name: "bs-response",
    columns: &["azimuth", "response"],
};

pub const TRACES: Schema = Schema {
    name: "bcd-trace",
    columns: &["realization", "iteration", "sum_rate"],
};

impl Schema {
    pub fn tag(&self) -> String {
        format!("# schema: {}/v{}", self.name, SCHEMA_VERSION)
    }
}

/// Accumulates rows in memory and writes the file in one atomic step.
#[derive(Debug)]
pub struct Table {
    schema: Schema,
    rows: Vec<Vec<String>>,
}

/// Shortest decimal form that parses back to the same `f64`.
pub fn num(x: f64) -> String {
    format!("{x:?}")
}

impl Table {
    pub fn new(schema: Schema) -> Self {
        Table {
            schema,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<String>) {
        assert_eq!(
            row.len(),
            self.schema.columns.len(),
            "row width for {}",
            self.schema.name
        );
        self.rows.push(row);
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        writeln!(out, "{}", self.schema.tag()).expect("write to memory");
        {
            let mut w = csv::Writer::from_writer(&mut out);
            w.write_record(self.schema.columns)?;
            for row in &self.rows {
                w.write_record(row)?;
            }
            w.flush().map_err(|e| SimError::io("<memory>", e))?;
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        write_atomic(path, |w| w.write_all(&bytes))
    }
}

/// Read a file written by [`Table::save`], checking its schema line and header.
pub fn read_table(path: &Path, schema: Schema) -> Result<Vec<Vec<String>>> {
    let text = std::fs::read_to_string(path).map_err(|e| SimError::io(path, e))?;
    let (first, rest) = text.split_once('\n').unwrap_or((&text, ""));
    if first != schema.tag() {
        return Err(SimError::format(
            path,
            format!("expected '{}', found '{first}'", schema.tag()),
        ));
    }
    let mut r = csv::Reader::from_reader(rest.as_bytes());
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != schema.columns {
        return Err(SimError::format(path, "unexpected column header"));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec?.iter().map(str::to_string).collect());
    }
    Ok(rows)
}
