//! CSV tables with a JSON metadata line.
//!
//! Every file starts with one `# {json}` comment line echoing the
//! configuration that produced it, followed by a header row and numeric
//! rows. Floats are written in shortest round-trip form, so re-running a
//! pinned configuration reproduces files byte for byte.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};
use crate::flows::{Provenance, SampleSet};

#[derive(Clone, Debug, PartialEq)]
pub struct Table {
    pub metadata: Value,
    pub headers: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(metadata: Value, headers: Vec<String>) -> Self {
        Table {
            metadata,
            headers,
            rows: Vec::new(),
        }
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.headers.iter().position(|h| h == name)
    }

    pub fn write<W: Write>(&self, out: W) -> Result<()> {
        let mut out = BufWriter::new(out);
        writeln!(out, "# {}", serde_json::to_string(&self.metadata)?)?;
        let mut w = csv::Writer::from_writer(out);
        w.write_record(&self.headers).map_err(csv_error)?;
        for (i, row) in self.rows.iter().enumerate() {
            if row.len() != self.headers.len() {
                return Err(Error::InvalidArgument(format!(
                    "row {i} has {} fields, header has {}",
                    row.len(),
                    self.headers.len()
                )));
            }
            w.write_record(row.iter().map(f64::to_string)).map_err(csv_error)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read<R: Read>(input: R) -> Result<Self> {
        let mut input = BufReader::new(input);
        let mut first = String::new();
        input.read_line(&mut first)?;
        let metadata = match first.trim_end().strip_prefix('#') {
            Some(json) => serde_json::from_str(json.trim())?,
            None => return Err(Error::InvalidArgument("table is missing its `# {...}` metadata line".into())),
        };
        let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(input);
        let headers = r.headers().map_err(csv_error)?.iter().map(str::to_owned).collect();
        let mut rows = Vec::new();
        for (i, rec) in r.records().enumerate() {
            let rec = rec.map_err(csv_error)?;
            let row = rec
                .iter()
                .map(|f| {
                    f.trim().parse::<f64>().map_err(|_| {
                        Error::InvalidArgument(format!("row {}: `{f}` is not a number", i + 1))
                    })
                })
                .collect::<Result<Vec<f64>>>()?;
            rows.push(row);
        }
        Ok(Table {
            metadata,
            headers,
            rows,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write(File::create(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Table::read(File::open(path).map_err(|e| with_path(e, path))?)
    }
}

fn csv_error(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::InvalidArgument(format!("malformed CSV: {other:?}")),
    }
}

fn with_path(e: std::io::Error, path: &Path) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

/// Sample sets are stored as columns `x_1..x_d`; the condition `z` lives in
/// the metadata.
pub fn samples_to_table(samples: &SampleSet, mut metadata: Value) -> Table {
    if let Value::Object(map) = &mut metadata {
        map.insert("z".into(), samples.condition.clone().into());
    }
    let headers = (1..=samples.dim()).map(|k| format!("x_{k}")).collect();
    let mut t = Table::new(metadata, headers);
    t.rows = samples.iter().map(<[f64]>::to_vec).collect();
    t
}

pub fn table_to_samples(table: &Table) -> Result<SampleSet> {
    let cols: Vec<usize> = (1..)
        .map_while(|k| table.column(&format!("x_{k}")))
        .collect();
    if cols.is_empty() {
        return Err(Error::InvalidArgument("sample table has no x_1 column".into()));
    }
    let z = match table.metadata.get("z") {
        Some(v) => serde_json::from_value(v.clone())?,
        None => Vec::new(),
    };
    let data = table.rows.iter().flat_map(|r| cols.iter().map(move |&c| r[c])).collect();
    SampleSet::new(cols.len(), data, z, Provenance::SamplerOutput)
}
