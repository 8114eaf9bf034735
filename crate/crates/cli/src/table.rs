//! Versioned CSV tables.
//!
//! Every table has a schema `name/version` recorded in the run manifest. Reals are
//! written with 17 significant digits and rows end in `\n`.

use std::path::Path;

use homog_core::io::fmt_real;

use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Schema {
    pub name: &'static str,
    pub version: u32,
    pub columns: &'static [&'static str],
}

impl Schema {
    pub fn id(&self) -> String {
        format!("{}/{}", self.name, self.version)
    }
}

pub const XI: Schema = Schema {
    name: "xi",
    version: 1,
    columns: &[
        "T",
        "seed",
        "xi_x",
        "xi_y",
        "m",
        "m_normalized",
        "residual",
        "iters",
    ],
};

pub const ISOTROPY: Schema = Schema {
    name: "isotropy",
    version: 1,
    columns: &[
        "T",
        "direction",
        "xi_x",
        "xi_y",
        "direction_mean",
        "mean",
        "stddev",
        "spread",
        "failed_rows",
    ],
};

pub const LATTICE: Schema = Schema {
    name: "lattice",
    version: 1,
    columns: &[
        "T",
        "xi_x",
        "xi_y",
        "m_normalized",
        "oracle",
        "rel_error",
        "residual",
        "iters",
    ],
};

pub const PERCOLATION: Schema = Schema {
    name: "percolation",
    version: 1,
    columns: &["p", "seed", "good_fraction", "crossings", "max_crossings"],
};

pub const GRID_SUCCESS: Schema = Schema {
    name: "grid_success",
    version: 1,
    columns: &[
        "alpha",
        "lambda",
        "seed",
        "assembled",
        "valid",
        "m",
        "failing",
        "upsilon_lengths",
        "upsilon_count",
        "failure",
    ],
};

pub const CONVERGENCE: Schema = Schema {
    name: "convergence",
    version: 1,
    columns: &[
        "seed",
        "eps",
        "t",
        "l2_grid",
        "tg_vs_ut",
        "ut_vs_u",
        "grid_area",
        "flagged_squares",
        "skipped_measure",
        "failure",
    ],
};

pub const ALL: [Schema; 6] = [
    XI,
    ISOTROPY,
    LATTICE,
    PERCOLATION,
    GRID_SUCCESS,
    CONVERGENCE,
];

/// Looks up `name/version`; unknown ids are rejected.
pub fn schema_by_id(id: &str) -> Result<Schema, CliError> {
    ALL.iter()
        .copied()
        .find(|s| s.id() == id)
        .ok_or_else(|| CliError::Schema(format!("unknown schema `{id}`")))
}

/// One cell of a row.
#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Real(f64),
    Int(u64),
    Bool(bool),
    Text(String),
}

impl Cell {
    fn render(&self) -> String {
        match self {
            Cell::Real(v) => fmt_real(*v),
            Cell::Int(v) => v.to_string(),
            Cell::Bool(v) => v.to_string(),
            Cell::Text(s) => s.clone(),
        }
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Real(v)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v)
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as u64)
    }
}

impl From<bool> for Cell {
    fn from(v: bool) -> Self {
        Cell::Bool(v)
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub schema: Schema,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(schema: Schema) -> Self {
        Self {
            schema,
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(
            row.len(),
            self.schema.columns.len(),
            "row width for {}",
            self.schema.id()
        );
        self.rows.push(row);
    }

    pub fn to_csv(&self) -> String {
        let mut w = writer(Vec::new());
        w.write_record(self.schema.columns).expect("in-memory");
        for r in &self.rows {
            w.write_record(r.iter().map(Cell::render))
                .expect("in-memory");
        }
        String::from_utf8(w.into_inner().expect("in-memory")).expect("utf-8 cells")
    }
}

fn writer<W: std::io::Write>(out: W) -> csv::Writer<W> {
    csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(out)
}

/// Concatenates CSV files that all carry schema `schema_id`, keeping one header.
///
/// Fails when the ids disagree in name or version, or a header does not match.
pub fn concat(inputs: &[(String, &Path)]) -> Result<String, CliError> {
    let Some((first, _)) = inputs.first() else {
        return Err(CliError::Schema("nothing to concatenate".into()));
    };
    let schema = schema_by_id(first)?;
    for (id, path) in inputs {
        if id != first {
            return Err(CliError::Schema(format!(
                "{} has schema `{id}`, expected `{first}`",
                path.display()
            )));
        }
    }
    let mut w = writer(Vec::new());
    w.write_record(schema.columns).expect("in-memory");
    for (_, path) in inputs {
        let mut r = csv::ReaderBuilder::new()
            .from_path(path)
            .map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))?;
        let header = r
            .headers()
            .map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))?;
        if header.iter().ne(schema.columns.iter().copied()) {
            return Err(CliError::Schema(format!(
                "{}: header does not match schema `{first}`",
                path.display()
            )));
        }
        for rec in r.records() {
            let rec = rec.map_err(|e| CliError::Schema(format!("{}: {e}", path.display())))?;
            w.write_record(&rec).expect("in-memory");
        }
    }
    Ok(String::from_utf8(w.into_inner().expect("in-memory")).expect("utf-8 input"))
}
