//! File formats.
//!
//! CSV files start with `#` comment lines carrying the tool version, the
//! seed and the resolved configuration, followed by a header row:
//!
//! - curves: long form `sample_id,curve_id,t_index,value`
//! - grid: `t_index,t`
//! - responses and predictions: `y1,…,ym`, one row per sample
//!
//! JSON artifacts wrap their payload next to the same metadata.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use msof_core::design::{CurveArray, Truth};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, CliResult};

pub const CURVES_FILE: &str = "curves.csv";
pub const GRID_FILE: &str = "grid.csv";
pub const RESPONSES_FILE: &str = "responses.csv";
pub const TRUTH_FILE: &str = "truth.json";

/// Provenance written at the top of every output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: Option<u64>,
    pub config: Value,
}

impl Meta {
    pub fn new(command: &str, seed: Option<u64>, config: &impl Serialize) -> Self {
        Meta {
            tool: "msof".into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed,
            config: serde_json::to_value(config).expect("configuration serializes"),
        }
    }

    pub fn comment_lines(&self) -> String {
        let seed = self.seed.map_or("none".to_string(), |s| s.to_string());
        format!(
            "# {} {}\n# command: {}\n# seed: {}\n# config: {}\n",
            self.tool, self.version, self.command, seed, self.config
        )
    }
}

/// Writes to `path`, or to stdout when no path is given.
pub fn emit(path: Option<&Path>, contents: &str) -> CliResult<()> {
    match path {
        Some(p) => {
            if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
            }
            fs::write(p, contents).map_err(|e| CliError::io(p, e))
        }
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(contents.as_bytes())
                .map_err(|e| CliError::Data(format!("stdout: {e}")))
        }
    }
}

pub fn curves_csv(meta: &Meta, curves: &CurveArray) -> String {
    let mut s = meta.comment_lines();
    s.push_str("sample_id,curve_id,t_index,value\n");
    for l in 0..curves.n() {
        for j in 0..curves.p() {
            for (i, v) in curves.curve(l, j).iter().enumerate() {
                s.push_str(&format!("{l},{j},{i},{v}\n"));
            }
        }
    }
    s
}

pub fn grid_csv(meta: &Meta, grid: &[f64]) -> String {
    let mut s = meta.comment_lines();
    s.push_str("t_index,t\n");
    for (i, t) in grid.iter().enumerate() {
        s.push_str(&format!("{i},{t}\n"));
    }
    s
}

/// n×m matrix with columns named `{prefix}1..{prefix}m`.
pub fn matrix_csv(meta: &Meta, prefix: &str, y: &DMatrix<f64>) -> String {
    let mut s = meta.comment_lines();
    let names: Vec<String> = (1..=y.ncols()).map(|r| format!("{prefix}{r}")).collect();
    s.push_str(&names.join(","));
    s.push('\n');
    for row in y.row_iter() {
        let vals: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&vals.join(","));
        s.push('\n');
    }
    s
}

/// Pretty JSON document `{ "meta": …, <key>: payload }`.
pub fn json_doc(meta: &Meta, key: &str, payload: &impl Serialize) -> CliResult<String> {
    let mut map = serde_json::Map::new();
    map.insert(
        "meta".into(),
        serde_json::to_value(meta).expect("metadata serializes"),
    );
    let value = serde_json::to_value(payload)
        .map_err(|e| CliError::Numerical(format!("cannot serialize {key}: {e}")))?;
    map.insert(key.into(), value);
    let mut s = serde_json::to_string_pretty(&Value::Object(map)).expect("JSON value serializes");
    s.push('\n');
    Ok(s)
}

/// Reads the payload stored under `key` in a JSON document.
pub fn read_json_doc<T: for<'de> Deserialize<'de>>(path: &Path, key: &str) -> CliResult<T> {
    let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut doc: Value = serde_json::from_str(&text).map_err(|e| CliError::io(path, e))?;
    let payload = doc
        .get_mut(key)
        .map(Value::take)
        .ok_or_else(|| CliError::io(path, format!("missing \"{key}\" section")))?;
    serde_json::from_value(payload).map_err(|e| CliError::io(path, e))
}

#[derive(Serialize)]
struct TruthRepr<'a> {
    support: &'a [usize],
    scale: f64,
    sigma: f64,
    regression: MatrixOut,
}

#[derive(Serialize)]
struct MatrixOut {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

pub fn truth_json(meta: &Meta, truth: &Truth) -> CliResult<String> {
    let f = &truth.regression;
    let repr = TruthRepr {
        support: &truth.support,
        scale: truth.scale,
        sigma: truth.sigma,
        regression: MatrixOut {
            rows: f.nrows(),
            cols: f.ncols(),
            data: f.transpose().as_slice().to_vec(),
        },
    };
    json_doc(meta, "truth", &repr)
}

fn reader(path: &Path) -> CliResult<csv::Reader<fs::File>> {
    let file = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_reader(file))
}

fn row_err(path: &Path, line: u64, msg: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}: line {line}: {msg}", path.display()))
}

fn parse<T: std::str::FromStr>(path: &Path, line: u64, field: &str, what: &str) -> CliResult<T> {
    field
        .parse()
        .map_err(|_| row_err(path, line, format!("cannot parse {what} {field:?}")))
}

fn expect_header(path: &Path, rdr: &mut csv::Reader<fs::File>, want: &[&str]) -> CliResult<()> {
    let head = rdr.headers().map_err(|e| CliError::io(path, e))?;
    let got: Vec<&str> = head.iter().collect();
    if got != want {
        return Err(CliError::io(
            path,
            format!("expected header {want:?}, found {got:?}"),
        ));
    }
    Ok(())
}

pub fn read_grid(path: &Path) -> CliResult<Vec<f64>> {
    let mut rdr = reader(path)?;
    expect_header(path, &mut rdr, &["t_index", "t"])?;
    let mut grid = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::io(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 2 {
            return Err(row_err(path, line, "expected 2 fields"));
        }
        let i: usize = parse(path, line, &rec[0], "t_index")?;
        if i != grid.len() {
            return Err(row_err(path, line, format!("t_index {i} out of order")));
        }
        let t: f64 = parse(path, line, &rec[1], "time")?;
        if !(0.0..=1.0).contains(&t) || grid.last().is_some_and(|&last| t <= last) {
            return Err(row_err(
                path,
                line,
                format!("time {t} must lie in [0, 1] and increase"),
            ));
        }
        grid.push(t);
    }
    if grid.len() < 2 {
        return Err(CliError::io(path, "a grid needs at least two points"));
    }
    Ok(grid)
}

/// Reads long-form curves; every (sample, curve, time) cell must appear
/// exactly once.
pub fn read_curves(path: &Path, grid: &[f64]) -> CliResult<CurveArray> {
    let mut rdr = reader(path)?;
    expect_header(
        path,
        &mut rdr,
        &["sample_id", "curve_id", "t_index", "value"],
    )?;
    let t_len = grid.len();
    let mut cells: Vec<(usize, usize, usize, f64, u64)> = Vec::new();
    let (mut n, mut p) = (0, 0);
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::io(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != 4 {
            return Err(row_err(path, line, "expected 4 fields"));
        }
        let l: usize = parse(path, line, &rec[0], "sample_id")?;
        let j: usize = parse(path, line, &rec[1], "curve_id")?;
        let i: usize = parse(path, line, &rec[2], "t_index")?;
        let v: f64 = parse(path, line, &rec[3], "value")?;
        if i >= t_len {
            return Err(row_err(
                path,
                line,
                format!("t_index {i} outside the {t_len}-point grid"),
            ));
        }
        if !v.is_finite() {
            return Err(row_err(path, line, "value is not finite"));
        }
        n = n.max(l + 1);
        p = p.max(j + 1);
        cells.push((l, j, i, v, line));
    }
    let mut values = vec![f64::NAN; n * p * t_len];
    let mut filled = vec![false; values.len()];
    for (l, j, i, v, line) in cells {
        let idx = (l * p + j) * t_len + i;
        if filled[idx] {
            return Err(row_err(
                path,
                line,
                format!("duplicate entry for sample {l}, curve {j}, t_index {i}"),
            ));
        }
        filled[idx] = true;
        values[idx] = v;
    }
    if let Some(idx) = filled.iter().position(|f| !f) {
        let (l, rest) = (idx / (p * t_len), idx % (p * t_len));
        return Err(CliError::io(
            path,
            format!(
                "missing value for sample {l}, curve {}, t_index {}",
                rest / t_len,
                rest % t_len
            ),
        ));
    }
    CurveArray::new(grid.to_vec(), n, p, values).map_err(|e| CliError::io(path, e))
}

pub fn read_matrix(path: &Path) -> CliResult<DMatrix<f64>> {
    let mut rdr = reader(path)?;
    let m = rdr.headers().map_err(|e| CliError::io(path, e))?.len();
    let mut data = Vec::new();
    let mut rows = 0;
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::io(path, e))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != m {
            return Err(row_err(
                path,
                line,
                format!("expected {m} fields, found {}", rec.len()),
            ));
        }
        for f in rec.iter() {
            let v: f64 = parse(path, line, f, "response")?;
            if !v.is_finite() {
                return Err(row_err(path, line, "response is not finite"));
            }
            data.push(v);
        }
        rows += 1;
    }
    if rows == 0 || m == 0 {
        return Err(CliError::io(path, "no responses"));
    }
    Ok(DMatrix::from_row_slice(rows, m, &data))
}

/// Paths of the three dataset files inside a directory.
pub struct DataPaths {
    pub curves: PathBuf,
    pub grid: PathBuf,
    pub responses: PathBuf,
}

impl DataPaths {
    pub fn in_dir(dir: &Path) -> Self {
        DataPaths {
            curves: dir.join(CURVES_FILE),
            grid: dir.join(GRID_FILE),
            responses: dir.join(RESPONSES_FILE),
        }
    }
}

pub fn read_dataset(dir: &Path) -> CliResult<msof_core::CurveDataset> {
    let paths = DataPaths::in_dir(dir);
    let grid = read_grid(&paths.grid)?;
    let curves = read_curves(&paths.curves, &grid)?;
    let y = read_matrix(&paths.responses)?;
    if y.nrows() != curves.n() {
        return Err(CliError::Data(format!(
            "{} has {} rows but {} has {} samples",
            paths.responses.display(),
            y.nrows(),
            paths.curves.display(),
            curves.n()
        )));
    }
    msof_core::CurveDataset::new(curves, y).map_err(|e| CliError::io(dir, e))
}
