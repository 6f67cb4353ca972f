//! Dataset and table files. Numbers are written with Rust's shortest
//! round-trip formatting, so a value read back is bit-identical.

use std::fs::File;
use std::path::Path;

use nalgebra::DMatrix;
use odekernel::{ObservationSet, TimeGrid};

use crate::error::{CliError, Result};

fn csv_error(path: &Path, e: csv::Error) -> CliError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => CliError::io(path, io),
        other => CliError::schema(format!("{}: {:?}", path.display(), other)),
    }
}

/// `time,state_1,…,state_m[,input_1,…]`.
pub fn dataset_header(n_states: usize, n_inputs: usize) -> Vec<String> {
    let mut h = vec!["time".to_string()];
    h.extend((1..=n_states).map(|j| format!("state_{j}")));
    h.extend((1..=n_inputs).map(|j| format!("input_{j}")));
    h
}

pub fn read_dataset(path: &Path) -> Result<ObservationSet> {
    let file = File::open(path).map_err(|e| CliError::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_reader(file);
    let schema = |msg: String| CliError::schema(format!("{}: {msg}", path.display()));

    let header: Vec<String> = reader
        .headers()
        .map_err(|e| csv_error(path, e))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();
    if header.len() < 2 || header.iter().all(|h| h.is_empty()) {
        return Err(schema("missing header `time,state_1,...`".into()));
    }
    if header[0] != "time" {
        return Err(schema(format!(
            "first column must be `time`, found `{}`",
            header[0]
        )));
    }
    let n_states = header[1..]
        .iter()
        .take_while(|h| h.starts_with("state_"))
        .count();
    let n_inputs = header.len() - 1 - n_states;
    if n_states == 0 {
        return Err(schema("no `state_` columns".into()));
    }
    let expected = dataset_header(n_states, n_inputs);
    if header != expected {
        return Err(schema(format!("header must be `{}`", expected.join(","))));
    }

    let mut times = Vec::new();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let mut values = Vec::with_capacity(record.len());
        for (col, field) in record.iter().enumerate() {
            let field = field.trim();
            if field.is_empty() {
                return Err(schema(format!(
                    "missing value in row {}, column `{}`",
                    line + 1,
                    header[col]
                )));
            }
            let v: f64 = field
                .parse()
                .map_err(|_| schema(format!("row {}: `{field}` is not a number", line + 1)))?;
            if !v.is_finite() {
                return Err(schema(format!(
                    "row {}: non-finite value `{field}`",
                    line + 1
                )));
            }
            values.push(v);
        }
        if let Some(&prev) = times.last() {
            if !(values[0] > prev) {
                return Err(schema(format!(
                    "time column not strictly increasing at row {}",
                    line + 1
                )));
            }
        }
        times.push(values[0]);
        rows.push(values);
    }
    if rows.is_empty() {
        return Err(schema("no observations".into()));
    }

    let n = rows.len();
    let states = DMatrix::from_fn(n_states, n, |j, i| rows[i][1 + j]);
    let inputs =
        (n_inputs > 0).then(|| DMatrix::from_fn(n_inputs, n, |j, i| rows[i][1 + n_states + j]));
    let grid = TimeGrid::new(times).map_err(|e| schema(e.to_string()))?;
    ObservationSet::new(grid, states, inputs).map_err(|e| schema(e.to_string()))
}

pub fn write_dataset(path: &Path, obs: &ObservationSet) -> Result<()> {
    write_series(path, obs.grid().times(), obs.states(), obs.inputs())
}

/// Time column followed by the rows of `states` (and `inputs`) as columns.
pub fn write_series(
    path: &Path,
    times: &[f64],
    states: &DMatrix<f64>,
    inputs: Option<&DMatrix<f64>>,
) -> Result<()> {
    let n_inputs = inputs.map_or(0, |u| u.nrows());
    let header = dataset_header(states.nrows(), n_inputs);
    let rows = times.iter().enumerate().map(|(i, t)| {
        let mut row = vec![t.to_string()];
        row.extend(states.column(i).iter().map(f64::to_string));
        if let Some(u) = inputs {
            row.extend(u.column(i).iter().map(f64::to_string));
        }
        row
    });
    write_table(path, &header, rows)
}

pub fn write_table<I, R, S>(path: &Path, header: &[S], rows: I) -> Result<()>
where
    I: IntoIterator<Item = R>,
    R: IntoIterator,
    R::Item: AsRef<[u8]>,
    S: AsRef<[u8]>,
{
    let mut writer = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    writer
        .write_record(header)
        .map_err(|e| csv_error(path, e))?;
    for row in rows {
        writer.write_record(row).map_err(|e| csv_error(path, e))?;
    }
    writer.flush().map_err(|e| CliError::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn read_str(text: &str) -> Result<ObservationSet> {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        std::fs::write(&path, text).unwrap();
        read_dataset(&path)
    }

    #[test]
    fn round_trip_is_exact() {
        let grid = TimeGrid::new(vec![0.0, 0.1, 0.30000000000000004]).unwrap();
        let states = DMatrix::from_row_slice(2, 3, &[1.0 / 3.0, -2e-300, 7.5, 1e20, 0.0, -0.1]);
        let inputs = DMatrix::from_row_slice(1, 3, &[5.0, 6.0, 7.0]);
        let obs = ObservationSet::new(grid, states, Some(inputs)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.csv");
        write_dataset(&path, &obs).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("time,state_1,state_2,input_1\n"));
        assert_eq!(read_dataset(&path).unwrap(), obs);
    }

    #[test]
    fn schema_violations() {
        let cases = [
            "",
            "time,state_1\n",
            "t,state_1\n0,1\n",
            "time,x\n0,1\n",
            "time,state_2\n0,1\n",
            "time,state_1\n0,1\n1,\n",
            "time,state_1\n0,1\n1,2,3\n",
            "time,state_1\n0,1\n0,2\n",
            "time,state_1\n0,1\n1,abc\n",
            "time,state_1\n0,1\n1,NaN\n",
            "time,state_1,input_1,state_2\n0,1,2,3\n",
        ];
        for text in cases {
            let err = read_str(text).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{text:?}: {err}");
        }
    }

    #[test]
    fn missing_file_is_io() {
        assert_eq!(
            read_dataset(Path::new("/nonexistent/d.csv"))
                .unwrap_err()
                .exit_code(),
            1
        );
    }
}
