//! CSV layout: a header row of sensor IDs, then one row per time step.
//! Missing values are empty cells; masks use the same layout with 0/1.

use std::path::Path;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn csv_err(e: csv::Error) -> Error {
    match e.kind() {
        csv::ErrorKind::Io(_) => Error::Io(std::io::Error::other(e.to_string())),
        csv::ErrorKind::UnequalLengths {
            pos,
            expected_len,
            len,
        } => Error::Parse {
            row: pos.as_ref().map_or(0, |p| p.line() as usize),
            col: *len as usize,
            msg: format!("ragged row: expected {expected_len} fields, found {len}"),
        },
        _ => Error::Parse {
            row: e.position().map_or(0, |p| p.line() as usize),
            col: 0,
            msg: e.to_string(),
        },
    }
}

/// Parses the table into sensor IDs and a node-major `[N, steps]` matrix of
/// optional values.
fn read_table(path: &Path) -> Result<(Vec<String>, Vec<Vec<Option<f64>>>)> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(csv_err)?;
    let ids: Vec<String> = rdr
        .headers()
        .map_err(csv_err)?
        .iter()
        .map(str::to_string)
        .collect();
    if ids.is_empty() {
        return Err(Error::Parse {
            row: 1,
            col: 1,
            msg: "empty header".into(),
        });
    }
    let mut cols: Vec<Vec<Option<f64>>> = vec![Vec::new(); ids.len()];
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        // header is line 1, first data row is line 2
        let row = r + 2;
        for (c, field) in rec.iter().enumerate() {
            let field = field.trim();
            let v = if field.is_empty() {
                None
            } else {
                let v: f64 = field.parse().map_err(|_| Error::Parse {
                    row,
                    col: c + 1,
                    msg: format!("not a number: {field:?}"),
                })?;
                if !v.is_finite() {
                    return Err(Error::Parse {
                        row,
                        col: c + 1,
                        msg: format!("non-finite value {field:?}; leave missing cells empty"),
                    });
                }
                Some(v)
            };
            cols[c].push(v);
        }
    }
    Ok((ids, cols))
}

/// Reads a dataset. `steps_per_day` is not part of the file.
pub fn load_csv(path: impl AsRef<Path>, steps_per_day: usize) -> Result<Dataset> {
    let (ids, cols) = read_table(path.as_ref())?;
    let n = ids.len();
    let steps = cols[0].len();
    let values = Tensor::from_fn(&[n, steps], |i| cols[i / steps][i % steps].unwrap_or(0.0));
    let available = Tensor::from_fn(&[n, steps], |i| {
        if cols[i / steps][i % steps].is_some() {
            1.0
        } else {
            0.0
        }
    });
    let mut ds = Dataset::new(values, available, steps_per_day)?;
    ds.sensor_ids = ids;
    Ok(ds)
}

/// Writes a dataset; values use the shortest representation that parses
/// back to the identical `f64`.
pub fn save_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    write_table(
        path.as_ref(),
        &ds.sensor_ids,
        &ds.values,
        Some(&ds.available),
    )
}

fn write_table(path: &Path, ids: &[String], m: &Tensor, present: Option<&Tensor>) -> Result<()> {
    let (n, steps) = m.dims2()?;
    if ids.len() != n {
        return Err(Error::contract(format!(
            "{} sensor ids for {n} rows",
            ids.len()
        )));
    }
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record(ids).map_err(csv_err)?;
    let mut row = Vec::with_capacity(n);
    for t in 0..steps {
        row.clear();
        for i in 0..n {
            let keep = present.is_none_or(|p| p.at(i, t) != 0.0);
            row.push(if keep {
                format!("{}", m.at(i, t))
            } else {
                String::new()
            });
        }
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a binary mask `[N, steps]` as 0/1 in the dataset layout.
pub fn save_mask_csv(mask: &Tensor, ids: &[String], path: impl AsRef<Path>) -> Result<()> {
    let m = mask.map(|v| if v != 0.0 { 1.0 } else { 0.0 });
    write_table(path.as_ref(), ids, &m, None)
}

pub fn load_mask_csv(path: impl AsRef<Path>) -> Result<Tensor> {
    let (ids, cols) = read_table(path.as_ref())?;
    let n = ids.len();
    let steps = cols[0].len();
    let mut data = Vec::with_capacity(n * steps);
    for (i, col) in cols.iter().enumerate() {
        for (t, v) in col.iter().enumerate() {
            match v {
                Some(x) if *x == 0.0 || *x == 1.0 => data.push(*x),
                _ => {
                    return Err(Error::Parse {
                        row: t + 2,
                        col: i + 1,
                        msg: "mask cells must be 0 or 1".into(),
                    })
                }
            }
        }
    }
    Tensor::new(vec![n, steps], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_lowrank, SynthSpec};
    use std::io::Write;

    fn write(dir: &tempfile::TempDir, name: &str, body: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        std::fs::File::create(&p)
            .unwrap()
            .write_all(body.as_bytes())
            .unwrap();
        p
    }

    #[test]
    fn empty_cell_is_missing() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.csv", "a,b\n1.5,\n2,3\n");
        let ds = load_csv(&p, 24).unwrap();
        assert_eq!(ds.sensor_ids, vec!["a", "b"]);
        assert_eq!(ds.values.shape(), &[2, 2]);
        assert_eq!(ds.available.sum(), 3.0);
        assert_eq!(ds.available.at(1, 0), 0.0);
        assert_eq!(ds.values.at(1, 1), 3.0);
    }

    #[test]
    fn nan_literal_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.csv", "a,b\n1,NaN\n");
        match load_csv(&p, 24) {
            Err(Error::Parse { row, col, .. }) => assert_eq!((row, col), (2, 2)),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn non_numeric_and_ragged_rows_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "a.csv", "a,b\n1,x\n");
        assert!(matches!(load_csv(&p, 24), Err(Error::Parse { .. })));
        let p = write(&dir, "b.csv", "a,b\n1,2\n3\n");
        assert!(matches!(load_csv(&p, 24), Err(Error::Parse { .. })));
    }

    #[test]
    fn roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut ds = synth_lowrank(&SynthSpec {
            nodes: 5,
            steps: 40,
            rank: 2,
            noise: 0.3,
            steps_per_day: 24,
            seed: 3,
        })
        .unwrap();
        ds.available.set(2, 7, 0.0);
        ds.values.set(2, 7, 0.0);
        let p = dir.path().join("d.csv");
        save_csv(&ds, &p).unwrap();
        let back = load_csv(&p, 24).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn mask_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let m = Tensor::from_fn(&[3, 4], |i| (i % 3 == 0) as u8 as f64);
        let p = dir.path().join("m.csv");
        save_mask_csv(&m, &["x".into(), "y".into(), "z".into()], &p).unwrap();
        assert_eq!(load_mask_csv(&p).unwrap(), m);
    }
}
