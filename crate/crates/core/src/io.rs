//! Dataset CSV: one row per observation with columns `trial, t, y_1..y_D`.

use std::io::{Read, Write};

use crate::adf::{Trial, TrajectoryDataset};
use crate::error::{Error, Result};
use crate::linalg::Mat;

/// Writes `data` with `t` counting from 1 within each trial.
pub fn write_dataset_csv<W: Write>(data: &TrajectoryDataset, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let dy = data.dim_y();
    let mut header = vec!["trial".to_string(), "t".into()];
    header.extend((1..=dy).map(|i| format!("y_{i}")));
    w.write_record(&header).map_err(|e| Error::Format(e.to_string()))?;
    for (n, trial) in data.trials.iter().enumerate() {
        for t in 0..trial.observations.rows() {
            let mut row = vec![n.to_string(), (t + 1).to_string()];
            row.extend(trial.observations.row(t).iter().map(f64::to_string));
            w.write_record(&row).map_err(|e| Error::Format(e.to_string()))?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset CSV. Trials must appear contiguously with `t = 1, 2, …`;
/// parse errors carry the 1-based line number.
pub fn read_dataset_csv<R: Read>(input: R) -> Result<TrajectoryDataset> {
    let mut r = csv::Reader::from_reader(input);
    let header: Vec<String> = r.headers().map_err(|e| Error::Parse { row: 1, message: e.to_string() })?.iter().map(str::to_string).collect();
    if header.len() < 3 || header[0] != "trial" || header[1] != "t" {
        return Err(Error::Parse { row: 1, message: "header must start with trial,t followed by y_1..y_D".into() });
    }
    for (i, h) in header[2..].iter().enumerate() {
        if *h != format!("y_{}", i + 1) {
            return Err(Error::Parse { row: 1, message: format!("expected column y_{}, found {h:?}", i + 1) });
        }
    }
    let dy = header.len() - 2;
    let mut trials: Vec<(usize, Vec<f64>)> = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let row = i + 2;
        let rec = rec.map_err(|e| Error::Parse { row, message: e.to_string() })?;
        if rec.len() != dy + 2 {
            return Err(Error::Parse { row, message: format!("expected {} fields, found {}", dy + 2, rec.len()) });
        }
        let int = |c: usize, name: &str| -> Result<usize> {
            rec[c].trim().parse().map_err(|_| Error::Parse { row, message: format!("column {name}: cannot parse {:?}", &rec[c]) })
        };
        let (trial, t) = (int(0, "trial")?, int(1, "t")?);
        let mut y = Vec::with_capacity(dy);
        for c in 0..dy {
            let v: f64 = rec[c + 2].trim().parse().map_err(|_| Error::Parse {
                row,
                message: format!("column y_{}: cannot parse {:?}", c + 1, &rec[c + 2]),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse { row, message: format!("column y_{}: non-finite value", c + 1) });
            }
            y.push(v);
        }
        match trials.last_mut() {
            Some((id, values)) if *id == trial => {
                if t != values.len() / dy + 1 {
                    return Err(Error::Parse { row, message: format!("trial {trial}: expected t={}, found {t}", values.len() / dy + 1) });
                }
                values.extend(y);
            }
            _ => {
                if trials.iter().any(|(id, _)| *id == trial) {
                    return Err(Error::Parse { row, message: format!("trial {trial} is not contiguous") });
                }
                if t != 1 {
                    return Err(Error::Parse { row, message: format!("trial {trial} must start at t=1") });
                }
                trials.push((trial, y));
            }
        }
    }
    if trials.is_empty() {
        return Err(Error::Parse { row: 2, message: "no observations".into() });
    }
    TrajectoryDataset::new(
        trials
            .into_iter()
            .map(|(_, v)| Trial { observations: Mat::from_row_slice(v.len() / dy, dy, &v), control: None })
            .collect(),
    )
}
