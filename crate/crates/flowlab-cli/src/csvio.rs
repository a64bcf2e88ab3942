//! CSV ingestion and export: user-supplied point clouds in, samples and
//! trajectories out. Format: '.' decimal, ',' separator, optional single
//! header line.

use std::path::Path;

use anyhow::{bail, Context, Result};

use flowlab_core::datasets::{from_rows, Dataset};
use flowlab_core::flow::Trajectory;
use flowlab_core::Tensor;

/// Loads `d_data` feature columns plus one integer condition column. The
/// condition column defaults to the last one; each row must hold exactly
/// `d_data + 1` fields. Malformed rows report their line number.
pub fn load_csv(
    path: &Path,
    d_data: usize,
    condition_column: Option<usize>,
    has_header: bool,
    seed: u64,
) -> Result<Dataset> {
    let cond_col = condition_column.unwrap_or(d_data);
    if cond_col > d_data {
        bail!("condition column {cond_col} outside 0..={d_data}");
    }
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(has_header)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("cannot open {}", path.display()))?;

    let mut rows: Vec<(Vec<f64>, usize)> = Vec::new();
    let mut max_cond = 0usize;
    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        if record.len() != d_data + 1 {
            bail!(
                "line {line}: expected {} fields ({d_data} features + condition), got {}",
                d_data + 1,
                record.len()
            );
        }
        let mut features = Vec::with_capacity(d_data);
        let mut cond = None;
        for (i, field) in record.iter().enumerate() {
            if i == cond_col {
                let c: usize = field
                    .parse()
                    .with_context(|| format!("line {line}: bad condition '{field}'"))?;
                cond = Some(c);
            } else {
                let v: f64 = field
                    .parse()
                    .with_context(|| format!("line {line}: bad float '{field}'"))?;
                if !v.is_finite() {
                    bail!("line {line}: non-finite value '{field}'");
                }
                features.push(v);
            }
        }
        let cond = cond.expect("condition column within bounds");
        max_cond = max_cond.max(cond);
        rows.push((features, cond));
    }
    if rows.is_empty() {
        bail!("{}: empty dataset (no data rows)", path.display());
    }
    Ok(from_rows(rows, d_data, max_cond + 1, seed)?)
}

/// Writes `x1` features plus the condition id as the last column.
pub fn save_dataset_csv(dataset: &Dataset, path: &Path, header: bool) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut w = csv::Writer::from_path(path)?;
    if header {
        let mut cols: Vec<String> =
            (0..dataset.d_data()).map(|i| format!("x{i}")).collect();
        cols.push("condition".to_string());
        w.write_record(&cols)?;
    }
    for s in &dataset.samples {
        let mut record: Vec<String> = s.x1.iter().map(|v| format!("{v}")).collect();
        record.push(format!("{}", s.cond));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

/// Sample matrix (rows) with condition ids as the last column.
pub fn save_samples_csv(samples: &Tensor, conds: &[usize], path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<String> = (0..samples.cols()).map(|i| format!("x{i}")).collect();
    header.push("condition".to_string());
    w.write_record(&header)?;
    for r in 0..samples.rows() {
        let mut record: Vec<String> =
            samples.row_slice(r).iter().map(|v| format!("{v}")).collect();
        record.push(format!("{}", conds[r]));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

/// One row per knot: `t`, state components, velocity components (forward
/// differences of the recorded states; the last row repeats the final
/// velocity segment).
pub fn save_trajectory_csv(trajectory: &Trajectory, sample_row: usize, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    let dims = trajectory.states[0].cols();
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["t".to_string()];
    header.extend((0..dims).map(|i| format!("x{i}")));
    header.extend((0..dims).map(|i| format!("v{i}")));
    w.write_record(&header)?;

    let knots = &trajectory.schedule.knots;
    for (i, t) in knots.iter().enumerate() {
        let state = &trajectory.states[i];
        let (j0, j1, dt) = if i + 1 < knots.len() {
            (i, i + 1, knots[i + 1] - knots[i])
        } else {
            (i - 1, i, knots[i] - knots[i - 1])
        };
        let mut record = vec![format!("{t}")];
        for c in 0..dims {
            record.push(format!("{}", state.get(sample_row, c)));
        }
        for c in 0..dims {
            let v = (trajectory.states[j1].get(sample_row, c)
                - trajectory.states[j0].get(sample_row, c))
                / dt;
            record.push(format!("{v}"));
        }
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use flowlab_core::datasets::{generate, DatasetSpec};

    #[test]
    fn round_trip_preserves_x1_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate(&DatasetSpec::gauss_mixture(3, 40, 7)).unwrap();
        let p = dir.path().join("pts.csv");
        save_dataset_csv(&ds, &p, false).unwrap();
        let loaded = load_csv(&p, 2, None, false, 123).unwrap();
        assert_eq!(loaded.len(), ds.len());
        for (a, b) in ds.samples.iter().zip(&loaded.samples) {
            assert_eq!(a.x1, b.x1);
            assert_eq!(a.cond, b.cond);
        }
    }

    #[test]
    fn header_handling() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("h.csv");
        std::fs::write(&p, "x0,x1,condition\n1.0,2.0,0\n3.0,4.0,1\n").unwrap();
        let ds = load_csv(&p, 2, None, true, 1).unwrap();
        assert_eq!(ds.len(), 2);
        // Without the flag the header row fails to parse, with its line.
        let err = load_csv(&p, 2, None, false, 1).unwrap_err();
        assert!(format!("{err:#}").contains("line 1"), "{err:#}");
    }

    #[test]
    fn empty_file_is_explicit_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.csv");
        std::fs::write(&p, "").unwrap();
        let err = load_csv(&p, 2, None, false, 1).unwrap_err();
        assert!(format!("{err:#}").contains("empty dataset"), "{err:#}");
    }

    #[test]
    fn malformed_row_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.csv");
        std::fs::write(&p, "1.0,2.0,0\n1.0,oops,1\n").unwrap();
        let err = load_csv(&p, 2, None, false, 1).unwrap_err();
        assert!(format!("{err:#}").contains("line 2"), "{err:#}");
        std::fs::write(&p, "1.0,2.0\n").unwrap();
        let err = load_csv(&p, 2, None, false, 1).unwrap_err();
        assert!(format!("{err:#}").contains("expected 3 fields"), "{err:#}");
    }
}
