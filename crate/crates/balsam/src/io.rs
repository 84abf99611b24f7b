//! CSV ingestion and emission plus atomic file writes.
//!
//! File contracts: `survival.csv` has columns id, t, delta, then one column
//! per covariate (any names); `longitudinal.csv` has columns id, time, z in
//! long format. Ingestion is total: malformed input yields a structured
//! error listing row numbers, never a partial dataset.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use crate::config::Transform;
use crate::model::{SubjectRecord, TIME_TOLERANCE};
use crate::{Error, Result};

/// Writes bytes to a temporary sibling file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().map_or_else(
            || "out".to_string(),
            |n| n.to_string_lossy().into_owned()
        )
    ));
    {
        let mut file = std::fs::File::create(&tmp)?;
        file.write_all(bytes)?;
        file.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Input(format!("serialization failed: {e}")))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn write_longitudinal_csv(path: &Path, records: &[SubjectRecord]) -> Result<()> {
    let mut out = String::from("id,time,z\n");
    for rec in records {
        for (s, z) in rec.times.iter().zip(rec.z.iter()) {
            out.push_str(&format!("{},{},{}\n", rec.id, s, z));
        }
    }
    write_atomic(path, out.as_bytes())
}

pub fn write_survival_csv(
    path: &Path,
    records: &[SubjectRecord],
    covariate_names: &[String],
) -> Result<()> {
    let mut out = String::from("id,t,delta");
    for name in covariate_names {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for rec in records {
        out.push_str(&format!("{},{},{}", rec.id, rec.t, rec.delta));
        for x in &rec.x {
            out.push_str(&format!(",{x}"));
        }
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// One retained draw per row, preceded by the originating iteration index.
pub fn write_chain_csv(path: &Path, names: &[String], draws: &[Vec<f64>], burn_in: usize, thin: usize) -> Result<()> {
    let mut out = String::from("iteration");
    for name in names {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    for (i, draw) in draws.iter().enumerate() {
        out.push_str(&format!("{}", burn_in + i * thin));
        for v in draw {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    write_atomic(path, out.as_bytes())
}

/// Ingested dataset plus bookkeeping from the cleaning pass.
#[derive(Debug, Clone)]
pub struct IngestedData {
    pub records: Vec<SubjectRecord>,
    pub covariate_names: Vec<String>,
    /// Longitudinal rows dropped for missing/unparsable z values.
    pub dropped_missing: usize,
}

struct RowErrors {
    errors: Vec<String>,
}

impl RowErrors {
    fn new() -> Self {
        RowErrors { errors: Vec::new() }
    }

    fn push(&mut self, message: String) {
        if self.errors.len() < 25 {
            self.errors.push(message);
        }
    }

    fn into_result(self) -> Result<()> {
        if self.errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Input(self.errors.join("; ")))
        }
    }
}

/// Reads and validates a dataset from the two CSV files. `transform`
/// optionally maps the longitudinal values (square root for count-like
/// biomarkers). Missing z values drop their row with a count; structural
/// problems (orphan ids, unsorted times, bad t or delta) are errors listing
/// the offending row numbers.
pub fn read_dataset(
    longitudinal: &Path,
    survival: &Path,
    transform: Option<Transform>,
) -> Result<IngestedData> {
    let mut errors = RowErrors::new();

    // survival file: id, t, delta, covariates...
    let mut survival_reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(survival)?;
    let headers = survival_reader.headers()?.clone();
    let header_names: Vec<String> = headers.iter().map(str::to_string).collect();
    if header_names.len() < 3
        || header_names[0] != "id"
        || header_names[1] != "t"
        || header_names[2] != "delta"
    {
        return Err(Error::Input(format!(
            "survival file must start with columns id,t,delta; got {:?}",
            header_names
        )));
    }
    let covariate_names: Vec<String> = header_names[3..].to_vec();

    struct SurvivalRow {
        t: f64,
        delta: u8,
        x: Vec<f64>,
        order: usize,
    }
    let mut subjects: HashMap<String, SurvivalRow> = HashMap::new();
    let mut order = Vec::new();
    for (row_idx, row) in survival_reader.records().enumerate() {
        let line = row_idx + 2; // 1-based, after the header
        let row = row?;
        if row.len() != header_names.len() {
            errors.push(format!("survival row {line}: wrong field count"));
            continue;
        }
        let id = row[0].to_string();
        let t: f64 = match row[1].parse() {
            Ok(v) => v,
            Err(_) => {
                errors.push(format!("survival row {line}: unparsable t `{}`", &row[1]));
                continue;
            }
        };
        if !(t.is_finite() && t > 0.0) {
            errors.push(format!("survival row {line}: t must be positive, got {t}"));
            continue;
        }
        let delta: u8 = match row[2].parse::<f64>() {
            Ok(v) if v == 0.0 => 0,
            Ok(v) if v == 1.0 => 1,
            _ => {
                errors.push(format!(
                    "survival row {line}: delta must be 0 or 1, got `{}`",
                    &row[2]
                ));
                continue;
            }
        };
        let mut x = Vec::with_capacity(covariate_names.len());
        let mut bad = false;
        for (c, field) in row.iter().skip(3).enumerate() {
            match field.parse::<f64>() {
                Ok(v) if v.is_finite() => x.push(v),
                _ => {
                    errors.push(format!(
                        "survival row {line}: unparsable covariate {} `{field}`",
                        covariate_names[c]
                    ));
                    bad = true;
                    break;
                }
            }
        }
        if bad {
            continue;
        }
        if subjects.contains_key(&id) {
            errors.push(format!("survival row {line}: duplicate id `{id}`"));
            continue;
        }
        order.push(id.clone());
        subjects.insert(
            id,
            SurvivalRow {
                t,
                delta,
                x,
                order: order.len() - 1,
            },
        );
    }

    // longitudinal file: id, time, z
    let mut long_reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(longitudinal)?;
    let long_headers: Vec<String> = long_reader.headers()?.iter().map(str::to_string).collect();
    if long_headers != ["id", "time", "z"] {
        return Err(Error::Input(format!(
            "longitudinal file must have columns id,time,z; got {:?}",
            long_headers
        )));
    }
    let mut measurements: HashMap<String, Vec<(f64, f64)>> = HashMap::new();
    let mut dropped_missing = 0usize;
    for (row_idx, row) in long_reader.records().enumerate() {
        let line = row_idx + 2;
        let row = row?;
        if row.len() != 3 {
            errors.push(format!("longitudinal row {line}: wrong field count"));
            continue;
        }
        let id = row[0].to_string();
        let Some(subject) = subjects.get(&id) else {
            errors.push(format!(
                "longitudinal row {line}: id `{id}` missing from the survival file"
            ));
            continue;
        };
        let time: f64 = match row[1].parse() {
            Ok(v) if v >= 0.0 => v,
            _ => {
                errors.push(format!(
                    "longitudinal row {line}: unparsable or negative time `{}`",
                    &row[1]
                ));
                continue;
            }
        };
        if time > subject.t + TIME_TOLERANCE {
            errors.push(format!(
                "longitudinal row {line}: time {time} beyond observed time {}",
                subject.t
            ));
            continue;
        }
        // missing z: dropped with a count, no imputation
        let z_raw = row[2].trim();
        if z_raw.is_empty() || z_raw.eq_ignore_ascii_case("na") || z_raw.eq_ignore_ascii_case("nan")
        {
            dropped_missing += 1;
            continue;
        }
        let z = match z_raw.parse::<f64>() {
            Ok(v) if v.is_finite() => v,
            _ => {
                dropped_missing += 1;
                continue;
            }
        };
        let z = match transform {
            Some(Transform::Sqrt) => {
                if z < 0.0 {
                    errors.push(format!(
                        "longitudinal row {line}: square-root transform of negative value {z}"
                    ));
                    continue;
                }
                z.sqrt()
            }
            None => z,
        };
        let entry = measurements.entry(id).or_default();
        if let Some((prev, _)) = entry.last() {
            if time < *prev {
                errors.push(format!(
                    "longitudinal row {line}: times not sorted within subject ({time} after {prev})"
                ));
                continue;
            }
        }
        entry.push((time, z));
    }

    errors.into_result()?;

    let mut records = Vec::with_capacity(order.len());
    let mut missing_subjects = Vec::new();
    for id in order {
        let surv = subjects.remove(&id).unwrap();
        match measurements.remove(&id) {
            Some(obs) if !obs.is_empty() => {
                let (times, z): (Vec<f64>, Vec<f64>) = obs.into_iter().unzip();
                records.push(SubjectRecord {
                    id,
                    t: surv.t,
                    delta: surv.delta,
                    x: surv.x,
                    times,
                    z,
                });
            }
            _ => missing_subjects.push(format!("{} (survival row {})", id, surv.order + 2)),
        }
    }
    if !missing_subjects.is_empty() {
        return Err(Error::Input(format!(
            "subjects without longitudinal measurements: {}",
            missing_subjects.join(", ")
        )));
    }
    if records.is_empty() {
        return Err(Error::Input("no subjects survived ingestion".into()));
    }

    Ok(IngestedData {
        records,
        covariate_names,
        dropped_missing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, name: &str, text: &str) -> std::path::PathBuf {
        let path = dir.join(name);
        std::fs::write(&path, text).unwrap();
        path
    }

    #[test]
    fn round_trips_a_valid_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let surv = write(
            dir.path(),
            "survival.csv",
            "id,t,delta,drug,gender\ns1,5.0,1,1,0\ns2,9.5,0,0,1\n",
        );
        let long = write(
            dir.path(),
            "longitudinal.csv",
            "id,time,z\ns1,0,4.0\ns1,2,3.5\ns2,0,6.2\ns2,6,5.9\n",
        );
        let data = read_dataset(&long, &surv, None).unwrap();
        assert_eq!(data.covariate_names, vec!["drug", "gender"]);
        assert_eq!(data.records.len(), 2);
        assert_eq!(data.records[0].id, "s1");
        assert_eq!(data.records[0].x, vec![1.0, 0.0]);
        assert_eq!(data.records[1].times, vec![0.0, 6.0]);
        assert_eq!(data.dropped_missing, 0);

        // write back and re-read
        let surv2 = dir.path().join("survival2.csv");
        let long2 = dir.path().join("longitudinal2.csv");
        write_survival_csv(&surv2, &data.records, &data.covariate_names).unwrap();
        write_longitudinal_csv(&long2, &data.records).unwrap();
        let again = read_dataset(&long2, &surv2, None).unwrap();
        assert_eq!(again.records, data.records);
    }

    #[test]
    fn sqrt_transform_applies_at_ingestion() {
        let dir = tempfile::tempdir().unwrap();
        let surv = write(dir.path(), "s.csv", "id,t,delta,x\na,4,1,1\n");
        let long = write(dir.path(), "l.csv", "id,time,z\na,0,9.0\na,2,16.0\n");
        let data = read_dataset(&long, &surv, Some(Transform::Sqrt)).unwrap();
        assert_eq!(data.records[0].z, vec![3.0, 4.0]);
    }

    #[test]
    fn missing_z_rows_dropped_with_count() {
        let dir = tempfile::tempdir().unwrap();
        let surv = write(dir.path(), "s.csv", "id,t,delta,x\na,4,1,1\n");
        let long = write(
            dir.path(),
            "l.csv",
            "id,time,z\na,0,1.0\na,1,\na,2,NA\na,3,2.0\n",
        );
        let data = read_dataset(&long, &surv, None).unwrap();
        assert_eq!(data.dropped_missing, 2);
        assert_eq!(data.records[0].times, vec![0.0, 3.0]);
    }

    #[test]
    fn structural_errors_list_row_numbers() {
        let dir = tempfile::tempdir().unwrap();
        let surv = write(
            dir.path(),
            "s.csv",
            "id,t,delta,x\na,4,1,1\nb,-2,1,0\nc,3,7,1\n",
        );
        let long = write(
            dir.path(),
            "l.csv",
            "id,time,z\na,0,1.0\nzz,0,2.0\na,9,1.0\n",
        );
        let err = read_dataset(&long, &surv, None).unwrap_err().to_string();
        assert!(err.contains("row 3"), "err: {err}"); // t <= 0
        assert!(err.contains("row 4"), "err: {err}"); // delta
        assert!(err.contains("zz"), "err: {err}"); // orphan id
        assert!(err.contains("beyond observed time"), "err: {err}");
    }

    #[test]
    fn unsorted_times_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let surv = write(dir.path(), "s.csv", "id,t,delta,x\na,9,1,1\n");
        let long = write(dir.path(), "l.csv", "id,time,z\na,5,1.0\na,2,2.0\n");
        let err = read_dataset(&long, &surv, None).unwrap_err().to_string();
        assert!(err.contains("not sorted"), "err: {err}");
    }

    #[test]
    fn subject_without_measurements_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let surv = write(dir.path(), "s.csv", "id,t,delta,x\na,9,1,1\nb,3,0,0\n");
        let long = write(dir.path(), "l.csv", "id,time,z\na,0,1.0\n");
        let err = read_dataset(&long, &surv, None).unwrap_err().to_string();
        assert!(err.contains('b'), "err: {err}");
    }

    #[test]
    fn atomic_write_replaces_content() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.txt");
        write_atomic(&path, b"one").unwrap();
        write_atomic(&path, b"two").unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "two");
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
