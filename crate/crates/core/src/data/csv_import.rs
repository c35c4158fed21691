//! Long-format CSV import.
//!
//! `values.csv` columns: `sample_id,channel,t,value`; optional
//! `labels.csv` columns: `sample_id,label`. Samples are emitted in
//! ascending `sample_id` order, so re-importing the same directory is
//! byte-identical.

use std::collections::BTreeMap;
use std::path::Path;

use super::{save_dataset, DataError, Dataset, DatasetMeta, SplitData};

/// Declared shape of the incoming data.
pub struct ImportSpec {
    pub name: String,
    pub channels: usize,
    pub classes: usize,
    pub length: usize,
    pub split: String,
}

/// Read `values.csv` (+ `labels.csv` if present) from `csv_dir` and write a
/// dataset directory at `out_dir`. Ragged samples and missing channels
/// abort with a diagnostic naming the sample and channel.
pub fn import_csv(csv_dir: &Path, out_dir: &Path, spec: &ImportSpec) -> Result<Dataset, DataError> {
    let values_path = csv_dir.join("values.csv");
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(&values_path)?;

    // sample_id -> [channels][length] with presence tracking
    let mut grids: BTreeMap<i64, (Vec<f32>, Vec<bool>)> = BTreeMap::new();
    let (n, l) = (spec.channels, spec.length);

    for record in reader.records() {
        let record = record?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let field = |idx: usize, name: &str| -> Result<&str, DataError> {
            record.get(idx).ok_or_else(|| DataError::Field {
                line,
                detail: format!("missing column '{name}'"),
            })
        };
        let parse_int = |s: &str, name: &str| -> Result<i64, DataError> {
            s.trim().parse().map_err(|_| DataError::Field {
                line,
                detail: format!("cannot parse {name} from '{s}'"),
            })
        };
        let sample_id = parse_int(field(0, "sample_id")?, "sample_id")?;
        let channel = parse_int(field(1, "channel")?, "channel")? as usize;
        let t = parse_int(field(2, "t")?, "t")? as usize;
        let value: f32 = field(3, "value")?.trim().parse().map_err(|_| DataError::Field {
            line,
            detail: format!("cannot parse value from '{}'", record.get(3).unwrap_or("")),
        })?;
        if channel >= n {
            return Err(DataError::Field {
                line,
                detail: format!("channel {channel} out of range [0, {n}) for sample {sample_id}"),
            });
        }
        if t >= l {
            return Err(DataError::RaggedSample {
                sample_id,
                channel,
                expected: l,
                found: t + 1,
            });
        }
        let entry = grids
            .entry(sample_id)
            .or_insert_with(|| (vec![0.0; n * l], vec![false; n * l]));
        let idx = channel * l + t;
        if entry.1[idx] {
            return Err(DataError::DuplicateCell {
                sample_id,
                channel,
                t,
            });
        }
        entry.0[idx] = value;
        entry.1[idx] = true;
    }

    // completeness: every channel fully populated
    for (&sample_id, (_, present)) in &grids {
        for c in 0..n {
            let filled = present[c * l..(c + 1) * l].iter().filter(|p| **p).count();
            if filled == 0 {
                return Err(DataError::MissingChannel {
                    sample_id,
                    channel: c,
                });
            }
            if filled != l {
                return Err(DataError::RaggedSample {
                    sample_id,
                    channel: c,
                    expected: l,
                    found: filled,
                });
            }
        }
    }

    let labels_path = csv_dir.join("labels.csv");
    let labels = if labels_path.exists() {
        let mut label_map: BTreeMap<i64, i64> = BTreeMap::new();
        let mut reader = csv::ReaderBuilder::new()
            .has_headers(true)
            .from_path(&labels_path)?;
        for record in reader.records() {
            let record = record?;
            let line = record.position().map(|p| p.line()).unwrap_or(0);
            let sid: i64 = record
                .get(0)
                .and_then(|s| s.trim().parse().ok())
                .ok_or(DataError::Field {
                    line,
                    detail: "cannot parse sample_id".into(),
                })?;
            let label: i64 = record
                .get(1)
                .and_then(|s| s.trim().parse().ok())
                .ok_or(DataError::Field {
                    line,
                    detail: "cannot parse label".into(),
                })?;
            label_map.insert(sid, label);
        }
        let mut out = Vec::with_capacity(grids.len());
        for (&sid, _) in &grids {
            let label = *label_map
                .get(&sid)
                .ok_or(DataError::MissingLabel { sample_id: sid })?;
            if label < 0 || label >= spec.classes as i64 {
                return Err(DataError::LabelOutOfRange {
                    index: out.len(),
                    label,
                    classes: spec.classes,
                });
            }
            out.push(label);
        }
        Some(out)
    } else {
        None
    };

    let mut values = Vec::with_capacity(grids.len() * n * l);
    for (_, (grid, _)) in &grids {
        values.extend_from_slice(grid);
    }
    let split = SplitData::new(n, l, values, labels);
    let sample_count = split.samples();

    let dataset = Dataset {
        meta: DatasetMeta {
            name: spec.name.clone(),
            channels: n,
            classes: spec.classes,
            length: l,
            splits: BTreeMap::from([(spec.split.clone(), sample_count)]),
            created_by: "import-csv".into(),
            format_version: 1,
        },
        splits: BTreeMap::from([(spec.split.clone(), split)]),
    };
    save_dataset(out_dir, &dataset)?;
    Ok(dataset)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::fs;

    fn write_long_csv(dir: &Path, rows: &[(i64, usize, usize, f32)]) {
        let mut body = String::from("sample_id,channel,t,value\n");
        for (s, c, t, v) in rows {
            body.push_str(&format!("{s},{c},{t},{v}\n"));
        }
        fs::write(dir.join("values.csv"), body).unwrap();
    }

    fn full_rows(samples: i64, channels: usize, steps: usize) -> Vec<(i64, usize, usize, f32)> {
        let mut rows = Vec::new();
        for s in 0..samples {
            for c in 0..channels {
                for t in 0..steps {
                    rows.push((s, c, t, (s as f32) * 100.0 + (c as f32) * 10.0 + t as f32));
                }
            }
        }
        rows
    }

    fn spec() -> ImportSpec {
        ImportSpec {
            name: "csvtest".into(),
            channels: 3,
            classes: 2,
            length: 4,
            split: "train".into(),
        }
    }

    #[test]
    fn long_format_builds_expected_tensor() {
        let src = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        write_long_csv(src.path(), &full_rows(2, 3, 4));
        fs::write(src.path().join("labels.csv"), "sample_id,label\n0,0\n1,1\n").unwrap();
        let ds = import_csv(src.path(), out.path(), &spec()).unwrap();
        let split = ds.split("train").unwrap();
        assert_eq!(split.samples(), 2);
        assert_eq!(split.values[0], 0.0);
        assert_eq!(split.values[4], 10.0); // sample 0, channel 1, t 0
        assert_eq!(split.values[12], 100.0); // sample 1, channel 0, t 0
        assert_eq!(split.labels, Some(vec![0, 1]));
    }

    #[test]
    fn missing_channel_names_sample_and_channel() {
        let src = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        let rows: Vec<_> = full_rows(2, 3, 4)
            .into_iter()
            .filter(|(s, c, _, _)| !(*s == 1 && *c == 2))
            .collect();
        write_long_csv(src.path(), &rows);
        match import_csv(src.path(), out.path(), &spec()) {
            Err(DataError::MissingChannel { sample_id: 1, channel: 2 }) => {}
            other => panic!("expected MissingChannel, got {other:?}"),
        }
    }

    #[test]
    fn ragged_sample_is_rejected() {
        let src = tempfile::tempdir().unwrap();
        let out = tempfile::tempdir().unwrap();
        let rows: Vec<_> = full_rows(1, 3, 4)
            .into_iter()
            .filter(|(_, c, t, _)| !(*c == 1 && *t == 3))
            .collect();
        write_long_csv(src.path(), &rows);
        match import_csv(src.path(), out.path(), &spec()) {
            Err(DataError::RaggedSample { sample_id: 0, channel: 1, expected: 4, found: 3 }) => {}
            other => panic!("expected RaggedSample, got {other:?}"),
        }
    }

    #[test]
    fn reimport_is_byte_identical() {
        let src = tempfile::tempdir().unwrap();
        let out1 = tempfile::tempdir().unwrap();
        let out2 = tempfile::tempdir().unwrap();
        write_long_csv(src.path(), &full_rows(3, 3, 4));
        import_csv(src.path(), out1.path(), &spec()).unwrap();
        import_csv(src.path(), out2.path(), &spec()).unwrap();
        let a = fs::read(out1.path().join("train.tsdf")).unwrap();
        let b = fs::read(out2.path().join("train.tsdf")).unwrap();
        assert_eq!(a, b);
    }
}
