//! Pool files, checkpoints and results files.
//!
//! A pool file starts with the header `D=<int> version=1` followed by one JSON
//! record per image:
//!
//! ```text
//! D=2 version=1
//! {"id":0,"split":"train","label":"positive","width":100.0,"height":80.0,"gt":[[10.0,10.0,50.0,50.0]],"proposals":[{"box":[0.0,0.0,100.0,80.0],"feature":[0.1,0.2]},...]}
//! ```
//!
//! Optional fields: `"annotated": k` marks the image as the k-th annotated
//! one, and `"feature_at": n` in place of `"feature"` points at the n-th value
//! of a little-endian `f64` sidecar stored next to the pool as `<file>.bin`.

use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{ComparisonTable, LearningCurve};
use crate::experiment::{ExperimentState, RunRecord, SCHEMA_VERSION};
use crate::geometry::{BoundingBox, ImageId, ImageSample, Label, Proposal};
use crate::pool::{Pool, Split};

pub const POOL_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ProposalRecord {
    #[serde(rename = "box")]
    bbox: BoundingBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feature: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    feature_at: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ImageRecord {
    id: ImageId,
    split: Split,
    label: Label,
    width: f64,
    height: f64,
    #[serde(default)]
    gt: Vec<BoundingBox>,
    proposals: Vec<ProposalRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    annotated: Option<usize>,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".bin");
    PathBuf::from(s)
}

fn parse_header(line: &str) -> std::result::Result<usize, String> {
    let mut parts = line.split_whitespace();
    let (Some(d), Some(v), None) = (parts.next(), parts.next(), parts.next()) else {
        return Err(format!(
            "expected header `D=<int> version={POOL_VERSION}`, found {line:?}"
        ));
    };
    let dim = d
        .strip_prefix("D=")
        .and_then(|x| x.parse::<usize>().ok())
        .filter(|&x| x > 0)
        .ok_or_else(|| format!("bad dimension field {d:?}"))?;
    match v.strip_prefix("version=").and_then(|x| x.parse::<u32>().ok()) {
        Some(POOL_VERSION) => Ok(dim),
        Some(other) => Err(format!("unsupported pool version {other}")),
        None => Err(format!("bad version field {v:?}")),
    }
}

fn read_sidecar(path: &Path) -> Result<Vec<f64>> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Format(format!(
            "{}: length {} is not a multiple of 8",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

/// Converts a parsed record into an image, moving a full-image window that is
/// not at index 0 to the front.
fn to_image(
    rec: ImageRecord,
    dim: usize,
    sidecar: &mut Option<Vec<f64>>,
    side_path: &Path,
) -> std::result::Result<ImageSample, String> {
    let mut proposals = Vec::with_capacity(rec.proposals.len());
    for p in rec.proposals {
        let feature = match (p.feature, p.feature_at) {
            (Some(f), None) => f,
            (None, Some(at)) => {
                if sidecar.is_none() {
                    *sidecar = Some(read_sidecar(side_path).map_err(|e| e.to_string())?);
                }
                let data = sidecar.as_ref().expect("loaded above");
                let start = at as usize;
                data.get(start..start + dim)
                    .ok_or_else(|| format!("feature_at {at} is past the end of the sidecar"))?
                    .to_vec()
            }
            _ => return Err("each proposal needs exactly one of `feature` or `feature_at`".into()),
        };
        proposals.push(Proposal { bbox: p.bbox, feature });
    }
    let full = BoundingBox::new(0.0, 0.0, rec.width, rec.height).map_err(|e| e.to_string())?;
    if proposals.first().map(|p| p.bbox) != Some(full) {
        match proposals.iter().position(|p| p.bbox == full) {
            Some(k) => {
                let p = proposals.remove(k);
                proposals.insert(0, p);
            }
            None => return Err(format!("image {} has no full-image proposal", rec.id)),
        }
    }
    Ok(ImageSample {
        id: rec.id,
        label: rec.label,
        width: rec.width,
        height: rec.height,
        proposals,
        gt_boxes: rec.gt,
    })
}

/// Reads a pool file (and its sidecar, if records point into one).
pub fn load_pool(path: impl AsRef<Path>) -> Result<Pool> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut lines = Vec::new();
    for line in reader.lines() {
        lines.push(line?);
    }
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let header = lines.first().ok_or_else(|| parse_err(1, "empty file".into()))?;
    let dim = parse_header(header).map_err(|m| parse_err(1, m))?;

    let records: Vec<(usize, ImageRecord)> = lines[1..]
        .par_iter()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(k, l)| {
            serde_json::from_str::<ImageRecord>(l)
                .map(|r| (k + 2, r))
                .map_err(|e| parse_err(k + 2, e.to_string()))
        })
        .collect::<Result<_>>()?;

    let side_path = sidecar_path(path);
    let mut sidecar = None;
    let mut entries = Vec::with_capacity(records.len());
    let mut ranks = Vec::new();
    for (line, rec) in records {
        let split = rec.split;
        if let Some(k) = rec.annotated {
            ranks.push((k, rec.id, line));
        }
        let img = to_image(rec, dim, &mut sidecar, &side_path).map_err(|m| parse_err(line, m))?;
        if let Some(p) = img.proposals.iter().find(|p| p.feature.len() != dim) {
            return Err(Error::Format(format!(
                "{}:{line}: feature of length {} in a D={dim} pool",
                path.display(),
                p.feature.len()
            )));
        }
        entries.push((img, split));
    }
    let mut pool = Pool::new(dim, entries).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    ranks.sort();
    for (k, (rank, id, line)) in ranks.into_iter().enumerate() {
        if rank != k {
            return Err(parse_err(
                line,
                format!("annotation ranks must be 0..n without gaps, found {rank}"),
            ));
        }
        pool.annotate(id).map_err(|e| parse_err(line, e.to_string()))?;
    }
    Ok(pool)
}

fn records(pool: &Pool, sidecar: Option<&mut Vec<f64>>) -> Vec<ImageRecord> {
    let mut side = sidecar;
    let ranks: std::collections::BTreeMap<ImageId, usize> =
        pool.annotated().iter().enumerate().map(|(k, &id)| (id, k)).collect();
    pool.entries()
        .map(|(img, split)| ImageRecord {
            id: img.id,
            split,
            label: img.label,
            width: img.width,
            height: img.height,
            gt: img.gt_boxes.clone(),
            proposals: img
                .proposals
                .iter()
                .map(|p| match side.as_deref_mut() {
                    Some(buf) => {
                        let at = buf.len() as u64;
                        buf.extend_from_slice(&p.feature);
                        ProposalRecord {
                            bbox: p.bbox,
                            feature: None,
                            feature_at: Some(at),
                        }
                    }
                    None => ProposalRecord {
                        bbox: p.bbox,
                        feature: Some(p.feature.clone()),
                        feature_at: None,
                    },
                })
                .collect(),
            annotated: ranks.get(&img.id).copied(),
        })
        .collect()
}

fn write_records(path: &Path, dim: usize, recs: &[ImageRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "D={dim} version={POOL_VERSION}")?;
    for r in recs {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Writes a pool with features inline.
pub fn save_pool(pool: &Pool, path: impl AsRef<Path>) -> Result<()> {
    write_records(path.as_ref(), pool.dim(), &records(pool, None))
}

/// Writes a pool with features packed into `<path>.bin`.
pub fn save_pool_with_sidecar(pool: &Pool, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    let recs = records(pool, Some(&mut buf));
    let bytes: Vec<u8> = buf.iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(sidecar_path(path), bytes)?;
    write_records(path, pool.dim(), &recs)
}

fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

/// Saves the state of a run.
pub fn checkpoint(state: &ExperimentState, path: impl AsRef<Path>) -> Result<()> {
    write_json(state, path.as_ref())
}

/// Loads a checkpoint. Unreadable or foreign content is a schema error.
pub fn resume(path: impl AsRef<Path>) -> Result<ExperimentState> {
    let text = fs::read_to_string(path.as_ref())?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Error::Schema(format!("checkpoint is not valid JSON: {e}")))?;
    match value.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == SCHEMA_VERSION as u64 => {}
        Some(v) => {
            return Err(Error::Schema(format!(
                "checkpoint version {v} is not supported (expected {SCHEMA_VERSION})"
            )))
        }
        None => return Err(Error::Schema("checkpoint has no version field".into())),
    }
    serde_json::from_value(value).map_err(|e| Error::Schema(format!("malformed checkpoint: {e}")))
}

/// Bytes of `run.json`.
pub fn run_record_json(record: &RunRecord) -> Result<Vec<u8>> {
    let mut out = serde_json::to_vec_pretty(record)?;
    out.push(b'\n');
    Ok(out)
}

pub fn write_run_record(record: &RunRecord, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, run_record_json(record)?)?;
    Ok(())
}

/// CSV with one row per curve point: `strategy,seed,n_annotated,pct_of_train,metric_value`.
pub fn curves_csv(curves: &[LearningCurve]) -> String {
    let mut out = String::from("strategy,seed,n_annotated,pct_of_train,metric_value\n");
    for c in curves {
        for p in &c.points {
            out += &format!(
                "{},{},{},{},{}\n",
                c.strategy, c.seed, p.n_annotated, p.pct_of_train, p.metric_value
            );
        }
    }
    out
}

#[derive(Serialize)]
struct CurvesFile<'a> {
    version: u32,
    curves: &'a [LearningCurve],
}

pub fn curves_json(curves: &[LearningCurve]) -> Result<String> {
    Ok(serde_json::to_string_pretty(&CurvesFile {
        version: SCHEMA_VERSION,
        curves,
    })? + "\n")
}

pub fn write_curves(curves: &[LearningCurve], dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::write(dir.join("curve.csv"), curves_csv(curves))?;
    fs::write(dir.join("curve.json"), curves_json(curves)?)?;
    Ok(())
}

pub fn write_table(table: &ComparisonTable, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, table.to_csv())?;
    Ok(())
}

pub fn write_json_file<T: Serialize>(value: &T, path: impl AsRef<Path>) -> Result<()> {
    write_json(value, path.as_ref())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_synthetic, SyntheticConfig};

    fn pool() -> Pool {
        let mut p = generate_synthetic(&SyntheticConfig {
            dim: 3,
            n_train: 6,
            n_test: 2,
            proposals_per_image: 4,
            noise_level: 0.7,
            positive_fraction: 0.5,
            ..Default::default()
        })
        .unwrap();
        p.annotate(ImageId(4)).unwrap();
        p.annotate(ImageId(1)).unwrap();
        p
    }

    #[test]
    fn round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let p = pool();
        let a = dir.path().join("a.pool");
        save_pool(&p, &a).unwrap();
        assert_eq!(load_pool(&a).unwrap(), p);
        let b = dir.path().join("b.pool");
        save_pool_with_sidecar(&p, &b).unwrap();
        assert_eq!(load_pool(&b).unwrap(), p);
        let a2 = dir.path().join("a2.pool");
        save_pool(&load_pool(&a).unwrap(), &a2).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&a2).unwrap());
    }

    #[test]
    fn header_errors() {
        assert!(parse_header("D=3 version=1").is_ok());
        for bad in [
            "D=0 version=1",
            "D=3",
            "D=3 version=2",
            "dim=3 version=1",
            "D=3 version=1 x",
        ] {
            assert!(parse_header(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn truncated_line_names_the_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.pool");
        save_pool(&pool(), &path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        let cut = &lines[3][..lines[3].len() / 2];
        lines[3] = cut;
        fs::write(&path, lines.join("\n")).unwrap();
        match load_pool(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn wrong_dimension_is_a_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.pool");
        save_pool(&pool(), &path).unwrap();
        let text = fs::read_to_string(&path).unwrap().replacen("D=3", "D=4", 1);
        fs::write(&path, text).unwrap();
        assert!(matches!(load_pool(&path), Err(Error::Format(_))));
    }

    #[test]
    fn corrupt_and_foreign_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, "{not json").unwrap();
        assert!(matches!(resume(&path), Err(Error::Schema(_))));
        fs::write(&path, r#"{"version": 99}"#).unwrap();
        assert!(matches!(resume(&path), Err(Error::Schema(_))));
        fs::write(&path, r#"{"version": 1}"#).unwrap();
        assert!(matches!(resume(&path), Err(Error::Schema(_))));
    }
}
