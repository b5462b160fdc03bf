//! Corpus files, target caches and atomic writes.
//!
//! A corpus directory holds `manifest.json` plus the files it names. Paths
//! inside the manifest are relative to the manifest's directory.
//!
//! ```text
//! manifest.json    {"annotations": "annotations.csv", "features": "features.csv",
//!                   "features_format": "csv", "feature_dim": 2,
//!                   "label_range": {"activation": {"min": 1, "max": 5},
//!                                   "valence": {"min": 1, "max": 5}},
//!                   "splits": "splits.csv"}
//! annotations.csv  utterance_id,annotator_id,activation,valence
//!                  u1,a1,5,1
//! features.csv     utterance_id,f0,f1
//!                  u1,0.25,-1.5
//! splits.csv       utterance_id,split
//!                  u1,train
//! ```
//!
//! Instead of `splits`, a manifest may give `split_seed` (and optionally
//! `split_fractions`) to draw an assignment with [`assign_splits`].
//! Binary features (`"features_format": "bin"`) are little-endian:
//! magic `EMODFEAT`, `u32` version, `u64` rows, `u64` dim, then per row a
//! `u32` id length, the UTF-8 id and `dim` `f64` values.
//!
//! Target caches are CSV (`utterance_id,n_bins,seed,p0,...`) with cells in
//! row-major order, activation rows first, or a JSON array of the same
//! records when the file name ends in `.json`.

use std::collections::{HashMap, HashSet};
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{assign_splits, AnnotationRecord, Corpus, LabelRange, Split};
use crate::error::{Error, Result};
use crate::grid::BinnedDistribution;
use crate::labels::Target;

/// Writes through a temporary file in the same directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    };
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(&dir).map_err(|e| Error::io(&dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn read_to_string(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeaturesFormat {
    #[default]
    Csv,
    Bin,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelRanges {
    pub activation: LabelRange,
    pub valence: LabelRange,
}

impl Default for LabelRanges {
    fn default() -> Self {
        Self {
            activation: LabelRange::UNIT,
            valence: LabelRange::UNIT,
        }
    }
}

fn default_fractions() -> (f64, f64) {
    (0.7, 0.15)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub annotations: PathBuf,
    pub features: PathBuf,
    #[serde(default)]
    pub features_format: FeaturesFormat,
    pub feature_dim: usize,
    #[serde(default)]
    pub label_range: LabelRanges,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub splits: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split_seed: Option<u64>,
    #[serde(default = "default_fractions")]
    pub split_fractions: (f64, f64),
}

impl CorpusManifest {
    pub fn read(path: &Path) -> Result<Self> {
        let text = read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        write_atomic(path, format!("{text}\n").as_bytes())
    }
}

/// Resolves a corpus argument that may name the directory or the manifest.
pub fn manifest_path(corpus: &Path) -> PathBuf {
    if corpus.is_dir() {
        corpus.join("manifest.json")
    } else {
        corpus.to_path_buf()
    }
}

/// Raw annotation rows as written in the file, before scaling.
pub fn read_annotations(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let headers = rdr.headers().map_err(|e| csv_error(path, e))?.clone();
    let expected = ["utterance_id", "annotator_id", "activation", "valence"];
    if headers.iter().map(str::trim).ne(expected) {
        return Err(Error::parse(path, format!("header must be {}", expected.join(","))));
    }
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| csv_error(path, e))?;
        let num = |j: usize, what: &str| -> Result<f64> {
            row[j]
                .trim()
                .parse::<f64>()
                .map_err(|_| Error::parse(path, format!("row {line}: bad {what} '{}'", &row[j])))
        };
        out.push(AnnotationRecord::new(
            row[0].trim(),
            row[1].trim(),
            num(2, "activation")?,
            num(3, "valence")?,
        ));
    }
    Ok(out)
}

pub fn write_annotations(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["utterance_id", "annotator_id", "activation", "valence"])
        .expect("in-memory write");
    for r in records {
        w.write_record([
            r.utterance_id.clone(),
            r.annotator_id.clone(),
            r.activation.to_string(),
            r.valence.to_string(),
        ])
        .expect("in-memory write");
    }
    write_atomic(path, &w.into_inner().expect("in-memory flush"))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    if !e.is_io_error() {
        return Error::parse(path, e.to_string());
    }
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        _ => unreachable!("checked is_io_error"),
    }
}

/// Ordered feature rows.
pub type FeatureRows = Vec<(String, Vec<f64>)>;

pub fn read_features_csv(path: &Path, dim: usize) -> Result<FeatureRows> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let width = rdr.headers().map_err(|e| csv_error(path, e))?.len();
    if width != dim + 1 {
        return Err(Error::parse(
            path,
            format!(
                "header has {} feature columns, manifest says {dim}",
                width.saturating_sub(1)
            ),
        ));
    }
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let values = row
            .iter()
            .skip(1)
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::parse(path, format!("row {}: unparsable feature value", i + 2)))?;
        out.push((row[0].trim().to_string(), values));
    }
    Ok(out)
}

pub fn write_features_csv(path: &Path, rows: &[(String, Vec<f64>)], dim: usize) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["utterance_id".to_string()];
    header.extend((0..dim).map(|i| format!("f{i}")));
    w.write_record(&header).expect("in-memory write");
    for (id, f) in rows {
        if f.len() != dim {
            return Err(Error::shape(
                "write_features",
                format!("row {id} has {} values, expected {dim}", f.len()),
            ));
        }
        let mut rec = vec![id.clone()];
        rec.extend(f.iter().map(|v| v.to_string()));
        w.write_record(&rec).expect("in-memory write");
    }
    write_atomic(path, &w.into_inner().expect("in-memory flush"))
}

const FEATURES_MAGIC: &[u8; 8] = b"EMODFEAT";
const FEATURES_VERSION: u32 = 1;

pub fn write_features_bin(path: &Path, rows: &[(String, Vec<f64>)], dim: usize) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(FEATURES_MAGIC);
    out.extend_from_slice(&FEATURES_VERSION.to_le_bytes());
    out.extend_from_slice(&(rows.len() as u64).to_le_bytes());
    out.extend_from_slice(&(dim as u64).to_le_bytes());
    for (id, f) in rows {
        if f.len() != dim {
            return Err(Error::shape(
                "write_features",
                format!("row {id} has {} values, expected {dim}", f.len()),
            ));
        }
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id.as_bytes());
        for v in f {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(path, &out)
}

pub fn read_features_bin(path: &Path, dim: usize) -> Result<FeatureRows> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::parse(path, msg.to_string());
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let end = pos
            .checked_add(n)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated features file"))?;
        let s = &bytes[pos..end];
        pos = end;
        Ok(s)
    };
    if take(8)? != FEATURES_MAGIC {
        return Err(bad("not a packed features file"));
    }
    if u32::from_le_bytes(take(4)?.try_into().unwrap()) != FEATURES_VERSION {
        return Err(bad("unsupported features version"));
    }
    let rows = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    let file_dim = u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize;
    if file_dim != dim {
        return Err(Error::parse(
            path,
            format!("file has dimension {file_dim}, manifest says {dim}"),
        ));
    }
    let mut out = Vec::with_capacity(rows.min(1 << 20));
    for _ in 0..rows {
        let n = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let id = String::from_utf8(take(n)?.to_vec()).map_err(|_| bad("utterance id is not UTF-8"))?;
        let f = (0..dim)
            .map(|_| take(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())))
            .collect::<Result<Vec<_>>>()?;
        out.push((id, f));
    }
    if pos != bytes.len() {
        return Err(bad("trailing bytes in features file"));
    }
    Ok(out)
}

pub fn read_splits(path: &Path) -> Result<HashMap<String, Split>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut out = HashMap::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| csv_error(path, e))?;
        if row.len() < 2 {
            return Err(Error::parse(
                path,
                format!("row {}: expected utterance_id,split", i + 2),
            ));
        }
        let split = Split::parse(row[1].trim())
            .ok_or_else(|| Error::parse(path, format!("row {}: unknown split '{}'", i + 2, &row[1])))?;
        out.insert(row[0].trim().to_string(), split);
    }
    Ok(out)
}

pub fn write_splits(path: &Path, corpus: &Corpus) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["utterance_id", "split"]).expect("in-memory write");
    for u in corpus.utterances() {
        w.write_record([u.id.as_str(), u.split.as_str()])
            .expect("in-memory write");
    }
    write_atomic(path, &w.into_inner().expect("in-memory flush"))
}

/// Reads the manifest, scales labels onto [-1, 1] and assembles the corpus.
pub fn load_corpus(manifest_file: &Path) -> Result<Corpus> {
    let manifest = CorpusManifest::read(manifest_file)?;
    let base = manifest_file.parent().unwrap_or(Path::new("."));
    let ann_path = base.join(&manifest.annotations);
    let raw = read_annotations(&ann_path)?;
    let ranges = manifest.label_range;
    let mut scaled = Vec::with_capacity(raw.len());
    for (i, r) in raw.iter().enumerate() {
        for (what, v, range) in [
            ("activation", r.activation, ranges.activation),
            ("valence", r.valence, ranges.valence),
        ] {
            if !range.contains(v) {
                return Err(Error::data(format!(
                    "{} row {}: {what} {v} outside declared range [{}, {}]",
                    ann_path.display(),
                    i + 2,
                    range.min,
                    range.max
                )));
            }
        }
        scaled.push(AnnotationRecord::new(
            r.utterance_id.clone(),
            r.annotator_id.clone(),
            ranges.activation.scale(r.activation),
            ranges.valence.scale(r.valence),
        ));
    }

    let feat_path = base.join(&manifest.features);
    let rows = match manifest.features_format {
        FeaturesFormat::Csv => read_features_csv(&feat_path, manifest.feature_dim)?,
        FeaturesFormat::Bin => read_features_bin(&feat_path, manifest.feature_dim)?,
    };
    let annotated: HashSet<&str> = scaled.iter().map(|r| r.utterance_id.as_str()).collect();
    let mut features = HashMap::with_capacity(rows.len());
    for (id, f) in rows {
        if !annotated.contains(id.as_str()) {
            log::warn!("{}: features for unknown utterance '{id}' ignored", feat_path.display());
            continue;
        }
        features.insert(id, f);
    }

    let splits = match (&manifest.splits, manifest.split_seed) {
        (Some(p), _) => read_splits(&base.join(p))?,
        (None, Some(seed)) => {
            let mut order: Vec<String> = Vec::new();
            let mut anns: HashMap<&str, Vec<String>> = HashMap::new();
            for r in &scaled {
                let e = anns.entry(r.utterance_id.as_str()).or_insert_with(|| {
                    order.push(r.utterance_id.clone());
                    Vec::new()
                });
                e.push(r.annotator_id.clone());
            }
            let pairs: Vec<(String, Vec<String>)> = order
                .into_iter()
                .map(|id| {
                    let a = anns.remove(id.as_str()).unwrap_or_default();
                    (id, a)
                })
                .collect();
            let assigned = assign_splits(&pairs, seed, manifest.split_fractions)?;
            pairs.into_iter().map(|p| p.0).zip(assigned).collect()
        }
        (None, None) => HashMap::new(),
    };
    Corpus::from_records(&scaled, &features, &splits)
}

/// Writes a scaled corpus as a unit-range corpus directory.
pub fn write_corpus(dir: &Path, corpus: &Corpus, format: FeaturesFormat) -> Result<PathBuf> {
    let records: Vec<AnnotationRecord> = corpus
        .utterances()
        .iter()
        .flat_map(|u| u.annotations.iter().cloned())
        .collect();
    write_annotations(&dir.join("annotations.csv"), &records)?;
    let rows: FeatureRows = corpus
        .utterances()
        .iter()
        .map(|u| (u.id.clone(), u.features.clone()))
        .collect();
    let features = match format {
        FeaturesFormat::Csv => {
            write_features_csv(&dir.join("features.csv"), &rows, corpus.feature_dim())?;
            "features.csv"
        }
        FeaturesFormat::Bin => {
            write_features_bin(&dir.join("features.bin"), &rows, corpus.feature_dim())?;
            "features.bin"
        }
    };
    write_splits(&dir.join("splits.csv"), corpus)?;
    let manifest = CorpusManifest {
        annotations: "annotations.csv".into(),
        features: features.into(),
        features_format: format,
        feature_dim: corpus.feature_dim(),
        label_range: LabelRanges::default(),
        splits: Some("splits.csv".into()),
        split_seed: None,
        split_fractions: default_fractions(),
    };
    let path = dir.join("manifest.json");
    manifest.write(&path)?;
    Ok(path)
}

#[derive(Serialize, Deserialize)]
struct TargetRecord {
    utterance_id: String,
    n_bins: usize,
    seed: u64,
    probabilities: Vec<f64>,
}

fn is_json(path: &Path) -> bool {
    path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"))
}

pub fn write_targets(path: &Path, targets: &[Target]) -> Result<()> {
    if is_json(path) {
        let recs: Vec<TargetRecord> = targets
            .iter()
            .map(|t| TargetRecord {
                utterance_id: t.utterance_id.clone(),
                n_bins: t.distribution.n(),
                seed: t.seed,
                probabilities: t.distribution.to_flat(),
            })
            .collect();
        let text = serde_json::to_string_pretty(&recs).expect("targets serialize");
        return write_atomic(path, format!("{text}\n").as_bytes());
    }
    let n = targets.first().map_or(4, |t| t.distribution.n());
    if targets.iter().any(|t| t.distribution.n() != n) {
        return Err(Error::shape(
            "write_targets",
            "targets with different bin counts cannot share a CSV",
        ));
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["utterance_id".to_string(), "n_bins".into(), "seed".into()];
    header.extend((0..n * n).map(|i| format!("p{i}")));
    w.write_record(&header).expect("in-memory write");
    for t in targets {
        let mut rec = vec![t.utterance_id.clone(), n.to_string(), t.seed.to_string()];
        rec.extend(t.distribution.to_flat().iter().map(|v| v.to_string()));
        w.write_record(&rec).expect("in-memory write");
    }
    write_atomic(path, &w.into_inner().expect("in-memory flush"))
}

pub fn read_targets(path: &Path) -> Result<Vec<Target>> {
    let to_target = |r: TargetRecord| -> Result<Target> {
        let distribution = BinnedDistribution::from_flat(r.n_bins, &r.probabilities)
            .map_err(|e| Error::parse(path, format!("utterance {}: {e}", r.utterance_id)))?;
        Ok(Target {
            utterance_id: r.utterance_id,
            seed: r.seed,
            distribution,
        })
    };
    if is_json(path) {
        let recs: Vec<TargetRecord> =
            serde_json::from_str(&read_to_string(path)?).map_err(|e| Error::parse(path, e.to_string()))?;
        return recs.into_iter().map(to_target).collect();
    }
    let mut rdr = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| csv_error(path, e))?;
        let bad = || Error::parse(path, format!("row {}: malformed target record", i + 2));
        if row.len() < 3 {
            return Err(bad());
        }
        let n_bins: usize = row[1].trim().parse().map_err(|_| bad())?;
        let seed: u64 = row[2].trim().parse().map_err(|_| bad())?;
        let probabilities = row
            .iter()
            .skip(3)
            .map(|v| v.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| bad())?;
        out.push(to_target(TargetRecord {
            utterance_id: row[0].trim().to_string(),
            n_bins,
            seed,
            probabilities,
        })?);
    }
    Ok(out)
}

/// Targets keyed by utterance id.
pub fn targets_by_id(targets: Vec<Target>) -> Result<HashMap<String, BinnedDistribution>> {
    let mut out = HashMap::with_capacity(targets.len());
    for t in targets {
        if out.insert(t.utterance_id.clone(), t.distribution).is_some() {
            return Err(Error::data(format!(
                "duplicate target for utterance {}",
                t.utterance_id
            )));
        }
    }
    Ok(out)
}
