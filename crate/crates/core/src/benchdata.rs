//! Architecture/score dataset files.
//!
//! Canonical format: line-delimited JSON. Line 1 is a header
//! `{"format":"seqnas-bench","version":1,"layout_fp":..,"avec_len":..,"fields":[..]}`;
//! every following line is one [`BenchRecord`]. Third-party tables come in
//! through the CSV and headerless-JSONL importers.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{self, BufRead, BufReader, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::avec::{FeatureLayout, FeatureVector};
use crate::search_space::{spec_digest, ArchId, ArchitectureSpec};
use crate::surrogate::{FeatureMatrix, SurrogateError};

pub const FORMAT: &str = "seqnas-bench";
pub const VERSION: u32 = 1;
pub const FIELDS: [&str; 7] = ["dataset", "method", "spec", "avec", "best_score", "metric_name", "epochs"];
const UNKNOWN_METRIC: &str = "unknown";

#[derive(Debug, thiserror::Error)]
pub enum BenchError {
    #[error("I/O: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("record {index}: {message}")]
    Record { index: usize, message: String },
    #[error("file layout {got} does not match expected layout {expected}")]
    Layout { expected: String, got: String },
    #[error("no records")]
    Empty,
    #[error("bin count must be positive")]
    ZeroBins,
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    /// Queried by the predictor-guided search.
    Ours,
    Random,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Method::Ours => "ours",
            Method::Random => "random",
        })
    }
}

impl FromStr for Method {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ours" => Ok(Method::Ours),
            "random" => Ok(Method::Random),
            other => Err(format!("unknown method `{other}`")),
        }
    }
}

fn unknown_metric() -> String {
    UNKNOWN_METRIC.to_owned()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchRecord {
    pub dataset: String,
    pub method: Method,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<ArchitectureSpec>,
    pub avec: Vec<u8>,
    pub best_score: f64,
    #[serde(default = "unknown_metric")]
    pub metric_name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub epochs: Option<u32>,
}

impl BenchRecord {
    pub fn feature_vector(&self) -> FeatureVector {
        FeatureVector::new(self.avec.clone())
    }

    /// Id of the stored spec, if any.
    pub fn arch_id(&self) -> Option<ArchId> {
        self.spec.as_ref().map(spec_digest)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchHeader {
    pub format: String,
    pub version: u32,
    pub layout_fp: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub avec_len: Option<usize>,
    pub fields: Vec<String>,
}

impl BenchHeader {
    pub fn for_layout(layout: &FeatureLayout) -> Self {
        Self {
            format: FORMAT.into(),
            version: VERSION,
            layout_fp: layout.fingerprint().into(),
            avec_len: Some(layout.len()),
            fields: FIELDS.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchFile {
    pub header: BenchHeader,
    pub records: Vec<BenchRecord>,
}

impl BenchFile {
    pub fn check_layout(&self, layout: &FeatureLayout) -> Result<(), BenchError> {
        if self.header.layout_fp != layout.fingerprint() {
            return Err(BenchError::Layout {
                expected: layout.fingerprint().into(),
                got: self.header.layout_fp.clone(),
            });
        }
        Ok(())
    }
}

fn check_record(index: usize, r: &BenchRecord, layout: &FeatureLayout) -> Result<(), BenchError> {
    let err = |message: String| BenchError::Record { index, message };
    if r.avec.len() != layout.len() {
        return Err(err(format!("avec has {} entries, layout has {}", r.avec.len(), layout.len())));
    }
    if r.avec.iter().any(|&b| b > 1) {
        return Err(err("avec entries must be 0 or 1".into()));
    }
    if !r.best_score.is_finite() {
        return Err(err("best_score is not finite".into()));
    }
    if let Some(spec) = &r.spec {
        let encoded = layout.encode(spec).map_err(|e| err(e.to_string()))?;
        if encoded.bits != r.avec {
            return Err(err("avec does not match the encoded spec".into()));
        }
    }
    Ok(())
}

/// Writes the canonical format. All records must match `layout`.
pub fn write_bench<W: Write>(mut w: W, records: &[BenchRecord], layout: &FeatureLayout) -> Result<(), BenchError> {
    for (i, r) in records.iter().enumerate() {
        check_record(i, r, layout)?;
    }
    serde_json::to_writer(&mut w, &BenchHeader::for_layout(layout)).map_err(io::Error::from)?;
    w.write_all(b"\n")?;
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_bench_file(path: &Path, records: &[BenchRecord], layout: &FeatureLayout) -> Result<(), BenchError> {
    let file = fs::File::create(path)?;
    write_bench(io::BufWriter::new(file), records, layout)
}

/// Reads the canonical format; errors carry 1-based line numbers.
pub fn read_bench<R: Read>(r: R) -> Result<BenchFile, BenchError> {
    let mut lines = BufReader::new(r).lines();
    let first = lines.next().ok_or(BenchError::Line { line: 1, message: "missing header".into() })??;
    let header: BenchHeader =
        serde_json::from_str(&first).map_err(|e| BenchError::Line { line: 1, message: e.to_string() })?;
    if header.format != FORMAT || header.version != VERSION {
        return Err(BenchError::Line {
            line: 1,
            message: format!("unsupported format {} v{}", header.format, header.version),
        });
    }
    let mut expected_len = header.avec_len;
    let mut records = Vec::new();
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: BenchRecord =
            serde_json::from_str(&line).map_err(|e| BenchError::Line { line: line_no, message: e.to_string() })?;
        let len = *expected_len.get_or_insert(rec.avec.len());
        if rec.avec.len() != len {
            return Err(BenchError::Line {
                line: line_no,
                message: format!("avec has {} entries, header declares {len}", rec.avec.len()),
            });
        }
        records.push(rec);
    }
    Ok(BenchFile { header, records })
}

pub fn read_bench_file(path: &Path) -> Result<BenchFile, BenchError> {
    read_bench(fs::File::open(path)?)
}

/// Fills in missing specs by decoding `avec` and checks stored specs
/// against their vectors.
pub fn complete_specs(records: &mut [BenchRecord], layout: &FeatureLayout) -> Result<(), BenchError> {
    for (i, r) in records.iter_mut().enumerate() {
        if r.spec.is_none() {
            let spec = layout
                .decode(&r.feature_vector())
                .map_err(|e| BenchError::Record { index: i, message: e.to_string() })?;
            r.spec = Some(spec);
        }
        check_record(i, r, layout)?;
    }
    Ok(())
}

#[derive(Debug, Deserialize)]
struct CsvRow {
    dataset: String,
    method: String,
    avec: String,
    best_score: f64,
    #[serde(default)]
    metric_name: Option<String>,
    #[serde(default)]
    epochs: Option<u32>,
}

/// Imports a CSV with columns `dataset,method,avec,best_score` plus optional
/// `metric_name,epochs`; `avec` is a string of `0`/`1`.
pub fn import_csv<R: Read>(r: R) -> Result<Vec<BenchRecord>, BenchError> {
    let mut reader = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for (i, row) in reader.deserialize::<CsvRow>().enumerate() {
        let line = i + 2;
        let bad = |message: String| BenchError::Line { line, message };
        let row = row.map_err(|e| bad(e.to_string()))?;
        let avec: FeatureVector = row.avec.trim().parse().map_err(|e: crate::avec::ParseVectorError| bad(e.to_string()))?;
        out.push(BenchRecord {
            dataset: row.dataset,
            method: row.method.parse().map_err(bad)?,
            spec: None,
            avec: avec.bits,
            best_score: row.best_score,
            metric_name: row.metric_name.filter(|m| !m.is_empty()).unwrap_or_else(unknown_metric),
            epochs: row.epochs,
        });
    }
    Ok(out)
}

/// Imports headerless JSONL records (same fields as the canonical format).
pub fn import_jsonl<R: Read>(r: R) -> Result<Vec<BenchRecord>, BenchError> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(r).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| BenchError::Line { line: i + 1, message: e.to_string() })?);
    }
    Ok(out)
}

/// Equal-width bins over `[min, max]`, each `(lower edge, count)`. The last
/// bin is closed on the right. A zero-width range puts everything in one bin.
pub fn histogram(scores: &[f64], bins: usize) -> Result<Vec<(f64, usize)>, BenchError> {
    if scores.is_empty() {
        return Err(BenchError::Empty);
    }
    if bins == 0 {
        return Err(BenchError::ZeroBins);
    }
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return Ok(vec![(min, scores.len())]);
    }
    let width = (max - min) / bins as f64;
    let mut counts = vec![0usize; bins];
    for &s in scores {
        let k = (((s - min) / width).floor() as usize).min(bins - 1);
        counts[k] += 1;
    }
    Ok(counts.into_iter().enumerate().map(|(i, c)| (min + i as f64 * width, c)).collect())
}

pub fn record_histogram(records: &[BenchRecord], bins: usize) -> Result<Vec<(f64, usize)>, BenchError> {
    let scores: Vec<f64> = records.iter().map(|r| r.best_score).collect();
    histogram(&scores, bins)
}

/// Surrogate training data: row `i` is record `i`'s avec, target its score.
pub fn to_surrogate_dataset(records: &[BenchRecord], layout_fp: &str) -> Result<(FeatureMatrix, Vec<f64>), BenchError> {
    let cols = records.first().map_or(0, |r| r.avec.len());
    let mut m = FeatureMatrix::new(layout_fp, cols);
    for (i, r) in records.iter().enumerate() {
        m.push(&r.avec).map_err(|_| BenchError::Record {
            index: i,
            message: format!("avec has {} entries, expected {cols}", r.avec.len()),
        })?;
    }
    Ok((m, records.iter().map(|r| r.best_score).collect()))
}

/// Record counts per `(dataset, method)` cell.
pub fn partition_counts(records: &[BenchRecord]) -> BTreeMap<(String, Method), usize> {
    let mut counts = BTreeMap::new();
    for r in records {
        *counts.entry((r.dataset.clone(), r.method)).or_insert(0) += 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search_space::{SamplingMode, SearchSpaceConfig};
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn records(n: usize, seed: u64) -> (FeatureLayout, Vec<BenchRecord>) {
        let space = SearchSpaceConfig::default();
        let layout = FeatureLayout::new(&space).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let recs = (0..n)
            .map(|i| {
                let spec = space.sample(&mut rng, SamplingMode::PerFactor).unwrap();
                BenchRecord {
                    dataset: format!("ds{}", i % 2),
                    method: if i % 3 == 0 { Method::Random } else { Method::Ours },
                    avec: layout.encode(&spec).unwrap().bits,
                    spec: (i % 2 == 0).then_some(spec),
                    best_score: rng.random::<f64>(),
                    metric_name: "roc_auc".into(),
                    epochs: (i % 4 == 0).then_some(10),
                }
            })
            .collect();
        (layout, recs)
    }

    #[test]
    fn round_trip() {
        let (layout, recs) = records(10, 1);
        let mut buf = Vec::new();
        write_bench(&mut buf, &recs, &layout).unwrap();
        let back = read_bench(buf.as_slice()).unwrap();
        back.check_layout(&layout).unwrap();
        assert_eq!(back.records, recs);
        for (a, b) in back.records.iter().zip(&recs) {
            assert_eq!(a.best_score.to_bits(), b.best_score.to_bits());
        }
    }

    #[test]
    fn header_only_is_empty() {
        let (layout, _) = records(0, 1);
        let mut buf = Vec::new();
        write_bench(&mut buf, &[], &layout).unwrap();
        assert!(read_bench(buf.as_slice()).unwrap().records.is_empty());
    }

    #[test]
    fn bad_avec_length_reports_line() {
        let (layout, recs) = records(3, 1);
        let mut buf = Vec::new();
        write_bench(&mut buf, &recs, &layout).unwrap();
        let mut text = String::from_utf8(buf).unwrap();
        let mut bad = recs[1].clone();
        bad.avec.push(0);
        text.push_str(&serde_json::to_string(&bad).unwrap());
        text.push('\n');
        match read_bench(text.as_bytes()) {
            Err(BenchError::Line { line, .. }) => assert_eq!(line, 5),
            other => panic!("{other:?}"),
        }
        let garbage = format!("{}\n{{not json\n", serde_json::to_string(&BenchHeader::for_layout(&layout)).unwrap());
        assert!(matches!(read_bench(garbage.as_bytes()), Err(BenchError::Line { line: 2, .. })));
        assert!(matches!(read_bench(&b""[..]), Err(BenchError::Line { line: 1, .. })));
    }

    #[test]
    fn write_rejects_inconsistent_records() {
        let (layout, mut recs) = records(4, 2);
        recs[0].avec[0] ^= 1;
        assert!(matches!(write_bench(Vec::new(), &recs, &layout), Err(BenchError::Record { index: 0, .. })));
    }

    #[test]
    fn histogram_examples() {
        let h = histogram(&[0.1, 0.2, 0.8, 0.9], 2).unwrap();
        assert_eq!(h.len(), 2);
        assert_abs_diff_eq!(h[0].0, 0.1, epsilon = 1e-12);
        assert_abs_diff_eq!(h[1].0, 0.5, epsilon = 1e-12);
        assert_eq!((h[0].1, h[1].1), (2, 2));
        assert_eq!(histogram(&[0.4], 5).unwrap(), vec![(0.4, 1)]);
        assert!(matches!(histogram(&[], 3), Err(BenchError::Empty)));
        assert!(matches!(histogram(&[1.0], 0), Err(BenchError::ZeroBins)));
    }

    #[test]
    fn surrogate_dataset_shapes() {
        let (layout, recs) = records(5, 3);
        let (m, y) = to_surrogate_dataset(&recs, layout.fingerprint()).unwrap();
        assert_eq!((m.rows(), m.cols(), y.len()), (5, 43, 5));
        assert_eq!(m.row(2), recs[2].avec.as_slice());
        let (m, y) = to_surrogate_dataset(&[], layout.fingerprint()).unwrap();
        assert_eq!((m.rows(), y.len()), (0, 0));
        let mut mixed = recs.clone();
        mixed[3].avec.pop();
        assert!(matches!(to_surrogate_dataset(&mixed, "x"), Err(BenchError::Record { index: 3, .. })));
    }

    #[test]
    fn imports_and_completes_specs() {
        let (layout, recs) = records(4, 4);
        let mut csv_text = String::from("dataset,method,avec,best_score,metric_name\n");
        for r in &recs {
            csv_text.push_str(&format!(
                "{},{},{},{},{}\n",
                r.dataset,
                r.method,
                r.feature_vector(),
                r.best_score,
                r.metric_name
            ));
        }
        let mut imported = import_csv(csv_text.as_bytes()).unwrap();
        complete_specs(&mut imported, &layout).unwrap();
        for (a, b) in imported.iter().zip(&recs) {
            assert_eq!(a.avec, b.avec);
            assert_eq!(a.best_score.to_bits(), b.best_score.to_bits());
            assert_eq!(layout.encode(a.spec.as_ref().unwrap()).unwrap().bits, b.avec);
        }
        let no_metric = "dataset,method,avec,best_score\nx,random,0101,0.5\n";
        let r = import_csv(no_metric.as_bytes()).unwrap();
        assert_eq!(r[0].metric_name, "unknown");
        assert!(import_csv("dataset,method,avec,best_score\nx,sideways,01,0.5\n".as_bytes()).is_err());

        let jsonl: String = recs.iter().map(|r| serde_json::to_string(r).unwrap() + "\n").collect();
        assert_eq!(import_jsonl(jsonl.as_bytes()).unwrap(), recs);
        let bare = r#"{"dataset":"d","method":"ours","avec":[1,0],"best_score":0.5}"#;
        assert_eq!(import_jsonl(bare.as_bytes()).unwrap()[0].metric_name, "unknown");
    }

    #[test]
    fn partition_counts_by_cell() {
        let (_, recs) = records(9, 5);
        let counts = partition_counts(&recs);
        assert_eq!(counts.values().sum::<usize>(), 9);
        assert_eq!(counts[&("ds0".to_string(), Method::Random)], 2);
    }

    proptest! {
        #[test]
        fn histogram_partitions_and_ignores_order(
            mut scores in prop::collection::vec(-10.0f64..10.0, 1..80),
            bins in 1usize..12,
        ) {
            let h = histogram(&scores, bins).unwrap();
            prop_assert_eq!(h.iter().map(|b| b.1).sum::<usize>(), scores.len());
            scores.reverse();
            prop_assert_eq!(histogram(&scores, bins).unwrap(), h);
        }

        #[test]
        fn scores_round_trip_bit_exact(scores in prop::collection::vec(any::<f64>().prop_filter("finite", |v| v.is_finite()), 1..20)) {
            let (layout, mut recs) = records(scores.len(), 6);
            for (r, s) in recs.iter_mut().zip(&scores) {
                r.best_score = *s;
            }
            let mut buf = Vec::new();
            write_bench(&mut buf, &recs, &layout).unwrap();
            let back = read_bench(buf.as_slice()).unwrap();
            for (a, s) in back.records.iter().zip(&scores) {
                prop_assert_eq!(a.best_score.to_bits(), s.to_bits());
            }
        }
    }
}
