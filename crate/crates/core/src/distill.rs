//! Teacher-ensemble support: a write-once on-disk cache of per-architecture
//! logit matrices, top-K teacher selection, averaged targets and the MSE
//! distillation loss that trainers must reproduce.
//!
//! Cache layout, one pair of files per architecture:
//! `preds_<archid>.f32` holds row-major little-endian `f32` logits and
//! `preds_<archid>.json` holds `{"rows", "cols", "fingerprint"}`, where the
//! fingerprint identifies the ordered list of training examples. Both files
//! are written to a temporary name and renamed into place; the descriptor
//! goes last, so an entry exists exactly when its descriptor does.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::engine::TrainedRecord;
use crate::search_space::{sha256_hex, ArchId};

#[derive(Debug, thiserror::Error)]
pub enum DistillError {
    #[error("cache I/O on {path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("no cached predictions for {0}")]
    Missing(ArchId),
    #[error("cache entry for {0} already exists")]
    Exists(ArchId),
    #[error("cache entry for {id} is corrupt: {reason}")]
    Corrupt { id: ArchId, reason: String },
    #[error("teacher {id} has descriptor {got:?}, expected {expected:?}")]
    DescriptorMismatch { id: ArchId, expected: Descriptor, got: Descriptor },
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape((usize, usize), (usize, usize)),
    #[error("row index {index} out of range for {rows} rows")]
    RowIndex { index: usize, rows: usize },
    #[error("teacher ensemble is empty")]
    NoTeachers,
    #[error("no records to choose teachers from")]
    NoRecords,
    #[error("teacher count must be positive")]
    ZeroTeachers,
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> DistillError + '_ {
    move |source| DistillError::Io { path: path.to_owned(), source }
}

/// Row-major `rows x cols` logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl LogitMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self, DistillError> {
        if data.len() != rows * cols {
            return Err(DistillError::Shape((rows, cols), (data.len(), 1)));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self, DistillError> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.len() != cols {
                return Err(DistillError::Shape((rows.len(), cols), (1, r.len())));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_le_bytes(&self) -> Vec<u8> {
        self.data.iter().flat_map(|v| v.to_le_bytes()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Descriptor {
    pub rows: usize,
    pub cols: usize,
    pub fingerprint: String,
}

/// SHA-256 over the newline-joined example ids, in training order.
pub fn example_fingerprint<S: AsRef<str>>(example_ids: &[S]) -> String {
    let joined: Vec<&str> = example_ids.iter().map(AsRef::as_ref).collect();
    sha256_hex(joined.join("\n").as_bytes())
}

#[derive(Debug, Clone)]
pub struct PredictionCache {
    dir: PathBuf,
}

impl PredictionCache {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, DistillError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        Ok(Self { dir })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn data_file_name(id: &ArchId) -> String {
        format!("preds_{id}.f32")
    }

    pub fn data_path(&self, id: &ArchId) -> PathBuf {
        self.dir.join(Self::data_file_name(id))
    }

    pub fn descriptor_path(&self, id: &ArchId) -> PathBuf {
        self.dir.join(format!("preds_{id}.json"))
    }

    pub fn contains(&self, id: &ArchId) -> bool {
        self.descriptor_path(id).is_file() && self.data_path(id).is_file()
    }

    /// Writes a new entry. Entries are immutable: a second write for the same
    /// id fails with [`DistillError::Exists`].
    pub fn write(&self, id: &ArchId, m: &LogitMatrix, fingerprint: &str) -> Result<(), DistillError> {
        if self.contains(id) {
            return Err(DistillError::Exists(id.clone()));
        }
        let desc = Descriptor { rows: m.rows, cols: m.cols, fingerprint: fingerprint.to_owned() };
        let json = serde_json::to_vec(&desc).expect("descriptor serializes");
        atomic_write(&self.data_path(id), &m.to_le_bytes())?;
        atomic_write(&self.descriptor_path(id), &json)
    }

    pub fn descriptor(&self, id: &ArchId) -> Result<Descriptor, DistillError> {
        read_descriptor(id, &self.descriptor_path(id))
    }

    pub fn read(&self, id: &ArchId) -> Result<(LogitMatrix, Descriptor), DistillError> {
        read_entry(id, &self.descriptor_path(id), &self.data_path(id))
    }

    /// Copies an entry written elsewhere (a `.f32` file with its `.json`
    /// descriptor next to it) into the cache under `id`. Importing a path
    /// that already is this cache's entry for `id` is a no-op.
    pub fn import_file(&self, id: &ArchId, data_path: &Path) -> Result<(), DistillError> {
        if data_path == self.data_path(id) && self.contains(id) {
            return Ok(());
        }
        let (m, desc) = read_entry(id, &data_path.with_extension("json"), data_path)?;
        self.write(id, &m, &desc.fingerprint)
    }
}

fn read_descriptor(id: &ArchId, path: &Path) -> Result<Descriptor, DistillError> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Err(DistillError::Missing(id.clone())),
        Err(e) => return Err(DistillError::Io { path: path.to_owned(), source: e }),
    };
    serde_json::from_slice(&bytes).map_err(|e| DistillError::Corrupt { id: id.clone(), reason: e.to_string() })
}

fn read_entry(id: &ArchId, desc_path: &Path, data_path: &Path) -> Result<(LogitMatrix, Descriptor), DistillError> {
    let desc = read_descriptor(id, desc_path)?;
    let bytes = fs::read(data_path).map_err(io_err(data_path))?;
    if bytes.len() != desc.rows * desc.cols * 4 {
        return Err(DistillError::Corrupt {
            id: id.clone(),
            reason: format!("{} bytes for a {}x{} matrix", bytes.len(), desc.rows, desc.cols),
        });
    }
    let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok((LogitMatrix { rows: desc.rows, cols: desc.cols, data }, desc))
}

fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), DistillError> {
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("entry");
    let tmp = path.with_file_name(format!(".{name}.tmp"));
    let mut f = fs::File::create(&tmp).map_err(io_err(&tmp))?;
    f.write_all(bytes).map_err(io_err(&tmp))?;
    f.sync_all().map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

/// Teachers ordered best score first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeacherEnsemble {
    pub teacher_ids: Vec<ArchId>,
}

impl TeacherEnsemble {
    pub fn len(&self) -> usize {
        self.teacher_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.teacher_ids.is_empty()
    }
}

/// The `k` best records (higher score first, ties by ascending id). Every
/// chosen record must have cached predictions.
pub fn select_teachers(
    records: &[TrainedRecord],
    k: usize,
    cache: &PredictionCache,
) -> Result<TeacherEnsemble, DistillError> {
    if records.is_empty() {
        return Err(DistillError::NoRecords);
    }
    if k == 0 {
        return Err(DistillError::ZeroTeachers);
    }
    let mut ranked: Vec<&TrainedRecord> = records.iter().collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.arch_id.cmp(&b.arch_id)));
    ranked.truncate(k);
    for r in &ranked {
        let key = r.preds_ref.as_ref().unwrap_or(&r.arch_id);
        if r.preds_ref.is_none() || !cache.contains(key) {
            return Err(DistillError::Missing(r.arch_id.clone()));
        }
    }
    Ok(TeacherEnsemble { teacher_ids: ranked.iter().map(|r| r.arch_id.clone()).collect() })
}

/// What gets averaged across teachers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetKind {
    #[default]
    Logits,
    /// Row-wise softmax of each teacher before averaging.
    Probabilities,
}

fn softmax_row(row: &[f32]) -> Vec<f64> {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = row.iter().map(|&v| (v as f64 - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Element-wise mean of the teachers' matrices, restricted to `rows` when
/// given. Summation runs in ascending id order, so the result does not
/// depend on teacher order.
pub fn ensemble_targets(
    cache: &PredictionCache,
    ensemble: &TeacherEnsemble,
    rows: Option<&[usize]>,
    kind: TargetKind,
) -> Result<LogitMatrix, DistillError> {
    let mut ids: Vec<&ArchId> = ensemble.teacher_ids.iter().collect();
    if ids.is_empty() {
        return Err(DistillError::NoTeachers);
    }
    ids.sort();
    let mut expected: Option<Descriptor> = None;
    let mut matrices = Vec::with_capacity(ids.len());
    for id in ids {
        let (m, desc) = cache.read(id)?;
        match &expected {
            None => expected = Some(desc),
            Some(e) if *e != desc => {
                return Err(DistillError::DescriptorMismatch { id: id.clone(), expected: e.clone(), got: desc })
            }
            Some(_) => {}
        }
        matrices.push(m);
    }
    let desc = expected.expect("at least one teacher");
    let all: Vec<usize>;
    let rows = match rows {
        Some(r) => r,
        None => {
            all = (0..desc.rows).collect();
            &all
        }
    };
    if let Some(&index) = rows.iter().find(|&&i| i >= desc.rows) {
        return Err(DistillError::RowIndex { index, rows: desc.rows });
    }
    let n = matrices.len() as f64;
    let mut out = Vec::with_capacity(rows.len() * desc.cols);
    for &r in rows {
        let mut acc = vec![0.0f64; desc.cols];
        for m in &matrices {
            let row = m.row(r);
            match kind {
                TargetKind::Logits => acc.iter_mut().zip(row).for_each(|(a, &v)| *a += v as f64),
                TargetKind::Probabilities => {
                    acc.iter_mut().zip(softmax_row(row)).for_each(|(a, v)| *a += v)
                }
            }
        }
        out.extend(acc.into_iter().map(|a| (a / n) as f32));
    }
    LogitMatrix::new(rows.len(), desc.cols, out)
}

/// Mean over all elements of the squared difference, accumulated in `f64`.
pub fn kd_loss(student: &LogitMatrix, teacher: &LogitMatrix) -> Result<f64, DistillError> {
    if student.shape() != teacher.shape() {
        return Err(DistillError::Shape(student.shape(), teacher.shape()));
    }
    if student.data.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = student
        .data
        .iter()
        .zip(&teacher.data)
        .map(|(&s, &t)| {
            let d = s as f64 - t as f64;
            d * d
        })
        .sum();
    Ok(total / student.data.len() as f64)
}
