use super::TrainedRecord;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ReportError {
    #[error("no records to report on")]
    Empty,
    #[error("k must be positive")]
    ZeroK,
}

/// `(t, mean of the min(k, t) largest scores among the first t)`, with `t`
/// counted from 1 in training-completion order.
pub fn top_k_curve(scores: &[f64], k: usize) -> Result<Vec<(usize, f64)>, ReportError> {
    if scores.is_empty() {
        return Err(ReportError::Empty);
    }
    if k == 0 {
        return Err(ReportError::ZeroK);
    }
    // Kept in descending order, at most k long.
    let mut top: Vec<f64> = Vec::with_capacity(k + 1);
    let mut curve = Vec::with_capacity(scores.len());
    for (i, &s) in scores.iter().enumerate() {
        let at = top.partition_point(|&v| v >= s);
        if at < k {
            top.insert(at, s);
            top.truncate(k);
        }
        curve.push((i + 1, top.iter().sum::<f64>() / top.len() as f64));
    }
    Ok(curve)
}

pub fn report_top3_curve(records: &[TrainedRecord], k: usize) -> Result<Vec<(usize, f64)>, ReportError> {
    let scores: Vec<f64> = records.iter().map(|r| r.score).collect();
    top_k_curve(&scores, k)
}

/// Highest score; ties go to the smallest arch id.
pub fn best_record(records: &[TrainedRecord]) -> Option<&TrainedRecord> {
    records.iter().min_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.arch_id.cmp(&b.arch_id)))
}
