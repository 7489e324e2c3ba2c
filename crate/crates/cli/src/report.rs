//! Similarity reports read back from a bundle.

use layertour_core::similarity::{pearson_r, IndexKind, SimilarityMatrix};
use serde::Serialize;

use crate::bundle::Bundle;
use crate::error::{PipelineError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Json,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = PipelineError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(PipelineError::Config(format!("unknown report format {other:?} (json or csv)"))),
        }
    }
}

/// The primary matrix of one kind, with the correlation against the other
/// kind when the bundle has both.
#[derive(Debug, Clone, Serialize)]
pub struct SimilarityReport {
    pub row_model: String,
    pub col_model: String,
    pub matrix: SimilarityMatrix,
    pub pearson_r: Option<f64>,
}

/// Pearson correlation over the cells finite in both matrices.
pub fn kind_correlation(a: &SimilarityMatrix, b: &SimilarityMatrix) -> Option<f64> {
    let (xs, ys): (Vec<f64>, Vec<f64>) = a
        .comparison_values()
        .into_iter()
        .zip(b.comparison_values())
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .unzip();
    pearson_r(&xs, &ys).ok()
}

pub fn similarity_report(bundle: &Bundle, kind: IndexKind) -> Result<SimilarityReport> {
    let entry = bundle
        .manifest
        .primary_similarity(kind)
        .ok_or_else(|| PipelineError::Config(format!("bundle has no {kind} similarity matrix")))?;
    let matrix = bundle.similarity_matrix(entry)?;
    let other = match kind {
        IndexKind::CkaLinear => IndexKind::Procrustes,
        IndexKind::Procrustes => IndexKind::CkaLinear,
    };
    let pearson_r = match bundle.manifest.primary_similarity(other) {
        Some(e) => kind_correlation(&matrix, &bundle.similarity_matrix(e)?),
        None => None,
    };
    Ok(SimilarityReport {
        row_model: entry.row_model.clone(),
        col_model: entry.col_model.clone(),
        matrix,
        pearson_r,
    })
}

impl SimilarityReport {
    pub fn render(&self, format: ReportFormat) -> String {
        match format {
            ReportFormat::Json => serde_json::to_string_pretty(self).expect("report serializes") + "\n",
            ReportFormat::Csv => {
                let mut out = self.matrix.to_csv();
                if let Some(r) = self.pearson_r {
                    out.push_str(&format!("# pearson_r {r}\n"));
                }
                out
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(kind: IndexKind, scores: Vec<Vec<f64>>) -> SimilarityMatrix {
        let ids: Vec<String> = (0..scores.len()).map(|i| format!("l{i}")).collect();
        SimilarityMatrix {
            rows: ids.clone(),
            cols: ids,
            scores,
            index_kind: kind,
        }
    }

    #[test]
    fn correlation_skips_nan_cells() {
        let a = matrix(
            IndexKind::CkaLinear,
            vec![vec![1.0, 0.9, 0.5, 0.2], vec![0.9, 1.0, 0.7, f64::NAN], vec![0.5, 0.7, 1.0, 0.4], vec![0.2, f64::NAN, 0.4, 1.0]],
        );
        let b = matrix(
            IndexKind::Procrustes,
            vec![vec![1.0, 0.8, 0.4, 0.1], vec![0.8, 1.0, 0.6, 0.3], vec![0.4, 0.6, 1.0, 0.3], vec![0.1, 0.3, 0.3, 1.0]],
        );
        let r = kind_correlation(&a, &b).unwrap();
        let expected = pearson_r(&[0.9, 0.5, 0.2, 0.7, 0.4], &[0.8, 0.4, 0.1, 0.6, 0.3]).unwrap();
        assert!((r - expected).abs() < 1e-12);
    }
}
