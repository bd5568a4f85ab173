//! Metrics CSV output. Columns are fixed and named after the report fields.

use std::path::Path;

use ifsl_core::meta::MetricsReport;

use crate::error::CliError;

/// Identifies the setting a metrics row was measured under.
#[derive(Debug, Clone)]
pub struct RowKey {
    pub variant: String,
    pub kind: String,
    pub shots: usize,
    pub base_classes: usize,
    pub grad: String,
    pub inner: String,
}

const KEY_COLUMNS: [&str; 6] = ["variant", "kind", "shots", "base_classes", "grad", "inner"];

const METRIC_COLUMNS: [&str; 17] = [
    "acc_base_joint",
    "acc_novel_joint",
    "acc_both",
    "acc_base_individual",
    "acc_novel_individual",
    "delta_a",
    "delta_b",
    "delta",
    "episode_count",
    "hw_base_joint",
    "hw_novel_joint",
    "hw_both",
    "hw_base_individual",
    "hw_novel_individual",
    "hw_delta_a",
    "hw_delta_b",
    "hw_delta",
];

fn metric_values(r: &MetricsReport) -> Vec<String> {
    let f = |v: f64| format!("{v:.6}");
    vec![
        f(r.acc_base_joint),
        f(r.acc_novel_joint),
        f(r.acc_both),
        f(r.acc_base_individual),
        f(r.acc_novel_individual),
        f(r.delta_a),
        f(r.delta_b),
        f(r.delta),
        r.episode_count.to_string(),
        f(r.hw_base_joint),
        f(r.hw_novel_joint),
        f(r.hw_both),
        f(r.hw_base_individual),
        f(r.hw_novel_individual),
        f(r.hw_delta_a),
        f(r.hw_delta_b),
        f(r.hw_delta),
    ]
}

pub fn write_metrics_csv(path: &Path, rows: &[(RowKey, MetricsReport)]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(KEY_COLUMNS.iter().chain(METRIC_COLUMNS.iter()))?;
    for (key, report) in rows {
        let mut record = vec![
            key.variant.clone(),
            key.kind.clone(),
            key.shots.to_string(),
            key.base_classes.to_string(),
            key.grad.clone(),
            key.inner.clone(),
        ];
        record.extend(metric_values(report));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_and_row_widths_agree() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let stats = ifsl_core::meta::EpisodeStats::from_predictions(&[0], &[0], &[0], &[1], &[1], &[0]);
        let report = MetricsReport::from_episodes(&[stats]).unwrap();
        let key = RowKey {
            variant: "attention".into(),
            kind: "lr".into(),
            shots: 1,
            base_classes: 1,
            grad: "rbp".into(),
            inner: "converged".into(),
        };
        write_metrics_csv(&path, &[(key, report)]).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert_eq!(lines[0].split(',').count(), lines[1].split(',').count());
        assert!(lines[0].starts_with("variant,kind,shots"));
        assert!(lines[1].contains(",-0.500000,"));
    }
}
