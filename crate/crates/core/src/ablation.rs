//! Trains each ablation row on the same split and tabulates the metrics.

use std::path::Path;

use serde::Serialize;

use crate::data::Dataset;
use crate::metrics::{MetricConfig, MetricSummary};
use crate::model::{Ablation, MiNet, ModelConfig};
use crate::trainer::{evaluate_model, train, TrainConfig, TrainOptions};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub row: String,
    pub f_max: f64,
    pub f_avg: f64,
    pub f_w: f64,
    pub e_m: f64,
    pub s_m: f64,
    pub mae: f64,
}

impl AblationRow {
    fn new(row: String, s: MetricSummary) -> Self {
        AblationRow {
            row,
            f_max: s.f_max,
            f_avg: s.f_avg,
            f_w: s.f_w,
            e_m: s.e_m,
            s_m: s.s_m,
            mae: s.mae,
        }
    }
}

/// Parses a comma-separated row list such as `baseline,+aim+sim+cel`.
pub fn parse_rows(list: &str) -> Result<Vec<Ablation>> {
    let rows: Vec<Ablation> = list
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(Ablation::parse)
        .collect::<Result<_>>()?;
    if rows.is_empty() {
        return Err(Error::Config("no ablation rows given".into()));
    }
    Ok(rows)
}

/// Rows without `+cel` train on BCE alone (`lambda_cel = 0`); rows with it
/// use the configured weight. Every row sees the same data order and
/// initialization seed, and is scored on the training split.
pub fn run_ablation(
    rows: &[Ablation],
    model: &ModelConfig,
    train_cfg: &TrainConfig,
    data: &Dataset,
    metric_cfg: &MetricConfig,
    opts: &TrainOptions,
) -> Result<Vec<AblationRow>> {
    let mut out = Vec::with_capacity(rows.len());
    for row in rows {
        let name = row.name();
        log::info!("ablation row {name}");
        let cfg = row.apply(model);
        let tc = TrainConfig {
            lambda_cel: if row.cel { train_cfg.lambda_cel } else { 0.0 },
            ..train_cfg.clone()
        };
        let (net, mut store) = MiNet::build(&cfg)?;
        let row_opts = TrainOptions {
            out_dir: opts.out_dir.as_ref().map(|d| d.join(&name)),
            ..opts.clone()
        };
        train(&net, &mut store, data, &tc, None, &row_opts)?;
        let report = evaluate_model(&net, &store, data, metric_cfg, None, tc.batch_size, 1)?;
        out.push(AblationRow::new(name, report.summary));
    }
    Ok(out)
}

/// Writes `row,f_max,f_avg,f_w,e_m,s_m,mae`.
pub fn write_ablation_csv(rows: &[AblationRow], path: &Path) -> Result<()> {
    let err = |e: csv::Error| Error::Data(format!("{}: {e}", path.display()));
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for r in rows {
        w.serialize(r).map_err(err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
