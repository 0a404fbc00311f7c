use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::holdout::{evaluate_split, TestOptions};
use crate::error::{Error, Result};
use crate::field::FieldStrength;
use crate::metrics::{welch_t_test, Metric, MetricSample, Summary};
use crate::model::{load_checkpoint, Model, ModelConfig};
use crate::synthdata::{DatasetManifest, Split};
use crate::training::{fit, BatchStream, SliceDataset, TrainConfig};

pub const TABLE2_FILE: &str = "table2.csv";
pub const TABLE2_HEADER: [&str; 9] = [
    "strategy",
    "input_field",
    "metric",
    "mean",
    "sd",
    "n",
    "p_vs_mixed",
    "direction",
    "note",
];
pub const TABLE2_METRICS: [Metric; 3] = [Metric::Nmse, Metric::Psnr, Metric::Ssim];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Strategy {
    Mixed,
    Only1_5T,
    Only3T,
}

impl Strategy {
    pub const ALL: [Strategy; 3] = [Strategy::Mixed, Strategy::Only1_5T, Strategy::Only3T];

    pub fn fields(self) -> &'static [FieldStrength] {
        match self {
            Strategy::Mixed => &FieldStrength::ALL,
            Strategy::Only1_5T => &[FieldStrength::T1_5],
            Strategy::Only3T => &[FieldStrength::T3],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Mixed => "mixed",
            Strategy::Only1_5T => "only_1.5T",
            Strategy::Only3T => "only_3T",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown strategy `{s}` (mixed, only_1.5T, only_3T)"
                ))
            })
    }
}

#[derive(Clone, Debug)]
pub struct AblationSpec {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub eval_batch_size: usize,
}

/// One cell of the strategy × input-field grid for one metric.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table2Row {
    pub strategy: String,
    pub input_field: String,
    pub metric: String,
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
    pub p_vs_mixed: Option<f64>,
    /// `mixed_better`, `mixed_worse` or `tie`; empty on the mixed rows.
    pub direction: String,
    pub note: String,
}

#[derive(Clone, Debug)]
pub struct StrategyRun {
    pub strategy: Strategy,
    pub run_dir: PathBuf,
    pub best_epoch: usize,
    pub samples: Vec<MetricSample>,
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    pub steps_per_epoch: usize,
    pub runs: Vec<StrategyRun>,
    pub rows: Vec<Table2Row>,
}

impl AblationReport {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .from_path(path)?;
        w.write_record(TABLE2_HEADER)?;
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

fn lower_is_better(m: Metric) -> bool {
    m == Metric::Nmse
}

fn note(strategy: Strategy, field: FieldStrength) -> &'static str {
    match (strategy, field) {
        (Strategy::Only1_5T, FieldStrength::T3) => "cross_domain_inspect",
        (Strategy::Only3T, FieldStrength::T1_5) => "cross_domain",
        _ => "",
    }
}

/// The six-row grid per metric from per-strategy test samples.
pub fn table2_rows(runs: &[(Strategy, Vec<MetricSample>)]) -> Result<Vec<Table2Row>> {
    let mixed = runs
        .iter()
        .find(|(s, _)| *s == Strategy::Mixed)
        .ok_or_else(|| Error::invalid("run_ablation", "no mixed run to compare against"))?;
    let mut rows = Vec::new();
    for metric in TABLE2_METRICS {
        for field in FieldStrength::ALL {
            let of = |samples: &[MetricSample]| {
                metric.values(samples.iter().filter(|s| s.field == field))
            };
            let base = of(&mixed.1);
            let base_mean = Summary::of(&base)
                .map_err(|e| e.context(format!("mixed on {field}")))?
                .mean;
            for (strategy, samples) in runs {
                let vals = of(samples);
                let s =
                    Summary::of(&vals).map_err(|e| e.context(format!("{strategy} on {field}")))?;
                let p = if vals == base {
                    Some(1.0)
                } else {
                    welch_t_test(&vals, &base).ok().map(|w| w.p_two_tailed)
                };
                let direction = if *strategy == Strategy::Mixed {
                    ""
                } else if s.mean == base_mean {
                    "tie"
                } else if (base_mean < s.mean) == lower_is_better(metric) {
                    "mixed_better"
                } else {
                    "mixed_worse"
                };
                rows.push(Table2Row {
                    strategy: strategy.to_string(),
                    input_field: field.to_string(),
                    metric: metric.name().to_string(),
                    mean: s.mean,
                    sd: s.sd,
                    n: s.n,
                    p_vs_mixed: p,
                    direction: direction.to_string(),
                    note: note(*strategy, field).to_string(),
                });
            }
        }
    }
    Ok(rows)
}

/// Trains one model per strategy under the same number of optimizer steps,
/// then evaluates each on the 1.5T and 3T test slices.
///
/// With `steps_per_epoch = 0` the budget is one pass over the mixed training
/// set per epoch, applied to every strategy.
pub fn run_ablation(
    spec: &AblationSpec,
    manifest: &DatasetManifest,
    out_dir: &Path,
) -> Result<AblationReport> {
    for split in [Split::Train, Split::Val, Split::Test] {
        let present: Vec<FieldStrength> = manifest.split(split).map(|e| e.field).collect();
        for f in FieldStrength::ALL {
            if !present.contains(&f) {
                return Err(Error::invalid(
                    "run_ablation",
                    format!("{split} split has no {f}T cases"),
                ));
            }
        }
    }
    let mut train = spec.train.clone();
    if train.steps_per_epoch == 0 {
        let n = SliceDataset::from_manifest(manifest, Split::Train, None)?.len();
        train.steps_per_epoch = BatchStream::steps_per_pass(n, train.batch_size);
    }
    let opts = TestOptions {
        batch_size: spec.eval_batch_size,
        ..TestOptions::default()
    };
    let mut runs = Vec::new();
    for strategy in Strategy::ALL {
        let run_dir = out_dir.join(strategy.name());
        let outcome = fit(
            &train,
            manifest,
            &spec.model,
            &run_dir,
            Some(strategy.fields()),
        )
        .map_err(|e| e.context(format!("training {strategy}")))?;
        let best = load_checkpoint(&outcome.best_path, Some(&spec.model))?;
        let model = Model {
            config: best.config,
            params: best.params,
        };
        let samples = evaluate_split(&model, manifest, &opts)?;
        runs.push(StrategyRun {
            strategy,
            run_dir,
            best_epoch: outcome.best_epoch,
            samples,
        });
    }
    let pairs: Vec<(Strategy, Vec<MetricSample>)> = runs
        .iter()
        .map(|r| (r.strategy, r.samples.clone()))
        .collect();
    let rows = table2_rows(&pairs)?;
    let report = AblationReport {
        steps_per_epoch: train.steps_per_epoch,
        runs,
        rows,
    };
    report.write(&out_dir.join(TABLE2_FILE))?;
    Ok(report)
}
