use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::field::FieldStrength;
use crate::metrics::{
    aggregate, table1_rows, write_samples_csv, write_table1_csv, Aggregation, GroupBy,
    MetricReport, MetricSample, Table1Row,
};
use crate::model::Model;
use crate::par;
use crate::synthdata::{DatasetManifest, ManifestEntry, Split};
use crate::tensor::Tensor;

pub const TABLE1_FILE: &str = "table1.csv";
pub const SAMPLES_FILE: &str = "samples.csv";

/// Anything that maps a `[B, 1, H, W]` batch to a same-shaped prediction.
pub trait Predictor: Sync {
    fn predict(&self, x: &Tensor) -> Result<Tensor>;
}

impl Predictor for Model {
    fn predict(&self, x: &Tensor) -> Result<Tensor> {
        Model::predict(self, x)
    }
}

/// Returns its input unchanged.
#[derive(Clone, Copy, Debug, Default)]
pub struct Identity;

impl Predictor for Identity {
    fn predict(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.clone())
    }
}

#[derive(Clone, Debug)]
pub struct TestOptions {
    pub split: Split,
    pub aggregation: Aggregation,
    pub batch_size: usize,
    pub fields: Option<Vec<FieldStrength>>,
}

impl Default for TestOptions {
    fn default() -> Self {
        TestOptions {
            split: Split::Test,
            aggregation: Aggregation::Slice,
            batch_size: 8,
            fields: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TestReport {
    pub model: String,
    pub samples: Vec<MetricSample>,
    /// Pooled report first, then one per field strength present.
    pub reports: Vec<MetricReport>,
    pub rows: Vec<Table1Row>,
}

impl TestReport {
    /// Writes the table and the per-sample file into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_table1_csv(&dir.join(TABLE1_FILE), &self.rows)?;
        write_samples_csv(&dir.join(SAMPLES_FILE), &self.model, &self.samples)
    }
}

fn case_samples(
    pred: &dyn Predictor,
    m: &DatasetManifest,
    e: &ManifestEntry,
    opts: &TestOptions,
) -> Result<Vec<MetricSample>> {
    let (x, y) = m.load_pair(e)?;
    let d = x.dims();
    let mut yhat = Vec::with_capacity(d.numel());
    let plane = d.plane();
    for start in (0..d.d).step_by(opts.batch_size.max(1)) {
        let n = opts.batch_size.max(1).min(d.d - start);
        let batch = Tensor::new(
            vec![n, 1, d.h, d.w],
            x.data()[start * plane..(start + n) * plane].to_vec(),
        )?;
        let out = pred.predict(&batch)?;
        if out.dims() != batch.dims() {
            return Err(Error::ShapeMismatch {
                op: "run_test",
                lhs: batch.dims().to_vec(),
                rhs: out.dims().to_vec(),
            });
        }
        yhat.extend_from_slice(out.data());
    }
    match opts.aggregation {
        Aggregation::Slice => (0..d.d)
            .map(|k| {
                let r = k * plane..(k + 1) * plane;
                MetricSample::compute(
                    &e.case_id,
                    k,
                    e.field,
                    &y.data()[r.clone()],
                    &yhat[r],
                    d.h,
                    d.w,
                )
            })
            .collect(),
        Aggregation::Volume => Ok(vec![MetricSample::compute(
            &e.case_id,
            0,
            e.field,
            y.data(),
            &yhat,
            d.h,
            d.w,
        )?]),
    }
}

/// Per-slice (or per-volume) metrics of `pred` on one split, in manifest order.
pub fn evaluate_split(
    pred: &dyn Predictor,
    manifest: &DatasetManifest,
    opts: &TestOptions,
) -> Result<Vec<MetricSample>> {
    let entries: Vec<&ManifestEntry> = manifest
        .split(opts.split)
        .filter(|e| opts.fields.as_ref().is_none_or(|f| f.contains(&e.field)))
        .collect();
    if entries.is_empty() {
        return Err(Error::invalid(
            "run_test",
            format!("{} split has no cases", opts.split),
        ));
    }
    let per_case = par::map_slice(&entries, |e| {
        case_samples(pred, manifest, e, opts)
            .map_err(|err| err.context(format!("case {}", e.case_id)))
    });
    Ok(per_case
        .into_iter()
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect())
}

fn counts(samples: &[MetricSample]) -> BTreeMap<FieldStrength, usize> {
    let mut c = BTreeMap::new();
    for s in samples {
        *c.entry(s.field).or_insert(0) += 1;
    }
    c
}

/// Table rows pooled over all fields followed by per-field rows, with Welch
/// p-values against `reference` when given.
pub fn report_rows(
    model: &str,
    samples: &[MetricSample],
    reference: Option<&[MetricSample]>,
) -> Result<Vec<Table1Row>> {
    if let Some(r) = reference {
        let (a, b) = (counts(samples), counts(r));
        if a != b {
            return Err(Error::invalid(
                "run_test",
                format!("sample counts per field differ from the reference: {a:?} vs {b:?}"),
            ));
        }
    }
    let mut rows = table1_rows(model, samples, GroupBy::All, reference)?;
    rows.extend(table1_rows(model, samples, GroupBy::Field, reference)?);
    Ok(rows)
}

/// Hold-out evaluation: metrics per test slice, summaries per field strength,
/// and Welch tests against a reference model's samples.
pub fn run_test(
    model_name: &str,
    pred: &dyn Predictor,
    manifest: &DatasetManifest,
    reference: Option<&[MetricSample]>,
    opts: &TestOptions,
) -> Result<TestReport> {
    let samples = evaluate_split(pred, manifest, opts)?;
    let rows = report_rows(model_name, &samples, reference)?;
    let mut reports = aggregate(model_name, &samples, GroupBy::All)?;
    reports.extend(aggregate(model_name, &samples, GroupBy::Field)?);
    Ok(TestReport {
        model: model_name.to_string(),
        samples,
        reports,
        rows,
    })
}
