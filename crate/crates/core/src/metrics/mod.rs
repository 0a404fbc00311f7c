//! Image-quality metrics, Welch's t-test and mean ± SD aggregation.
//!
//! Images are compared in the normalized [-1, 1] domain, so the default
//! dynamic range is `L = 2`. SSIM moments use the population (1/N)
//! convention; Welch's test uses sample (1/(n-1)) variances.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;

use crate::error::{Error, Result};
use crate::field::FieldStrength;
use crate::tensor::Tensor;

#[cfg(test)]
mod tests;

pub const DYNAMIC_RANGE: f64 = 2.0;
pub const ALPHA: f64 = 0.05;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn check_pair<'a>(
    op: &'static str,
    y: &'a Tensor,
    yhat: &'a Tensor,
) -> Result<(&'a [f64], &'a [f64])> {
    if y.dims() != yhat.dims() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: y.dims().to_vec(),
            rhs: yhat.dims().to_vec(),
        });
    }
    Ok((y.data(), yhat.data()))
}

fn sq_err(y: &[f64], yhat: &[f64]) -> f64 {
    y.iter().zip(yhat).map(|(a, b)| (a - b) * (a - b)).sum()
}

/// Residual energy normalized by the reference energy.
pub fn nmse(y: &Tensor, yhat: &Tensor) -> Result<f64> {
    let (y, yhat) = check_pair("nmse", y, yhat)?;
    nmse_slice(y, yhat)
}

pub fn nmse_slice(y: &[f64], yhat: &[f64]) -> Result<f64> {
    let energy: f64 = y.iter().map(|v| v * v).sum();
    if energy == 0.0 {
        return Err(Error::Metric("nmse: reference is identically zero".into()));
    }
    Ok(sq_err(y, yhat) / energy)
}

/// Peak signal-to-noise ratio in dB. Zero error gives `f64::INFINITY`.
pub fn psnr(y: &Tensor, yhat: &Tensor, l: f64) -> Result<f64> {
    let (y, yhat) = check_pair("psnr", y, yhat)?;
    Ok(psnr_slice(y, yhat, l))
}

pub fn psnr_slice(y: &[f64], yhat: &[f64], l: f64) -> f64 {
    let mse = sq_err(y, yhat) / y.len().max(1) as f64;
    if mse == 0.0 {
        return f64::INFINITY;
    }
    10.0 * (l * l / mse).log10()
}

fn ssim_constants(l: f64) -> (f64, f64) {
    ((0.01 * l).powi(2), (0.03 * l).powi(2))
}

fn ssim_formula(mx: f64, my: f64, vx: f64, vy: f64, cov: f64, c1: f64, c2: f64) -> f64 {
    ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
}

/// SSIM with one set of moments taken over the whole image.
pub fn ssim_global(y: &Tensor, yhat: &Tensor, l: f64) -> Result<f64> {
    let (y, yhat) = check_pair("ssim_global", y, yhat)?;
    ssim_global_slice(y, yhat, l)
}

pub fn ssim_global_slice(y: &[f64], yhat: &[f64], l: f64) -> Result<f64> {
    if y.len() < 2 {
        return Err(Error::Metric(
            "ssim_global needs at least 2 elements".into(),
        ));
    }
    let n = y.len() as f64;
    let mx = y.iter().sum::<f64>() / n;
    let my = yhat.iter().sum::<f64>() / n;
    let (mut vx, mut vy, mut cov) = (0.0, 0.0, 0.0);
    for (a, b) in y.iter().zip(yhat) {
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
        cov += (a - mx) * (b - my);
    }
    let (c1, c2) = ssim_constants(l);
    Ok(ssim_formula(mx, my, vx / n, vy / n, cov / n, c1, c2))
}

/// Normalized 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let raw: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

/// Mean of Gaussian-weighted local SSIM over all fully contained windows.
///
/// The last two dims are treated as H×W; any leading dims are independent
/// planes whose windows are pooled into one mean.
pub fn ssim_windowed(y: &Tensor, yhat: &Tensor, window: usize, sigma: f64, l: f64) -> Result<f64> {
    let (yd, yhd) = check_pair("ssim_windowed", y, yhat)?;
    let dims = y.dims();
    if dims.len() < 2 {
        return Err(Error::Metric(
            "ssim_windowed needs an image with at least 2 dims".into(),
        ));
    }
    let (h, w) = (dims[dims.len() - 2], dims[dims.len() - 1]);
    ssim_windowed_slice(yd, yhd, h, w, window, sigma, l)
}

pub fn ssim_windowed_slice(
    y: &[f64],
    yhat: &[f64],
    h: usize,
    w: usize,
    window: usize,
    sigma: f64,
    l: f64,
) -> Result<f64> {
    if window == 0 || h < window || w < window {
        return Err(Error::Metric(format!(
            "ssim_windowed: image {h}x{w} is smaller than the {window}x{window} window"
        )));
    }
    let g = gaussian_window(window, sigma);
    let (c1, c2) = ssim_constants(l);
    let (oh, ow) = (h - window + 1, w - window + 1);
    let plane = h * w;
    let planes = y.len() / plane;
    let mut total = 0.0;
    for p in 0..planes {
        let a = &y[p * plane..(p + 1) * plane];
        let b = &yhat[p * plane..(p + 1) * plane];
        // Moments are filtered as x, y, x², y², xy.
        let mut horiz = vec![[0.0f64; 5]; h * ow];
        for r in 0..h {
            for c in 0..ow {
                let mut acc = [0.0; 5];
                for (k, gk) in g.iter().enumerate() {
                    let (u, v) = (a[r * w + c + k], b[r * w + c + k]);
                    acc[0] += gk * u;
                    acc[1] += gk * v;
                    acc[2] += gk * u * u;
                    acc[3] += gk * v * v;
                    acc[4] += gk * u * v;
                }
                horiz[r * ow + c] = acc;
            }
        }
        for r in 0..oh {
            for c in 0..ow {
                let mut m = [0.0; 5];
                for (k, gk) in g.iter().enumerate() {
                    let src = &horiz[(r + k) * ow + c];
                    for (mi, si) in m.iter_mut().zip(src) {
                        *mi += gk * si;
                    }
                }
                let (mx, my) = (m[0], m[1]);
                total += ssim_formula(
                    mx,
                    my,
                    m[2] - mx * mx,
                    m[3] - my * my,
                    m[4] - mx * my,
                    c1,
                    c2,
                );
            }
        }
    }
    Ok(total / (planes * oh * ow) as f64)
}

/// Outcome of a two-tailed Welch's t-test.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WelchResult {
    pub t: f64,
    pub df: f64,
    pub p_two_tailed: f64,
    pub alpha: f64,
    pub significant: bool,
}

fn mean_var(x: &[f64]) -> (f64, f64) {
    let n = x.len() as f64;
    let m = x.iter().sum::<f64>() / n;
    let v = x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1.0);
    (m, v)
}

/// CDF of Student's t distribution.
pub fn student_t_cdf(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return if t > 0.0 { 1.0 } else { 0.0 };
    }
    let tail = 0.5 * beta_reg(df / 2.0, 0.5, df / (df + t * t));
    if t > 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

pub fn welch_t_test(a: &[f64], b: &[f64]) -> Result<WelchResult> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Metric(format!(
            "welch_t_test needs at least 2 samples per group, got {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (ma, va) = mean_var(a);
    let (mb, vb) = mean_var(b);
    if va == 0.0 || vb == 0.0 {
        return Err(Error::Metric(format!(
            "welch_t_test: degenerate variance (group variances {va} and {vb})"
        )));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (sa, sb) = (va / na, vb / nb);
    let t = (ma - mb) / (sa + sb).sqrt();
    let df = (sa + sb).powi(2) / (sa * sa / (na - 1.0) + sb * sb / (nb - 1.0));
    let p = beta_reg(df / 2.0, 0.5, df / (df + t * t)).clamp(0.0, 1.0);
    Ok(WelchResult {
        t,
        df,
        p_two_tailed: p,
        alpha: ALPHA,
        significant: p < ALPHA,
    })
}

/// Per-slice (or per-volume) metric values for one case.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSample {
    pub case_id: String,
    pub slice_index: usize,
    pub field: FieldStrength,
    pub nmse: f64,
    pub psnr_db: f64,
    pub ssim: f64,
    pub ssim_windowed: Option<f64>,
}

impl MetricSample {
    /// Computes every metric for one prediction against its reference.
    /// `h`×`w` is the plane size used by windowed SSIM.
    pub fn compute(
        case_id: &str,
        slice_index: usize,
        field: FieldStrength,
        y: &[f64],
        yhat: &[f64],
        h: usize,
        w: usize,
    ) -> Result<Self> {
        if y.len() != yhat.len() {
            return Err(Error::Metric(format!(
                "prediction has {} values, reference {}",
                yhat.len(),
                y.len()
            )));
        }
        let ssim_windowed = if h >= SSIM_WINDOW && w >= SSIM_WINDOW {
            Some(ssim_windowed_slice(
                y,
                yhat,
                h,
                w,
                SSIM_WINDOW,
                SSIM_SIGMA,
                DYNAMIC_RANGE,
            )?)
        } else {
            None
        };
        Ok(MetricSample {
            case_id: case_id.to_string(),
            slice_index,
            field,
            nmse: nmse_slice(y, yhat)?,
            psnr_db: psnr_slice(y, yhat, DYNAMIC_RANGE),
            ssim: ssim_global_slice(y, yhat, DYNAMIC_RANGE)?,
            ssim_windowed,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Metric {
    Nmse,
    Psnr,
    Ssim,
    SsimWindowed,
}

impl Metric {
    pub const ALL: [Metric; 4] = [
        Metric::Nmse,
        Metric::Psnr,
        Metric::Ssim,
        Metric::SsimWindowed,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Metric::Nmse => "nmse",
            Metric::Psnr => "psnr_db",
            Metric::Ssim => "ssim",
            Metric::SsimWindowed => "ssim_windowed",
        }
    }

    /// Finite values of this metric; infinite PSNR and missing windowed SSIM are skipped.
    pub fn values<'a>(self, samples: impl IntoIterator<Item = &'a MetricSample>) -> Vec<f64> {
        samples
            .into_iter()
            .filter_map(|s| match self {
                Metric::Nmse => Some(s.nmse),
                Metric::Psnr => Some(s.psnr_db),
                Metric::Ssim => Some(s.ssim),
                Metric::SsimWindowed => s.ssim_windowed,
            })
            .filter(|v| v.is_finite())
            .collect()
    }
}

/// Unit of analysis for the reported statistics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Aggregation {
    /// One sample per axial slice.
    #[default]
    Slice,
    /// One sample per case, metrics computed over all voxels of the volume.
    Volume,
}

impl std::str::FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "slice" => Ok(Aggregation::Slice),
            "volume" => Ok(Aggregation::Volume),
            other => Err(Error::invalid(
                "aggregation",
                format!("expected `slice` or `volume`, got `{other}`"),
            )),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GroupBy {
    All,
    Field,
}

/// Mean and sample standard deviation (n-1; zero for a single value).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::Metric("cannot summarize an empty group".into()));
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let sd = if n > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Ok(Summary { mean, sd, n })
    }
}

impl std::fmt::Display for Summary {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.4} ± {:.4}", self.mean, self.sd)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub model: String,
    /// `None` for the pooled group.
    pub field: Option<FieldStrength>,
    pub n: usize,
    pub nmse: Summary,
    /// `None` when every sample had zero error.
    pub psnr_db: Option<Summary>,
    pub psnr_infinite: usize,
    pub ssim: Summary,
    pub ssim_windowed: Option<Summary>,
}

impl MetricReport {
    pub fn summary(&self, metric: Metric) -> Option<Summary> {
        match metric {
            Metric::Nmse => Some(self.nmse),
            Metric::Psnr => self.psnr_db,
            Metric::Ssim => Some(self.ssim),
            Metric::SsimWindowed => self.ssim_windowed,
        }
    }
}

fn group<'a>(
    samples: &'a [MetricSample],
    group_by: GroupBy,
) -> BTreeMap<Option<FieldStrength>, Vec<&'a MetricSample>> {
    let mut groups: BTreeMap<_, Vec<_>> = BTreeMap::new();
    for s in samples {
        let key = match group_by {
            GroupBy::All => None,
            GroupBy::Field => Some(s.field),
        };
        groups.entry(key).or_default().push(s);
    }
    groups
}

/// Mean ± SD per group. Fields with no samples produce no report.
pub fn aggregate(
    model: &str,
    samples: &[MetricSample],
    group_by: GroupBy,
) -> Result<Vec<MetricReport>> {
    if samples.is_empty() {
        return Err(Error::Metric(format!(
            "no samples to aggregate for model `{model}`"
        )));
    }
    group(samples, group_by)
        .into_iter()
        .map(|(field, members)| {
            let psnr = Metric::Psnr.values(members.iter().copied());
            let windowed = Metric::SsimWindowed.values(members.iter().copied());
            Ok(MetricReport {
                model: model.to_string(),
                field,
                n: members.len(),
                nmse: Summary::of(&Metric::Nmse.values(members.iter().copied()))?,
                psnr_infinite: members.iter().filter(|s| s.psnr_db.is_infinite()).count(),
                psnr_db: (!psnr.is_empty()).then(|| Summary::of(&psnr)).transpose()?,
                ssim: Summary::of(&Metric::Ssim.values(members.iter().copied()))?,
                ssim_windowed: (!windowed.is_empty())
                    .then(|| Summary::of(&windowed))
                    .transpose()?,
            })
        })
        .collect()
}

/// One row of the results table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Table1Row {
    pub model: String,
    pub field: String,
    pub metric: String,
    pub mean: f64,
    pub sd: f64,
    pub n: usize,
    pub p_vs_reference: Option<f64>,
}

pub const TABLE1_HEADER: [&str; 7] = [
    "model",
    "field",
    "metric",
    "mean",
    "sd",
    "n",
    "p_vs_reference",
];

/// Table rows for `samples`, with Welch p-values against `reference` in
/// the same group when given. A degenerate test leaves the p-value empty.
pub fn table1_rows(
    model: &str,
    samples: &[MetricSample],
    group_by: GroupBy,
    reference: Option<&[MetricSample]>,
) -> Result<Vec<Table1Row>> {
    let reports = aggregate(model, samples, group_by)?;
    let own = group(samples, group_by);
    let refs = reference.map(|r| group(r, group_by));
    let mut rows = Vec::new();
    for report in &reports {
        for metric in Metric::ALL {
            let Some(summary) = report.summary(metric) else {
                continue;
            };
            let p = refs
                .as_ref()
                .and_then(|r| r.get(&report.field))
                .and_then(|r| {
                    let a = metric.values(own[&report.field].iter().copied());
                    let b = metric.values(r.iter().copied());
                    // Identical groups have no mean difference to test, even at zero variance.
                    if a == b {
                        return Some(1.0);
                    }
                    welch_t_test(&a, &b).ok().map(|w| w.p_two_tailed)
                });
            rows.push(Table1Row {
                model: model.to_string(),
                field: report
                    .field
                    .map_or_else(|| "all".to_string(), |f| f.to_string()),
                metric: metric.name().to_string(),
                mean: summary.mean,
                sd: summary.sd,
                n: summary.n,
                p_vs_reference: p,
            });
        }
    }
    Ok(rows)
}

pub fn write_table1<W: Write>(out: W, rows: &[Table1Row]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_writer(out);
    w.write_record(TABLE1_HEADER)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io("<table>", e))?;
    Ok(())
}

pub fn write_table1_csv(path: &Path, rows: &[Table1Row]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_table1(f, rows)
}

pub fn write_samples_csv(path: &Path, model: &str, samples: &[MetricSample]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(SAMPLES_HEADER)?;
    for s in samples {
        w.write_record([
            model.to_string(),
            s.case_id.clone(),
            s.slice_index.to_string(),
            s.field.to_string(),
            s.nmse.to_string(),
            s.psnr_db.to_string(),
            s.ssim.to_string(),
            s.ssim_windowed.map(|v| v.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub const SAMPLES_HEADER: [&str; 8] = [
    "model",
    "case_id",
    "slice_index",
    "field",
    "nmse",
    "psnr_db",
    "ssim",
    "ssim_windowed",
];

/// Reads a file written by [`write_samples_csv`]; returns the model name and samples.
pub fn read_samples_csv(path: &Path) -> Result<(String, Vec<MetricSample>)> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != SAMPLES_HEADER {
        return Err(Error::Malformed(format!(
            "{}: unexpected header {header:?}",
            path.display()
        )));
    }
    let mut model = String::new();
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let line = i + 2;
        let num = |col: usize| -> Result<f64> {
            rec[col].parse().map_err(|_| {
                Error::Malformed(format!(
                    "{}:{line}: bad {} `{}`",
                    path.display(),
                    SAMPLES_HEADER[col],
                    &rec[col]
                ))
            })
        };
        if i == 0 {
            model = rec[0].to_string();
        }
        out.push(MetricSample {
            case_id: rec[1].to_string(),
            slice_index: rec[2].parse().map_err(|_| {
                Error::Malformed(format!("{}:{line}: bad slice_index", path.display()))
            })?,
            field: rec[3].parse()?,
            nmse: num(4)?,
            psnr_db: num(5)?,
            ssim: num(6)?,
            ssim_windowed: if rec[7].is_empty() {
                None
            } else {
                Some(num(7)?)
            },
        });
    }
    Ok((model, out))
}
