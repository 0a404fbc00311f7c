//! L1 objective, AdamW with decoupled weight decay, and the epoch loop.

mod data;
mod fit;

use std::fmt;
use std::str::FromStr;

use crate::config::{parse_bool, parse_value, ConfigSection};
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::model::OptimizerState;
use crate::nn::{named_tensors, ParamTree};
use crate::tensor::{Tape, Tensor, Var};

pub use data::{Batch, BatchStream, SliceDataset, SliceItem};
pub use fit::{
    evaluate_l1, fit, resume_from, train_epoch, train_step, validate, EpochStats, FitOutcome,
    LogRow, ValScores, BEST_CHECKPOINT, LAST_CHECKPOINT, LOG_FILE, TIMING_FILE,
};

/// Model selection metric on the validation split.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ValMetric {
    #[default]
    Nmse,
    Psnr,
    Ssim,
}

impl ValMetric {
    /// Whether `a` is strictly better than `b`.
    pub fn better(self, a: f64, b: f64) -> bool {
        match self {
            ValMetric::Nmse => a < b,
            ValMetric::Psnr | ValMetric::Ssim => a > b,
        }
    }

    pub fn worst(self) -> f64 {
        match self {
            ValMetric::Nmse => f64::INFINITY,
            ValMetric::Psnr | ValMetric::Ssim => f64::NEG_INFINITY,
        }
    }
}

impl fmt::Display for ValMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ValMetric::Nmse => "nmse",
            ValMetric::Psnr => "psnr",
            ValMetric::Ssim => "ssim",
        })
    }
}

impl FromStr for ValMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "nmse" => Ok(ValMetric::Nmse),
            "psnr" => Ok(ValMetric::Psnr),
            "ssim" => Ok(ValMetric::Ssim),
            other => Err(Error::Config(format!(
                "val_metric: expected nmse, psnr or ssim, got `{other}`"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Optimizer steps per epoch; 0 means one full pass over the training slices.
    pub steps_per_epoch: usize,
    pub seed: u64,
    pub augment_flip: bool,
    pub val_metric: ValMetric,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 1e-4,
            eps: 1e-8,
            batch_size: 8,
            epochs: 50,
            steps_per_epoch: 0,
            seed: 0,
            augment_flip: true,
            val_metric: ValMetric::Nmse,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::InvalidConfig(m));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be a non-negative number, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail(format!(
                "betas must lie in [0, 1), got {} and {}",
                self.beta1, self.beta2
            ));
        }
        if !(self.eps > 0.0) || !(self.weight_decay >= 0.0) {
            return fail(format!(
                "eps must be positive and weight_decay non-negative, got {} and {}",
                self.eps, self.weight_decay
            ));
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        Ok(())
    }
}

impl ConfigSection for TrainConfig {
    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("lr", self.lr.to_string()),
            ("beta1", self.beta1.to_string()),
            ("beta2", self.beta2.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("eps", self.eps.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("steps_per_epoch", self.steps_per_epoch.to_string()),
            ("seed", self.seed.to_string()),
            ("augment_flip", self.augment_flip.to_string()),
            ("val_metric", self.val_metric.to_string()),
        ]
    }

    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        const INT: &str = "non-negative integer";
        match key {
            "lr" => self.lr = parse_value(key, value, "float")?,
            "beta1" => self.beta1 = parse_value(key, value, "float")?,
            "beta2" => self.beta2 = parse_value(key, value, "float")?,
            "weight_decay" => self.weight_decay = parse_value(key, value, "float")?,
            "eps" => self.eps = parse_value(key, value, "float")?,
            "batch_size" => self.batch_size = parse_value(key, value, INT)?,
            "epochs" => self.epochs = parse_value(key, value, INT)?,
            "steps_per_epoch" => self.steps_per_epoch = parse_value(key, value, INT)?,
            "seed" => self.seed = parse_value(key, value, INT)?,
            "augment_flip" => self.augment_flip = parse_bool(key, value)?,
            "val_metric" => self.val_metric = value.parse()?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Mean absolute error; subgradient 0 at exact ties.
pub fn l1_loss(tape: &mut Tape, yhat: &Var, y: &Var) -> Result<Var> {
    if yhat.dims() != y.dims() {
        return Err(Error::ShapeMismatch {
            op: "l1_loss",
            lhs: yhat.dims().to_vec(),
            rhs: y.dims().to_vec(),
        });
    }
    let d = tape.sub(yhat, y)?;
    let a = tape.abs(&d)?;
    tape.mean(&a)
}

/// Gradients of every leaf in `p`, in visiting order. Unused leaves get zeros.
pub fn collect_grads<P: ParamTree<Var>>(tape: &Tape, p: &P) -> Result<Vec<(String, Tensor)>> {
    let mut out = Vec::new();
    let mut err = None;
    p.visit("", &mut |name, v| {
        if err.is_some() {
            return;
        }
        match tape
            .grad(v)
            .map_or_else(|| Tensor::zeros(v.dims().to_vec()), Ok)
        {
            Ok(g) => out.push((name, g)),
            Err(e) => err = Some(e),
        }
    });
    match err {
        Some(e) => Err(e),
        None => Ok(out),
    }
}

/// One AdamW update with decoupled weight decay:
/// `θ ← θ − lr·(m̂ / (√v̂ + eps) + wd·θ)`.
///
/// Every gradient is checked before anything is modified, so a non-finite
/// gradient leaves params and state untouched.
pub fn adamw_step<P: ParamTree<Tensor>>(
    params: &mut P,
    grads: &[(String, Tensor)],
    m: &mut P,
    v: &mut P,
    step: &mut u64,
    cfg: &TrainConfig,
) -> Result<()> {
    let shapes = named_tensors(params, "");
    if shapes.len() != grads.len() {
        return Err(Error::invalid(
            "adamw_step",
            format!("{} gradients for {} parameters", grads.len(), shapes.len()),
        ));
    }
    for ((name, p), (gname, g)) in shapes.iter().zip(grads) {
        if p.dims() != g.dims() {
            return Err(Error::ShapeMismatch {
                op: "adamw_step",
                lhs: p.dims().to_vec(),
                rhs: g.dims().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient(if gname.is_empty() {
                name.clone()
            } else {
                gname.clone()
            }));
        }
    }
    *step += 1;
    let t = *step as i32;
    let (b1, b2) = (cfg.beta1, cfg.beta2);
    let mut i = 0;
    m.visit_mut("", &mut |_, mt| {
        for (mv, gv) in mt.data_mut().iter_mut().zip(grads[i].1.data()) {
            *mv = b1 * *mv + (1.0 - b1) * gv;
        }
        i += 1;
    });
    let mut i = 0;
    v.visit_mut("", &mut |_, vt| {
        for (vv, gv) in vt.data_mut().iter_mut().zip(grads[i].1.data()) {
            *vv = b2 * *vv + (1.0 - b2) * gv * gv;
        }
        i += 1;
    });
    let (c1, c2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
    let ms = named_tensors(m, "");
    let vs = named_tensors(v, "");
    let mut i = 0;
    params.visit_mut("", &mut |_, p| {
        let (mt, vt) = (ms[i].1.data(), vs[i].1.data());
        for ((theta, mv), vv) in p.data_mut().iter_mut().zip(mt).zip(vt) {
            let mhat = mv / c1;
            let vhat = vv / c2;
            *theta -= cfg.lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * *theta);
        }
        i += 1;
    });
    Ok(())
}

/// [`adamw_step`] on the model's optimizer state.
pub fn adamw_update(
    params: &mut ModelParams,
    grads: &[(String, Tensor)],
    state: &mut OptimizerState,
    cfg: &TrainConfig,
) -> Result<()> {
    adamw_step(
        params,
        grads,
        &mut state.m,
        &mut state.v,
        &mut state.step,
        cfg,
    )
}
