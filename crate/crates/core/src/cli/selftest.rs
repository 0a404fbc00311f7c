//! The invariant suite behind `restormer selftest`, one check per acceptance
//! criterion. Scratch files go under the run directory.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::evalharness::{
    bench_scaling, flops, infer_volume, repeat_stability, run_ablation, run_test, split_counts,
    write_outputs, AblationSpec, BlockDims, BlockKind, Identity, ScalingSpec, TestOptions, Tower,
    DEFAULT_SPLIT_FRACTIONS, TABLE2_METRICS,
};
use crate::field::FieldStrength;
use crate::metrics::{nmse, psnr, ssim_global, ssim_windowed, student_t_cdf, welch_t_test};
use crate::model::{
    build, count_params, forward, load_checkpoint, save_checkpoint, Checkpoint, Model, ModelConfig,
    OptimizerState, RngState, PARAM_BUDGET,
};
use crate::nn::{
    self, gdfn_forward, mdta_forward, restormer_block, spatial_attention, GdfnParams, MdtaParams,
    ParamTree, RestormerBlock, SpatialAttnParams,
};
use crate::synthdata::uvol::read_volume;
use crate::synthdata::{build_corpus, gen_case, CorpusSpec, Dims3, PhantomParams, Split};
use crate::tensor::{grad_check, Tape, Tensor, Var};
use crate::training::{adamw_step, fit, resume_from, train_step, TrainConfig, LOG_FILE};

use super::emit;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckOutcome {
    pub criterion: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl CheckOutcome {
    pub fn line(&self) -> String {
        format!(
            "{} [{}] {}: {} ({:.1} s)",
            if self.passed { "PASS" } else { "FAIL" },
            self.criterion,
            self.name,
            self.detail,
            self.seconds
        )
    }
}

/// Sub-assertions of one check; the check passes when none failed.
#[derive(Default)]
struct Verdict {
    notes: Vec<String>,
    failures: Vec<String>,
}

impl Verdict {
    fn check(&mut self, ok: bool, what: impl Into<String>) {
        let what = what.into();
        if ok {
            self.notes.push(what);
        } else {
            self.failures.push(what);
        }
    }

    fn finish(self) -> (bool, String) {
        if self.failures.is_empty() {
            (true, self.notes.join("; "))
        } else {
            (false, self.failures.join("; "))
        }
    }
}

struct Ctx {
    seed: u64,
    quick: bool,
    scratch: PathBuf,
}

type CheckFn = fn(&Ctx) -> Result<Verdict>;

const CHECKS: [(u8, &str, CheckFn); 9] = [
    (1, "gradient integrity", gradients),
    (2, "structural exactness", structure),
    (3, "metric oracles", metric_oracles),
    (4, "optimizer semantics", optimizer),
    (5, "complexity", complexity),
    (6, "parameter budget", param_budget),
    (7, "learning smoke", learning),
    (8, "protocol shape", protocol),
    (9, "reproducibility", reproducibility),
];

/// Runs every check, printing one line each as it finishes.
pub fn run_selftest(
    seed: u64,
    quick: bool,
    scratch: &Path,
    out: &mut dyn Write,
) -> Result<Vec<CheckOutcome>> {
    std::fs::create_dir_all(scratch).map_err(|e| Error::io(scratch, e))?;
    let ctx = Ctx {
        seed,
        quick,
        scratch: scratch.to_path_buf(),
    };
    let mut outcomes = Vec::new();
    for (criterion, name, f) in CHECKS {
        let t0 = Instant::now();
        let (passed, detail) = match f(&ctx) {
            Ok(v) => v.finish(),
            Err(e) => (false, format!("error: {e}")),
        };
        let o = CheckOutcome {
            criterion,
            name,
            passed,
            detail,
            seconds: t0.elapsed().as_secs_f64(),
        };
        emit(out, &format!("{}\n", o.line()));
        outcomes.push(o);
    }
    Ok(outcomes)
}

fn rand_tensor(dims: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n: usize = dims.iter().product();
    Tensor::new(
        dims.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .expect("valid dims")
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn bits(t: &[f64]) -> Vec<u64> {
    t.iter().map(|v| v.to_bits()).collect()
}

/// `sum(w * y)` with fixed random weights, so every output entry matters.
fn weighted_sum(tape: &mut Tape, y: &Var, seed: u64) -> Result<Var> {
    let w = tape.constant(rand_tensor(y.dims(), seed));
    let s = tape.mul(y, &w)?;
    tape.sum(&s)
}

/// ` (a, b)` listing the offending items, or nothing.
fn failing(items: Vec<String>) -> String {
    if items.is_empty() {
        String::new()
    } else {
        format!(" ({})", items.join(", "))
    }
}

// ---- 1 ----

type OpCase = (
    &'static str,
    Vec<usize>,
    Box<dyn Fn(&mut Tape, &Var) -> Result<Var>>,
);

fn op_cases() -> Vec<OpCase> {
    let c = |dims: &[usize], s| rand_tensor(dims, s);
    let (mw, cw, gw, bias) = (c(&[4, 3], 1), c(&[4, 2, 3, 3], 2), c(&[4], 3), c(&[4], 4));
    let (k, v) = (c(&[2, 5, 3], 5), c(&[2, 5, 3], 6));
    let (gamma, beta, scale) = (c(&[4], 7), c(&[4], 8), c(&[4], 9));
    let other = c(&[2, 4, 3, 3], 10);
    vec![
        (
            "add",
            vec![2, 3],
            Box::new(|t, x| {
                let y = t.scalar_mul(x, 2.0)?;
                t.add(x, &y)
            }),
        ),
        ("mul", vec![2, 3], Box::new(|t, x| t.mul(x, x))),
        ("gelu", vec![2, 3], Box::new(|t, x| t.gelu(x))),
        ("tanh", vec![2, 3], Box::new(|t, x| t.tanh(x))),
        ("abs", vec![2, 3], Box::new(|t, x| t.abs(x))),
        (
            "mean",
            vec![2, 3],
            Box::new(|t, x| {
                let m = t.mean(x)?;
                t.mul(&m, &m)
            }),
        ),
        (
            "matmul",
            vec![2, 4],
            Box::new(move |t, x| {
                let w = t.constant(mw.clone());
                t.matmul(x, &w)
            }),
        ),
        (
            "conv2d",
            vec![1, 4, 4, 5],
            Box::new(move |t, x| {
                let (w, b) = (t.constant(cw.clone()), t.constant(bias.clone()));
                t.conv2d(x, &w, Some(&b), 2)
            }),
        ),
        (
            "depthwise",
            vec![1, 4, 4, 4],
            Box::new(move |t, x| {
                let w = t.constant(gw.clone().reshaped(vec![4, 1, 1, 1])?);
                t.conv2d(x, &w, None, 4)
            }),
        ),
        (
            "attention",
            vec![2, 5, 3],
            Box::new(move |t, q| {
                let (kv, vv) = (t.constant(k.clone()), t.constant(v.clone()));
                t.attention(q, &kv, &vv, 0.7)
            }),
        ),
        (
            "layer_norm",
            vec![1, 4, 2, 3],
            Box::new(move |t, x| {
                let (g, b) = (t.constant(gamma.clone()), t.constant(beta.clone()));
                t.layer_norm(x, &g, &b, 1e-5)
            }),
        ),
        ("softmax", vec![3, 4], Box::new(|t, x| t.softmax(x, 1))),
        (
            "l2_normalize",
            vec![3, 4],
            Box::new(|t, x| t.l2_normalize(x, 1, 1e-12)),
        ),
        (
            "scale_axis",
            vec![2, 4, 3],
            Box::new(move |t, x| {
                let s = t.constant(scale.clone());
                t.scale_axis(x, &s, 1)
            }),
        ),
        (
            "pixel_unshuffle",
            vec![1, 2, 4, 6],
            Box::new(|t, x| t.pixel_unshuffle(x, 2)),
        ),
        (
            "pixel_shuffle",
            vec![1, 8, 2, 3],
            Box::new(|t, x| t.pixel_shuffle(x, 2)),
        ),
        (
            "permute",
            vec![2, 3, 4],
            Box::new(|t, x| t.permute(x, &[2, 0, 1])),
        ),
        (
            "concat",
            vec![2, 4, 3, 3],
            Box::new(move |t, x| {
                let o = t.constant(other.clone());
                t.concat(&[x, &o, x], 1)
            }),
        ),
        ("slice", vec![2, 5, 3], Box::new(|t, x| t.slice(x, 1, 1, 3))),
    ]
}

fn gradients(ctx: &Ctx) -> Result<Verdict> {
    let mut v = Verdict::default();
    let mut worst: f64 = 0.0;
    let mut failed = Vec::new();
    for (i, (name, dims, f)) in op_cases().into_iter().enumerate() {
        let x = rand_tensor(&dims, 100 + i as u64);
        let r = grad_check(
            |t, x| {
                let y = f(t, x)?;
                weighted_sum(t, &y, 200 + i as u64)
            },
            &x,
            1e-5,
            1e-4,
        )?;
        worst = worst.max(r.max_rel_error);
        if !r.passed {
            failed.push(format!("{name} {:.1e}", r.max_rel_error));
        }
    }
    v.check(
        failed.is_empty(),
        format!("ops max rel err {worst:.1e} < 1e-4{}", failing(failed)),
    );

    let mut r = rng(ctx.seed ^ 0x51);
    let mdta = MdtaParams::init(4, 2, &mut r)?;
    let gdfn = GdfnParams::init(4, 2.66, &mut r)?;
    let block = RestormerBlock::init(4, 2, 2.66, &mut r)?;
    let x = rand_tensor(&[1, 4, 3, 3], 300);
    let blocks: [(&str, f64); 3] = [
        (
            "mdta",
            grad_check(
                |t, x| {
                    let p = nn::constants(t, &mdta);
                    let y = mdta_forward(t, x, &p)?;
                    weighted_sum(t, &y, 301)
                },
                &x,
                1e-5,
                1e-4,
            )?
            .max_rel_error,
        ),
        (
            "gdfn",
            grad_check(
                |t, x| {
                    let p = nn::constants(t, &gdfn);
                    let y = gdfn_forward(t, x, &p)?;
                    weighted_sum(t, &y, 302)
                },
                &x,
                1e-5,
                1e-4,
            )?
            .max_rel_error,
        ),
        (
            "block",
            grad_check(
                |t, x| {
                    let p = nn::constants(t, &block);
                    let y = restormer_block(t, x, &p)?;
                    weighted_sum(t, &y, 303)
                },
                &x,
                1e-5,
                1e-4,
            )?
            .max_rel_error,
        ),
    ];
    for (name, err) in blocks {
        v.check(err < 1e-4, format!("{name} {err:.1e}"));
    }

    let params = build(
        &ModelConfig {
            base_channels: 4,
            ..ModelConfig::toy()
        },
        ctx.seed,
    )?;
    let x = rand_tensor(&[1, 1, 8, 8], 304);
    let target = rand_tensor(&[1, 1, 8, 8], 305);
    let l1 = |t: &mut Tape, y: &Var| -> Result<Var> {
        let tv = t.constant(target.clone());
        let d = t.sub(y, &tv)?;
        let a = t.abs(&d)?;
        t.mean(&a)
    };
    let err = grad_check(
        |t, x| {
            let p = nn::constants(t, &params);
            let y = forward(t, &p, x)?;
            l1(t, &y)
        },
        &x,
        1e-6,
        1e-3,
    )?
    .max_rel_error;
    v.check(err < 1e-3, format!("model+L1 wrt input {err:.1e} < 1e-3"));
    // One probe per parameter tensor through the full model.
    let mut tape = Tape::new();
    let pv = nn::leaves(&mut tape, &params);
    let xv = tape.constant(x.clone());
    let y = forward(&mut tape, &pv, &xv)?;
    let loss = l1(&mut tape, &y)?;
    tape.backward(&loss)?;
    let mut grads = Vec::new();
    pv.visit("", &mut |name, var| grads.push((name, tape.grad(var))));
    let mut worst: f64 = 0.0;
    let h = 1e-6;
    for (name, g) in grads {
        let Some(g) = g else { continue };
        let idx = g.numel() / 2;
        let eval = |delta: f64| -> Result<f64> {
            let mut p = params.clone();
            p.visit_mut("", &mut |n, t| {
                if n == name {
                    t.data_mut()[idx] += delta;
                }
            });
            let mut t = Tape::inference();
            let pv = nn::constants(&mut t, &p);
            let xv = t.constant(x.clone());
            let y = forward(&mut t, &pv, &xv)?;
            l1(&mut t, &y)?.value().item()
        };
        let numeric = (eval(h)? - eval(-h)?) / (2.0 * h);
        worst = worst.max(crate::tensor::relative_error(g.data()[idx], numeric));
    }
    v.check(
        worst < 1e-3,
        format!("model+L1 wrt params {worst:.1e} < 1e-3"),
    );
    Ok(v)
}

// ---- 2 ----

fn zero_projections<P: ParamTree<Tensor>>(p: &mut P) {
    p.visit_mut("", &mut |name, t| {
        if !name.ends_with("norm_gamma")
            && !name.ends_with("norm_beta")
            && !name.ends_with("temperature")
        {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    });
}

fn structure(ctx: &Ctx) -> Result<Verdict> {
    let mut v = Verdict::default();
    let x = rand_tensor(&[2, 3, 8, 12], 400);
    let mut t = Tape::inference();
    let xv = t.constant(x.clone());
    let down = t.pixel_unshuffle(&xv, 2)?;
    let back = t.pixel_shuffle(&down, 2)?;
    v.check(
        bits(back.value().data()) == bits(x.data()),
        "shuffle(unshuffle(x)) == x bitwise",
    );

    let mut r = rng(ctx.seed ^ 0x52);
    let mut block = RestormerBlock::init(8, 2, 2.66, &mut r)?;
    zero_projections(&mut block);
    let mut sp = SpatialAttnParams::init(8, 2, &mut r)?;
    zero_projections(&mut sp);
    let x = rand_tensor(&[1, 8, 4, 6], 401);
    let mut t = Tape::inference();
    let xv = t.constant(x.clone());
    let (bp, sv) = (nn::constants(&mut t, &block), nn::constants(&mut t, &sp));
    let yb = restormer_block(&mut t, &xv, &bp)?;
    let ys = spatial_attention(&mut t, &xv, &sv)?;
    v.check(
        bits(yb.value().data()) == bits(x.data()) && bits(ys.value().data()) == bits(x.data()),
        "zero-weight blocks are exact identities",
    );

    let logits = Tensor::new(
        vec![5, 9],
        rand_tensor(&[5, 9], 402)
            .data()
            .iter()
            .map(|a| 40.0 * a)
            .collect(),
    )?;
    let sv = t.constant(logits);
    let s = t.softmax(&sv, 1)?;
    let dev = s
        .value()
        .data()
        .chunks(9)
        .map(|row| (row.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    v.check(
        dev <= 1e-9,
        format!("softmax rows sum to 1 within {dev:.1e}"),
    );

    let model = Model::new(ModelConfig::toy(), ctx.seed)?;
    let mut r = rng(ctx.seed ^ 0x53);
    let mut bad = Vec::new();
    for k in 0..20 {
        let dims = [
            r.random_range(1..3),
            1,
            4 * r.random_range(1..9),
            4 * r.random_range(1..11),
        ];
        let y = model.predict(&rand_tensor(&dims, 500 + k))?;
        if y.dims() != dims || !y.data().iter().all(|v| v.abs() < 1.0) {
            bad.push(format!("{dims:?}"));
        }
    }
    v.check(
        bad.is_empty(),
        format!(
            "output in (-1,1) with input shape for 20 shapes{}",
            failing(bad)
        ),
    );
    Ok(v)
}

// ---- 3 ----

/// Direct Gaussian-window SSIM, one window at a time.
fn ssim_window_loop(y: &[f64], yh: &[f64], h: usize, w: usize) -> f64 {
    let k = 11;
    let g: Vec<f64> = (0..k)
        .map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp())
        .collect();
    let gs: f64 = g.iter().sum();
    let (c1, c2) = (0.02f64.powi(2), 0.06f64.powi(2));
    let (mut total, mut count) = (0.0, 0);
    for r in 0..=h - k {
        for c in 0..=w - k {
            let at = |i: usize, j: usize| (g[i] * g[j] / (gs * gs), (r + i) * w + c + j);
            let (mut mx, mut my) = (0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    let (wt, p) = at(i, j);
                    mx += wt * y[p];
                    my += wt * yh[p];
                }
            }
            let (mut vx, mut vy, mut cv) = (0.0, 0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    let (wt, p) = at(i, j);
                    let (dx, dy) = (y[p] - mx, yh[p] - my);
                    vx += wt * dx * dx;
                    vy += wt * dy * dy;
                    cv += wt * dx * dy;
                }
            }
            total += ((2.0 * mx * my + c1) * (2.0 * cv + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    total / count as f64
}

/// Two-sided tail of the t distribution by Simpson integration of the density.
fn t_two_tailed(t: f64, df: f64) -> f64 {
    let ln_c = libm::lgamma((df + 1.0) / 2.0)
        - libm::lgamma(df / 2.0)
        - 0.5 * (df * std::f64::consts::PI).ln();
    let dens = |s: f64| (ln_c - (df + 1.0) / 2.0 * (1.0 + s * s / df).ln()).exp();
    let n = 20_000;
    let step = t.abs() / n as f64;
    let mut sum = dens(0.0) + dens(t.abs());
    for i in 1..n {
        sum += dens(i as f64 * step) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    1.0 - 2.0 * sum * step / 3.0
}

fn metric_oracles(_: &Ctx) -> Result<Verdict> {
    let mut v = Verdict::default();
    let y = rand_tensor(&[16, 16], 600);
    let map = |c: f64, s: f64| {
        Tensor::new(
            y.dims().to_vec(),
            y.data().iter().map(|a| c * a + s).collect(),
        )
    };
    let cases = [
        (nmse(&y, &y)?, 0.0),
        (nmse(&y, &map(0.0, 0.0)?)?, 1.0),
        (nmse(&y, &map(0.5, 0.0)?)?, 0.25),
    ];
    v.check(
        cases.iter().all(|(g, w)| (g - w).abs() < 1e-12),
        "nmse 0/1/0.25",
    );
    let p = psnr(&y, &map(1.0, 0.2)?, 2.0)?;
    v.check((p - 20.0).abs() < 1e-9, format!("psnr offset {p:.12} dB"));
    let s = ssim_global(&y, &y, 2.0)?;
    v.check((s - 1.0).abs() < 1e-12, "ssim_global(y,y) = 1");
    let mut worst: f64 = 0.0;
    for k in 0..3 {
        let a = rand_tensor(&[32, 32], 610 + k);
        let n = rand_tensor(&[32, 32], 620 + k);
        let b = Tensor::new(
            vec![32, 32],
            a.data()
                .iter()
                .zip(n.data())
                .map(|(p, q)| 0.6 * p + 0.4 * q)
                .collect(),
        )?;
        let got = ssim_windowed(&a, &b, 11, 1.5, 2.0)?;
        worst = worst.max((got - ssim_window_loop(a.data(), b.data(), 32, 32)).abs());
    }
    v.check(
        worst < 1e-8,
        format!("ssim_windowed vs window loop {worst:.1e}"),
    );
    let w = welch_t_test(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 3.0, 4.0, 5.0, 6.0])?;
    let oracle = t_two_tailed(-1.0, 8.0);
    v.check(
        (w.t + 1.0).abs() < 1e-12
            && (w.df - 8.0).abs() < 1e-12
            && (w.p_two_tailed - oracle).abs() < 1e-4,
        format!(
            "welch t={} df={} p={:.4} (oracle {oracle:.4})",
            w.t, w.df, w.p_two_tailed
        ),
    );
    let cdf_dev = (-8..=8)
        .map(|i| {
            let t = i as f64 * 0.5;
            let tail = t_two_tailed(t, 5.0) / 2.0;
            (student_t_cdf(t, 5.0) - if t < 0.0 { tail } else { 1.0 - tail }).abs()
        })
        .fold(0.0, f64::max);
    v.check(
        cdf_dev < 1e-6,
        format!("t cdf vs integrated density {cdf_dev:.1e}"),
    );
    Ok(v)
}

// ---- 4 ----

fn optimizer(ctx: &Ctx) -> Result<Verdict> {
    let mut v = Verdict::default();
    let cfg = TrainConfig {
        lr: 1e-3,
        weight_decay: 0.01,
        ..TrainConfig::default()
    };
    let theta = Tensor::new(vec![4], vec![1.0, -0.5, 0.25, 2.0])?;
    let g = Tensor::new(vec![4], vec![0.3, -2.0, 1e-3, 0.0])?;
    let (mut p, mut m, mut s) = (
        vec![theta.clone()],
        vec![Tensor::zeros(vec![4])?],
        vec![Tensor::zeros(vec![4])?],
    );
    let mut step = 0;
    adamw_step(
        &mut p,
        &[("0".into(), g.clone())],
        &mut m,
        &mut s,
        &mut step,
        &cfg,
    )?;
    let dev = theta
        .data()
        .iter()
        .zip(g.data())
        .zip(p[0].data())
        .map(|((t, g), got)| {
            let want = t - cfg.lr * (g / (g.abs() + cfg.eps) + cfg.weight_decay * t);
            (got - want).abs()
        })
        .fold(0.0, f64::max);
    v.check(dev < 1e-10, format!("first step closed form {dev:.1e}"));

    let (mut p, mut m, mut s) = (
        vec![theta.clone()],
        vec![Tensor::zeros(vec![4])?],
        vec![Tensor::zeros(vec![4])?],
    );
    let mut step = 0;
    let zero = Tensor::zeros(vec![4])?;
    for _ in 0..10 {
        adamw_step(
            &mut p,
            &[("0".into(), zero.clone())],
            &mut m,
            &mut s,
            &mut step,
            &cfg,
        )?;
    }
    let factor = (1.0 - cfg.lr * cfg.weight_decay).powi(10);
    let dev = theta
        .data()
        .iter()
        .zip(p[0].data())
        .map(|(t, got)| (got - t * factor).abs())
        .fold(0.0, f64::max);
    v.check(
        dev < 1e-10,
        format!("decoupled decay over 10 steps {dev:.1e}"),
    );

    let model = Model::new(
        ModelConfig {
            base_channels: 4,
            ..ModelConfig::toy()
        },
        ctx.seed,
    )?;
    let mut params = model.params.clone();
    let mut state = OptimizerState::zeros(&params)?;
    let frozen = TrainConfig { lr: 0.0, ..cfg };
    let (x, y) = (
        rand_tensor(&[2, 1, 8, 8], 700),
        rand_tensor(&[2, 1, 8, 8], 701),
    );
    for _ in 0..3 {
        train_step(&mut params, &mut state, &x, &y, &frozen)?;
    }
    let same = nn::named_tensors(&params, "")
        .iter()
        .zip(nn::named_tensors(&model.params, ""))
        .all(|((_, a), (_, b))| bits(a.data()) == bits(b.data()));
    v.check(same, "lr = 0 leaves parameters bit-identical");
    Ok(v)
}

// ---- 5 ----

fn complexity(ctx: &Ctx) -> Result<Verdict> {
    let mut v = Verdict::default();
    let mut exact = true;
    for (c, h, w, heads) in [(48, 64, 96, 1), (96, 32, 48, 2), (8, 5, 7, 4)] {
        let a = flops(BlockKind::Mdta, BlockDims::new(c, h, w, heads, 2.66))?;
        let b = flops(BlockKind::Mdta, BlockDims::new(c, 2 * h, w, heads, 2.66))?;
        exact &= b == 2 * a;
    }
    v.check(exact, "MDTA(2HW) = 2 MDTA(HW)");
    let sa = flops(
        BlockKind::SpatialAttention,
        BlockDims::new(64, 64, 64, 1, 2.66),
    )?;
    let sb = flops(
        BlockKind::SpatialAttention,
        BlockDims::new(64, 64, 128, 1, 2.66),
    )?;
    let ratio = sb as f64 / sa as f64;
    v.check(
        ratio > 3.5,
        format!("spatial(2HW)/spatial(HW) = {ratio:.3}"),
    );

    let mut spec = ScalingSpec {
        seed: ctx.seed,
        ..ScalingSpec::default()
    };
    if ctx.quick {
        spec.mdta_sizes.truncate(3);
        spec.spatial_sizes.truncate(3);
    }
    let r = bench_scaling(&spec)?;
    let (me, se) = (
        r.mdta_exponent.unwrap_or(f64::NAN),
        r.spatial_exponent.unwrap_or(f64::NAN),
    );
    v.check(
        (0.8..=1.3).contains(&me),
        format!("mdta exponent {me:.3} in [0.8, 1.3]"),
    );
    v.check(
        (1.7..=2.3).contains(&se),
        format!("spatial exponent {se:.3} in [1.7, 2.3]"),
    );

    let (h, w) = spec.mdta_sizes[spec.mdta_sizes.len() - 1];
    let probe = ScalingSpec {
        repeats: 7,
        warmup: 3,
        ..spec.clone()
    };
    let change = repeat_stability(Tower::Mdta, &probe, h, w)?;
    v.check(
        change < 0.10,
        format!("doubling repeats moves the median {:.1}%", 100.0 * change),
    );
    Ok(v)
}

// ---- 6 ----

fn param_budget(ctx: &Ctx) -> Result<Verdict> {
    let mut v = Verdict::default();
    let mut r = rng(ctx.seed ^ 0x56);
    let mut mismatches = Vec::new();
    for _ in 0..5 {
        let cfg = ModelConfig {
            base_channels: 4 * r.random_range(1..5),
            encoder_blocks: [
                r.random_range(0..3),
                r.random_range(0..3),
                r.random_range(0..3),
            ],
            bottleneck_channel_blocks: r.random_range(0..3),
            bottleneck_spatial_blocks: r.random_range(0..2),
            decoder_blocks: [
                r.random_range(0..3),
                r.random_range(0..3),
                r.random_range(0..3),
            ],
            bottleneck_heads: [1, 2, 4][r.random_range(0..3)],
            gdfn_expansion: r.random_range(0.5..3.0),
            ..ModelConfig::default()
        };
        let (counted, enumerated) = (count_params(&cfg)?, nn::scalar_count(&build(&cfg, 0)?));
        if counted != enumerated {
            mismatches.push(format!("{counted} vs {enumerated}"));
        }
    }
    v.check(
        mismatches.is_empty(),
        format!(
            "count_params exact on 5 random configs{}",
            failing(mismatches)
        ),
    );
    let n = count_params(&ModelConfig::default())?;
    let dev = (n as f64 - PARAM_BUDGET as f64) / PARAM_BUDGET as f64;
    v.check(
        dev.abs() <= 0.30,
        format!(
            "default model {n} parameters ({:+.1}% of budget)",
            100.0 * dev
        ),
    );
    Ok(v)
}

// ---- 7 ----

/// Losses of `steps` updates on fixed batches of the 8 training pairs.
pub(crate) fn overfit_run(
    seed: u64,
    steps: usize,
) -> Result<(Model, Vec<f64>, Vec<(Tensor, Tensor)>)> {
    let case = gen_case(
        "overfit",
        FieldStrength::T3,
        seed,
        Dims3::new(8, 64, 96),
        &PhantomParams::default(),
    )?;
    let pairs: Vec<(Tensor, Tensor)> = (0..8)
        .map(|k| -> Result<_> {
            Ok((
                Tensor::new(vec![1, 1, 64, 96], case.x.slice(k).to_vec())?,
                Tensor::new(vec![1, 1, 64, 96], case.y.slice(k).to_vec())?,
            ))
        })
        .collect::<Result<_>>()?;
    let batches: Vec<(Tensor, Tensor)> = pairs
        .chunks(2)
        .map(|c| -> Result<_> {
            let xs: Vec<Tensor> = c.iter().map(|p| p.0.clone()).collect();
            let ys: Vec<Tensor> = c.iter().map(|p| p.1.clone()).collect();
            Ok((Tensor::stack_batch(&xs)?, Tensor::stack_batch(&ys)?))
        })
        .collect::<Result<_>>()?;
    let cfg = TrainConfig {
        lr: 2e-3,
        batch_size: 2,
        augment_flip: false,
        seed,
        ..TrainConfig::default()
    };
    let mut model = Model::new(ModelConfig::toy(), seed)?;
    let mut state = OptimizerState::zeros(&model.params)?;
    let mut losses = Vec::with_capacity(steps);
    for s in 0..steps {
        let (x, y) = &batches[s % batches.len()];
        losses.push(train_step(&mut model.params, &mut state, x, y, &cfg)?);
    }
    Ok((model, losses, pairs))
}

/// Means of consecutive 10-step windows ending at every 50th step.
pub fn sampled_moving_average(losses: &[f64]) -> Vec<f64> {
    (50..=losses.len())
        .step_by(50)
        .map(|end| losses[end - 10..end].iter().sum::<f64>() / 10.0)
        .collect()
}

fn learning(ctx: &Ctx) -> Result<Verdict> {
    let mut v = Verdict::default();
    let steps = if ctx.quick { 150 } else { 500 };
    let (model, losses, pairs) = overfit_run(ctx.seed, steps)?;
    let l1 = pairs
        .iter()
        .map(|(x, y)| -> Result<f64> {
            let p = model.predict(x)?;
            Ok(p.data()
                .iter()
                .zip(y.data())
                .map(|(a, b)| (a - b).abs())
                .sum::<f64>()
                / p.numel() as f64)
        })
        .sum::<Result<f64>>()?
        / pairs.len() as f64;
    v.check(
        l1 < 0.05,
        format!("train L1 {l1:.4} < 0.05 after {steps} steps"),
    );
    let ma = sampled_moving_average(&losses);
    let rises = ma.windows(2).filter(|w| w[1] > 1.25 * w[0]).count();
    v.check(
        rises == 0 && ma.last() < ma.first(),
        format!(
            "sampled moving average {:.4} -> {:.4}",
            ma[0],
            ma[ma.len() - 1]
        ),
    );
    let (_, again, _) = overfit_run(ctx.seed, 20)?;
    v.check(
        bits(&again) == bits(&losses[..20]),
        "first 20 losses repeat bit-exactly",
    );
    Ok(v)
}

// ---- 8 ----

fn small_corpus(seed: u64, dir: &Path) -> Result<crate::synthdata::DatasetManifest> {
    let spec = CorpusSpec {
        n_cases: 16,
        field_mix: (0.5, 0.5),
        dims: Dims3::new(2, 16, 16),
        seed,
        ..CorpusSpec::default()
    };
    build_corpus(&spec, dir)
}

fn small_train(seed: u64) -> TrainConfig {
    TrainConfig {
        lr: 2e-3,
        batch_size: 2,
        epochs: 2,
        steps_per_epoch: 2,
        seed,
        ..TrainConfig::default()
    }
}

fn small_model() -> ModelConfig {
    ModelConfig {
        base_channels: 4,
        ..ModelConfig::toy()
    }
}

fn protocol(ctx: &Ctx) -> Result<Verdict> {
    let mut v = Verdict::default();
    let root = ctx.scratch.join("protocol");
    let m = small_corpus(ctx.seed, &root.join("data"))?;
    let model = Model::new(small_model(), ctx.seed)?;
    let opts = TestOptions::default();
    let first = run_test("m", &model, &m, None, &opts)?;
    let again = run_test("m", &model, &m, Some(&first.samples), &opts)?;
    again.write(&root.join("eval"))?;
    v.check(
        !again.rows.is_empty() && again.rows.iter().all(|r| r.p_vs_reference == Some(1.0)),
        format!("eval self-comparison: {} rows all p = 1", again.rows.len()),
    );
    let id = run_test("identity", &Identity, &m, Some(&first.samples), &opts)?;
    v.check(
        id.rows.iter().all(|r| r.p_vs_reference.is_some()),
        "eval reports Welch p-values",
    );

    let spec = AblationSpec {
        train: TrainConfig {
            epochs: 1,
            ..small_train(ctx.seed)
        },
        model: small_model(),
        eval_batch_size: 8,
    };
    let ab = run_ablation(&spec, &m, &root.join("ablate"))?;
    let cells = ab.rows.len() == 6 * TABLE2_METRICS.len();
    let mixed_p = ab
        .rows
        .iter()
        .filter(|r| r.strategy == "mixed")
        .all(|r| r.p_vs_mixed == Some(1.0));
    v.check(
        cells && mixed_p,
        format!("ablate grid {} rows, mixed p = 1", ab.rows.len()),
    );
    let counts = split_counts(141, &DEFAULT_SPLIT_FRACTIONS);
    v.check(
        counts == [105, 19, 17],
        format!("141 cases split {}/{}/{}", counts[0], counts[1], counts[2]),
    );
    Ok(v)
}

// ---- 9 ----

fn files_equal(a: &Path, b: &Path) -> Result<bool> {
    let read = |p: &Path| std::fs::read(p).map_err(|e| Error::io(p, e));
    Ok(read(a)? == read(b)?)
}

/// Every file under `a` has a byte-identical twin at the same place under `b`.
fn tree_equal(a: &Path, b: &Path) -> Result<bool> {
    let mut names: Vec<_> = std::fs::read_dir(a)
        .map_err(|e| Error::io(a, e))?
        .filter_map(|e| e.ok().map(|e| e.file_name()))
        .collect();
    names.sort();
    for n in names {
        let (pa, pb) = (a.join(&n), b.join(&n));
        let same = if pa.is_dir() {
            tree_equal(&pa, &pb)?
        } else {
            files_equal(&pa, &pb)?
        };
        if !same {
            return Ok(false);
        }
    }
    Ok(true)
}

fn reproducibility(ctx: &Ctx) -> Result<Verdict> {
    let mut v = Verdict::default();
    let root = ctx.scratch.join("repro");
    let (ma, mb) = (
        small_corpus(ctx.seed, &root.join("data_a"))?,
        small_corpus(ctx.seed, &root.join("data_b"))?,
    );
    v.check(
        tree_equal(&root.join("data_a"), &root.join("data_b"))?,
        "gen-data bytes",
    );

    let (cfg, mc) = (small_train(ctx.seed), small_model());
    let a = fit(&cfg, &ma, &mc, &root.join("train_a"), None)?;
    fit(&cfg, &mb, &mc, &root.join("train_b"), None)?;
    let same = files_equal(
        &root.join("train_a").join(LOG_FILE),
        &root.join("train_b").join(LOG_FILE),
    )? && files_equal(
        &a.best_path,
        &root
            .join("train_b")
            .join(a.best_path.file_name().unwrap_or_default()),
    )? && files_equal(
        &a.last_path,
        &root
            .join("train_b")
            .join(a.last_path.file_name().unwrap_or_default()),
    )?;
    v.check(same, "train log and checkpoint bytes");

    let opts = TestOptions::default();
    run_test("m", &a.model, &ma, None, &opts)?.write(&root.join("eval_a"))?;
    run_test("m", &a.model, &mb, None, &opts)?.write(&root.join("eval_b"))?;
    v.check(
        tree_equal(&root.join("eval_a"), &root.join("eval_b"))?,
        "eval CSV bytes",
    );

    let entry = ma
        .split(Split::Test)
        .next()
        .ok_or_else(|| Error::invalid("selftest", "empty test split"))?;
    let (x, _) = ma.load_pair(entry)?;
    for name in ["infer_a.uvol", "infer_b.uvol"] {
        write_outputs(&infer_volume(&a.model, &x, false)?, &root.join(name), None)?;
    }
    v.check(
        files_equal(&root.join("infer_a.uvol"), &root.join("infer_b.uvol"))?,
        "infer UVOL bytes",
    );
    let back = read_volume(&root.join("infer_a.uvol"))?;

    let ckpt = Checkpoint {
        config: mc.clone(),
        params: a.model.params.clone(),
        optimizer: None,
        epoch: 0,
        rng: RngState::capture(&rng(ctx.seed)),
        val_metric: 0.0,
        meta: Vec::new(),
    };
    let path = root.join("roundtrip.ckpt");
    save_checkpoint(&ckpt, &path)?;
    let loaded = load_checkpoint(&path, Some(&mc))?;
    let reloaded = Model {
        config: loaded.config,
        params: loaded.params,
    };
    let probe = rand_tensor(&[1, 1, 16, 16], 900);
    v.check(
        bits(reloaded.predict(&probe)?.data()) == bits(a.model.predict(&probe)?.data())
            && bits(infer_volume(&reloaded, &x, false)?.volume.data()) == bits(back.data()),
        "checkpoint save/load/forward bits",
    );

    let full = fit(
        &TrainConfig {
            epochs: 3,
            ..cfg.clone()
        },
        &ma,
        &mc,
        &root.join("full"),
        None,
    )?;
    let half = fit(
        &TrainConfig {
            epochs: 1,
            ..cfg.clone()
        },
        &ma,
        &mc,
        &root.join("half"),
        None,
    )?;
    let resumed = resume_from(
        &half.last_path,
        &TrainConfig { epochs: 3, ..cfg },
        &ma,
        &root.join("half"),
        None,
        Some(&mc),
    )?;
    let dev = full
        .log
        .iter()
        .zip(&resumed.log)
        .map(|(p, q)| (p.train_loss - q.train_loss).abs())
        .fold(0.0, f64::max);
    v.check(
        resumed.log.len() == full.log.len() && dev <= 1e-6,
        format!("resume matches uninterrupted loss within {dev:.1e}"),
    );
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn moving_average_samples_every_fifty_steps() {
        let losses: Vec<f64> = (0..120).map(|i| i as f64).collect();
        assert_eq!(sampled_moving_average(&losses), vec![44.5, 94.5]);
        assert!(sampled_moving_average(&losses[..49]).is_empty());
    }

    #[test]
    fn verdict_reports_failures_only() {
        let mut v = Verdict::default();
        v.check(true, "a");
        v.check(false, "b");
        assert_eq!(v.finish(), (false, "b".to_string()));
    }

    #[test]
    fn t_tail_oracle_matches_library() {
        let p = t_two_tailed(-1.0, 8.0);
        assert!((p - 0.3466).abs() < 1e-4, "{p}");
        assert!((2.0 * student_t_cdf(-1.0, 8.0) - p).abs() < 1e-6);
    }
}
