//! Command-line entry point: `restormer <command> [--config FILE] [--key value]...`

mod config;
mod selftest;

use std::io::Write;
use std::path::{Path, PathBuf};

pub use config::{BenchConfig, DataConfig, EvalConfig, Origin, PathsConfig, Preset, RunConfig};
pub use selftest::{run_selftest, CheckOutcome};

use crate::error::{Error, Result};
use crate::evalharness::{
    bench_scaling, flops, infer_volume, model_flops, run_ablation, run_test, total_flops,
    write_outputs, AblationSpec, BlockDims, BlockKind, Identity, Predictor, TestOptions,
    TABLE1_FILE, TABLE2_FILE,
};
use crate::metrics::read_samples_csv;
use crate::model::{load_checkpoint, Model};
use crate::par;
use crate::synthdata::uvol::read_volume;
use crate::synthdata::{build_corpus, DatasetManifest, Split, MANIFEST_FILE};
use crate::training::{fit, resume_from, LOG_FILE};

pub const CONFIG_ECHO_FILE: &str = "config.txt";
pub const FLOPS_FILE: &str = "flops.csv";
pub const BLOCK_FLOPS_FILE: &str = "block_flops.csv";
pub const SCALING_FILE: &str = "scaling.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    GenData,
    Train,
    Infer,
    Eval,
    Ablate,
    Bench,
    Selftest,
}

impl Command {
    pub const ALL: [Command; 7] = [
        Command::GenData,
        Command::Train,
        Command::Infer,
        Command::Eval,
        Command::Ablate,
        Command::Bench,
        Command::Selftest,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train => "train",
            Command::Infer => "infer",
            Command::Eval => "eval",
            Command::Ablate => "ablate",
            Command::Bench => "bench",
            Command::Selftest => "selftest",
        }
    }

    fn summary(self) -> &'static str {
        match self {
            Command::GenData => "build the synthetic paired corpus and its manifest",
            Command::Train => "train a model on the corpus (or resume a run)",
            Command::Infer => "predict a UVOL volume with a checkpoint",
            Command::Eval => "hold-out test metrics, optionally against a reference",
            Command::Ablate => "mixed vs single-field training comparison",
            Command::Bench => "FLOP tables and single-thread scaling sweep",
            Command::Selftest => "run the invariant suite",
        }
    }
}

pub fn usage() -> String {
    let mut s = String::from(
        "usage: restormer <command> [--config FILE] [--key value | --key=value]...\n\ncommands:\n",
    );
    for c in Command::ALL {
        s.push_str(&format!("  {:<10} {}\n", c.name(), c.summary()));
    }
    s.push_str(
        "\nAny configuration key can be given on the command line; `--seed N` and `--threads N`\n",
    );
    s.push_str("apply to every command. Run a command with --print-config to see every key.\n");
    s
}

/// A parsed command line.
#[derive(Clone, Debug, PartialEq)]
pub struct Invocation {
    pub command: Command,
    pub config_file: Option<PathBuf>,
    pub overrides: Vec<(String, String)>,
    pub print_config: bool,
}

pub enum Parsed {
    Help,
    Run(Invocation),
}

/// Splits argv (without the program name) into a command and `--key value` pairs.
pub fn parse_args(args: &[String]) -> Result<Parsed> {
    let Some(first) = args.first() else {
        return Err(Error::Usage("missing command".into()));
    };
    if matches!(first.as_str(), "-h" | "--help" | "help") {
        return Ok(Parsed::Help);
    }
    let command = Command::ALL
        .into_iter()
        .find(|c| c.name() == first)
        .ok_or_else(|| Error::Usage(format!("unknown command `{first}`")))?;
    let mut inv = Invocation {
        command,
        config_file: None,
        overrides: Vec::new(),
        print_config: false,
    };
    let mut i = 1;
    while i < args.len() {
        let tok = &args[i];
        let Some(flag) = tok.strip_prefix("--") else {
            return Err(Error::Usage(format!("unexpected argument `{tok}`")));
        };
        match flag {
            "help" => return Ok(Parsed::Help),
            "print-config" => {
                inv.print_config = true;
                i += 1;
                continue;
            }
            _ => {}
        }
        let (key, value) = match flag.split_once('=') {
            Some((k, v)) => (k.to_string(), v.to_string()),
            None => {
                let v = args
                    .get(i + 1)
                    .ok_or_else(|| Error::Usage(format!("option `{tok}` needs a value")))?;
                i += 1;
                (flag.to_string(), v.clone())
            }
        };
        if key.is_empty() {
            return Err(Error::Usage(format!("malformed option `{tok}`")));
        }
        if key == "config" {
            if inv.config_file.is_some() {
                return Err(Error::Usage("--config given twice".into()));
            }
            inv.config_file = Some(PathBuf::from(value));
        } else {
            if inv
                .overrides
                .iter()
                .any(|(k, _)| crate::config::normalize_key(k) == crate::config::normalize_key(&key))
            {
                return Err(Error::Usage(format!("option `--{key}` given twice")));
            }
            inv.overrides.push((key, value));
        }
        i += 1;
    }
    Ok(Parsed::Run(inv))
}

pub fn resolve(inv: &Invocation) -> Result<RunConfig> {
    let text = match &inv.config_file {
        Some(p) => Some(std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?),
        None => None,
    };
    let file = inv.config_file.as_deref().zip(text.as_deref());
    RunConfig::resolve(file, &inv.overrides).map(|(cfg, _)| cfg)
}

/// Exit code for an error: 2 for bad invocations, 1 for everything else.
pub fn exit_code(err: &Error) -> i32 {
    match err.root() {
        Error::Usage(_) | Error::Config(_) | Error::InvalidConfig(_) => 2,
        _ => 1,
    }
}

/// Runs one command line; returns the process exit code.
pub fn dispatch(args: &[String]) -> i32 {
    let inv = match parse_args(args) {
        Ok(Parsed::Help) => {
            print!("{}", usage());
            return 0;
        }
        Ok(Parsed::Run(inv)) => inv,
        Err(e) => {
            eprintln!("error: {e}\n\n{}", usage());
            return exit_code(&e);
        }
    };
    match resolve(&inv).and_then(|cfg| {
        if inv.print_config {
            print!("{}", cfg.echo(inv.command.name()));
            return Ok(0);
        }
        par::with_threads(cfg.threads, || execute(inv.command, &cfg))
    }) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            exit_code(&e)
        }
    }
}

/// `runs/<timestamp>-<tag>/`, or `run_dir` verbatim when given. The resolved
/// config is written there before any work starts.
pub fn prepare_run_dir(cfg: &RunConfig, command: Command) -> Result<PathBuf> {
    let dir = match &cfg.paths.run_dir {
        Some(d) => d.clone(),
        None => {
            let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
            let tag = cfg.paths.tag.as_deref().unwrap_or(command.name());
            let base = cfg.paths.runs_dir.join(format!("{stamp}-{tag}"));
            let mut dir = base.clone();
            let mut k = 1;
            while dir.exists() {
                dir = PathBuf::from(format!("{}-{k}", base.display()));
                k += 1;
            }
            dir
        }
    };
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let echo = dir.join(CONFIG_ECHO_FILE);
    std::fs::write(&echo, cfg.echo(command.name())).map_err(|e| Error::io(&echo, e))?;
    Ok(dir)
}

fn require<'a>(p: &'a Option<PathBuf>, key: &str, command: Command) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Usage(format!("`{}` needs --{key}", command.name())))
}

fn load_manifest(cfg: &RunConfig) -> Result<DatasetManifest> {
    let path = cfg.paths.data_dir.join(MANIFEST_FILE);
    DatasetManifest::read(&path)
        .map_err(|e| e.context("reading corpus manifest (run gen-data first?)"))
}

/// The checkpoint carries its own architecture, so model keys are ignored here.
fn load_model(path: &Path) -> Result<Model> {
    let ckpt = load_checkpoint(path, None)?;
    Ok(Model {
        config: ckpt.config,
        params: ckpt.params,
    })
}

fn execute(command: Command, cfg: &RunConfig) -> Result<i32> {
    if command == Command::Selftest {
        let dir = prepare_run_dir(cfg, command)?;
        let outcomes = run_selftest(
            cfg.seed,
            cfg.selftest_quick,
            &dir.join("scratch"),
            &mut std::io::stdout(),
        )?;
        let failed = outcomes.iter().filter(|o| !o.passed).count();
        let report = dir.join("selftest.txt");
        let text: String = outcomes.iter().map(|o| format!("{}\n", o.line())).collect();
        std::fs::write(&report, text).map_err(|e| Error::io(&report, e))?;
        println!("{} checks, {failed} failed", outcomes.len());
        return Ok(if failed == 0 { 0 } else { 1 });
    }
    // A resumed run continues in the directory that holds its checkpoint.
    let mut cfg = cfg.clone();
    if let (Command::Train, Some(ckpt), None) = (command, &cfg.paths.resume, &cfg.paths.run_dir) {
        cfg.paths.run_dir = Some(
            ckpt.parent()
                .filter(|p| !p.as_os_str().is_empty())
                .unwrap_or(Path::new("."))
                .to_path_buf(),
        );
    }
    let cfg = &cfg;
    let dir = prepare_run_dir(cfg, command)?;
    println!("run directory: {}", dir.display());
    match command {
        Command::GenData => gen_data(cfg),
        Command::Train => train(cfg, &dir),
        Command::Infer => infer(cfg, &dir),
        Command::Eval => eval(cfg, &dir),
        Command::Ablate => ablate(cfg, &dir),
        Command::Bench => bench(cfg, &dir),
        Command::Selftest => unreachable!(),
    }?;
    Ok(0)
}

fn gen_data(cfg: &RunConfig) -> Result<()> {
    let spec = cfg.corpus_spec();
    let m = build_corpus(&spec, &cfg.paths.data_dir)?;
    println!(
        "wrote {} cases of {} to {}",
        m.entries.len(),
        spec.dims,
        cfg.paths.data_dir.join(MANIFEST_FILE).display()
    );
    for split in [Split::Train, Split::Val, Split::Test] {
        let e: Vec<_> = m.split(split).collect();
        let low = e
            .iter()
            .filter(|e| e.field == crate::FieldStrength::T1_5)
            .count();
        println!(
            "  {split:<5} {:>4} cases ({low} at 1.5T, {} at 3T)",
            e.len(),
            e.len() - low
        );
    }
    Ok(())
}

fn train(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let manifest = load_manifest(cfg)?;
    let out = match &cfg.paths.resume {
        Some(ckpt) => resume_from(
            ckpt,
            &cfg.train,
            &manifest,
            dir,
            cfg.fields(),
            Some(&cfg.model),
        )?,
        None => fit(&cfg.train, &manifest, &cfg.model, dir, cfg.fields())?,
    };
    println!("epoch  train_l1   val_nmse  val_psnr  val_ssim");
    for r in &out.log {
        println!(
            "{:>5}  {:>8.5}  {:>9.5}  {:>8.3}  {:>8.4}",
            r.epoch, r.train_loss, r.val_nmse, r.val_psnr_db, r.val_ssim
        );
    }
    println!(
        "best epoch {} (val {} {:.6}); checkpoints {} and {}; log {}",
        out.best_epoch,
        cfg.train.val_metric,
        out.best_val,
        out.best_path.display(),
        out.last_path.display(),
        dir.join(LOG_FILE).display()
    );
    Ok(())
}

fn infer(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let ckpt = require(&cfg.paths.checkpoint, "checkpoint", Command::Infer)?;
    let input = require(&cfg.paths.input, "input", Command::Infer)?;
    let model = load_model(ckpt)?;
    let volume = read_volume(input)?;
    let out = infer_volume(&model, &volume, cfg.eval.normalize_input)?;
    let uvol = cfg
        .paths
        .output
        .clone()
        .unwrap_or_else(|| dir.join("prediction.uvol"));
    let png = dir.join("prediction.png");
    let mid = volume.dims().d / 2;
    write_outputs(&out, &uvol, cfg.eval.png.then_some((png.as_path(), mid)))?;
    for (k, t) in out.latencies.iter().enumerate() {
        println!("slice {k:>3}: {:.4} s", t);
    }
    println!(
        "wrote {} ({}; network input padded to {}x{}); median latency {:.4} s/slice",
        uvol.display(),
        out.volume.dims(),
        out.padded.0,
        out.padded.1,
        out.median_latency()
    );
    Ok(())
}

fn eval(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let manifest = load_manifest(cfg)?;
    let ckpt = require(&cfg.paths.checkpoint, "checkpoint", Command::Eval)?;
    let model;
    let pred: &dyn Predictor = if ckpt == Path::new("identity") {
        &Identity
    } else {
        model = load_model(ckpt)?;
        &model
    };
    let reference = match &cfg.paths.reference {
        Some(p) => Some(read_samples_csv(p)?.1),
        None => None,
    };
    let opts = TestOptions {
        split: cfg.eval.eval_split,
        aggregation: cfg.eval.aggregation,
        batch_size: cfg.eval.eval_batch_size,
        fields: cfg.fields().map(<[_]>::to_vec),
    };
    let report = run_test(
        &cfg.paths.name,
        pred,
        &manifest,
        reference.as_deref(),
        &opts,
    )?;
    report.write(dir)?;
    println!(
        "{:<6} {:<14} {:>10} {:>10} {:>5} {:>10}",
        "field", "metric", "mean", "sd", "n", "p"
    );
    for r in &report.rows {
        let p = r
            .p_vs_reference
            .map_or("-".to_string(), |p| format!("{p:.4}"));
        println!(
            "{:<6} {:<14} {:>10.5} {:>10.5} {:>5} {:>10}",
            r.field, r.metric, r.mean, r.sd, r.n, p
        );
    }
    println!("wrote {}", dir.join(TABLE1_FILE).display());
    Ok(())
}

fn ablate(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let manifest = load_manifest(cfg)?;
    let spec = AblationSpec {
        train: cfg.train.clone(),
        model: cfg.model.clone(),
        eval_batch_size: cfg.eval.eval_batch_size,
    };
    let report = run_ablation(&spec, &manifest, dir)?;
    println!(
        "{} optimizer steps per epoch for every strategy",
        report.steps_per_epoch
    );
    println!(
        "{:<10} {:<6} {:<8} {:>10} {:>10} {:>8}  {}",
        "strategy", "field", "metric", "mean", "sd", "p", "note"
    );
    for r in &report.rows {
        let p = r.p_vs_mixed.map_or("-".to_string(), |p| format!("{p:.4}"));
        let note = [r.direction.as_str(), r.note.as_str()]
            .iter()
            .filter(|s| !s.is_empty())
            .copied()
            .collect::<Vec<_>>()
            .join(" ");
        println!(
            "{:<10} {:<6} {:<8} {:>10.5} {:>10.5} {:>8}  {note}",
            r.strategy, r.input_field, r.metric, r.mean, r.sd, p
        );
    }
    println!("wrote {}", dir.join(TABLE2_FILE).display());
    Ok(())
}

fn write_csv(
    path: &Path,
    header: &[&str],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(&r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn bench(cfg: &RunConfig, dir: &Path) -> Result<()> {
    let (h, w) = (cfg.data.height, cfg.data.width);
    let entries = model_flops(&cfg.model, h, w)?;
    write_csv(
        &dir.join(FLOPS_FILE),
        &["stage", "kind", "channels", "h", "w", "macs"],
        entries.iter().map(|e| {
            vec![
                e.stage.clone(),
                e.kind.to_string(),
                e.c.to_string(),
                e.h.to_string(),
                e.w.to_string(),
                e.macs.to_string(),
            ]
        }),
    )?;
    println!("model MACs at {h}x{w}: {}", total_flops(&entries));

    let s = &cfg.bench.scaling;
    let mut rows = Vec::new();
    let mut sizes = s.mdta_sizes.clone();
    sizes.extend(&s.spatial_sizes);
    sizes.sort_unstable();
    sizes.dedup();
    for kind in [BlockKind::Mdta, BlockKind::SpatialAttention] {
        for &(bh, bw) in &sizes {
            let m = flops(
                kind,
                BlockDims::new(s.channels, bh, bw, s.heads, cfg.model.gdfn_expansion),
            )?;
            rows.push(vec![
                kind.to_string(),
                s.channels.to_string(),
                bh.to_string(),
                bw.to_string(),
                s.heads.to_string(),
                m.to_string(),
            ]);
        }
    }
    write_csv(
        &dir.join(BLOCK_FLOPS_FILE),
        &["block", "channels", "h", "w", "heads", "macs"],
        rows,
    )?;

    if cfg.bench.bench_timing {
        let report = bench_scaling(s)?;
        report.write(&dir.join(SCALING_FILE))?;
        for p in &report.points {
            println!(
                "{:<18} {:>4}x{:<4} {:>12} MACs  {:.5} s",
                p.tower, p.h, p.w, p.macs, p.median_seconds
            );
        }
        let fmt = |e: Option<f64>| e.map_or("n/a".to_string(), |e| format!("{e:.3}"));
        println!(
            "scaling exponent in pixel count (1 thread): mdta {}, spatial attention {}",
            fmt(report.mdta_exponent),
            fmt(report.spatial_exponent)
        );
    }
    Ok(())
}

/// Writes `text` to stdout, ignoring a closed pipe.
pub(crate) fn emit(out: &mut dyn Write, text: &str) {
    let _ = out.write_all(text.as_bytes());
    let _ = out.flush();
}
