use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::config::{
    format_kv, join, parse_bool, parse_kv, parse_list, parse_value, ConfigSection, KvEntry,
};
use crate::error::{Error, Result};
use crate::evalharness::{ScalingSpec, SplitSpec};
use crate::field::FieldStrength;
use crate::metrics::Aggregation;
use crate::model::ModelConfig;
use crate::synthdata::{CorpusSpec, Dims3, PhantomParams, Split};
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub n_cases: usize,
    /// Fraction of 1.5T cases; the rest are 3T.
    pub low_field_fraction: f64,
    pub depth: usize,
    pub height: usize,
    pub width: usize,
    pub complexity: f64,
    pub split_fractions: [f64; 3],
    pub stratify: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        let c = CorpusSpec::default();
        DataConfig {
            n_cases: c.n_cases,
            low_field_fraction: c.field_mix.0,
            depth: c.dims.d,
            height: c.dims.h,
            width: c.dims.w,
            complexity: c.phantom.complexity,
            split_fractions: c.split_fractions,
            stratify: c.stratify,
        }
    }
}

impl ConfigSection for DataConfig {
    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("n_cases", self.n_cases.to_string()),
            ("low_field_fraction", self.low_field_fraction.to_string()),
            ("depth", self.depth.to_string()),
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("complexity", self.complexity.to_string()),
            ("split_fractions", join(&self.split_fractions)),
            ("stratify", self.stratify.to_string()),
        ]
    }

    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        const INT: &str = "non-negative integer";
        match key {
            "n_cases" => self.n_cases = parse_value(key, value, INT)?,
            "low_field_fraction" => self.low_field_fraction = parse_value(key, value, "float")?,
            "depth" => self.depth = parse_value(key, value, INT)?,
            "height" => self.height = parse_value(key, value, INT)?,
            "width" => self.width = parse_value(key, value, INT)?,
            "complexity" => self.complexity = parse_value(key, value, "float")?,
            "split_fractions" => {
                let v: Vec<f64> = parse_list(key, value, "three comma-separated floats")?;
                self.split_fractions = v.try_into().map_err(|_| {
                    Error::Config(format!(
                        "key `{key}`: expected three comma-separated floats, got `{value}`"
                    ))
                })?;
            }
            "stratify" => self.stratify = parse_bool(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub aggregation: Aggregation,
    pub eval_batch_size: usize,
    pub eval_split: Split,
    /// Restrict training and evaluation to these field strengths; empty means all.
    pub fields: Vec<FieldStrength>,
    pub png: bool,
    pub normalize_input: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            aggregation: Aggregation::Slice,
            eval_batch_size: 8,
            eval_split: Split::Test,
            fields: Vec::new(),
            png: false,
            normalize_input: false,
        }
    }
}

impl ConfigSection for EvalConfig {
    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            (
                "aggregation",
                match self.aggregation {
                    Aggregation::Slice => "slice",
                    Aggregation::Volume => "volume",
                }
                .to_string(),
            ),
            ("eval_batch_size", self.eval_batch_size.to_string()),
            ("eval_split", self.eval_split.to_string()),
            (
                "fields",
                if self.fields.is_empty() {
                    "all".to_string()
                } else {
                    join(&self.fields)
                },
            ),
            ("png", self.png.to_string()),
            ("normalize_input", self.normalize_input.to_string()),
        ]
    }

    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "aggregation" => {
                self.aggregation = value
                    .parse()
                    .map_err(|e: Error| Error::Config(e.to_string()))?
            }
            "eval_batch_size" => {
                self.eval_batch_size = parse_value(key, value, "positive integer")?
            }
            "eval_split" => {
                self.eval_split = value
                    .parse()
                    .map_err(|e: Error| Error::Config(e.to_string()))?
            }
            "fields" => {
                self.fields = if value.trim() == "all" {
                    Vec::new()
                } else {
                    parse_list(key, value, "`all` or field strengths such as 1.5,3")?
                }
            }
            "png" => self.png = parse_bool(key, value)?,
            "normalize_input" => self.normalize_input = parse_bool(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

fn parse_sizes(key: &str, value: &str) -> Result<Vec<(usize, usize)>> {
    value
        .split(',')
        .map(|s| {
            let (h, w) = s.trim().split_once('x').ok_or_else(|| {
                Error::Config(format!(
                    "key `{key}`: expected sizes like 32x48,64x96, got `{value}`"
                ))
            })?;
            Ok((
                parse_value(key, h, "HxW sizes")?,
                parse_value(key, w, "HxW sizes")?,
            ))
        })
        .collect()
}

fn format_sizes(sizes: &[(usize, usize)]) -> String {
    sizes
        .iter()
        .map(|(h, w)| format!("{h}x{w}"))
        .collect::<Vec<_>>()
        .join(",")
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchConfig {
    pub scaling: ScalingSpec,
    /// Run the timing sweep; the FLOP tables are always written.
    pub bench_timing: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            scaling: ScalingSpec::default(),
            bench_timing: true,
        }
    }
}

impl ConfigSection for BenchConfig {
    fn entries(&self) -> Vec<(&'static str, String)> {
        let s = &self.scaling;
        vec![
            ("bench_channels", s.channels.to_string()),
            ("bench_heads", s.heads.to_string()),
            ("bench_depth", s.depth.to_string()),
            ("bench_mdta_sizes", format_sizes(&s.mdta_sizes)),
            ("bench_spatial_sizes", format_sizes(&s.spatial_sizes)),
            ("bench_repeats", s.repeats.to_string()),
            ("bench_warmup", s.warmup.to_string()),
            ("bench_timing", self.bench_timing.to_string()),
        ]
    }

    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        const INT: &str = "non-negative integer";
        let s = &mut self.scaling;
        match key {
            "bench_channels" => s.channels = parse_value(key, value, INT)?,
            "bench_heads" => s.heads = parse_value(key, value, INT)?,
            "bench_depth" => s.depth = parse_value(key, value, INT)?,
            "bench_mdta_sizes" => s.mdta_sizes = parse_sizes(key, value)?,
            "bench_spatial_sizes" => s.spatial_sizes = parse_sizes(key, value)?,
            "bench_repeats" => s.repeats = parse_value(key, value, INT)?,
            "bench_warmup" => s.warmup = parse_value(key, value, INT)?,
            "bench_timing" => self.bench_timing = parse_bool(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PathsConfig {
    pub data_dir: PathBuf,
    pub runs_dir: PathBuf,
    /// Exact run directory; when unset one is created under `runs_dir`.
    pub run_dir: Option<PathBuf>,
    pub tag: Option<String>,
    pub checkpoint: Option<PathBuf>,
    pub resume: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub reference: Option<PathBuf>,
    pub name: String,
}

fn opt_path(p: &Option<PathBuf>) -> String {
    p.as_ref()
        .map(|p| p.display().to_string())
        .unwrap_or_default()
}

fn set_opt_path(value: &str) -> Option<PathBuf> {
    let v = value.trim();
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl ConfigSection for PathsConfig {
    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("data_dir", self.data_dir.display().to_string()),
            ("runs_dir", self.runs_dir.display().to_string()),
            ("run_dir", opt_path(&self.run_dir)),
            ("tag", self.tag.clone().unwrap_or_default()),
            ("checkpoint", opt_path(&self.checkpoint)),
            ("resume", opt_path(&self.resume)),
            ("input", opt_path(&self.input)),
            ("output", opt_path(&self.output)),
            ("reference", opt_path(&self.reference)),
            ("name", self.name.clone()),
        ]
    }

    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "data_dir" => self.data_dir = PathBuf::from(value.trim()),
            "runs_dir" => self.runs_dir = PathBuf::from(value.trim()),
            "run_dir" => self.run_dir = set_opt_path(value),
            "tag" => self.tag = (!value.trim().is_empty()).then(|| value.trim().to_string()),
            "checkpoint" => self.checkpoint = set_opt_path(value),
            "resume" => self.resume = set_opt_path(value),
            "input" => self.input = set_opt_path(value),
            "output" => self.output = set_opt_path(value),
            "reference" => self.reference = set_opt_path(value),
            "name" => self.name = value.trim().to_string(),
            _ => return Ok(false),
        }
        Ok(true)
    }
}

/// Named model sizes; explicit model keys override the preset.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Preset {
    #[default]
    Full,
    Toy,
}

impl Preset {
    fn parse(value: &str) -> Result<Self> {
        match value.trim() {
            "full" => Ok(Preset::Full),
            "toy" => Ok(Preset::Toy),
            other => Err(Error::Config(format!(
                "key `preset`: expected full or toy, got `{other}`"
            ))),
        }
    }

    fn name(self) -> &'static str {
        match self {
            Preset::Full => "full",
            Preset::Toy => "toy",
        }
    }

    fn model(self) -> ModelConfig {
        match self {
            Preset::Full => ModelConfig::default(),
            Preset::Toy => ModelConfig::toy(),
        }
    }
}

/// Every setting of one invocation, each with exactly one effective value.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads; 0 uses every available core.
    pub threads: usize,
    pub preset: Preset,
    /// Shrinks the selftest workloads (fewer steps, smaller sweeps).
    pub selftest_quick: bool,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
    pub paths: PathsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            threads: 0,
            preset: Preset::Full,
            selftest_quick: false,
            data: DataConfig::default(),
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            bench: BenchConfig::default(),
            paths: PathsConfig {
                data_dir: PathBuf::from("data"),
                runs_dir: PathBuf::from("runs"),
                name: "model".into(),
                ..PathsConfig::default()
            },
        }
    }
}

/// Where a setting came from.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Origin {
    File { path: PathBuf, line: usize },
    Cli,
}

impl RunConfig {
    /// All resolved settings in a stable order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let mut out = vec![
            ("seed", self.seed.to_string()),
            ("threads", self.threads.to_string()),
            ("preset", self.preset.name().to_string()),
            ("selftest_quick", self.selftest_quick.to_string()),
        ];
        out.extend(self.data.entries());
        out.extend(self.model.entries());
        out.extend(
            self.train
                .entries()
                .into_iter()
                .filter(|(k, _)| *k != "seed"),
        );
        out.extend(self.eval.entries());
        out.extend(self.bench.entries());
        out.extend(self.paths.entries());
        out
    }

    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "seed" => {
                self.seed = parse_value(key, value, "non-negative integer")?;
                self.train.seed = self.seed;
                return Ok(true);
            }
            "threads" => {
                self.threads = parse_value(key, value, "non-negative integer")?;
                return Ok(true);
            }
            "preset" => {
                self.preset = Preset::parse(value)?;
                return Ok(true);
            }
            "selftest_quick" => {
                self.selftest_quick = parse_bool(key, value)?;
                return Ok(true);
            }
            _ => {}
        }
        Ok(self.data.set(key, value)?
            || self.model.set(key, value)?
            || self.train.set(key, value)?
            || self.eval.set(key, value)?
            || self.bench.set(key, value)?
            || self.paths.set(key, value)?)
    }

    /// Defaults, then the file, then command-line overrides.
    ///
    /// `preset` is applied before any other key so explicit model keys win
    /// over it regardless of order.
    pub fn resolve(
        file: Option<(&Path, &str)>,
        overrides: &[(String, String)],
    ) -> Result<(Self, BTreeMap<String, Origin>)> {
        let mut merged: BTreeMap<String, (String, Origin)> = BTreeMap::new();
        let mut order: Vec<String> = Vec::new();
        if let Some((path, text)) = file {
            let entries: Vec<KvEntry> =
                parse_kv(text).map_err(|e| e.context(path.display().to_string()))?;
            for e in entries {
                order.push(e.key.clone());
                merged.insert(
                    e.key,
                    (
                        e.value,
                        Origin::File {
                            path: path.to_path_buf(),
                            line: e.line,
                        },
                    ),
                );
            }
        }
        for (k, v) in overrides {
            let key = crate::config::normalize_key(k);
            if !merged.contains_key(&key) {
                order.push(key.clone());
            }
            merged.insert(key, (v.clone(), Origin::Cli));
        }
        let mut cfg = RunConfig::default();
        if let Some((v, _)) = merged.get("preset") {
            cfg.preset = Preset::parse(v)?;
            cfg.model = cfg.preset.model();
        }
        for key in &order {
            let (value, origin) = &merged[key];
            if !cfg.set(key, value)? {
                return Err(match origin {
                    Origin::File { path, line } => {
                        Error::Config(format!("unknown key `{key}` at {}:{line}", path.display()))
                    }
                    Origin::Cli => {
                        Error::Usage(format!("unknown option `--{}`", key.replace('_', "-")))
                    }
                });
            }
        }
        cfg.validate()?;
        Ok((cfg, merged.into_iter().map(|(k, (_, o))| (k, o)).collect()))
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        if self.eval.eval_batch_size == 0 {
            return Err(Error::InvalidConfig(
                "eval_batch_size must be at least 1".into(),
            ));
        }
        self.split_spec().validate()?;
        Ok(())
    }

    pub fn corpus_spec(&self) -> CorpusSpec {
        let d = &self.data;
        CorpusSpec {
            n_cases: d.n_cases,
            field_mix: (d.low_field_fraction, 1.0 - d.low_field_fraction),
            dims: Dims3::new(d.depth, d.height, d.width),
            seed: self.seed,
            phantom: PhantomParams {
                complexity: d.complexity,
            },
            split_fractions: d.split_fractions,
            stratify: d.stratify,
        }
    }

    pub fn split_spec(&self) -> SplitSpec {
        SplitSpec {
            fractions: self.data.split_fractions,
            seed: self.seed,
            stratify_by_field: self.data.stratify,
        }
    }

    pub fn fields(&self) -> Option<&[FieldStrength]> {
        (!self.eval.fields.is_empty()).then_some(self.eval.fields.as_slice())
    }

    /// The resolved config as `key = value` text, headed by the subcommand.
    pub fn echo(&self, command: &str) -> String {
        format!("# {command}\n{}", format_kv(self.entries()))
    }
}
