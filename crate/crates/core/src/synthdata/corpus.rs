use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::uvol::{read_volume, write_volume};
use super::{
    degrade, derive_seed, gen_phantom, normalize_unit_range, Dims3, PairedCase, PhantomParams,
    Provenance, Volume,
};
use crate::error::{Error, Result};
use crate::evalharness::{make_split, SplitSpec, DEFAULT_SPLIT_FRACTIONS};
use crate::field::FieldStrength;
use crate::par;

pub const GENERATOR_VERSION: &str = "phantom-v1";

/// 1.5T : 3T case ratio of the clinical corpus, 35 : 108.
pub const DEFAULT_FIELD_MIX: (f64, f64) = (35.0 / 143.0, 108.0 / 143.0);

pub const MANIFEST_FILE: &str = "manifest.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::invalid("split", format!("unknown split `{other}`"))),
        }
    }
}

/// One case of the corpus. Paths are relative to the manifest's directory.
#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub case_id: String,
    pub field: FieldStrength,
    pub split: Split,
    pub x_path: PathBuf,
    pub y_path: PathBuf,
    pub case_seed: u64,
    pub blur_sigma: f64,
    pub noise_frac: f64,
    pub bias_strength: f64,
}

#[derive(Serialize, Deserialize)]
struct ManifestRow {
    case_id: String,
    field_strength: FieldStrength,
    split: Split,
    x_path: String,
    y_path: String,
    case_seed: u64,
    global_seed: u64,
    generator_version: String,
    blur_sigma: f64,
    noise_frac: f64,
    bias_strength: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    /// Directory that entry paths are relative to.
    pub root: PathBuf,
    pub seed: u64,
    pub generator_version: String,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    pub fn fields(&self) -> Vec<FieldStrength> {
        let mut f: Vec<_> = self.entries.iter().map(|e| e.field).collect();
        f.sort();
        f.dedup();
        f
    }

    /// Reads the normalized `(x, y)` volumes of an entry.
    pub fn load_pair(&self, entry: &ManifestEntry) -> Result<(Volume, Volume)> {
        let x = read_volume(&self.root.join(&entry.x_path))?;
        let y = read_volume(&self.root.join(&entry.y_path))?;
        if x.dims() != y.dims() {
            return Err(Error::Malformed(format!(
                "case {}: input dims {} differ from target dims {}",
                entry.case_id,
                x.dims(),
                y.dims()
            )));
        }
        Ok((x, y))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for e in &self.entries {
            w.serialize(ManifestRow {
                case_id: e.case_id.clone(),
                field_strength: e.field,
                split: e.split,
                x_path: e.x_path.to_string_lossy().into_owned(),
                y_path: e.y_path.to_string_lossy().into_owned(),
                case_seed: e.case_seed,
                global_seed: self.seed,
                generator_version: self.generator_version.clone(),
                blur_sigma: e.blur_sigma,
                noise_frac: e.noise_frac,
                bias_strength: e.bias_strength,
            })?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Reads a manifest; relative paths resolve against its directory.
    pub fn read(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)
            .map_err(|e| Error::from(e).context(format!("reading {}", path.display())))?;
        let mut entries = Vec::new();
        let mut meta: Option<(u64, String)> = None;
        for row in r.deserialize() {
            let row: ManifestRow = row?;
            match &meta {
                None => meta = Some((row.global_seed, row.generator_version.clone())),
                Some((s, v)) if *s != row.global_seed || *v != row.generator_version => {
                    return Err(Error::Malformed(format!(
                        "{}: case {} has a different seed or generator version",
                        path.display(),
                        row.case_id
                    )))
                }
                _ => {}
            }
            entries.push(ManifestEntry {
                case_id: row.case_id,
                field: row.field_strength,
                split: row.split,
                x_path: row.x_path.into(),
                y_path: row.y_path.into(),
                case_seed: row.case_seed,
                blur_sigma: row.blur_sigma,
                noise_frac: row.noise_frac,
                bias_strength: row.bias_strength,
            });
        }
        let (seed, generator_version) = meta.ok_or_else(|| {
            Error::Malformed(format!("{}: manifest has no cases", path.display()))
        })?;
        let mut ids: Vec<&str> = entries.iter().map(|e| e.case_id.as_str()).collect();
        ids.sort_unstable();
        if let Some(w) = ids.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Malformed(format!(
                "{}: case {} listed twice",
                path.display(),
                w[0]
            )));
        }
        Ok(DatasetManifest {
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            seed,
            generator_version,
            entries,
        })
    }
}

/// Generates one aligned pair; both volumes normalized per volume to [-1, 1].
pub fn gen_case(
    case_id: &str,
    field: FieldStrength,
    global_seed: u64,
    dims: Dims3,
    phantom: &PhantomParams,
) -> Result<PairedCase> {
    let phantom_seed = derive_seed(global_seed, &format!("phantom/{case_id}"));
    let degrade_seed = derive_seed(global_seed, &format!("degrade/{case_id}"));
    let mut y = gen_phantom(phantom_seed, dims, phantom)?;
    let (mut x, params) = degrade(&y, field, degrade_seed)?;
    normalize_unit_range(y.data_mut());
    normalize_unit_range(x.data_mut());
    Ok(PairedCase {
        case_id: case_id.to_string(),
        field,
        x,
        y,
        provenance: Provenance {
            phantom_seed,
            degrade_seed,
            phantom: phantom.clone(),
            degrade: params,
        },
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub n_cases: usize,
    /// Fractions of 1.5T and 3T cases; must sum to 1.
    pub field_mix: (f64, f64),
    pub dims: Dims3,
    pub seed: u64,
    pub phantom: PhantomParams,
    pub split_fractions: [f64; 3],
    pub stratify: bool,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        CorpusSpec {
            n_cases: 24,
            field_mix: DEFAULT_FIELD_MIX,
            dims: Dims3::new(8, 64, 96),
            seed: 0,
            phantom: PhantomParams::default(),
            split_fractions: DEFAULT_SPLIT_FRACTIONS,
            stratify: true,
        }
    }
}

impl CorpusSpec {
    /// Number of 1.5T cases: nearest integer to `n · mix.0`, halves rounded up.
    pub fn low_field_count(&self) -> usize {
        (self.n_cases as f64 * self.field_mix.0).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_cases < 3 {
            return Err(Error::invalid(
                "build_corpus",
                format!("need at least 3 cases, got {}", self.n_cases),
            ));
        }
        let (a, b) = self.field_mix;
        if a < 0.0 || b < 0.0 || !a.is_finite() || !b.is_finite() || (a + b - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(
                "build_corpus",
                format!("field mix ({a}, {b}) must be non-negative and sum to 1"),
            ));
        }
        Ok(())
    }
}

/// Writes `cases/<id>_x.uvol`, `cases/<id>_y.uvol` and `manifest.csv` under `out_dir`.
pub fn build_corpus(spec: &CorpusSpec, out_dir: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    let n = spec.n_cases;
    let n15 = spec.low_field_count();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(
        spec.seed, "fields",
    )));
    let mut fields = vec![FieldStrength::T3; n];
    for &i in &order[..n15] {
        fields[i] = FieldStrength::T1_5;
    }

    let cases_dir = out_dir.join("cases");
    std::fs::create_dir_all(&cases_dir).map_err(|e| Error::io(&cases_dir, e))?;
    let results = par::map_range(n, |i| -> Result<ManifestEntry> {
        let case_id = format!("case{i:03}");
        let case = gen_case(&case_id, fields[i], spec.seed, spec.dims, &spec.phantom)?;
        let x_path = PathBuf::from("cases").join(format!("{case_id}_x.uvol"));
        let y_path = PathBuf::from("cases").join(format!("{case_id}_y.uvol"));
        write_volume(&case.x, &out_dir.join(&x_path))?;
        write_volume(&case.y, &out_dir.join(&y_path))?;
        let p = &case.provenance.degrade;
        Ok(ManifestEntry {
            case_id,
            field: case.field,
            split: Split::Train,
            x_path,
            y_path,
            case_seed: case.provenance.phantom_seed,
            blur_sigma: p.blur_sigma,
            noise_frac: p.noise_frac,
            bias_strength: p.bias_strength,
        })
    });
    let mut entries = results.into_iter().collect::<Result<Vec<_>>>()?;
    make_split(
        &mut entries,
        &SplitSpec {
            fractions: spec.split_fractions,
            seed: derive_seed(spec.seed, "split"),
            stratify_by_field: spec.stratify,
        },
    )?;
    let manifest = DatasetManifest {
        root: out_dir.to_path_buf(),
        seed: spec.seed,
        generator_version: GENERATOR_VERSION.to_string(),
        entries,
    };
    manifest.write(&out_dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}
