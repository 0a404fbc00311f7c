//! Synthetic paired volumes standing in for the clinical corpus.
//!
//! A procedural phantom plays the role of the high-field T1 map (target);
//! [`degrade`] turns it into a simulated 1.5T or 3T T1-weighted input. The
//! pairs are generated already aligned. Volumes are stored in the UVOL
//! container ([`uvol`]) and listed in a CSV manifest ([`corpus`]).

mod corpus;
mod degrade;
mod export;
mod phantom;
pub(crate) mod preprocess;
pub mod uvol;

use std::fmt;

use crate::error::{Error, Result};
use crate::field::FieldStrength;

pub use corpus::{
    build_corpus, gen_case, CorpusSpec, DatasetManifest, ManifestEntry, Split, DEFAULT_FIELD_MIX,
    GENERATOR_VERSION, MANIFEST_FILE,
};
pub use degrade::{contrast_remap, degrade, degrade_with, gaussian_blur_plane, DegradeParams};
pub use export::{slice_to_rgb, write_png, Colormap, Grayscale, Lut};
pub use phantom::{gen_phantom, PhantomParams, Tissue};
pub use preprocess::{
    augment_flip, center_crop_or_pad, extract_slices, flip_horizontal, normalize_unit_range,
    percentile, stack_slices,
};

/// Volume extent: depth (axial slice count), height, width.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Dims3 {
    pub d: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims3 {
    pub const fn new(d: usize, h: usize, w: usize) -> Self {
        Dims3 { d, h, w }
    }

    pub fn numel(self) -> usize {
        self.d * self.h * self.w
    }

    pub fn plane(self) -> usize {
        self.h * self.w
    }
}

impl fmt::Display for Dims3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.d, self.h, self.w)
    }
}

/// Single-channel 3-D image with D×H×W row-major voxels.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    dims: Dims3,
    data: Vec<f64>,
    /// Physical value range before normalization (informational).
    pub value_range: (f64, f64),
    /// Voxel spacing in mm, depth first (informational).
    pub spacing: [f64; 3],
}

impl Volume {
    pub fn new(dims: Dims3, data: Vec<f64>) -> Result<Self> {
        if dims.d == 0 || dims.h == 0 || dims.w == 0 {
            return Err(Error::invalid(
                "volume",
                format!("dims {dims} must all be at least 1"),
            ));
        }
        if data.len() != dims.numel() {
            return Err(Error::invalid(
                "volume",
                format!(
                    "dims {dims} need {} voxels, got {}",
                    dims.numel(),
                    data.len()
                ),
            ));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                op: "volume",
                index: i,
            });
        }
        let value_range = min_max(&data);
        Ok(Volume {
            dims,
            data,
            value_range,
            spacing: [1.0; 3],
        })
    }

    pub fn dims(&self) -> Dims3 {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn slice(&self, k: usize) -> &[f64] {
        let p = self.dims.plane();
        &self.data[k * p..(k + 1) * p]
    }
}

pub(crate) fn min_max(data: &[f64]) -> (f64, f64) {
    data.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}

/// Aligned input/target pair for one simulated subject.
#[derive(Clone, Debug)]
pub struct PairedCase {
    pub case_id: String,
    pub field: FieldStrength,
    /// Simulated T1-weighted input.
    pub x: Volume,
    /// Simulated quantitative T1 map.
    pub y: Volume,
    pub provenance: Provenance,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Provenance {
    pub phantom_seed: u64,
    pub degrade_seed: u64,
    pub phantom: PhantomParams,
    pub degrade: DegradeParams,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Stable per-item seed from a global seed and a textual tag.
pub fn derive_seed(global: u64, tag: &str) -> u64 {
    // FNV-1a over the tag, then mixed with the global seed.
    let h = tag.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ b as u64).wrapping_mul(0x0100_0000_01b3)
    });
    splitmix64(splitmix64(global) ^ h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn volume_validates() {
        assert!(Volume::new(Dims3::new(0, 2, 2), vec![]).is_err());
        assert!(Volume::new(Dims3::new(1, 2, 2), vec![0.0; 3]).is_err());
        assert!(Volume::new(Dims3::new(1, 1, 2), vec![0.0, f64::NAN]).is_err());
        let v = Volume::new(Dims3::new(2, 1, 2), vec![1.0, -2.0, 3.0, 0.5]).unwrap();
        assert_eq!(v.value_range, (-2.0, 3.0));
        assert_eq!(v.slice(1), &[3.0, 0.5]);
    }

    #[test]
    fn derived_seeds_are_stable_and_distinct() {
        assert_eq!(derive_seed(7, "case001"), derive_seed(7, "case001"));
        assert_ne!(derive_seed(7, "case001"), derive_seed(7, "case002"));
        assert_ne!(derive_seed(7, "case001"), derive_seed(8, "case001"));
    }
}
