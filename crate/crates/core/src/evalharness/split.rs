use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::synthdata::{ManifestEntry, Split};

/// Case-level train/val/test assignment.
#[derive(Clone, Debug, PartialEq)]
pub struct SplitSpec {
    /// Train, val, test.
    pub fractions: [f64; 3],
    pub seed: u64,
    pub stratify_by_field: bool,
}

pub const DEFAULT_SPLIT_FRACTIONS: [f64; 3] = [0.745, 0.135, 0.120];

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            fractions: DEFAULT_SPLIT_FRACTIONS,
            seed: 0,
            stratify_by_field: true,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let sum: f64 = self.fractions.iter().sum();
        if self.fractions.iter().any(|f| !f.is_finite() || *f < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(
                "make_split",
                format!(
                    "fractions {:?} must be non-negative and sum to 1",
                    self.fractions
                ),
            ));
        }
        Ok(())
    }
}

/// Largest-remainder apportionment of `n` items by `weights`. Ties in the
/// remainder go to the earlier entry.
pub fn apportion(n: usize, weights: &[f64]) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    if total <= 0.0 {
        let mut out = vec![0; weights.len()];
        if let Some(first) = out.first_mut() {
            *first = n;
        }
        return out;
    }
    let quotas: Vec<f64> = weights.iter().map(|w| n as f64 * w / total).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    let short = n - counts.iter().sum::<usize>();
    for &i in order.iter().take(short) {
        counts[i] += 1;
    }
    counts
}

/// Split sizes for `n` cases. With at least three cases no split is left
/// empty: an empty split borrows one case from the largest.
pub fn split_counts(n: usize, fractions: &[f64; 3]) -> [usize; 3] {
    let c = apportion(n, fractions);
    let mut counts = [c[0], c[1], c[2]];
    if n >= 3 {
        for i in 0..3 {
            if counts[i] == 0 && fractions[i] > 0.0 {
                let largest = (0..3)
                    .max_by_key(|&j| (counts[j], std::cmp::Reverse(j)))
                    .expect("three splits");
                counts[largest] -= 1;
                counts[i] += 1;
            }
        }
    }
    counts
}

const SPLITS: [Split; 3] = [Split::Train, Split::Val, Split::Test];

/// Assigns every entry a split. Pure function of the entries' ids/fields and
/// the spec; entry order does not matter.
pub fn make_split(entries: &mut [ManifestEntry], spec: &SplitSpec) -> Result<()> {
    spec.validate()?;
    let totals = split_counts(entries.len(), &spec.fractions);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let mut groups: BTreeMap<_, Vec<usize>> = BTreeMap::new();
    for (i, e) in entries.iter().enumerate() {
        let key = spec.stratify_by_field.then_some(e.field);
        groups.entry(key).or_default().push(i);
    }
    let mut remaining = totals;
    let n_groups = groups.len();
    for (gi, (_, mut members)) in groups.into_iter().enumerate() {
        members.sort_by(|&a, &b| entries[a].case_id.cmp(&entries[b].case_id));
        members.shuffle(&mut rng);
        let counts = if gi + 1 == n_groups {
            remaining
        } else {
            let c = apportion(members.len(), &remaining.map(|r| r as f64));
            [c[0], c[1], c[2]]
        };
        let mut it = members.into_iter();
        for (s, &k) in SPLITS.iter().zip(&counts) {
            for idx in it.by_ref().take(k) {
                entries[idx].split = *s;
            }
        }
        for (r, c) in remaining.iter_mut().zip(counts) {
            *r -= c;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;
    use std::path::PathBuf;

    use super::*;
    use crate::field::FieldStrength;

    fn entries(n: usize, n15: usize) -> Vec<ManifestEntry> {
        (0..n)
            .map(|i| ManifestEntry {
                case_id: format!("case{i:03}"),
                field: if i < n15 {
                    FieldStrength::T1_5
                } else {
                    FieldStrength::T3
                },
                split: Split::Train,
                x_path: PathBuf::from(format!("x{i}")),
                y_path: PathBuf::from(format!("y{i}")),
                case_seed: i as u64,
                blur_sigma: 0.0,
                noise_frac: 0.0,
                bias_strength: 0.0,
            })
            .collect()
    }

    fn tally(e: &[ManifestEntry]) -> [usize; 3] {
        let mut t = [0; 3];
        for x in e {
            t[x.split as usize] += 1;
        }
        t
    }

    #[test]
    fn default_fractions_at_141() {
        assert_eq!(split_counts(141, &DEFAULT_SPLIT_FRACTIONS), [105, 19, 17]);
        let mut e = entries(141, 35);
        make_split(&mut e, &SplitSpec::default()).unwrap();
        assert_eq!(tally(&e), [105, 19, 17]);
    }

    #[test]
    fn twelve_cases() {
        assert_eq!(split_counts(12, &DEFAULT_SPLIT_FRACTIONS), [9, 2, 1]);
        assert_eq!(split_counts(8, &DEFAULT_SPLIT_FRACTIONS), [6, 1, 1]);
        for n in 8..200 {
            assert!(split_counts(n, &DEFAULT_SPLIT_FRACTIONS)
                .iter()
                .all(|&c| c > 0));
            assert_eq!(
                split_counts(n, &DEFAULT_SPLIT_FRACTIONS)
                    .iter()
                    .sum::<usize>(),
                n
            );
        }
    }

    #[test]
    fn largest_remainder_ties_go_first() {
        assert_eq!(apportion(1, &[0.5, 0.5]), vec![1, 0]);
        assert_eq!(apportion(10, &[1.0, 1.0, 1.0]), vec![4, 3, 3]);
        assert_eq!(apportion(5, &[0.0, 0.0]), vec![5, 0]);
    }

    #[test]
    fn deterministic_and_order_free() {
        let mut a = entries(40, 10);
        let mut b = entries(40, 10);
        b.reverse();
        let spec = SplitSpec {
            seed: 9,
            ..Default::default()
        };
        make_split(&mut a, &spec).unwrap();
        make_split(&mut b, &spec).unwrap();
        b.reverse();
        assert_eq!(a, b);
        let mut c = entries(40, 10);
        make_split(
            &mut c,
            &SplitSpec {
                seed: 10,
                ..Default::default()
            },
        )
        .unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn stratified_keeps_field_ratio() {
        for (n, n15) in [(141, 35), (40, 10), (12, 3), (60, 15)] {
            let mut e = entries(n, n15);
            let total15 = e.iter().filter(|x| x.field == FieldStrength::T1_5).count();
            make_split(&mut e, &SplitSpec::default()).unwrap();
            let totals = tally(&e);
            for s in SPLITS {
                let in_split = e.iter().filter(|x| x.split == s).count();
                let f15 = e
                    .iter()
                    .filter(|x| x.split == s && x.field == FieldStrength::T1_5)
                    .count();
                let expected = in_split as f64 * total15 as f64 / n as f64;
                assert!(
                    (f15 as f64 - expected).abs() <= 1.0,
                    "n {n} split {s:?}: {f15} vs {expected}"
                );
                assert_eq!(in_split, totals[s as usize]);
            }
            let ids: HashSet<_> = e.iter().map(|x| &x.case_id).collect();
            assert_eq!(ids.len(), n);
        }
    }

    #[test]
    fn rejects_bad_fractions() {
        let mut e = entries(10, 2);
        for f in [[0.5, 0.5, 0.5], [1.2, -0.1, -0.1], [f64::NAN, 0.5, 0.5]] {
            let spec = SplitSpec {
                fractions: f,
                ..Default::default()
            };
            assert!(make_split(&mut e, &spec).is_err());
        }
    }
}
