use rand::Rng;

use super::{Dims3, Volume};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Axial slices as `[H, W]` tensors, in depth order.
pub fn extract_slices(v: &Volume) -> Vec<Tensor> {
    let d = v.dims();
    (0..d.d)
        .map(|k| Tensor::new(vec![d.h, d.w], v.slice(k).to_vec()).expect("slice dims match plane"))
        .collect()
}

/// Inverse of [`extract_slices`].
pub fn stack_slices(slices: &[Tensor]) -> Result<Volume> {
    let first = slices
        .first()
        .ok_or_else(|| Error::invalid("stack_slices", "no slices"))?;
    let [h, w] = first.dims() else {
        return Err(Error::invalid(
            "stack_slices",
            format!("expected [H, W] slices, got {:?}", first.dims()),
        ));
    };
    let (h, w) = (*h, *w);
    let mut data = Vec::with_capacity(slices.len() * h * w);
    for s in slices {
        if s.dims() != [h, w] {
            return Err(Error::ShapeMismatch {
                op: "stack_slices",
                lhs: vec![h, w],
                rhs: s.dims().to_vec(),
            });
        }
        data.extend_from_slice(s.data());
    }
    Volume::new(Dims3::new(slices.len(), h, w), data)
}

/// Offset of the kept window (crop) or of the source (pad), with the odd
/// voxel going to the top/left.
fn offset(from: usize, to: usize) -> usize {
    from.abs_diff(to).div_ceil(2)
}

/// Center crop each axis that is too large, zero-pad each axis that is too
/// small. When the difference is odd the extra row/column is taken from (or
/// added to) the top/left.
pub fn center_crop_or_pad(slice: &Tensor, th: usize, tw: usize) -> Result<Tensor> {
    let [h, w] = slice.dims() else {
        return Err(Error::invalid(
            "center_crop_or_pad",
            format!("expected an [H, W] slice, got {:?}", slice.dims()),
        ));
    };
    let (h, w) = (*h, *w);
    if th == 0 || tw == 0 || th % 4 != 0 || tw % 4 != 0 {
        return Err(Error::invalid(
            "center_crop_or_pad",
            format!("target {th}x{tw} must be nonzero and divisible by 4"),
        ));
    }
    Ok(resize_window(slice.data(), h, w, th, tw))
}

/// Crop/pad without the divisibility requirement (used to restore original dims).
pub(crate) fn resize_window(src: &[f64], h: usize, w: usize, th: usize, tw: usize) -> Tensor {
    let (oy, ox) = (offset(h, th), offset(w, tw));
    let mut out = vec![0.0; th * tw];
    for r in 0..th {
        let sr = if h >= th {
            Some(r + oy)
        } else {
            r.checked_sub(oy).filter(|&s| s < h)
        };
        let Some(sr) = sr else { continue };
        for c in 0..tw {
            let sc = if w >= tw {
                Some(c + ox)
            } else {
                c.checked_sub(ox).filter(|&s| s < w)
            };
            if let Some(sc) = sc {
                out[r * tw + c] = src[sr * w + sc];
            }
        }
    }
    Tensor::new(vec![th, tw], out).expect("window dims")
}

/// Linear-interpolated percentile (`p` in [0, 100]) of unsorted data.
pub fn percentile(data: &[f64], p: f64) -> f64 {
    let mut sorted = data.to_vec();
    sorted.sort_by(f64::total_cmp);
    percentile_sorted(&sorted, p)
}

fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    sorted[lo] + (rank - lo as f64) * (sorted[hi] - sorted[lo])
}

pub const CLIP_LOW_PCT: f64 = 0.5;
pub const CLIP_HIGH_PCT: f64 = 99.5;

/// Robust min-max to [-1, 1]: clip at the 0.5th/99.5th percentiles, then map
/// linearly. Constant input becomes all zeros.
pub fn normalize_unit_range(data: &mut [f64]) {
    if data.is_empty() {
        return;
    }
    let mut sorted = data.to_vec();
    sorted.sort_by(f64::total_cmp);
    let lo = percentile_sorted(&sorted, CLIP_LOW_PCT);
    let hi = percentile_sorted(&sorted, CLIP_HIGH_PCT);
    if hi <= lo {
        data.fill(0.0);
        return;
    }
    for v in data.iter_mut() {
        *v = (2.0 * (v.clamp(lo, hi) - lo) / (hi - lo) - 1.0).clamp(-1.0, 1.0);
    }
}

/// Left-right flip along the last axis.
pub fn flip_horizontal(t: &Tensor) -> Tensor {
    let w = *t.dims().last().unwrap_or(&1);
    let data: Vec<f64> = t
        .data()
        .chunks(w.max(1))
        .flat_map(|row| row.iter().rev().copied())
        .collect();
    Tensor::new(t.dims().to_vec(), data).expect("same dims")
}

/// Flips both images with probability 1/2, sharing one coin toss.
pub fn augment_flip<R: Rng + ?Sized>(
    x: &Tensor,
    y: &Tensor,
    rng: &mut R,
) -> (Tensor, Tensor, bool) {
    if rng.random_bool(0.5) {
        (flip_horizontal(x), flip_horizontal(y), true)
    } else {
        (x.clone(), y.clone(), false)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::testutil::rand_tensor;

    #[test]
    fn slices_round_trip() {
        let data: Vec<f64> = (0..10 * 3 * 4).map(|i| i as f64).collect();
        let v = Volume::new(Dims3::new(10, 3, 4), data.clone()).unwrap();
        let s = extract_slices(&v);
        assert_eq!(s.len(), 10);
        assert_eq!(s[7].data(), &data[7 * 12..8 * 12]);
        assert_eq!(stack_slices(&s).unwrap().data(), v.data());
        assert!(stack_slices(&[]).is_err());
    }

    #[test]
    fn crop_takes_center_window() {
        let src = Tensor::new(vec![300, 400], (0..120_000).map(|i| i as f64).collect()).unwrap();
        let out = center_crop_or_pad(&src, 256, 384).unwrap();
        assert_eq!(out.dims(), &[256, 384]);
        // Offsets (300-256)/2 = 22 and (400-384)/2 = 8.
        assert_eq!(out.data()[0], (22 * 400 + 8) as f64);
        assert_eq!(
            out.data()[256 * 384 - 1],
            ((22 + 255) * 400 + 8 + 383) as f64
        );
    }

    #[test]
    fn pad_centers_with_zeros() {
        let src = Tensor::full(vec![200, 300], 1.0).unwrap();
        let out = center_crop_or_pad(&src, 256, 384).unwrap();
        let d = out.data();
        assert_eq!(d.iter().sum::<f64>(), 60_000.0);
        assert_eq!(d[28 * 384 + 42], 1.0);
        assert_eq!(d[27 * 384 + 42], 0.0);
        assert_eq!(d[28 * 384 + 41], 0.0);
        assert_eq!(d[227 * 384 + 341], 1.0);
        assert_eq!(d[228 * 384 + 341], 0.0);
    }

    #[test]
    fn odd_difference_goes_top_left() {
        let src = Tensor::full(vec![1, 1], 5.0).unwrap();
        let out = center_crop_or_pad(&src, 4, 4).unwrap();
        // Three rows/cols of padding: two on top/left.
        assert_eq!(out.data()[2 * 4 + 2], 5.0);
        let src = Tensor::new(vec![7, 4], (0..28).map(|i| i as f64).collect()).unwrap();
        let out = center_crop_or_pad(&src, 4, 4).unwrap();
        assert_eq!(out.data()[0], 8.0);
        // Padding then cropping back restores the original.
        let odd = rand_tensor(&[5, 7], 1);
        let padded = resize_window(odd.data(), 5, 7, 8, 12);
        assert_eq!(resize_window(padded.data(), 8, 12, 5, 7).data(), odd.data());
    }

    #[test]
    fn exact_size_is_identity() {
        let src = rand_tensor(&[16, 24], 2);
        assert_eq!(center_crop_or_pad(&src, 16, 24).unwrap().data(), src.data());
        assert!(center_crop_or_pad(&src, 18, 24).is_err());
    }

    #[test]
    fn normalize_percentile_example() {
        let mut v: Vec<f64> = (0..=100).map(|i| i as f64).collect();
        normalize_unit_range(&mut v);
        // 0.5th percentile is 0.5, 99.5th is 99.5.
        assert_eq!(v[0], -1.0);
        assert_eq!(v[100], 1.0);
        for (i, x) in v.iter().enumerate().skip(1).take(99) {
            let want = 2.0 * (i as f64 - 0.5) / 99.0 - 1.0;
            assert!((x - want).abs() < 1e-12, "{i}");
        }
        assert_eq!(percentile(&[3.0, 1.0, 2.0], 50.0), 2.0);
    }

    #[test]
    fn normalize_constant_and_idempotent() {
        let mut c = vec![4.2; 50];
        normalize_unit_range(&mut c);
        assert!(c.iter().all(|v| *v == 0.0));

        let mut d: Vec<f64> = std::iter::repeat_n(-1.0, 10)
            .chain(std::iter::repeat_n(1.0, 10))
            .chain(rand_tensor(&[180], 3).data().iter().copied())
            .collect();
        let before = d.clone();
        normalize_unit_range(&mut d);
        for (a, b) in before.iter().zip(&d) {
            assert!((a - b).abs() < 1e-6);
        }
        let once = d.clone();
        normalize_unit_range(&mut d);
        for (a, b) in once.iter().zip(&d) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn flips() {
        let x = rand_tensor(&[3, 5], 4);
        assert_eq!(flip_horizontal(&flip_horizontal(&x)).data(), x.data());
        assert_eq!(flip_horizontal(&x).data()[0], x.data()[4]);
        let y = rand_tensor(&[3, 5], 5);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pattern: Vec<bool> = (0..100)
            .map(|_| {
                let (fx, fy, flipped) = augment_flip(&x, &y, &mut rng);
                assert_eq!(fx.data() != x.data(), flipped);
                assert_eq!(fy.data() != y.data(), flipped);
                flipped
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let again: Vec<bool> = (0..100).map(|_| augment_flip(&x, &y, &mut rng).2).collect();
        assert_eq!(pattern, again);
        let n = pattern.iter().filter(|f| **f).count();
        assert!((30..=70).contains(&n));
    }
}
