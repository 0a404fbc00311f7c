use proptest::prelude::*;

use super::*;
use crate::testutil::rand_tensor;

fn t2(h: usize, w: usize, data: Vec<f64>) -> Tensor {
    Tensor::new(vec![h, w], data).unwrap()
}

fn scaled(x: &Tensor, c: f64, shift: f64) -> Tensor {
    Tensor::new(
        x.dims().to_vec(),
        x.data().iter().map(|v| c * v + shift).collect(),
    )
    .unwrap()
}

#[test]
fn nmse_examples() {
    let y = rand_tensor(&[8, 8], 1);
    assert_eq!(nmse(&y, &y).unwrap(), 0.0);
    assert!((nmse(&y, &scaled(&y, 0.0, 0.0)).unwrap() - 1.0).abs() < 1e-15);
    assert!((nmse(&y, &scaled(&y, 0.5, 0.0)).unwrap() - 0.25).abs() < 1e-15);
    let zero = Tensor::zeros(vec![8, 8]).unwrap();
    assert!(matches!(nmse(&zero, &y), Err(Error::Metric(_))));
    assert!(matches!(
        nmse(&y, &rand_tensor(&[4, 16], 1)),
        Err(Error::ShapeMismatch { .. })
    ));
}

#[test]
fn psnr_examples() {
    let y = rand_tensor(&[8, 8], 2);
    let off = scaled(&y, 1.0, 0.2);
    let p = psnr(&y, &off, 2.0).unwrap();
    assert!((p - 20.0).abs() < 1e-9, "{p}");
    assert_eq!(psnr(&y, &y, 2.0).unwrap(), f64::INFINITY);
    assert!((psnr(&y, &scaled(&y, 1.0, 2.0), 2.0).unwrap()).abs() < 1e-12);
}

#[test]
fn ssim_global_examples() {
    let y = rand_tensor(&[16, 16], 3);
    assert!((ssim_global(&y, &y, 2.0).unwrap() - 1.0).abs() < 1e-12);
    let a = Tensor::full(vec![4, 4], 0.5).unwrap();
    let b = Tensor::full(vec![4, 4], 0.25).unwrap();
    let expected = (2.0 * 0.125 + 0.0004) / (0.3125 + 0.0004);
    assert!((ssim_global(&a, &b, 2.0).unwrap() - expected).abs() < 1e-12);
    assert!((expected - 0.800256).abs() < 1e-6);
    let centred: Vec<f64> = {
        let m = y.data().iter().sum::<f64>() / 256.0;
        y.data().iter().map(|v| v - m).collect()
    };
    let y0 = t2(16, 16, centred);
    assert!(ssim_global(&y0, &scaled(&y0, -1.0, 0.0), 2.0).unwrap() < 0.0);
    assert!(ssim_global(&t2(1, 1, vec![0.3]), &t2(1, 1, vec![0.3]), 2.0).is_err());
}

/// Direct per-window loop with 2-D weights and centred moments.
fn ssim_window_oracle(y: &[f64], yh: &[f64], h: usize, w: usize) -> f64 {
    let k = 11;
    let g: Vec<f64> = (0..k)
        .map(|i| (-((i as f64 - 5.0).powi(2)) / 4.5).exp())
        .collect();
    let gs: f64 = g.iter().sum();
    let (c1, c2) = (0.02f64.powi(2), 0.06f64.powi(2));
    let mut total = 0.0;
    let mut count = 0;
    for r in 0..=h - k {
        for c in 0..=w - k {
            let wt = |i: usize, j: usize| g[i] * g[j] / (gs * gs);
            let (mut mx, mut my) = (0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    mx += wt(i, j) * y[(r + i) * w + c + j];
                    my += wt(i, j) * yh[(r + i) * w + c + j];
                }
            }
            let (mut vx, mut vy, mut cv) = (0.0, 0.0, 0.0);
            for i in 0..k {
                for j in 0..k {
                    let dx = y[(r + i) * w + c + j] - mx;
                    let dy = yh[(r + i) * w + c + j] - my;
                    vx += wt(i, j) * dx * dx;
                    vy += wt(i, j) * dy * dy;
                    cv += wt(i, j) * dx * dy;
                }
            }
            total += ((2.0 * mx * my + c1) * (2.0 * cv + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    total / count as f64
}

#[test]
fn ssim_windowed_matches_loop_oracle() {
    let y = rand_tensor(&[32, 32], 4);
    let noise = rand_tensor(&[32, 32], 5);
    let yh = Tensor::new(
        vec![32, 32],
        y.data()
            .iter()
            .zip(noise.data())
            .map(|(a, b)| 0.7 * a + 0.3 * b)
            .collect(),
    )
    .unwrap();
    let got = ssim_windowed(&y, &yh, 11, 1.5, 2.0).unwrap();
    let want = ssim_window_oracle(y.data(), yh.data(), 32, 32);
    assert!((got - want).abs() < 1e-8, "{got} vs {want}");

    let r = rand_tensor(&[20, 27], 6);
    let rh = rand_tensor(&[20, 27], 7);
    let got = ssim_windowed(&r, &rh, 11, 1.5, 2.0).unwrap();
    assert!((got - ssim_window_oracle(r.data(), rh.data(), 20, 27)).abs() < 1e-8);
}

#[test]
fn ssim_windowed_examples() {
    let y = rand_tensor(&[24, 24], 8);
    assert!((ssim_windowed(&y, &y, 11, 1.5, 2.0).unwrap() - 1.0).abs() < 1e-9);
    let a = Tensor::full(vec![16, 16], 0.5).unwrap();
    let b = Tensor::full(vec![16, 16], 0.25).unwrap();
    let w = ssim_windowed(&a, &b, 11, 1.5, 2.0).unwrap();
    assert!((w - ssim_global(&a, &b, 2.0).unwrap()).abs() < 1e-12);
    let small = rand_tensor(&[10, 30], 9);
    assert!(matches!(
        ssim_windowed(&small, &small, 11, 1.5, 2.0),
        Err(Error::Metric(_))
    ));
}

#[test]
fn ssim_windowed_pools_planes() {
    let a = rand_tensor(&[2, 12, 13], 10);
    let b = rand_tensor(&[2, 12, 13], 11);
    let per: Vec<f64> = (0..2)
        .map(|p| {
            ssim_window_oracle(
                &a.data()[p * 156..(p + 1) * 156],
                &b.data()[p * 156..(p + 1) * 156],
                12,
                13,
            )
        })
        .collect();
    let got = ssim_windowed(&a, &b, 11, 1.5, 2.0).unwrap();
    assert!((got - (per[0] + per[1]) / 2.0).abs() < 1e-8);
}

fn ln_gamma(x: f64) -> f64 {
    libm::lgamma(x)
}

/// Composite Simpson integral of the t density from 0 to |t|.
fn t_cdf_oracle(t: f64, df: f64) -> f64 {
    let ln_c =
        ln_gamma((df + 1.0) / 2.0) - ln_gamma(df / 2.0) - 0.5 * (df * std::f64::consts::PI).ln();
    let dens = |s: f64| (ln_c - (df + 1.0) / 2.0 * (1.0 + s * s / df).ln()).exp();
    let n = 20_000;
    let hstep = t.abs() / n as f64;
    let mut sum = dens(0.0) + dens(t.abs());
    for i in 1..n {
        sum += dens(i as f64 * hstep) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    let half = sum * hstep / 3.0;
    if t >= 0.0 {
        0.5 + half
    } else {
        0.5 - half
    }
}

#[test]
fn student_t_cdf_matches_integrated_density() {
    for df in [1.0, 2.0, 8.0, 30.0, 100.0] {
        for i in -10..=10 {
            let t = i as f64 * 0.5;
            let got = student_t_cdf(t, df);
            let want = t_cdf_oracle(t, df);
            assert!((got - want).abs() < 1e-6, "df {df} t {t}: {got} vs {want}");
        }
    }
}

#[test]
fn welch_examples() {
    let a = [1.0, 2.0, 3.0, 4.0, 5.0];
    let b = [2.0, 3.0, 4.0, 5.0, 6.0];
    let r = welch_t_test(&a, &b).unwrap();
    assert!((r.t + 1.0).abs() < 1e-12);
    assert!((r.df - 8.0).abs() < 1e-12);
    let oracle = 2.0 * (1.0 - t_cdf_oracle(1.0, 8.0));
    assert!((r.p_two_tailed - oracle).abs() < 1e-4);
    assert!((r.p_two_tailed - 0.3466).abs() < 1e-4, "{}", r.p_two_tailed);
    assert!(!r.significant);
    assert_eq!(r.alpha, 0.05);

    let same = welch_t_test(&a, &a).unwrap();
    assert_eq!(same.t, 0.0);
    assert!((same.p_two_tailed - 1.0).abs() < 1e-15);

    let swapped = welch_t_test(&b, &a).unwrap();
    assert_eq!(swapped.p_two_tailed, r.p_two_tailed);
    assert_eq!(swapped.t, -r.t);

    assert!(welch_t_test(&[1.0], &b).is_err());
    assert!(matches!(
        welch_t_test(&[2.0, 2.0, 2.0], &b),
        Err(Error::Metric(_))
    ));

    let far = welch_t_test(&[0.0, 0.1, 0.2, 0.1], &[5.0, 5.1, 5.2, 5.3]).unwrap();
    assert!(far.significant && far.p_two_tailed < 1e-6);
}

fn sample(case: &str, field: FieldStrength, psnr: f64) -> MetricSample {
    MetricSample {
        case_id: case.into(),
        slice_index: 0,
        field,
        nmse: 0.1,
        psnr_db: psnr,
        ssim: 0.9,
        ssim_windowed: None,
    }
}

#[test]
fn aggregate_examples() {
    let one = [sample("a", FieldStrength::T3, 10.0)];
    let r = aggregate("m", &one, GroupBy::All).unwrap();
    assert_eq!(r[0].psnr_db.unwrap().sd, 0.0);
    assert_eq!(r[0].n, 1);

    let two = [
        sample("a", FieldStrength::T3, 10.0),
        sample("b", FieldStrength::T3, 20.0),
    ];
    let s = aggregate("m", &two, GroupBy::All).unwrap()[0]
        .psnr_db
        .unwrap();
    assert_eq!(s.mean, 15.0);
    assert!((s.sd - 7.0711).abs() < 1e-4);
    assert!((s.sd - 50f64.sqrt()).abs() < 1e-12);

    assert!(aggregate("m", &[], GroupBy::All).is_err());
    assert!(Summary::of(&[]).is_err());
}

#[test]
fn infinite_psnr_is_counted_and_excluded() {
    let s = [
        sample("a", FieldStrength::T3, f64::INFINITY),
        sample("b", FieldStrength::T3, 30.0),
        sample("c", FieldStrength::T3, 34.0),
    ];
    let r = &aggregate("m", &s, GroupBy::All).unwrap()[0];
    assert_eq!(r.psnr_infinite, 1);
    assert_eq!(r.psnr_db.unwrap().n, 2);
    assert_eq!(r.psnr_db.unwrap().mean, 32.0);
    assert_eq!(r.n, 3);

    let all_inf = [sample("a", FieldStrength::T3, f64::INFINITY)];
    assert!(aggregate("m", &all_inf, GroupBy::All).unwrap()[0]
        .psnr_db
        .is_none());
}

#[test]
fn grouping_by_field_partitions() {
    let s: Vec<_> = (0..11)
        .map(|i| {
            let f = if i % 3 == 0 {
                FieldStrength::T1_5
            } else {
                FieldStrength::T3
            };
            sample(&format!("c{i}"), f, 20.0 + i as f64)
        })
        .collect();
    let by = aggregate("m", &s, GroupBy::Field).unwrap();
    assert_eq!(by.len(), 2);
    assert_eq!(by.iter().map(|r| r.n).sum::<usize>(), s.len());
    assert_eq!(by[0].field, Some(FieldStrength::T1_5));
    assert_eq!(by[0].n, 4);
    let pooled = aggregate("m", &s, GroupBy::All).unwrap();
    assert_eq!(pooled.len(), 1);
    assert_eq!(pooled[0].field, None);
}

#[test]
fn table_rows_and_csv() {
    let mk = |model_shift: f64| -> Vec<MetricSample> {
        (0..6)
            .map(|i| MetricSample {
                case_id: format!("c{i}"),
                slice_index: i,
                field: if i < 2 {
                    FieldStrength::T1_5
                } else {
                    FieldStrength::T3
                },
                nmse: 0.02 + 0.001 * i as f64 + model_shift,
                psnr_db: 30.0 + i as f64 - 100.0 * model_shift,
                ssim: 0.9 - 0.01 * i as f64,
                ssim_windowed: Some(0.8 + 0.005 * i as f64),
            })
            .collect()
    };
    let ours = mk(0.0);
    let base = mk(0.01);
    let rows = table1_rows("restormer", &ours, GroupBy::Field, Some(&base)).unwrap();
    assert_eq!(rows.len(), 8);
    let nmse3 = rows
        .iter()
        .find(|r| r.field == "3.0" && r.metric == "nmse")
        .unwrap();
    assert_eq!(nmse3.n, 4);
    assert!((nmse3.mean - 0.0235).abs() < 1e-12);
    assert!(nmse3.p_vs_reference.unwrap() < 0.05);
    // Identical ssim columns: t = 0.
    let ssim3 = rows
        .iter()
        .find(|r| r.field == "3.0" && r.metric == "ssim")
        .unwrap();
    assert!((ssim3.p_vs_reference.unwrap() - 1.0).abs() < 1e-12);

    let mut buf = Vec::new();
    write_table1(&mut buf, &rows).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let mut lines = text.lines();
    assert_eq!(
        lines.next().unwrap(),
        "model,field,metric,mean,sd,n,p_vs_reference"
    );
    assert!(lines.next().unwrap().starts_with("restormer,1.5,nmse,"));

    let perfect: Vec<MetricSample> = ours
        .iter()
        .map(|s| MetricSample {
            nmse: 0.0,
            ..s.clone()
        })
        .collect();
    let selfcmp = table1_rows("stub", &perfect, GroupBy::Field, Some(&perfect)).unwrap();
    assert!(selfcmp.iter().all(|r| r.p_vs_reference == Some(1.0)));

    let alone = table1_rows("restormer", &ours, GroupBy::All, None).unwrap();
    let mut buf = Vec::new();
    write_table1(&mut buf, &alone).unwrap();
    assert!(String::from_utf8(buf)
        .unwrap()
        .lines()
        .nth(1)
        .unwrap()
        .ends_with(",6,"));
}

#[test]
fn sample_compute_uses_all_metrics() {
    let y = rand_tensor(&[12, 12], 12);
    let yh = rand_tensor(&[12, 12], 13);
    let s =
        MetricSample::compute("c", 3, FieldStrength::T1_5, y.data(), yh.data(), 12, 12).unwrap();
    assert_eq!(s.nmse, nmse(&y, &yh).unwrap());
    assert_eq!(s.psnr_db, psnr(&y, &yh, 2.0).unwrap());
    assert_eq!(s.ssim, ssim_global(&y, &yh, 2.0).unwrap());
    assert!(s.ssim_windowed.is_some());
    let s = MetricSample::compute(
        "c",
        3,
        FieldStrength::T1_5,
        &y.data()[..100],
        &yh.data()[..100],
        10,
        10,
    )
    .unwrap();
    assert!(s.ssim_windowed.is_none());
}

fn vec_pair() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
    (4usize..40).prop_flat_map(|n| {
        (
            prop::collection::vec(-1.0f64..1.0, n),
            prop::collection::vec(-1.0f64..1.0, n),
        )
    })
}

proptest! {
    #[test]
    fn nmse_is_scale_invariant((y, yh) in vec_pair(), c in prop_oneof![-5.0f64..-0.1, 0.1f64..5.0]) {
        let a = nmse_slice(&y, &yh).unwrap();
        let ys: Vec<f64> = y.iter().map(|v| c * v).collect();
        let yhs: Vec<f64> = yh.iter().map(|v| c * v).collect();
        prop_assert!((a - nmse_slice(&ys, &yhs).unwrap()).abs() <= 1e-9 * a.max(1.0));
        prop_assert!(a >= 0.0);
    }

    #[test]
    fn psnr_symmetric_and_decreasing((y, yh) in vec_pair(), k in 1.01f64..3.0) {
        let p = psnr_slice(&y, &yh, 2.0);
        prop_assert_eq!(p, psnr_slice(&yh, &y, 2.0));
        let worse: Vec<f64> = y.iter().zip(&yh).map(|(a, b)| a + k * (b - a)).collect();
        prop_assert!(psnr_slice(&y, &worse, 2.0) < p);
    }

    #[test]
    fn ssim_bounded((y, yh) in vec_pair()) {
        let s = ssim_global_slice(&y, &yh, 2.0).unwrap();
        prop_assert!((-1.0..=1.0).contains(&s));
        prop_assert!((ssim_global_slice(&y, &y, 2.0).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn welch_p_in_unit_interval(a in prop::collection::vec(-10.0f64..10.0, 2..20), b in prop::collection::vec(-10.0f64..10.0, 2..20)) {
        if let Ok(r) = welch_t_test(&a, &b) {
            prop_assert!((0.0..=1.0).contains(&r.p_two_tailed));
            prop_assert!(r.df > 0.0);
            prop_assert_eq!(r.significant, r.p_two_tailed < 0.05);
        }
    }

    #[test]
    fn welch_equal_sizes_and_variances(a in prop::collection::vec(-10.0f64..10.0, 3..15), shift in -3.0f64..3.0) {
        let b: Vec<f64> = a.iter().rev().map(|v| v + shift).collect();
        if let Ok(r) = welch_t_test(&a, &b) {
            let expected = (2 * a.len() - 2) as f64;
            prop_assert!((r.df - expected).abs() < 1e-9 * expected);
        }
    }
}

#[test]
fn samples_csv_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.csv");
    let mut a = sample("c1", FieldStrength::T3, f64::INFINITY);
    a.ssim_windowed = None;
    let b = sample("c2", FieldStrength::T1_5, 21.5);
    write_samples_csv(&path, "m", &[a.clone(), b.clone()]).unwrap();
    let (model, back) = read_samples_csv(&path).unwrap();
    assert_eq!(model, "m");
    assert_eq!(back, vec![a, b]);
    std::fs::write(&path, "model,case\nm,c\n").unwrap();
    assert!(matches!(read_samples_csv(&path), Err(Error::Malformed(_))));
}
