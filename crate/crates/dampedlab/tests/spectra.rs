use dampedlab::classical::{Observable, TorusMap};
use dampedlab::experiment::spectra_csv;
use dampedlab::linalg;
use dampedlab::qtorus::{self, HilbertGrid};
use dampedlab::spectra::{self, Source, SpectrumRecord};
use dampedlab::thermo::RateFunctionTable;
use faer::{c64, Mat};
use proptest::prelude::*;

fn grid(n: usize) -> HilbertGrid {
    HilbertGrid::for_map(&TorusMap::cat(), n).unwrap()
}

fn seeded(n: usize, seed: u64) -> Mat<c64> {
    let mut s = seed | 1;
    let mut next = || {
        s ^= s << 13;
        s ^= s >> 7;
        s ^= s << 17;
        (s >> 11) as f64 / (1u64 << 53) as f64 - 0.5
    };
    Mat::from_fn(n, n, |_, _| c64::new(next(), next()))
}

/// Characteristic polynomial coefficients `c_0..c_n` (monic, `c_0 = 1`) by
/// the Faddeev–LeVerrier recursion.
fn char_poly(a: &Mat<c64>) -> Vec<c64> {
    let n = a.nrows();
    let mut c = vec![c64::new(1.0, 0.0)];
    let mut m = Mat::<c64>::zeros(n, n);
    for k in 1..=n {
        let mut next = a * &m;
        for i in 0..n {
            next[(i, i)] += c[k - 1];
        }
        m = next;
        let am = a * &m;
        let tr: c64 = (0..n).map(|i| am[(i, i)]).sum();
        c.push(-tr / k as f64);
    }
    c
}

fn horner(c: &[c64], z: c64) -> (c64, c64) {
    let mut p = c64::new(0.0, 0.0);
    let mut dp = c64::new(0.0, 0.0);
    for &ck in c {
        dp = dp * z + p;
        p = p * z + ck;
    }
    (p, dp)
}

/// Simultaneous Aberth–Ehrlich iteration.
fn roots(c: &[c64]) -> Vec<c64> {
    let n = c.len() - 1;
    let r = 1.0 + c.iter().skip(1).map(|z| z.norm()).fold(0.0, f64::max);
    let mut z: Vec<c64> = (0..n)
        .map(|k| {
            let th = 2.0 * std::f64::consts::PI * k as f64 / n as f64 + 0.4;
            c64::new(r * th.cos(), r * th.sin())
        })
        .collect();
    for _ in 0..500 {
        let mut moved = 0.0f64;
        for i in 0..n {
            let (p, dp) = horner(c, z[i]);
            if p.norm() == 0.0 {
                continue;
            }
            let ratio = p / dp;
            let s: c64 = (0..n).filter(|&j| j != i).map(|j| c64::new(1.0, 0.0) / (z[i] - z[j])).sum();
            let w = ratio / (c64::new(1.0, 0.0) - ratio * s);
            z[i] -= w;
            moved = moved.max(w.norm());
        }
        if moved < 1e-15 {
            break;
        }
    }
    z
}

fn record(values: Vec<c64>) -> SpectrumRecord {
    let n = values.len();
    SpectrumRecord::from_values(Source::Matrix { n }, values, 0.0, |z| z.norm().ln())
}

fn table() -> RateFunctionTable {
    // H(s) = −s² on [−1, 1]
    let s_grid: Vec<f64> = (0..=40).map(|i| -1.0 + i as f64 / 20.0).collect();
    let h = s_grid.iter().map(|s| -s * s).collect();
    RateFunctionTable {
        s_grid,
        h,
        domain: (-1.0, 1.0),
        q_bar: 0.0,
        concavity_warning: None,
    }
}

fn generic_q() -> Observable {
    Observable::cosine((1, 0), 0.3).add(&Observable::sine((1, 1), 0.2)).shift(-0.3)
}

#[test]
fn csv_layouts() {
    let r = spectra::eigendecompose(linalg::identity(3).as_ref()).unwrap();
    assert_eq!(r.to_csv().lines().next(), Some("re,im,modulus,decay_rate"));
    assert_eq!(r.to_csv().lines().count(), 4);
    let all = spectra_csv(&[r.clone(), r]);
    assert_eq!(all.lines().next(), Some("n,re,im,modulus,decay_rate"));
    assert_eq!(all.lines().count(), 7);
    assert!(all.lines().nth(1).unwrap().starts_with("3,"));
}

#[test]
fn empty_records_give_header_only_csv() {
    assert_eq!(spectra_csv(&[]), "n,re,im,modulus,decay_rate\n");
    let empty = record(vec![]);
    assert_eq!(empty.to_csv(), "re,im,modulus,decay_rate\n");
    assert_eq!(spectra_csv(&[empty]), "n,re,im,modulus,decay_rate\n");
}

#[test]
fn records_round_trip_through_json() {
    let r = spectra::eigendecompose(seeded(5, 9).as_ref()).unwrap();
    let back: SpectrumRecord = serde_json::from_str(&serde_json::to_string(&r).unwrap()).unwrap();
    assert_eq!(back, r);
}

#[test]
fn constant_damping_spectra() {
    let map = TorusMap::cat();
    for c in [0.0, -0.35] {
        let dp = qtorus::damped_propagator(&map, &Observable::constant(c), &grid(64)).unwrap();
        let r = spectra::propagator_spectrum(&dp).unwrap();
        assert!(r.residual < 1e-8);
        let b = spectra::band_check(&r, c, c, 1e-6);
        assert_eq!(b.violations, 0);
        assert!(b.gap.abs() < 1e-10);
        let f = spectra::concentration_histogram(&[r], c, 1e-9);
        assert_eq!(f.fractions[0].1, 1.0);
        // ‖V^t‖ = e^{ct}
        let rows = spectra::propagator_norm_scan(&dp, &[0, 1, 3, 7], c, c, 0.1).unwrap();
        for row in rows {
            assert!((row.norm - (c * row.t as f64).exp()).abs() < 1e-10, "{row:?}");
        }
    }
}

#[test]
fn norm_scan_stays_under_the_short_time_bound() {
    let q = generic_q();
    let (_, hi) = q.bounds();
    let dp = qtorus::damped_propagator(&TorusMap::cat(), &q, &grid(128)).unwrap();
    let rows = spectra::propagator_norm_scan(&dp, &[5, 1, 3, 3], hi, 0.0, 1e-9).unwrap();
    assert_eq!(rows.iter().map(|r| r.t).collect::<Vec<_>>(), [1, 3, 5]);
    assert!(rows.iter().all(|r| r.norm <= r.short_bound));
    assert!(rows.windows(2).all(|w| w[1].norm <= w[0].norm * hi.exp() * (1.0 + 1e-12)));
}

#[test]
fn resolvent_of_a_normal_matrix_is_the_inverse_distance() {
    let d = [c64::new(0.5, 0.1), c64::new(-0.3, 0.2), c64::new(0.0, -0.7)];
    let a = Mat::from_fn(3, 3, |i, j| if i == j { d[i] } else { c64::new(0.0, 0.0) });
    let z = c64::new(0.1, 0.0);
    let dist = d.iter().map(|l| (l - z).norm()).fold(f64::INFINITY, f64::min);
    assert!((spectra::resolvent_norm(a.as_ref(), z) * dist - 1.0).abs() < 1e-12);
    assert_eq!(spectra::resolvent_norm(a.as_ref(), d[1]), f64::INFINITY);
}

#[test]
fn resolvent_matches_the_smallest_singular_value() {
    let a = seeded(40, 3);
    for z in [c64::new(0.2, 0.1), c64::new(-1.0, 0.5), c64::new(3.0, 0.0)] {
        let shifted = Mat::from_fn(40, 40, |i, j| if i == j { a[(i, j)] - z } else { a[(i, j)] });
        let smin = *linalg::singular_values(shifted.as_ref()).unwrap().last().unwrap();
        let r = spectra::resolvent_norm(a.as_ref(), z);
        assert!((r * smin - 1.0).abs() < 1e-8, "z = {z:?}: {r} vs {}", 1.0 / smin);
    }
}

/// Outside the band the resolvent grows at most like `N`.
#[test]
fn resolvent_growth_outside_the_band() {
    let q = generic_q();
    let (_, hi) = q.bounds();
    let mut pts = Vec::new();
    for n in [256usize, 512, 1024, 2048] {
        let dp = qtorus::damped_propagator(&TorusMap::cat(), &q, &grid(n)).unwrap();
        let r = (hi + 0.2).exp();
        let worst = (0..8)
            .map(|k| {
                let th = 2.0 * std::f64::consts::PI * k as f64 / 8.0 + 0.1;
                spectra::resolvent_norm(dp.v.as_ref(), c64::new(r * th.cos(), r * th.sin()))
            })
            .fold(0.0, f64::max);
        pts.push(((n as f64).ln(), worst.ln()));
    }
    let (x, y): (Vec<f64>, Vec<f64>) = pts.iter().cloned().unzip();
    let slope = spectra::least_squares(&x, &y).0;
    assert!(slope <= 1.2, "exponent {slope} from {pts:?}");
}

#[test]
fn fractal_regression_edge_cases() {
    let diag = |n: usize| {
        record((0..n).map(|k| c64::new((-(k as f64) / n as f64).exp(), 0.0)).collect())
    };
    let recs: Vec<SpectrumRecord> = [16usize, 32, 64, 128].iter().map(|&n| diag(n)).collect();
    // below the spectrum every value counts
    let low = spectra::fractal_weyl_regression(&recs, -2.0, &table(), 1.0).unwrap();
    assert!(low.counts.iter().all(|(n, c)| n == c));
    assert!((low.slope - 1.0).abs() < 1e-12);
    assert_eq!(low.slope_bound, f64::NEG_INFINITY);
    let mid = spectra::fractal_weyl_regression(&recs, -0.5, &table(), 2.0).unwrap();
    assert!((mid.slope_bound - (1.0 - 0.125)).abs() < 1e-3);
    assert!(low.counts.iter().zip(&mid.counts).all(|(a, b)| b.1 <= a.1));
    assert!(spectra::fractal_weyl_regression(&recs, 0.5, &table(), 1.0).is_err());
    assert!(spectra::fractal_weyl_regression(&recs[..3], -2.0, &table(), 1.0).is_err());
    let narrow: Vec<SpectrumRecord> = [16usize, 20, 24, 28].iter().map(|&n| diag(n)).collect();
    assert!(spectra::fractal_weyl_regression(&narrow, -2.0, &table(), 1.0).is_err());
}

#[test]
fn weyl_count_needs_a_wave_record() {
    assert!(spectra::weyl_count(&record(vec![c64::new(1.0, 0.0)]), (0.0, 1.0)).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// Random 6×6 spectra against the roots of the characteristic polynomial.
    #[test]
    fn eigenvalues_match_characteristic_roots(seed in any::<u64>()) {
        let a = seeded(6, seed);
        let r = spectra::eigendecompose(a.as_ref()).unwrap();
        prop_assert!(r.residual < 1e-8);
        let mut oracle = roots(&char_poly(&a));
        for z in &r.eigenvalues {
            let (k, d) = oracle
                .iter()
                .enumerate()
                .map(|(k, w)| (k, (w - z).norm()))
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .unwrap();
            prop_assert!(d < 1e-8, "{z:?} off by {d}");
            oracle.swap_remove(k);
        }
        let tr: c64 = (0..6).map(|i| a[(i, i)]).sum();
        let sum: c64 = r.eigenvalues.iter().sum();
        prop_assert!((tr - sum).norm() < 6e-8);
        prop_assert!(r.decay_rates.windows(2).all(|w| w[0] >= w[1]));
    }

    #[test]
    fn resolvent_dominates_inverse_distance(seed in any::<u64>(), re in -1.0..1.0f64, im in -1.0..1.0f64) {
        let a = seeded(8, seed);
        let z = c64::new(re, im);
        let r = spectra::eigendecompose(a.as_ref()).unwrap();
        let dist = r.eigenvalues.iter().map(|l| (l - z).norm()).fold(f64::INFINITY, f64::min);
        prop_assert!(spectra::resolvent_norm(a.as_ref(), z) * dist >= 1.0 - 1e-9);
    }

    #[test]
    fn band_counts_grow_with_narrower_bands(seed in any::<u64>(), eps in 0.0..0.5f64) {
        let r = spectra::eigendecompose(seeded(10, seed).as_ref()).unwrap();
        let wide = spectra::band_check(&r, -0.5, 0.0, eps + 0.1);
        let narrow = spectra::band_check(&r, -0.5, 0.0, eps);
        prop_assert!(wide.violations <= narrow.violations);
    }
}
