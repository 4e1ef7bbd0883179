use dampedlab::classical::{self, Observable, TorusMap, TorusPoint};
use dampedlab::dispersion::{self, EhrenfestTime};
use dampedlab::error::Error;
use dampedlab::linalg;
use dampedlab::qtorus::{self, DampedPropagator, HilbertGrid};
use dampedlab::thermo::PressureModel;
use faer::c64;
use proptest::prelude::*;

fn cat() -> TorusMap {
    TorusMap::cat()
}

fn propagator(q: &Observable, n: usize) -> DampedPropagator {
    qtorus::damped_propagator(&cat(), q, &HilbertGrid::for_map(&cat(), n).unwrap()).unwrap()
}

fn well() -> Observable {
    // −(1 − cos 2πx), largest on the fixed point
    Observable::constant(-1.0).add(&Observable::cosine((1, 0), 1.0))
}

fn generic_q() -> Observable {
    Observable::constant(-0.3).add(&Observable::cosine((1, 0), 0.3))
}

fn all_paths(j: usize, n: usize) -> Vec<Vec<usize>> {
    (0..j.pow(n as u32))
        .map(|mut k| {
            (0..n)
                .map(|_| {
                    let d = k % j;
                    k /= j;
                    d
                })
                .collect()
        })
        .collect()
}

#[test]
fn single_cell_path_is_the_propagator_power() {
    let dp = propagator(&generic_q(), 64);
    let part = dispersion::build_partition(&dp.grid, 1, 1.0).unwrap();
    for n in [1, 3, 5] {
        let p = dispersion::path_operator(&dp, &part, &vec![0; n]);
        let vn = linalg::power(dp.v.as_ref(), n);
        assert!(linalg::max_diff(p.as_ref(), vn.as_ref()) < 1e-13);
    }
}

#[test]
fn quadrant_partition_sums_to_the_identity() {
    let g = HilbertGrid::for_map(&cat(), 256).unwrap();
    let p = dispersion::build_partition(&g, 4, 0.5).unwrap();
    assert!(p.sum_defect().unwrap() < 1e-10);
}

#[test]
fn partition_operators_are_nearly_contractions() {
    let g = HilbertGrid::for_map(&cat(), 512).unwrap();
    let p = dispersion::build_partition(&g, 4, 0.5).unwrap();
    for j in 0..4 {
        let op = p.operator(j);
        assert!(linalg::spectral_norm(op.as_ref()).unwrap() <= 1.0 + 10.0 / 512.0);
        // anti-Wick of a nonnegative symbol
        let ev = linalg::hermitian_eigenvalues(op.as_ref()).unwrap();
        assert!(ev[0] > -1e-12);
    }
}

#[test]
fn paths_telescope_to_the_full_power() {
    let dp = propagator(&generic_q(), 128);
    let part = dispersion::build_partition(&dp.grid, 4, 0.5).unwrap();
    let n = 4;
    let mut sum = faer::Mat::<c64>::zeros(128, 128);
    for alpha in all_paths(4, n) {
        sum += &dispersion::path_operator(&dp, &part, &alpha);
    }
    let vn = linalg::power(dp.v.as_ref(), n);
    assert!(linalg::spectral_diff(sum.as_ref(), vn.as_ref()).unwrap() < 1e-8);
}

#[test]
fn path_walk_reconstructs_the_propagated_state() {
    let map = cat();
    let q = generic_q();
    let dp = propagator(&q, 512);
    let part = dispersion::build_partition(&dp.grid, 4, 0.5).unwrap();
    let e = qtorus::coherent_state(TorusPoint::new(0.3, 0.7), &dp.grid, 1.0).vector;
    let r = dispersion::path_bound_check(&dp, &part, &map, &q, 4, &e).unwrap();
    assert!(r.reconstruction_defect < 1e-8, "{}", r.reconstruction_defect);
    assert!(r.reconstruction_defect <= r.pruned_bound + 1e-10);
    let lam4 = map.lambda().powi(4);
    assert!(r.rows.iter().all(|row| (row.path.jplus_alpha / lam4 - 1.0).abs() < 1e-12));
    assert!(r.rows.iter().all(|row| row.norm <= row.path.b_alpha * (1.0 + 1e-9)));
}

#[test]
fn undamped_single_cell_walk_is_unitary() {
    let q = Observable::constant(0.0);
    let dp = propagator(&q, 64);
    let part = dispersion::build_partition(&dp.grid, 1, 1.0).unwrap();
    let e = qtorus::coherent_state(TorusPoint::new(0.2, 0.4), &dp.grid, 1.0).vector;
    let r = dispersion::path_bound_check(&dp, &part, &cat(), &q, 6, &e).unwrap();
    assert_eq!(r.rows.len(), 1);
    assert!((r.rows[0].norm - 1.0).abs() < 1e-12);
    assert_eq!(r.rows[0].path.b_alpha, 1.0);
    assert!(dispersion::path_bound_check(&dp, &part, &cat(), &q, 0, &e).is_err());
}

/// Cells whose supports never meet under one step carry no mass.
#[test]
fn non_admissible_paths_are_negligible() {
    let map = cat();
    let q = generic_q();
    let dp = propagator(&q, 1024);
    let part = dispersion::build_partition(&dp.grid, 16, 0.25).unwrap();
    let b = dispersion::cell_damping(&map, &q, &part, false).unwrap();
    let separation = |a: usize, c: usize| {
        let (s, t) = (part.support(a), part.support(c));
        let mut d = f64::INFINITY;
        for i in 0..=40 {
            for k in 0..=40 {
                let p = TorusPoint::new(s[0] + (s[1] - s[0]) * i as f64 / 40.0, s[2] + (s[3] - s[2]) * k as f64 / 40.0);
                let im = classical::evolve(&map, p, 1);
                let gap = |v: f64, lo: f64, hi: f64| (classical::wrap_signed(v - 0.5 * (lo + hi)).abs() - 0.5 * (hi - lo)).max(0.0);
                d = d.min(gap(im.x, t[0], t[1]).hypot(gap(im.p, t[2], t[3])));
            }
        }
        d
    };
    let (a, c) = (0..16)
        .flat_map(|a| (0..16).map(move |c| (a, c)))
        .max_by(|x, y| separation(x.0, x.1).total_cmp(&separation(y.0, y.1)))
        .unwrap();
    assert!(separation(a, c) > 0.05);
    let v = dispersion::path_operator(&dp, &part, &[a, c]);
    assert!(linalg::spectral_norm(v.as_ref()).unwrap() <= 1e-4 * b[a] * b[c]);
}

#[test]
fn cylinder_sum_rate_approaches_the_pressure() {
    let r = dispersion::pressure_sum_check(&cat(), &Observable::constant(0.0), 16, 10).unwrap();
    // P(−φ⁺/2) = (log λ)/2 for the cat map
    assert!((r.pressure - cat().lambda().ln() / 2.0).abs() < 1e-3);
    assert!((r.ratio_rate - r.pressure).abs() < 0.05, "{}", r.ratio_rate);
    // the raw rate carries a log(count prefactor)/n bias that shrinks with n
    let raw: Vec<f64> = r.levels.iter().map(|l| l.sum.ln() / l.n as f64).collect();
    assert!(raw.windows(2).skip(1).all(|w| w[1] < w[0]));
    assert!(raw.iter().all(|x| *x > r.pressure));
}

#[test]
fn constant_damping_shifts_cylinder_rates() {
    let base = dispersion::pressure_sum_check(&cat(), &Observable::constant(0.0), 4, 6).unwrap();
    let c = -0.4;
    let shifted = dispersion::pressure_sum_check(&cat(), &Observable::constant(c), 4, 6).unwrap();
    assert!((shifted.raw_rate - base.raw_rate - c).abs() < 1e-12);
    assert!((shifted.ratio_rate - base.ratio_rate - c).abs() < 1e-12);
    assert!((shifted.pressure - base.pressure - c).abs() < 1e-10);
    assert_eq!(shifted.levels.iter().map(|l| l.count).collect::<Vec<_>>(), base.levels.iter().map(|l| l.count).collect::<Vec<_>>());
    assert!(dispersion::pressure_sum_check(&cat(), &Observable::constant(0.0), 5, 4).is_err());
    assert!(dispersion::pressure_sum_check(&cat(), &Observable::constant(0.0), 4, 1).is_err());
}

#[test]
fn cylinder_counts_of_the_trivial_partition() {
    // one cell: every cylinder is the whole torus
    let levels = dispersion::cylinder_sums(&cat(), 1, &[1.0], 5).unwrap();
    assert!(levels.iter().all(|l| l.count == 1));
    assert!(dispersion::cylinder_sums(&cat(), 2, &[1.0; 3], 3).is_err());
    let kicked = TorusMap::perturbed([2, 1, 1, 1], 0.005, Observable::sine((1, 0), 1.0)).unwrap();
    assert!(matches!(dispersion::cylinder_sums(&kicked, 2, &[1.0; 4], 3), Err(Error::LinearOnly)));
}

#[test]
fn constant_damping_split_is_trivial() {
    let c = -0.2;
    let dp = propagator(&Observable::constant(c), 64);
    let t = 4;
    let id = linalg::identity(64);
    let want_a = linalg::scaled(id.as_ref(), c64::new((c * t as f64).exp(), 0.0));
    for (level, rank) in [(c - 0.1, 64), (c + 0.1, 0)] {
        let s = dispersion::projector_split(&dp, t, level).unwrap();
        assert!(linalg::max_diff(s.a().as_ref(), want_a.as_ref()) < 1e-12);
        assert!(linalg::max_diff(s.w().as_ref(), id.as_ref()) < 1e-12);
        assert_eq!(s.rank_plus(), rank);
        assert!(s.symbol_check(&cat(), &Observable::constant(c), &dp.grid, 4) < 1e-10);
    }
    assert!(dispersion::projector_split(&dp, 3, c).is_err());
}

#[test]
fn undamped_split_has_no_upper_part() {
    let dp = propagator(&Observable::constant(0.0), 64);
    let s = dispersion::projector_split(&dp, 4, 0.1).unwrap();
    assert_eq!(s.rank_plus(), 0);
    assert_eq!(s.dispersion_norm().unwrap(), 0.0);
    assert!(linalg::max_abs(s.pi_plus().as_ref()) == 0.0);
}

#[test]
fn projector_split_identities() {
    let dp = propagator(&well(), 128);
    let t = 4;
    let alpha = -0.5;
    let s = dispersion::projector_split(&dp, t, alpha).unwrap();
    assert!(s.polar_defect() < 1e-12);
    assert!(linalg::unitarity_defect(s.w().as_ref()) < 1e-12);
    let (pp, pm) = (s.pi_plus(), s.pi_minus());
    let id = linalg::identity(128);
    assert!(linalg::max_diff((&pp + &pm).as_ref(), id.as_ref()) < 1e-12);
    assert!(linalg::max_diff((&pp * &pp).as_ref(), pp.as_ref()) < 1e-12);
    let level = (alpha * t as f64).exp();
    let am = &s.a() * &pm;
    assert!(linalg::spectral_norm(am.as_ref()).unwrap() <= level * (1.0 + 1e-12));
    assert!((s.a_minus_norm() - linalg::spectral_norm(am.as_ref()).unwrap()).abs() < 1e-12);

    let n5 = s.norm5().unwrap();
    for (term, bound) in n5.terms.iter().zip(&n5.bounds) {
        assert!(*term <= bound * (1.0 + 1e-10), "{n5:?}");
    }
    let v2t = linalg::power(dp.v.as_ref(), 2 * t);
    assert!((n5.total - linalg::spectral_norm(v2t.as_ref()).unwrap()).abs() < 1e-10 * n5.total);
    assert!(n5.total <= n5.terms.iter().sum::<f64>() * (1.0 + 1e-12));
}

#[test]
fn critical_level_is_a_root() {
    let map = cat();
    let lam = map.lambda().ln();
    let model = PressureModel::new(&map, &well(), (6, 12)).unwrap();
    let cl = dispersion::critical_level(&model, lam, lam).unwrap();
    assert!(cl.residual < 1e-6);
    assert!(cl.alpha_c > -1.0 && cl.alpha_c < cl.q_plus);
    assert!(cl.gamma > 0.0 && cl.gamma < 0.5 * (cl.q_plus - cl.alpha_c));

    let flat = PressureModel::new(&map, &Observable::constant(-0.3), (6, 12)).unwrap();
    assert!(matches!(dispersion::critical_level(&flat, lam, lam), Err(Error::Condition0 { .. })));
}

#[test]
fn coherent_overlaps_follow_the_unstable_jacobian() {
    let map = cat();
    let dp = propagator(&generic_q(), 2048);
    let rho = TorusPoint::new(0.31, 0.47);
    let same = dispersion::coherent_overlap_check(&dp, &map, rho, rho, 0, None).unwrap();
    assert!((same.measured - 1.0).abs() < 1e-12);
    assert_eq!(same.shape, 1.0);

    let mut pts = Vec::new();
    for t in [2usize, 4, 6, 8] {
        let o = dispersion::coherent_overlap_check(&dp, &map, rho, classical::evolve(&map, rho, t as i64), t, None).unwrap();
        assert!(o.fitted_c() < 2.0);
        pts.push((t as f64, o.measured.ln()));
    }
    let (x, y): (Vec<f64>, Vec<f64>) = pts.into_iter().unzip();
    let rate = -dampedlab::spectra::least_squares(&x, &y).0;
    assert!((rate - map.lambda().ln() / 2.0).abs() < 0.15, "{rate}");

    // far apart: negligible before the stretched packet wraps around,
    // at the Jacobian bound once it does
    let far = TorusPoint::new(0.81, 0.97);
    let short = dispersion::coherent_overlap_check(&dp, &map, rho, far, 2, None).unwrap();
    assert!(short.measured < 1e-10);
    let t = EhrenfestTime::new(2048, 0.05, map.lambda().ln()).t;
    let long = dispersion::coherent_overlap_check(&dp, &map, rho, far, t, None).unwrap();
    assert!(long.measured <= 2.0 * long.shape);
    assert!(dispersion::coherent_overlap_check(&dp, &map, rho, far, 3, None).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn bump_partitions_cover_the_torus(l in 1usize..9, x in 0.0..1.0f64, p in 0.0..1.0f64) {
        let g = HilbertGrid::for_map(&cat(), 64).unwrap();
        let part = dispersion::build_partition(&g, l * l, 1.0 / l as f64).unwrap();
        let rho = TorusPoint::new(x, p);
        let total: f64 = (0..l * l).map(|j| part.symbol(j, rho)).sum();
        prop_assert!((total - 1.0).abs() < 1e-13);
        prop_assert!((0..l * l).all(|j| (0.0..=1.0).contains(&part.symbol(j, rho))));
    }

    #[test]
    fn ehrenfest_time_shrinks_with_eps(n in 16usize..10_000, e1 in 0.0..0.2f64, de in 0.0..0.2f64) {
        let lam = cat().lambda().ln();
        prop_assert!(EhrenfestTime::new(n, e1 + de, lam).t <= EhrenfestTime::new(n, e1, lam).t);
    }
}
