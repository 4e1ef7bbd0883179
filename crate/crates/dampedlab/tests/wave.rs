use dampedlab::wave::{self, DampingProfile, Method, WaveState};
use faer::c64;
use proptest::prelude::*;

fn times(t: f64, steps: usize) -> Vec<f64> {
    (0..=steps).map(|i| t * i as f64 / steps as f64).collect()
}

fn sqrt_c(z: c64) -> c64 {
    let r = z.norm().sqrt();
    let th = z.im.atan2(z.re) / 2.0;
    c64::new(r * th.cos(), r * th.sin())
}

fn mode_count(taus: &[c64], z: c64) -> usize {
    taus.iter().filter(|t| (**t - z).norm() < 1e-8).count()
}

#[test]
fn undamped_circle_has_integer_frequencies() {
    let g = wave::assemble_generator(&DampingProfile::undamped(1).unwrap(), 8).unwrap();
    let s = wave::wave_spectrum(&g).unwrap();
    let taus = s.taus();
    assert_eq!(taus.len(), 2 * 17);
    assert_eq!(mode_count(&taus, c64::new(0.0, 0.0)), 2);
    for k in 1..=8 {
        assert_eq!(mode_count(&taus, c64::new(k as f64, 0.0)), 2, "+{k}");
        assert_eq!(mode_count(&taus, c64::new(-(k as f64), 0.0)), 2, "-{k}");
    }
}

/// `τ = −ic ± √(k² − c²)` for each Fourier mode.
#[test]
fn constant_damping_closed_form() {
    for c in [0.3, 0.5, 1.7] {
        let g = wave::assemble_generator(&DampingProfile::constant(1, c).unwrap(), 10).unwrap();
        let s = wave::wave_spectrum(&g).unwrap();
        assert!(s.residual < 1e-6);
        let mut taus = s.taus();
        for k in -10i64..=10 {
            let root = sqrt_c(c64::new((k * k) as f64 - c * c, 0.0));
            for tau in [c64::new(0.0, -c) + root, c64::new(0.0, -c) - root] {
                let (i, d) = taus
                    .iter()
                    .enumerate()
                    .map(|(i, t)| (i, (t - tau).norm()))
                    .min_by(|a, b| a.1.total_cmp(&b.1))
                    .unwrap();
                assert!(d < 1e-8, "c = {c}, k = {k}: {d}");
                taus.swap_remove(i);
            }
        }
    }
}

#[test]
fn damped_frequencies_lie_in_the_lower_half_plane() {
    for a in [
        DampingProfile::cosine(1, 0.4, 0.4).unwrap(),
        DampingProfile::cosine(2, 0.3, 0.2).unwrap(),
        DampingProfile::strip(2, 0.4, 0.6, 0.1, 1.0).unwrap(),
    ] {
        let g = wave::assemble_generator(&a, 8).unwrap();
        let s = wave::wave_spectrum(&g).unwrap();
        assert!(s.residual < 1e-6);
        assert!(s.symmetry_defect() < 1e-8);
        assert!(s.taus().iter().filter(|t| t.norm() > 1e-8).all(|t| t.im < 0.0));
        assert_eq!(s.strip_violations(a.a_min(), a.a_max(), 1e-6), 0);
    }
}

#[test]
fn galerkin_truncation_converges() {
    let a = DampingProfile::cosine(1, 0.4, 0.4).unwrap();
    let low = wave::wave_spectrum(&wave::assemble_generator(&a, 16).unwrap()).unwrap();
    let high = wave::wave_spectrum(&wave::assemble_generator(&a, 32).unwrap()).unwrap();
    for t in low.taus().iter().filter(|t| t.re.abs() < 8.0) {
        let d = high.taus().iter().map(|s| (s - t).norm()).fold(f64::INFINITY, f64::min);
        assert!(d < 1e-6, "{t:?} moved by {d}");
    }
}

#[test]
fn undamped_energy_is_conserved() {
    let g = wave::assemble_generator(&DampingProfile::undamped(2).unwrap(), 6).unwrap();
    let d = WaveState::random(&g, 0.0, 11);
    let e = wave::evolve(&g, &d, &times(30.0, 60)).unwrap();
    let e0 = e.energies[0];
    assert!(e.energies.iter().all(|x| (x - e0).abs() <= 1e-8 * e0));
}

#[test]
fn eigenmodes_decay_at_their_own_rate() {
    let a = DampingProfile::cosine(1, 0.4, 0.4).unwrap();
    let g = wave::assemble_generator(&a, 10).unwrap();
    let s = wave::wave_spectrum(&g).unwrap();
    let ts = times(10.0, 20);
    for m in s.modes.iter().filter(|m| m.tau.re.abs() > 0.5).take(6) {
        let e = wave::evolve(&g, &WaveState::from_mode(&g, m), &ts).unwrap();
        for (t, x) in ts.iter().zip(&e.energies) {
            let want = e.energies[0] * (2.0 * m.tau.im * t).exp();
            assert!((x - want).abs() <= 1e-6 * e.energies[0], "t = {t}");
        }
    }
}

#[test]
fn constant_damping_decay_rate() {
    for c in [0.2, 0.35, 0.5] {
        let a = DampingProfile::constant(1, c).unwrap();
        let g = wave::assemble_generator(&a, 12).unwrap();
        let gap = wave::wave_spectrum(&g).unwrap().gap();
        let e = wave::evolve(&g, &WaveState::random(&g, 0.0, 5), &times(40.0, 400)).unwrap();
        let fit = wave::decay_fit(&e, gap, c).unwrap();
        assert!((fit.gamma_pred - c).abs() < 1e-8);
        assert!((fit.gamma_fit / c - 1.0).abs() < 0.05, "c = {c}: {}", fit.gamma_fit);
    }
}

#[test]
fn decay_fit_rejects_short_traces() {
    let g = wave::assemble_generator(&DampingProfile::constant(1, 0.3).unwrap(), 4).unwrap();
    let e = wave::evolve(&g, &WaveState::random(&g, 0.0, 1), &[0.0, 1.0]).unwrap();
    assert!(wave::decay_fit(&e, 0.3, 0.3).is_err());
}

#[test]
fn evolve_rejects_bad_inputs() {
    let g = wave::assemble_generator(&DampingProfile::constant(1, 0.3).unwrap(), 4).unwrap();
    let d = WaveState::random(&g, 0.0, 1);
    assert!(wave::evolve(&g, &d, &[1.0, 0.5]).is_err());
    assert!(wave::evolve(&g, &d, &[-1.0]).is_err());
    let other = wave::assemble_generator(&DampingProfile::constant(1, 0.3).unwrap(), 5).unwrap();
    assert!(wave::evolve(&other, &d, &[0.0]).is_err());
}

/// Smoother data on a strip-damped torus lose relatively more energy,
/// since the slowly damped modes are the near-vertical high frequencies.
#[test]
fn regular_data_decay_faster_on_the_strip() {
    let a = DampingProfile::strip(2, 0.4, 0.6, 0.1, 1.0).unwrap();
    let g = wave::assemble_generator(&a, 12).unwrap();
    let ts = times(40.0, 8);
    for seed in [1u64, 2] {
        let rough = wave::evolve(&g, &WaveState::random(&g, 0.0, seed), &ts).unwrap();
        let smooth = wave::evolve(&g, &WaveState::random(&g, 2.0, seed), &ts).unwrap();
        let r0 = rough.energies.last().unwrap() / rough.energies[0];
        let r2 = smooth.energies.last().unwrap() / smooth.energies[0];
        assert!(r2 < r0, "seed {seed}: {r2} vs {r0}");
    }
}

/// Energy norm of the propagator for `u'' + 2cu' + k²u = 0`, from the 2×2
/// matrix acting on `(ku, u')`.
fn oscillator_norm(k: f64, c: f64, t: f64) -> f64 {
    let w = (k * k - c * c).sqrt();
    let (s, co) = ((w * t).sin() / w, (w * t).cos());
    let m = [co + c * s, k * s, -k * s, co - c * s];
    let f2: f64 = m.iter().map(|x| x * x).sum::<f64>();
    let det = m[0] * m[3] - m[1] * m[2];
    (-c * t).exp() * ((f2 + (f2 * f2 - 4.0 * det * det).max(0.0).sqrt()) / 2.0).sqrt()
}

#[test]
fn koch_tataru_norms() {
    let c = 0.3;
    let g = wave::assemble_generator(&DampingProfile::constant(1, c).unwrap(), 8).unwrap();
    let t = 2.0;
    // deflating |k| < k0 leaves the worst retained oscillator
    for (codim, k0) in [(1, 1), (3, 2), (9, 5)] {
        let kt = wave::koch_tataru_check(&g, t, codim).unwrap();
        assert!((kt.bound - (-c * t).exp()).abs() < 1e-9);
        let want = (k0..=8).map(|k| oscillator_norm(k as f64, c, t)).fold(0.0, f64::max);
        assert!((kt.restricted_norm - want).abs() < 1e-9, "codim {codim}: {} vs {want}", kt.restricted_norm);
    }
    let strip = DampingProfile::strip(2, 0.4, 0.6, 0.1, 1.0).unwrap();
    let g = wave::assemble_generator(&strip, 8).unwrap();
    let mut last = f64::INFINITY;
    for codim in [0, 5, 13, 25] {
        let kt = wave::koch_tataru_check(&g, 4.0, codim).unwrap();
        assert!(kt.restricted_norm <= last + 1e-12);
        assert!((kt.bound - 1.0).abs() < 1e-12);
        last = kt.restricted_norm;
    }
    assert!(last > 0.9);
}

#[test]
fn microlocal_localisation() {
    let g = wave::assemble_generator(&DampingProfile::undamped(1).unwrap(), 12).unwrap();
    let s = wave::wave_spectrum(&g).unwrap();
    for n in 0..s.modes.len() {
        if s.modes[n].tau.re.abs() > 0.5 {
            assert_eq!(wave::microlocal_check(&s, n, 0.1).unwrap(), 0.0);
        }
    }
    let g = wave::assemble_generator(&DampingProfile::constant(1, 0.3).unwrap(), 24).unwrap();
    let s = wave::wave_spectrum(&g).unwrap();
    let n = s.modes.iter().position(|m| (m.tau.re - (400.0f64 - 0.09).sqrt()).abs() < 1e-6).unwrap();
    assert!(wave::microlocal_check(&s, n, 0.1).unwrap() < 1e-10);
    assert!(wave::microlocal_check(&s, s.modes.len(), 0.1).is_err());

    // outside mass ≤ C / Re τ over a frequency window
    let a = DampingProfile::cosine(1, 0.4, 0.4).unwrap();
    let s = wave::wave_spectrum(&wave::assemble_generator(&a, 64).unwrap()).unwrap();
    let c = (0..s.modes.len())
        .filter(|&n| (30.0..=40.0).contains(&s.modes[n].tau.re.abs()))
        .map(|n| wave::microlocal_check(&s, n, 0.2).unwrap() * s.modes[n].tau.re.abs())
        .fold(0.0, f64::max);
    assert!(c <= 5.0, "{c}");
}

#[test]
fn gcc_on_positive_damping() {
    let a = DampingProfile::cosine(2, 0.5, 0.3).unwrap();
    let r = wave::gcc_scan(&a, 30.0, 16, 16).unwrap();
    assert!(r.gcc);
    assert!(r.min_average >= a.a_min() - 1e-12);
    assert!(wave::gcc_scan(&a, 0.5, 4, 4).is_err());
}

#[test]
fn semiclassical_rescaling() {
    for h in [0.01, 0.005, 0.001] {
        let c = 0.4;
        let z = wave::rescale(c64::new(1.0 / h, -c), h);
        assert!((z.im / h + c).abs() <= 2.0 * c * c * h);
        assert!((z - c64::new(0.5, 0.0)).norm() <= c * h + c * c * h * h);
    }
}

#[test]
fn integrator_agrees_with_the_expansion_in_two_dimensions() {
    let a = DampingProfile::strip(2, 0.4, 0.6, 0.1, 1.0).unwrap();
    let g = wave::assemble_generator(&a, 5).unwrap();
    let d = WaveState::random(&g, 1.0, 9);
    let ts = times(3.0, 6);
    let e1 = wave::evolve_with(&g, &d, &ts, Method::Eigen).unwrap();
    let e2 = wave::evolve_with(&g, &d, &ts, Method::Integrator).unwrap();
    assert_eq!(e2.method, Method::Integrator);
    for (x, y) in e1.energies.iter().zip(&e2.energies) {
        assert!((x - y).abs() < 1e-7 * x);
    }
    assert_eq!(e1.to_csv().lines().next(), Some("t,E"));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn energy_never_increases(c0 in 0.05..0.8f64, frac in 0.0..1.0f64, s in 0.0..2.0f64, seed: u64) {
        let a = DampingProfile::cosine(1, c0, c0 * frac).unwrap();
        let g = wave::assemble_generator(&a, 6).unwrap();
        let e = wave::evolve(&g, &WaveState::random(&g, s, seed), &times(8.0, 40)).unwrap();
        prop_assert!(e.energies.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-9)));
    }

    #[test]
    fn profiles_round_trip_through_json(lo in 0.0..0.5f64, w in 0.05..0.4f64, ramp in 0.02..0.1f64, h in 0.1..2.0f64) {
        let a = DampingProfile::strip(2, lo, lo + w, ramp, h).unwrap();
        let back: DampingProfile = serde_json::from_str(&serde_json::to_string(&a).unwrap()).unwrap();
        prop_assert_eq!(back, a);
    }
}
