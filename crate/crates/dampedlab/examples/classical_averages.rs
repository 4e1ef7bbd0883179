//! Extremal Birkhoff averages, Lyapunov data and a large-deviation volume for
//! the cat map with a cosine damping.

use dampedlab::classical::{self, Observable, SamplingGrid, TorusMap};

fn main() -> anyhow::Result<()> {
    let cat = TorusMap::cat();
    let q = Observable::cosine((1, 0), 1.0);

    let hyp = classical::hyperbolicity(&cat, 32, 20)?;
    println!("lambda_max = {:.6}, nu_min = {:.6}", hyp.lambda_max, hyp.nu_min);

    let asy = classical::asymptotics(&cat, &q, 40, SamplingGrid::default())?;
    println!("q- = {:.4}  mean = {:.4}  q+ = {:.4}", asy.q_minus, asy.q_bar, asy.q_plus);

    for n in 1..=6 {
        let orbits = classical::periodic_orbits(&cat, n, classical::ORBIT_CAP)?;
        println!("period {n}: {} orbits", orbits.len());
    }

    // μ{ρ : ⟨q⟩_t(ρ) ≥ a} shrinks exponentially in t
    for t in [5, 10, 20] {
        let v = classical::deviation_volume(&cat, &q, t, 0.2, 200_000, 7);
        println!("t = {t:>2}: volume above 0.2 = {v:.5}");
    }
    Ok(())
}
