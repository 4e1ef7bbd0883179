//! Polar split of the symmetrized propagator at the Ehrenfest time and the
//! four-term norm bound built from it.

use dampedlab::classical::{self, Observable, TorusMap};
use dampedlab::dispersion::{self, EhrenfestTime};
use dampedlab::qtorus::{self, HilbertGrid};
use dampedlab::thermo::{self, PressureModel};

fn main() -> anyhow::Result<()> {
    let cat = TorusMap::cat();
    let q = Observable::constant(-1.0).add(&Observable::cosine((1, 0), 1.0));
    let hyp = classical::hyperbolicity(&cat, 16, 20)?;
    let model = PressureModel::new(&cat, &q, thermo::DEFAULT_N_RANGE)?;
    let crit = dispersion::critical_level(&model, hyp.nu_min, hyp.lambda_max)?;
    println!("alpha_c = {:.4}, gap gamma = {:.4}", crit.alpha_c, crit.gamma);

    for n in [128, 256] {
        let dp = qtorus::damped_propagator(&cat, &q, &HilbertGrid::for_map(&cat, n)?)?;
        let t = EhrenfestTime::new(n, 0.05, hyp.lambda_max).t;
        let split = dispersion::projector_split(&dp, t, crit.alpha_c)?;
        let n5 = split.norm5()?;
        println!(
            "N = {n}, T = {t}: rank+/N = {:.3}, |Pi+ U W Pi+| = {:.3e}, |V^2T| = {:.3e}",
            split.rank_plus() as f64 / n as f64,
            split.dispersion_norm()?,
            n5.total
        );
        for (t, b) in n5.terms.iter().zip(&n5.bounds) {
            println!("  term {t:.3e} <= {b:.3e}");
        }
    }
    Ok(())
}
