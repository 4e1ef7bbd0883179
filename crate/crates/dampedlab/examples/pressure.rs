//! Topological pressure from periodic orbits, the rate function, and the two
//! gap conditions for a damping that is largest on the fixed point.

use dampedlab::classical::{self, Observable, TorusMap};
use dampedlab::thermo::{self, PressureModel};

fn main() -> anyhow::Result<()> {
    let cat = TorusMap::cat();
    let q = Observable::constant(-1.0).add(&Observable::cosine((1, 0), 1.0));

    let model = PressureModel::new(&cat, &q, thermo::DEFAULT_N_RANGE)?;
    let p = model.pressure(1.0, -0.5, 0.0);
    println!("P(q - phi/2) = {:.5} (+- {:.1e})", p.value, p.error_est);
    for (n, v) in &p.partial {
        println!("  n = {n:>2}: {v:.6}");
    }

    let beta = thermo::default_beta_grid();
    let table = model.rate_function(&beta, &model.default_s_grid(&beta, 41))?;
    print!("{}", table.to_csv());

    let fixed = classical::periodic_orbits(&cat, 1, classical::ORBIT_CAP)?;
    let report = thermo::gap_report(&cat, &q, &fixed)?;
    println!("pressure condition: {:?}", report.pressure_cond);
    println!("thickness condition: {:?}", report.thickness_cond);
    Ok(())
}
