//! Symbolic-path expansion of `V^n e` for a coherent state, and the classical
//! cylinder sum that controls it.

use dampedlab::classical::{Observable, TorusMap, TorusPoint};
use dampedlab::dispersion;
use dampedlab::qtorus::{self, HilbertGrid};

fn main() -> anyhow::Result<()> {
    let cat = TorusMap::cat();
    let q = Observable::constant(-0.3).add(&Observable::cosine((1, 0), 0.3));
    let grid = HilbertGrid::for_map(&cat, 256)?;
    let dp = qtorus::damped_propagator(&cat, &q, &grid)?;
    let part = dispersion::build_partition(&grid, 4, 0.5)?;
    println!("partition sum defect {:.1e}", part.sum_defect()?);

    let e = qtorus::coherent_state(TorusPoint::new(0.3, 0.7), &grid, 1.0).vector;
    let r = dispersion::path_bound_check(&dp, &part, &cat, &q, 5, &e)?;
    println!(
        "{} paths, reconstruction defect {:.1e}, fitted C {:.4}",
        r.rows.len(),
        r.reconstruction_defect,
        r.fitted_c
    );

    // cells carry the sup of q, so on 16 cells the rate sits well above the pressure
    let s = dispersion::pressure_sum_check(&cat, &q, 16, 8)?;
    for l in &s.levels {
        println!("n = {}: {} cylinders, sum {:.4e}", l.n, l.count, l.sum);
    }
    println!("rate {:.4} (ratio {:.4}) vs pressure {:.4}", s.raw_rate, s.ratio_rate, s.pressure);
    Ok(())
}
