//! Counts of decay rates above a level against the fractal upper bound.

use dampedlab::classical::{Observable, TorusMap};
use dampedlab::qtorus::{self, HilbertGrid};
use dampedlab::spectra;
use dampedlab::thermo::{self, PressureModel};

fn main() -> anyhow::Result<()> {
    let cat = TorusMap::cat();
    let q = Observable::constant(-1.0).add(&Observable::cosine((1, 0), 1.0));
    let model = PressureModel::new(&cat, &q, thermo::DEFAULT_N_RANGE)?;
    let beta = thermo::default_beta_grid();
    let table = model.rate_function(&beta, &model.default_s_grid(&beta, 81))?;

    let records = [64, 128, 256, 512]
        .into_iter()
        .map(|n| {
            let dp = qtorus::damped_propagator(&cat, &q, &HilbertGrid::for_map(&cat, n)?)?;
            spectra::propagator_spectrum(&dp)
        })
        .collect::<Result<Vec<_>, _>>()?;
    for alpha in [-0.9, -0.7] {
        let r = spectra::fractal_weyl_regression(&records, alpha, &table, cat.lambda().ln())?;
        println!("alpha {alpha}: counts {:?}, slope {:.3}, bound {:.3}", r.counts, r.slope, r.slope_bound);
    }
    Ok(())
}
