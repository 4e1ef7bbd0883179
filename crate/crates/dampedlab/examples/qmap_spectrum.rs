//! Spectrum of the damped quantum cat map: band check, concentration around
//! the mean damping, and a resolvent probe outside the band.

use dampedlab::classical::{self, Observable, SamplingGrid, TorusMap};
use dampedlab::qtorus::{self, HilbertGrid};
use dampedlab::spectra;
use faer::c64;

fn main() -> anyhow::Result<()> {
    let cat = TorusMap::cat();
    let q = Observable::constant(-0.3).add(&Observable::cosine((1, 0), 0.3));
    let asy = classical::asymptotics(&cat, &q, 40, SamplingGrid::default())?;

    let mut records = Vec::new();
    for n in [128, 256, 512] {
        let dp = qtorus::damped_propagator(&cat, &q, &HilbertGrid::for_map(&cat, n)?)?;
        let rec = spectra::propagator_spectrum(&dp)?;
        let band = spectra::band_check(&rec, asy.q_minus, asy.q_plus, 0.1);
        let r = (asy.q_plus + 0.2).exp();
        let res = spectra::resolvent_norm(dp.v.as_ref(), c64::new(r, 0.0));
        println!(
            "N = {n:>3}: max rate {:.4}, {} outside the band, residual {:.1e}, resolvent {:.3}",
            rec.max_rate(),
            band.violations,
            rec.residual,
            res
        );
        records.push(rec);
    }
    let conc = spectra::concentration_histogram(&records, asy.q_bar, 0.1 * (asy.q_plus - asy.q_minus));
    println!("fractions near the mean: {:?}", conc.fractions);
    Ok(())
}
