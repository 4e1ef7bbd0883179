//! Damped waves on the circle and on the 2-torus: spectrum in the strip, energy
//! decay against min(G, a-), the geometric control scan and a Weyl count.

use dampedlab::spectra;
use dampedlab::wave::{self, DampingProfile, WaveState};

fn main() -> anyhow::Result<()> {
    let a = DampingProfile::cosine(1, 0.4, 0.4)?;
    let gen = wave::assemble_generator(&a, 32)?;
    let spec = wave::wave_spectrum(&gen)?;
    let gcc = wave::gcc_scan(&a, 60.0, 1, 64)?;
    println!(
        "circle: G = {:.4}, a- = {:.4}, strip violations {}",
        spec.gap(),
        gcc.a_minus_estimate,
        spec.strip_violations(a.a_min(), a.a_max(), 1e-6)
    );
    let times: Vec<f64> = (0..=500).map(|i| i as f64 * 0.2).collect();
    let trace = wave::evolve(&gen, &WaveState::random(&gen, 0.0, 1), &times)?;
    let fit = wave::decay_fit(&trace, spec.gap(), gcc.a_minus_estimate)?;
    println!("decay rate {:.4} vs predicted {:.4}", fit.gamma_fit, fit.gamma_pred);
    let w = spectra::weyl_count(&spec.to_record(), (0.5, 20.5))?;
    println!("Weyl count in [0.5, 20.5]: {} vs {}", w.count, w.prediction);

    // damping vanishing on a vertical strip leaves undamped geodesics
    let strip = DampingProfile::strip(2, 0.4, 0.6, 0.1, 1.0)?;
    let gcc = wave::gcc_scan(&strip, 50.0, 16, 16)?;
    println!("strip: gcc = {}, min average {:.3}", gcc.gcc, gcc.min_average);
    let gen = wave::assemble_generator(&strip, 16)?;
    for k2 in [4, 8, 16] {
        let s = wave::block_wave_spectrum(&gen, k2)?;
        println!("  k2 = {k2:>2}: least rate {:.3e}", s.gap());
    }
    Ok(())
}
