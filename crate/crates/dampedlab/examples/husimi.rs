//! Husimi density of the least damped eigenvector, printed as a coarse
//! character map.

use dampedlab::classical::{Observable, TorusMap};
use dampedlab::qtorus::{self, HilbertGrid};
use dampedlab::spectra;

fn main() -> anyhow::Result<()> {
    let cat = TorusMap::cat();
    let q = Observable::constant(-1.0).add(&Observable::cosine((1, 0), 1.0));
    let grid = HilbertGrid::for_map(&cat, 128)?;
    let dp = qtorus::damped_propagator(&cat, &q, &grid)?;
    let (values, vecs) = spectra::eigen_full(dp.v.as_ref())?;
    let top = (0..values.len())
        .max_by(|a, b| values[*a].norm().total_cmp(&values[*b].norm()))
        .unwrap();
    println!("least damped |lambda| = {:.4}", values[top].norm());
    let psi: Vec<_> = (0..grid.n()).map(|i| vecs[(i, top)]).collect();

    let side = 32;
    let h = qtorus::husimi(&psi, &grid, side, 1.0);
    let max = h.iter().flatten().cloned().fold(0.0, f64::max);
    let shades = [' ', '.', ':', '+', '#'];
    // rows run over p from top to bottom
    for k in (0..side).rev() {
        let line: String = (0..side)
            .map(|i| shades[((h[i][k] / max) * 4.0).round() as usize])
            .collect();
        println!("{line}");
    }
    Ok(())
}
