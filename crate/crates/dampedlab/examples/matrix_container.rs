//! Saving a propagator to the binary container and reading it back.

use dampedlab::classical::{Observable, TorusMap};
use dampedlab::linalg;
use dampedlab::qtorus::{self, HilbertGrid};

fn main() -> anyhow::Result<()> {
    let cat = TorusMap::cat();
    let q = Observable::constant(-0.3).add(&Observable::cosine((1, 0), 0.3));
    let dp = qtorus::damped_propagator(&cat, &q, &HilbertGrid::for_map(&cat, 16)?)?;

    let path = std::env::temp_dir().join("dampedlab_v16.dlmx");
    qtorus::write_matrix(&mut std::fs::File::create(&path)?, dp.v.as_ref())?;
    let back = qtorus::read_matrix(&mut std::fs::File::open(&path)?)?;
    println!(
        "{} bytes, max difference {:e}, hash {}",
        std::fs::metadata(&path)?.len(),
        linalg::max_diff(dp.v.as_ref(), back.as_ref()),
        linalg::matrix_hash(back.as_ref())
    );
    // small matrices also go to JSON
    let json = qtorus::matrix_to_json(back.as_ref())?;
    println!("{}", &serde_json::to_string(&json)?[..120]);
    Ok(())
}
