//! A projector experiment whose damping is too flat for any critical level:
//! the run stops at the `critical_level` stage with a condition0 error.

use dampedlab::experiment;

fn main() -> anyhow::Result<()> {
    let out = std::env::temp_dir().join("dampedlab_failing");
    let text = format!(
        r#"{{
            "experiment": "dispersion_projector",
            "seed": 3,
            "damping": {{"constant": -0.3, "cos": [[1, 0, 0.001]]}},
            "n_list": [64],
            "output_dir": {:?}
        }}"#,
        out.display().to_string()
    );
    let cfg = experiment::parse_config(&text)?;
    match experiment::run(&cfg) {
        Ok(m) => println!("unexpected success: {:?}", m.assertions),
        Err(e) => println!("run failed as expected: {e}"),
    }
    Ok(())
}
