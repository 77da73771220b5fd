//! Jarque-Bera pass rates of independent versus frame-correlated noise.
//!
//! ```text
//! cargo run --example noise_prior -- 2000
//! ```

use t2v_inflate::noise_prior::{gaussianity_experiment, jarque_bera, uniform_sample, NoiseSpec, DEFAULT_SHARED_WEIGHT};

fn main() -> t2v_inflate::Result<()> {
    let trials = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(1000);
    let shape = [8, 3, 32, 32];

    let iid = gaussianity_experiment(&NoiseSpec::iid(shape, 0), trials)?;
    println!("iid         pass rate {:.4}  mean JB {:.3}", iid.pass_rate, iid.mean_statistic);
    for w in [0.3, 0.5, DEFAULT_SHARED_WEIGHT, 0.9] {
        let r = gaussianity_experiment(&NoiseSpec::correlated(shape, w, 0), trials)?;
        println!("shared {w:.1}  pass rate {:.4}  mean JB {:.3}", r.pass_rate, r.mean_statistic);
    }

    let uniform = jarque_bera(&uniform_sample(24_576, 1))?;
    println!("uniform sample: JB {:.1}, p {:.2e}", uniform.statistic, uniform.p_value);
    Ok(())
}
