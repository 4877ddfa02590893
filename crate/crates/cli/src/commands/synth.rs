use ndarray::{concatenate, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use addgp::friedman::{sample, FRIEDMAN_DIM};

use crate::config::{require, SynthArgs};
use crate::csvio::write_table;
use crate::error::{CliError, CliResult};
use crate::RNG_NAME;

pub fn run(args: SynthArgs, seed: u64) -> CliResult<String> {
    let n = args.n.unwrap_or(5000);
    let noise_sd = args.noise_sd.unwrap_or(1.0);
    let output = require(args.output, "output")?;
    if !(noise_sd >= 0.0 && noise_sd.is_finite()) {
        return Err(CliError::Usage(format!(
            "noise sd must be finite and non-negative, got {noise_sd}"
        )));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let (x, y, _) = sample(&mut rng, n, noise_sd);
    let rows = concatenate(Axis(1), &[x.view(), y.insert_axis(Axis(1)).view()])
        .expect("matching row counts");
    let mut header: Vec<String> = (1..=FRIEDMAN_DIM).map(|d| format!("x{d}")).collect();
    header.push("y".into());
    write_table(&output, &header, &rows.view())?;
    Ok(format!(
        "wrote {n} rows to {}\nrng: {RNG_NAME}\nseed: {seed}\nnoise_sd: {noise_sd}\n",
        output.display()
    ))
}
