use std::collections::BTreeSet;
use std::fmt::Write as _;

use ndarray::Array2;

use addgp::scaling::{growth_exponent, linear_fit, time_instance, Timing};

use crate::config::BenchArgs;
use crate::csvio::write_table;
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq)]
pub struct BenchResult {
    pub timings: Vec<Timing>,
    /// Slope of log KL time against log C over the component sweep.
    pub kl_exponent_c: Option<f64>,
    /// R² of ELBO time against N over the dataset-size sweep.
    pub elbo_r_squared_n: Option<f64>,
    /// Slope of log ELBO time against log N.
    pub elbo_exponent_n: Option<f64>,
    pub m: usize,
    pub sweep_n: usize,
    pub sweep_c: usize,
    pub threads: usize,
}

fn positive(v: &[usize], name: &str) -> CliResult<()> {
    if v.is_empty() || v.contains(&0) {
        return Err(CliError::Usage(format!("--{name} needs positive entries")));
    }
    Ok(())
}

/// Time every distinct `(N, C)` cell of the two sweeps. Timings run on a
/// dedicated pool, single-threaded unless `threads` says otherwise, so the
/// growth rates reflect operation counts.
pub fn measure(args: &BenchArgs, seed: u64, threads: Option<usize>) -> CliResult<BenchResult> {
    let c_grid = args.c_grid.clone().unwrap_or_else(|| vec![1, 2, 4, 8]);
    let n_grid = args
        .n_grid
        .clone()
        .unwrap_or_else(|| vec![1000, 2000, 4000, 8000]);
    let m = args.m.unwrap_or(16);
    let sweep_n = args.sweep_n.unwrap_or(1000);
    let sweep_c = args.sweep_c.unwrap_or(2);
    let repeats = args.repeats.unwrap_or(7);
    positive(&c_grid, "c-grid")?;
    positive(&n_grid, "n-grid")?;
    positive(
        &[m, sweep_n, sweep_c, repeats],
        "m, sweep-n, sweep-c and repeats",
    )?;
    let threads = threads.unwrap_or(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| CliError::Usage(format!("thread pool: {e}")))?;

    let cells: BTreeSet<(usize, usize)> = c_grid
        .iter()
        .map(|&c| (sweep_n, c))
        .chain(n_grid.iter().map(|&n| (n, sweep_c)))
        .collect();
    let timings = pool.install(|| {
        cells
            .iter()
            .map(|&(n, c)| time_instance(n, m, c, repeats, seed))
            .collect::<addgp::Result<Vec<_>>>()
    })?;

    let pick = |n: usize, c: usize| {
        timings
            .iter()
            .find(|t| t.n == n && t.c == c)
            .expect("timed cell")
    };
    let cs: Vec<usize> = c_grid
        .iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let ns: Vec<usize> = n_grid
        .iter()
        .copied()
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let (kl_exponent_c, elbo_r_squared_n, elbo_exponent_n) = if cells.len() > 1 {
        let cx: Vec<f64> = cs.iter().map(|&c| c as f64).collect();
        let ky: Vec<f64> = cs.iter().map(|&c| pick(sweep_n, c).kl_seconds).collect();
        let nx: Vec<f64> = ns.iter().map(|&n| n as f64).collect();
        let ey: Vec<f64> = ns.iter().map(|&n| pick(n, sweep_c).elbo_seconds).collect();
        (
            growth_exponent(&cx, &ky),
            linear_fit(&nx, &ey).map(|f| f.r_squared),
            growth_exponent(&nx, &ey),
        )
    } else {
        (None, None, None)
    };
    Ok(BenchResult {
        timings,
        kl_exponent_c,
        elbo_r_squared_n,
        elbo_exponent_n,
        m,
        sweep_n,
        sweep_c,
        threads,
    })
}

pub fn render(r: &BenchResult) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "threads: {}", r.threads);
    let _ = writeln!(
        s,
        "{:>8} {:>4} {:>4} {:>4} {:>14} {:>14}",
        "n", "m", "c", "r", "kl_seconds", "elbo_seconds"
    );
    for t in &r.timings {
        let _ = writeln!(
            s,
            "{:>8} {:>4} {:>4} {:>4} {:>14.6e} {:>14.6e}",
            t.n, t.m, t.c, t.r, t.kl_seconds, t.elbo_seconds
        );
    }
    match r.kl_exponent_c {
        Some(e) => {
            let _ = writeln!(
                s,
                "kl_growth_exponent_c (n={}, m={}): {e:.4}",
                r.sweep_n, r.m
            );
        }
        None => {
            let _ = writeln!(s, "kl_growth_exponent_c: not fitted");
        }
    }
    match (r.elbo_r_squared_n, r.elbo_exponent_n) {
        (Some(r2), Some(e)) => {
            let _ = writeln!(s, "elbo_linear_r2_n (c={}, m={}): {r2:.6}", r.sweep_c, r.m);
            let _ = writeln!(s, "elbo_growth_exponent_n: {e:.4}");
        }
        _ => {
            let _ = writeln!(s, "elbo_linear_r2_n: not fitted");
        }
    }
    s
}

pub fn run(args: BenchArgs, seed: u64, threads: Option<usize>) -> CliResult<String> {
    let r = measure(&args, seed, threads)?;
    if let Some(path) = &args.output {
        let header: Vec<String> = ["n", "m", "c", "r", "kl_seconds", "elbo_seconds"]
            .iter()
            .map(|h| h.to_string())
            .collect();
        let rows = Array2::from_shape_fn((r.timings.len(), 6), |(i, j)| {
            let t = &r.timings[i];
            match j {
                0 => t.n as f64,
                1 => t.m as f64,
                2 => t.c as f64,
                3 => t.r as f64,
                4 => t.kl_seconds,
                _ => t.elbo_seconds,
            }
        });
        write_table(path, &header, &rows.view())?;
    }
    Ok(render(&r))
}
