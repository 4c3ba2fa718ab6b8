use std::fmt::Write as _;
use std::path::PathBuf;

use clap::{Args, ValueEnum};
use fpf_gain::galerkin::{galerkin_gain, l2_error_vs_oracle, BasisSet};
use fpf_gain::kernel::{extend, kernel_gain, KernelConfig};
use fpf_gain::{exact_scalar_solution, DensityModel, GridSpec, ObservationFunction};
use serde::Serialize;

use crate::error::{CliError, Context};
use crate::manifest::write_manifest;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvergeMethod {
    Galerkin,
    Kernel,
}

/// Error-versus-N sweep on the symmetric bimodal density with `h(x) = x`.
///
/// Galerkin error is the `L2(rho)` distance of `phi` to the exact solution;
/// kernel error is the sup distance, modulo constants, of the extended `phi`
/// on `[-3, 3]` to a reference solve with `--n-ref` particles.
#[derive(Debug, Args, Serialize)]
pub struct ConvergeArgs {
    /// Only sweep one method (default: both).
    #[arg(long, value_enum)]
    pub method: Option<ConvergeMethod>,
    /// Particle counts for the Galerkin sweep, ascending.
    #[arg(long, value_delimiter = ',', default_values_t = [100usize, 1000, 10_000])]
    pub galerkin_n: Vec<usize>,
    /// Particle counts for the kernel sweep, ascending.
    #[arg(long, value_delimiter = ',', default_values_t = [100usize, 200, 400, 800, 1600])]
    pub kernel_n: Vec<usize>,
    #[arg(long = "M", value_name = "K", default_value_t = 1)]
    pub basis_size: usize,
    #[arg(long, default_value_t = 0.2)]
    pub eps: f64,
    /// Reference particle count for the kernel sweep.
    #[arg(long, default_value_t = 10_000)]
    pub n_ref: usize,
    /// Seed of the reference ensemble.
    #[arg(long, default_value_t = 10_000)]
    pub ref_seed: u64,
    /// Seeds per N for the Galerkin sweep (seeds 1..=count).
    #[arg(long, default_value_t = 20)]
    pub galerkin_seeds: u64,
    /// Seeds per N for the kernel sweep (seeds 1..=count).
    #[arg(long, default_value_t = 10)]
    pub kernel_seeds: u64,
    #[arg(long, default_value_t = 0.4)]
    pub sigma: f64,
    #[arg(long, default_value = "out/converge")]
    pub out: PathBuf,
}

/// One row of `converge.csv`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrendRow {
    pub method: &'static str,
    pub n: usize,
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
}

fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

fn summarize(method: &'static str, n: usize, mut errs: Vec<f64>) -> TrendRow {
    errs.sort_by(f64::total_cmp);
    TrendRow {
        method,
        n,
        median: quantile(&errs, 0.5),
        q25: quantile(&errs, 0.25),
        q75: quantile(&errs, 0.75),
    }
}

fn validate(args: &ConvergeArgs) -> Result<(), CliError> {
    let ascending = |v: &[usize]| !v.is_empty() && v.windows(2).all(|w| w[0] < w[1]);
    if !ascending(&args.galerkin_n) || !ascending(&args.kernel_n) {
        return Err(CliError::Config("N lists must be non-empty and strictly ascending".into()));
    }
    if args.galerkin_seeds < 10 || args.kernel_seeds < 10 {
        return Err(CliError::Config("at least 10 seeds per N are required".into()));
    }
    Ok(())
}

/// `min_c sup |a - b - c|`.
fn gap_modulo_constant(a: &[f64], b: &[f64]) -> f64 {
    let (lo, hi) = a
        .iter()
        .zip(b)
        .map(|(x, y)| x - y)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), d| (lo.min(d), hi.max(d)));
    0.5 * (hi - lo)
}

pub fn run(args: &ConvergeArgs) -> Result<Vec<TrendRow>, CliError> {
    validate(args)?;
    let model = DensityModel::symmetric_bimodal(1.0, args.sigma).context("density")?;
    let h = ObservationFunction::identity();
    let wants = |m: ConvergeMethod| args.method.is_none_or(|sel| sel == m);
    let mut rows = Vec::new();

    if wants(ConvergeMethod::Galerkin) {
        let oracle = exact_scalar_solution(&model, &h.clone().with_mean(0.0), GridSpec::for_model(&model, 4001))
            .context("exact solution")?;
        let basis = BasisSet::monomial(1, args.basis_size).context("basis")?;
        for &n in &args.galerkin_n {
            let errs = (1..=args.galerkin_seeds)
                .map(|seed| {
                    let e = model.sample(n, seed)?;
                    l2_error_vs_oracle(&galerkin_gain(&e, &basis, &h)?, &oracle)
                })
                .collect::<Result<Vec<_>, _>>()
                .context(&format!("galerkin N={n}"))?;
            rows.push(summarize("galerkin", n, errs));
        }
    }

    if wants(ConvergeMethod::Kernel) {
        let cfg = KernelConfig::new(args.eps);
        let omega = GridSpec::new(-3.0, 3.0, 301).nodes();
        let extended = |n: usize, seed: u64| -> fpf_gain::Result<Vec<f64>> {
            let e = model.sample(n, seed)?;
            let (m, sol) = kernel_gain(&e, &h, &cfg, None)?;
            omega.iter().map(|x| extend(&[*x], &m, &sol)).collect()
        };
        let reference = extended(args.n_ref, args.ref_seed).context("kernel reference")?;
        for &n in &args.kernel_n {
            let errs = (1..=args.kernel_seeds)
                .map(|seed| extended(n, seed).map(|phi| gap_modulo_constant(&phi, &reference)))
                .collect::<Result<Vec<_>, _>>()
                .context(&format!("kernel N={n}"))?;
            rows.push(summarize("kernel", n, errs));
        }
    }

    std::fs::create_dir_all(&args.out)?;
    let mut text = String::from("method,N,median_err,q25,q75\n");
    for r in &rows {
        writeln!(text, "{},{},{},{},{}", r.method, r.n, r.median, r.q25, r.q75).expect("writing to a String");
    }
    std::fs::write(args.out.join("converge.csv"), text)?;
    write_manifest(&args.out, "converge", args, &["converge.csv".to_string()])?;
    Ok(rows)
}
