use std::fmt::Write as _;
use std::path::PathBuf;

use clap::{Args, ValueEnum};
use fpf_gain::galerkin::{galerkin_gain, BasisSet};
use fpf_gain::kernel::{extend, extend_gradient, kernel_gain, KernelConfig};
use fpf_gain::{exact_scalar_solution, DensityModel, GridSpec, ObservationFunction};
use serde::Serialize;

use crate::error::{CliError, Context};
use crate::manifest::write_manifest;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Exact,
    Galerkin,
    Kernel,
}

/// Gain study on the symmetric bimodal density with `h(x) = x`.
#[derive(Debug, Args, Serialize)]
pub struct GainArgs {
    /// Only run one method (default: all three).
    #[arg(long, value_enum)]
    pub method: Option<Method>,
    /// Galerkin basis size; repeatable.
    #[arg(long = "M", value_name = "K", default_values_t = [1usize, 3, 5])]
    pub basis_sizes: Vec<usize>,
    /// Kernel bandwidth; repeatable.
    #[arg(long, value_name = "V", default_values_t = [0.1, 0.2, 0.4, 0.8])]
    pub eps: Vec<f64>,
    /// Particle count.
    #[arg(long = "n", value_name = "N", default_value_t = 200)]
    pub n_particles: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Standard deviation of each mixture component (means at -1 and +1).
    #[arg(long, default_value_t = 0.4)]
    pub sigma: f64,
    /// Points of the shared x-grid.
    #[arg(long, default_value_t = 4001)]
    pub grid: usize,
    #[arg(long, default_value = "out/gain")]
    pub out: PathBuf,
}

pub fn run(args: &GainArgs) -> Result<Vec<String>, CliError> {
    if args.grid < 2 {
        return Err(CliError::Config("--grid needs at least 2 points".into()));
    }
    if args.basis_sizes.is_empty() || args.eps.is_empty() {
        return Err(CliError::Config("--M and --eps need at least one value".into()));
    }
    let model = DensityModel::symmetric_bimodal(1.0, args.sigma).context("density")?;
    let grid = GridSpec::for_model(&model, args.grid);
    let xs = grid.nodes();
    let h = ObservationFunction::identity();
    let wants = |m: Method| args.method.is_none_or(|sel| sel == m);
    std::fs::create_dir_all(&args.out)?;
    let mut files = Vec::new();

    if wants(Method::Exact) {
        let exact = exact_scalar_solution(&model, &h.clone().with_mean(0.0), grid).context("exact solution")?;
        exact.save_csv(&args.out.join("exact.csv")).context("writing exact.csv")?;
        files.push("exact.csv".to_string());
    }

    let ensemble = model.sample(args.n_particles, args.seed).context("sampling")?;
    if wants(Method::Galerkin) {
        for &m in &args.basis_sizes {
            let basis = BasisSet::monomial(1, m).context("basis")?;
            let sol = galerkin_gain(&ensemble, &basis, &h).context(&format!("galerkin M={m}"))?;
            let name = format!("galerkin_M{m}.csv");
            sol.save_gain_csv(&xs, &args.out.join(&name)).context("writing galerkin csv")?;
            files.push(name);
        }
    }
    if wants(Method::Kernel) {
        for &eps in &args.eps {
            let what = format!("kernel eps={eps}");
            let (markov, sol) = kernel_gain(&ensemble, &h, &KernelConfig::new(eps), None).context(&what)?;
            let mut text = String::from("x,phi,gain\n");
            for &x in &xs {
                let phi = extend(&[x], &markov, &sol).context(&what)?;
                let gain = extend_gradient(&[x], &markov, &sol).context(&what)?[0];
                writeln!(text, "{x},{phi},{gain}").expect("writing to a String");
            }
            let name = format!("kernel_eps{eps}.csv");
            std::fs::write(args.out.join(&name), text)?;
            files.push(name);
        }
    }
    write_manifest(&args.out, "gain", args, &files)?;
    Ok(files)
}
