use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use tiltscore::estimator::{estimate_theta_mean, mean_zeta, theta_influence_variance, SeMethod};
use tiltscore::io::{load_csv, parse_config, write_report, EstimateReport, Mode, ReportFormat, RunConfig};
use tiltscore::moments::ProviderSettings;
use tiltscore::simlab::{naive_estimator, run_monte_carlo, Design, EstimatorSpec, MonteCarloConfig, ThetaSe};
use tiltscore::{bootstrap_se, fit_beta_point, solve_beta, Error, HFamily, ModelSpec, ProviderKind, Result};

#[derive(Parser)]
#[command(name = "tiltscore", version, about = "Tilted-score estimation with nonignorable nonresponse")]
struct Cli {
    /// Plain-text `key = value` file; command-line flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Monte Carlo study on a registered design.
    Simulate(SimulateArgs),
    /// Estimate beta and the outcome mean from a CSV file.
    Estimate(EstimateArgs),
}

#[derive(Args, Default)]
struct Common {
    /// oracle, parametric or nonparametric.
    #[arg(long)]
    provider: Option<String>,
    /// Working g*, e.g. `affine:0,-0.4` or `quadratic:c,l1..,s1..`.
    #[arg(long)]
    gstar: Option<String>,
    /// `family` or `family:scale:exponent`, e.g. `gaussian:1.5:1/3`.
    #[arg(long)]
    kernel: Option<String>,
    /// Regression basis for the parametric provider, e.g. `1;(x0-x1)^2`.
    #[arg(long)]
    basis: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// csv or text.
    #[arg(long)]
    format: Option<String>,
    /// auto, newton-fd or brent-scalar.
    #[arg(long)]
    solver: Option<String>,
    /// Report path; standard output when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// A, B1 or B2.
    #[arg(long)]
    design: Option<String>,
    #[arg(long)]
    n: Option<u64>,
    #[arg(long)]
    replicates: Option<u64>,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct EstimateArgs {
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    ycol: Option<String>,
    /// 0/1 response column; otherwise empty or NA outcomes mark nonresponse.
    #[arg(long)]
    rcol: Option<String>,
    /// Comma-separated columns entering g.
    #[arg(long)]
    ucols: Option<String>,
    /// Comma-separated instrument columns.
    #[arg(long)]
    zcols: Option<String>,
    /// Bootstrap resamples for the theta standard error; 0 uses the influence function.
    #[arg(long)]
    bootstrap: Option<u64>,
    #[command(flatten)]
    common: Common,
}

fn push(pairs: &mut Vec<(String, String)>, key: &str, value: Option<impl ToString>) {
    if let Some(v) = value {
        pairs.push((key.to_string(), v.to_string()));
    }
}

fn push_common(pairs: &mut Vec<(String, String)>, c: &Common) {
    push(pairs, "provider", c.provider.as_ref());
    push(pairs, "gstar", c.gstar.as_ref());
    push(pairs, "kernel", c.kernel.as_ref());
    push(pairs, "basis", c.basis.as_ref());
    push(pairs, "seed", c.seed);
    push(pairs, "format", c.format.as_ref());
    push(pairs, "solver", c.solver.as_ref());
    push(pairs, "out", c.out.as_ref().map(|p| p.display().to_string()));
}

fn overrides(cmd: &Command) -> Vec<(String, String)> {
    let mut pairs = Vec::new();
    match cmd {
        Command::Simulate(a) => {
            push(&mut pairs, "mode", Some("simulate"));
            push(&mut pairs, "design", a.design.as_ref());
            push(&mut pairs, "n", a.n);
            push(&mut pairs, "replicates", a.replicates);
            push_common(&mut pairs, &a.common);
        }
        Command::Estimate(a) => {
            push(&mut pairs, "mode", Some("estimate"));
            push(&mut pairs, "input", a.input.as_ref().map(|p| p.display().to_string()));
            push(&mut pairs, "ycol", a.ycol.as_ref());
            push(&mut pairs, "rcol", a.rcol.as_ref());
            push(&mut pairs, "ucols", a.ucols.as_ref());
            push(&mut pairs, "zcols", a.zcols.as_ref());
            push(&mut pairs, "bootstrap", a.bootstrap);
            push_common(&mut pairs, &a.common);
        }
    }
    pairs
}

fn emit(body: &str, out: Option<&Path>) -> Result<()> {
    match out {
        Some(p) => std::fs::write(p, body)?,
        None => print!("{body}"),
    }
    Ok(())
}

fn simulate(cfg: &RunConfig) -> Result<()> {
    let design = Design::new(cfg.design.expect("validated simulate config"));
    let kind = cfg.provider;
    let mut mc = MonteCarloConfig::new(
        design,
        cfg.n,
        cfg.replicates,
        cfg.seed,
        vec![
            EstimatorSpec::beta(kind),
            EstimatorSpec::theta(kind, ThetaSe::Influence),
            EstimatorSpec::Naive,
            EstimatorSpec::Oracle,
        ],
    );
    if let Some(g) = &cfg.g_star {
        mc.g_star = g.clone();
    }
    if let Some(b) = &cfg.basis {
        mc.design.basis = b.clone();
    }
    if cfg.kernel_explicit {
        mc.kernel = Some(cfg.kernel);
    }
    mc.solver = cfg.solver.clone();
    let rows = run_monte_carlo(&mc)?;
    if rows.iter().any(|r| r.flagged) {
        warn!("some estimators failed on more than 5% of replicates");
    }
    match &cfg.out {
        Some(p) => write_report(&rows, cfg.format, p),
        None => {
            let body = match cfg.format {
                ReportFormat::Csv => tiltscore::io::render_csv(&rows)?,
                ReportFormat::Text => tiltscore::io::render_text(&rows)?,
            };
            emit(&body, None)
        }
    }
}

fn estimate(cfg: &RunConfig) -> Result<()> {
    let input = cfg.input.as_ref().expect("validated estimate config");
    let columns = cfg.columns.as_ref().expect("validated estimate config");
    let loaded = load_csv(input, columns)?;
    let sample = loaded.sample;
    info!("{} rows, {} nonrespondents", loaded.n_rows, loaded.n_missing);

    let g_star = cfg.g_star.clone().expect("estimate config fills g*");
    let spec = ModelSpec::new(HFamily::Linear, g_star);
    spec.validate(sample.q())?;
    let settings = match cfg.provider {
        ProviderKind::Oracle => return Err(Error::OracleUnavailable),
        ProviderKind::Parametric => ProviderSettings::parametric(cfg.basis.clone().expect("validated basis")),
        ProviderKind::Nonparametric => ProviderSettings::nonparametric(cfg.kernel, cfg.kernel),
    };
    let provider = settings.fit(&sample, &spec.h)?;
    let beta_fit = Arc::new(solve_beta(&sample, &spec, &provider, &cfg.solver)?);
    let theta_fit = estimate_theta_mean(&sample, &beta_fit, &provider)?;
    let (theta_se, method) = if cfg.bootstrap >= 2 {
        let est = |s: &tiltscore::Sample| -> Result<Vec<f64>> {
            let p = settings.fit(s, &spec.h)?;
            let bf = Arc::new(fit_beta_point(s, &spec, &p, &cfg.solver)?);
            Ok(estimate_theta_mean(s, &bf, &p)?.theta)
        };
        (bootstrap_se(&sample, est, cfg.bootstrap, cfg.seed)?[0], SeMethod::Bootstrap)
    } else {
        let cov = theta_influence_variance(&sample, &mean_zeta(), &theta_fit, &provider, None)?;
        (cov[(0, 0)].max(0.0).sqrt(), SeMethod::Influence)
    };
    let report = EstimateReport {
        n: sample.len(),
        n_respondents: sample.n_respondents(),
        provider: cfg.provider.to_string(),
        g_star: spec.g_star.to_string(),
        beta: beta_fit.beta.clone(),
        beta_se: beta_fit.se_or_nan(),
        theta: theta_fit.theta[0],
        theta_se,
        theta_se_method: method.to_string(),
        naive: naive_estimator(&sample)?.estimate,
        iterations: beta_fit.iterations,
    };
    emit(&report.render(cfg.format), cfg.out.as_deref())
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = parse_config(cli.config.as_deref(), &overrides(&cli.command))?;
    match cfg.mode {
        Mode::Simulate => simulate(&cfg),
        Mode::Estimate => estimate(&cfg),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
