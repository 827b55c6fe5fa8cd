//! Flat `key = value` run configuration.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::io::data::ColumnMapping;
use crate::kernel::{parse_exponent, KernelSpec};
use crate::model::GFunction;
use crate::moments::{MeanBasis, ProviderKind};
use crate::simlab::DesignId;
use crate::solver::{SolverMethod, SolverOptions};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Simulate,
    Estimate,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "simulate" => Ok(Mode::Simulate),
            "estimate" => Ok(Mode::Estimate),
            other => Err(Error::key("mode", format!("expected simulate or estimate, got `{other}`"))),
        }
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Simulate => "simulate",
            Mode::Estimate => "estimate",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReportFormat {
    #[default]
    Csv,
    Text,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "csv" => Ok(ReportFormat::Csv),
            "text" | "table" => Ok(ReportFormat::Text),
            other => Err(Error::key("format", format!("expected csv or text, got `{other}`"))),
        }
    }
}

pub const KEYS: &[&str] = &[
    "mode",
    "design",
    "n",
    "replicates",
    "seed",
    "provider",
    "gstar",
    "kernel",
    "bandwidth_scale",
    "bandwidth_exponent",
    "basis",
    "bootstrap",
    "input",
    "ycol",
    "rcol",
    "ucols",
    "zcols",
    "out",
    "format",
    "solver",
    "tol",
    "max_iter",
];

/// Parses `key = value` lines; `#` starts a comment.
pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
        let k = k.trim();
        if !KEYS.contains(&k) {
            return Err(Error::key(k, "unknown configuration key"));
        }
        out.push((k.to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct RunConfig {
    pub mode: Mode,
    pub design: Option<DesignId>,
    pub n: usize,
    pub replicates: usize,
    pub seed: u64,
    pub provider: ProviderKind,
    /// Working `g*`; the design's default when absent.
    pub g_star: Option<GFunction>,
    pub kernel: KernelSpec,
    /// Whether the kernel was set explicitly rather than left at its default.
    pub kernel_explicit: bool,
    pub basis: Option<MeanBasis>,
    pub bootstrap: usize,
    pub input: Option<PathBuf>,
    pub columns: Option<ColumnMapping>,
    pub out: Option<PathBuf>,
    pub format: ReportFormat,
    pub solver: SolverOptions,
}

impl RunConfig {
    fn defaults(mode: Mode) -> Self {
        RunConfig {
            mode,
            design: None,
            n: 1000,
            replicates: 1000,
            seed: 1,
            provider: ProviderKind::Oracle,
            g_star: None,
            kernel: KernelSpec::default(),
            kernel_explicit: false,
            basis: None,
            bootstrap: 200,
            input: None,
            columns: None,
            out: None,
            format: ReportFormat::Csv,
            solver: SolverOptions::default(),
        }
    }

    /// Builds a configuration from file pairs followed by overrides; later keys win.
    pub fn from_pairs(pairs: &[(String, String)]) -> Result<Self> {
        let last = |key: &str| pairs.iter().rev().find(|(k, _)| k == key).map(|(_, v)| v.as_str());
        for (k, _) in pairs {
            if !KEYS.contains(&k.as_str()) {
                return Err(Error::key(k.as_str(), "unknown configuration key"));
            }
        }
        let inferred = match (last("design").is_some(), last("input").is_some()) {
            (true, true) => return Err(Error::key("mode", "both `design` and `input` given")),
            (true, false) => Some(Mode::Simulate),
            (false, true) => Some(Mode::Estimate),
            (false, false) => None,
        };
        let mode = match (last("mode").map(str::parse::<Mode>).transpose()?, inferred) {
            (Some(m), Some(i)) if m != i => {
                return Err(Error::key("mode", format!("mode `{m}` conflicts with the keys given")))
            }
            (Some(m), _) | (None, Some(m)) => m,
            (None, None) => return Err(Error::key("mode", "set `mode`, `design` or `input`")),
        };
        let mut c = RunConfig::defaults(mode);

        let num = |key: &str| -> Result<Option<u64>> {
            last(key)
                .map(|v| v.parse::<u64>().map_err(|_| Error::key(key, format!("malformed integer `{v}`"))))
                .transpose()
        };
        let real = |key: &str| -> Result<Option<f64>> {
            last(key)
                .map(|v| {
                    v.parse::<f64>()
                        .ok()
                        .filter(|x| x.is_finite())
                        .ok_or_else(|| Error::key(key, format!("malformed number `{v}`")))
                })
                .transpose()
        };

        c.design = last("design").map(str::parse).transpose()?;
        if let Some(v) = num("n")? {
            c.n = v as usize;
        }
        if let Some(v) = num("replicates")? {
            c.replicates = v as usize;
        }
        if let Some(v) = num("seed")? {
            c.seed = v;
        }
        if let Some(v) = num("bootstrap")? {
            c.bootstrap = v as usize;
        }
        if let Some(p) = last("provider") {
            c.provider = p.parse()?;
        }
        c.g_star = last("gstar").map(str::parse).transpose()?;
        c.basis = last("basis").map(str::parse).transpose()?;

        // `kernel` may be a bare family or `family:scale:exponent`; the
        // separate bandwidth keys refine whichever was given.
        let mut kernel = match last("kernel") {
            Some(k) => {
                c.kernel_explicit = true;
                k.parse::<KernelSpec>()?
            }
            None => KernelSpec::default(),
        };
        if let Some(s) = real("bandwidth_scale")? {
            c.kernel_explicit = true;
            kernel = KernelSpec::new(kernel.family, s, kernel.rule.exponent)
                .map_err(|e| Error::key("bandwidth_scale", e.to_string()))?;
        }
        if let Some(g) = last("bandwidth_exponent") {
            c.kernel_explicit = true;
            kernel = KernelSpec::new(kernel.family, kernel.rule.scale, parse_exponent(g)?)
                .map_err(|e| Error::key("bandwidth_exponent", e.to_string()))?;
        }
        c.kernel = kernel;

        c.input = last("input").map(PathBuf::from);
        c.out = last("out").map(PathBuf::from);
        if let Some(f) = last("format") {
            c.format = f.parse()?;
        }
        if let Some(s) = last("solver") {
            c.solver.method = s.parse::<SolverMethod>()?;
        }
        if let Some(t) = real("tol")? {
            c.solver.tol_residual = t;
        }
        if let Some(m) = num("max_iter")? {
            c.solver.max_iter = m as usize;
        }
        c.solver.validate()?;

        let list = |v: Option<&str>| -> Vec<String> {
            v.map(|s| s.split(',').map(|t| t.trim().to_string()).filter(|t| !t.is_empty()).collect())
                .unwrap_or_default()
        };
        match mode {
            Mode::Simulate => {
                if c.design.is_none() {
                    return Err(Error::key("design", "simulate mode needs a design"));
                }
                for k in ["ycol", "rcol", "ucols", "zcols"] {
                    if last(k).is_some() {
                        return Err(Error::key(k, "only valid in estimate mode"));
                    }
                }
                if c.replicates < 2 {
                    return Err(Error::key("replicates", "need at least 2 replicates"));
                }
            }
            Mode::Estimate => {
                if c.input.is_none() {
                    return Err(Error::key("input", "estimate mode needs an input file"));
                }
                if last("replicates").is_some() {
                    return Err(Error::key("replicates", "only valid in simulate mode"));
                }
                if c.provider == ProviderKind::Oracle {
                    if last("provider").is_some() {
                        return Err(Error::key("provider", "the oracle provider needs the true law; use simulate"));
                    }
                    c.provider = ProviderKind::Nonparametric;
                }
                let y = last("ycol").ok_or_else(|| Error::key("ycol", "estimate mode needs an outcome column"))?;
                c.columns = Some(ColumnMapping::new(
                    y,
                    last("rcol").map(str::to_string),
                    list(last("ucols")),
                    list(last("zcols")),
                )?);
                if c.g_star.is_none() {
                    let q = list(last("ucols")).len();
                    c.g_star = Some(GFunction::zero(q));
                }
                if c.provider == ProviderKind::Parametric && c.basis.is_none() {
                    return Err(Error::key("basis", "the parametric provider needs a mean basis"));
                }
            }
        }
        if c.n < 2 {
            return Err(Error::key("n", "sample size must be at least 2"));
        }
        if c.bootstrap == 1 {
            return Err(Error::key("bootstrap", "need 0 (off) or at least 2 resamples"));
        }
        Ok(c)
    }
}

/// Reads an optional config file and applies `overrides` on top.
pub fn parse_config(path: Option<&Path>, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut pairs = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read config `{}`: {e}", p.display())))?;
            parse_pairs(&text)?
        }
        None => Vec::new(),
    };
    pairs.extend_from_slice(overrides);
    RunConfig::from_pairs(&pairs)
}
