//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! errors so that typos fail loudly.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use backfill_core::reversal::LawCovSource;

use crate::error::{io_err, CliError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    Optimal,
    OptimalConditioned,
    InterpRelaxed,
    Flat,
    Linear,
    Polynomial,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Optimal,
        Method::OptimalConditioned,
        Method::InterpRelaxed,
        Method::Flat,
        Method::Linear,
        Method::Polynomial,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Optimal => "optimal",
            Method::OptimalConditioned => "optimal-conditioned",
            Method::InterpRelaxed => "interp-relaxed",
            Method::Flat => "flat",
            Method::Linear => "linear",
            Method::Polynomial => "polynomial",
        }
    }

    /// Methods that simulate an ensemble rather than a single curve.
    pub fn is_stochastic(self) -> bool {
        matches!(
            self,
            Method::Optimal | Method::OptimalConditioned | Method::InterpRelaxed
        )
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Method::ALL.iter().map(|m| m.name()).collect();
                CliError::Invalid(format!("unknown method {s:?}; expected one of {}", names.join(", ")))
            })
    }
}

/// Everything one invocation needs. See the README for the key list.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// OU slope `a` in `dX = a (X - mean_level) dt + c dW`.
    pub a: f64,
    pub c: f64,
    pub mean_level: f64,
    /// Fit `a`, `c` and the level from the dense window instead.
    pub calibrate: bool,
    /// Noise scale of the asset's own observation channel.
    pub kappa: f64,
    pub intensity: f64,
    pub liquidity_time: f64,
    pub observer_time: f64,
    /// Steps of the simulation grid over `[0, observer_time]`.
    pub n_steps: usize,
    pub n_paths: usize,
    pub method: Method,
    pub out_dir: PathBuf,
    /// Where backfill, filter and evaluate read their inputs; defaults to
    /// `out_dir`.
    pub input_dir: Option<PathBuf>,
    pub benchmarks: usize,
    pub benchmark_noise: f64,
    pub poly_degree: usize,
    pub eps_hit: f64,
    pub law_cov_source: LawCovSource,
    pub write_paths: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            a: -1.0,
            c: 1.0,
            mean_level: 0.0,
            calibrate: false,
            kappa: 0.01,
            intensity: 3.0,
            liquidity_time: 1.0,
            observer_time: 1.5,
            n_steps: 1500,
            n_paths: 500,
            method: Method::OptimalConditioned,
            out_dir: PathBuf::from("out"),
            input_dir: None,
            benchmarks: 0,
            benchmark_noise: 0.5,
            poly_degree: 3,
            eps_hit: 1e-8,
            law_cov_source: LawCovSource::FilterMeanLaw,
            write_paths: false,
        }
    }
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => Err(format!("expected true or false, got {v:?}")),
    }
}

fn parse_num<T: FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?}"))
}

fn law_source_name(s: LawCovSource) -> &'static str {
    match s {
        LawCovSource::FilterCovariance => "filter-covariance",
        LawCovSource::FilterMeanLaw => "mean-law",
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let err = |message: String| CliError::Config { line: n + 1, message };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            cfg.set(key.trim(), value.trim()).map_err(err)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(io_err(path))?;
        Self::parse(&text)
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        match key {
            "seed" => self.seed = parse_num(v)?,
            "a" => self.a = parse_num(v)?,
            "c" => self.c = parse_num(v)?,
            "mean_level" => self.mean_level = parse_num(v)?,
            "calibrate" => self.calibrate = parse_bool(v)?,
            "kappa" => self.kappa = parse_num(v)?,
            "intensity" => self.intensity = parse_num(v)?,
            "liquidity_time" => self.liquidity_time = parse_num(v)?,
            "observer_time" => self.observer_time = parse_num(v)?,
            "n_steps" => self.n_steps = parse_num(v)?,
            "n_paths" => self.n_paths = parse_num(v)?,
            "method" => self.method = v.parse().map_err(|e: CliError| e.to_string())?,
            "out_dir" => self.out_dir = PathBuf::from(v),
            "input_dir" => self.input_dir = Some(PathBuf::from(v)),
            "benchmarks" => self.benchmarks = parse_num(v)?,
            "benchmark_noise" => self.benchmark_noise = parse_num(v)?,
            "poly_degree" => self.poly_degree = parse_num(v)?,
            "eps_hit" => self.eps_hit = parse_num(v)?,
            "law_cov_source" => {
                self.law_cov_source = match v {
                    "filter-covariance" => LawCovSource::FilterCovariance,
                    "mean-law" => LawCovSource::FilterMeanLaw,
                    _ => return Err(format!("unknown law_cov_source {v:?}")),
                }
            }
            "write_paths" => self.write_paths = parse_bool(v)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Render as a config file that parses back to the same value.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut put = |k: &str, v: String| s.push_str(&format!("{k} = {v}\n"));
        put("seed", self.seed.to_string());
        put("a", self.a.to_string());
        put("c", self.c.to_string());
        put("mean_level", self.mean_level.to_string());
        put("calibrate", self.calibrate.to_string());
        put("kappa", self.kappa.to_string());
        put("intensity", self.intensity.to_string());
        put("liquidity_time", self.liquidity_time.to_string());
        put("observer_time", self.observer_time.to_string());
        put("n_steps", self.n_steps.to_string());
        put("n_paths", self.n_paths.to_string());
        put("method", self.method.to_string());
        put("out_dir", self.out_dir.display().to_string());
        if let Some(dir) = &self.input_dir {
            put("input_dir", dir.display().to_string());
        }
        put("benchmarks", self.benchmarks.to_string());
        put("benchmark_noise", self.benchmark_noise.to_string());
        put("poly_degree", self.poly_degree.to_string());
        put("eps_hit", self.eps_hit.to_string());
        put("law_cov_source", law_source_name(self.law_cov_source).to_string());
        put("write_paths", self.write_paths.to_string());
        s
    }

    pub fn input_dir(&self) -> &Path {
        self.input_dir.as_deref().unwrap_or(&self.out_dir)
    }

    /// Checks needed by every command that reads inputs from files.
    pub fn validate_run(&self) -> Result<()> {
        let bad = |m: &str| Err(CliError::Invalid(m.to_string()));
        if self.n_paths < 1 {
            return bad("n_paths must be at least 1");
        }
        if !(self.c > 0.0 && self.c.is_finite()) {
            return bad("c must be positive");
        }
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return bad("kappa must be positive");
        }
        if !self.a.is_finite() || !self.mean_level.is_finite() {
            return bad("a and mean_level must be finite");
        }
        if self.benchmarks > 0 && !(self.benchmark_noise > 0.0) {
            return bad("benchmark_noise must be positive");
        }
        if !(self.eps_hit > 0.0) {
            return bad("eps_hit must be positive");
        }
        Ok(())
    }

    /// Full check, including the simulation grid and censoring.
    pub fn validate(&self) -> Result<()> {
        self.validate_run()?;
        let bad = |m: &str| Err(CliError::Invalid(m.to_string()));
        if self.n_steps < 2 {
            return bad("n_steps must be at least 2");
        }
        backfill_core::censor::CensorSpec::new(
            self.intensity,
            self.liquidity_time,
            self.observer_time,
        )?;
        let steps_to_t = self.liquidity_time / self.observer_time * self.n_steps as f64;
        if (steps_to_t - steps_to_t.round()).abs() > 1e-6 {
            return bad("liquidity_time must fall on the grid (n_steps * T / T0 integral)");
        }
        Ok(())
    }
}
