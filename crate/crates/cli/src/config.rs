//! Flat `key = value` experiment configuration.
//!
//! Lines are `key = value`; `#` starts a comment. Command-line flags of the
//! same name override file values. Unknown keys are rejected so typos do not
//! silently fall back to defaults.
//!
//! Defaults are sized for a desk run: a 32x32 image, noise variance
//! `1e-3` times the mean signal power, and Laplace scales `tau_a = 7`
//! (wavelet coefficients) and `tau_r = 4` (TV groups) for intensities in
//! `[0, 1]`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use slm_core::design::DesignKind;
use slm_core::potentials::PotentialSpec;
use slm_core::varinf::{Bounding, VarianceSource};

/// Where the ground-truth image comes from.
#[derive(Debug, Clone, PartialEq)]
pub enum ImageSource {
    Phantom,
    SmoothEdges,
    File(PathBuf),
}

impl ImageSource {
    pub fn parse(s: &str) -> Self {
        match s {
            "phantom" => Self::Phantom,
            "smooth_edges" | "smooth+edges" => Self::SmoothEdges,
            path => Self::File(PathBuf::from(path)),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PriorKind {
    Laplace,
    StudentT,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Estimator {
    Map,
    PosteriorMean,
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub image: ImageSource,
    pub side: usize,
    pub image_seed: u64,
    pub prior: PriorKind,
    pub tau_a: f64,
    pub tau_r: f64,
    pub nu: f64,
    /// Explicit noise variance; otherwise `noise_fraction * mean power`.
    pub sigma2: Option<f64>,
    pub noise_fraction: f64,
    pub bounding: Bounding,
    pub variance: VarianceSource,
    pub design: DesignKind,
    /// Explicit measured columns for `reconstruct` and `infer`.
    pub columns: Option<Vec<usize>>,
    /// Low-pass columns every design starts from.
    pub init: usize,
    /// Total measured columns at the end of a design run.
    pub count: usize,
    pub rd_seeds: u64,
    pub max_outer: Option<usize>,
    pub outer_tol: Option<f64>,
    pub map_epsilon: f64,
    pub estimator: Estimator,
    /// `infer` runs both bounding types side by side.
    pub compare: bool,
    pub seed: u64,
    pub out: PathBuf,
}

pub const KEYS: &[&str] = &[
    "image",
    "side",
    "image_seed",
    "prior",
    "tau_a",
    "tau_r",
    "nu",
    "sigma2",
    "noise_fraction",
    "bounding",
    "variance",
    "design",
    "columns",
    "init",
    "count",
    "rd_seeds",
    "max_outer",
    "outer_tol",
    "map_epsilon",
    "estimator",
    "compare",
    "seed",
    "out",
];

/// Reads `key = value` pairs from a file.
pub fn read_pairs(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("reading config {}", path.display()))?;
    parse_pairs(&text).with_context(|| format!("parsing config {}", path.display()))
}

pub fn parse_pairs(text: &str) -> Result<BTreeMap<String, String>> {
    let mut map = BTreeMap::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            bail!("line {}: expected key = value", no + 1);
        };
        let k = k.trim();
        if !KEYS.contains(&k) {
            bail!("line {}: unknown key `{k}`", no + 1);
        }
        map.insert(k.to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| anyhow::anyhow!("{key} = {v}: {e}"))
}

fn positive(key: &str, v: f64) -> Result<f64> {
    if !(v > 0.0 && v.is_finite()) {
        bail!("{key} must be positive, got {v}");
    }
    Ok(v)
}

pub fn parse_bounding(v: &str) -> Result<Bounding> {
    match v {
        "A" | "a" => Ok(Bounding::TypeA),
        "B" | "b" => Ok(Bounding::TypeB),
        _ => bail!("bounding must be A or B, got `{v}`"),
    }
}

/// `exact` or `lanczos:K`; the Lanczos start vector follows `seed`.
pub fn parse_variance(v: &str, seed: u64) -> Result<VarianceSource> {
    match v.split_once(':') {
        None if v == "exact" => Ok(VarianceSource::Exact),
        Some(("lanczos", k)) => {
            let k: usize = num("variance", k)?;
            if k == 0 {
                bail!("lanczos needs k >= 1");
            }
            Ok(VarianceSource::Lanczos { k, seed })
        }
        _ => bail!("variance must be exact or lanczos:K, got `{v}`"),
    }
}

impl ExperimentConfig {
    /// Builds a config from merged pairs (file values overridden by flags).
    pub fn from_pairs(pairs: &BTreeMap<String, String>) -> Result<Self> {
        let get = |k: &str| pairs.get(k).map(String::as_str);
        let seed: u64 = get("seed")
            .map(|v| num("seed", v))
            .transpose()?
            .unwrap_or(0);
        let side: usize = get("side")
            .map(|v| num("side", v))
            .transpose()?
            .unwrap_or(32);
        if side < 4 || !side.is_power_of_two() {
            bail!("side must be a power of two >= 4, got {side}");
        }
        let image = ImageSource::parse(get("image").unwrap_or("phantom"));
        if let ImageSource::File(p) = &image {
            if !p.exists() {
                bail!("image file {} does not exist", p.display());
            }
        }
        let prior = match get("prior").unwrap_or("laplace") {
            "laplace" => PriorKind::Laplace,
            "student_t" | "studentt" => PriorKind::StudentT,
            other => bail!("prior must be laplace or student_t, got `{other}`"),
        };
        let f = |k: &str, d: f64| -> Result<f64> {
            get(k)
                .map(|v| num(k, v))
                .transpose()
                .map(|o| o.unwrap_or(d))
        };
        let columns = get("columns")
            .map(|v| {
                v.split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|s| num::<usize>("columns", s.trim()))
                    .collect::<Result<Vec<_>>>()
            })
            .transpose()?;
        if let Some(cols) = &columns {
            if let Some(bad) = cols.iter().find(|c| **c >= side) {
                bail!("column {bad} outside a grid of width {side}");
            }
        }
        let init: usize = get("init")
            .map(|v| num("init", v))
            .transpose()?
            .unwrap_or(side / 8);
        let count: usize = get("count")
            .map(|v| num("count", v))
            .transpose()?
            .unwrap_or(side / 4);
        if count > side || init > count {
            bail!("need init <= count <= side, got init {init}, count {count}, side {side}");
        }
        let cfg = Self {
            image,
            side,
            image_seed: get("image_seed")
                .map(|v| num("image_seed", v))
                .transpose()?
                .unwrap_or(seed),
            prior,
            tau_a: positive("tau_a", f("tau_a", 7.0)?)?,
            tau_r: positive("tau_r", f("tau_r", 4.0)?)?,
            nu: positive("nu", f("nu", 2.1)?)?,
            sigma2: get("sigma2")
                .map(|v| num("sigma2", v).and_then(|s| positive("sigma2", s)))
                .transpose()?,
            noise_fraction: positive("noise_fraction", f("noise_fraction", 1e-3)?)?,
            bounding: parse_bounding(get("bounding").unwrap_or("A"))?,
            variance: parse_variance(get("variance").unwrap_or("exact"), seed)?,
            design: get("design")
                .unwrap_or("op")
                .parse()
                .map_err(|e| anyhow::anyhow!("design: {e}"))?,
            columns,
            init,
            count,
            rd_seeds: get("rd_seeds")
                .map(|v| num("rd_seeds", v))
                .transpose()?
                .unwrap_or(5),
            max_outer: get("max_outer").map(|v| num("max_outer", v)).transpose()?,
            outer_tol: get("outer_tol")
                .map(|v| num("outer_tol", v).and_then(|t| positive("outer_tol", t)))
                .transpose()?,
            map_epsilon: f("map_epsilon", 1e-8)?,
            estimator: match get("estimator").unwrap_or("map") {
                "map" => Estimator::Map,
                "mean" | "posterior_mean" => Estimator::PosteriorMean,
                other => bail!("estimator must be map or mean, got `{other}`"),
            },
            compare: match get("compare").unwrap_or("false") {
                "true" | "1" | "yes" => true,
                "false" | "0" | "no" => false,
                other => bail!("compare must be true or false, got `{other}`"),
            },
            seed,
            out: PathBuf::from(get("out").unwrap_or("out")),
        };
        if cfg.map_epsilon < 0.0 {
            bail!("map_epsilon must be nonnegative");
        }
        Ok(cfg)
    }

    /// Wavelet and TV potentials.
    pub fn potentials(&self) -> Result<(PotentialSpec, PotentialSpec)> {
        let pair = match self.prior {
            PriorKind::Laplace => (
                PotentialSpec::laplace(self.tau_a)?,
                PotentialSpec::laplace(self.tau_r)?,
            ),
            PriorKind::StudentT => (
                PotentialSpec::student_t(self.nu, self.tau_a)?,
                PotentialSpec::student_t(self.nu, self.tau_r)?,
            ),
        };
        Ok(pair)
    }
}
