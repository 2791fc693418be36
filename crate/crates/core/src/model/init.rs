//! Weight initialization schemes and the distance-from-origin analysis.
//!
//! The per-component distance of a freshly initialized weight `w` from the
//! zero matrix is `E[(w - 0)^2] = Var[w]`. Summing it over the `n^2`
//! components of a square layer gives the total distance a residual layer
//! must travel to reach its identity mapping (`W = 0`); for `O(1/n)`
//! variance schemes that total grows as `O(n)`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::SeededRng;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "scheme", rename_all = "snake_case")]
pub enum InitScheme {
    /// `U(-sqrt(6/n), sqrt(6/n))`, variance `2/n`.
    HeUniform,
    /// `U(-sqrt(6/(2n)), sqrt(6/(2n)))` for a square layer, variance `1/n`.
    GlorotUniform,
    /// `N(0, 2/n)`.
    HeNormal,
    /// Fixed-width uniform `U(-limit, limit)`, independent of `n`.
    Uniform { limit: f64 },
    Zero,
}

impl InitScheme {
    pub fn name(&self) -> String {
        match self {
            InitScheme::HeUniform => "he_uniform".into(),
            InitScheme::GlorotUniform => "glorot_uniform".into(),
            InitScheme::HeNormal => "he_normal".into(),
            InitScheme::Uniform { limit } => format!("uniform:{limit}"),
            InitScheme::Zero => "zero".into(),
        }
    }

    /// Analytic per-component variance for an `n x n` layer.
    pub fn variance(&self, n: usize) -> f64 {
        let n = n as f64;
        match *self {
            InitScheme::HeUniform | InitScheme::HeNormal => 2.0 / n,
            InitScheme::GlorotUniform => 1.0 / n,
            InitScheme::Uniform { limit } => limit * limit / 3.0,
            InitScheme::Zero => 0.0,
        }
    }

    pub fn sample(&self, rng: &mut SeededRng, n: usize) -> f64 {
        let nf = n as f64;
        match *self {
            InitScheme::HeUniform => {
                let a = (6.0 / nf).sqrt();
                rng.uniform(-a, a)
            }
            InitScheme::GlorotUniform => {
                let a = (3.0 / nf).sqrt();
                rng.uniform(-a, a)
            }
            InitScheme::HeNormal => (2.0 / nf).sqrt() * rng.normal(),
            InitScheme::Uniform { limit } if limit > 0.0 => rng.uniform(-limit, limit),
            InitScheme::Uniform { .. } | InitScheme::Zero => 0.0,
        }
    }
}

impl fmt::Display for InitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

impl FromStr for InitScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "he_uniform" | "he" => Ok(InitScheme::HeUniform),
            "glorot_uniform" | "glorot" => Ok(InitScheme::GlorotUniform),
            "he_normal" => Ok(InitScheme::HeNormal),
            "zero" => Ok(InitScheme::Zero),
            _ => {
                if let Some(limit) = s.strip_prefix("uniform:") {
                    let limit: f64 = limit
                        .parse()
                        .map_err(|_| Error::InvalidArgument(format!("bad uniform limit in `{s}`")))?;
                    if limit < 0.0 || !limit.is_finite() {
                        return Err(Error::InvalidArgument(format!("uniform limit must be >= 0, got {limit}")));
                    }
                    Ok(InitScheme::Uniform { limit })
                } else {
                    Err(Error::InvalidArgument(format!("unknown init scheme `{s}`")))
                }
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InitDistanceReport {
    pub scheme: String,
    pub n: usize,
    pub trials: usize,
    pub analytic_variance: f64,
    /// Empirical mean of `w^2` over all components and trials.
    pub per_component_expected_sq_distance: f64,
    /// Component-wise distances summed over the `n x n` tensor, averaged over trials.
    pub total_abs_distance: f64,
}

/// Samples `trials` square `n x n` weight tensors and measures their distance from the origin.
pub fn init_distance_report(scheme: InitScheme, n: usize, trials: usize, seed: u64) -> Result<InitDistanceReport> {
    if trials < 1000 {
        return Err(Error::InvalidArgument(format!("need at least 1000 trials, got {trials}")));
    }
    if n == 0 {
        return Err(Error::InvalidArgument("layer width must be positive".into()));
    }
    let mut rng = SeededRng::new(seed);
    let mut total = 0.0;
    for _ in 0..trials {
        let mut trial = 0.0;
        for _ in 0..n * n {
            let w = scheme.sample(&mut rng, n);
            trial += w * w;
        }
        total += trial;
    }
    let total_abs_distance = total / trials as f64;
    Ok(InitDistanceReport {
        scheme: scheme.name(),
        n,
        trials,
        analytic_variance: scheme.variance(n),
        per_component_expected_sq_distance: total_abs_distance / (n * n) as f64,
        total_abs_distance,
    })
}
