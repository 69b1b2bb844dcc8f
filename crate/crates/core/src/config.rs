//! Architecture hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Mse,
    MsSsim,
}

impl Metric {
    pub fn code(self) -> u8 {
        match self {
            Metric::Mse => 0,
            Metric::MsSsim => 1,
        }
    }

    pub fn from_code(c: u8) -> Result<Self> {
        match c {
            0 => Ok(Metric::Mse),
            1 => Ok(Metric::MsSsim),
            _ => Err(Error::Format(format!("unknown metric code {c}"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Metric::Mse => "mse",
            Metric::MsSsim => "ms_ssim",
        }
    }
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mse" => Ok(Metric::Mse),
            "ms_ssim" | "ms-ssim" | "msssim" => Ok(Metric::MsSsim),
            _ => Err(Error::Config(format!("unknown metric {s:?} (expected mse or ms_ssim)"))),
        }
    }
}

const MSE_LAMBDAS: [f64; 7] = [0.0016, 0.0032, 0.0075, 0.015, 0.03, 0.045, 0.06];
const MS_SSIM_LAMBDAS: [f64; 4] = [12.0, 40.0, 80.0, 120.0];

/// Rate-distortion trade-offs with one trained model each, ascending.
pub fn lambda_presets(metric: Metric) -> &'static [f64] {
    match metric {
        Metric::Mse => &MSE_LAMBDAS,
        Metric::MsSsim => &MS_SSIM_LAMBDAS,
    }
}

/// Position of `lambda` in the preset list of `metric`.
pub fn lambda_index(metric: Metric, lambda: f64) -> Option<u8> {
    lambda_presets(metric)
        .iter()
        .position(|&l| (l - lambda).abs() <= 1e-12 * l)
        .map(|i| i as u8)
}

/// Supported slice counts.
pub const SUPPORTED_GROUPS: [usize; 2] = [5, 10];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Internal filter count.
    pub n: usize,
    /// Latent channels per branch.
    pub m: usize,
    /// Number of channel slices.
    pub groups: usize,
    /// Condition the second latent on the first.
    pub use_ci: bool,
    /// Two encoder branches; otherwise a single 3x3 branch.
    pub use_tb: bool,
    pub hyper_channels: usize,
    pub lambda: f64,
    pub metric: Metric,
}

impl ModelConfig {
    /// Full-size model (N=128, M=320, five slices).
    pub fn full(lambda: f64, metric: Metric) -> Self {
        Self {
            n: 128,
            m: 320,
            groups: 5,
            use_ci: true,
            use_tb: true,
            hyper_channels: 128,
            lambda,
            metric,
        }
    }

    /// Desk-scale model (N=32, M=40, five slices).
    pub fn desk(lambda: f64) -> Self {
        Self {
            n: 32,
            m: 40,
            groups: 5,
            use_ci: true,
            use_tb: true,
            hyper_channels: 32,
            lambda,
            metric: Metric::Mse,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.m == 0 || self.hyper_channels == 0 {
            return Err(Error::Config("n, m and hyper_channels must be positive".into()));
        }
        if !SUPPORTED_GROUPS.contains(&self.groups) {
            return Err(Error::Config(format!("groups must be 5 or 10, got {}", self.groups)));
        }
        if !self.m.is_multiple_of(self.groups) {
            return Err(Error::Config(format!(
                "m = {} is not divisible into {} slices",
                self.m, self.groups
            )));
        }
        if self.use_ci && !self.use_tb {
            return Err(Error::Config("conditional information requires two branches".into()));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda must be positive, got {}", self.lambda)));
        }
        if self.m > u16::MAX as usize || self.n > u16::MAX as usize || self.hyper_channels > u16::MAX as usize {
            return Err(Error::Config("channel counts must fit in 16 bits".into()));
        }
        Ok(())
    }

    /// Channels entering the synthesis and hyper-analysis transforms.
    pub fn latent_channels(&self) -> usize {
        if self.use_tb {
            2 * self.m
        } else {
            self.m
        }
    }

    /// Replaces the fields named in a JSON object, e.g. `{"n": 64, "m": 80}`.
    /// Unknown fields are rejected and the result is validated.
    pub fn with_overrides(&self, json: &str) -> Result<Self> {
        let patch: serde_json::Value = serde_json::from_str(json)?;
        let serde_json::Value::Object(patch) = patch else {
            return Err(Error::Config("config overrides must be a JSON object".into()));
        };
        let mut base = serde_json::to_value(self)?;
        let obj = base.as_object_mut().expect("config serializes to an object");
        for (k, v) in patch {
            if !obj.contains_key(&k) {
                return Err(Error::Config(format!("unknown config field {k:?}")));
            }
            obj.insert(k, v);
        }
        let c: ModelConfig = serde_json::from_value(base).map_err(|e| Error::Config(format!("config overrides: {e}")))?;
        c.validate()?;
        Ok(c)
    }

    /// Channels of the hyper-decoder output shared by both entropy stages.
    pub fn context_channels(&self) -> usize {
        2 * self.m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn validation_rules() {
        assert!(ModelConfig::desk(0.015).validate().is_ok());
        assert!(ModelConfig::full(0.015, Metric::Mse).validate().is_ok());
        let mut c = ModelConfig::desk(0.015);
        c.groups = 4;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk(0.015);
        c.m = 42;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::desk(0.015);
        c.use_tb = false;
        assert!(c.validate().is_err());
        c.use_ci = false;
        assert!(c.validate().is_ok());
        assert!(ModelConfig::desk(0.0).validate().is_err());
        assert!(ModelConfig::desk(-1.0).validate().is_err());
    }

    #[test]
    fn presets() {
        let mse = lambda_presets(Metric::Mse);
        assert_eq!(mse, &[0.0016, 0.0032, 0.0075, 0.015, 0.03, 0.045, 0.06]);
        assert_eq!(lambda_presets(Metric::MsSsim), &[12.0, 40.0, 80.0, 120.0]);
        for m in [Metric::Mse, Metric::MsSsim] {
            assert!(lambda_presets(m).windows(2).all(|w| w[0] < w[1]));
        }
        assert_eq!(lambda_index(Metric::Mse, 0.015), Some(3));
        assert_eq!(lambda_index(Metric::Mse, 0.02), None);
        assert_eq!(lambda_index(Metric::MsSsim, 120.0), Some(3));
    }

    #[test]
    fn json_round_trip_and_unknown_fields() {
        let c = ModelConfig::desk(0.03);
        let s = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<ModelConfig>(&s).unwrap(), c);
        assert!(s.contains("\"metric\":\"mse\""));
        assert!(serde_json::from_str::<ModelConfig>(r#"{"n":1}"#).is_err());
    }

    #[test]
    fn overrides() {
        let c = ModelConfig::full(0.015, Metric::Mse).with_overrides(r#"{"n": 32, "m": 40, "hyper_channels": 32}"#).unwrap();
        assert_eq!((c.n, c.m, c.hyper_channels, c.groups), (32, 40, 32, 5));
        let base = ModelConfig::desk(0.015);
        assert!(matches!(base.with_overrides(r#"{"depth": 3}"#), Err(Error::Config(_))));
        assert!(matches!(base.with_overrides(r#"{"groups": 3}"#), Err(Error::Config(_))));
        assert!(matches!(base.with_overrides("[1]"), Err(Error::Config(_))));
        assert!(base.with_overrides("{").is_err());
    }
}
