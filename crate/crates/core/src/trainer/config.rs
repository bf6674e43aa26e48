use std::path::Path;

use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::scalar::Dtype;

/// Element precision of a training run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl Precision {
    pub fn dtype(self) -> Dtype {
        match self {
            Precision::F32 => Dtype::F32,
            Precision::F64 => Dtype::F64,
        }
    }
}

impl std::str::FromStr for Precision {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!(
                "unknown precision {other:?}; expected f32 or f64"
            ))),
        }
    }
}

/// Training hyperparameters. Epoch defaults are the desk-scale 30/60; the
/// paper-scale 50/150 stay selectable through flags or the config file.
#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub lr0: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub poly_power: f64,
    pub teacher_epochs: usize,
    pub student_epochs: usize,
    pub loss: LossConfig,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 8,
            lr0: 1e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            poly_power: 0.9,
            teacher_epochs: 30,
            student_epochs: 60,
            loss: LossConfig::default(),
            seed: 0,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.lr0 <= 0.0 {
            return Err(Error::Config(format!("lr0 must be positive, got {}", self.lr0)));
        }
        if self.poly_power <= 0.0 {
            return Err(Error::Config(format!(
                "poly_power must be positive, got {}",
                self.poly_power
            )));
        }
        if self.teacher_epochs == 0 || self.student_epochs == 0 {
            return Err(Error::Config("epoch counts must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("adam betas must be in [0, 1)".into()));
        }
        if self.adam_eps <= 0.0 {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        self.loss.validate()
    }

    /// Applies one `key=value` setting; unknown keys are rejected.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("invalid value {value:?} for key {key}")))
        }
        match key {
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr0" => self.lr0 = parse(key, value)?,
            "adam_beta1" => self.adam_beta1 = parse(key, value)?,
            "adam_beta2" => self.adam_beta2 = parse(key, value)?,
            "adam_eps" => self.adam_eps = parse(key, value)?,
            "poly_power" => self.poly_power = parse(key, value)?,
            "teacher_epochs" => self.teacher_epochs = parse(key, value)?,
            "student_epochs" => self.student_epochs = parse(key, value)?,
            "alpha" => self.loss.alpha = parse(key, value)?,
            "gamma" => self.loss.gamma = parse(key, value)?,
            "lambda" => self.loss.lambda = parse(key, value)?,
            "temperature" => self.loss.temperature = parse(key, value)?,
            "focal_variant" => self.loss.focal_variant = value.parse()?,
            "seed" => self.seed = parse(key, value)?,
            "precision" => self.precision = value.parse()?,
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    /// Loads `key=value` lines over the current values. `#` starts a
    /// comment; blank lines are skipped.
    pub fn load_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (idx, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(at) => &raw[..at],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "{}:{}: expected key=value, got {line:?}",
                    path.display(),
                    idx + 1
                )));
            };
            self.apply(key.trim(), value.trim())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::FocalVariant;

    #[test]
    fn defaults_are_valid() {
        TrainConfig::default().validate().unwrap();
    }

    #[test]
    fn config_file_overrides_and_rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(
            &path,
            "# run settings\nlambda = 9\ntemperature=3\nfocal_variant = literal\nseed=7\n",
        )
        .unwrap();
        let mut cfg = TrainConfig::default();
        cfg.load_file(&path).unwrap();
        assert_eq!(cfg.loss.lambda, 9.0);
        assert_eq!(cfg.loss.temperature, 3.0);
        assert_eq!(cfg.loss.focal_variant, FocalVariant::Literal);
        assert_eq!(cfg.seed, 7);

        std::fs::write(&path, "warp_speed=9\n").unwrap();
        let err = cfg.load_file(&path).unwrap_err().to_string();
        assert!(err.contains("warp_speed"), "{err}");
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.apply("lr0", "fast").is_err());
        cfg.apply("lr0", "-1").unwrap();
        assert!(cfg.validate().is_err());
    }
}
