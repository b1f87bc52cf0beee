//! Run configuration and the flat `key = value` text format it (and the
//! domain spec) round-trips through. Unknown keys are rejected, every field
//! is written out, and floats use Rust's shortest round-trip formatting, so
//! `parse(render(config)) == config` exactly.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::model::ModelSpec;
use crate::optim::AdamWConfig;
use crate::teacher::check_alpha;

/// Parsed `key = value` file with take-or-reject semantics: every key must
/// be consumed exactly once.
pub struct KvMap {
    context: String,
    pairs: BTreeMap<String, String>,
}

impl KvMap {
    pub fn parse(text: &str, context: &str) -> Result<Self> {
        let mut pairs = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "{context}:{}: expected 'key = value', got {line:?}",
                    lineno + 1
                )));
            };
            let key = key.trim().to_string();
            if pairs.insert(key.clone(), value.trim().to_string()).is_some() {
                return Err(Error::Config(format!(
                    "{context}:{}: duplicate key {key:?}",
                    lineno + 1
                )));
            }
        }
        Ok(Self { context: context.to_string(), pairs })
    }

    pub fn take(&mut self, key: &str) -> Result<String> {
        self.pairs.remove(key).ok_or_else(|| {
            Error::Config(format!("{}: missing required key {key:?}", self.context))
        })
    }

    pub fn take_parsed<T: std::str::FromStr>(&mut self, key: &str, what: &str) -> Result<T> {
        let raw = self.take(key)?;
        raw.parse().map_err(|_| {
            Error::Config(format!("{}: key {key:?}: {raw:?} is not a valid {what}", self.context))
        })
    }

    pub fn take_bool(&mut self, key: &str) -> Result<bool> {
        match self.take(key)?.as_str() {
            "true" => Ok(true),
            "false" => Ok(false),
            other => Err(Error::Config(format!(
                "{}: key {key:?}: expected true/false, got {other:?}",
                self.context
            ))),
        }
    }

    /// Comma-separated list.
    pub fn take_list<T: std::str::FromStr>(&mut self, key: &str, what: &str) -> Result<Vec<T>> {
        let raw = self.take(key)?;
        raw.split(',')
            .map(|s| {
                s.trim().parse().map_err(|_| {
                    Error::Config(format!(
                        "{}: key {key:?}: {:?} is not a valid {what}",
                        self.context,
                        s.trim()
                    ))
                })
            })
            .collect()
    }

    /// Semicolon-separated rows of comma-separated floats; all rows must
    /// have `cols` entries.
    pub fn take_matrix(&mut self, key: &str, cols: usize) -> Result<Vec<f64>> {
        let raw = self.take(key)?;
        let mut out = Vec::new();
        for row in raw.split(';') {
            let values: Vec<f64> = row
                .split(',')
                .map(|s| {
                    s.trim().parse().map_err(|_| {
                        Error::Config(format!(
                            "{}: key {key:?}: {:?} is not a number",
                            self.context,
                            s.trim()
                        ))
                    })
                })
                .collect::<Result<_>>()?;
            if values.len() != cols {
                return Err(Error::Config(format!(
                    "{}: key {key:?}: row has {} entries, expected {cols}",
                    self.context,
                    values.len()
                )));
            }
            out.extend(values);
        }
        Ok(out)
    }

    /// Errors if any key was never taken.
    pub fn finish(self) -> Result<()> {
        if self.pairs.is_empty() {
            Ok(())
        } else {
            let unknown: Vec<&str> = self.pairs.keys().map(String::as_str).collect();
            Err(Error::Config(format!(
                "{}: unknown key(s): {}",
                self.context,
                unknown.join(", ")
            )))
        }
    }
}

pub fn join_floats(values: &[f64]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

pub fn join_matrix(values: &[f64], cols: usize) -> String {
    values.chunks(cols).map(join_floats).collect::<Vec<_>>().join(";")
}

/// Everything a two-stage run needs: model shape, optimizer settings, the
/// adaptation knobs, schedule, seed, and file locations.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub model: ModelSpec,
    pub init_scale: f64,
    pub optimizer: AdamWConfig,
    /// Teacher EMA coefficient.
    pub alpha_teacher: f64,
    /// Prototype EMA coefficient.
    pub alpha_proto: f64,
    /// Contrast-loss softmax temperature.
    pub tau: f64,
    /// Confidence-ratio softmax temperature on the prototype side.
    pub tau_c: f64,
    /// Weight of the prototype-contrast term in the total loss.
    pub lambda_pce: f64,
    /// Floor cosine weights at zero in the self-training CE (ablation: off).
    pub clamp_weights: bool,
    /// Debug mode: force every cosine weight to 1, reducing the pipeline to
    /// plain self-training when `lambda_pce = 0`.
    pub identity_bank: bool,
    pub batch_size: usize,
    pub steps_pretrain: u64,
    pub steps_adapt: u64,
    pub seed: u64,
    pub source_data: PathBuf,
    pub target_data: PathBuf,
    pub source_checkpoint: PathBuf,
    pub adapted_checkpoint: PathBuf,
    pub runlog: PathBuf,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optimizer.validate()?;
        check_alpha(self.alpha_teacher)?;
        check_alpha(self.alpha_proto)?;
        if self.model.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        for (name, t) in [("tau", self.tau), ("tau_c", self.tau_c)] {
            if t <= 0.0 || !t.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {t}")));
            }
        }
        if self.lambda_pce < 0.0 || !self.lambda_pce.is_finite() {
            return Err(Error::Config(format!("lambda_pce must be >= 0, got {}", self.lambda_pce)));
        }
        if self.init_scale <= 0.0 || !self.init_scale.is_finite() {
            return Err(Error::Config(format!("init_scale must be positive, got {}", self.init_scale)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        Ok(())
    }

    pub fn parse(text: &str, context: &str) -> Result<Self> {
        let mut kv = KvMap::parse(text, context)?;
        let config = Self {
            model: ModelSpec {
                input_dim: kv.take_parsed("input_dim", "positive integer")?,
                hidden_dims: kv.take_list("hidden_dims", "positive integer")?,
                feature_dim: kv.take_parsed("feature_dim", "positive integer")?,
                num_classes: kv.take_parsed("num_classes", "positive integer")?,
            },
            init_scale: kv.take_parsed("init_scale", "number")?,
            optimizer: AdamWConfig {
                lr: kv.take_parsed("lr", "number")?,
                beta1: kv.take_parsed("beta1", "number")?,
                beta2: kv.take_parsed("beta2", "number")?,
                weight_decay: kv.take_parsed("weight_decay", "number")?,
                epsilon: kv.take_parsed("epsilon", "number")?,
            },
            alpha_teacher: kv.take_parsed("alpha_teacher", "number")?,
            alpha_proto: kv.take_parsed("alpha_proto", "number")?,
            tau: kv.take_parsed("tau", "number")?,
            tau_c: kv.take_parsed("tau_c", "number")?,
            lambda_pce: kv.take_parsed("lambda_pce", "number")?,
            clamp_weights: kv.take_bool("clamp_weights")?,
            identity_bank: kv.take_bool("identity_bank")?,
            batch_size: kv.take_parsed("batch_size", "positive integer")?,
            steps_pretrain: kv.take_parsed("steps_pretrain", "integer")?,
            steps_adapt: kv.take_parsed("steps_adapt", "integer")?,
            seed: kv.take_parsed("seed", "integer")?,
            source_data: PathBuf::from(kv.take("source_data")?),
            target_data: PathBuf::from(kv.take("target_data")?),
            source_checkpoint: PathBuf::from(kv.take("source_checkpoint")?),
            adapted_checkpoint: PathBuf::from(kv.take("adapted_checkpoint")?),
            runlog: PathBuf::from(kv.take("runlog")?),
        };
        kv.finish()?;
        config.validate()?;
        Ok(config)
    }

    pub fn render(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# prosfda run configuration");
        let _ = writeln!(s, "input_dim = {}", self.model.input_dim);
        let dims: Vec<String> = self.model.hidden_dims.iter().map(|d| d.to_string()).collect();
        let _ = writeln!(s, "hidden_dims = {}", dims.join(","));
        let _ = writeln!(s, "feature_dim = {}", self.model.feature_dim);
        let _ = writeln!(s, "num_classes = {}", self.model.num_classes);
        let _ = writeln!(s, "init_scale = {}", self.init_scale);
        let _ = writeln!(s, "lr = {}", self.optimizer.lr);
        let _ = writeln!(s, "beta1 = {}", self.optimizer.beta1);
        let _ = writeln!(s, "beta2 = {}", self.optimizer.beta2);
        let _ = writeln!(s, "weight_decay = {}", self.optimizer.weight_decay);
        let _ = writeln!(s, "epsilon = {}", self.optimizer.epsilon);
        let _ = writeln!(s, "alpha_teacher = {}", self.alpha_teacher);
        let _ = writeln!(s, "alpha_proto = {}", self.alpha_proto);
        let _ = writeln!(s, "tau = {}", self.tau);
        let _ = writeln!(s, "tau_c = {}", self.tau_c);
        let _ = writeln!(s, "lambda_pce = {}", self.lambda_pce);
        let _ = writeln!(s, "clamp_weights = {}", self.clamp_weights);
        let _ = writeln!(s, "identity_bank = {}", self.identity_bank);
        let _ = writeln!(s, "batch_size = {}", self.batch_size);
        let _ = writeln!(s, "steps_pretrain = {}", self.steps_pretrain);
        let _ = writeln!(s, "steps_adapt = {}", self.steps_adapt);
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "source_data = {}", self.source_data.display());
        let _ = writeln!(s, "target_data = {}", self.target_data.display());
        let _ = writeln!(s, "source_checkpoint = {}", self.source_checkpoint.display());
        let _ = writeln!(s, "adapted_checkpoint = {}", self.adapted_checkpoint.display());
        let _ = writeln!(s, "runlog = {}", self.runlog.display());
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render())?;
        Ok(())
    }

    /// The pinned desk-scale benchmark configuration, with data and output
    /// files placed under `dir`.
    ///
    /// Two knobs deviate from the conventional defaults, both tuned on the
    /// benchmark: the learning rate is raised to 1e-2 (at ~700 parameters
    /// the AdamW update magnitude is roughly `lr` per step, so 6e-5 would
    /// barely move the model within the step budget), and `tau_c` is
    /// sharpened to 0.02 so prototype confidence can actually win label
    /// arbitrations against a CE-trained teacher whose top1/top2 ratios are
    /// routinely in the hundreds.
    pub fn default_benchmark(dir: &Path) -> Self {
        Self {
            model: ModelSpec {
                input_dim: 8,
                hidden_dims: vec![16, 16],
                feature_dim: 16,
                num_classes: 5,
            },
            init_scale: 1.0,
            optimizer: AdamWConfig { lr: 1e-2, ..Default::default() },
            alpha_teacher: 0.99,
            alpha_proto: 0.99,
            tau: 0.1,
            tau_c: 0.02,
            lambda_pce: 1.0,
            clamp_weights: true,
            identity_bank: false,
            batch_size: 4,
            steps_pretrain: 600,
            steps_adapt: 800,
            seed: 42,
            source_data: dir.join("bench.src.bin"),
            target_data: dir.join("bench.tgt.bin"),
            source_checkpoint: dir.join("source.ckpt"),
            adapted_checkpoint: dir.join("adapted.ckpt"),
            runlog: dir.join("adapt.runlog"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_losslessly() {
        let config = RunConfig::default_benchmark(Path::new("out"));
        let text = config.render();
        let parsed = RunConfig::parse(&text, "test").unwrap();
        assert_eq!(config, parsed);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let mut text = RunConfig::default_benchmark(Path::new("out")).render();
        text.push_str("mystery_knob = 3\n");
        let err = RunConfig::parse(&text, "test").unwrap_err();
        assert!(err.to_string().contains("mystery_knob"), "{err}");
    }

    #[test]
    fn missing_and_duplicate_keys_are_rejected() {
        let config = RunConfig::default_benchmark(Path::new("out"));
        let text = config.render();
        let without: String =
            text.lines().filter(|l| !l.starts_with("tau ")).collect::<Vec<_>>().join("\n");
        assert!(RunConfig::parse(&without, "test").is_err());
        let mut doubled = text.clone();
        doubled.push_str("tau = 0.2\n");
        assert!(RunConfig::parse(&doubled, "test").is_err());
    }

    #[test]
    fn bad_values_are_rejected() {
        let base = RunConfig::default_benchmark(Path::new("out"));
        for (key, value) in [
            ("tau", "0"),
            ("alpha_teacher", "1.5"),
            ("lambda_pce", "-1"),
            ("batch_size", "0"),
            ("feature_dim", "7"), // != last hidden width
            ("clamp_weights", "yes"),
        ] {
            let text: String = base
                .render()
                .lines()
                .map(|l| {
                    if l.starts_with(&format!("{key} ")) {
                        format!("{key} = {value}")
                    } else {
                        l.to_string()
                    }
                })
                .collect::<Vec<_>>()
                .join("\n");
            assert!(RunConfig::parse(&text, "test").is_err(), "{key}={value} should fail");
        }
    }

    #[test]
    fn extreme_floats_round_trip() {
        let mut config = RunConfig::default_benchmark(Path::new("out"));
        config.optimizer.lr = 6e-5;
        config.optimizer.epsilon = 1.0000000000000002e-8;
        config.tau = 0.1 + 1e-16;
        let parsed = RunConfig::parse(&config.render(), "test").unwrap();
        assert_eq!(config.optimizer.lr.to_bits(), parsed.optimizer.lr.to_bits());
        assert_eq!(config.optimizer.epsilon.to_bits(), parsed.optimizer.epsilon.to_bits());
        assert_eq!(config.tau.to_bits(), parsed.tau.to_bits());
    }
}
