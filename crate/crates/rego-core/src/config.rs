//! Plain-text run configuration: `section.key = value` lines, a canonical
//! rendering, and a stable hash of the effective settings.
//!
//! Unknown and duplicated keys are hard errors so a typo cannot silently run
//! the defaults. Every key is optional; the canonical rendering always lists
//! the complete effective configuration, which makes it the manifest format
//! and the input to the config hash.

use std::collections::BTreeSet;

use crate::data::SyntheticTaskSpec;
use crate::error::{Error, Result};
use crate::method::{Hyperparams, MethodSpec};
use crate::metrics::EerMode;
use crate::mlp::{Activation, OptimizerKind};
use crate::region::{DecayConvention, PercentileScope};
use crate::surgery::BlendConfig;

/// Everything one run needs: the method, the synthetic data recipe, and the
/// run-level switches. One seed drives both data generation and training.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub method: MethodSpec,
    pub data: SyntheticTaskSpec,
    pub seed: u64,
    /// Also evaluate every intermediate checkpoint on every task.
    pub eval_matrix: bool,
    pub eer_mode: EerMode,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            method: MethodSpec::new("rego", Hyperparams::default())
                .expect("default method spec is valid"),
            data: SyntheticTaskSpec::default(),
            seed: 0,
            eval_matrix: false,
            eer_mode: EerMode::ThresholdSweep,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("bad value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::config(format!(
            "bad value {value:?} for {key}; expected true or false"
        ))),
    }
}

fn parse_labels(key: &str, value: &str) -> Result<Vec<u8>> {
    value
        .split(',')
        .map(|v| parse_num(key, v.trim()))
        .collect()
}

fn render_labels(labels: &[u8]) -> String {
    labels
        .iter()
        .map(u8::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    /// Parses the key/value text into a validated configuration.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let defaults = RunConfig::default();
        let mut method_name = defaults.method.name.clone();
        let mut p = defaults.method.params.clone();
        let mut data = defaults.data.clone();
        let mut seed = defaults.seed;
        let mut eval_matrix = defaults.eval_matrix;
        let mut eer_mode = defaults.eer_mode;
        let mut stable = p.blend.stable_labels().to_vec();
        let mut diverse = p.blend.diverse_labels().to_vec();

        let mut seen = BTreeSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected key = value", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::config(format!(
                    "line {}: duplicate key {key}",
                    lineno + 1
                )));
            }
            match key {
                "method.name" => method_name = value.to_string(),
                "method.alpha" => p.alpha = parse_num(key, value)?,
                "method.gamma" => p.gamma = parse_num(key, value)?,
                "method.learning_rate" => p.learning_rate = parse_num(key, value)?,
                "method.batch_size" => p.batch_size = parse_num(key, value)?,
                "method.epochs" => p.epochs = parse_num(key, value)?,
                "method.ewc_lambda" => p.ewc_lambda = parse_num(key, value)?,
                "method.optimizer" => {
                    p.optimizer = match value {
                        "adam" => OptimizerKind::Adam,
                        "sgd" => OptimizerKind::Sgd,
                        _ => {
                            return Err(Error::config(format!(
                                "bad value {value:?} for {key}; expected adam or sgd"
                            )))
                        }
                    }
                }
                "method.scope" => {
                    p.scope = match value {
                        "per-block" => PercentileScope::PerBlock,
                        "global" => PercentileScope::Global,
                        _ => {
                            return Err(Error::config(format!(
                                "bad value {value:?} for {key}; expected per-block or global"
                            )))
                        }
                    }
                }
                "method.decay" => {
                    p.decay = match value {
                        "age" => DecayConvention::AgeBased,
                        "index" => DecayConvention::IndexBased,
                        _ => {
                            return Err(Error::config(format!(
                                "bad value {value:?} for {key}; expected age or index"
                            )))
                        }
                    }
                }
                "method.decayed_reference" => p.decayed_reference = parse_bool(key, value)?,
                "method.stable_labels" => stable = parse_labels(key, value)?,
                "method.diverse_labels" => diverse = parse_labels(key, value)?,
                "model.activation" => {
                    p.activation = match value {
                        "relu" => Activation::Relu,
                        "tanh" => Activation::Tanh,
                        _ => {
                            return Err(Error::config(format!(
                                "bad value {value:?} for {key}; expected relu or tanh"
                            )))
                        }
                    }
                }
                "model.hidden" => {
                    p.hidden = value
                        .split(',')
                        .map(|v| parse_num(key, v.trim()))
                        .collect::<Result<_>>()?
                }
                "data.tasks" => data.tasks = parse_num(key, value)?,
                "data.dim" => data.dim = parse_num(key, value)?,
                "data.train_n" => data.train_n = parse_num(key, value)?,
                "data.test_n" => data.test_n = parse_num(key, value)?,
                "data.fake_clusters" => data.fake_clusters = parse_num(key, value)?,
                "data.drift" => data.drift = parse_num(key, value)?,
                "data.real_drift" => data.real_drift = parse_num(key, value)?,
                "data.real_fraction" => data.real_fraction = parse_num(key, value)?,
                "data.real_scale" => data.real_scale = parse_num(key, value)?,
                "data.fake_scale" => data.fake_scale = parse_num(key, value)?,
                "data.cluster_radius" => data.cluster_radius = parse_num(key, value)?,
                "run.seed" => seed = parse_num(key, value)?,
                "run.eval_matrix" => eval_matrix = parse_bool(key, value)?,
                "run.eer" => {
                    eer_mode = match value {
                        "sweep" => EerMode::ThresholdSweep,
                        "hull" => EerMode::RocConvexHull,
                        _ => {
                            return Err(Error::config(format!(
                                "bad value {value:?} for {key}; expected sweep or hull"
                            )))
                        }
                    }
                }
                _ => {
                    return Err(Error::config(format!(
                        "line {}: unknown key {key}",
                        lineno + 1
                    )))
                }
            }
        }
        p.blend = BlendConfig::new(stable, diverse)?;
        let config = RunConfig {
            method: MethodSpec::new(&method_name, p)?,
            data,
            seed,
            eval_matrix,
            eer_mode,
        };
        Ok(config)
    }

    pub fn parse_file(path: &std::path::Path) -> Result<RunConfig> {
        RunConfig::parse(&std::fs::read_to_string(path)?)
    }

    /// The data recipe with the run seed applied; the runner never reads
    /// `data.seed` directly.
    pub fn task_spec(&self) -> SyntheticTaskSpec {
        SyntheticTaskSpec {
            seed: self.seed,
            ..self.data.clone()
        }
    }

    /// Complete effective configuration in a fixed key order. Parsing this
    /// text reproduces the configuration; hashing it identifies the run.
    pub fn to_canonical_string(&self) -> String {
        let p = &self.method.params;
        let mut s = String::new();
        let mut line = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        line("method.name", self.method.name.clone());
        line("method.alpha", p.alpha.to_string());
        line("method.gamma", p.gamma.to_string());
        line("method.learning_rate", p.learning_rate.to_string());
        line("method.batch_size", p.batch_size.to_string());
        line("method.epochs", p.epochs.to_string());
        line("method.ewc_lambda", p.ewc_lambda.to_string());
        line(
            "method.optimizer",
            match p.optimizer {
                OptimizerKind::Adam => "adam",
                OptimizerKind::Sgd => "sgd",
            }
            .to_string(),
        );
        line(
            "method.scope",
            match p.scope {
                PercentileScope::PerBlock => "per-block",
                PercentileScope::Global => "global",
            }
            .to_string(),
        );
        line(
            "method.decay",
            match p.decay {
                DecayConvention::AgeBased => "age",
                DecayConvention::IndexBased => "index",
            }
            .to_string(),
        );
        line(
            "method.decayed_reference",
            p.decayed_reference.to_string(),
        );
        line("method.stable_labels", render_labels(p.blend.stable_labels()));
        line(
            "method.diverse_labels",
            render_labels(p.blend.diverse_labels()),
        );
        line(
            "model.activation",
            match p.activation {
                Activation::Relu => "relu",
                Activation::Tanh => "tanh",
            }
            .to_string(),
        );
        line(
            "model.hidden",
            p.hidden
                .iter()
                .map(usize::to_string)
                .collect::<Vec<_>>()
                .join(","),
        );
        line("data.tasks", self.data.tasks.to_string());
        line("data.dim", self.data.dim.to_string());
        line("data.train_n", self.data.train_n.to_string());
        line("data.test_n", self.data.test_n.to_string());
        line("data.fake_clusters", self.data.fake_clusters.to_string());
        line("data.drift", self.data.drift.to_string());
        line("data.real_drift", self.data.real_drift.to_string());
        line("data.real_fraction", self.data.real_fraction.to_string());
        line("data.real_scale", self.data.real_scale.to_string());
        line("data.fake_scale", self.data.fake_scale.to_string());
        line("data.cluster_radius", self.data.cluster_radius.to_string());
        line("run.seed", self.seed.to_string());
        line("run.eval_matrix", self.eval_matrix.to_string());
        line(
            "run.eer",
            match self.eer_mode {
                EerMode::ThresholdSweep => "sweep",
                EerMode::RocConvexHull => "hull",
            }
            .to_string(),
        );
        s
    }

    /// FNV-1a over the canonical rendering, as 16 hex digits.
    pub fn hash(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.to_canonical_string().bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_the_defaults() {
        let parsed = RunConfig::parse("").unwrap();
        assert_eq!(parsed, RunConfig::default());
        assert_eq!(parsed.method.name, "rego");
        assert_eq!(parsed.method.params.alpha, 0.75);
        assert_eq!(parsed.data.tasks, 4);
    }

    #[test]
    fn canonical_round_trip_is_identity() {
        let mut config = RunConfig::default();
        config.seed = 99;
        config.eval_matrix = true;
        config.eer_mode = EerMode::RocConvexHull;
        config.method.name = "ewc".to_string();
        config.method.params.alpha = 0.5;
        config.method.params.learning_rate = 3e-4;
        config.method.params.hidden = vec![16, 8];
        config.method.params.optimizer = OptimizerKind::Sgd;
        config.method.params.decay = DecayConvention::IndexBased;
        config.method.params.scope = PercentileScope::Global;
        config.data.drift = 2.5;
        config.data.real_drift = 0.75;
        config.data.real_fraction = 0.65;
        config.data.train_n = 123;
        let text = config.to_canonical_string();
        let parsed = RunConfig::parse(&text).unwrap();
        assert_eq!(parsed, config);
        assert_eq!(parsed.to_canonical_string(), text);
    }

    #[test]
    fn one_seed_drives_the_data_recipe() {
        let config = RunConfig::parse("run.seed = 7\n").unwrap();
        assert_eq!(config.task_spec().seed, 7);
        // data.seed is not a key.
        assert!(RunConfig::parse("data.seed = 7\n").is_err());
    }

    #[test]
    fn comments_and_spacing_are_tolerated() {
        let text = "# benchmark run\n\n  method.alpha=0.9\nrun.seed =  3  \n";
        let parsed = RunConfig::parse(text).unwrap();
        assert_eq!(parsed.method.params.alpha, 0.9);
        assert_eq!(parsed.seed, 3);
    }

    #[test]
    fn unknown_duplicate_and_malformed_keys_error() {
        for bad in [
            "method.alhpa = 0.5\n",
            "method.alpha = 0.5\nmethod.alpha = 0.6\n",
            "method.alpha\n",
            "extra.section = 1\n",
            "method.alpha = high\n",
            "method.optimizer = rmsprop\n",
            "run.eval_matrix = yes\n",
            "run.eer = der\n",
            "model.hidden = 64,,64\n",
        ] {
            assert!(
                matches!(RunConfig::parse(bad), Err(Error::Config(_))),
                "accepted: {bad:?}"
            );
        }
    }

    #[test]
    fn semantic_validation_applies_at_parse() {
        assert!(RunConfig::parse("method.name = magic\n").is_err());
        assert!(RunConfig::parse("method.alpha = 1.5\n").is_err());
        assert!(RunConfig::parse("method.batch_size = 0\n").is_err());
        // Overlapping label groups are rejected by the blend rules.
        assert!(RunConfig::parse("method.stable_labels = 0,1\n").is_err());
        // Grouped labels parse.
        let grouped =
            RunConfig::parse("method.stable_labels = 1,3\nmethod.diverse_labels = 0,2\n").unwrap();
        assert_eq!(grouped.method.params.blend.stable_labels(), &[1, 3]);
    }

    #[test]
    fn hash_separates_configs_and_is_stable() {
        let a = RunConfig::default();
        let mut b = RunConfig::default();
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash(), RunConfig::default().hash());
        assert_eq!(a.hash().len(), 16);
    }
}
