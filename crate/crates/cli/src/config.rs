//! Flat `key=value` run configuration with `section.` prefixes.
//!
//! Files may also group keys under `[section]` headers. Lines starting with `#` are
//! comments. Unknown keys are rejected; `--set` overrides win over file values.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use acae::eval::EvalProtocol;
use acae::grad::Supervision;
use acae::head::HeadConfig;
use acae::rerank::RerankParams;
use acae::similarity::{FusionConfig, SubsetFlags};
use acae::synth::ScenarioConfig;
use acae::train::TrainSchedule;

/// Problems the user can fix in the config; mapped to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "config: {}", self.0)
    }
}

impl std::error::Error for ConfigError {}

type Res<T> = std::result::Result<T, ConfigError>;

const KEYS: &[(&str, &str)] = &[
    ("seed", "0"),
    ("data.identities", "40"),
    ("data.dim", "64"),
    ("data.images", "400"),
    ("data.persons_min", "3"),
    ("data.persons_max", "6"),
    ("data.group_min", "2"),
    ("data.group_max", "3"),
    ("data.co_travel_prob", "0.8"),
    ("data.noise_sigma", "0.1"),
    ("data.ambiguity_delta", "0.05"),
    ("data.confusable_fraction", "0.3"),
    ("data.unlabeled_rate", "0.1"),
    ("acae.heads", "4"),
    ("acae.ff_dim", "0"),
    ("acae.scaled_logits", "false"),
    ("acae.share_projections", "false"),
    ("acae.ln_eps", "1e-5"),
    ("fusion.lambda", "0.4"),
    ("fusion.intra", "true"),
    ("fusion.inter", "true"),
    ("fusion.final", "true"),
    ("fusion.rescale", "true"),
    ("fusion.normalize", "true"),
    ("train.epochs", "10"),
    ("train.lr", "2.0"),
    ("train.lr_steps", "6"),
    ("train.lr_decay", "0.1"),
    ("train.batch_size", "4"),
    ("train.loss_weight", "0.1"),
    ("train.freeze_first_epoch", "true"),
    ("train.supervise_intra", "false"),
    ("train.supervise_inter", "false"),
    ("train.supervise_final", "true"),
    ("train.pair_unlabeled", "true"),
    ("train.bank_momentum", "none"),
    ("oim.temperature", "0.0333333333333333"),
    ("oim.momentum", "0.5"),
    ("oim.queue_per_identity", "5"),
    ("eval.gallery_size", "100"),
    ("eval.max_queries", "0"),
    ("eval.lambdas", "0,0.1,0.2,0.3,0.4,0.5,0.6"),
    ("rerank.k1", "10,20,30"),
    ("rerank.k2", "3,6"),
    ("rerank.lambda", "0.3,0.5,0.7"),
    ("bench.repeats", "20"),
    ("bench.max_pairs", "100"),
    ("gradcheck.instances", "24"),
    ("gradcheck.tolerance", "1e-4"),
    ("gradcheck.step", "1e-5"),
    ("exec.parallel", "true"),
];

#[derive(Clone, Debug)]
pub struct Settings {
    values: BTreeMap<String, String>,
}

impl Default for Settings {
    fn default() -> Self {
        Self {
            values: KEYS
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        }
    }
}

impl Settings {
    pub fn set(&mut self, key: &str, value: &str) -> Res<()> {
        match self.values.get_mut(key) {
            Some(slot) => {
                *slot = value.trim().to_string();
                Ok(())
            }
            None => Err(ConfigError(format!("unknown key `{key}`"))),
        }
    }

    /// `key=value` as given on the command line.
    pub fn set_pair(&mut self, pair: &str) -> Res<()> {
        let (k, v) = pair
            .split_once('=')
            .ok_or_else(|| ConfigError(format!("override `{pair}` is not key=value")))?;
        self.set(k.trim(), v)
    }

    pub fn parse_text(&mut self, text: &str) -> Res<()> {
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                ConfigError(format!("line {}: expected key=value, got `{line}`", i + 1))
            })?;
            let key = if section.is_empty() {
                k.trim().to_string()
            } else {
                format!("{section}.{}", k.trim())
            };
            self.set(&key, v)
                .map_err(|e| ConfigError(format!("line {}: {}", i + 1, e.0)))?;
        }
        Ok(())
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> anyhow::Result<Self> {
        let mut s = Settings::default();
        if let Some(p) = path {
            let text = std::fs::read_to_string(p)
                .map_err(|e| anyhow::Error::new(e).context(format!("reading {}", p.display())))?;
            s.parse_text(&text)?;
        }
        for o in overrides {
            s.set_pair(o)?;
        }
        Ok(s)
    }

    /// Every key with its effective value, sorted.
    pub fn snapshot(&self) -> String {
        self.values
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    fn raw(&self, key: &str) -> &str {
        self.values
            .get(key)
            .map(String::as_str)
            .unwrap_or_else(|| panic!("key {key} missing from the table"))
    }

    fn parse<T: std::str::FromStr>(&self, key: &str) -> Res<T> {
        let v = self.raw(key);
        v.parse()
            .map_err(|_| ConfigError(format!("cannot parse `{key}` value `{v}`")))
    }

    pub fn usize(&self, key: &str) -> Res<usize> {
        self.parse(key)
    }

    pub fn u64(&self, key: &str) -> Res<u64> {
        self.parse(key)
    }

    pub fn f64(&self, key: &str) -> Res<f64> {
        let v: f64 = self.parse(key)?;
        if !v.is_finite() {
            return Err(ConfigError(format!("`{key}` must be finite")));
        }
        Ok(v)
    }

    pub fn bool(&self, key: &str) -> Res<bool> {
        match self.raw(key) {
            "true" | "1" | "yes" | "on" => Ok(true),
            "false" | "0" | "no" | "off" => Ok(false),
            v => Err(ConfigError(format!("`{key}` expects a boolean, got `{v}`"))),
        }
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> Res<Vec<T>> {
        let v = self.raw(key);
        if v.is_empty() {
            return Ok(Vec::new());
        }
        v.split(',')
            .map(|x| {
                x.trim()
                    .parse()
                    .map_err(|_| ConfigError(format!("cannot parse `{key}` entry `{x}`")))
            })
            .collect()
    }

    pub fn f64_list(&self, key: &str) -> Res<Vec<f64>> {
        self.list(key)
    }

    pub fn usize_list(&self, key: &str) -> Res<Vec<usize>> {
        self.list(key)
    }

    pub fn scenario(&self, seed: u64) -> Res<ScenarioConfig> {
        Ok(ScenarioConfig {
            n_identities: self.usize("data.identities")?,
            dim: self.usize("data.dim")?,
            n_images: self.usize("data.images")?,
            persons_min: self.usize("data.persons_min")?,
            persons_max: self.usize("data.persons_max")?,
            group_min: self.usize("data.group_min")?,
            group_max: self.usize("data.group_max")?,
            co_travel_prob: self.f64("data.co_travel_prob")?,
            noise_sigma: self.f64("data.noise_sigma")?,
            ambiguity_delta: self.f64("data.ambiguity_delta")?,
            confusable_fraction: self.f64("data.confusable_fraction")?,
            unlabeled_rate: self.f64("data.unlabeled_rate")?,
            seed,
        })
    }

    pub fn head(&self, dim: usize) -> Res<HeadConfig> {
        let ff = self.usize("acae.ff_dim")?;
        Ok(HeadConfig {
            dim,
            heads: self.usize("acae.heads")?,
            ff_dim: if ff == 0 { 2 * dim } else { ff },
            scaled_logits: self.bool("acae.scaled_logits")?,
            share_projections: self.bool("acae.share_projections")?,
            ln_eps: self.f64("acae.ln_eps")?,
        })
    }

    pub fn fusion(&self) -> Res<FusionConfig> {
        let cfg = FusionConfig {
            lambda: self.f64("fusion.lambda")?,
            subset: SubsetFlags {
                intra: self.bool("fusion.intra")?,
                inter: self.bool("fusion.inter")?,
                final_: self.bool("fusion.final")?,
            },
            rescale: self.bool("fusion.rescale")?,
            normalize: self.bool("fusion.normalize")?,
        };
        cfg.validate()
            .map_err(|e| ConfigError(format!("fusion: {e}")))?;
        Ok(cfg)
    }

    pub fn schedule(&self) -> Res<TrainSchedule> {
        let s = TrainSchedule {
            epochs: self.usize("train.epochs")?,
            lr: self.f64("train.lr")?,
            lr_steps: self.usize_list("train.lr_steps")?,
            lr_decay: self.f64("train.lr_decay")?,
            batch_size: self.usize("train.batch_size")?,
            loss_weight: self.f64("train.loss_weight")?,
            freeze_first_epoch: self.bool("train.freeze_first_epoch")?,
            supervision: Supervision {
                intra: self.bool("train.supervise_intra")?,
                inter: self.bool("train.supervise_inter")?,
                final_: self.bool("train.supervise_final")?,
            },
            pair_unlabeled: self.bool("train.pair_unlabeled")?,
        };
        s.validate().map_err(|e| ConfigError(format!("train: {e}")))?;
        Ok(s)
    }

    pub fn bank_momentum(&self) -> Res<Option<f64>> {
        match self.raw("train.bank_momentum") {
            "none" | "" => Ok(None),
            _ => {
                let g = self.f64("train.bank_momentum")?;
                if !(0.0..=1.0).contains(&g) {
                    return Err(ConfigError("`train.bank_momentum` must lie in [0, 1]".into()));
                }
                Ok(Some(g))
            }
        }
    }

    pub fn protocol(&self, seed: u64) -> Res<EvalProtocol> {
        let max = self.usize("eval.max_queries")?;
        let gallery_size = self.usize("eval.gallery_size")?;
        if gallery_size == 0 {
            return Err(ConfigError("`eval.gallery_size` must be at least 1".into()));
        }
        Ok(EvalProtocol {
            gallery_size,
            seed,
            max_queries: (max > 0).then_some(max),
            normalize: self.bool("fusion.normalize")?,
        })
    }

    pub fn rerank_grid(&self) -> Res<Vec<RerankParams>> {
        let mut out = Vec::new();
        for k1 in self.usize_list("rerank.k1")? {
            for k2 in self.usize_list("rerank.k2")? {
                for lambda in self.f64_list("rerank.lambda")? {
                    let p = RerankParams { k1, k2, lambda };
                    p.validate()
                        .map_err(|e| ConfigError(format!("rerank: {e}")))?;
                    out.push(p);
                }
            }
        }
        Ok(out)
    }
}
