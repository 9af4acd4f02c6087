//! Declarative run files: flat `key = value` text grouped into `[section]`
//! blocks, with `#` comments. Unknown sections or keys are rejected, and the
//! fully-resolved text is echoed into every output directory so a run can be
//! reproduced from its own provenance.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::synth::SyntheticSpec;
use crate::toylm::ToyLmConfig;
use crate::trainer::{Architecture, TrainConfig};

/// section -> allowed keys
const SCHEMA: &[(&str, &[&str])] = &[
    ("run", &["seed", "out"]),
    ("data", &["shards", "stats", "normalize", "calibration_tokens"]),
    (
        "synth",
        &[
            "m_true",
            "d",
            "layers",
            "sparsity",
            "profile_width",
            "coeff_min",
            "coeff_max",
            "noise_sigma",
            "tokens",
        ],
    ),
    (
        "toylm",
        &["d_model", "n_layers", "n_heads", "mlp_ratio", "max_seq", "seed", "weights"],
    ),
    (
        "harvest",
        &["input", "format", "seq_len", "max_sequences", "layer_lo", "layer_hi"],
    ),
    (
        "train",
        &[
            "architecture",
            "m",
            "k",
            "l1",
            "base_lr",
            "beta1",
            "beta2",
            "eps",
            "warmup_frac",
            "stable_frac",
            "decay_frac",
            "total_steps",
            "batch_size",
            "renorm_every",
            "train_layer",
        ],
    ),
    (
        "eval",
        &[
            "checkpoint",
            "sequences_input",
            "seq_len",
            "max_sequences",
            "threshold",
            "window",
            "thresholds",
            "k_list",
            "checkpoint_pattern",
            "dossiers",
        ],
    ),
    (
        "steer",
        &["checkpoint", "feature", "clamp", "horizon", "prompt", "prompt_file"],
    ),
    (
        "interp",
        &["endpoint", "model", "replay", "sample_size", "log_requests", "offline"],
    ),
];

#[derive(Debug, Clone, Default)]
pub struct RunConfig {
    sections: BTreeMap<String, BTreeMap<String, String>>,
}

impl RunConfig {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut sections: BTreeMap<String, BTreeMap<String, String>> = BTreeMap::new();
        let mut current: Option<String> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            let bad = |what: String| Error::Config(format!("{origin}:{}: {what}", lineno + 1));
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !SCHEMA.iter().any(|(s, _)| *s == name) {
                    return Err(bad(format!("unknown section `[{name}]`")));
                }
                current = Some(name.to_string());
                sections.entry(name.to_string()).or_default();
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("expected `key = value`, got `{line}`")))?;
            let key = key.trim();
            let value = value.trim();
            let section = current
                .clone()
                .ok_or_else(|| bad(format!("key `{key}` appears before any [section]")))?;
            let allowed = SCHEMA
                .iter()
                .find(|(s, _)| *s == section)
                .map(|(_, keys)| *keys)
                .expect("section validated above");
            if !allowed.contains(&key) {
                return Err(bad(format!("unknown key `{key}` in [{section}]")));
            }
            let dup = sections
                .get_mut(&section)
                .expect("section inserted")
                .insert(key.to_string(), value.to_string());
            if dup.is_some() {
                return Err(bad(format!("duplicate key `{key}` in [{section}]")));
            }
        }
        Ok(RunConfig { sections })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    /// Set (or override) a key; used by CLI flags.
    pub fn set(&mut self, section: &str, key: &str, value: impl Into<String>) {
        self.sections
            .entry(section.to_string())
            .or_default()
            .insert(key.to_string(), value.into());
    }

    pub fn get(&self, section: &str, key: &str) -> Option<&str> {
        self.sections
            .get(section)
            .and_then(|s| s.get(key))
            .map(|s| s.as_str())
            .filter(|s| !s.is_empty())
    }

    pub fn require(&self, section: &str, key: &str) -> Result<&str> {
        self.get(section, key).ok_or_else(|| {
            Error::Config(format!("missing required key `{key}` in [{section}]"))
        })
    }

    fn parse_with<T, E>(&self, section: &str, key: &str, default: T) -> Result<T>
    where
        T: std::str::FromStr<Err = E>,
    {
        match self.get(section, key) {
            None => Ok(default),
            Some(v) => v.parse().map_err(|_| {
                Error::Config(format!("[{section}] {key}: cannot parse `{v}`"))
            }),
        }
    }

    pub fn u64_or(&self, section: &str, key: &str, default: u64) -> Result<u64> {
        self.parse_with(section, key, default)
    }

    pub fn usize_or(&self, section: &str, key: &str, default: usize) -> Result<usize> {
        self.parse_with(section, key, default)
    }

    pub fn f64_or(&self, section: &str, key: &str, default: f64) -> Result<f64> {
        self.parse_with(section, key, default)
    }

    pub fn bool_or(&self, section: &str, key: &str, default: bool) -> Result<bool> {
        match self.get(section, key) {
            None => Ok(default),
            Some("true") => Ok(true),
            Some("false") => Ok(false),
            Some(v) => Err(Error::Config(format!(
                "[{section}] {key}: expected true|false, got `{v}`"
            ))),
        }
    }

    pub fn paths(&self, section: &str, key: &str) -> Vec<PathBuf> {
        self.get(section, key)
            .map(|v| v.split(',').map(|p| PathBuf::from(p.trim())).collect())
            .unwrap_or_default()
    }

    pub fn usize_list(&self, section: &str, key: &str, default: &[usize]) -> Result<Vec<usize>> {
        match self.get(section, key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(|t| {
                    t.trim().parse().map_err(|_| {
                        Error::Config(format!("[{section}] {key}: bad entry `{t}`"))
                    })
                })
                .collect(),
        }
    }

    pub fn f32_list(&self, section: &str, key: &str, default: &[f32]) -> Result<Vec<f32>> {
        match self.get(section, key) {
            None => Ok(default.to_vec()),
            Some(v) => v
                .split(',')
                .map(|t| {
                    t.trim().parse().map_err(|_| {
                        Error::Config(format!("[{section}] {key}: bad entry `{t}`"))
                    })
                })
                .collect(),
        }
    }

    pub fn seed(&self) -> Result<u64> {
        self.u64_or("run", "seed", 0)
    }

    pub fn out_dir(&self) -> Result<PathBuf> {
        Ok(PathBuf::from(self.require("run", "out")?))
    }

    pub fn synth_spec(&self) -> Result<SyntheticSpec> {
        let default = SyntheticSpec::default();
        Ok(SyntheticSpec {
            m_true: self.usize_or("synth", "m_true", default.m_true)?,
            d: self.usize_or("synth", "d", default.d)?,
            num_layers: self.usize_or("synth", "layers", default.num_layers)?,
            sparsity: self.usize_or("synth", "sparsity", default.sparsity)?,
            profile_width: self.f64_or("synth", "profile_width", default.profile_width)?,
            coeff_min: self.f64_or("synth", "coeff_min", default.coeff_min)?,
            coeff_max: self.f64_or("synth", "coeff_max", default.coeff_max)?,
            noise_sigma: self.f64_or("synth", "noise_sigma", default.noise_sigma)?,
            seed: self.seed()?,
        })
    }

    pub fn toylm_config(&self) -> Result<ToyLmConfig> {
        let default = ToyLmConfig::default();
        Ok(ToyLmConfig {
            vocab: 256,
            d_model: self.usize_or("toylm", "d_model", default.d_model)?,
            n_layers: self.usize_or("toylm", "n_layers", default.n_layers)?,
            n_heads: self.usize_or("toylm", "n_heads", default.n_heads)?,
            mlp_ratio: self.usize_or("toylm", "mlp_ratio", default.mlp_ratio)?,
            max_seq: self.usize_or("toylm", "max_seq", default.max_seq)?,
            seed: self.u64_or("toylm", "seed", 0)?,
        })
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let architecture = Architecture::parse(self.require("train", "architecture")?)?;
        let latent_width = self.usize_or("train", "m", 128)?;
        let k = self.usize_or("train", "k", 4)?;
        let total_steps = self.u64_or("train", "total_steps", 5000)?;
        let mut config = TrainConfig::new(architecture, latent_width, k, total_steps);
        config.l1_coefficient = self.f64_or("train", "l1", 1e-3)? as f32;
        config.base_lr = self.f64_or("train", "base_lr", config.base_lr)?;
        config.beta1 = self.f64_or("train", "beta1", config.beta1)?;
        config.beta2 = self.f64_or("train", "beta2", config.beta2)?;
        config.eps = self.f64_or("train", "eps", config.eps)?;
        config.warmup_frac = self.f64_or("train", "warmup_frac", config.warmup_frac)?;
        config.stable_frac = self.f64_or("train", "stable_frac", config.stable_frac)?;
        config.decay_frac = self.f64_or("train", "decay_frac", config.decay_frac)?;
        config.batch_size = self.usize_or("train", "batch_size", config.batch_size)?;
        config.renorm_every = self.u64_or("train", "renorm_every", config.renorm_every)?;
        config.seed = self.seed()?;
        config.train_layer = match self.get("train", "train_layer") {
            Some(v) => Some(v.parse().map_err(|_| {
                Error::Config(format!("[train] train_layer: cannot parse `{v}`"))
            })?),
            None => None,
        };
        config.validate()?;
        Ok(config)
    }

    /// Render the resolved configuration (sorted sections and keys).
    pub fn render(&self) -> String {
        let mut out = String::new();
        for (section, keys) in &self.sections {
            if keys.is_empty() {
                continue;
            }
            out.push_str(&format!("[{section}]\n"));
            for (k, v) in keys {
                out.push_str(&format!("{k} = {v}\n"));
            }
            out.push('\n');
        }
        out
    }

    /// Write the config echo into an output directory.
    pub fn write_echo(&self, out_dir: &Path) -> Result<()> {
        std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
        let path = out_dir.join("config_echo.txt");
        std::fs::write(&path, self.render()).map_err(|e| Error::io(&path, e))
    }
}
