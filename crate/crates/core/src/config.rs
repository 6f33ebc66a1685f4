//! Run configuration: a plain-text `[section]` / `key = value` grammar with
//! canonical serialization.
//!
//! Grammar, line by line:
//!   - `# ...` and blank lines are ignored
//!   - `[name]` opens a section
//!   - `key = value` assigns within the current section
//!   - lists are comma-separated (`widths = 16,32,64`)
//!   - pooling grids are `HxW` pairs (`pool_grids = 2x2,1x1`)
//!
//! Unknown sections or keys are errors, so typos fail loudly. Parsing then
//! serializing normalizes formatting; a second round trip is a fixed point.

use crate::backbone::BackboneConfig;
use crate::dataio::AugmentPolicy;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objective::AdamWConfig;
use serde::Serialize;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    Supervised,
    Episodic,
    Eval,
    Ablate,
    GradCheck,
}

impl Mode {
    pub fn tag(self) -> &'static str {
        match self {
            Mode::Supervised => "supervised",
            Mode::Episodic => "episodic",
            Mode::Eval => "eval",
            Mode::Ablate => "ablate",
            Mode::GradCheck => "gradcheck",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "supervised" => Ok(Mode::Supervised),
            "episodic" => Ok(Mode::Episodic),
            "eval" => Ok(Mode::Eval),
            "ablate" => Ok(Mode::Ablate),
            "gradcheck" => Ok(Mode::GradCheck),
            other => Err(Error::config(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum DataSource {
    Synthetic,
    Cifar,
    Folder,
}

impl DataSource {
    pub fn tag(self) -> &'static str {
        match self {
            DataSource::Synthetic => "synthetic",
            DataSource::Cifar => "cifar",
            DataSource::Folder => "folder",
        }
    }

    fn parse(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(DataSource::Synthetic),
            "cifar" => Ok(DataSource::Cifar),
            "folder" => Ok(DataSource::Folder),
            other => Err(Error::config(format!("unknown data source {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    // [run]
    pub mode: Mode,
    pub seed: u64,
    pub out_dir: String,
    pub deterministic: bool,
    pub checkpoint: Option<String>,

    // [data]
    pub source: DataSource,
    pub image_side: usize,
    pub cifar_dir: Option<String>,
    pub folder_root: Option<String>,
    pub manifest: Option<String>,
    pub max_classes: Option<usize>,
    pub synthetic_classes: usize,
    pub synthetic_per_class: usize,
    pub synthetic_contrast: f64,
    pub synthetic_noise: f64,

    // [split]
    pub train_classes: usize,
    pub val_classes: usize,
    pub test_classes: usize,

    // [backbone]
    pub stage_widths: Vec<usize>,
    pub pool_grids: Vec<(usize, usize)>,
    pub fused_dim: usize,

    // [vae]
    pub latent_dim: usize,
    pub vae_hidden: usize,
    pub gate_hidden: usize,
    pub norm_eps: f64,

    // [fusion]
    pub t_draws: usize,
    pub tau: f64,
    pub alpha: f64,
    pub supervised_stochastic: bool,

    // [episodic]
    pub n_way: usize,
    pub k_shot: usize,
    pub q_queries: usize,
    pub train_episodes: usize,
    pub test_episodes: usize,

    // [supervised]
    pub batch_size: usize,
    pub epochs: usize,

    // [optim]
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub accumulation: usize,

    // [augment]
    pub pad: usize,
    pub flip_prob: f64,
    pub rotation_degrees: f64,
    pub channel_mean: Vec<f64>,
    pub channel_std: Vec<f64>,
}

impl Default for RunConfig {
    /// Desk-scale synthetic episodic profile.
    fn default() -> Self {
        RunConfig {
            mode: Mode::Episodic,
            seed: 42,
            out_dir: "runs/default".into(),
            deterministic: true,
            checkpoint: None,
            source: DataSource::Synthetic,
            image_side: 16,
            cifar_dir: None,
            folder_root: None,
            manifest: None,
            max_classes: None,
            synthetic_classes: 10,
            synthetic_per_class: 40,
            synthetic_contrast: 0.05,
            synthetic_noise: 0.05,
            train_classes: 5,
            val_classes: 0,
            test_classes: 5,
            stage_widths: vec![16, 32, 64],
            pool_grids: vec![(2, 2), (1, 1)],
            fused_dim: 64,
            latent_dim: 32,
            vae_hidden: 64,
            gate_hidden: 64,
            norm_eps: 1e-8,
            t_draws: 15,
            tau: 15.0,
            alpha: 0.01,
            supervised_stochastic: true,
            n_way: 5,
            k_shot: 5,
            q_queries: 15,
            train_episodes: 150,
            test_episodes: 100,
            batch_size: 128,
            epochs: 20,
            lr: 3e-3,
            weight_decay: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            accumulation: 1,
            pad: 0,
            flip_prob: 0.0,
            rotation_degrees: 0.0,
            channel_mean: vec![0.5, 0.5, 0.5],
            channel_std: vec![0.25, 0.25, 0.25],
        }
    }
}

struct RawConfig {
    values: BTreeMap<(String, String), String>,
    consumed: std::cell::RefCell<std::collections::BTreeSet<(String, String)>>,
}

impl RawConfig {
    fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[') {
                let name = name
                    .strip_suffix(']')
                    .ok_or_else(|| Error::config(format!("line {}: unterminated section header", lineno + 1)))?;
                section = name.trim().to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected `key = value`, got {:?}", lineno + 1, raw))
            })?;
            if section.is_empty() {
                return Err(Error::config(format!(
                    "line {}: `{}` appears before any [section]",
                    lineno + 1,
                    key.trim()
                )));
            }
            let prev = values.insert(
                (section.clone(), key.trim().to_string()),
                value.trim().to_string(),
            );
            if prev.is_some() {
                return Err(Error::config(format!(
                    "line {}: duplicate key {}.{}",
                    lineno + 1,
                    section,
                    key.trim()
                )));
            }
        }
        Ok(RawConfig {
            values,
            consumed: Default::default(),
        })
    }

    fn get(&self, section: &str, key: &str) -> Option<&str> {
        let k = (section.to_string(), key.to_string());
        let v = self.values.get(&k).map(|s| s.as_str());
        if v.is_some() {
            self.consumed.borrow_mut().insert(k);
        }
        v
    }

    fn finish(&self) -> Result<()> {
        let consumed = self.consumed.borrow();
        for (section, key) in self.values.keys() {
            if !consumed.contains(&(section.clone(), key.clone())) {
                return Err(Error::config(format!("unknown key {section}.{key}")));
            }
        }
        Ok(())
    }
}

fn parse_scalar<T: std::str::FromStr>(section: &str, key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::config(format!("{section}.{key}: cannot parse {value:?}")))
}

fn parse_bool(section: &str, key: &str, value: &str) -> Result<bool> {
    match value {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(Error::config(format!(
            "{section}.{key}: expected true/false, got {other:?}"
        ))),
    }
}

fn parse_list<T: std::str::FromStr>(section: &str, key: &str, value: &str) -> Result<Vec<T>> {
    value
        .split(',')
        .map(|part| parse_scalar(section, key, part.trim()))
        .collect()
}

fn parse_grids(section: &str, key: &str, value: &str) -> Result<Vec<(usize, usize)>> {
    value
        .split(',')
        .map(|part| {
            let part = part.trim();
            let (h, w) = part
                .split_once('x')
                .ok_or_else(|| Error::config(format!("{section}.{key}: grid {part:?} is not HxW")))?;
            Ok((
                parse_scalar(section, key, h.trim())?,
                parse_scalar(section, key, w.trim())?,
            ))
        })
        .collect()
}

macro_rules! take {
    ($raw:ident, $cfg:ident, $section:literal, $key:literal, $field:ident, scalar) => {
        if let Some(v) = $raw.get($section, $key) {
            $cfg.$field = parse_scalar($section, $key, v)?;
        }
    };
    ($raw:ident, $cfg:ident, $section:literal, $key:literal, $field:ident, bool) => {
        if let Some(v) = $raw.get($section, $key) {
            $cfg.$field = parse_bool($section, $key, v)?;
        }
    };
    ($raw:ident, $cfg:ident, $section:literal, $key:literal, $field:ident, opt_string) => {
        if let Some(v) = $raw.get($section, $key) {
            $cfg.$field = if v.is_empty() { None } else { Some(v.to_string()) };
        }
    };
    ($raw:ident, $cfg:ident, $section:literal, $key:literal, $field:ident, list) => {
        if let Some(v) = $raw.get($section, $key) {
            $cfg.$field = parse_list($section, $key, v)?;
        }
    };
}

impl RunConfig {
    /// Parse config text over the defaults, then apply `section.key=value`
    /// overrides in order.
    pub fn parse_with_overrides(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut full = text.to_string();
        if !overrides.is_empty() {
            full.push_str("\n# overrides\n");
            for (path, value) in overrides {
                let (section, key) = path.split_once('.').ok_or_else(|| {
                    Error::config(format!("override {path:?} is not section.key"))
                })?;
                // overrides win by replacing any earlier assignment
                full = strip_assignment(&full, section, key);
                full.push_str(&format!("[{section}]\n{key} = {value}\n"));
            }
        }
        Self::parse(&full)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let raw = RawConfig::parse(text)?;
        let mut cfg = RunConfig::default();

        if let Some(v) = raw.get("run", "mode") {
            cfg.mode = Mode::parse(v)?;
        }
        take!(raw, cfg, "run", "seed", seed, scalar);
        if let Some(v) = raw.get("run", "out_dir") {
            cfg.out_dir = v.to_string();
        }
        take!(raw, cfg, "run", "deterministic", deterministic, bool);
        take!(raw, cfg, "run", "checkpoint", checkpoint, opt_string);

        if let Some(v) = raw.get("data", "source") {
            cfg.source = DataSource::parse(v)?;
        }
        take!(raw, cfg, "data", "image_side", image_side, scalar);
        take!(raw, cfg, "data", "cifar_dir", cifar_dir, opt_string);
        take!(raw, cfg, "data", "folder_root", folder_root, opt_string);
        take!(raw, cfg, "data", "manifest", manifest, opt_string);
        if let Some(v) = raw.get("data", "max_classes") {
            cfg.max_classes = if v.is_empty() {
                None
            } else {
                Some(parse_scalar("data", "max_classes", v)?)
            };
        }
        take!(raw, cfg, "data", "synthetic_classes", synthetic_classes, scalar);
        take!(raw, cfg, "data", "synthetic_per_class", synthetic_per_class, scalar);
        take!(raw, cfg, "data", "synthetic_contrast", synthetic_contrast, scalar);
        take!(raw, cfg, "data", "synthetic_noise", synthetic_noise, scalar);

        take!(raw, cfg, "split", "train_classes", train_classes, scalar);
        take!(raw, cfg, "split", "val_classes", val_classes, scalar);
        take!(raw, cfg, "split", "test_classes", test_classes, scalar);

        take!(raw, cfg, "backbone", "widths", stage_widths, list);
        if let Some(v) = raw.get("backbone", "pool_grids") {
            cfg.pool_grids = parse_grids("backbone", "pool_grids", v)?;
        }
        take!(raw, cfg, "backbone", "fused_dim", fused_dim, scalar);

        take!(raw, cfg, "vae", "latent_dim", latent_dim, scalar);
        take!(raw, cfg, "vae", "hidden", vae_hidden, scalar);
        take!(raw, cfg, "vae", "gate_hidden", gate_hidden, scalar);
        take!(raw, cfg, "vae", "norm_eps", norm_eps, scalar);

        take!(raw, cfg, "fusion", "t_draws", t_draws, scalar);
        take!(raw, cfg, "fusion", "tau", tau, scalar);
        take!(raw, cfg, "fusion", "alpha", alpha, scalar);
        take!(raw, cfg, "fusion", "supervised_stochastic", supervised_stochastic, bool);

        take!(raw, cfg, "episodic", "n_way", n_way, scalar);
        take!(raw, cfg, "episodic", "k_shot", k_shot, scalar);
        take!(raw, cfg, "episodic", "q_queries", q_queries, scalar);
        take!(raw, cfg, "episodic", "train_episodes", train_episodes, scalar);
        take!(raw, cfg, "episodic", "test_episodes", test_episodes, scalar);

        take!(raw, cfg, "supervised", "batch_size", batch_size, scalar);
        take!(raw, cfg, "supervised", "epochs", epochs, scalar);

        take!(raw, cfg, "optim", "lr", lr, scalar);
        take!(raw, cfg, "optim", "weight_decay", weight_decay, scalar);
        take!(raw, cfg, "optim", "beta1", beta1, scalar);
        take!(raw, cfg, "optim", "beta2", beta2, scalar);
        take!(raw, cfg, "optim", "adam_eps", adam_eps, scalar);
        take!(raw, cfg, "optim", "accumulation", accumulation, scalar);

        take!(raw, cfg, "augment", "pad", pad, scalar);
        take!(raw, cfg, "augment", "flip_prob", flip_prob, scalar);
        take!(raw, cfg, "augment", "rotation_degrees", rotation_degrees, scalar);
        take!(raw, cfg, "augment", "channel_mean", channel_mean, list);
        take!(raw, cfg, "augment", "channel_std", channel_std, list);

        raw.finish()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Canonical text form; `parse(to_text(parse(x)))` equals `parse(x)`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let grids = self
            .pool_grids
            .iter()
            .map(|(h, w)| format!("{h}x{w}"))
            .collect::<Vec<_>>()
            .join(",");
        let list = |v: &[f64]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let widths = self
            .stage_widths
            .iter()
            .map(|x| x.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let _ = writeln!(out, "[run]");
        let _ = writeln!(out, "mode = {}", self.mode.tag());
        let _ = writeln!(out, "seed = {}", self.seed);
        let _ = writeln!(out, "out_dir = {}", self.out_dir);
        let _ = writeln!(out, "deterministic = {}", self.deterministic);
        if let Some(c) = &self.checkpoint {
            let _ = writeln!(out, "checkpoint = {c}");
        }
        let _ = writeln!(out, "\n[data]");
        let _ = writeln!(out, "source = {}", self.source.tag());
        let _ = writeln!(out, "image_side = {}", self.image_side);
        if let Some(v) = &self.cifar_dir {
            let _ = writeln!(out, "cifar_dir = {v}");
        }
        if let Some(v) = &self.folder_root {
            let _ = writeln!(out, "folder_root = {v}");
        }
        if let Some(v) = &self.manifest {
            let _ = writeln!(out, "manifest = {v}");
        }
        if let Some(v) = self.max_classes {
            let _ = writeln!(out, "max_classes = {v}");
        }
        let _ = writeln!(out, "synthetic_classes = {}", self.synthetic_classes);
        let _ = writeln!(out, "synthetic_per_class = {}", self.synthetic_per_class);
        let _ = writeln!(out, "synthetic_contrast = {}", self.synthetic_contrast);
        let _ = writeln!(out, "synthetic_noise = {}", self.synthetic_noise);
        let _ = writeln!(out, "\n[split]");
        let _ = writeln!(out, "train_classes = {}", self.train_classes);
        let _ = writeln!(out, "val_classes = {}", self.val_classes);
        let _ = writeln!(out, "test_classes = {}", self.test_classes);
        let _ = writeln!(out, "\n[backbone]");
        let _ = writeln!(out, "widths = {widths}");
        let _ = writeln!(out, "pool_grids = {grids}");
        let _ = writeln!(out, "fused_dim = {}", self.fused_dim);
        let _ = writeln!(out, "\n[vae]");
        let _ = writeln!(out, "latent_dim = {}", self.latent_dim);
        let _ = writeln!(out, "hidden = {}", self.vae_hidden);
        let _ = writeln!(out, "gate_hidden = {}", self.gate_hidden);
        let _ = writeln!(out, "norm_eps = {}", self.norm_eps);
        let _ = writeln!(out, "\n[fusion]");
        let _ = writeln!(out, "t_draws = {}", self.t_draws);
        let _ = writeln!(out, "tau = {}", self.tau);
        let _ = writeln!(out, "alpha = {}", self.alpha);
        let _ = writeln!(out, "supervised_stochastic = {}", self.supervised_stochastic);
        let _ = writeln!(out, "\n[episodic]");
        let _ = writeln!(out, "n_way = {}", self.n_way);
        let _ = writeln!(out, "k_shot = {}", self.k_shot);
        let _ = writeln!(out, "q_queries = {}", self.q_queries);
        let _ = writeln!(out, "train_episodes = {}", self.train_episodes);
        let _ = writeln!(out, "test_episodes = {}", self.test_episodes);
        let _ = writeln!(out, "\n[supervised]");
        let _ = writeln!(out, "batch_size = {}", self.batch_size);
        let _ = writeln!(out, "epochs = {}", self.epochs);
        let _ = writeln!(out, "\n[optim]");
        let _ = writeln!(out, "lr = {}", self.lr);
        let _ = writeln!(out, "weight_decay = {}", self.weight_decay);
        let _ = writeln!(out, "beta1 = {}", self.beta1);
        let _ = writeln!(out, "beta2 = {}", self.beta2);
        let _ = writeln!(out, "adam_eps = {}", self.adam_eps);
        let _ = writeln!(out, "accumulation = {}", self.accumulation);
        let _ = writeln!(out, "\n[augment]");
        let _ = writeln!(out, "pad = {}", self.pad);
        let _ = writeln!(out, "flip_prob = {}", self.flip_prob);
        let _ = writeln!(out, "rotation_degrees = {}", self.rotation_degrees);
        let _ = writeln!(out, "channel_mean = {}", list(&self.channel_mean));
        let _ = writeln!(out, "channel_std = {}", list(&self.channel_std));
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 {
            return Err(Error::config("tau must be positive"));
        }
        if self.alpha < 0.0 {
            return Err(Error::config("alpha must be nonnegative"));
        }
        if self.t_draws < 1 {
            return Err(Error::config("t_draws must be at least 1"));
        }
        if self.accumulation < 1 {
            return Err(Error::config("accumulation must be at least 1"));
        }
        if self.n_way < 2 {
            return Err(Error::config("n_way must be at least 2"));
        }
        if self.channel_std.iter().any(|&s| s <= 0.0) {
            return Err(Error::config("channel std must be strictly positive"));
        }
        if self.channel_mean.len() != 3 || self.channel_std.len() != 3 {
            return Err(Error::config("channel stats must list 3 values"));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::config("flip_prob must lie in [0,1]"));
        }
        self.backbone_config().validate(self.effective_image_side())?;
        Ok(())
    }

    /// Referenced paths must exist when the mode needs them.
    pub fn validate_paths(&self) -> Result<()> {
        let check = |label: &str, path: &Option<String>, required: bool| -> Result<()> {
            match path {
                Some(p) if !Path::new(p).exists() => Err(Error::config(format!(
                    "{label} path {p:?} does not exist"
                ))),
                None if required => Err(Error::config(format!(
                    "{label} path is required for this mode/data source"
                ))),
                _ => Ok(()),
            }
        };
        match self.source {
            DataSource::Cifar => check("cifar_dir", &self.cifar_dir, true)?,
            DataSource::Folder => {
                check("folder_root", &self.folder_root, true)?;
                check("manifest", &self.manifest, true)?;
            }
            DataSource::Synthetic => {}
        }
        if self.mode == Mode::Eval {
            check("checkpoint", &self.checkpoint, true)?;
        } else {
            check("checkpoint", &self.checkpoint, false)?;
        }
        Ok(())
    }

    pub fn effective_image_side(&self) -> usize {
        match self.source {
            DataSource::Cifar => crate::dataio::cifar::IMAGE_SIDE,
            _ => self.image_side,
        }
    }

    pub fn backbone_config(&self) -> BackboneConfig {
        BackboneConfig {
            in_channels: 3,
            stage_widths: self.stage_widths.clone(),
            pool_grids: self.pool_grids.clone(),
            fused_dim: self.fused_dim,
        }
    }

    pub fn model_config(&self, n_classes: Option<usize>) -> ModelConfig {
        ModelConfig {
            backbone: self.backbone_config(),
            latent_dim: self.latent_dim,
            vae_hidden: self.vae_hidden,
            gate_hidden: self.gate_hidden,
            norm_eps: self.norm_eps,
            n_classes,
        }
    }

    pub fn adamw_config(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn augment_policy(&self) -> AugmentPolicy {
        AugmentPolicy {
            resize_crop: self.pad > 0,
            pad: self.pad,
            horizontal_flip_prob: self.flip_prob,
            rotation_degrees: self.rotation_degrees,
            channel_mean: self.channel_mean.iter().map(|&v| v as f32).collect(),
            channel_std: self.channel_std.iter().map(|&v| v as f32).collect(),
        }
    }

    /// Output directory under the `VDLF_OUT_ROOT` environment root.
    pub fn resolved_out_dir(&self) -> PathBuf {
        let root = std::env::var("VDLF_OUT_ROOT").unwrap_or_else(|_| ".".into());
        Path::new(&root).join(&self.out_dir)
    }
}

fn strip_assignment(text: &str, section: &str, key: &str) -> String {
    let mut out = String::new();
    let mut current = String::new();
    for line in text.lines() {
        let trimmed = line.trim();
        if let Some(name) = trimmed.strip_prefix('[') {
            if let Some(name) = name.strip_suffix(']') {
                current = name.trim().to_string();
            }
        } else if current == section {
            if let Some((k, _)) = trimmed.split_once('=') {
                if k.trim() == key {
                    continue;
                }
            }
        }
        out.push_str(line);
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_to_fixed_point() {
        let cfg = RunConfig::default();
        let text = cfg.to_text();
        let reparsed = RunConfig::parse(&text).unwrap();
        assert_eq!(cfg, reparsed);
        assert_eq!(text, reparsed.to_text());
    }

    #[test]
    fn parse_is_idempotent_after_normalization() {
        let text = "[run]\nmode = supervised\nseed = 7\n[optim]\nlr = 2e-3\n";
        let once = RunConfig::parse(text).unwrap();
        let normalized = once.to_text();
        let twice = RunConfig::parse(&normalized).unwrap();
        assert_eq!(once, twice);
        assert_eq!(normalized, twice.to_text());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::parse("[run]\nmoed = episodic\n").is_err());
        assert!(RunConfig::parse("[rnu]\nmode = episodic\n").is_err());
        assert!(RunConfig::parse("mode = episodic\n").is_err());
        assert!(RunConfig::parse("[run]\nseed = 1\nseed = 2\n").is_err());
    }

    #[test]
    fn value_validation() {
        assert!(RunConfig::parse("[fusion]\ntau = 0\n").is_err());
        assert!(RunConfig::parse("[fusion]\nalpha = -0.5\n").is_err());
        assert!(RunConfig::parse("[fusion]\nt_draws = 0\n").is_err());
        assert!(RunConfig::parse("[augment]\nchannel_std = 1,0,1\n").is_err());
        // pooling grid too large for the stage stack
        assert!(RunConfig::parse("[backbone]\nwidths = 8,8,8,8\npool_grids = 4x4,1x1\n").is_err());
    }

    #[test]
    fn overrides_replace_values() {
        let cfg = RunConfig::parse_with_overrides(
            "[run]\nseed = 1\n",
            &[
                ("run.seed".into(), "9".into()),
                ("optim.lr".into(), "0.01".into()),
            ],
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.lr, 0.01);
    }

    #[test]
    fn grids_parse_both_ways() {
        let cfg = RunConfig::parse("[backbone]\npool_grids = 2x2,1x1\n").unwrap();
        assert_eq!(cfg.pool_grids, vec![(2, 2), (1, 1)]);
        assert!(RunConfig::parse("[backbone]\npool_grids = 2by2\n").is_err());
    }

    #[test]
    fn comments_and_blanks_are_ignored() {
        let cfg = RunConfig::parse("# header\n\n[run]\n# inner\nseed = 5\n").unwrap();
        assert_eq!(cfg.seed, 5);
    }
}
