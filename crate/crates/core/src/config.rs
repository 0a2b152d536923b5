//! Flat `key = value` run configuration with environment overrides.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::data::PerturbConfig;
use crate::error::{Error, Result};
use crate::fusion::FusionMode;
use crate::model::{ModelSpec, Task};
use crate::netbuilder::ArchSpec;
use crate::stacks::{StackConfig, StackKind};
use crate::training::TrainConfig;

/// Prefix of environment overrides: `DESTNET_TRAIN_LR_ALN` sets `train.lr_aln`.
pub const ENV_PREFIX: &str = "DESTNET_";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ModelKind {
    Stack(StackKind),
    /// The classifier alone, no alignment.
    Cnn,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "cnn" {
            Ok(ModelKind::Cnn)
        } else {
            s.parse().map(ModelKind::Stack)
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelKind::Stack(k) => k.fmt(f),
            ModelKind::Cnn => f.write_str("cnn"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DataSource {
    Mnist,
    Documents,
}

impl std::str::FromStr for DataSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mnist" => Ok(DataSource::Mnist),
            "documents" => Ok(DataSource::Documents),
            other => Err(Error::Config(format!("unknown data source '{other}'"))),
        }
    }
}

impl std::fmt::Display for DataSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DataSource::Mnist => "mnist",
            DataSource::Documents => "documents",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model_kind: ModelKind,
    pub levels: usize,
    pub arch: ArchSpec,
    pub classifier: Option<ArchSpec>,
    pub fusion: FusionMode,
    pub kf: usize,
    pub dropout_keep: f64,
    pub source: DataSource,
    pub mnist_dir: PathBuf,
    /// Empty: documents are synthesized.
    pub manifest: Option<PathBuf>,
    pub train_count: usize,
    pub test_count: usize,
    pub sigma: f64,
    pub clamp: bool,
    /// Side of the square document raster.
    pub raster: usize,
    pub task: Task,
    pub iterations: u64,
    pub batch: usize,
    pub lr_aln: f64,
    pub lr_clf: f64,
    pub lr_drop_at: u64,
    pub lr_drop_factor: f64,
    pub log_every: u64,
    pub eval_seed: u64,
    pub eval_batch: usize,
    pub auc_threshold: f64,
    pub ced_points: usize,
    pub gallery_samples: usize,
    /// Perturbation levels for `compare`; empty means `[sigma]`.
    pub eval_sigmas: Vec<f64>,
    pub gradcheck_fault: Option<String>,
}

/// Every accepted key, in render order.
pub const KEYS: &[&str] = &[
    "seed",
    "model.kind",
    "model.levels",
    "model.arch",
    "model.classifier",
    "model.fusion",
    "model.kf",
    "model.dropout_keep",
    "data.source",
    "data.mnist_dir",
    "data.manifest",
    "data.train_count",
    "data.test_count",
    "data.sigma",
    "data.clamp",
    "data.raster",
    "train.task",
    "train.iterations",
    "train.batch",
    "train.lr_aln",
    "train.lr_clf",
    "train.lr_drop_at",
    "train.lr_drop_factor",
    "train.log_every",
    "eval.seed",
    "eval.batch",
    "eval.auc_threshold",
    "eval.ced_points",
    "eval.gallery_samples",
    "eval.sigmas",
    "gradcheck.fault",
];

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model_kind: ModelKind::Stack(StackKind::Destnet),
            levels: 4,
            arch: "conv7-4 | conv7-8 | P | FC(48) | FC(8)".parse().expect("valid"),
            classifier: Some("conv9-3 | FC(10)".parse().expect("valid")),
            fusion: FusionMode::ExpansionContraction,
            kf: 256,
            dropout_keep: 0.9,
            source: DataSource::Mnist,
            mnist_dir: PathBuf::from("data/mnist"),
            manifest: None,
            train_count: 10_000,
            test_count: 2_000,
            sigma: 0.125,
            clamp: true,
            raster: 256,
            task: Task::Classify,
            iterations: 5_000,
            batch: 64,
            lr_aln: 1e-4,
            lr_clf: 1e-2,
            lr_drop_at: 2_500,
            lr_drop_factor: 0.1,
            log_every: 1,
            eval_seed: 1,
            eval_batch: 100,
            auc_threshold: 0.04,
            ced_points: 100,
            gallery_samples: 8,
            eval_sigmas: Vec::new(),
            gradcheck_fault: None,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{v}'")))
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl RunConfig {
    /// Parses `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key = value", n + 1)))?;
            let k = k.trim();
            if !seen.insert(k.to_string()) {
                return Err(Error::Config(format!("line {}: duplicate key {k}", n + 1)));
            }
            cfg.set(k, v.trim())
                .map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        RunConfig::parse(&text)
    }

    /// Applies `DESTNET_<SECTION>_<KEY>` variables from `vars`; other
    /// variables are ignored, unknown `DESTNET_` ones rejected.
    pub fn apply_env<I: IntoIterator<Item = (String, String)>>(&mut self, vars: I) -> Result<()> {
        let mut pairs: Vec<(String, String)> = vars
            .into_iter()
            .filter_map(|(k, v)| k.strip_prefix(ENV_PREFIX).map(|rest| (rest.to_ascii_lowercase(), v)))
            .collect();
        pairs.sort();
        for (rest, v) in pairs {
            let key = match rest.split_once('_') {
                Some((section, key)) if section != "seed" => format!("{section}.{key}"),
                _ => rest.clone(),
            };
            if !KEYS.contains(&key.as_str()) {
                return Err(Error::Config(format!(
                    "environment variable {ENV_PREFIX}{} does not name a config key",
                    rest.to_ascii_uppercase()
                )));
            }
            self.set(&key, v.trim())?;
        }
        self.validate()
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_num(key, v)?,
            "model.kind" => self.model_kind = v.parse()?,
            "model.levels" => self.levels = parse_num(key, v)?,
            "model.arch" => self.arch = v.parse()?,
            "model.classifier" => {
                self.classifier = match v {
                    "" | "none" => None,
                    a => Some(a.parse()?),
                }
            }
            "model.fusion" => self.fusion = v.parse()?,
            "model.kf" => self.kf = parse_num(key, v)?,
            "model.dropout_keep" => self.dropout_keep = parse_num(key, v)?,
            "data.source" => self.source = v.parse()?,
            "data.mnist_dir" => self.mnist_dir = PathBuf::from(v),
            "data.manifest" => self.manifest = opt_path(v),
            "data.train_count" => self.train_count = parse_num(key, v)?,
            "data.test_count" => self.test_count = parse_num(key, v)?,
            "data.sigma" => self.sigma = parse_num(key, v)?,
            "data.clamp" => self.clamp = parse_num(key, v)?,
            "data.raster" => self.raster = parse_num(key, v)?,
            "train.task" => self.task = v.parse()?,
            "train.iterations" => self.iterations = parse_num(key, v)?,
            "train.batch" => self.batch = parse_num(key, v)?,
            "train.lr_aln" => self.lr_aln = parse_num(key, v)?,
            "train.lr_clf" => self.lr_clf = parse_num(key, v)?,
            "train.lr_drop_at" => self.lr_drop_at = parse_num(key, v)?,
            "train.lr_drop_factor" => self.lr_drop_factor = parse_num(key, v)?,
            "train.log_every" => self.log_every = parse_num(key, v)?,
            "eval.seed" => self.eval_seed = parse_num(key, v)?,
            "eval.batch" => self.eval_batch = parse_num(key, v)?,
            "eval.auc_threshold" => self.auc_threshold = parse_num(key, v)?,
            "eval.ced_points" => self.ced_points = parse_num(key, v)?,
            "eval.gallery_samples" => self.gallery_samples = parse_num(key, v)?,
            "eval.sigmas" => {
                self.eval_sigmas = v
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| parse_num(key, s))
                    .collect::<Result<_>>()?
            }
            "gradcheck.fault" => self.gradcheck_fault = (!v.is_empty()).then(|| v.to_string()),
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let path = |p: &Option<PathBuf>| p.as_ref().map_or(String::new(), |p| p.display().to_string());
        Some(match key {
            "seed" => self.seed.to_string(),
            "model.kind" => self.model_kind.to_string(),
            "model.levels" => self.levels.to_string(),
            "model.arch" => self.arch.to_string(),
            "model.classifier" => self.classifier.as_ref().map_or("none".into(), ToString::to_string),
            "model.fusion" => self.fusion.to_string(),
            "model.kf" => self.kf.to_string(),
            "model.dropout_keep" => self.dropout_keep.to_string(),
            "data.source" => self.source.to_string(),
            "data.mnist_dir" => self.mnist_dir.display().to_string(),
            "data.manifest" => path(&self.manifest),
            "data.train_count" => self.train_count.to_string(),
            "data.test_count" => self.test_count.to_string(),
            "data.sigma" => self.sigma.to_string(),
            "data.clamp" => self.clamp.to_string(),
            "data.raster" => self.raster.to_string(),
            "train.task" => self.task.to_string(),
            "train.iterations" => self.iterations.to_string(),
            "train.batch" => self.batch.to_string(),
            "train.lr_aln" => self.lr_aln.to_string(),
            "train.lr_clf" => self.lr_clf.to_string(),
            "train.lr_drop_at" => self.lr_drop_at.to_string(),
            "train.lr_drop_factor" => self.lr_drop_factor.to_string(),
            "train.log_every" => self.log_every.to_string(),
            "eval.seed" => self.eval_seed.to_string(),
            "eval.batch" => self.eval_batch.to_string(),
            "eval.auc_threshold" => self.auc_threshold.to_string(),
            "eval.ced_points" => self.ced_points.to_string(),
            "eval.gallery_samples" => self.gallery_samples.to_string(),
            "eval.sigmas" => self
                .eval_sigmas
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join(","),
            "gradcheck.fault" => self.gradcheck_fault.clone().unwrap_or_default(),
            _ => return None,
        })
    }

    /// Every key with its value, one per line, in [`KEYS`] order.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            writeln!(s, "{k} = {}", self.get(k).expect("known key")).expect("string write");
        }
        s
    }

    /// SHA-256 of [`RunConfig::render`].
    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.render().as_bytes()).into()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.model_kind != ModelKind::Cnn && self.levels == 0 {
            return bad("model.levels must be at least 1".into());
        }
        if !(self.dropout_keep > 0.0 && self.dropout_keep <= 1.0) {
            return bad(format!("model.dropout_keep must be in (0, 1], got {}", self.dropout_keep));
        }
        if self.kf == 0 {
            return bad("model.kf must be at least 1".into());
        }
        if self.model_kind == ModelKind::Cnn && self.classifier.is_none() {
            return bad("model.kind = cnn needs model.classifier".into());
        }
        if self.task == Task::Classify && self.classifier.is_none() {
            return bad("train.task = classify needs model.classifier".into());
        }
        if self.task == Task::Corners && !matches!(self.model_kind, ModelKind::Stack(k) if k != StackKind::Stn) {
            return bad("train.task = corners needs model.kind cstn, icstn or destnet".into());
        }
        if self.train_count == 0 || self.test_count == 0 {
            return bad("data.train_count and data.test_count must be positive".into());
        }
        for s in std::iter::once(self.sigma).chain(self.eval_sigmas.iter().copied()) {
            if !(s > 0.0 && s <= 0.5) {
                return bad(format!("perturbation sigma must be in (0, 0.5], got {s}"));
            }
        }
        if self.raster < 8 {
            return bad(format!("data.raster must be at least 8, got {}", self.raster));
        }
        if self.eval_batch == 0 || self.ced_points < 2 || !(self.auc_threshold > 0.0) {
            return bad("eval.batch >= 1, eval.ced_points >= 2 and eval.auc_threshold > 0 are required".into());
        }
        self.train_config().validate()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.iterations,
            batch: self.batch,
            lr_aln: self.lr_aln,
            lr_clf: self.lr_clf,
            lr_drop_at: self.lr_drop_at,
            lr_drop_factor: self.lr_drop_factor,
            seed: self.seed,
            task: self.task,
            log_every: self.log_every,
        }
    }

    pub fn model_spec(&self, channels: usize, raster: (usize, usize)) -> ModelSpec {
        let stack = match self.model_kind {
            ModelKind::Stack(kind) => Some(StackConfig {
                kind,
                levels: self.levels,
                arch: self.arch.clone(),
                fusion: self.fusion,
                kf: self.kf,
                keep_prob: self.dropout_keep,
            }),
            ModelKind::Cnn => None,
        };
        ModelSpec {
            stack,
            classifier: if self.task == Task::Classify { self.classifier.clone() } else { None },
            channels,
            raster,
        }
    }

    pub fn perturb_config(&self, sigma: f64, raster: usize) -> Result<PerturbConfig> {
        PerturbConfig::new(sigma, raster, self.clamp)
    }

    /// Perturbation levels evaluated by `compare`.
    pub fn sigmas(&self) -> Vec<f64> {
        if self.eval_sigmas.is_empty() {
            vec![self.sigma]
        } else {
            self.eval_sigmas.clone()
        }
    }

    /// Short model label such as `DeSTNet-4` or `CNN`.
    pub fn model_label(&self) -> String {
        match self.model_kind {
            ModelKind::Cnn => "CNN".into(),
            ModelKind::Stack(k) => {
                let name = match k {
                    StackKind::Stn => "STN",
                    StackKind::Cstn => "CSTN",
                    StackKind::Icstn => "ICSTN",
                    StackKind::Destnet => "DeSTNet",
                };
                let suffix = match (k, self.fusion) {
                    (StackKind::Destnet, FusionMode::Bottleneck) => " (bottleneck)",
                    (StackKind::Destnet, FusionMode::PassThrough) => " (passthrough)",
                    _ => "",
                };
                format!("{name}-{}{suffix}", self.levels)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_and_render_round_trip() {
        let cfg = RunConfig::parse(
            "# desk run\nseed = 3\nmodel.kind = cstn\nmodel.levels=1\ntrain.lr_aln = 2e-4 # faster\neval.sigmas = 0.1, 0.2\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.model_kind, ModelKind::Stack(StackKind::Cstn));
        assert_eq!(cfg.lr_aln, 2e-4);
        assert_eq!(cfg.eval_sigmas, vec![0.1, 0.2]);
        let back = RunConfig::parse(&cfg.render()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_ne!(RunConfig::default().hash(), cfg.hash());
    }

    #[test]
    fn unknown_and_malformed_rejected() {
        assert!(matches!(RunConfig::parse("model.colour = red"), Err(Error::Config(_))));
        assert!(RunConfig::parse("seed").is_err());
        assert!(RunConfig::parse("seed = 1\nseed = 2").is_err());
        assert!(RunConfig::parse("model.levels = two").is_err());
        assert!(RunConfig::parse("model.arch = conv3-4 | FC(").is_err());
        assert!(RunConfig::parse("train.lr_drop_at = 9999").is_err());
    }

    #[test]
    fn env_overrides() {
        let mut cfg = RunConfig::default();
        let vars = vec![
            ("DESTNET_TRAIN_LR_ALN".to_string(), "0.5".to_string()),
            ("DESTNET_SEED".to_string(), "9".to_string()),
            ("DESTNET_MODEL_KIND".to_string(), "icstn".to_string()),
            ("PATH".to_string(), "/bin".to_string()),
        ];
        cfg.apply_env(vars).unwrap();
        assert_eq!(cfg.lr_aln, 0.5);
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.model_kind, ModelKind::Stack(StackKind::Icstn));
        let err = cfg.apply_env(vec![("DESTNET_TRAIN_MOMENTUM".to_string(), "0.9".to_string())]);
        assert!(matches!(err, Err(Error::Config(m)) if m.contains("DESTNET_TRAIN_MOMENTUM")));
    }

    #[test]
    fn task_consistency() {
        assert!(RunConfig::parse("train.task = corners\nmodel.kind = stn").is_err());
        assert!(RunConfig::parse("model.classifier = none").is_err());
        let c = RunConfig::parse("train.task = corners\nmodel.classifier = none").unwrap();
        assert!(c.model_spec(1, (28, 28)).classifier.is_none());
    }

    #[test]
    fn labels() {
        assert_eq!(RunConfig::default().model_label(), "DeSTNet-4");
        let c = RunConfig::parse("model.kind = cnn").unwrap();
        assert_eq!(c.model_label(), "CNN");
    }
}
