//! Run configuration: a flat `key = value` file with `#` comments.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use erasing_core::attention::AttentionMethod;
use erasing_core::datasets::SyntheticSpec;
use erasing_core::nn::ConvNetConfig;
use erasing_core::training::HyperParams;

/// Environment variable that replaces the configured output directory.
pub const OUTPUT_ROOT_ENV: &str = "ERASING_OUTPUT_ROOT";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DatasetKind {
    Synthetic,
    Voc,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Backbone {
    ConvNet,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub hp: HyperParams,
    pub dataset: DatasetKind,
    pub voc_root: Option<PathBuf>,
    pub train_split: String,
    pub eval_split: String,
    pub synth: SyntheticSpec,
    pub synth_train_count: usize,
    pub synth_eval_count: usize,
    pub backbone: Backbone,
    pub localizer_channels: Vec<usize>,
    pub localizer_pool: Vec<bool>,
    pub adversarial_channels: Vec<usize>,
    pub adversarial_pool: Vec<bool>,
    pub localizer_weights: Option<PathBuf>,
    pub attention: AttentionMethod,
    pub score_threshold: f64,
    pub output_dir: PathBuf,
    pub checkpoint_every: usize,
    pub eval_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let net = ConvNetConfig::small(20);
        Self {
            hp: HyperParams::default(),
            dataset: DatasetKind::Synthetic,
            voc_root: None,
            train_split: "train_aug".into(),
            eval_split: "val".into(),
            synth: SyntheticSpec::default(),
            synth_train_count: 2000,
            synth_eval_count: 200,
            backbone: Backbone::ConvNet,
            localizer_channels: net.channels.clone(),
            localizer_pool: net.pool_after.clone(),
            adversarial_channels: net.channels,
            adversarial_pool: net.pool_after,
            localizer_weights: None,
            attention: AttentionMethod::GradCam,
            score_threshold: 0.5,
            output_dir: PathBuf::from("runs/default"),
            checkpoint_every: 0,
            eval_every: 0,
        }
    }
}

/// A config problem, always naming the offending key.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("{key}: {reason}")]
pub struct ConfigError {
    pub key: String,
    pub reason: String,
}

fn err(key: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError {
        key: key.to_string(),
        reason: reason.into(),
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    v.parse().map_err(|e| err(key, format!("cannot parse `{v}`: {e}")))
}

fn boolean(key: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(err(key, format!("expected true or false, got `{v}`"))),
    }
}

fn list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>, ConfigError>
where
    T::Err: std::fmt::Display,
{
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| num(key, s.trim())).collect()
}

fn bools(key: &str, v: &str) -> Result<Vec<bool>, ConfigError> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| boolean(key, s.trim())).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn opt_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn parse_opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

/// Every key, in file order, with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("alpha", "weight of the attention-mining term"),
    ("beta", "weight of the attention-area term"),
    ("omega", "soft-threshold sharpness"),
    ("psi", "soft-threshold level"),
    ("rho", "background score for segmentation"),
    ("lr_localizer", "localizer learning rate"),
    ("lr_adversarial", "adversarial learning rate"),
    ("momentum", "SGD momentum (both networks)"),
    ("weight_decay", "SGD weight decay (both networks)"),
    ("batch_size", "images per step"),
    ("phase_length", "steps per phase before switching networks"),
    ("epochs", "passes over the training split"),
    ("crop", "training crop side in pixels"),
    ("augment", "random resize-and-crop"),
    ("flip", "random horizontal flips (only with augment)"),
    ("seed", "seed for initialization, shuffling and augmentation"),
    ("adversarial_target", "full | erased-class"),
    ("mining_score", "sigmoid | logit"),
    ("dataset", "synthetic | voc"),
    ("voc_root", "VOC-style dataset directory"),
    ("train_split", "VOC split used for training"),
    ("eval_split", "VOC split used for evaluation"),
    ("synth_classes", "synthetic class count"),
    ("synth_canvas", "synthetic image side in pixels"),
    ("synth_min_shapes", "fewest shapes per synthetic image"),
    ("synth_max_shapes", "most shapes per synthetic image"),
    ("synth_marker_fraction", "share of each shape covered by its marker"),
    ("synth_background_noise", "amplitude of background pixel noise"),
    ("synth_texture_contrast", "contrast of the class-oriented body stripes"),
    ("synth_seed", "synthetic generator seed"),
    ("synth_train_count", "synthetic training images"),
    ("synth_eval_count", "synthetic evaluation images"),
    ("backbone", "convnet"),
    ("localizer_channels", "localizer conv widths"),
    ("localizer_pool", "localizer 2x2 max-pool after each conv"),
    ("adversarial_channels", "adversarial conv widths"),
    ("adversarial_pool", "adversarial 2x2 max-pool after each conv"),
    ("localizer_weights", "optional pretrained localizer checkpoint"),
    ("attention", "cam | grad_cam"),
    ("score_threshold", "class score gate when labels are unknown"),
    ("output_dir", "where runs write their files"),
    ("checkpoint_every", "checkpoint cadence in steps (0: final only)"),
    ("eval_every", "evaluation cadence in steps (0: final only)"),
];

impl RunConfig {
    pub fn get(&self, key: &str) -> Option<String> {
        let hp = &self.hp;
        Some(match key {
            "alpha" => hp.alpha.to_string(),
            "beta" => hp.beta.to_string(),
            "omega" => hp.omega.to_string(),
            "psi" => hp.psi.to_string(),
            "rho" => hp.rho.to_string(),
            "lr_localizer" => hp.lr_localizer.to_string(),
            "lr_adversarial" => hp.lr_adversarial.to_string(),
            "momentum" => hp.momentum.to_string(),
            "weight_decay" => hp.weight_decay.to_string(),
            "batch_size" => hp.batch_size.to_string(),
            "phase_length" => hp.phase_length.to_string(),
            "epochs" => hp.epochs.to_string(),
            "crop" => hp.crop.to_string(),
            "augment" => hp.augment.to_string(),
            "flip" => hp.flip.to_string(),
            "seed" => hp.seed.to_string(),
            "adversarial_target" => hp.adversarial_target.to_string(),
            "mining_score" => hp.mining_score.to_string(),
            "dataset" => match self.dataset {
                DatasetKind::Synthetic => "synthetic".into(),
                DatasetKind::Voc => "voc".into(),
            },
            "voc_root" => opt_path(&self.voc_root),
            "train_split" => self.train_split.clone(),
            "eval_split" => self.eval_split.clone(),
            "synth_classes" => self.synth.class_count.to_string(),
            "synth_canvas" => self.synth.canvas_size.to_string(),
            "synth_min_shapes" => self.synth.min_shapes.to_string(),
            "synth_max_shapes" => self.synth.max_shapes.to_string(),
            "synth_marker_fraction" => self.synth.marker_fraction.to_string(),
            "synth_background_noise" => self.synth.background_noise.to_string(),
            "synth_texture_contrast" => self.synth.texture_contrast.to_string(),
            "synth_seed" => self.synth.seed.to_string(),
            "synth_train_count" => self.synth_train_count.to_string(),
            "synth_eval_count" => self.synth_eval_count.to_string(),
            "backbone" => "convnet".into(),
            "localizer_channels" => join(&self.localizer_channels),
            "localizer_pool" => join(&self.localizer_pool),
            "adversarial_channels" => join(&self.adversarial_channels),
            "adversarial_pool" => join(&self.adversarial_pool),
            "localizer_weights" => opt_path(&self.localizer_weights),
            "attention" => self.attention.to_string(),
            "score_threshold" => self.score_threshold.to_string(),
            "output_dir" => self.output_dir.display().to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            "eval_every" => self.eval_every.to_string(),
            _ => return None,
        })
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        let v = v.trim();
        let hp = &mut self.hp;
        match key {
            "alpha" => hp.alpha = num(key, v)?,
            "beta" => hp.beta = num(key, v)?,
            "omega" => hp.omega = num(key, v)?,
            "psi" => hp.psi = num(key, v)?,
            "rho" => hp.rho = num(key, v)?,
            "lr_localizer" => hp.lr_localizer = num(key, v)?,
            "lr_adversarial" => hp.lr_adversarial = num(key, v)?,
            "momentum" => hp.momentum = num(key, v)?,
            "weight_decay" => hp.weight_decay = num(key, v)?,
            "batch_size" => hp.batch_size = num(key, v)?,
            "phase_length" => hp.phase_length = num(key, v)?,
            "epochs" => hp.epochs = num(key, v)?,
            "crop" => hp.crop = num(key, v)?,
            "augment" => hp.augment = boolean(key, v)?,
            "flip" => hp.flip = boolean(key, v)?,
            "seed" => hp.seed = num(key, v)?,
            "adversarial_target" => hp.adversarial_target = num(key, v)?,
            "mining_score" => hp.mining_score = num(key, v)?,
            "dataset" => {
                self.dataset = match v {
                    "synthetic" => DatasetKind::Synthetic,
                    "voc" => DatasetKind::Voc,
                    _ => return Err(err(key, format!("expected synthetic or voc, got `{v}`"))),
                }
            }
            "voc_root" => self.voc_root = parse_opt_path(v),
            "train_split" => self.train_split = v.to_string(),
            "eval_split" => self.eval_split = v.to_string(),
            "synth_classes" => self.synth.class_count = num(key, v)?,
            "synth_canvas" => self.synth.canvas_size = num(key, v)?,
            "synth_min_shapes" => self.synth.min_shapes = num(key, v)?,
            "synth_max_shapes" => self.synth.max_shapes = num(key, v)?,
            "synth_marker_fraction" => self.synth.marker_fraction = num(key, v)?,
            "synth_background_noise" => self.synth.background_noise = num(key, v)?,
            "synth_texture_contrast" => self.synth.texture_contrast = num(key, v)?,
            "synth_seed" => self.synth.seed = num(key, v)?,
            "synth_train_count" => self.synth_train_count = num(key, v)?,
            "synth_eval_count" => self.synth_eval_count = num(key, v)?,
            "backbone" => {
                if v != "convnet" {
                    return Err(err(key, format!("unknown backbone `{v}` (available: convnet)")));
                }
                self.backbone = Backbone::ConvNet;
            }
            "localizer_channels" => self.localizer_channels = list(key, v)?,
            "localizer_pool" => self.localizer_pool = bools(key, v)?,
            "adversarial_channels" => self.adversarial_channels = list(key, v)?,
            "adversarial_pool" => self.adversarial_pool = bools(key, v)?,
            "localizer_weights" => self.localizer_weights = parse_opt_path(v),
            "attention" => self.attention = v.parse().map_err(|e| err(key, format!("{e}")))?,
            "score_threshold" => self.score_threshold = num(key, v)?,
            "output_dir" => self.output_dir = PathBuf::from(v),
            "checkpoint_every" => self.checkpoint_every = num(key, v)?,
            "eval_every" => self.eval_every = num(key, v)?,
            _ => return Err(err(key, "unknown key")),
        }
        Ok(())
    }

    /// Parse file text over `self`; later lines win.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split_once('#').map_or(raw, |(a, _)| a).trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(&format!("line {}", n + 1), "expected `key = value`"))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::from("# erasing run configuration\n");
        for (k, doc) in KEYS {
            let v = self.get(k).expect("every listed key is readable");
            writeln!(out, "\n# {doc}\n{k} = {v}").unwrap();
        }
        out
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| err("config", format!("{}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    pub fn class_count(&self) -> usize {
        match self.dataset {
            DatasetKind::Synthetic => self.synth.class_count,
            DatasetKind::Voc => erasing_core::datasets::VOC_CLASSES.len(),
        }
    }

    pub fn localizer_config(&self) -> ConvNetConfig {
        ConvNetConfig {
            channels: self.localizer_channels.clone(),
            pool_after: self.localizer_pool.clone(),
            ..ConvNetConfig::small(self.class_count())
        }
    }

    pub fn adversarial_config(&self) -> ConvNetConfig {
        ConvNetConfig {
            channels: self.adversarial_channels.clone(),
            pool_after: self.adversarial_pool.clone(),
            ..ConvNetConfig::small(self.class_count())
        }
    }

    /// Cross-field checks; each failure names a key.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let hp = &self.hp;
        let positive = [
            ("lr_localizer", hp.lr_localizer),
            ("lr_adversarial", hp.lr_adversarial),
            ("omega", hp.omega),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(err(k, format!("must be positive, got {v}")));
            }
        }
        for (k, v) in [("alpha", hp.alpha), ("beta", hp.beta), ("weight_decay", hp.weight_decay)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(err(k, format!("must be non-negative, got {v}")));
            }
        }
        if !(0.0..1.0).contains(&hp.momentum) {
            return Err(err("momentum", "must lie in [0, 1)"));
        }
        if !(hp.rho > 0.0 && hp.rho < 1.0) {
            return Err(err("rho", "must lie in (0, 1)"));
        }
        for (k, v) in [
            ("batch_size", hp.batch_size),
            ("phase_length", hp.phase_length),
            ("crop", hp.crop),
        ] {
            if v == 0 {
                return Err(err(k, "must be at least 1"));
            }
        }
        if !(0.0..=1.0).contains(&self.score_threshold) {
            return Err(err("score_threshold", "must lie in [0, 1]"));
        }
        match self.dataset {
            DatasetKind::Voc if self.voc_root.is_none() => {
                return Err(err("voc_root", "required when dataset = voc"));
            }
            DatasetKind::Synthetic => {
                self.synth
                    .validate()
                    .map_err(|e| err("synth_classes", e.to_string()))?;
                if self.synth_train_count == 0 {
                    return Err(err("synth_train_count", "must be at least 1"));
                }
            }
            _ => {}
        }
        if let Err(e) = self.localizer_config().validate() {
            return Err(err("localizer_channels", e.to_string()));
        }
        if let Err(e) = self.adversarial_config().validate() {
            return Err(err("adversarial_channels", e.to_string()));
        }
        Ok(())
    }

    /// Training hyperparameters as core sees them (crop follows the canvas
    /// for synthetic data when augmentation is off).
    pub fn hyperparams(&self) -> HyperParams {
        self.hp.clone()
    }
}

/// A fixed small setup used by the synthetic ablation: 3 classes on 64x64
/// canvases, momentum SGD and un-augmented crops.
pub fn desk_preset() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.synth = SyntheticSpec {
        class_count: 3,
        canvas_size: 64,
        marker_fraction: 0.1,
        ..SyntheticSpec::default()
    };
    cfg.hp.crop = 64;
    cfg.hp.augment = false;
    cfg.hp.momentum = 0.9;
    cfg
}


#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_follow_published_settings() {
        let c = RunConfig::default();
        assert_eq!(c.hp.alpha, 0.05);
        assert_eq!(c.hp.beta, 1e-5);
        assert_eq!(c.hp.omega, 100.0);
        assert_eq!(c.hp.psi, 0.5);
        assert_eq!(c.hp.rho, 0.3);
        assert_eq!(c.hp.batch_size, 16);
        assert_eq!(c.hp.lr_localizer, 0.01);
        assert_eq!(c.hp.lr_adversarial, 0.01);
        assert_eq!(c.hp.epochs, 10);
        assert_eq!(c.hp.phase_length, 200);
        assert_eq!(c.hp.crop, 448);
    }

    #[test]
    fn every_key_reads_and_writes() {
        let mut c = RunConfig::default();
        for (k, _) in KEYS {
            let v = c.get(k).unwrap();
            c.set(k, &v).unwrap();
        }
        assert_eq!(c, RunConfig::default());
        assert!(c.get("nope").is_none());
    }

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let c = RunConfig::from_text("# hi\n\nalpha = 0.5 # trailing\n  seed=9\n").unwrap();
        assert_eq!(c.hp.alpha, 0.5);
        assert_eq!(c.hp.seed, 9);
    }

    #[test]
    fn errors_name_the_field() {
        let e = RunConfig::from_text("alpha = lots").unwrap_err();
        assert_eq!(e.key, "alpha");
        let e = RunConfig::from_text("colour = red").unwrap_err();
        assert_eq!(e.key, "colour");
        let e = RunConfig::from_text("just words").unwrap_err();
        assert!(e.key.starts_with("line 1"));
        let mut c = RunConfig::default();
        c.hp.rho = 1.5;
        assert_eq!(c.validate().unwrap_err().key, "rho");
        c = RunConfig::default();
        c.dataset = DatasetKind::Voc;
        assert_eq!(c.validate().unwrap_err().key, "voc_root");
    }

    #[test]
    fn desk_preset_is_valid() {
        desk_preset().validate().unwrap();
        RunConfig::default().validate().unwrap();
    }

    proptest! {
        #[test]
        fn text_round_trip_is_lossless(
            alpha in 0.0f64..10.0, beta in 0.0f64..1.0, lr in 1e-6f64..1.0, seed in any::<u64>(),
            batch in 1usize..64, phase in 1usize..500, flip in any::<bool>(),
            chans in proptest::collection::vec(1usize..64, 1..5), marker in 0.01f64..0.99,
            grad in any::<bool>(), voc in any::<bool>(),
        ) {
            let mut c = RunConfig::default();
            c.hp.alpha = alpha;
            c.hp.beta = beta;
            c.hp.lr_localizer = lr;
            c.hp.seed = seed;
            c.hp.batch_size = batch;
            c.hp.phase_length = phase;
            c.hp.flip = flip;
            c.localizer_pool = vec![false; chans.len()];
            c.localizer_channels = chans;
            c.synth.marker_fraction = marker;
            c.attention = if grad { AttentionMethod::GradCam } else { AttentionMethod::Cam };
            if voc {
                c.dataset = DatasetKind::Voc;
                c.voc_root = Some(PathBuf::from("/data/voc"));
            }
            let back = RunConfig::from_text(&c.to_text()).unwrap();
            prop_assert_eq!(back, c);
        }
    }
}
