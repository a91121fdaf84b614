use std::fmt::Write as _;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::losses::{AlphaMode, LossWeights};
use crate::nn::{Head, InputSource, NetworkSpec};

/// The five model variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Experiment {
    SingleIntrinsics,
    SingleSegmentation,
    CascadeAlbedoToSeg,
    CascadeSegToIntrinsics,
    Joint,
}

impl Experiment {
    pub const ALL: [Experiment; 5] = [
        Experiment::SingleIntrinsics,
        Experiment::SingleSegmentation,
        Experiment::CascadeAlbedoToSeg,
        Experiment::CascadeSegToIntrinsics,
        Experiment::Joint,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Experiment::SingleIntrinsics => "single_intrinsics",
            Experiment::SingleSegmentation => "single_segmentation",
            Experiment::CascadeAlbedoToSeg => "cascade_albedo_to_seg",
            Experiment::CascadeSegToIntrinsics => "cascade_seg_to_intrinsics",
            Experiment::Joint => "joint",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|e| e.name() == s.trim())
            .ok_or_else(|| {
                let valid: Vec<&str> = Self::ALL.iter().map(|e| e.name()).collect();
                Error::Config(format!("unknown experiment {s:?}; valid: {}", valid.join(", ")))
            })
    }

    pub fn heads(self) -> &'static [Head] {
        match self {
            Experiment::SingleIntrinsics | Experiment::CascadeSegToIntrinsics => {
                &[Head::Reflectance, Head::Shading]
            }
            Experiment::SingleSegmentation | Experiment::CascadeAlbedoToSeg => &[Head::Segmentation],
            Experiment::Joint => &[Head::Reflectance, Head::Shading, Head::Segmentation],
        }
    }

    pub fn input_source(self) -> InputSource {
        match self {
            Experiment::CascadeAlbedoToSeg => InputSource::Albedo,
            Experiment::CascadeSegToIntrinsics => InputSource::RgbLabels,
            _ => InputSource::Rgb,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassWeighting {
    MedianFrequency,
    Uniform,
}

impl ClassWeighting {
    pub fn name(self) -> &'static str {
        match self {
            ClassWeighting::MedianFrequency => "median",
            ClassWeighting::Uniform => "uniform",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "median" => Ok(ClassWeighting::MedianFrequency),
            "uniform" => Ok(ClassWeighting::Uniform),
            other => Err(Error::Config(format!(
                "unknown class weighting {other:?} (expected median or uniform)"
            ))),
        }
    }
}

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub experiment: Experiment,
    pub epochs: usize,
    pub seed: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub loss: LossWeights,
    pub alpha_mode: AlphaMode,
    pub class_weighting: ClassWeighting,
    pub encoder_features: Vec<usize>,
    pub mirror_links: bool,
    pub inter_connections: bool,
    /// Heads receiving updates; `None` means every head of the experiment.
    pub trainable_heads: Option<Vec<Head>>,
    pub train_encoder: bool,
    /// Expected input resolution; `None` accepts the dataset's.
    pub resolution: Option<(usize, usize)>,
    /// Use only the first `n` training samples (0 = all).
    pub train_limit: usize,
    /// Checkpoint whose predictions replace ground truth as the cascade input.
    pub cascade_source: Option<PathBuf>,
    /// Start from these parameters instead of a fresh initialisation.
    pub init_checkpoint: Option<PathBuf>,
    pub eval_every_epoch: bool,
}

/// Recognised keys, in canonical order.
pub const CONFIG_KEYS: [&str; 28] = [
    "experiment",
    "epochs",
    "seed",
    "batch_size",
    "lr",
    "rho",
    "eps",
    "weight_decay",
    "gamma_smse",
    "gamma_mse",
    "gamma_r",
    "gamma_s",
    "gamma_ce",
    "gamma_il",
    "intrinsic_scale",
    "w",
    "alpha_mode",
    "class_weighting",
    "encoder_features",
    "mirror_links",
    "inter_connections",
    "trainable_heads",
    "train_encoder",
    "resolution",
    "train_limit",
    "cascade_source",
    "init_checkpoint",
    "eval_every_epoch",
];

impl TrainConfig {
    /// Toy-scale defaults.
    pub fn new(experiment: Experiment, epochs: usize) -> Self {
        Self {
            experiment,
            epochs,
            seed: 0,
            batch_size: 4,
            lr: 0.01,
            rho: 0.95,
            eps: 1e-6,
            weight_decay: 1e-9,
            loss: LossWeights::default(),
            alpha_mode: AlphaMode::Detached,
            class_weighting: ClassWeighting::MedianFrequency,
            encoder_features: vec![8, 16, 32, 64],
            mirror_links: true,
            inter_connections: true,
            trainable_heads: None,
            train_encoder: true,
            resolution: None,
            train_limit: 0,
            cascade_source: None,
            init_checkpoint: None,
            eval_every_epoch: false,
        }
    }

    /// Applies one `key=value` setting.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let bad = |what: &str| Error::Config(format!("{key}: expected {what}, got {v:?}"));
        let float = || v.parse::<f64>().map_err(|_| bad("a number"));
        let uint = || v.parse::<usize>().map_err(|_| bad("a non-negative integer"));
        let boolean = || match v {
            "true" | "1" | "yes" | "on" => Ok(true),
            "false" | "0" | "no" | "off" => Ok(false),
            _ => Err(bad("true or false")),
        };
        let path = || (!v.is_empty() && v != "none").then(|| PathBuf::from(v));
        match key.trim() {
            "experiment" => self.experiment = Experiment::parse(v)?,
            "epochs" => self.epochs = uint()?,
            "seed" => self.seed = v.parse().map_err(|_| bad("a 64-bit unsigned integer"))?,
            "batch_size" => self.batch_size = uint()?,
            "lr" => self.lr = float()?,
            "rho" => self.rho = float()?,
            "eps" => self.eps = float()?,
            "weight_decay" => self.weight_decay = float()?,
            "gamma_smse" => self.loss.gamma_smse = float()?,
            "gamma_mse" => self.loss.gamma_mse = float()?,
            "gamma_r" => self.loss.gamma_r = float()?,
            "gamma_s" => self.loss.gamma_s = float()?,
            "gamma_ce" => self.loss.gamma_ce = float()?,
            "gamma_il" => self.loss.gamma_il = float()?,
            "intrinsic_scale" => self.loss.intrinsic_scale = float()?,
            "w" => self.loss.w = float()?,
            "alpha_mode" => self.alpha_mode = AlphaMode::parse(v)?,
            "class_weighting" => self.class_weighting = ClassWeighting::parse(v)?,
            "encoder_features" => {
                self.encoder_features = v
                    .split(',')
                    .map(|s| s.trim().parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|_| bad("a comma-separated list of widths"))?
            }
            "mirror_links" => self.mirror_links = boolean()?,
            "inter_connections" => self.inter_connections = boolean()?,
            "trainable_heads" => {
                self.trainable_heads = match v {
                    "all" => None,
                    "none" | "" => Some(Vec::new()),
                    list => Some(
                        list.split(',')
                            .map(|h| Head::parse(h).map_err(|e| Error::Config(e.to_string())))
                            .collect::<Result<_>>()?,
                    ),
                }
            }
            "train_encoder" => self.train_encoder = boolean()?,
            "resolution" => {
                self.resolution = if v == "auto" {
                    None
                } else {
                    Some(parse_size(v).map_err(|_| bad("auto or HxW"))?)
                }
            }
            "train_limit" => self.train_limit = uint()?,
            "cascade_source" => self.cascade_source = path(),
            "init_checkpoint" => self.init_checkpoint = path(),
            "eval_every_epoch" => self.eval_every_epoch = boolean()?,
            other => {
                return Err(Error::Config(format!(
                    "unknown config key {other:?}; valid keys: {}",
                    CONFIG_KEYS.join(", ")
                )))
            }
        }
        Ok(())
    }

    /// Parses a `key=value` file; `experiment` and `epochs` are required
    /// unless supplied by `base`.
    pub fn parse_with(base: Option<TrainConfig>, text: &str) -> Result<Self> {
        let pairs = parse_pairs(text)?;
        let mut cfg = match base {
            Some(b) => b,
            None => {
                let exp = pairs
                    .iter()
                    .find(|(k, _)| k == "experiment")
                    .ok_or_else(|| Error::Config("missing required key experiment".into()))?;
                if !pairs.iter().any(|(k, _)| k == "epochs") {
                    return Err(Error::Config("missing required key epochs".into()));
                }
                TrainConfig::new(Experiment::parse(&exp.1)?, 0)
            }
        };
        for (k, v) in &pairs {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::parse_with(None, text)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.batch_size < 2 {
            return err(format!("batch_size must be at least 2 (batch normalisation), got {}", self.batch_size));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0) {
            return err(format!("lr must be finite and >= 0, got {}", self.lr));
        }
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return err(format!("rho must lie in (0, 1), got {}", self.rho));
        }
        if !(self.eps.is_finite() && self.eps > 0.0) {
            return err(format!("eps must be positive, got {}", self.eps));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return err(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        self.loss.validate()?;
        if self.encoder_features.len() < 2 || self.encoder_features.contains(&0) {
            return err("encoder_features needs at least two positive widths".into());
        }
        if let Some(heads) = &self.trainable_heads {
            for h in heads {
                if !self.experiment.heads().contains(h) {
                    return err(format!(
                        "trainable head {} is not part of experiment {}",
                        h.name(),
                        self.experiment.name()
                    ));
                }
            }
        }
        if let Some((h, w)) = self.resolution {
            let m = 1usize << self.encoder_features.len();
            if h % m != 0 || w % m != 0 {
                return err(format!("resolution {h}x{w} is not divisible by {m}"));
            }
        }
        if self.cascade_source.is_some() && self.experiment.input_source() == InputSource::Rgb {
            return err(format!("cascade_source is only meaningful for cascade experiments, not {}", self.experiment.name()));
        }
        Ok(())
    }

    pub fn network_spec(&self, num_classes: usize) -> NetworkSpec {
        let mut spec = NetworkSpec::new(self.experiment.heads(), num_classes).with_input(self.experiment.input_source());
        spec.encoder_features = self.encoder_features.clone();
        spec.mirror_links = self.mirror_links;
        spec.inter_connections = self.inter_connections;
        spec
    }

    /// Every key in canonical order, one `key=value` per line.
    pub fn to_text(&self) -> String {
        let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let opt_path = |p: &Option<PathBuf>| p.as_ref().map_or("none".to_string(), |p| p.display().to_string());
        let l = &self.loss;
        let values: [String; 28] = [
            self.experiment.name().into(),
            self.epochs.to_string(),
            self.seed.to_string(),
            self.batch_size.to_string(),
            format!("{:?}", self.lr),
            format!("{:?}", self.rho),
            format!("{:?}", self.eps),
            format!("{:?}", self.weight_decay),
            format!("{:?}", l.gamma_smse),
            format!("{:?}", l.gamma_mse),
            format!("{:?}", l.gamma_r),
            format!("{:?}", l.gamma_s),
            format!("{:?}", l.gamma_ce),
            format!("{:?}", l.gamma_il),
            format!("{:?}", l.intrinsic_scale),
            format!("{:?}", l.w),
            self.alpha_mode.name().into(),
            self.class_weighting.name().into(),
            join(&self.encoder_features),
            self.mirror_links.to_string(),
            self.inter_connections.to_string(),
            match &self.trainable_heads {
                None => "all".into(),
                Some(h) if h.is_empty() => "none".into(),
                Some(h) => h.iter().map(|h| h.name()).collect::<Vec<_>>().join(","),
            },
            self.train_encoder.to_string(),
            self.resolution.map_or("auto".into(), |(h, w)| format!("{h}x{w}")),
            self.train_limit.to_string(),
            opt_path(&self.cascade_source),
            opt_path(&self.init_checkpoint),
            self.eval_every_epoch.to_string(),
        ];
        let mut s = String::new();
        for (k, v) in CONFIG_KEYS.iter().zip(values) {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }

    /// FNV-1a 64 of the canonical text.
    pub fn hash(&self) -> u64 {
        fnv1a64(self.to_text().as_bytes())
    }
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// `HxW`, e.g. `96x128`.
pub fn parse_size(s: &str) -> Result<(usize, usize)> {
    let (h, w) = s
        .trim()
        .split_once(['x', 'X'])
        .ok_or_else(|| Error::Config(format!("expected HxW, got {s:?}")))?;
    let p = |v: &str| {
        v.trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("expected HxW with positive sides, got {s:?}")))
    };
    Ok((p(h)?, p(w)?))
}

fn parse_pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value, got {line:?}", i + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_text_round_trips() {
        let mut c = TrainConfig::new(Experiment::Joint, 3);
        c.set("w", "0.5").unwrap();
        c.set("trainable_heads", "segmentation").unwrap();
        c.set("resolution", "32x48").unwrap();
        let back = TrainConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn hash_changes_with_any_field() {
        let a = TrainConfig::new(Experiment::Joint, 3);
        let mut b = a.clone();
        b.seed = 1;
        assert_ne!(a.hash(), b.hash());
    }

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
        assert_eq!(fnv1a64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x85944171f73967e8);
    }

    #[test]
    fn unknown_experiment_lists_valid_set() {
        let e = Experiment::parse("triple").unwrap_err().to_string();
        for x in Experiment::ALL {
            assert!(e.contains(x.name()));
        }
    }

    #[test]
    fn required_keys_and_unknown_keys() {
        assert!(TrainConfig::parse("epochs=1").is_err());
        assert!(TrainConfig::parse("experiment=joint").is_err());
        assert!(TrainConfig::parse("experiment=joint\nepochs=1\nbogus=2").is_err());
        let c = TrainConfig::parse("# toy\nexperiment=joint\nepochs=2\n").unwrap();
        assert_eq!(c.epochs, 2);
    }

    #[test]
    fn later_settings_override_earlier() {
        let base = TrainConfig::parse("experiment=joint\nepochs=2\nlr=0.5").unwrap();
        let c = TrainConfig::parse_with(Some(base), "lr=1.0").unwrap();
        assert_eq!(c.lr, 1.0);
        assert_eq!(c.epochs, 2);
    }

    #[test]
    fn validation() {
        let ok = TrainConfig::new(Experiment::SingleSegmentation, 1);
        assert!(ok.validate().is_ok());
        assert!(TrainConfig { batch_size: 1, ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { trainable_heads: Some(vec![Head::Shading]), ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { resolution: Some((30, 32)), ..ok.clone() }.validate().is_err());
        assert!(TrainConfig { cascade_source: Some("x".into()), ..ok }.validate().is_err());
    }

    #[test]
    fn experiment_specs() {
        let c = TrainConfig::new(Experiment::CascadeSegToIntrinsics, 1);
        let s = c.network_spec(8);
        assert_eq!(s.input_channels, 4);
        assert_eq!(s.heads, vec![Head::Reflectance, Head::Shading]);
        let s = TrainConfig::new(Experiment::CascadeAlbedoToSeg, 1).network_spec(8);
        assert_eq!(s.input_source, InputSource::Albedo);
        assert_eq!(s.heads, vec![Head::Segmentation]);
    }

    #[test]
    fn size_parsing() {
        assert_eq!(parse_size("96x128").unwrap(), (96, 128));
        assert!(parse_size("96").is_err());
        assert!(parse_size("0x4").is_err());
    }
}
