//! Run configuration and its `key = value` text form.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::ig2d::{GuideConfig, GuideMode};

/// Which parts of the 3D objective are switched on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct Toggles {
    pub mt: bool,
    pub ig: bool,
    pub cl: bool,
    pub fovmix: bool,
}

impl Toggles {
    pub const BASELINE: Self = Self {
        mt: false,
        ig: false,
        cl: false,
        fovmix: false,
    };
    pub const FULL: Self = Self {
        mt: true,
        ig: true,
        cl: true,
        fovmix: true,
    };

    /// The six rows of the component ablation, in order.
    pub fn ablation_rows() -> [Self; 6] {
        let t = |mt, ig, cl, fovmix| Self { mt, ig, cl, fovmix };
        [
            t(false, false, false, false),
            t(true, false, false, false),
            t(true, true, false, false),
            t(true, true, true, false),
            t(true, true, false, true),
            t(true, true, true, true),
        ]
    }

    /// Contrastive targets are guide features, so CL needs IG.
    pub fn validate(&self) -> Result<()> {
        if self.cl && !self.ig {
            return Err(Error::Config(
                "the contrastive loss (cl) requires image guidance (ig)".into(),
            ));
        }
        Ok(())
    }

    pub fn needs_guide(&self) -> bool {
        self.ig || self.cl
    }

    /// Short row label such as `MT+IG+CL`.
    pub fn label(&self) -> String {
        let parts: Vec<&str> = [
            (self.mt, "MT"),
            (self.ig, "IG"),
            (self.cl, "CL"),
            (self.fovmix, "FOVMix"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
        if parts.is_empty() {
            "baseline".into()
        } else {
            parts.join("+")
        }
    }
}

impl fmt::Display for Toggles {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = [
            (self.mt, "mt"),
            (self.ig, "ig"),
            (self.cl, "cl"),
            (self.fovmix, "fovmix"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
        if parts.is_empty() {
            write!(f, "none")
        } else {
            write!(f, "{}", parts.join(","))
        }
    }
}

impl FromStr for Toggles {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut t = Toggles::default();
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            match part.to_ascii_lowercase().as_str() {
                "mt" => t.mt = true,
                "ig" => t.ig = true,
                "cl" => t.cl = true,
                "fovmix" => t.fovmix = true,
                "none" => {}
                other => return Err(Error::Config(format!("unknown toggle `{other}`"))),
            }
        }
        Ok(t)
    }
}

/// How the training frames are labeled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Supervision {
    /// Every point labeled.
    Dense,
    /// Scribbles covering this fraction of each frame.
    Weak(f64),
    /// This fraction of frames fully labeled, the rest unlabeled.
    Semi(f64),
}

impl fmt::Display for Supervision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Supervision::Dense => write!(f, "dense"),
            Supervision::Weak(b) => write!(f, "weak:{b}"),
            Supervision::Semi(r) => write!(f, "semi:{r}"),
        }
    }
}

impl FromStr for Supervision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("bad supervision `{s}` (dense, weak:B or semi:R)"));
        match s.split_once(':') {
            None if s == "dense" => Ok(Supervision::Dense),
            Some(("weak", v)) => Ok(Supervision::Weak(v.parse().map_err(|_| bad())?)),
            Some(("semi", v)) => Ok(Supervision::Semi(v.parse().map_err(|_| bad())?)),
            _ => Err(bad()),
        }
    }
}

/// Every knob of a run. Defaults follow the reference hyper-parameters
/// where they exist and toy-scale choices elsewhere; the EMA rate is
/// shortened because toy runs last a couple of thousand steps.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    /// Guide / auxiliary feature dimension `d`.
    pub feature_dim: usize,
    /// Hidden width of the student MLP.
    pub hidden: usize,
    /// EMA rate of the 3D teacher.
    pub alpha: f64,
    /// Weight of the contrastive term.
    pub lambda: f64,
    /// Weight of projected scribble pixels in guide adaptation.
    pub lambda_p: f64,
    /// Contrastive temperature.
    pub tau: f64,
    pub supervision: Supervision,
    pub steps: usize,
    pub learning_rate: f64,
    /// Frames per step.
    pub batch: usize,
    pub toggles: Toggles,
    pub train_frames: usize,
    pub source_frames: usize,
    pub eval_frames: usize,
    /// Std of Gaussian noise added to student and teacher inputs.
    pub input_noise: f64,
    /// Largest yaw (radians) of the rotation applied before mixing.
    pub max_yaw: f64,
    /// Cap on out-of-image points per step in the contrastive term.
    pub cl_max_points: usize,
    /// Score the EMA weights instead of the raw student weights.
    pub eval_ema: bool,
    pub guide_steps: usize,
    pub guide_learning_rate: f64,
    pub guide_alpha: f64,
    pub guide_hidden: usize,
    pub guide_warmup: usize,
    pub guide_refresh: usize,
    pub guide_pixels: usize,
    pub guide_adapt: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let g = GuideConfig::default();
        Self {
            seed: 0,
            feature_dim: 16,
            hidden: 32,
            alpha: 0.99,
            lambda: 0.001,
            lambda_p: 10.0,
            tau: 0.1,
            supervision: Supervision::Weak(0.08),
            steps: 1600,
            learning_rate: 0.3,
            batch: 2,
            toggles: Toggles::FULL,
            train_frames: 100,
            source_frames: 20,
            eval_frames: 20,
            input_noise: 0.05,
            max_yaw: std::f64::consts::PI,
            cl_max_points: 512,
            eval_ema: true,
            guide_steps: g.steps,
            guide_learning_rate: g.learning_rate,
            guide_alpha: g.alpha,
            guide_hidden: g.hidden,
            guide_warmup: g.warmup,
            guide_refresh: g.refresh_every,
            guide_pixels: g.pixels_per_image,
            guide_adapt: true,
        }
    }
}

macro_rules! config_fields {
    ($m:ident) => {
        $m!(
            seed,
            feature_dim,
            hidden,
            alpha,
            lambda,
            lambda_p,
            tau,
            supervision,
            steps,
            learning_rate,
            batch,
            toggles,
            train_frames,
            source_frames,
            eval_frames,
            input_noise,
            max_yaw,
            cl_max_points,
            eval_ema,
            guide_steps,
            guide_learning_rate,
            guide_alpha,
            guide_hidden,
            guide_warmup,
            guide_refresh,
            guide_pixels,
            guide_adapt
        )
    };
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.toggles.validate()?;
        let positive = [
            ("feature_dim", self.feature_dim),
            ("hidden", self.hidden),
            ("batch", self.batch),
            ("train_frames", self.train_frames),
            ("eval_frames", self.eval_frames),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.lambda >= 0.0 && self.lambda_p >= 1.0 && self.tau > 0.0 && self.learning_rate > 0.0) {
            return Err(Error::Config(
                "need lambda >= 0, lambda_p >= 1, tau > 0, learning_rate > 0".into(),
            ));
        }
        if !(self.input_noise >= 0.0 && self.max_yaw >= 0.0) {
            return Err(Error::Config("noise and yaw range must be non-negative".into()));
        }
        match self.supervision {
            Supervision::Weak(b) if !(0.0..1.0).contains(&b) => {
                Err(Error::Config(format!("scribble budget {b} outside [0, 1)")))
            }
            Supervision::Semi(r) if !(r > 0.0 && r <= 1.0) => {
                Err(Error::Config(format!("semi-supervised rate {r} outside (0, 1]")))
            }
            _ => Ok(()),
        }
    }

    /// Guide training settings derived from this run.
    pub fn guide_config(&self) -> GuideConfig {
        GuideConfig {
            seed: self.seed,
            feature_dim: self.feature_dim,
            hidden: self.guide_hidden,
            steps: self.guide_steps,
            learning_rate: self.guide_learning_rate,
            alpha: self.guide_alpha,
            lambda_p: self.lambda_p,
            batch: self.batch,
            refresh_every: self.guide_refresh,
            warmup: self.guide_warmup,
            pixels_per_image: self.guide_pixels,
            mode: if self.guide_adapt {
                GuideMode::Adapt
            } else {
                GuideMode::SourceOnly
            },
        }
    }

    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        macro_rules! put {
            ($($f:ident),*) => { $( m.insert(stringify!($f).to_string(), self.$f.to_string()); )* };
        }
        config_fields!(put);
        m
    }

    /// Starts from the defaults and applies every entry of `map`; unknown
    /// keys are rejected.
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (k, v) in map {
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |e: String| Error::Config(format!("bad value `{value}` for `{key}`: {e}"));
        macro_rules! set {
            ($($f:ident),*) => {
                match key {
                    $( stringify!($f) => { self.$f = value.parse().map_err(|e| bad(format!("{e:?}")))?; } )*
                    _ => return Err(Error::Config(format!("unknown configuration key `{key}`"))),
                }
            };
        }
        config_fields!(set);
        Ok(())
    }

    /// `key = value` lines in key order.
    pub fn to_text(&self) -> String {
        self.to_map().iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    /// Parses `key = value` lines; blank lines and `#` comments are skipped.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Self::from_map(&map)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig {
            seed: 7,
            supervision: Supervision::Semi(0.1),
            toggles: "mt,ig".parse().unwrap(),
            tau: 0.3,
            ..RunConfig::default()
        };
        cfg.alpha = 0.123456789012345;
        let back = RunConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn rejects_bad_entries() {
        assert!(RunConfig::from_text("nonsense = 1").is_err());
        assert!(RunConfig::from_text("steps = many").is_err());
        assert!(RunConfig::from_text("steps").is_err());
        assert!("mt,xx".parse::<Toggles>().is_err());
        let cl_only = RunConfig {
            toggles: "cl".parse().unwrap(),
            ..RunConfig::default()
        };
        assert!(cl_only.validate().is_err());
    }

    #[test]
    fn ablation_rows_follow_the_table() {
        let labels: Vec<String> = Toggles::ablation_rows().iter().map(Toggles::label).collect();
        assert_eq!(
            labels,
            ["baseline", "MT", "MT+IG", "MT+IG+CL", "MT+IG+FOVMix", "MT+IG+CL+FOVMix"]
        );
        assert_eq!(Toggles::FULL.to_string(), "mt,ig,cl,fovmix");
        assert_eq!("none".parse::<Toggles>().unwrap(), Toggles::BASELINE);
    }
}
