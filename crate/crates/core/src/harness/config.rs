//! Run settings and the `key = value` config format.
//!
//! One setting per line, `#` starts a comment. `preset` (if present) is applied
//! first, the remaining keys override it in any order. Keys:
//!
//! | key | meaning |
//! |-----|---------|
//! | `preset` | `desk` (default) or `published` |
//! | `seed` | RNG seed for data, init and sampling |
//! | `profile` | `gopro_like` or `reds_like` |
//! | `lr`, `beta1`, `beta2`, `adam_eps` | restorer optimizer |
//! | `batch`, `patch`, `epochs`, `lr_halve_every`, `max_steps` | restorer schedule; `max_steps = 0` means no cap |
//! | `detector_lr`, `detector_epochs`, `lambda` | detector optimizer and contrastive weight |
//! | `detector_stages` | comma-separated conv widths, last one is the feature size |
//! | `channels`, `embed_dim`, `castb`, `cstl`, `heads`, `window`, `mlp_ratio` | restorer dims |
//! | `variant` | `self_only`, `self_plus_global`, `cross_only`, `full` |
//! | `quintuples` | `gt` (ground-truth labels) or `detector` |
//! | `search_range` | sharp-neighbor search range `n` |
//! | `eps` | detector threshold |
//! | `height`, `width`, `frames`, `sequences`, `events`, `contrast` | synthetic data |

use crate::datagen::BlurProfile;
use crate::detector::{DetectorConfig, DEFAULT_EPS, DEFAULT_LAMBDA, DEFAULT_RANGE};
use crate::error::{config_err, Result};
use crate::hybformer::{CswtConfig, HybConfig, Variant};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuintupleSource {
    GroundTruth,
    Detector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub adam_eps: f64,
    pub batch: usize,
    pub patch: usize,
    pub epochs: usize,
    pub lr_halve_every: usize,
    /// Hard cap on optimizer steps, 0 for none.
    pub max_steps: usize,
    pub seed: u64,
    pub detector_lr: f64,
    pub detector_epochs: usize,
    pub lambda: f64,
    pub detector: DetectorConfig,
    pub model: HybConfig,
    pub quintuples: QuintupleSource,
    pub search_range: usize,
    pub eps: f64,
    pub profile: String,
}

impl TrainConfig {
    /// Published training setup.
    pub fn published() -> Self {
        TrainConfig {
            lr: 1e-4,
            betas: (0.9, 0.999),
            adam_eps: 1e-8,
            batch: 12,
            patch: 200,
            epochs: 500,
            lr_halve_every: 200,
            max_steps: 0,
            seed: 0,
            detector_lr: 1e-4,
            detector_epochs: 20,
            lambda: DEFAULT_LAMBDA,
            detector: DetectorConfig::default(),
            model: HybConfig::published(),
            quintuples: QuintupleSource::GroundTruth,
            search_range: DEFAULT_RANGE,
            eps: DEFAULT_EPS,
            profile: "gopro_like".into(),
        }
    }

    /// Same wiring at CPU-friendly sizes.
    pub fn desk() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch: 4,
            patch: 48,
            epochs: 2000,
            lr_halve_every: 1000,
            detector_lr: 1e-3,
            model: HybConfig::desk(),
            ..Self::published()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("adam_eps", self.adam_eps),
            ("detector_lr", self.detector_lr),
            ("eps", self.eps),
        ];
        for (k, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return config_err(format!("`{k}` must be positive, got {v}"));
            }
        }
        let counts = [
            ("batch", self.batch),
            ("patch", self.patch),
            ("epochs", self.epochs),
            ("lr_halve_every", self.lr_halve_every),
            ("detector_epochs", self.detector_epochs),
            ("search_range", self.search_range),
        ];
        for (k, v) in counts {
            if v == 0 {
                return config_err(format!("`{k}` must be positive"));
            }
        }
        let (b1, b2) = self.betas;
        if !(0.0..1.0).contains(&b1) || !(0.0..1.0).contains(&b2) {
            return config_err(format!("betas {:?} must lie in [0, 1)", self.betas));
        }
        if !self.patch.is_multiple_of(4) {
            return config_err(format!("patch {} must be a multiple of 4", self.patch));
        }
        if self.lambda < 0.0 || self.eps >= 1.0 {
            return config_err("`lambda` must be non-negative and `eps` below 1");
        }
        BlurProfile::by_name(&self.profile)?;
        self.detector.validate()?;
        self.model.validate()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSettings {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub sequences: usize,
    pub events: bool,
    pub contrast: f64,
}

impl Default for SynthSettings {
    fn default() -> Self {
        SynthSettings { height: 64, width: 64, frames: 10, sequences: 4, events: false, contrast: crate::datagen::DEFAULT_CONTRAST }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Settings {
    pub train: TrainConfig,
    pub synth: SynthSettings,
}

impl Default for Settings {
    fn default() -> Self {
        Settings { train: TrainConfig::desk(), synth: SynthSettings::default() }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().or_else(|_| config_err(format!("`{key}`: cannot parse `{v}`")))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "yes" | "1" => Ok(true),
        "false" | "no" | "0" => Ok(false),
        _ => config_err(format!("`{key}`: expected true or false, got `{v}`")),
    }
}

fn pairs(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return config_err(format!("line {}: expected `key = value`", no + 1));
        };
        let (k, v) = (k.trim(), v.trim());
        if k.is_empty() || v.is_empty() {
            return config_err(format!("line {}: empty key or value", no + 1));
        }
        if out.iter().any(|(seen, _): &(String, String)| seen == k) {
            return config_err(format!("line {}: `{k}` given twice", no + 1));
        }
        out.push((k.to_string(), v.to_string()));
    }
    Ok(out)
}

impl Settings {
    pub fn parse(text: &str) -> Result<Settings> {
        let kv = pairs(text)?;
        let mut s = match kv.iter().find(|(k, _)| k == "preset").map(|(_, v)| v.as_str()) {
            None | Some("desk") => Settings::default(),
            Some("published") => Settings { train: TrainConfig::published(), ..Settings::default() },
            Some(other) => return config_err(format!("unknown preset `{other}`")),
        };
        for (k, v) in &kv {
            s.set(k, v)?;
        }
        s.train.validate()?;
        if s.synth.height == 0 || s.synth.width == 0 || s.synth.frames == 0 || s.synth.sequences == 0 {
            return config_err("synthetic data sizes must be positive");
        }
        Ok(s)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        let c: &mut CswtConfig = &mut t.model.cswt;
        match key {
            "preset" => {}
            "seed" => t.seed = num(key, v)?,
            "profile" => t.profile = v.to_string(),
            "lr" => t.lr = num(key, v)?,
            "beta1" => t.betas.0 = num(key, v)?,
            "beta2" => t.betas.1 = num(key, v)?,
            "adam_eps" => t.adam_eps = num(key, v)?,
            "batch" => t.batch = num(key, v)?,
            "patch" => t.patch = num(key, v)?,
            "epochs" => t.epochs = num(key, v)?,
            "lr_halve_every" => t.lr_halve_every = num(key, v)?,
            "max_steps" => t.max_steps = num(key, v)?,
            "detector_lr" => t.detector_lr = num(key, v)?,
            "detector_epochs" => t.detector_epochs = num(key, v)?,
            "lambda" => t.lambda = num(key, v)?,
            "detector_stages" => {
                t.detector.stages = v.split(',').map(|x| num(key, x.trim())).collect::<Result<_>>()?;
            }
            "channels" => t.model.channels = num(key, v)?,
            "embed_dim" => c.embed_dim = num(key, v)?,
            "castb" => c.n_castb = num(key, v)?,
            "cstl" => c.n_cstl_per_block = num(key, v)?,
            "heads" => c.heads = num(key, v)?,
            "window" => c.window = num(key, v)?,
            "mlp_ratio" => c.mlp_ratio = num(key, v)?,
            "variant" => t.model.variant = Variant::parse(v)?,
            "quintuples" => {
                t.quintuples = match v {
                    "gt" => QuintupleSource::GroundTruth,
                    "detector" => QuintupleSource::Detector,
                    _ => return config_err(format!("`quintuples` must be gt or detector, got `{v}`")),
                }
            }
            "search_range" => t.search_range = num(key, v)?,
            "eps" => t.eps = num(key, v)?,
            "height" => self.synth.height = num(key, v)?,
            "width" => self.synth.width = num(key, v)?,
            "frames" => self.synth.frames = num(key, v)?,
            "sequences" => self.synth.sequences = num(key, v)?,
            "events" => self.synth.events = flag(key, v)?,
            "contrast" => self.synth.contrast = num(key, v)?,
            other => return config_err(format!("unknown config key `{other}`")),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets() {
        let p = TrainConfig::published();
        assert_eq!((p.lr, p.batch, p.patch, p.epochs, p.lr_halve_every), (1e-4, 12, 200, 500, 200));
        assert_eq!((p.detector_lr, p.detector_epochs), (1e-4, 20));
        assert_eq!(p.betas, (0.9, 0.999));
        p.validate().unwrap();
        let d = TrainConfig::desk();
        assert_eq!(d.patch, 48);
        d.validate().unwrap();
    }

    #[test]
    fn parse_overrides_preset() {
        let s = Settings::parse("preset = published\n# comment\nlr = 0.002  # trailing\nvariant = cross_only\nevents = true\ndetector_stages = 4, 8\n").unwrap();
        assert_eq!(s.train.lr, 0.002);
        assert_eq!(s.train.batch, 12);
        assert_eq!(s.train.model.variant, Variant::CrossOnly);
        assert_eq!(s.train.detector.stages, vec![4, 8]);
        assert!(s.synth.events);
    }

    #[test]
    fn parse_errors() {
        for bad in ["lr", "lr = x", "foo = 1", "lr = 1\nlr = 2", "patch = 50", "preset = big", "quintuples = both", "events = maybe"] {
            let e = Settings::parse(bad).unwrap_err();
            assert_eq!(e.exit_code(), 2, "{bad}");
        }
    }
}
