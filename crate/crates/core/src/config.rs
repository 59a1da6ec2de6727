//! Model and training hyperparameters, plus the plain `key = value` text
//! format used for config files and checkpoint headers.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    /// Output channels of each residual module.
    pub channels: Vec<usize>,
    pub blocks_per_module: usize,
    /// Stride applied by the first block of each module.
    pub vertical_strides: Vec<usize>,
    pub horizontal_strides: Vec<usize>,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub bottleneck: usize,
    /// Number of non-blank classes.
    pub alphabet_size: usize,
    pub norm_eps: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_height: 32,
            image_width: 128,
            channels: vec![16, 32, 64, 128],
            blocks_per_module: 2,
            vertical_strides: vec![2, 2, 2, 2],
            horizontal_strides: vec![1, 1, 2, 2],
            d_model: 128,
            d_ff: 128,
            heads: 8,
            encoder_layers: 2,
            bottleneck: 16,
            alphabet_size: crate::datagen::ALPHABET.len(),
            norm_eps: 1e-5,
            init_seed: 0x5eed,
        }
    }
}

impl ModelConfig {
    /// A narrow configuration that trains in minutes on one CPU core while
    /// keeping the full module/block layout and 32x128 input.
    pub fn desk() -> Self {
        ModelConfig {
            channels: vec![8, 16, 32, 32],
            vertical_strides: vec![2, 2, 2, 2],
            horizontal_strides: vec![2, 2, 1, 1],
            d_model: 32,
            d_ff: 32,
            heads: 2,
            encoder_layers: 1,
            bottleneck: 8,
            ..Self::default()
        }
    }

    /// Minimal layout for finite-difference checks.
    pub fn tiny() -> Self {
        ModelConfig {
            image_height: 8,
            image_width: 8,
            channels: vec![2, 3],
            blocks_per_module: 1,
            vertical_strides: vec![2, 2],
            horizontal_strides: vec![1, 2],
            d_model: 4,
            d_ff: 6,
            heads: 2,
            encoder_layers: 1,
            bottleneck: 2,
            alphabet_size: 3,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.channels.len();
        if m == 0 || self.blocks_per_module == 0 {
            return Err(Error::Config("need at least one module with one block".into()));
        }
        if self.vertical_strides.len() != m || self.horizontal_strides.len() != m {
            return Err(Error::Config(format!(
                "{m} modules but {} vertical / {} horizontal strides",
                self.vertical_strides.len(),
                self.horizontal_strides.len()
            )));
        }
        if self.channels.iter().chain(&self.vertical_strides).chain(&self.horizontal_strides).any(|&v| v == 0) {
            return Err(Error::Config("channel widths and strides must be positive".into()));
        }
        let vs: usize = self.vertical_strides.iter().product();
        let hs: usize = self.horizontal_strides.iter().product();
        if !self.image_height.is_multiple_of(vs) || !self.image_width.is_multiple_of(hs) {
            return Err(Error::Config(format!(
                "strides {vs}x{hs} do not divide the {}x{} input",
                self.image_height, self.image_width
            )));
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.bottleneck == 0 || self.bottleneck >= self.d_model {
            return Err(Error::Config(format!(
                "bottleneck {} must be in 1..{}",
                self.bottleneck, self.d_model
            )));
        }
        if self.d_ff == 0 || self.encoder_layers == 0 || self.alphabet_size == 0 {
            return Err(Error::Config("d_ff, encoder_layers and alphabet_size must be positive".into()));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::Config("norm_eps must be positive".into()));
        }
        Ok(())
    }

    /// Height of the final feature map before it is averaged down to 1.
    pub fn residual_height(&self) -> usize {
        self.image_height / self.vertical_strides.iter().product::<usize>()
    }

    /// Sequence length seen by the transformer.
    pub fn feature_width(&self) -> usize {
        self.image_width / self.horizontal_strides.iter().product::<usize>()
    }

    pub fn feature_channels(&self) -> usize {
        *self.channels.last().expect("validated")
    }

    /// Classes per timestep including the blank.
    pub fn classes(&self) -> usize {
        self.alphabet_size + 1
    }

    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let _ = writeln!(s, "image_height = {}", self.image_height);
        let _ = writeln!(s, "image_width = {}", self.image_width);
        let _ = writeln!(s, "channels = {}", list(&self.channels));
        let _ = writeln!(s, "blocks_per_module = {}", self.blocks_per_module);
        let _ = writeln!(s, "vertical_strides = {}", list(&self.vertical_strides));
        let _ = writeln!(s, "horizontal_strides = {}", list(&self.horizontal_strides));
        let _ = writeln!(s, "d_model = {}", self.d_model);
        let _ = writeln!(s, "d_ff = {}", self.d_ff);
        let _ = writeln!(s, "heads = {}", self.heads);
        let _ = writeln!(s, "encoder_layers = {}", self.encoder_layers);
        let _ = writeln!(s, "bottleneck = {}", self.bottleneck);
        let _ = writeln!(s, "alphabet_size = {}", self.alphabet_size);
        let _ = writeln!(s, "norm_eps = {:e}", self.norm_eps);
        let _ = writeln!(s, "init_seed = {}", self.init_seed);
        s
    }

    /// Applies recognized keys; returns the keys it did not recognize.
    pub fn apply(&mut self, kv: &KeyValues) -> Result<Vec<String>> {
        let mut rest = Vec::new();
        for (k, v) in kv.iter() {
            match k {
                "image_height" => self.image_height = parse(k, v)?,
                "image_width" => self.image_width = parse(k, v)?,
                "channels" => self.channels = parse_list(k, v)?,
                "blocks_per_module" => self.blocks_per_module = parse(k, v)?,
                "vertical_strides" => self.vertical_strides = parse_list(k, v)?,
                "horizontal_strides" => self.horizontal_strides = parse_list(k, v)?,
                "d_model" => self.d_model = parse(k, v)?,
                "d_ff" => self.d_ff = parse(k, v)?,
                "heads" => self.heads = parse(k, v)?,
                "encoder_layers" => self.encoder_layers = parse(k, v)?,
                "bottleneck" => self.bottleneck = parse(k, v)?,
                "alphabet_size" => self.alphabet_size = parse(k, v)?,
                "norm_eps" => self.norm_eps = parse(k, v)?,
                "init_seed" => self.init_seed = parse(k, v)?,
                _ => rest.push(k.to_owned()),
            }
        }
        Ok(rest)
    }

    pub fn from_kv(text: &str) -> Result<Self> {
        let kv = KeyValues::parse(text)?;
        let mut cfg = ModelConfig::default();
        let rest = cfg.apply(&kv)?;
        if let Some(k) = rest.first() {
            return Err(Error::Config(format!("unknown model key {k}")));
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub decay_factor: f64,
    pub decay_period: usize,
    pub seed: u64,
    /// Evaluate every this many epochs (0 disables per-epoch evaluation).
    pub eval_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 20,
            base_lr: 1e-3,
            warmup_epochs: 2,
            decay_factor: 0.1,
            decay_period: 5,
            seed: 7,
            eval_every: 1,
        }
    }
}

impl TrainConfig {
    /// The full-scale schedule: batch 256 at a base rate of 1e-5.
    pub fn full_scale() -> Self {
        TrainConfig {
            batch_size: 256,
            base_lr: 1e-5,
            ..Self::default()
        }
    }

    /// The schedule the desk-scale experiments use: small batches give the
    /// optimizer enough steps on 2000 samples to leave the all-blank
    /// plateau, and the first decay is pushed back to epoch 8.
    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 8,
            epochs: 10,
            decay_period: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warmup ({}) must be shorter than training ({} epochs)",
                self.warmup_epochs, self.epochs
            )));
        }
        if self.decay_period == 0 || !(self.base_lr > 0.0) {
            return Err(Error::Config("decay period and learning rate must be positive".into()));
        }
        Ok(())
    }

    pub fn apply(&mut self, kv: &KeyValues) -> Result<Vec<String>> {
        let mut rest = Vec::new();
        for (k, v) in kv.iter() {
            match k {
                "batch" | "batch_size" => self.batch_size = parse(k, v)?,
                "epochs" => self.epochs = parse(k, v)?,
                "lr" | "base_lr" => self.base_lr = parse(k, v)?,
                "warmup_epochs" => self.warmup_epochs = parse(k, v)?,
                "decay_factor" => self.decay_factor = parse(k, v)?,
                "decay_period" => self.decay_period = parse(k, v)?,
                "seed" => self.seed = parse(k, v)?,
                "eval_every" => self.eval_every = parse(k, v)?,
                _ => rest.push(k.to_owned()),
            }
        }
        Ok(rest)
    }

    pub fn to_kv(&self) -> String {
        format!(
            "batch_size = {}\nepochs = {}\nbase_lr = {:e}\nwarmup_epochs = {}\ndecay_factor = {}\ndecay_period = {}\nseed = {}\neval_every = {}\n",
            self.batch_size,
            self.epochs,
            self.base_lr,
            self.warmup_epochs,
            self.decay_factor,
            self.decay_period,
            self.seed,
            self.eval_every
        )
    }
}

/// Ordered `key = value` pairs. Blank lines and `#` comments are ignored;
/// later duplicates override earlier ones.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues(BTreeMap<String, String>);

impl KeyValues {
    pub fn parse(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(Error::Config(format!("line {}: expected key = value", n + 1)));
            };
            map.insert(k.trim().to_owned(), v.trim().to_owned());
        }
        Ok(KeyValues(map))
    }

    pub fn set(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.0.insert(key.into(), value.into());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &str)> {
        self.0.iter().map(|(k, v)| (k.as_str(), v.as_str()))
    }

    /// Overlays `other` on top of `self`.
    pub fn merge(&mut self, other: &KeyValues) {
        for (k, v) in other.iter() {
            self.set(k, v);
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value {value:?} for {key}")))
}

fn parse_list(key: &str, value: &str) -> Result<Vec<usize>> {
    value.split(',').map(|p| parse(key, p.trim())).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_shape_law() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.residual_height(), 2);
        assert_eq!(c.feature_width(), 32);
        assert_eq!(c.feature_channels(), 128);
        ModelConfig::desk().validate().unwrap();
        ModelConfig::tiny().validate().unwrap();
    }

    #[test]
    fn kv_round_trip() {
        let c = ModelConfig::desk();
        assert_eq!(ModelConfig::from_kv(&c.to_kv()).unwrap(), c);
        let t = TrainConfig::default();
        let mut back = TrainConfig::full_scale();
        assert!(back.apply(&KeyValues::parse(&t.to_kv()).unwrap()).unwrap().is_empty());
        assert_eq!(back, t);
    }

    #[test]
    fn rejects_bad_configs() {
        let mut c = ModelConfig::default();
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.vertical_strides = vec![2, 2, 2, 3];
        assert!(c.validate().is_err());
        assert!(ModelConfig::from_kv("bogus = 1").is_err());
        assert!(KeyValues::parse("no equals sign").is_err());
        let t = TrainConfig {
            warmup_epochs: 3,
            epochs: 3,
            ..TrainConfig::default()
        };
        assert!(t.validate().is_err());
    }

    #[test]
    fn comments_and_overrides() {
        let mut kv = KeyValues::parse("# c\nepochs = 3 # trailing\n\nlr=0.5").unwrap();
        kv.merge(&KeyValues::parse("epochs = 4").unwrap());
        let mut t = TrainConfig::default();
        t.apply(&kv).unwrap();
        assert_eq!((t.epochs, t.base_lr), (4, 0.5));
    }
}
