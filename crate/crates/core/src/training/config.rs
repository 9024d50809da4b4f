use std::fmt;
use std::path::Path;

use crate::blocks::BlockConfig;
use crate::error::{Error, Result};
use crate::event::DEFAULT_BINS;
use crate::lightup::{DEFAULT_SNR_KERNEL, DEFAULT_TAU};
use crate::model::ModelConfig;

use super::AugmentConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub crop: usize,
    pub lambda: f64,
    pub seed: u64,
    pub hflip: bool,
    pub rotate: bool,
    /// Stop after this many optimizer steps, if set.
    pub max_steps: Option<usize>,
    pub clip: f64,
    pub bins: usize,
    pub tau: f64,
    pub channels: usize,
    pub heads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            epochs: 1,
            batch: 1,
            crop: 256,
            lambda: 0.1,
            seed: 0,
            hflip: true,
            rotate: true,
            max_steps: None,
            clip: 10.0,
            bins: DEFAULT_BINS,
            tau: DEFAULT_TAU,
            channels: 16,
            heads: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.crop == 0 || self.crop % 4 != 0 {
            return Err(Error::invalid(format!("crop must be a positive multiple of 4, got {}", self.crop)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::invalid(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if !(self.lr > 0.0) || !(self.clip > 0.0) {
            return Err(Error::invalid("learning rate and clip norm must be positive"));
        }
        if self.epochs == 0 || self.batch == 0 {
            return Err(Error::invalid("epochs and batch must be positive"));
        }
        self.model().blocks.validate()
    }

    pub fn model(&self) -> ModelConfig {
        ModelConfig {
            blocks: BlockConfig {
                base_channels: self.channels,
                heads: self.heads,
                ..BlockConfig::default()
            },
            bins: self.bins,
            tau: self.tau,
            snr_kernel: DEFAULT_SNR_KERNEL,
        }
    }

    pub fn augment(&self) -> AugmentConfig {
        AugmentConfig {
            crop: Some(self.crop),
            hflip: self.hflip,
            rotate: self.rotate,
        }
    }

    /// Sets one field from its textual form.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
            v.parse().map_err(|_| Error::invalid(format!("invalid value `{v}` for `{key}`")))
        }
        fn flag(key: &str, v: &str) -> Result<bool> {
            match v {
                "true" | "1" | "yes" | "on" => Ok(true),
                "false" | "0" | "no" | "off" => Ok(false),
                _ => Err(Error::invalid(format!("invalid boolean `{v}` for `{key}`"))),
            }
        }
        match key {
            "lr" => self.lr = num(key, value)?,
            "epochs" => self.epochs = num(key, value)?,
            "batch" => self.batch = num(key, value)?,
            "crop" => self.crop = num(key, value)?,
            "lambda" => self.lambda = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            "hflip" => self.hflip = flag(key, value)?,
            "rotate" => self.rotate = flag(key, value)?,
            "max_steps" => self.max_steps = if value == "none" { None } else { Some(num(key, value)?) },
            "clip" => self.clip = num(key, value)?,
            "bins" => self.bins = num(key, value)?,
            "tau" => self.tau = num(key, value)?,
            "channels" => self.channels = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            _ => return Err(Error::invalid(format!("unknown config key `{key}`"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines on top of `self`; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut offset = 0u64;
        for line in text.split_inclusive('\n') {
            let start = offset;
            offset += line.len() as u64;
            let body = line.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (k, v) = body.split_once('=').ok_or_else(|| Error::Parse {
                what: "config",
                offset: start,
                message: format!("expected `key = value`, found `{body}`"),
            })?;
            self.set(k.trim(), v.trim()).map_err(|e| Error::Parse {
                what: "config",
                offset: start,
                message: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        Ok(c)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }
}

impl fmt::Display for TrainConfig {
    /// The same `key = value` form that [`TrainConfig::parse`] reads.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "lr = {}", self.lr)?;
        writeln!(f, "epochs = {}", self.epochs)?;
        writeln!(f, "batch = {}", self.batch)?;
        writeln!(f, "crop = {}", self.crop)?;
        writeln!(f, "lambda = {}", self.lambda)?;
        writeln!(f, "seed = {}", self.seed)?;
        writeln!(f, "hflip = {}", self.hflip)?;
        writeln!(f, "rotate = {}", self.rotate)?;
        match self.max_steps {
            Some(n) => writeln!(f, "max_steps = {n}")?,
            None => writeln!(f, "max_steps = none")?,
        }
        writeln!(f, "clip = {}", self.clip)?;
        writeln!(f, "bins = {}", self.bins)?;
        writeln!(f, "tau = {}", self.tau)?;
        writeln!(f, "channels = {}", self.channels)?;
        write!(f, "heads = {}", self.heads)
    }
}
