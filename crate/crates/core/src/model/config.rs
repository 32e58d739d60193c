use std::fmt;
use std::str::FromStr;

use crate::capsule_san::{AcceptanceGate, SanOptions};
use crate::error::{Error, Result};
use crate::routing::{RoutingOptions, DEFAULT_ITERATIONS};

/// Inclusive, 1-based range of layers that use capsule routing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerRange {
    pub first: usize,
    pub last: usize,
}

impl LayerRange {
    pub fn new(first: usize, last: usize) -> Self {
        LayerRange { first, last }
    }

    pub fn contains(&self, layer: usize) -> bool {
        (self.first..=self.last).contains(&layer)
    }
}

impl fmt::Display for LayerRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}..{}", self.first, self.last)
    }
}

impl FromStr for LayerRange {
    type Err = Error;

    /// Accepts `a..b` (inclusive) or a single layer `a`.
    fn from_str(s: &str) -> Result<Self> {
        let parse = |p: &str| {
            p.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("invalid layer range `{s}`")))
        };
        match s.split_once("..") {
            Some((a, b)) => Ok(LayerRange::new(parse(a)?, parse(b.trim_start_matches('='))?)),
            None => {
                let a = parse(s)?;
                Ok(LayerRange::new(a, a))
            }
        }
    }
}

/// Every hyperparameter that shapes a model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_ff: usize,
    pub routing_iters: usize,
    pub dropout: f64,
    pub vertical: bool,
    pub horizontal: bool,
    pub routing_in_encoder: bool,
    pub routing_in_decoder: bool,
    /// `None` means every layer.
    pub routing_layers: Option<LayerRange>,
    pub detach_coupling: bool,
    pub vocab_size: usize,
    pub max_len: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::toy()
    }
}

/// Which routing paths a particular self-attention sublayer runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stack {
    Encoder,
    Decoder,
}

impl ModelConfig {
    /// Desk-scale capsule model with both routing paths on.
    pub fn toy() -> Self {
        ModelConfig {
            d_model: 64,
            heads: 4,
            enc_layers: 2,
            dec_layers: 2,
            d_ff: 128,
            routing_iters: DEFAULT_ITERATIONS,
            dropout: 0.0,
            vertical: true,
            horizontal: true,
            routing_in_encoder: true,
            routing_in_decoder: true,
            routing_layers: None,
            detach_coupling: false,
            vocab_size: 32,
            max_len: 24,
        }
    }

    /// Transformer-Base sized configuration (512 wide, 8 heads, 2048 feed-forward).
    pub fn base() -> Self {
        ModelConfig {
            d_model: 512,
            heads: 8,
            enc_layers: 6,
            dec_layers: 6,
            d_ff: 2048,
            dropout: 0.1,
            vocab_size: 32000,
            max_len: 256,
            ..ModelConfig::toy()
        }
    }

    /// Transformer-Big sized configuration (1024 wide, 16 heads, 4096 feed-forward).
    pub fn big() -> Self {
        ModelConfig {
            d_model: 1024,
            heads: 16,
            d_ff: 4096,
            dropout: 0.3,
            ..ModelConfig::base()
        }
    }

    /// Same shape with all routing switched off.
    pub fn into_vanilla(mut self) -> Self {
        self.vertical = false;
        self.horizontal = false;
        self
    }

    pub fn is_vanilla(&self) -> bool {
        !self.vertical && !self.horizontal
    }

    pub fn d_head(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.heads == 0 || self.d_ff == 0 {
            return err("width, heads and feed-forward width must be positive".into());
        }
        if self.d_model % self.heads != 0 {
            return err(format!("heads ({}) must divide d_model ({})", self.heads, self.d_model));
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return err("encoder and decoder need at least one layer".into());
        }
        if self.routing_iters == 0 {
            return err("routing_iters must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.vocab_size < 4 {
            return err(format!("vocab_size {} leaves no room beside PAD/BOS/EOS", self.vocab_size));
        }
        if self.max_len == 0 {
            return err("max_len must be positive".into());
        }
        if let Some(r) = self.routing_layers {
            if r.first == 0 || r.first > r.last || r.last > self.enc_layers {
                return err(format!(
                    "routing_layers {r} must lie within 1..{}",
                    self.enc_layers
                ));
            }
        }
        Ok(())
    }

    fn layer_selected(&self, layer: usize) -> bool {
        self.routing_layers.is_none_or(|r| r.contains(layer))
    }

    /// Routing switches for self-attention in `layer` (1-based) of `stack`.
    /// The decoder never runs vertical routing.
    pub fn san_options(&self, stack: Stack, layer: usize) -> SanOptions {
        let routing = RoutingOptions {
            iterations: self.routing_iters,
            detach_coupling: self.detach_coupling,
        };
        let active = self.layer_selected(layer)
            && match stack {
                Stack::Encoder => self.routing_in_encoder,
                Stack::Decoder => self.routing_in_decoder,
            };
        SanOptions {
            vertical: active && self.vertical && stack == Stack::Encoder,
            horizontal: active && self.horizontal,
            routing,
        }
    }

    /// Parameters added on top of the vanilla model: one acceptance gate per
    /// encoder layer with vertical routing.
    pub fn routing_parameter_count(&self) -> usize {
        (1..=self.enc_layers)
            .filter(|&l| self.san_options(Stack::Encoder, l).vertical)
            .count()
            * AcceptanceGate::parameter_count(self.heads)
    }

    /// Total trainable scalars, computed from shapes alone.
    pub fn parameter_count(&self) -> usize {
        let (d, f, v) = (self.d_model, self.d_ff, self.vocab_size);
        let attention = 4 * d * d;
        let norm = 2 * d;
        let ffn = d * f + f + f * d + d;
        let encoder = self.enc_layers * (attention + ffn + 2 * norm);
        let decoder = self.dec_layers * (2 * attention + ffn + 3 * norm);
        let embeddings = 2 * v * d;
        let output = d * v + v + 2 * norm;
        encoder + decoder + embeddings + output + self.routing_parameter_count()
    }
}

pub(crate) fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(Error::Config(format!("`{key}` expects a boolean, got `{value}`"))),
    }
}

pub(crate) fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("`{key}` has invalid value `{value}`")))
}

impl ModelConfig {
    pub const KEYS: [&'static str; 15] = [
        "d_model",
        "heads",
        "enc_layers",
        "dec_layers",
        "d_ff",
        "routing_iters",
        "dropout",
        "vertical",
        "horizontal",
        "routing_in_encoder",
        "routing_in_decoder",
        "routing_layers",
        "detach_coupling",
        "vocab_size",
        "max_len",
    ];

    /// Sets one field from its textual form. Unknown keys are an error.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "d_model" => self.d_model = parse_num(key, value)?,
            "heads" => self.heads = parse_num(key, value)?,
            "enc_layers" => self.enc_layers = parse_num(key, value)?,
            "dec_layers" => self.dec_layers = parse_num(key, value)?,
            "d_ff" => self.d_ff = parse_num(key, value)?,
            "routing_iters" => self.routing_iters = parse_num(key, value)?,
            "dropout" => self.dropout = parse_num(key, value)?,
            "vertical" => self.vertical = parse_bool(key, value)?,
            "horizontal" => self.horizontal = parse_bool(key, value)?,
            "routing_in_encoder" => self.routing_in_encoder = parse_bool(key, value)?,
            "routing_in_decoder" => self.routing_in_decoder = parse_bool(key, value)?,
            "routing_layers" => {
                self.routing_layers = match value {
                    "all" => None,
                    v => Some(v.parse()?),
                }
            }
            "detach_coupling" => self.detach_coupling = parse_bool(key, value)?,
            "vocab_size" => self.vocab_size = parse_num(key, value)?,
            "max_len" => self.max_len = parse_num(key, value)?,
            _ => return Err(Error::Config(format!("unknown model key `{key}`"))),
        }
        Ok(())
    }

    /// Every field as `(key, value)` text, in [`ModelConfig::KEYS`] order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let values = [
            self.d_model.to_string(),
            self.heads.to_string(),
            self.enc_layers.to_string(),
            self.dec_layers.to_string(),
            self.d_ff.to_string(),
            self.routing_iters.to_string(),
            format!("{:e}", self.dropout),
            self.vertical.to_string(),
            self.horizontal.to_string(),
            self.routing_in_encoder.to_string(),
            self.routing_in_decoder.to_string(),
            self.routing_layers.map_or("all".to_string(), |r| r.to_string()),
            self.detach_coupling.to_string(),
            self.vocab_size.to_string(),
            self.max_len.to_string(),
        ];
        Self::KEYS.into_iter().zip(values).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn key_value_round_trip() {
        let mut c = ModelConfig::toy();
        c.routing_layers = Some(LayerRange::new(1, 2));
        c.dropout = 0.15;
        c.vertical = false;
        let mut back = ModelConfig::base();
        for (k, v) in c.to_pairs() {
            back.set(k, &v).unwrap();
        }
        assert_eq!(back, c);
        assert!(back.set("bogus", "1").is_err());
        assert!(back.set("vertical", "maybe").is_err());
    }

    #[test]
    fn parses_layer_ranges() {
        assert_eq!("1..2".parse::<LayerRange>().unwrap(), LayerRange::new(1, 2));
        assert_eq!("3".parse::<LayerRange>().unwrap(), LayerRange::new(3, 3));
        assert_eq!("2..=4".parse::<LayerRange>().unwrap(), LayerRange::new(2, 4));
        assert!("a..b".parse::<LayerRange>().is_err());
    }

    #[test]
    fn validation_rejects_bad_shapes() {
        let mut c = ModelConfig::toy();
        c.heads = 5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::toy();
        c.routing_layers = Some(LayerRange::new(2, 3));
        assert!(c.validate().is_err());
        assert!(ModelConfig::toy().validate().is_ok());
        assert!(ModelConfig::big().validate().is_ok());
    }

    #[test]
    fn decoder_never_routes_vertically() {
        let c = ModelConfig::toy();
        let dec = c.san_options(Stack::Decoder, 1);
        assert!(!dec.vertical && dec.horizontal);
        let enc = c.san_options(Stack::Encoder, 1);
        assert!(enc.vertical && enc.horizontal);
    }

    #[test]
    fn gate_parameter_counts() {
        assert_eq!(ModelConfig::big().routing_parameter_count(), 1632);
        assert_eq!(ModelConfig::toy().routing_parameter_count(), 40);
        assert_eq!(ModelConfig::toy().into_vanilla().routing_parameter_count(), 0);
        let mut c = ModelConfig::toy();
        c.vertical = false;
        assert_eq!(c.routing_parameter_count(), 0);
        c.vertical = true;
        c.routing_layers = Some(LayerRange::new(2, 2));
        assert_eq!(c.routing_parameter_count(), 20);
    }
}
