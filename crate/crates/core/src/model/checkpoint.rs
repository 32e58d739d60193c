//! Versioned plain-text checkpoints.
//!
//! ```text
//! capsule-transformer checkpoint
//! format = 1
//! config.<key> = <value>
//! tensor param <name> <d0>x<d1>...
//! <values>
//! state.step = <n>            (optional optimizer section)
//! tensor adam_m <name> <dims>
//! ...
//! ```
//!
//! Values are written in shortest round-trip form, so loading is exact.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::train::TrainState;

use super::config::{parse_num, ModelConfig};
use super::params::ParamStore;
use super::seq2seq::Seq2SeqModel;

const MAGIC: &str = "capsule-transformer checkpoint";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub state: Option<TrainState>,
}

fn write_tensor(out: &mut String, section: &str, name: &str, t: &Tensor) {
    let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
    out.push_str(&format!("tensor {section} {name} {}\n", dims.join("x")));
    let values: Vec<String> = t.data().iter().map(|v| format!("{v:e}")).collect();
    out.push_str(&values.join(" "));
    out.push('\n');
}

impl Checkpoint {
    pub fn from_model(model: &Seq2SeqModel, state: Option<&TrainState>) -> Self {
        Checkpoint {
            config: model.config().clone(),
            params: model.params().clone(),
            state: state.cloned(),
        }
    }

    pub fn into_model(self) -> Result<(Seq2SeqModel, Option<TrainState>)> {
        let model = Seq2SeqModel::from_parts(self.config, self.params)?;
        if let Some(s) = &self.state {
            s.check_matches(model.params())?;
        }
        Ok((model, self.state))
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("{MAGIC}\nformat = {FORMAT_VERSION}\n");
        for (k, v) in self.config.to_pairs() {
            out.push_str(&format!("config.{k} = {v}\n"));
        }
        for (name, t) in self.params.iter() {
            write_tensor(&mut out, "param", name, t);
        }
        if let Some(s) = &self.state {
            out.push_str(&format!("state.step = {}\n", s.step));
            let best = s.best_metric.map_or("none".to_string(), |b| format!("{b:e}"));
            out.push_str(&format!("state.best_metric = {best}\n"));
            out.push_str(&format!("state.best_step = {}\n", s.best_step));
            for (name, m) in self.params.names().iter().zip(&s.m) {
                write_tensor(&mut out, "adam_m", name, m);
            }
            for (name, v) in self.params.names().iter().zip(&s.v) {
                write_tensor(&mut out, "adam_v", name, v);
            }
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        let err = |line: usize, msg: String| Error::Parse { line, msg };
        match lines.next() {
            Some((_, l)) if l.trim() == MAGIC => {}
            _ => return Err(err(1, "not a checkpoint file".into())),
        }
        let mut config = ModelConfig::toy();
        let mut params = ParamStore::new();
        let mut version = None;
        let mut step = None;
        let mut best_metric = None;
        let mut best_step = 0;
        let mut m = Vec::new();
        let mut v = Vec::new();
        while let Some((line, raw)) = lines.next() {
            let raw = raw.trim();
            if raw.is_empty() {
                continue;
            }
            if let Some(header) = raw.strip_prefix("tensor ") {
                let parts: Vec<&str> = header.split_whitespace().collect();
                let [section, name, dims] = parts[..] else {
                    return Err(err(line, "expected `tensor <section> <name> <dims>`".into()));
                };
                let shape = dims
                    .split('x')
                    .map(|d| d.parse::<usize>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| err(line, format!("invalid dims `{dims}`")))?;
                let (vline, values) = lines
                    .next()
                    .ok_or_else(|| err(line + 1, format!("missing values for `{name}`")))?;
                let data = values
                    .split_whitespace()
                    .map(|x| x.parse::<f64>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| err(vline, format!("invalid value in `{name}`")))?;
                let t = Tensor::new(&shape, data).map_err(|e| err(vline, e.to_string()))?;
                match section {
                    "param" => params.insert(name, t).map_err(|e| err(line, e.to_string()))?,
                    "adam_m" | "adam_v" => {
                        if params.position(name) != Some(if section == "adam_m" { m.len() } else { v.len() }) {
                            return Err(err(line, format!("optimizer entry `{name}` out of order")));
                        }
                        if section == "adam_m" { m.push(t) } else { v.push(t) }
                    }
                    _ => return Err(err(line, format!("unknown section `{section}`"))),
                }
                continue;
            }
            let (key, value) = raw
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| err(line, format!("unrecognised line `{raw}`")))?;
            let wrap = |e: Error| err(line, e.to_string());
            if key == "format" {
                let found: u32 = parse_num(key, value).map_err(wrap)?;
                if found != FORMAT_VERSION {
                    return Err(err(line, format!("unsupported format version {found}")));
                }
                version = Some(found);
            } else if let Some(k) = key.strip_prefix("config.") {
                config.set(k, value).map_err(wrap)?;
            } else if key == "state.step" {
                step = Some(parse_num(key, value).map_err(wrap)?);
            } else if key == "state.best_metric" {
                best_metric = match value {
                    "none" => None,
                    v => Some(parse_num(key, v).map_err(wrap)?),
                };
            } else if key == "state.best_step" {
                best_step = parse_num(key, value).map_err(wrap)?;
            } else {
                return Err(err(line, format!("unknown key `{key}`")));
            }
        }
        if version.is_none() {
            return Err(err(2, "missing format version".into()));
        }
        let state = step.map(|step| TrainState {
            step,
            m,
            v,
            best_metric,
            best_step,
        });
        Ok(Checkpoint { config, params, state })
    }

    /// Writes through a temporary file so an interrupted save leaves the old file intact.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_text())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }
}
