use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use capsule_transformer::model::{Checkpoint, LayerRange, Seq2SeqModel};
use capsule_transformer::routing::{dynamic_routing, RoutingResult, VoteSet};
use capsule_transformer::tensor::Tensor;
use capsule_transformer::train::{evaluate, train, Dataset, Metrics, TaskKind, TrainEvent, TrainState};
use capsule_transformer::{Error, Result};

use crate::run_config::RunConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Vanilla,
    Capsule,
}

/// Command-line settings that override the config file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub task: Option<TaskKind>,
    pub variant: Option<Variant>,
    pub no_vertical: bool,
    pub no_horizontal: bool,
    pub routing_layers: Option<LayerRange>,
    pub iters: Option<usize>,
    pub seed: Option<u64>,
    pub steps: Option<u64>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(t) = self.task {
            cfg.task.kind = t;
        }
        if self.variant == Some(Variant::Vanilla) {
            cfg.model = cfg.model.clone().into_vanilla();
        }
        if self.no_vertical {
            cfg.model.vertical = false;
        }
        if self.no_horizontal {
            cfg.model.horizontal = false;
        }
        if let Some(r) = self.routing_layers {
            cfg.model.routing_layers = Some(r);
        }
        if let Some(t) = self.iters {
            cfg.model.routing_iters = t;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
            cfg.train.seed = s;
        }
        if let Some(s) = self.steps {
            cfg.train.steps = s;
        }
    }
}

/// Defaults, then the config file, then flags. Validates the result.
pub fn resolve(config: Option<&Path>, overrides: &Overrides) -> Result<RunConfig> {
    let mut cfg = RunConfig::default();
    if let Some(path) = config {
        cfg.apply_file(path)?;
    }
    overrides.apply(&mut cfg);
    cfg.validate()?;
    Ok(cfg)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub losses: Vec<f64>,
    pub final_metrics: Metrics,
    pub best_step: u64,
    pub checkpoint: PathBuf,
}

pub fn train_files(out: &Path) -> (PathBuf, PathBuf, PathBuf, PathBuf) {
    (
        out.join("resolved.conf"),
        out.join("metrics.log"),
        out.join("best.ckpt"),
        out.join("last.ckpt"),
    )
}

/// Trains per `cfg` into `out`. With `resume`, continues from `out/last.ckpt`.
pub fn cmd_train(cfg: &RunConfig, out: &Path, resume: bool, log: &mut dyn Write) -> Result<TrainSummary> {
    let (resolved, metrics_path, best_path, last_path) = train_files(out);
    let train_set = cfg.synthetic(0, cfg.task.train_samples).generate()?;
    let valid_set = cfg.synthetic(1, cfg.task.valid_samples).generate()?;
    let (mut model, state) = if resume {
        let (model, state) = Checkpoint::load(&last_path)?.into_model()?;
        if model.config() != &cfg.model {
            return Err(Error::Config("checkpoint model config differs from the resolved config".into()));
        }
        let state = state.ok_or_else(|| Error::Config("checkpoint has no optimizer state".into()))?;
        (model, state)
    } else {
        let model = Seq2SeqModel::new(cfg.model.clone(), cfg.seed)?;
        let state = TrainState::new(model.params());
        (model, state)
    };

    fs::create_dir_all(out)?;
    fs::write(&resolved, cfg.to_text())?;
    for (k, v) in cfg.to_pairs() {
        writeln!(log, "config {k} = {v}")?;
    }
    let mut metrics = if resume {
        OpenOptions::new().create(true).append(true).open(&metrics_path)?
    } else {
        File::create(&metrics_path)?
    };

    let mut losses = Vec::new();
    let log_every = cfg.log_every;
    let state = train(
        &mut model,
        &train_set,
        Some(&valid_set),
        &cfg.train,
        state,
        &mut |model, state, event| {
            writeln!(metrics, "{}", event.log_line())?;
            match event {
                TrainEvent::Step { step, loss, .. } => {
                    losses.push(*loss);
                    if log_every > 0 && step % log_every == 0 {
                        writeln!(log, "{}", event.log_line())?;
                    }
                }
                TrainEvent::Eval { improved, .. } => {
                    writeln!(log, "{}", event.log_line())?;
                    let ck = Checkpoint::from_model(model, Some(state));
                    if *improved {
                        ck.save(&best_path)?;
                    }
                    ck.save(&last_path)?;
                }
            }
            Ok(())
        },
    )?;
    Checkpoint::from_model(&model, Some(&state)).save(&last_path)?;
    if !best_path.exists() {
        Checkpoint::from_model(&model, Some(&state)).save(&best_path)?;
    }
    let final_metrics = evaluate(&model, &valid_set)?;
    let line = format!(
        "event=final step={} {} best_step={}",
        state.step, final_metrics, state.best_step
    );
    writeln!(metrics, "{line}")?;
    writeln!(log, "{line}")?;
    Ok(TrainSummary {
        losses,
        final_metrics,
        best_step: state.best_step,
        checkpoint: best_path,
    })
}

/// Evaluates a checkpoint on `data`, or on the configured validation split.
pub fn cmd_eval(checkpoint: &Path, cfg: &RunConfig, data: Option<&Path>) -> Result<Metrics> {
    let (model, _) = Checkpoint::load(checkpoint)?.into_model()?;
    let data = match data {
        Some(p) => Dataset::read(p)?,
        None => {
            let mut c = cfg.clone();
            c.model.vocab_size = model.config().vocab_size;
            c.synthetic(1, c.task.valid_samples).generate()?
        }
    };
    evaluate(&model, &data)
}

pub fn parse_tokens(input: &str) -> Result<Vec<usize>> {
    input
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| Error::Input(format!("invalid token id `{t}`"))))
        .collect()
}

pub const CSV_HEADER: &str = "layer,head,query_pos,key_pos,weight";

/// Post-softmax encoder self-attention weights, grouped by layer then head.
/// Layers and heads are 1-based, positions 0-based.
pub fn attention_csv(model: &Seq2SeqModel, src: &[usize]) -> Result<String> {
    let layers = model.encoder_attention(src)?;
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for (li, weights) in layers.iter().enumerate() {
        let s = weights.shape();
        let (h, l, k) = (s[0], s[1], s[2]);
        for head in 0..h {
            for q in 0..l {
                for key in 0..k {
                    let w = weights.data()[(head * l + q) * k + key];
                    writeln!(out, "{},{},{q},{key},{w:e}", li + 1, head + 1).expect("writing to a String");
                }
            }
        }
    }
    Ok(out)
}

pub fn cmd_export_attention(checkpoint: &Path, input: &str, out: &Path) -> Result<usize> {
    let (model, _) = Checkpoint::load(checkpoint)?.into_model()?;
    let src = parse_tokens(input)?;
    let csv = attention_csv(&model, &src)?;
    fs::write(out, &csv)?;
    Ok(csv.lines().count() - 1)
}

/// Parses `M N K T` followed by `M*N` lines of `K` reals, in `(m, n)` row-major order.
pub fn parse_votes(text: &str) -> Result<VoteSet> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'));
    let err = |line, msg: String| Error::Parse { line, msg };
    let (hl, header) = lines.next().ok_or_else(|| err(1, "empty votes file".into()))?;
    let dims = header
        .split_whitespace()
        .map(|x| x.parse::<usize>())
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|_| err(hl, format!("expected `M N K T`, got `{header}`")))?;
    let [m, n, k, t] = dims[..] else {
        return Err(err(hl, format!("expected `M N K T`, got `{header}`")));
    };
    if m == 0 || n == 0 || k == 0 || t == 0 {
        return Err(err(hl, "M, N, K and T must be positive".into()));
    }
    let mut data = Vec::with_capacity(m * n * k);
    for row in 0..m * n {
        let (line, text) = lines
            .next()
            .ok_or_else(|| err(hl + row + 1, format!("expected {} vote lines, found {row}", m * n)))?;
        let values = text
            .split_whitespace()
            .map(|x| x.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| err(line, format!("invalid number in `{text}`")))?;
        if values.len() != k {
            return Err(err(line, format!("expected {k} values, found {}", values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(err(line, "votes must be finite".into()));
        }
        data.extend(values);
    }
    if let Some((line, _)) = lines.next() {
        return Err(err(line, format!("unexpected data after {} vote lines", m * n)));
    }
    VoteSet::new(Tensor::new(&[m, n, k], data)?, t)
}

fn write_matrix(out: &mut String, name: &str, t: &Tensor) {
    writeln!(out, "{name}").expect("writing to a String");
    let cols = t.shape()[1];
    for row in t.data().chunks(cols) {
        // Shortest representation that parses back to the same bits.
        let cells: Vec<String> = row.iter().map(|v| format!("{v:e}")).collect();
        writeln!(out, "  {}", cells.join(" ")).expect("writing to a String");
    }
}

pub fn format_routing(r: &RoutingResult) -> String {
    let mut out = String::new();
    write_matrix(&mut out, "omega", &r.omega);
    write_matrix(&mut out, "coupling", &r.coupling);
    write_matrix(&mut out, "vote_weights", &r.vote_weights);
    out
}

pub fn cmd_route_demo(path: &Path, iters: Option<usize>) -> Result<(RoutingResult, String)> {
    let text = fs::read_to_string(path)?;
    let mut votes = parse_votes(&text)?;
    if let Some(t) = iters {
        votes = VoteSet::new(votes.votes().clone(), t)?;
    }
    let r = dynamic_routing(&votes)?;
    let printed = format_routing(&r);
    Ok((r, printed))
}
