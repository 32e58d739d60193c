use crate::attention::{attend, AttentionCube, MultiHeadProjection};
use crate::capsule_san::{AcceptanceGate, CapsuleSan};
use crate::error::{Error, Result};
use crate::tensor::{Dropout, Graph, Reduction, Tensor, Var};

use super::config::{ModelConfig, Stack};
use super::params::{init_tensor, Binder, Init, ParamStore};
use super::{BOS, EOS, PAD};

const LN_EPS: f64 = 1e-5;

/// Encoder-decoder Transformer whose self-attention sublayers are capsule
/// routing SANs. Pre-norm residual blocks, sinusoidal positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Seq2SeqModel {
    config: ModelConfig,
    params: ParamStore,
}

/// Result of running the encoder.
#[derive(Debug, Clone)]
pub struct Encoded<'g> {
    pub memory: Var<'g>,
    /// Self-attention weights `(H, L, L)` of every encoder layer.
    pub attention: Vec<Var<'g>>,
}

/// Loss and parameter gradients for one training pair.
#[derive(Debug, Clone)]
pub struct ExampleGradients {
    /// Summed token cross entropy.
    pub loss: f64,
    pub tokens: usize,
    pub grads: Vec<Option<Tensor>>,
}

fn attn_names(prefix: &str, heads: usize) -> Vec<String> {
    let mut names = Vec::with_capacity(3 * heads + 1);
    for kind in ["q", "k", "v"] {
        for h in 0..heads {
            names.push(format!("{prefix}.{kind}.{h}"));
        }
    }
    names.push(format!("{prefix}.o"));
    names
}

/// Shapes and initializers of every parameter a configuration needs.
fn parameter_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, Init)> {
    let (d, f, v, h) = (cfg.d_model, cfg.d_ff, cfg.vocab_size, cfg.heads);
    let mut out = Vec::new();
    let emb_std = (d as f64).powf(-0.5);
    out.push(("src.embed".to_string(), vec![v, d], Init::Normal(emb_std)));
    out.push(("tgt.embed".to_string(), vec![v, d], Init::Normal(emb_std)));

    let attention = |out: &mut Vec<_>, prefix: String| {
        for name in attn_names(&prefix, h) {
            let shape = if name.ends_with(".o") { vec![d, d] } else { vec![d, d / h] };
            out.push((name, shape, Init::Xavier));
        }
    };
    let norm = |out: &mut Vec<(String, Vec<usize>, Init)>, prefix: String| {
        out.push((format!("{prefix}.gain"), vec![d], Init::Constant(1.0)));
        out.push((format!("{prefix}.bias"), vec![d], Init::Constant(0.0)));
    };
    let ffn = |out: &mut Vec<(String, Vec<usize>, Init)>, prefix: String| {
        out.push((format!("{prefix}.w1"), vec![d, f], Init::Xavier));
        out.push((format!("{prefix}.b1"), vec![f], Init::Constant(0.0)));
        out.push((format!("{prefix}.w2"), vec![f, d], Init::Xavier));
        out.push((format!("{prefix}.b2"), vec![d], Init::Constant(0.0)));
    };

    for l in 1..=cfg.enc_layers {
        attention(&mut out, format!("enc.{l}.self"));
        if cfg.san_options(Stack::Encoder, l).vertical {
            out.push((format!("enc.{l}.gate.w"), vec![h, h], Init::Xavier));
            out.push((format!("enc.{l}.gate.b"), vec![h], Init::Constant(0.0)));
        }
        norm(&mut out, format!("enc.{l}.norm1"));
        ffn(&mut out, format!("enc.{l}.ffn"));
        norm(&mut out, format!("enc.{l}.norm2"));
    }
    norm(&mut out, "enc.norm".to_string());
    for l in 1..=cfg.dec_layers {
        attention(&mut out, format!("dec.{l}.self"));
        norm(&mut out, format!("dec.{l}.norm1"));
        attention(&mut out, format!("dec.{l}.cross"));
        norm(&mut out, format!("dec.{l}.norm2"));
        ffn(&mut out, format!("dec.{l}.ffn"));
        norm(&mut out, format!("dec.{l}.norm3"));
    }
    norm(&mut out, "dec.norm".to_string());
    out.push(("out.w".to_string(), vec![d, v], Init::Xavier));
    out.push(("out.b".to_string(), vec![v], Init::Constant(0.0)));
    out
}

/// Sinusoidal position table for `len` positions.
pub fn positional_encoding(len: usize, d: usize) -> Tensor {
    let mut t = Tensor::zeros(&[len, d]);
    for pos in 0..len {
        for i in 0..d {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            let angle = pos as f64 / rate;
            t.set(&[pos, i], if i % 2 == 0 { angle.sin() } else { angle.cos() });
        }
    }
    t
}

impl Seq2SeqModel {
    /// Fresh model. Parameters are seeded per name, so a vanilla model and a
    /// capsule model built from the same seed share every common weight.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        for (name, shape, init) in parameter_layout(&config) {
            let t = init_tensor(seed, &name, &shape, init);
            params.insert(name, t)?;
        }
        Ok(Seq2SeqModel { config, params })
    }

    /// Rebuilds a model from stored parameters, checking names and shapes.
    pub fn from_parts(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let layout = parameter_layout(&config);
        if layout.len() != params.len() {
            return Err(Error::Input(format!(
                "expected {} parameters, found {}",
                layout.len(),
                params.len()
            )));
        }
        for (name, shape, _) in &layout {
            match params.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => return Err(Error::dim("from_parts", t.shape(), shape)),
                None => return Err(Error::Input(format!("missing parameter `{name}`"))),
            }
        }
        Ok(Seq2SeqModel { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn parameter_count(&self) -> usize {
        self.params.element_count()
    }

    fn check_tokens(&self, what: &str, tokens: &[usize], max: usize) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Input(format!("empty {what} sequence")));
        }
        if tokens.len() > max {
            return Err(Error::Input(format!(
                "{what} length {} exceeds limit {max}",
                tokens.len()
            )));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::Input(format!(
                "token {t} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    fn embed<'g>(&self, b: &Binder<'g, '_>, table: &str, tokens: &[usize], dropout: &Dropout) -> Result<Var<'g>> {
        let d = self.config.d_model;
        let e = b.param(table)?.gather_rows(tokens)?.scale((d as f64).sqrt());
        let pe = b.graph().constant(positional_encoding(tokens.len(), d));
        dropout.apply(e.add(pe)?)
    }

    fn norm<'g>(&self, b: &Binder<'g, '_>, prefix: &str, x: Var<'g>) -> Result<Var<'g>> {
        x.layer_norm(LN_EPS)
            .mul(b.param(&format!("{prefix}.gain"))?)?
            .add(b.param(&format!("{prefix}.bias"))?)
    }

    fn ffn<'g>(&self, b: &Binder<'g, '_>, prefix: &str, x: Var<'g>) -> Result<Var<'g>> {
        let p = |n: &str| b.param(&format!("{prefix}.{n}"));
        x.matmul(p("w1")?)?.add(p("b1")?)?.relu().matmul(p("w2")?)?.add(p("b2")?)
    }

    fn projection<'g>(&self, b: &Binder<'g, '_>, prefix: &str) -> Result<MultiHeadProjection<'g>> {
        let h = self.config.heads;
        let names = attn_names(prefix, h);
        let vars = names.iter().map(|n| b.param(n)).collect::<Result<Vec<_>>>()?;
        MultiHeadProjection::new(
            vars[..h].to_vec(),
            vars[h..2 * h].to_vec(),
            vars[2 * h..3 * h].to_vec(),
            vars[3 * h],
        )
    }

    fn self_attention_layer<'g>(&self, b: &Binder<'g, '_>, stack: Stack, layer: usize) -> Result<CapsuleSan<'g>> {
        let tag = match stack {
            Stack::Encoder => "enc",
            Stack::Decoder => "dec",
        };
        let options = self.config.san_options(stack, layer);
        let gate = if options.vertical {
            Some(AcceptanceGate::new(
                b.param(&format!("{tag}.{layer}.gate.w"))?,
                b.param(&format!("{tag}.{layer}.gate.b"))?,
            )?)
        } else {
            None
        };
        CapsuleSan::new(self.projection(b, &format!("{tag}.{layer}.self"))?, gate, options)
    }

    pub fn encode<'g>(&self, b: &Binder<'g, '_>, src: &[usize], dropout: &Dropout) -> Result<Encoded<'g>> {
        self.check_tokens("source", src, self.config.max_len)?;
        let mut x = self.embed(b, "src.embed", src, dropout)?;
        let mut attention = Vec::with_capacity(self.config.enc_layers);
        for l in 1..=self.config.enc_layers {
            let san = self.self_attention_layer(b, Stack::Encoder, l)?;
            let h = self.norm(b, &format!("enc.{l}.norm1"), x)?;
            let out = san.forward_traced(h, false, dropout)?;
            attention.push(out.weights);
            x = x.add(dropout.apply(out.output)?)?;
            let h = self.norm(b, &format!("enc.{l}.norm2"), x)?;
            x = x.add(dropout.apply(self.ffn(b, &format!("enc.{l}.ffn"), h)?)?)?;
        }
        Ok(Encoded {
            memory: self.norm(b, "enc.norm", x)?,
            attention,
        })
    }

    /// Vocabulary logits `(T, V)` for each position of `tgt_prefix`, which
    /// starts with BOS. Position `i` only sees prefix tokens `0..=i`.
    pub fn decode<'g>(
        &self,
        b: &Binder<'g, '_>,
        memory: Var<'g>,
        tgt_prefix: &[usize],
        dropout: &Dropout,
    ) -> Result<Var<'g>> {
        self.check_tokens("target", tgt_prefix, self.config.max_len + 1)?;
        let mut x = self.embed(b, "tgt.embed", tgt_prefix, dropout)?;
        for l in 1..=self.config.dec_layers {
            let san = self.self_attention_layer(b, Stack::Decoder, l)?;
            let h = self.norm(b, &format!("dec.{l}.norm1"), x)?;
            x = x.add(dropout.apply(san.forward_traced(h, true, dropout)?.output)?)?;

            let h = self.norm(b, &format!("dec.{l}.norm2"), x)?;
            let cross = self.projection(b, &format!("dec.{l}.cross"))?;
            let heads = cross.project_cross(h, memory)?;
            let cube = AttentionCube::from_projection(&heads)?;
            let attended = attend(&cube, heads.v, cross.output_weight(), false, dropout)?;
            x = x.add(dropout.apply(attended.output)?)?;

            let h = self.norm(b, &format!("dec.{l}.norm3"), x)?;
            x = x.add(dropout.apply(self.ffn(b, &format!("dec.{l}.ffn"), h)?)?)?;
        }
        let x = self.norm(b, "dec.norm", x)?;
        x.matmul(b.param("out.w")?)?.add(b.param("out.b")?)
    }

    /// Teacher-forced logits for decoder input `tgt_in` (BOS-prefixed), no dropout.
    pub fn logits(&self, src: &[usize], tgt_in: &[usize]) -> Result<Tensor> {
        let graph = Graph::new();
        let b = Binder::new(&graph, &self.params, false);
        let off = Dropout::disabled();
        let enc = self.encode(&b, src, &off)?;
        Ok(self.decode(&b, enc.memory, tgt_in, &off)?.value())
    }

    /// Post-softmax encoder self-attention weights, one `(H, L, L)` tensor per layer.
    pub fn encoder_attention(&self, src: &[usize]) -> Result<Vec<Tensor>> {
        let graph = Graph::new();
        let b = Binder::new(&graph, &self.params, false);
        let enc = self.encode(&b, src, &Dropout::disabled())?;
        Ok(enc.attention.iter().map(Var::value).collect())
    }

    /// Appends the argmax token until EOS or `max_len` tokens. The returned
    /// sequence excludes BOS and EOS.
    pub fn greedy_decode(&self, src: &[usize]) -> Result<Vec<usize>> {
        let graph = Graph::new();
        let b = Binder::new(&graph, &self.params, false);
        let off = Dropout::disabled();
        let memory = self.encode(&b, src, &off)?.memory;
        let mut prefix = vec![BOS];
        while prefix.len() <= self.config.max_len {
            let logits = self.decode(&b, memory, &prefix, &off)?.value();
            let v = self.config.vocab_size;
            let last = &logits.data()[(prefix.len() - 1) * v..prefix.len() * v];
            let next = argmax(last);
            if next == EOS {
                break;
            }
            prefix.push(next);
        }
        prefix.remove(0);
        Ok(prefix)
    }

    /// Teacher-forced loss (summed over target tokens plus EOS) and gradients.
    pub fn example_gradients(&self, src: &[usize], tgt: &[usize], dropout: &Dropout) -> Result<ExampleGradients> {
        if tgt.len() > self.config.max_len {
            return Err(Error::Input(format!(
                "target length {} exceeds max_len {}",
                tgt.len(),
                self.config.max_len
            )));
        }
        let graph = Graph::new();
        let b = Binder::new(&graph, &self.params, true);
        let enc = self.encode(&b, src, dropout)?;
        let (input, output) = teacher_forcing_pair(tgt);
        let logits = self.decode(&b, enc.memory, &input, dropout)?;
        let loss = logits.cross_entropy(&output, Some(PAD), Reduction::Sum)?;
        let value = loss.item();
        if !value.is_finite() {
            let op = graph.first_non_finite().unwrap_or("cross_entropy");
            return Err(Error::NonFinite { op: op.to_string() });
        }
        graph.backward(loss)?;
        Ok(ExampleGradients {
            loss: value,
            tokens: output.iter().filter(|&&t| t != PAD).count(),
            grads: b.gradients(),
        })
    }
}

/// Decoder input `[BOS, t…]` and expected output `[t…, EOS]`.
pub fn teacher_forcing_pair(tgt: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let mut input = Vec::with_capacity(tgt.len() + 1);
    input.push(BOS);
    input.extend_from_slice(tgt);
    let mut output = tgt.to_vec();
    output.push(EOS);
    (input, output)
}

pub(crate) fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            d_ff: 16,
            vocab_size: 10,
            max_len: 6,
            ..ModelConfig::toy()
        }
    }

    #[test]
    fn allocated_parameters_match_formula() {
        for cfg in [tiny(), tiny().into_vanilla(), ModelConfig::toy()] {
            let m = Seq2SeqModel::new(cfg.clone(), 1).unwrap();
            assert_eq!(m.parameter_count(), cfg.parameter_count());
        }
    }

    #[test]
    fn rejects_bad_input() {
        let m = Seq2SeqModel::new(tiny(), 1).unwrap();
        assert!(matches!(m.logits(&[], &[BOS]), Err(Error::Input(_))));
        assert!(matches!(m.logits(&[3, 10], &[BOS]), Err(Error::Input(_))));
        assert!(matches!(m.logits(&[3; 7], &[BOS]), Err(Error::Input(_))));
    }

    #[test]
    fn greedy_output_is_bounded() {
        let m = Seq2SeqModel::new(tiny(), 3).unwrap();
        let out = m.greedy_decode(&[3, 4, 5]).unwrap();
        assert!(out.len() <= tiny().max_len);
    }

    #[test]
    fn eos_first_gives_empty_output() {
        let mut m = Seq2SeqModel::new(tiny(), 3).unwrap();
        m.params_mut().get_mut("out.b").unwrap().set(&[EOS], 1e6);
        assert!(m.greedy_decode(&[3, 4, 5]).unwrap().is_empty());
    }

    #[test]
    fn positional_encoding_first_rows() {
        let pe = positional_encoding(2, 4);
        assert_eq!(pe.data()[..4], [0.0, 1.0, 0.0, 1.0]);
        assert!((pe.get(&[1, 0]) - 1f64.sin()).abs() < 1e-15);
        assert!((pe.get(&[1, 3]) - (1.0 / 100f64).cos()).abs() < 1e-15);
    }

    #[test]
    fn gradients_cover_every_parameter() {
        let m = Seq2SeqModel::new(tiny(), 5).unwrap();
        let g = m.example_gradients(&[3, 4, 5], &[3, 4, 5], &Dropout::disabled()).unwrap();
        assert_eq!(g.tokens, 4);
        assert!(g.loss > 0.0);
        for (name, grad) in m.params().names().iter().zip(&g.grads) {
            let grad = grad.as_ref().unwrap_or_else(|| panic!("no gradient for {name}"));
            assert!(grad.is_finite());
        }
    }
}
