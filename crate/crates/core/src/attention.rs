//! Multi-head scaled dot-product attention with the pre-softmax logits cube
//! exposed as its own value, so routing can modify it before normalization.

use crate::error::{Error, Result};
use crate::tensor::{Dropout, Var, MASK_SENTINEL};

/// Per-head projection blocks `W_Q[h], W_K[h], W_V[h]` of shape `d × d/H`
/// and the output map `W_O` of shape `d × d`.
#[derive(Debug, Clone)]
pub struct MultiHeadProjection<'g> {
    w_q: Vec<Var<'g>>,
    w_k: Vec<Var<'g>>,
    w_v: Vec<Var<'g>>,
    w_o: Var<'g>,
    d_model: usize,
    d_head: usize,
}

/// Projected queries, keys and values stacked over heads: `(H, L, d/H)`.
#[derive(Debug, Clone, Copy)]
pub struct ProjectedHeads<'g> {
    pub q: Var<'g>,
    pub k: Var<'g>,
    pub v: Var<'g>,
}

impl<'g> ProjectedHeads<'g> {
    /// `(Q_h, K_h, V_h)` for one head, each `(L, d/H)`.
    pub fn head(&self, h: usize) -> Result<(Var<'g>, Var<'g>, Var<'g>)> {
        let pick = |x: Var<'g>| -> Result<Var<'g>> {
            let s = x.shape();
            x.narrow(0, h, 1)?.reshape(&s[1..])
        };
        Ok((pick(self.q)?, pick(self.k)?, pick(self.v)?))
    }
}

impl<'g> MultiHeadProjection<'g> {
    pub fn new(w_q: Vec<Var<'g>>, w_k: Vec<Var<'g>>, w_v: Vec<Var<'g>>, w_o: Var<'g>) -> Result<Self> {
        let heads = w_q.len();
        if heads == 0 || w_k.len() != heads || w_v.len() != heads {
            return Err(Error::Config("projection needs the same nonzero number of Q, K, V blocks".into()));
        }
        let o = w_o.shape();
        if o.len() != 2 || o[0] != o[1] {
            return Err(Error::dim("projection", &o, &[0, 0]));
        }
        let d_model = o[0];
        if d_model % heads != 0 {
            return Err(Error::Config(format!("{heads} heads do not divide width {d_model}")));
        }
        let d_head = d_model / heads;
        for w in w_q.iter().chain(&w_k).chain(&w_v) {
            if w.shape() != [d_model, d_head] {
                return Err(Error::dim("projection", &w.shape(), &[d_model, d_head]));
            }
        }
        Ok(MultiHeadProjection {
            w_q,
            w_k,
            w_v,
            w_o,
            d_model,
            d_head,
        })
    }

    pub fn heads(&self) -> usize {
        self.w_q.len()
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn d_head(&self) -> usize {
        self.d_head
    }

    pub fn output_weight(&self) -> Var<'g> {
        self.w_o
    }

    fn apply(&self, blocks: &[Var<'g>], x: Var<'g>) -> Result<Var<'g>> {
        let s = x.shape();
        if s.len() != 2 || s[1] != self.d_model {
            return Err(Error::dim("project", &s, &[0, self.d_model]));
        }
        let stacked = x.graph().stack(blocks, 0)?;
        x.matmul(stacked)
    }

    /// Self-attention projection of `x: (L, d)`.
    pub fn project(&self, x: Var<'g>) -> Result<ProjectedHeads<'g>> {
        self.project_cross(x, x)
    }

    /// Queries from `queries: (L, d)`, keys and values from `memory: (K, d)`.
    pub fn project_cross(&self, queries: Var<'g>, memory: Var<'g>) -> Result<ProjectedHeads<'g>> {
        Ok(ProjectedHeads {
            q: self.apply(&self.w_q, queries)?,
            k: self.apply(&self.w_k, memory)?,
            v: self.apply(&self.w_v, memory)?,
        })
    }
}

/// `Q_h K_hᵀ / √d_k` for one head.
pub fn head_logits<'g>(q: Var<'g>, k: Var<'g>) -> Result<Var<'g>> {
    let qs = q.shape();
    let ks = k.shape();
    if qs.len() != 2 || ks.len() != 2 || qs[1] != ks[1] {
        return Err(Error::dim("head_logits", &qs, &ks));
    }
    Ok(q.matmul(k.transpose_last_two()?)?.scale(1.0 / (qs[1] as f64).sqrt()))
}

/// Pre-softmax attention logits, axes `(head, query, key)`.
#[derive(Debug, Clone, Copy)]
pub struct AttentionCube<'g> {
    logits: Var<'g>,
}

impl<'g> AttentionCube<'g> {
    pub fn new(logits: Var<'g>) -> Result<Self> {
        if logits.shape().len() != 3 {
            return Err(Error::dim("attention_cube", &logits.shape(), &[0, 0, 0]));
        }
        Ok(AttentionCube { logits })
    }

    /// Scaled dot-product logits for every head at once.
    pub fn from_projection(p: &ProjectedHeads<'g>) -> Result<Self> {
        let d_k = *p.q.shape().last().expect("rank 3");
        let logits = p.q.matmul(p.k.transpose_last_two()?)?.scale(1.0 / (d_k as f64).sqrt());
        Self::new(logits)
    }

    pub fn logits(&self) -> Var<'g> {
        self.logits
    }

    fn dim(&self, i: usize) -> usize {
        self.logits.shape()[i]
    }

    pub fn heads(&self) -> usize {
        self.dim(0)
    }

    pub fn queries(&self) -> usize {
        self.dim(1)
    }

    pub fn keys(&self) -> usize {
        self.dim(2)
    }
}

/// `(queries × keys)` mask, true where the key lies after the query.
pub fn causal_mask(queries: usize, keys: usize) -> Vec<bool> {
    (0..queries)
        .flat_map(|q| (0..keys).map(move |k| k > q))
        .collect()
}

#[derive(Debug, Clone, Copy)]
pub struct Attended<'g> {
    /// `(L, d)` after the output projection.
    pub output: Var<'g>,
    /// Post-softmax weights `(H, L, K)`, before dropout.
    pub weights: Var<'g>,
}

/// Softmax over each logits row, mix the per-head values `(H, K, d/H)`,
/// concatenate the heads and apply `W_O`.
pub fn attend<'g>(
    cube: &AttentionCube<'g>,
    values: Var<'g>,
    w_o: Var<'g>,
    causal: bool,
    dropout: &Dropout,
) -> Result<Attended<'g>> {
    let (h, l, k) = (cube.heads(), cube.queries(), cube.keys());
    let vs = values.shape();
    if vs.len() != 3 || vs[0] != h || vs[1] != k {
        return Err(Error::dim("attend", &vs, &[h, k, 0]));
    }
    let mut logits = cube.logits;
    if causal {
        logits = logits.masked_fill(&causal_mask(l, k), &[l, k], MASK_SENTINEL)?;
    }
    let weights = logits.softmax();
    let mixed = dropout.apply(weights)?.matmul(values)?;
    let concat = mixed.permute(&[1, 0, 2])?.reshape(&[l, h * vs[2]])?;
    Ok(Attended {
        output: concat.matmul(w_o)?,
        weights,
    })
}
