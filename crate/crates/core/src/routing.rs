//! Nonparametric dynamic routing between capsule layers.
//!
//! Every input capsule `m` emits one vote vector `V[m][n]` per output capsule
//! `n`. Routing starts from zero vote weights `B` and repeats, `T` times:
//!
//! 1. coupling `R[m][·] = softmax(B[m][·])`, over the output index;
//! 2. `S[n] = Σ_m R[m][n] · V[m][n]`;
//! 3. `Ω[n] = squash(S[n])`;
//! 4. `B[m][n] += Ω[n] · V[m][n]`.
//!
//! The loop is recorded on the differentiation tape, so gradients flow through
//! every iteration unless the coupling is explicitly detached.

use crate::error::{Error, Result};
use crate::tensor::{kernels, Graph, Tensor, Var};

/// Guards the squashing denominator at the zero vector.
pub const SQUASH_EPS: f64 = 1e-12;

/// Default number of routing iterations.
pub const DEFAULT_ITERATIONS: usize = 3;

/// `(‖s‖² / (1 + ‖s‖²)) · s / (‖s‖ + ε)`.
pub fn squash(s: &[f64]) -> Vec<f64> {
    let norm = s.iter().map(|v| v * v).sum::<f64>().sqrt();
    let f = kernels::squash_factor(norm, SQUASH_EPS);
    s.iter().map(|v| v * f).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoutingOptions {
    pub iterations: usize,
    /// Treat the coupling coefficients as constants in the backward pass.
    pub detach_coupling: bool,
}

impl Default for RoutingOptions {
    fn default() -> Self {
        RoutingOptions {
            iterations: DEFAULT_ITERATIONS,
            detach_coupling: false,
        }
    }
}

impl RoutingOptions {
    pub fn with_iterations(iterations: usize) -> Self {
        RoutingOptions {
            iterations,
            ..Self::default()
        }
    }
}

/// `M × N` vote vectors of length `K`, stored as an `(M, N, K)` tensor.
#[derive(Debug, Clone)]
pub struct VoteSet {
    votes: Tensor,
    iterations: usize,
}

impl VoteSet {
    pub fn new(votes: Tensor, iterations: usize) -> Result<Self> {
        if votes.rank() != 3 {
            return Err(Error::dim("vote_set", votes.shape(), &[0, 0, 0]));
        }
        if !votes.is_finite() {
            return Err(Error::Input("vote vectors must be finite".into()));
        }
        if iterations == 0 {
            return Err(Error::Contract("routing needs at least one iteration".into()));
        }
        Ok(VoteSet { votes, iterations })
    }

    pub fn inputs(&self) -> usize {
        self.votes.shape()[0]
    }

    pub fn outputs(&self) -> usize {
        self.votes.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.votes.shape()[2]
    }

    pub fn votes(&self) -> &Tensor {
        &self.votes
    }

    pub fn iterations(&self) -> usize {
        self.iterations
    }
}

/// Outcome of routing as plain values.
#[derive(Debug, Clone)]
pub struct RoutingResult {
    /// Output capsules, `(N, K)`.
    pub omega: Tensor,
    /// Vote weights after the final update, `(M, N)`.
    pub vote_weights: Tensor,
    /// Coupling coefficients used in the final iteration, `(M, N)`.
    pub coupling: Tensor,
    /// Weighted vote sums before squashing in the final iteration, `(N, K)`.
    pub weighted_sum: Tensor,
}

/// Outcome of routing as graph variables.
#[derive(Debug, Clone, Copy)]
pub struct RoutedVars<'g> {
    pub omega: Var<'g>,
    pub vote_weights: Var<'g>,
    pub coupling: Var<'g>,
    pub weighted_sum: Var<'g>,
}

/// Dynamic routing over an `(M, N, K)` vote variable.
pub fn route<'g>(votes: Var<'g>, opts: RoutingOptions) -> Result<RoutedVars<'g>> {
    let shape = votes.shape();
    if shape.len() != 3 {
        return Err(Error::dim("route", &shape, &[0, 0, 0]));
    }
    if opts.iterations == 0 {
        return Err(Error::Contract("routing needs at least one iteration".into()));
    }
    let (m, n, k) = (shape[0], shape[1], shape[2]);
    let graph = votes.graph();
    let mut b = graph.constant(Tensor::zeros(&[m, n]));
    let mut last = None;
    for _ in 0..opts.iterations {
        let mut r = b.softmax();
        if opts.detach_coupling {
            r = r.detach();
        }
        let s = r.reshape(&[m, n, 1])?.mul(votes)?.sum_axis(0, false)?;
        let omega = s.squash(SQUASH_EPS);
        let agreement = omega.reshape(&[1, n, k])?.mul(votes)?.sum_axis(2, false)?;
        b = b.add(agreement)?;
        last = Some((omega, r, s));
    }
    let (omega, coupling, weighted_sum) = last.expect("at least one iteration");
    Ok(RoutedVars {
        omega,
        vote_weights: b,
        coupling,
        weighted_sum,
    })
}

/// Routes a [`VoteSet`] on a private graph and returns plain values.
/// Finite votes can still overflow (e.g. squared norms beyond `f64::MAX`);
/// that is reported as [`Error::NonFinite`].
pub fn dynamic_routing(votes: &VoteSet) -> Result<RoutingResult> {
    let graph = Graph::new();
    let v = graph.constant(votes.votes.clone());
    let out = route(v, RoutingOptions::with_iterations(votes.iterations))?;
    if let Some(op) = graph.first_non_finite() {
        return Err(Error::NonFinite { op: op.to_string() });
    }
    Ok(RoutingResult {
        omega: out.omega.value(),
        vote_weights: out.vote_weights.value(),
        coupling: out.coupling.value(),
        weighted_sum: out.weighted_sum.value(),
    })
}
