//! Capsule routing self-attention.
//!
//! The `(H, L, K)` logits cube is read two ways. Head-wise, each head's
//! `L × K` slab is a *vertical* capsule whose rows vote for `L` output
//! capsules. Token-wise, each token's `H × K` slab is a *horizontal* capsule
//! whose rows vote for `H` output capsules. Both routing outputs are shaped
//! like the cube and added onto it before the softmax.

use crate::attention::{attend, causal_mask, AttentionCube, MultiHeadProjection};
use crate::error::{Error, Result};
use crate::routing::{route, RoutedVars, RoutingOptions};
use crate::tensor::{Dropout, Tensor, Var};

/// The `H` head-wise slabs of a cube, each `(L, K)`.
#[derive(Debug, Clone)]
pub struct VerticalCapsules {
    pub capsules: Vec<Tensor>,
}

/// The `L` token-wise slabs of a cube, each `(H, K)`.
#[derive(Debug, Clone)]
pub struct HorizontalCapsules {
    pub capsules: Vec<Tensor>,
}

fn check_cube(cube: &Tensor) -> Result<()> {
    if cube.rank() != 3 {
        return Err(Error::dim("capsules", cube.shape(), &[0, 0, 0]));
    }
    Ok(())
}

pub fn split_vertical(cube: &Tensor) -> Result<VerticalCapsules> {
    check_cube(cube)?;
    Ok(VerticalCapsules {
        capsules: (0..cube.shape()[0]).map(|h| cube.index_axis0(h)).collect(),
    })
}

pub fn split_horizontal(cube: &Tensor) -> Result<HorizontalCapsules> {
    check_cube(cube)?;
    let by_token = cube.permute(&[1, 0, 2])?;
    Ok(HorizontalCapsules {
        capsules: (0..by_token.shape()[0]).map(|l| by_token.index_axis0(l)).collect(),
    })
}

impl VerticalCapsules {
    pub fn restack(&self) -> Result<Tensor> {
        Tensor::stack(&self.capsules)
    }
}

impl HorizontalCapsules {
    pub fn restack(&self) -> Result<Tensor> {
        Tensor::stack(&self.capsules)?.permute(&[1, 0, 2])
    }
}

/// Vertical votes `V[h → l] = e_{l,h}`: the cube itself read as `(M=H, N=L, K)`.
pub fn vertical_votes(cube: Var<'_>) -> Var<'_> {
    cube
}

/// Horizontal votes `V[l → h] = e_{l,h}`: the cube read as `(M=L, N=H, K)`.
pub fn horizontal_votes(cube: Var<'_>) -> Result<Var<'_>> {
    cube.permute(&[1, 0, 2])
}

/// Per-layer gate `Λ = W·[Σ_l B_{1→l}, …, Σ_l B_{H→l}] + b` deciding how much
/// of the vertical output each head absorbs.
#[derive(Debug, Clone, Copy)]
pub struct AcceptanceGate<'g> {
    pub weight: Var<'g>,
    pub bias: Var<'g>,
}

impl<'g> AcceptanceGate<'g> {
    pub fn new(weight: Var<'g>, bias: Var<'g>) -> Result<Self> {
        let w = weight.shape();
        let b = bias.shape();
        if w.len() != 2 || w[0] != w[1] || b != [w[0]] {
            return Err(Error::dim("acceptance_gate", &w, &b));
        }
        Ok(AcceptanceGate { weight, bias })
    }

    pub fn heads(&self) -> usize {
        self.bias.shape()[0]
    }

    /// Trainable scalars a gate adds for `heads` heads.
    pub const fn parameter_count(heads: usize) -> usize {
        heads * heads + heads
    }
}

#[derive(Debug, Clone, Copy)]
pub struct VerticalOutput<'g> {
    /// `(H, L, K)`; head `h` holds `λ_h · Ω̃`.
    pub omega: Var<'g>,
    /// Gate logits `Λ`, `(H)`.
    pub gate_logits: Var<'g>,
    /// `λ = softmax(Λ)`, `(H)`.
    pub gate: Var<'g>,
    pub routed: RoutedVars<'g>,
}

/// Routes the `H` vertical capsules to `L` output capsules and gates the
/// shared `(L, K)` result per head.
pub fn vertical_routing<'g>(
    cube: Var<'g>,
    gate: &AcceptanceGate<'g>,
    opts: RoutingOptions,
) -> Result<VerticalOutput<'g>> {
    let shape = cube.shape();
    if shape.len() != 3 || shape[0] != gate.heads() {
        return Err(Error::dim("vertical_routing", &shape, &[gate.heads(), 0, 0]));
    }
    let (h, l, k) = (shape[0], shape[1], shape[2]);
    let routed = route(vertical_votes(cube), opts)?;
    let head_totals = routed.vote_weights.sum_axis(1, false)?.reshape(&[h, 1])?;
    let gate_logits = gate.weight.matmul(head_totals)?.reshape(&[h])?.add(gate.bias)?;
    let lambda = gate_logits.softmax();
    let omega = lambda
        .reshape(&[h, 1, 1])?
        .mul(routed.omega.reshape(&[1, l, k])?)?;
    Ok(VerticalOutput {
        omega,
        gate_logits,
        gate: lambda,
        routed,
    })
}

/// Positional routing: output `l` routes only the horizontal capsules of
/// tokens `0..=l` to `H` outputs. Returns the `(H, L, K)` cube of results.
pub fn horizontal_routing(cube: Var<'_>, opts: RoutingOptions) -> Result<Var<'_>> {
    let shape = cube.shape();
    if shape.len() != 3 {
        return Err(Error::dim("horizontal_routing", &shape, &[0, 0, 0]));
    }
    let votes = horizontal_votes(cube)?;
    let outputs = (0..shape[1])
        .map(|l| Ok(route(votes.narrow(0, 0, l + 1)?, opts)?.omega))
        .collect::<Result<Vec<_>>>()?;
    cube.graph().stack(&outputs, 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SanOptions {
    pub vertical: bool,
    pub horizontal: bool,
    pub routing: RoutingOptions,
}

impl SanOptions {
    pub fn vanilla() -> Self {
        SanOptions {
            vertical: false,
            horizontal: false,
            routing: RoutingOptions::default(),
        }
    }

    pub fn is_vanilla(&self) -> bool {
        !self.vertical && !self.horizontal
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SanOutput<'g> {
    pub output: Var<'g>,
    /// Scaled dot-product logits before any routing.
    pub logits: Var<'g>,
    /// Logits after the routing outputs were added, before masking.
    pub routed_logits: Var<'g>,
    /// Post-softmax attention weights `(H, L, K)`.
    pub weights: Var<'g>,
}

/// One capsule routing self-attention sublayer.
#[derive(Debug, Clone)]
pub struct CapsuleSan<'g> {
    pub projection: MultiHeadProjection<'g>,
    pub gate: Option<AcceptanceGate<'g>>,
    pub options: SanOptions,
}

impl<'g> CapsuleSan<'g> {
    pub fn new(
        projection: MultiHeadProjection<'g>,
        gate: Option<AcceptanceGate<'g>>,
        options: SanOptions,
    ) -> Result<Self> {
        if options.vertical {
            match &gate {
                None => return Err(Error::Config("vertical routing needs an acceptance gate".into())),
                Some(g) if g.heads() != projection.heads() => {
                    return Err(Error::dim("capsule_san", &[g.heads()], &[projection.heads()]))
                }
                Some(_) => {}
            }
        }
        Ok(CapsuleSan {
            projection,
            gate,
            options,
        })
    }

    pub fn forward(&self, x: Var<'g>, causal: bool) -> Result<Var<'g>> {
        Ok(self.forward_traced(x, causal, &Dropout::disabled())?.output)
    }

    pub fn forward_traced(&self, x: Var<'g>, causal: bool, dropout: &Dropout) -> Result<SanOutput<'g>> {
        if causal && self.options.vertical {
            return Err(Error::Config(
                "vertical routing is not available under a causal mask".into(),
            ));
        }
        let heads = self.projection.project(x)?;
        let cube = AttentionCube::from_projection(&heads)?;
        let logits = cube.logits();
        let (l, k) = (cube.queries(), cube.keys());

        let routing_input = if causal && !self.options.is_vanilla() {
            // Future keys contribute nothing to the votes.
            logits.masked_fill(&causal_mask(l, k), &[l, k], 0.0)?
        } else {
            logits
        };
        let mut routed = logits;
        if self.options.vertical {
            let gate = self.gate.as_ref().expect("checked in new");
            routed = routed.add(vertical_routing(routing_input, gate, self.options.routing)?.omega)?;
        }
        if self.options.horizontal {
            routed = routed.add(horizontal_routing(routing_input, self.options.routing)?)?;
        }
        let attended = attend(
            &AttentionCube::new(routed)?,
            heads.v,
            self.projection.output_weight(),
            causal,
            dropout,
        )?;
        Ok(SanOutput {
            output: attended.output,
            logits,
            routed_logits: routed,
            weights: attended.weights,
        })
    }
}
