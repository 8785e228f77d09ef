//! Pedestrian-domain spatial attention.
//!
//! A neighbour at distance `d` in encounter bin `(i, j)` scores
//! `ReLU(S[i,j] - d)` against the learnable domain grid `S`. Scores are
//! normalised across the neighbours of each pedestrian, the normalised
//! weights pool the neighbours' hidden states into a spatial context
//! vector, and the context is fused with the pedestrian's own hidden
//! state.

use rand::Rng;

use crate::autodiff::{Init, ParamStore, Result, Shape, Tape, Tensor, Var};
use crate::geometry::{bin_index, compute_encounter, AgentKinematics, BinSpec, EncounterGeometry};
use crate::layers::Linear;

/// Initial value of every domain cell, in meters.
pub const DOMAIN_INIT_M: f64 = 4.0;

/// How raw scores become neighbour weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ScoreNormalization {
    /// Softmax over neighbours with a positive raw score only; every other
    /// neighbour gets weight exactly 0.
    #[default]
    Masked,
    /// Softmax over all present neighbours, so out-of-domain neighbours
    /// still get `exp(0)` mass.
    Literal,
}

impl ScoreNormalization {
    pub fn as_str(self) -> &'static str {
        match self {
            ScoreNormalization::Masked => "masked",
            ScoreNormalization::Literal => "literal",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "masked" => Some(Self::Masked),
            "literal" => Some(Self::Literal),
            _ => None,
        }
    }
}

pub fn register_domain<R: Rng + ?Sized>(store: &mut ParamStore, rng: &mut R, name: &str, spec: &BinSpec) -> Result<()> {
    store.register(name, Shape::matrix(spec.m, spec.n), Init::Constant(DOMAIN_INIT_M), rng)
}

/// The domain matrix `S` bound to a tape.
#[derive(Debug, Clone, Copy)]
pub struct DomainGrid {
    pub values: Var,
    pub spec: BinSpec,
}

/// Domain grid rendered as CSV: `m` rows (bearing bins) × `n` columns
/// (heading bins), meters.
pub fn domain_csv(grid: &Tensor) -> String {
    let dims = grid.shape.dims();
    let (m, n) = (dims[0], dims[1]);
    let mut out = String::new();
    for i in 0..m {
        let row: Vec<String> = grid.values[i * n..(i + 1) * n].iter().map(|v| format!("{v}")).collect();
        out.push_str(&row.join(","));
        out.push('\n');
    }
    out
}

/// `ReLU(S[i,j] - d)` where `(i, j)` is the bin of `g` and `distance` is
/// the differentiable distance node (its value should equal `g.d`).
pub fn raw_score(tape: &mut Tape, grid: &DomainGrid, g: &EncounterGeometry, distance: Var) -> Result<Var> {
    let cell = grid.spec.flat(bin_index(g, &grid.spec));
    let s = tape.index(grid.values, cell)?;
    let margin = tape.sub(s, distance)?;
    tape.relu(margin)
}

/// Neighbour weights of one target pedestrian.
#[derive(Debug, Clone)]
pub struct SpatialWeights {
    /// Raw scores, shape `(n,)`.
    pub raw: Var,
    /// Normalised weights, shape `(n,)`.
    pub normalized: Var,
    /// Neighbours that take part in the normalisation.
    pub active: Vec<bool>,
}

/// Stacks per-neighbour raw scores and normalises them. `present` marks
/// neighbours that exist at this step.
pub fn normalize_scores(
    tape: &mut Tape,
    raw: &[Var],
    present: &[bool],
    mode: ScoreNormalization,
) -> Result<SpatialWeights> {
    if raw.is_empty() {
        let raw = tape.zeros(0);
        let normalized = tape.zeros(0);
        return Ok(SpatialWeights {
            raw,
            normalized,
            active: Vec::new(),
        });
    }
    let stacked = tape.stack(raw)?;
    let active: Vec<bool> = match mode {
        ScoreNormalization::Masked => tape
            .value(stacked)
            .iter()
            .zip(present)
            .map(|(&r, &p)| p && r > 0.0)
            .collect(),
        ScoreNormalization::Literal => present.to_vec(),
    };
    let normalized = tape.masked_softmax(stacked, active.clone())?;
    Ok(SpatialWeights {
        raw: stacked,
        normalized,
        active,
    })
}

/// `Σ_n w_n h_n` over active neighbours, or the zero vector when none is
/// active. Inactive neighbours are not touched at all.
pub fn context_vector(tape: &mut Tape, weights: &SpatialWeights, neighbor_hiddens: &[Var], hidden_dim: usize) -> Result<Var> {
    let mut terms = Vec::new();
    for (n, &h) in neighbor_hiddens.iter().enumerate() {
        if weights.active[n] {
            let w = tape.index(weights.normalized, n)?;
            terms.push(tape.mul(w, h)?);
        }
    }
    if terms.is_empty() {
        Ok(tape.zeros(hidden_dim))
    } else {
        tape.add_all(&terms)
    }
}

/// Output of the hidden-state fusion.
#[derive(Debug, Clone, Copy)]
pub struct Fused {
    /// `tanh(W [h; C] + b)`, length `H`.
    pub hidden: Var,
    /// The raw `[h; C]` concatenation, length `2H`.
    pub concat: Var,
}

pub fn fuse_hidden(tape: &mut Tape, projection: &Linear, own_hidden: Var, context: Var) -> Result<Fused> {
    let concat = tape.concat(&[own_hidden, context])?;
    let projected = projection.forward(tape, concat)?;
    let hidden = tape.tanh(projected)?;
    Ok(Fused { hidden, concat })
}

/// One pedestrian at one step, as seen by the attention layer.
#[derive(Debug, Clone, Copy)]
pub struct AgentSlot {
    /// Position node of shape `(2,)`.
    pub position: Var,
    pub kinematics: AgentKinematics,
    pub hidden: Var,
    pub present: bool,
}

/// Per-target diagnostics for one attention pass.
#[derive(Debug, Clone)]
pub struct Attended {
    pub fused: Fused,
    /// Neighbour indices (into the scene) in the order the weights use.
    pub neighbors: Vec<usize>,
    pub weights: SpatialWeights,
}

/// Spatial attention for every present pedestrian of a scene.
///
/// `order` fixes the iteration order over neighbours (a permutation of
/// `0..agents.len()`); iterating in an order keyed on pedestrian identity
/// makes every per-pedestrian result independent of input ordering.
pub fn attend_scene(
    tape: &mut Tape,
    grid: &DomainGrid,
    mode: ScoreNormalization,
    projection: &Linear,
    agents: &[AgentSlot],
    order: &[usize],
    hidden_dim: usize,
) -> Result<Vec<Option<Attended>>> {
    let mut out = Vec::with_capacity(agents.len());
    for (p, me) in agents.iter().enumerate() {
        if !me.present {
            out.push(None);
            continue;
        }
        let mut neighbors = Vec::new();
        let mut raw = Vec::new();
        let mut present = Vec::new();
        let mut hiddens = Vec::new();
        for &q in order {
            if q == p {
                continue;
            }
            let other = &agents[q];
            neighbors.push(q);
            present.push(other.present);
            hiddens.push(other.hidden);
            if other.present {
                let g = compute_encounter(&me.kinematics, &other.kinematics);
                let diff = tape.sub(other.position, me.position)?;
                let d = tape.norm(diff)?;
                raw.push(raw_score(tape, grid, &g, d)?);
            } else {
                raw.push(tape.scalar(0.0));
            }
        }
        let weights = normalize_scores(tape, &raw, &present, mode)?;
        let context = context_vector(tape, &weights, &hiddens, hidden_dim)?;
        let fused = fuse_hidden(tape, projection, me.hidden, context)?;
        out.push(Some(Attended {
            fused,
            neighbors,
            weights,
        }));
    }
    Ok(out)
}
