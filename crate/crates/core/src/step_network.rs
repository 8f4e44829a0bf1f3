//! Candidate scoring with a state carried from step to step.
//!
//! Within a step every candidate gets its own next-state proposal; exactly
//! one survives into the following step (the ground-truth candidate while
//! training, the top-scoring one while evaluating).

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum StepVariant {
    #[default]
    Gru,
    Mlp,
}

impl std::str::FromStr for StepVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gru" => Ok(StepVariant::Gru),
            "mlp" => Ok(StepVariant::Mlp),
            other => Err(Error::Config(format!("unknown step variant {other:?}"))),
        }
    }
}

impl std::fmt::Display for StepVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StepVariant::Gru => "GRU",
            StepVariant::Mlp => "MLP",
        })
    }
}

#[derive(Debug, Clone)]
pub struct GateParams {
    pub input: ParamId,
    pub recurrent: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct GruCell {
    pub update: GateParams,
    pub reset: GateParams,
    pub candidate: GateParams,
    pub input_dim: usize,
    pub state_dim: usize,
}

impl GruCell {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        group: &str,
        input_dim: usize,
        state_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let mut gate = |name: &str| -> Result<GateParams> {
            Ok(GateParams {
                input: store.register_uniform(format!("{group}/w_{name}"), input_dim, state_dim, rng)?,
                recurrent: store.register_uniform(
                    format!("{group}/u_{name}"),
                    state_dim,
                    state_dim,
                    rng,
                )?,
                bias: store.register(format!("{group}/b_{name}"), Tensor::zeros(1, state_dim))?,
            })
        };
        Ok(Self {
            update: gate("z")?,
            reset: gate("r")?,
            candidate: gate("h")?,
            input_dim,
            state_dim,
        })
    }

    /// One GRU update for each row of `x` (`n x d_in`) from the shared state
    /// `h` (`1 x d_s`); returns `n x d_s`.
    ///
    /// `z = σ(x W_z + h U_z + b_z)`, `r = σ(x W_r + h U_r + b_r)`,
    /// `h~ = tanh(x W_h + (r ⊙ h) U_h + b_h)`, `h' = (1 - z) ⊙ h + z ⊙ h~`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: Var,
        h: Var,
    ) -> Result<Var> {
        let (n, d_in) = g.shape(x);
        if d_in != self.input_dim || g.shape(h) != (1, self.state_dim) {
            let (hr, hc) = g.shape(h);
            return Err(Error::shape(
                "gru_cell",
                format!(
                    "input {n}x{d_in} and state {hr}x{hc} for a {}->{} cell",
                    self.input_dim, self.state_dim
                ),
            ));
        }
        let h_rows = g.repeat_rows(h, n)?;

        let gate = |g: &mut Graph<T>, p: &GateParams, state: Var| -> Result<Var> {
            let w = g.param(store, p.input)?;
            let u = g.param(store, p.recurrent)?;
            let b = g.param(store, p.bias)?;
            let xw = g.matmul(x, w)?;
            let hu = g.matmul(state, u)?;
            let pre = g.add(xw, hu)?;
            g.add_row(pre, b)
        };
        let z = gate(g, &self.update, h_rows)?;
        let z = g.sigmoid(z)?;
        let r = gate(g, &self.reset, h_rows)?;
        let r = g.sigmoid(r)?;
        let rh = g.mul(r, h_rows)?;
        let cand = gate(g, &self.candidate, rh)?;
        let cand = g.tanh(cand)?;

        let keep = g.one_minus(z)?;
        let kept = g.mul(keep, h_rows)?;
        let new = g.mul(z, cand)?;
        g.add(kept, new)
    }
}

#[derive(Debug, Clone)]
pub enum StepCell {
    Gru(GruCell),
    /// MLP over `[fused; previous state]`.
    Mlp(Mlp),
}

#[derive(Debug, Clone)]
pub struct StepNetwork {
    pub cell: StepCell,
    pub score: Linear,
    pub input_dim: usize,
    pub state_dim: usize,
}

/// How the surviving state is chosen among a step's candidates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CarryMode {
    TeacherForcing,
    Greedy,
}

#[derive(Debug, Clone, Copy)]
pub struct StepOutput {
    /// `1 x j` raw logits.
    pub scores: Var,
    /// `j x d_s`, one proposed next state per candidate.
    pub states: Var,
}

impl StepNetwork {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        variant: StepVariant,
        input_dim: usize,
        state_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let cell = match variant {
            StepVariant::Gru => StepCell::Gru(GruCell::new(store, "step.gru", input_dim, state_dim, rng)?),
            StepVariant::Mlp => StepCell::Mlp(Mlp::new(
                store,
                "step.mlp",
                input_dim + state_dim,
                state_dim,
                rng,
            )?),
        };
        let score = Linear::new(store, "score/l0", state_dim, 1, true, rng)?;
        Ok(Self {
            cell,
            score,
            input_dim,
            state_dim,
        })
    }

    pub fn variant(&self) -> StepVariant {
        match self.cell {
            StepCell::Gru(_) => StepVariant::Gru,
            StepCell::Mlp(_) => StepVariant::Mlp,
        }
    }

    /// Zero state used before the first step.
    pub fn initial_state<T: Scalar>(&self, g: &mut Graph<T>) -> Result<Var> {
        g.constant(Tensor::zeros(1, self.state_dim))
    }

    pub fn step_scores<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        fused: Var,
        prev: Var,
    ) -> Result<StepOutput> {
        if g.shape(prev) != (1, self.state_dim) {
            let (r, c) = g.shape(prev);
            return Err(Error::shape(
                "step_scores",
                format!("state {r}x{c}, expected 1x{}", self.state_dim),
            ));
        }
        let states = match &self.cell {
            StepCell::Gru(cell) => cell.forward(g, store, fused, prev)?,
            StepCell::Mlp(mlp) => {
                let rows = g.shape(fused).0;
                let h = g.repeat_rows(prev, rows)?;
                let joined = g.concat_cols(&[fused, h])?;
                mlp.forward(g, store, joined)?
            }
        };
        let column = self.score.forward(g, store, states)?;
        let scores = g.transpose(column)?;
        Ok(StepOutput { scores, states })
    }
}

/// Index of the highest score; ties go to the lowest index.
pub fn greedy_index<T: Scalar>(scores: &[T]) -> Option<usize> {
    let mut best: Option<(usize, T)> = None;
    for (i, &s) in scores.iter().enumerate() {
        match best {
            Some((_, b)) if s <= b => {}
            _ => best = Some((i, s)),
        }
    }
    best.map(|(i, _)| i)
}

/// Picks the state that survives into the next step.
pub fn carry_state<T: Scalar>(
    g: &mut Graph<T>,
    out: &StepOutput,
    mode: CarryMode,
    truth: usize,
) -> Result<Var> {
    let rows = g.shape(out.states).0;
    let index = match mode {
        CarryMode::TeacherForcing => {
            if truth >= rows {
                return Err(Error::Index(format!(
                    "truth {truth} out of range for {rows} candidates"
                )));
            }
            truth
        }
        CarryMode::Greedy => greedy_index(g.value(out.scores).data())
            .ok_or_else(|| Error::Contract("no candidate states".into()))?,
    };
    g.select_row(out.states, index)
}
