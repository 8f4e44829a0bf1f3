//! Full question-answering model: grounding followed by the step network.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::grounding::{FeatureBundle, GroundingDims, GroundingModule, GroundedStep};
use crate::params::ParamStore;
use crate::step_network::{carry_state, CarryMode, StepNetwork, StepVariant};
use crate::tensor::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_v: usize,
    pub d_t: usize,
    pub d_h: usize,
    pub heads: usize,
    /// Fusion output width.
    pub d_o: usize,
    /// Step-network state width.
    pub d_s: usize,
    pub step_variant: StepVariant,
    pub cascade_residual: bool,
}

impl ModelConfig {
    /// Widths at full scale: 768-d features, 3 heads, GRU step network.
    pub fn full_scale() -> Self {
        Self::with_width(768, 768, 768, 3)
    }

    pub fn with_width(d_v: usize, d_t: usize, d_h: usize, heads: usize) -> Self {
        Self {
            d_v,
            d_t,
            d_h,
            heads,
            d_o: d_h,
            d_s: d_h,
            step_variant: StepVariant::Gru,
            cascade_residual: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d_v", self.d_v),
            ("d_t", self.d_t),
            ("d_h", self.d_h),
            ("d_o", self.d_o),
            ("d_s", self.d_s),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        crate::attention::check_heads(self.d_h, self.heads)
    }
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub grounding: GroundingModule,
    pub step: StepNetwork,
}

/// Forward results for one sample.
#[derive(Debug, Clone)]
pub struct SampleForward {
    /// Mean cross-entropy over steps.
    pub loss: Var,
    /// Raw candidate scores per step.
    pub scores: Vec<Vec<f64>>,
    pub grounded: Vec<GroundedStep>,
    /// Steps whose carried state came from the ground truth.
    pub teacher_forced_steps: usize,
}

impl<T: Scalar> Model<T> {
    /// Builds the parameter layout and draws weights from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let grounding = GroundingModule::new(
            &mut store,
            GroundingDims {
                d_v: config.d_v,
                d_t: config.d_t,
                d_h: config.d_h,
                d_o: config.d_o,
                heads: config.heads,
            },
            config.cascade_residual,
            &mut rng,
        )?;
        let step = StepNetwork::new(&mut store, config.step_variant, config.d_o, config.d_s, &mut rng)?;
        Ok(Self {
            config,
            store,
            grounding,
            step,
        })
    }

    /// Same layout with parameter values taken from `store` (names and shapes
    /// must match exactly).
    pub fn with_store(config: ModelConfig, store: ParamStore<T>) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if store.len() != model.store.len() {
            return Err(Error::Load(format!(
                "expected {} parameter tensors, found {}",
                model.store.len(),
                store.len()
            )));
        }
        for ((_, want, wv), (_, got, gv)) in model.store.iter().zip(store.iter()) {
            if want != got || wv.shape() != gv.shape() {
                return Err(Error::Load(format!(
                    "parameter {got} {:?} does not match expected {want} {:?}",
                    gv.shape(),
                    wv.shape()
                )));
            }
        }
        model.store = store;
        Ok(model)
    }

    pub fn forward(&self, g: &mut Graph<T>, bundle: &FeatureBundle, mode: CarryMode) -> Result<SampleForward> {
        self.forward_with(g, &self.store, bundle, mode)
    }

    /// Forward pass reading parameters from `store`, which must share this
    /// model's layout. Used by gradient checking to evaluate perturbed copies.
    pub fn forward_with(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        bundle: &FeatureBundle,
        mode: CarryMode,
    ) -> Result<SampleForward> {
        bundle.validate(self.config.d_v, self.config.d_t)?;
        let gm = &self.grounding;
        let ctx = gm.project_context(g, store, bundle)?;
        let script_video = gm.attend_script_video(g, store, ctx.script, ctx.video)?;
        let mut state = self.step.initial_state(g)?;

        let mut losses = Vec::with_capacity(bundle.steps.len());
        let mut scores = Vec::with_capacity(bundle.steps.len());
        let mut grounded = Vec::with_capacity(bundle.steps.len());
        let mut teacher_forced_steps = 0;
        for step in &bundle.steps {
            let projected = gm.project_step(g, store, step)?;
            let gs = gm.ground_step(g, store, &ctx, script_video, &projected)?;
            let out = self.step.step_scores(g, store, gs.fused, state)?;
            losses.push(g.cross_entropy(out.scores, step.truth)?);
            scores.push(g.value(out.scores).data().iter().map(|v| v.as_f64()).collect());
            grounded.push(gs);
            if mode == CarryMode::TeacherForcing {
                teacher_forced_steps += 1;
            }
            state = carry_state(g, &out, mode, step.truth)?;
        }
        let loss = g.mean(&losses)?;
        Ok(SampleForward {
            loss,
            scores,
            grounded,
            teacher_forced_steps,
        })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config,
            store: self.store.cast(),
            grounding: self.grounding.clone(),
            step: self.step.clone(),
        }
    }
}
