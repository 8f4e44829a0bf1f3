//! Context grounding: per-modality projection MLPs, the cascaded text
//! attention (answers and button images against question and script), the
//! weight-reweighted video grounding, and the fusion MLP.

use rand_chacha::ChaCha8Rng;

use crate::attention::{Attention, AttentionOutput};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::params::ParamStore;
use crate::tensor::{Scalar, Tensor};

/// Candidate options of one answer step, row-aligned.
#[derive(Debug, Clone, PartialEq)]
pub struct StepCandidates {
    /// `j x d_t` candidate answer text features.
    pub answers: Tensor<f32>,
    /// `j x d_v` candidate button-image features.
    pub images: Tensor<f32>,
    pub truth: usize,
}

impl StepCandidates {
    pub fn candidates(&self) -> usize {
        self.answers.rows()
    }
}

/// One question with its video, script, and multi-step candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub id: String,
    pub button_count: usize,
    /// `f x d_v`, one row per sampled frame.
    pub video: Tensor<f32>,
    /// `e x d_t`, one row per script sentence.
    pub script: Tensor<f32>,
    /// `1 x d_t`.
    pub question: Tensor<f32>,
    pub steps: Vec<StepCandidates>,
}

impl FeatureBundle {
    /// Checks internal consistency against the declared feature widths.
    pub fn validate(&self, d_v: usize, d_t: usize) -> Result<()> {
        let bad = |what: &str, detail: String| {
            Error::Config(format!("sample {}: {what} {detail}", self.id))
        };
        if self.video.cols() != d_v {
            return Err(bad("video", format!("width {} != d_v {d_v}", self.video.cols())));
        }
        if self.script.cols() != d_t {
            return Err(bad("script", format!("width {} != d_t {d_t}", self.script.cols())));
        }
        if self.question.shape() != (1, d_t) {
            let (r, c) = self.question.shape();
            return Err(bad("question", format!("shape {r}x{c}, expected 1x{d_t}")));
        }
        if self.steps.is_empty() {
            return Err(bad("steps", "empty".into()));
        }
        for (i, step) in self.steps.iter().enumerate() {
            if step.answers.cols() != d_t || step.images.cols() != d_v {
                return Err(bad(&format!("step {i}"), "feature width mismatch".into()));
            }
            if step.answers.rows() != step.images.rows() {
                return Err(bad(
                    &format!("step {i}"),
                    format!(
                        "{} answers vs {} images",
                        step.answers.rows(),
                        step.images.rows()
                    ),
                ));
            }
            if step.truth >= step.candidates() {
                return Err(Error::TruthOutOfRange {
                    sample: self.id.clone(),
                    step: i,
                    truth: step.truth,
                    candidates: step.candidates(),
                });
            }
        }
        Ok(())
    }
}

/// Per-sample features after projection, all at width `d_h`.
#[derive(Debug, Clone, Copy)]
pub struct ProjectedContext {
    pub video: Var,
    pub script: Var,
    pub question: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct ProjectedStep {
    pub answers: Var,
    pub images: Var,
}

/// Grounding outputs for one step (`j` candidates).
#[derive(Debug, Clone, Copy)]
pub struct GroundedStep {
    /// `j x d_h`
    pub text: Var,
    /// `j x e`, head-averaged weights of the script stage of the text cascade.
    pub weights: Var,
    /// `j x d_h`
    pub video: Var,
    /// `j x d_o`
    pub fused: Var,
}

#[derive(Debug, Clone)]
pub struct GroundingModule {
    pub proj_video: Mlp,
    pub proj_script: Mlp,
    pub proj_question: Mlp,
    pub proj_answer: Mlp,
    pub proj_image: Mlp,
    pub attn_answer: Attention,
    pub attn_question: Attention,
    pub attn_script: Attention,
    pub attn_video: Attention,
    pub fusion: Mlp,
    /// Adds each cascade stage's input back onto its attended output.
    pub cascade_residual: bool,
}

/// Widths of the grounding module.
#[derive(Debug, Clone, Copy)]
pub struct GroundingDims {
    pub d_v: usize,
    pub d_t: usize,
    pub d_h: usize,
    pub d_o: usize,
    pub heads: usize,
}

impl GroundingModule {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        dims: GroundingDims,
        cascade_residual: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let GroundingDims {
            d_v,
            d_t,
            d_h,
            d_o,
            heads,
        } = dims;
        crate::attention::check_heads(d_h, heads)?;
        Ok(Self {
            proj_video: Mlp::new(store, "proj.video", d_v, d_h, rng)?,
            proj_script: Mlp::new(store, "proj.script", d_t, d_h, rng)?,
            proj_question: Mlp::new(store, "proj.question", d_t, d_h, rng)?,
            proj_answer: Mlp::new(store, "proj.answer", d_t, d_h, rng)?,
            proj_image: Mlp::new(store, "proj.image", d_v, d_h, rng)?,
            attn_answer: Attention::new(store, "attn.answer", d_h, heads, rng)?,
            attn_question: Attention::new(store, "attn.question", d_h, heads, rng)?,
            attn_script: Attention::new(store, "attn.script", d_h, heads, rng)?,
            attn_video: Attention::new(store, "attn.video", d_h, heads, rng)?,
            fusion: Mlp::new(store, "fusion", 4 * d_h, d_o, rng)?,
            cascade_residual,
        })
    }

    pub fn project_context<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        bundle: &FeatureBundle,
    ) -> Result<ProjectedContext> {
        let video = input(g, &bundle.video)?;
        let script = input(g, &bundle.script)?;
        let question = input(g, &bundle.question)?;
        Ok(ProjectedContext {
            video: self.proj_video.forward(g, store, video)?,
            script: self.proj_script.forward(g, store, script)?,
            question: self.proj_question.forward(g, store, question)?,
        })
    }

    pub fn project_step<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        step: &StepCandidates,
    ) -> Result<ProjectedStep> {
        let answers = input(g, &step.answers)?;
        let images = input(g, &step.images)?;
        Ok(ProjectedStep {
            answers: self.proj_answer.forward(g, store, answers)?,
            images: self.proj_image.forward(g, store, images)?,
        })
    }

    fn stage<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        attn: &Attention,
        query: Var,
        key_value: Var,
    ) -> Result<AttentionOutput> {
        let mut out = attn.attend(g, store, query, key_value, key_value)?;
        if self.cascade_residual {
            out.output = g.add(out.output, query)?;
        }
        Ok(out)
    }

    /// Cascade images -> answers -> question -> script. Returns the grounded
    /// text feature (`j x d_h`) and the script stage's averaged weights
    /// (`j x e`).
    pub fn ground_text<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        images: Var,
        answers: Var,
        question: Var,
        script: Var,
    ) -> Result<(Var, Var)> {
        let (ri, ra) = (g.shape(images).0, g.shape(answers).0);
        if ri != ra {
            return Err(Error::shape(
                "ground_text",
                format!("{ri} image rows vs {ra} answer rows"),
            ));
        }
        let x = self.stage(g, store, &self.attn_answer, images, answers)?.output;
        let x = self.stage(g, store, &self.attn_question, x, question)?.output;
        let out = self.stage(g, store, &self.attn_script, x, script)?;
        Ok((out.output, out.avg_weights))
    }

    /// Script frames attended over video: `e x d_h`. Independent of the step,
    /// so callers compute it once per sample.
    pub fn attend_script_video<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        script: Var,
        video: Var,
    ) -> Result<Var> {
        Ok(self
            .attn_video
            .attend(g, store, script, video, video)?
            .output)
    }

    /// `weights (j x e) * script_video (e x d_h)`.
    pub fn weight_video<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        weights: Var,
        script_video: Var,
    ) -> Result<Var> {
        let (e_w, e_s) = (g.shape(weights).1, g.shape(script_video).0);
        if e_w != e_s {
            return Err(Error::shape(
                "ground_video",
                format!("weights cover {e_w} sentences, script has {e_s}"),
            ));
        }
        g.matmul(weights, script_video)
    }

    pub fn ground_video<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        script: Var,
        video: Var,
        weights: Var,
    ) -> Result<Var> {
        if g.shape(weights).1 != g.shape(script).0 {
            return Err(Error::shape(
                "ground_video",
                format!(
                    "weights cover {} sentences, script has {}",
                    g.shape(weights).1,
                    g.shape(script).0
                ),
            ));
        }
        let sv = self.attend_script_video(g, store, script, video)?;
        self.weight_video(g, weights, sv)
    }

    /// Fusion MLP over `[video; text; images; answers]`.
    pub fn fuse<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        video: Var,
        text: Var,
        images: Var,
        answers: Var,
    ) -> Result<Var> {
        let parts = [video, text, images, answers];
        let width = self.fusion.in_dim() / 4;
        if parts.iter().any(|&p| g.shape(p).1 != width) {
            return Err(Error::shape("fuse", "all four inputs must have width d_h"));
        }
        let joined = g.concat_cols(&parts)?;
        self.fusion.forward(g, store, joined)
    }

    /// Full grounding of one step given the projected context and the
    /// precomputed script-video attention.
    pub fn ground_step<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        ctx: &ProjectedContext,
        script_video: Var,
        step: &ProjectedStep,
    ) -> Result<GroundedStep> {
        let (text, weights) =
            self.ground_text(g, store, step.images, step.answers, ctx.question, ctx.script)?;
        let video = self.weight_video(g, weights, script_video)?;
        let fused = self.fuse(g, store, video, text, step.images, step.answers)?;
        Ok(GroundedStep {
            text,
            weights,
            video,
            fused,
        })
    }
}

fn input<T: Scalar>(g: &mut Graph<T>, t: &Tensor<f32>) -> Result<Var> {
    g.constant(t.cast())
}
