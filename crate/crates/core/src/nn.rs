//! Affine layers and the PReLU MLP shared by every projection and fusion
//! block.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

pub const PRELU_INIT_SLOPE: f64 = 0.25;

#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Registers `{prefix}.w` (`in x out`) and, with `bias`, a zero `{prefix}.b`.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weight = store.register_uniform(format!("{prefix}.w"), in_dim, out_dim, rng)?;
        let bias = if bias {
            Some(store.register(format!("{prefix}.b"), Tensor::zeros(1, out_dim))?)
        } else {
            None
        };
        Ok(Self {
            weight,
            bias,
            in_dim,
            out_dim,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let cols = g.shape(x).1;
        if cols != self.in_dim {
            return Err(Error::shape(
                "linear",
                format!("input width {cols}, layer expects {}", self.in_dim),
            ));
        }
        let w = g.param(store, self.weight)?;
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b)?;
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Input layer followed by two linear+PReLU layers; three affine maps, every
/// width equal to `out_dim`, one trainable slope per activation.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub input: Linear,
    pub hidden: Linear,
    pub hidden_slope: ParamId,
    pub output: Linear,
    pub output_slope: ParamId,
}

impl Mlp {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        group: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let input = Linear::new(store, &format!("{group}/l0"), in_dim, out_dim, true, rng)?;
        let hidden = Linear::new(store, &format!("{group}/l1"), out_dim, out_dim, true, rng)?;
        let hidden_slope = store.register(
            format!("{group}/l1.slope"),
            Tensor::scalar(T::lit(PRELU_INIT_SLOPE)),
        )?;
        let output = Linear::new(store, &format!("{group}/l2"), out_dim, out_dim, true, rng)?;
        let output_slope = store.register(
            format!("{group}/l2.slope"),
            Tensor::scalar(T::lit(PRELU_INIT_SLOPE)),
        )?;
        Ok(Self {
            input,
            hidden,
            hidden_slope,
            output,
            output_slope,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.input.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.output.out_dim
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let x = self.input.forward(g, store, x)?;
        let x = self.hidden.forward(g, store, x)?;
        let slope = g.param(store, self.hidden_slope)?;
        let x = g.prelu(x, slope)?;
        let x = self.output.forward(g, store, x)?;
        let slope = g.param(store, self.output_slope)?;
        g.prelu(x, slope)
    }
}
