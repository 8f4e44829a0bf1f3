//! Multi-head scaled dot-product cross-attention.
//!
//! Besides the attended output, [`Attention::attend`] returns the attention
//! weights averaged over heads. The grounding module reuses that averaged
//! matrix to weight the script-video features.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Query/key/value/output projections for one attention block. Each of
/// `query`, `key`, `value` is a `dim x dim` matrix whose column block
/// `[i * dim/heads, (i+1) * dim/heads)` is head `i`'s projection.
#[derive(Debug, Clone)]
pub struct Attention {
    pub query: ParamId,
    pub key: ParamId,
    pub value: ParamId,
    pub output: ParamId,
    pub dim: usize,
    pub heads: usize,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    /// `n_q x dim`
    pub output: Var,
    /// `n_q x n_k`, mean of the per-head softmax weights.
    pub avg_weights: Var,
}

pub fn check_heads(dim: usize, heads: usize) -> Result<()> {
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "model width {dim} is not divisible by {heads} attention heads"
        )));
    }
    Ok(())
}

impl Attention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        group: &str,
        dim: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        check_heads(dim, heads)?;
        Ok(Self {
            query: store.register_uniform(format!("{group}/wq"), dim, dim, rng)?,
            key: store.register_uniform(format!("{group}/wk"), dim, dim, rng)?,
            value: store.register_uniform(format!("{group}/wv"), dim, dim, rng)?,
            output: store.register_uniform(format!("{group}/wo"), dim, dim, rng)?,
            dim,
            heads,
        })
    }

    /// Overwrites all four projections with the identity.
    pub fn set_identity<T: Scalar>(&self, store: &mut ParamStore<T>) {
        for id in [self.query, self.key, self.value, self.output] {
            *store.get_mut(id) = Tensor::identity(self.dim);
        }
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn attend<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        query: Var,
        key: Var,
        value: Var,
    ) -> Result<AttentionOutput> {
        check_heads(self.dim, self.heads)?;
        let (kr, vr) = (g.shape(key).0, g.shape(value).0);
        if kr != vr {
            return Err(Error::shape(
                "attend",
                format!("{kr} key rows vs {vr} value rows"),
            ));
        }
        for (what, v) in [("query", query), ("key", key), ("value", value)] {
            let cols = g.shape(v).1;
            if cols != self.dim {
                return Err(Error::shape(
                    "attend",
                    format!("{what} width {cols}, attention width {}", self.dim),
                ));
            }
        }

        let wq = g.param(store, self.query)?;
        let wk = g.param(store, self.key)?;
        let wv = g.param(store, self.value)?;
        let wo = g.param(store, self.output)?;
        let q = g.matmul(query, wq)?;
        let k = g.matmul(key, wk)?;
        let v = g.matmul(value, wv)?;

        let hd = self.head_dim();
        let scale = T::one() / T::lit(hd as f64).sqrt();
        let mut head_outputs = Vec::with_capacity(self.heads);
        let mut head_weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let (qh, kh, vh) = if self.heads == 1 {
                (q, k, v)
            } else {
                (
                    g.slice_cols(q, h * hd, hd)?,
                    g.slice_cols(k, h * hd, hd)?,
                    g.slice_cols(v, h * hd, hd)?,
                )
            };
            let scores = g.matmul_nt(qh, kh)?;
            let scores = g.scale(scores, scale)?;
            let weights = g.softmax_rows(scores)?;
            head_outputs.push(g.matmul(weights, vh)?);
            head_weights.push(weights);
        }
        let joined = g.concat_cols(&head_outputs)?;
        let output = g.matmul(joined, wo)?;
        let avg_weights = if self.heads == 1 {
            head_weights[0]
        } else {
            g.mean(&head_weights)?
        };
        Ok(AttentionOutput {
            output,
            avg_weights,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn setup(dim: usize, heads: usize) -> (ParamStore<f64>, Attention) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let attn = Attention::new(&mut store, "a", dim, heads, &mut rng).unwrap();
        (store, attn)
    }

    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor<f64> {
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
            .unwrap()
    }

    #[test]
    fn single_key_returns_the_value_row() {
        let (mut store, attn) = setup(4, 2);
        attn.set_identity(&mut store);
        let mut g = Graph::new();
        let q = g.constant(Tensor::from_vec(1, 4, vec![0.3, -0.2, 0.9, 1.0]).unwrap()).unwrap();
        let kv = Tensor::from_vec(1, 4, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = g.constant(kv.clone()).unwrap();
        let out = attn.attend(&mut g, &store, q, k, k).unwrap();
        assert_eq!(g.value(out.avg_weights).data(), &[1.0]);
        assert_eq!(g.value(out.output), &kv);
    }

    #[test]
    fn identical_keys_split_evenly() {
        let (mut store, attn) = setup(4, 2);
        attn.set_identity(&mut store);
        let mut g = Graph::new();
        let q = g.constant(Tensor::from_vec(1, 4, vec![0.3, -0.2, 0.9, 1.0]).unwrap()).unwrap();
        let row = vec![1.0, -2.0, 0.5, 4.0];
        let k = g.constant(Tensor::from_rows(&[row.clone(), row]).unwrap()).unwrap();
        let out = attn.attend(&mut g, &store, q, k, k).unwrap();
        assert_eq!(g.value(out.avg_weights).data(), &[0.5, 0.5]);
    }

    /// Plain loops over the textbook single-head formula.
    fn reference_single_head(q: &Tensor<f64>, k: &Tensor<f64>, v: &Tensor<f64>) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let d = q.cols() as f64;
        let mut outs = Vec::new();
        let mut weights = Vec::new();
        for i in 0..q.rows() {
            let logits: Vec<f64> = (0..k.rows())
                .map(|j| (0..q.cols()).map(|c| q.get(i, c) * k.get(j, c)).sum::<f64>() / d.sqrt())
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            let w: Vec<f64> = logits.iter().map(|l| l.exp() / z).collect();
            let out = (0..v.cols())
                .map(|c| (0..v.rows()).map(|j| w[j] * v.get(j, c)).sum())
                .collect();
            outs.push(out);
            weights.push(w);
        }
        (outs, weights)
    }

    #[test]
    fn single_head_matches_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (mut store, attn) = setup(4, 1);
        *store.get_mut(attn.output) = Tensor::identity(4);
        let q = random(&mut rng, 2, 4);
        let k = random(&mut rng, 3, 4);
        let v = random(&mut rng, 3, 4);
        let wq = store.get(attn.query).clone();
        let wk = store.get(attn.key).clone();
        let wv = store.get(attn.value).clone();

        let mut g = Graph::new();
        let (qv, kv, vv) = (
            g.constant(q.clone()).unwrap(),
            g.constant(k.clone()).unwrap(),
            g.constant(v.clone()).unwrap(),
        );
        let out = attn.attend(&mut g, &store, qv, kv, vv).unwrap();

        let (ref_out, ref_w) = reference_single_head(
            &q.matmul(&wq).unwrap(),
            &k.matmul(&wk).unwrap(),
            &v.matmul(&wv).unwrap(),
        );
        for i in 0..2 {
            for c in 0..4 {
                assert!((g.value(out.output).get(i, c) - ref_out[i][c]).abs() < 1e-12);
            }
            for j in 0..3 {
                assert!((g.value(out.avg_weights).get(i, j) - ref_w[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn output_shape_is_independent_of_key_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (store, attn) = setup(6, 3);
        for n_k in [1, 2, 17] {
            let mut g = Graph::new();
            let q = g.constant(random(&mut rng, 4, 6)).unwrap();
            let k = g.constant(random(&mut rng, n_k, 6)).unwrap();
            let out = attn.attend(&mut g, &store, q, k, k).unwrap();
            assert_eq!(g.shape(out.output), (4, 6));
            assert_eq!(g.shape(out.avg_weights), (4, n_k));
        }
    }

    #[test]
    fn errors() {
        let (store, attn) = setup(4, 2);
        let mut g = Graph::new();
        let q = g.constant(Tensor::zeros(1, 4)).unwrap();
        let k = g.constant(Tensor::zeros(2, 4)).unwrap();
        let v = g.constant(Tensor::zeros(3, 4)).unwrap();
        assert!(matches!(attn.attend(&mut g, &store, q, k, v), Err(Error::Shape { .. })));

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::<f64>::new();
        assert!(matches!(Attention::new(&mut s, "b", 4, 3, &mut rng), Err(Error::Config(_))));
    }
}
