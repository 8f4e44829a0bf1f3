use crate::autodiff::Gradients;
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Scalar;

/// Plain SGD: `p <- p - lr * g`, in place. No momentum, no weight decay.
pub fn sgd_step<T: Scalar>(store: &mut ParamStore<T>, grads: &Gradients<T>, lr: T) -> Result<()> {
    if grads.len() != store.len() {
        return Err(Error::Contract(format!(
            "{} gradients for {} parameters",
            grads.len(),
            store.len()
        )));
    }
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        let g = grads.get(id);
        let p = store.get_mut(id);
        if p.shape() != g.shape() {
            return Err(Error::Contract(format!(
                "gradient {:?} does not match parameter {:?}",
                g.shape(),
                p.shape()
            )));
        }
        for (v, &d) in p.data_mut().iter_mut().zip(g.data()) {
            *v = *v - lr * d;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn one_param(w: f64) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        store.register("w", Tensor::scalar(w)).unwrap();
        store
    }

    fn grad_of(g: f64) -> Gradients<f64> {
        Gradients::from_tensors(vec![Tensor::scalar(g)])
    }

    #[test]
    fn plain_update() {
        let mut store = one_param(1.0);
        let g = grad_of(0.5);
        sgd_step(&mut store, &g, 0.002).unwrap();
        assert!((store.by_name("w").unwrap().item() - 0.999).abs() < 1e-15);
    }

    #[test]
    fn zero_gradient_or_rate_is_identity() {
        let mut store = one_param(1.25);
        let g = grad_of(0.0);
        sgd_step(&mut store, &g, 0.002).unwrap();
        assert_eq!(store.by_name("w").unwrap().item(), 1.25);

        let g = grad_of(3.0);
        sgd_step(&mut store, &g, 0.0).unwrap();
        assert_eq!(store.by_name("w").unwrap().item(), 1.25);
    }

    #[test]
    fn misaligned_gradients_are_rejected() {
        let mut store = one_param(1.0);
        let other = ParamStore::<f64>::new();
        let g = Gradients::zeros_like(&other);
        assert!(matches!(
            sgd_step(&mut store, &g, 0.1),
            Err(Error::Contract(_))
        ));
    }
}
