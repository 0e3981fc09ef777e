use crate::error::{bail, Result};
use crate::params::ParameterStore;
use crate::scalar::Scalar;

/// AdamW hyperparameters other than the learning rate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

/// One AdamW update of every parameter in `store`, consuming the stored
/// gradients. Weight decay shrinks `θ` by `lr·wd·θ` before and independently
/// of the adaptive step.
pub fn adamw_step<S: Scalar>(store: &mut ParameterStore<S>, lr: f64, opt: &AdamW) -> Result<()> {
    if let Some((name, _)) = store.iter().find(|(_, p)| p.grad.is_none()) {
        bail!(State, "parameter {name:?} has no gradient");
    }
    store.step += 1;
    let t = store.step as i32;
    let (b1, b2) = (S::lit(opt.beta1), S::lit(opt.beta2));
    let bc1 = S::one() - b1.powi(t);
    let bc2 = S::one() - b2.powi(t);
    let (lr_s, decay, eps) = (S::lit(lr), S::lit(lr * opt.weight_decay), S::lit(opt.eps));
    for (_, p) in store.iter_mut() {
        let grad = p.grad.take().expect("checked above");
        let theta = p.value.data_mut();
        let (m, v) = (p.m.data_mut(), p.v.data_mut());
        for i in 0..theta.len() {
            let g = grad.data()[i];
            theta[i] -= decay * theta[i];
            m[i] = b1 * m[i] + (S::one() - b1) * g;
            v[i] = b2 * v[i] + (S::one() - b2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            theta[i] -= lr_s * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Rescales all gradients so their joint L2 norm is at most `max_norm`.
pub fn clip_grad_norm<S: Scalar>(store: &mut ParameterStore<S>, max_norm: f64) -> f64 {
    let total: f64 = store
        .iter()
        .filter_map(|(_, p)| p.grad.as_ref())
        .flat_map(|g| g.data().iter().map(|x| x.to_f64_lossy().powi(2)))
        .sum::<f64>()
        .sqrt();
    if total > max_norm && total > 0.0 {
        let f = S::lit(max_norm / total);
        for (_, p) in store.iter_mut() {
            if let Some(g) = p.grad.as_mut() {
                g.data_mut().iter_mut().for_each(|x| *x *= f);
            }
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store(theta: f64, grad: f64) -> ParameterStore<f64> {
        let mut s = ParameterStore::new();
        let id = s.add("t", Tensor::vector(vec![theta])).unwrap();
        s.param_mut(id).grad = Some(Tensor::vector(vec![grad]));
        s
    }

    #[test]
    fn zero_grad_no_decay_is_identity() {
        let mut s = store(1.5, 0.0);
        adamw_step(&mut s, 0.1, &AdamW::default()).unwrap();
        assert_eq!(s.get("t").unwrap().value.data(), &[1.5]);
    }

    #[test]
    fn decoupled_decay_scales() {
        let mut s = store(2.0, 0.0);
        let opt = AdamW {
            weight_decay: 0.1,
            ..AdamW::default()
        };
        adamw_step(&mut s, 1.0, &opt).unwrap();
        assert_eq!(s.get("t").unwrap().value.data(), &[2.0 * 0.9]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = store(0.0, 1.0);
        adamw_step(&mut s, 0.1, &AdamW::default()).unwrap();
        assert!((s.get("t").unwrap().value.data()[0] + 0.1).abs() < 1e-8);
        assert!(s.get("t").unwrap().grad.is_none());
    }

    #[test]
    fn missing_gradient_is_a_state_error() {
        let mut s = ParameterStore::<f64>::new();
        s.add("t", Tensor::vector(vec![0.0])).unwrap();
        assert!(matches!(
            adamw_step(&mut s, 0.1, &AdamW::default()),
            Err(crate::Error::State(_))
        ));
    }
}
