use super::param::{ParamGroup, ParamStore};
use super::{NnError, Scalar};

/// One SGD step with classical momentum:
/// `v ← μ·v + g`, `θ ← θ − lr(group)·v`.
///
/// Fails without touching any parameter if one has no gradient.
pub fn sgd_momentum_step<T: Scalar>(
    store: &mut ParamStore<T>,
    lr: impl Fn(ParamGroup) -> f64,
    momentum: f64,
) -> Result<(), NnError> {
    if let Some((_, p)) = store.iter().find(|(_, p)| p.grad.is_none()) {
        return Err(NnError::MissingGrad(p.name.clone()));
    }
    let mu = T::of(momentum);
    for p in store.iter_mut() {
        let rate = T::of(lr(p.group));
        let grad = p.grad.as_ref().expect("checked above");
        let vel = p
            .velocity
            .get_or_insert_with(|| vec![T::zero(); grad.len()]);
        for ((w, v), &g) in p
            .value
            .data_mut()
            .iter_mut()
            .zip(vel.iter_mut())
            .zip(grad.data())
        {
            *v = mu * *v + g;
            *w -= rate * *v;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    fn single(value: f64, grad: f64) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        let id = s
            .add("w", ParamGroup::Head, Tensor::scalar(value))
            .unwrap();
        s.get_mut(id).grad = Some(Tensor::scalar(grad));
        s
    }

    #[test]
    fn stated_update_rule() {
        let mut s = single(1.0, 0.1);
        sgd_momentum_step(&mut s, |_| 0.1, 0.9).unwrap();
        let p = s.get(crate::nn::ParamId(0));
        assert!((p.value.data()[0] - 0.99).abs() < 1e-15);
        assert!((p.velocity.as_ref().unwrap()[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn zero_grad_leaves_parameter() {
        let mut s = single(3.25, 0.0);
        for _ in 0..5 {
            sgd_momentum_step(&mut s, |_| 0.5, 0.9).unwrap();
        }
        assert_eq!(s.get(crate::nn::ParamId(0)).value.data()[0], 3.25);
    }

    #[test]
    fn two_steps_match_recurrence() {
        let (lr, mu, g) = (0.03, 0.9, 0.7);
        let mut s = single(2.0, g);
        sgd_momentum_step(&mut s, |_| lr, mu).unwrap();
        sgd_momentum_step(&mut s, |_| lr, mu).unwrap();
        let (mut w, mut v) = (2.0f64, 0.0f64);
        for _ in 0..2 {
            v = mu * v + g;
            w -= lr * v;
        }
        let p = s.get(crate::nn::ParamId(0));
        assert!((p.value.data()[0] - w).abs() <= 1e-15);
        assert!((p.velocity.as_ref().unwrap()[0] - v).abs() <= 1e-15);
    }

    #[test]
    fn group_learning_rates_apply() {
        let mut s = ParamStore::<f64>::new();
        let a = s
            .add("a", ParamGroup::Backbone, Tensor::scalar(1.0))
            .unwrap();
        let b = s.add("b", ParamGroup::Head, Tensor::scalar(1.0)).unwrap();
        s.get_mut(a).grad = Some(Tensor::scalar(1.0));
        s.get_mut(b).grad = Some(Tensor::scalar(1.0));
        sgd_momentum_step(
            &mut s,
            |g| match g {
                ParamGroup::Backbone => 0.001,
                ParamGroup::Head => 0.01,
            },
            0.9,
        )
        .unwrap();
        assert!((s.get(a).value.data()[0] - 0.999).abs() < 1e-15);
        assert!((s.get(b).value.data()[0] - 0.99).abs() < 1e-15);
    }

    #[test]
    fn missing_grad_is_an_error() {
        let mut s = single(1.0, 1.0);
        s.add("bare", ParamGroup::Head, Tensor::scalar(0.0)).unwrap();
        assert!(matches!(
            sgd_momentum_step(&mut s, |_| 0.1, 0.9),
            Err(NnError::MissingGrad(name)) if name == "bare"
        ));
        // nothing moved
        assert_eq!(s.get(crate::nn::ParamId(0)).value.data()[0], 1.0);
    }
}
