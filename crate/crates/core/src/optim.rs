//! Adam and the step-decay learning-rate schedule.

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::scalar::Scalar;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

/// First and second moment estimates per parameter plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState<S> {
    pub m: ParamStore<S>,
    pub v: ParamStore<S>,
    pub step: u64,
}

impl<S: Scalar> OptimizerState<S> {
    pub fn new(params: &ParamStore<S>) -> Self {
        OptimizerState { m: params.zeros_like(), v: params.zeros_like(), step: 0 }
    }
}

/// One bias-corrected Adam update in place. With `strict`, a non-finite
/// gradient aborts before anything is modified.
pub fn adam_step<S: Scalar>(
    params: &mut ParamStore<S>,
    grads: &ParamStore<S>,
    state: &mut OptimizerState<S>,
    lr: f64,
    strict: bool,
) -> Result<()> {
    params.expect_compatible(grads)?;
    params.expect_compatible(&state.m)?;
    params.expect_compatible(&state.v)?;
    if strict {
        if let Some((name, _)) = grads.iter().find(|(_, g)| !g.all_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient for parameter `{name}`")));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (S::lit(BETA1), S::lit(BETA2));
    let c1 = S::one() - b1.powi(t);
    let c2 = S::one() - b2.powi(t);
    let (lr, eps) = (S::lit(lr), S::lit(EPSILON));
    let moments = state.m.iter_mut().zip(state.v.iter_mut());
    for (((_, p), (_, g)), ((_, m), (_, v))) in params.iter_mut().zip(grads.iter()).zip(moments) {
        for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut()) {
            *m = b1 * *m + (S::one() - b1) * g;
            *v = b2 * *v + (S::one() - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Number of decay milestones at or before `epoch`: 5 and 10, then every
/// 10 epochs.
pub fn milestones_passed(epoch: usize) -> usize {
    match epoch {
        0..=4 => 0,
        5..=9 => 1,
        e => 1 + e / 10,
    }
}

/// `base * 0.7^k` with `k` the number of milestones passed.
pub fn lr_schedule(base: f64, epoch: usize) -> f64 {
    base * 0.7f64.powi(milestones_passed(epoch) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(v: f64) -> ParamStore<f64> {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::scalar(v)).unwrap();
        p
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(lr_schedule(5e-5, 0), 5e-5);
        assert!((lr_schedule(5e-5, 5) - 3.5e-5).abs() < 1e-18);
        assert!((lr_schedule(5e-5, 20) - 1.715e-5).abs() < 1e-18);
        assert_eq!(milestones_passed(19), 2);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = single(0.3);
        let mut st = OptimizerState::new(&p);
        adam_step(&mut p, &single(0.0), &mut st, 0.1, true).unwrap();
        assert_eq!(p.get("w").unwrap().item(), 0.3);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn nan_gradient_names_parameter() {
        let mut p = single(0.3);
        let mut st = OptimizerState::new(&p);
        let err = adam_step(&mut p, &single(f64::NAN), &mut st, 0.1, true).unwrap_err();
        assert!(err.to_string().contains("`w`"));
        assert_eq!(st.step, 0);
    }
}
