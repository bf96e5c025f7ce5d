use super::{Real, Tensor};
use crate::error::{Error, Result};

/// Adam hyperparameters. Defaults follow the restoration GAN's settings:
/// learning rate 2e-4 and β1 = 0.5, with the optimizer's usual β2 and ε.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamHyper {
    pub alpha: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        AdamHyper {
            alpha: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// First and second moment estimates for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T = f32> {
    pub m: Vec<T>,
    pub v: Vec<T>,
    pub step_count: u64,
}

impl<T: Real> AdamState<T> {
    pub fn new(len: usize) -> Self {
        AdamState {
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
            step_count: 0,
        }
    }

    pub fn for_params(params: &[Tensor<T>]) -> Vec<Self> {
        params.iter().map(|p| Self::new(p.numel())).collect()
    }
}

/// One bias-corrected Adam update of every parameter, then zeroes the
/// gradients.
pub fn adam_step<T: Real>(params: &mut [Tensor<T>], states: &mut [AdamState<T>], hyper: &AdamHyper) -> Result<()> {
    if params.len() != states.len() {
        return Err(Error::shape(format!(
            "adam_step: {} parameters but {} optimizer states",
            params.len(),
            states.len()
        )));
    }
    for (i, (p, s)) in params.iter().zip(states.iter()).enumerate() {
        if p.grad().is_none() {
            return Err(Error::shape(format!("adam_step: parameter {i} has no gradient")));
        }
        if s.m.len() != p.numel() || s.v.len() != p.numel() {
            return Err(Error::shape(format!("adam_step: state {i} does not match its parameter")));
        }
    }
    let (b1, b2) = (T::lit(hyper.beta1), T::lit(hyper.beta2));
    let (c1, c2) = (T::one() - b1, T::one() - b2);
    let eps = T::lit(hyper.epsilon);
    for (p, s) in params.iter_mut().zip(states.iter_mut()) {
        s.step_count += 1;
        let t = s.step_count as i32;
        let bc1 = T::lit(1.0 - hyper.beta1.powi(t));
        let bc2 = T::lit(1.0 - hyper.beta2.powi(t));
        let lr = T::lit(hyper.alpha);
        let mut grad = p.take_grad().expect("checked above");
        let data = p.data_mut();
        for (((w, g), m), v) in data.iter_mut().zip(&grad).zip(s.m.iter_mut()).zip(s.v.iter_mut()) {
            *m = b1 * *m + c1 * *g;
            *v = b2 * *v + c2 * *g * *g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
        grad.iter_mut().for_each(|g| *g = T::zero());
        p.restore_grad(grad);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut p = vec![Tensor::<f64>::new(&[1], vec![1.0], true).unwrap()];
        p[0].accumulate_grad(&[2.0]).unwrap();
        let mut s = AdamState::for_params(&p);
        let hyper = AdamHyper {
            alpha: 0.1,
            ..AdamHyper::default()
        };
        adam_step(&mut p, &mut s, &hyper).unwrap();
        assert!((p[0].data()[0] - 0.9).abs() < 1e-6);
        assert_eq!(p[0].grad().unwrap(), &[0.0]);
        assert_eq!(s[0].step_count, 1);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = vec![Tensor::<f32>::new(&[3], vec![0.5, -1.0, 2.0], true).unwrap()];
        let before = p[0].data().to_vec();
        let mut s = AdamState::for_params(&p);
        adam_step(&mut p, &mut s, &AdamHyper::default()).unwrap();
        adam_step(&mut p, &mut s, &AdamHyper::default()).unwrap();
        assert_eq!(p[0].data(), before.as_slice());
        assert_eq!(s[0].step_count, 2);
    }

    #[test]
    fn defaults_match_restoration_settings() {
        let h = AdamHyper::default();
        assert_eq!(h.alpha, 0.0002);
        assert_eq!(h.beta1, 0.5);
        assert_eq!(h.beta2, 0.999);
        assert_eq!(h.epsilon, 1e-8);
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut p = vec![Tensor::<f32>::new(&[1], vec![1.0], false).unwrap()];
        let mut s = AdamState::for_params(&p);
        assert!(adam_step(&mut p, &mut s, &AdamHyper::default()).is_err());
    }
}
