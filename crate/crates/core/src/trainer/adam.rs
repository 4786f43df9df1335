//! Adam with bias correction.

use crate::grad::{GradError, ParameterSet, Tensor};

pub const ADAM_EPS: f64 = 1e-8;

/// First and second moment estimates, keyed like the parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamState {
    pub first: ParameterSet,
    pub second: ParameterSet,
}

/// One Adam step at `step` (1-based). Parameters without a gradient entry
/// are left untouched.
pub fn adam_update(
    params: &mut ParameterSet,
    grads: &ParameterSet,
    state: &mut AdamState,
    lr: f64,
    betas: (f64, f64),
    step: u64,
) -> Result<(), GradError> {
    if step == 0 {
        return Err(GradError::Usage("adam step counts from 1".into()));
    }
    let (b1, b2) = betas;
    let c1 = 1.0 - b1.powi(step as i32);
    let c2 = 1.0 - b2.powi(step as i32);
    for (name, g) in grads {
        let p = params.get_mut(name).ok_or_else(|| GradError::UnknownName(name.clone()))?;
        if p.shape() != g.shape() {
            return Err(GradError::BindingShape {
                name: name.clone(),
                expected: p.shape(),
                actual: g.shape(),
            });
        }
        if !state.first.contains(name) {
            state.first.insert(name.clone(), Tensor::zeros(g.rows(), g.cols()))?;
            state.second.insert(name.clone(), Tensor::zeros(g.rows(), g.cols()))?;
        }
        let m = state.first.get_mut(name).expect("inserted").data_mut();
        let v = state.second.get_mut(name).expect("inserted").data_mut();
        for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// Adam optimizer with its own step counter.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub betas: (f64, f64),
    step: u64,
    state: AdamState,
}

impl Adam {
    pub fn new(lr: f64, betas: (f64, f64)) -> Self {
        Self {
            lr,
            betas,
            step: 0,
            state: AdamState::default(),
        }
    }

    pub fn step(&mut self, params: &mut ParameterSet, grads: &ParameterSet) -> Result<(), GradError> {
        self.step += 1;
        adam_update(params, grads, &mut self.state, self.lr, self.betas, self.step)
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(v: f64) -> ParameterSet {
        let mut p = ParameterSet::new();
        p.insert("x", Tensor::scalar(v)).unwrap();
        p
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut params = single(1.5);
        let mut state = AdamState::default();
        adam_update(&mut params, &single(0.0), &mut state, 1e-3, (0.9, 0.999), 1).unwrap();
        assert_eq!(params.get("x").unwrap().data()[0], 1.5);
    }

    #[test]
    fn first_step_closed_form() {
        for g in [0.3, -2.0, 1e-6] {
            let mut params = single(0.0);
            let mut state = AdamState::default();
            adam_update(&mut params, &single(g), &mut state, 1e-3, (0.9, 0.999), 1).unwrap();
            let expected = -1e-3 * g / (g.abs() + ADAM_EPS);
            assert!((params.get("x").unwrap().data()[0] - expected).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_gradient_moves_monotonically() {
        // Scalar simulation of the same recurrence as the oracle.
        let (lr, b1, b2, g) = (1e-2, 0.9, 0.999, 0.7);
        let mut opt = Adam::new(lr, (b1, b2));
        let mut params = single(0.0);
        let (mut m, mut v, mut x) = (0.0f64, 0.0f64, 0.0f64);
        let mut prev = 0.0;
        for t in 1..=100 {
            opt.step(&mut params, &single(g)).unwrap();
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            x -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + ADAM_EPS);
            let now = params.get("x").unwrap().data()[0];
            assert!(now < prev);
            assert!((now - x).abs() < 1e-12);
            prev = now;
        }
        assert_eq!(opt.steps_taken(), 100);
    }

    #[test]
    fn rejects_step_zero_and_unknown_names() {
        let mut params = single(0.0);
        let mut state = AdamState::default();
        assert!(adam_update(&mut params, &single(1.0), &mut state, 1e-3, (0.9, 0.999), 0).is_err());
        let mut other = ParameterSet::new();
        other.insert("y", Tensor::scalar(1.0)).unwrap();
        assert!(adam_update(&mut params, &other, &mut state, 1e-3, (0.9, 0.999), 1).is_err());
    }
}
