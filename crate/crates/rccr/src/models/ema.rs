//! Exponential-moving-average update for the teacher model and teacher
//! projector: shadow = decay * shadow + (1 - decay) * current, applied
//! parameter by parameter.

use serde::{Deserialize, Serialize};

use super::{ModelError, Parameterized};

/// Decay and step counter for one EMA-tracked parameter set. The shadow
/// parameters themselves live in the teacher copy of the model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmaState {
    pub decay: f64,
    pub step: u64,
}

impl EmaState {
    pub fn new(decay: f64) -> Result<Self, ModelError> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(ModelError::BadConfig(format!(
                "EMA decay {decay} outside [0, 1]"
            )));
        }
        Ok(Self { decay, step: 0 })
    }
}

/// One EMA step over every tracked parameter. Shapes of the shadow and the
/// current parameters must mirror each other exactly.
pub fn ema_update<M: Parameterized>(
    state: &mut EmaState,
    shadow: &mut M,
    current: &M,
) -> Result<(), ModelError> {
    let current_params = current.params();
    let mut shadow_params = shadow.params_mut();
    if shadow_params.len() != current_params.len() {
        return Err(ModelError::ShapeMismatch(format!(
            "shadow has {} parameters, current has {}",
            shadow_params.len(),
            current_params.len()
        )));
    }
    for (idx, (s, c)) in shadow_params.iter_mut().zip(current_params.iter()).enumerate() {
        if s.shape() != c.shape() {
            return Err(ModelError::ShapeMismatch(format!(
                "parameter {idx}: shadow {:?} vs current {:?}",
                s.shape(),
                c.shape()
            )));
        }
        let decay = state.decay;
        s.zip_mut_with(c, |sv, &cv| {
            *sv = decay * *sv + (1.0 - decay) * cv;
        });
    }
    state.step += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD, IxDyn};

    /// Scalar probe implementing the parameter trait for direct checks.
    struct Probe(ArrayD<f64>);

    impl Parameterized for Probe {
        fn param_names(&self) -> Vec<String> {
            vec!["probe".into()]
        }
        fn params(&self) -> Vec<ArrayViewD<'_, f64>> {
            vec![self.0.view()]
        }
        fn params_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
            vec![self.0.view_mut()]
        }
    }

    fn scalar(v: f64) -> Probe {
        Probe(ArrayD::from_elem(IxDyn(&[]), v))
    }

    #[test]
    fn decay_zero_copies_current() {
        let mut state = EmaState::new(0.0).unwrap();
        let mut shadow = scalar(1.0);
        let current = scalar(0.25);
        ema_update(&mut state, &mut shadow, &current).unwrap();
        assert_eq!(shadow.0.sum(), 0.25);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn decay_one_freezes_shadow() {
        let mut state = EmaState::new(1.0).unwrap();
        let mut shadow = scalar(1.0);
        let current = scalar(0.25);
        ema_update(&mut state, &mut shadow, &current).unwrap();
        assert_eq!(shadow.0.sum(), 1.0);
    }

    #[test]
    fn single_step_formula() {
        let mut state = EmaState::new(0.999).unwrap();
        let mut shadow = scalar(1.0);
        let current = scalar(0.0);
        ema_update(&mut state, &mut shadow, &current).unwrap();
        assert!((shadow.0.sum() - 0.999f64).abs() <= 1e-10);
    }

    #[test]
    fn geometric_convergence_toward_constant_target() {
        // with theta fixed, |shadow_n - theta| = decay^n |shadow_0 - theta|
        let decay = 0.9;
        let mut state = EmaState::new(decay).unwrap();
        let mut shadow = scalar(1.0);
        let current = scalar(0.0);
        let mut expected = 1.0f64;
        for _ in 0..200 {
            ema_update(&mut state, &mut shadow, &current).unwrap();
            expected *= decay;
            assert!(
                (shadow.0.sum() - expected).abs() <= 1e-10,
                "shadow {} expected {}",
                shadow.0.sum(),
                expected
            );
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut state = EmaState::new(0.5).unwrap();
        let mut shadow = Probe(ArrayD::zeros(IxDyn(&[2, 2])));
        let current = Probe(ArrayD::zeros(IxDyn(&[2, 3])));
        assert!(ema_update(&mut state, &mut shadow, &current).is_err());
    }

    #[test]
    fn invalid_decay_rejected() {
        assert!(EmaState::new(-0.1).is_err());
        assert!(EmaState::new(1.1).is_err());
    }
}
