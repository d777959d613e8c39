use super::scalar::Scalar;
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdadeltaConfig {
    pub rho: f64,
    pub epsilon: f64,
}

impl Default for AdadeltaConfig {
    fn default() -> Self {
        AdadeltaConfig { rho: 0.95, epsilon: 1e-6 }
    }
}

impl AdadeltaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rho > 0.0 && self.rho < 1.0) {
            return Err(Error::InvalidConfig(format!("adadelta rho {} outside (0, 1)", self.rho)));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidConfig(format!("adadelta epsilon {} must be positive", self.epsilon)));
        }
        Ok(())
    }
}

/// Decaying accumulators `E[g^2]` and `E[dx^2]` for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdadeltaState<T: Scalar> {
    pub sq_grad: Tensor<T>,
    pub sq_update: Tensor<T>,
}

impl<T: Scalar> AdadeltaState<T> {
    pub fn new(shape: &[usize]) -> Self {
        AdadeltaState { sq_grad: Tensor::zeros(shape), sq_update: Tensor::zeros(shape) }
    }
}

/// One ADADELTA update of `param` in place.
pub fn adadelta_step<T: Scalar>(
    param: &mut Tensor<T>,
    grad: &Tensor<T>,
    state: &mut AdadeltaState<T>,
    cfg: &AdadeltaConfig,
) -> Result<()> {
    if param.shape() != grad.shape()
        || param.shape() != state.sq_grad.shape()
        || param.shape() != state.sq_update.shape()
    {
        return Err(Error::shape(format!(
            "adadelta parameter {:?}, gradient {:?}, state {:?}",
            param.shape(),
            grad.shape(),
            state.sq_grad.shape()
        )));
    }
    let (rho, eps) = (cfg.rho, cfg.epsilon);
    let eg = state.sq_grad.data_mut();
    let ex = state.sq_update.data_mut();
    for (((p, &g), eg), ex) in param.data_mut().iter_mut().zip(grad.data()).zip(eg).zip(ex) {
        let g = g.f64();
        let eg_new = rho * eg.f64() + (1.0 - rho) * g * g;
        let dx = -((ex.f64() + eps).sqrt() / (eg_new + eps).sqrt()) * g;
        *eg = T::of(eg_new);
        *ex = T::of(rho * ex.f64() + (1.0 - rho) * dx * dx);
        *p = T::of(p.f64() + dx);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(v: f64) -> Tensor<f64> {
        Tensor::from_vec(&[1], vec![v]).unwrap()
    }

    #[test]
    fn single_step_closed_form() {
        let cfg = AdadeltaConfig::default();
        let mut p = scalar(0.0);
        let mut st = AdadeltaState::new(&[1]);
        adadelta_step(&mut p, &scalar(1.0), &mut st, &cfg).unwrap();
        let eg = 0.05f64;
        let dx = -(1e-6f64 / (eg + 1e-6)).sqrt();
        assert!((st.sq_grad.data()[0] - eg).abs() < 1e-15);
        assert!((p.data()[0] - dx).abs() < 1e-15);
        assert!((p.data()[0] + 0.004472).abs() < 1e-6);
        assert!((st.sq_update.data()[0] - 0.05 * dx * dx).abs() < 1e-18);
    }

    #[test]
    fn zero_gradient_only_decays() {
        let cfg = AdadeltaConfig::default();
        let mut p = scalar(1.5);
        let mut st = AdadeltaState { sq_grad: scalar(0.2), sq_update: scalar(0.4) };
        adadelta_step(&mut p, &scalar(0.0), &mut st, &cfg).unwrap();
        assert_eq!(p.data()[0], 1.5);
        assert!((st.sq_grad.data()[0] - 0.19).abs() < 1e-15);
        assert!((st.sq_update.data()[0] - 0.38).abs() < 1e-15);
    }

    #[test]
    fn shape_mismatch() {
        let mut p = scalar(0.0);
        let mut st = AdadeltaState::new(&[1]);
        let g = Tensor::zeros(&[2]);
        assert!(adadelta_step(&mut p, &g, &mut st, &AdadeltaConfig::default()).is_err());
    }

    #[test]
    fn config_bounds() {
        assert!(AdadeltaConfig { rho: 1.0, epsilon: 1e-6 }.validate().is_err());
        assert!(AdadeltaConfig { rho: 0.9, epsilon: 0.0 }.validate().is_err());
        assert!(AdadeltaConfig::default().validate().is_ok());
    }
}
