//! Adam with decay folded into the gradient.
//!
//! Weight decay is applied as an extra `lambda * theta` term added to the
//! raw gradient before the moment updates (classic L2 regularisation, not
//! the decoupled variant), matching how the training runs are configured.

use crate::error::Error;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Result;

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64, weight_decay: f64) -> Self {
        AdamConfig {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState<S> {
    m: Vec<Tensor<S>>,
    v: Vec<Tensor<S>>,
    t: u64,
}

impl<S: Scalar> AdamState<S> {
    /// Fresh zeroed moments matching the given parameter tensors.
    pub fn new(params: &[Tensor<S>]) -> Self {
        AdamState {
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            t: 0,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// One update step. `grads[i]` may be `None` for a parameter that
    /// received no gradient this batch; its moments still decay only via
    /// an implicit zero gradient plus weight decay.
    pub fn step(
        &mut self,
        params: &mut [Tensor<S>],
        grads: &[Option<&Tensor<S>>],
        cfg: &AdamConfig,
    ) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::shape(format!(
                "adam: {} params, {} grads, state for {}",
                params.len(),
                grads.len(),
                self.m.len()
            )));
        }
        self.t += 1;
        let b1 = S::from_f64(cfg.beta1);
        let b2 = S::from_f64(cfg.beta2);
        let one_m_b1 = S::one() - b1;
        let one_m_b2 = S::one() - b2;
        let eps = S::from_f64(cfg.eps);
        let wd = S::from_f64(cfg.weight_decay);
        let bias1 = S::from_f64(1.0 - cfg.beta1.powi(self.t as i32));
        let bias2 = S::from_f64(1.0 - cfg.beta2.powi(self.t as i32));
        let lr = S::from_f64(cfg.lr);
        for (i, p) in params.iter_mut().enumerate() {
            if let Some(g) = grads[i] {
                if g.shape() != p.shape() {
                    return Err(Error::shape(format!(
                        "adam: grad shape {:?} vs param {:?}",
                        g.shape(),
                        p.shape()
                    )));
                }
            }
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let pd = p.data_mut();
            for j in 0..pd.len() {
                let raw = grads[i].map_or(S::zero(), |g| g.data()[j]);
                let geff = raw + wd * pd[j];
                m[j] = b1 * m[j] + one_m_b1 * geff;
                v[j] = b2 * v[j] + one_m_b2 * geff * geff;
                let mh = m[j] / bias1;
                let vh = v[j] / bias2;
                pd[j] = pd[j] - lr * mh / (vh.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Two steps with constant gradient 0.5, checked against values computed
    // independently from the update equations.
    #[test]
    fn steps_match_reference() {
        let mut params = vec![Tensor::<f64>::filled(&[1], 1.0)];
        let mut st = AdamState::new(&params);
        let g = Tensor::<f64>::filled(&[1], 0.5);
        let cfg = AdamConfig::with_lr(1e-3, 0.0);
        st.step(&mut params, &[Some(&g)], &cfg).unwrap();
        assert!((params[0].data()[0] - 0.99900000002).abs() < 1e-12);
        st.step(&mut params, &[Some(&g)], &cfg).unwrap();
        assert!((params[0].data()[0] - 0.99800000004).abs() < 1e-12);
        assert_eq!(st.step_count(), 2);
    }

    #[test]
    fn weight_decay_enters_the_gradient() {
        let mut params = vec![Tensor::<f64>::filled(&[1], 1.0)];
        let mut st = AdamState::new(&params);
        let g = Tensor::<f64>::filled(&[1], 0.5);
        let cfg = AdamConfig::with_lr(1e-3, 0.01);
        st.step(&mut params, &[Some(&g)], &cfg).unwrap();
        assert!((params[0].data()[0] - 0.99900000001960787).abs() < 1e-14);
        st.step(&mut params, &[Some(&g)], &cfg).unwrap();
        assert!((params[0].data()[0] - 0.99800000055036042).abs() < 1e-14);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_fixed_point() {
        let mut params = vec![Tensor::<f64>::from_vec(&[2], vec![0.3, -0.7]).unwrap()];
        let before = params[0].clone();
        let mut st = AdamState::new(&params);
        let cfg = AdamConfig::with_lr(1e-2, 0.0);
        for _ in 0..5 {
            st.step(&mut params, &[None], &cfg).unwrap();
        }
        assert_eq!(params[0], before);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let mut params = vec![Tensor::<f32>::filled(&[2], 0.0)];
        let mut st = AdamState::new(&params);
        let bad = Tensor::<f32>::filled(&[3], 0.0);
        let cfg = AdamConfig::with_lr(1e-3, 0.0);
        assert!(st.step(&mut params, &[Some(&bad)], &cfg).is_err());
    }
}
