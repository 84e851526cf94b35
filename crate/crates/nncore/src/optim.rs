use crate::error::{NnError, Result};
use crate::params::ParamStore;
use crate::real::Real;

/// Adam with bias-corrected moments.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<F>>,
    pub v: Vec<Vec<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(params: &ParamStore<F>, lr: f64) -> Self {
        let zeros: Vec<Vec<F>> = params
            .tensors()
            .iter()
            .map(|t| vec![F::zero(); t.numel()])
            .collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update at the configured learning rate.
    pub fn step(&mut self, params: &mut ParamStore<F>, grads: &[Vec<F>]) -> Result<()> {
        let lr = self.lr;
        self.step_with_lr(params, grads, lr)
    }

    pub fn step_with_lr(&mut self, params: &mut ParamStore<F>, grads: &[Vec<F>], lr: f64) -> Result<()> {
        if grads.len() != params.len() || self.m.len() != params.len() {
            return Err(NnError::InvalidArgument(format!(
                "adam: {} gradients, {} moments, {} parameters",
                grads.len(),
                self.m.len(),
                params.len()
            )));
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (F::lit(self.beta1), F::lit(self.beta2));
        let (ob1, ob2) = (F::lit(1.0 - self.beta1), F::lit(1.0 - self.beta2));
        let step_size = F::lit(lr / c1);
        let c2_sqrt = F::lit(c2.sqrt());
        let eps = F::lit(self.eps);
        for (((p, g), m), v) in params
            .tensors_mut()
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            if g.len() != p.numel() {
                return Err(NnError::InvalidArgument("adam: gradient size mismatch".into()));
            }
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = b1 * *m + ob1 * g;
                *v = b2 * *v + ob2 * g * g;
                // p -= lr * m_hat / (sqrt(v_hat) + eps)
                *p -= step_size * *m / (v.sqrt() / c2_sqrt + eps);
            }
        }
        Ok(())
    }
}
