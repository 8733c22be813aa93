//! Adam optimizer with bias correction.

use std::sync::Arc;

use ndarray::Array2;

use crate::error::{Error, Result};

/// Per-parameter first/second moments plus the step counter. The moment
/// buffers mirror the parameter list order used at construction.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<Array2<f64>>,
    pub v: Vec<Array2<f64>>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    names: Vec<String>,
}

impl AdamState {
    /// Moments start at zero. `named_shapes` fixes the parameter order.
    pub fn new(named_shapes: &[(String, (usize, usize))]) -> Self {
        AdamState {
            m: named_shapes.iter().map(|(_, s)| Array2::zeros(*s)).collect(),
            v: named_shapes.iter().map(|(_, s)| Array2::zeros(*s)).collect(),
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            names: named_shapes.iter().map(|(n, _)| n.clone()).collect(),
        }
    }

    /// One bias-corrected update. `params` and `grads` must follow the
    /// construction order. Rejects non-finite gradients, naming the
    /// offending parameter.
    pub fn step(
        &mut self,
        lr: f64,
        params: &mut [&mut Arc<Array2<f64>>],
        grads: &[Array2<f64>],
    ) -> Result<()> {
        assert_eq!(params.len(), self.m.len(), "adam: parameter count mismatch");
        assert_eq!(grads.len(), self.m.len(), "adam: gradient count mismatch");
        for (i, g) in grads.iter().enumerate() {
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite(format!("gradient of parameter '{}'", self.names[i])));
            }
        }

        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);

        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(g.dim(), m.dim(), "adam: gradient shape mismatch");
            m.zip_mut_with(g, |mi, &gi| *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi);
            v.zip_mut_with(g, |vi, &gi| *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi);

            let theta = Arc::make_mut(p);
            ndarray::Zip::from(&mut *theta).and(&*m).and(&*v).for_each(|t, &mi, &vi| {
                let m_hat = mi / bc1;
                let v_hat = vi / bc2;
                *t -= lr * m_hat / (v_hat.sqrt() + self.epsilon);
            });
        }
        Ok(())
    }
}
