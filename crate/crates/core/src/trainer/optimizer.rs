use crate::error::{Error, Result};
use crate::model::ConvNetModel;

/// Classic momentum SGD: `v ← μv + g`, `ω ← ω − lr·v`.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    velocity: Vec<Vec<f64>>,
    frozen: Vec<bool>,
    momentum: f64,
    lr: f64,
    iteration: usize,
}

impl OptimizerState {
    /// Zero velocities for every parameter of `model`; parameters with
    /// `frozen[i]` set are never touched.
    pub fn new(model: &ConvNetModel, momentum: f64, lr: f64, frozen: Vec<bool>) -> Result<Self> {
        if frozen.len() != model.params().len() {
            return Err(Error::shape(format!(
                "freeze mask has {} entries for {} parameters",
                frozen.len(),
                model.params().len()
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::config(format!("momentum must lie in [0, 1), got {momentum}")));
        }
        let mut s = Self {
            velocity: model.params().iter().map(|p| vec![0.0; p.value.numel()]).collect(),
            frozen,
            momentum,
            lr: 0.0,
            iteration: 0,
        };
        s.set_lr(lr)?;
        Ok(s)
    }

    pub fn set_lr(&mut self, lr: f64) -> Result<()> {
        if !(lr.is_finite() && lr > 0.0) {
            return Err(Error::config(format!("learning rate must be positive, got {lr}")));
        }
        self.lr = lr;
        Ok(())
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn velocity(&self, i: usize) -> &[f64] {
        &self.velocity[i]
    }

    pub fn is_frozen(&self, i: usize) -> bool {
        self.frozen[i]
    }

    /// Applies one update. `grads[i]` must be present for every trainable
    /// parameter and is ignored for frozen ones.
    pub fn step(&mut self, model: &mut ConvNetModel, grads: &[Option<&[f64]>]) -> Result<()> {
        if grads.len() != self.velocity.len() || model.params().len() != self.velocity.len() {
            return Err(Error::shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                self.velocity.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if self.frozen[i] {
                continue;
            }
            let g = g.ok_or_else(|| Error::contract(format!("missing gradient for {}", model.params()[i].name)))?;
            let v = &mut self.velocity[i];
            if g.len() != v.len() {
                return Err(Error::shape(format!(
                    "gradient for {} has {} entries, expected {}",
                    model.params()[i].name,
                    g.len(),
                    v.len()
                )));
            }
            let w = model.params_mut()[i].value.data_mut();
            for ((w, v), g) in w.iter_mut().zip(v.iter_mut()).zip(g) {
                *v = self.momentum * *v + g;
                *w -= self.lr * *v;
            }
        }
        self.iteration += 1;
        Ok(())
    }
}

pub fn sgd_momentum_step(state: &mut OptimizerState, model: &mut ConvNetModel, grads: &[Option<&[f64]>]) -> Result<()> {
    state.step(model, grads)
}
