use crate::param::Module;
use crate::{Error, Result};

/// SGD with heavy-ball momentum and L2 weight decay folded into the
/// velocity: `v = m v + g + wd p; p -= lr v`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Sgd {
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
}

impl Default for Sgd {
    fn default() -> Self {
        Self { lr: 1e-4, momentum: 0.99, weight_decay: 5e-4 }
    }
}

impl Sgd {
    /// Applies one update. If any gradient is non-finite nothing changes.
    pub fn step(&self, model: &mut dyn Module) -> Result<()> {
        let mut bad = None;
        model.visit_ref(&mut |p| {
            if bad.is_none() && p.trainable && !p.grad.iter().all(|g| g.is_finite()) {
                bad = Some(p.name.clone());
            }
        });
        if let Some(name) = bad {
            return Err(Error::NonFinite(format!("gradient of {name}")));
        }
        model.visit(&mut |p| {
            if !p.trainable {
                return;
            }
            let wd = if p.decay { self.weight_decay } else { 0.0 };
            for ((v, g), x) in p.velocity.iter_mut().zip(&p.grad).zip(p.value.iter_mut()) {
                *v = self.momentum * *v + g + wd * *x;
                *x -= self.lr * *v;
            }
        });
        Ok(())
    }
}
