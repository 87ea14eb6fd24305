use crate::config::{Schedule, TrainSettings};
use crate::error::Result;
use crate::model::{TransformerConfig, TransformerParams};
use crate::real::Real;

/// Minibatch SGD with heavy-ball momentum and coupled L2 weight decay.
pub struct Sgd<F> {
    velocity: TransformerParams<F>,
    learning_rate: f64,
    momentum: f64,
    weight_decay: f64,
    schedule: Schedule,
    total_steps: usize,
    grad_clip: f64,
}

impl<F: Real> Sgd<F> {
    pub fn new(config: &TransformerConfig, settings: &TrainSettings, total_steps: usize) -> Result<Self> {
        Ok(Sgd {
            velocity: TransformerParams::zeros(config)?,
            learning_rate: settings.learning_rate,
            momentum: settings.momentum,
            weight_decay: settings.weight_decay,
            schedule: settings.schedule,
            total_steps: total_steps.max(1),
            grad_clip: settings.grad_clip,
        })
    }

    pub fn learning_rate(&self, step: usize) -> f64 {
        match self.schedule {
            Schedule::Constant => self.learning_rate,
            Schedule::Cosine => {
                let t = step.min(self.total_steps) as f64 / self.total_steps as f64;
                0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }

    /// `v <- mu v + (g + wd w)`, `w <- w - lr v`, after rescaling `g` to
    /// the clip norm if one is set. Returns the unclipped gradient norm.
    pub fn step(&mut self, params: &mut TransformerParams<F>, grads: &mut TransformerParams<F>, step: usize) -> f64 {
        let norm = grads
            .tensors_mut()
            .iter()
            .flat_map(|t| t.data.iter())
            .map(|v| v.as_f64() * v.as_f64())
            .sum::<f64>()
            .sqrt();
        let clip = if self.grad_clip > 0.0 && norm > self.grad_clip {
            self.grad_clip / norm
        } else {
            1.0
        };
        let clip = F::c(clip);
        let lr = F::c(self.learning_rate(step));
        let mu = F::c(self.momentum);
        let wd = F::c(self.weight_decay);
        let tensors = params.tensors_mut().into_iter();
        let grads = grads.tensors_mut().into_iter();
        let vels = self.velocity.tensors_mut().into_iter();
        for ((w, g), v) in tensors.zip(grads).zip(vels) {
            for ((wi, &gi), vi) in w.data.iter_mut().zip(&g.data).zip(v.data.iter_mut()) {
                *vi = mu * *vi + clip * gi + wd * *wi;
                *wi -= lr * *vi;
            }
        }
        norm
    }
}
