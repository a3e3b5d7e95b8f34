use rayon::prelude::*;

use super::layer::cross_entropy;
use super::Model;
use crate::error::{invalid, Result};
use crate::tensor::Tensor;

/// Scalar objective differentiated by [`finite_diff_gradient`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Loss {
    /// `-ln p(class)`.
    CrossEntropy { class: usize },
    /// The raw pre-softmax score of `class`.
    Logit { class: usize },
}

impl Loss {
    pub fn class(self) -> usize {
        match self {
            Loss::CrossEntropy { class } | Loss::Logit { class } => class,
        }
    }

    pub fn evaluate(self, logits: &[f32]) -> f64 {
        match self {
            Loss::CrossEntropy { class } => cross_entropy(logits, class),
            Loss::Logit { class } => logits[class] as f64,
        }
    }
}

/// Central-difference gradient of `loss` with respect to every input pixel:
/// `(L(x + h e_i) - L(x - h e_i)) / 2h`.
pub fn finite_diff_gradient(model: &Model, image: &Tensor, loss: Loss, h: f32) -> Result<Tensor> {
    if !(h > 0.0 && h.is_finite()) {
        return Err(invalid(format!("finite-difference step must be positive, got {h}")));
    }
    if loss.class() >= model.class_count() {
        return Err(invalid(format!("class {} out of range", loss.class())));
    }
    // surfaces shape errors before fanning out
    model.logits(image)?;

    let grads: Vec<f32> = (0..image.len())
        .into_par_iter()
        .map(|i| {
            let mut probe = image.clone();
            let x = probe.data()[i];
            probe.data_mut()[i] = x + h;
            let up = loss.evaluate(&model.logits(&probe).expect("shape checked"));
            probe.data_mut()[i] = x - h;
            let down = loss.evaluate(&model.logits(&probe).expect("shape checked"));
            // divide by the step actually taken after f32 rounding
            let span = ((x + h) as f64) - ((x - h) as f64);
            ((up - down) / span) as f32
        })
        .collect();
    Tensor::new(image.shape().to_vec(), grads)
}
