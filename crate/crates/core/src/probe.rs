//! Linear probes that test whether a set of units encodes an attribute.
//!
//! A probe is a logistic regression over the chosen units' summaries,
//! trained to tell images that show an attribute from images where its
//! region is blank. Witness units should do at least as well as an equally
//! sized set of other units from the same layer.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::annotation::Attribute;
use crate::engine::{Model, NeuronId};
use crate::error::{invalid, Result};
use crate::synthetic::{render_face, PlantedSpec};
use crate::witness::WitnessSet;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub l2: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self { epochs: 400, learning_rate: 0.5, l2: 1e-3 }
    }
}

/// Logistic regression on standardised features.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    weights: Vec<f64>,
    bias: f64,
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl LinearProbe {
    /// Full-batch gradient descent on the mean log loss.
    pub fn fit(features: &[Vec<f64>], labels: &[bool], cfg: &ProbeConfig) -> Result<Self> {
        if features.is_empty() || features.len() != labels.len() {
            return Err(invalid("probe needs one label per non-empty feature row"));
        }
        let dim = features[0].len();
        if dim == 0 || features.iter().any(|f| f.len() != dim) {
            return Err(invalid("feature rows must share a positive length"));
        }
        let n = features.len() as f64;
        let mean: Vec<f64> = (0..dim).map(|j| features.iter().map(|f| f[j]).sum::<f64>() / n).collect();
        let scale: Vec<f64> = (0..dim)
            .map(|j| {
                let var = features.iter().map(|f| (f[j] - mean[j]).powi(2)).sum::<f64>() / n;
                if var > 1e-12 { var.sqrt() } else { 1.0 }
            })
            .collect();
        let mut probe = Self { weights: vec![0.0; dim], bias: 0.0, mean, scale };
        let xs: Vec<Vec<f64>> = features.iter().map(|f| probe.standardise(f)).collect();
        for _ in 0..cfg.epochs {
            let mut gw = vec![0.0; dim];
            let mut gb = 0.0;
            for (x, &y) in xs.iter().zip(labels) {
                let err = sigmoid(probe.score(x)) - f64::from(u8::from(y));
                for (g, xi) in gw.iter_mut().zip(x) {
                    *g += err * xi;
                }
                gb += err;
            }
            for (w, g) in probe.weights.iter_mut().zip(&gw) {
                *w -= cfg.learning_rate * (g / n + cfg.l2 * *w);
            }
            probe.bias -= cfg.learning_rate * gb / n;
        }
        Ok(probe)
    }

    fn standardise(&self, f: &[f64]) -> Vec<f64> {
        f.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect()
    }

    fn score(&self, x: &[f64]) -> f64 {
        self.bias + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
    }

    pub fn predict(&self, features: &[f64]) -> bool {
        self.score(&self.standardise(features)) > 0.0
    }

    pub fn accuracy(&self, features: &[Vec<f64>], labels: &[bool]) -> f64 {
        let hits = features.iter().zip(labels).filter(|(f, &y)| self.predict(f) == y).count();
        hits as f64 / labels.len().max(1) as f64
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// Summaries of `units` for one image.
pub fn unit_features(model: &Model, image: &crate::Tensor, units: &[NeuronId]) -> Result<Vec<f64>> {
    let record = model.forward(image)?.record;
    units
        .iter()
        .map(|&n| record.neuron_value(n).map(f64::from).ok_or_else(|| invalid(format!("{n:?} is not a site unit"))))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeComparison {
    pub attribute: Attribute,
    pub witness_units: Vec<NeuronId>,
    pub random_units: Vec<NeuronId>,
    pub witness_accuracy: f64,
    pub random_accuracy: f64,
}

/// Trains one probe on the witness units and one on an equally sized random
/// pick of the same layer's other units, using presence/absence images
/// rendered from `spec`, and reports held-out accuracy of both.
pub fn compare_witness_probe(
    model: &Model,
    spec: &PlantedSpec,
    witness_set: &WitnessSet,
    samples: usize,
    seed: u64,
    cfg: &ProbeConfig,
) -> Result<ProbeComparison> {
    let attr = witness_set.attribute;
    let witnesses: Vec<NeuronId> = witness_set.neurons.iter().copied().collect();
    let layer = match witnesses.first() {
        Some(n) if witnesses.iter().all(|w| w.layer == n.layer) => n.layer,
        Some(_) => return Err(invalid("probe witnesses must share one layer")),
        None => return Err(invalid(format!("no witnesses for {attr}"))),
    };
    let site = model.site(layer).ok_or_else(|| invalid(format!("layer {layer} is not a site")))?;
    let others: Vec<NeuronId> =
        (0..site.units).map(|u| NeuronId::new(layer, u)).filter(|n| !witnesses.contains(n)).collect();
    if others.len() < witnesses.len() {
        return Err(invalid("not enough non-witness units for a matched probe"));
    }
    if samples < 4 {
        return Err(invalid("need at least 4 samples"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let random: Vec<NeuronId> = others.choose_multiple(&mut rng, witnesses.len()).copied().collect();

    let mut images = Vec::with_capacity(samples);
    let mut labels = Vec::with_capacity(samples);
    for i in 0..samples {
        let present = i % 2 == 0;
        let class = rng.random_range(0..spec.class_count);
        images.push(render_face(spec, class, (!present).then_some(attr), &mut rng)?);
        labels.push(present);
    }
    let split = samples / 2;
    let run = |units: &[NeuronId]| -> Result<f64> {
        let feats: Vec<Vec<f64>> =
            images.iter().map(|img| unit_features(model, img, units)).collect::<Result<_>>()?;
        let probe = LinearProbe::fit(&feats[..split], &labels[..split], cfg)?;
        Ok(probe.accuracy(&feats[split..], &labels[split..]))
    };
    Ok(ProbeComparison {
        attribute: attr,
        witness_accuracy: run(&witnesses)?,
        random_accuracy: run(&random)?,
        witness_units: witnesses,
        random_units: random,
    })
}
