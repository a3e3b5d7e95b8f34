//! Sequential CNN execution with per-layer activation capture.
//!
//! A *site* is a layer whose units are candidates for attribute witnesses:
//! every convolution, pooling and dense layer except the final classifier
//! head. A site's activation is read after any ReLU layers that directly
//! follow it, so a conv site reports post-nonlinearity feature maps. For
//! conv and pool sites a unit is a channel and its scalar value is the
//! spatial mean of that channel's map; for dense sites a unit is a single
//! output.

mod format;
mod gradient;
mod layer;

pub use format::{decode_model, encode_model, load_model, save_model, FORMAT_VERSION, MAGIC};
pub use gradient::{finite_diff_gradient, Loss};
pub use layer::{cross_entropy, softmax, Conv2d, Dense, Layer, LayerKind};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::tensor::{argmax, Tensor};

/// A neuron addressed by site layer index and unit index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(from = "(usize, usize)", into = "(usize, usize)")]
pub struct NeuronId {
    pub layer: usize,
    pub unit: usize,
}

impl NeuronId {
    pub fn new(layer: usize, unit: usize) -> Self {
        Self { layer, unit }
    }
}

impl From<(usize, usize)> for NeuronId {
    fn from((layer, unit): (usize, usize)) -> Self {
        Self { layer, unit }
    }
}

impl From<NeuronId> for (usize, usize) {
    fn from(n: NeuronId) -> Self {
        (n.layer, n.unit)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Site {
    /// Index of the conv/pool/dense layer.
    pub layer: usize,
    /// Index of the layer whose output carries the site's activation
    /// (the last ReLU directly after `layer`, or `layer` itself).
    pub value_layer: usize,
    pub kind: LayerKind,
    pub units: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    layers: Vec<Layer>,
    input_shape: [usize; 3],
    shapes: Vec<Vec<usize>>,
    sites: Vec<Site>,
    class_count: usize,
}

impl Model {
    pub fn new(input_shape: [usize; 3], layers: Vec<Layer>) -> Result<Self> {
        if input_shape.contains(&0) {
            return Err(invalid(format!("input shape {input_shape:?} must be positive")));
        }
        if layers.is_empty() {
            return Err(invalid("model has no layers"));
        }
        let mut shapes = Vec::with_capacity(layers.len());
        let mut current = input_shape.to_vec();
        for (i, layer) in layers.iter().enumerate() {
            if matches!(layer, Layer::Softmax) && i + 1 != layers.len() {
                return Err(invalid(format!("layer {i}: softmax must be the final layer")));
            }
            current = layer
                .output_shape(&current)
                .map_err(|e| invalid(format!("layer {i}: {e}")))?;
            shapes.push(current.clone());
        }
        let class_count = match current.as_slice() {
            &[n] => n,
            s => return Err(invalid(format!("final layer must produce a vector, got {s:?}"))),
        };

        let weighted: Vec<usize> = layers
            .iter()
            .enumerate()
            .filter(|(_, l)| matches!(l.kind(), LayerKind::Conv2d | LayerKind::MaxPool | LayerKind::Dense))
            .map(|(i, _)| i)
            .collect();
        let head = weighted.last().copied();
        let mut sites = Vec::new();
        for &i in &weighted {
            if Some(i) == head {
                continue;
            }
            let mut value_layer = i;
            while layers.get(value_layer + 1).is_some_and(|l| l.kind() == LayerKind::Relu) {
                value_layer += 1;
            }
            sites.push(Site {
                layer: i,
                value_layer,
                kind: layers[i].kind(),
                units: shapes[value_layer][0],
            });
        }
        Ok(Self { layers, input_shape, shapes, sites, class_count })
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// Number of layers before the softmax.
    pub fn depth(&self) -> usize {
        match self.layers.last() {
            Some(Layer::Softmax) => self.layers.len() - 1,
            _ => self.layers.len(),
        }
    }

    pub fn output_shape(&self, layer: usize) -> Option<&[usize]> {
        self.shapes.get(layer).map(Vec::as_slice)
    }

    pub fn sites(&self) -> &[Site] {
        &self.sites
    }

    pub fn site(&self, layer: usize) -> Option<&Site> {
        self.sites.iter().find(|s| s.layer == layer)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(Layer::parameter_count).sum()
    }

    pub fn is_valid_neuron(&self, id: NeuronId) -> bool {
        self.site(id.layer).is_some_and(|s| id.unit < s.units)
    }

    fn check_input(&self, image: &Tensor) -> Result<()> {
        if image.shape() != self.input_shape {
            return Err(invalid(format!(
                "image shape {:?} does not match model input {:?}",
                image.shape(),
                self.input_shape
            )));
        }
        Ok(())
    }

    /// Full forward pass with activation capture.
    pub fn forward(&self, image: &Tensor) -> Result<ForwardOutput> {
        self.forward_with(image, &mut NoHook, true)
    }

    /// Pre-softmax scores only; skips recording.
    pub fn logits(&self, image: &Tensor) -> Result<Vec<f32>> {
        Ok(self.forward_with(image, &mut NoHook, false)?.logits.into_data())
    }

    pub fn predict(&self, image: &Tensor) -> Result<usize> {
        Ok(argmax(&self.logits(image)?))
    }

    /// Forward pass that lets `hook` rewrite each site's activation before
    /// the next layer consumes it.
    pub fn forward_with(
        &self,
        image: &Tensor,
        hook: &mut dyn SiteHook,
        record: bool,
    ) -> Result<ForwardOutput> {
        self.check_input(image)?;
        let mut layers = Vec::with_capacity(if record { self.layers.len() } else { 0 });
        let mut site_iter = self.sites.iter().peekable();
        let mut current = image.clone();
        let mut logits = None;
        for (i, layer) in self.layers.iter().enumerate() {
            if matches!(layer, Layer::Softmax) {
                logits = Some(current.clone());
            }
            current = layer.apply(&current, &self.shapes[i]);
            if let Some(site) = site_iter.next_if(|s| s.value_layer == i) {
                hook.at_site(site, &mut current);
            }
            if record {
                layers.push(LayerActivation {
                    layer: i,
                    kind: layer.kind(),
                    summary: unit_summaries(&current),
                    raw: current.clone(),
                });
            }
        }
        let logits = logits.unwrap_or(current);
        let probabilities = softmax(logits.data());
        let label = argmax(&probabilities);
        Ok(ForwardOutput {
            logits,
            probabilities,
            label,
            record: ActivationRecord { layers, sites: self.sites.clone() },
        })
    }
}

/// Callback invoked on each site's activation during a forward pass.
pub trait SiteHook {
    fn at_site(&mut self, site: &Site, activation: &mut Tensor);
}

pub struct NoHook;

impl SiteHook for NoHook {
    fn at_site(&mut self, _site: &Site, _activation: &mut Tensor) {}
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// Scores entering the softmax.
    pub logits: Tensor,
    pub probabilities: Vec<f32>,
    pub label: usize,
    pub record: ActivationRecord,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerActivation {
    pub layer: usize,
    pub kind: LayerKind,
    pub raw: Tensor,
    pub summary: Vec<f32>,
}

/// Raw outputs and per-unit summaries for every layer of one forward pass.
/// Empty when the pass ran without recording.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationRecord {
    pub layers: Vec<LayerActivation>,
    pub sites: Vec<Site>,
}

impl ActivationRecord {
    /// Per-unit values of the site whose weight layer is `layer`.
    pub fn site_summary(&self, layer: usize) -> Option<&[f32]> {
        let site = self.sites.iter().find(|s| s.layer == layer)?;
        self.layers.get(site.value_layer).map(|a| a.summary.as_slice())
    }

    pub fn site_raw(&self, layer: usize) -> Option<&Tensor> {
        let site = self.sites.iter().find(|s| s.layer == layer)?;
        self.layers.get(site.value_layer).map(|a| &a.raw)
    }

    pub fn neuron_value(&self, id: NeuronId) -> Option<f32> {
        self.site_summary(id.layer)?.get(id.unit).copied()
    }
}

/// Channel means for 3-D activations, the values themselves for vectors.
pub fn unit_summaries(t: &Tensor) -> Vec<f32> {
    match t.rank() {
        3 => {
            let c = t.shape()[0];
            (0..c).map(|ch| channel_mean(t.channel_slice(ch))).collect()
        }
        _ => t.data().to_vec(),
    }
}

pub fn channel_mean(values: &[f32]) -> f32 {
    (values.iter().map(|&v| v as f64).sum::<f64>() / values.len() as f64) as f32
}
