//! The attribute-steered forward pass.
//!
//! At every site that holds at least one witness unit, for the current
//! input:
//!
//! 1. non-witness channels of pooling sites are margin-cropped and resized
//!    back (the conserving transform),
//! 2. mean, standard deviation and minimum of the witness unit values are
//!    taken,
//! 3. witness units are strengthened and non-witness units above the witness
//!    mean are weakened.
//!
//! A conv/pool unit is a channel; its map is scaled by `new / old` of the
//! channel mean. Sites without witnesses pass through untouched.

use serde::{Deserialize, Serialize};

use crate::engine::{unit_summaries, ForwardOutput, LayerKind, Model, Site, SiteHook};
use crate::error::{invalid, Result};
use crate::tensor::{bicubic_resize, crop_margin, Tensor};
use crate::witness::CombinedWitnesses;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SteeringConfig {
    /// Weakening magnitude.
    pub alpha: f64,
    /// Strengthening spread.
    pub beta: f64,
    /// Base strengthening factor.
    pub epsilon: f64,
    pub pool_margin: usize,
    pub sigma_floor: f64,
    pub strengthen: bool,
    pub weaken: bool,
    /// Apply the crop-and-resize transform to non-witness pooling channels.
    pub conserve: bool,
}

impl Default for SteeringConfig {
    fn default() -> Self {
        Self {
            alpha: 100.0,
            beta: 60.0,
            epsilon: 1.15,
            pool_margin: 2,
            sigma_floor: 1e-6,
            strengthen: true,
            weaken: true,
            conserve: true,
        }
    }
}

impl SteeringConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.beta > 0.0) {
            return Err(invalid("alpha and beta must be positive"));
        }
        if self.epsilon.is_nan() || self.epsilon < 1.0 {
            return Err(invalid("epsilon must be at least 1"));
        }
        if self.sigma_floor.is_nan() || self.sigma_floor <= 0.0 {
            return Err(invalid("sigma_floor must be positive"));
        }
        Ok(())
    }

    /// Every mechanism switched off: steering reproduces the plain model.
    pub fn neutral() -> Self {
        Self { strengthen: false, weaken: false, conserve: false, pool_margin: 0, ..Self::default() }
    }
}

/// Statistics of the witness units of one site for the current input.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerWitnessStats {
    pub layer: usize,
    pub mu: f64,
    /// Population standard deviation, floored.
    pub sigma: f64,
    pub min: f64,
}

impl LayerWitnessStats {
    /// `None` when `values` is empty.
    pub fn from_values(layer: usize, values: &[f32], sigma_floor: f64) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let n = values.len() as f64;
        let mu = values.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = values.iter().map(|&v| (v as f64 - mu).powi(2)).sum::<f64>() / n;
        let min = values.iter().map(|&v| v as f64).fold(f64::INFINITY, f64::min);
        Some(Self { layer, mu, sigma: var.sqrt().max(sigma_floor), min })
    }
}

/// `exp(-(v - mu) / (alpha * sigma)) * v`.
pub fn weaken(v: f64, stats: &LayerWitnessStats, alpha: f64) -> f64 {
    (-(v - stats.mu) / (alpha * stats.sigma)).exp() * v
}

/// `epsilon * v + (1 - exp(-(v - min) / (beta * sigma))) * v`.
pub fn strengthen(v: f64, stats: &LayerWitnessStats, beta: f64, epsilon: f64) -> f64 {
    epsilon * v + (1.0 - (-(v - stats.min) / (beta * stats.sigma)).exp()) * v
}

/// Crops `margin` from every side then resizes back to the original size.
pub fn conserve_transform(map: &Tensor, margin: usize) -> Result<Tensor> {
    if margin == 0 {
        return Ok(map.clone());
    }
    let (h, w) = map.dims_2d()?;
    bicubic_resize(&crop_margin(map, margin)?, h, w)
}

/// Plain model plus a witness set and steering parameters.
pub struct SteeredModel<'a> {
    model: &'a Model,
    witnesses: &'a CombinedWitnesses,
    cfg: SteeringConfig,
}

impl<'a> SteeredModel<'a> {
    pub fn new(model: &'a Model, witnesses: &'a CombinedWitnesses, cfg: SteeringConfig) -> Result<Self> {
        cfg.validate()?;
        witnesses.validate(model)?;
        Ok(Self { model, witnesses, cfg })
    }

    pub fn forward(&self, image: &Tensor) -> Result<ForwardOutput> {
        self.model.forward_with(image, &mut SteeringHook { witnesses: self.witnesses, cfg: &self.cfg }, true)
    }

    pub fn predict(&self, image: &Tensor) -> Result<usize> {
        Ok(self
            .model
            .forward_with(image, &mut SteeringHook { witnesses: self.witnesses, cfg: &self.cfg }, false)?
            .label)
    }
}

/// One-shot steered forward pass.
pub fn steered_forward(
    model: &Model,
    witnesses: &CombinedWitnesses,
    cfg: &SteeringConfig,
    image: &Tensor,
) -> Result<ForwardOutput> {
    SteeredModel::new(model, witnesses, *cfg)?.forward(image)
}

struct SteeringHook<'a> {
    witnesses: &'a CombinedWitnesses,
    cfg: &'a SteeringConfig,
}

impl SiteHook for SteeringHook<'_> {
    fn at_site(&mut self, site: &Site, act: &mut Tensor) {
        let Some(wit) = self.witnesses.units_at(site.layer) else {
            return;
        };
        let cfg = self.cfg;
        let spatial = act.rank() == 3;

        if spatial && site.kind == LayerKind::MaxPool && cfg.conserve && cfg.pool_margin > 0 {
            let (c, h, w) = act.dims_3d().expect("rank 3");
            // maps too small for the margin are left alone
            if h.min(w) >= 2 * cfg.pool_margin + 2 {
                for ch in (0..c).filter(|ch| !wit.contains(ch)) {
                    let plane = act.channel(ch).expect("in range");
                    let moved = conserve_transform(&plane, cfg.pool_margin).expect("margin checked");
                    act.set_channel(ch, &moved).expect("same shape");
                }
            }
        }

        let values = unit_summaries(act);
        let wvals: Vec<f32> = wit.iter().filter_map(|&u| values.get(u).copied()).collect();
        let Some(stats) = LayerWitnessStats::from_values(site.layer, &wvals, cfg.sigma_floor) else {
            return;
        };

        for (unit, &v) in values.iter().enumerate() {
            let old = v as f64;
            let new = if wit.contains(&unit) {
                if !cfg.strengthen {
                    continue;
                }
                strengthen(old, &stats, cfg.beta, cfg.epsilon)
            } else {
                if !cfg.weaken || old <= stats.mu {
                    continue;
                }
                weaken(old, &stats, cfg.alpha)
            };
            if spatial {
                if old == 0.0 {
                    continue;
                }
                let factor = (new / old) as f32;
                act.channel_slice_mut(unit).iter_mut().for_each(|x| *x *= factor);
            } else {
                act.data_mut()[unit] = new as f32;
            }
        }
    }
}
