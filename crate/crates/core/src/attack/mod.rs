//! Adversarial sample generation.
//!
//! Attacks implement [`Attack`] and are looked up by name in an
//! [`AttackRegistry`]. The built-in set covers single-step and iterated
//! gradient-sign attacks driven by finite-difference gradients, and a
//! gradient-free greedy search that rewrites a bounded number of pixels.

mod greedy;
mod sign;

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::engine::Model;
use crate::error::{invalid, Error, Result};
use crate::tensor::Tensor;

pub use greedy::{greedy_l0, GreedyL0};
pub use sign::{bim, fgsm, Bim, Fgsm};

/// Which class a targeted attack aims for, relative to the source label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetSpec {
    /// The lowest class index other than the source.
    First,
    /// The class after the source, wrapping around.
    Next,
    Class(usize),
}

impl TargetSpec {
    pub fn resolve(self, source: usize, classes: usize) -> Result<usize> {
        if classes < 2 {
            return Err(invalid("targeted attacks need at least two classes"));
        }
        let t = match self {
            TargetSpec::First => usize::from(source == 0),
            TargetSpec::Next => (source + 1) % classes,
            TargetSpec::Class(c) => c,
        };
        if t >= classes {
            return Err(invalid(format!("target class {t} out of range")));
        }
        if t == source {
            return Err(invalid(format!("target class {t} equals the source label")));
        }
        Ok(t)
    }
}

impl std::str::FromStr for TargetSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "first" => Ok(TargetSpec::First),
            "next" => Ok(TargetSpec::Next),
            other => other
                .parse()
                .map(TargetSpec::Class)
                .map_err(|_| invalid(format!("unknown target `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    /// Per-pixel L-infinity budget of the gradient-sign attacks.
    pub epsilon: f32,
    pub steps: usize,
    /// Iterated step size; `None` uses `epsilon / 4`.
    pub step_size: Option<f32>,
    /// Pixel budget of the greedy search.
    pub max_pixels: usize,
    /// Candidate pixels scored per greedy iteration; `None` scans all.
    pub candidates: Option<usize>,
    pub target: Option<TargetSpec>,
    pub seed: u64,
    /// Finite-difference step for gradients.
    pub fd_step: f32,
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            epsilon: 0.03,
            steps: 10,
            step_size: None,
            max_pixels: 20,
            candidates: Some(64),
            target: None,
            seed: 0,
            fd_step: 1e-3,
        }
    }
}

impl AttackConfig {
    pub fn step_size(&self) -> f32 {
        self.step_size.unwrap_or(self.epsilon / 4.0)
    }

    fn check_gradient_sign(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(invalid(format!("epsilon must be non-negative, got {}", self.epsilon)));
        }
        if self.steps == 0 {
            return Err(invalid("steps must be at least 1"));
        }
        let a = self.step_size();
        if !(a >= 0.0 && a.is_finite()) {
            return Err(invalid(format!("step size must be non-negative, got {a}")));
        }
        Ok(())
    }
}

/// The adversarial image plus what the harness knows about it.
#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutcome {
    pub adversarial: Tensor,
    pub source_label: usize,
    pub adversarial_label: usize,
    pub target: Option<usize>,
    /// Target reached, or for untargeted attacks the label moved.
    pub success: bool,
    pub linf: f32,
    /// Spatial positions where any channel changed.
    pub changed_pixels: usize,
}

impl AttackOutcome {
    pub fn new(model: &Model, original: &Tensor, adversarial: Tensor, source: usize, target: Option<usize>) -> Result<Self> {
        let adversarial_label = model.predict(&adversarial)?;
        let success = match target {
            Some(t) => adversarial_label == t,
            None => adversarial_label != source,
        };
        Ok(Self {
            linf: linf_distance(original, &adversarial),
            changed_pixels: changed_pixels(original, &adversarial)?,
            adversarial,
            source_label: source,
            adversarial_label,
            target,
            success,
        })
    }
}

pub trait Attack: Send + Sync {
    fn name(&self) -> &'static str;

    fn run(&self, model: &Model, image: &Tensor, cfg: &AttackConfig) -> Result<AttackOutcome>;
}

/// Attacks keyed by name.
pub struct AttackRegistry {
    attacks: BTreeMap<&'static str, Box<dyn Attack>>,
}

impl AttackRegistry {
    pub fn empty() -> Self {
        Self { attacks: BTreeMap::new() }
    }

    pub fn with_builtin() -> Self {
        let mut r = Self::empty();
        r.register(Box::new(Fgsm));
        r.register(Box::new(Bim));
        r.register(Box::new(GreedyL0));
        r
    }

    /// Adds an attack, replacing any previous one with the same name.
    pub fn register(&mut self, attack: Box<dyn Attack>) {
        self.attacks.insert(attack.name(), attack);
    }

    pub fn get(&self, name: &str) -> Result<&dyn Attack> {
        self.attacks.get(name).map(|a| a.as_ref()).ok_or_else(|| Error::UnknownAttack(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &'static str> + '_ {
        self.attacks.keys().copied()
    }
}

impl Default for AttackRegistry {
    fn default() -> Self {
        Self::with_builtin()
    }
}

/// Largest absolute per-element difference, measured in f64.
pub fn linf_distance(a: &Tensor, b: &Tensor) -> f32 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| (x as f64 - y as f64).abs())
        .fold(0.0, f64::max) as f32
}

pub fn changed_pixels(a: &Tensor, b: &Tensor) -> Result<usize> {
    let (c, h, w) = a.dims_3d()?;
    if a.shape() != b.shape() {
        return Err(invalid("shape mismatch"));
    }
    let plane = h * w;
    Ok((0..plane).filter(|&i| (0..c).any(|ch| a.data()[ch * plane + i] != b.data()[ch * plane + i])).count())
}

/// Clamps `x` into `[0, 1]` and into the `eps`-ball around `origin`, with the
/// ball edges nudged inwards wherever f32 rounding of `origin ± eps` would
/// overshoot the budget.
pub fn project_linf(x: &mut Tensor, origin: &Tensor, eps: f32) {
    for (v, &o) in x.data_mut().iter_mut().zip(origin.data()) {
        let mut hi = o + eps;
        while (hi as f64 - o as f64) > eps as f64 {
            hi = hi.next_down();
        }
        let mut lo = o - eps;
        while (o as f64 - lo as f64) > eps as f64 {
            lo = lo.next_up();
        }
        *v = v.clamp(lo, hi).clamp(0.0, 1.0);
    }
}

/// Rounds `x` onto the `levels`-step grid used by 8-bit image files, picking
/// the neighbour towards `origin` whenever plain rounding would leave the
/// `eps`-ball.
pub fn snap_to_grid(x: &Tensor, origin: &Tensor, eps: f32, levels: u32) -> Tensor {
    let n = levels as f64;
    let mut out = x.clone();
    for (v, &o) in out.data_mut().iter_mut().zip(origin.data()) {
        let scaled = *v as f64 * n;
        let nearest = (scaled.round() / n) as f32;
        let toward = (if (o as f64) < *v as f64 { scaled.floor() } else { scaled.ceil() } / n) as f32;
        let within = |q: f32| (q as f64 - o as f64).abs() <= eps as f64;
        *v = if within(nearest) || !within(toward) { nearest } else { toward }.clamp(0.0, 1.0);
    }
    out
}

pub(crate) fn resolve_target(model: &Model, source: usize, cfg: &AttackConfig) -> Result<Option<usize>> {
    cfg.target.map(|t| t.resolve(source, model.class_count())).transpose()
}
