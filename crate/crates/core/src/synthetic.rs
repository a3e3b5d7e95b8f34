//! Planted-witness toy models and matching synthetic faces.
//!
//! The model is `conv -> relu -> maxpool -> dense -> relu -> dense -> softmax`.
//! Each attribute region is split into a left and right strip whose
//! brightness (high or low) encodes one bit of the class code. Planted units
//! in the first dense layer average pooled cells lying fully inside one
//! strip, so their wiring to regions is known exactly. Distractor units read
//! every region through large weights that cancel on clean class
//! prototypes; they carry little signal on benign inputs but give attacks a
//! cheap path to the logits.
//!
//! Conv channel 0 is a centre tap (a copy of the input); channel 1 is a
//! weak high-pass texture channel that nothing downstream reads.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::annotation::{Attribute, AttributeAnnotation, Rect};
use crate::engine::{Conv2d, Dense, Layer, Model, NeuronId};
use crate::error::{invalid, Result};
use crate::tensor::Tensor;
use crate::witness::{AnnotatedImage, WitnessSet};

/// Index of the dense layer holding the planted units.
pub const PLANTED_LAYER: usize = 3;

const POOL: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlantedSpec {
    /// `[channels, height, width]`.
    pub input: [usize; 3],
    pub regions: BTreeMap<Attribute, Rect>,
    /// Planted units per attribute, split evenly between the two strips.
    pub planted_units: usize,
    /// Distractor units; they come in pairs with opposite weights.
    pub distractor_units: usize,
    pub class_count: usize,
    pub seed: u64,
    pub high: f32,
    pub low: f32,
    pub background: f32,
    /// Standard deviation of per-pixel noise inside regions.
    pub region_noise: f32,
    /// Upper bound of each image's uniform background noise amplitude.
    pub background_noise: f32,
    /// Norm of the texture part of each distractor's weights.
    pub distractor_gain: f32,
    /// Largest per-attribute strip-contrast weight of a distractor.
    pub distractor_attribute_weight: f32,
    pub distractor_bias: f32,
}

impl Default for PlantedSpec {
    fn default() -> Self {
        let regions = BTreeMap::from([
            (Attribute::LeftEye, Rect::new(2, 2, 4, 4)),
            (Attribute::RightEye, Rect::new(10, 2, 4, 4)),
            (Attribute::Nose, Rect::new(6, 6, 4, 4)),
            (Attribute::Mouth, Rect::new(4, 12, 8, 4)),
        ]);
        Self {
            input: [1, 16, 16],
            regions,
            planted_units: 2,
            distractor_units: 4,
            class_count: 4,
            seed: 7,
            high: 0.9,
            low: 0.5,
            background: 0.15,
            region_noise: 0.01,
            background_noise: 0.04,
            distractor_gain: 6.0,
            distractor_attribute_weight: 6.0,
            distractor_bias: 40.0,
        }
    }
}

/// Pooled cells of one region, split into strips.
#[derive(Debug, Clone)]
struct RegionLayout {
    rect: Rect,
    /// First pixel column of the right strip.
    split_x: usize,
    /// `(row, col)` pooled cells per strip, row-major.
    strips: [Vec<(usize, usize)>; 2],
}

impl PlantedSpec {
    pub fn validate(&self) -> Result<()> {
        let [c, h, w] = self.input;
        if c == 0 || h < POOL || w < POOL {
            return Err(invalid(format!("input {:?} too small", self.input)));
        }
        if self.regions.is_empty() {
            return Err(invalid("no regions"));
        }
        if self.class_count < 2 {
            return Err(invalid("class_count must be at least 2"));
        }
        let codes = 1usize << (self.regions.len() - 1).min(usize::BITS as usize - 1);
        if self.class_count > codes {
            return Err(invalid(format!(
                "{} regions support at most {codes} classes, asked for {}",
                self.regions.len(),
                self.class_count
            )));
        }
        if self.planted_units < 2 || !self.planted_units.is_multiple_of(2) {
            return Err(invalid("planted_units must be even and at least 2"));
        }
        if !self.distractor_units.is_multiple_of(2) {
            return Err(invalid("distractor_units must be even"));
        }
        if !(0.0..=1.0).contains(&self.high) || !(0.0..=1.0).contains(&self.low) || self.high <= self.low {
            return Err(invalid("levels must satisfy 0 <= low < high <= 1"));
        }
        if !(self.region_noise >= 0.0 && self.background_noise >= 0.0) {
            return Err(invalid("noise levels must be non-negative"));
        }
        let rects: Vec<(Attribute, Rect)> = self.regions.iter().map(|(a, r)| (*a, *r)).collect();
        for (i, (a, r)) in rects.iter().enumerate() {
            if !r.fits(w, h) {
                return Err(invalid(format!("{a} region {r:?} outside {w}x{h} input")));
            }
            for (b, s) in &rects[i + 1..] {
                if r.intersects(s) {
                    return Err(invalid(format!("{a} and {b} regions overlap")));
                }
            }
        }
        for a in self.regions.keys() {
            self.layout(*a)?;
        }
        Ok(())
    }

    pub fn attributes(&self) -> impl Iterator<Item = Attribute> + '_ {
        self.regions.keys().copied()
    }

    /// One bit per region; bit set means the left strip is the bright one.
    /// Codes have even parity, so any two differ in at least two regions.
    /// With an even region count they come in complementary pairs.
    pub fn class_code(&self, class: usize) -> Vec<bool> {
        let n = self.regions.len();
        let code = code_table(n).nth(class).expect("class count validated");
        (0..n).map(|bit| code >> (n - 1 - bit) & 1 == 1).collect()
    }

    fn strip_levels(&self, bit: bool) -> [f32; 2] {
        if bit {
            [self.high, self.low]
        } else {
            [self.low, self.high]
        }
    }

    fn layout(&self, attr: Attribute) -> Result<RegionLayout> {
        let rect = *self.regions.get(&attr).ok_or_else(|| invalid(format!("no {attr} region")))?;
        let inside = |start: usize, len: usize| -> Vec<usize> {
            (start.div_ceil(POOL)..).take_while(|&p| POOL * p + POOL <= start + len).collect()
        };
        let rows = inside(rect.y, rect.h);
        let cols = inside(rect.x, rect.w);
        if rows.is_empty() || cols.len() < 2 {
            return Err(invalid(format!("{attr} region {rect:?} covers too few whole pooling cells")));
        }
        let half = cols.len() / 2;
        let cells = |cs: &[usize]| -> Vec<(usize, usize)> {
            rows.iter().flat_map(|&r| cs.iter().map(move |&c| (r, c))).collect()
        };
        let strips = [cells(&cols[..half]), cells(&cols[half..])];
        if strips.iter().any(|s| s.len() < self.planted_units / 2) {
            return Err(invalid(format!("{attr} region has fewer cells than planted units")));
        }
        Ok(RegionLayout { rect, split_x: POOL * cols[half], strips })
    }

    fn pooled_shape(&self) -> (usize, usize) {
        (self.input[1] / POOL, self.input[2] / POOL)
    }
}

fn code_table(n: usize) -> Box<dyn Iterator<Item = usize>> {
    let even = move |c: &usize| c.count_ones().is_multiple_of(2);
    if n.is_multiple_of(2) {
        let all = (1usize << n) - 1;
        let top = 1usize << (n - 1);
        Box::new((1..top).chain([0]).filter(even).flat_map(move |c| [c, all ^ c]))
    } else {
        Box::new((1..1usize << n).chain([0]).filter(even))
    }
}

/// A planted model with the units each attribute is wired to.
#[derive(Debug, Clone)]
pub struct PlantedModel {
    pub model: Model,
    pub ground_truth: Vec<WitnessSet>,
}

impl PlantedModel {
    pub fn witnesses_for(&self, attr: Attribute) -> Option<&WitnessSet> {
        self.ground_truth.iter().find(|s| s.attribute == attr)
    }
}

pub fn make_planted_model(spec: &PlantedSpec) -> Result<PlantedModel> {
    spec.validate()?;
    let [c, _, _] = spec.input;
    let (ph, pw) = spec.pooled_shape();
    let features = 2 * ph * pw;
    let cell_index = |(r, col): (usize, usize)| r * pw + col;

    let mut conv_w = vec![0.0f32; 2 * c * 9];
    for ch in 0..c {
        conv_w[ch * 9 + 4] = 1.0 / c as f32;
        for k in 0..9 {
            let v = if k == 4 { 1.0 } else { -0.125 };
            conv_w[(c + ch) * 9 + k] = 0.25 * v / c as f32;
        }
    }
    let conv = Conv2d {
        out_channels: 2,
        in_channels: c,
        kernel_h: 3,
        kernel_w: 3,
        stride: 1,
        padding: 1,
        weights: conv_w,
        bias: vec![0.0, 0.5],
    };

    let layouts: Vec<(Attribute, RegionLayout)> =
        spec.attributes().map(|a| spec.layout(a).map(|l| (a, l))).collect::<Result<_>>()?;
    let per_strip = spec.planted_units / 2;
    let planted_total = spec.planted_units * layouts.len();
    let hidden = planted_total + spec.distractor_units;

    let mut w1 = vec![0.0f32; hidden * features];
    let mut b1 = vec![0.0f32; hidden];
    let mut ground_truth = Vec::new();
    // (unit, attribute index, strip) of every planted unit
    let mut planted = Vec::new();
    for (ai, (attr, layout)) in layouts.iter().enumerate() {
        let mut ids = Vec::new();
        for (s, strip) in layout.strips.iter().enumerate() {
            for k in 0..per_strip {
                let unit = ai * spec.planted_units + s * per_strip + k;
                let cells: Vec<usize> = strip.iter().skip(k).step_by(per_strip).map(|&cell| cell_index(cell)).collect();
                for &cell in &cells {
                    w1[unit * features + cell] = 1.0 / cells.len() as f32;
                }
                planted.push((unit, ai, s));
                ids.push(NeuronId::new(PLANTED_LAYER, unit));
            }
        }
        ground_truth.push(WitnessSet::new(*attr, ids));
    }

    // Distractors read channel 0 cells of every region. Their weights cancel
    // on every clean class prototype: a per-attribute part along each
    // region's strip contrast, plus a texture part orthogonal to all strips.
    let region_cells: Vec<usize> = layouts
        .iter()
        .flat_map(|(_, l)| l.strips.iter().flatten().map(|&cell| cell_index(cell)))
        .collect();
    let contrasts: Vec<Vec<f64>> = {
        let mut offset = 0;
        layouts
            .iter()
            .map(|(_, l)| {
                let mut e = vec![0.0; region_cells.len()];
                for (s, strip) in l.strips.iter().enumerate() {
                    for _ in strip {
                        e[offset] = if s == 0 { 1.0 } else { -1.0 };
                        offset += 1;
                    }
                }
                e
            })
            .collect()
    };
    let prototypes: Vec<Vec<f64>> = (0..spec.class_count)
        .map(|class| {
            let code = spec.class_code(class);
            layouts
                .iter()
                .zip(&code)
                .flat_map(|((_, l), &bit)| {
                    let levels = spec.strip_levels(bit);
                    l.strips.iter().enumerate().flat_map(move |(s, cells)| cells.iter().map(move |_| levels[s] as f64))
                })
                .collect()
        })
        .collect();
    let mut constraints = prototypes;
    constraints.push(vec![1.0; region_cells.len()]);
    let proto_basis = orthonormal_basis(&constraints);
    constraints.extend(contrasts.iter().cloned());
    let texture_basis = orthonormal_basis(&constraints);
    let code_signs: Vec<Vec<f64>> = (0..spec.class_count)
        .map(|c| spec.class_code(c).into_iter().map(|b| if b { 1.0 } else { -1.0 }).collect())
        .collect();
    let code_basis = orthonormal_basis(&code_signs);

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut columns = Vec::new();
    for pair in 0..spec.distractor_units / 2 {
        let kappa = attribute_weights(layouts.len(), &code_basis, &mut rng)?;
        let mut w: Vec<f64> = vec![0.0; region_cells.len()];
        for (k, e) in kappa.iter().zip(&contrasts) {
            let norm2: f64 = e.iter().map(|x| x * x).sum();
            for (wi, ei) in w.iter_mut().zip(e) {
                *wi += spec.distractor_attribute_weight as f64 * k * ei / norm2;
            }
        }
        remove_span(&mut w, &proto_basis);
        let texture = loop {
            let mut v: Vec<f64> = (0..region_cells.len()).map(|_| rng.sample(StandardNormal)).collect();
            remove_span(&mut v, &texture_basis);
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                break v.into_iter().map(|x| x / norm * spec.distractor_gain as f64).collect::<Vec<_>>();
            }
        };
        for (wi, t) in w.iter_mut().zip(texture) {
            *wi += t;
        }
        let (a, b) = (planted_total + 2 * pair, planted_total + 2 * pair + 1);
        for (&cell, &wi) in region_cells.iter().zip(&w) {
            w1[a * features + cell] = wi as f32;
            w1[b * features + cell] = -wi as f32;
        }
        b1[a] = spec.distractor_bias;
        b1[b] = spec.distractor_bias;
        columns.push(zero_sum_signs(spec.class_count, &mut rng));
    }

    let classes = spec.class_count;
    let mut w2 = vec![0.0f32; classes * hidden];
    for class in 0..classes {
        let code = spec.class_code(class);
        for &(unit, ai, s) in &planted {
            let sign = if code[ai] { 1.0 } else { -1.0 };
            let strip_sign = if s == 0 { 1.0 } else { -1.0 };
            w2[class * hidden + unit] = sign * strip_sign / per_strip as f32;
        }
        for (pair, col) in columns.iter().enumerate() {
            w2[class * hidden + planted_total + 2 * pair] = col[class];
            w2[class * hidden + planted_total + 2 * pair + 1] = -col[class];
        }
    }

    let model = Model::new(
        spec.input,
        vec![
            Layer::Conv2d(conv),
            Layer::Relu,
            Layer::MaxPool { window: POOL, stride: POOL },
            Layer::Dense(Dense { out_features: hidden, in_features: features, weights: w1, bias: b1 }),
            Layer::Relu,
            Layer::Dense(Dense { out_features: classes, in_features: hidden, weights: w2, bias: vec![0.0; classes] }),
            Layer::Softmax,
        ],
    )?;
    Ok(PlantedModel { model, ground_truth })
}

/// A direction in attribute space the class codes cannot see, scaled to a
/// largest component of 1, with every attribute carrying some weight.
fn attribute_weights(n: usize, code_basis: &[Vec<f64>], rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let mut best: Option<(f64, Vec<f64>)> = None;
    for _ in 0..64 {
        let mut k: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        remove_span(&mut k, code_basis);
        let max = k.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if max < 1e-9 {
            continue;
        }
        let ratio = k.iter().fold(f64::INFINITY, |m, v| m.min(v.abs())) / max;
        if best.as_ref().is_none_or(|(r, _)| ratio > *r) {
            best = Some((ratio, k.into_iter().map(|v| v / max).collect()));
        }
        if ratio >= 0.3 {
            break;
        }
    }
    match best {
        Some((ratio, k)) if ratio >= 0.1 => Ok(k),
        _ => Err(invalid("class codes leave distractors no attribute signal; use fewer classes or no distractors")),
    }
}

fn orthonormal_basis(vectors: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for v in vectors {
        let mut u = v.clone();
        remove_span(&mut u, &basis);
        let norm = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            basis.push(u.into_iter().map(|x| x / norm).collect());
        }
    }
    basis
}

fn remove_span(v: &mut [f64], basis: &[Vec<f64>]) {
    for b in basis {
        let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
        for (x, y) in v.iter_mut().zip(b) {
            *x -= dot * y;
        }
    }
}

// +1 for half the classes and -1 for the other half (0 for a leftover).
fn zero_sum_signs(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    use rand::seq::SliceRandom;
    let mut v: Vec<f32> = (0..n).map(|i| if i < n / 2 { 1.0 } else if i < 2 * (n / 2) { -1.0 } else { 0.0 }).collect();
    v.shuffle(rng);
    v
}

/// A generated image with its annotation and class.
#[derive(Debug, Clone)]
pub struct SyntheticFace {
    pub id: String,
    pub class: usize,
    pub image: Tensor,
    pub annotation: AttributeAnnotation,
}

impl SyntheticFace {
    pub fn annotated(&self) -> AnnotatedImage {
        AnnotatedImage { image: self.image.clone(), annotation: self.annotation.clone() }
    }
}

/// `count` faces cycling through the classes. Deterministic per `seed`.
pub fn make_synthetic_faces(spec: &PlantedSpec, count: usize, seed: u64) -> Result<Vec<SyntheticFace>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let class = i % spec.class_count;
            let image = render_face(spec, class, None, &mut rng)?;
            let id = format!("face_{i:04}");
            let mut annotation = AttributeAnnotation::new(&id);
            for (a, r) in &spec.regions {
                annotation = annotation.with_box(*a, *r);
            }
            annotation.label = Some(class);
            Ok(SyntheticFace { id, class, image, annotation })
        })
        .collect()
}

/// Renders a face of `class`; an `omit`ted region is filled with background.
pub fn render_face(spec: &PlantedSpec, class: usize, omit: Option<Attribute>, rng: &mut impl Rng) -> Result<Tensor> {
    if class >= spec.class_count {
        return Err(invalid(format!("class {class} out of range")));
    }
    let [c, h, w] = spec.input;
    let amplitude = rng.random_range(0.0..=spec.background_noise.max(0.0));
    let mut plane: Vec<f32> =
        (0..h * w).map(|_| spec.background + amplitude * rng.random_range(-1.0f32..=1.0)).collect();
    let noise = Normal::new(0.0f32, spec.region_noise).map_err(|e| invalid(e.to_string()))?;
    let code = spec.class_code(class);
    for ((attr, _), &bit) in spec.regions.iter().zip(&code) {
        if omit == Some(*attr) {
            continue;
        }
        let layout = spec.layout(*attr)?;
        let levels = spec.strip_levels(bit);
        let r = layout.rect;
        for y in r.y..r.y + r.h {
            for x in r.x..r.x + r.w {
                let level = levels[usize::from(x >= layout.split_x)];
                plane[y * w + x] = level + noise.sample(rng);
            }
        }
    }
    for v in &mut plane {
        *v = v.clamp(0.0, 1.0);
    }
    Tensor::new(vec![c, h, w], plane.repeat(c))
}
