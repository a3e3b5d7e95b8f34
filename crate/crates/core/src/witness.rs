//! Attribute witness extraction by bi-directional mutation reasoning.
//!
//! For each base image the attribute is *substituted* with donor versions
//! (units that move are forward candidates) and *preserved* by copying it
//! into donor images (units that stay put are backward candidates). Each
//! direction is thresholded against the per-layer median, majority-voted
//! across base images and the two voted sets are intersected per layer.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::annotation::{Attribute, AttributeAnnotation};
use crate::engine::{Model, NeuronId};
use crate::error::{invalid, Result};
use crate::mutation::{preserve_attribute, substitute_attribute};
use crate::tensor::Tensor;

/// Per-unit absolute activation change at one site.
#[derive(Debug, Clone, PartialEq)]
pub struct DeltaVector {
    pub layer: usize,
    pub deltas: Vec<f32>,
}

/// An image together with its attribute annotation.
#[derive(Debug, Clone)]
pub struct AnnotatedImage {
    pub image: Tensor,
    pub annotation: AttributeAnnotation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct VoteCount {
    pub substitution: usize,
    pub preservation: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WitnessSet {
    pub attribute: Attribute,
    pub neurons: BTreeSet<NeuronId>,
    /// Per-neuron vote tallies across base images (may be empty when the set
    /// was built by hand).
    #[serde(skip)]
    pub votes: BTreeMap<NeuronId, VoteCount>,
}

impl WitnessSet {
    pub fn new(attribute: Attribute, neurons: impl IntoIterator<Item = NeuronId>) -> Self {
        Self { attribute, neurons: neurons.into_iter().collect(), votes: BTreeMap::new() }
    }

    pub fn units_at(&self, layer: usize) -> BTreeSet<usize> {
        self.neurons.iter().filter(|n| n.layer == layer).map(|n| n.unit).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    #[default]
    Both,
    /// Substitution only.
    As,
    /// Preservation only.
    Ap,
}

impl std::str::FromStr for Direction {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(Direction::Both),
            "as" => Ok(Direction::As),
            "ap" => Ok(Direction::Ap),
            _ => Err(invalid(format!("unknown direction `{s}` (both|as|ap)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExtractionConfig {
    /// A unit survives the vote when it appears in more than this fraction
    /// of the per-base candidate sets.
    pub vote_threshold: f64,
    /// Donors used per base image.
    pub donors_per_base: usize,
}

impl Default for ExtractionConfig {
    fn default() -> Self {
        Self { vote_threshold: 0.5, donors_per_base: 5 }
    }
}

/// Result of [`extract_witnesses`]: the bi-directional set plus the
/// one-directional sets used for ablations.
#[derive(Debug, Clone, PartialEq)]
pub struct Extraction {
    pub witnesses: WitnessSet,
    pub substitution_only: WitnessSet,
    pub preservation_only: WitnessSet,
}

impl Extraction {
    pub fn for_direction(&self, direction: Direction) -> &WitnessSet {
        match direction {
            Direction::Both => &self.witnesses,
            Direction::As => &self.substitution_only,
            Direction::Ap => &self.preservation_only,
        }
    }
}

/// `|summary(base) - summary(mutated)|` for every site of the model.
pub fn activation_deltas(model: &Model, base: &Tensor, mutated: &Tensor) -> Result<Vec<DeltaVector>> {
    let a = model.forward(base)?.record;
    let b = model.forward(mutated)?.record;
    Ok(deltas_between(model, &a, &b))
}

fn deltas_between(
    model: &Model,
    a: &crate::engine::ActivationRecord,
    b: &crate::engine::ActivationRecord,
) -> Vec<DeltaVector> {
    model
        .sites()
        .iter()
        .map(|s| {
            let (x, y) = (a.site_summary(s.layer).unwrap(), b.site_summary(s.layer).unwrap());
            DeltaVector { layer: s.layer, deltas: x.iter().zip(y).map(|(p, q)| (p - q).abs()).collect() }
        })
        .collect()
}

/// Median with the even-length convention of averaging the middle pair.
pub fn median(values: &[f32]) -> f64 {
    assert!(!values.is_empty(), "median of empty slice");
    let mut v: Vec<f64> = values.iter().map(|&x| x as f64).collect();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Units whose delta is strictly above the layer median.
pub fn substitution_candidates(delta: &DeltaVector) -> BTreeSet<usize> {
    if delta.deltas.is_empty() {
        return BTreeSet::new();
    }
    let m = median(&delta.deltas);
    delta.deltas.iter().enumerate().filter(|(_, &d)| d as f64 > m).map(|(j, _)| j).collect()
}

/// Units whose delta is at or below the layer median.
pub fn preservation_candidates(delta: &DeltaVector) -> BTreeSet<usize> {
    if delta.deltas.is_empty() {
        return BTreeSet::new();
    }
    let m = median(&delta.deltas);
    delta.deltas.iter().enumerate().filter(|(_, &d)| d as f64 <= m).map(|(j, _)| j).collect()
}

/// Units present in more than `threshold * sets.len()` of the sets.
pub fn vote(sets: &[BTreeSet<usize>], threshold: f64) -> Result<BTreeSet<usize>> {
    if sets.is_empty() {
        return Err(invalid("vote needs at least one set"));
    }
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(invalid(format!("vote threshold {threshold} outside (0, 1]")));
    }
    let counts = tally(sets);
    let needed = threshold * sets.len() as f64;
    Ok(counts.into_iter().filter(|&(_, c)| c as f64 > needed).map(|(u, _)| u).collect())
}

fn tally(sets: &[BTreeSet<usize>]) -> BTreeMap<usize, usize> {
    let mut counts = BTreeMap::new();
    for s in sets {
        for &u in s {
            *counts.entry(u).or_insert(0) += 1;
        }
    }
    counts
}

// Candidate sets for one base image, keyed by site layer.
struct BaseCandidates {
    substitution: BTreeMap<usize, BTreeSet<usize>>,
    preservation: BTreeMap<usize, BTreeSet<usize>>,
}

fn mean_deltas(per_donor: &[Vec<DeltaVector>]) -> Vec<DeltaVector> {
    let n = per_donor.len() as f64;
    per_donor[0]
        .iter()
        .enumerate()
        .map(|(site, first)| {
            let deltas = (0..first.deltas.len())
                .map(|j| (per_donor.iter().map(|d| d[site].deltas[j] as f64).sum::<f64>() / n) as f32)
                .collect();
            DeltaVector { layer: first.layer, deltas }
        })
        .collect()
}

/// Donors assigned to base `index`: a rotation through the donor pool that
/// skips images sharing the base's id.
fn donors_for<'a>(
    index: usize,
    base: &AnnotatedImage,
    donors: &'a [AnnotatedImage],
    count: usize,
) -> Vec<&'a AnnotatedImage> {
    let eligible: Vec<&AnnotatedImage> =
        donors.iter().filter(|d| d.annotation.image_id != base.annotation.image_id).collect();
    let pool = if eligible.is_empty() { donors.iter().collect() } else { eligible };
    let take = count.min(pool.len()).max(1);
    (0..take).map(|k| pool[(index * take + k) % pool.len()]).collect()
}

fn base_candidates(
    model: &Model,
    index: usize,
    base: &AnnotatedImage,
    donors: &[AnnotatedImage],
    attr: Attribute,
    cfg: &ExtractionConfig,
) -> Result<BaseCandidates> {
    let base_record = model.forward(&base.image)?.record;
    let mut subs = Vec::new();
    let mut pres = Vec::new();
    for donor in donors_for(index, base, donors, cfg.donors_per_base) {
        let substituted = substitute_attribute(&base.image, &base.annotation, &donor.image, &donor.annotation, attr)?;
        let preserved = preserve_attribute(&base.image, &base.annotation, &donor.image, &donor.annotation, attr)?;
        subs.push(deltas_between(model, &base_record, &model.forward(&substituted)?.record));
        pres.push(deltas_between(model, &base_record, &model.forward(&preserved)?.record));
    }
    let substitution = mean_deltas(&subs).iter().map(|d| (d.layer, substitution_candidates(d))).collect();
    let preservation = mean_deltas(&pres).iter().map(|d| (d.layer, preservation_candidates(d))).collect();
    Ok(BaseCandidates { substitution, preservation })
}

/// Extracts the witnesses of `attr` from `model`.
///
/// An empty result is valid and means no unit passed both directions.
pub fn extract_witnesses(
    model: &Model,
    bases: &[AnnotatedImage],
    donors: &[AnnotatedImage],
    attr: Attribute,
    cfg: &ExtractionConfig,
) -> Result<Extraction> {
    if bases.is_empty() || donors.is_empty() {
        return Err(invalid("witness extraction needs at least one base and one donor"));
    }
    if cfg.donors_per_base == 0 {
        return Err(invalid("donors_per_base must be at least 1"));
    }
    let per_base: Vec<BaseCandidates> = bases
        .par_iter()
        .enumerate()
        .map(|(i, b)| base_candidates(model, i, b, donors, attr, cfg))
        .collect::<Result<_>>()?;

    let mut both = BTreeSet::new();
    let mut as_only = BTreeSet::new();
    let mut ap_only = BTreeSet::new();
    let mut votes = BTreeMap::new();
    for site in model.sites() {
        let subs: Vec<BTreeSet<usize>> = per_base.iter().map(|b| b.substitution[&site.layer].clone()).collect();
        let pres: Vec<BTreeSet<usize>> = per_base.iter().map(|b| b.preservation[&site.layer].clone()).collect();
        let voted_as = vote(&subs, cfg.vote_threshold)?;
        let voted_ap = vote(&pres, cfg.vote_threshold)?;
        let (sub_counts, pres_counts) = (tally(&subs), tally(&pres));
        for unit in voted_as.intersection(&voted_ap) {
            let id = NeuronId::new(site.layer, *unit);
            both.insert(id);
            votes.insert(
                id,
                VoteCount { substitution: sub_counts[unit], preservation: pres_counts[unit] },
            );
        }
        as_only.extend(voted_as.iter().map(|&u| NeuronId::new(site.layer, u)));
        ap_only.extend(voted_ap.iter().map(|&u| NeuronId::new(site.layer, u)));
    }
    Ok(Extraction {
        witnesses: WitnessSet { attribute: attr, neurons: both, votes },
        substitution_only: WitnessSet::new(attr, as_only),
        preservation_only: WitnessSet::new(attr, ap_only),
    })
}

/// On-disk witness document:
/// `{"attribute": "nose", "neurons": [[layer, unit], ...], "config": {...}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WitnessFile {
    pub attribute: Attribute,
    pub neurons: Vec<NeuronId>,
    #[serde(default)]
    pub config: serde_json::Value,
}

impl WitnessFile {
    pub fn from_set(set: &WitnessSet, config: serde_json::Value) -> Self {
        Self { attribute: set.attribute, neurons: set.neurons.iter().copied().collect(), config }
    }

    pub fn to_set(&self) -> WitnessSet {
        WitnessSet::new(self.attribute, self.neurons.iter().copied())
    }

    /// Loads a single witness document or a JSON array of them.
    pub fn load_all(path: impl AsRef<Path>) -> Result<Vec<WitnessFile>> {
        let bytes = std::fs::read(path)?;
        let value: serde_json::Value = serde_json::from_slice(&bytes)?;
        Ok(match value {
            serde_json::Value::Array(_) => serde_json::from_value(value)?,
            _ => vec![serde_json::from_value(value)?],
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

/// Union of several attributes' witnesses, grouped by site layer.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct CombinedWitnesses {
    by_layer: BTreeMap<usize, BTreeSet<usize>>,
}

impl CombinedWitnesses {
    pub fn new<'a>(sets: impl IntoIterator<Item = &'a WitnessSet>) -> Self {
        Self::from_neurons(sets.into_iter().flat_map(|s| s.neurons.iter().copied()))
    }

    pub fn from_neurons(neurons: impl IntoIterator<Item = NeuronId>) -> Self {
        let mut by_layer: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
        for n in neurons {
            by_layer.entry(n.layer).or_default().insert(n.unit);
        }
        Self { by_layer }
    }

    pub fn units_at(&self, layer: usize) -> Option<&BTreeSet<usize>> {
        self.by_layer.get(&layer).filter(|s| !s.is_empty())
    }

    pub fn is_empty(&self) -> bool {
        self.by_layer.values().all(BTreeSet::is_empty)
    }

    pub fn len(&self) -> usize {
        self.by_layer.values().map(BTreeSet::len).sum()
    }

    pub fn neurons(&self) -> impl Iterator<Item = NeuronId> + '_ {
        self.by_layer.iter().flat_map(|(&l, units)| units.iter().map(move |&u| NeuronId::new(l, u)))
    }

    pub fn validate(&self, model: &Model) -> Result<()> {
        match self.neurons().find(|&n| !model.is_valid_neuron(n)) {
            Some(n) => Err(invalid(format!("witness neuron ({}, {}) is not a unit of this model", n.layer, n.unit))),
            None => Ok(()),
        }
    }
}
