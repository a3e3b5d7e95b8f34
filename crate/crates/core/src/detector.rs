//! Side-by-side consistency check between the plain and the steered model,
//! and batch evaluation into true/false positive rates.

use std::collections::BTreeMap;
use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::Model;
use crate::error::{invalid, Result};
use crate::steering::{SteeredModel, SteeringConfig};
use crate::tensor::Tensor;
use crate::witness::CombinedWitnesses;

/// Which steering mechanisms are active. `AsOnly` and `ApOnly` run full
/// steering and only label a witness set built from one direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DetectionMode {
    #[default]
    Full,
    AsOnly,
    ApOnly,
    WeakenOnly,
    StrengthenOnly,
}

impl DetectionMode {
    pub const ALL: [DetectionMode; 5] = [
        DetectionMode::Full,
        DetectionMode::AsOnly,
        DetectionMode::ApOnly,
        DetectionMode::WeakenOnly,
        DetectionMode::StrengthenOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DetectionMode::Full => "full",
            DetectionMode::AsOnly => "as_only",
            DetectionMode::ApOnly => "ap_only",
            DetectionMode::WeakenOnly => "weaken_only",
            DetectionMode::StrengthenOnly => "strengthen_only",
        }
    }

    /// Applies the mode's mechanism switches on top of `cfg`. Weakening
    /// includes the conserving transform.
    pub fn apply(self, cfg: SteeringConfig) -> SteeringConfig {
        match self {
            DetectionMode::Full | DetectionMode::AsOnly | DetectionMode::ApOnly => cfg,
            DetectionMode::WeakenOnly => SteeringConfig { strengthen: false, ..cfg },
            DetectionMode::StrengthenOnly => SteeringConfig { weaken: false, conserve: false, ..cfg },
        }
    }
}

impl fmt::Display for DetectionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for DetectionMode {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        DetectionMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| invalid(format!("unknown detection mode `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub input_id: String,
    pub original_label: usize,
    pub steered_label: usize,
    pub is_adversarial: bool,
    pub mode: DetectionMode,
}

pub struct Detector<'a> {
    model: &'a Model,
    steered: SteeredModel<'a>,
    mode: DetectionMode,
}

impl<'a> Detector<'a> {
    pub fn new(
        model: &'a Model,
        witnesses: &'a CombinedWitnesses,
        cfg: SteeringConfig,
        mode: DetectionMode,
    ) -> Result<Self> {
        let steered = SteeredModel::new(model, witnesses, mode.apply(cfg))?;
        Ok(Self { model, steered, mode })
    }

    pub fn detect(&self, input_id: &str, image: &Tensor) -> Result<DetectionReport> {
        let original_label = self.model.predict(image)?;
        let steered_label = self.steered.predict(image)?;
        Ok(DetectionReport {
            input_id: input_id.to_string(),
            original_label,
            steered_label,
            is_adversarial: original_label != steered_label,
            mode: self.mode,
        })
    }

    pub fn mode(&self) -> DetectionMode {
        self.mode
    }
}

/// An input with its ground-truth class.
#[derive(Debug, Clone)]
pub struct LabeledSample {
    pub id: String,
    pub image: Tensor,
    pub true_label: usize,
}

/// Flagged fraction with the counts it came from. `rate` is `None` when
/// `total` is zero.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RateCount {
    pub flagged: usize,
    pub total: usize,
}

impl RateCount {
    pub fn rate(&self) -> Option<f64> {
        (self.total > 0).then(|| self.flagged as f64 / self.total as f64)
    }
}

impl fmt::Display for RateCount {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.rate() {
            Some(r) => write!(f, "{r:.3} ({}/{})", self.flagged, self.total),
            None => write!(f, "n/a (0/0)"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackRow {
    pub attack: String,
    /// Samples supplied for the attack.
    pub samples: usize,
    /// Among samples that fooled the original model.
    pub detection: RateCount,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputRow {
    pub set: String,
    pub input_id: String,
    pub true_label: usize,
    pub original_label: usize,
    pub steered_label: usize,
    pub attack_succeeded: bool,
    pub flagged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationTable {
    pub mode: DetectionMode,
    pub false_positive: RateCount,
    pub attacks: Vec<AttackRow>,
    #[serde(skip)]
    pub rows: Vec<InputRow>,
}

impl EvaluationTable {
    /// Detection over the union of all attack sets.
    pub fn pooled_detection(&self) -> RateCount {
        self.attacks.iter().fold(RateCount { flagged: 0, total: 0 }, |acc, r| RateCount {
            flagged: acc.flagged + r.detection.flagged,
            total: acc.total + r.detection.total,
        })
    }

    /// Per-input rows as CSV.
    pub fn rows_csv(&self) -> String {
        let mut out = String::from("set,input_id,true_label,original_label,steered_label,attack_succeeded,flagged\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.set, r.input_id, r.true_label, r.original_label, r.steered_label, r.attack_succeeded, r.flagged
            ));
        }
        out
    }
}

impl fmt::Display for EvaluationTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "mode: {}", self.mode)?;
        writeln!(f, "{:<24} {}", "benign FPR", self.false_positive)?;
        for row in &self.attacks {
            writeln!(f, "{:<24} {}", format!("{} TPR", row.attack), row.detection)?;
        }
        write!(f, "{:<24} {}", "pooled TPR", self.pooled_detection())
    }
}

/// Runs the detector over a benign set and named attack sets.
///
/// True positive rates only count attack samples the original model
/// misclassifies; a set with no such samples reports `n/a`.
pub fn evaluate(
    detector: &Detector<'_>,
    benign: &[LabeledSample],
    attacks: &[(String, Vec<LabeledSample>)],
) -> Result<EvaluationTable> {
    if benign.is_empty() {
        return Err(invalid("benign set is empty"));
    }
    let run = |set: &str, samples: &[LabeledSample]| -> Result<Vec<InputRow>> {
        samples
            .par_iter()
            .map(|s| {
                let r = detector.detect(&s.id, &s.image)?;
                Ok(InputRow {
                    set: set.to_string(),
                    input_id: s.id.clone(),
                    true_label: s.true_label,
                    original_label: r.original_label,
                    steered_label: r.steered_label,
                    attack_succeeded: r.original_label != s.true_label,
                    flagged: r.is_adversarial,
                })
            })
            .collect()
    };

    let mut rows = run("benign", benign)?;
    let false_positive = RateCount { flagged: rows.iter().filter(|r| r.flagged).count(), total: rows.len() };

    let mut seen = BTreeMap::new();
    let mut attack_rows = Vec::new();
    for (name, samples) in attacks {
        if samples.is_empty() {
            return Err(invalid(format!("attack set `{name}` is empty")));
        }
        if seen.insert(name.clone(), ()).is_some() {
            return Err(invalid(format!("attack set `{name}` given twice")));
        }
        let set_rows = run(name, samples)?;
        let successful: Vec<&InputRow> = set_rows.iter().filter(|r| r.attack_succeeded).collect();
        attack_rows.push(AttackRow {
            attack: name.clone(),
            samples: samples.len(),
            detection: RateCount {
                flagged: successful.iter().filter(|r| r.flagged).count(),
                total: successful.len(),
            },
        });
        rows.extend(set_rows);
    }
    Ok(EvaluationTable { mode: detector.mode(), false_positive, attacks: attack_rows, rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::engine::{Dense, Layer, NeuronId};

    fn model() -> Model {
        Model::new(
            [1, 1, 4],
            vec![
                Layer::Dense(Dense {
                    out_features: 4,
                    in_features: 4,
                    weights: vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0],
                    bias: vec![0.0; 4],
                }),
                Layer::Relu,
                Layer::Dense(Dense {
                    out_features: 2,
                    in_features: 4,
                    weights: vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0],
                    bias: vec![0.0; 2],
                }),
                Layer::Softmax,
            ],
        )
        .unwrap()
    }

    fn sample(id: &str, v: [f32; 4], label: usize) -> LabeledSample {
        LabeledSample { id: id.into(), image: Tensor::new(vec![1, 1, 4], v.to_vec()).unwrap(), true_label: label }
    }

    #[test]
    fn empty_witnesses_never_flag() {
        let m = model();
        let w = CombinedWitnesses::default();
        let d = Detector::new(&m, &w, SteeringConfig { pool_margin: 0, ..Default::default() }, DetectionMode::Full)
            .unwrap();
        for v in [[1.0, 0.0, 0.0, 2.0], [0.3, 0.2, 0.1, 0.0]] {
            assert!(!d.detect("x", &Tensor::new(vec![1, 1, 4], v.to_vec()).unwrap()).unwrap().is_adversarial);
        }
    }

    #[test]
    fn strong_non_witness_gets_weakened_and_flagged() {
        // Unit 0 is the witness for class 0; unit 3 (class 1) dominates the
        // plain model but far exceeds the witness mean, so weakening drops it.
        let m = model();
        let w = CombinedWitnesses::from_neurons([NeuronId::new(0, 0), NeuronId::new(0, 1)]);
        let d = Detector::new(&m, &w, SteeringConfig::default(), DetectionMode::Full).unwrap();
        let r = d.detect("adv", &Tensor::new(vec![1, 1, 4], vec![1.0, 0.0, 0.0, 400.0]).unwrap()).unwrap();
        assert_eq!(r.original_label, 1);
        assert_eq!(r.steered_label, 0);
        assert!(r.is_adversarial);
    }

    #[test]
    fn evaluation_counts() {
        let m = model();
        let w = CombinedWitnesses::from_neurons([NeuronId::new(0, 0), NeuronId::new(0, 1)]);
        let d = Detector::new(&m, &w, SteeringConfig::default(), DetectionMode::Full).unwrap();
        let benign = vec![sample("b0", [2.0, 1.0, 0.0, 0.0], 0), sample("b1", [0.0, 2.0, 0.0, 0.0], 1)];
        let attacks = vec![(
            "toy".to_string(),
            vec![
                sample("a0", [1.0, 0.0, 0.0, 400.0], 0), // fools the model, gets flagged
                sample("a1", [2.0, 0.0, 0.0, 0.0], 0),   // attack failed: excluded
            ],
        )];
        let t = evaluate(&d, &benign, &attacks).unwrap();
        assert_eq!(t.false_positive, RateCount { flagged: 0, total: 2 });
        assert_eq!(t.attacks[0].detection, RateCount { flagged: 1, total: 1 });
        assert_eq!(t.attacks[0].samples, 2);
        assert_eq!(t.rows.len(), 4);
        assert!(t.rows_csv().starts_with("set,input_id"));
        assert!(t.to_string().contains("toy TPR"));

        let none = vec![("none".to_string(), vec![sample("a1", [2.0, 0.0, 0.0, 0.0], 0)])];
        let t = evaluate(&d, &benign, &none).unwrap();
        assert_eq!(t.attacks[0].detection.rate(), None);
    }

    #[test]
    fn modes_switch_mechanisms() {
        let base = SteeringConfig::default();
        let w = DetectionMode::WeakenOnly.apply(base);
        assert!(!w.strengthen && w.weaken && w.conserve);
        let s = DetectionMode::StrengthenOnly.apply(base);
        assert!(s.strengthen && !s.weaken && !s.conserve);
        assert_eq!("ap_only".parse::<DetectionMode>().unwrap(), DetectionMode::ApOnly);
    }
}
