use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::{resolve_target, Attack, AttackConfig, AttackOutcome};
use crate::engine::{cross_entropy, Model};
use crate::error::{invalid, Result};
use crate::tensor::{argmax, Tensor};

/// Consecutive non-improving rounds before the search gives up.
const STALL_LIMIT: usize = 4;

/// Objective, pixel, value written, resulting logits.
type Move = (f64, usize, f32, Vec<f32>);

pub struct GreedyL0;

impl Attack for GreedyL0 {
    fn name(&self) -> &'static str {
        "greedy_l0"
    }

    fn run(&self, model: &Model, image: &Tensor, cfg: &AttackConfig) -> Result<AttackOutcome> {
        let source = model.predict(image)?;
        let target = resolve_target(model, source, cfg)?;
        let adv = search(model, image, source, target, cfg)?;
        AttackOutcome::new(model, image, adv, source, target)
    }
}

/// Greedy pixel search: each round scores a seeded random subset of the
/// untouched pixels at both extremes (all channels to 0, or all to 1) and
/// commits the single best change if it improves the objective. Stops on
/// success, after `max_pixels` commits, or when progress stalls.
pub fn greedy_l0(model: &Model, image: &Tensor, cfg: &AttackConfig) -> Result<Tensor> {
    let source = model.predict(image)?;
    let target = resolve_target(model, source, cfg)?;
    search(model, image, source, target, cfg)
}

fn search(model: &Model, image: &Tensor, source: usize, target: Option<usize>, cfg: &AttackConfig) -> Result<Tensor> {
    if cfg.candidates == Some(0) {
        return Err(invalid("candidate count must be positive"));
    }
    let (channels, h, w) = image.dims_3d()?;
    let plane = h * w;
    let objective = |logits: &[f32]| match target {
        Some(t) => -cross_entropy(logits, t),
        None => cross_entropy(logits, source),
    };
    let done = |logits: &[f32]| {
        let label = argmax(logits);
        match target {
            Some(t) => label == t,
            None => label != source,
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut x = image.clone();
    let mut touched = vec![false; plane];
    let mut commits = 0;
    let mut stalls = 0;
    let mut logits = model.logits(&x)?;
    let mut score = objective(&logits);

    while commits < cfg.max_pixels && stalls < STALL_LIMIT && !done(&logits) {
        let free: Vec<usize> = (0..plane).filter(|&p| !touched[p]).collect();
        if free.is_empty() {
            break;
        }
        let pool: Vec<usize> = match cfg.candidates {
            Some(k) if k < free.len() => {
                let mut picked: Vec<usize> =
                    rand::seq::index::sample(&mut rng, free.len(), k).into_iter().map(|i| free[i]).collect();
                picked.sort_unstable();
                picked
            }
            _ => free,
        };

        let scored: Vec<Option<Move>> = pool
            .par_iter()
            .flat_map_iter(|&p| [(p, 0.0f32), (p, 1.0f32)])
            .map(|(p, value)| {
                if (0..channels).all(|c| x.data()[c * plane + p] == value) {
                    return Ok(None);
                }
                let mut probe = x.clone();
                for c in 0..channels {
                    probe.data_mut()[c * plane + p] = value;
                }
                let l = model.logits(&probe)?;
                Ok(Some((objective(&l), p, value, l)))
            })
            .collect::<Result<_>>()?;

        // first maximum in (pixel, value) order keeps ties deterministic
        let best = scored.into_iter().flatten().fold(None, |acc: Option<(f64, usize, f32, Vec<f32>)>, cand| match acc {
            Some(a) if a.0 >= cand.0 => Some(a),
            _ => Some(cand),
        });
        match best {
            Some((s, p, value, l)) if s > score => {
                for c in 0..channels {
                    x.data_mut()[c * plane + p] = value;
                }
                touched[p] = true;
                commits += 1;
                stalls = 0;
                score = s;
                logits = l;
            }
            _ => stalls += 1,
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::changed_pixels;
    use crate::engine::{Dense, Layer};

    // Class 1 only responds to pixel 2.
    fn model() -> Model {
        Model::new(
            [1, 2, 2],
            vec![
                Layer::Dense(Dense {
                    out_features: 2,
                    in_features: 4,
                    weights: vec![0.0, 0.0, 0.0, 0.0, 0.1, 0.0, 3.0, 0.0],
                    bias: vec![1.0, 0.0],
                }),
                Layer::Softmax,
            ],
        )
        .unwrap()
    }

    #[test]
    fn zero_budget_is_identity() {
        let m = model();
        let img = Tensor::filled(vec![1, 2, 2], 0.1).unwrap();
        let cfg = AttackConfig { max_pixels: 0, ..Default::default() };
        assert_eq!(greedy_l0(&m, &img, &cfg).unwrap(), img);
    }

    #[test]
    fn finds_the_decisive_pixel() {
        let m = model();
        let img = Tensor::filled(vec![1, 2, 2], 0.1).unwrap();
        let out = GreedyL0.run(&m, &img, &AttackConfig { max_pixels: 3, ..Default::default() }).unwrap();
        assert!(out.success);
        assert_eq!(out.changed_pixels, 1);
        assert_eq!(out.adversarial.get(&[0, 1, 0]), Some(1.0));
    }

    #[test]
    fn respects_pixel_budget_and_is_seeded() {
        let m = model();
        let img = Tensor::filled(vec![1, 2, 2], 0.1).unwrap();
        let cfg = AttackConfig { max_pixels: 1, candidates: Some(1), seed: 7, ..Default::default() };
        let a = greedy_l0(&m, &img, &cfg).unwrap();
        assert!(changed_pixels(&a, &img).unwrap() <= 1);
        assert_eq!(a, greedy_l0(&m, &img, &cfg).unwrap());
    }
}
