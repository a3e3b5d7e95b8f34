//! Acceptance suite. Runs every gate in order, prints one PASS/FAIL line per
//! gate and exits non-zero if any gate fails.

use std::collections::BTreeSet;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use witness_guard::annotation::Attribute;
use witness_guard::attack::{changed_pixels, linf_distance, AttackConfig, AttackOutcome, AttackRegistry};
use witness_guard::detector::{evaluate, DetectionMode, Detector, EvaluationTable, LabeledSample};
use witness_guard::engine::{finite_diff_gradient, softmax, Conv2d, Dense, Layer, Loss, Model};
use witness_guard::probe::{compare_witness_probe, ProbeConfig};
use witness_guard::steering::{steered_forward, strengthen, weaken, LayerWitnessStats, SteeringConfig};
use witness_guard::synthetic::{make_planted_model, make_synthetic_faces, PlantedModel, PlantedSpec, PLANTED_LAYER};
use witness_guard::witness::{
    extract_witnesses, preservation_candidates, substitution_candidates, AnnotatedImage, CombinedWitnesses,
    DeltaVector, ExtractionConfig, WitnessSet,
};
use witness_guard::Tensor;

const ORACLE: &str = include_str!("fixtures/steering_oracle.csv");

type Outcome = Result<String, String>;

struct Gate {
    name: &'static str,
    limit: Option<Duration>,
}

/// State shared between gates: the planted model, the witnesses extracted
/// from it and the attack samples.
struct Bench {
    spec: PlantedSpec,
    planted: PlantedModel,
    witnesses: Vec<WitnessSet>,
    benign: Vec<LabeledSample>,
    attacks: Vec<(String, Vec<LabeledSample>)>,
    emitted: Vec<(String, AttackOutcome, Tensor)>,
    max_pixels: usize,
    epsilon: f32,
    full: Option<EvaluationTable>,
}

fn main() {
    let mut failures = 0;
    let mut run = |gate: Gate, f: &mut dyn FnMut() -> Outcome| {
        let start = Instant::now();
        let mut result = f();
        let took = start.elapsed();
        if let (Ok(_), Some(limit)) = (&result, gate.limit) {
            if took > limit {
                result = Err(format!("took {took:.2?}, limit {limit:?}"));
            }
        }
        match result {
            Ok(detail) => println!("PASS  {:<28} {detail} [{took:.2?}]", gate.name),
            Err(reason) => {
                failures += 1;
                println!("FAIL  {:<28} {reason} [{took:.2?}]", gate.name);
            }
        }
    };

    run(Gate { name: "scalar-transforms", limit: Some(Duration::from_secs(1)) }, &mut scalar_transforms);
    run(Gate { name: "median-threshold", limit: Some(Duration::from_secs(10)) }, &mut median_threshold);
    run(Gate { name: "engine-numerics", limit: None }, &mut engine_numerics);

    let spec = PlantedSpec::default();
    let planted = make_planted_model(&spec).expect("default planted model");
    let mut bench = Bench {
        spec,
        planted,
        witnesses: Vec::new(),
        benign: Vec::new(),
        attacks: Vec::new(),
        emitted: Vec::new(),
        max_pixels: 20,
        epsilon: 0.03,
        full: None,
    };

    run(Gate { name: "planted-recovery", limit: Some(Duration::from_secs(120)) }, &mut || {
        planted_recovery(&mut bench)
    });
    run(Gate { name: "neutral-equivalence", limit: None }, &mut || neutral_equivalence(&bench));
    run(Gate { name: "detector-separation", limit: Some(Duration::from_secs(600)) }, &mut || {
        detector_separation(&mut bench)
    });
    run(Gate { name: "ablation-ordering", limit: None }, &mut || ablation_ordering(&bench));
    run(Gate { name: "witness-probe", limit: None }, &mut || witness_probe(&bench));
    run(Gate { name: "attack-validity", limit: None }, &mut || attack_validity(&mut bench));

    println!("acceptance: {} failed", failures);
    if failures > 0 {
        std::process::exit(1);
    }
}

fn rel_err(got: f64, want: f64) -> f64 {
    if want == 0.0 {
        got.abs()
    } else {
        ((got - want) / want).abs()
    }
}

fn scalar_transforms() -> Outcome {
    let mut worst = 0.0f64;
    let mut rows = 0;
    for line in ORACLE.lines().skip(1).filter(|l| !l.trim().is_empty()) {
        let f: Vec<f64> = line.split(',').map(|x| x.parse().map_err(|e| format!("{x}: {e}"))).collect::<Result<_, _>>()?;
        let [v, mu, sigma, min, alpha, beta, eps, want_w, want_s] = f[..] else {
            return Err(format!("malformed oracle row `{line}`"));
        };
        let stats = LayerWitnessStats { layer: 0, mu, sigma, min };
        let ew = rel_err(weaken(v, &stats, alpha), want_w);
        let es = rel_err(strengthen(v, &stats, beta, eps), want_s);
        worst = worst.max(ew).max(es);
        if ew > 1e-6 || es > 1e-6 {
            return Err(format!("row {rows}: weaken err {ew:e}, strengthen err {es:e}"));
        }
        rows += 1;
    }
    if rows != 1000 {
        return Err(format!("oracle has {rows} rows, expected 1000"));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let mu = rng.random_range(0.0..5.0);
        let min = rng.random_range(0.0..=mu);
        let sigma = rng.random_range(1e-3..3.0);
        let eps = rng.random_range(1.0..2.0);
        let stats = LayerWitnessStats { layer: 0, mu, sigma, min };
        if weaken(mu, &stats, 100.0) != mu {
            return Err(format!("weaken({mu}) with mu = {mu} is not the identity"));
        }
        if strengthen(min, &stats, 60.0, eps) != eps * min {
            return Err(format!("strengthen({min}) with min = {min} is not {eps} * v"));
        }
    }
    Ok(format!("{rows} oracle rows, worst relative error {worst:.1e}; boundary identities exact"))
}

fn median_brute(values: &[f32]) -> f64 {
    let mut s: Vec<f64> = values.iter().map(|&v| v as f64).collect();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

fn median_threshold() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut tied = 0;
    for case in 0..10_000 {
        let n = rng.random_range(1..=512);
        // a third of the vectors draw from a tiny value pool to force ties
        let pool = if case % 3 == 0 { Some(rng.random_range(1..=6)) } else { None };
        let deltas: Vec<f32> = (0..n)
            .map(|_| match pool {
                Some(k) => rng.random_range(0..k) as f32 * 0.25,
                None => rng.random_range(0.0f32..4.0),
            })
            .collect();
        let med = median_brute(&deltas);
        let want_as: BTreeSet<usize> = (0..n).filter(|&i| deltas[i] as f64 > med).collect();
        let want_ap: BTreeSet<usize> = (0..n).filter(|&i| deltas[i] as f64 <= med).collect();
        if deltas.iter().any(|&d| d as f64 == med) {
            tied += 1;
        }
        let dv = DeltaVector { layer: 0, deltas };
        let got_as = substitution_candidates(&dv);
        let got_ap = preservation_candidates(&dv);
        if got_as != want_as || got_ap != want_ap {
            return Err(format!("case {case} (n = {n}) disagrees with the sort-based selector"));
        }
        if !got_as.is_disjoint(&got_ap) || got_as.len() + got_ap.len() != n {
            return Err(format!("case {case}: candidate sets overlap or miss units"));
        }
    }
    Ok(format!("10000 vectors agree, {tied} with values tied at the median"))
}

fn engine_numerics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut rand_vec = |n: usize, lo: f32, hi: f32| -> Vec<f32> { (0..n).map(|_| rng.random_range(lo..hi)).collect() };

    // conv: a unit impulse reproduces each (flipped) kernel plus bias
    for k in [1usize, 3, 5] {
        let (cin, cout, size) = (2, 3, 11);
        let weights = rand_vec(cout * cin * k * k, -1.0, 1.0);
        let bias = rand_vec(cout, -0.5, 0.5);
        let conv = Conv2d {
            out_channels: cout,
            in_channels: cin,
            kernel_h: k,
            kernel_w: k,
            stride: 1,
            padding: k / 2,
            weights: weights.clone(),
            bias: bias.clone(),
        };
        let head = Dense { out_features: 1, in_features: cout * size * size, weights: vec![0.0; cout * size * size], bias: vec![0.0] };
        let model = Model::new([cin, size, size], vec![Layer::Conv2d(conv), Layer::Dense(head)]).map_err(|e| e.to_string())?;
        let (cy, cx) = (size / 2, size / 2);
        for ci in 0..cin {
            let mut img = Tensor::zeros(vec![cin, size, size]).unwrap();
            img.set(&[ci, cy, cx], 1.0).unwrap();
            let out = model.forward(&img).map_err(|e| e.to_string())?.record.layers[0].raw.clone();
            for co in 0..cout {
                for dy in 0..k {
                    for dx in 0..k {
                        let want = weights[((co * cin + ci) * k + dy) * k + dx] + bias[co];
                        let got = out.get(&[co, cy + k / 2 - dy, cx + k / 2 - dx]).unwrap();
                        if (got - want).abs() > 1e-6 {
                            return Err(format!("conv k={k} c{ci}->c{co} tap ({dy},{dx}): {got} vs {want}"));
                        }
                    }
                }
            }
        }
    }

    // softmax sums to one, including extreme logits
    let mut worst_sum = 0.0f64;
    for i in 0..1000 {
        let n = 2 + i % 30;
        let scale = [1.0, 10.0, 100.0, 1000.0][i % 4];
        let logits = rand_vec(n, -scale, scale);
        let p = softmax(&logits);
        let s: f64 = p.iter().map(|&x| x as f64).sum();
        worst_sum = worst_sum.max((s - 1.0).abs());
        if (s - 1.0).abs() > 1e-6 || p.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
            return Err(format!("softmax of {n} logits sums to {s}"));
        }
    }

    // maxpool against an explicit window scan
    for (window, stride) in [(2, 2), (3, 2), (2, 1), (3, 3), (8, 1)] {
        let ch = 3;
        let out = (8 - window) / stride + 1;
        let head = Dense { out_features: 1, in_features: ch * out * out, weights: vec![0.0; ch * out * out], bias: vec![0.0] };
        let model = Model::new([ch, 8, 8], vec![Layer::MaxPool { window, stride }, Layer::Dense(head)]).map_err(|e| e.to_string())?;
        for _ in 0..50 {
            let img = Tensor::new(vec![ch, 8, 8], rand_vec(ch * 64, -2.0, 2.0)).unwrap();
            let got = model.forward(&img).map_err(|e| e.to_string())?.record.layers[0].raw.clone();
            for c in 0..ch {
                for y in 0..out {
                    for x in 0..out {
                        let mut window_vals: Vec<f32> = (0..window)
                            .flat_map(|dy| (0..window).map(move |dx| (dy, dx)))
                            .map(|(dy, dx)| img.get(&[c, y * stride + dy, x * stride + dx]).unwrap())
                            .collect();
                        window_vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
                        if got.get(&[c, y, x]) != window_vals.last().copied() {
                            return Err(format!("maxpool {window}/{stride} differs at ({c},{y},{x})"));
                        }
                    }
                }
            }
        }
    }

    // finite differences against the analytic gradient of a linear model
    let mut worst_grad = 0.0f64;
    for _ in 0..20 {
        let (classes, inputs) = (3, 12);
        let w = rand_vec(classes * inputs, -1.0, 1.0);
        let b = rand_vec(classes, -0.5, 0.5);
        let model = Model::new(
            [1, 3, 4],
            vec![Layer::Dense(Dense { out_features: classes, in_features: inputs, weights: w.clone(), bias: b }), Layer::Softmax],
        )
        .map_err(|e| e.to_string())?;
        let img = Tensor::new(vec![1, 3, 4], rand_vec(inputs, 0.0, 1.0)).unwrap();
        let p = model.forward(&img).map_err(|e| e.to_string())?.probabilities;
        for class in 0..classes {
            let logit = finite_diff_gradient(&model, &img, Loss::Logit { class }, 1e-3).map_err(|e| e.to_string())?;
            let ce = finite_diff_gradient(&model, &img, Loss::CrossEntropy { class }, 1e-3).map_err(|e| e.to_string())?;
            for i in 0..inputs {
                let want_logit = w[class * inputs + i] as f64;
                let want_ce: f64 = (0..classes)
                    .map(|k| (p[k] as f64 - f64::from(u8::from(k == class))) * w[k * inputs + i] as f64)
                    .sum();
                let e = (logit.data()[i] as f64 - want_logit).abs().max((ce.data()[i] as f64 - want_ce).abs());
                worst_grad = worst_grad.max(e);
                if e > 1e-3 {
                    return Err(format!("gradient error {e:e} at input {i}, class {class}"));
                }
            }
        }
    }
    Ok(format!(
        "conv impulse taps exact, softmax |sum-1| <= {worst_sum:.1e}, maxpool exact, gradient error <= {worst_grad:.1e}"
    ))
}

fn planted_recovery(bench: &mut Bench) -> Outcome {
    let faces = make_synthetic_faces(&bench.spec, 40, 1).map_err(|e| e.to_string())?;
    let annotated: Vec<AnnotatedImage> = faces.iter().map(|f| f.annotated()).collect();
    let cfg = ExtractionConfig { donors_per_base: 5, ..Default::default() };
    let mut problems = Vec::new();
    for attr in Attribute::ALL {
        let ex = extract_witnesses(&bench.planted.model, &annotated[..10], &annotated[10..], attr, &cfg)
            .map_err(|e| e.to_string())?;
        let truth = bench.planted.witnesses_for(attr).ok_or(format!("no planted units for {attr}"))?;
        let got = ex.witnesses.units_at(PLANTED_LAYER);
        let want = truth.units_at(PLANTED_LAYER);
        let hit = got.intersection(&want).count();
        let precision = if got.is_empty() { 0.0 } else { hit as f64 / got.len() as f64 };
        let recall = hit as f64 / want.len() as f64;
        if precision != 1.0 || recall != 1.0 {
            problems.push(format!("{attr}: precision {precision:.2} recall {recall:.2} (got {got:?}, want {want:?})"));
        }
        bench.witnesses.push(ex.witnesses);
    }
    if problems.is_empty() {
        Ok("precision = recall = 1.0 for all 4 attributes (10 bases x 5 donors)".into())
    } else {
        Err(problems.join("; "))
    }
}

fn neutral_equivalence(bench: &Bench) -> Outcome {
    let model = &bench.planted.model;
    let empty = CombinedWitnesses::new([]);
    let cfg = SteeringConfig { pool_margin: 0, ..SteeringConfig::default() };
    let shape = model.input_shape();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for i in 0..100 {
        let data = (0..shape.iter().product()).map(|_| rng.random_range(0.0f32..=1.0)).collect();
        let img = Tensor::new(shape.to_vec(), data).unwrap();
        let plain = model.forward(&img).map_err(|e| e.to_string())?;
        let steered = steered_forward(model, &empty, &cfg, &img).map_err(|e| e.to_string())?;
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        if bits(plain.logits.data()) != bits(steered.logits.data())
            || bits(&plain.probabilities) != bits(&steered.probabilities)
            || plain.record != steered.record
        {
            return Err(format!("input {i} differs"));
        }
    }
    Ok("100 random inputs bit-identical (logits, probabilities, activations)".into())
}

fn detector_separation(bench: &mut Bench) -> Outcome {
    if bench.witnesses.is_empty() {
        return Err("no witnesses extracted".into());
    }
    let model = &bench.planted.model;
    bench.benign = make_synthetic_faces(&bench.spec, 100, 99)
        .map_err(|e| e.to_string())?
        .into_iter()
        .map(|f| LabeledSample { id: f.id, image: f.image, true_label: f.class })
        .collect();

    let pool = make_synthetic_faces(&bench.spec, 400, 5).map_err(|e| e.to_string())?;
    let registry = AttackRegistry::with_builtin();
    for kind in ["greedy_l0", "bim"] {
        let attack = registry.get(kind).map_err(|e| e.to_string())?;
        let mut successes = Vec::new();
        for (i, face) in pool.iter().enumerate() {
            if successes.len() == 100 {
                break;
            }
            if model.predict(&face.image).map_err(|e| e.to_string())? != face.class {
                continue;
            }
            let cfg = AttackConfig { epsilon: bench.epsilon, max_pixels: bench.max_pixels, seed: i as u64, ..Default::default() };
            let out = attack.run(model, &face.image, &cfg).map_err(|e| e.to_string())?;
            if out.success {
                successes.push(LabeledSample {
                    id: format!("{kind}_{i:04}"),
                    image: out.adversarial.clone(),
                    true_label: face.class,
                });
            }
            bench.emitted.push((kind.to_string(), out, face.image.clone()));
        }
        if successes.len() < 100 {
            return Err(format!("{kind}: only {} successful samples from the pool", successes.len()));
        }
        bench.attacks.push((kind.to_string(), successes));
    }

    let witnesses = CombinedWitnesses::new(&bench.witnesses);
    let detector =
        Detector::new(model, &witnesses, SteeringConfig::default(), DetectionMode::Full).map_err(|e| e.to_string())?;
    let table = evaluate(&detector, &bench.benign, &bench.attacks).map_err(|e| e.to_string())?;
    let fpr = table.false_positive.rate().unwrap_or(1.0);
    let tpr = table.pooled_detection().rate().unwrap_or(0.0);
    bench.full = Some(table);
    let detail = format!("TPR {tpr:.3}, FPR {fpr:.3}, TPR - FPR {:.3}", tpr - fpr);
    if tpr - fpr >= 0.4 && fpr <= 0.15 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn ablation_ordering(bench: &Bench) -> Outcome {
    let full = bench.full.as_ref().ok_or("full-mode evaluation missing")?;
    let witnesses = CombinedWitnesses::new(&bench.witnesses);
    let detector = Detector::new(&bench.planted.model, &witnesses, SteeringConfig::default(), DetectionMode::StrengthenOnly)
        .map_err(|e| e.to_string())?;
    let table = evaluate(&detector, &bench.benign, &bench.attacks).map_err(|e| e.to_string())?;
    let stn = table.false_positive.rate().unwrap_or(1.0);
    let all = full.false_positive.rate().unwrap_or(0.0);
    let detail = format!("strengthen_only FPR {stn:.3}, full FPR {all:.3}");
    if stn <= all {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn witness_probe(bench: &Bench) -> Outcome {
    if bench.witnesses.is_empty() {
        return Err("no witnesses extracted".into());
    }
    let mut lines = Vec::new();
    let mut wins = 0;
    for seed in 0..3 {
        let mut ok = true;
        let mut parts = Vec::new();
        for set in &bench.witnesses {
            let c = compare_witness_probe(&bench.planted.model, &bench.spec, set, 200, seed, &ProbeConfig::default())
                .map_err(|e| e.to_string())?;
            ok &= c.witness_accuracy >= c.random_accuracy;
            parts.push(format!("{} {:.2}/{:.2}", c.attribute, c.witness_accuracy, c.random_accuracy));
        }
        wins += usize::from(ok);
        lines.push(format!("seed {seed}: {}", parts.join(" ")));
    }
    let detail = format!("{wins}/3 seeds, witness/random accuracy: {}", lines.join("; "));
    if wins == 3 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn attack_validity(bench: &mut Bench) -> Outcome {
    let model = &bench.planted.model;
    let fgsm = AttackRegistry::with_builtin();
    let fgsm = fgsm.get("fgsm").map_err(|e| e.to_string())?;
    for face in make_synthetic_faces(&bench.spec, 100, 23).map_err(|e| e.to_string())? {
        let cfg = AttackConfig { epsilon: bench.epsilon, ..Default::default() };
        let out = fgsm.run(model, &face.image, &cfg).map_err(|e| e.to_string())?;
        bench.emitted.push(("fgsm".into(), out, face.image));
    }
    if bench.emitted.is_empty() {
        return Err("no samples emitted".into());
    }
    let mut counts = std::collections::BTreeMap::<&str, usize>::new();
    for (kind, out, original) in &bench.emitted {
        let img = &out.adversarial;
        if img.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(format!("{kind} sample leaves [0, 1]"));
        }
        match kind.as_str() {
            "fgsm" | "bim" => {
                let d = linf_distance(original, img);
                if d as f64 > bench.epsilon as f64 || d != out.linf {
                    return Err(format!("{kind} sample has L-inf {d} > {}", bench.epsilon));
                }
            }
            _ => {
                let n = changed_pixels(original, img).map_err(|e| e.to_string())?;
                if n > bench.max_pixels {
                    return Err(format!("{kind} sample changes {n} > {} pixels", bench.max_pixels));
                }
            }
        }
        *counts.entry(kind.as_str()).or_default() += 1;
    }
    Ok(format!("all emitted samples within budget and [0, 1]: {counts:?}"))
}
