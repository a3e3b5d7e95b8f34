mod dataset;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;
use witness_guard::annotation::{Attribute, AttributeAnnotation};
use witness_guard::attack::{snap_to_grid, AttackConfig, AttackOutcome, AttackRegistry, TargetSpec};
use witness_guard::detector::{evaluate, DetectionMode, Detector, EvaluationTable};
use witness_guard::engine::{load_model, save_model, Model};
use witness_guard::image_io::{load_image, save_image};
use witness_guard::mutation::{preserve_attribute, substitute_attribute};
use witness_guard::steering::{SteeredModel, SteeringConfig};
use witness_guard::synthetic::{make_planted_model, make_synthetic_faces, PlantedSpec};
use witness_guard::witness::{extract_witnesses, CombinedWitnesses, Direction, ExtractionConfig, WitnessFile};

use dataset::{load_annotated, load_input, load_labeled};

const EXIT_ADVERSARIAL: u8 = 3;

#[derive(Parser)]
#[command(name = "witness-guard", version, about = "Attribute-witness adversarial input detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a model on one image and print its prediction.
    Forward {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        /// Write per-layer unit summaries as JSON.
        #[arg(long)]
        dump_activations: Option<PathBuf>,
    },
    /// Substitute or preserve one attribute between two annotated images.
    Mutate {
        #[arg(long, value_enum)]
        mode: MutateMode,
        #[arg(long)]
        attr: Attribute,
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        donor: PathBuf,
        #[arg(long)]
        ann_base: PathBuf,
        #[arg(long)]
        ann_donor: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Find the witness neurons of one attribute.
    ExtractWitnesses {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        bases: PathBuf,
        #[arg(long)]
        donors: PathBuf,
        #[arg(long)]
        attr: Attribute,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "both")]
        direction: Direction,
        #[arg(long, default_value_t = 0.5)]
        vote_threshold: f64,
        #[arg(long, default_value_t = 5)]
        donors_per_base: usize,
    },
    /// Run the plain and the attribute-steered model on one image.
    Steer {
        #[command(flatten)]
        common: SteerArgs,
        #[arg(long)]
        image: PathBuf,
    },
    /// Flag one image; exits 0 when benign and 3 when adversarial.
    Detect {
        #[command(flatten)]
        common: SteerArgs,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value = "full")]
        mode: DetectionMode,
    },
    /// Measure detection rates over benign and attack directories.
    Eval {
        #[command(flatten)]
        common: SteerArgs,
        #[arg(long)]
        benign: PathBuf,
        /// Attack directories, one set each.
        #[arg(long, value_delimiter = ',', required = true)]
        attacks: Vec<PathBuf>,
        /// Comma-separated detection modes, or `all`.
        #[arg(long, default_value = "full")]
        mode: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate one adversarial sample plus a JSON sidecar.
    GenAttack {
        #[arg(long)]
        kind: String,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long, default_value_t = 0.03)]
        eps: f32,
        #[arg(long, default_value_t = 10)]
        steps: usize,
        #[arg(long)]
        step_size: Option<f32>,
        #[arg(long, default_value_t = 20)]
        max_pixels: usize,
        /// Greedy candidates per round; 0 scans every pixel.
        #[arg(long, default_value_t = 64)]
        candidates: usize,
        #[arg(long)]
        target: Option<TargetSpec>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Ground-truth class of the clean image; defaults to its prediction.
        #[arg(long)]
        label: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write a planted model, synthetic faces and their ground truth.
    MakeSynthetic {
        /// TOML planted-model spec; defaults apply to missing fields.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 100)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum MutateMode {
    Substitute,
    Preserve,
}

#[derive(Args)]
struct SteerArgs {
    #[arg(long)]
    model: PathBuf,
    /// Witness files (comma-separated or repeated); their sets are merged.
    #[arg(long, value_delimiter = ',', required = true)]
    witnesses: Vec<PathBuf>,
    /// TOML file with steering parameters.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    pool_margin: Option<usize>,
    #[arg(long)]
    sigma_floor: Option<f64>,
    #[arg(long)]
    no_strengthen: bool,
    #[arg(long)]
    no_weaken: bool,
    #[arg(long)]
    no_conserve: bool,
}

impl SteerArgs {
    fn steering_config(&self) -> Result<SteeringConfig> {
        let mut cfg = match &self.config {
            Some(p) => toml::from_str(&std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?)
                .with_context(|| format!("parsing {}", p.display()))?,
            None => SteeringConfig::default(),
        };
        if let Some(v) = self.alpha {
            cfg.alpha = v;
        }
        if let Some(v) = self.beta {
            cfg.beta = v;
        }
        if let Some(v) = self.epsilon {
            cfg.epsilon = v;
        }
        if let Some(v) = self.pool_margin {
            cfg.pool_margin = v;
        }
        if let Some(v) = self.sigma_floor {
            cfg.sigma_floor = v;
        }
        cfg.strengthen &= !self.no_strengthen;
        cfg.weaken &= !self.no_weaken;
        cfg.conserve &= !self.no_conserve;
        cfg.validate()?;
        Ok(cfg)
    }

    fn load(&self) -> Result<(Model, CombinedWitnesses, SteeringConfig)> {
        let model = open_model(&self.model)?;
        let mut sets = Vec::new();
        for p in &self.witnesses {
            let files = WitnessFile::load_all(p).with_context(|| format!("loading witnesses {}", p.display()))?;
            sets.extend(files.iter().map(WitnessFile::to_set));
        }
        let witnesses = CombinedWitnesses::new(&sets);
        witnesses.validate(&model)?;
        Ok((model, witnesses, self.steering_config()?))
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn open_model(path: &Path) -> Result<Model> {
    load_model(path).with_context(|| format!("loading model {}", path.display()))
}

fn print_json(value: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_vec_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Forward { model, image, dump_activations } => {
            let model = open_model(&model)?;
            let input = load_input(&image, model.input_shape()[0])?;
            let out = model.forward(&input)?;
            if let Some(path) = dump_activations {
                let layers: Vec<_> = out
                    .record
                    .layers
                    .iter()
                    .map(|l| json!({"layer": l.layer, "kind": l.kind.name(), "shape": l.raw.shape(), "summary": l.summary}))
                    .collect();
                write_json(&path, &layers)?;
            }
            print_json(&json!({
                "label": out.label,
                "probabilities": out.probabilities,
                "logits": out.logits.data(),
            }))?;
        }
        Command::Mutate { mode, attr, base, donor, ann_base, ann_donor, out } => {
            let load_ann =
                |p: &Path| AttributeAnnotation::load(p).with_context(|| format!("loading annotation {}", p.display()));
            let (b, d) = (load_image(&base)?, load_image(&donor)?);
            let (ba, da) = (load_ann(&ann_base)?, load_ann(&ann_donor)?);
            let mutated = match mode {
                MutateMode::Substitute => substitute_attribute(&b, &ba, &d, &da, attr)?,
                MutateMode::Preserve => preserve_attribute(&b, &ba, &d, &da, attr)?,
            };
            save_image(&mutated, &out)?;
        }
        Command::ExtractWitnesses { model, bases, donors, attr, out, direction, vote_threshold, donors_per_base } => {
            let model = open_model(&model)?;
            let channels = model.input_shape()[0];
            let base_set = load_annotated(&bases, channels)?;
            let donor_set = load_annotated(&donors, channels)?;
            let cfg = ExtractionConfig { vote_threshold, donors_per_base };
            let extraction = extract_witnesses(&model, &base_set, &donor_set, attr, &cfg)?;
            let set = extraction.for_direction(direction);
            let meta = json!({
                "direction": direction,
                "vote_threshold": vote_threshold,
                "donors_per_base": donors_per_base,
                "bases": base_set.len(),
                "donors": donor_set.len(),
            });
            WitnessFile::from_set(set, meta).save(&out)?;
            eprintln!("{attr}: {} witness neurons", set.neurons.len());
        }
        Command::Steer { common, image } => {
            let (model, witnesses, cfg) = common.load()?;
            let input = load_input(&image, model.input_shape()[0])?;
            let plain = model.forward(&input)?;
            let steered = SteeredModel::new(&model, &witnesses, cfg)?.forward(&input)?;
            print_json(&json!({
                "original_label": plain.label,
                "steered_label": steered.label,
                "original_probabilities": plain.probabilities,
                "steered_probabilities": steered.probabilities,
                "config": cfg,
            }))?;
        }
        Command::Detect { common, image, mode } => {
            let (model, witnesses, cfg) = common.load()?;
            let input = load_input(&image, model.input_shape()[0])?;
            let id = image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let report = Detector::new(&model, &witnesses, cfg, mode)?.detect(&id, &input)?;
            print_json(&report)?;
            if report.is_adversarial {
                return Ok(ExitCode::from(EXIT_ADVERSARIAL));
            }
        }
        Command::Eval { common, benign, attacks, mode, out } => {
            let (model, witnesses, cfg) = common.load()?;
            let modes = parse_modes(&mode)?;
            let channels = model.input_shape()[0];
            let benign_set = load_labeled(&benign, channels)?;
            let attack_sets = attacks
                .iter()
                .map(|dir| {
                    let name = dir.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
                    Ok((name, load_labeled(dir, channels)?))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut tables: Vec<EvaluationTable> = Vec::new();
            for m in modes {
                let detector = Detector::new(&model, &witnesses, cfg, m)?;
                let table = evaluate(&detector, &benign_set, &attack_sets)?;
                let csv = out.with_extension(format!("{m}.csv"));
                std::fs::write(&csv, table.rows_csv()).with_context(|| format!("writing {}", csv.display()))?;
                println!("{table}\n");
                tables.push(table);
            }
            write_json(&out, &json!({ "config": cfg, "tables": tables }))?;
        }
        Command::GenAttack {
            kind,
            model,
            image,
            eps,
            steps,
            step_size,
            max_pixels,
            candidates,
            target,
            seed,
            label,
            out,
        } => {
            let model = open_model(&model)?;
            let input = load_input(&image, model.input_shape()[0])?;
            let cfg = AttackConfig {
                epsilon: eps,
                steps,
                step_size,
                max_pixels,
                candidates: (candidates > 0).then_some(candidates),
                target,
                seed,
                ..Default::default()
            };
            let registry = AttackRegistry::with_builtin();
            let outcome = registry.get(&kind)?.run(&model, &input, &cfg)?;
            // 8-bit files cannot hold arbitrary values; snap without leaving the budget
            let budget = if kind == "greedy_l0" { 1.0 } else { eps };
            let stored = snap_to_grid(&outcome.adversarial, &input, budget, 255);
            let outcome = AttackOutcome::new(&model, &input, stored, outcome.source_label, outcome.target)?;
            std::fs::create_dir_all(&out)?;
            let stem = image.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "image".into());
            let png = out.join(format!("{stem}_{kind}.png"));
            save_image(&outcome.adversarial, &png)?;
            let sidecar = json!({
                "kind": kind,
                "source_image": image,
                "true_label": label.unwrap_or(outcome.source_label),
                "source_label": outcome.source_label,
                "adversarial_label": outcome.adversarial_label,
                "target": outcome.target,
                "success": outcome.success,
                "epsilon": eps,
                "max_pixels": max_pixels,
                "linf": outcome.linf,
                "changed_pixels": outcome.changed_pixels,
                "seed": seed,
            });
            write_json(&png.with_extension("json"), &sidecar)?;
            print_json(&sidecar)?;
        }
        Command::MakeSynthetic { spec, count, seed, out } => {
            let spec: PlantedSpec = match spec {
                Some(p) => toml::from_str(&std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?)
                    .with_context(|| format!("parsing {}", p.display()))?,
                None => PlantedSpec::default(),
            };
            let planted = make_planted_model(&spec)?;
            let faces = make_synthetic_faces(&spec, count, seed)?;
            let face_dir = out.join("faces");
            std::fs::create_dir_all(&face_dir)?;
            save_model(&planted.model, out.join("model.wgrd"))?;
            std::fs::write(out.join("spec.toml"), toml::to_string(&spec)?)?;
            let truth: Vec<WitnessFile> = planted
                .ground_truth
                .iter()
                .map(|s| WitnessFile::from_set(s, json!({"source": "planted"})))
                .collect();
            write_json(&out.join("ground_truth.json"), &truth)?;
            for face in &faces {
                save_image(&face.image, face_dir.join(format!("{}.png", face.id)))?;
                face.annotation.save(face_dir.join(format!("{}.json", face.id)))?;
            }
            eprintln!("wrote model and {} faces to {}", faces.len(), out.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn parse_modes(s: &str) -> Result<Vec<DetectionMode>> {
    if s == "all" {
        return Ok(DetectionMode::ALL.to_vec());
    }
    let modes = s.split(',').map(|m| m.trim().parse::<DetectionMode>()).collect::<witness_guard::Result<Vec<_>>>()?;
    if modes.is_empty() {
        bail!("no detection mode given");
    }
    Ok(modes)
}
