use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use sista::adapt::{adapt_classifier, evaluate, ClassifierHandle, NRCConfig};
use sista::data::{toy_shapes, LabeledDataset};
use sista::finetune::{sista_g_finetune, FinetuneConfig};
use sista::inversion::{invert, invert_conditional, InversionConfig, InversionResult};
use sista::pipeline::{
    bundled_discriminator, bundled_generator, emit_report, read_report, run_experiment, run_sweep, summarize,
    train_source_classifier, ExperimentConfig, LabeledTable, SourceTrainConfig, SweepAxis,
};
use sista::pretrain::{appearance_layers, distill_generator, train_discriminator, PretrainConfig};
use sista::sampler::{curate_dataset, ClassMode, GeneratorBank, PruneConfig, Strategy};
use sista::shiftlab::{build_target_split, Corruption, Domain, ShiftConfig};
use sista::stylegen::{Discriminator, DiscriminatorArch, Generator, GeneratorArch, Image, StyleLayerSet};
use sista::Scalar;

#[derive(Parser)]
#[command(
    name = "sista",
    version,
    about = "Single-shot target augmentation and source-free adaptation"
)]
struct Cli {
    /// Floating-point precision for all computation.
    #[arg(long, value_enum, default_value = "f32", global = true)]
    dtype: Dtype,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum Dtype {
    F32,
    F64,
}

#[derive(Subcommand)]
enum Cmd {
    /// Project an image into the generator's extended style space.
    Invert(InvertArgs),
    /// Fine-tune a generator toward one target image.
    Finetune(FinetuneArgs),
    /// Curate a synthetic target dataset.
    Sample(SampleArgs),
    /// Adapt a classifier on a curated dataset.
    Adapt(AdaptArgs),
    /// Apply a domain shift to a labeled dataset directory.
    Shift(ShiftArgs),
    /// Write a procedural shapes dataset.
    Shapes(ShapesArgs),
    /// Train a source classifier on a labeled dataset directory.
    TrainSource(TrainSourceArgs),
    /// Run an experiment from a TOML config.
    Run(RunArgs),
    /// Sweep the prune ratio or the synthetic set size.
    Sweep(SweepArgs),
    /// Re-render a report directory.
    Report(ReportArgs),
    /// Train the toy generators and discriminator.
    Pretrain(PretrainArgs),
}

#[derive(Args)]
struct Nets {
    /// Generator checkpoint; the bundled one when omitted.
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Discriminator checkpoint; the bundled one when omitted.
    #[arg(long)]
    disc: Option<PathBuf>,
    /// Use the bundled class-conditional generator.
    #[arg(long)]
    conditional: bool,
}

impl Nets {
    fn generator<S: Scalar>(&self) -> Result<Generator<S>> {
        Ok(match &self.ckpt {
            Some(p) => Generator::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => bundled_generator(self.conditional)?,
        })
    }

    fn discriminator<S: Scalar>(&self) -> Result<Discriminator<S>> {
        Ok(match &self.disc {
            Some(p) => Discriminator::load(p).with_context(|| format!("loading {}", p.display()))?,
            None => bundled_discriminator()?,
        })
    }
}

#[derive(Args)]
struct InvertArgs {
    #[arg(long)]
    image: PathBuf,
    #[command(flatten)]
    nets: Nets,
    /// Known class of the image (conditional generators).
    #[arg(long)]
    label: Option<usize>,
    #[arg(long, default_value_t = 500)]
    steps: usize,
    #[arg(long, default_value_t = 0.05)]
    step_size: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    monotone: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    image: PathBuf,
    #[command(flatten)]
    nets: Nets,
    /// Inversion result file.
    #[arg(long)]
    inv: PathBuf,
    #[arg(long, default_value_t = 300)]
    iters: usize,
    #[arg(long, default_value_t = 2e-3)]
    lr: f64,
    /// Style layers, e.g. `2-3`; the late half when omitted.
    #[arg(long)]
    style_layers: Option<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct SampleArgs {
    /// Fine-tuned generator.
    #[arg(long)]
    ckpt: PathBuf,
    /// Source generator for prune-rewind; the bundled one when omitted.
    #[arg(long)]
    source_ckpt: Option<PathBuf>,
    #[arg(long, default_value = "prune-zero")]
    strategy: Strategy,
    /// Prune ratio in percent; the strategy default when omitted.
    #[arg(long)]
    p: Option<f64>,
    #[arg(long, default_value_t = 1000)]
    count: usize,
    #[arg(long)]
    style_layers: Option<String>,
    #[arg(long, default_value_t = 0.5)]
    gate: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct AdaptArgs {
    /// Source classifier checkpoint.
    #[arg(long)]
    model: PathBuf,
    /// Curated dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// Labeled dataset directory to evaluate on afterwards.
    #[arg(long)]
    eval: Option<PathBuf>,
    #[arg(long, default_value_t = 15)]
    epochs: usize,
    #[arg(short = 'K', long, default_value_t = 5)]
    k: usize,
    #[arg(long, default_value_t = 5)]
    expanded: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.9)]
    momentum: f64,
    /// Update only the linear head (normalisation moments still adapt).
    #[arg(long)]
    head_only: bool,
    /// Learning-rate multiplier for the convolutional blocks.
    #[arg(long, default_value_t = 0.1)]
    backbone_lr_scale: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ShiftArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    domain: Domain,
    #[arg(long)]
    corruption: Option<Corruption>,
    #[arg(long, default_value_t = 3)]
    severity: u8,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ShapesArgs {
    #[arg(long, default_value_t = 100)]
    per_class: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainSourceArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 30)]
    epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    axis: SweepAxis,
    #[arg(long, value_delimiter = ',', required = true)]
    values: Vec<f64>,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long = "in")]
    input: PathBuf,
}

#[derive(Args)]
struct PretrainArgs {
    #[arg(long, default_value_t = 3000)]
    steps: usize,
    #[arg(long, default_value_t = 600)]
    disc_steps: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn layers(spec: Option<&str>, num_layers: usize) -> Result<StyleLayerSet> {
    Ok(match spec {
        Some(s) => StyleLayerSet::parse(s, num_layers)?,
        None => appearance_layers(num_layers),
    })
}

fn shift_config(a: &ShiftArgs) -> Result<ShiftConfig> {
    let mut cfg = match a.domain {
        Domain::A => ShiftConfig::domain_a(),
        Domain::B => ShiftConfig::domain_b(),
        Domain::C => ShiftConfig::domain_c(),
        Domain::D => {
            let Some(c) = a.corruption else {
                bail!(
                    "domain D needs --corruption (one of {})",
                    Corruption::ALL.map(|c| c.name()).join(", ")
                );
            };
            ShiftConfig::domain_d(c, a.severity)
        }
    };
    cfg.seed = a.seed;
    Ok(cfg)
}

fn report_tables(out: &Path, tables: &[LabeledTable]) -> Result<()> {
    let files = emit_report(tables, &out.join("report"))?;
    print!("{}", summarize(tables));
    println!("report written to {}", files.results.parent().unwrap_or(out).display());
    Ok(())
}

fn run<S: Scalar>(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Invert(a) => {
            let gen = a.nets.generator::<S>()?;
            let disc = a.nets.discriminator::<S>()?;
            let x = Image::<S>::load_png(&a.image)?;
            let cfg = InversionConfig {
                steps: a.steps,
                step_size: a.step_size,
                seed: a.seed,
                monotone: a.monotone,
                ..InversionConfig::default()
            };
            let r = if gen.is_conditional() {
                invert_conditional(&x, &gen, &disc, &cfg, a.label)?
            } else {
                invert(&x, &gen, &disc, &cfg)?
            };
            r.save(&a.out)?;
            println!("final loss {:.6}, condition {:?}", r.final_loss, r.condition);
        }
        Cmd::Finetune(a) => {
            let gen = a.nets.generator::<S>()?;
            let disc = a.nets.discriminator::<S>()?;
            let x = Image::<S>::load_png(&a.image)?;
            let inv = InversionResult::<S>::load(&a.inv)?;
            let cfg = FinetuneConfig {
                iterations: a.iters,
                lr: a.lr,
                ..FinetuneConfig::new(layers(a.style_layers.as_deref(), gen.num_layers())?, a.seed)
            };
            let r = sista_g_finetune(&x, &inv, &gen, &disc, &cfg)?;
            r.generator.save(&a.out)?;
            if let (Some(first), Some(last)) = (r.trace.first(), r.trace.last()) {
                println!("loss {first:.4} -> {last:.4} over {} iterations", r.trace.len());
            }
        }
        Cmd::Sample(a) => {
            let target = Generator::<S>::load(&a.ckpt)?;
            let source = match &a.source_ckpt {
                Some(p) => Generator::<S>::load(p)?,
                None => bundled_generator(target.is_conditional())?,
            };
            let mut cfg = PruneConfig::new(
                a.strategy,
                layers(a.style_layers.as_deref(), target.num_layers())?,
                a.seed,
            );
            if let Some(p) = a.p {
                cfg.ratio = p;
            }
            cfg.gate_probability = a.gate;
            let mode = if target.is_conditional() {
                ClassMode::UniformRandom
            } else {
                ClassMode::None
            };
            let m = curate_dataset(
                GeneratorBank::One(&target),
                Some(GeneratorBank::One(&source)),
                &cfg,
                a.count,
                mode,
                &a.out,
            )?;
            println!("{} images, hash {}", m.len(), m.hash());
        }
        Cmd::Adapt(a) => {
            let model = ClassifierHandle::<S>::load(&a.model)?;
            let manifest = sista::sampler::SyntheticManifest::read(&a.data)?.without_classes();
            let cfg = NRCConfig {
                epochs: a.epochs,
                k: a.k,
                expanded: a.expanded,
                lr: a.lr,
                momentum: a.momentum,
                head_only: a.head_only,
                backbone_lr_scale: a.backbone_lr_scale,
                seed: a.seed,
                ..NRCConfig::default()
            };
            let r = adapt_classifier(&model, &manifest, &cfg)?;
            r.model.save(&a.out)?;
            if let Some(dir) = &a.eval {
                let (d, _) = LabeledDataset::load(dir)?;
                println!("accuracy before {:.2}%", evaluate(&model, &d)?);
                println!("accuracy after  {:.2}%", evaluate(&r.model, &d)?);
            }
        }
        Cmd::Shift(a) => {
            let cfg = shift_config(&a)?;
            let (src, _) = LabeledDataset::load(&a.input)?;
            let (out, m) = build_target_split(&src, &cfg)?;
            out.save(&a.out, serde_json::to_value(&m)?)?;
            println!("{} images shifted, hash {}", m.count, m.hash);
        }
        Cmd::Shapes(a) => {
            let d = toy_shapes(a.per_class, a.seed);
            let m = d.save(&a.out, serde_json::json!({"generator": "shapes", "seed": a.seed}))?;
            println!("{} images, hash {}", d.len(), m.hash);
        }
        Cmd::TrainSource(a) => {
            let (d, _) = LabeledDataset::load(&a.data)?;
            let cfg = SourceTrainConfig {
                epochs: a.epochs,
                seed: a.seed,
                ..SourceTrainConfig::default()
            };
            let (m, curve) = train_source_classifier::<S>(&d, &cfg)?;
            m.save(&a.out)?;
            for (e, l) in curve.iter().enumerate() {
                println!("epoch {:>3} loss {l:.4}", e + 1);
            }
            println!("training accuracy {:.2}%", evaluate(&m, &d)?);
        }
        Cmd::Run(a) => {
            let cfg = ExperimentConfig::load(&a.config)?;
            let r = run_experiment::<S>(&cfg)?;
            println!("source-domain test accuracy {:.2}%", r.source_accuracy);
            let tables = [LabeledTable {
                label: cfg.output_dir.display().to_string(),
                table: r.table,
            }];
            report_tables(&cfg.output_dir, &tables)?;
        }
        Cmd::Sweep(a) => {
            let cfg = ExperimentConfig::load(&a.config)?;
            let tables = run_sweep::<S>(&cfg, a.axis, &a.values)?;
            report_tables(&cfg.output_dir, &tables)?;
        }
        Cmd::Report(a) => {
            let tables = read_report(&a.input)?;
            emit_report(&tables, &a.input)?;
            print!("{}", summarize(&tables));
        }
        Cmd::Pretrain(a) => {
            std::fs::create_dir_all(&a.out)?;
            let cfg = PretrainConfig {
                steps: a.steps,
                batch: 32,
                lr: 2e-3,
                seed: a.seed,
            };
            let log = |name: &'static str| {
                move |s: usize, l: f64| {
                    if (s + 1).is_multiple_of(100) {
                        println!("{name} step {:>5} loss {l:.4}", s + 1);
                    }
                }
            };
            let mut gens = BTreeMap::new();
            for (file, arch) in [
                ("generator.ckpt", GeneratorArch::toy()),
                ("generator_conditional.ckpt", GeneratorArch::toy_conditional(3)),
            ] {
                let (g, _) = distill_generator::<S>(arch, &cfg, log("generator"))?;
                g.save(&a.out.join(file))?;
                gens.insert(file, g);
            }
            let dcfg = PretrainConfig {
                steps: a.disc_steps,
                lr: 2e-4,
                ..cfg
            };
            let (d, _) = train_discriminator::<S>(
                DiscriminatorArch::toy(),
                &gens["generator_conditional.ckpt"],
                &dcfg,
                log("discriminator"),
            )?;
            d.save(&a.out.join("discriminator.ckpt"))?;
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match cli.dtype {
        Dtype::F32 => run::<f32>(cli.cmd),
        Dtype::F64 => run::<f64>(cli.cmd),
    }
}
