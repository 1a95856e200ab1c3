//! End-to-end experiments: source training, single-shot target generation,
//! synthetic-set adaptation, baselines, sweeps and reports.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::adapt::{
    adapt_classifier, adapt_on_images, batches, evaluate, ClassifierArch, ClassifierHandle, NRCConfig, NormMode,
};
use crate::data::{toy_shapes, AuditedSplit, LabeledDataset};
use crate::error::{Error, Result, StageExt};
use crate::finetune::{per_class_finetune, sista_g_finetune, sista_u_finetune, FinetuneConfig};
use crate::graph::Graph;
use crate::inversion::{invert, invert_conditional, InversionConfig, InversionResult};
use crate::nn::{Adam, Optimizer};
use crate::sampler::{curate_dataset, derive_seed, ClassMode, GeneratorBank, PruneConfig, Strategy};
use crate::scalar::{c, Scalar};
use crate::shapes;
use crate::shiftlab::{build_target_split, Domain, ShiftConfig};
use crate::stylegen::{one_hot, Discriminator, Generator, Image, StyleLayerSet};

const BUNDLED_GENERATOR: &[u8] = include_bytes!("../assets/generator.ckpt");
const BUNDLED_CONDITIONAL: &[u8] = include_bytes!("../assets/generator_conditional.ckpt");
const BUNDLED_DISCRIMINATOR: &[u8] = include_bytes!("../assets/discriminator.ckpt");

const SHOT_STREAM: u64 = 0x5407;

/// Shipped generator distilled from the shapes renderer.
pub fn bundled_generator<S: Scalar>(conditional: bool) -> Result<Generator<S>> {
    Generator::from_bytes(if conditional {
        BUNDLED_CONDITIONAL
    } else {
        BUNDLED_GENERATOR
    })
}

pub fn bundled_discriminator<S: Scalar>() -> Result<Discriminator<S>> {
    Discriminator::from_bytes(BUNDLED_DISCRIMINATOR)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    MultiClass,
    /// One shape class against the rest.
    BinaryAttribute(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GeneratorMode {
    /// One unconditional generator, one unlabeled shot.
    Single,
    /// One class-conditional generator, one labeled shot per class.
    Conditional,
    /// One generator per class, one labeled shot per class.
    PerClass,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SourceTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    /// Mass spread uniformly over all classes in the cross-entropy target.
    pub label_smoothing: f64,
    /// Width of the feature layer feeding the linear head.
    pub feature_dim: usize,
    /// Reused when present, written after training otherwise.
    pub checkpoint: Option<PathBuf>,
}

impl Default for SourceTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            lr: 1e-4,
            batch: 16,
            seed: 0,
            label_smoothing: 0.1,
            feature_dim: 64,
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    pub source_train_per_class: usize,
    pub source_test_per_class: usize,
    pub target_train_per_class: usize,
    pub target_test_per_class: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source_train_per_class: 500,
            source_test_per_class: 100,
            target_train_per_class: 200,
            target_test_per_class: 200,
            seed: 7,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneSection {
    pub iterations: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    /// Layer list such as `"2-3"`; empty means the late half of the generator.
    pub style_layers: String,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        Self {
            iterations: 300,
            lr: 2e-3,
            beta1: 0.0,
            beta2: 0.99,
            style_layers: String::new(),
        }
    }
}

/// Checkpoint overrides; bundled networks are used when absent.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckpointPaths {
    pub generator: Option<PathBuf>,
    pub discriminator: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seeds: Vec<u64>,
    pub task: Task,
    pub generator_mode: GeneratorMode,
    pub strategy: Strategy,
    /// Prune ratio `p` in percent.
    pub ratio: f64,
    /// Synthetic set size `T`.
    pub samples: usize,
    #[serde(default = "half")]
    pub gate_probability: f64,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub checkpoints: CheckpointPaths,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub source: SourceTrainConfig,
    #[serde(default)]
    pub inversion: InversionConfig,
    #[serde(default)]
    pub finetune: FinetuneSection,
    #[serde(default)]
    pub nrc: NRCConfig,
    pub shift: ShiftConfig,
}

fn half() -> f64 {
    0.5
}

impl ExperimentConfig {
    /// Three seeds, conditional generator, prune-zero at 50%, 500 samples,
    /// Domain C, one head-only adaptation epoch.
    pub fn miniature(output_dir: impl Into<PathBuf>) -> Self {
        Self {
            seeds: vec![0, 1, 2],
            task: Task::MultiClass,
            generator_mode: GeneratorMode::Conditional,
            strategy: Strategy::PruneZero,
            ratio: 50.0,
            samples: 500,
            gate_probability: 0.5,
            output_dir: output_dir.into(),
            checkpoints: CheckpointPaths::default(),
            data: DataConfig::default(),
            source: SourceTrainConfig::default(),
            inversion: InversionConfig::default(),
            finetune: FinetuneSection::default(),
            nrc: NRCConfig {
                epochs: 1,
                head_only: true,
                ..NRCConfig::default()
            },
            shift: ShiftConfig::domain_c(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        let mut s = self.seeds.clone();
        s.sort_unstable();
        s.dedup();
        if s.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        if let Task::BinaryAttribute(a) = self.task {
            if a >= shapes::CLASSES {
                return Err(Error::Config(format!("attribute {a} is not a shape class")));
            }
            if self.generator_mode != GeneratorMode::Single {
                return Err(Error::Config("binary tasks use a single generator".into()));
            }
        }
        for p in [&self.checkpoints.generator, &self.checkpoints.discriminator]
            .into_iter()
            .flatten()
        {
            if !p.exists() {
                return Err(Error::Config(format!("checkpoint {} does not exist", p.display())));
            }
        }
        let d = &self.data;
        if d.source_train_per_class == 0 || d.target_train_per_class == 0 || d.target_test_per_class == 0 {
            return Err(Error::Config("data splits must be non-empty".into()));
        }
        self.shift.validate()?;
        self.nrc.validate()?;
        self.inversion.validate()?;
        let mut p = PruneConfig::new(self.strategy, StyleLayerSet::empty(), 0);
        p.ratio = self.ratio;
        p.gate_probability = self.gate_probability;
        p.validate()
    }

    fn style_layers(&self, num_layers: usize) -> Result<StyleLayerSet> {
        if self.finetune.style_layers.trim().is_empty() {
            Ok(crate::pretrain::appearance_layers(num_layers))
        } else {
            StyleLayerSet::parse(&self.finetune.style_layers, num_layers)
        }
    }

    fn finetune_config(&self, num_layers: usize, seed: u64) -> Result<FinetuneConfig> {
        Ok(FinetuneConfig {
            iterations: self.finetune.iterations,
            lr: self.finetune.lr,
            beta1: self.finetune.beta1,
            beta2: self.finetune.beta2,
            style_layers: self.style_layers(num_layers)?,
            seed,
        })
    }

    fn prune_config(&self, strategy: Strategy, ratio: f64, seed: u64, num_layers: usize) -> Result<PruneConfig> {
        let mut p = PruneConfig::new(strategy, self.style_layers(num_layers)?, seed);
        p.ratio = if strategy == Strategy::Base { 0.0 } else { ratio };
        p.gate_probability = self.gate_probability;
        Ok(p)
    }

    /// Label count of the configured task.
    pub fn classes(&self) -> usize {
        match self.task {
            Task::MultiClass => shapes::CLASSES,
            Task::BinaryAttribute(_) => 2,
        }
    }

    fn task_name(&self) -> String {
        match self.task {
            Task::MultiClass => "shapes".into(),
            Task::BinaryAttribute(a) => format!("is-{}", shapes::CLASS_NAMES[a]),
        }
    }

    fn domain_name(&self) -> String {
        match (self.shift.domain, self.shift.corruption) {
            (Domain::D, Some(cr)) => format!("D/{}-{}", cr.name(), self.shift.severity.unwrap_or(0)),
            (d, _) => format!("{d:?}"),
        }
    }
}

/// Mean and spread of one (method, domain, task) cell over trials.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub method: String,
    pub domain: String,
    pub task: String,
    pub mean: f64,
    pub std: f64,
    pub trials: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub rows: Vec<ResultRow>,
}

impl ResultTable {
    pub fn get(&self, method: &str) -> Option<&ResultRow> {
        self.rows.iter().find(|r| r.method == method)
    }

    fn push(&mut self, method: &str, domain: &str, task: &str, trials: Vec<f64>) {
        let n = trials.len() as f64;
        let mean = trials.iter().sum::<f64>() / n;
        let std = if trials.len() > 1 {
            (trials.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        } else {
            0.0
        };
        self.rows.push(ResultRow {
            method: method.into(),
            domain: domain.into(),
            task: task.into(),
            mean,
            std,
            trials,
        });
    }
}

/// Cross-entropy training on a labeled source set. Returns the model and the
/// mean loss of every epoch.
pub fn train_source_classifier<S: Scalar>(
    data: &LabeledDataset,
    cfg: &SourceTrainConfig,
) -> Result<(ClassifierHandle<S>, Vec<f64>)> {
    if data.is_empty() || cfg.batch == 0 {
        return Err(Error::Config("source training needs data and batch >= 1".into()));
    }
    if !(0.0..1.0).contains(&cfg.label_smoothing) {
        return Err(Error::Config(format!(
            "label smoothing {} outside [0, 1)",
            cfg.label_smoothing
        )));
    }
    let eps = cfg.label_smoothing;
    let floor = eps / data.classes as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = ClassifierHandle::<S>::init(
        ClassifierArch {
            feature_dim: cfg.feature_dim,
            ..ClassifierArch::toy(data.classes)
        },
        &mut rng,
    )?;
    let images: Vec<Image<S>> = (0..data.len()).map(|i| data.image(i)).collect();
    let mut opt = Adam::new(cfg.lr, 0.9, 0.999);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for ids in batches(&order, cfg.batch) {
            let batch: Vec<&Image<S>> = ids.iter().map(|&i| &images[i]).collect();
            let labels: Vec<usize> = ids.iter().map(|&i| data.labels[i]).collect();
            let mut g = Graph::new();
            let b = model.bind(&mut g, |_| true);
            let x = g.constant(Image::stack(&batch));
            let out = model.forward_graph(&mut g, &b, x, NormMode::Batch);
            let lp = g.log_softmax(out.logits);
            let y = one_hot::<S>(&labels, data.classes).mapv(|v| c::<S>(floor) + v * c(1.0 - eps));
            let y = g.constant(y.into_dyn());
            let picked = g.mul(lp, y);
            let s = g.sum(picked);
            let loss = g.scale(s, c(-1.0 / ids.len() as f64));
            let v = g.scalar(loss).to_f64().unwrap_or(f64::NAN);
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    what: "source cross-entropy".into(),
                    step,
                });
            }
            let mut grads = g.backward(loss);
            opt.step(model.params_mut(), &b.grads(&mut grads));
            model.absorb_moments(&out);
            total += v * ids.len() as f64;
            step += 1;
        }
        curve.push(total / data.len() as f64);
    }
    Ok((model, curve))
}

/// Source and target splits of one experiment.
#[derive(Clone, Debug)]
pub struct Splits {
    pub source_train: LabeledDataset,
    pub source_test: LabeledDataset,
    pub target_train: LabeledDataset,
    pub target_test: LabeledDataset,
}

fn relabel(d: LabeledDataset, task: Task) -> Result<LabeledDataset> {
    match task {
        Task::MultiClass => Ok(d),
        Task::BinaryAttribute(a) => {
            let labels = d.labels.iter().map(|&l| usize::from(l == a)).collect();
            LabeledDataset::new(d.images, labels, 2)
        }
    }
}

/// Disjoint procedural draws; the target splits are shifted copies.
pub fn build_splits(cfg: &ExperimentConfig) -> Result<Splits> {
    let d = &cfg.data;
    let s = d.seed;
    let (target_train, _) =
        build_target_split(&toy_shapes(d.target_train_per_class, derive_seed(s, 2, 0)), &cfg.shift)?;
    let (target_test, _) = build_target_split(&toy_shapes(d.target_test_per_class, derive_seed(s, 3, 0)), &cfg.shift)?;
    Ok(Splits {
        source_train: relabel(toy_shapes(d.source_train_per_class, derive_seed(s, 0, 0)), cfg.task)?,
        source_test: relabel(
            toy_shapes(d.source_test_per_class.max(1), derive_seed(s, 1, 0)),
            cfg.task,
        )?,
        target_train: relabel(target_train, cfg.task)?,
        target_test: relabel(target_test, cfg.task)?,
    })
}

fn source_model<S: Scalar>(cfg: &ExperimentConfig, splits: &Splits) -> Result<ClassifierHandle<S>> {
    if let Some(p) = cfg.source.checkpoint.as_ref().filter(|p| p.exists()) {
        let m = ClassifierHandle::<S>::load(p)?;
        if m.classes() != cfg.classes() {
            return Err(Error::Config(format!(
                "cached source model {} has the wrong class count",
                p.display()
            )));
        }
        return Ok(m);
    }
    let (m, _) = train_source_classifier(&splits.source_train, &cfg.source)?;
    if let Some(p) = &cfg.source.checkpoint {
        if let Some(dir) = p.parent() {
            fs::create_dir_all(dir)?;
        }
        m.save(p)?;
    }
    Ok(m)
}

fn write_trace(path: &Path, trace: &[f64]) -> Result<()> {
    fs::write(path, serde_json::to_string(trace)?)?;
    Ok(())
}

/// Which real target images the single-shot path read.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShotAudit {
    /// `(class, index)` of every chosen shot; class is `None` for unlabeled shots.
    pub shots: Vec<(Option<usize>, usize)>,
    pub total_reads: usize,
    pub distinct_reads: Vec<usize>,
}

enum TargetGens<S> {
    One {
        target: Generator<S>,
        source: Generator<S>,
    },
    PerClass {
        target: BTreeMap<usize, Generator<S>>,
        source: BTreeMap<usize, Generator<S>>,
    },
}

struct Trial<S> {
    seed: u64,
    gens: TargetGens<S>,
    audit: ShotAudit,
    full_target: f64,
}

/// Everything shared by the trials of one configuration.
struct Context<S> {
    cfg: ExperimentConfig,
    splits: Splits,
    source: ClassifierHandle<S>,
    gen: Generator<S>,
    disc: Discriminator<S>,
}

fn load_nets<S: Scalar>(cfg: &ExperimentConfig) -> Result<(Generator<S>, Discriminator<S>)> {
    let conditional = cfg.generator_mode != GeneratorMode::Single;
    let gen = match &cfg.checkpoints.generator {
        Some(p) => Generator::load(p)?,
        None => bundled_generator(conditional)?,
    };
    if gen.is_conditional() != conditional {
        return Err(Error::Config(format!(
            "generator mode {:?} does not fit a {} generator",
            cfg.generator_mode,
            if gen.is_conditional() {
                "conditional"
            } else {
                "unconditional"
            }
        )));
    }
    let disc = match &cfg.checkpoints.discriminator {
        Some(p) => Discriminator::load(p)?,
        None => bundled_discriminator()?,
    };
    disc.check_input(gen.resolution(), gen.resolution())?;
    Ok((gen, disc))
}

impl<S: Scalar> Context<S> {
    fn prepare(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        fs::create_dir_all(&cfg.output_dir)?;
        fs::write(cfg.output_dir.join("config.resolved.toml"), cfg.to_toml()?)?;
        let (gen, disc) = load_nets(cfg).stage("load")?;
        let splits = build_splits(cfg).stage("data")?;
        let source = source_model(cfg, &splits).stage("source-training")?;
        Ok(Self {
            cfg: cfg.clone(),
            splits,
            source,
            gen,
            disc,
        })
    }

    fn target_images(&self) -> Vec<Image<S>> {
        let t = &self.splits.target_train;
        (0..t.len()).map(|i| t.image(i)).collect()
    }

    /// Single-shot generation for one seed: shots, inversion, fine-tuning.
    fn generate(&self, seed: u64, dir: &Path) -> Result<(TargetGens<S>, ShotAudit)> {
        let cfg = &self.cfg;
        let split = AuditedSplit::new(&self.splits.target_train);
        let shot_seed = derive_seed(seed, SHOT_STREAM, 0);
        let shots: Vec<(Option<usize>, usize)> = match cfg.generator_mode {
            GeneratorMode::Single => {
                let i = ChaCha8Rng::seed_from_u64(shot_seed).random_range(0..split.len());
                vec![(None, i)]
            }
            _ => {
                let classes: Vec<usize> = (0..split.classes()).collect();
                split
                    .choose_shots(&classes, shot_seed)?
                    .into_iter()
                    .map(|(c, i)| (Some(c), i))
                    .collect()
            }
        };
        fs::create_dir_all(dir)?;
        let mut images = BTreeMap::new();
        for &(class, i) in &shots {
            let (img, _) = split.read(i);
            let key = class.unwrap_or(0);
            img.save_with_format(dir.join(format!("shot-{key}.png")), image::ImageFormat::Png)?;
            images.insert(key, Image::<S>::from_rgb8(img));
        }
        let inv_cfg = InversionConfig {
            seed,
            ..cfg.inversion.clone()
        };
        let ft_cfg = cfg.finetune_config(self.gen.num_layers(), seed)?;
        let gens = match cfg.generator_mode {
            GeneratorMode::Single => {
                let x = &images[&0];
                let inv = invert(x, &self.gen, &self.disc, &inv_cfg).stage("invert")?;
                inv.save(&dir.join("inversion-0.json"))?;
                let r = sista_g_finetune(x, &inv, &self.gen, &self.disc, &ft_cfg).stage("finetune")?;
                write_trace(&dir.join("finetune-trace.json"), &r.trace)?;
                TargetGens::One {
                    target: r.generator,
                    source: self.gen.clone(),
                }
            }
            GeneratorMode::Conditional => {
                let mut invs = BTreeMap::new();
                for (&class, x) in &images {
                    let inv = invert_conditional(x, &self.gen, &self.disc, &inv_cfg, Some(class)).stage("invert")?;
                    inv.save(&dir.join(format!("inversion-{class}.json")))?;
                    invs.insert(class, inv);
                }
                let r = sista_u_finetune(&images, &invs, &self.gen, &self.disc, &ft_cfg).stage("finetune")?;
                write_trace(&dir.join("finetune-trace.json"), &r.trace)?;
                TargetGens::One {
                    target: r.generator,
                    source: self.gen.clone(),
                }
            }
            GeneratorMode::PerClass => {
                let mut sources = BTreeMap::new();
                let mut invs: BTreeMap<usize, InversionResult<S>> = BTreeMap::new();
                let mut discs = BTreeMap::new();
                for (&class, x) in &images {
                    let g = self.gen.specialize(class)?;
                    let inv = invert(x, &g, &self.disc, &inv_cfg).stage("invert")?;
                    inv.save(&dir.join(format!("inversion-{class}.json")))?;
                    invs.insert(class, inv);
                    sources.insert(class, g);
                    discs.insert(class, self.disc.clone());
                }
                let reports = per_class_finetune(&images, &invs, &sources, &discs, &ft_cfg).stage("finetune")?;
                for (k, r) in &reports {
                    write_trace(&dir.join(format!("finetune-trace-{k}.json")), &r.trace)?;
                }
                TargetGens::PerClass {
                    target: reports.into_iter().map(|(k, r)| (k, r.generator)).collect(),
                    source: sources,
                }
            }
        };
        let audit = ShotAudit {
            shots,
            total_reads: split.total_reads(),
            distinct_reads: split.distinct_reads(),
        };
        if audit.distinct_reads.len() != audit.shots.len() {
            return Err(Error::Contract(format!(
                "single-shot path read {} target images for {} shots",
                audit.distinct_reads.len(),
                audit.shots.len()
            )));
        }
        Ok((gens, audit))
    }

    fn trial(&self, seed: u64, full_target: f64) -> Result<Trial<S>> {
        let dir = self.cfg.output_dir.join(format!("seed-{seed}"));
        let (gens, audit) = self.generate(seed, &dir)?;
        if let TargetGens::One { target, .. } = &gens {
            target.save(&dir.join("generator.ckpt"))?;
        }
        fs::write(dir.join("audit.json"), serde_json::to_vec_pretty(&audit)?)?;
        Ok(Trial {
            seed,
            gens,
            audit,
            full_target,
        })
    }

    /// Curates `samples` images, adapts the source model on them and returns
    /// target-test accuracy plus the manifest hash.
    fn sista_row(
        &self,
        trial: &Trial<S>,
        strategy: Strategy,
        ratio: f64,
        samples: usize,
        dir: &Path,
    ) -> Result<(f64, String)> {
        let cfg = &self.cfg;
        let prune = cfg.prune_config(strategy, ratio, trial.seed, self.gen.num_layers())?;
        let manifest = match &trial.gens {
            TargetGens::One { target, source } => {
                let mode = if target.is_conditional() {
                    ClassMode::UniformRandom
                } else {
                    ClassMode::None
                };
                curate_dataset(
                    GeneratorBank::One(target),
                    Some(GeneratorBank::One(source)),
                    &prune,
                    samples,
                    mode,
                    dir,
                )
            }
            TargetGens::PerClass { target, source } => curate_dataset(
                GeneratorBank::PerClass(target),
                Some(GeneratorBank::PerClass(source)),
                &prune,
                samples,
                ClassMode::UniformRandom,
                dir,
            ),
        }
        .stage("sample")?;
        // the adaptation stage never sees generator class labels
        let unlabeled = manifest.without_classes();
        let nrc = NRCConfig {
            seed: trial.seed,
            ..cfg.nrc.clone()
        };
        let adapted = adapt_classifier(&self.source, &unlabeled, &nrc).stage("adapt")?;
        let acc = evaluate(&adapted.model, &self.splits.target_test).stage("evaluate")?;
        Ok((acc, manifest.hash().to_string()))
    }

    fn full_target(&self, seed: u64, images: &[Image<S>]) -> Result<f64> {
        let refs: Vec<&Image<S>> = images.iter().collect();
        let nrc = NRCConfig {
            seed,
            ..self.cfg.nrc.clone()
        };
        let r = adapt_on_images(&self.source, &refs, &nrc).stage("full-target-da")?;
        evaluate(&r.model, &self.splits.target_test).stage("evaluate")
    }

    fn trials(&self) -> Result<Vec<Trial<S>>> {
        let images = self.target_images();
        self.cfg
            .seeds
            .iter()
            .map(|&s| {
                let full = self.full_target(s, &images)?;
                self.trial(s, full)
            })
            .collect()
    }

    fn table(
        &self,
        trials: &[Trial<S>],
        strategy: Strategy,
        ratio: f64,
        samples: usize,
        tag: &str,
    ) -> Result<(ResultTable, Vec<TrialRecord>)> {
        let cfg = &self.cfg;
        let (domain, task) = (cfg.domain_name(), cfg.task_name());
        let source_only = evaluate(&self.source, &self.splits.target_test).stage("evaluate")?;
        let mut base = Vec::new();
        let mut strat = Vec::new();
        let mut records = Vec::new();
        for t in trials {
            let dir = cfg.output_dir.join(tag).join(format!("seed-{}", t.seed));
            let (b, bh) = self.sista_row(t, Strategy::Base, 0.0, samples, &dir.join("sista-base"))?;
            let (s, sh) = if strategy == Strategy::Base {
                (b, bh.clone())
            } else {
                self.sista_row(
                    t,
                    strategy,
                    ratio,
                    samples,
                    &dir.join(format!("sista-{}", strategy.name())),
                )?
            };
            base.push(b);
            strat.push(s);
            records.push(TrialRecord {
                seed: t.seed,
                audit: t.audit.clone(),
                base_manifest: bh,
                strategy_manifest: sh,
                source_only,
                sista_base: b,
                sista_strategy: s,
                full_target: t.full_target,
            });
        }
        let mut table = ResultTable::default();
        table.push("source-only", &domain, &task, vec![source_only; trials.len()]);
        table.push("sista-base", &domain, &task, base);
        if strategy != Strategy::Base {
            table.push(&format!("sista-{}", strategy.name()), &domain, &task, strat);
        }
        table.push(
            "full-target-da",
            &domain,
            &task,
            trials.iter().map(|t| t.full_target).collect(),
        );
        Ok((table, records))
    }
}

/// Per-seed details of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialRecord {
    pub seed: u64,
    pub audit: ShotAudit,
    pub base_manifest: String,
    pub strategy_manifest: String,
    pub source_only: f64,
    pub sista_base: f64,
    pub sista_strategy: f64,
    pub full_target: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub table: ResultTable,
    pub trials: Vec<TrialRecord>,
    /// Source-domain test accuracy of the source model.
    pub source_accuracy: f64,
}

/// Full run: source model, then per seed invert, fine-tune, curate, adapt and
/// evaluate, plus source-only and full-target reference rows.
pub fn run_experiment<S: Scalar>(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let ctx = Context::<S>::prepare(cfg)?;
    let trials = ctx.trials()?;
    let (table, records) = ctx.table(&trials, cfg.strategy, cfg.ratio, cfg.samples, "runs")?;
    let report = ExperimentReport {
        table,
        trials: records,
        source_accuracy: evaluate(&ctx.source, &ctx.splits.source_test)?,
    };
    fs::write(
        cfg.output_dir.join("experiment.json"),
        serde_json::to_vec_pretty(&report)?,
    )?;
    Ok(report)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepAxis {
    /// Prune ratio.
    P,
    /// Synthetic set size.
    T,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "p" | "P" => Ok(Self::P),
            "t" | "T" => Ok(Self::T),
            _ => Err(Error::Config(format!("unknown sweep axis `{s}` (expected p or T)"))),
        }
    }
}

/// One table per axis value. Source model, baselines and fine-tuned
/// generators are shared across values; only sampling and adaptation rerun.
pub fn run_sweep<S: Scalar>(cfg: &ExperimentConfig, axis: SweepAxis, values: &[f64]) -> Result<Vec<LabeledTable>> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one value".into()));
    }
    if axis == SweepAxis::T && values.iter().any(|&v| v < 1.0 || v.fract() != 0.0) {
        return Err(Error::Config("T values must be positive integers".into()));
    }
    let ctx = Context::<S>::prepare(cfg)?;
    let trials = ctx.trials()?;
    values
        .iter()
        .map(|&v| {
            let (ratio, samples, label) = match axis {
                SweepAxis::P => (v, cfg.samples, format!("p={v}")),
                SweepAxis::T => (cfg.ratio, v as usize, format!("T={v}")),
            };
            let (table, _) = ctx.table(&trials, cfg.strategy, ratio, samples, &format!("sweep-{label}"))?;
            Ok(LabeledTable { label, table })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledTable {
    pub label: String,
    pub table: ResultTable,
}

pub const RESULTS_FILE: &str = "results.json";
pub const SUMMARY_FILE: &str = "summary.txt";

/// Paths written by [`emit_report`].
#[derive(Clone, Debug, PartialEq)]
pub struct ReportFiles {
    pub results: PathBuf,
    pub summary: PathBuf,
    pub plots: Vec<PathBuf>,
}

const PALETTE: [[u8; 3]; 6] = [
    [110, 110, 110],
    [66, 133, 244],
    [15, 157, 88],
    [219, 68, 55],
    [244, 180, 0],
    [171, 71, 188],
];

/// Text rendering of the tables: one line per cell.
pub fn summarize(tables: &[LabeledTable]) -> String {
    let mut s = String::new();
    for t in tables {
        s.push_str(&format!("== {} ==\n", t.label));
        s.push_str(&format!(
            "{:<20} {:<12} {:<10} {:>8} {:>7}\n",
            "method", "domain", "task", "mean", "std"
        ));
        for r in &t.table.rows {
            s.push_str(&format!(
                "{:<20} {:<12} {:<10} {:>8.2} {:>7.2}\n",
                r.method, r.domain, r.task, r.mean, r.std
            ));
        }
    }
    s
}

/// Bar chart of row means (0 to 100), one bar per row in palette order.
fn plot(table: &ResultTable) -> RgbImage {
    let (bar, gap, h) = (36u32, 12u32, 200u32);
    let w = gap + table.rows.len() as u32 * (bar + gap);
    let mut img = RgbImage::from_pixel(w, h + 20, Rgb([255, 255, 255]));
    for tick in (0..=100).step_by(25) {
        let y = h - (tick as u32 * (h - 10) / 100);
        for x in 0..w {
            img.put_pixel(x, y, Rgb([225, 225, 225]));
        }
    }
    for (i, r) in table.rows.iter().enumerate() {
        let x0 = gap + i as u32 * (bar + gap);
        let top = h - (r.mean.clamp(0.0, 100.0) * (h - 10) as f64 / 100.0) as u32;
        for x in x0..x0 + bar {
            for y in top..h {
                img.put_pixel(x, y, Rgb(PALETTE[i % PALETTE.len()]));
            }
        }
        // std whisker
        let half = (r.std * (h - 10) as f64 / 100.0) as u32;
        let xm = x0 + bar / 2;
        for y in top.saturating_sub(half)..(top + half).min(h) {
            img.put_pixel(xm, y, Rgb([0, 0, 0]));
        }
    }
    img
}

/// Writes `results.json`, `summary.txt` and one bar chart per table.
pub fn emit_report(tables: &[LabeledTable], out_dir: &Path) -> Result<ReportFiles> {
    if tables.is_empty() || tables.iter().any(|t| t.table.rows.is_empty()) {
        return Err(Error::Config("nothing to report: empty table".into()));
    }
    fs::create_dir_all(out_dir)?;
    let results = out_dir.join(RESULTS_FILE);
    fs::write(&results, serde_json::to_vec_pretty(tables)?)?;
    let mut summary_text = summarize(tables);
    summary_text.push_str("\nbar colours in row order: grey, blue, green, red, yellow, purple\n");
    let summary = out_dir.join(SUMMARY_FILE);
    fs::write(&summary, summary_text)?;
    let mut plots = Vec::new();
    for (i, t) in tables.iter().enumerate() {
        let p = out_dir.join(format!("plot-{i}.png"));
        plot(&t.table).save_with_format(&p, image::ImageFormat::Png)?;
        plots.push(p);
    }
    Ok(ReportFiles {
        results,
        summary,
        plots,
    })
}

pub fn read_report(dir: &Path) -> Result<Vec<LabeledTable>> {
    Ok(serde_json::from_slice(&fs::read(dir.join(RESULTS_FILE))?)?)
}
