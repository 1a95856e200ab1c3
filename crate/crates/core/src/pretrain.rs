//! Training of the bundled toy networks.
//!
//! The generator is distilled from the procedural shapes renderer with two
//! latents per sample: the first half of the synthesis blocks receives
//! `map(z_a)` and must reproduce the content (class, pose) of `z_a`, the second
//! half receives `map(z_b)` and must reproduce the colours of `z_b`. This
//! places appearance in the late style rows, the usual split in style-based
//! generators. The discriminator is then trained to tell renderer output from
//! generator output.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{Adam, Optimizer};
use crate::scalar::{c, Scalar};
use crate::shapes::{self, Scene};
use crate::stylegen::{one_hot, Discriminator, DiscriminatorArch, Generator, GeneratorArch, Image, StyleLayerSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl PretrainConfig {
    fn validate(&self) -> Result<()> {
        if self.batch == 0 || !(self.lr > 0.0) {
            return Err(Error::Config("pretraining needs batch >= 1 and lr > 0".into()));
        }
        Ok(())
    }
}

/// Style rows that carry appearance in distilled generators: the later half.
pub fn appearance_layers(num_layers: usize) -> StyleLayerSet {
    StyleLayerSet::new((num_layers / 2..num_layers).collect(), num_layers).expect("in range")
}

struct DistillBatch<S> {
    z_content: Array2<S>,
    z_style: Array2<S>,
    classes: Vec<usize>,
    target: crate::graph::Tensor<S>,
}

fn distill_batch<S: Scalar, R: Rng>(rng: &mut R, arch: &GeneratorArch, n: usize) -> DistillBatch<S> {
    let dz = arch.latent_dim;
    let mut za = Array2::<f64>::zeros((n, dz));
    let mut zb = Array2::<f64>::zeros((n, dz));
    za.mapv_inplace(|_| rng.sample(StandardNormal));
    zb.mapv_inplace(|_| rng.sample(StandardNormal));
    let mut classes = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n);
    for i in 0..n {
        let fixed = arch.classes.map(|k| rng.random_range(0..k));
        let scene = Scene::from_latents(za.row(i).as_slice().unwrap(), zb.row(i).as_slice().unwrap(), fixed);
        classes.push(scene.class);
        images.push(Image::<S>::from_rgb8(&scene.render()));
    }
    let refs: Vec<&Image<S>> = images.iter().collect();
    DistillBatch {
        z_content: za.mapv(c),
        z_style: zb.mapv(c),
        classes,
        target: Image::stack(&refs),
    }
}

/// Fits a generator to the shapes renderer. `log` receives `(step, loss)`.
pub fn distill_generator<S: Scalar>(
    arch: GeneratorArch,
    cfg: &PretrainConfig,
    mut log: impl FnMut(usize, f64),
) -> Result<(Generator<S>, Vec<f64>)> {
    cfg.validate()?;
    if arch.latent_dim < shapes::SCENE_LATENT_DIM || arch.resolution() != shapes::RESOLUTION as usize {
        return Err(Error::Config(
            "architecture cannot represent the shapes renderer".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut gen = Generator::<S>::init(arch.clone(), &mut rng)?;
    let mut opt = Adam::new(cfg.lr, 0.9, 0.99);
    let split = gen.num_layers() / 2;
    let mut curve = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = distill_batch::<S, _>(&mut rng, &arch, cfg.batch);
        let mut g = Graph::new();
        let b = gen.params().bind_trainable(&mut g);
        let cond = arch
            .classes
            .map(|k| g.constant(one_hot::<S>(&batch.classes, k).into_dyn()));
        let za = g.constant(batch.z_content.into_dyn());
        let zb = g.constant(batch.z_style.into_dyn());
        let wa = gen.mapping_graph(&mut g, &b, za, cond);
        let wb = gen.mapping_graph(&mut g, &b, zb, cond);
        let styles: Vec<Var> = (0..gen.num_layers()).map(|l| if l < split { wa } else { wb }).collect();
        let out = gen.synthesis_graph(&mut g, &b, &styles, None)?;
        let t = g.constant(batch.target);
        let d = g.sub(out.image, t);
        let sq = g.square(d);
        let loss = g.mean(sq);
        let v = g.scalar(loss).to_f64().unwrap_or(f64::NAN);
        if !v.is_finite() {
            return Err(Error::NonFinite {
                what: "distillation loss".into(),
                step,
            });
        }
        let mut grads = g.backward(loss);
        opt.step(gen.params_mut(), &b.grads(&mut grads));
        curve.push(v);
        log(step, v);
    }
    Ok((gen, curve))
}

/// Logistic real-versus-generated training against a fixed generator.
pub fn train_discriminator<S: Scalar>(
    arch: DiscriminatorArch,
    gen: &Generator<S>,
    cfg: &PretrainConfig,
    mut log: impl FnMut(usize, f64),
) -> Result<(Discriminator<S>, Vec<f64>)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut disc = Discriminator::<S>::init(arch, &mut rng)?;
    disc.check_input(gen.resolution(), gen.resolution())?;
    let mut opt = Adam::new(cfg.lr, 0.5, 0.99);
    let mut curve = Vec::with_capacity(cfg.steps);
    let n = cfg.batch;
    for step in 0..cfg.steps {
        let real: Vec<Image<S>> = (0..n)
            .map(|_| {
                let class = rng.random_range(0..shapes::CLASSES);
                Image::from_rgb8(&shapes::sample_image(&mut rng, class))
            })
            .collect();
        let zs = Array2::from_shape_fn((n, gen.arch().latent_dim), |_| {
            c::<S>(rng.sample::<f64, _>(StandardNormal))
        });
        let conds: Option<Vec<usize>> = gen.classes().map(|k| (0..n).map(|_| rng.random_range(0..k)).collect());
        let w = gen.map_batch(&zs, conds.as_deref())?;
        let wl: Vec<_> = w
            .rows()
            .into_iter()
            .map(|r| crate::stylegen::ExtendedLatent::broadcast(r, gen.num_layers()))
            .collect();
        let fake = gen.synthesize_batch(&wl.iter().collect::<Vec<_>>())?;
        let mut all: Vec<&Image<S>> = real.iter().collect();
        all.extend(fake.iter());

        let mut g = Graph::new();
        let b = disc.params().bind_trainable(&mut g);
        let x = g.constant(Image::stack(&all));
        let out = disc.forward_graph(&mut g, &b, x);
        // real rows want positive logits, fake rows negative
        let sign = ndarray::Array2::from_shape_fn((2 * n, 1), |(i, _)| if i < n { c::<S>(-1.0) } else { S::one() });
        let sg = g.constant(sign.into_dyn());
        let signed = g.mul(out.logit, sg);
        let sp = g.softplus(signed);
        let loss = g.mean(sp);
        let v = g.scalar(loss).to_f64().unwrap_or(f64::NAN);
        if !v.is_finite() {
            return Err(Error::NonFinite {
                what: "discriminator loss".into(),
                step,
            });
        }
        let mut grads = g.backward(loss);
        opt.step(disc.params_mut(), &b.grads(&mut grads));
        curve.push(v);
        log(step, v);
    }
    Ok((disc, curve))
}
