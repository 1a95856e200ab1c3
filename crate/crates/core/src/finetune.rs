//! Single-shot generator fine-tuning: per-iteration style mixing of the
//! inverted target latent, matched against the target through frozen
//! discriminator features. Also the multi-class and per-class drivers.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Tensor, Var};
use crate::inversion::InversionResult;
use crate::nn::{Adam, Optimizer};
use crate::sampler::derive_seed;
use crate::scalar::Scalar;
use crate::stylegen::{Discriminator, ExtendedLatent, Generator, Image, LatentZ, StyleLayerSet};

const MIX_STREAM: u64 = 0xF17E;

/// Rows in `layers` come from `r_plus`, the rest from `w_plus`.
pub fn style_mix<S: Scalar>(
    w_plus: &ExtendedLatent<S>,
    r_plus: &ExtendedLatent<S>,
    layers: &StyleLayerSet,
) -> Result<ExtendedLatent<S>> {
    if w_plus.codes().dim() != r_plus.codes().dim() {
        return Err(Error::Contract(format!(
            "cannot mix {:?} with {:?}",
            w_plus.codes().dim(),
            r_plus.codes().dim()
        )));
    }
    layers.check_against(w_plus.num_layers())?;
    let mut out = w_plus.clone();
    for &l in layers.layers() {
        out.codes_mut().row_mut(l).assign(&r_plus.row(l));
    }
    Ok(out)
}

/// Sum over taps of the mean absolute difference between the features of
/// `x_hat` and the precomputed `target` taps.
pub fn feature_match_graph<S: Scalar>(
    g: &mut Graph<S>,
    disc: &Discriminator<S>,
    x_hat: Var,
    target: &[Tensor<S>],
) -> Result<Var> {
    let taps = disc.feature_graph(g, x_hat)?;
    if taps.len() != target.len() {
        return Err(Error::Contract("target taps do not match the discriminator".into()));
    }
    let mut total: Option<Var> = None;
    for (&t, f) in taps.iter().zip(target) {
        if g.shape(t) != f.shape() {
            return Err(Error::Contract("target tap shape mismatch".into()));
        }
        let fv = g.constant(f.clone());
        let d = g.sub(t, fv);
        let a = g.abs(d);
        let m = g.mean(a);
        total = Some(match total {
            Some(acc) => g.add(acc, m),
            None => m,
        });
    }
    total.ok_or_else(|| Error::Config("discriminator exposes no taps".into()))
}

pub fn feature_match_loss<S: Scalar>(x_hat: &Image<S>, x_t: &Image<S>, disc: &Discriminator<S>) -> Result<S> {
    let target = disc.features(x_t)?;
    let mut g = Graph::new();
    let x = g.constant(x_hat.to_batch());
    let l = feature_match_graph(&mut g, disc, x, &target)?;
    Ok(g.scalar(l))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FinetuneConfig {
    pub iterations: usize,
    pub lr: f64,
    /// First-moment coefficient.
    pub beta1: f64,
    /// Second-moment coefficient.
    pub beta2: f64,
    pub style_layers: StyleLayerSet,
    pub seed: u64,
}

impl FinetuneConfig {
    pub fn new(style_layers: StyleLayerSet, seed: u64) -> Self {
        Self {
            iterations: 300,
            lr: 2e-3,
            beta1: 0.0,
            beta2: 0.99,
            style_layers,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.iterations > 0 && !(self.lr > 0.0) {
            return Err(Error::Config("learning rate must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("Adam coefficients must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct FinetuneReport<S> {
    pub trace: Vec<f64>,
    pub generator: Generator<S>,
    /// Seed of the random style latent drawn at each iteration.
    pub mix_seeds: Vec<u64>,
    /// Class used at each iteration (`None` for unconditional runs).
    pub schedule: Vec<Option<usize>>,
}

struct Job<'a, S> {
    condition: Option<usize>,
    w_plus: &'a ExtendedLatent<S>,
    taps: Vec<Tensor<S>>,
}

fn run<S: Scalar>(
    gen: &Generator<S>,
    disc: &Discriminator<S>,
    jobs: &[Job<'_, S>],
    cfg: &FinetuneConfig,
) -> Result<FinetuneReport<S>> {
    cfg.validate()?;
    cfg.style_layers.check_against(gen.num_layers())?;
    let mut gt = gen.clone();
    let trainable = gen.synthesis_slots();
    let mut opt = Adam::new(cfg.lr, cfg.beta1, cfg.beta2);
    let mut report = FinetuneReport {
        trace: Vec::with_capacity(cfg.iterations),
        generator: gen.clone(),
        mix_seeds: Vec::with_capacity(cfg.iterations),
        schedule: Vec::with_capacity(cfg.iterations),
    };
    for it in 0..cfg.iterations {
        let job = &jobs[it % jobs.len()];
        let seed = derive_seed(cfg.seed, MIX_STREAM, it as u64);
        let z = LatentZ::sample(&mut ChaCha8Rng::seed_from_u64(seed), gt.arch().latent_dim);
        let r_plus = gt.map_latent(&z, job.condition)?;
        let mixed = style_mix(job.w_plus, &r_plus, &cfg.style_layers)?;

        let mut g = Graph::new();
        let b = gt.params().bind(&mut g, |i| trainable.binary_search(&i).is_ok());
        let styles: Vec<Var> = mixed
            .codes()
            .rows()
            .into_iter()
            .map(|r| g.constant(r.to_owned().insert_axis(ndarray::Axis(0)).into_dyn()))
            .collect();
        let out = gt.synthesis_graph(&mut g, &b, &styles, None)?;
        let loss = feature_match_graph(&mut g, disc, out.image, &job.taps)?;
        let value = g.scalar(loss).to_f64().unwrap_or(f64::NAN);
        if !value.is_finite() {
            return Err(Error::NonFinite {
                what: "fine-tuning loss".into(),
                step: it,
            });
        }
        let mut grads = g.backward(loss);
        opt.step(gt.params_mut(), &b.grads(&mut grads));
        report.trace.push(value);
        report.mix_seeds.push(seed);
        report.schedule.push(job.condition);
    }
    report.generator = gt;
    Ok(report)
}

fn check_latent<S: Scalar>(gen: &Generator<S>, w: &ExtendedLatent<S>) -> Result<()> {
    if w.num_layers() != gen.num_layers() || w.dim() != gen.arch().style_dim {
        return Err(Error::Contract(format!(
            "inverted latent is {}x{}, generator expects {}x{}",
            w.num_layers(),
            w.dim(),
            gen.num_layers(),
            gen.arch().style_dim
        )));
    }
    Ok(())
}

/// Fine-tunes a copy of `gen` toward `x_t`. A conditional generator uses the
/// condition stored in `inv`. The discriminator is only read.
pub fn sista_g_finetune<S: Scalar>(
    x_t: &Image<S>,
    inv: &InversionResult<S>,
    gen: &Generator<S>,
    disc: &Discriminator<S>,
    cfg: &FinetuneConfig,
) -> Result<FinetuneReport<S>> {
    check_latent(gen, &inv.w_plus)?;
    if gen.is_conditional() && inv.condition.is_none() {
        return Err(Error::Config(
            "conditional generator needs an inversion with a condition".into(),
        ));
    }
    let job = Job {
        condition: inv.condition.filter(|_| gen.is_conditional()),
        w_plus: &inv.w_plus,
        taps: disc.features(x_t)?,
    };
    run(gen, disc, &[job], cfg)
}

/// One shared conditional generator fine-tuned on several class examples,
/// cycling through the classes in ascending order one iteration at a time.
pub fn sista_u_finetune<S: Scalar>(
    examples: &BTreeMap<usize, Image<S>>,
    inversions: &BTreeMap<usize, InversionResult<S>>,
    gen: &Generator<S>,
    disc: &Discriminator<S>,
    cfg: &FinetuneConfig,
) -> Result<FinetuneReport<S>> {
    let k = gen
        .classes()
        .ok_or_else(|| Error::Config("multi-class fine-tuning needs a class-conditional generator".into()))?;
    if examples.is_empty() {
        return Err(Error::Config("no class examples supplied".into()));
    }
    if !examples.keys().eq(inversions.keys()) {
        return Err(Error::Config("examples and inversions cover different classes".into()));
    }
    let mut jobs = Vec::with_capacity(examples.len());
    for (&class, x) in examples {
        if class >= k {
            return Err(Error::Config(format!("class {class} out of range for {k} classes")));
        }
        let inv = &inversions[&class];
        check_latent(gen, &inv.w_plus)?;
        jobs.push(Job {
            condition: Some(class),
            w_plus: &inv.w_plus,
            taps: disc.features(x)?,
        });
    }
    run(gen, disc, &jobs, cfg)
}

/// Independent fine-tuning of one generator per class, each seeded with
/// `seed + class`.
pub fn per_class_finetune<S: Scalar>(
    examples: &BTreeMap<usize, Image<S>>,
    inversions: &BTreeMap<usize, InversionResult<S>>,
    gens: &BTreeMap<usize, Generator<S>>,
    discs: &BTreeMap<usize, Discriminator<S>>,
    cfg: &FinetuneConfig,
) -> Result<BTreeMap<usize, FinetuneReport<S>>> {
    if !examples.keys().eq(gens.keys()) || !examples.keys().eq(inversions.keys()) || !examples.keys().eq(discs.keys()) {
        return Err(Error::Config(
            "examples, inversions, generators and discriminators must share class keys".into(),
        ));
    }
    examples
        .iter()
        .map(|(&class, x)| {
            let cfg = FinetuneConfig {
                seed: cfg.seed.wrapping_add(class as u64),
                ..cfg.clone()
            };
            let r = sista_g_finetune(x, &inversions[&class], &gens[&class], &discs[&class], &cfg)?;
            Ok((class, r))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stylegen::{DiscriminatorArch, GeneratorArch};
    use ndarray::{array, Array1, Array3};
    use proptest::prelude::{prop, prop_assert_eq, proptest};

    #[test]
    fn mix_swaps_rows() {
        let w = ExtendedLatent::new(array![[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]]).unwrap();
        let r = ExtendedLatent::new(array![[9.0, 9.0], [8.0, 8.0], [7.0, 7.0]]).unwrap();
        let m = style_mix(&w, &r, &StyleLayerSet::new(vec![2], 3).unwrap()).unwrap();
        assert_eq!(m.codes(), &array![[1.0, 1.0], [2.0, 2.0], [7.0, 7.0]]);
        assert_eq!(&style_mix(&w, &r, &StyleLayerSet::empty()).unwrap(), &w);
        assert_eq!(&style_mix(&w, &r, &StyleLayerSet::all(3)).unwrap(), &r);
        assert!(style_mix(&w, &r, &StyleLayerSet::new(vec![5], 6).unwrap()).is_err());
    }

    proptest! {
        #[test]
        fn mixing_is_idempotent(
            a in prop::collection::vec(-5.0f64..5.0, 8),
            b in prop::collection::vec(-5.0f64..5.0, 8),
            mask in prop::collection::vec(prop::bool::ANY, 4),
        ) {
            let w = ExtendedLatent::new(Array1::from(a).into_shape_with_order((4, 2)).unwrap()).unwrap();
            let r = ExtendedLatent::new(Array1::from(b).into_shape_with_order((4, 2)).unwrap()).unwrap();
            let set = StyleLayerSet::new((0..4).filter(|&i| mask[i]).collect(), 4).unwrap();
            let once = style_mix(&w, &r, &set).unwrap();
            prop_assert_eq!(style_mix(&once, &r, &set).unwrap(), once);
        }
    }

    fn disc() -> Discriminator<f64> {
        Discriminator::init(DiscriminatorArch::toy(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap()
    }

    fn random_image(seed: u64) -> Image<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(Array3::from_shape_fn((3, 32, 32), |_| {
            rand::Rng::random_range(&mut rng, -1.0..1.0)
        }))
        .unwrap()
    }

    #[test]
    fn feature_loss_is_a_symmetric_distance() {
        let d = disc();
        let (a, b) = (random_image(1), random_image(2));
        assert_eq!(feature_match_loss(&a, &a, &d).unwrap(), 0.0);
        let ab = feature_match_loss(&a, &b, &d).unwrap();
        assert!(ab > 0.0);
        assert_eq!(ab, feature_match_loss(&b, &a, &d).unwrap());
    }

    /// Generator and discriminator small enough for finite differences.
    fn tiny() -> (Generator<f64>, Discriminator<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let arch = GeneratorArch {
            latent_dim: 2,
            style_dim: 2,
            mapping_hidden: 2,
            channels: vec![2, 2],
            const_channels: 2,
            classes: None,
        };
        let darch = DiscriminatorArch {
            channels: vec![2],
            feature_dim: 2,
            resolution: 8,
        };
        (
            Generator::init(arch, &mut rng).unwrap(),
            Discriminator::init(darch, &mut rng).unwrap(),
        )
    }

    #[test]
    fn generator_gradient_matches_finite_differences() {
        let (gen, d) = tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = gen.map_latent(&LatentZ::sample(&mut rng, 2), None).unwrap();
        let target = {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            Image::new(Array3::from_shape_fn((3, 8, 8), |_| {
                rand::Rng::random_range(&mut rng, -1.0..1.0)
            }))
            .unwrap()
        };
        let taps = d.features(&target).unwrap();
        let slots = gen.synthesis_slots();
        let loss_of = |gen: &Generator<f64>| -> (f64, Vec<Option<Tensor<f64>>>) {
            let mut g = Graph::new();
            let b = gen.params().bind(&mut g, |i| slots.contains(&i));
            let styles: Vec<Var> = (0..2)
                .map(|l| g.constant(w.row(l).to_owned().insert_axis(ndarray::Axis(0)).into_dyn()))
                .collect();
            let out = gen.synthesis_graph(&mut g, &b, &styles, None).unwrap();
            let l = feature_match_graph(&mut g, &d, out.image, &taps).unwrap();
            let v = g.scalar(l);
            let mut gr = g.backward(l);
            (v, b.grads(&mut gr))
        };
        let (_, grads) = loss_of(&gen);
        let num_params: usize = slots.iter().map(|&i| gen.params().tensor(i).len()).sum();
        assert!((50..=200).contains(&num_params), "{num_params}");
        let h = 1e-5;
        let mut checked = 0;
        for &i in &slots {
            let analytic = grads[i].as_ref().unwrap();
            for j in 0..gen.params().tensor(i).len() {
                let mut up = gen.clone();
                up.params_mut().tensor_mut(i).as_slice_mut().unwrap()[j] += h;
                let mut dn = gen.clone();
                dn.params_mut().tensor_mut(i).as_slice_mut().unwrap()[j] -= h;
                let num = (loss_of(&up).0 - loss_of(&dn).0) / (2.0 * h);
                let an = analytic.as_slice().unwrap()[j];
                // L1 kinks make a few coordinates ill-conditioned; require tight agreement elsewhere
                if (num - an).abs() > 1e-2 * num.abs().max(an.abs()) + 1e-6 {
                    panic!("slot {i}[{j}]: numeric {num} analytic {an}");
                }
                checked += 1;
            }
        }
        assert_eq!(checked, num_params);
    }

    #[test]
    fn zero_iterations_return_the_source_generator() {
        let (gen, d) = tiny();
        let inv = InversionResult {
            w_plus: gen
                .map_latent(&LatentZ::sample(&mut ChaCha8Rng::seed_from_u64(0), 2), None)
                .unwrap(),
            condition: None,
            final_loss: 0.0,
            trace: vec![0.0],
        };
        let x = gen.synthesize(&inv.w_plus, None, None).unwrap().0;
        let cfg = FinetuneConfig {
            iterations: 0,
            ..FinetuneConfig::new(StyleLayerSet::new(vec![1], 2).unwrap(), 0)
        };
        let r = sista_g_finetune(&x, &inv, &gen, &d, &cfg).unwrap();
        assert_eq!(r.generator.checksum(), gen.checksum());
        assert!(r.trace.is_empty());
    }
}
