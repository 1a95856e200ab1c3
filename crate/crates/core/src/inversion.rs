//! Optimisation-based projection of an image into a generator's extended
//! style space, optionally recovering the class condition.

use std::path::Path;

use ndarray::{Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::finetune::feature_match_graph;
use crate::graph::{Graph, Tensor};
use crate::nn::Adam;
use crate::scalar::{c, Scalar};
use crate::stylegen::{Discriminator, ExtendedLatent, Generator, Image, LatentZ};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitMode {
    MeanLatent,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InversionConfig {
    pub steps: usize,
    pub step_size: f64,
    pub pixel_weight: f64,
    pub feature_weight: f64,
    pub init: InitMode,
    /// Draws averaged for the mean-latent start.
    pub mean_samples: usize,
    pub seed: u64,
    /// Backtracking gradient descent with a non-increasing trace instead of Adam.
    #[serde(default)]
    pub monotone: bool,
}

impl Default for InversionConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            step_size: 0.05,
            pixel_weight: 1.0,
            feature_weight: 0.8,
            init: InitMode::MeanLatent,
            mean_samples: 10_000,
            seed: 0,
            monotone: false,
        }
    }
}

impl InversionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::Config("inversion needs at least one step".into()));
        }
        if self.pixel_weight < 0.0 || self.feature_weight < 0.0 || self.pixel_weight + self.feature_weight == 0.0 {
            return Err(Error::Config("loss weights must be >= 0 and not both zero".into()));
        }
        if !(self.step_size >= 0.0) {
            return Err(Error::Config(format!("step size {} must be >= 0", self.step_size)));
        }
        if self.init == InitMode::MeanLatent && self.mean_samples == 0 {
            return Err(Error::Config("mean-latent init needs at least one draw".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InversionResult<S> {
    pub w_plus: ExtendedLatent<S>,
    pub condition: Option<usize>,
    pub final_loss: f64,
    /// Loss after each step.
    pub trace: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ResultFile {
    w_plus: Vec<Vec<f64>>,
    condition: Option<usize>,
    final_loss: f64,
    trace: Vec<f64>,
}

impl<S: Scalar> InversionResult<S> {
    pub fn to_json(&self) -> Result<String> {
        let f = ResultFile {
            w_plus: self
                .w_plus
                .codes()
                .rows()
                .into_iter()
                .map(|r| r.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect())
                .collect(),
            condition: self.condition,
            final_loss: self.final_loss,
            trace: self.trace.clone(),
        };
        Ok(serde_json::to_string_pretty(&f)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: ResultFile = serde_json::from_str(s)?;
        let l = f.w_plus.len();
        let d = f.w_plus.first().map_or(0, Vec::len);
        if f.w_plus.iter().any(|r| r.len() != d) {
            return Err(Error::Contract("ragged w+ rows in result file".into()));
        }
        let codes = Array2::from_shape_fn((l, d), |(i, j)| c::<S>(f.w_plus[i][j]));
        Ok(Self {
            w_plus: ExtendedLatent::new(codes)?,
            condition: f.condition,
            final_loss: f.final_loss,
            trace: f.trace,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

struct Objective<'a, S> {
    gen: &'a Generator<S>,
    disc: &'a Discriminator<S>,
    target: Tensor<S>,
    target_taps: Vec<Tensor<S>>,
    pixel_weight: S,
    feature_weight: S,
}

impl<'a, S: Scalar> Objective<'a, S> {
    fn new(x_t: &Image<S>, gen: &'a Generator<S>, disc: &'a Discriminator<S>, cfg: &InversionConfig) -> Result<Self> {
        let r = gen.resolution();
        if x_t.height() != r || x_t.width() != r {
            return Err(Error::Contract(format!(
                "target is {}x{}, generator renders {r}x{r}",
                x_t.height(),
                x_t.width()
            )));
        }
        Ok(Self {
            gen,
            disc,
            target: x_t.to_batch(),
            target_taps: disc.features(x_t)?,
            pixel_weight: c(cfg.pixel_weight),
            feature_weight: c(cfg.feature_weight),
        })
    }

    /// Loss at `w` and its gradient with respect to every row.
    fn eval(&self, w: &Array2<S>) -> Result<(f64, Array2<S>)> {
        let mut g = Graph::new();
        let b = self.gen.params().bind_frozen(&mut g);
        let rows: Vec<_> = w
            .rows()
            .into_iter()
            .map(|r| g.param(r.to_owned().insert_axis(Axis(0)).into_dyn()))
            .collect();
        let out = self.gen.synthesis_graph(&mut g, &b, &rows, None)?;
        let t = g.constant(self.target.clone());
        let d = g.sub(out.image, t);
        let sq = g.square(d);
        let pix = g.mean(sq);
        let pix = g.scale(pix, self.pixel_weight);
        let feat = feature_match_graph(&mut g, self.disc, out.image, &self.target_taps)?;
        let feat = g.scale(feat, self.feature_weight);
        let loss = g.add(pix, feat);
        let value = g.scalar(loss).to_f64().unwrap_or(f64::NAN);
        let grads = g.backward(loss);
        let mut grad = Array2::zeros(w.raw_dim());
        for (i, &r) in rows.iter().enumerate() {
            if let Some(gr) = grads.get(r) {
                grad.row_mut(i).assign(&gr.index_axis(Axis(0), 0));
            }
        }
        Ok((value, grad))
    }
}

fn non_finite(step: usize) -> Error {
    Error::NonFinite {
        what: "inversion loss".into(),
        step,
    }
}

fn initial_latent<S: Scalar>(gen: &Generator<S>, condition: Option<usize>, cfg: &InversionConfig) -> Result<Array2<S>> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let w = match cfg.init {
        InitMode::MeanLatent => gen.mean_latent(cfg.mean_samples, condition, &mut rng)?,
        InitMode::Random => gen.map_latent(&LatentZ::sample(&mut rng, gen.arch().latent_dim), condition)?,
    };
    Ok(w.codes().clone())
}

fn optimise<S: Scalar>(
    x_t: &Image<S>,
    gen: &Generator<S>,
    disc: &Discriminator<S>,
    condition: Option<usize>,
    cfg: &InversionConfig,
) -> Result<InversionResult<S>> {
    cfg.validate()?;
    let obj = Objective::new(x_t, gen, disc, cfg)?;
    let mut w = initial_latent(gen, condition, cfg)?;
    let (mut loss, mut grad) = obj.eval(&w)?;
    if !loss.is_finite() {
        return Err(non_finite(0));
    }
    let mut trace = Vec::with_capacity(cfg.steps);
    let mut adam = Adam::new(cfg.step_size, 0.9, 0.999);
    for step in 0..cfg.steps {
        if cfg.monotone {
            // try a doubled step first, then halve until the loss does not rise
            let mut eta = 2.0 * cfg.step_size;
            for _ in 0..30 {
                let e: S = c(eta);
                let cand = &w - &grad.mapv(|v| v * e);
                let (l, gr) = obj.eval(&cand)?;
                if l.is_finite() && l <= loss {
                    (w, loss, grad) = (cand, l, gr);
                    break;
                }
                eta *= 0.5;
            }
        } else {
            let mut params = [w.into_dyn()];
            adam.step_tensors(&mut params, &[grad.into_dyn()]);
            let [p] = params;
            w = p.into_dimensionality().expect("2-D latent");
            (loss, grad) = obj.eval(&w)?;
        }
        if !loss.is_finite() {
            return Err(non_finite(step));
        }
        trace.push(loss);
    }
    Ok(InversionResult {
        w_plus: ExtendedLatent::new(w)?,
        condition,
        final_loss: loss,
        trace,
    })
}

/// Inverts `x_t` with an unconditional generator; both networks stay frozen.
pub fn invert<S: Scalar>(
    x_t: &Image<S>,
    gen: &Generator<S>,
    disc: &Discriminator<S>,
    cfg: &InversionConfig,
) -> Result<InversionResult<S>> {
    if gen.is_conditional() {
        return Err(Error::Config(
            "use conditional inversion for a class-conditional generator".into(),
        ));
    }
    optimise(x_t, gen, disc, None, cfg)
}

/// Inverts with a class-conditional generator. With a label only `w⁺` is
/// searched; otherwise every class is tried and the lowest final loss wins
/// (ties to the lower class).
pub fn invert_conditional<S: Scalar>(
    x_t: &Image<S>,
    gen: &Generator<S>,
    disc: &Discriminator<S>,
    cfg: &InversionConfig,
    label: Option<usize>,
) -> Result<InversionResult<S>> {
    let k = gen
        .classes()
        .ok_or_else(|| Error::Config("conditional inversion needs a class-conditional generator".into()))?;
    if k == 0 {
        return Err(Error::Config("generator has zero classes".into()));
    }
    if let Some(l) = label {
        if l >= k {
            return Err(Error::Config(format!("label {l} out of range for {k} classes")));
        }
        return optimise(x_t, gen, disc, Some(l), cfg);
    }
    let mut best: Option<InversionResult<S>> = None;
    for class in 0..k {
        let r = optimise(x_t, gen, disc, Some(class), cfg)?;
        if best.as_ref().is_none_or(|b| r.final_loss < b.final_loss) {
            best = Some(r);
        }
    }
    Ok(best.expect("at least one class"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stylegen::{DiscriminatorArch, GeneratorArch};

    fn nets() -> (Generator<f64>, Discriminator<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        (
            Generator::init(GeneratorArch::toy(), &mut rng).unwrap(),
            Discriminator::init(DiscriminatorArch::toy(), &mut rng).unwrap(),
        )
    }

    fn target(g: &Generator<f64>) -> Image<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let w = g.map_latent(&LatentZ::sample(&mut rng, 64), None).unwrap();
        g.synthesize(&w, None, None).unwrap().0
    }

    #[test]
    fn zero_step_size_keeps_the_initial_latent() {
        let (g, d) = nets();
        let cfg = InversionConfig {
            steps: 1,
            step_size: 0.0,
            mean_samples: 50,
            ..InversionConfig::default()
        };
        let r = invert(&target(&g), &g, &d, &cfg).unwrap();
        assert_eq!(r.w_plus.codes(), &initial_latent(&g, None, &cfg).unwrap());
        assert_eq!(r.trace.len(), 1);
        assert_eq!(r.final_loss, r.trace[0]);
    }

    #[test]
    fn monotone_trace_never_rises() {
        let (g, d) = nets();
        let cfg = InversionConfig {
            steps: 15,
            step_size: 0.5,
            monotone: true,
            mean_samples: 50,
            ..InversionConfig::default()
        };
        let r = invert(&target(&g), &g, &d, &cfg).unwrap();
        assert!(r.trace.windows(2).all(|w| w[1] <= w[0]));
        assert!(r.trace.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn rejects_bad_configs_and_conditions() {
        let (g, d) = nets();
        let x = target(&g);
        let zero = InversionConfig {
            steps: 0,
            ..InversionConfig::default()
        };
        assert!(invert(&x, &g, &d, &zero).is_err());
        let weights = InversionConfig {
            pixel_weight: 0.0,
            feature_weight: 0.0,
            ..InversionConfig::default()
        };
        assert!(invert(&x, &g, &d, &weights).is_err());
        assert!(invert_conditional(&x, &g, &d, &InversionConfig::default(), None).is_err());
    }

    #[test]
    fn result_file_round_trip() {
        let r = InversionResult {
            w_plus: ExtendedLatent::new(ndarray::array![[0.5f64, -1.0], [2.0, 0.25]]).unwrap(),
            condition: Some(1),
            final_loss: 0.3,
            trace: vec![0.4, 0.3],
        };
        assert_eq!(InversionResult::from_json(&r.to_json().unwrap()).unwrap(), r);
    }
}
