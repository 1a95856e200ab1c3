//! Source-free classifier adaptation with neighbourhood-reciprocity
//! clustering: neighbour consistency weighted by reciprocal affinity, self
//! consistency, expanded neighbourhoods, and a batch diversity term.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, ModelKind};
use crate::data::LabeledDataset;
use crate::error::{Error, Result};
use crate::graph::{softmax_rows, Graph, Var};
use crate::nn::{he_tensor, zeros, Bound, Optimizer, ParamSet, Sgd};
use crate::sampler::{load_manifest_images, SyntheticManifest};
use crate::scalar::{c, Scalar};
use crate::stylegen::Image;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifierArch {
    pub channels: Vec<usize>,
    pub feature_dim: usize,
    pub classes: usize,
    pub resolution: usize,
}

impl ClassifierArch {
    /// Three conv/norm/pool blocks, a 64-wide normalised bottleneck, linear head.
    pub fn toy(classes: usize) -> Self {
        Self {
            channels: vec![16, 32, 32],
            feature_dim: 64,
            classes,
            resolution: 32,
        }
    }

    fn flat_dim(&self) -> usize {
        let side = self.resolution >> self.channels.len();
        self.channels.last().copied().unwrap_or(3) * side * side
    }
}

/// Slots of one batch-norm layer: affine scale and shift, running moments.
#[derive(Clone, Copy, Debug)]
struct NormSlots {
    gain: usize,
    shift: usize,
    mean: usize,
    var: usize,
}

#[derive(Clone, Debug)]
struct ClsSlots {
    convs: Vec<(usize, NormSlots)>,
    fc_w: usize,
    fc_norm: NormSlots,
    head_w: usize,
    head_b: usize,
}

impl ClsSlots {
    fn norms(&self) -> impl Iterator<Item = NormSlots> + '_ {
        self.convs.iter().map(|c| c.1).chain(std::iter::once(self.fc_norm))
    }
}

/// How batch-norm layers pick their statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Moments of the current batch; the pass reports them for
    /// [`ClassifierHandle::absorb_moments`].
    Batch,
    /// Stored running moments.
    Running,
}

/// Graph handles of one classifier pass.
#[derive(Clone, Debug)]
pub struct Forward<S> {
    /// Bottleneck output, the representation neighbourhoods are built on.
    pub features: Var,
    pub logits: Var,
    moments: Vec<(Vec<S>, Vec<S>)>,
}

const NORM_EPS: f64 = 1e-5;
const NORM_MOMENTUM: f64 = 0.1;

/// Feature extractor plus linear head.
#[derive(Clone, Debug)]
pub struct ClassifierHandle<S> {
    arch: ClassifierArch,
    params: ParamSet<S>,
    slots: ClsSlots,
}

const EVAL_BATCH: usize = 128;

fn norm_layout(v: &mut Vec<(String, Vec<usize>)>, prefix: &str, ch: usize) {
    for stat in ["gain", "shift", "mean", "var"] {
        v.push((format!("{prefix}.{stat}"), vec![ch]));
    }
}

/// Per-channel mean and biased variance of an `[N, C, ...]` tensor.
fn channel_moments<S: Scalar>(t: &crate::graph::Tensor<S>) -> (Vec<S>, Vec<S>) {
    let ch = t.shape()[1];
    let mut mean = Vec::with_capacity(ch);
    let mut var = Vec::with_capacity(ch);
    for ci in 0..ch {
        let lane = t.index_axis(Axis(1), ci);
        let m = lane.mean().unwrap_or_else(S::zero);
        mean.push(m);
        var.push(lane.mapv(|e| (e - m) * (e - m)).mean().unwrap_or_else(S::zero));
    }
    (mean, var)
}

impl<S: Scalar> ClassifierHandle<S> {
    fn layout(arch: &ClassifierArch) -> Vec<(String, Vec<usize>)> {
        let mut v = Vec::new();
        let mut cin = 3;
        for (l, &co) in arch.channels.iter().enumerate() {
            v.push((format!("c.{l}.w"), vec![co, cin, 3, 3]));
            norm_layout(&mut v, &format!("c.{l}.norm"), co);
            cin = co;
        }
        v.push(("c.fc.w".into(), vec![arch.flat_dim(), arch.feature_dim]));
        norm_layout(&mut v, "c.fc.norm", arch.feature_dim);
        v.push(("c.head.w".into(), vec![arch.feature_dim, arch.classes]));
        v.push(("c.head.b".into(), vec![arch.classes]));
        v
    }

    pub fn init<R: Rng + ?Sized>(arch: ClassifierArch, rng: &mut R) -> Result<Self> {
        let mut params = ParamSet::new();
        for (name, shape) in Self::layout(&arch) {
            let t = if name.ends_with(".gain") || name.ends_with(".var") {
                zeros(&shape).mapv(|_: S| S::one())
            } else if shape.len() == 1 {
                zeros(&shape)
            } else if shape.len() == 4 {
                he_tensor(rng, &shape, shape[1] * 9)
            } else {
                he_tensor(rng, &shape, shape[0])
            };
            params.push(name, t);
        }
        Self::from_params(arch, params)
    }

    pub fn from_params(arch: ClassifierArch, params: ParamSet<S>) -> Result<Self> {
        if arch.classes < 2 || arch.channels.is_empty() || arch.resolution >> arch.channels.len() == 0 {
            return Err(Error::Config(format!("unusable classifier architecture {arch:?}")));
        }
        let expected = Self::layout(&arch);
        if expected.len() != params.len()
            || expected
                .iter()
                .zip(params.iter())
                .any(|((n, s), (m, t))| n != m || s.as_slice() != t.shape())
        {
            return Err(Error::Config(
                "classifier parameters do not match the architecture".into(),
            ));
        }
        let at = |n: &str| params.index_of(n).expect("layout checked");
        let norm = |p: &str| NormSlots {
            gain: at(&format!("{p}.gain")),
            shift: at(&format!("{p}.shift")),
            mean: at(&format!("{p}.mean")),
            var: at(&format!("{p}.var")),
        };
        let slots = ClsSlots {
            convs: (0..arch.channels.len())
                .map(|l| (at(&format!("c.{l}.w")), norm(&format!("c.{l}.norm"))))
                .collect(),
            fc_w: at("c.fc.w"),
            fc_norm: norm("c.fc.norm"),
            head_w: at("c.head.w"),
            head_b: at("c.head.b"),
        };
        Ok(Self { arch, params, slots })
    }

    pub fn arch(&self) -> &ClassifierArch {
        &self.arch
    }

    pub fn classes(&self) -> usize {
        self.arch.classes
    }

    pub fn feature_dim(&self) -> usize {
        self.arch.feature_dim
    }

    pub fn params(&self) -> &ParamSet<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<S> {
        &mut self.params
    }

    /// Hash over every tensor, running moments included.
    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    /// Hash over the learnable tensors only.
    pub fn weight_checksum(&self) -> String {
        let moments = self.moment_slots();
        let mut w = ParamSet::new();
        for (i, (name, t)) in self.params.iter().enumerate() {
            if !moments.contains(&i) {
                w.push(name, t.clone());
            }
        }
        w.checksum()
    }

    pub fn head_slots(&self) -> [usize; 2] {
        [self.slots.head_w, self.slots.head_b]
    }

    /// Convolution weights and their normalisation affines.
    pub fn backbone_slots(&self) -> Vec<usize> {
        self.slots
            .convs
            .iter()
            .flat_map(|&(w, n)| [w, n.gain, n.shift])
            .collect()
    }

    /// Running-moment slots; these are never optimised.
    pub fn moment_slots(&self) -> Vec<usize> {
        self.slots.norms().flat_map(|n| [n.mean, n.var]).collect()
    }

    /// Binds the parameters; `trainable(i)` is ignored for moment slots.
    pub fn bind(&self, g: &mut Graph<S>, trainable: impl Fn(usize) -> bool) -> Bound {
        let moments = self.moment_slots();
        self.params.bind(g, |i| !moments.contains(&i) && trainable(i))
    }

    fn normalize(
        &self,
        g: &mut Graph<S>,
        b: &Bound,
        h: Var,
        n: NormSlots,
        mode: NormMode,
        out: &mut Vec<(Vec<S>, Vec<S>)>,
    ) -> Var {
        let h = match mode {
            NormMode::Batch => {
                out.push(channel_moments(g.value(h)));
                g.batch_norm(h, c(NORM_EPS))
            }
            NormMode::Running => {
                let mean = self.params.tensor(n.mean);
                let inv = self.params.tensor(n.var).mapv(|v| S::one() / (v + c(NORM_EPS)).sqrt());
                let shift = (mean * &inv).mapv(|v| -v);
                let (a, s) = (g.constant(inv), g.constant(shift));
                g.channel_affine(h, a, s)
            }
        };
        g.channel_affine(h, b.var(n.gain), b.var(n.shift))
    }

    /// `x[N, 3, H, W]` to bottleneck features `[N, F]` and logits `[N, C]`.
    pub fn forward_graph(&self, g: &mut Graph<S>, b: &Bound, x: Var, mode: NormMode) -> Forward<S> {
        let n = g.shape(x)[0];
        let mut moments = Vec::new();
        let mut h = x;
        for &(w, norm) in &self.slots.convs {
            h = g.conv2d(h, b.var(w), 1);
            h = self.normalize(g, b, h, norm, mode, &mut moments);
            h = g.relu(h);
            h = g.avg_pool2(h);
        }
        let flat = g.reshape(h, &[n, self.arch.flat_dim()]);
        let f = g.matmul(flat, b.var(self.slots.fc_w));
        let features = self.normalize(g, b, f, self.slots.fc_norm, mode, &mut moments);
        let logits = g.matmul(features, b.var(self.slots.head_w));
        let logits = g.bias_add(logits, b.var(self.slots.head_b));
        Forward {
            features,
            logits,
            moments,
        }
    }

    /// Folds the batch moments of a [`NormMode::Batch`] pass into the running
    /// moments.
    pub fn absorb_moments(&mut self, f: &Forward<S>) {
        let m: S = c(NORM_MOMENTUM);
        let norms: Vec<NormSlots> = self.slots.norms().collect();
        for (n, (mean, var)) in norms.into_iter().zip(&f.moments) {
            for (slot, batch) in [(n.mean, mean), (n.var, var)] {
                let t = self.params.tensor_mut(slot);
                for (r, &v) in t.iter_mut().zip(batch) {
                    *r = *r + m * (v - *r);
                }
            }
        }
    }

    fn check_images(&self, images: &[&Image<S>]) -> Result<()> {
        let r = self.arch.resolution;
        match images.iter().find(|im| im.height() != r || im.width() != r) {
            Some(im) => Err(Error::Contract(format!(
                "classifier expects {r}x{r} input, got {}x{}",
                im.height(),
                im.width()
            ))),
            None => Ok(()),
        }
    }

    /// Raw features and softmax scores, in input order.
    pub fn forward(&self, images: &[&Image<S>]) -> Result<(Array2<S>, Array2<S>)> {
        self.check_images(images)?;
        let mut feats = Array2::zeros((images.len(), self.arch.feature_dim));
        let mut probs = Array2::zeros((images.len(), self.arch.classes));
        for (bi, chunk) in images.chunks(EVAL_BATCH).enumerate() {
            let mut g = Graph::new();
            let b = self.params.bind_frozen(&mut g);
            let x = g.constant(Image::stack(chunk));
            let out = self.forward_graph(&mut g, &b, x, NormMode::Running);
            let lo = bi * EVAL_BATCH;
            let hi = lo + chunk.len();
            feats.slice_mut(s![lo..hi, ..]).assign(&as2(g.value(out.features)));
            probs
                .slice_mut(s![lo..hi, ..])
                .assign(&softmax_rows(as2(g.value(out.logits)).view()));
        }
        Ok((feats, probs))
    }

    pub fn predict(&self, images: &[&Image<S>]) -> Result<Vec<usize>> {
        let (_, p) = self.forward(images)?;
        Ok(p.rows().into_iter().map(argmax).collect())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        checkpoint::encode(ModelKind::Classifier, &self.arch, &self.params)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, p) = checkpoint::decode(bytes)?;
        Self::from_header(h, p)
    }

    fn from_header(h: checkpoint::Header, p: ParamSet<S>) -> Result<Self> {
        if h.kind != ModelKind::Classifier {
            return Err(Error::Config(format!(
                "checkpoint holds a {:?}, not a classifier",
                h.kind
            )));
        }
        Self::from_params(serde_json::from_value(h.arch)?, p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, ModelKind::Classifier, &self.arch, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, p) = checkpoint::load(path, "toy")?;
        Self::from_header(h, p)
    }
}

fn as2<S: Scalar>(t: &crate::graph::Tensor<S>) -> Array2<S> {
    t.clone().into_dimensionality().expect("2-D tensor")
}

pub(crate) fn argmax<S: Scalar>(row: ndarray::ArrayView1<'_, S>) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Splits `order` into batches of `size`; a trailing single sample joins the
/// previous batch so batch moments stay defined.
pub(crate) fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size.max(1)).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let start = order.len() - 1 - out.last().map_or(0, |b| b.len());
        *out.last_mut().expect("at least one batch") = &order[start..];
    }
    out
}

fn normalize_rows<S: Scalar>(m: &mut Array2<S>) {
    for mut row in m.rows_mut() {
        let n = row.iter().map(|&v| v * v).sum::<S>().sqrt();
        let n = n.max(c(1e-12));
        row.mapv_inplace(|v| v / n);
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NRCConfig {
    /// Neighbours per sample.
    pub k: usize,
    /// Neighbours per neighbour in the expanded neighbourhood.
    pub expanded: usize,
    /// Affinity of a non-reciprocal neighbour.
    pub r_hat: f64,
    /// Affinity of an expanded neighbour.
    pub r: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    /// Train only the linear head; normalisation moments still follow the
    /// adaptation batches.
    #[serde(default)]
    pub head_only: bool,
    /// Learning-rate multiplier for the convolutional blocks; the bottleneck
    /// and head use `lr`.
    #[serde(default = "default_backbone_scale")]
    pub backbone_lr_scale: f64,
    #[serde(default)]
    pub seed: u64,
}

fn default_backbone_scale() -> f64 {
    0.1
}

impl Default for NRCConfig {
    fn default() -> Self {
        Self {
            k: 5,
            expanded: 5,
            r_hat: 0.1,
            r: 0.1,
            epochs: 15,
            batch_size: 32,
            lr: 1e-3,
            momentum: 0.9,
            head_only: false,
            backbone_lr_scale: 0.1,
            seed: 0,
        }
    }
}

impl NRCConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 || self.expanded == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "K, expanded size and batch size must be at least 1".into(),
            ));
        }
        for (name, a) in [("r_hat", self.r_hat), ("r", self.r)] {
            if !(a > 0.0 && a <= 1.0) {
                return Err(Error::Config(format!("affinity {name}={a} outside (0, 1]")));
            }
        }
        if !(0.0..=1.0).contains(&self.backbone_lr_scale) {
            return Err(Error::Config(format!(
                "backbone lr scale {} outside [0, 1]",
                self.backbone_lr_scale
            )));
        }
        if self.lr < 0.0 || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(
                "learning rate must be >= 0 and momentum in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Feature bank (L2-normalised rows) and score bank (softmax rows), indexed
/// by sample id.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptState<S> {
    pub features: Array2<S>,
    pub scores: Array2<S>,
}

impl<S: Scalar> AdaptState<S> {
    pub fn new(mut features: Array2<S>, scores: Array2<S>) -> Result<Self> {
        if features.nrows() != scores.nrows() {
            return Err(Error::Contract("feature and score banks differ in length".into()));
        }
        normalize_rows(&mut features);
        Ok(Self { features, scores })
    }

    pub fn from_images(model: &ClassifierHandle<S>, images: &[&Image<S>]) -> Result<Self> {
        let (f, p) = model.forward(images)?;
        Self::new(f, p)
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    /// Overwrites rows `ids` with fresh raw features and scores.
    pub fn refresh(&mut self, ids: &[usize], features: &Array2<S>, scores: &Array2<S>) {
        let mut f = features.clone();
        normalize_rows(&mut f);
        for (r, &i) in ids.iter().enumerate() {
            self.features.row_mut(i).assign(&f.row(r));
            self.scores.row_mut(i).assign(&scores.row(r));
        }
    }

    /// `k` most cosine-similar bank rows to row `i`, excluding `i`; ties go to
    /// the lower id.
    pub fn neighbors(&self, i: usize, k: usize) -> Vec<usize> {
        let q = self.features.row(i);
        let sims = self.features.dot(&q);
        let mut order: Vec<usize> = (0..self.len()).filter(|&j| j != i).collect();
        order.sort_by(|&a, &b| {
            sims[b]
                .partial_cmp(&sims[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        order.truncate(k);
        order
    }
}

/// Builds both banks from one forward pass over the manifest images.
pub fn build_banks<S: Scalar>(model: &ClassifierHandle<S>, manifest: &SyntheticManifest) -> Result<AdaptState<S>> {
    let images = load_manifest_images::<S>(manifest)?;
    let refs: Vec<&Image<S>> = images.iter().collect();
    AdaptState::from_images(model, &refs)
}

fn check_bank_size<S: Scalar>(state: &AdaptState<S>, cfg: &NRCConfig) -> Result<()> {
    if state.len() <= cfg.k.max(cfg.expanded) {
        return Err(Error::Config(format!(
            "{} samples cannot supply {} distinct neighbours",
            state.len(),
            cfg.k.max(cfg.expanded)
        )));
    }
    Ok(())
}

fn affinities<S: Scalar>(state: &AdaptState<S>, i: usize, cfg: &NRCConfig) -> Vec<(usize, S)> {
    state
        .neighbors(i, cfg.k)
        .into_iter()
        .map(|k| {
            let reciprocal = state.neighbors(k, cfg.k).contains(&i);
            (k, if reciprocal { S::one() } else { c(cfg.r_hat) })
        })
        .collect()
}

/// Neighbour id to affinity: 1 when the relation is reciprocal, `r̂` otherwise.
pub fn reciprocal_affinity<S: Scalar>(state: &AdaptState<S>, i: usize, cfg: &NRCConfig) -> Result<BTreeMap<usize, S>> {
    check_bank_size(state, cfg)?;
    Ok(affinities(state, i, cfg).into_iter().collect())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub neigh: f64,
    #[serde(rename = "self")]
    pub self_: f64,
    pub exp: f64,
    pub div: f64,
    pub total: f64,
}

/// Per-sample consistency targets `(Σ A·S_k, S_i, Σ r·S_m)`, rows in batch order.
fn nrc_targets<S: Scalar>(state: &AdaptState<S>, ids: &[usize], cfg: &NRCConfig) -> [Array2<S>; 3] {
    let cdim = state.scores.ncols();
    let mut neigh = Array2::zeros((ids.len(), cdim));
    let mut selfc = Array2::zeros((ids.len(), cdim));
    let mut expd = Array2::zeros((ids.len(), cdim));
    let r: S = c(cfg.r);
    for (row, &i) in ids.iter().enumerate() {
        selfc.row_mut(row).assign(&state.scores.row(i));
        for (k, a) in affinities(state, i, cfg) {
            neigh.row_mut(row).scaled_add(a, &state.scores.row(k));
            for m in state.neighbors(k, cfg.expanded) {
                if m != i {
                    expd.row_mut(row).scaled_add(r, &state.scores.row(m));
                }
            }
        }
    }
    [neigh, selfc, expd]
}

/// Graph form of the objective; returns `(total, [neigh, self, exp, div])`.
pub fn nrc_loss_graph<S: Scalar>(
    g: &mut Graph<S>,
    probs: Var,
    ids: &[usize],
    state: &AdaptState<S>,
    cfg: &NRCConfig,
) -> Result<(Var, [Var; 4])> {
    if ids.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    check_bank_size(state, cfg)?;
    if let Some(&bad) = ids.iter().find(|&&i| i >= state.len()) {
        return Err(Error::Contract(format!("sample id {bad} outside the bank")));
    }
    let neg_inv_b: S = c(-1.0 / ids.len() as f64);
    let mut parts = [probs; 4];
    for (slot, t) in nrc_targets(state, ids, cfg).into_iter().enumerate() {
        let t = g.constant(t.into_dyn());
        let dot = g.mul(probs, t);
        let s = g.sum(dot);
        parts[slot] = g.scale(s, neg_inv_b);
    }
    let mean = g.mean_rows(probs);
    parts[3] = g.kl_uniform(mean);
    let a = g.add(parts[0], parts[1]);
    let b = g.add(parts[2], parts[3]);
    let total = g.add(a, b);
    Ok((total, parts))
}

fn components<S: Scalar>(g: &Graph<S>, total: Var, parts: &[Var; 4]) -> LossComponents {
    let v = |x: Var| g.scalar(x).to_f64().unwrap_or(f64::NAN);
    LossComponents {
        neigh: v(parts[0]),
        self_: v(parts[1]),
        exp: v(parts[2]),
        div: v(parts[3]),
        total: v(total),
    }
}

fn check_finite(l: &LossComponents, step: usize) -> Result<()> {
    for (name, v) in [
        ("L_neigh", l.neigh),
        ("L_self", l.self_),
        ("L_exp", l.exp),
        ("L_div", l.div),
    ] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                what: name.to_string(),
                step,
            });
        }
    }
    Ok(())
}

/// Value form of the objective for given batch predictions `p[B, C]`.
pub fn nrc_loss<S: Scalar>(
    p: &Array2<S>,
    ids: &[usize],
    state: &AdaptState<S>,
    cfg: &NRCConfig,
) -> Result<LossComponents> {
    if p.nrows() != ids.len() {
        return Err(Error::Contract("one prediction row per id".into()));
    }
    let mut g = Graph::new();
    let pv = g.constant(p.clone().into_dyn());
    let (total, parts) = nrc_loss_graph(&mut g, pv, ids, state, cfg)?;
    let l = components(&g, total, &parts);
    check_finite(&l, 0)?;
    Ok(l)
}

/// One optimizer step's record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub loss: LossComponents,
    /// Entropy of the batch-mean prediction.
    pub mean_entropy: f64,
}

#[derive(Clone, Debug)]
pub struct AdaptReport<S> {
    pub model: ClassifierHandle<S>,
    pub history: Vec<StepRecord>,
    pub state: AdaptState<S>,
}

fn entropy<S: Scalar>(p: ndarray::ArrayView1<'_, S>) -> f64 {
    p.iter()
        .map(|&v| v.to_f64().unwrap_or(0.0))
        .filter(|&v| v > 0.0)
        .map(|v| -v * v.ln())
        .sum()
}

/// Adapts on unlabeled images; labels are never consulted.
pub fn adapt_on_images<S: Scalar>(
    model: &ClassifierHandle<S>,
    images: &[&Image<S>],
    cfg: &NRCConfig,
) -> Result<AdaptReport<S>> {
    cfg.validate()?;
    let mut model = model.clone();
    let mut state = AdaptState::from_images(&model, images)?;
    check_bank_size(&state, cfg)?;
    let head = model.head_slots();
    let backbone = model.backbone_slots();
    let backbone_scale: S = c(cfg.backbone_lr_scale);
    let mut opt = Sgd::new(cfg.lr, cfg.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..images.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for ids in batches(&order, cfg.batch_size) {
            let batch: Vec<&Image<S>> = ids.iter().map(|&i| images[i]).collect();
            let mut g = Graph::new();
            let b = if cfg.head_only {
                model.bind(&mut g, |i| head.contains(&i))
            } else {
                model.bind(&mut g, |_| true)
            };
            let x = g.constant(Image::stack(&batch));
            let out = model.forward_graph(&mut g, &b, x, NormMode::Batch);
            let p = g.softmax(out.logits);
            let (total, parts) = nrc_loss_graph(&mut g, p, ids, &state, cfg)?;
            let loss = components(&g, total, &parts);
            check_finite(&loss, history.len())?;
            let mut grads = b.grads(&mut g.backward(total));
            for &i in &backbone {
                if let Some(t) = grads[i].as_mut() {
                    t.mapv_inplace(|v| v * backbone_scale);
                }
            }
            opt.step(&mut model.params, &grads);
            if !model.params.all_finite() {
                return Err(Error::NonFinite {
                    what: "classifier parameters".into(),
                    step: history.len(),
                });
            }
            let probs = as2(g.value(p));
            let mean = probs.mean_axis(Axis(0)).expect("non-empty batch");
            history.push(StepRecord {
                epoch,
                loss,
                mean_entropy: entropy(mean.view()),
            });
            state.refresh(ids, &as2(g.value(out.features)), &probs);
            model.absorb_moments(&out);
        }
    }
    Ok(AdaptReport { model, history, state })
}

/// Adapts on a curated synthetic set. Class fields of the records are ignored.
pub fn adapt_classifier<S: Scalar>(
    model: &ClassifierHandle<S>,
    manifest: &SyntheticManifest,
    cfg: &NRCConfig,
) -> Result<AdaptReport<S>> {
    let images = load_manifest_images::<S>(manifest)?;
    let refs: Vec<&Image<S>> = images.iter().collect();
    adapt_on_images(model, &refs, cfg)
}

/// Top-1 accuracy in percent.
pub fn evaluate<S: Scalar>(model: &ClassifierHandle<S>, data: &LabeledDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Config("cannot evaluate on an empty dataset".into()));
    }
    let images: Vec<Image<S>> = (0..data.len()).map(|i| data.image(i)).collect();
    let refs: Vec<&Image<S>> = images.iter().collect();
    let pred = model.predict(&refs)?;
    Ok(accuracy(&pred, &data.labels))
}

/// Percentage of matching entries.
pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    let hits = pred.iter().zip(labels).filter(|(a, b)| a == b).count();
    100.0 * hits as f64 / labels.len().max(1) as f64
}
