//! Style-based generator and frozen discriminator.
//!
//! The generator maps a normal draw `z` through an MLP to a style vector `w`,
//! broadcasts it to one row per synthesis block, and synthesises an image from
//! a learned constant. Each block upsamples (except the first), scales its
//! input channels by an affine function of its style row, convolves, and
//! applies a leaky ReLU; that post-nonlinearity map is the block's activation,
//! the point where captures and pruning interventions happen.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array1, Array2, Array3, ArrayD, ArrayView1, Axis, IxDyn};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{self, ModelKind};
use crate::error::{Error, Result};
use crate::graph::{Graph, Tensor, Var};
use crate::nn::{he_tensor, normal_tensor, zeros, Bound, ParamSet};
use crate::sampler;
use crate::scalar::{c, Scalar};

const LEAK: f64 = 0.2;

/// Standard-normal input of the mapping network.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentZ<S>(Array1<S>);

impl<S: Scalar> LatentZ<S> {
    pub fn new(values: Array1<S>) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("latent z has non-finite entries".into()));
        }
        Ok(Self(values))
    }

    pub fn sample<R: Rng + ?Sized>(rng: &mut R, dim: usize) -> Self {
        Self(Array1::from_iter((0..dim).map(|_| {
            let v: f64 = rng.sample(StandardNormal);
            c(v)
        })))
    }

    pub fn values(&self) -> &Array1<S> {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// One style row per synthesis block (`L × D`).
#[derive(Clone, Debug, PartialEq)]
pub struct ExtendedLatent<S> {
    codes: Array2<S>,
}

impl<S: Scalar> ExtendedLatent<S> {
    pub fn new(codes: Array2<S>) -> Result<Self> {
        if codes.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("extended latent has non-finite entries".into()));
        }
        Ok(Self { codes })
    }

    /// Repeats `w` on every row.
    pub fn broadcast(w: ArrayView1<'_, S>, num_layers: usize) -> Self {
        let mut codes = Array2::zeros((num_layers, w.len()));
        for mut row in codes.rows_mut() {
            row.assign(&w);
        }
        Self { codes }
    }

    pub fn codes(&self) -> &Array2<S> {
        &self.codes
    }

    pub fn num_layers(&self) -> usize {
        self.codes.nrows()
    }

    pub fn dim(&self) -> usize {
        self.codes.ncols()
    }

    pub fn row(&self, l: usize) -> ArrayView1<'_, S> {
        self.codes.row(l)
    }

    pub(crate) fn codes_mut(&mut self) -> &mut Array2<S> {
        &mut self.codes
    }
}

/// Sorted, duplicate-free subset of synthesis layers.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StyleLayerSet {
    layers: Vec<usize>,
}

impl StyleLayerSet {
    pub fn new(mut layers: Vec<usize>, num_layers: usize) -> Result<Self> {
        layers.sort_unstable();
        layers.dedup();
        if let Some(&bad) = layers.iter().find(|&&l| l >= num_layers) {
            return Err(Error::Contract(format!(
                "style layer {bad} out of range for {num_layers} layers"
            )));
        }
        Ok(Self { layers })
    }

    pub fn empty() -> Self {
        Self { layers: Vec::new() }
    }

    pub fn all(num_layers: usize) -> Self {
        Self {
            layers: (0..num_layers).collect(),
        }
    }

    /// Parses `"2-3"`, `"1,3"` or a mix such as `"0,2-3"`; empty string is the empty set.
    pub fn parse(spec: &str, num_layers: usize) -> Result<Self> {
        let mut layers = Vec::new();
        for part in spec.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let bad = || Error::Config(format!("cannot parse style layers `{spec}`"));
            if let Some((a, b)) = part.split_once('-') {
                let a: usize = a.trim().parse().map_err(|_| bad())?;
                let b: usize = b.trim().parse().map_err(|_| bad())?;
                if a > b {
                    return Err(bad());
                }
                layers.extend(a..=b);
            } else {
                layers.push(part.parse().map_err(|_| bad())?);
            }
        }
        Self::new(layers, num_layers)
    }

    pub fn contains(&self, l: usize) -> bool {
        self.layers.binary_search(&l).is_ok()
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    /// Checks every index is below `num_layers`.
    pub fn check_against(&self, num_layers: usize) -> Result<()> {
        match self.layers.last() {
            Some(&l) if l >= num_layers => Err(Error::Contract(format!(
                "style layer {l} out of range for {num_layers} layers"
            ))),
            _ => Ok(()),
        }
    }
}

impl std::fmt::Display for StyleLayerSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let parts: Vec<String> = self.layers.iter().map(|l| l.to_string()).collect();
        f.write_str(&parts.join(","))
    }
}

/// Block activation laid out `H × W × V`.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationTensor<S> {
    values: Array3<S>,
    layer: usize,
}

impl<S: Scalar> ActivationTensor<S> {
    pub fn new(values: Array3<S>, layer: usize) -> Result<Self> {
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract(format!("activation at layer {layer} is not finite")));
        }
        Ok(Self { values, layer })
    }

    pub fn values(&self) -> &Array3<S> {
        &self.values
    }

    pub fn into_values(self) -> Array3<S> {
        self.values
    }

    pub fn layer(&self) -> usize {
        self.layer
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.values.dim()
    }

    /// Sample `n` of an NCHW batch.
    pub(crate) fn from_nchw(t: &Tensor<S>, n: usize, layer: usize) -> Self {
        let sample = t.index_axis(Axis(0), n);
        let values = sample
            .permuted_axes(IxDyn(&[1, 2, 0]))
            .into_dimensionality::<ndarray::Ix3>()
            .expect("CHW sample")
            .as_standard_layout()
            .into_owned();
        Self { values, layer }
    }

    /// `1 × V × H × W` tensor.
    pub(crate) fn to_nchw(&self) -> Tensor<S> {
        self.values
            .view()
            .permuted_axes([2, 0, 1])
            .as_standard_layout()
            .into_owned()
            .insert_axis(Axis(0))
            .into_dyn()
    }
}

/// RGB image, channels first, values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image<S> {
    data: Array3<S>,
}

impl<S: Scalar> Image<S> {
    pub fn new(data: Array3<S>) -> Result<Self> {
        if data.dim().0 != 3 {
            return Err(Error::Contract("images have three channels".into()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("image has non-finite pixels".into()));
        }
        Ok(Self { data })
    }

    pub fn data(&self) -> &Array3<S> {
        &self.data
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn to_batch(&self) -> Tensor<S> {
        self.data.clone().insert_axis(Axis(0)).into_dyn()
    }

    pub(crate) fn from_batch(t: &Tensor<S>, n: usize) -> Self {
        let data = t
            .index_axis(Axis(0), n)
            .into_dimensionality::<ndarray::Ix3>()
            .expect("CHW sample")
            .to_owned();
        Self { data }
    }

    /// Stacks images into an `N × 3 × H × W` tensor.
    pub fn stack(images: &[&Image<S>]) -> Tensor<S> {
        let views: Vec<_> = images.iter().map(|im| im.data.view().insert_axis(Axis(0))).collect();
        ndarray::concatenate(Axis(0), &views)
            .expect("images share a shape")
            .into_dyn()
    }

    pub fn from_rgb8(img: &image::RgbImage) -> Self {
        let (w, h) = img.dimensions();
        let mut data = Array3::zeros((3, h as usize, w as usize));
        for (x, y, p) in img.enumerate_pixels() {
            for ch in 0..3 {
                data[[ch, y as usize, x as usize]] = c::<S>(p[ch] as f64 / 127.5 - 1.0);
            }
        }
        Self { data }
    }

    pub fn to_rgb8(&self) -> image::RgbImage {
        let (h, w) = (self.height(), self.width());
        image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |ch: usize| {
                let v = self.data[[ch, y as usize, x as usize]].to_f64().unwrap_or(0.0);
                ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
            };
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        self.to_rgb8().save_with_format(path, image::ImageFormat::Png)?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        Ok(Self::from_rgb8(&image::open(path)?.to_rgb8()))
    }

    pub fn mean_sq_diff(&self, other: &Image<S>) -> S {
        let n: S = c(self.data.len() as f64);
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<S>()
            / n
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorArch {
    /// `Dz`
    pub latent_dim: usize,
    /// `D`
    pub style_dim: usize,
    pub mapping_hidden: usize,
    /// Output channels per synthesis block; its length is `L`.
    pub channels: Vec<usize>,
    /// Channels of the learned 4×4 constant.
    pub const_channels: usize,
    /// `K` for class-conditional generators.
    pub classes: Option<usize>,
}

impl GeneratorArch {
    /// Desk-scale architecture: 4 blocks, 32×32 RGB output.
    pub fn toy() -> Self {
        Self {
            latent_dim: 64,
            style_dim: 64,
            mapping_hidden: 64,
            channels: vec![64, 64, 32, 32],
            const_channels: 64,
            classes: None,
        }
    }

    pub fn toy_conditional(classes: usize) -> Self {
        Self {
            classes: Some(classes),
            ..Self::toy()
        }
    }

    pub fn num_layers(&self) -> usize {
        self.channels.len()
    }

    pub fn resolution(&self) -> usize {
        4 << (self.num_layers() - 1)
    }

    /// `(H, W, V)` of block `l`'s activation.
    pub fn activation_shape(&self, l: usize) -> (usize, usize, usize) {
        let r = 4 << l;
        (r, r, self.channels[l])
    }

    fn in_channels(&self, l: usize) -> usize {
        if l == 0 {
            self.const_channels
        } else {
            self.channels[l - 1]
        }
    }

    fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.latent_dim == 0 || self.style_dim == 0 {
            return Err(Error::Config(
                "generator needs at least one block and non-empty latents".into(),
            ));
        }
        if self.classes == Some(0) {
            return Err(Error::Config("conditional generator with zero classes".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct BlockSlots {
    affine_w: usize,
    affine_b: usize,
    conv_w: usize,
    conv_b: usize,
}

#[derive(Clone, Debug)]
struct GenSlots {
    w1: usize,
    b1: usize,
    embed: Option<usize>,
    w2: usize,
    b2: usize,
    constant: usize,
    blocks: Vec<BlockSlots>,
    rgb_w: usize,
    rgb_b: usize,
}

impl GenSlots {
    fn locate<S: Scalar>(arch: &GeneratorArch, p: &ParamSet<S>) -> Result<Self> {
        let expected = Generator::<S>::layout(arch);
        if p.len() != expected.len() {
            return Err(Error::Config(format!(
                "generator expects {} tensors, checkpoint has {}",
                expected.len(),
                p.len()
            )));
        }
        for ((name, shape), (have, t)) in expected.iter().zip(p.iter()) {
            if name != have || shape.as_slice() != t.shape() {
                return Err(Error::Config(format!(
                    "tensor `{have}` {:?} does not match expected `{name}` {shape:?}",
                    t.shape()
                )));
            }
        }
        let at = |n: &str| p.index_of(n).expect("layout checked");
        Ok(Self {
            w1: at("map.w1"),
            b1: at("map.b1"),
            embed: arch.classes.map(|_| at("map.embed")),
            w2: at("map.w2"),
            b2: at("map.b2"),
            constant: at("syn.const"),
            blocks: (0..arch.num_layers())
                .map(|l| BlockSlots {
                    affine_w: at(&format!("syn.{l}.affine_w")),
                    affine_b: at(&format!("syn.{l}.affine_b")),
                    conv_w: at(&format!("syn.{l}.conv_w")),
                    conv_b: at(&format!("syn.{l}.conv_b")),
                })
                .collect(),
            rgb_w: at("rgb.w"),
            rgb_b: at("rgb.b"),
        })
    }
}

/// Per-layer pruning directive.
#[derive(Clone, Debug, PartialEq)]
pub enum Directive<S> {
    /// Zero entries strictly below the channel's `p`-th percentile.
    Zero { p: f64 },
    /// Replace those entries with the co-located entries of `reference`.
    Rewind { p: f64, reference: ActivationTensor<S> },
}

impl<S> Directive<S> {
    pub fn ratio(&self) -> f64 {
        match self {
            Directive::Zero { p } | Directive::Rewind { p, .. } => *p,
        }
    }
}

/// Directives keyed by layer, restricted to one style-layer set.
#[derive(Clone, Debug, PartialEq)]
pub struct InterventionPlan<S> {
    style_layers: StyleLayerSet,
    directives: BTreeMap<usize, Directive<S>>,
}

impl<S: Scalar> InterventionPlan<S> {
    pub fn new(style_layers: StyleLayerSet) -> Self {
        Self {
            style_layers,
            directives: BTreeMap::new(),
        }
    }

    pub fn set(&mut self, layer: usize, d: Directive<S>) -> Result<()> {
        if !self.style_layers.contains(layer) {
            return Err(Error::Contract(format!("layer {layer} is not a style layer")));
        }
        let p = d.ratio();
        if !(0.0..=100.0).contains(&p) {
            return Err(Error::Contract(format!("pruning ratio {p} outside [0, 100]")));
        }
        self.directives.insert(layer, d);
        Ok(())
    }

    /// Same directive on every style layer.
    pub fn uniform_zero(style_layers: StyleLayerSet, p: f64) -> Result<Self> {
        let mut plan = Self::new(style_layers.clone());
        for &l in style_layers.layers() {
            plan.set(l, Directive::Zero { p })?;
        }
        Ok(plan)
    }

    pub fn get(&self, layer: usize) -> Option<&Directive<S>> {
        self.directives.get(&layer)
    }

    pub fn is_empty(&self) -> bool {
        self.directives.is_empty()
    }

    pub fn layers(&self) -> impl Iterator<Item = usize> + '_ {
        self.directives.keys().copied()
    }

    pub fn style_layers(&self) -> &StyleLayerSet {
        &self.style_layers
    }
}

/// Graph handles from one synthesis pass.
pub struct SynthesisVars {
    pub image: Var,
    pub activations: Vec<Var>,
}

/// Generator parameters plus architecture (the generator handle).
#[derive(Clone, Debug)]
pub struct Generator<S> {
    arch: GeneratorArch,
    params: ParamSet<S>,
    slots: GenSlots,
}

impl<S: Scalar> Generator<S> {
    fn layout(arch: &GeneratorArch) -> Vec<(String, Vec<usize>)> {
        let mut v = vec![
            ("map.w1".to_string(), vec![arch.latent_dim, arch.mapping_hidden]),
            ("map.b1".to_string(), vec![arch.mapping_hidden]),
        ];
        if let Some(k) = arch.classes {
            v.push(("map.embed".into(), vec![k, arch.mapping_hidden]));
        }
        v.push(("map.w2".into(), vec![arch.mapping_hidden, arch.style_dim]));
        v.push(("map.b2".into(), vec![arch.style_dim]));
        v.push(("syn.const".into(), vec![1, arch.const_channels, 4, 4]));
        for l in 0..arch.num_layers() {
            let (cin, cout) = (arch.in_channels(l), arch.channels[l]);
            v.push((format!("syn.{l}.affine_w"), vec![arch.style_dim, cin]));
            v.push((format!("syn.{l}.affine_b"), vec![cin]));
            v.push((format!("syn.{l}.conv_w"), vec![cout, cin, 3, 3]));
            v.push((format!("syn.{l}.conv_b"), vec![cout]));
        }
        let last = *arch.channels.last().expect("validated non-empty");
        v.push(("rgb.w".into(), vec![3, last, 1, 1]));
        v.push(("rgb.b".into(), vec![3]));
        v
    }

    /// Fresh random parameters.
    pub fn init<R: Rng + ?Sized>(arch: GeneratorArch, rng: &mut R) -> Result<Self> {
        arch.validate()?;
        let mut params = ParamSet::new();
        for (name, shape) in Self::layout(&arch) {
            let t = if name.ends_with("b1") || name.ends_with("b2") || name.ends_with("_b") || name == "rgb.b" {
                zeros(&shape)
            } else if name == "syn.const" || name == "map.embed" {
                normal_tensor(rng, &shape, 1.0)
            } else if name.ends_with("affine_w") {
                normal_tensor(rng, &shape, 0.5 / (arch.style_dim as f64).sqrt())
            } else if name.ends_with("conv_w") || name == "rgb.w" {
                let fan_in = shape[1] * shape[2] * shape[3];
                he_tensor(rng, &shape, fan_in)
            } else {
                he_tensor(rng, &shape, shape[0])
            };
            params.push(name, t);
        }
        Self::from_params(arch, params)
    }

    pub fn from_params(arch: GeneratorArch, params: ParamSet<S>) -> Result<Self> {
        arch.validate()?;
        let slots = GenSlots::locate(&arch, &params)?;
        Ok(Self { arch, params, slots })
    }

    pub fn arch(&self) -> &GeneratorArch {
        &self.arch
    }

    pub fn params(&self) -> &ParamSet<S> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<S> {
        &mut self.params
    }

    pub fn num_layers(&self) -> usize {
        self.arch.num_layers()
    }

    pub fn is_conditional(&self) -> bool {
        self.arch.classes.is_some()
    }

    pub fn classes(&self) -> Option<usize> {
        self.arch.classes
    }

    pub fn resolution(&self) -> usize {
        self.arch.resolution()
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    /// Aligned handles share an identical architecture descriptor.
    pub fn is_aligned(&self, other: &Generator<S>) -> bool {
        self.arch == other.arch
    }

    /// Unconditional generator equivalent to this one with the class fixed:
    /// the class embedding row is folded into the first mapping bias.
    pub fn specialize(&self, class: usize) -> Result<Self> {
        self.check_condition(Some(class))?;
        let embed = self.slots.embed.expect("conditional generator has an embedding");
        let mut params = ParamSet::new();
        for (i, (name, t)) in self.params.iter().enumerate() {
            if i == embed {
                continue;
            }
            let mut t = t.clone();
            if i == self.slots.b1 {
                let row = self.params.tensor(embed).index_axis(Axis(0), class).to_owned();
                t.zip_mut_with(&row, |a, &e| *a += e);
            }
            params.push(name, t);
        }
        Self::from_params(
            GeneratorArch {
                classes: None,
                ..self.arch.clone()
            },
            params,
        )
    }

    /// Slots belonging to the synthesis network (everything but the mapping MLP).
    pub fn synthesis_slots(&self) -> Vec<usize> {
        let s = &self.slots;
        let mut v = vec![s.constant, s.rgb_w, s.rgb_b];
        for b in &s.blocks {
            v.extend([b.affine_w, b.affine_b, b.conv_w, b.conv_b]);
        }
        v.sort_unstable();
        v
    }

    fn check_condition(&self, condition: Option<usize>) -> Result<()> {
        match (self.arch.classes, condition) {
            (None, None) => Ok(()),
            (Some(k), Some(cl)) if cl < k => Ok(()),
            (Some(k), Some(cl)) => Err(Error::Config(format!("class {cl} out of range for {k} classes"))),
            (None, Some(_)) => Err(Error::Config("condition given to an unconditional generator".into())),
            (Some(_), None) => Err(Error::Config("conditional generator needs a class".into())),
        }
    }

    /// Mapping MLP on the tape: `z[N, Dz]` (plus one-hot `cond[N, K]`) to `w[N, D]`.
    pub fn mapping_graph(&self, g: &mut Graph<S>, b: &Bound, z: Var, cond: Option<Var>) -> Var {
        let s = &self.slots;
        let mut h = g.matmul(z, b.var(s.w1));
        if let (Some(e), Some(cv)) = (s.embed, cond) {
            let emb = g.matmul(cv, b.var(e));
            h = g.add(h, emb);
        }
        let h = g.bias_add(h, b.var(s.b1));
        let h = g.leaky_relu(h, c(LEAK));
        let w = g.matmul(h, b.var(s.w2));
        g.bias_add(w, b.var(s.b2))
    }

    /// Synthesis on the tape. `styles[l]` is `[N, D]`. Interventions need `N = 1`.
    pub fn synthesis_graph(
        &self,
        g: &mut Graph<S>,
        b: &Bound,
        styles: &[Var],
        plan: Option<&InterventionPlan<S>>,
    ) -> Result<SynthesisVars> {
        if styles.len() != self.num_layers() {
            return Err(Error::Contract(format!(
                "{} style rows for a {}-layer generator",
                styles.len(),
                self.num_layers()
            )));
        }
        let n = g.shape(styles[0])[0];
        let plan = plan.filter(|p| !p.is_empty());
        if plan.is_some() && n != 1 {
            return Err(Error::Contract("interventions run one image at a time".into()));
        }
        let s = &self.slots;
        let mut x = g.repeat_batch(b.var(s.constant), n);
        let mut acts = Vec::with_capacity(self.num_layers());
        for (l, blk) in s.blocks.iter().enumerate() {
            if l > 0 {
                x = g.upsample2(x);
            }
            let st = g.matmul(styles[l], b.var(blk.affine_w));
            let st = g.bias_add(st, b.var(blk.affine_b));
            let st = g.add_scalar(st, S::one());
            x = g.scale_channels(x, st);
            x = g.conv2d(x, b.var(blk.conv_w), 1);
            x = g.bias_add(x, b.var(blk.conv_b));
            x = g.leaky_relu(x, c(LEAK));
            if let Some(d) = plan.and_then(|p| p.get(l)) {
                x = self.intervene(g, x, l, d)?;
            }
            acts.push(x);
        }
        let rgb = g.conv2d(x, b.var(s.rgb_w), 0);
        let rgb = g.bias_add(rgb, b.var(s.rgb_b));
        let image = g.tanh(rgb);
        Ok(SynthesisVars {
            image,
            activations: acts,
        })
    }

    fn intervene(&self, g: &mut Graph<S>, x: Var, layer: usize, d: &Directive<S>) -> Result<Var> {
        let h = ActivationTensor::from_nchw(g.value(x), 0, layer);
        let (pruned, mask) = match d {
            Directive::Zero { p } => sampler::prune_zero_masked(&h, *p)?,
            Directive::Rewind { p, reference } => {
                if reference.shape() != h.shape() || reference.layer() != layer {
                    return Err(Error::Alignment(format!(
                        "rewind reference {:?}@{} does not match layer {layer} activation {:?}",
                        reference.shape(),
                        reference.layer(),
                        h.shape()
                    )));
                }
                sampler::prune_rewind_masked(&h, reference, *p)?
            }
        };
        // mask is H×W×V; the graph node is V×H×W
        let (hh, ww, vv) = h.shape();
        let mut mask_chw = vec![false; mask.len()];
        for i in 0..hh {
            for j in 0..ww {
                for v in 0..vv {
                    mask_chw[(v * hh + i) * ww + j] = mask[(i * ww + j) * vv + v];
                }
            }
        }
        Ok(g.replace(x, mask_chw, &pruned.to_nchw()))
    }

    fn style_leaves(&self, g: &mut Graph<S>, ws: &[&ExtendedLatent<S>]) -> Result<Vec<Var>> {
        let (l, d) = (self.num_layers(), self.arch.style_dim);
        for w in ws {
            if w.num_layers() != l || w.dim() != d {
                return Err(Error::Contract(format!(
                    "extended latent is {}x{}, generator expects {l}x{d}",
                    w.num_layers(),
                    w.dim()
                )));
            }
        }
        Ok((0..l)
            .map(|row| {
                let mut t = Array2::zeros((ws.len(), d));
                for (i, w) in ws.iter().enumerate() {
                    t.row_mut(i).assign(&w.row(row));
                }
                g.constant(t.into_dyn())
            })
            .collect())
    }

    /// Broadcast mapping of one latent.
    pub fn map_latent(&self, z: &LatentZ<S>, condition: Option<usize>) -> Result<ExtendedLatent<S>> {
        let zs = z.values().clone().insert_axis(Axis(0));
        let w = self.map_batch(&zs, condition.map(|cl| vec![cl]).as_deref())?;
        Ok(ExtendedLatent::broadcast(w.row(0), self.num_layers()))
    }

    /// Mapping of a batch of latents; returns `w` rows.
    pub fn map_batch(&self, zs: &Array2<S>, conditions: Option<&[usize]>) -> Result<Array2<S>> {
        if zs.ncols() != self.arch.latent_dim {
            return Err(Error::Contract(format!(
                "latent has {} entries, generator expects {}",
                zs.ncols(),
                self.arch.latent_dim
            )));
        }
        if zs.iter().any(|v| !v.is_finite()) {
            return Err(Error::Contract("latent z has non-finite entries".into()));
        }
        match conditions {
            Some(cs) => {
                if cs.len() != zs.nrows() {
                    return Err(Error::Contract("one condition per latent".into()));
                }
                for &cl in cs {
                    self.check_condition(Some(cl))?;
                }
            }
            None => self.check_condition(None)?,
        }
        let mut g = Graph::new();
        let b = self.params.bind_frozen(&mut g);
        let z = g.constant(zs.clone().into_dyn());
        let cond = match (conditions, self.arch.classes) {
            (Some(cs), Some(k)) => Some(g.constant(one_hot::<S>(cs, k).into_dyn())),
            _ => None,
        };
        let w = self.mapping_graph(&mut g, &b, z, cond);
        Ok(g.value(w)
            .clone()
            .into_dimensionality::<ndarray::Ix2>()
            .expect("mapping output is 2-D"))
    }

    /// Mean of `n` mapped draws, broadcast to every layer.
    pub fn mean_latent<R: Rng + ?Sized>(
        &self,
        n: usize,
        condition: Option<usize>,
        rng: &mut R,
    ) -> Result<ExtendedLatent<S>> {
        let dz = self.arch.latent_dim;
        let mut acc = Array1::<f64>::zeros(self.arch.style_dim);
        let chunk = 1000;
        let mut done = 0;
        while done < n {
            let m = chunk.min(n - done);
            let zs = Array2::from_shape_fn((m, dz), |_| {
                let v: f64 = rng.sample(StandardNormal);
                c::<S>(v)
            });
            let conds = condition.map(|cl| vec![cl; m]);
            let w = self.map_batch(&zs, conds.as_deref())?;
            for row in w.rows() {
                for (a, &v) in acc.iter_mut().zip(row) {
                    *a += v.to_f64().unwrap_or(0.0);
                }
            }
            done += m;
        }
        let mean = acc.mapv(|v| c::<S>(v / n as f64));
        Ok(ExtendedLatent::broadcast(mean.view(), self.num_layers()))
    }

    /// One forward pass with optional interventions and activation capture.
    /// Captured tensors are post-intervention.
    pub fn synthesize(
        &self,
        w_plus: &ExtendedLatent<S>,
        plan: Option<&InterventionPlan<S>>,
        capture: Option<&[usize]>,
    ) -> Result<(Image<S>, BTreeMap<usize, ActivationTensor<S>>)> {
        if let Some(p) = plan {
            p.style_layers().check_against(self.num_layers())?;
        }
        let mut g = Graph::new();
        let b = self.params.bind_frozen(&mut g);
        let styles = self.style_leaves(&mut g, &[w_plus])?;
        let out = self.synthesis_graph(&mut g, &b, &styles, plan)?;
        let mut captured = BTreeMap::new();
        for &l in capture.unwrap_or(&[]) {
            let v = *out
                .activations
                .get(l)
                .ok_or_else(|| Error::Contract(format!("capture layer {l} out of range")))?;
            captured.insert(l, ActivationTensor::from_nchw(g.value(v), 0, l));
        }
        Ok((Image::from_batch(g.value(out.image), 0), captured))
    }

    /// Plain synthesis of several latents in one batch.
    pub fn synthesize_batch(&self, ws: &[&ExtendedLatent<S>]) -> Result<Vec<Image<S>>> {
        if ws.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let b = self.params.bind_frozen(&mut g);
        let styles = self.style_leaves(&mut g, ws)?;
        let out = self.synthesis_graph(&mut g, &b, &styles, None)?;
        let t = g.value(out.image);
        Ok((0..ws.len()).map(|i| Image::from_batch(t, i)).collect())
    }

    /// Runs the blocks after `activation.layer()` starting from the given
    /// activation. Used to check interventions against an external two-pass
    /// computation.
    pub fn resume_from(&self, w_plus: &ExtendedLatent<S>, activation: &ActivationTensor<S>) -> Result<Image<S>> {
        let start = activation.layer();
        if start >= self.num_layers() || activation.shape() != self.arch.activation_shape(start) {
            return Err(Error::Contract("activation does not belong to this generator".into()));
        }
        let mut g = Graph::new();
        let b = self.params.bind_frozen(&mut g);
        let styles = self.style_leaves(&mut g, &[w_plus])?;
        let s = &self.slots;
        let mut x = g.constant(activation.to_nchw());
        for l in start + 1..self.num_layers() {
            let blk = &s.blocks[l];
            x = g.upsample2(x);
            let st = g.matmul(styles[l], b.var(blk.affine_w));
            let st = g.bias_add(st, b.var(blk.affine_b));
            let st = g.add_scalar(st, S::one());
            x = g.scale_channels(x, st);
            x = g.conv2d(x, b.var(blk.conv_w), 1);
            x = g.bias_add(x, b.var(blk.conv_b));
            x = g.leaky_relu(x, c(LEAK));
        }
        let rgb = g.conv2d(x, b.var(s.rgb_w), 0);
        let rgb = g.bias_add(rgb, b.var(s.rgb_b));
        let img = g.tanh(rgb);
        Ok(Image::from_batch(g.value(img), 0))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        checkpoint::encode(ModelKind::Generator, &self.arch, &self.params)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, params) = checkpoint::decode(bytes)?;
        Self::from_header(h, params)
    }

    fn from_header(h: checkpoint::Header, params: ParamSet<S>) -> Result<Self> {
        if h.kind != ModelKind::Generator {
            return Err(Error::Config(format!(
                "checkpoint holds a {:?}, not a generator",
                h.kind
            )));
        }
        let arch: GeneratorArch = serde_json::from_value(h.arch)?;
        Self::from_params(arch, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, ModelKind::Generator, &self.arch, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, params) = checkpoint::load(path, "toy")?;
        Self::from_header(h, params)
    }
}

pub(crate) fn one_hot<S: Scalar>(classes: &[usize], k: usize) -> Array2<S> {
    let mut t = Array2::zeros((classes.len(), k));
    for (i, &cl) in classes.iter().enumerate() {
        t[[i, cl]] = S::one();
    }
    t
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorArch {
    /// Output channels of the conv blocks (each halves resolution).
    pub channels: Vec<usize>,
    /// Width of the pre-logit feature layer.
    pub feature_dim: usize,
    pub resolution: usize,
}

impl DiscriminatorArch {
    pub fn toy() -> Self {
        Self {
            channels: vec![32, 64, 64, 64],
            feature_dim: 128,
            resolution: 32,
        }
    }

    /// Block outputs plus the pre-logit features.
    pub fn num_taps(&self) -> usize {
        self.channels.len() + 1
    }
}

#[derive(Clone, Debug)]
struct DiscSlots {
    blocks: Vec<(usize, usize)>,
    fc_w: usize,
    fc_b: usize,
    out_w: usize,
    out_b: usize,
}

/// Graph handles from one discriminator pass; `taps` are all available taps.
pub struct DiscriminatorVars {
    pub taps: Vec<Var>,
    pub logit: Var,
}

/// Discriminator whose parameters stay frozen during adaptation.
#[derive(Clone, Debug)]
pub struct Discriminator<S> {
    arch: DiscriminatorArch,
    params: ParamSet<S>,
    taps: Vec<usize>,
    slots: DiscSlots,
}

impl<S: Scalar> Discriminator<S> {
    fn layout(arch: &DiscriminatorArch) -> Vec<(String, Vec<usize>)> {
        let mut v = Vec::new();
        let mut cin = 3;
        for (l, &co) in arch.channels.iter().enumerate() {
            v.push((format!("d.{l}.w"), vec![co, cin, 3, 3]));
            v.push((format!("d.{l}.b"), vec![co]));
            cin = co;
        }
        let side = arch.resolution >> arch.channels.len();
        v.push(("d.fc.w".into(), vec![cin * side * side, arch.feature_dim]));
        v.push(("d.fc.b".into(), vec![arch.feature_dim]));
        v.push(("d.out.w".into(), vec![arch.feature_dim, 1]));
        v.push(("d.out.b".into(), vec![1]));
        v
    }

    pub fn init<R: Rng + ?Sized>(arch: DiscriminatorArch, rng: &mut R) -> Result<Self> {
        let mut params = ParamSet::new();
        for (name, shape) in Self::layout(&arch) {
            let t = if name.ends_with(".b") {
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

    pub fn from_params(arch: DiscriminatorArch, params: ParamSet<S>) -> Result<Self> {
        if arch.channels.is_empty() || arch.resolution >> arch.channels.len() == 0 {
            return Err(Error::Config("discriminator downsamples below one pixel".into()));
        }
        let expected = Self::layout(&arch);
        if expected.len() != params.len()
            || expected
                .iter()
                .zip(params.iter())
                .any(|((n, s), (h, t))| n != h || s.as_slice() != t.shape())
        {
            return Err(Error::Config("discriminator tensors do not match architecture".into()));
        }
        let at = |n: &str| params.index_of(n).expect("layout checked");
        let slots = DiscSlots {
            blocks: (0..arch.channels.len())
                .map(|l| (at(&format!("d.{l}.w")), at(&format!("d.{l}.b"))))
                .collect(),
            fc_w: at("d.fc.w"),
            fc_b: at("d.fc.b"),
            out_w: at("d.out.w"),
            out_b: at("d.out.b"),
        };
        let taps = (0..arch.num_taps()).collect();
        Ok(Self {
            arch,
            params,
            taps,
            slots,
        })
    }

    /// Restricts the exposed taps (indices into block outputs, then pre-logit).
    pub fn with_taps(mut self, taps: Vec<usize>) -> Result<Self> {
        if taps.is_empty() || taps.iter().any(|&t| t >= self.arch.num_taps()) {
            return Err(Error::Config(format!(
                "tap list {taps:?} invalid for {} available taps",
                self.arch.num_taps()
            )));
        }
        self.taps = taps;
        Ok(self)
    }

    pub fn taps(&self) -> &[usize] {
        &self.taps
    }

    pub fn arch(&self) -> &DiscriminatorArch {
        &self.arch
    }

    pub fn params(&self) -> &ParamSet<S> {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamSet<S> {
        &mut self.params
    }

    pub fn resolution(&self) -> usize {
        self.arch.resolution
    }

    pub fn checksum(&self) -> String {
        self.params.checksum()
    }

    pub(crate) fn check_input(&self, h: usize, w: usize) -> Result<()> {
        if h != self.arch.resolution || w != self.arch.resolution {
            return Err(Error::Contract(format!(
                "image is {h}x{w}, discriminator expects {r}x{r}",
                r = self.arch.resolution
            )));
        }
        Ok(())
    }

    /// Forward on the tape; `x` is `[N, 3, H, W]`.
    pub fn forward_graph(&self, g: &mut Graph<S>, b: &Bound, x: Var) -> DiscriminatorVars {
        let mut h = x;
        let mut taps = Vec::with_capacity(self.arch.num_taps());
        for &(w, bias) in &self.slots.blocks {
            h = g.conv2d(h, b.var(w), 1);
            h = g.bias_add(h, b.var(bias));
            h = g.leaky_relu(h, c(LEAK));
            h = g.avg_pool2(h);
            taps.push(h);
        }
        let n = g.shape(h)[0];
        let flat: usize = g.shape(h)[1..].iter().product();
        let f = g.reshape(h, &[n, flat]);
        let f = g.matmul(f, b.var(self.slots.fc_w));
        let f = g.bias_add(f, b.var(self.slots.fc_b));
        let f = g.leaky_relu(f, c(LEAK));
        taps.push(f);
        let logit = g.matmul(f, b.var(self.slots.out_w));
        let logit = g.bias_add(logit, b.var(self.slots.out_b));
        DiscriminatorVars { taps, logit }
    }

    /// Selected tap features on the tape with frozen parameters.
    pub fn feature_graph(&self, g: &mut Graph<S>, x: Var) -> Result<Vec<Var>> {
        let shape = g.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::Contract("discriminator input must be [N, 3, H, W]".into()));
        }
        self.check_input(shape[2], shape[3])?;
        let b = self.params.bind_frozen(g);
        let out = self.forward_graph(g, &b, x);
        Ok(self.taps.iter().map(|&t| out.taps[t]).collect())
    }

    /// Tap features of one image, in tap order.
    pub fn features(&self, x: &Image<S>) -> Result<Vec<ArrayD<S>>> {
        let mut g = Graph::new();
        let xv = g.constant(x.to_batch());
        let taps = self.feature_graph(&mut g, xv)?;
        Ok(taps.iter().map(|&t| g.value(t).clone()).collect())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        checkpoint::encode(ModelKind::Discriminator, &self.arch, &self.params)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (h, params) = checkpoint::decode(bytes)?;
        Self::from_header(h, params)
    }

    fn from_header(h: checkpoint::Header, params: ParamSet<S>) -> Result<Self> {
        if h.kind != ModelKind::Discriminator {
            return Err(Error::Config(format!(
                "checkpoint holds a {:?}, not a discriminator",
                h.kind
            )));
        }
        let arch: DiscriminatorArch = serde_json::from_value(h.arch)?;
        Self::from_params(arch, params)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        checkpoint::save(path, ModelKind::Discriminator, &self.arch, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, params) = checkpoint::load(path, "toy")?;
        Self::from_header(h, params)
    }
}

/// Either handle, as returned by [`load_checkpoint`].
#[derive(Clone, Debug)]
pub enum LoadedModel<S> {
    Generator(Generator<S>),
    Discriminator(Discriminator<S>),
}

/// Loads a generator or discriminator through the named adapter.
pub fn load_checkpoint<S: Scalar>(path: &Path, adapter: &str) -> Result<LoadedModel<S>> {
    let (h, params) = checkpoint::load(path, adapter)?;
    match h.kind {
        ModelKind::Generator => Ok(LoadedModel::Generator(Generator::from_header(h, params)?)),
        ModelKind::Discriminator => Ok(LoadedModel::Discriminator(Discriminator::from_header(h, params)?)),
        ModelKind::Classifier => Err(Error::Config("checkpoint holds a classifier".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_gen() -> Generator<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        Generator::init(GeneratorArch::toy(), &mut rng).unwrap()
    }

    #[test]
    fn mapping_is_deterministic_and_broadcast() {
        let g = toy_gen();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = LatentZ::sample(&mut rng, 64);
        let a = g.map_latent(&z, None).unwrap();
        let b = g.map_latent(&z, None).unwrap();
        assert_eq!(a, b);
        for l in 1..a.num_layers() {
            assert_eq!(a.row(0), a.row(l));
        }
    }

    #[test]
    fn condition_must_match_generator_kind() {
        let g = toy_gen();
        let z = LatentZ::new(Array1::zeros(64)).unwrap();
        assert!(matches!(g.map_latent(&z, Some(0)), Err(Error::Config(_))));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cg = Generator::<f64>::init(GeneratorArch::toy_conditional(3), &mut rng).unwrap();
        assert!(matches!(cg.map_latent(&z, None), Err(Error::Config(_))));
        assert!(cg.map_latent(&z, Some(2)).is_ok());
    }

    #[test]
    fn specialized_generator_matches_conditioned_mapping() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cg = Generator::<f64>::init(GeneratorArch::toy_conditional(3), &mut rng).unwrap();
        let z = LatentZ::sample(&mut rng, 64);
        let sg = cg.specialize(1).unwrap();
        assert!(!sg.is_conditional());
        let a = cg.map_latent(&z, Some(1)).unwrap();
        let b = sg.map_latent(&z, None).unwrap();
        let diff = (a.codes() - b.codes()).mapv(f64::abs).fold(0.0f64, |m, &v| m.max(v));
        assert!(diff < 1e-12, "{diff}");
        assert!(cg.specialize(3).is_err());
    }

    #[test]
    fn output_in_range_and_captures_have_declared_shapes() {
        let g = toy_gen();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = g.map_latent(&LatentZ::sample(&mut rng, 64), None).unwrap();
        let (img, caps) = g.synthesize(&w, None, Some(&[0, 1, 2, 3])).unwrap();
        assert_eq!((img.height(), img.width()), (32, 32));
        assert!(img.data().iter().all(|v| (-1.0..=1.0).contains(v)));
        for (l, a) in &caps {
            assert_eq!(a.shape(), g.arch().activation_shape(*l));
        }
    }

    #[test]
    fn wrong_latent_shape_is_a_contract_violation() {
        let g = toy_gen();
        let w = ExtendedLatent::new(Array2::zeros((3, 64))).unwrap();
        assert!(matches!(g.synthesize(&w, None, None), Err(Error::Contract(_))));
    }

    #[test]
    fn rewind_reference_shape_is_checked() {
        let g = toy_gen();
        let w = ExtendedLatent::new(Array2::zeros((4, 64))).unwrap();
        let bad = ActivationTensor::new(Array3::zeros((4, 4, 64)), 2).unwrap();
        let mut plan = InterventionPlan::new(StyleLayerSet::new(vec![2, 3], 4).unwrap());
        plan.set(
            2,
            Directive::Rewind {
                p: 50.0,
                reference: bad,
            },
        )
        .unwrap();
        assert!(matches!(g.synthesize(&w, Some(&plan), None), Err(Error::Alignment(_))));
    }

    #[test]
    fn plan_rejects_non_style_layers_and_bad_ratios() {
        let mut plan = InterventionPlan::<f32>::new(StyleLayerSet::new(vec![2, 3], 4).unwrap());
        assert!(plan.set(1, Directive::Zero { p: 10.0 }).is_err());
        assert!(plan.set(2, Directive::Zero { p: 101.0 }).is_err());
        assert!(plan.set(3, Directive::Zero { p: 100.0 }).is_ok());
    }

    #[test]
    fn style_layer_parsing() {
        assert_eq!(StyleLayerSet::parse("2-3", 4).unwrap().layers(), &[2, 3]);
        assert_eq!(StyleLayerSet::parse("3,0,3", 4).unwrap().layers(), &[0, 3]);
        assert!(StyleLayerSet::parse("3-8", 4).is_err());
        assert!(StyleLayerSet::parse("", 4).unwrap().is_empty());
    }

    #[test]
    fn discriminator_taps_and_resolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = Discriminator::<f64>::init(DiscriminatorArch::toy(), &mut rng).unwrap();
        let img = Image::new(Array3::zeros((3, 32, 32))).unwrap();
        assert_eq!(d.features(&img).unwrap().len(), 5);
        let d4 = d.clone().with_taps(vec![0, 1, 2, 3]).unwrap();
        assert_eq!(d4.features(&img).unwrap().len(), 4);
        let small = Image::new(Array3::zeros((3, 16, 16))).unwrap();
        assert!(matches!(d.features(&small), Err(Error::Contract(_))));
    }
}
