//! Target-aware sampling from a fine-tuned generator.
//!
//! A sample draws `z`, maps it to `w⁺`, flips an independent gate for every
//! style layer, and prunes the gated layers' activations during the single
//! synthesis pass: per channel, entries strictly below the channel's `p`-th
//! percentile are zeroed (`prune-zero`) or replaced by the source generator's
//! co-located activation on the same `w⁺` (`prune-rewind`).

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::{Array1, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::{c, Scalar};
use crate::stylegen::{
    ActivationTensor, Directive, ExtendedLatent, Generator, Image, InterventionPlan, LatentZ, StyleLayerSet,
};

/// Per-channel linear-interpolation percentile over spatial positions.
pub fn channel_thresholds<S: Scalar>(h: &ActivationTensor<S>, p: f64) -> Result<Array1<S>> {
    let (hh, ww, vv) = h.shape();
    if hh * ww == 0 || vv == 0 {
        return Err(Error::Contract("percentile of an empty activation".into()));
    }
    if !(0.0..=100.0).contains(&p) {
        return Err(Error::Contract(format!("pruning ratio {p} outside [0, 100]")));
    }
    let n = hh * ww;
    let rank = p / 100.0 * (n - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac: S = c(rank - lo as f64);
    let mut buf = Vec::with_capacity(n);
    let vals = h.values();
    Ok(Array1::from_iter((0..vv).map(|v| {
        buf.clear();
        buf.extend(
            (0..hh)
                .flat_map(|i| (0..ww).map(move |j| (i, j)))
                .map(|(i, j)| vals[[i, j, v]]),
        );
        buf.sort_unstable_by(|a, b| a.partial_cmp(b).expect("finite activations"));
        buf[lo] + (buf[hi] - buf[lo]) * frac
    })))
}

/// Mask (H×W×V order) of entries strictly below their channel threshold.
fn below_mask<S: Scalar>(h: &ActivationTensor<S>, tau: &Array1<S>) -> Vec<bool> {
    h.values().indexed_iter().map(|((_, _, v), &e)| e < tau[v]).collect()
}

pub(crate) fn prune_zero_masked<S: Scalar>(
    h: &ActivationTensor<S>,
    p: f64,
) -> Result<(ActivationTensor<S>, Vec<bool>)> {
    let tau = channel_thresholds(h, p)?;
    let mask = below_mask(h, &tau);
    let mut out = h.values().clone();
    for (e, &m) in out.iter_mut().zip(&mask) {
        if m {
            *e = S::zero();
        }
    }
    Ok((ActivationTensor::new(out, h.layer())?, mask))
}

pub(crate) fn prune_rewind_masked<S: Scalar>(
    h_t: &ActivationTensor<S>,
    h_s: &ActivationTensor<S>,
    p: f64,
) -> Result<(ActivationTensor<S>, Vec<bool>)> {
    if h_t.shape() != h_s.shape() || h_t.layer() != h_s.layer() {
        return Err(Error::Alignment(format!(
            "target activation {:?}@{} vs source {:?}@{}",
            h_t.shape(),
            h_t.layer(),
            h_s.shape(),
            h_s.layer()
        )));
    }
    let tau = channel_thresholds(h_t, p)?;
    let mask = below_mask(h_t, &tau);
    let mut out = h_t.values().clone();
    for ((e, &m), &s) in out.iter_mut().zip(&mask).zip(h_s.values().iter()) {
        if m {
            *e = s;
        }
    }
    Ok((ActivationTensor::new(out, h_t.layer())?, mask))
}

/// Zeroes entries strictly below their channel's `p`-th percentile.
pub fn prune_zero<S: Scalar>(h: &ActivationTensor<S>, p: f64) -> Result<ActivationTensor<S>> {
    prune_zero_masked(h, p).map(|(t, _)| t)
}

/// Replaces entries of `h_t` strictly below their channel's `p`-th percentile
/// (threshold taken from `h_t`) with the co-located entries of `h_s`.
pub fn prune_rewind<S: Scalar>(
    h_t: &ActivationTensor<S>,
    h_s: &ActivationTensor<S>,
    p: f64,
) -> Result<ActivationTensor<S>> {
    prune_rewind_masked(h_t, h_s, p).map(|(t, _)| t)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Base,
    PruneZero,
    PruneRewind,
}

impl Strategy {
    /// Ratios used throughout the reported experiments.
    pub fn default_ratio(self) -> f64 {
        match self {
            Strategy::Base => 0.0,
            Strategy::PruneZero => 50.0,
            Strategy::PruneRewind => 20.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Base => "base",
            Strategy::PruneZero => "prune-zero",
            Strategy::PruneRewind => "prune-rewind",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Strategy::Base),
            "prune-zero" => Ok(Strategy::PruneZero),
            "prune-rewind" => Ok(Strategy::PruneRewind),
            other => Err(Error::Config(format!(
                "unknown strategy `{other}` (expected base, prune-zero, prune-rewind)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruneConfig {
    pub strategy: Strategy,
    /// Percent in `[0, 100]`; ignored for `base`.
    pub ratio: f64,
    pub style_layers: StyleLayerSet,
    pub gate_probability: f64,
    pub seed: u64,
    /// Truncation ψ toward the mean latent; `None` draws untruncated latents.
    #[serde(default)]
    pub truncation: Option<f64>,
}

impl PruneConfig {
    pub fn new(strategy: Strategy, style_layers: StyleLayerSet, seed: u64) -> Self {
        Self {
            strategy,
            ratio: strategy.default_ratio(),
            style_layers,
            gate_probability: 0.5,
            seed,
            truncation: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=100.0).contains(&self.ratio) {
            return Err(Error::Config(format!("pruning ratio {} outside [0, 100]", self.ratio)));
        }
        if !(0.0..=1.0).contains(&self.gate_probability) {
            return Err(Error::Config(format!(
                "gate probability {} outside [0, 1]",
                self.gate_probability
            )));
        }
        Ok(())
    }
}

/// Where one synthetic image came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceRecord {
    pub index: usize,
    pub image: String,
    pub latent_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class: Option<usize>,
    pub strategy: Strategy,
    pub ratio: f64,
    pub gated_layers: Vec<usize>,
}

/// SplitMix64 finaliser; derives independent per-sample seeds.
pub fn derive_seed(seed: u64, stream: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SAMPLE_STREAM: u64 = 0x5A_4D;

fn truncate<S: Scalar>(
    g: &Generator<S>,
    w: ExtendedLatent<S>,
    psi: f64,
    condition: Option<usize>,
    seed: u64,
) -> Result<ExtendedLatent<S>> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x7E, condition.unwrap_or(0) as u64));
    let center = g.mean_latent(10_000, condition, &mut rng)?;
    let psi: S = c(psi);
    let mut w = w;
    for (e, &m) in w.codes_mut().iter_mut().zip(center.codes().iter()) {
        *e = m + psi * (*e - m);
    }
    Ok(w)
}

/// Draws one augmentation; randomness comes only from `(cfg.seed, index)`.
pub fn sample_one<S: Scalar>(
    target: &Generator<S>,
    source: Option<&Generator<S>>,
    cfg: &PruneConfig,
    condition: Option<usize>,
    index: usize,
) -> Result<(Image<S>, ProvenanceRecord)> {
    cfg.validate()?;
    cfg.style_layers.check_against(target.num_layers())?;
    if cfg.strategy == Strategy::PruneRewind {
        match source {
            Some(s) if s.is_aligned(target) => {}
            Some(_) => {
                return Err(Error::Alignment(
                    "source and target generators differ in architecture".into(),
                ))
            }
            None => return Err(Error::Alignment("prune-rewind needs the source generator".into())),
        }
    }
    let latent_seed = derive_seed(cfg.seed, SAMPLE_STREAM, index as u64);
    let mut rng = ChaCha8Rng::seed_from_u64(latent_seed);
    let z = LatentZ::sample(&mut rng, target.arch().latent_dim);
    let mut w = target.map_latent(&z, condition)?;
    if let Some(psi) = cfg.truncation {
        w = truncate(target, w, psi, condition, cfg.seed)?;
    }
    let gated: Vec<usize> = cfg
        .style_layers
        .layers()
        .iter()
        .copied()
        .filter(|_| rng.random::<f64>() < cfg.gate_probability)
        .collect();
    let gated = if cfg.strategy == Strategy::Base {
        Vec::new()
    } else {
        gated
    };
    let mut plan = InterventionPlan::new(cfg.style_layers.clone());
    match cfg.strategy {
        Strategy::Base => {}
        Strategy::PruneZero => {
            for &l in &gated {
                plan.set(l, Directive::Zero { p: cfg.ratio })?;
            }
        }
        Strategy::PruneRewind => {
            let source = source.expect("checked above");
            let (_, refs) = source.synthesize(&w, None, Some(&gated))?;
            for (l, reference) in refs {
                plan.set(
                    l,
                    Directive::Rewind {
                        p: cfg.ratio,
                        reference,
                    },
                )?;
            }
        }
    }
    let (img, _) = target.synthesize(&w, Some(&plan), None)?;
    let record = ProvenanceRecord {
        index,
        image: image_name(index),
        latent_seed,
        class: condition,
        strategy: cfg.strategy,
        ratio: if cfg.strategy == Strategy::Base { 0.0 } else { cfg.ratio },
        gated_layers: gated,
    };
    Ok((img, record))
}

fn image_name(index: usize) -> String {
    format!("images/{index:05}.png")
}

/// Target generator(s) to sample from.
#[derive(Clone, Copy, Debug)]
pub enum GeneratorBank<'a, S> {
    One(&'a Generator<S>),
    PerClass(&'a BTreeMap<usize, Generator<S>>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClassMode {
    None,
    UniformRandom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub config: PruneConfig,
    pub count: usize,
    pub class_mode: ClassMode,
    pub hash: String,
}

/// Curated synthetic dataset: header plus one record per image.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticManifest {
    pub header: ManifestHeader,
    pub records: Vec<ProvenanceRecord>,
    root: PathBuf,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    header: ManifestHeader,
}

impl SyntheticManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn hash(&self) -> &str {
        &self.header.hash
    }

    pub fn image_path(&self, r: &ProvenanceRecord) -> PathBuf {
        self.root.join(&r.image)
    }

    /// Same manifest with every class field removed.
    pub fn without_classes(&self) -> Self {
        let mut m = self.clone();
        for r in &mut m.records {
            r.class = None;
        }
        m
    }

    pub fn write(&self) -> Result<()> {
        let f = fs::File::create(self.root.join(MANIFEST_FILE))?;
        let mut w = BufWriter::new(f);
        serde_json::to_writer(
            &mut w,
            &HeaderLine {
                header: self.header.clone(),
            },
        )?;
        w.write_all(b"\n")?;
        for r in &self.records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let f = fs::File::open(dir.join(MANIFEST_FILE))?;
        let mut lines = BufReader::new(f).lines();
        let first = lines.next().ok_or_else(|| Error::Contract("empty manifest".into()))??;
        let HeaderLine { header } = serde_json::from_str(&first)?;
        let mut records = Vec::new();
        for line in lines {
            let line = line?;
            if !line.trim().is_empty() {
                records.push(serde_json::from_str(&line)?);
            }
        }
        if records.len() != header.count {
            return Err(Error::Contract(format!(
                "manifest declares {} records, holds {}",
                header.count,
                records.len()
            )));
        }
        Ok(Self {
            header,
            records,
            root: dir.to_path_buf(),
        })
    }

    /// Recomputes the dataset digest from the files on disk.
    pub fn recompute_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        for r in &self.records {
            let path = self.image_path(r);
            let img = image::open(&path)
                .map_err(|_| Error::MissingRecord {
                    record: r.image.clone(),
                    path: path.clone(),
                })?
                .to_rgb8();
            hash_entry(&mut h, img.as_raw(), r)?;
        }
        Ok(hex::encode(h.finalize()))
    }
}

fn hash_entry(h: &mut Sha256, pixels: &[u8], r: &ProvenanceRecord) -> Result<()> {
    h.update(pixels);
    h.update(serde_json::to_vec(r)?);
    Ok(())
}

struct PartialOutput {
    written: Vec<PathBuf>,
    created_dirs: Vec<PathBuf>,
    armed: bool,
}

impl Drop for PartialOutput {
    fn drop(&mut self) {
        if self.armed {
            for f in &self.written {
                let _ = fs::remove_file(f);
            }
            for d in self.created_dirs.iter().rev() {
                let _ = fs::remove_dir(d);
            }
        }
    }
}

/// Writes `count` augmentations plus `manifest.jsonl` under `out_dir`.
/// On failure every file written by this call is removed again.
pub fn curate_dataset<S: Scalar>(
    targets: GeneratorBank<'_, S>,
    sources: Option<GeneratorBank<'_, S>>,
    cfg: &PruneConfig,
    count: usize,
    class_mode: ClassMode,
    out_dir: &Path,
) -> Result<SyntheticManifest> {
    if count == 0 {
        return Err(Error::Config("synthetic dataset size must be at least 1".into()));
    }
    cfg.validate()?;
    let classes: Vec<usize> = match (targets, class_mode) {
        (GeneratorBank::One(g), ClassMode::None) => {
            if g.is_conditional() {
                return Err(Error::Config(
                    "conditional generator needs class mode uniform-random".into(),
                ));
            }
            Vec::new()
        }
        (GeneratorBank::One(g), ClassMode::UniformRandom) => {
            let k = g
                .classes()
                .ok_or_else(|| Error::Config("uniform class mode needs a conditional generator".into()))?;
            (0..k).collect()
        }
        (GeneratorBank::PerClass(m), _) => {
            if m.is_empty() {
                return Err(Error::Config("no class generators given".into()));
            }
            m.keys().copied().collect()
        }
    };
    if let (GeneratorBank::PerClass(t), Some(GeneratorBank::PerClass(s))) = (targets, sources) {
        if !t.keys().eq(s.keys()) {
            return Err(Error::Config(
                "source and target class generators have different keys".into(),
            ));
        }
    }

    let mut guard = PartialOutput {
        written: Vec::new(),
        created_dirs: Vec::new(),
        armed: true,
    };
    for d in [out_dir.to_path_buf(), out_dir.join("images")] {
        if !d.exists() {
            fs::create_dir_all(&d)?;
            guard.created_dirs.push(d);
        }
    }

    let mut hasher = Sha256::new();
    let mut records = Vec::with_capacity(count);
    for index in 0..count {
        let class = if classes.is_empty() {
            None
        } else {
            let mut crng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0xC1A5, index as u64));
            Some(classes[crng.random_range(0..classes.len())])
        };
        let (target, source, condition) = match (targets, class) {
            (GeneratorBank::One(g), cl) => {
                let src = match sources {
                    Some(GeneratorBank::One(s)) => Some(s),
                    _ => None,
                };
                (g, src, cl)
            }
            (GeneratorBank::PerClass(m), Some(cl)) => {
                let src = match sources {
                    Some(GeneratorBank::PerClass(s)) => s.get(&cl),
                    _ => None,
                };
                (&m[&cl], src, None)
            }
            (GeneratorBank::PerClass(_), None) => unreachable!("per-class banks always draw a class"),
        };
        let (img, mut record) = sample_one(target, source, cfg, condition, index)?;
        record.class = class;
        let rgb = img.to_rgb8();
        let path = out_dir.join(&record.image);
        guard.written.push(path.clone());
        rgb.save_with_format(&path, image::ImageFormat::Png)?;
        hash_entry(&mut hasher, rgb.as_raw(), &record)?;
        records.push(record);
    }
    let manifest = SyntheticManifest {
        header: ManifestHeader {
            config: cfg.clone(),
            count,
            class_mode,
            hash: hex::encode(hasher.finalize()),
        },
        records,
        root: out_dir.to_path_buf(),
    };
    guard.written.push(out_dir.join(MANIFEST_FILE));
    manifest.write()?;
    guard.armed = false;
    Ok(manifest)
}

/// Loads every manifest image as a `[-1, 1]` image, in record order.
pub fn load_manifest_images<S: Scalar>(m: &SyntheticManifest) -> Result<Vec<Image<S>>> {
    m.records
        .iter()
        .map(|r| {
            let path = m.image_path(r);
            Image::load_png(&path).map_err(|_| Error::MissingRecord {
                record: r.image.clone(),
                path,
            })
        })
        .collect()
}

/// Brute-force reference used by tests: explicit per-channel sort and
/// element-wise comparison, written independently of the production path.
#[doc(hidden)]
pub fn reference_prune(h_t: &Array3<f64>, h_s: Option<&Array3<f64>>, p: f64) -> Array3<f64> {
    let (hh, ww, vv) = h_t.dim();
    let mut out = h_t.clone();
    for v in 0..vv {
        let mut col: Vec<f64> = Vec::new();
        for i in 0..hh {
            for j in 0..ww {
                col.push(h_t[[i, j, v]]);
            }
        }
        // insertion sort keeps this independent of the std sort path
        for a in 1..col.len() {
            let mut b = a;
            while b > 0 && col[b - 1] > col[b] {
                col.swap(b - 1, b);
                b -= 1;
            }
        }
        let pos = p / 100.0 * (col.len() as f64 - 1.0);
        let below = pos.floor() as usize;
        let above = pos.ceil() as usize;
        let tau = if below == above {
            col[below]
        } else {
            col[below] + (col[above] - col[below]) * (pos - below as f64)
        };
        for i in 0..hh {
            for j in 0..ww {
                if h_t[[i, j, v]] < tau {
                    out[[i, j, v]] = match h_s {
                        Some(s) => s[[i, j, v]],
                        None => 0.0,
                    };
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::{prop, prop_assert, proptest};

    fn act(rows: Vec<Vec<f64>>) -> ActivationTensor<f64> {
        let h = rows.len();
        let w = rows[0].len();
        let mut a = Array3::zeros((h, w, 1));
        for (i, r) in rows.iter().enumerate() {
            for (j, &v) in r.iter().enumerate() {
                a[[i, j, 0]] = v;
            }
        }
        ActivationTensor::new(a, 2).unwrap()
    }

    fn grid(t: &ActivationTensor<f64>) -> Vec<Vec<f64>> {
        let (h, w, _) = t.shape();
        (0..h)
            .map(|i| (0..w).map(|j| t.values()[[i, j, 0]]).collect())
            .collect()
    }

    #[test]
    fn percentile_examples() {
        let h = act(vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(channel_thresholds(&h, 50.0).unwrap()[0], 2.5);
        assert_eq!(channel_thresholds(&h, 0.0).unwrap()[0], 1.0);
        assert_eq!(channel_thresholds(&h, 100.0).unwrap()[0], 4.0);
    }

    #[test]
    fn empty_activation_is_rejected() {
        let h = ActivationTensor::new(Array3::<f64>::zeros((0, 0, 3)), 0).unwrap();
        assert!(matches!(channel_thresholds(&h, 10.0), Err(Error::Contract(_))));
    }

    #[test]
    fn prune_zero_examples() {
        let h = act(vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        assert_eq!(
            grid(&prune_zero(&h, 50.0).unwrap()),
            vec![vec![0.0, 0.0], vec![3.0, 4.0]]
        );
        assert_eq!(
            grid(&prune_zero(&h, 100.0).unwrap()),
            vec![vec![0.0, 0.0], vec![0.0, 4.0]]
        );
        assert_eq!(prune_zero(&h, 0.0).unwrap(), h);
    }

    #[test]
    fn prune_rewind_examples() {
        let ht = act(vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        let hs = act(vec![vec![5.0, 6.0], vec![7.0, 8.0]]);
        assert_eq!(
            grid(&prune_rewind(&ht, &hs, 50.0).unwrap()),
            vec![vec![5.0, 6.0], vec![3.0, 4.0]]
        );
        assert_eq!(prune_rewind(&ht, &hs, 0.0).unwrap(), ht);
        assert_eq!(prune_rewind(&ht, &ht, 73.0).unwrap(), ht);
    }

    #[test]
    fn rewind_mismatch_is_alignment_error() {
        let ht = act(vec![vec![1.0, 2.0]]);
        let hs = act(vec![vec![1.0], vec![2.0]]);
        assert!(matches!(prune_rewind(&ht, &hs, 10.0), Err(Error::Alignment(_))));
        let other_layer = ActivationTensor::new(ht.values().clone(), 3).unwrap();
        assert!(matches!(
            prune_rewind(&ht, &other_layer, 10.0),
            Err(Error::Alignment(_))
        ));
    }

    #[test]
    fn input_is_not_mutated() {
        let h = act(vec![vec![1.0, 2.0], vec![3.0, 4.0]]);
        let before = h.clone();
        let _ = prune_zero(&h, 80.0).unwrap();
        assert_eq!(h, before);
    }

    #[test]
    fn reference_matches_hand_example() {
        let t = array![[[1.0], [2.0]], [[3.0], [4.0]]];
        assert_eq!(reference_prune(&t, None, 50.0), array![[[0.0], [0.0]], [[3.0], [4.0]]]);
    }

    #[test]
    fn strategy_parsing() {
        assert_eq!("prune-zero".parse::<Strategy>().unwrap(), Strategy::PruneZero);
        assert!("prune".parse::<Strategy>().is_err());
        assert_eq!(Strategy::PruneRewind.default_ratio(), 20.0);
    }

    proptest! {
        #[test]
        fn zeroed_count_is_monotone_in_p(
            vals in prop::collection::vec(-3.0f64..3.0, 16),
            p1 in 0.0f64..100.0,
            p2 in 0.0f64..100.0,
        ) {
            let a = Array3::from_shape_vec((4, 4, 1), vals).unwrap();
            let h = ActivationTensor::new(a, 0).unwrap();
            let (lo, hi) = if p1 <= p2 { (p1, p2) } else { (p2, p1) };
            let (_, m_lo) = prune_zero_masked(&h, lo).unwrap();
            let (_, m_hi) = prune_zero_masked(&h, hi).unwrap();
            let count = |m: &[bool]| m.iter().filter(|&&b| b).count();
            prop_assert!(count(&m_lo) <= count(&m_hi));
        }
    }
}
