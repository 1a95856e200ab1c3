//! Labeled image datasets: in-memory form plus an on-disk directory layout
//! (`images/NNNNN.png` and `dataset.json`).

use std::cell::Cell;
use std::fs;
use std::path::Path;

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::shapes;
use crate::stylegen::Image;

pub const DATASET_FILE: &str = "dataset.json";

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub images: Vec<RgbImage>,
    pub labels: Vec<usize>,
    pub classes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub image: String,
    pub label: usize,
}

/// Contents of `dataset.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub classes: usize,
    pub hash: String,
    /// Free-form description of how the set was produced.
    #[serde(default)]
    pub provenance: serde_json::Value,
    pub records: Vec<DatasetRecord>,
}

impl LabeledDataset {
    pub fn new(images: Vec<RgbImage>, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Contract(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Contract(format!("label {bad} outside {classes} classes")));
        }
        Ok(Self {
            images,
            labels,
            classes,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn image<S: Scalar>(&self, i: usize) -> Image<S> {
        Image::from_rgb8(&self.images[i])
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
        }
    }

    /// SHA-256 over pixels and labels in order.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (img, &l) in self.images.iter().zip(&self.labels) {
            h.update(img.as_raw());
            h.update((l as u64).to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn save(&self, dir: &Path, provenance: serde_json::Value) -> Result<DatasetManifest> {
        fs::create_dir_all(dir.join("images"))?;
        let mut records = Vec::with_capacity(self.len());
        for (i, (img, &label)) in self.images.iter().zip(&self.labels).enumerate() {
            let name = format!("images/{i:05}.png");
            img.save_with_format(dir.join(&name), image::ImageFormat::Png)?;
            records.push(DatasetRecord { image: name, label });
        }
        let m = DatasetManifest {
            classes: self.classes,
            hash: self.hash(),
            provenance,
            records,
        };
        fs::write(dir.join(DATASET_FILE), serde_json::to_vec_pretty(&m)?)?;
        Ok(m)
    }

    pub fn load(dir: &Path) -> Result<(Self, DatasetManifest)> {
        let m: DatasetManifest = serde_json::from_slice(&fs::read(dir.join(DATASET_FILE))?)?;
        let mut images = Vec::with_capacity(m.records.len());
        for r in &m.records {
            let path = dir.join(&r.image);
            let img = image::open(&path)
                .map_err(|_| Error::MissingRecord {
                    record: r.image.clone(),
                    path: path.clone(),
                })?
                .to_rgb8();
            images.push(img);
        }
        let labels = m.records.iter().map(|r| r.label).collect();
        Ok((Self::new(images, labels, m.classes)?, m))
    }
}

/// Class-balanced procedural shapes set; deterministic in `seed`.
pub fn toy_shapes(per_class: usize, seed: u64) -> LabeledDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut images = Vec::with_capacity(per_class * shapes::CLASSES);
    let mut labels = Vec::with_capacity(per_class * shapes::CLASSES);
    for i in 0..per_class * shapes::CLASSES {
        let class = i % shapes::CLASSES;
        images.push(shapes::sample_image(&mut rng, class));
        labels.push(class);
    }
    LabeledDataset {
        images,
        labels,
        classes: shapes::CLASSES,
    }
}

/// Read-only view that counts every image access. The single-shot path reads
/// target data only through this wrapper.
#[derive(Debug)]
pub struct AuditedSplit<'a> {
    inner: &'a LabeledDataset,
    reads: Cell<usize>,
    touched: std::cell::RefCell<Vec<usize>>,
}

impl<'a> AuditedSplit<'a> {
    pub fn new(inner: &'a LabeledDataset) -> Self {
        Self {
            inner,
            reads: Cell::new(0),
            touched: Default::default(),
        }
    }

    pub fn len(&self) -> usize {
        self.inner.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inner.is_empty()
    }

    pub fn classes(&self) -> usize {
        self.inner.classes
    }

    /// Returns image and label, recording the access.
    pub fn read(&self, i: usize) -> (&'a RgbImage, usize) {
        self.reads.set(self.reads.get() + 1);
        let mut t = self.touched.borrow_mut();
        if !t.contains(&i) {
            t.push(i);
        }
        (&self.inner.images[i], self.inner.labels[i])
    }

    /// Indices whose label is `class`, without reading any pixels.
    pub fn indices_of_class(&self, class: usize) -> Vec<usize> {
        (0..self.inner.len())
            .filter(|&i| self.inner.labels[i] == class)
            .collect()
    }

    /// Seeded uniform choice of one index per requested class.
    pub fn choose_shots(&self, classes: &[usize], seed: u64) -> Result<Vec<(usize, usize)>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        classes
            .iter()
            .map(|&c| {
                let pool = self.indices_of_class(c);
                if pool.is_empty() {
                    return Err(Error::Config(format!("target split has no image of class {c}")));
                }
                Ok((c, pool[rng.random_range(0..pool.len())]))
            })
            .collect()
    }

    pub fn total_reads(&self) -> usize {
        self.reads.get()
    }

    /// Distinct images read so far.
    pub fn distinct_reads(&self) -> Vec<usize> {
        let mut v = self.touched.borrow().clone();
        v.sort_unstable();
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_set_is_balanced_and_deterministic() {
        let a = toy_shapes(4, 1);
        assert_eq!(a.len(), 12);
        assert_eq!(a.labels.iter().filter(|&&l| l == 2).count(), 4);
        assert_eq!(a.hash(), toy_shapes(4, 1).hash());
        assert_ne!(a.hash(), toy_shapes(4, 2).hash());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let a = toy_shapes(2, 5);
        let m = a.save(dir.path(), serde_json::json!({"kind": "source"})).unwrap();
        let (b, m2) = LabeledDataset::load(dir.path()).unwrap();
        assert_eq!(a, b);
        assert_eq!(m, m2);
    }

    #[test]
    fn audit_counts_reads() {
        let a = toy_shapes(3, 0);
        let s = AuditedSplit::new(&a);
        let shots = s.choose_shots(&[0, 1, 2], 9).unwrap();
        assert_eq!(s.total_reads(), 0);
        for &(c, i) in &shots {
            assert_eq!(s.read(i).1, c);
        }
        assert_eq!(s.distinct_reads().len(), 3);
    }
}
