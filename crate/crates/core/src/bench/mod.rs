//! Synthetic shifted benchmark: data generation, base pretraining and
//! the dataset layout shared by every command.
//!
//! A dataset directory holds `manifest.json` plus one LTTF file per image
//! under `images/<split>/`. Splits are `train`, `test` and one
//! `test_<shift>` per corruption, the latter rendered from the clean test
//! images so that clean and shifted accuracies are paired.

mod synth;
mod train;

pub use synth::{apply_shift, caption, Attributes, class_name, max_classes, render, ShiftKind, COLORS, IMAGE_SIZE, SHAPES};
pub use train::{embed_text, pretrain, PretrainConfig, TrainLog, DEFAULT_TEMPLATES};

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::encoder::NormStats;
use crate::error::{Error, Result};
use crate::rng::stream;
use crate::tensor::{read_tensor_file, write_tensor_file, Float, Tensor};
use crate::ttt::Instance;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const TRAIN_SPLIT: &str = "train";
pub const TEST_SPLIT: &str = "test";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticShiftSpec {
    pub num_classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub shifts: Vec<ShiftKind>,
    pub severity: usize,
    pub seed: u64,
}

impl Default for SyntheticShiftSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            train_per_class: 200,
            test_per_class: 20,
            shifts: ShiftKind::CORRUPTIONS.to_vec(),
            severity: 3,
            seed: 0,
        }
    }
}

impl SyntheticShiftSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > max_classes() {
            return Err(Error::invalid(format!(
                "class count {} outside 2..={}",
                self.num_classes,
                max_classes()
            )));
        }
        if self.train_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::invalid("every split needs at least one item per class"));
        }
        if self.severity > 5 {
            return Err(Error::invalid(format!("severity {} outside 0..=5", self.severity)));
        }
        let unique: HashSet<_> = self.shifts.iter().collect();
        if unique.len() != self.shifts.len() {
            return Err(Error::invalid("shift kinds repeated"));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

pub fn shift_split(kind: ShiftKind) -> String {
    format!("{TEST_SPLIT}_{}", kind.name())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestItem {
    pub id: String,
    /// Relative to the dataset directory.
    pub path: String,
    pub label: usize,
    pub caption: String,
    pub split: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub spec: SyntheticShiftSpec,
    pub class_names: Vec<String>,
    /// Per-channel statistics of the training pixels.
    pub norm: NormStats,
    /// `[C, H, W]` of every image.
    pub image_shape: Vec<usize>,
    pub items: Vec<ManifestItem>,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        let k = self.class_names.len();
        let mut ids = HashSet::new();
        for item in &self.items {
            if !ids.insert(item.id.as_str()) {
                return Err(Error::invalid(format!("duplicate item id `{}`", item.id)));
            }
            if item.label >= k {
                return Err(Error::invalid(format!("item `{}` has label {} ≥ {k}", item.id, item.label)));
            }
        }
        if self.norm.mean.len() != self.image_shape.first().copied().unwrap_or(0)
            || self.norm.std.len() != self.norm.mean.len()
            || self.norm.std.iter().any(|&s| !(s > 0.0))
        {
            return Err(Error::invalid("normalization stats do not match the image channels"));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text)?;
        m.validate()?;
        Ok(m)
    }

    pub fn split<'a>(&'a self, name: &'a str) -> impl Iterator<Item = &'a ManifestItem> + 'a {
        self.items.iter().filter(move |i| i.split == name)
    }

    /// Split names in first-appearance order.
    pub fn split_names(&self) -> Vec<String> {
        let mut names: Vec<String> = Vec::new();
        for item in &self.items {
            if !names.contains(&item.split) {
                names.push(item.split.clone());
            }
        }
        names
    }
}

fn channel_stats<'a>(images: impl Iterator<Item = &'a Tensor<f32>>, channels: usize) -> NormStats {
    let mut sum = vec![0.0f64; channels];
    let mut sq = vec![0.0f64; channels];
    let mut count = 0usize;
    for img in images {
        let plane = img.numel() / channels;
        for (c, chunk) in img.data().chunks(plane).enumerate() {
            for &v in chunk {
                sum[c] += v as f64;
                sq[c] += (v as f64) * (v as f64);
            }
        }
        count += plane;
    }
    let n = count.max(1) as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(1e-6))
        .collect();
    NormStats { mean, std }
}

/// Renders every split of `spec` into `out` and writes the manifest.
///
/// Each split draws from its own stream, so train and test never share
/// an image and adding a shift leaves the other splits untouched.
pub fn generate(spec: &SyntheticShiftSpec, out: &Path) -> Result<DatasetManifest> {
    spec.validate()?;
    let k = spec.num_classes;
    let mut items = Vec::new();
    let mut write_split = |split: &str, images: &[(Tensor<f32>, usize, String)]| -> Result<()> {
        let dir = out.join("images").join(split);
        fs::create_dir_all(&dir)?;
        for (i, (img, label, caption)) in images.iter().enumerate() {
            let rel = format!("images/{split}/{i:05}.lttf");
            write_tensor_file(&out.join(&rel), img)?;
            items.push(ManifestItem {
                id: format!("{split}-{i:05}"),
                path: rel,
                label: *label,
                caption: caption.clone(),
                split: split.to_string(),
            });
        }
        Ok(())
    };
    let draw = |split: &str, per_class: usize| -> Vec<(Tensor<f32>, usize, String)> {
        let mut rng = stream(spec.seed, split);
        (0..per_class * k)
            .map(|i| {
                let label = i % k;
                let (img, attrs) = render(label, &mut rng);
                (img, label, caption(label, attrs, &mut rng))
            })
            .collect()
    };

    let train = draw(TRAIN_SPLIT, spec.train_per_class);
    let norm = channel_stats(train.iter().map(|t| &t.0), 3);
    write_split(TRAIN_SPLIT, &train)?;
    drop(train);
    let test = draw(TEST_SPLIT, spec.test_per_class);
    write_split(TEST_SPLIT, &test)?;
    for &kind in &spec.shifts {
        let name = shift_split(kind);
        let mut rng = stream(spec.seed, &name);
        let shifted = test
            .iter()
            .map(|(img, label, cap)| Ok((apply_shift(img, kind, spec.severity, &mut rng)?, *label, cap.clone())))
            .collect::<Result<Vec<_>>>()?;
        write_split(&name, &shifted)?;
    }

    let manifest = DatasetManifest {
        spec: spec.clone(),
        class_names: (0..k).map(class_name).collect(),
        norm,
        image_shape: vec![3, IMAGE_SIZE, IMAGE_SIZE],
        items,
    };
    fs::write(out.join(MANIFEST_FILE), manifest.to_json()?)?;
    Ok(manifest)
}

/// A generated dataset on disk.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(root: &Path) -> Result<Self> {
        let text = fs::read_to_string(root.join(MANIFEST_FILE))?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest: DatasetManifest::from_json(&text)?,
        })
    }

    pub fn load_image<F: Float>(&self, item: &ManifestItem) -> Result<Tensor<F>> {
        let t: Tensor<f32> = read_tensor_file(&self.root.join(&item.path))?;
        if t.shape() != self.manifest.image_shape.as_slice() {
            return Err(Error::shape("load_image", t.shape(), &self.manifest.image_shape));
        }
        Ok(t.cast())
    }

    /// Every image of `split` as an engine instance, in manifest order.
    pub fn instances<F: Float>(&self, split: &str) -> Result<Vec<Instance<F>>> {
        let out = self
            .manifest
            .split(split)
            .map(|item| {
                Ok(Instance {
                    id: item.id.clone(),
                    image: self.load_image(item)?,
                    label: item.label,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        if out.is_empty() {
            return Err(Error::invalid(format!("split `{split}` is empty or missing")));
        }
        Ok(out)
    }

    /// `(raw image, caption)` pairs of `split`.
    pub fn pairs<F: Float>(&self, split: &str) -> Result<Vec<(Tensor<F>, String)>> {
        self.manifest
            .split(split)
            .map(|item| Ok((self.load_image(item)?, item.caption.clone())))
            .collect()
    }
}
