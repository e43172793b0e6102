//! JSON dataset manifests listing PPM images with identity, camera and split.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::ppm::RgbImage;
use crate::error::{Error, Result};
use crate::stn::{bilinear_sample, grid_generate, TransformParams};
use crate::tensor::Tensor;
use crate::trainer::{preprocess, LabeledImages, INPUT_HEIGHT, INPUT_WIDTH};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Query => "query",
            Split::Gallery => "gallery",
        })
    }
}

/// One manifest entry as stored on disk; `path` is relative to the manifest.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRecord {
    pub path: String,
    pub identity: usize,
    pub camera: usize,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestFile {
    pub version: u32,
    pub samples: Vec<SampleRecord>,
}

impl ManifestFile {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub record: SampleRecord,
    /// Image location resolved against the manifest directory.
    pub file: PathBuf,
    /// Contiguous class index for training samples.
    pub label: Option<usize>,
}

/// A loaded manifest: samples in file order, contiguous training labels and
/// the per-channel means of the training images.
#[derive(Debug, Clone)]
pub struct DatasetManifest {
    pub samples: Vec<Sample>,
    /// `label_ids[label]` is the original identity of a training class.
    pub label_ids: Vec<usize>,
    /// Channel means (0..255 scale) over the training split, measured on the
    /// 160x64 resampled images the network sees.
    pub means: [f64; 3],
}

/// Decode an image and resample it to the network input size.
pub fn load_raw(file: &Path) -> Result<Tensor<f32>> {
    let img = RgbImage::read(file)?.to_tensor();
    if img.shape()[1] < 8 || img.shape()[2] < 8 {
        return Err(Error::Ingest {
            path: file.to_path_buf(),
            reason: format!("degenerate {}x{} image (need at least 8x8)", img.shape()[2], img.shape()[1]),
        });
    }
    if img.shape()[1..] == [INPUT_HEIGHT, INPUT_WIDTH] {
        return Ok(img);
    }
    bilinear_sample(&img, &grid_generate(&TransformParams::IDENTITY, INPUT_HEIGHT, INPUT_WIDTH)?)
}

/// Per-channel mean of `[3, h, w]` images; each image is summed separately and
/// the sums are combined in order so the result does not depend on threading.
pub fn channel_means(images: &[Tensor<f32>]) -> [f64; 3] {
    let sums: Vec<([f64; 3], usize)> = images
        .par_iter()
        .map(|t| {
            let plane = t.len() / 3;
            let mut s = [0.0; 3];
            for (c, acc) in s.iter_mut().enumerate() {
                *acc = t.data()[c * plane..(c + 1) * plane].iter().map(|&v| v as f64).sum();
            }
            (s, plane)
        })
        .collect();
    let mut total = [0.0; 3];
    let mut count = 0usize;
    for (s, n) in sums {
        for c in 0..3 {
            total[c] += s[c];
        }
        count += n;
    }
    total.map(|t| if count == 0 { 0.0 } else { t / count as f64 })
}

impl DatasetManifest {
    /// Parse and validate `path` (a manifest file, or a directory holding
    /// `manifest.json`), then measure the training means.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let text = fs::read_to_string(&file).map_err(|e| Error::io(&file, e))?;
        let parsed: ManifestFile =
            serde_json::from_str(&text).map_err(|e| Error::Manifest(format!("{}: {e}", file.display())))?;
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_records(parsed, &root)
    }

    /// Validate records whose paths are relative to `root`.
    pub fn from_records(parsed: ManifestFile, root: &Path) -> Result<Self> {
        if parsed.version != MANIFEST_VERSION {
            return Err(Error::Manifest(format!(
                "unsupported manifest version {} (expected {MANIFEST_VERSION})",
                parsed.version
            )));
        }
        let mut seen = HashSet::new();
        for r in &parsed.samples {
            if !seen.insert(r.path.as_str()) {
                return Err(Error::Manifest(format!("duplicate sample `{}`", r.path)));
            }
        }
        let train_ids: BTreeSet<usize> = parsed
            .samples
            .iter()
            .filter(|r| r.split == Split::Train)
            .map(|r| r.identity)
            .collect();
        if train_ids.is_empty() {
            return Err(Error::Manifest("the train split is empty".into()));
        }
        let label_ids: Vec<usize> = train_ids.into_iter().collect();
        let samples: Vec<Sample> = parsed
            .samples
            .into_iter()
            .map(|record| {
                let file = root.join(&record.path);
                let label = (record.split == Split::Train)
                    .then(|| label_ids.binary_search(&record.identity).expect("collected above"));
                Sample { record, file, label }
            })
            .collect();
        if let Some(missing) = samples.iter().find(|s| !s.file.is_file()) {
            return Err(Error::Ingest {
                path: missing.file.clone(),
                reason: "image file not found".into(),
            });
        }
        let mut manifest = Self {
            samples,
            label_ids,
            means: [0.0; 3],
        };
        let train = manifest.raw_images(Split::Train)?;
        manifest.means = channel_means(&train);
        Ok(manifest)
    }

    pub fn num_classes(&self) -> usize {
        self.label_ids.len()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.record.split == split)
    }

    /// Decoded, resampled (not yet normalized) images of one split, in manifest order.
    pub fn raw_images(&self, split: Split) -> Result<Vec<Tensor<f32>>> {
        let files: Vec<&Path> = self.split(split).map(|s| s.file.as_path()).collect();
        files.par_iter().map(|f| load_raw(f)).collect()
    }

    /// Network-ready images of one split, normalized with `means`.
    pub fn images(&self, split: Split, means: &[f64; 3]) -> Result<Vec<Tensor<f32>>> {
        self.raw_images(split)?.par_iter().map(|t| preprocess(t, means)).collect()
    }

    /// The training split as labeled network inputs, normalized with `means`.
    pub fn training_set(&self, means: &[f64; 3]) -> Result<LabeledImages> {
        Ok(LabeledImages {
            images: self.images(Split::Train, means)?,
            labels: self.split(Split::Train).map(|s| s.label.expect("train samples are labeled")).collect(),
            num_classes: self.num_classes(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_gray(dir: &Path, name: &str, v: u8) {
        RgbImage::new(64, 160, [v, v, v]).write(&dir.join(name)).unwrap();
    }

    fn rec(path: &str, identity: usize, camera: usize, split: Split) -> SampleRecord {
        SampleRecord {
            path: path.into(),
            identity,
            camera,
            split,
        }
    }

    #[test]
    fn remaps_train_identities_and_measures_gray_means() {
        let dir = tempfile::tempdir().unwrap();
        for n in ["a", "b", "c", "q", "g"] {
            write_gray(dir.path(), &format!("{n}.ppm"), 90);
        }
        let m = ManifestFile {
            version: 1,
            samples: vec![
                rec("a.ppm", 42, 0, Split::Train),
                rec("b.ppm", 5, 1, Split::Train),
                rec("c.ppm", 9, 0, Split::Train),
                rec("q.ppm", 7, 0, Split::Query),
                rec("g.ppm", 7, 1, Split::Gallery),
            ],
        };
        m.write(&dir.path().join(MANIFEST_FILE)).unwrap();
        let d = DatasetManifest::load(dir.path()).unwrap();
        assert_eq!(d.label_ids, vec![5, 9, 42]);
        let labels: Vec<_> = d.samples.iter().map(|s| s.label).collect();
        assert_eq!(labels, vec![Some(2), Some(0), Some(1), None, None]);
        assert_eq!(d.means, [90.0; 3]);
        assert_eq!(d.split(Split::Query).count(), 1);
    }

    #[test]
    fn error_paths() {
        let dir = tempfile::tempdir().unwrap();
        write_gray(dir.path(), "a.ppm", 1);
        let load = |samples: Vec<SampleRecord>| DatasetManifest::from_records(ManifestFile { version: 1, samples }, dir.path());
        assert!(matches!(load(vec![rec("a.ppm", 0, 0, Split::Query)]), Err(Error::Manifest(_))));
        assert!(matches!(
            load(vec![rec("a.ppm", 0, 0, Split::Train), rec("a.ppm", 0, 1, Split::Query)]),
            Err(Error::Manifest(_))
        ));
        match load(vec![rec("a.ppm", 0, 0, Split::Train), rec("gone.ppm", 1, 0, Split::Train)]) {
            Err(Error::Ingest { path, .. }) => assert!(path.ends_with("gone.ppm")),
            other => panic!("expected ingest error, got {other:?}"),
        }
        let bad_version = DatasetManifest::from_records(ManifestFile { version: 2, samples: vec![] }, dir.path());
        assert!(matches!(bad_version, Err(Error::Manifest(_))));
        let tiny = dir.path().join("tiny.ppm");
        RgbImage::new(4, 4, [0, 0, 0]).write(&tiny).unwrap();
        assert!(matches!(load(vec![rec("tiny.ppm", 0, 0, Split::Train)]), Err(Error::Ingest { .. })));
    }

    #[test]
    fn rejects_unknown_keys() {
        let text = r#"{"version":1,"samples":[{"path":"a","identity":0,"camera":0,"split":"train","extra":1}]}"#;
        assert!(serde_json::from_str::<ManifestFile>(text).is_err());
    }

    #[test]
    fn non_native_sizes_are_resampled() {
        let dir = tempfile::tempdir().unwrap();
        RgbImage::new(32, 80, [200, 100, 0]).write(&dir.path().join("s.ppm")).unwrap();
        let t = load_raw(&dir.path().join("s.ppm")).unwrap();
        assert_eq!(t.shape(), &[3, 160, 64]);
        assert!(t.data()[..160 * 64].iter().all(|&v| (v - 200.0).abs() < 1e-4));
    }
}
