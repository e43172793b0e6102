//! Toy pedestrians: three horizontal colour bands (head, torso, legs) whose
//! vertical position and size vary per image, on a per-camera background.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::{DatasetManifest, ManifestFile, SampleRecord, Split, MANIFEST_FILE, MANIFEST_VERSION};
use super::ppm::RgbImage;
use crate::error::{Error, Result};
use crate::trainer::{INPUT_HEIGHT, INPUT_WIDTH};

/// Nominal band centres and half-heights in normalized rows (−1 = top).
const BAND_CENTER: [f64; 3] = [-0.62, -0.05, 0.6];
const BAND_HALF_HEIGHT: [f64; 3] = [0.22, 0.33, 0.35];
/// Half-widths of the bands in normalized columns.
const BAND_HALF_WIDTH: [f64; 3] = [0.25, 0.45, 0.35];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub identities: usize,
    pub images_per_identity: usize,
    pub cameras: usize,
    /// Standard deviation of the additive pixel noise as a fraction of the value range.
    pub noise: f64,
    pub palette_seed: u64,
    /// Put each identity's gallery image under a different camera than its query.
    pub cross_camera: bool,
    /// Largest vertical shift of the figure, in normalized units.
    pub offset_jitter: f64,
    /// Largest relative change of the figure height.
    pub scale_jitter: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            identities: 20,
            images_per_identity: 6,
            cameras: 2,
            noise: 0.05,
            palette_seed: 0,
            cross_camera: true,
            offset_jitter: 0.12,
            scale_jitter: 0.15,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.identities == 0 {
            return Err(Error::Config("synthetic dataset needs at least one identity".into()));
        }
        if self.images_per_identity < 2 {
            return Err(Error::Config(format!(
                "images_per_identity = {} (need >= 2 for a query and a gallery image)",
                self.images_per_identity
            )));
        }
        if self.cameras == 0 {
            return Err(Error::Config("cameras must be >= 1".into()));
        }
        if self.cross_camera && self.cameras < 2 {
            return Err(Error::Config(format!(
                "camera-disjoint query/gallery needs at least 2 cameras, got {}",
                self.cameras
            )));
        }
        if !(0.0..1.0).contains(&self.noise) {
            return Err(Error::Config(format!("noise {} outside [0, 1)", self.noise)));
        }
        if !(0.0..0.5).contains(&self.offset_jitter) || !(0.0..0.5).contains(&self.scale_jitter) {
            return Err(Error::Config("offset_jitter and scale_jitter must lie in [0, 0.5)".into()));
        }
        Ok(())
    }
}

/// Colours of the head, torso and leg bands of one identity.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Palette(pub [[u8; 3]; 3]);

/// Per-image placement of the figure.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Layout {
    /// Vertical shift in normalized units.
    pub offset: f64,
    /// Multiplier on band heights and centres.
    pub scale: f64,
    /// Horizontal shift in normalized units.
    pub shift: f64,
}

impl Layout {
    pub const NOMINAL: Layout = Layout {
        offset: 0.0,
        scale: 1.0,
        shift: 0.0,
    };
}

/// Deterministic palettes for `n` identities.
pub fn palettes(n: usize, seed: u64) -> Vec<Palette> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| Palette([0; 3].map(|_: u8| [0; 3].map(|_: u8| rng.gen())))).collect()
}

/// Background colour of each camera.
pub fn backgrounds(cameras: usize, seed: u64) -> Vec<[u8; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    (0..cameras).map(|_| [0; 3].map(|_: u8| rng.gen_range(60..=190))).collect()
}

/// Draw one 160x64 image. `noise` is a fraction of the 0..255 range.
pub fn render<R: Rng + ?Sized>(palette: &Palette, background: [u8; 3], layout: Layout, noise: f64, rng: &mut R) -> RgbImage {
    let (h, w) = (INPUT_HEIGHT, INPUT_WIDTH);
    let mut img = RgbImage::new(w, h, background);
    for k in 0..3 {
        let cy = BAND_CENTER[k] * layout.scale + layout.offset;
        let hh = BAND_HALF_HEIGHT[k] * layout.scale;
        let (x0, x1) = (layout.shift - BAND_HALF_WIDTH[k], layout.shift + BAND_HALF_WIDTH[k]);
        for y in 0..h {
            let ny = -1.0 + 2.0 * y as f64 / (h - 1) as f64;
            if (ny - cy).abs() > hh {
                continue;
            }
            for x in 0..w {
                let nx = -1.0 + 2.0 * x as f64 / (w - 1) as f64;
                if nx >= x0 && nx <= x1 {
                    img.put(x, y, palette.0[k]);
                }
            }
        }
    }
    if noise > 0.0 {
        let normal = Normal::new(0.0, noise * 255.0).expect("positive deviation");
        for v in &mut img.pixels {
            *v = (*v as f64 + normal.sample(rng)).round().clamp(0.0, 255.0) as u8;
        }
    }
    img
}

/// Every sample of the dataset in manifest order, with its image.
pub fn synthesize<R: Rng + ?Sized>(cfg: &SyntheticConfig, rng: &mut R) -> Result<Vec<(SampleRecord, RgbImage)>> {
    cfg.validate()?;
    let pals = palettes(cfg.identities, cfg.palette_seed);
    let bgs = backgrounds(cfg.cameras, cfg.palette_seed);
    let mut out = Vec::with_capacity(cfg.identities * cfg.images_per_identity);
    for (id, pal) in pals.iter().enumerate() {
        let camera = |j: usize| j % cfg.cameras;
        let gallery = (1..cfg.images_per_identity)
            .find(|&j| !cfg.cross_camera || camera(j) != camera(0))
            .ok_or_else(|| Error::Config("no image available for a cross-camera gallery entry".into()))?;
        for j in 0..cfg.images_per_identity {
            let layout = Layout {
                offset: rng.gen_range(-1.0..=1.0) * cfg.offset_jitter,
                scale: 1.0 + rng.gen_range(-1.0..=1.0) * cfg.scale_jitter,
                shift: rng.gen_range(-1.0..=1.0) * 0.05,
            };
            let img = render(pal, bgs[camera(j)], layout, cfg.noise, rng);
            let split = match j {
                0 => Split::Query,
                j if j == gallery => Split::Gallery,
                _ => Split::Train,
            };
            let record = SampleRecord {
                path: format!("images/{id:04}_c{}_{j:02}.ppm", camera(j)),
                identity: id,
                camera: camera(j),
                split,
            };
            out.push((record, img));
        }
    }
    Ok(out)
}

/// Write the dataset (PPM images plus `manifest.json`) under `out_dir` and load it back.
pub fn generate_synthetic<R: Rng + ?Sized>(cfg: &SyntheticConfig, out_dir: &Path, rng: &mut R) -> Result<DatasetManifest> {
    let samples = synthesize(cfg, rng)?;
    let images = out_dir.join("images");
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut records = Vec::with_capacity(samples.len());
    for (record, img) in samples {
        img.write(&out_dir.join(&record.path))?;
        records.push(record);
    }
    ManifestFile {
        version: MANIFEST_VERSION,
        samples: records,
    }
    .write(&out_dir.join(MANIFEST_FILE))?;
    DatasetManifest::load(out_dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_renders_are_reproducible() {
        let p = palettes(1, 3)[0];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = render(&p, [100, 100, 100], Layout::NOMINAL, 0.0, &mut rng);
        let b = render(&p, [100, 100, 100], Layout::NOMINAL, 0.0, &mut rng);
        assert_eq!(a, b);
    }

    #[test]
    fn distant_palettes_differ_strongly() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let black = render(&Palette([[0; 3]; 3]), [128; 3], Layout::NOMINAL, 0.05, &mut rng);
        let white = render(&Palette([[255; 3]; 3]), [128; 3], Layout::NOMINAL, 0.05, &mut rng);
        let mad = black
            .pixels
            .iter()
            .zip(&white.pixels)
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .sum::<f64>()
            / black.pixels.len() as f64
            / 255.0;
        assert!(mad > 0.2, "mean absolute difference {mad}");
    }

    #[test]
    fn split_counts_and_cross_camera_gallery() {
        let s = synthesize(&SyntheticConfig::default(), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let count = |sp| s.iter().filter(|(r, _)| r.split == sp).count();
        assert_eq!((count(Split::Query), count(Split::Gallery), count(Split::Train)), (20, 20, 80));
        for id in 0..20 {
            let cam = |sp| s.iter().find(|(r, _)| r.identity == id && r.split == sp).unwrap().0.camera;
            assert_ne!(cam(Split::Query), cam(Split::Gallery));
        }
    }

    #[test]
    fn config_errors() {
        let one_cam = SyntheticConfig {
            cameras: 1,
            ..Default::default()
        };
        assert!(matches!(one_cam.validate(), Err(Error::Config(_))));
        assert!(SyntheticConfig { cross_camera: false, ..one_cam }.validate().is_ok());
        assert!(SyntheticConfig { images_per_identity: 1, ..Default::default() }.validate().is_err());
        assert!(SyntheticConfig { noise: 1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn nearest_centroid_separates_identities() {
        let cfg = SyntheticConfig::default();
        let s = synthesize(&cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let len = s[0].1.pixels.len();
        let mut centroids = vec![vec![0.0f64; len]; cfg.identities];
        let mut counts = vec![0usize; cfg.identities];
        for (r, img) in s.iter().filter(|(r, _)| r.split == Split::Train) {
            for (c, &v) in centroids[r.identity].iter_mut().zip(&img.pixels) {
                *c += v as f64;
            }
            counts[r.identity] += 1;
        }
        for (c, n) in centroids.iter_mut().zip(&counts) {
            c.iter_mut().for_each(|v| *v /= *n as f64);
        }
        let held_out: Vec<_> = s.iter().filter(|(r, _)| r.split != Split::Train).collect();
        let correct = held_out
            .iter()
            .filter(|(r, img)| {
                let dist = |c: &Vec<f64>| c.iter().zip(&img.pixels).map(|(a, &b)| (a - b as f64).powi(2)).sum::<f64>();
                let best = (0..cfg.identities)
                    .min_by(|&a, &b| dist(&centroids[a]).total_cmp(&dist(&centroids[b])))
                    .unwrap();
                best == r.identity
            })
            .count();
        let acc = correct as f64 / held_out.len() as f64;
        assert!(acc >= 0.9, "nearest-centroid accuracy {acc}");
    }

    #[test]
    fn written_dataset_loads_and_is_byte_reproducible() {
        let cfg = SyntheticConfig {
            identities: 3,
            images_per_identity: 4,
            ..Default::default()
        };
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let m = generate_synthetic(&cfg, a.path(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        generate_synthetic(&cfg, b.path(), &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(m.num_classes(), 3);
        assert_eq!(m.samples.len(), 12);
        for s in &m.samples {
            let other = b.path().join(&s.record.path);
            assert_eq!(fs::read(&s.file).unwrap(), fs::read(other).unwrap());
        }
        let again = DatasetManifest::load(a.path()).unwrap();
        for (x, y) in m.means.iter().zip(again.means) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}
