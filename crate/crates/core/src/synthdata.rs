//! Deterministic synthetic grayscale dataset: low-frequency textured
//! backgrounds with planted masses and microcalcification clusters, plus
//! pixel masks. Malignant lesions are bright with sharp, spiky outlines;
//! benign distractors share the shapes but are dimmer and smoother, so
//! telling them apart requires appearance, not mere presence.
//!
//! Every byte is a pure function of the data config: samples derive their
//! own rng stream from (seed, index).

use crate::config::DataConfig;
use crate::dataset::{Manifest, ManifestEntry, Split};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::labels::{
    image_label, mask_to_pgm, Mask, CLASS_BENIGN_CALC, CLASS_BENIGN_MASS, CLASS_MALIGNANT_CALC,
    CLASS_MALIGNANT_MASS,
};
use crate::pgm::image_to_pgm;
use crate::seeding::{derived_rng, STREAM_SAMPLE, STREAM_SPLIT};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use std::fmt;
use std::path::Path;

/// A pixel joins the mask when a lesion adds at least this much intensity.
pub const MASK_SUPPORT_THRESHOLD: f64 = 0.05;
/// Malignant lesions stay small relative to the image.
pub const MAX_MALIGNANT_AREA_FRACTION: f64 = 0.04;
const PLACEMENT_RETRIES: usize = 100;
const BACKGROUND_LO: f64 = 0.1;
const BACKGROUND_HI: f64 = 0.5;
/// Reference canvas the size parameters below are calibrated for.
const REFERENCE_SIZE: f64 = 256.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dot {
    pub dx: f64,
    pub dy: f64,
    pub radius: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LesionShape {
    /// Roundish blob; `spike_amp > 0` ripples the outline, `sharp` selects
    /// a hard plateau profile instead of a gaussian falloff.
    Mass {
        radius: f64,
        spikes: usize,
        phase: f64,
        spike_amp: f64,
        sharp: bool,
    },
    /// Cluster of small dots; `rim` is the soft-edge width of each dot.
    CalcCluster { dots: Vec<Dot>, rim: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LesionSpec {
    pub shape: LesionShape,
    pub malignant: bool,
    /// Center in pixel coordinates.
    pub center: (f64, f64),
    /// Peak added intensity.
    pub intensity: f64,
}

impl LesionSpec {
    pub fn mask_class(&self) -> u8 {
        match (&self.shape, self.malignant) {
            (LesionShape::Mass { .. }, true) => CLASS_MALIGNANT_MASS,
            (LesionShape::Mass { .. }, false) => CLASS_BENIGN_MASS,
            (LesionShape::CalcCluster { .. }, true) => CLASS_MALIGNANT_CALC,
            (LesionShape::CalcCluster { .. }, false) => CLASS_BENIGN_CALC,
        }
    }

    /// Radius of the disc that bounds every nonzero contribution.
    pub fn extent(&self) -> f64 {
        match &self.shape {
            LesionShape::Mass {
                radius, spike_amp, ..
            } => radius * (1.0 + spike_amp) * 1.5 + 1.0,
            LesionShape::CalcCluster { dots, rim } => dots
                .iter()
                .map(|d| (d.dx * d.dx + d.dy * d.dy).sqrt() + d.radius + rim)
                .fold(0.0, f64::max),
        }
    }

    /// Added intensity at pixel center (x, y).
    pub fn contribution(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.center.0;
        let dy = y - self.center.1;
        match &self.shape {
            LesionShape::Mass {
                radius,
                spikes,
                phase,
                spike_amp,
                sharp,
            } => {
                let rho = (dx * dx + dy * dy).sqrt();
                let theta = dy.atan2(dx);
                let r_theta = radius * (1.0 + spike_amp * (*spikes as f64 * theta + phase).sin());
                if *sharp {
                    let t = rho / r_theta;
                    if t <= 1.0 {
                        self.intensity * (0.7 + 0.3 * (1.0 - t))
                    } else {
                        0.0
                    }
                } else {
                    let sigma = 0.55 * r_theta;
                    if rho > 1.5 * r_theta {
                        0.0
                    } else {
                        self.intensity * (-(rho / sigma) * (rho / sigma)).exp()
                    }
                }
            }
            LesionShape::CalcCluster { dots, rim } => dots
                .iter()
                .map(|d| {
                    let rho = ((dx - d.dx) * (dx - d.dx) + (dy - d.dy) * (dy - d.dy)).sqrt();
                    if rho <= d.radius {
                        self.intensity
                    } else if rho <= d.radius + rim {
                        self.intensity * (1.0 - (rho - d.radius) / rim)
                    } else {
                        0.0
                    }
                })
                .fold(0.0, f64::max),
        }
    }
}

/// Number of malignant samples a config yields; they occupy the low indices.
pub fn malignant_count(data: &DataConfig) -> usize {
    (data.samples as f64 * data.malignant_fraction).round() as usize
}

fn background_texture(size: usize, cells: usize, rng: &mut ChaCha20Rng) -> Result<Image> {
    let vals: Vec<f64> = (0..cells * cells)
        .map(|_| rng.gen_range(BACKGROUND_LO..=BACKGROUND_HI))
        .collect();
    Image::new(cells, cells, vals)?.resize_bilinear(size, size)
}

fn sample_shape(rng: &mut ChaCha20Rng, malignant: bool, scale: f64) -> (LesionShape, f64) {
    if rng.gen_bool(0.5) {
        let shape = if malignant {
            LesionShape::Mass {
                radius: rng.gen_range(9.0..=14.0) * scale.max(2.5 / 9.0),
                spikes: rng.gen_range(5..=9),
                phase: rng.gen_range(0.0..std::f64::consts::TAU),
                spike_amp: 0.25,
                sharp: true,
            }
        } else {
            LesionShape::Mass {
                radius: rng.gen_range(5.0..=9.0) * scale.max(2.0 / 5.0),
                spikes: 0,
                phase: 0.0,
                spike_amp: 0.0,
                sharp: false,
            }
        };
        let intensity = if malignant {
            rng.gen_range(0.7..=0.85)
        } else {
            rng.gen_range(0.1..=0.2)
        };
        (shape, intensity)
    } else {
        let spread = rng.gen_range(10.0..=16.0) * scale.max(3.0 / 10.0);
        let count = if malignant {
            rng.gen_range(9..=14)
        } else {
            rng.gen_range(3..=6)
        };
        let rim = if malignant { 0.7 } else { 1.5 };
        let r_lo = (1.0 * scale).max(0.8);
        let r_hi = (2.0 * scale).clamp(r_lo + 0.1, 2.0);
        let dots = (0..count)
            .map(|_| {
                let radius = rng.gen_range(r_lo..=r_hi);
                let off = (spread - radius).max(0.5) * rng.gen_range(0.0f64..=1.0).sqrt();
                let ang = rng.gen_range(0.0..std::f64::consts::TAU);
                Dot {
                    dx: off * ang.cos(),
                    dy: off * ang.sin(),
                    radius,
                }
            })
            .collect();
        let intensity = if malignant {
            rng.gen_range(0.72..=0.85)
        } else {
            rng.gen_range(0.1..=0.18)
        };
        (LesionShape::CalcCluster { dots, rim }, intensity)
    }
}

/// Draws a lesion and finds a non-overlapping in-bounds center for it.
/// `placed` holds (cx, cy, extent) of earlier lesions.
fn place_lesion(
    rng: &mut ChaCha20Rng,
    size: usize,
    malignant: bool,
    placed: &mut Vec<(f64, f64, f64)>,
) -> Result<LesionSpec> {
    let scale = size as f64 / REFERENCE_SIZE;
    let (shape, intensity) = sample_shape(rng, malignant, scale);
    let probe = LesionSpec {
        shape,
        malignant,
        center: (0.0, 0.0),
        intensity,
    };
    let ext = probe.extent();
    let lo = ext + 1.0;
    let hi = size as f64 - ext - 1.0;
    if lo >= hi {
        return Err(Error::Generation(format!(
            "lesion of extent {ext:.1} cannot fit a {size}x{size} image"
        )));
    }
    for _ in 0..PLACEMENT_RETRIES {
        let cx = rng.gen_range(lo..hi);
        let cy = rng.gen_range(lo..hi);
        let clear = placed
            .iter()
            .all(|&(px, py, pe)| ((cx - px).powi(2) + (cy - py).powi(2)).sqrt() >= pe + ext + 4.0);
        if clear {
            placed.push((cx, cy, ext));
            return Ok(LesionSpec {
                center: (cx, cy),
                ..probe
            });
        }
    }
    Err(Error::Generation(format!(
        "no non-overlapping placement found in {PLACEMENT_RETRIES} retries"
    )))
}

fn apply_lesion(img: &mut Image, mask: &mut Mask, spec: &LesionSpec) -> Result<()> {
    let (w, h) = (img.width(), img.height());
    let ext = spec.extent();
    let x_lo = (spec.center.0 - ext).floor().max(0.0) as usize;
    let y_lo = (spec.center.1 - ext).floor().max(0.0) as usize;
    let x_hi = ((spec.center.0 + ext).ceil() as usize).min(w - 1);
    let y_hi = ((spec.center.1 + ext).ceil() as usize).min(h - 1);
    let class = spec.mask_class();
    for y in y_lo..=y_hi {
        for x in x_lo..=x_hi {
            let add = spec.contribution(x as f64, y as f64);
            if add > 0.0 {
                img.set(x, y, (img.get(x, y) + add).min(1.0));
                if add >= MASK_SUPPORT_THRESHOLD {
                    mask.set(x, y, class)?;
                }
            }
        }
    }
    Ok(())
}

/// A generated sample with its construction exposed for verification.
#[derive(Debug, Clone)]
pub struct SampleParts {
    pub background: Image,
    pub image: Image,
    pub mask: Mask,
    pub lesions: Vec<LesionSpec>,
    pub y: u8,
}

pub fn gen_sample_parts(data: &DataConfig, index: usize) -> Result<SampleParts> {
    if index >= data.samples {
        return Err(Error::Usage(format!(
            "sample index {index} out of range for {} samples",
            data.samples
        )));
    }
    let mut rng = derived_rng(data.seed, STREAM_SAMPLE, index as u64);
    let size = data.image_size;
    let background = background_texture(size, data.texture_cells, &mut rng)?;
    let mut image = background.clone();
    let mut mask = Mask::zeros(size, size)?;
    let mut placed = Vec::new();
    let mut lesions = Vec::new();
    let malignant = index < malignant_count(data);
    if malignant {
        let spec = place_lesion(&mut rng, size, true, &mut placed)?;
        apply_lesion(&mut image, &mut mask, &spec)?;
        lesions.push(spec);
    }
    if data.benign_fraction > 0.0 && rng.gen_bool(data.benign_fraction) {
        let n = rng.gen_range(1..=2);
        for _ in 0..n {
            let spec = place_lesion(&mut rng, size, false, &mut placed)?;
            apply_lesion(&mut image, &mut mask, &spec)?;
            lesions.push(spec);
        }
    }
    let y = image_label(&mask);
    debug_assert_eq!(y == 1, malignant);
    Ok(SampleParts {
        background,
        image,
        mask,
        lesions,
        y,
    })
}

/// (image, mask, image label) for one sample; pure in (config, index).
pub fn gen_sample(data: &DataConfig, index: usize) -> Result<(Image, Mask, u8)> {
    let parts = gen_sample_parts(data, index)?;
    Ok((parts.image, parts.mask, parts.y))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DatasetSummary {
    pub train_pos: usize,
    pub train_neg: usize,
    pub test_pos: usize,
    pub test_neg: usize,
}

impl fmt::Display for DatasetSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "train {} (pos {} neg {}), test {} (pos {} neg {})",
            self.train_pos + self.train_neg,
            self.train_pos,
            self.train_neg,
            self.test_pos + self.test_neg,
            self.test_pos,
            self.test_neg
        )
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Generates every sample, writes PGMs and the manifest under `out_dir`,
/// and assigns splits per class with a seed-controlled shuffle so each
/// split keeps the configured class balance.
pub fn gen_dataset(
    data: &DataConfig,
    split: f64,
    out_dir: &Path,
) -> Result<(Manifest, DatasetSummary)> {
    if !(split > 0.0 && split < 1.0) {
        return Err(Error::Config(format!(
            "split must lie strictly between 0 and 1, got {split}"
        )));
    }
    let images_dir = out_dir.join("images");
    let masks_dir = out_dir.join("masks");
    for dir in [&images_dir, &masks_dir] {
        std::fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.clone(),
            source,
        })?;
    }
    let mut ys = Vec::with_capacity(data.samples);
    for i in 0..data.samples {
        let (img, mask, y) = gen_sample(data, i)?;
        let id = format!("{i:04}");
        write_file(&images_dir.join(format!("{id}.pgm")), &image_to_pgm(&img))?;
        write_file(&masks_dir.join(format!("{id}.pgm")), &mask_to_pgm(&mask))?;
        ys.push(y);
    }

    let mut rng = derived_rng(data.seed, STREAM_SPLIT, 0);
    let mut assign = vec![Split::Test; data.samples];
    for class in [1u8, 0u8] {
        let mut ids: Vec<usize> = (0..data.samples).filter(|&i| ys[i] == class).collect();
        ids.shuffle(&mut rng);
        let train_n = (split * ids.len() as f64).round() as usize;
        for &i in ids.iter().take(train_n) {
            assign[i] = Split::Train;
        }
    }

    let entries: Vec<ManifestEntry> = (0..data.samples)
        .map(|i| {
            let id = format!("{i:04}");
            ManifestEntry {
                id: id.clone(),
                split: assign[i],
                image_path: format!("images/{id}.pgm"),
                mask_path: format!("masks/{id}.pgm"),
                y: ys[i],
            }
        })
        .collect();
    let manifest = Manifest { entries };
    manifest.save(&out_dir.join("manifest.tsv"))?;

    let mut summary = DatasetSummary {
        train_pos: 0,
        train_neg: 0,
        test_pos: 0,
        test_neg: 0,
    };
    for (i, &y) in ys.iter().enumerate() {
        match (assign[i], y) {
            (Split::Train, 1) => summary.train_pos += 1,
            (Split::Train, _) => summary.train_neg += 1,
            (Split::Test, 1) => summary.test_pos += 1,
            (Split::Test, _) => summary.test_neg += 1,
        }
    }
    Ok((manifest, summary))
}

/// Flat store of d x d grayscale patches with lesion-presence labels.
/// `origins[i]` records (pair index, x0, y0) of patch i for auditability.
#[derive(Debug, Clone)]
pub struct PatchSet {
    pub d: usize,
    pub features: Vec<f64>,
    pub labels: Vec<u8>,
    pub origins: Vec<(usize, usize, usize)>,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn patch(&self, i: usize) -> &[f64] {
        let n = self.d * self.d;
        &self.features[i * n..(i + 1) * n]
    }
}

/// Samples `n_per_image` d x d crops per (image, mask) pair: half centered
/// on lesion pixels, half uniform background. Labels mark lesion presence
/// (any nonzero mask class in the crop), recomputed from the mask crop.
pub fn sample_patches(
    pairs: &[(&Image, &Mask)],
    d: usize,
    n_per_image: usize,
    rng: &mut ChaCha20Rng,
) -> Result<PatchSet> {
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut origins = Vec::new();
    for (pair_idx, (img, mask)) in pairs.iter().enumerate() {
        let (w, h) = (img.width(), img.height());
        if w < d || h < d {
            return Err(Error::Config(format!(
                "cannot cut {d}x{d} patches from a {w}x{h} image"
            )));
        }
        let lesion_pixels: Vec<(usize, usize)> = (0..h)
            .flat_map(|y| (0..w).map(move |x| (x, y)))
            .filter(|&(x, y)| mask.get(x, y) > 0)
            .collect();
        let n_lesion = if lesion_pixels.is_empty() {
            0
        } else {
            n_per_image / 2
        };
        for k in 0..n_per_image {
            let (x0, y0) = if k < n_lesion {
                let (px, py) = lesion_pixels[rng.gen_range(0..lesion_pixels.len())];
                (
                    px.saturating_sub(d / 2).min(w - d),
                    py.saturating_sub(d / 2).min(h - d),
                )
            } else {
                (rng.gen_range(0..=w - d), rng.gen_range(0..=h - d))
            };
            let region = crate::image::Region::new(x0, y0, d, d);
            let crop = img.crop(region)?;
            features.extend_from_slice(crop.data());
            labels.push(u8::from(mask.max_class(region)? > 0));
            origins.push((pair_idx, x0, y0));
        }
    }
    Ok(PatchSet {
        d,
        features,
        labels,
        origins,
    })
}
