//! Image decoding into the fixed backbone input tensor, plus a synthetic
//! three-class iris-like dataset generator for desk-scale testing.

use std::fs;
use std::path::{Path, PathBuf};

use image::imageops::FilterType;
use ndarray::Array3;
use rand::Rng;
use rand_chacha::{rand_core::SeedableRng, ChaCha8Rng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{
    DatasetManifest, Eye, LabelClass, ManifestError, SampleRecord, Split,
};

/// Side length of the standard backbone input.
pub const INPUT_SIZE: usize = 224;

/// Channel normalization constants of the pretrained-backbone convention
/// this project follows; recorded in every run config and checkpoint.
pub const NORM_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const NORM_STD: [f32; 3] = [0.229, 0.224, 0.225];

/// A decoded, resized, channel-normalized image: `height x width x 3`.
#[derive(Debug, Clone)]
pub struct ImageTensor {
    pub data: Array3<f32>,
    pub source_id: String,
}

impl ImageTensor {
    pub fn spatial(&self) -> (usize, usize) {
        (self.data.dim().0, self.data.dim().1)
    }
}

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("cannot decode image {path}: {source}")]
    Decode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("zero-sized image {path}")]
    ZeroSized { path: PathBuf },
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Manifest(#[from] ManifestError),
    #[error("non-finite pixel value in {source_id}")]
    NonFinite { source_id: String },
    #[error("invalid synthesis spec: {0}")]
    InvalidSpec(String),
}

/// Decodes and bilinearly resizes to `size`, returning `[0,1]` HWC values.
/// Grayscale inputs are replicated across the three channels. An image
/// already at the target size is passed through untouched.
pub fn decode_resized(path: &Path, size: usize) -> Result<Array3<f32>, IngestError> {
    let img = image::open(path).map_err(|source| IngestError::Decode {
        path: path.to_path_buf(),
        source,
    })?;
    if img.width() == 0 || img.height() == 0 {
        return Err(IngestError::ZeroSized {
            path: path.to_path_buf(),
        });
    }
    let img = if img.width() as usize == size && img.height() as usize == size {
        img
    } else {
        img.resize_exact(size as u32, size as u32, FilterType::Triangle)
    };
    let rgb = img.to_rgb8();
    let mut out = Array3::<f32>::zeros((size, size, 3));
    for (x, y, pixel) in rgb.enumerate_pixels() {
        for c in 0..3 {
            out[(y as usize, x as usize, c)] = pixel.0[c] as f32 / 255.0;
        }
    }
    Ok(out)
}

/// Applies the channel normalization in place.
pub fn normalize(data: &mut Array3<f32>) {
    for c in 0..3 {
        let (mean, std) = (NORM_MEAN[c], NORM_STD[c]);
        data.index_axis_mut(ndarray::Axis(2), c)
            .mapv_inplace(|v| (v - mean) / std);
    }
}

/// Full ingestion at a caller-chosen input size (desk-scale configs use
/// sizes below 224).
pub fn prepare_input_sized(path: &Path, size: usize) -> Result<ImageTensor, IngestError> {
    let mut data = decode_resized(path, size)?;
    normalize(&mut data);
    let source_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(IngestError::NonFinite { source_id });
    }
    Ok(ImageTensor { data, source_id })
}

/// Standard ingestion: decode, resize to 224x224, replicate grayscale,
/// normalize. Deterministic for a fixed input file.
pub fn prepare_input(path: &Path) -> Result<ImageTensor, IngestError> {
    prepare_input_sized(path, INPUT_SIZE)
}

/// Parameters of the synthetic dataset generator.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthSpec {
    pub n_per_class: usize,
    pub image_size: usize,
    pub noise_level: f64,
    pub seed: u64,
    pub n_sensors: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            n_per_class: 10,
            image_size: 224,
            noise_level: 0.05,
            seed: 7,
            n_sensors: 2,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<(), IngestError> {
        if self.n_per_class < 1 {
            return Err(IngestError::InvalidSpec("n_per_class must be >= 1".into()));
        }
        if self.image_size < 64 {
            return Err(IngestError::InvalidSpec("image_size must be >= 64".into()));
        }
        if !(0.0..=1.0).contains(&self.noise_level) {
            return Err(IngestError::InvalidSpec("noise_level must be in [0,1]".into()));
        }
        if self.n_sensors < 1 {
            return Err(IngestError::InvalidSpec("n_sensors must be >= 1".into()));
        }
        Ok(())
    }

    fn n_subjects(&self) -> usize {
        let mut n = self.n_per_class.clamp(2, 10);
        if n % 2 == 1 {
            n += 1;
        }
        n
    }
}

fn sensor_name(k: usize) -> String {
    format!("SYNTH-{}", (b'A' + (k % 26) as u8) as char)
}

/// SplitMix64-style stream derivation so per-image randomness is stable
/// under any generation order.
fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut z = base;
    for &p in parts {
        z = z.wrapping_add(0x9e3779b97f4a7c15).wrapping_add(p);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
        z ^= z >> 31;
    }
    z
}

/// Generates `3 * n_per_class * n_sensors` PNG images plus a manifest with
/// subject-disjoint train/test splits. Class construction: NO_LENS is a
/// smooth radial iris gradient with a pupil disk; SOFT_LENS adds one faint
/// low-contrast limbal ring; COSMETIC_LENS adds a high-frequency textured
/// annulus over the iris. Sensors differ by a global brightness shift and
/// blur. Byte-identical output for a fixed seed.
pub fn synth_generate(spec: &SynthSpec, out_dir: &Path) -> Result<DatasetManifest, IngestError> {
    spec.validate()?;
    let images_dir = out_dir.join("images");
    fs::create_dir_all(&images_dir).map_err(|source| IngestError::Io {
        path: images_dir.clone(),
        source,
    })?;

    let n_subjects = spec.n_subjects();
    let train_cutoff = n_subjects / 2;
    let mut records = Vec::new();

    for sensor in 0..spec.n_sensors {
        for (class_idx, &label) in LabelClass::ALL.iter().enumerate() {
            for i in 0..spec.n_per_class {
                let subject = i % n_subjects;
                let split = if subject < train_cutoff {
                    Split::Train
                } else {
                    Split::Test
                };
                let pixels = render_sample(spec, sensor, class_idx, i, subject, label);
                let sample_id = format!("{}-{}-{:04}", sensor_name(sensor), label.as_str(), i);
                let rel_path = PathBuf::from("images").join(format!("{sample_id}.png"));
                let abs_path = out_dir.join(&rel_path);
                save_gray_png(&pixels, spec.image_size, &abs_path)?;
                records.push(SampleRecord {
                    sample_id,
                    image_path: rel_path,
                    sensor_id: sensor_name(sensor),
                    subject_id: format!("subj{subject:03}"),
                    eye: if i % 2 == 0 { Eye::Left } else { Eye::Right },
                    label,
                    split,
                    resolved_path: abs_path,
                });
            }
        }
    }

    let manifest = DatasetManifest::new("synthetic", records)?;
    manifest.save(&out_dir.join("manifest.jsonl"))?;
    Ok(manifest)
}

fn save_gray_png(pixels: &[f32], size: usize, path: &Path) -> Result<(), IngestError> {
    let bytes: Vec<u8> = pixels
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let buf = image::GrayImage::from_raw(size as u32, size as u32, bytes)
        .expect("buffer length matches dimensions");
    buf.save(path).map_err(|source| IngestError::Decode {
        path: path.to_path_buf(),
        source,
    })
}

/// Renders one grayscale sample in `[0,1]`, row-major.
fn render_sample(
    spec: &SynthSpec,
    sensor: usize,
    class_idx: usize,
    index: usize,
    subject: usize,
    label: LabelClass,
) -> Vec<f32> {
    let size = spec.image_size;
    let mut subj_rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, &[1, subject as u64]));
    let mut img_rng = ChaCha8Rng::seed_from_u64(derive_seed(
        spec.seed,
        &[2, sensor as u64, class_idx as u64, index as u64],
    ));

    let s = size as f32;
    // Subject-stable eye geometry, small per-image jitter.
    let iris_r = s * (0.30 + 0.03 * subj_rng.gen::<f32>());
    let streak_phase = subj_rng.gen::<f32>() * std::f32::consts::TAU;
    let pupil_r = iris_r * (0.32 + 0.05 * img_rng.gen::<f32>());
    let cx = s * 0.5 + img_rng.gen_range(-2.0..2.0);
    let cy = s * 0.5 + img_rng.gen_range(-2.0..2.0);

    let ring_r = iris_r * (1.08 + 0.02 * img_rng.gen::<f32>());
    let ring_sigma = s * 0.014;
    let texture_freq_r = (0.55 + 0.10 * img_rng.gen::<f32>()) * 224.0 / s;
    let texture_lobes = 8 + (img_rng.gen::<f32>() * 4.0) as usize;
    let texture_phase = img_rng.gen::<f32>() * std::f32::consts::TAU;

    let mut pixels = vec![0.0f32; size * size];
    for y in 0..size {
        for x in 0..size {
            let dx = x as f32 - cx;
            let dy = y as f32 - cy;
            let r = (dx * dx + dy * dy).sqrt();
            let theta = dy.atan2(dx);

            let mut v = if r < pupil_r {
                0.05
            } else if r < iris_r {
                let t = (r - pupil_r) / (iris_r - pupil_r);
                // Radial gradient plus mild class-neutral streaks.
                0.25 + 0.45 * t.powf(1.2) + 0.03 * (theta * 17.0 + streak_phase).sin()
            } else {
                0.82
            };

            match label {
                LabelClass::NoLens => {}
                LabelClass::SoftLens => {
                    // One faint limbal ring just outside the iris boundary,
                    // plus the mild contrast dimming of the covered area.
                    let d = (r - ring_r) / ring_sigma;
                    v -= 0.12 * (-d * d).exp();
                    if r < ring_r {
                        v *= 0.97;
                    }
                }
                LabelClass::CosmeticLens => {
                    // High-frequency printed texture over the iris annulus.
                    if r >= pupil_r * 1.1 && r < iris_r {
                        v += 0.16
                            * (r * texture_freq_r + texture_phase).sin()
                            * (theta * texture_lobes as f32).sin();
                    }
                }
            }
            pixels[y * size + x] = v;
        }
    }

    // Sensor shift: global brightness plus repeated 3-tap blur.
    let brightness = 0.02 * sensor as f32;
    for _ in 0..sensor {
        box_blur_3(&mut pixels, size);
    }
    if brightness != 0.0 {
        for v in pixels.iter_mut() {
            *v += brightness;
        }
    }

    if spec.noise_level > 0.0 {
        let normal = Normal::new(0.0f64, 0.06 * spec.noise_level).expect("positive std");
        for v in pixels.iter_mut() {
            *v += normal.sample(&mut img_rng) as f32;
        }
    }
    pixels
}

/// Separable [1 2 1]/4 blur, clamped at the borders.
fn box_blur_3(pixels: &mut [f32], size: usize) {
    let mut tmp = vec![0.0f32; size * size];
    for y in 0..size {
        for x in 0..size {
            let xm = x.saturating_sub(1);
            let xp = (x + 1).min(size - 1);
            tmp[y * size + x] = 0.25 * pixels[y * size + xm]
                + 0.5 * pixels[y * size + x]
                + 0.25 * pixels[y * size + xp];
        }
    }
    for y in 0..size {
        let ym = y.saturating_sub(1);
        let yp = (y + 1).min(size - 1);
        for x in 0..size {
            pixels[y * size + x] =
                0.25 * tmp[ym * size + x] + 0.5 * tmp[y * size + x] + 0.25 * tmp[yp * size + x];
        }
    }
}
