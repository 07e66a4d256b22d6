//! Feature-map grids for layer-specific analysis.
//!
//! For each requested unit the channels with the highest mean activation
//! are min-max normalized to [0, 255] independently and tiled into one
//! image: one row per unit, one tile per channel, at the unit's native
//! spatial resolution. A JSON sidecar records unit ids, chosen channel
//! indices and normalization ranges. Constant (dead) maps render black.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::Serialize;
use thiserror::Error;

use crate::backbone::{BackboneError, ExpertModel};
use crate::checkpoint::{load_checkpoint, CheckpointError};
use crate::ingestion::{prepare_input_sized, IngestError};

/// Shallow-to-deep default units: the stem convolution, an early, a mid
/// and two deep sub-blocks.
pub const DEFAULT_UNITS: [&str; 5] = ["block1.conv", "block2a", "block3a", "block4c", "block5c"];

const GUTTER: usize = 2;

#[derive(Debug, Clone)]
pub struct VizRequest {
    pub checkpoint: PathBuf,
    pub image: PathBuf,
    pub unit_ids: Vec<String>,
    pub channels_per_unit: usize,
    pub output: PathBuf,
}

impl VizRequest {
    pub fn with_defaults(checkpoint: PathBuf, image: PathBuf, output: PathBuf) -> Self {
        VizRequest {
            checkpoint,
            image,
            unit_ids: DEFAULT_UNITS.iter().map(|s| s.to_string()).collect(),
            channels_per_unit: 8,
            output,
        }
    }
}

#[derive(Debug, Error)]
pub enum VizError {
    #[error("channels_per_unit must be >= 1")]
    NoChannels,
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Backbone(#[from] BackboneError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image encode error at {path}: {source}")]
    Encode {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

/// Sidecar metadata describing the grid layout and normalization.
#[derive(Debug, Clone, Serialize)]
pub struct VizSidecar {
    pub image: PathBuf,
    pub checkpoint: PathBuf,
    pub channels_per_unit: usize,
    pub units: Vec<UnitInfo>,
}

#[derive(Debug, Clone, Serialize)]
pub struct UnitInfo {
    pub unit_id: String,
    pub spatial_size: usize,
    pub row_offset_px: usize,
    pub channels: Vec<ChannelInfo>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ChannelInfo {
    pub channel: usize,
    pub mean_activation: f32,
    pub min: f32,
    pub max: f32,
}

/// One normalized tile: `u8` grayscale at the unit's native resolution.
pub struct Tile {
    pub unit_id: String,
    pub channel: usize,
    pub size: (usize, usize),
    pub pixels: Vec<u8>,
    pub min: f32,
    pub max: f32,
    pub mean: f32,
}

/// Selects the top channels by mean activation (ties broken by channel
/// index) and min-max normalizes each to [0, 255]; a constant map becomes
/// all zeros.
pub fn tiles_for_unit(unit_id: &str, map: &Array3<f32>, channels_per_unit: usize) -> Vec<Tile> {
    let (c, h, w) = map.dim();
    let mut ranked: Vec<(usize, f32)> = (0..c)
        .map(|ci| {
            let plane = map.index_axis(ndarray::Axis(0), ci);
            (ci, plane.mean().unwrap_or(0.0))
        })
        .collect();
    ranked.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    ranked.truncate(channels_per_unit.min(c));

    ranked
        .into_iter()
        .map(|(ci, mean)| {
            let plane = map.index_axis(ndarray::Axis(0), ci);
            let min = plane.fold(f32::INFINITY, |a, &b| a.min(b));
            let max = plane.fold(f32::NEG_INFINITY, |a, &b| a.max(b));
            let range = max - min;
            let pixels: Vec<u8> = plane
                .iter()
                .map(|&v| {
                    if range > 0.0 {
                        (255.0 * (v - min) / range).round() as u8
                    } else {
                        0
                    }
                })
                .collect();
            Tile {
                unit_id: unit_id.to_string(),
                channel: ci,
                size: (h, w),
                pixels,
                min,
                max,
                mean,
            }
        })
        .collect()
}

/// Runs the full visualization: load checkpoint, prepare the input at the
/// model's input size, extract the requested units, tile and write the
/// grid PNG plus its sidecar. Deterministic.
pub fn visualize(request: &VizRequest) -> Result<VizSidecar, VizError> {
    if request.channels_per_unit < 1 {
        return Err(VizError::NoChannels);
    }
    let model = load_checkpoint(&request.checkpoint)?;
    let image = prepare_input_sized(&request.image, model.config.input_size)?;
    visualize_with_model(&model, &image, request)
}

/// As [`visualize`] but with an already-loaded model and prepared image.
pub fn visualize_with_model(
    model: &ExpertModel<f32>,
    image: &crate::ingestion::ImageTensor,
    request: &VizRequest,
) -> Result<VizSidecar, VizError> {
    if request.channels_per_unit < 1 {
        return Err(VizError::NoChannels);
    }
    let activations = model.extract_activations(image, &request.unit_ids)?;

    let mut rows: Vec<(String, Vec<Tile>)> = Vec::new();
    for (unit_id, map) in &activations {
        rows.push((
            unit_id.clone(),
            tiles_for_unit(unit_id, map, request.channels_per_unit),
        ));
    }

    // Grid geometry: one row per unit at its native tile size.
    let grid_w = rows
        .iter()
        .map(|(_, tiles)| tiles.iter().map(|t| t.size.1 + GUTTER).sum::<usize>())
        .max()
        .unwrap_or(0)
        .saturating_sub(GUTTER);
    let grid_h = rows
        .iter()
        .map(|(_, tiles)| tiles.first().map_or(0, |t| t.size.0) + GUTTER)
        .sum::<usize>()
        .saturating_sub(GUTTER);

    let mut canvas = vec![0u8; grid_w.max(1) * grid_h.max(1)];
    let mut units = Vec::new();
    let mut y_off = 0usize;
    for (unit_id, tiles) in &rows {
        let tile_h = tiles.first().map_or(0, |t| t.size.0);
        let mut x_off = 0usize;
        let mut channels = Vec::new();
        for tile in tiles {
            for y in 0..tile.size.0 {
                let dst = (y_off + y) * grid_w + x_off;
                canvas[dst..dst + tile.size.1]
                    .copy_from_slice(&tile.pixels[y * tile.size.1..(y + 1) * tile.size.1]);
            }
            channels.push(ChannelInfo {
                channel: tile.channel,
                mean_activation: tile.mean,
                min: tile.min,
                max: tile.max,
            });
            x_off += tile.size.1 + GUTTER;
        }
        units.push(UnitInfo {
            unit_id: unit_id.clone(),
            spatial_size: tile_h,
            row_offset_px: y_off,
            channels,
        });
        y_off += tile_h + GUTTER;
    }

    if let Some(parent) = request.output.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent).map_err(|source| VizError::Io {
                path: parent.to_path_buf(),
                source,
            })?;
        }
    }
    let img = image::GrayImage::from_raw(grid_w.max(1) as u32, grid_h.max(1) as u32, canvas)
        .expect("canvas length matches dimensions");
    img.save(&request.output).map_err(|source| VizError::Encode {
        path: request.output.clone(),
        source,
    })?;

    let sidecar = VizSidecar {
        image: request.image.clone(),
        checkpoint: request.checkpoint.clone(),
        channels_per_unit: request.channels_per_unit,
        units,
    };
    let sidecar_path = sidecar_path(&request.output);
    let json = serde_json::to_vec_pretty(&sidecar).expect("sidecar serializes");
    fs::write(&sidecar_path, json).map_err(|source| VizError::Io {
        path: sidecar_path,
        source,
    })?;
    Ok(sidecar)
}

pub fn sidecar_path(output: &Path) -> PathBuf {
    output.with_extension("json")
}
