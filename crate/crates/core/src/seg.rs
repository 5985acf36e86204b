// SPDX-License-Identifier: MIT OR Apache-2.0

//! Patch-level label prediction, block upsampling and mIoU.
//!
//! Class ids are 1-based positions in a candidate list; 0 is background.
//! Ground truth comes either as an 8-bit grayscale/indexed PNG whose pixel
//! values are class ids, or as part annotations rasterized against the
//! candidate list.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ProbeError, Result};
use crate::lens::{merge_aliases, project_to_vocab, AliasTable};
use crate::regions::PartAnnotation;
use crate::vlm::{DecoderTrace, GridGeometry};

pub const BACKGROUND: u32 = 0;

/// One class id per patch, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelGrid {
    pub grid: GridGeometry,
    pub labels: Vec<u32>,
}

/// One class id per pixel, row-major.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u32>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(ProbeError::Shape(format!(
                "label map has {} pixels, expected {height}x{width}",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: u32) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn get(&self, r: usize, c: usize) -> u32 {
        self.data[r * self.width + c]
    }
}

/// Label every patch with the candidate of highest merged mass at `layer`.
/// Ties go to the earlier candidate; a best mass below `background_threshold`
/// yields background.
pub fn predict_patch_labels(
    trace: &DecoderTrace,
    grid: GridGeometry,
    layer: usize,
    candidates: &[String],
    table: &AliasTable,
    background_threshold: f64,
) -> Result<LabelGrid> {
    if candidates.is_empty() {
        return Err(ProbeError::Empty("segmentation candidates".into()));
    }
    if layer >= trace.hidden.len() {
        return Err(ProbeError::Range(format!(
            "layer {layer} outside trace of {} layers",
            trace.hidden.len()
        )));
    }
    if grid.num_patches() != trace.layout.num_patches {
        return Err(ProbeError::Shape(format!(
            "grid has {} patches, trace {}",
            grid.num_patches(),
            trace.layout.num_patches
        )));
    }
    let idx = candidates
        .iter()
        .map(|c| table.label_index(c).ok_or_else(|| ProbeError::UnknownLabel(c.clone())))
        .collect::<Result<Vec<_>>>()?;
    let labels = crate::par::map_range(grid.num_patches(), |p| {
        let dist = project_to_vocab(trace.state(layer, p)?, &trace.lens)?;
        let merged = merge_aliases(&dist, table)?;
        let mut best = (0, f64::NEG_INFINITY);
        for (j, &i) in idx.iter().enumerate() {
            let m = merged.masses()[i];
            if m > best.1 {
                best = (j, m);
            }
        }
        Ok(if best.1 < background_threshold {
            BACKGROUND
        } else {
            best.0 as u32 + 1
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(LabelGrid { grid, labels })
}

/// Replicate each patch label over its pixel block.
pub fn upsample_to_pixels(grid: &LabelGrid, height: usize, width: usize) -> Result<LabelMap> {
    let g = grid.grid;
    if height == 0 || width == 0 || !height.is_multiple_of(g.rows) || !width.is_multiple_of(g.cols) {
        return Err(ProbeError::Shape(format!(
            "{height}x{width} image not divisible by {}x{} grid",
            g.rows, g.cols
        )));
    }
    let (bh, bw) = (height / g.rows, width / g.cols);
    let data = (0..height * width)
        .map(|i| grid.labels[g.index(i / width / bh, i % width / bw)])
        .collect();
    LabelMap::new(height, width, data)
}

/// Per-class intersection and union pixel counts.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct IouAccumulator {
    pub intersection: BTreeMap<u32, u64>,
    pub union: BTreeMap<u32, u64>,
}

impl IouAccumulator {
    pub fn add(&mut self, pred: &LabelMap, gt: &LabelMap, classes: &[u32]) -> Result<()> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(ProbeError::Shape(format!(
                "prediction {}x{} vs ground truth {}x{}",
                pred.height, pred.width, gt.height, gt.width
            )));
        }
        for &c in classes {
            let (mut i, mut u) = (0u64, 0u64);
            for (&p, &g) in pred.data.iter().zip(&gt.data) {
                let (a, b) = (p == c, g == c);
                i += u64::from(a && b);
                u += u64::from(a || b);
            }
            *self.intersection.entry(c).or_default() += i;
            *self.union.entry(c).or_default() += u;
        }
        Ok(())
    }

    /// IoU of every class with a non-empty union.
    pub fn per_class(&self) -> BTreeMap<u32, f64> {
        self.union
            .iter()
            .filter(|(_, &u)| u > 0)
            .map(|(c, &u)| (*c, self.intersection[c] as f64 / u as f64))
            .collect()
    }

    pub fn miou(&self) -> Result<f64> {
        let per = self.per_class();
        if per.is_empty() {
            return Err(ProbeError::Empty(
                "no class present in prediction or ground truth".into(),
            ));
        }
        Ok(per.values().sum::<f64>() / per.len() as f64)
    }
}

/// Mean IoU over `classes`, skipping classes absent from both maps.
pub fn miou(pred: &LabelMap, gt: &LabelMap, classes: &[u32]) -> Result<f64> {
    let mut acc = IouAccumulator::default();
    acc.add(pred, gt, classes)?;
    acc.miou()
}

/// Rasterize the part masks of one image; later annotations overwrite earlier
/// ones. Parts not in `classes` are ignored.
pub fn label_map_from_annotations(
    annotations: &[PartAnnotation],
    image_id: &str,
    classes: &[String],
) -> Result<LabelMap> {
    let mine: Vec<&PartAnnotation> = annotations.iter().filter(|a| a.image_id == image_id).collect();
    let first = mine
        .first()
        .ok_or_else(|| ProbeError::Empty(format!("no annotations for image {image_id}")))?;
    let (h, w) = (first.mask.height(), first.mask.width());
    let mut map = LabelMap::filled(h, w, BACKGROUND);
    for a in mine {
        if (a.mask.height(), a.mask.width()) != (h, w) {
            return Err(ProbeError::Shape(format!("image {image_id} annotated at two sizes")));
        }
        let Some(part) = &a.part else { continue };
        let Some(pos) = classes.iter().position(|c| c == part) else {
            continue;
        };
        for (i, &b) in a.mask.bits().iter().enumerate() {
            if b {
                map.data[i] = pos as u32 + 1;
            }
        }
    }
    Ok(map)
}

/// Read an 8-bit grayscale or palette PNG; pixel values are class ids.
pub fn read_png_labels(path: &Path) -> Result<LabelMap> {
    let file = std::fs::File::open(path).map_err(|e| ProbeError::io(path, e))?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let bad = |e: png::DecodingError| ProbeError::interchange(path, e.to_string());
    let mut reader = decoder.read_info().map_err(bad)?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf).map_err(bad)?;
    if info.bit_depth != png::BitDepth::Eight
        || !matches!(info.color_type, png::ColorType::Grayscale | png::ColorType::Indexed)
    {
        return Err(ProbeError::interchange(
            path,
            "label PNG must be 8-bit grayscale or indexed",
        ));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let data = (0..h)
        .flat_map(|r| {
            buf[r * info.line_size..r * info.line_size + w]
                .iter()
                .map(|&v| u32::from(v))
        })
        .collect();
    LabelMap::new(h, w, data)
}

/// Write an 8-bit grayscale PNG; ids above 255 are rejected.
pub fn write_png_labels(path: &Path, map: &LabelMap) -> Result<()> {
    let bytes = map
        .data
        .iter()
        .map(|&v| u8::try_from(v).map_err(|_| ProbeError::Range(format!("class id {v} does not fit in 8 bits"))))
        .collect::<Result<Vec<u8>>>()?;
    let file = std::fs::File::create(path).map_err(|e| ProbeError::io(path, e))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), map.width as u32, map.height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let bad = |e: png::EncodingError| ProbeError::interchange(path, e.to_string());
    let mut writer = enc.write_header().map_err(bad)?;
    writer.write_image_data(&bytes).map_err(bad)?;
    writer.finish().map_err(bad)
}
