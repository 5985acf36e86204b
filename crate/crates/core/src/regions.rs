// SPDX-License-Identifier: MIT OR Apache-2.0

//! Part annotations, dataset filtering, pixel→patch reduction and size bins.
//!
//! Annotations are JSON lines, one mask per line:
//!
//! ```json
//! {"image_id":"img03","object":"cat","instance":0,"part":"ear","height":8,"width":8,"rle":[10,4,50]}
//! ```
//!
//! `rle` holds alternating run lengths over the row-major pixel raster,
//! starting with a background run (which may be 0). `part: null` marks a
//! whole-object mask. When an instance has no whole-object mask its area is the
//! union of its part masks.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ProbeError, Result};
use crate::vlm::GridGeometry;

/// Binary pixel mask, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PixelMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl PixelMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(ProbeError::Shape(format!(
                "mask has {} pixels, expected {height}x{width}",
                bits.len()
            )));
        }
        Ok(Self { height, width, bits })
    }

    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            bits: vec![false; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let bits = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self { height, width, bits }
    }

    /// Decode alternating background/foreground runs.
    pub fn from_rle(height: usize, width: usize, counts: &[usize]) -> Result<Self> {
        let total: usize = counts.iter().sum();
        if total != height * width {
            return Err(ProbeError::Shape(format!(
                "run lengths cover {total} pixels, image has {}",
                height * width
            )));
        }
        let mut bits = Vec::with_capacity(total);
        for (i, &run) in counts.iter().enumerate() {
            bits.extend(std::iter::repeat_n(i % 2 == 1, run));
        }
        Ok(Self { height, width, bits })
    }

    /// Encode as alternating runs, first run background.
    pub fn to_rle(&self) -> Vec<usize> {
        let mut counts = Vec::new();
        let mut current = false;
        let mut run = 0;
        for &b in &self.bits {
            if b == current {
                run += 1;
            } else {
                counts.push(run);
                current = b;
                run = 1;
            }
        }
        counts.push(run);
        counts
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, r: usize, c: usize) -> bool {
        self.bits[r * self.width + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.bits[r * self.width + c] = v;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn union(&self, other: &PixelMask) -> Result<PixelMask> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(ProbeError::Shape("mask union over different image sizes".into()));
        }
        Ok(PixelMask {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect(),
        })
    }
}

/// One annotated mask of one object instance, optionally of one of its parts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartAnnotation {
    pub image_id: String,
    pub object: String,
    pub instance: u32,
    /// `None` for a whole-object mask.
    pub part: Option<String>,
    pub mask: PixelMask,
}

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationRecord {
    image_id: String,
    object: String,
    #[serde(default)]
    instance: u32,
    part: Option<String>,
    height: usize,
    width: usize,
    rle: Vec<usize>,
}

impl PartAnnotation {
    fn from_record(rec: AnnotationRecord) -> Result<Self> {
        let mask = PixelMask::from_rle(rec.height, rec.width, &rec.rle)
            .map_err(|e| ProbeError::Shape(format!("annotation {}/{}: {e}", rec.image_id, rec.object)))?;
        if rec.part.is_some() && mask.is_empty() {
            return Err(ProbeError::Empty(format!(
                "part mask {}/{}/{}",
                rec.image_id,
                rec.object,
                rec.part.as_deref().unwrap_or_default()
            )));
        }
        Ok(Self {
            image_id: rec.image_id,
            object: rec.object,
            instance: rec.instance,
            part: rec.part,
            mask,
        })
    }

    fn to_record(&self) -> AnnotationRecord {
        AnnotationRecord {
            image_id: self.image_id.clone(),
            object: self.object.clone(),
            instance: self.instance,
            part: self.part.clone(),
            height: self.mask.height,
            width: self.mask.width,
            rle: self.mask.to_rle(),
        }
    }
}

pub fn read_annotations(path: &Path) -> Result<Vec<PartAnnotation>> {
    let file = std::fs::File::open(path).map_err(|e| ProbeError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| ProbeError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: AnnotationRecord =
            serde_json::from_str(&line).map_err(|e| ProbeError::json(format!("{}:{}", path.display(), i + 1), e))?;
        out.push(PartAnnotation::from_record(rec)?);
    }
    Ok(out)
}

pub fn write_annotations(path: &Path, annotations: &[PartAnnotation]) -> Result<()> {
    let mut buf = Vec::new();
    for a in annotations {
        let line = serde_json::to_string(&a.to_record()).map_err(|e| ProbeError::json("annotation", e))?;
        writeln!(buf, "{line}").map_err(|e| ProbeError::io(path, e))?;
    }
    std::fs::write(path, buf).map_err(|e| ProbeError::io(path, e))
}

/// Image id → caption text.
pub fn read_captions(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).map_err(|e| ProbeError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| ProbeError::json(path.display().to_string(), e))
}

/// Outcome of one filtering criterion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Pass,
    Fail,
    /// Inputs for the criterion were missing.
    Skipped,
    /// An earlier criterion already rejected the group.
    NotEvaluated,
}

impl Verdict {
    fn keeps(self) -> bool {
        matches!(self, Verdict::Pass | Verdict::Skipped)
    }
}

/// Verdicts for one (image, object class) group.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupVerdict {
    pub image_id: String,
    pub object: String,
    pub instances: usize,
    pub area_fraction: Option<f64>,
    pub single_instance: Verdict,
    pub min_area: Verdict,
    pub caption_clean: Verdict,
}

impl GroupVerdict {
    pub fn kept(&self) -> bool {
        self.single_instance.keeps() && self.min_area.keeps() && self.caption_clean.keeps()
    }
}

/// Kept image and part-region counts of one object class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCount {
    pub images: usize,
    pub regions: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct FilterReport {
    pub groups: Vec<GroupVerdict>,
    pub kept_per_class: BTreeMap<String, ClassCount>,
}

impl FilterReport {
    pub fn totals(&self) -> ClassCount {
        let images: BTreeSet<&str> = self
            .groups
            .iter()
            .filter(|g| g.kept())
            .map(|g| g.image_id.as_str())
            .collect();
        ClassCount {
            images: images.len(),
            regions: self.kept_per_class.values().map(|c| c.regions).sum(),
        }
    }

    /// `class,images,regions` rows followed by a `total` row.
    pub fn table_csv(&self) -> String {
        let t = self.totals();
        let rows: Vec<Vec<String>> = self
            .kept_per_class
            .iter()
            .map(|(class, c)| (class.as_str(), c))
            .chain(std::iter::once(("total", &t)))
            .map(|(class, c)| vec![class.to_string(), c.images.to_string(), c.regions.to_string()])
            .collect();
        crate::experiment::table_csv(&["class", "images", "regions"], &rows)
    }
}

/// Filtering thresholds and caption inputs.
#[derive(Debug, Clone)]
pub struct FilterOptions<'a> {
    pub min_area_fraction: f64,
    /// `None` skips the caption criterion.
    pub captions: Option<&'a BTreeMap<String, String>>,
    /// Object → words that count as mentioning it. Objects without an entry
    /// match their own name.
    pub object_terms: Option<&'a BTreeMap<String, Vec<String>>>,
}

impl Default for FilterOptions<'_> {
    fn default() -> Self {
        Self {
            min_area_fraction: 0.20,
            captions: None,
            object_terms: None,
        }
    }
}

fn mentions(caption: &str, object: &str, terms: Option<&BTreeMap<String, Vec<String>>>) -> bool {
    let caption = caption.to_lowercase();
    match terms.and_then(|t| t.get(object)) {
        Some(words) => words.iter().any(|w| caption.contains(&w.to_lowercase())),
        None => caption.contains(&object.to_lowercase()),
    }
}

/// Apply, in order: exactly one instance of the object in the image; object
/// area at least `min_area_fraction` of the image; caption of the masked image
/// does not mention the object. Groups are (image, object class).
pub fn filter_dataset(
    annotations: &[PartAnnotation],
    options: &FilterOptions<'_>,
) -> Result<(Vec<PartAnnotation>, FilterReport)> {
    let f = options.min_area_fraction;
    if !(f > 0.0 && f < 1.0) {
        return Err(ProbeError::Range(format!("min_area_fraction {f} not in (0, 1)")));
    }
    if options.captions.is_none() {
        log::warn!("no captions supplied; caption criterion skipped");
    }
    let mut sizes: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    let mut groups: BTreeMap<(&str, &str), Vec<&PartAnnotation>> = BTreeMap::new();
    for a in annotations {
        let dims = (a.mask.height, a.mask.width);
        if *sizes.entry(&a.image_id).or_insert(dims) != dims {
            return Err(ProbeError::Shape(format!(
                "image {} annotated at two different sizes",
                a.image_id
            )));
        }
        groups.entry((&a.image_id, &a.object)).or_default().push(a);
    }

    let mut report = FilterReport::default();
    let mut kept = Vec::new();
    let mut kept_images: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for ((image, object), members) in groups {
        let instances: BTreeSet<u32> = members.iter().map(|a| a.instance).collect();
        let mut v = GroupVerdict {
            image_id: image.to_string(),
            object: object.to_string(),
            instances: instances.len(),
            area_fraction: None,
            single_instance: if instances.len() == 1 {
                Verdict::Pass
            } else {
                Verdict::Fail
            },
            min_area: Verdict::NotEvaluated,
            caption_clean: Verdict::NotEvaluated,
        };
        if v.single_instance == Verdict::Pass {
            let whole: Vec<&&PartAnnotation> = members.iter().filter(|a| a.part.is_none()).collect();
            let source = if whole.is_empty() {
                members.iter().collect()
            } else {
                whole
            };
            let (h, w) = sizes[image];
            let mut area = PixelMask::empty(h, w);
            for a in source {
                area = area.union(&a.mask)?;
            }
            let frac = area.count() as f64 / (h * w) as f64;
            v.area_fraction = Some(frac);
            v.min_area = if frac >= f { Verdict::Pass } else { Verdict::Fail };
        }
        if v.min_area == Verdict::Pass {
            v.caption_clean = match options.captions.and_then(|c| c.get(image)) {
                None => {
                    if options.captions.is_some() {
                        log::warn!("no caption for image {image}; caption criterion skipped");
                    }
                    Verdict::Skipped
                }
                Some(text) if mentions(text, object, options.object_terms) => Verdict::Fail,
                Some(_) => Verdict::Pass,
            };
        }
        if v.kept() {
            let entry = report.kept_per_class.entry(object.to_string()).or_default();
            entry.regions += members.iter().filter(|a| a.part.is_some()).count();
            kept_images.entry(object).or_default().insert(image);
            kept.extend(members.iter().map(|a| (*a).clone()));
        }
        report.groups.push(v);
    }
    for (object, images) in kept_images {
        report
            .kept_per_class
            .get_mut(object)
            .expect("entry created above")
            .images = images.len();
    }
    Ok((kept, report))
}

/// When a patch counts as covered by a part.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum OverlapRule {
    /// At least one part pixel.
    #[default]
    Any,
    /// At least this fraction of the patch's pixels.
    Fraction(f64),
}

impl OverlapRule {
    fn validate(self) -> Result<()> {
        match self {
            OverlapRule::Fraction(t) if !(t > 0.0 && t <= 1.0) => {
                Err(ProbeError::Range(format!("overlap fraction {t} not in (0, 1]")))
            }
            _ => Ok(()),
        }
    }
}

/// How pixels are assigned to grid cells.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellMapping {
    /// Image sides must be multiples of the grid; cells are equal blocks.
    #[default]
    Exact,
    /// Pixel `(y, x)` goes to cell `(y·rows/h, x·cols/w)`; stands in for a
    /// resize to the grid.
    Proportional,
}

/// Patches localizing one part in one image.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchRegion {
    pub image_id: String,
    pub object: String,
    pub part: String,
    /// Sorted, row-major over the grid.
    pub patches: Vec<usize>,
    pub grid: GridGeometry,
}

impl PatchRegion {
    pub fn new(
        image_id: impl Into<String>,
        object: impl Into<String>,
        part: impl Into<String>,
        patches: impl IntoIterator<Item = usize>,
        grid: GridGeometry,
    ) -> Result<Self> {
        let patches: BTreeSet<usize> = patches.into_iter().collect();
        if patches.is_empty() {
            return Err(ProbeError::Empty("patch region".into()));
        }
        if let Some(&p) = patches.iter().find(|&&p| p >= grid.num_patches()) {
            return Err(ProbeError::Range(format!(
                "patch {p} outside {}x{} grid",
                grid.rows, grid.cols
            )));
        }
        Ok(Self {
            image_id: image_id.into(),
            object: object.into(),
            part: part.into(),
            patches: patches.into_iter().collect(),
            grid,
        })
    }

    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn area_fraction(&self) -> f64 {
        self.patches.len() as f64 / self.grid.num_patches() as f64
    }
}

/// Pixel count per grid cell of a mask, and the cell sizes.
pub fn cell_counts(mask: &PixelMask, grid: GridGeometry, mapping: CellMapping) -> Result<(Vec<usize>, Vec<usize>)> {
    let (h, w) = (mask.height, mask.width);
    if grid.rows == 0 || grid.cols == 0 || h < grid.rows || w < grid.cols {
        return Err(ProbeError::Shape(format!(
            "{h}x{w} image cannot be split into a {}x{} grid",
            grid.rows, grid.cols
        )));
    }
    if mapping == CellMapping::Exact && (h % grid.rows != 0 || w % grid.cols != 0) {
        return Err(ProbeError::Shape(format!(
            "{h}x{w} image not divisible by {}x{} grid",
            grid.rows, grid.cols
        )));
    }
    let n = grid.num_patches();
    let mut hits = vec![0; n];
    let mut sizes = vec![0; n];
    for y in 0..h {
        let gr = y * grid.rows / h;
        for x in 0..w {
            let cell = grid.index(gr, x * grid.cols / w);
            sizes[cell] += 1;
            if mask.get(y, x) {
                hits[cell] += 1;
            }
        }
    }
    Ok((hits, sizes))
}

/// Reduce a part mask to the grid cells it covers under `rule`.
pub fn pixels_to_patches(
    annotation: &PartAnnotation,
    grid: GridGeometry,
    rule: OverlapRule,
    mapping: CellMapping,
) -> Result<PatchRegion> {
    rule.validate()?;
    let part = annotation
        .part
        .as_deref()
        .ok_or_else(|| ProbeError::Range("whole-object mask has no part label".into()))?;
    let (hits, sizes) = cell_counts(&annotation.mask, grid, mapping)?;
    let patches = (0..hits.len()).filter(|&i| match rule {
        OverlapRule::Any => hits[i] > 0,
        OverlapRule::Fraction(t) => hits[i] as f64 >= t * sizes[i] as f64,
    });
    PatchRegion::new(&annotation.image_id, &annotation.object, part, patches, grid).map_err(|_| {
        ProbeError::Empty(format!(
            "part {}/{}/{} vanishes at {}x{} patch resolution",
            annotation.image_id, annotation.object, part, grid.rows, grid.cols
        ))
    })
}

/// Upper bin edges over a region's fraction of grid patches.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SizeBins {
    edges: Vec<f64>,
}

impl SizeBins {
    /// Edges must be strictly increasing, positive, and end at 1.
    pub fn new(edges: Vec<f64>) -> Result<Self> {
        if edges.is_empty() || *edges.last().unwrap() != 1.0 {
            return Err(ProbeError::Range("size bin edges must end at 1.0".into()));
        }
        if edges[0] <= 0.0 || edges.windows(2).any(|w| w[0] >= w[1]) {
            return Err(ProbeError::Range("size bin edges must be increasing in (0, 1]".into()));
        }
        Ok(Self { edges })
    }

    /// `count` equal-width bins.
    pub fn equal_width(count: usize) -> Result<Self> {
        if count == 0 {
            return Err(ProbeError::Range("need at least one size bin".into()));
        }
        let mut edges: Vec<f64> = (1..count).map(|i| i as f64 / count as f64).collect();
        edges.push(1.0);
        Self::new(edges)
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn len(&self) -> usize {
        self.edges.len()
    }

    pub fn is_empty(&self) -> bool {
        self.edges.is_empty()
    }
}

impl Default for SizeBins {
    fn default() -> Self {
        Self::equal_width(4).expect("four bins are valid")
    }
}

/// Index of the first bin whose upper edge is at least the region's patch
/// fraction.
pub fn size_bin(region: &PatchRegion, bins: &SizeBins) -> usize {
    let frac = region.area_fraction();
    bins.edges
        .iter()
        .position(|&e| frac <= e)
        .unwrap_or(bins.edges.len() - 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ann(image: &str, object: &str, instance: u32, part: Option<&str>, mask: PixelMask) -> PartAnnotation {
        PartAnnotation {
            image_id: image.into(),
            object: object.into(),
            instance,
            part: part.map(String::from),
            mask,
        }
    }

    fn rect(h: usize, w: usize, r0: usize, r1: usize, c0: usize, c1: usize) -> PixelMask {
        PixelMask::from_fn(h, w, |r, c| (r0..r1).contains(&r) && (c0..c1).contains(&c))
    }

    #[test]
    fn rle_round_trip_and_errors() {
        let m = PixelMask::from_rle(2, 3, &[0, 2, 3, 1]).unwrap();
        assert_eq!(m.bits(), [true, true, false, false, false, true]);
        assert_eq!(m.to_rle(), vec![0, 2, 3, 1]);
        assert_eq!(PixelMask::empty(2, 2).to_rle(), vec![4]);
        assert!(PixelMask::from_rle(2, 3, &[1, 2]).is_err());
    }

    #[test]
    fn two_instances_fail_first_criterion() {
        let anns = vec![
            ann("a", "cat", 0, Some("ear"), rect(10, 10, 0, 5, 0, 5)),
            ann("a", "cat", 1, Some("ear"), rect(10, 10, 5, 10, 5, 10)),
        ];
        let (kept, report) = filter_dataset(&anns, &FilterOptions::default()).unwrap();
        assert!(kept.is_empty());
        assert_eq!(report.groups[0].single_instance, Verdict::Fail);
        assert_eq!(report.groups[0].min_area, Verdict::NotEvaluated);
    }

    #[test]
    fn area_boundary() {
        // 199 of 1000 pixels.
        let small = PixelMask::from_fn(10, 100, |r, c| r * 100 + c < 199);
        let anns = vec![ann("a", "cat", 0, Some("body"), small)];
        let (kept, report) = filter_dataset(&anns, &FilterOptions::default()).unwrap();
        assert!(kept.is_empty());
        assert_eq!(report.groups[0].min_area, Verdict::Fail);
        let exact = PixelMask::from_fn(10, 100, |r, c| r * 100 + c < 200);
        let (kept, _) = filter_dataset(&[ann("a", "cat", 0, Some("body"), exact)], &FilterOptions::default()).unwrap();
        assert_eq!(kept.len(), 1);
    }

    #[test]
    fn caption_criterion() {
        let anns = vec![ann("a", "cat", 0, Some("ear"), rect(4, 4, 0, 4, 0, 2))];
        let captions: BTreeMap<String, String> = [("a".to_string(), "A Cat on a mat".to_string())].into();
        let opts = FilterOptions {
            captions: Some(&captions),
            ..Default::default()
        };
        let (kept, report) = filter_dataset(&anns, &opts).unwrap();
        assert!(kept.is_empty());
        assert_eq!(report.groups[0].caption_clean, Verdict::Fail);
        let terms: BTreeMap<String, Vec<String>> = [("cat".to_string(), vec!["kitten".to_string()])].into();
        let opts = FilterOptions {
            captions: Some(&captions),
            object_terms: Some(&terms),
            ..Default::default()
        };
        assert_eq!(filter_dataset(&anns, &opts).unwrap().0.len(), 1);
    }

    #[test]
    fn mismatched_sizes_rejected() {
        let anns = vec![
            ann("a", "cat", 0, Some("ear"), rect(4, 4, 0, 4, 0, 4)),
            ann("a", "dog", 0, Some("ear"), rect(4, 5, 0, 4, 0, 4)),
        ];
        assert!(matches!(
            filter_dataset(&anns, &FilterOptions::default()),
            Err(ProbeError::Shape(_))
        ));
    }

    #[test]
    fn aligned_and_single_pixel_masks() {
        let g = GridGeometry::new(2, 2);
        let a = ann("a", "cat", 0, Some("ear"), rect(4, 4, 0, 2, 2, 4));
        let r = pixels_to_patches(&a, g, OverlapRule::Any, CellMapping::Exact).unwrap();
        assert_eq!(r.patches, vec![1]);
        let a = ann("a", "cat", 0, Some("ear"), rect(4, 4, 3, 4, 0, 1));
        let r = pixels_to_patches(&a, g, OverlapRule::Any, CellMapping::Exact).unwrap();
        assert_eq!(r.patches, vec![2]);
        let r = pixels_to_patches(&a, g, OverlapRule::Fraction(0.5), CellMapping::Exact);
        assert!(matches!(r, Err(ProbeError::Empty(_))));
        let a = ann("a", "cat", 0, Some("ear"), rect(5, 4, 0, 1, 0, 1));
        assert!(pixels_to_patches(&a, g, OverlapRule::Any, CellMapping::Exact).is_err());
        assert_eq!(
            pixels_to_patches(&a, g, OverlapRule::Any, CellMapping::Proportional)
                .unwrap()
                .patches,
            vec![0]
        );
    }

    #[test]
    fn fraction_rule_matches_cell_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = GridGeometry::new(4, 4);
        for _ in 0..20 {
            let mask = PixelMask::from_fn(48, 48, |_, _| rng.random_bool(0.3));
            let a = ann("a", "cat", 0, Some("ear"), mask.clone());
            let region = pixels_to_patches(&a, g, OverlapRule::Fraction(0.5), CellMapping::Exact);
            let mut want = Vec::new();
            for cell in 0..16 {
                let (gr, gc) = (cell / 4, cell % 4);
                let mut n = 0;
                for y in gr * 12..gr * 12 + 12 {
                    for x in gc * 12..gc * 12 + 12 {
                        n += mask.get(y, x) as usize;
                    }
                }
                if n * 2 >= 144 {
                    want.push(cell);
                }
            }
            match region {
                Ok(r) => assert_eq!(r.patches, want),
                Err(_) => assert!(want.is_empty()),
            }
        }
    }

    #[test]
    fn bins() {
        let g = GridGeometry::new(24, 24);
        let bins = SizeBins::default();
        let whole = PatchRegion::new("a", "cat", "body", 0..576, g).unwrap();
        assert_eq!(size_bin(&whole, &bins), 3);
        let one = PatchRegion::new("a", "cat", "eye", [5], g).unwrap();
        assert_eq!(size_bin(&one, &bins), 0);

        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..100 {
            let n = rng.random_range(1..=576);
            let r = PatchRegion::new("a", "cat", "x", 0..n, g).unwrap();
            let frac = n as f64 / 576.0;
            let want = if frac <= 0.25 {
                0
            } else if frac <= 0.5 {
                1
            } else if frac <= 0.75 {
                2
            } else {
                3
            };
            assert_eq!(size_bin(&r, &bins), want);
        }
        assert!(SizeBins::new(vec![0.5, 0.4, 1.0]).is_err());
        assert!(SizeBins::new(vec![0.5]).is_err());
    }

    proptest! {
        #[test]
        fn growing_masks_never_shrink_regions(seed in 0u64..200, t in 0.05f64..1.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = GridGeometry::new(3, 3);
            let small = PixelMask::from_fn(12, 12, |_, _| rng.random_bool(0.2));
            let extra = PixelMask::from_fn(12, 12, |_, _| rng.random_bool(0.2));
            let big = small.union(&extra).unwrap();
            for rule in [OverlapRule::Any, OverlapRule::Fraction(t)] {
                let regions = |m: &PixelMask| {
                    pixels_to_patches(&ann("a", "c", 0, Some("p"), m.clone()), g, rule, CellMapping::Exact)
                        .map(|r| r.patches)
                        .unwrap_or_default()
                };
                let (s, b) = (regions(&small), regions(&big));
                prop_assert!(s.iter().all(|p| b.contains(p)));
            }
            let any = pixels_to_patches(&ann("a", "c", 0, Some("p"), big.clone()), g, OverlapRule::Any, CellMapping::Exact)
                .map(|r| r.patches).unwrap_or_default();
            let frac = pixels_to_patches(&ann("a", "c", 0, Some("p"), big), g, OverlapRule::Fraction(t), CellMapping::Exact)
                .map(|r| r.patches).unwrap_or_default();
            prop_assert!(frac.iter().all(|p| any.contains(p)));
        }

        #[test]
        fn filtering_is_idempotent(seed in 0u64..200) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut anns = Vec::new();
            for i in 0..6 {
                let image = format!("img{i}");
                let instances = rng.random_range(1..3);
                for inst in 0..instances {
                    let rows = rng.random_range(1..=10);
                    anns.push(ann(&image, "cat", inst, Some("body"), rect(10, 10, 0, rows, 0, 10)));
                    if rng.random_bool(0.5) {
                        anns.push(ann(&image, "cat", inst, None, rect(10, 10, 0, rows.min(2), 0, 10)));
                    }
                }
            }
            let (once, _) = filter_dataset(&anns, &FilterOptions::default()).unwrap();
            let (twice, _) = filter_dataset(&once, &FilterOptions::default()).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}
