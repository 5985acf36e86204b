// SPDX-License-Identifier: MIT OR Apache-2.0

//! Config-driven runs over toy models or activation dumps.
//!
//! A run filters the annotations, reduces part masks to patch regions, and for
//! every configured plan scores each region's part and object labels at every
//! decoder layer. Reports land in the output directory, one family of files
//! per plan, named by the plan slug:
//!
//! | file | content |
//! |---|---|
//! | `<plan>.csv` / `<plan>.json` | per-layer means: `model,plan,object,part,layer,layer_percent,level,score,n_regions` |
//! | `<plan>.summary.csv` | final-layer and max-over-layers region summaries, aggregated |
//! | `<plan>.regions.csv` | per-region, per-layer ranks and scores with image lineage |
//! | `<plan>.size_bins.csv` | mean summary score per part-size bin |
//! | `<plan>.errors.csv` | regions that failed, with the reason |
//!
//! `level` is `part` (per object/part), `object` (all part regions of an
//! object), `object_label` (object label scored on part regions) or
//! `overall`. Dumps are looked up as `<dump>/<plan>/<image_id>` for `NO_AK`
//! and `<dump>/<plan>/<image_id>/<object>/<part>` for every other plan.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::clip::{focus_sweep, CandidateSet};
use crate::corpus::{cooccurrence_counts, expand_lexicon, read_corpus, CountMode, Lexicon};
use crate::error::{ProbeError, Result};
use crate::interchange::{Bundle, BundleKind};
use crate::knockout::{plan_for_region, DecoderScope, PlanDescriptor};
use crate::lens::{
    dataset_aggregate, layer_curves, AliasTable, DatasetSummary, IdentifiabilityScore, LayerCurve, LayerSel, Level,
    Lineage, SummaryMode,
};
use crate::nn::Matrix;
use crate::par::Executor;
use crate::regions::{
    filter_dataset, pixels_to_patches, read_annotations, read_captions, size_bin, CellMapping, FilterOptions,
    FilterReport, OverlapRule, PartAnnotation, PatchRegion, SizeBins,
};
use crate::seg::{
    label_map_from_annotations, predict_patch_labels, read_png_labels, upsample_to_pixels, IouAccumulator, LabelMap,
};
use crate::toy::{feature_tensor_name, image_features};
use crate::vlm::{DecoderTrace, EncoderStates, GridGeometry, Vlm, VlmConfig};

/// Where hidden states come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum ModelSource {
    /// A saved `model` bundle run in-process.
    ToyManifest { path: PathBuf },
    /// Activation dumps exported ahead of time.
    Dump { path: PathBuf },
    /// Fresh seeded weights; features are seeded per image too.
    RandomToy {
        #[serde(default)]
        config: Option<VlmConfig>,
    },
}

fn default_min_area() -> f64 {
    0.20
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub annotations: PathBuf,
    #[serde(default)]
    pub captions: Option<PathBuf>,
    pub aliases: PathBuf,
    /// `patch_features` bundle with one `image.<id>` tensor per image.
    #[serde(default)]
    pub features: Option<PathBuf>,
    /// JSON object → words that count as a caption mention.
    #[serde(default)]
    pub object_terms: Option<PathBuf>,
    #[serde(default = "default_min_area")]
    pub min_area_fraction: f64,
    #[serde(default)]
    pub overlap: OverlapRule,
    #[serde(default)]
    pub mapping: CellMapping,
    /// Patch grid for dump sources, whose geometry is not in the trace.
    #[serde(default)]
    pub grid: Option<GridGeometry>,
}

fn default_plans() -> Vec<String> {
    vec!["NO_AK".into()]
}

fn default_out() -> PathBuf {
    PathBuf::from("reports")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "default_plans")]
    pub plans: Vec<String>,
    #[serde(default)]
    pub summary: SummaryMode,
    #[serde(default)]
    pub decoder_scope: DecoderScope,
    /// 0 means available parallelism.
    #[serde(default)]
    pub workers: usize,
    #[serde(default = "default_out")]
    pub out: PathBuf,
    #[serde(default)]
    pub size_bins: Option<Vec<f64>>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            plans: default_plans(),
            summary: SummaryMode::default(),
            decoder_scope: DecoderScope::default(),
            workers: 0,
            out: default_out(),
            size_bins: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipConfig {
    pub candidates: PathBuf,
    /// Defaults to every layer `0..=encoder_layers`.
    #[serde(default)]
    pub focus_layers: Option<Vec<usize>>,
}

/// Which labels a patch may take in segmentation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateMode {
    /// The full class list for every image.
    #[default]
    Global,
    /// Only the classes present in the image's ground truth.
    PerImage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmentConfig {
    /// Class names; class id `i + 1` is `classes[i]`, 0 is background.
    pub classes: Vec<String>,
    /// Decoder layer to read; defaults to the last.
    #[serde(default)]
    pub layer: Option<usize>,
    #[serde(default)]
    pub candidates: CandidateMode,
    #[serde(default)]
    pub background_threshold: f64,
    /// Directory of `<image_id>.png` label maps; annotations are used otherwise.
    #[serde(default)]
    pub gt_png_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CooccurConfig {
    pub corpus: PathBuf,
    #[serde(default)]
    pub lexicon: Option<PathBuf>,
    pub objects: Vec<String>,
    pub parts: Vec<String>,
    #[serde(default)]
    pub mode: CountMode,
}

fn default_name() -> String {
    "model".into()
}

/// Parsed experiment TOML. Relative paths resolve against the file's
/// directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub seed: u64,
    pub model: ModelSource,
    pub data: DataConfig,
    #[serde(default)]
    pub run: RunConfig,
    #[serde(default)]
    pub clip: Option<ClipConfig>,
    #[serde(default)]
    pub segment: Option<SegmentConfig>,
    #[serde(default)]
    pub cooccur: Option<CooccurConfig>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ProbeError::io(path, e))?;
        let mut cfg: Self =
            toml::from_str(&text).map_err(|e| ProbeError::Config(format!("{}: {e}", path.display())))?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn out_dir(&self) -> PathBuf {
        self.resolve(&self.run.out)
    }

    pub fn plans(&self) -> Result<Vec<PlanDescriptor>> {
        let plans = self
            .run
            .plans
            .iter()
            .map(|s| s.parse::<PlanDescriptor>())
            .collect::<Result<Vec<_>>>()?;
        if plans.is_empty() {
            return Err(ProbeError::Config("no plans configured".into()));
        }
        let unique: BTreeSet<_> = plans.iter().collect();
        if unique.len() != plans.len() {
            return Err(ProbeError::Config("a plan is listed twice".into()));
        }
        Ok(plans)
    }
}

/// A region that could not be scored.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RegionError {
    pub image_id: String,
    pub object: String,
    pub part: String,
    pub stage: String,
    pub error: String,
}

/// Layer curves of one region under one plan.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionResult {
    pub region: PatchRegion,
    pub part: LayerCurve,
    /// Object label scored on the part region; `None` when the alias table
    /// has no entry for the object.
    pub object: Option<LayerCurve>,
}

enum Features {
    Bundle(Bundle),
    Seeded(u64),
}

enum Backend {
    InProcess { vlm: Box<Vlm>, features: Features },
    Dump { root: PathBuf },
}

/// Loaded model, table and regions of a config.
pub struct Experiment {
    pub config: ExperimentConfig,
    backend: Backend,
    pub table: AliasTable,
    pub annotations: Vec<PartAnnotation>,
    pub filter: FilterReport,
    pub regions: Vec<PatchRegion>,
    pub region_errors: Vec<RegionError>,
    pub grid: GridGeometry,
}

/// Load a dumped trace, plus encoder states when present.
pub fn load_activation_dump(dir: &Path) -> Result<(DecoderTrace, Option<EncoderStates>)> {
    DecoderTrace::load(dir)
}

fn merged_part_masks(kept: &[PartAnnotation]) -> Result<Vec<PartAnnotation>> {
    let mut by_key: BTreeMap<(String, String, u32, String), PartAnnotation> = BTreeMap::new();
    for a in kept {
        let Some(part) = &a.part else { continue };
        let key = (a.image_id.clone(), a.object.clone(), a.instance, part.clone());
        match by_key.get_mut(&key) {
            Some(existing) => existing.mask = existing.mask.union(&a.mask)?,
            None => {
                by_key.insert(key, a.clone());
            }
        }
    }
    Ok(by_key.into_values().collect())
}

impl Experiment {
    pub fn load(config: ExperimentConfig) -> Result<Self> {
        let (backend, grid) = match &config.model {
            ModelSource::ToyManifest { path } => {
                let vlm = Vlm::load(&config.resolve(path))?;
                let grid = vlm.config.patch_grid;
                let features = match &config.data.features {
                    Some(p) => Features::Bundle(Bundle::load_kind(&config.resolve(p), BundleKind::PatchFeatures)?),
                    None => Features::Seeded(config.seed),
                };
                (
                    Backend::InProcess {
                        vlm: Box::new(vlm),
                        features,
                    },
                    grid,
                )
            }
            ModelSource::RandomToy { config: vc } => {
                let vlm = Vlm::random(vc.clone().unwrap_or_else(VlmConfig::toy), config.seed)?;
                let grid = vlm.config.patch_grid;
                (
                    Backend::InProcess {
                        vlm: Box::new(vlm),
                        features: Features::Seeded(config.seed),
                    },
                    grid,
                )
            }
            ModelSource::Dump { path } => {
                let grid = config
                    .data
                    .grid
                    .ok_or_else(|| ProbeError::Config("dump sources need data.grid".into()))?;
                (
                    Backend::Dump {
                        root: config.resolve(path),
                    },
                    grid,
                )
            }
        };
        let table = AliasTable::load(&config.resolve(&config.data.aliases))?;
        if let Backend::InProcess { vlm, .. } = &backend {
            if vlm.config.vocab_size != table.vocab_size() {
                return Err(ProbeError::Config(format!(
                    "alias table vocabulary {} differs from model vocabulary {}",
                    table.vocab_size(),
                    vlm.config.vocab_size
                )));
            }
        }
        let annotations = read_annotations(&config.resolve(&config.data.annotations))?;
        let captions = config
            .data
            .captions
            .as_ref()
            .map(|p| read_captions(&config.resolve(p)))
            .transpose()?;
        let terms: Option<BTreeMap<String, Vec<String>>> = match &config.data.object_terms {
            Some(p) => {
                let p = config.resolve(p);
                let text = std::fs::read_to_string(&p).map_err(|e| ProbeError::io(&p, e))?;
                Some(serde_json::from_str(&text).map_err(|e| ProbeError::json(p.display().to_string(), e))?)
            }
            None => None,
        };
        let options = FilterOptions {
            min_area_fraction: config.data.min_area_fraction,
            captions: captions.as_ref(),
            object_terms: terms.as_ref(),
        };
        let (kept, filter) = filter_dataset(&annotations, &options)?;
        let mut regions = Vec::new();
        let mut region_errors = Vec::new();
        for a in merged_part_masks(&kept)? {
            match pixels_to_patches(&a, grid, config.data.overlap, config.data.mapping) {
                Ok(r) => regions.push(r),
                Err(e) => region_errors.push(RegionError {
                    image_id: a.image_id.clone(),
                    object: a.object.clone(),
                    part: a.part.clone().unwrap_or_default(),
                    stage: "patches".into(),
                    error: e.to_string(),
                }),
            }
        }
        Ok(Self {
            config,
            backend,
            table,
            annotations: kept,
            filter,
            regions,
            region_errors,
            grid,
        })
    }

    pub fn vlm(&self) -> Option<&Vlm> {
        match &self.backend {
            Backend::InProcess { vlm, .. } => Some(vlm),
            Backend::Dump { .. } => None,
        }
    }

    /// Patch features of one image for in-process models.
    pub fn features(&self, image_id: &str) -> Result<Matrix> {
        match &self.backend {
            Backend::InProcess { vlm, features } => match features {
                Features::Bundle(b) => {
                    let name = feature_tensor_name(image_id);
                    b.require(&name)?
                        .to_matrix(&name, vlm.config.num_patches(), vlm.config.patch_dim)
                }
                Features::Seeded(seed) => Ok(image_features(&vlm.config, *seed, image_id)),
            },
            Backend::Dump { .. } => Err(ProbeError::Config("dump sources carry no patch features".into())),
        }
    }

    fn check_plan(&self, plan: PlanDescriptor) -> Result<()> {
        if let PlanDescriptor::ClsFocus(_) = plan {
            return Err(ProbeError::Plan("CLS_FOCUS plans belong to clip-probe, not run".into()));
        }
        if let (Some(vlm), PlanDescriptor::EncLastK(k)) = (self.vlm(), plan) {
            if k > vlm.config.encoder_layers {
                return Err(ProbeError::Plan(format!(
                    "{plan} exceeds the model's {} encoder layers",
                    vlm.config.encoder_layers
                )));
            }
        }
        Ok(())
    }

    /// Decoder trace of one region under `plan`.
    pub fn trace(&self, region: &PatchRegion, plan: PlanDescriptor) -> Result<DecoderTrace> {
        match &self.backend {
            Backend::InProcess { vlm, .. } => {
                let features = self.features(&region.image_id)?;
                let p = plan_for_region(&vlm.config, plan, &region.patches, self.config.run.decoder_scope)?;
                Ok(vlm.forward(&features, &p.encoder, &p.decoder)?.trace)
            }
            Backend::Dump { root } => {
                let mut dir = root.join(plan.slug()).join(&region.image_id);
                if plan != PlanDescriptor::NoAk {
                    dir = dir.join(&region.object).join(&region.part);
                }
                Ok(load_activation_dump(&dir)?.0)
            }
        }
    }

    fn image_trace(&self, image_id: &str) -> Result<DecoderTrace> {
        match &self.backend {
            Backend::InProcess { vlm, .. } => {
                let features = self.features(image_id)?;
                Ok(vlm.forward(&features, &Default::default(), &Default::default())?.trace)
            }
            Backend::Dump { root } => {
                Ok(load_activation_dump(&root.join(PlanDescriptor::NoAk.slug()).join(image_id))?.0)
            }
        }
    }

    /// Score every region under one plan. Failed regions are returned
    /// separately and never abort the others.
    pub fn probe_plan(
        &self,
        plan: PlanDescriptor,
        executor: &Executor,
    ) -> Result<(Vec<RegionResult>, Vec<RegionError>)> {
        self.check_plan(plan)?;
        let outcomes = executor.map(&self.regions, |region| -> Result<RegionResult> {
            let trace = self.trace(region, plan)?;
            let with_object = self.table.label_index(&region.object).is_some();
            let labels: Vec<&str> = if with_object {
                vec![&region.part, &region.object]
            } else {
                vec![&region.part]
            };
            let mut curves = layer_curves(&trace, &region.patches, &labels, &self.table)?;
            let object = if with_object { curves.pop() } else { None };
            let part = curves.pop().expect("part label requested");
            Ok(RegionResult {
                region: region.clone(),
                part,
                object,
            })
        });
        let mut ok = Vec::new();
        let mut errors = self.region_errors.clone();
        for (region, outcome) in self.regions.iter().zip(outcomes) {
            match outcome {
                Ok(r) => ok.push(r),
                Err(e) => {
                    log::warn!("{plan} {}/{}/{}: {e}", region.image_id, region.object, region.part);
                    errors.push(RegionError {
                        image_id: region.image_id.clone(),
                        object: region.object.clone(),
                        part: region.part.clone(),
                        stage: "probe".into(),
                        error: e.to_string(),
                    });
                }
            }
        }
        Ok((ok, errors))
    }
}

/// One row of the per-layer report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub model: String,
    pub plan: String,
    pub object: String,
    pub part: String,
    pub layer: usize,
    pub layer_percent: f64,
    pub level: String,
    pub score: f64,
    pub n_regions: usize,
}

/// JSON mirror of a per-layer report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportJson {
    pub model: String,
    pub plan: String,
    pub num_layers: usize,
    pub rows: Vec<ReportRow>,
}

pub const REPORT_COLUMNS: [&str; 9] = [
    "model",
    "plan",
    "object",
    "part",
    "layer",
    "layer_percent",
    "level",
    "score",
    "n_regions",
];

/// `100 · layer / num_layers` rounded to 2 decimals; a 0-layer decoder's only
/// point is its final layer, 100.
pub fn layer_percent(layer: usize, num_layers: usize) -> f64 {
    if num_layers == 0 {
        return 100.0;
    }
    (100.0 * layer as f64 / num_layers as f64 * 100.0).round() / 100.0
}

/// Header plus rows as CSV text.
pub fn table_csv<S: AsRef<str>>(header: &[&str], rows: &[Vec<S>]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut write = || -> csv::Result<()> {
        w.write_record(header)?;
        for r in rows {
            w.write_record(r.iter().map(AsRef::as_ref))?;
        }
        w.flush()?;
        Ok(())
    };
    write().expect("writing CSV to memory");
    String::from_utf8(w.into_inner().expect("in-memory CSV writer")).expect("CSV of UTF-8 fields")
}

fn region_scores(
    results: &[RegionResult],
    label: impl Fn(&RegionResult) -> Option<&LayerCurve>,
) -> Vec<IdentifiabilityScore> {
    let mut out = Vec::new();
    for r in results {
        let Some(curve) = label(r) else { continue };
        let lineage = |layer| Lineage {
            image_id: r.region.image_id.clone(),
            object: r.region.object.clone(),
            part: r.region.part.clone(),
            layer,
            level: Level::Region,
        };
        for (l, &s) in curve.scores.iter().enumerate() {
            out.push(IdentifiabilityScore {
                value: s,
                lineage: lineage(LayerSel::At(l)),
            });
        }
        for (sel, mode) in [
            (LayerSel::Final, SummaryMode::FinalLayer),
            (LayerSel::Max, SummaryMode::MaxLayer),
        ] {
            out.push(IdentifiabilityScore {
                value: curve.summary(mode),
                lineage: lineage(sel),
            });
        }
    }
    out
}

/// Aggregated report of one plan, ready to write.
#[derive(Debug, Clone, PartialEq)]
pub struct PlanReport {
    pub model: String,
    pub plan: PlanDescriptor,
    pub num_layers: usize,
    pub rows: Vec<ReportRow>,
    pub summary_rows: Vec<Vec<String>>,
    pub region_rows: Vec<Vec<String>>,
    pub size_bin_rows: Vec<Vec<String>>,
    pub errors: Vec<RegionError>,
}

type ReportRowParts = (&'static str, String, String, f64, usize);

fn level_rows(parts: &DatasetSummary, objects_label: &DatasetSummary, mut emit: impl FnMut(LayerSel, ReportRowParts)) {
    for ((sel, o, p), m) in &parts.parts {
        emit(*sel, ("part", o.clone(), p.clone(), m.score, m.n_regions));
    }
    for ((sel, o), m) in &parts.objects {
        emit(*sel, ("object", o.clone(), String::new(), m.score, m.n_regions));
    }
    for ((sel, o), m) in &objects_label.objects {
        emit(*sel, ("object_label", o.clone(), String::new(), m.score, m.n_regions));
    }
    for (sel, m) in &parts.overall {
        emit(*sel, ("overall", String::new(), String::new(), m.score, m.n_regions));
    }
}

fn level_rank(level: &str) -> usize {
    ["part", "object", "object_label", "overall"]
        .iter()
        .position(|l| *l == level)
        .unwrap_or(usize::MAX)
}

/// Assemble all report tables of one plan.
pub fn build_report(
    model: &str,
    plan: PlanDescriptor,
    results: &[RegionResult],
    errors: Vec<RegionError>,
    summary_mode: SummaryMode,
    bins: &SizeBins,
) -> Result<PlanReport> {
    if results.is_empty() {
        return Err(ProbeError::Empty(format!("no region of plan {plan} was scored")));
    }
    let num_layers = results[0].part.scores.len() - 1;
    if results.iter().any(|r| r.part.scores.len() != num_layers + 1) {
        return Err(ProbeError::Shape("regions disagree on decoder depth".into()));
    }
    let plan_name = plan.to_string();
    let parts = dataset_aggregate(&region_scores(results, |r| Some(&r.part)))?;
    let object_scores = region_scores(results, |r| r.object.as_ref());
    let objects = if object_scores.is_empty() {
        DatasetSummary::default()
    } else {
        dataset_aggregate(&object_scores)?
    };

    let mut rows = Vec::new();
    let mut summary = Vec::new();
    level_rows(&parts, &objects, |sel, (level, object, part, score, n)| match sel {
        LayerSel::At(layer) => rows.push(ReportRow {
            model: model.to_string(),
            plan: plan_name.clone(),
            object,
            part,
            layer,
            layer_percent: layer_percent(layer, num_layers),
            level: level.to_string(),
            score,
            n_regions: n,
        }),
        other => summary.push((level, object, part, other, score, n)),
    });
    rows.sort_by(|a, b| {
        (level_rank(&a.level), &a.object, &a.part, a.layer).cmp(&(level_rank(&b.level), &b.object, &b.part, b.layer))
    });
    summary.sort_by(|a, b| (level_rank(a.0), &a.1, &a.2, a.3).cmp(&(level_rank(b.0), &b.1, &b.2, b.3)));
    let summary_rows = summary
        .into_iter()
        .map(|(level, o, p, sel, score, n)| {
            vec![
                model.to_string(),
                plan_name.clone(),
                o,
                p,
                sel.to_string(),
                level.to_string(),
                score.to_string(),
                n.to_string(),
            ]
        })
        .collect();

    let mut region_rows = Vec::new();
    let mut by_bin: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in results {
        let bin = size_bin(&r.region, bins);
        let entry = by_bin.entry(bin).or_default();
        entry.0 += r.part.summary(summary_mode);
        entry.1 += 1;
        for layer in 0..=num_layers {
            let (object_rank, object_score) = match &r.object {
                Some(c) => (c.ranks[layer].to_string(), c.scores[layer].to_string()),
                None => (String::new(), String::new()),
            };
            region_rows.push(vec![
                model.to_string(),
                plan_name.clone(),
                r.region.image_id.clone(),
                r.region.object.clone(),
                r.region.part.clone(),
                r.region.len().to_string(),
                bin.to_string(),
                layer.to_string(),
                r.part.ranks[layer].to_string(),
                r.part.scores[layer].to_string(),
                object_rank,
                object_score,
            ]);
        }
    }
    let mode_name = match summary_mode {
        SummaryMode::FinalLayer => "final",
        SummaryMode::MaxLayer => "max",
    };
    let size_bin_rows = (0..bins.len())
        .map(|b| {
            let (sum, n) = by_bin.get(&b).copied().unwrap_or_default();
            vec![
                model.to_string(),
                plan_name.clone(),
                b.to_string(),
                bins.edges()[b].to_string(),
                mode_name.to_string(),
                if n > 0 {
                    (sum / n as f64).to_string()
                } else {
                    String::new()
                },
                n.to_string(),
            ]
        })
        .collect();
    Ok(PlanReport {
        model: model.to_string(),
        plan,
        num_layers,
        rows,
        summary_rows,
        region_rows,
        size_bin_rows,
        errors,
    })
}

/// Per-layer report as CSV text.
pub fn report_csv(rows: &[ReportRow]) -> String {
    let body: Vec<Vec<String>> = rows
        .iter()
        .map(|r| {
            vec![
                r.model.clone(),
                r.plan.clone(),
                r.object.clone(),
                r.part.clone(),
                r.layer.to_string(),
                format!("{:.2}", r.layer_percent),
                r.level.clone(),
                r.score.to_string(),
                r.n_regions.to_string(),
            ]
        })
        .collect();
    table_csv(&REPORT_COLUMNS, &body)
}

/// Parse text written by [`report_csv`].
pub fn parse_report_csv(text: &str) -> Result<Vec<ReportRow>> {
    let mut reader = csv::Reader::from_reader(text.as_bytes());
    let bad = |e: csv::Error| ProbeError::Config(format!("report CSV: {e}"));
    let header = reader.headers().map_err(bad)?;
    if header.iter().ne(REPORT_COLUMNS) {
        return Err(ProbeError::Config(format!(
            "unexpected report header `{}`",
            header.iter().collect::<Vec<_>>().join(",")
        )));
    }
    reader.deserialize().map(|r| r.map_err(bad)).collect()
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| ProbeError::io(path, e))
}

/// Write every file of a plan report into `out`; returns the paths written.
pub fn emit_report(report: &PlanReport, out: &Path) -> Result<Vec<PathBuf>> {
    if report.rows.is_empty() {
        return Err(ProbeError::Empty("report has no rows".into()));
    }
    std::fs::create_dir_all(out).map_err(|e| ProbeError::io(out, e))?;
    let slug = report.plan.slug();
    let json = ReportJson {
        model: report.model.clone(),
        plan: report.plan.to_string(),
        num_layers: report.num_layers,
        rows: report.rows.clone(),
    };
    let files = [
        (format!("{slug}.csv"), report_csv(&report.rows)),
        (
            format!("{slug}.json"),
            serde_json::to_string_pretty(&json).map_err(|e| ProbeError::json("report", e))? + "\n",
        ),
        (
            format!("{slug}.summary.csv"),
            table_csv(
                &[
                    "model",
                    "plan",
                    "object",
                    "part",
                    "summary",
                    "level",
                    "score",
                    "n_regions",
                ],
                &report.summary_rows,
            ),
        ),
        (
            format!("{slug}.regions.csv"),
            table_csv(
                &[
                    "model",
                    "plan",
                    "image_id",
                    "object",
                    "part",
                    "n_patches",
                    "size_bin",
                    "layer",
                    "part_rank",
                    "part_score",
                    "object_rank",
                    "object_score",
                ],
                &report.region_rows,
            ),
        ),
        (
            format!("{slug}.size_bins.csv"),
            table_csv(
                &["model", "plan", "bin", "upper_edge", "summary", "score", "n_regions"],
                &report.size_bin_rows,
            ),
        ),
        (
            format!("{slug}.errors.csv"),
            table_csv(
                &["image_id", "object", "part", "stage", "error"],
                &report
                    .errors
                    .iter()
                    .map(|e| {
                        vec![
                            e.image_id.clone(),
                            e.object.clone(),
                            e.part.clone(),
                            e.stage.clone(),
                            e.error.clone(),
                        ]
                    })
                    .collect::<Vec<_>>(),
            ),
        ),
    ];
    let mut written = Vec::new();
    for (name, text) in files {
        let path = out.join(name);
        write_file(&path, &text)?;
        written.push(path);
    }
    Ok(written)
}

/// Outcome of [`run_experiment`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RunSummary {
    pub files: Vec<PathBuf>,
    /// Regions that failed, summed over plans.
    pub region_errors: usize,
}

/// Overrides applied on top of a config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub workers: Option<usize>,
    pub seed: Option<u64>,
}

impl Overrides {
    pub fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(out) = &self.out {
            cfg.run.out = std::path::absolute(out).unwrap_or_else(|_| out.clone());
        }
        if let Some(w) = self.workers {
            cfg.run.workers = w;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
    }
}

fn write_filter_outputs(exp: &Experiment, out: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out).map_err(|e| ProbeError::io(out, e))?;
    let report = out.join("filter_report.json");
    write_file(
        &report,
        &(serde_json::to_string_pretty(&exp.filter).map_err(|e| ProbeError::json("filter report", e))? + "\n"),
    )?;
    let table = out.join("dataset_table.csv");
    write_file(&table, &exp.filter.table_csv())?;
    Ok(vec![report, table])
}

/// Run every configured plan and write its reports.
pub fn run_experiment(config: ExperimentConfig) -> Result<RunSummary> {
    let plans = config.plans()?;
    let bins = match &config.run.size_bins {
        Some(edges) => SizeBins::new(edges.clone())?,
        None => SizeBins::default(),
    };
    let executor = Executor::new(config.run.workers)?;
    let exp = Experiment::load(config)?;
    for plan in &plans {
        exp.check_plan(*plan)?;
    }
    let out = exp.config.out_dir();
    let mut files = write_filter_outputs(&exp, &out)?;
    let mut region_errors = 0;
    for plan in plans {
        let (results, errors) = exp.probe_plan(plan, &executor)?;
        region_errors += errors.len();
        let report = build_report(&exp.config.name, plan, &results, errors, exp.config.run.summary, &bins)?;
        files.extend(emit_report(&report, &out)?);
    }
    Ok(RunSummary { files, region_errors })
}

/// Filter only; writes the filter report, dataset table and kept annotations.
pub fn run_filter(config: ExperimentConfig) -> Result<RunSummary> {
    let exp = Experiment::load(config)?;
    let out = exp.config.out_dir();
    let mut files = write_filter_outputs(&exp, &out)?;
    let kept = out.join("kept_annotations.jsonl");
    crate::regions::write_annotations(&kept, &exp.annotations)?;
    files.push(kept);
    let errors = out.join("region_errors.csv");
    write_file(
        &errors,
        &table_csv(
            &["image_id", "object", "part", "stage", "error"],
            &exp.region_errors
                .iter()
                .map(|e| {
                    vec![
                        e.image_id.clone(),
                        e.object.clone(),
                        e.part.clone(),
                        e.stage.clone(),
                        e.error.clone(),
                    ]
                })
                .collect::<Vec<_>>(),
        ),
    )?;
    files.push(errors);
    Ok(RunSummary {
        files,
        region_errors: exp.region_errors.len(),
    })
}

/// Focus-layer sweep of the dual-encoder probe over every region.
pub fn run_clip_probe(config: ExperimentConfig) -> Result<RunSummary> {
    let clip = config
        .clip
        .clone()
        .ok_or_else(|| ProbeError::Config("clip-probe needs a [clip] section".into()))?;
    let executor = Executor::new(config.run.workers)?;
    let exp = Experiment::load(config)?;
    let vlm = exp
        .vlm()
        .ok_or_else(|| ProbeError::Config("clip-probe needs an in-process model".into()))?;
    let candidates = CandidateSet::load(&exp.config.resolve(&clip.candidates))?;
    let layers = clip
        .focus_layers
        .clone()
        .unwrap_or_else(|| (0..=vlm.config.encoder_layers).collect());
    let outcomes = executor.map(&exp.regions, |region| {
        let features = exp.features(&region.image_id)?;
        focus_sweep(vlm, &features, &region.patches, &region.part, &candidates, &layers)
    });
    let mut rows = Vec::new();
    let mut errors = exp.region_errors.clone();
    let mut per_layer: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for (region, outcome) in exp.regions.iter().zip(outcomes) {
        match outcome {
            Ok(points) => {
                for p in points {
                    let e = per_layer.entry(p.focus_layer).or_default();
                    e.0 += p.score;
                    e.1 += 1;
                    rows.push(vec![
                        exp.config.name.clone(),
                        region.image_id.clone(),
                        region.object.clone(),
                        region.part.clone(),
                        p.focus_layer.to_string(),
                        p.rank.to_string(),
                        p.score.to_string(),
                        candidates.len().to_string(),
                    ]);
                }
            }
            Err(e) => errors.push(RegionError {
                image_id: region.image_id.clone(),
                object: region.object.clone(),
                part: region.part.clone(),
                stage: "clip".into(),
                error: e.to_string(),
            }),
        }
    }
    let out = exp.config.out_dir();
    std::fs::create_dir_all(&out).map_err(|e| ProbeError::io(&out, e))?;
    let detail = out.join("clip_focus.csv");
    write_file(
        &detail,
        &table_csv(
            &[
                "model",
                "image_id",
                "object",
                "part",
                "focus_layer",
                "rank",
                "score",
                "n_candidates",
            ],
            &rows,
        ),
    )?;
    let summary = out.join("clip_focus_summary.csv");
    let summary_rows: Vec<Vec<String>> = per_layer
        .iter()
        .map(|(l, (s, n))| {
            vec![
                exp.config.name.clone(),
                l.to_string(),
                (s / *n as f64).to_string(),
                n.to_string(),
            ]
        })
        .collect();
    write_file(
        &summary,
        &table_csv(&["model", "focus_layer", "score", "n_regions"], &summary_rows),
    )?;
    let err_path = out.join("clip_errors.csv");
    write_file(
        &err_path,
        &table_csv(
            &["image_id", "object", "part", "stage", "error"],
            &errors
                .iter()
                .map(|e| {
                    vec![
                        e.image_id.clone(),
                        e.object.clone(),
                        e.part.clone(),
                        e.stage.clone(),
                        e.error.clone(),
                    ]
                })
                .collect::<Vec<_>>(),
        ),
    )?;
    Ok(RunSummary {
        files: vec![detail, summary, err_path],
        region_errors: errors.len(),
    })
}

/// Patch-label segmentation of each kept image scored by mIoU.
pub fn run_segmentation(config: ExperimentConfig) -> Result<RunSummary> {
    let seg = config
        .segment
        .clone()
        .ok_or_else(|| ProbeError::Config("segment needs a [segment] section".into()))?;
    if seg.classes.is_empty() {
        return Err(ProbeError::Config("segment.classes is empty".into()));
    }
    let executor = Executor::new(config.run.workers)?;
    let exp = Experiment::load(config)?;
    let images: Vec<String> = exp
        .annotations
        .iter()
        .map(|a| a.image_id.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let class_ids: Vec<u32> = (1..=seg.classes.len() as u32).collect();
    let outcomes = executor.map(&images, |image_id| -> Result<(LabelMap, LabelMap)> {
        let gt = match &seg.gt_png_dir {
            Some(dir) => read_png_labels(&exp.config.resolve(dir).join(format!("{image_id}.png")))?,
            None => label_map_from_annotations(&exp.annotations, image_id, &seg.classes)?,
        };
        let candidates: Vec<String> = match seg.candidates {
            CandidateMode::Global => seg.classes.clone(),
            CandidateMode::PerImage => {
                let present: BTreeSet<u32> = gt.data.iter().copied().filter(|&v| v != 0).collect();
                if let Some(&v) = present.iter().find(|&&v| v as usize > seg.classes.len()) {
                    return Err(ProbeError::Range(format!(
                        "image {image_id} has class id {v} beyond segment.classes"
                    )));
                }
                present.iter().map(|&v| seg.classes[v as usize - 1].clone()).collect()
            }
        };
        if candidates.is_empty() {
            return Err(ProbeError::Empty(format!("no candidate classes for image {image_id}")));
        }
        let trace = exp.image_trace(image_id)?;
        let layer = seg.layer.unwrap_or(trace.hidden.len() - 1);
        let mut grid = predict_patch_labels(
            &trace,
            exp.grid,
            layer,
            &candidates,
            &exp.table,
            seg.background_threshold,
        )?;
        for v in grid.labels.iter_mut().filter(|v| **v != 0) {
            let name = &candidates[*v as usize - 1];
            *v = seg
                .classes
                .iter()
                .position(|c| c == name)
                .expect("candidate from class list") as u32
                + 1;
        }
        let pred = upsample_to_pixels(&grid, gt.height, gt.width)?;
        Ok((pred, gt))
    });
    let mut total = IouAccumulator::default();
    let mut rows = Vec::new();
    let mut errors = Vec::new();
    for (image_id, outcome) in images.iter().zip(outcomes) {
        let step = outcome.and_then(|(pred, gt)| {
            let mut acc = IouAccumulator::default();
            acc.add(&pred, &gt, &class_ids)?;
            total.add(&pred, &gt, &class_ids)?;
            acc.miou()
        });
        match step {
            Ok(m) => rows.push(vec![image_id.clone(), m.to_string()]),
            Err(e) => errors.push(vec![image_id.clone(), e.to_string()]),
        }
    }
    let out = exp.config.out_dir();
    std::fs::create_dir_all(&out).map_err(|e| ProbeError::io(&out, e))?;
    if let Ok(m) = total.miou() {
        rows.push(vec!["all".into(), m.to_string()]);
    }
    let per_image = out.join("segmentation.csv");
    write_file(&per_image, &table_csv(&["image_id", "miou"], &rows))?;
    let per_class = out.join("segmentation_classes.csv");
    let class_rows: Vec<Vec<String>> = total
        .per_class()
        .iter()
        .map(|(c, iou)| vec![seg.classes[*c as usize - 1].clone(), iou.to_string()])
        .collect();
    write_file(&per_class, &table_csv(&["class", "iou"], &class_rows))?;
    let err_path = out.join("segmentation_errors.csv");
    write_file(&err_path, &table_csv(&["image_id", "error"], &errors))?;
    Ok(RunSummary {
        files: vec![per_image, per_class, err_path],
        region_errors: errors.len(),
    })
}

/// Object/part co-occurrence over a caption corpus.
pub fn run_cooccurrence(config: &ExperimentConfig) -> Result<RunSummary> {
    let co = config
        .cooccur
        .clone()
        .ok_or_else(|| ProbeError::Config("cooccur needs a [cooccur] section".into()))?;
    let corpus = read_corpus(&config.resolve(&co.corpus))?;
    let lexicon = match &co.lexicon {
        Some(p) => Lexicon::load(&config.resolve(p))?,
        None => Lexicon::default(),
    };
    let objects = expand_lexicon(&co.objects, &lexicon);
    let parts = expand_lexicon(&co.parts, &lexicon);
    let table = cooccurrence_counts(&corpus, &objects, &parts, co.mode);
    let out = config.out_dir();
    std::fs::create_dir_all(&out).map_err(|e| ProbeError::io(&out, e))?;
    let matrix = out.join("cooccurrence.csv");
    write_file(&matrix, &table.to_csv())?;
    let totals = table_csv(
        &["part", "total"],
        &table
            .parts
            .iter()
            .zip(&table.part_totals)
            .map(|(p, t)| vec![p.clone(), t.to_string()])
            .collect::<Vec<_>>(),
    );
    let totals_path = out.join("part_totals.csv");
    write_file(&totals_path, &totals)?;
    let json = out.join("cooccurrence.json");
    write_file(
        &json,
        &(serde_json::to_string_pretty(&table).map_err(|e| ProbeError::json("cooccurrence", e))? + "\n"),
    )?;
    Ok(RunSummary {
        files: vec![matrix, totals_path, json],
        region_errors: 0,
    })
}

/// Result of checking one interchange directory.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DumpCheck {
    pub kind: BundleKind,
    pub tensors: usize,
    /// Largest |lens logit − stored output logit| at the final layer, for
    /// traces that carry output logits.
    pub closure_max_abs_diff: Option<f64>,
    /// Image positions whose lens argmax differs from the stored logits' argmax.
    pub closure_argmax_mismatches: Option<usize>,
    pub within_tolerance: bool,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Validate checksums, shapes and kind-specific structure of a bundle. Traces
/// with stored output logits are also checked against the lens projection of
/// their final layer.
pub fn verify_dump(dir: &Path, tolerance: f64) -> Result<DumpCheck> {
    let manifest = crate::interchange::read_manifest(dir)?;
    let bundle = Bundle::load(dir)?;
    let mut check = DumpCheck {
        kind: manifest.kind,
        tensors: bundle.len(),
        closure_max_abs_diff: None,
        closure_argmax_mismatches: None,
        within_tolerance: true,
    };
    match manifest.kind {
        BundleKind::Model => {
            Vlm::load(dir)?;
        }
        BundleKind::Candidates => {
            CandidateSet::load(dir)?;
        }
        BundleKind::PatchFeatures => {}
        BundleKind::Trace => {
            let (trace, _) = DecoderTrace::load(dir)?;
            if let Some(out) = &trace.output_logits {
                let last = trace.num_layers();
                let mut max_diff = 0.0f64;
                let mut mismatches = 0;
                for p in 0..trace.layout.num_patches {
                    let lens = trace.lens.logits(trace.state(last, p)?)?;
                    let stored = out.row(p);
                    for (a, b) in lens.iter().zip(stored) {
                        max_diff = max_diff.max((a - b).abs());
                    }
                    if argmax(&lens) != argmax(stored) {
                        mismatches += 1;
                    }
                }
                check.closure_max_abs_diff = Some(max_diff);
                check.closure_argmax_mismatches = Some(mismatches);
                check.within_tolerance = max_diff <= tolerance;
            }
        }
    }
    Ok(check)
}

/// Export the trace of every region under every plan in the layout the dump
/// source reads. Returns the directories written.
pub fn write_dumps(exp: &Experiment, root: &Path, dtype: crate::interchange::DType) -> Result<Vec<PathBuf>> {
    let plans = exp.config.plans()?;
    let mut written = Vec::new();
    for plan in plans {
        exp.check_plan(plan)?;
        let mut seen = BTreeSet::new();
        for region in &exp.regions {
            let mut dir = root.join(plan.slug()).join(&region.image_id);
            if plan != PlanDescriptor::NoAk {
                dir = dir.join(&region.object).join(&region.part);
            }
            if !seen.insert(dir.clone()) {
                continue;
            }
            let trace = exp.trace(region, plan)?;
            let meta = serde_json::json!({
                "plan": plan.to_string(),
                "image_id": region.image_id,
                "object": region.object,
                "part": region.part,
                "target_patches": region.patches,
            });
            trace.save(&dir, dtype, meta)?;
            written.push(dir);
        }
    }
    Ok(written)
}
