// SPDX-License-Identifier: MIT OR Apache-2.0

//! Logit-lens identifiability measurement.
//!
//! A patch state `h` is read as `softmax(U · LayerNorm(h))`. Alias token
//! probabilities are summed into one entry per label, the label's 1-based rank
//! among the merged entries is taken, and the rank becomes a score
//! `1 − ln(rank) / ln(|V|)`, with `|V|` the original vocabulary size. A region's
//! score is the maximum over its patches, and dataset summaries are unweighted
//! means over regions.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ProbeError, Result};
use crate::nn::softmax;
use crate::par;
use crate::vlm::{DecoderTrace, LensAssets};

/// Probability vector over the decoder vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct VocabDistribution {
    probs: Vec<f64>,
}

impl VocabDistribution {
    /// Wrap probabilities, checking non-negativity and unit mass within 1e-9.
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(ProbeError::Empty("distribution".into()));
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(ProbeError::Range("probabilities must be finite and >= 0".into()));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(ProbeError::Range(format!("probabilities sum to {total}")));
        }
        Ok(Self { probs })
    }

    /// Softmax of raw logits.
    pub fn from_logits(logits: &[f64]) -> Result<Self> {
        Ok(Self {
            probs: softmax(logits)?,
        })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

/// `softmax(U · LayerNorm(h))`.
pub fn project_to_vocab(h: &[f64], lens: &LensAssets) -> Result<VocabDistribution> {
    VocabDistribution::from_logits(&lens.logits(h)?)
}

/// Label → alias token ids. Labels are kept in sorted order; alias sets are
/// non-empty and pairwise disjoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AliasTable {
    vocab_size: usize,
    labels: Vec<String>,
    aliases: Vec<Vec<usize>>,
    /// Token ids not claimed by any label, ascending.
    untouched: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct AliasFile {
    vocab_size: usize,
    labels: BTreeMap<String, Vec<usize>>,
}

impl AliasTable {
    pub fn new(vocab_size: usize, labels: BTreeMap<String, Vec<usize>>) -> Result<Self> {
        if vocab_size < 2 {
            return Err(ProbeError::Table("vocabulary must have at least 2 tokens".into()));
        }
        let mut owner: Vec<Option<usize>> = vec![None; vocab_size];
        let mut names = Vec::with_capacity(labels.len());
        let mut aliases = Vec::with_capacity(labels.len());
        for (i, (label, ids)) in labels.into_iter().enumerate() {
            let ids: BTreeSet<usize> = ids.into_iter().collect();
            if ids.is_empty() {
                return Err(ProbeError::Table(format!("label `{label}` has no aliases")));
            }
            for &id in &ids {
                if id >= vocab_size {
                    return Err(ProbeError::Table(format!(
                        "alias {id} of `{label}` outside vocabulary of {vocab_size}"
                    )));
                }
                if let Some(prev) = owner[id] {
                    return Err(ProbeError::Table(format!(
                        "token {id} claimed by both `{}` and `{label}`",
                        names[prev]
                    )));
                }
                owner[id] = Some(i);
            }
            names.push(label);
            aliases.push(ids.into_iter().collect());
        }
        let untouched = (0..vocab_size).filter(|&t| owner[t].is_none()).collect();
        Ok(Self {
            vocab_size,
            labels: names,
            aliases,
            untouched,
        })
    }

    /// Table with no labels: merging is the identity.
    pub fn empty(vocab_size: usize) -> Result<Self> {
        Self::new(vocab_size, BTreeMap::new())
    }

    /// Read `{"vocab_size": N, "labels": {"leg": [ids…], …}}`.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ProbeError::io(path, e))?;
        let file: AliasFile =
            serde_json::from_str(&text).map_err(|e| ProbeError::json(path.display().to_string(), e))?;
        Self::new(file.vocab_size, file.labels)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = AliasFile {
            vocab_size: self.vocab_size,
            labels: self.labels.iter().cloned().zip(self.aliases.iter().cloned()).collect(),
        };
        let text = serde_json::to_string_pretty(&file).map_err(|e| ProbeError::json("alias table", e))?;
        std::fs::write(path, text + "\n").map_err(|e| ProbeError::io(path, e))
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn aliases(&self, label: &str) -> Option<&[usize]> {
        self.label_index(label).map(|i| self.aliases[i].as_slice())
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.labels.binary_search_by(|l| l.as_str().cmp(label)).ok()
    }

    /// Entries after merging: one per label plus one per untouched token.
    pub fn merged_len(&self) -> usize {
        self.labels.len() + self.untouched.len()
    }
}

/// Key of one merged entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MergedKey<'a> {
    Label(&'a str),
    Token(usize),
}

/// Distribution after alias merging. Entry order: labels in table order, then
/// untouched tokens by id. That order is also the tie-break order for ranks.
#[derive(Debug, Clone)]
pub struct MergedDistribution<'a> {
    table: &'a AliasTable,
    masses: Vec<f64>,
}

impl<'a> MergedDistribution<'a> {
    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn key(&self, i: usize) -> MergedKey<'a> {
        let n = self.table.labels.len();
        if i < n {
            MergedKey::Label(&self.table.labels[i])
        } else {
            MergedKey::Token(self.table.untouched[i - n])
        }
    }

    pub fn label_mass(&self, label: &str) -> Option<f64> {
        self.table.label_index(label).map(|i| self.masses[i])
    }

    pub fn table(&self) -> &'a AliasTable {
        self.table
    }
}

/// Sum alias probabilities per label; untouched tokens pass through.
pub fn merge_aliases<'a>(dist: &VocabDistribution, table: &'a AliasTable) -> Result<MergedDistribution<'a>> {
    merge_probs(dist.probs(), table)
}

fn merge_probs<'a>(probs: &[f64], table: &'a AliasTable) -> Result<MergedDistribution<'a>> {
    if probs.len() != table.vocab_size {
        return Err(ProbeError::Shape(format!(
            "distribution over {} tokens, alias table expects {}",
            probs.len(),
            table.vocab_size
        )));
    }
    let mut masses = Vec::with_capacity(table.merged_len());
    masses.extend(
        table
            .aliases
            .iter()
            .map(|ids| ids.iter().map(|&t| probs[t]).sum::<f64>()),
    );
    masses.extend(table.untouched.iter().map(|&t| probs[t]));
    Ok(MergedDistribution { table, masses })
}

/// 1-based rank of entry `idx`: one plus the entries with strictly greater
/// mass plus the equal-mass entries ordered before it.
pub fn rank_of_entry(masses: &[f64], idx: usize) -> usize {
    let m = masses[idx];
    let greater = masses.iter().filter(|&&x| x > m).count();
    let earlier_ties = masses[..idx].iter().filter(|&&x| x == m).count();
    1 + greater + earlier_ties
}

/// 1-based rank of `label` in a merged distribution.
pub fn label_rank(merged: &MergedDistribution<'_>, label: &str) -> Result<usize> {
    let idx = merged
        .table
        .label_index(label)
        .ok_or_else(|| ProbeError::UnknownLabel(label.to_string()))?;
    Ok(rank_of_entry(&merged.masses, idx))
}

/// `1 − ln(rank) / ln(vocab_size)` for a 1-based rank.
pub fn identifiability(rank: usize, vocab_size: usize) -> Result<f64> {
    if vocab_size < 2 {
        return Err(ProbeError::Range(format!("vocabulary size {vocab_size} < 2")));
    }
    if rank == 0 || rank > vocab_size {
        return Err(ProbeError::Range(format!("rank {rank} outside 1..={vocab_size}")));
    }
    Ok(1.0 - (rank as f64).ln() / (vocab_size as f64).ln())
}

/// Max-pool patch scores of one region.
pub fn region_score(patch_scores: &[f64]) -> Result<f64> {
    patch_scores
        .iter()
        .copied()
        .reduce(f64::max)
        .ok_or_else(|| ProbeError::Empty("region has no patch scores".into()))
}

/// Score of a region at every captured layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerCurve {
    pub label: String,
    /// Best (minimum) rank over the region's patches, per layer.
    pub ranks: Vec<usize>,
    /// Max-pooled score per layer.
    pub scores: Vec<f64>,
}

impl LayerCurve {
    pub fn final_score(&self) -> f64 {
        *self.scores.last().expect("curves have at least one layer")
    }

    pub fn max_score(&self) -> f64 {
        self.scores.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn summary(&self, mode: SummaryMode) -> f64 {
        match mode {
            SummaryMode::FinalLayer => self.final_score(),
            SummaryMode::MaxLayer => self.max_score(),
        }
    }
}

/// Which layer the one-number region summary is taken from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SummaryMode {
    #[default]
    FinalLayer,
    MaxLayer,
}

/// Layer curve of one region for one label.
pub fn layer_curve(trace: &DecoderTrace, region: &[usize], label: &str, table: &AliasTable) -> Result<LayerCurve> {
    let mut curves = layer_curves(trace, region, &[label], table)?;
    Ok(curves.remove(0))
}

/// Layer curves for several labels sharing one projection per (layer, patch).
pub fn layer_curves(
    trace: &DecoderTrace,
    region: &[usize],
    labels: &[&str],
    table: &AliasTable,
) -> Result<Vec<LayerCurve>> {
    if region.is_empty() {
        return Err(ProbeError::Empty("region has no patches".into()));
    }
    if table.vocab_size != trace.vocab_size() {
        return Err(ProbeError::Shape(format!(
            "alias table vocabulary {} differs from trace vocabulary {}",
            table.vocab_size,
            trace.vocab_size()
        )));
    }
    let label_idx = labels
        .iter()
        .map(|l| {
            table
                .label_index(l)
                .ok_or_else(|| ProbeError::UnknownLabel(l.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(&p) = region.iter().find(|&&p| p >= trace.layout.num_patches) {
        return Err(ProbeError::Range(format!("patch {p} not in trace layout")));
    }
    let layers = trace.hidden.len();
    let vocab = trace.vocab_size();
    // ranks[layer * region.len() + i][label]
    let ranks: Vec<Result<Vec<usize>>> = par::map_range(layers * region.len(), |job| {
        let (layer, i) = (job / region.len(), job % region.len());
        let dist = project_to_vocab(trace.state(layer, region[i])?, &trace.lens)?;
        let merged = merge_probs(dist.probs(), table)?;
        Ok(label_idx.iter().map(|&li| rank_of_entry(&merged.masses, li)).collect())
    });
    let ranks = ranks.into_iter().collect::<Result<Vec<_>>>()?;
    labels
        .iter()
        .enumerate()
        .map(|(j, label)| {
            let mut best = Vec::with_capacity(layers);
            let mut scores = Vec::with_capacity(layers);
            for layer in 0..layers {
                let patch_ranks = &ranks[layer * region.len()..(layer + 1) * region.len()];
                let patch_scores = patch_ranks
                    .iter()
                    .map(|r| identifiability(r[j], vocab))
                    .collect::<Result<Vec<_>>>()?;
                best.push(patch_ranks.iter().map(|r| r[j]).min().expect("non-empty region"));
                scores.push(region_score(&patch_scores)?);
            }
            Ok(LayerCurve {
                label: label.to_string(),
                ranks: best,
                scores,
            })
        })
        .collect()
}

/// Aggregation level recorded in a score's lineage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Level {
    Patch,
    Region,
    Dataset,
}

/// Layer a score refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerSel {
    /// Hidden state after this many decoder blocks.
    At(usize),
    /// Region summary taken from the last layer.
    Final,
    /// Region summary taken as the maximum over layers.
    Max,
}

impl fmt::Display for LayerSel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerSel::At(l) => write!(f, "{l}"),
            LayerSel::Final => write!(f, "final"),
            LayerSel::Max => write!(f, "max"),
        }
    }
}

/// Where a score came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lineage {
    pub image_id: String,
    pub object: String,
    pub part: String,
    pub layer: LayerSel,
    pub level: Level,
}

/// An identifiability value in `[0, 1]` with its lineage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IdentifiabilityScore {
    pub value: f64,
    pub lineage: Lineage,
}

/// A mean and how many regions went into it.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupMean {
    pub score: f64,
    pub n_regions: usize,
}

/// Unweighted region means at three granularities, keyed by layer.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetSummary {
    pub parts: BTreeMap<(LayerSel, String, String), GroupMean>,
    pub objects: BTreeMap<(LayerSel, String), GroupMean>,
    pub overall: BTreeMap<LayerSel, GroupMean>,
}

/// Average region-level scores per (object, part), per object and overall,
/// separately for every layer present in the input.
pub fn dataset_aggregate(scores: &[IdentifiabilityScore]) -> Result<DatasetSummary> {
    if scores.is_empty() {
        return Err(ProbeError::Empty("no region scores to aggregate".into()));
    }
    #[derive(Default)]
    struct Acc {
        sum: f64,
        n: usize,
    }
    let mut parts: BTreeMap<(LayerSel, String, String), Acc> = BTreeMap::new();
    let mut objects: BTreeMap<(LayerSel, String), Acc> = BTreeMap::new();
    let mut overall: BTreeMap<LayerSel, Acc> = BTreeMap::new();
    for s in scores {
        let l = &s.lineage;
        if l.level != Level::Region {
            return Err(ProbeError::Range(format!(
                "expected region-level score, got {:?}",
                l.level
            )));
        }
        for acc in [
            parts.entry((l.layer, l.object.clone(), l.part.clone())).or_default(),
            objects.entry((l.layer, l.object.clone())).or_default(),
            overall.entry(l.layer).or_default(),
        ] {
            acc.sum += s.value;
            acc.n += 1;
        }
    }
    let mean = |a: Acc| GroupMean {
        score: a.sum / a.n as f64,
        n_regions: a.n,
    };
    Ok(DatasetSummary {
        parts: parts.into_iter().map(|(k, a)| (k, mean(a))).collect(),
        objects: objects.into_iter().map(|(k, a)| (k, mean(a))).collect(),
        overall: overall.into_iter().map(|(k, a)| (k, mean(a))).collect(),
    })
}
