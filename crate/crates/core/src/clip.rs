// SPDX-License-Identifier: MIT OR Apache-2.0

//! Dual-encoder probe: a CLS embedding focused on one region, ranked against
//! precomputed text-candidate embeddings by cosine similarity.
//!
//! Candidate sets are `candidates` bundles with one `embeddings` tensor
//! (`labels × dim`) and the label list, template and representation in the
//! manifest config.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{ProbeError, Result};
use crate::interchange::{Bundle, BundleKind, DType, Tensor};
use crate::knockout::{plan_for_region, DecoderScope, PlanDescriptor};
use crate::lens::{identifiability, rank_of_entry};
use crate::nn::{dot, Matrix};
use crate::vlm::Vlm;

const UNIT_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CandidateMeta {
    labels: Vec<String>,
    template: String,
    representation: String,
}

/// Ordered text candidates with unit-norm embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub labels: Vec<String>,
    pub embeddings: Matrix,
    /// Text template, e.g. `A photo of {token}`.
    pub template: String,
    /// Which text-encoder position the embedding was read from.
    pub representation: String,
}

impl CandidateSet {
    pub fn new(
        labels: Vec<String>,
        embeddings: Matrix,
        template: impl Into<String>,
        representation: impl Into<String>,
    ) -> Result<Self> {
        if labels.is_empty() {
            return Err(ProbeError::Empty("candidate set".into()));
        }
        if labels.len() != embeddings.rows() {
            return Err(ProbeError::Shape(format!(
                "{} labels but {} embeddings",
                labels.len(),
                embeddings.rows()
            )));
        }
        let unique: BTreeSet<&String> = labels.iter().collect();
        if unique.len() != labels.len() {
            return Err(ProbeError::Table("candidate labels are not unique".into()));
        }
        for (i, label) in labels.iter().enumerate() {
            let norm = dot(embeddings.row(i), embeddings.row(i)).sqrt();
            if (norm - 1.0).abs() > UNIT_TOLERANCE {
                return Err(ProbeError::Range(format!("embedding of `{label}` has norm {norm}")));
            }
        }
        Ok(Self {
            labels,
            embeddings,
            template: template.into(),
            representation: representation.into(),
        })
    }

    /// Normalize rows before building the set.
    pub fn from_raw(
        labels: Vec<String>,
        mut embeddings: Matrix,
        template: impl Into<String>,
        representation: impl Into<String>,
    ) -> Result<Self> {
        for r in 0..embeddings.rows() {
            let row = embeddings.row_mut(r);
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(ProbeError::Range(format!("candidate {r} has zero norm")));
            }
            row.iter_mut().for_each(|x| *x /= norm);
        }
        Self::new(labels, embeddings, template, representation)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn index(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    pub fn save(&self, dir: &Path, dtype: DType) -> Result<()> {
        let mut b = Bundle::new(BundleKind::Candidates);
        b.config = serde_json::to_value(CandidateMeta {
            labels: self.labels.clone(),
            template: self.template.clone(),
            representation: self.representation.clone(),
        })
        .map_err(|e| ProbeError::json("candidate set", e))?;
        b.insert("embeddings", "text_embeddings", Tensor::from_matrix(&self.embeddings));
        b.save(dir, dtype)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let b = Bundle::load_kind(dir, BundleKind::Candidates)?;
        let meta: CandidateMeta =
            serde_json::from_value(b.config.clone()).map_err(|e| ProbeError::json(dir.display().to_string(), e))?;
        let emb = b.require("embeddings")?.as_matrix("embeddings")?;
        Self::new(meta.labels, emb, meta.template, meta.representation)
    }
}

/// CLS embedding with full attention for the first `focus_layer` encoder
/// layers and attention confined to `{CLS} ∪ target` afterwards.
pub fn focused_image_embedding(
    vlm: &Vlm,
    patch_features: &Matrix,
    target: &[usize],
    focus_layer: usize,
) -> Result<Vec<f64>> {
    let plan = plan_for_region(
        &vlm.config,
        PlanDescriptor::ClsFocus(focus_layer),
        target,
        DecoderScope::default(),
    )?;
    let states = vlm.encode_image(patch_features, &plan.encoder)?;
    vlm.embed_cls(states.cls(states.layers.len() - 1))
}

/// Unfocused CLS embedding.
pub fn image_embedding(vlm: &Vlm, patch_features: &Matrix) -> Result<Vec<f64>> {
    let states = vlm.encode_image(patch_features, &Default::default())?;
    vlm.embed_cls(states.cls(states.layers.len() - 1))
}

/// Cosine similarity of `image_emb` to every candidate.
pub fn similarities(image_emb: &[f64], candidates: &CandidateSet) -> Result<Vec<f64>> {
    if image_emb.len() != candidates.dim() {
        return Err(ProbeError::Shape(format!(
            "image embedding has {} dims, candidates {}",
            image_emb.len(),
            candidates.dim()
        )));
    }
    let norm = dot(image_emb, image_emb).sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(ProbeError::Range(
            "image embedding norm must be positive and finite".into(),
        ));
    }
    Ok((0..candidates.len())
        .map(|i| {
            let row = candidates.embeddings.row(i);
            dot(image_emb, row) / (norm * dot(row, row).sqrt())
        })
        .collect())
}

/// 1-based rank of `label` by descending cosine similarity; ties go to the
/// earlier candidate.
pub fn similarity_rank(image_emb: &[f64], candidates: &CandidateSet, label: &str) -> Result<usize> {
    let idx = candidates
        .index(label)
        .ok_or_else(|| ProbeError::UnknownLabel(label.to_string()))?;
    Ok(rank_of_entry(&similarities(image_emb, candidates)?, idx))
}

/// Rank score normalized by the candidate count.
pub fn clip_identifiability(rank: usize, candidate_count: usize) -> Result<f64> {
    identifiability(rank, candidate_count)
}

/// One point of a focus-layer sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocusPoint {
    pub focus_layer: usize,
    pub rank: usize,
    pub score: f64,
}

/// Rank and score of `label` for every focus layer in `layers`.
pub fn focus_sweep(
    vlm: &Vlm,
    patch_features: &Matrix,
    target: &[usize],
    label: &str,
    candidates: &CandidateSet,
    layers: &[usize],
) -> Result<Vec<FocusPoint>> {
    layers
        .iter()
        .map(|&l| {
            let emb = focused_image_embedding(vlm, patch_features, target, l)?;
            let rank = similarity_rank(&emb, candidates, label)?;
            Ok(FocusPoint {
                focus_layer: l,
                rank,
                score: clip_identifiability(rank, candidates.len())?,
            })
        })
        .collect()
}

/// Focus layer at 22/24 of the encoder depth, rounded.
pub fn scaled_focus_layer(encoder_layers: usize) -> usize {
    ((22 * encoder_layers) as f64 / 24.0).round() as usize
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knockout::{cls_focus_mask, encoder_positions};
    use crate::vlm::{LayerMasks, VlmConfig};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn unit_rows(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Matrix {
        let m = Matrix::from_vec(n, d, (0..n * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let labels = (0..n).map(|i| format!("c{i}")).collect();
        CandidateSet::from_raw(labels, m, "A photo of {token}", "eot")
            .unwrap()
            .embeddings
    }

    fn set(m: Matrix) -> CandidateSet {
        let labels = (0..m.rows()).map(|i| format!("c{i}")).collect();
        CandidateSet::new(labels, m, "A photo of {token}", "eot").unwrap()
    }

    fn toy() -> (Vlm, Matrix) {
        let mut config = VlmConfig::toy();
        config.encoder_layers = 2;
        let vlm = Vlm::random(config.clone(), 5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = config.num_patches() * config.patch_dim;
        let f = Matrix::from_vec(
            config.num_patches(),
            config.patch_dim,
            (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        (vlm, f)
    }

    #[test]
    fn candidate_validation() {
        let m = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 2.0]]).unwrap();
        assert!(CandidateSet::new(vec!["a".into(), "b".into()], m.clone(), "", "").is_err());
        let m = Matrix::identity(2);
        assert!(CandidateSet::new(vec!["a".into(), "a".into()], m.clone(), "", "").is_err());
        assert!(CandidateSet::new(vec!["a".into()], m, "", "").is_err());
    }

    #[test]
    fn candidate_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = set(unit_rows(&mut rng, 5, 4));
        let dir = tempfile::tempdir().unwrap();
        c.save(dir.path(), DType::F64).unwrap();
        assert_eq!(CandidateSet::load(dir.path()).unwrap(), c);
        let dir32 = tempfile::tempdir().unwrap();
        c.save(dir32.path(), DType::F32).unwrap();
        assert!(CandidateSet::load(dir32.path()).is_ok());
    }

    #[test]
    fn rank_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c = set(unit_rows(&mut rng, 6, 4));
        assert_eq!(similarity_rank(c.embeddings.row(3), &c, "c3").unwrap(), 1);
        let ortho = set(Matrix::identity(4));
        assert_eq!(similarity_rank(&[0.0, 0.3, 0.0, 0.0], &ortho, "c1").unwrap(), 1);
        assert!(matches!(
            similarity_rank(&[1.0; 4], &ortho, "zz"),
            Err(ProbeError::UnknownLabel(_))
        ));
    }

    #[test]
    fn rank_matches_sort() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = set(unit_rows(&mut rng, 50, 8));
        let img: Vec<f64> = (0..8).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sims = similarities(&img, &c).unwrap();
        let mut order: Vec<usize> = (0..50).collect();
        order.sort_by(|&a, &b| sims[b].partial_cmp(&sims[a]).unwrap());
        for (pos, &i) in order.iter().enumerate() {
            assert_eq!(similarity_rank(&img, &c, &format!("c{i}")).unwrap(), pos + 1);
        }
    }

    #[test]
    fn clip_scores() {
        assert_eq!(clip_identifiability(1, 194).unwrap(), 1.0);
        assert_eq!(clip_identifiability(194, 194).unwrap(), 0.0);
        // 1 - ln 3 / ln 194 (mpmath, 50 digits).
        let want = 0.791_449_910_856_473_650_182_321_429_185_554_421_046_018_378_263_38;
        assert!((clip_identifiability(3, 194).unwrap() - want).abs() < 1e-15);
        assert!(clip_identifiability(0, 194).is_err());
        assert!(clip_identifiability(195, 194).is_err());
    }

    #[test]
    fn focus_boundaries() {
        let (vlm, f) = toy();
        let plain = image_embedding(&vlm, &f).unwrap();
        assert_eq!(focused_image_embedding(&vlm, &f, &[1], 2).unwrap(), plain);
        for l in 0..=2 {
            assert_eq!(focused_image_embedding(&vlm, &f, &[0, 1, 2, 3], l).unwrap(), plain);
        }
        assert!(focused_image_embedding(&vlm, &f, &[], 1).is_err());
        assert!(focused_image_embedding(&vlm, &f, &[0], 3).is_err());
    }

    #[test]
    fn focus_matches_staged_forward() {
        let (vlm, f) = toy();
        let got = focused_image_embedding(&vlm, &f, &[0], 1).unwrap();
        // Stage 1: layer 0 unmasked. Stage 2: layer 1 under the enumerated mask.
        let first = vlm.encode_image(&f, &LayerMasks::new()).unwrap();
        let mask = cls_focus_mask(5, &encoder_positions(&[0])).unwrap();
        for q in 0..5 {
            for k in 0..5 {
                let inside = |p: usize| p == 0 || p == 1;
                assert_eq!(mask.allowed(q, k), (inside(q) && inside(k)) || q == k);
            }
        }
        let block = &vlm.weights.encoder.blocks[1];
        let out = block
            .forward(&first.layers[1], vlm.config.heads_enc, Some(&mask))
            .unwrap();
        assert_eq!(got, vlm.embed_cls(out.row(0)).unwrap());
    }

    #[test]
    fn sweep_is_repeatable() {
        let (vlm, f) = toy();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = set(unit_rows(&mut rng, 6, vlm.config.embed_dim));
        let a = focus_sweep(&vlm, &f, &[2], "c2", &c, &[0, 1, 2]).unwrap();
        let b = focus_sweep(&vlm, &f, &[2], "c2", &c, &[0, 1, 2]).unwrap();
        assert_eq!(a, b);
        assert_eq!(scaled_focus_layer(24), 22);
    }

    proptest! {
        #[test]
        fn rank_ignores_positive_scaling(seed in 0u64..200, s in 0.01f64..100.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let c = set(unit_rows(&mut rng, 12, 5));
            let img: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
            let scaled: Vec<f64> = img.iter().map(|x| x * s).collect();
            for i in 0..12 {
                let l = format!("c{i}");
                prop_assert_eq!(similarity_rank(&img, &c, &l).unwrap(), similarity_rank(&scaled, &c, &l).unwrap());
            }
        }
    }
}
