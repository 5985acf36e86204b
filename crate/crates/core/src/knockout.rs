// SPDX-License-Identifier: MIT OR Apache-2.0

//! Attention-knockout masks and per-layer intervention plans.
//!
//! Encoder positions count the CLS token: position 0 is CLS, patch `p` sits at
//! position `p + 1`. Decoder builders take patch indices and map them through
//! a [`SequenceLayout`].

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{ProbeError, Result};
use crate::nn::AllowMask;
use crate::vlm::{LayerMasks, SequenceLayout, VlmConfig};

/// Which intervention a plan realizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlanDescriptor {
    /// Unaltered attention.
    NoAk,
    /// Decoder knockout at every decoder layer.
    AkDecoder,
    /// Encoder knockout at every encoder layer.
    AkEncoder,
    /// Both encoder and decoder knockout.
    FullAk,
    /// Encoder knockout on the last `k` encoder layers only.
    EncLastK(usize),
    /// Full attention for the first `l` encoder layers, CLS focus afterwards.
    ClsFocus(usize),
}

impl fmt::Display for PlanDescriptor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PlanDescriptor::NoAk => write!(f, "NO_AK"),
            PlanDescriptor::AkDecoder => write!(f, "AK_DECODER"),
            PlanDescriptor::AkEncoder => write!(f, "AK_ENCODER"),
            PlanDescriptor::FullAk => write!(f, "FULL_AK"),
            PlanDescriptor::EncLastK(k) => write!(f, "ENC_LAST_K({k})"),
            PlanDescriptor::ClsFocus(l) => write!(f, "CLS_FOCUS({l})"),
        }
    }
}

impl PlanDescriptor {
    /// File-name friendly form, e.g. `enc_last_k_6`.
    pub fn slug(&self) -> String {
        match self {
            PlanDescriptor::EncLastK(k) => format!("enc_last_k_{k}"),
            PlanDescriptor::ClsFocus(l) => format!("cls_focus_{l}"),
            other => other.to_string().to_ascii_lowercase(),
        }
    }
}

impl FromStr for PlanDescriptor {
    type Err = ProbeError;

    /// Accepts `NO_AK`, `no_ak`, `ENC_LAST_K(6)`, `enc_last_k_6`, `cls_focus(22)` …
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().to_ascii_lowercase();
        let arg = |prefix: &str| -> Option<Result<usize>> {
            let rest = t.strip_prefix(prefix)?;
            let inner = rest
                .strip_prefix('(')
                .and_then(|r| r.strip_suffix(')'))
                .or_else(|| rest.strip_prefix('_'))?;
            Some(
                inner
                    .parse()
                    .map_err(|_| ProbeError::Config(format!("bad plan argument in `{s}`"))),
            )
        };
        match t.as_str() {
            "no_ak" => return Ok(Self::NoAk),
            "ak_decoder" => return Ok(Self::AkDecoder),
            "ak_encoder" => return Ok(Self::AkEncoder),
            "full_ak" => return Ok(Self::FullAk),
            _ => {}
        }
        if let Some(k) = arg("enc_last_k") {
            return Ok(Self::EncLastK(k?));
        }
        if let Some(l) = arg("cls_focus") {
            return Ok(Self::ClsFocus(l?));
        }
        Err(ProbeError::Config(format!("unknown plan `{s}`")))
    }
}

/// Reach of decoder knockout for a target query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderScope {
    /// Block past non-target image positions only; prompt keys stay visible.
    #[default]
    ImageOnly,
    /// Block every past non-target position, prompt included.
    AllPast,
}

/// Per-layer masks for both towers plus the descriptor that produced them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterventionPlan {
    pub descriptor: PlanDescriptor,
    pub encoder: LayerMasks,
    pub decoder: LayerMasks,
}

impl InterventionPlan {
    pub fn empty(descriptor: PlanDescriptor) -> Self {
        Self {
            descriptor,
            encoder: LayerMasks::new(),
            decoder: LayerMasks::new(),
        }
    }

    /// Union of the layer maps; entries of `other` win on collisions.
    pub fn merged(&self, other: &InterventionPlan, descriptor: PlanDescriptor) -> Self {
        let mut encoder = self.encoder.clone();
        encoder.extend(other.encoder.iter().map(|(k, v)| (*k, v.clone())));
        let mut decoder = self.decoder.clone();
        decoder.extend(other.decoder.iter().map(|(k, v)| (*k, v.clone())));
        Self {
            descriptor,
            encoder,
            decoder,
        }
    }

    /// Every mask keeps its diagonal and therefore has no empty row.
    pub fn validate(&self) -> Result<()> {
        self.encoder
            .values()
            .chain(self.decoder.values())
            .try_for_each(AllowMask::validate)
    }
}

fn target_set(n: usize, target: &[usize], what: &str) -> Result<BTreeSet<usize>> {
    let set: BTreeSet<usize> = target.iter().copied().collect();
    if let Some(&bad) = set.iter().find(|&&p| p >= n) {
        return Err(ProbeError::Range(format!(
            "{what} position {bad} outside sequence of {n}"
        )));
    }
    Ok(set)
}

/// Encoder positions of a set of patch indices.
pub fn encoder_positions(patches: &[usize]) -> Vec<usize> {
    patches.iter().map(|p| p + 1).collect()
}

/// Bidirectional knockout between target and non-target positions.
///
/// `allowed(q, k)` iff both are in the target, both are outside it, or
/// `q == k`. CLS (position 0) may not be a target and counts as non-target.
pub fn encoder_block_mask(n_positions: usize, target: &[usize]) -> Result<AllowMask> {
    let set = target_set(n_positions, target, "encoder target")?;
    if set.contains(&0) {
        return Err(ProbeError::Range("CLS position 0 cannot be a knockout target".into()));
    }
    Ok(AllowMask::from_fn(n_positions, |q, k| {
        set.contains(&q) == set.contains(&k)
    }))
}

/// Causal knockout from target image positions to their non-target past.
///
/// Rows of non-target queries are left all-true; the decoder applies
/// causality itself.
pub fn decoder_block_mask(layout: &SequenceLayout, target_patches: &[usize], scope: DecoderScope) -> Result<AllowMask> {
    let patches = target_set(layout.num_patches, target_patches, "decoder target patch")?;
    let positions: BTreeSet<usize> = patches.iter().map(|&p| layout.image_position(p)).collect();
    Ok(AllowMask::from_fn(layout.seq_len(), |q, k| {
        if !positions.contains(&q) || k >= q || positions.contains(&k) {
            return true;
        }
        match scope {
            DecoderScope::ImageOnly => !layout.is_image_position(k),
            DecoderScope::AllPast => false,
        }
    }))
}

/// Restrict attention to `S = {CLS} ∪ target`; rows outside `S` keep only
/// their diagonal.
pub fn cls_focus_mask(n_positions: usize, target: &[usize]) -> Result<AllowMask> {
    if target.is_empty() {
        return Err(ProbeError::Empty("CLS focus target".into()));
    }
    let mut set = target_set(n_positions, target, "focus target")?;
    set.insert(0);
    Ok(AllowMask::from_fn(n_positions, |q, k| {
        set.contains(&q) && set.contains(&k)
    }))
}

/// Masks a plan draws from. Only the ones the descriptor needs must be set.
#[derive(Debug, Clone, Default)]
pub struct PlanMasks {
    pub encoder_block: Option<AllowMask>,
    pub decoder_block: Option<AllowMask>,
    pub cls_focus: Option<AllowMask>,
}

/// Spread masks over layers according to `descriptor`.
///
/// `EncLastK(k)` covers encoder layers `enc_layers - k ..= enc_layers - 1`.
/// `ClsFocus(l)` leaves the first `l` encoder layers untouched and focuses the
/// rest, so `l == enc_layers` is the unfocused model.
pub fn layer_plan(
    enc_layers: usize,
    dec_layers: usize,
    descriptor: PlanDescriptor,
    masks: &PlanMasks,
) -> Result<InterventionPlan> {
    let need = |m: &Option<AllowMask>, what: &str| -> Result<AllowMask> {
        m.clone()
            .ok_or_else(|| ProbeError::Plan(format!("{descriptor} needs a {what} mask")))
    };
    let spread =
        |mask: AllowMask, layers: std::ops::Range<usize>| -> LayerMasks { layers.map(|l| (l, mask.clone())).collect() };
    let mut plan = InterventionPlan::empty(descriptor);
    match descriptor {
        PlanDescriptor::NoAk => {}
        PlanDescriptor::AkDecoder => {
            plan.decoder = spread(need(&masks.decoder_block, "decoder")?, 0..dec_layers);
        }
        PlanDescriptor::AkEncoder => {
            plan.encoder = spread(need(&masks.encoder_block, "encoder")?, 0..enc_layers);
        }
        PlanDescriptor::FullAk => {
            plan.encoder = spread(need(&masks.encoder_block, "encoder")?, 0..enc_layers);
            plan.decoder = spread(need(&masks.decoder_block, "decoder")?, 0..dec_layers);
        }
        PlanDescriptor::EncLastK(k) => {
            if k > enc_layers {
                return Err(ProbeError::Plan(format!(
                    "ENC_LAST_K({k}) exceeds {enc_layers} encoder layers"
                )));
            }
            if k > 0 {
                plan.encoder = spread(need(&masks.encoder_block, "encoder")?, enc_layers - k..enc_layers);
            }
        }
        PlanDescriptor::ClsFocus(l) => {
            if l > enc_layers {
                return Err(ProbeError::Plan(format!(
                    "CLS_FOCUS({l}) exceeds {enc_layers} encoder layers"
                )));
            }
            if l < enc_layers {
                plan.encoder = spread(need(&masks.cls_focus, "CLS focus")?, l..enc_layers);
            }
        }
    }
    plan.validate()?;
    Ok(plan)
}

/// Build the plan for one target region of a model.
pub fn plan_for_region(
    config: &VlmConfig,
    descriptor: PlanDescriptor,
    target_patches: &[usize],
    scope: DecoderScope,
) -> Result<InterventionPlan> {
    let n_enc = config.encoder_positions();
    let enc_pos = encoder_positions(target_patches);
    let masks = PlanMasks {
        encoder_block: match descriptor {
            PlanDescriptor::AkEncoder | PlanDescriptor::FullAk | PlanDescriptor::EncLastK(_) => {
                Some(encoder_block_mask(n_enc, &enc_pos)?)
            }
            _ => None,
        },
        decoder_block: match descriptor {
            PlanDescriptor::AkDecoder | PlanDescriptor::FullAk => {
                Some(decoder_block_mask(&config.layout(), target_patches, scope)?)
            }
            _ => None,
        },
        cls_focus: match descriptor {
            PlanDescriptor::ClsFocus(l) if l < config.encoder_layers => Some(cls_focus_mask(n_enc, &enc_pos)?),
            _ => None,
        },
    };
    layer_plan(config.encoder_layers, config.decoder_layers, descriptor, &masks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encoder_mask_cases() {
        assert!(encoder_block_mask(5, &[]).unwrap().is_all_true());
        let all = encoder_block_mask(5, &[1, 2, 3, 4]).unwrap();
        for q in 0..5 {
            for k in 0..5 {
                let cls_edge = (q == 0) != (k == 0);
                assert_eq!(all.allowed(q, k), !cls_edge, "({q},{k})");
            }
        }
        let m = encoder_block_mask(5, &[1, 2]).unwrap();
        let truth = [
            [1, 0, 0, 1, 1],
            [0, 1, 1, 0, 0],
            [0, 1, 1, 0, 0],
            [1, 0, 0, 1, 1],
            [1, 0, 0, 1, 1],
        ];
        for q in 0..5 {
            for k in 0..5 {
                assert_eq!(m.allowed(q, k), truth[q][k] == 1);
            }
        }
        assert!(encoder_block_mask(5, &[0, 1]).is_err());
        assert!(encoder_block_mask(5, &[5]).is_err());
    }

    #[test]
    fn decoder_mask_cases() {
        let layout = SequenceLayout {
            prompt_len: 3,
            num_patches: 4,
        };
        assert!(decoder_block_mask(&layout, &[], DecoderScope::AllPast)
            .unwrap()
            .is_all_true());
        // First image position has no image past, so its row is untouched.
        assert!(decoder_block_mask(&layout, &[0], DecoderScope::ImageOnly)
            .unwrap()
            .is_all_true());

        // Patches 1 and 3 live at positions 4 and 6.
        let m = decoder_block_mask(&layout, &[1, 3], DecoderScope::AllPast).unwrap();
        let truth = [
            [1, 1, 1, 1, 1, 1, 1],
            [1, 1, 1, 1, 1, 1, 1],
            [1, 1, 1, 1, 1, 1, 1],
            [1, 1, 1, 1, 1, 1, 1],
            [0, 0, 0, 0, 1, 1, 1],
            [1, 1, 1, 1, 1, 1, 1],
            [0, 0, 0, 0, 1, 0, 1],
        ];
        for q in 0..7 {
            for k in 0..7 {
                assert_eq!(m.allowed(q, k), truth[q][k] == 1, "({q},{k})");
            }
        }
        let img = decoder_block_mask(&layout, &[1, 3], DecoderScope::ImageOnly).unwrap();
        assert!(img.allowed(6, 0) && img.allowed(6, 2) && !img.allowed(6, 3) && img.allowed(6, 4));
    }

    #[test]
    fn cls_focus_cases() {
        assert!(cls_focus_mask(5, &[1, 2, 3, 4]).unwrap().is_all_true());
        let m = cls_focus_mask(5, &[2]).unwrap();
        for q in 0..5 {
            for k in 0..5 {
                let in_s = |p: usize| p == 0 || p == 2;
                let want = if in_s(q) { in_s(k) } else { q == k };
                assert_eq!(m.allowed(q, k), want);
            }
        }
        assert!(matches!(cls_focus_mask(5, &[]), Err(ProbeError::Empty(_))));
    }

    #[test]
    fn plan_layers() {
        let masks = PlanMasks {
            encoder_block: Some(encoder_block_mask(5, &[1]).unwrap()),
            decoder_block: Some(AllowMask::all(7)),
            cls_focus: None,
        };
        let full = layer_plan(24, 4, PlanDescriptor::AkEncoder, &masks).unwrap();
        let last = layer_plan(24, 4, PlanDescriptor::EncLastK(24), &masks).unwrap();
        assert_eq!(full.encoder, last.encoder);
        let none = layer_plan(24, 4, PlanDescriptor::EncLastK(0), &masks).unwrap();
        assert!(none.encoder.is_empty() && none.decoder.is_empty());
        let six = layer_plan(24, 4, PlanDescriptor::EncLastK(6), &masks).unwrap();
        assert_eq!(
            six.encoder.keys().copied().collect::<Vec<_>>(),
            (18..24).collect::<Vec<_>>()
        );
        assert!(six.decoder.is_empty());
        assert!(matches!(
            layer_plan(24, 4, PlanDescriptor::EncLastK(25), &masks),
            Err(ProbeError::Plan(_))
        ));
        let both = layer_plan(24, 4, PlanDescriptor::FullAk, &masks).unwrap();
        assert_eq!(both.encoder.len(), 24);
        assert_eq!(both.decoder.len(), 4);
        assert!(layer_plan(24, 4, PlanDescriptor::ClsFocus(22), &masks).is_err());
    }

    #[test]
    fn descriptor_text_forms() {
        for d in [
            PlanDescriptor::NoAk,
            PlanDescriptor::AkDecoder,
            PlanDescriptor::AkEncoder,
            PlanDescriptor::FullAk,
            PlanDescriptor::EncLastK(6),
            PlanDescriptor::ClsFocus(22),
        ] {
            assert_eq!(d.to_string().parse::<PlanDescriptor>().unwrap(), d);
            assert_eq!(d.slug().parse::<PlanDescriptor>().unwrap(), d);
            let json = serde_json::to_string(&d).unwrap();
            assert_eq!(serde_json::from_str::<PlanDescriptor>(&json).unwrap(), d);
        }
        assert!("bogus".parse::<PlanDescriptor>().is_err());
    }

    #[test]
    fn plan_serializes_round_trip() {
        let cfg = VlmConfig::toy();
        let plan = plan_for_region(&cfg, PlanDescriptor::FullAk, &[1, 2], DecoderScope::ImageOnly).unwrap();
        let json = serde_json::to_string(&plan).unwrap();
        let back: InterventionPlan = serde_json::from_str(&json).unwrap();
        assert_eq!(back, plan);
    }
}
