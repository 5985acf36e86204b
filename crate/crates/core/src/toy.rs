// SPDX-License-Identifier: MIT OR Apache-2.0

//! Self-contained fixtures: seeded patch features, a complete toy experiment
//! workspace, and a handcrafted model whose part label is readable only
//! through cross-patch attention.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::clip::CandidateSet;
use crate::error::{ProbeError, Result};
use crate::interchange::{Bundle, BundleKind, DType, Tensor};
use crate::lens::AliasTable;
use crate::nn::{Activation, AttentionParams, Block, LayerNormParams, Linear, Matrix, Mlp};
use crate::regions::{write_annotations, PartAnnotation, PixelMask};
use crate::vlm::{
    Connector, ConnectorKind, DecoderWeights, EncoderWeights, GridGeometry, LensAssets, ModelWeights, Vlm, VlmConfig,
};

/// FNV-1a, used to derive per-image streams from one seed.
fn fnv1a(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3)
    })
}

/// Uniform(−1, 1) patch features for one image, reproducible from
/// `(seed, image_id)`.
pub fn image_features(config: &VlmConfig, seed: u64, image_id: &str) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a(image_id));
    let (r, c) = (config.num_patches(), config.patch_dim);
    Matrix::from_vec(r, c, (0..r * c).map(|_| rng.random_range(-1.0..1.0)).collect())
        .expect("uniform samples are finite")
}

/// Bundle name of an image's feature tensor.
pub fn feature_tensor_name(image_id: &str) -> String {
    format!("image.{image_id}")
}

/// Pieces of the context-dependent fixture.
#[derive(Debug, Clone)]
pub struct ContextFixture {
    pub vlm: Vlm,
    pub features: Matrix,
    pub table: AliasTable,
    /// The single target patch.
    pub target: usize,
    /// The patch carrying the disambiguating feature.
    pub neighbor: usize,
    pub part_label: String,
    pub decoy_label: String,
}

// Channel layout shared by encoder and decoder. Every feature comes as a ±
// pair so residual streams stay zero-mean and LayerNorm only rescales.
const A: usize = 0;
const D: usize = 2;
const DC: usize = 4;
const WIDTH: usize = 6;
const PART_TOKEN: usize = 2;
const DECOY_TOKEN: usize = 1;
const VOCAB: usize = 8;

fn zero_block(d: usize, ff: usize, eps: f64) -> Block {
    Block {
        ln1: LayerNormParams::unit(d, eps),
        attn: AttentionParams {
            wq: Matrix::zeros(d, d),
            wk: Matrix::zeros(d, d),
            wv: Matrix::zeros(d, d),
            wo: Matrix::zeros(d, d),
        },
        ln2: LayerNormParams::unit(d, eps),
        mlp: Mlp {
            up: Linear::zeros(d, ff),
            down: Linear::zeros(ff, d),
            activation: Activation::Gelu,
        },
    }
}

/// Uniform attention (zero queries and keys) whose value path copies the
/// D pair into the DC pair.
fn copy_block(d: usize, ff: usize, eps: f64) -> Block {
    let mut b = zero_block(d, ff, eps);
    b.attn.wv.set(D, DC, 1.0);
    b.attn.wv.set(D + 1, DC + 1, 1.0);
    b.attn.wo = Matrix::identity(d);
    b
}

/// Grid 1×2. Patch 1 (target) holds only the ambiguous feature A; patch 0
/// (neighbor, earlier in the decoder sequence) holds the disambiguator D.
/// One encoder layer and the first decoder layer copy D into DC through
/// uniform attention; remaining decoder layers are identities.
///
/// The unembedding gives the decoy token logit `A'` and the part token
/// `0.9·A' + DC'` (primes are normalized values). Without DC the decoy ranks
/// first; any DC above ~0.1 puts the part token first.
pub fn context_dependent_fixture(decoder_layers: usize) -> Result<ContextFixture> {
    if decoder_layers == 0 {
        return Err(ProbeError::Config(
            "context fixture needs at least one decoder layer".into(),
        ));
    }
    let eps = 1e-5;
    let ff = 4;
    let config = VlmConfig {
        patch_grid: GridGeometry::new(1, 2),
        patch_dim: WIDTH,
        encoder_layers: 1,
        decoder_layers,
        d_encoder: WIDTH,
        d_decoder: WIDTH,
        heads_enc: 1,
        heads_dec: 1,
        mlp_encoder: ff,
        mlp_decoder: ff,
        vocab_size: VOCAB,
        embed_dim: WIDTH,
        prompt_token_ids: vec![0],
        connector: ConnectorKind::Linear,
        activation: Activation::Gelu,
        layer_norm_eps: eps,
    };
    let mut unembedding = Matrix::zeros(VOCAB, WIDTH);
    unembedding.set(DECOY_TOKEN, A, 1.0);
    unembedding.set(DECOY_TOKEN, A + 1, -1.0);
    unembedding.set(PART_TOKEN, A, 0.9);
    unembedding.set(PART_TOKEN, A + 1, -0.9);
    unembedding.set(PART_TOKEN, DC, 1.0);
    unembedding.set(PART_TOKEN, DC + 1, -1.0);
    let mut dec_blocks = vec![copy_block(WIDTH, ff, eps)];
    dec_blocks.extend((1..decoder_layers).map(|_| zero_block(WIDTH, ff, eps)));
    let weights = ModelWeights {
        encoder: EncoderWeights {
            patch_embed: Linear {
                weight: Matrix::identity(WIDTH),
                bias: vec![0.0; WIDTH],
            },
            cls: vec![0.0; WIDTH],
            position: Matrix::zeros(3, WIDTH),
            blocks: vec![copy_block(WIDTH, ff, eps)],
            post_norm: LayerNormParams::unit(WIDTH, eps),
            projection: Matrix::identity(WIDTH),
        },
        connector: Connector::Linear(Linear {
            weight: Matrix::identity(WIDTH),
            bias: vec![0.0; WIDTH],
        }),
        decoder: DecoderWeights {
            token_embed: Matrix::zeros(VOCAB, WIDTH),
            blocks: dec_blocks,
            lens: Arc::new(LensAssets {
                final_norm: LayerNormParams::unit(WIDTH, eps),
                unembedding,
            }),
        },
    };
    let vlm = Vlm::new(config, weights)?;
    let mut features = Matrix::zeros(2, WIDTH);
    features.set(0, D, 1.0);
    features.set(0, D + 1, -1.0);
    features.set(1, A, 1.0);
    features.set(1, A + 1, -1.0);
    let table = AliasTable::new(
        VOCAB,
        [
            ("leg".to_string(), vec![PART_TOKEN]),
            ("decoy".to_string(), vec![DECOY_TOKEN]),
        ]
        .into(),
    )?;
    Ok(ContextFixture {
        vlm,
        features,
        table,
        target: 1,
        neighbor: 0,
        part_label: "leg".into(),
        decoy_label: "decoy".into(),
    })
}

struct ToyImage {
    id: &'static str,
    captions: &'static str,
    masks: Vec<(&'static str, u32, Option<&'static str>, PixelMask)>,
}

fn rect(r0: usize, r1: usize, c0: usize, c1: usize) -> PixelMask {
    PixelMask::from_fn(8, 8, |r, c| (r0..r1).contains(&r) && (c0..c1).contains(&c))
}

fn toy_images() -> Vec<ToyImage> {
    vec![
        ToyImage {
            id: "img00",
            captions: "An animal resting on a sofa.",
            masks: vec![
                ("cat", 0, None, rect(0, 8, 0, 6)),
                ("cat", 0, Some("ear"), rect(0, 2, 0, 3)),
                ("cat", 0, Some("tail"), rect(6, 8, 4, 6)),
                ("cat", 0, Some("paw"), rect(5, 8, 0, 2)),
            ],
        },
        ToyImage {
            id: "img01",
            captions: "Something furry in the grass.",
            masks: vec![
                ("dog", 0, None, rect(2, 8, 0, 8)),
                ("dog", 0, Some("ear"), rect(2, 4, 5, 8)),
                ("dog", 0, Some("paw"), rect(6, 8, 0, 3)),
            ],
        },
        ToyImage {
            id: "img02",
            captions: "Two cats.",
            masks: vec![
                ("cat", 0, Some("ear"), rect(0, 4, 0, 4)),
                ("cat", 1, Some("ear"), rect(4, 8, 4, 8)),
            ],
        },
        ToyImage {
            id: "img03",
            captions: "A small shape.",
            masks: vec![
                ("bird", 0, None, rect(0, 2, 0, 2)),
                ("bird", 0, Some("wing"), rect(0, 1, 0, 2)),
            ],
        },
        ToyImage {
            id: "img04",
            captions: "A bird perched on a branch.",
            masks: vec![
                ("bird", 0, None, rect(0, 8, 0, 8)),
                ("bird", 0, Some("wing"), rect(2, 6, 2, 6)),
            ],
        },
        ToyImage {
            id: "img05",
            captions: "A blurry silhouette at dusk.",
            masks: vec![
                ("bird", 0, None, rect(0, 6, 0, 8)),
                ("bird", 0, Some("wing"), rect(0, 4, 4, 8)),
                ("bird", 0, Some("tail"), rect(4, 6, 0, 2)),
            ],
        },
        ToyImage {
            id: "img06",
            captions: "A pet by the window.",
            masks: vec![
                ("cat", 0, Some("ear"), rect(0, 4, 4, 8)),
                ("cat", 0, Some("tail"), rect(4, 8, 0, 8)),
                ("cat", 0, Some("eye"), rect(1, 2, 5, 6)),
            ],
        },
    ]
}

/// Labels of the toy alias table, and their token ids in a 16-token vocab.
pub fn toy_alias_table() -> Result<AliasTable> {
    let labels: BTreeMap<String, Vec<usize>> = [
        ("ear", vec![4, 5]),
        ("tail", vec![6]),
        ("paw", vec![7, 8]),
        ("eye", vec![9]),
        ("wing", vec![10]),
        ("cat", vec![11, 12]),
        ("dog", vec![13]),
        ("bird", vec![14, 15]),
    ]
    .into_iter()
    .map(|(l, ids)| (l.to_string(), ids))
    .collect();
    AliasTable::new(16, labels)
}

/// Write a runnable toy experiment under `dir`: model bundle, patch
/// features, annotations, captions, aliases and `experiment.toml`. Returns
/// the config path.
pub fn write_toy_workspace(dir: &Path, seed: u64) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| ProbeError::io(dir, e))?;
    let config = VlmConfig::toy();
    let vlm = Vlm::random(config.clone(), seed)?;
    vlm.save(&dir.join("model"))?;

    let images = toy_images();
    let mut features = Bundle::new(BundleKind::PatchFeatures);
    features.seed = Some(seed);
    let mut annotations = Vec::new();
    let mut captions = BTreeMap::new();
    for img in &images {
        features.insert(
            feature_tensor_name(img.id),
            "patch_features",
            Tensor::from_matrix(&image_features(&config, seed, img.id)),
        );
        captions.insert(img.id.to_string(), img.captions.to_string());
        for (object, instance, part, mask) in &img.masks {
            annotations.push(PartAnnotation {
                image_id: img.id.to_string(),
                object: object.to_string(),
                instance: *instance,
                part: part.map(String::from),
                mask: mask.clone(),
            });
        }
    }
    features.save(&dir.join("features"), DType::F64)?;
    write_annotations(&dir.join("annotations.jsonl"), &annotations)?;
    let text = serde_json::to_string_pretty(&captions).map_err(|e| ProbeError::json("captions", e))?;
    std::fs::write(dir.join("captions.json"), text + "\n").map_err(|e| ProbeError::io(dir, e))?;
    toy_alias_table()?.save(&dir.join("aliases.json"))?;
    toy_candidates(&config, seed)?.save(&dir.join("candidates"), DType::F64)?;
    write_text(&dir.join("corpus.jsonl"), TOY_CORPUS)?;
    write_text(&dir.join("lexicon.json"), TOY_LEXICON)?;

    let path = dir.join("experiment.toml");
    std::fs::write(&path, toy_config_text(seed)).map_err(|e| ProbeError::io(&path, e))?;
    Ok(path)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| ProbeError::io(path, e))
}

const TOY_PARTS: [&str; 5] = ["ear", "tail", "paw", "eye", "wing"];

/// Seeded unit-norm text embeddings for the toy part labels.
pub fn toy_candidates(config: &VlmConfig, seed: u64) -> Result<CandidateSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ fnv1a("candidates"));
    let d = config.embed_dim;
    let raw = Matrix::from_vec(
        TOY_PARTS.len(),
        d,
        (0..TOY_PARTS.len() * d).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )?;
    CandidateSet::from_raw(
        TOY_PARTS.iter().map(|s| s.to_string()).collect(),
        raw,
        "A photo of {}",
        "seeded",
    )
}

const TOY_CORPUS: &str = r#""A cat with pointed ears and a long tail."
"The dog lifted one paw."
{"text": "A bird spread its wings; its tail fanned out."}
"Two cats, one sleeping."
"The dog's ears flopped over its eyes."
"#;

const TOY_LEXICON: &str = r#"{
  "cat": ["cats", "kitten"],
  "dog": ["dogs", "puppy"],
  "bird": ["birds"],
  "ear": ["ears"],
  "tail": ["tails"],
  "paw": ["paws"],
  "eye": ["eyes"],
  "wing": ["wings"]
}
"#;

fn toy_config_text(seed: u64) -> String {
    format!(
        r#"name = "toy"
seed = {seed}

[model]
source = "toy_manifest"
path = "model"

[data]
annotations = "annotations.jsonl"
captions = "captions.json"
aliases = "aliases.json"
features = "features"
min_area_fraction = 0.2
overlap = "any"

[run]
plans = ["NO_AK", "AK_DECODER", "AK_ENCODER", "FULL_AK", "ENC_LAST_K(1)"]
summary = "final_layer"
decoder_scope = "image_only"
out = "reports"

[clip]
candidates = "candidates"

[segment]
classes = ["ear", "tail", "paw", "eye", "wing"]
candidates = "global"

[cooccur]
corpus = "corpus.jsonl"
lexicon = "lexicon.json"
objects = ["cat", "dog", "bird"]
parts = ["ear", "tail", "paw", "eye", "wing"]
"#
    )
}

/// Write the context-dependent fixture as a runnable workspace: one 1×2
/// image whose "leg" part covers the target patch. Returns the config path.
pub fn write_context_workspace(dir: &Path, decoder_layers: usize, plans: &[&str]) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| ProbeError::io(dir, e))?;
    let fx = context_dependent_fixture(decoder_layers)?;
    fx.vlm.save(&dir.join("model"))?;
    let mut features = Bundle::new(BundleKind::PatchFeatures);
    features.insert(
        feature_tensor_name("ctx"),
        "patch_features",
        Tensor::from_matrix(&fx.features),
    );
    features.save(&dir.join("features"), DType::F64)?;
    let part = PixelMask::from_fn(1, 2, |_, c| c == fx.target);
    let annotations = [
        PartAnnotation {
            image_id: "ctx".into(),
            object: "thing".into(),
            instance: 0,
            part: None,
            mask: PixelMask::from_fn(1, 2, |_, _| true),
        },
        PartAnnotation {
            image_id: "ctx".into(),
            object: "thing".into(),
            instance: 0,
            part: Some(fx.part_label.clone()),
            mask: part,
        },
    ];
    write_annotations(&dir.join("annotations.jsonl"), &annotations)?;
    fx.table.save(&dir.join("aliases.json"))?;
    let plans = plans.iter().map(|p| format!("{p:?}")).collect::<Vec<_>>().join(", ");
    let text = format!(
        r#"name = "context"

[model]
source = "toy_manifest"
path = "model"

[data]
annotations = "annotations.jsonl"
aliases = "aliases.json"
features = "features"

[run]
plans = [{plans}]
out = "reports"
"#
    );
    let path = dir.join("experiment.toml");
    write_text(&path, &text)?;
    Ok(path)
}
