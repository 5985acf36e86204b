// SPDX-License-Identifier: MIT OR Apache-2.0

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use partprobe::experiment::{Experiment, ExperimentConfig, ModelSource};
use partprobe::knockout::PlanDescriptor;
use partprobe::lens::{layer_curves, AliasTable};
use partprobe::par::Executor;
use partprobe::toy::write_toy_workspace;
use partprobe::vlm::VlmConfig;

const VOCAB: usize = 2048;

fn experiment(dir: &std::path::Path) -> Experiment {
    let cfg_path = write_toy_workspace(dir, 7).unwrap();
    let mut cfg = ExperimentConfig::load(&cfg_path).unwrap();
    cfg.model = ModelSource::RandomToy {
        config: Some(VlmConfig {
            encoder_layers: 4,
            decoder_layers: 6,
            d_encoder: 48,
            d_decoder: 64,
            heads_enc: 4,
            heads_dec: 4,
            mlp_encoder: 96,
            mlp_decoder: 128,
            vocab_size: VOCAB,
            ..VlmConfig::toy()
        }),
    };
    cfg.data.features = None;
    let aliases = cfg.resolve(&cfg.data.aliases);
    let toy = AliasTable::load(&aliases).unwrap();
    let labels = toy
        .labels()
        .iter()
        .map(|l| (l.clone(), toy.aliases(l).unwrap().to_vec()))
        .collect();
    AliasTable::new(VOCAB, labels).unwrap().save(&aliases).unwrap();
    Experiment::load(cfg).unwrap()
}

fn bench(c: &mut Criterion) {
    let dir = tempfile::tempdir().unwrap();
    let exp = experiment(dir.path());
    let executors = [
        ("sequential", Executor::new(1).unwrap()),
        ("parallel", Executor::new(0).unwrap()),
    ];

    let mut g = c.benchmark_group("probe_plan");
    g.sample_size(10);
    for (name, ex) in &executors {
        g.bench_function(*name, |b| {
            b.iter(|| {
                let (results, errors) = exp.probe_plan(PlanDescriptor::FullAk, ex).unwrap();
                assert!(errors.is_empty());
                black_box(results)
            })
        });
    }
    g.finish();

    let region = exp.regions.iter().max_by_key(|r| r.patches.len()).unwrap();
    let trace = exp.trace(region, PlanDescriptor::NoAk).unwrap();
    let table = exp.table.clone();
    let labels = [region.part.as_str()];
    let mut g = c.benchmark_group("layer_curves");
    for (name, ex) in &executors {
        g.bench_function(*name, |b| {
            b.iter(|| ex.install(|| black_box(layer_curves(&trace, &region.patches, &labels, &table).unwrap())))
        });
    }
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
