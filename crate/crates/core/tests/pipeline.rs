// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use partprobe::error::ProbeError;
use partprobe::experiment::{
    build_report, load_activation_dump, parse_report_csv, run_clip_probe, run_cooccurrence, run_experiment, run_filter,
    run_segmentation, verify_dump, write_dumps, Experiment, ExperimentConfig, ModelSource, Overrides, ReportJson,
};
use partprobe::interchange::DType;
use partprobe::knockout::PlanDescriptor;
use partprobe::lens::SummaryMode;
use partprobe::par::Executor;
use partprobe::regions::{OverlapRule, SizeBins};
use partprobe::toy::{write_context_workspace, write_toy_workspace};

fn workspace(seed: u64) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_toy_workspace(&dir.path().join("ws"), seed).unwrap();
    (dir, cfg)
}

fn load(cfg: &Path, out: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::load(cfg).unwrap();
    Overrides {
        out: Some(out.to_path_buf()),
        ..Default::default()
    }
    .apply(&mut c);
    c
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

fn csv_rows(path: &Path) -> Vec<BTreeMap<String, String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header: Vec<String> = r.headers().unwrap().iter().map(String::from).collect();
    r.records()
        .map(|rec| {
            header
                .iter()
                .cloned()
                .zip(rec.unwrap().iter().map(String::from))
                .collect()
        })
        .collect()
}

#[test]
fn no_ak_report_has_curves_for_every_region() {
    let (dir, cfg) = workspace(3);
    let mut c = load(&cfg, &dir.path().join("out"));
    c.run.plans = vec!["NO_AK".into()];
    let exp = Experiment::load(c.clone()).unwrap();
    let n_regions = exp.regions.len();
    let layers = exp.vlm().unwrap().config.decoder_layers;
    let summary = run_experiment(c).unwrap();
    assert_eq!(summary.region_errors, 0);
    let rows = csv_rows(&dir.path().join("out/no_ak.regions.csv"));
    assert_eq!(rows.len(), n_regions * (layers + 1));
    for r in &rows {
        let score: f64 = r["part_score"].parse().unwrap();
        assert!((0.0..=1.0).contains(&score));
    }
}

#[test]
fn csv_and_json_agree_field_for_field() {
    let (dir, cfg) = workspace(4);
    run_experiment(load(&cfg, &dir.path().join("out"))).unwrap();
    for slug in ["no_ak", "full_ak", "enc_last_k_1"] {
        let from_csv = parse_report_csv(&read(&dir.path().join(format!("out/{slug}.csv")))).unwrap();
        let json: ReportJson = serde_json::from_str(&read(&dir.path().join(format!("out/{slug}.json")))).unwrap();
        assert!(!from_csv.is_empty());
        assert_eq!(from_csv, json.rows, "{slug}");
    }
}

#[test]
fn layer_percent_column_uses_two_decimals() {
    let (dir, cfg) = workspace(5);
    let mut c = load(&cfg, &dir.path().join("out"));
    c.model = ModelSource::RandomToy {
        config: Some(partprobe::vlm::VlmConfig {
            decoder_layers: 3,
            ..partprobe::vlm::VlmConfig::toy()
        }),
    };
    c.data.features = None;
    c.run.plans = vec!["NO_AK".into()];
    run_experiment(c).unwrap();
    let percents: Vec<String> = csv_rows(&dir.path().join("out/no_ak.csv"))
        .into_iter()
        .filter(|r| r["level"] == "overall")
        .map(|r| r["layer_percent"].clone())
        .collect();
    assert_eq!(percents, ["0.00", "33.33", "66.67", "100.00"]);
}

#[test]
fn plan_reports_do_not_depend_on_other_plans() {
    let (dir, cfg) = workspace(6);
    let mut both = load(&cfg, &dir.path().join("both"));
    both.run.plans = vec!["NO_AK".into(), "FULL_AK".into()];
    run_experiment(both).unwrap();
    let mut alone = load(&cfg, &dir.path().join("alone"));
    alone.run.plans = vec!["FULL_AK".into()];
    run_experiment(alone).unwrap();
    for suffix in [
        "csv",
        "json",
        "summary.csv",
        "regions.csv",
        "size_bins.csv",
        "errors.csv",
    ] {
        let name = format!("full_ak.{suffix}");
        assert_eq!(
            read(&dir.path().join("both").join(&name)),
            read(&dir.path().join("alone").join(&name)),
            "{name}"
        );
    }
}

#[test]
fn context_fixture_orders_plan_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_context_workspace(dir.path(), 2, &["NO_AK", "FULL_AK", "AK_ENCODER"]).unwrap();
    let summary = run_experiment(ExperimentConfig::load(&cfg).unwrap()).unwrap();
    assert_eq!(summary.region_errors, 0);
    let final_part = |slug: &str| -> f64 {
        csv_rows(&dir.path().join(format!("reports/{slug}.summary.csv")))
            .into_iter()
            .find(|r| r["level"] == "part" && r["summary"] == "final")
            .unwrap()["score"]
            .parse()
            .unwrap()
    };
    let (none, full, enc) = (final_part("no_ak"), final_part("full_ak"), final_part("ak_encoder"));
    assert_eq!(none, 1.0);
    assert!(full <= none && full < 1.0, "FULL_AK {full}");
    assert!(enc >= full);
    let rows = csv_rows(&dir.path().join("reports/no_ak.regions.csv"));
    assert!(
        rows.iter().all(|r| r["object_rank"].is_empty()),
        "object label absent from the alias table"
    );
}

#[test]
fn dumps_reproduce_in_process_curves() {
    for dtype in [DType::F64, DType::F32] {
        let (dir, cfg) = workspace(8);
        let in_proc = load(&cfg, &dir.path().join("in_proc"));
        let exp = Experiment::load(in_proc.clone()).unwrap();
        let grid = exp.grid;
        let dumps = dir.path().join("dumps");
        let written = write_dumps(&exp, &dumps, dtype).unwrap();
        assert!(!written.is_empty());
        for d in &written {
            let check = verify_dump(d, 1e-3).unwrap();
            assert!(check.within_tolerance, "{}: {check:?}", d.display());
        }
        run_experiment(in_proc).unwrap();

        let mut from_dump = load(&cfg, &dir.path().join("from_dump"));
        from_dump.model = ModelSource::Dump { path: dumps.clone() };
        from_dump.data.features = None;
        from_dump.data.grid = Some(grid);
        let s = run_experiment(from_dump).unwrap();
        assert_eq!(s.region_errors, 0);
        for slug in ["no_ak", "ak_decoder", "ak_encoder", "full_ak", "enc_last_k_1"] {
            let a = csv_rows(&dir.path().join(format!("in_proc/{slug}.regions.csv")));
            let b = csv_rows(&dir.path().join(format!("from_dump/{slug}.regions.csv")));
            assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(&b) {
                let (sx, sy): (f64, f64) = (x["part_score"].parse().unwrap(), y["part_score"].parse().unwrap());
                match dtype {
                    DType::F64 => assert!((sx - sy).abs() <= 1e-9, "{slug}: {sx} vs {sy}"),
                    DType::F32 => assert!((0.0..=1.0).contains(&sy)),
                }
            }
        }
    }
}

#[test]
fn dump_without_unembedding_names_the_asset() {
    let (dir, cfg) = workspace(9);
    let exp = Experiment::load(load(&cfg, &dir.path().join("out"))).unwrap();
    let trace = exp.trace(&exp.regions[0], PlanDescriptor::NoAk).unwrap();
    let d = dir.path().join("trace");
    trace.save(&d, DType::F64, serde_json::Value::Null).unwrap();
    assert!(load_activation_dump(&d).is_ok());

    let manifest_path = d.join("manifest.json");
    let mut manifest: serde_json::Value = serde_json::from_str(&read(&manifest_path)).unwrap();
    manifest["tensors"]
        .as_array_mut()
        .unwrap()
        .retain(|t| t["name"] != "unembedding");
    std::fs::write(&manifest_path, manifest.to_string()).unwrap();
    let e = load_activation_dump(&d).unwrap_err();
    assert!(e.to_string().contains("unembedding"), "{e}");
}

#[test]
fn truncated_dump_is_a_shape_error() {
    let (dir, cfg) = workspace(10);
    let exp = Experiment::load(load(&cfg, &dir.path().join("out"))).unwrap();
    let trace = exp.trace(&exp.regions[0], PlanDescriptor::NoAk).unwrap();
    let d = dir.path().join("trace");
    trace.save(&d, DType::F32, serde_json::Value::Null).unwrap();
    let f = d.join("hidden.1.bin");
    let bytes = std::fs::read(&f).unwrap();
    std::fs::write(&f, &bytes[..bytes.len() - 4]).unwrap();
    assert!(matches!(load_activation_dump(&d), Err(ProbeError::Shape(_))));
    assert!(verify_dump(&d, 1e-3).is_err());
}

#[test]
fn vanished_regions_land_in_the_error_report() {
    let (dir, cfg) = workspace(11);
    let mut c = load(&cfg, &dir.path().join("out"));
    c.data.overlap = OverlapRule::Fraction(0.9);
    c.run.plans = vec!["NO_AK".into()];
    let s = run_experiment(c.clone()).unwrap();
    assert!(s.region_errors > 0);
    let errors = csv_rows(&dir.path().join("out/no_ak.errors.csv"));
    assert_eq!(errors.len(), s.region_errors);
    assert!(errors.iter().all(|e| e["stage"] == "patches"));
    assert!(dir.path().join("out/no_ak.csv").exists());
    let f = run_filter(c).unwrap();
    assert_eq!(f.region_errors, errors.len());
}

#[test]
fn plan_model_mismatches_are_rejected() {
    let (dir, cfg) = workspace(12);
    for bad in ["ENC_LAST_K(3)", "CLS_FOCUS(1)"] {
        let mut c = load(&cfg, &dir.path().join("out"));
        c.run.plans = vec![bad.into()];
        let e = run_experiment(c).unwrap_err();
        assert!(matches!(e, ProbeError::Plan(_)), "{bad}: {e}");
    }
    let mut c = load(&cfg, &dir.path().join("out"));
    c.run.plans = vec!["SOMETHING".into()];
    assert!(matches!(run_experiment(c), Err(ProbeError::Config(_))));
}

#[test]
fn progressive_sweep_writes_one_report_per_k() {
    let (dir, cfg) = workspace(13);
    let mut c = load(&cfg, &dir.path().join("out"));
    c.model = ModelSource::RandomToy {
        config: Some(partprobe::vlm::VlmConfig {
            encoder_layers: 24,
            d_encoder: 4,
            mlp_encoder: 4,
            ..partprobe::vlm::VlmConfig::toy()
        }),
    };
    c.data.features = None;
    c.run.plans = ["ENC_LAST_K(6)", "ENC_LAST_K(12)", "ENC_LAST_K(18)", "ENC_LAST_K(24)"]
        .map(String::from)
        .to_vec();
    run_experiment(c).unwrap();
    for k in [6, 12, 18, 24] {
        let rows = csv_rows(&dir.path().join(format!("out/enc_last_k_{k}.csv")));
        assert!(rows.iter().all(|r| r["plan"] == format!("ENC_LAST_K({k})")));
    }
}

#[test]
fn single_region_report_rows() {
    let (dir, cfg) = workspace(14);
    let mut c = load(&cfg, &dir.path().join("out"));
    c.model = ModelSource::RandomToy {
        config: Some(partprobe::vlm::VlmConfig {
            decoder_layers: 0,
            ..partprobe::vlm::VlmConfig::toy()
        }),
    };
    c.data.features = None;
    let exp = Experiment::load(c).unwrap();
    let (mut results, errors) = exp.probe_plan(PlanDescriptor::NoAk, &Executor::sequential()).unwrap();
    results.truncate(1);
    let report = build_report(
        "m",
        PlanDescriptor::NoAk,
        &results,
        errors,
        SummaryMode::FinalLayer,
        &SizeBins::default(),
    )
    .unwrap();
    assert_eq!(report.region_rows.len(), 1);
    let levels: Vec<&str> = report.rows.iter().map(|r| r.level.as_str()).collect();
    assert_eq!(levels, ["part", "object", "object_label", "overall"]);
    assert!(report.rows.iter().all(|r| r.n_regions == 1 && r.layer_percent == 100.0));
    assert!(build_report(
        "m",
        PlanDescriptor::NoAk,
        &[],
        vec![],
        SummaryMode::FinalLayer,
        &SizeBins::default()
    )
    .is_err());
}

#[test]
fn auxiliary_probes_write_their_tables() {
    let (dir, cfg) = workspace(15);
    let c = load(&cfg, &dir.path().join("out"));
    let clip = run_clip_probe(c.clone()).unwrap();
    assert_eq!(clip.region_errors, 0);
    let rows = csv_rows(&dir.path().join("out/clip_focus.csv"));
    let exp = Experiment::load(c.clone()).unwrap();
    assert_eq!(
        rows.len(),
        exp.regions.len() * (exp.vlm().unwrap().config.encoder_layers + 1)
    );

    let seg = run_segmentation(c.clone()).unwrap();
    assert_eq!(seg.region_errors, 0);
    let per_image = csv_rows(&dir.path().join("out/segmentation.csv"));
    assert_eq!(per_image.last().unwrap()["image_id"], "all");

    run_cooccurrence(&c).unwrap();
    let co = read(&dir.path().join("out/cooccurrence.csv"));
    assert_eq!(co.lines().next().unwrap(), "object,ear,tail,paw,eye,wing");
    assert_eq!(co.lines().last().unwrap(), "total,2,2,1,1,1");
}

#[test]
fn worker_count_and_repeat_runs_are_byte_identical() {
    let (dir, cfg) = workspace(16);
    let mut outputs = Vec::new();
    for (i, workers) in [1usize, 3, 1].into_iter().enumerate() {
        let mut c = load(&cfg, &dir.path().join(format!("out{i}")));
        c.run.workers = workers;
        run_experiment(c).unwrap();
        let mut files = BTreeMap::new();
        for e in std::fs::read_dir(dir.path().join(format!("out{i}"))).unwrap() {
            let p = e.unwrap().path();
            files.insert(p.file_name().unwrap().to_owned(), std::fs::read(&p).unwrap());
        }
        outputs.push(files);
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0], outputs[2]);
}

#[test]
fn alias_vocabulary_must_match_the_model() {
    let (dir, cfg) = workspace(17);
    let mut c = load(&cfg, &dir.path().join("out"));
    c.model = ModelSource::RandomToy {
        config: Some(partprobe::vlm::VlmConfig {
            vocab_size: 32,
            ..partprobe::vlm::VlmConfig::toy()
        }),
    };
    c.data.features = None;
    let Err(e) = Experiment::load(c) else {
        panic!("mismatched vocabulary accepted")
    };
    assert!(
        matches!(e, ProbeError::Config(_)) && e.to_string().contains("vocabulary"),
        "{e}"
    );
}
