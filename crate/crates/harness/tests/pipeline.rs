mod common;

use std::fs;

use vitsteer_core::steering::{alpha_sweep, steered_eval, strategy_latents, Strategy, SweepConfig};
use vitsteer_core::vit::argmax;
use vitsteer_harness::artifacts::*;
use vitsteer_harness::pipeline::eval_subsets;
use vitsteer_harness::report::parse_sweep_csv;
use vitsteer_harness::{load_datasets, HarnessError, Pipeline, Stage, SweepRecord};

#[test]
fn no_stages_only_validates() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let outcome = Pipeline::new(common::tiny(&out)).unwrap().run(&[]).unwrap();
    assert!(outcome.executed.is_empty() && outcome.skipped.is_empty());
    assert!(!out.exists());
}

#[test]
fn missing_prerequisites_name_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = Pipeline::new(common::tiny(dir.path())).unwrap();
    for (stage, file, producer) in [
        (Stage::Extract, VIT_FILE, "train-vit"),
        (Stage::TrainSae, EMBEDDINGS_FILE, "extract"),
        (Stage::Sweep, VIT_FILE, "train-vit"),
    ] {
        let e = p.run(&[stage]).unwrap_err();
        assert_eq!(e.exit_code(), 3);
        match &e {
            HarnessError::MissingArtifact { path, producer: pr, .. } => {
                assert_eq!(path, &dir.path().join(file));
                assert_eq!(*pr, producer);
            }
            other => panic!("{other}"),
        }
        assert!(e.to_string().contains(file));
    }
}

#[test]
fn stages_run_in_canonical_order_and_then_skip() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = Pipeline::new(common::tiny(dir.path())).unwrap();
    let first = p.run(&[Stage::Report, Stage::TrainVit, Stage::Sweep, Stage::Stats, Stage::TrainSae, Stage::Extract]).unwrap();
    assert_eq!(first.executed, Stage::ALL.to_vec());
    let bundle = first.bundle.expect("report requested");
    assert_eq!(bundle.config_hash, p.hash());
    assert_eq!(bundle.head_freq.len(), 3);
    assert_eq!(bundle.overlap.len(), 3);
    // strategies × classes × α
    assert_eq!(bundle.sweep.len(), 3 * 3 * 3);
    for f in Stage::ALL.iter().flat_map(|s| s.outputs()) {
        assert!(dir.path().join(f).exists(), "{f}");
    }

    let again = p.run(&Stage::ALL).unwrap();
    assert!(again.executed.is_empty());
    assert_eq!(again.skipped, Stage::ALL.to_vec());

    // A touched output reruns its stage; the regenerated bytes are identical,
    // so downstream stages stay current.
    fs::write(dir.path().join(SWEEP_FILE), "# config_hash=x\n").unwrap();
    let third = p.run(&Stage::ALL).unwrap();
    assert_eq!(third.executed, vec![Stage::Sweep]);

    // A changed input reruns its consumers.
    let train = dir.path().join(TRAIN_SAE_FILE);
    let text = fs::read_to_string(&train).unwrap();
    fs::write(&train, format!("{text}\n")).unwrap();
    let fourth = p.run(&[Stage::Report]).unwrap();
    assert_eq!(fourth.executed, vec![Stage::Report]);
}

#[test]
fn every_artifact_carries_the_config_hash() {
    let dir = tempfile::tempdir().unwrap();
    let mut p = Pipeline::new(common::tiny(dir.path())).unwrap();
    p.run(&Stage::ALL).unwrap();
    let hash = p.hash().to_string();
    for f in [VIT_FILE, EMBEDDINGS_FILE, SAE_FILE, STATS_FILE] {
        assert_eq!(container_hash(&dir.path().join(f)).unwrap(), hash, "{f}");
    }
    for f in [SWEEP_FILE, HEAD_FREQ_FILE, OVERLAP_FILE] {
        let text = fs::read_to_string(dir.path().join(f)).unwrap();
        assert_eq!(text.lines().next().unwrap(), format!("# config_hash={hash}"), "{f}");
    }
    for f in [TRAIN_VIT_FILE, TRAIN_SAE_FILE, REPORT_FILE] {
        let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join(f)).unwrap()).unwrap();
        assert_eq!(v["config_hash"], hash, "{f}");
    }
}

#[test]
fn artifacts_from_another_config_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    Pipeline::new(common::tiny(dir.path())).unwrap().run(&[Stage::TrainVit]).unwrap();
    let mut other = common::tiny(dir.path());
    other.seed += 1;
    let e = Pipeline::new(other).unwrap().run(&[Stage::Extract]).unwrap_err();
    assert!(matches!(e, HarnessError::HashMismatch { .. }), "{e}");
    assert_eq!(e.exit_code(), 3);
}

#[test]
fn identical_configs_give_identical_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    Pipeline::new(common::tiny(a.path())).unwrap().run(&Stage::ALL).unwrap();
    Pipeline::new(common::tiny(b.path())).unwrap().run(&Stage::ALL).unwrap();
    for f in [
        VIT_FILE,
        EMBEDDINGS_FILE,
        SAE_FILE,
        STATS_FILE,
        SWEEP_FILE,
        HEAD_FREQ_FILE,
        OVERLAP_FILE,
        REPORT_FILE,
        TRAIN_VIT_FILE,
        TRAIN_SAE_FILE,
    ] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn reports_match_in_memory_steering_results() {
    let dir = tempfile::tempdir().unwrap();
    let config = common::tiny(dir.path());
    let mut p = Pipeline::new(config.clone()).unwrap();
    let bundle = p.run(&Stage::ALL).unwrap().bundle.unwrap();
    let model = p.load_vit().unwrap();
    let sae = p.load_sae().unwrap();
    let stats = p.load_stats().unwrap();
    let (_, test) = load_datasets(&config).unwrap();
    let subsets = eval_subsets(&config, &test);

    let sweep_cfg = SweepConfig {
        strategies: config.strategies().unwrap(),
        alphas: config.steering.alphas.clone(),
        k_steer: config.steering.k_steer,
        seed: config.steering_seed(),
        scope: config.scope().unwrap(),
        batch_size: config.train.eval_batch_size,
    };
    let live = alpha_sweep(&model, &sae, &stats, &sweep_cfg, &subsets).unwrap();
    let expected: Vec<SweepRecord> = live.rows.iter().map(SweepRecord::from).collect();
    let text = fs::read_to_string(dir.path().join(SWEEP_FILE)).unwrap();
    let (_, parsed) = parse_sweep_csv(&text, &dir.path().join(SWEEP_FILE)).unwrap();
    assert_eq!(parsed, expected);
    assert_eq!(bundle.sweep, expected);

    let top = &bundle.summary.top_gain[0];
    let set = strategy_latents(&stats, Strategy::PerClassFrequent, top.class, config.steering.k_steer, config.steering_seed()).unwrap();
    let o = steered_eval(&model, &sae, &set, config.steering.report_alpha, &subsets[top.class], config.scope().unwrap(), 16).unwrap();
    assert_eq!(bundle.head_freq[top.class], o.head_freq);
    assert_eq!(argmax(&bundle.head_freq[top.class]), argmax(&o.head_freq));
    for w in bundle.summary.top_gain.windows(2) {
        assert!(w[0].gain_pct > w[1].gain_pct || (w[0].gain_pct == w[1].gain_pct && w[0].class < w[1].class));
    }
}
