use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use faultforge::campaign::{
    load_runset, replay, replay_dir, run_campaign, runset_from_bytes, runset_to_bytes, sweep, CampaignOptions,
    LayerEvent, RangeMonitor, Session, SweepAxis, SweepValue, FAULT_FILE, RUNSET_FILE,
};
use faultforge::dataset::{synthetic_for_model, DatasetHandle};
use faultforge::evaluation::Leg;
use faultforge::fault_gen::generate_fault_matrix;
use faultforge::injector::flip_bit;
use faultforge::model::{builtin_model, Model};
use faultforge::scenario::{FaultPersistence, InjPolicy, InjectionTarget, RndMode, ScenarioConfig};
use faultforge::Error;

fn setup(name: &str, images: usize, target: InjectionTarget) -> (Model, DatasetHandle, ScenarioConfig) {
    let model = builtin_model(name).unwrap();
    let ds = synthetic_for_model(&model, images, 11).unwrap();
    let mut cfg = ScenarioConfig::new(images as u64, 1, 1, target);
    cfg.seed = 5;
    (model, ds, cfg)
}

fn dir_files(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn noop_campaign_is_identity() {
    let (model, ds, mut cfg) = setup("tiny-cnn", 16, InjectionTarget::Neurons);
    cfg.rnd_mode = RndMode::NoOp;
    let mut s = Session::new(model, ds, cfg).unwrap();
    let run = s.run().unwrap();
    assert!(run.records().is_empty());
    for t in run.triplets() {
        assert!(t.orig.bit_eq(t.corr));
    }
    let eval = run.evaluate().unwrap();
    assert_eq!((eval.corr.sde_rate, eval.corr.due_rate, eval.corr.total), (0.0, 0.0, 16));
}

#[test]
fn orig_leg_is_pure_function_of_input() {
    let (model, ds, cfg) = setup("tiny-cnn", 6, InjectionTarget::Weights);
    let mut s = Session::new(model.clone(), ds.clone(), cfg).unwrap();
    let run = s.run().unwrap();
    for (t, sample) in run.triplets().zip(ds.samples()) {
        assert_eq!(t.image_id, sample.image_id);
        assert!(t.orig.bit_eq(&model.forward(&sample.image).unwrap()));
    }
}

#[test]
fn runset_accounting_and_flip_invariant() {
    for (target, policy) in [
        (InjectionTarget::Neurons, InjPolicy::PerImage),
        (InjectionTarget::Weights, InjPolicy::PerImage),
        (InjectionTarget::Weights, InjPolicy::PerEpoch),
    ] {
        let (model, ds, mut cfg) = setup("tiny-cnn", 10, target);
        cfg.max_faults_per_image = 3;
        cfg.num_runs = 2;
        cfg.inj_policy = policy;
        let mut s = Session::new(model, ds, cfg).unwrap();
        let run = s.run().unwrap();
        for epoch in 0..2 {
            let n = run.records().iter().filter(|r| r.epoch == epoch).count();
            assert_eq!(n, 10 * 3, "{target:?} {policy:?}");
        }
        for r in run.records() {
            let bit = r.location.value as u8;
            assert_eq!(r.corrupted_value.to_bits(), flip_bit(r.original_value, bit).0.to_bits());
        }
        let keys: Vec<_> = run.records().iter().map(|r| r.sort_key()).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
    }
}

#[test]
fn output_is_reproducible_and_thread_independent() {
    let (model, ds, mut cfg) = setup("tiny-cnn", 12, InjectionTarget::Neurons);
    cfg.batch_size = 4;
    cfg.inj_policy = InjPolicy::PerBatch;
    cfg.max_faults_per_image = 2;
    let faults = generate_fault_matrix(&model, &cfg, 9).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let mut listings = Vec::new();
    for (i, threads) in [1, 1, 4].into_iter().enumerate() {
        let dir = tmp.path().join(format!("run{i}"));
        let opts = CampaignOptions {
            with_mitigation: true,
            threads,
        };
        run_campaign(&model, &ds, &cfg, &faults, opts, &dir).unwrap();
        listings.push(dir_files(&dir));
    }
    assert_eq!(listings[0], listings[1]);
    assert_eq!(listings[0], listings[2]);
    let names: Vec<&str> = listings[0].iter().map(|f| f.0.as_str()).collect();
    for want in [
        "faults/campaign.alff",
        "faults/campaign.alfr",
        "meta/dataset.json",
        "meta/model.txt",
        "meta/scenario.yml",
        "results/corr.csv",
        "results/orig.csv",
        "results/resil.csv",
    ] {
        assert!(names.contains(&want), "{want} missing from {names:?}");
    }
}

#[test]
fn transient_weight_campaign_leaves_model_untouched() {
    let (model, ds, mut cfg) = setup("tiny-3d", 8, InjectionTarget::Weights);
    cfg.rnd_bit_range = Some((30, 30));
    cfg.fault_persistence = FaultPersistence::Transient;
    let before = model.weight_digest();
    let mut s = Session::new(model, ds, cfg).unwrap();
    let run = s.run().unwrap();
    assert_eq!(run.records().len(), 8);
    assert_eq!(s.model().weight_digest(), before);
}

#[test]
fn replay_clean_tampered_and_foreign() {
    let (model, ds, cfg) = setup("tiny-cnn", 8, InjectionTarget::Neurons);
    let faults = generate_fault_matrix(&model, &cfg, cfg.seed).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("run");
    run_campaign(&model, &ds, &cfg, &faults, CampaignOptions::default(), &dir).unwrap();

    let report = replay_dir(&dir, &model, &ds, 1).unwrap();
    assert!(report.is_clean(), "{:?}", report.mismatches);
    assert_eq!(report.records_checked, 8);
    assert_eq!(report.files_checked, 2);

    // rewrite one record's corrupted value with a valid checksum
    let runset = dir.join(RUNSET_FILE);
    let mut records = load_runset(&runset).unwrap();
    records[3].corrupted_value = 0.5;
    fs::write(&runset, runset_to_bytes(&records).unwrap()).unwrap();
    let report = replay(dir.join(FAULT_FILE), &runset, &model, &ds, &cfg, None, 1).unwrap();
    assert_eq!(report.mismatches.len(), 1, "{:?}", report.mismatches);
    assert!(report.mismatches[0].contains("corrupted_value"));

    // a raw byte flip breaks the checksum
    let mut bytes = fs::read(&runset).unwrap();
    bytes[40] ^= 1;
    assert!(runset_from_bytes(&bytes).is_err());
    fs::write(&runset, &bytes).unwrap();
    assert!(!replay_dir(&dir, &model, &ds, 1).unwrap().is_clean());

    let other = builtin_model("tiny-det").unwrap();
    let other_ds = synthetic_for_model(&other, 8, 11).unwrap();
    assert!(matches!(replay_dir(&dir, &other, &other_ds, 1), Err(Error::Mismatch(_))));
}

#[test]
fn replay_notices_changed_results() {
    let (model, ds, cfg) = setup("tiny-det", 4, InjectionTarget::Weights);
    let faults = generate_fault_matrix(&model, &cfg, 1).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let opts = CampaignOptions {
        with_mitigation: true,
        threads: 2,
    };
    run_campaign(&model, &ds, &cfg, &faults, opts, tmp.path()).unwrap();
    assert!(replay_dir(tmp.path(), &model, &ds, 1).unwrap().is_clean());
    let corr = tmp.path().join("results/corr.json");
    let text = fs::read_to_string(&corr).unwrap().replacen("\"image_id\": 2", "\"image_id\": 3", 1);
    fs::write(&corr, text).unwrap();
    let report = replay_dir(tmp.path(), &model, &ds, 1).unwrap();
    assert_eq!(report.mismatches.len(), 1);
    assert!(report.mismatches[0].contains("corr.json"));
}

#[test]
fn scenario_locked_during_epoch() {
    let (model, ds, mut cfg) = setup("tiny-cnn", 10, InjectionTarget::Neurons);
    cfg.batch_size = 4;
    let mut s = Session::new(model, ds, cfg.clone()).unwrap();
    assert_eq!(s.begin_epoch().unwrap(), 0);
    let first = s.next_batch().unwrap().unwrap().len();
    assert!(matches!(s.set_scenario(cfg.clone()), Err(Error::EpochInProgress)));
    let mut sizes = vec![first];
    while let Some(b) = s.next_batch().unwrap() {
        sizes.push(b.len());
    }
    assert_eq!(sizes, vec![4, 4, 2]);
    s.end_epoch().unwrap();
    assert!(matches!(s.begin_epoch(), Err(Error::EndOfFaults)));
    let stepped = s.take_run().unwrap();
    assert_eq!(stepped.records().len(), 10);

    let mut changed = cfg.clone();
    changed.rnd_bit_range = Some((3, 3));
    s.set_scenario(changed).unwrap();
    assert!(s.run().unwrap().records().iter().all(|r| r.location.value == 3.0));
}

#[test]
fn monitors_observe_without_changing_results() {
    let (model, ds, cfg) = setup("tiny-cnn", 6, InjectionTarget::Neurons);
    let plain = Session::new(model.clone(), ds.clone(), cfg.clone()).unwrap().run().unwrap();

    let mut s = Session::new(model.clone(), ds.clone(), cfg).unwrap();
    s.enable_mitigation().unwrap();
    s.set_threads(3).unwrap();
    let count = Arc::new(AtomicUsize::new(0));
    let c = Arc::clone(&count);
    s.attach_monitor(move |_: &LayerEvent<'_>| {
        c.fetch_add(1, Ordering::Relaxed);
    });
    let order = Arc::new(Mutex::new(Vec::new()));
    let o = Arc::clone(&order);
    s.attach_monitor(move |e: &LayerEvent<'_>| o.lock().unwrap().push((e.image_id, e.leg, e.layer)));
    let ranges = Arc::new(Mutex::new(RangeMonitor::default()));
    let r = Arc::clone(&ranges);
    s.attach_monitor(move |e: &LayerEvent<'_>| {
        use faultforge::campaign::Monitor;
        r.lock().unwrap().observe(e)
    });
    let watched = s.run().unwrap();

    let layers = model.num_injectable();
    assert_eq!(count.load(Ordering::Relaxed), 6 * 3 * layers);
    let seen = order.lock().unwrap();
    assert_eq!(seen[0], (0, Leg::Orig, 0));
    assert_eq!(seen[layers], (0, Leg::Corr, 0));
    let profile = ranges.lock().unwrap().profile(layers).unwrap();
    assert_eq!(&profile, s.range_profile().unwrap());
    for (a, b) in plain.triplets().zip(watched.triplets()) {
        assert!(a.corr.bit_eq(b.corr));
    }
    assert_eq!(plain.result_files().unwrap()[..2], watched.result_files().unwrap()[..2]);
}

#[test]
fn layer_sweep_confines_faults() {
    let (model, ds, cfg) = setup("tiny-cnn", 8, InjectionTarget::Neurons);
    let mut s = Session::new(model, ds, cfg.clone()).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let values = SweepAxis::Layer.parse_values("0,1,2").unwrap();
    let points = sweep(&mut s, SweepAxis::Layer, &values, tmp.path()).unwrap();
    assert_eq!(points.len(), 3);
    for (i, p) in points.iter().enumerate() {
        assert_eq!(p.dir, tmp.path().join(format!("layer_{i}")));
        let records = load_runset(p.dir.join(RUNSET_FILE)).unwrap();
        let layers: BTreeSet<i64> = records.iter().map(|r| r.location.coords[1]).collect();
        assert_eq!(layers, BTreeSet::from([i as i64]));
        let tag = fs::read_to_string(p.dir.join("meta/sweep.txt")).unwrap();
        assert_eq!(tag, format!("axis: layer\nvalue: {i}\n"));
    }
    assert_eq!(s.get_scenario(), &cfg);
}

#[test]
fn faults_per_image_sweep_tracks_c() {
    let (model, ds, cfg) = setup("tiny-cnn", 5, InjectionTarget::Neurons);
    let mut s = Session::new(model, ds, cfg).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let values = [1, 2, 4].map(SweepValue::Number);
    let points = sweep(&mut s, SweepAxis::FaultsPerImage, &values, tmp.path()).unwrap();
    let counts: Vec<_> = points.iter().map(|p| (p.columns, p.records)).collect();
    assert_eq!(counts, vec![(5, 5), (10, 10), (20, 20)]);
}

#[test]
fn target_sweep_and_bad_values() {
    let (model, ds, cfg) = setup("tiny-3d", 4, InjectionTarget::Neurons);
    let mut s = Session::new(model, ds, cfg).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let values = SweepAxis::Target.parse_values("neurons,weights").unwrap();
    let points = sweep(&mut s, SweepAxis::Target, &values, tmp.path()).unwrap();
    assert!(points[1].dir.ends_with("target_weights"));
    assert!("depth".parse::<SweepAxis>().is_err());
    assert!(SweepAxis::BitPosition.parse_values("x").is_err());
    let bad = sweep(&mut s, SweepAxis::Layer, &[SweepValue::Number(9)], tmp.path());
    assert!(bad.unwrap_err().is_validation());
}

#[test]
fn dataset_size_must_match_scenario() {
    let (model, ds, mut cfg) = setup("tiny-cnn", 4, InjectionTarget::Neurons);
    cfg.dataset_size = 5;
    let err = Session::new(model, ds, cfg).err().unwrap();
    assert!(matches!(err, Error::Validation { ref key, .. } if key == "dataset_size"));
}

#[test]
fn foreign_fault_matrix_refused() {
    let (model, ds, cfg) = setup("tiny-cnn", 4, InjectionTarget::Neurons);
    let mut other = cfg.clone();
    other.rnd_bit_range = Some((1, 1));
    let faults = generate_fault_matrix(&model, &other, 1).unwrap();
    let tmp = tempfile::tempdir().unwrap();
    let err = run_campaign(&model, &ds, &cfg, &faults, CampaignOptions::default(), tmp.path()).unwrap_err();
    assert!(matches!(err, Error::Mismatch(_)));
}

#[test]
fn mitigated_leg_has_no_due() {
    let (model, ds, mut cfg) = setup("tiny-cnn", 32, InjectionTarget::Neurons);
    cfg.rnd_bit_range = Some((30, 30));
    let mut s = Session::new(model, ds, cfg).unwrap();
    s.enable_mitigation().unwrap();
    let eval = s.run().unwrap().evaluate().unwrap();
    let resil = eval.resil.unwrap();
    assert_eq!(resil.due, 0);
    assert!(resil.corrupted <= eval.corr.corrupted + eval.corr.due);
}
