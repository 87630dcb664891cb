use splatgraph::pipeline::*;
use splatgraph::synth::{generate_sequence, SynthConfig};
use splatgraph::tensor::Tape;
use splatgraph::{Error, Real, Tensor};

fn dataset(frames: usize) -> (tempfile::TempDir, Dataset) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig { frames, resolution: 32, subdivisions: 2, ..SynthConfig::default() };
    generate_sequence(&cfg, dir.path()).unwrap();
    let d = Dataset::load(dir.path()).unwrap();
    (dir, d)
}

fn tiny() -> TrainConfig {
    let mut c = TrainConfig { pseudo_iters: 5, warmup_iters: 5, iters: 6, test_frames: 1, log_every: 3, ..TrainConfig::default() };
    c.hierarchy.factor = 3.0;
    c
}

fn images(model: &Model, frame: &Frame, ggo: bool) -> (Tensor, Tensor) {
    let mut tape = Tape::new();
    let out = model.forward(&mut tape, frame.into(), ggo).unwrap();
    (tape.value(out.coarse).clone(), tape.value(out.fine).clone())
}

#[test]
fn split_holds_out_the_tail() {
    let (_d, data) = dataset(4);
    assert_eq!(data.split(1).unwrap(), (vec![0, 1, 2], vec![3]));
    assert!(data.split(4).is_err());
}

#[test]
fn untrained_offsets_and_enhancer_are_identities() {
    let (_d, data) = dataset(2);
    let cfg = tiny();
    let m = Model::new(&cfg, &data.template, data.expr_dim(), data.manifest.intrinsics).unwrap();
    let f = &data.frames[1];
    let (c1, f1) = images(&m, f, true);
    let (c0, f0) = images(&m, f, false);
    assert_eq!(c1, c0);
    assert_eq!(f1, f0);
    let clamped: Vec<Real> = c1.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
    assert_eq!(f1.data(), clamped.as_slice());
    // removing GGO leaves every other component's initialization untouched
    let mut no_ggo = cfg.clone();
    no_ggo.ablate.no_ggo = true;
    let m2 = Model::new(&no_ggo, &data.template, data.expr_dim(), data.manifest.intrinsics).unwrap();
    assert_eq!(images(&m2, f, true), (c1, f1));
    assert!(m2.group_ids("ggo").is_empty());
    assert_eq!(m.active_groups(), vec!["unet", "spawn", "ggo", "enhancer"]);
}

#[test]
fn model_rejects_mismatched_settings() {
    let (_d, data) = dataset(2);
    let intr = data.manifest.intrinsics;
    let cfg = TrainConfig { resolution: 64, ..tiny() };
    assert!(matches!(Model::new(&cfg, &data.template, 8, intr), Err(Error::Config(_))));
    assert!(Model::new(&tiny(), &data.template, 5, intr).is_err());
    assert!(TrainConfig { k_sh: 1, ..tiny() }.validate().is_err());
}

#[test]
fn no_neural_renders_only_anchors() {
    let (_d, data) = dataset(2);
    let mut cfg = tiny();
    cfg.ablate.no_neural = true;
    let m = Model::new(&cfg, &data.template, 8, data.manifest.intrinsics).unwrap();
    assert_eq!(m.gaussians_per_frame(), data.template.num_vertices());
    let mut tape = Tape::new();
    let out = m.forward(&mut tape, (&data.frames[0]).into(), true).unwrap();
    assert_eq!(out.cloud.len(&tape), data.template.num_vertices());
    let full = Model::new(&tiny(), &data.template, 8, data.manifest.intrinsics).unwrap();
    assert_eq!(full.gaussians_per_frame(), 6 * data.template.num_vertices());
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let (_d, data) = dataset(3);
    let (model, _) = train(&tiny(), &data, |_| {}).unwrap();
    let ck = Checkpoint::from_model(&model);
    let bytes = ck.to_bytes();
    assert_eq!(&bytes[..4], CKPT_MAGIC);
    let back = Checkpoint::from_bytes(&bytes).unwrap();
    assert_eq!(back, ck);
    let m2 = back.into_model(&data.template).unwrap();
    for ((_, n1, t1), (_, n2, t2)) in model.store.iter().zip(m2.store.iter()) {
        assert_eq!(n1, n2);
        assert_eq!(t1, t2);
    }
    assert_eq!(images(&model, &data.frames[2], true), images(&m2, &data.frames[2], true));
    assert_eq!(Checkpoint::from_model(&m2).to_bytes(), bytes);

    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Format(_))));
    let mut bad = bytes.clone();
    bad[4] = 9;
    assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Version { found: 9, .. })));
    assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 8]).is_err());
    let other = splatgraph::mesh::icosphere(2, 1.1);
    assert!(back.into_model(&other).is_err());
}

#[test]
fn checkpoint_detects_tampered_hierarchy() {
    let (_d, data) = dataset(2);
    let m = Model::new(&tiny(), &data.template, 8, data.manifest.intrinsics).unwrap();
    let mut ck = Checkpoint::from_model(&m);
    let s = ck.sections.iter_mut().find(|s| s.name == "hierarchy:1:up").unwrap();
    s.data[2] += 0.25;
    assert!(ck.into_model(&data.template).is_err());
}

#[test]
fn training_is_deterministic() {
    let (_d, data) = dataset(3);
    let (m1, r1) = train(&tiny(), &data, |_| {}).unwrap();
    let (m2, r2) = train(&tiny(), &data, |_| {}).unwrap();
    assert_eq!(r1.losses, r2.losses);
    assert_eq!(loss_csv(&r1.losses), loss_csv(&r2.losses));
    assert_eq!(Checkpoint::from_model(&m1).to_bytes(), Checkpoint::from_model(&m2).to_bytes());
    assert!(r1.losses.iter().all(|r| r.frame < 2));
    let (_, r3) = train(&TrainConfig { seed: 1, ..tiny() }, &data, |_| {}).unwrap();
    assert_ne!(r1.losses, r3.losses);
}

#[test]
fn pseudo_fit_and_warm_up_make_progress() {
    let (_d, data) = dataset(2);
    let mut cfg = tiny();
    cfg.pseudo_iters = 60;
    cfg.warmup_iters = 60;
    let fit = fit_pseudo_gaussians(&data.frames[0], &cfg, 0.3).unwrap();
    assert!(fit.final_psnr > fit.initial_psnr + 3.0, "{} -> {}", fit.initial_psnr, fit.final_psnr);
    for q in fit.cloud.rotations.data().chunks(4) {
        assert!(q[0] >= 0.0);
        assert!((q.iter().map(|v| v * v).sum::<Real>() - 1.0).abs() < 1e-12);
    }
    let mut m = Model::new(&cfg, &data.template, 8, data.manifest.intrinsics).unwrap();
    let before = anchor_center_error(&m, &fit.cloud, &data.frames[0]).unwrap();
    let rep = warm_up(&mut m, &fit.cloud, &data.frames[0]).unwrap();
    assert!(rep.losses.last().unwrap() < &(0.5 * rep.losses[0]));
    assert!(rep.center_error < before);
}

#[test]
fn non_finite_loss_keeps_last_good_parameters() {
    let (_d, data) = dataset(3);
    let mut cfg = tiny();
    cfg.ablate.no_warmup = true;
    let mut t = Trainer::new(&cfg, &data).unwrap();
    t.step().unwrap();
    let good = t.model.store.clone();
    let id = t.model.store.find("enh.out.weight").unwrap();
    t.model.store.get_mut(id).data_mut()[0] = Real::NAN;
    let err = t.step().unwrap_err();
    assert!(matches!(err, Error::Numeric(ref m) if m.contains("iteration 1")), "{err}");
    assert_eq!(t.iteration(), 1);
    // the poisoned store was never stepped; last_good still holds the prior state
    assert_eq!(t.last_good().store.iter().count(), good.iter().count());
}

#[test]
fn evaluation_reports_sizes_and_splits() {
    let (_d, data) = dataset(3);
    let (model, _) = train(&tiny(), &data, |_| {}).unwrap();
    let bytes = Checkpoint::from_model(&model).to_bytes().len() as u64;
    let ev = evaluate(&model, &data, bytes).unwrap();
    assert_eq!(ev.test_frames.len(), 1);
    assert_eq!(ev.train_frames.len(), 2);
    assert_eq!(ev.psnr, ev.test.mean.psnr);
    assert_eq!(ev.ckpt_bytes, bytes);
    let per_frame = splatgraph::gaussians::raw_cloud_bytes(&render_frame(&model, (&data.frames[0]).into(), true).unwrap().cloud);
    assert_eq!(ev.raw_cloud_bytes, 3 * per_frame);
    let js = serde_json::to_value(&ev).unwrap();
    for k in ["l2", "psnr", "ssim", "proxy", "sec_per_frame", "ckpt_bytes", "raw_cloud_bytes"] {
        assert!(js.get(k).is_some());
    }
}

#[test]
fn dataset_errors_are_classified() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(Dataset::load(dir.path()), Err(Error::Data(_))));
    let (d, _) = dataset(2);
    let p = d.path().join("manifest.json");
    let text = std::fs::read_to_string(&p).unwrap().replace("\"version\": 1", "\"version\": 7");
    std::fs::write(&p, text).unwrap();
    assert!(matches!(Dataset::load(d.path()), Err(Error::Version { found: 7, expected: 1 })));
}

#[test]
fn config_toml_round_trips() {
    let c = TrainConfig { seed: 9, ablate: Ablation::parse_list("warmup,enhancer").unwrap(), ..TrainConfig::default() };
    assert_eq!(TrainConfig::from_toml(&c.to_toml()).unwrap(), c);
    assert!(TrainConfig::from_toml("nope = 1").is_err());
    assert!(Ablation::parse_list("ggo,fast").is_err());
    assert_eq!(Ablation::parse_list(" warmup , neural,ggo,enhancer").unwrap(), Ablation::all());
}

#[test]
fn shared_warm_start_is_bit_identical() {
    let (_d, data) = dataset(3);
    let cfg = tiny();
    let warm = warm_start(&cfg, &data).unwrap();
    let mut a = Trainer::new(&cfg, &data).unwrap();
    let mut b = Trainer::with_warm_start(&cfg, &data, Some(&warm)).unwrap();
    for _ in 0..3 {
        assert_eq!(a.step().unwrap(), b.step().unwrap());
    }
    // ablating the enhancer does not change what warm-up depends on
    let mut no_enh = cfg.clone();
    no_enh.ablate.no_enhancer = true;
    assert!(Trainer::with_warm_start(&no_enh, &data, Some(&warm)).is_ok());
    let other = TrainConfig { seed: 3, ..cfg };
    assert!(Trainer::with_warm_start(&other, &data, Some(&warm)).is_err());
}
