use lsdfn::flow::dataset::stack;
use lsdfn::flow::train::{predict_all, train_model, EVAL_CHUNK};
use lsdfn::flow::{
    aepe, build_model, epe_loss, gen_flow_dataset, load_trained, save_trained, train, DatasetConfig, ModelKind, ModelSpec,
    Motion, TrainConfig,
};
use lsdfn::kv::KvMap;
use lsdfn::layer::LsDfnConfig;
use lsdfn::rng::gaussian_fill;
use lsdfn::{Error, Tensor};

fn small(kind: ModelKind) -> TrainConfig {
    let mut c = TrainConfig::default_for(kind);
    c.data = DatasetConfig::new(6, 16, 16, 2, 3, 11);
    c.data.motion = Motion::Opposing;
    c.model = ModelSpec::new(kind, LsDfnConfig::new(6, 3, 3, 3, 2));
    c.iterations = 6;
    c.batch_size = 2;
    c.log_interval = 2;
    c.lr_milestones = vec![4];
    c
}

#[test]
fn displacements_are_uniform() {
    let d = 3i64;
    let mut cfg = DatasetConfig::new(1000, 16, 16, 2, d as usize, 5);
    cfg.min_object = 3;
    cfg.max_object = 5;
    let samples = gen_flow_dataset(&cfg).unwrap();
    let bins = (2 * d + 1) as usize;
    let mut counts = vec![[0usize; 2]; bins];
    for s in &samples {
        let o = &s.objects[0];
        assert!(o.du.abs() <= d && o.dv.abs() <= d);
        counts[(o.du + d) as usize][0] += 1;
        counts[(o.dv + d) as usize][1] += 1;
    }
    let n = samples.len() as f64;
    let p = 1.0 / bins as f64;
    let sigma = (n * p * (1.0 - p)).sqrt();
    for (i, c) in counts.iter().enumerate() {
        for &v in c {
            assert!((v as f64 - n * p).abs() <= 3.0 * sigma, "bin {i}: {v} vs {}", n * p);
        }
    }
}

#[test]
fn frame_b_is_frame_a_warped_on_object_pixels() {
    let cfg = DatasetConfig::new(40, 20, 24, 1, 4, 3);
    for s in gen_flow_dataset(&cfg).unwrap() {
        let (h, w) = (20usize, 24usize);
        let mut object_pixels = 0;
        for y in 0..h {
            for x in 0..w {
                let du = s.flow_gt.at(&[0, y, x]);
                let dv = s.flow_gt.at(&[1, y, x]);
                assert!(du.abs() <= 4.0 && dv.abs() <= 4.0);
                if du != 0.0 || dv != 0.0 {
                    object_pixels += 1;
                    let (ty, tx) = ((y as f32 + dv) as usize, (x as f32 + du) as usize);
                    assert_eq!(s.frame_b.at(&[0, ty, tx]), s.frame_a.at(&[0, y, x]));
                }
            }
        }
        let o = &s.objects[0];
        assert!(object_pixels > 0 || (o.du == 0 && o.dv == 0));
    }
}

#[test]
fn aepe_matches_direct_recomputation() {
    let pred = gaussian_fill::<f32>(&[2, 9, 7], 1, 0.0, 2.0).unwrap();
    let gt = gaussian_fill::<f32>(&[2, 9, 7], 2, 0.0, 2.0).unwrap();
    let p = 63;
    let direct: f64 = (0..p)
        .map(|q| {
            let du = pred.data()[q] as f64 - gt.data()[q] as f64;
            let dv = pred.data()[p + q] as f64 - gt.data()[p + q] as f64;
            (du * du + dv * dv).sqrt()
        })
        .sum::<f64>()
        / p as f64;
    assert!((aepe(&pred, &gt).unwrap() - direct).abs() <= 1e-6);
    let shifted = Tensor::from_fn(&[2, 9, 7], |i| gt.at(i) + if i[0] == 0 { 3.0 } else { 4.0 }).unwrap();
    let gt64 = gt.cast::<f64>();
    let shifted64 = Tensor::from_fn(&[2, 9, 7], |i| gt64.at(i) + if i[0] == 0 { 3.0 } else { 4.0 }).unwrap();
    assert_eq!(aepe(&shifted64, &gt64).unwrap(), 5.0);
    assert!((aepe(&shifted, &gt).unwrap() - 5.0).abs() < 1e-5);
}

#[test]
fn parameter_counts_match_within_five_percent() {
    for kind in [ModelKind::Baseline, ModelKind::Lsdfn] {
        let spec = TrainConfig::default_for(kind).model;
        let (b, l) = spec.param_counts().unwrap();
        assert!((b as f64 - l as f64).abs() / b as f64 <= 0.05, "{b} vs {l}");
        let built = build_model(&spec, 1).unwrap().param_count();
        assert_eq!(built, if kind == ModelKind::Baseline { b } else { l });
    }
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let mut cfg = small(ModelKind::Lsdfn);
    cfg.learning_rates = vec![0.0, 0.0];
    let before = build_model(&cfg.model, cfg.seed).unwrap();
    let r = train(&cfg).unwrap();
    for ((name, a), (_, b)) in before.named_tensors().into_iter().zip(r.model.named_tensors()) {
        assert!(a.bitwise_eq(b), "{name} changed");
    }
    assert!(r.rows.windows(2).all(|w| w[0].aepe == w[1].aepe));
}

#[test]
fn identical_seeds_reproduce_metrics_bitwise() {
    for kind in [ModelKind::Baseline, ModelKind::Lsdfn] {
        let cfg = small(kind);
        let a = train(&cfg).unwrap();
        let b = train(&cfg).unwrap();
        assert_eq!(a.rows.len(), b.rows.len());
        for (x, y) in a.rows.iter().zip(&b.rows) {
            assert_eq!((x.iteration, x.loss.to_bits(), x.aepe.to_bits()), (y.iteration, y.loss.to_bits(), y.aepe.to_bits()));
        }
        assert_eq!(
            a.batch_losses.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.batch_losses.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
}

#[test]
fn every_block_tensor_receives_gradient() {
    let cfg = small(ModelKind::Lsdfn);
    let model = build_model(&cfg.model, 3).unwrap();
    let (inputs, flows) = stack(&gen_flow_dataset(&cfg.data).unwrap()).unwrap();
    let (pred, tape) = model.forward(&inputs).unwrap();
    let (_, grad) = epe_loss(&pred, &flows).unwrap();
    let (_, grads) = model.backward(&grad, &tape).unwrap();
    for (name, g) in grads.named_tensors() {
        assert!(g.max_abs() > 0.0, "{name} has zero gradient");
    }
}

#[test]
fn reported_loss_matches_offline_recomputation() {
    let cfg = small(ModelKind::Lsdfn);
    let (inputs, flows) = stack(&gen_flow_dataset(&cfg.data).unwrap()).unwrap();
    let r = train_model(build_model(&cfg.model, cfg.seed).unwrap(), &inputs, &flows, &cfg).unwrap();
    let pred = predict_all(&r.model, &inputs, 1).unwrap();
    let offline: f64 = (0..inputs.shape()[0])
        .map(|i| {
            let p = pred.gather_batch(&[i]).unwrap();
            let g = flows.gather_batch(&[i]).unwrap();
            let (h, w) = (p.shape()[2], p.shape()[3]);
            aepe(&p.reshape(&[2, h, w]).unwrap(), &g.reshape(&[2, h, w]).unwrap()).unwrap()
        })
        .sum::<f64>()
        / inputs.shape()[0] as f64;
    assert!((offline - r.final_loss()).abs() <= 1e-6, "{offline} vs {}", r.final_loss());
}

#[test]
fn one_sample_overfit() {
    let mut cfg = TrainConfig::default_for(ModelKind::Baseline);
    cfg.data = DatasetConfig::new(1, 16, 16, 2, 2, 4);
    cfg.data.motion = Motion::Opposing;
    cfg.data.min_object = 6;
    cfg.data.max_object = 8;
    cfg.batch_size = 1;
    cfg.iterations = 3000;
    cfg.log_interval = 3000;
    cfg.learning_rates = vec![0.01];
    cfg.lr_milestones = vec![];
    let r = train(&cfg).unwrap();
    let (first, last) = (r.rows[0].aepe, r.final_loss());
    assert!(last <= 0.1 * first, "{first} -> {last}");
}

#[test]
fn checkpoint_round_trip_and_errors() {
    let cfg = small(ModelKind::Lsdfn);
    let r = train(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    save_trained(dir.path(), &r.model, &cfg).unwrap();
    let (loaded, loaded_cfg) = load_trained(dir.path(), &KvMap::default()).unwrap();
    assert_eq!(loaded_cfg, cfg);
    let (inputs, _) = stack(&gen_flow_dataset(&cfg.data).unwrap()).unwrap();
    let a = predict_all(&r.model, &inputs, EVAL_CHUNK).unwrap();
    let b = predict_all(&loaded, &inputs, EVAL_CHUNK).unwrap();
    assert!(a.bitwise_eq(&b));

    let mut other = KvMap::default();
    other.insert("block.samples", 5);
    assert!(matches!(load_trained(dir.path(), &other), Err(Error::CheckpointMismatch(_))));
    let mut data_only = KvMap::default();
    data_only.insert("data.seed", 99);
    assert_eq!(load_trained(dir.path(), &data_only).unwrap().1.data.seed, 99);

    let missing = dir.path().join("nothing");
    assert!(matches!(load_trained(&missing, &KvMap::default()), Err(Error::Checkpoint(_))));
}
