use lessvit::embed::{patch_coords, patchify};
use lessvit::mae::*;
use lessvit::spectral::{synth_cube, HyperCube};
use lessvit::{Error, Graph, ParamStore, Tensor};

fn small_cfg() -> MaeConfig {
    let mut cfg = MaeConfig::toy().unwrap();
    cfg.height = 8;
    cfg.width = 8;
    cfg.wavelengths.truncate(4);
    cfg.encoder_depth = 1;
    cfg
}

fn cube(cfg: &MaeConfig, seed: u64) -> HyperCube {
    synth_cube(&cfg.wavelengths, cfg.height, cfg.width, seed).unwrap()
}

fn plan(cfg: &MaeConfig, seed: u64) -> MaskPlan {
    make_mask_plan(cfg.patches(), &[0, 1, 2, 3], (0.5, 0.5), seed).unwrap()
}

#[test]
fn full_visibility_matches_plain_encode() {
    let cfg = small_cfg();
    let (store, model) = HyperMae::init::<f64>(cfg.clone(), 3).unwrap();
    let x = cube(&cfg, 1);
    let mut g = Graph::new(&store);
    let a = encode(&mut g, &model, &x).unwrap();
    let full = make_mask_plan(cfg.patches(), &[0, 1, 2, 3], (0.0, 0.0), 9).unwrap();
    let b = encode_visible(&mut g, &model, &x, &full).unwrap();
    let diff = g.value(a.tokens).max_abs_diff(g.value(b.tokens)).unwrap();
    assert_eq!(diff, 0.0);
}

#[test]
fn visible_grid_keeps_positions() {
    let cfg = small_cfg();
    let (store, model) = HyperMae::init::<f64>(cfg.clone(), 3).unwrap();
    let x = cube(&cfg, 1);
    let p = plan(&cfg, 4);
    let mut g = Graph::new(&store);
    let enc = encode_visible(&mut g, &model, &x, &p).unwrap();
    let (nv, cv) = (p.spatial_visible.len(), p.spectral_visible.len());
    assert_eq!(g.shape(enc.tokens), [nv + 1, cv + 1, cfg.encoder.dim]);
    let coords = patch_coords(cfg.height, cfg.width, cfg.patch);
    let want: Vec<_> = p.spatial_visible.iter().map(|&n| coords[n]).collect();
    assert_eq!(enc.coords, want);
    let want: Vec<_> = p.spectral_visible.iter().map(|&c| x.wavelengths[c]).collect();
    assert_eq!(enc.wavelengths, want);
}

#[test]
fn reconstruction_shape() {
    let cfg = small_cfg();
    let (store, model) = HyperMae::init::<f64>(cfg.clone(), 3).unwrap();
    let x = cube(&cfg, 1);
    let p = plan(&cfg, 4);
    let mut g = Graph::new(&store);
    let enc = encode_visible(&mut g, &model, &x, &p).unwrap();
    let pred = decode_reconstruct(&mut g, &model, &enc, &p, &x).unwrap();
    assert_eq!(g.shape(pred), [cfg.patches(), 4, cfg.patch * cfg.patch]);
}

#[test]
fn shallow_decoder_predicts_mask_token_everywhere_masked() {
    let mut cfg = small_cfg();
    cfg.decoder_depth = 0;
    let (store, model) = HyperMae::init::<f64>(cfg.clone(), 3).unwrap();
    let x = cube(&cfg, 1);
    let p = plan(&cfg, 4);
    let mut g = Graph::new(&store);
    let enc = encode_visible(&mut g, &model, &x, &p).unwrap();
    let pred = decode_reconstruct(&mut g, &model, &enc, &p, &x).unwrap();
    let pred = g.value(pred).clone();
    let p2 = cfg.patch * cfg.patch;
    let mut masked_rows = Vec::new();
    for n in 0..cfg.patches() {
        for c in 0..4 {
            if p.is_masked(n, c) {
                let start = (n * 4 + c) * p2;
                masked_rows.push(pred.data()[start..start + p2].to_vec());
            }
        }
    }
    assert!(masked_rows.len() > 1);
    assert!(masked_rows.iter().all(|r| r == &masked_rows[0]));
}

#[test]
fn mask_token_receives_gradient() {
    let cfg = small_cfg();
    let (store, model) = HyperMae::init::<f64>(cfg.clone(), 3).unwrap();
    let x = cube(&cfg, 1);
    let p = plan(&cfg, 4);
    let mut g = Graph::new(&store);
    let loss = forward_loss(&mut g, &model, &x, &p).unwrap();
    let grads = g.backward(loss).unwrap();
    let id = model.decoder.as_ref().unwrap().mask_token;
    let grad = grads.param(id).expect("mask token gradient");
    assert!(grad.norm() > 0.0);
}

fn two_patch_plan() -> MaskPlan {
    MaskPlan {
        spatial_visible: vec![0],
        spatial_masked: vec![1],
        spectral_visible: vec![0],
        spectral_masked: vec![],
        hcs_channels: vec![0],
        seed: 0,
    }
}

#[test]
fn loss_against_hand_computation() {
    let target = Tensor::new(vec![2, 1, 2], vec![1.0, 3.0, 0.0, 4.0]).unwrap();
    let p = two_patch_plan();
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let pred = g.constant(Tensor::zeros(vec![2, 1, 2]).unwrap());
    let loss = mae_loss(&mut g, pred, &target, &p).unwrap();
    let want = 4.0 / (4.0 + 1e-6);
    assert!((g.value(loss).data()[0] - want).abs() < 1e-15);
}

#[test]
fn loss_zero_on_targets_and_blind_to_visible_tokens() {
    let target = Tensor::new(vec![2, 1, 2], vec![1.0, 3.0, 0.0, 4.0]).unwrap();
    let p = two_patch_plan();
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let perfect = normalize_patches(&target);
    let pred = g.constant(perfect.clone());
    let loss = mae_loss(&mut g, pred, &target, &p).unwrap();
    assert!(g.value(loss).data()[0].abs() < 1e-15);
    let mut off = perfect;
    off.data_mut()[0] += 7.0;
    off.data_mut()[1] -= 3.0;
    let pred = g.constant(off);
    let loss = mae_loss(&mut g, pred, &target, &p).unwrap();
    assert!(g.value(loss).data()[0].abs() < 1e-15);
}

#[test]
fn nothing_masked_is_degenerate() {
    let target = Tensor::new(vec![2, 1, 2], vec![1.0, 3.0, 0.0, 4.0]).unwrap();
    let p = MaskPlan::unmasked(2, vec![0]);
    let store = ParamStore::<f64>::new();
    let mut g = Graph::new(&store);
    let pred = g.constant(Tensor::zeros(vec![2, 1, 2]).unwrap());
    assert!(matches!(mae_loss(&mut g, pred, &target, &p), Err(Error::DegenerateInput(_))));
}

#[test]
fn runs_are_deterministic() {
    let opts = PretrainOptions { steps: 3, ..PretrainOptions::default() };
    let a = pretrain::<f64>(small_cfg(), &opts, |_, _| {}).unwrap();
    let b = pretrain::<f64>(small_cfg(), &opts, |_, _| {}).unwrap();
    assert_eq!(a.losses, b.losses);
    assert_eq!(encode_checkpoint(&a.store, "toy", 0, 3).unwrap(), encode_checkpoint(&b.store, "toy", 0, 3).unwrap());
    let c = pretrain::<f64>(small_cfg(), &PretrainOptions { seed: 1, ..opts }, |_, _| {}).unwrap();
    assert_ne!(a.losses, c.losses);
}

#[test]
fn zero_learning_rate_freezes_parameters() {
    let cfg = small_cfg();
    let (mut store, model) = HyperMae::init::<f64>(cfg.clone(), 3).unwrap();
    let before = encode_checkpoint(&store, "toy", 3, 0).unwrap();
    let mut opt = Optimizer::new(0.0, OptimizerKind::adam()).unwrap();
    let x = cube(&cfg, 1);
    let loss = train_step(&mut store, &model, &mut opt, &[&x], 11).unwrap();
    assert!(loss.is_finite() && loss > 0.0);
    assert_eq!(encode_checkpoint(&store, "toy", 3, 0).unwrap(), before);
}

#[test]
fn encoder_only_model_has_no_decoder() {
    let cfg = small_cfg();
    let (store, model) = HyperMae::init_encoder_only::<f64>(cfg.clone(), 3).unwrap();
    let (full, _) = HyperMae::init::<f64>(cfg.clone(), 3).unwrap();
    assert!(model.decoder.is_none());
    assert!(store.len() < full.len());
    assert!(store.iter().all(|(_, name, _)| !name.starts_with("dec") && name != "mask_token" && !name.starts_with("head")));
    let x = cube(&cfg, 1);
    let p = plan(&cfg, 4);
    let mut g = Graph::new(&store);
    let enc = encode_visible(&mut g, &model, &x, &p).unwrap();
    assert!(matches!(decode_reconstruct(&mut g, &model, &enc, &p, &x), Err(Error::Config(_))));
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let cfg = small_cfg();
    let (store, _) = HyperMae::init::<f32>(cfg.clone(), 5).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    save_checkpoint(&path, &store, "toy", 5, 0).unwrap();
    let (manifest, loaded) = load_checkpoint::<f32>(&path).unwrap();
    assert_eq!(manifest.precision, "f32");
    assert_eq!(manifest.tensors.len(), store.len());
    for ((_, na, a), (_, nb, b)) in store.iter().zip(loaded.iter()) {
        assert_eq!(na, nb);
        assert_eq!(a.shape(), b.shape());
        assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
    let (mut fresh, _) = HyperMae::init::<f32>(cfg, 6).unwrap();
    restore_into(&mut fresh, &loaded).unwrap();
    assert_eq!(encode_checkpoint(&fresh, "toy", 5, 0).unwrap(), std::fs::read(&path).unwrap());

    let bytes = std::fs::read(&path).unwrap();
    assert!(matches!(decode_checkpoint::<f64>(&bytes), Err(Error::Parse(_))));
    assert!(matches!(decode_checkpoint::<f32>(&bytes[..bytes.len() - 1]), Err(Error::Parse(_))));
    let mut extra = bytes.clone();
    extra.push(0);
    assert!(matches!(decode_checkpoint::<f32>(&extra), Err(Error::Parse(_))));
}

#[test]
fn hcs_mean_count_tracks_range() {
    let range = HcsRange::new(0.4, 0.5).unwrap();
    let draws = 2000;
    let total: usize = (0..draws).map(|s| hcs_sample(100, range, s).unwrap().len()).sum();
    let mean = total as f64 / draws as f64;
    assert!((44.0..=46.0).contains(&mean), "mean {mean}");
}

#[test]
fn patch_targets_follow_channel_subset() {
    let cfg = small_cfg();
    let x = cube(&cfg, 1);
    let sub = x.select_channels(&[1, 3]).unwrap();
    let all = patchify(&x, cfg.patch).unwrap();
    let part = patchify(&sub, cfg.patch).unwrap();
    let p2 = cfg.patch * cfg.patch;
    for n in 0..cfg.patches() {
        for (j, c) in [1, 3].into_iter().enumerate() {
            assert_eq!(all.row(n * 4 + c), part.row(n * 2 + j));
            assert_eq!(part.row(n * 2 + j).len(), p2);
        }
    }
}
