use super::*;
use crate::backbone::BackboneConfig;
use crate::volume::{make_phantom, Dims3, FadeBand, LesionKind, PhantomConfig};
use rand::Rng;

fn random_tensor<T: Scalar>(shape: Shape4, seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..shape.len()).map(|_| T::lit(rng.gen_range(0.0..1.0))).collect();
    Tensor::from_vec(shape, data).unwrap()
}

fn small_config() -> FusionConfig {
    FusionConfig {
        expansion: 2,
        seed: 4,
        detached_decoder: false,
    }
}

#[test]
fn analytic_shapes_for_default_expansion() {
    let s = FusionModel::<f32>::shapes(Shape4::new(32, 16, 32, 32), 8).unwrap();
    assert_eq!(s.stream, Shape4::new(256, 8, 16, 16));
    assert_eq!(s.upsampled, Shape4::new(256, 16, 32, 32));
    assert_eq!(s.concatenated.c, 512);
    assert_eq!(s.output, Shape4::new(32, 16, 32, 32));
}

#[test]
fn odd_tap_dims_are_rejected() {
    assert!(matches!(
        build_fusion(Shape4::new(4, 5, 8, 8), FusionConfig::default()),
        Err(Error::Shape(_))
    ));
}

#[test]
fn forward_matches_analytic_shapes() {
    let tap = Shape4::new(2, 4, 4, 6);
    let m = build_fusion(tap, FusionConfig::default()).unwrap();
    let f = random_tensor::<f32>(tap, 1);
    let g = random_tensor::<f32>(tap, 2);
    let (out, recs) = m.forward(&f, &g, true).unwrap();
    let s = FusionModel::<f32>::shapes(tap, 8).unwrap();
    assert_eq!(out.shape, s.output);
    assert_eq!(recs[2].output.shape, s.stream);
    assert_eq!(recs[6].input.shape, s.concatenated);
    assert_eq!(recs[8].output.shape, s.joined);
    assert_eq!(recs.len(), 12);
}

#[test]
fn fusion_is_deterministic_and_streams_are_not_tied() {
    let tap = Shape4::new(3, 4, 4, 4);
    let f = random_tensor::<f32>(tap, 1);
    let g = random_tensor::<f32>(tap, 2);
    let a = build_fusion(tap, small_config()).unwrap();
    let b = build_fusion(tap, small_config()).unwrap();
    let x = a.fuse_tensors(&f, &g).unwrap();
    assert_eq!(x, b.fuse_tensors(&f, &g).unwrap());
    assert_ne!(x, a.fuse_tensors(&g, &f).unwrap());
    let same = a.fuse_tensors(&f, &f).unwrap();
    assert_eq!(same.shape, tap);
    assert!(same.is_finite());
}

#[test]
fn mismatched_inputs_are_rejected() {
    let m = build_fusion(Shape4::new(3, 4, 4, 4), small_config()).unwrap();
    let f = random_tensor::<f32>(Shape4::new(3, 4, 4, 4), 1);
    let g = random_tensor::<f32>(Shape4::new(3, 4, 4, 6), 1);
    assert!(m.fuse_tensors(&f, &g).is_err());
    let h = random_tensor::<f32>(Shape4::new(2, 4, 4, 4), 1);
    assert!(m.fuse_tensors(&h, &h).is_err());
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let tap = Shape4::new(2, 4, 4, 4);
    let mut m = build_fusion(tap, small_config()).unwrap().cast::<f64>();
    let f = random_tensor::<f64>(tap, 5);
    let g = random_tensor::<f64>(tap, 6);
    let w = random_tensor::<f64>(tap, 7);
    let objective = |m: &FusionModel<f64>| -> f64 {
        let out = m.fuse_tensors(&f, &g).unwrap();
        out.data.iter().zip(&w.data).map(|(a, b)| a * b).sum()
    };
    let (_, recs) = m.forward(&f, &g, true).unwrap();
    let grads = m.backward(&recs, w.clone()).unwrap();
    let h = 1e-6;
    let n_units = m.units().count();
    for u in 0..n_units {
        for part in 0..4 {
            let analytic = grads[u].parts()[part][0];
            let mut eval = |delta: f64| {
                m.units_mut().nth(u).unwrap().params_mut()[part][0] += delta;
                let v = objective(&m);
                m.units_mut().nth(u).unwrap().params_mut()[part][0] -= delta;
                v
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            // Conv biases ahead of a norm have an exactly zero gradient.
            let tol = 1e-4 * fd.abs().max(analytic.abs()) + 1e-7;
            assert!((fd - analytic).abs() < tol, "unit {u} part {part}: fd {fd} vs {analytic}");
        }
    }
}

fn fixture() -> (SegModel<f32>, Vec<(Volume, MaskVolume)>) {
    let seg = SegModel::<f32>::new(BackboneConfig {
        base_channels: 2,
        seed: 9,
        ..BackboneConfig::default()
    })
    .unwrap();
    let cases = (0..2)
        .map(|i| {
            make_phantom(&PhantomConfig {
                dims: Dims3::new(12, 16, 16),
                kind: LesionKind::CurvedTube,
                seed: 40 + i,
                fade: Some(FadeBand {
                    start: 4,
                    len: 4,
                    residual: 0.2,
                }),
                ..PhantomConfig::default()
            })
            .unwrap()
        })
        .collect();
    (seg, cases)
}

fn quick_train(epochs: usize) -> FusionTrainConfig {
    FusionTrainConfig {
        epochs,
        lr: 1e-2,
        update: UpdateConfig {
            max_iters: 5,
            ..UpdateConfig::default()
        },
        ..FusionTrainConfig::default()
    }
}

#[test]
fn zero_epochs_leave_fusion_unchanged() {
    let (seg, cases) = fixture();
    let tap = seg.tap_shape(cases[0].0.dims()).unwrap();
    let mut m = build_fusion(tap, small_config()).unwrap();
    let before = m.checksum();
    let r = train_fusion(&seg, &mut m, &cases, &quick_train(0)).unwrap();
    assert!(r.epoch_losses.is_empty());
    assert_eq!(m.checksum(), before);
}

#[test]
fn training_keeps_base_frozen_and_reduces_loss() {
    let (seg, cases) = fixture();
    let base = seg.checksum();
    let tap = seg.tap_shape(cases[0].0.dims()).unwrap();
    let mut m = build_fusion(tap, small_config()).unwrap();
    let r = train_fusion(&seg, &mut m, &cases, &quick_train(8)).unwrap();
    assert_eq!(seg.checksum(), base);
    assert_eq!(m.base_hash.as_deref(), Some(base.as_str()));
    assert!(r.epoch_losses.last().unwrap() < &r.epoch_losses[0], "{:?}", r.epoch_losses);
}

#[test]
fn detached_decoder_is_trained_separately() {
    let (seg, cases) = fixture();
    let base = seg.checksum();
    let tap = seg.tap_shape(cases[0].0.dims()).unwrap();
    let cfg = FusionConfig {
        detached_decoder: true,
        ..small_config()
    };
    let mut m = build_fusion(tap, cfg).unwrap();
    train_fusion(&seg, &mut m, &cases, &quick_train(2)).unwrap();
    assert_eq!(seg.checksum(), base);
    let head = m.decode_head(&seg);
    assert_ne!(head.checksum(), base);
}

#[test]
fn checkpoint_roundtrip_and_base_check() {
    let (seg, cases) = fixture();
    let tap = seg.tap_shape(cases[0].0.dims()).unwrap();
    let mut m = build_fusion(tap, small_config()).unwrap();
    train_fusion(&seg, &mut m, &cases, &quick_train(1)).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fusion.ckpt");
    let manifest = save_fusion(&m, &path).unwrap();
    assert_eq!(manifest.tap_shape, tap);
    let (back, _) = load_fusion(&path, &seg).unwrap();
    assert_eq!(back, m);

    let other = SegModel::<f32>::new(BackboneConfig {
        base_channels: 2,
        seed: 10,
        ..BackboneConfig::default()
    })
    .unwrap();
    assert!(matches!(load_fusion(&path, &other), Err(Error::Mismatch(_))));
    assert!(matches!(m.check_base(&other), Err(Error::Mismatch(_))));
}
