use super::*;
use crate::volume::{make_phantom, LesionKind, MaskVolume, PhantomConfig};

fn tiny_config(tap_level: usize) -> BackboneConfig {
    BackboneConfig {
        in_channels: 1,
        levels: 3,
        base_channels: 2,
        tap_level,
        seed: 7,
    }
}

fn random_volume(dims: Dims3, seed: u64) -> Volume {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..dims.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Volume::new(Shape4::new(1, dims.d, dims.h, dims.w), data, [2.0, 1.0, 1.0], vec!["CT".into()]).unwrap()
}

#[test]
fn tap_shapes_follow_levels() {
    let m = SegModel::<f32>::new(BackboneConfig::default()).unwrap();
    let s = m.tap_shape(Dims3::new(32, 64, 64)).unwrap();
    assert_eq!(s, Shape4::new(32, 16, 32, 32));

    let m1 = m.with_tap_level(1).unwrap();
    assert_eq!(m1.tap_shape(Dims3::new(32, 64, 64)).unwrap(), Shape4::new(16, 32, 64, 64));
    let m3 = m.with_tap_level(3).unwrap();
    assert_eq!(m3.tap_shape(Dims3::new(32, 64, 64)).unwrap(), Shape4::new(32, 8, 16, 16));
}

#[test]
fn tap_level_beyond_depth_is_rejected() {
    let cfg = BackboneConfig {
        tap_level: 4,
        ..BackboneConfig::default()
    };
    assert!(matches!(SegModel::<f32>::new(cfg), Err(Error::Config(_))));
}

#[test]
fn indivisible_dims_are_rejected() {
    let m = SegModel::<f32>::new(tiny_config(2)).unwrap();
    assert!(matches!(m.tap_shape(Dims3::new(10, 16, 16)), Err(Error::Shape(_))));
    let v = random_volume(Dims3::new(6, 8, 8), 0);
    assert!(matches!(m.predict(&v), Err(Error::Shape(_))));
}

#[test]
fn forward_tap_matches_declared_shape() {
    for t in 1..=3 {
        let m = SegModel::<f32>::new(tiny_config(t)).unwrap();
        let v = random_volume(Dims3::new(8, 8, 12), 1);
        let (p, f) = m.predict(&v).unwrap();
        assert_eq!(f.shape(), m.tap_shape(v.dims()).unwrap());
        assert_eq!(f.provenance, Provenance::Original);
        assert_eq!(p.dims, v.dims());
        assert!(p.prob.iter().all(|x| (0.0..=1.0).contains(x)));
    }
}

#[test]
fn decode_reproduces_prediction_bit_exactly() {
    for t in 1..=3 {
        let m = SegModel::<f32>::new(tiny_config(t)).unwrap();
        let v = random_volume(Dims3::new(8, 16, 8), 2);
        let (p, f) = m.predict(&v).unwrap();
        let q = m.decode_from(&f).unwrap();
        assert_eq!(p.prob, q.prob, "tap level {t}");
    }
}

#[test]
fn untrained_prediction_is_deterministic() {
    let v = random_volume(Dims3::new(8, 8, 8), 3);
    let a = SegModel::<f32>::new(tiny_config(2)).unwrap().predict(&v).unwrap().0;
    let b = SegModel::<f32>::new(tiny_config(2)).unwrap().predict(&v).unwrap().0;
    assert_eq!(a.prob, b.prob);
}

#[test]
fn decode_rejects_foreign_feature_shape() {
    let m = SegModel::<f32>::new(tiny_config(2)).unwrap();
    let v = random_volume(Dims3::new(8, 8, 8), 4);
    let (_, f) = m.predict(&v).unwrap();
    let m1 = m.with_tap_level(1).unwrap();
    assert!(m1.decode_from(&f).is_err());
    let bad = Tensor::zeros(Shape4::new(1, 1, 1, 1));
    assert!(f.with_data(bad, Provenance::Updated).is_err());
}

#[test]
fn perturbation_stays_inside_decoder_reach() {
    for t in 1..=3 {
        let m = SegModel::<f32>::new(tiny_config(t)).unwrap();
        let v = random_volume(Dims3::new(16, 8, 8), 5);
        let (p, f) = m.predict(&v).unwrap();
        let s = f.shape();
        for d0 in [0, s.d / 2, s.d - 1] {
            let mut data = f.data.clone();
            let plane = s.h * s.w;
            for c in 0..s.c {
                for j in 0..plane {
                    data.data[(c * s.d + d0) * plane + j] += 3.0;
                }
            }
            let g = f.with_data(data, Provenance::Updated).unwrap();
            let q = m.decode_from(&g).unwrap();
            let (lo, hi) = m.decoder_reach(d0, 16);
            let mut changed_inside = false;
            for z in 0..16 {
                let same = p.axial(z) == q.axial(z);
                if z < lo || z > hi {
                    assert!(same, "tap {t} d0 {d0}: slice {z} outside [{lo},{hi}] changed");
                } else {
                    changed_inside |= !same;
                }
            }
            assert!(changed_inside);
        }
    }
}

#[test]
fn tap_support_inverts_reach() {
    let m = SegModel::<f32>::new(tiny_config(2)).unwrap();
    for s in 0..16 {
        let sup = m.tap_support(s, 16);
        assert!(!sup.is_empty());
        for d in 0..8 {
            let (lo, hi) = m.decoder_reach(d, 16);
            assert_eq!(sup.contains(&d), lo <= s && s <= hi);
        }
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

#[test]
fn tap_gradient_matches_finite_differences() {
    let m = SegModel::<f64>::new(tiny_config(2)).unwrap();
    let v = random_volume(Dims3::new(4, 4, 4), 6);
    let x: Tensor<f64> = v.to_tensor().cast();
    let out = m.forward(&x, false).unwrap();
    let f = out.feature;
    let target: Vec<bool> = (0..64).map(|i| i % 3 == 0).collect();
    let loss_at = |f: &FeatureMap<f64>| {
        let logits = m.decode_logits(f).unwrap();
        seg_loss(&logits, &target, LossKind::Hybrid, Some(&[1])).unwrap().value
    };
    let (logits, tape) = m.decode_recorded(&f).unwrap();
    let lv = seg_loss(&logits, &target, LossKind::Hybrid, Some(&[1])).unwrap();
    let g = m.decode_backward(&tape, &lv.grad).unwrap();
    let h = 1e-6;
    let mut checked = 0;
    for i in (0..f.data.data.len()).step_by(3) {
        let mut a = f.data.clone();
        a.data[i] += h;
        let mut b = f.data.clone();
        b.data[i] -= h;
        let fd = (loss_at(&f.with_data(a, Provenance::Updated).unwrap())
            - loss_at(&f.with_data(b, Provenance::Updated).unwrap()))
            / (2.0 * h);
        if fd.abs() > 1e-7 || g.data[i].abs() > 1e-7 {
            assert!(rel_err(fd, g.data[i]) < 1e-4, "i={i}: fd {fd} vs {}", g.data[i]);
            checked += 1;
        }
    }
    assert!(checked > 5);
}

#[test]
fn weight_gradient_matches_finite_differences() {
    let mut m = SegModel::<f64>::new(tiny_config(2)).unwrap();
    let v = random_volume(Dims3::new(4, 4, 4), 8);
    let x: Tensor<f64> = v.to_tensor().cast();
    let target: Vec<bool> = (0..64).map(|i| i % 5 < 2).collect();
    let out = m.forward(&x, true).unwrap();
    let lv = seg_loss(&out.logits, &target, LossKind::Hybrid, None).unwrap();
    let grads = m.backward(&out, &lv.grad).unwrap();
    let h = 1e-6;
    let n_convs = m.convs().len();
    for k in 0..n_convs {
        let last = m.convs()[k].weight.len() - 1;
        for idx in [0usize, last / 2, last] {
            let analytic = grads[k].weight[idx];
            let mut eval = |delta: f64| {
                m.convs_mut()[k].weight[idx] += delta;
                let o = m.forward(&x, false).unwrap();
                m.convs_mut()[k].weight[idx] -= delta;
                seg_loss(&o.logits, &target, LossKind::Hybrid, None).unwrap().value
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            if fd.abs() > 1e-7 || analytic.abs() > 1e-7 {
                assert!(rel_err(fd, analytic) < 1e-4, "conv {k} w{idx}: fd {fd} vs {analytic}");
            }
        }
    }
}

#[test]
fn checksum_tracks_weights() {
    let a = SegModel::<f32>::new(tiny_config(2)).unwrap();
    let mut b = a.clone();
    assert_eq!(a.checksum(), b.checksum());
    b.head.bias[0] += 1.0;
    assert_ne!(a.checksum(), b.checksum());
}

fn phantom_cases(n: usize) -> Vec<(Volume, MaskVolume)> {
    (0..n)
        .map(|i| {
            make_phantom(&PhantomConfig {
                dims: Dims3::new(12, 16, 16),
                kind: LesionKind::EllipsoidStack,
                seed: 100 + i as u64,
                ..PhantomConfig::default()
            })
            .unwrap()
        })
        .collect()
}

#[test]
fn zero_epochs_leave_weights_unchanged() {
    let mut m = SegModel::<f32>::new(tiny_config(2)).unwrap();
    let before = m.checksum();
    let cfg = TrainConfig {
        epochs: 0,
        ..TrainConfig::default()
    };
    let r = train_backbone(&mut m, &phantom_cases(2), &cfg).unwrap();
    assert!(r.epoch_losses.is_empty());
    assert_eq!(m.checksum(), before);
}

#[test]
fn training_needs_two_cases() {
    let mut m = SegModel::<f32>::new(tiny_config(2)).unwrap();
    assert!(train_backbone(&mut m, &phantom_cases(1), &TrainConfig::default()).is_err());
}

#[test]
fn training_reduces_loss() {
    let mut m = SegModel::<f32>::new(tiny_config(2)).unwrap();
    let cfg = TrainConfig {
        epochs: 6,
        lr: 1e-2,
        ..TrainConfig::default()
    };
    let r = train_backbone(&mut m, &phantom_cases(3), &cfg).unwrap();
    assert_eq!(r.epoch_losses.len(), 6);
    assert!(r.epoch_losses[5] < r.epoch_losses[0], "{:?}", r.epoch_losses);
}

#[test]
fn checkpoint_roundtrip_and_tamper_detection() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    let m = SegModel::<f32>::new(tiny_config(2)).unwrap();
    let manifest = save_backbone(&m, LossKind::Dice, &path).unwrap();
    assert_eq!(manifest.loss, LossKind::Dice);
    let (back, read) = load_backbone(&path).unwrap();
    assert_eq!(back, m);
    assert_eq!(read, manifest);

    let mut bytes = std::fs::read(&path).unwrap();
    let last = bytes.len() - 1;
    bytes[last] ^= 0x40;
    std::fs::write(&path, &bytes).unwrap();
    assert!(matches!(load_backbone(&path), Err(Error::Mismatch(_))));

    std::fs::write(&path, b"garbage").unwrap();
    assert!(matches!(load_backbone(&path), Err(Error::Format(_))));
}
