use std::sync::Arc;

use propaseg_core::backbone::{build_backbone, train_backbone, BackboneConfig, TrainConfig};
use propaseg_core::exec;
use propaseg_core::fusion::{build_fusion, train_fusion, FusionConfig, FusionTrainConfig};
use propaseg_core::metrics::MetricReport;
use propaseg_core::orchestrator::{Session, SessionConfig};
use propaseg_core::update::{SliceEdit, UpdateConfig};
use propaseg_core::volume::{make_phantom, Dims3, FadeBand, LesionKind, PhantomConfig};

fn bits(v: &[f32]) -> Vec<u32> {
    v.iter().map(|x| x.to_bits()).collect()
}

/// Train, fuse, edit and score once; returns every float produced as bits.
fn pipeline() -> Vec<u64> {
    let dims = Dims3::new(12, 16, 16);
    let case = |seed, fade| {
        make_phantom(&PhantomConfig {
            dims,
            kind: LesionKind::CurvedTube,
            seed,
            fade,
            ..PhantomConfig::default()
        })
        .unwrap()
    };
    let train: Vec<_> = (0..3).map(|i| case(40 + i, None)).collect();
    let mut seg = build_backbone(BackboneConfig {
        base_channels: 2,
        ..BackboneConfig::default()
    })
    .unwrap();
    let tr = train_backbone(&mut seg, &train, &TrainConfig { epochs: 2, ..TrainConfig::default() }).unwrap();
    let band = Some(FadeBand { start: 3, len: 3, residual: 0.2 });
    let faded: Vec<_> = (0..2).map(|i| case(50 + i, band)).collect();
    let mut fm = build_fusion(seg.tap_shape(dims).unwrap(), FusionConfig { expansion: 2, ..FusionConfig::default() }).unwrap();
    let update = UpdateConfig { max_iters: 4, ..UpdateConfig::default() };
    let fr = train_fusion(&seg, &mut fm, &faded, &FusionTrainConfig { epochs: 1, update: update.clone(), ..FusionTrainConfig::default() }).unwrap();
    let (v, m) = case(60, band);
    let mut session = Session::new(Arc::new(seg), Some(Arc::new(fm)), &v, SessionConfig { update, ..SessionConfig::default() }).unwrap();
    session.propagate_edit(SliceEdit::new(4, m.axial(4).to_vec())).unwrap();
    session.propagate_edit(SliceEdit::new(9, m.axial(9).to_vec())).unwrap();
    let report = MetricReport::compute(&session.refined().binarize(m.spacing), &m).unwrap();

    let mut out: Vec<u64> = tr.epoch_losses.iter().chain(&fr.epoch_losses).map(|v| v.to_bits()).collect();
    out.extend(bits(&session.refined().prob).into_iter().map(u64::from));
    out.extend(bits(&session.feature().data.data).into_iter().map(u64::from));
    out.push(report.dsc.to_bits());
    out.push(report.hd95_mm.to_bits());
    out.extend(report.per_slice_hd_mm.iter().map(|h| h.map_or(u64::MAX, f64::to_bits)));
    out
}

#[test]
fn parallel_and_sequential_results_are_bit_identical() {
    exec::set_parallel(true);
    let par = pipeline();
    exec::set_parallel(false);
    let seq = pipeline();
    exec::set_parallel(true);
    assert_eq!(par.len(), seq.len());
    assert!(par == seq, "results differ between execution modes");
}
