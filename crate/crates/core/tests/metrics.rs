use mmvd_core::metrics::{depth_metrics, edge_f1, psnr, seg_miou, MetricReport, SampleMetrics};
use mmvd_core::scene::{render, sample_scene, DatasetConfig};
use proptest::prelude::*;

proptest! {
    #[test]
    fn depth_is_affine_invariant(
        gt in prop::collection::vec(0.1f32..1.0, 2..64),
        a in 0.2f32..5.0,
        b in -0.5f32..0.5,
    ) {
        prop_assume!(gt.iter().any(|&v| (v - gt[0]).abs() > 1e-3));
        let pred: Vec<f32> = gt.iter().map(|&d| a * d + b).collect();
        let (absrel, d1) = depth_metrics(&pred, &gt).unwrap();
        prop_assert!(absrel < 1e-4, "absrel {}", absrel);
        prop_assert_eq!(d1, 1.0);
    }

    #[test]
    fn miou_ignores_relabeling(
        gt in prop::collection::vec(0u8..4, 1..80),
        pred in prop::collection::vec(0u8..4, 1..80),
        perm in Just([1u8, 2, 3]).prop_shuffle(),
    ) {
        let n = gt.len().min(pred.len());
        let (gt, pred) = (&gt[..n], &pred[..n]);
        let relabeled: Vec<u8> = pred.iter().map(|&p| if p == 0 { 0 } else { perm[p as usize - 1] }).collect();
        let a = seg_miou(pred, gt).unwrap();
        prop_assert_eq!(a, seg_miou(&relabeled, gt).unwrap());
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn edge_f1_is_symmetric(
        a in prop::collection::vec(0u8..2, 48),
        b in prop::collection::vec(0u8..2, 48),
    ) {
        let ab = edge_f1(&a, &b, 2, 4, 6, 1).unwrap();
        prop_assert_eq!(ab, edge_f1(&b, &a, 2, 4, 6, 1).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
    }
}

#[test]
fn batched_report_is_mean_of_samples() {
    let dc = DatasetConfig::default();
    let vids: Vec<_> = (0..4u64).map(|s| render(&sample_scene(s, &dc).unwrap())).collect();
    let per: Vec<SampleMetrics> = vids
        .iter()
        .zip(vids.iter().cycle().skip(1))
        .map(|(p, g)| SampleMetrics {
            miou: Some(seg_miou(&p.seg, &g.seg).unwrap()),
            psnr: Some(psnr(&p.rgb_f32(), &g.rgb_f32()).unwrap()),
            ..Default::default()
        })
        .collect();
    let r = MetricReport::aggregate("t2v", &per);
    let mean = per.iter().map(|s| s.miou.unwrap()).sum::<f64>() / 4.0;
    assert!((r.miou.unwrap() - mean).abs() < 1e-12);
    assert_eq!(r.n_samples, 4);
    r.check().unwrap();
}

#[test]
fn identity_predictions_are_perfect() {
    let v = render(&sample_scene(9, &DatasetConfig::default()).unwrap());
    let d = v.depth_f32();
    assert_eq!(depth_metrics(&d, &d).unwrap(), (0.0, 1.0));
    assert_eq!(seg_miou(&v.seg, &v.seg).unwrap(), 1.0);
    assert_eq!(edge_f1(&v.edges, &v.edges, v.frames, v.height, v.width, 1).unwrap(), 1.0);
    assert_eq!(psnr(&v.rgb_f32(), &v.rgb_f32()).unwrap(), f64::INFINITY);
}
