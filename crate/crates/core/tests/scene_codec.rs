use std::collections::HashSet;

use mmvd_core::codec::{self, CodecConfig, Plane};
use mmvd_core::dataset::{self, DatasetError};
use mmvd_core::scene::{self, DatasetConfig, MultiModalVideo};
use mmvd_core::tensor::Tensor;
use mmvd_core::Modality;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn thousand_scenes_satisfy_invariants() {
    let cfg = DatasetConfig::default();
    for seed in 0..1000 {
        let spec = scene::sample_scene(seed, &cfg).unwrap();
        scene::check_scene(&spec).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
    }
}

#[test]
fn distinct_seeds_give_distinct_scenes() {
    let cfg = DatasetConfig::default();
    let mut seen = HashSet::new();
    for seed in 0..500 {
        let spec = scene::sample_scene(seed, &cfg).unwrap();
        assert!(seen.insert(format!("{:?}", (spec.shapes, spec.background))));
    }
}

#[test]
fn rendered_modalities_are_consistent() {
    let cfg = DatasetConfig::default();
    for seed in 0..64 {
        let spec = scene::sample_scene(seed, &cfg).unwrap();
        let v = scene::render(&spec);
        scene::check_consistency(&spec, &v).unwrap_or_else(|e| panic!("seed {seed}: {e}"));
    }
}

#[test]
fn edge_count_matches_transition_rescan() {
    let cfg = DatasetConfig::default();
    for seed in 0..32 {
        let v = scene::render(&scene::sample_scene(seed, &cfg).unwrap());
        let (h, w) = (v.height, v.width);
        let mut marked = HashSet::new();
        for t in 0..v.frames {
            for y in 0..h {
                for x in 0..w {
                    let i = (t * h + y) * w + x;
                    if x + 1 < w && v.seg[i] != v.seg[i + 1] {
                        marked.insert(i);
                        marked.insert(i + 1);
                    }
                    if y + 1 < h && v.seg[i] != v.seg[i + w] {
                        marked.insert(i);
                        marked.insert(i + w);
                    }
                }
            }
        }
        let count = v.edges.iter().filter(|&&e| e == 1).count();
        assert_eq!(count, marked.len(), "seed {seed}");
    }
}

#[test]
fn dataset_roundtrip_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = DatasetConfig::default();
    let samples: Vec<(u64, MultiModalVideo)> = (10..14)
        .map(|s| (s, scene::render(&scene::sample_scene(s, &cfg).unwrap())))
        .collect();
    dataset::write_dataset(dir.path(), &samples).unwrap();
    let back = dataset::read_dataset(dir.path()).unwrap();
    assert_eq!(back, samples);

    let files = std::fs::read_dir(dir.path())
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .path()
                .extension()
                .is_some_and(|x| x == "ommv")
        })
        .count();
    assert_eq!(dataset::read_manifest(dir.path()).unwrap().len(), files);

    let first = dir.path().join(dataset::sample_file_name(0));
    let mut bytes = std::fs::read(&first).unwrap();
    bytes[..4].copy_from_slice(b"MMMM");
    std::fs::write(&first, bytes).unwrap();
    let err = dataset::read_dataset(dir.path()).unwrap_err();
    assert!(matches!(err, DatasetError::BadMagic(_)), "{err}");
}

fn random_video(rng: &mut ChaCha8Rng, f: usize, h: usize, w: usize) -> Tensor<f32> {
    let data = (0..f * h * w * 3).map(|_| rng.random::<f32>()).collect();
    Tensor::new(&[f, h, w, 3], data).unwrap()
}

#[test]
fn codec_roundtrip_is_bit_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (cfg, dims) in [
        (CodecConfig::TOY, (8, 32, 32)),
        (CodecConfig::PAPER, (8, 16, 16)),
    ] {
        for _ in 0..100 {
            let v = random_video(&mut rng, dims.0, dims.1, dims.2);
            let z = codec::encode(&v, &cfg).unwrap();
            assert_eq!(z.shape()[3], cfg.channels());
            assert!(z.data().iter().all(|x| (-1.0..=1.0).contains(x)));
            let back = codec::decode(&z, &cfg).unwrap();
            assert_eq!(back.data(), v.data());
        }
    }
}

#[test]
fn encode_is_affine_linear() {
    let cfg = CodecConfig::TOY;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a = random_video(&mut rng, 2, 4, 4);
    let b = random_video(&mut rng, 2, 4, 4);
    let (alpha, beta) = (0.3f64, 0.6f64);
    let mix: Vec<f64> = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| alpha * x as f64 + beta * y as f64)
        .collect();
    let mix = Tensor::new(a.shape(), mix).unwrap();
    let ea = codec::encode(&a.cast::<f64>(), &cfg).unwrap();
    let eb = codec::encode(&b.cast::<f64>(), &cfg).unwrap();
    let em = codec::encode(&mix, &cfg).unwrap();
    for i in 0..em.len() {
        // 2(αa+βb)-1 = α(2a-1) + β(2b-1) + (α+β-1)
        let want = alpha * ea.data()[i] + beta * eb.data()[i] + (alpha + beta - 1.0);
        assert!((em.data()[i] - want).abs() < 1e-12);
    }
}

#[test]
fn planes_survive_color_roundtrip() {
    let cfg = DatasetConfig::default();
    for seed in 0..8 {
        let v = scene::render(&scene::sample_scene(seed, &cfg).unwrap());
        let seg = codec::from_color(&codec::to_color::<f32>(&v, Modality::Seg).unwrap(), Modality::Seg);
        assert_eq!(seg, Plane::Seg(v.seg.clone()));
        let e = codec::from_color(&codec::to_color::<f32>(&v, Modality::Edges).unwrap(), Modality::Edges);
        assert_eq!(e, Plane::Edges(v.edges.clone()));
        let Plane::Depth(d) =
            codec::from_color(&codec::to_color::<f32>(&v, Modality::Depth).unwrap(), Modality::Depth)
        else {
            unreachable!()
        };
        for (a, &q) in d.iter().zip(&v.depth) {
            assert!((*a as f64 - q as f64 / 65535.0).abs() <= 1.0 / 65535.0);
        }
        let lat = codec::encode_video::<f32>(&v, &cfg.codec).unwrap();
        assert_eq!(codec::decode_video(&lat, &cfg.codec, v.caption.clone()).unwrap(), v);
    }
}

proptest! {
    #[test]
    fn ommv_roundtrip(seed in any::<u64>()) {
        let cfg = DatasetConfig { frames: 2, height: 16, width: 20, codec: CodecConfig { fh: 4, fw: 4, ft: 2 } };
        let v = scene::render(&scene::sample_scene(seed, &cfg).unwrap());
        let bytes = dataset::encode_sample(&v).unwrap();
        prop_assert_eq!(dataset::decode_sample(&bytes).unwrap(), v);
    }
}
