use mmvd_core::control::{assign_roles, loss_mask, Role, RoleAssignment, TaskKind};
use mmvd_core::model::{ModelConfig, OmniDiT};
use mmvd_core::tensor::{grad_check_params, Graph, ParamStore, Tensor, Var};
use mmvd_core::Modality;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            // Box-Muller, independent of the model's own sampler
            let u1: f64 = rng.random::<f64>().max(1e-300);
            let u2: f64 = rng.random();
            std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn latents(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    (0..4).map(|_| randn(rng, &cfg.latent_shape(), 1.0)).collect()
}

/// Perturbs every parameter so that no gradient path is degenerate.
fn jitter(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng, std: f64) {
    for p in store.iter_mut() {
        let noise = randn(rng, p.value.shape(), std);
        for (v, n) in p.value.data_mut().iter_mut().zip(noise.data()) {
            *v += n;
        }
    }
}

fn weighted_loss(
    g: &mut Graph<f64>,
    outs: &[Var],
    weights: &[Tensor<f64>],
    mask: [f64; 4],
) -> Var {
    let mut total = None;
    for ((&o, w), m) in outs.iter().zip(weights).zip(mask) {
        if m == 0.0 {
            continue;
        }
        let w = g.constant(w.clone());
        let p = g.mul(o, w).unwrap();
        let s = g.sum(p);
        let s = g.scale(s, m);
        total = Some(match total {
            None => s,
            Some(t) => g.add(t, s).unwrap(),
        });
    }
    total.expect("at least one modality in the loss")
}

#[test]
fn toy_parameter_count_closed_form() {
    let (d, depth, c, m, v) = (256usize, 4usize, 96usize, 4usize, 18usize);
    let role = 2 * c;
    let embed = m * c * d + d;
    let caption = v * d;
    let time = 2 * (d * d + d);
    let attn = (d * 3 * d + 3 * d) + (d * d + d);
    let mlp = (d * 4 * d + 4 * d) + (4 * d * d + d);
    let norms = 2 * 2 * d;
    let modulation = d * 6 * d + 6 * d;
    let final_layer = 2 * d + d * 2 * d + 2 * d;
    let trunk = depth * (attn + mlp + norms + modulation);
    let msph = m * (d * c + c);
    let shared = d * m * c + m * c;

    let cfg = ModelConfig::toy();
    assert_eq!((cfg.model_dim, cfg.depth, cfg.heads, cfg.latent_channels), (256, 4, 4, 96));
    let expected = role + embed + caption + time + trunk + final_layer + msph;
    assert_eq!(cfg.param_count(), expected);
    let model = OmniDiT::<f32>::init(cfg.clone(), 0).unwrap();
    assert_eq!(model.params().numel(), expected);

    let mut no_msph = cfg;
    no_msph.use_msph = false;
    let model = OmniDiT::<f32>::init(no_msph, 0).unwrap();
    assert_eq!(model.params().numel(), expected - msph + shared);
}

#[test]
fn head_parameter_accounting() {
    let cfg = ModelConfig::toy();
    let (d, c) = (cfg.model_dim, cfg.latent_channels);
    let head_numel = |model: &OmniDiT<f32>| {
        let mut ids: Vec<_> = Modality::ALL.iter().flat_map(|&m| model.head_params(m)).collect();
        ids.sort_by_key(|id| id.0);
        ids.dedup();
        ids.iter().map(|&id| model.params().value(id).len()).sum::<usize>()
    };
    let msph = OmniDiT::<f32>::init(cfg.clone(), 0).unwrap();
    assert_eq!(head_numel(&msph), 4 * (d * c + c));
    let mut shared_cfg = cfg;
    shared_cfg.use_msph = false;
    let shared = OmniDiT::<f32>::init(shared_cfg, 0).unwrap();
    assert_eq!(head_numel(&shared), d * 4 * c + 4 * c);
}

#[test]
fn build_input_channel_layout() {
    let cfg = ModelConfig::toy();
    let model = OmniDiT::<f64>::init(cfg.clone(), 0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let xs = latents(&cfg, &mut rng);
    let mut g = Graph::inference();
    let vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
    let fused = model.build_input(&mut g, &vars).unwrap();
    assert_eq!(g.shape(fused), [4, 8, 8, 384]);
    let c = cfg.latent_channels;
    let out = g.value(fused).data().to_vec();
    for (cell, chunk) in out.chunks_exact(4 * c).enumerate() {
        for (m, x) in xs.iter().enumerate() {
            assert_eq!(&chunk[m * c..(m + 1) * c], &x.data()[cell * c..(cell + 1) * c]);
        }
    }

    let mut zeroed = xs.clone();
    zeroed[2] = Tensor::zeros(&cfg.latent_shape());
    let vars: Vec<Var> = zeroed.iter().map(|x| g.constant(x.clone())).collect();
    let fused = model.build_input(&mut g, &vars).unwrap();
    for chunk in g.value(fused).data().chunks_exact(4 * c) {
        assert!(chunk[2 * c..3 * c].iter().all(|&v| v == 0.0));
        assert!(chunk[..2 * c].iter().chain(&chunk[3 * c..]).any(|&v| v != 0.0));
    }

    let bad = g.constant(Tensor::zeros(&[4, 8, 8, 95]));
    let mut vars: Vec<Var> = xs.iter().map(|x| g.constant(x.clone())).collect();
    vars[1] = bad;
    assert!(model.build_input(&mut g, &vars).is_err());
    assert!(model.build_input(&mut g, &vars[..3]).is_err());
}

#[test]
fn forward_is_deterministic() {
    let cfg = ModelConfig::tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut model = OmniDiT::<f64>::init(cfg.clone(), 4).unwrap();
    jitter(model.params_mut(), &mut rng, 0.3);
    let xs = latents(&cfg, &mut rng);
    let roles = assign_roles(TaskKind::CondDepth);
    let run = || {
        let mut g = Graph::inference();
        let outs = model.predict(&mut g, &xs, &roles, 0.3, &[2, 10]).unwrap();
        outs.iter().map(|&o| g.value(o).clone()).collect::<Vec<_>>()
    };
    let a = run();
    assert_eq!(a, run());
    assert!(a.iter().all(|t| t.shape() == cfg.latent_shape()));
    assert!(a.iter().any(|t| t.data().iter().any(|&v| v != 0.0)));
}

#[test]
fn disabled_role_embedding_is_ignored() {
    let mut cfg = ModelConfig::tiny();
    cfg.use_modality_embedding = false;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut model = OmniDiT::<f64>::init(cfg.clone(), 1).unwrap();
    jitter(model.params_mut(), &mut rng, 0.3);
    let xs = latents(&cfg, &mut rng);
    let roles = assign_roles(TaskKind::CondSeg);
    let eval = |model: &OmniDiT<f64>| {
        let mut g = Graph::inference();
        let outs = model.predict(&mut g, &xs, &roles, 0.7, &[1]).unwrap();
        outs.iter().map(|&o| g.value(o).clone()).collect::<Vec<_>>()
    };
    let before = eval(&model);
    let mut changed = model.clone();
    for id in model.role_embedding_params() {
        for v in changed.params_mut().get_mut(id).value.data_mut() {
            *v += 5.0;
        }
    }
    assert_eq!(before, eval(&changed));

    cfg.use_modality_embedding = true;
    let enabled = OmniDiT::from_params(cfg, changed.into_params()).unwrap();
    assert_ne!(before, eval(&enabled));
}

#[test]
fn msph_heads_are_independent() {
    let cfg = ModelConfig::tiny();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for task in [TaskKind::CondRgb, TaskKind::CondDepth, TaskKind::CondSeg, TaskKind::CondEdges] {
        let mut model = OmniDiT::<f64>::init(cfg.clone(), 2).unwrap();
        jitter(model.params_mut(), &mut rng, 0.2);
        let xs = latents(&cfg, &mut rng);
        let weights = latents(&cfg, &mut rng);
        let roles = assign_roles(task);
        let mask = loss_mask(&roles);
        let mut g = Graph::new();
        let outs = model.predict(&mut g, &xs, &roles, 0.5, &[3]).unwrap();
        let loss = weighted_loss(&mut g, &outs, &weights, mask);
        let grads = g.backward(loss).unwrap();
        let mut store = model.params().clone();
        store.zero_grad();
        grads.accumulate_into(&mut store);
        for m in Modality::ALL {
            let any_nonzero = model.head_params(m).iter().any(|&id| {
                store.get(id).grad.as_ref().unwrap().data().iter().any(|&v| v != 0.0)
            });
            assert_eq!(any_nonzero, mask[m.index()] != 0.0, "{task} head {m}");
        }
    }
}

#[test]
fn full_model_gradient_check() {
    let configs = {
        let base = ModelConfig::tiny();
        let mut shared = base.clone();
        shared.use_msph = false;
        vec![base, shared]
    };
    let roles = RoleAssignment::new([Role::Generation, Role::Conditioning, Role::Generation, Role::Conditioning])
        .unwrap();
    for cfg in configs {
        for seed in 0..3u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let mut model = OmniDiT::<f64>::init(cfg.clone(), seed).unwrap();
            jitter(model.params_mut(), &mut rng, 0.3);
            let xs = latents(&cfg, &mut rng);
            let weights = latents(&cfg, &mut rng);
            let t = rng.random_range(0.05..0.95);
            let report = grad_check_params(
                model.params(),
                |g, store| {
                    let m = OmniDiT::from_params(cfg.clone(), store.clone()).unwrap();
                    let outs = m.predict(g, &xs, &roles, t, &[4, 11, 14]).unwrap();
                    Ok(weighted_loss(g, &outs, &weights, [1.0; 4]))
                },
                1e-3,
            )
            .unwrap();
            assert_eq!(report.checked, cfg.param_count());
            assert!(
                report.max_rel_error < 1e-4,
                "msph={} seed {seed}: {}",
                cfg.use_msph,
                report.max_rel_error
            );
        }
    }
}
