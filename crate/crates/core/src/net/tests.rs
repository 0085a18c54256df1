use super::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_field(c: usize, d: usize, seed: u64) -> Field {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Field::from_fn(c, d, d, |_, _, _| rng.gen_range(-1.0..1.0))
}

/// Random values in every tensor, frozen ones included unless `keep_frozen`.
fn scramble(p: &mut MgNOParams, cfg: &MgNOConfig, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for slot in p.slots(cfg) {
        if slot.frozen {
            continue;
        }
        slot.data.iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
    }
}

#[test]
fn init_is_deterministic_and_bounded() {
    let cfg = NetShape::new(2, 3, 2).config().unwrap();
    let a = init_params(&cfg).unwrap();
    assert_eq!(a, init_params(&cfg).unwrap());
    let mut other = cfg.clone();
    other.seed = 1;
    assert_ne!(a, init_params(&other).unwrap());
    for layer in &a.layers {
        assert!(layer.mix.data().iter().all(|v| *v == 0.0));
        assert!(layer.bias.iter().all(|v| *v == 0.0));
    }
    let mut kernels: Vec<&Kernel> = a.output.named().into_iter().map(|(_, k)| k).collect();
    for layer in &a.layers {
        kernels.extend(layer.wmg.named().into_iter().map(|(_, k)| k));
    }
    for k in kernels {
        let s = 1.0 / ((k.in_channels() * k.kh() * k.kw()) as f64).sqrt();
        assert!(k.weights().iter().all(|w| w.abs() <= s));
    }
}

#[test]
fn zero_parameters_give_zero_output() {
    let cfg = NetShape::new(1, 2, 2).config().unwrap();
    let mut p = init_params(&cfg).unwrap();
    for slot in p.slots(&cfg) {
        slot.data.fill(0.0);
    }
    let out = forward(&random_field(1, 8, 3), &p, &cfg).unwrap();
    assert_eq!(out, Field::zeros(1, 8, 8));
}

#[test]
fn forward_is_pure() {
    let cfg = NetShape::new(2, 2, 2).config().unwrap();
    let mut p = init_params(&cfg).unwrap();
    scramble(&mut p, &cfg, 4);
    let u = random_field(1, 8, 9);
    assert_eq!(forward(&u, &p, &cfg).unwrap(), forward(&u, &p, &cfg).unwrap());
}

#[test]
fn boundary_preserving_ring_is_zero() {
    let mut shape = NetShape::new(2, 3, 3);
    shape.boundary_preserving = true;
    shape.post = 1;
    let cfg = shape.config().unwrap();
    for seed in 0..10 {
        let mut p = init_params(&MgNOConfig { seed, ..cfg.clone() }).unwrap();
        scramble(&mut p, &cfg, seed + 100);
        let out = forward(&random_field(1, 16, seed), &p, &cfg).unwrap();
        assert!(out.boundary_ring().iter().all(|v| *v == 0.0));
        assert!(out.max_abs() > 0.0);
    }
}

#[test]
fn periodic_network_is_shift_equivariant() {
    let mut shape = NetShape::new(2, 2, 3);
    shape.boundary = BoundaryMode::PeriodicCircular;
    shape.restrict_boundary = BoundaryMode::PeriodicCircular;
    shape.post = 1;
    let cfg = shape.config().unwrap();
    let mut p = init_params(&cfg).unwrap();
    scramble(&mut p, &cfg, 6);
    let u = random_field(1, 16, 2);
    let out = forward(&u, &p, &cfg).unwrap();
    // Shifts must be multiples of 2^(J-1) to commute with the stride-2 levels.
    for (dy, dx) in [(4, 0), (0, 8), (-4, 12)] {
        let shifted = forward(&u.roll(dy, dx), &p, &cfg).unwrap();
        let diff = shifted.sub(&out.roll(dy, dx)).unwrap().max_abs();
        assert_eq!(diff, 0.0, "shift ({dy},{dx})");
    }
}

#[test]
fn identity_activation_makes_network_linear() {
    let mut cfg = NetShape::new(1, 2, 2).config().unwrap();
    cfg.activation = Activation::Identity;
    let p = init_params(&cfg).unwrap();
    let (u, v) = (random_field(1, 8, 1), random_field(1, 8, 2));
    let lhs = forward(&u.add(&v).unwrap(), &p, &cfg).unwrap();
    let rhs = forward(&u, &p, &cfg).unwrap().add(&forward(&v, &p, &cfg).unwrap()).unwrap();
    assert!(lhs.sub(&rhs).unwrap().max_abs() < 1e-12);
}

#[test]
fn param_count_enumerates_tensors() {
    let shape = NetShape { pre: 1, post: 0, ..NetShape::new(1, 1, 1) };
    let cfg = shape.config().unwrap();
    // K0 + A + B^{1,1} per W_Mg (9 each), plus B and b of the hidden layer.
    assert_eq!(param_count(&cfg).unwrap(), 2 * 27 + 1 + 1);
    let mut p = init_params(&cfg).unwrap();
    assert_eq!(p.slots(&cfg).iter().map(|s| s.data.len()).sum::<usize>(), 56);

    let mut bp = shape.clone();
    bp.boundary_preserving = true;
    assert_eq!(param_count(&bp.config().unwrap()).unwrap(), 55);
}

#[test]
fn param_count_scaling() {
    let count = |width: usize, levels: usize| {
        let shape = NetShape { pre: 1, post: 1, ..NetShape::new(3, width, levels) };
        param_count(&shape.config().unwrap()).unwrap() as f64
    };
    let ratio = count(16, 4) / count(8, 4);
    assert!((3.5..=4.5).contains(&ratio), "ratio {ratio}");
    let step = count(8, 5) - count(8, 4);
    assert_eq!(step, count(8, 6) - count(8, 5));
}

#[test]
fn checkpoint_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let mut model = Model::init(NetShape::new(2, 2, 2).config().unwrap()).unwrap();
    scramble(&mut model.params, &model.config, 7);
    model.normalizer = Normalizer { input_mean: 0.5, input_std: 2.0, output_scale: 0.01 };
    save_model(dir.path(), &model, Some(3)).unwrap();
    assert_eq!(load_model(dir.path()).unwrap(), model);
    let text = fs_read(&dir.path().join("config.json"));
    assert!(CheckpointMeta::parse(&text.replace(CHECKPOINT_FORMAT, "mgno-net/9")).is_err());
}

fn fs_read(p: &std::path::Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

#[test]
fn refinement_shapes_and_degenerate_case() {
    let mut shape = NetShape::new(2, 2, 3);
    shape.post = 1;
    let mut model = Model::init(shape.config().unwrap()).unwrap();
    scramble(&mut model.params, &model.config, 5);
    assert_eq!(model.refined(0, Tying::Finest).unwrap(), model);
    for tying in [Tying::Finest, Tying::Coarsest] {
        let fine = model.refined(1, tying).unwrap();
        assert_eq!(fine.config.wmg[0].levels, 4);
        let out = fine.predict(&random_field(1, 16, 1)).unwrap();
        assert_eq!(out.dims(), (1, 16, 16));
        assert!(out.is_finite());
    }
    let fine = model.refined(1, Tying::Finest).unwrap();
    assert_eq!(fine.params.layers[0].wmg.a[0], model.params.layers[0].wmg.a[0]);
    assert_eq!(fine.params.layers[0].wmg.a[1], model.params.layers[0].wmg.a[0]);
    assert_eq!(fine.params.layers[0].wmg.a[3], model.params.layers[0].wmg.a[2]);
}
