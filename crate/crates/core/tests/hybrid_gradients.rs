mod common;

use common::*;
use ndarray::Array2;
use proptest::prelude::*;
use qnerf::autodiff::{Matrix, ParamGroup, ParamStore, Tape};
use qnerf::field::{Model, ModelConfig, ModelVariant};
use qnerf::renderer::RenderConfig;
use qnerf::trainer::studies::randomize_thetas;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small(variant: ModelVariant, n: usize) -> ModelConfig {
    let mut cfg = ModelConfig::new(variant, n);
    cfg.hidden = 24;
    cfg.hidden_layers = 2;
    if variant == ModelVariant::DualBranchQ {
        cfg = cfg.with_ell(2);
    }
    cfg
}

fn render_cfg() -> RenderConfig {
    RenderConfig { n_samples: 8, last_delta: 0.5, ..RenderConfig::default() }
}

fn check(variant: ModelVariant, n: usize, seeds: std::ops::Range<u64>) {
    for seed in seeds {
        let mut model = Model::new(small(variant, n), seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        randomize_thetas(&mut model, &mut rng);
        let report = hybrid_fd_check(&mut model, &render_cfg(), 20, 1e-4, 1e-3, 1e-3, &mut rng)
            .expect("no probe point away from kinks");
        assert!(report.failures.is_empty(), "{variant:?} seed {seed}: {:?}", report.failures);
        assert!(report.checked > 20);
    }
}

#[test]
fn full_pipeline_matches_finite_differences() {
    check(ModelVariant::FullQ, 4, 0..4);
    check(ModelVariant::FullQ, 6, 0..2);
}

#[test]
fn dual_branch_pipeline_matches_finite_differences() {
    check(ModelVariant::DualBranchQ, 4, 0..4);
    check(ModelVariant::DualBranchQ, 6, 0..2);
}

#[test]
fn classical_variants_match_finite_differences() {
    check(ModelVariant::ClassicalQNeRF, 4, 0..2);
    let mut cfg = ModelConfig::new(ModelVariant::ClassicalNeRF, 4);
    cfg.hidden = 16;
    let mut model = Model::new(cfg, 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let r = hybrid_fd_check(&mut model, &render_cfg(), 30, 1e-4, 1e-3, 1e-3, &mut rng).unwrap();
    assert!(r.failures.is_empty(), "{:?}", r.failures);
}

#[test]
fn gradients_are_deterministic() {
    let model = Model::new(small(ModelVariant::FullQ, 4), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let ray = random_ray(&mut rng);
    let (l1, _, g1) = pixel_loss(&model, &ray, [0.3, 0.6, 0.9], &render_cfg());
    let (l2, _, g2) = pixel_loss(&model, &ray, [0.3, 0.6, 0.9], &render_cfg());
    assert_eq!(l1.to_bits(), l2.to_bits());
    let (g1, g2) = (g1.unwrap(), g2.unwrap());
    for (id, _) in model.store().iter() {
        assert_eq!(g1.param(id), g2.param(id));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normalisation_jacobian_is_orthogonal_to_unit_input(seed in any::<u64>(), dim in 2usize..32) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let v = random_unit(dim, &mut rng);
        let d = random_unit(dim, &mut rng);
        // J d via reverse mode: gradient of <normalize(v), d> is J^T d = J d (J symmetric)
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.leaf_with_grad(Array2::from_shape_vec((1, dim), v.clone()).unwrap());
        let y = tape.normalize_rows(x);
        let dy = tape.leaf(Array2::from_shape_vec((1, dim), d.clone()).unwrap());
        let p = tape.mul(y, dy).unwrap();
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        let jd = g.leaf(x).unwrap();
        let dot: f64 = jd.iter().zip(&v).map(|(a, b)| a * b).sum();
        prop_assert!(dot.abs() < 1e-8);
        // and matches (I - v v^T) d for unit v
        let vd: f64 = v.iter().zip(&d).map(|(a, b)| a * b).sum();
        for k in 0..dim {
            prop_assert!((jd[[0, k]] - (d[k] - vd * v[k])).abs() < 1e-12);
        }
    }

    #[test]
    fn clamp_passes_gradient_on_and_inside_bounds(vals in prop::collection::vec(-2.0f64..3.0, 1..12)) {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let mut vals = vals;
        vals.push(0.0);
        vals.push(1.0);
        let cols = vals.len();
        let x = tape.leaf_with_grad(Array2::from_shape_vec((1, cols), vals.clone()).unwrap());
        let y = tape.clamp_cols(x, vec![0.0; cols], vec![1.0; cols]).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        for (k, v) in vals.iter().enumerate() {
            let want = if (0.0..=1.0).contains(v) { 1.0 } else { 0.0 };
            prop_assert_eq!(g.leaf(x).unwrap()[[0, k]], want);
            prop_assert!((0.0..=1.0).contains(&tape.value(y)[[0, k]]));
        }
    }
}

#[test]
fn linear_layer_matches_finite_differences() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w0: Vec<f64> = random_unit(12, &mut rng);
    let w = store.add("w", ParamGroup::Main, Matrix::from_shape_vec((4, 3), w0.clone()).unwrap());
    let b = store.add("b", ParamGroup::Main, Matrix::from_shape_vec((1, 3), vec![0.1, -0.2, 0.3]).unwrap());
    let x = Matrix::from_shape_vec((2, 4), random_unit(8, &mut rng)).unwrap();
    let target = Matrix::from_shape_vec((2, 3), vec![0.1, 0.5, -0.3, 0.2, 0.0, 0.7]).unwrap();
    let loss_of = |store: &ParamStore| {
        let mut tape = Tape::new(store);
        let xi = tape.leaf(x.clone());
        let (wi, bi) = (tape.param(w), tape.param(b));
        let y = tape.linear(xi, wi, bi).unwrap();
        let y = tape.sigmoid(y);
        let l = tape.mse(y, target.clone()).unwrap();
        (tape.value(l)[[0, 0]], tape.backward(l).unwrap().param(w).unwrap().clone())
    };
    let (_, g) = loss_of(&store);
    for i in 0..4 {
        for j in 0..3 {
            let orig = store.value(w)[[i, j]];
            store.value_mut(w)[[i, j]] = orig + 1e-5;
            let lp = loss_of(&store).0;
            store.value_mut(w)[[i, j]] = orig - 1e-5;
            let lm = loss_of(&store).0;
            store.value_mut(w)[[i, j]] = orig;
            assert!(rel_close(g[[i, j]], (lp - lm) / 2e-5, 1e-6, 1e-8));
        }
    }
}
