mod common;

use common::*;
use proptest::prelude::*;
use qnerf::qsim::{amplitude_embed, backprop_circuit, expectation_z, run_circuit, tensor_product, StateVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn arb_case() -> impl Strategy<Value = (usize, usize, u64)> {
    (1usize..=4, 0usize..12, any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn statevector_matches_dense_unitary((n, gates, seed) in arb_case()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = random_circuit(n, gates, &mut rng);
        let thetas: Vec<f64> = (0..c.num_params()).map(|_| rng.random_range(-7.0..7.0)).collect();
        let psi = random_unit(1 << n, &mut rng);
        let out = run_circuit(&StateVector::from_amplitudes(psi.clone()).unwrap(), &c, &thetas).unwrap();
        let want = matvec(&circuit_unitary(&c, &thetas), &psi);
        for (a, b) in out.amps().iter().zip(&want) {
            prop_assert!((a - b).abs() < 1e-10);
        }
        for q in 0..n {
            let e = expectation_z(&out, q).unwrap();
            prop_assert!((e - dense_expectation(n, q, &want)).abs() < 1e-10);
        }
    }

    #[test]
    fn norm_is_preserved((n, gates, seed) in (1usize..=8, 0usize..40, any::<u64>())) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = random_circuit(n, gates, &mut rng);
        let thetas: Vec<f64> = (0..c.num_params()).map(|_| rng.random_range(-10.0..10.0)).collect();
        let psi = StateVector::from_amplitudes(random_unit(1 << n, &mut rng)).unwrap();
        let out = run_circuit(&psi, &c, &thetas).unwrap();
        prop_assert!((out.norm() - 1.0).abs() < 1e-10);
        prop_assert!(out.amps().iter().all(|a| a.is_finite()));
    }

    #[test]
    fn zero_angles_are_identity((n, gates, seed) in (1usize..=6, 0usize..30, any::<u64>())) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = random_circuit(n, gates, &mut rng);
        let psi = StateVector::from_amplitudes(random_unit(1 << n, &mut rng)).unwrap();
        let out = run_circuit(&psi, &c, &vec![0.0; c.num_params()]).unwrap();
        for (a, b) in out.amps().iter().zip(psi.amps()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn adjoint_gradient_matches_finite_differences((n, gates, seed) in (1usize..=4, 1usize..16, any::<u64>())) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = random_circuit(n, gates, &mut rng);
        let thetas: Vec<f64> = (0..c.num_params()).map(|_| rng.random_range(-3.0..3.0)).collect();
        let psi = random_unit(1 << n, &mut rng);
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        // L = sum_q w_q <Z_q>, evaluated through the dense oracle.
        let loss = |th: &[f64], amps: &[f64]| {
            let out = matvec(&circuit_unitary(&c, th), amps);
            (0..n).map(|q| w[q] * dense_expectation(n, q, &out)).sum::<f64>()
        };
        let init = StateVector::from_amplitudes(psi.clone()).unwrap();
        let g = backprop_circuit(&init, &c, &thetas, &w).unwrap();
        for i in 0..thetas.len() {
            let fd = central_diff(&mut |t| loss(t, &psi), &thetas, i, 1e-5);
            prop_assert!(rel_close(g.thetas[i], fd, 1e-4, 1e-6), "theta {i}: {} vs {fd}", g.thetas[i]);
        }
        for i in 0..psi.len() {
            let fd = central_diff(&mut |a| loss(&thetas, a), &psi, i, 1e-5);
            prop_assert!(rel_close(g.init_amps[i], fd, 1e-4, 1e-6), "amp {i}: {} vs {fd}", g.init_amps[i]);
        }
    }

    #[test]
    fn embedding_normalises_and_tensor_factorises(a in prop::collection::vec(0.01f64..5.0, 4), b in prop::collection::vec(0.01f64..5.0, 2)) {
        let sa = amplitude_embed(&a).unwrap();
        let sb = amplitude_embed(&b).unwrap();
        prop_assert!((sa.norm() - 1.0).abs() < 1e-12);
        let t = tensor_product(&sa, &sb);
        prop_assert_eq!(t.n_qubits(), 3);
        let dense = kron(&sa.amps().iter().map(|x| vec![*x]).collect(), &sb.amps().iter().map(|x| vec![*x]).collect());
        for (x, y) in t.amps().iter().zip(dense.iter().map(|r| r[0])) {
            prop_assert!((x - y).abs() < 1e-15);
        }
    }
}

#[test]
fn embedding_rejects_bad_lengths() {
    assert!(amplitude_embed(&[1.0, 2.0, 3.0]).is_err());
    assert!(amplitude_embed(&[]).is_err());
}
