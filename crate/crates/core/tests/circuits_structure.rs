mod common;

use common::*;
use proptest::prelude::*;
use qnerf::circuits::{build, dual_branch_prefix_len, dump, identity_init, parse_dump, AnsatzConfig};
use qnerf::qsim::{amplitude_embed, run_circuit, tensor_product, CircuitSpec, StateVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn golden_dumps() {
    let full = include_str!("data/full_n4_l1.dump");
    assert_eq!(dump(&build(&AnsatzConfig::full(4, 1)).unwrap()), full);
    let dual = include_str!("data/dual_n4_l2.dump");
    assert_eq!(dump(&build(&AnsatzConfig::dual_branch(4, 2)).unwrap()), dual);
    assert_eq!(dump(&parse_dump(dual).unwrap()), dual);
}

#[test]
fn full_gate_counts_match_closed_form() {
    // dense over n qubits has n(n-1)/2 gates, rotation has n
    for n in 2..=12 {
        for ell in 1..=3 {
            let c = build(&AnsatzConfig::full(n, ell)).unwrap();
            assert_eq!(c.len(), ell * (n * (n - 1) / 2 + n));
        }
    }
    let table: Vec<usize> = [4, 6, 8, 10, 12].iter().map(|&n| build(&AnsatzConfig::full(n, 1)).unwrap().len()).collect();
    assert_eq!(table, vec![10, 21, 36, 55, 78]);
}

#[test]
fn dual_branch_counts_by_enumeration() {
    for n in [4usize, 5, 6, 8, 10] {
        for ell in 2..=4 {
            let cfg = AnsatzConfig::dual_branch(n, ell);
            let (p, v) = (n.div_ceil(2), n / 2);
            let want = p * (p - 1) / 2 + p + p * v + n + (ell - 2) * (n * (n - 1) / 2 + n);
            assert_eq!(build(&cfg).unwrap().len(), want, "n={n} ell={ell}");
            assert_eq!(cfg.amplitudes(), (1 << p) + (1 << v));
        }
    }
    assert_eq!(build(&AnsatzConfig::dual_branch(8, 2)).unwrap().len(), 34);
}

fn run_random_prefix(cfg: &AnsatzConfig, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = build(cfg).unwrap();
    let k = dual_branch_prefix_len(cfg);
    let prefix = CircuitSpec::new(cfg.n_qubits, c.gates()[..k].to_vec()).unwrap();
    let thetas: Vec<f64> = (0..k).map(|_| rng.random_range(-3.0..3.0)).collect();
    let vp: Vec<f64> = (0..1 << cfg.n_pos).map(|_| rng.random_range(0.0..1.0)).collect();
    let vv: Vec<f64> = (0..1 << cfg.n_view).map(|_| rng.random_range(0.0..1.0)).collect();
    let (sp, sv) = (amplitude_embed(&vp).unwrap(), amplitude_embed(&vv).unwrap());
    let joint = run_circuit(&tensor_product(&sp, &sv), &prefix, &thetas).unwrap();
    // the same gates act on the positional register alone
    let pos_only = CircuitSpec::new(cfg.n_pos, c.gates()[..k].to_vec()).unwrap();
    let vp_out = run_circuit(&sp, &pos_only, &thetas).unwrap();
    (joint.into_amps(), tensor_product(&vp_out, &sv).into_amps())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dual_branch_prefix_factorises(n in 4usize..=8, ell in 2usize..=3, seed in any::<u64>()) {
        let (joint, product) = run_random_prefix(&AnsatzConfig::dual_branch(n, ell), seed);
        for (a, b) in joint.iter().zip(&product) {
            prop_assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn identity_init_is_identity(n in 2usize..=6, ell in 1usize..=3, dual in any::<bool>(), seed in any::<u64>()) {
        let cfg = if dual && n >= 4 && ell >= 2 { AnsatzConfig::dual_branch(n, ell) } else { AnsatzConfig::full(n, ell) };
        let c = build(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let psi = StateVector::from_amplitudes(random_unit(1 << n, &mut rng)).unwrap();
        let out = run_circuit(&psi, &c, &identity_init(&c)).unwrap();
        for (a, b) in out.amps().iter().zip(psi.amps()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn slots_are_unique_and_dense(n in 2usize..=10, ell in 1usize..=4) {
        let c = build(&AnsatzConfig::full(n, ell)).unwrap();
        let mut slots: Vec<usize> = c.gates().iter().map(|g| g.param_slot).collect();
        slots.sort_unstable();
        prop_assert_eq!(slots, (0..c.len()).collect::<Vec<_>>());
        prop_assert_eq!(c.num_params(), c.len());
    }

    #[test]
    fn dump_round_trips(n in 4usize..=8, ell in 2usize..=4, dual in any::<bool>()) {
        let cfg = if dual { AnsatzConfig::dual_branch(n, ell) } else { AnsatzConfig::full(n, ell) };
        let c = build(&cfg).unwrap();
        prop_assert_eq!(parse_dump(&dump(&c)).unwrap(), c);
    }
}

#[test]
fn cry_orientation_matches_dense_oracle() {
    // control i > target j on the dense layer: check one gate against the projector form
    let c = build(&AnsatzConfig::full(3, 1)).unwrap();
    let g = c.gates()[0];
    assert_eq!((g.control, g.target), (Some(1), 0));
    let mut th = vec![0.0; c.len()];
    th[0] = 1.1;
    let psi = vec![0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0]; // |010>
    let out = run_circuit(&StateVector::from_amplitudes(psi.clone()).unwrap(), &c, &th).unwrap();
    let want = matvec(&cry_dense(3, 1, 0, 1.1), &psi);
    for (a, b) in out.amps().iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
}
