//! Ideal inference-time noise: Gaussian angle perturbation, symmetric
//! readout error, and state-fidelity statistics.

use std::f64::consts::TAU;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::circuits::{self, AnsatzConfig, AnsatzVariant};
use crate::error::{invalid, Result};
use crate::qsim::{amplitude_embed, run_circuit, tensor_product, StateVector};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseConfig {
    /// Standard deviation of the additive angle noise, radians.
    pub gaussian_std: f64,
    /// Readout bit-flip probability.
    pub readout_p: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self::none()
    }
}

impl NoiseConfig {
    pub fn none() -> Self {
        Self { gaussian_std: 0.0, readout_p: 0.0, seed: 0 }
    }

    pub fn gaussian(std: f64, seed: u64) -> Self {
        Self { gaussian_std: std, readout_p: 0.0, seed }
    }

    pub fn readout(p: f64) -> Self {
        Self { gaussian_std: 0.0, readout_p: p, seed: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gaussian_std >= 0.0) || !self.gaussian_std.is_finite() {
            return invalid(format!("gaussian_std must be >= 0, got {}", self.gaussian_std));
        }
        check_p(self.readout_p)
    }

    pub fn is_noiseless(&self) -> bool {
        self.gaussian_std == 0.0 && self.readout_p == 0.0
    }
}

fn check_p(p: f64) -> Result<()> {
    if !(0.0..=0.5).contains(&p) {
        return invalid(format!("readout probability must lie in [0, 0.5], got {p}"));
    }
    Ok(())
}

/// Adds an independent `N(0, std^2)` draw to every angle.
pub fn perturb_thetas<R: Rng + ?Sized>(thetas: &[f64], std: f64, rng: &mut R) -> Result<Vec<f64>> {
    if std == 0.0 {
        return Ok(thetas.to_vec());
    }
    let normal = Normal::new(0.0, std).map_err(|e| crate::Error::InvalidArgument(e.to_string()))?;
    Ok(thetas.iter().map(|t| t + normal.sample(rng)).collect())
}

/// Multiplier `1 - 2p` that a symmetric bit flip applies to `<Z>`.
pub fn readout_factor(p: f64) -> f64 {
    1.0 - 2.0 * p
}

pub fn apply_readout_error(expectations: &[f64], p: f64) -> Result<Vec<f64>> {
    check_p(p)?;
    let k = readout_factor(p);
    Ok(expectations.iter().map(|o| o * k).collect())
}

/// `|<a|b>|^2` for real amplitude vectors.
pub fn fidelity(a: &StateVector, b: &StateVector) -> Result<f64> {
    if a.dim() != b.dim() {
        return invalid(format!("fidelity of {} and {} qubit states", a.n_qubits(), b.n_qubits()));
    }
    if a.amps() == b.amps() {
        // Both are unit vectors; avoid reporting rounding noise as infidelity.
        return Ok(1.0);
    }
    let overlap: f64 = a.amps().iter().zip(b.amps()).map(|(x, y)| x * y).sum();
    Ok((overlap * overlap).min(1.0))
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent generator for one circuit execution, keyed by a base seed,
/// a call stream and a row inside the call.
pub fn execution_rng(seed: u64, stream: u64, row: u64) -> ChaCha8Rng {
    let key = splitmix64(splitmix64(splitmix64(seed) ^ stream) ^ row);
    ChaCha8Rng::seed_from_u64(key)
}

/// Angles of a binary-tree RY state preparation for a non-negative real
/// state, level by level from the most significant qubit. Level `k`
/// holds `2^k` angles.
pub fn state_prep_angles(state: &StateVector) -> Vec<f64> {
    let n = state.n_qubits();
    let amps = state.amps();
    let mut angles = Vec::with_capacity(state.dim() - 1);
    for level in 0..n {
        let block = state.dim() >> level;
        let half = block / 2;
        for prefix in 0..(1usize << level) {
            let start = prefix * block;
            let norm = |r: std::ops::Range<usize>| amps[r].iter().map(|a| a * a).sum::<f64>().sqrt();
            let left = norm(start..start + half);
            let right = norm(start + half..start + block);
            angles.push(2.0 * right.atan2(left));
        }
    }
    angles
}

/// State produced by the tree preparation with the given angles.
pub fn prepare_from_angles(n: usize, angles: &[f64]) -> StateVector {
    let dim = 1usize << n;
    let mut amps = vec![1.0; dim];
    let mut offset = 0;
    for level in 0..n {
        let block = dim >> level;
        let half = block / 2;
        for prefix in 0..(1usize << level) {
            let (s, c) = (0.5 * angles[offset + prefix]).sin_cos();
            let start = prefix * block;
            amps[start..start + half].iter_mut().for_each(|a| *a *= c);
            amps[start + half..start + block].iter_mut().for_each(|a| *a *= s);
        }
        offset += 1 << level;
    }
    StateVector::from_parts(n, amps)
}

/// Which gates receive the angle perturbation in a fidelity study.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PerturbScope {
    /// Only the ansatz rotations.
    Ansatz,
    /// Ansatz rotations plus the RY tree that prepares the embedded state
    /// (one tree per register for Dual-Branch).
    AnsatzAndEmbedding,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FidelitySummary {
    pub mean: f64,
    pub std: f64,
    pub min: f64,
    pub max: f64,
    pub samples: Vec<f64>,
}

impl FidelitySummary {
    pub fn from_samples(samples: Vec<f64>) -> Self {
        let n = samples.len().max(1) as f64;
        let mean = samples.iter().sum::<f64>() / n;
        let var = samples.iter().map(|f| (f - mean) * (f - mean)).sum::<f64>() / n;
        let min = samples.iter().copied().fold(f64::INFINITY, f64::min);
        let max = samples.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        Self { mean, std: var.sqrt(), min, max, samples }
    }
}

fn random_embedding<R: Rng + ?Sized>(n: usize, rng: &mut R) -> StateVector {
    let v: Vec<f64> = (0..1usize << n).map(|_| rng.random::<f64>()).collect();
    amplitude_embed(&v).expect("positive random vector embeds")
}

/// Fidelity between clean and perturbed executions of an ansatz, over
/// `n_runs` draws of uniform angles in `[0, 2pi)` and a random embedded
/// input (a product of two embeddings for Dual-Branch).
pub fn fidelity_study<R: Rng + ?Sized>(
    cfg: &AnsatzConfig,
    n_runs: usize,
    noise: &NoiseConfig,
    scope: PerturbScope,
    rng: &mut R,
) -> Result<FidelitySummary> {
    noise.validate()?;
    let circuit = circuits::build(cfg)?;
    let registers: Vec<usize> = match cfg.variant {
        AnsatzVariant::Full => vec![cfg.n_qubits],
        AnsatzVariant::DualBranch => vec![cfg.n_pos, cfg.n_view],
    };
    let mut samples = Vec::with_capacity(n_runs);
    for _ in 0..n_runs {
        let thetas: Vec<f64> = (0..circuit.num_params()).map(|_| rng.random_range(0.0..TAU)).collect();
        let parts: Vec<StateVector> = registers.iter().map(|&k| random_embedding(k, rng)).collect();
        let combine = |states: &[StateVector]| {
            states[1..].iter().fold(states[0].clone(), |acc, s| tensor_product(&acc, s))
        };
        let clean_in = combine(&parts);
        let noisy_in = match scope {
            _ if noise.gaussian_std == 0.0 => clean_in.clone(),
            PerturbScope::Ansatz => clean_in.clone(),
            PerturbScope::AnsatzAndEmbedding => {
                let noisy: Vec<StateVector> = parts
                    .iter()
                    .map(|s| {
                        let angles = perturb_thetas(&state_prep_angles(s), noise.gaussian_std, rng)?;
                        Ok(prepare_from_angles(s.n_qubits(), &angles))
                    })
                    .collect::<Result<_>>()?;
                combine(&noisy)
            }
        };
        let noisy_thetas = perturb_thetas(&thetas, noise.gaussian_std, rng)?;
        let clean = run_circuit(&clean_in, &circuit, &thetas)?;
        let noisy = run_circuit(&noisy_in, &circuit, &noisy_thetas)?;
        samples.push(fidelity(&clean, &noisy)?);
    }
    Ok(FidelitySummary::from_samples(samples))
}

/// Writes `run_id,sigma,fidelity` rows.
pub fn write_fidelity_csv(path: &Path, rows: &[(usize, f64, f64)]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "run_id,sigma,fidelity")?;
    for (run, sigma, f) in rows {
        writeln!(out, "{run},{sigma},{f}")?;
    }
    out.flush()?;
    Ok(())
}
