//! Exact simulator for real-amplitude quantum registers.
//!
//! Only `RY` and controlled-`RY` gates are supported, so a state that starts
//! real stays real and amplitudes are stored as plain `f64`.
//!
//! Qubit 0 is the most significant bit of a basis-state index: on `n` qubits
//! the amplitude of `|q0 q1 ... q(n-1)>` lives at index
//! `q0 * 2^(n-1) + q1 * 2^(n-2) + ... + q(n-1)`.

use crate::error::{invalid, Error, Result};

/// Norm tolerance used when validating externally supplied amplitudes.
pub const NORM_TOLERANCE: f64 = 1e-10;

/// Below this L2 norm an embedding falls back to the uniform superposition.
pub const EMBED_ZERO_NORM: f64 = 1e-12;

/// Pure state of `n` qubits with real amplitudes.
#[derive(Clone, Debug, PartialEq)]
pub struct StateVector {
    n_qubits: usize,
    amps: Vec<f64>,
}

impl StateVector {
    /// Wraps an amplitude vector, checking its length and unit norm.
    pub fn from_amplitudes(amps: Vec<f64>) -> Result<Self> {
        let n_qubits = log2_exact(amps.len())?;
        if amps.iter().any(|a| !a.is_finite()) {
            return invalid("amplitudes must be finite");
        }
        let norm_sq: f64 = amps.iter().map(|a| a * a).sum();
        if (norm_sq - 1.0).abs() > NORM_TOLERANCE {
            return invalid(format!("amplitudes have squared norm {norm_sq}, expected 1"));
        }
        Ok(Self { n_qubits, amps })
    }

    /// Caller guarantees length `2^n_qubits` and unit norm.
    pub(crate) fn from_parts(n_qubits: usize, amps: Vec<f64>) -> Self {
        debug_assert_eq!(amps.len(), 1 << n_qubits);
        Self { n_qubits, amps }
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn dim(&self) -> usize {
        self.amps.len()
    }

    pub fn amps(&self) -> &[f64] {
        &self.amps
    }

    pub fn into_amps(self) -> Vec<f64> {
        self.amps
    }

    pub fn norm(&self) -> f64 {
        self.amps.iter().map(|a| a * a).sum::<f64>().sqrt()
    }

    fn check_qubit(&self, q: usize) -> Result<()> {
        if q >= self.n_qubits {
            return invalid(format!("qubit {q} out of range for {} qubits", self.n_qubits));
        }
        Ok(())
    }

    /// Applies `RY(theta)` to `target` in place.
    pub fn apply_ry(&mut self, target: usize, theta: f64) -> Result<()> {
        self.check_qubit(target)?;
        let (s, c) = (0.5 * theta).sin_cos();
        rotate(&mut self.amps, qubit_mask(self.n_qubits, target), 0, c, s);
        Ok(())
    }

    /// Applies `RY(theta)` to `target` on the subspace where `control` is 1.
    pub fn apply_cry(&mut self, control: usize, target: usize, theta: f64) -> Result<()> {
        self.check_qubit(control)?;
        self.check_qubit(target)?;
        if control == target {
            return invalid(format!("control and target are both qubit {control}"));
        }
        let (s, c) = (0.5 * theta).sin_cos();
        rotate(
            &mut self.amps,
            qubit_mask(self.n_qubits, target),
            qubit_mask(self.n_qubits, control),
            c,
            s,
        );
        Ok(())
    }

    /// `<Z>` on one qubit: probability of bit 0 minus probability of bit 1.
    pub fn expectation_z(&self, qubit: usize) -> Result<f64> {
        self.check_qubit(qubit)?;
        let mask = qubit_mask(self.n_qubits, qubit);
        Ok(self
            .amps
            .iter()
            .enumerate()
            .map(|(i, a)| if i & mask == 0 { a * a } else { -a * a })
            .sum())
    }

    /// `<Z_q>` for every qubit, in qubit order.
    pub fn expectations_z(&self) -> Vec<f64> {
        let n = self.n_qubits;
        let mut out = vec![0.0; n];
        for (i, a) in self.amps.iter().enumerate() {
            let p = a * a;
            for (q, o) in out.iter_mut().enumerate() {
                if i & qubit_mask(n, q) == 0 {
                    *o += p;
                } else {
                    *o -= p;
                }
            }
        }
        out
    }

    fn apply_gate(&mut self, gate: &Gate, theta: f64) {
        let (s, c) = (0.5 * theta).sin_cos();
        let cmask = gate.control.map_or(0, |q| qubit_mask(self.n_qubits, q));
        rotate(&mut self.amps, qubit_mask(self.n_qubits, gate.target), cmask, c, s);
    }
}

#[inline]
fn qubit_mask(n_qubits: usize, q: usize) -> usize {
    1 << (n_qubits - 1 - q)
}

fn log2_exact(len: usize) -> Result<usize> {
    if len < 2 || !len.is_power_of_two() {
        return invalid(format!("length {len} is not a power of two >= 2"));
    }
    Ok(len.trailing_zeros() as usize)
}

/// 2x2 rotation `[[c, -s], [s, c]]` on every index pair differing in
/// `tmask`, restricted to indices where all bits of `cmask` are set.
#[inline]
fn rotate(amps: &mut [f64], tmask: usize, cmask: usize, c: f64, s: f64) {
    let dim = amps.len();
    let mut base = 0;
    while base < dim {
        for i0 in base..base + tmask {
            if i0 & cmask != cmask {
                continue;
            }
            let i1 = i0 | tmask;
            let (a0, a1) = (amps[i0], amps[i1]);
            amps[i0] = c * a0 - s * a1;
            amps[i1] = s * a0 + c * a1;
        }
        base += tmask << 1;
    }
}

/// `0.5 * sum over active pairs of (l1 * b0 - l0 * b1)`; the derivative of
/// `<lam| G(theta) |prev>` with respect to theta, written in terms of the
/// post-gate state `b = G prev`.
#[inline]
fn rotation_grad(post: &[f64], lam: &[f64], tmask: usize, cmask: usize) -> f64 {
    let dim = post.len();
    let mut acc = 0.0;
    let mut base = 0;
    while base < dim {
        for i0 in base..base + tmask {
            if i0 & cmask != cmask {
                continue;
            }
            let i1 = i0 | tmask;
            acc += lam[i1] * post[i0] - lam[i0] * post[i1];
        }
        base += tmask << 1;
    }
    0.5 * acc
}

/// Kind of a parameterised gate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GateKind {
    RotY,
    ControlledRotY,
}

/// One parameterised gate. `control` is present iff the kind is controlled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Gate {
    pub kind: GateKind,
    pub target: usize,
    pub control: Option<usize>,
    pub param_slot: usize,
}

impl Gate {
    pub fn ry(target: usize, param_slot: usize) -> Self {
        Self { kind: GateKind::RotY, target, control: None, param_slot }
    }

    pub fn cry(control: usize, target: usize, param_slot: usize) -> Self {
        Self { kind: GateKind::ControlledRotY, target, control: Some(control), param_slot }
    }
}

/// Ordered gate list acting on a fixed register size.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CircuitSpec {
    n_qubits: usize,
    gates: Vec<Gate>,
}

impl CircuitSpec {
    pub fn new(n_qubits: usize, gates: Vec<Gate>) -> Result<Self> {
        if n_qubits == 0 {
            return invalid("circuit needs at least one qubit");
        }
        for (k, g) in gates.iter().enumerate() {
            if g.target >= n_qubits {
                return invalid(format!("gate {k}: target {} out of range", g.target));
            }
            match (g.kind, g.control) {
                (GateKind::RotY, None) => {}
                (GateKind::ControlledRotY, Some(c)) if c < n_qubits && c != g.target => {}
                _ => return invalid(format!("gate {k}: bad control for {:?}", g.kind)),
            }
        }
        Ok(Self { n_qubits, gates })
    }

    pub fn n_qubits(&self) -> usize {
        self.n_qubits
    }

    pub fn gates(&self) -> &[Gate] {
        &self.gates
    }

    pub fn len(&self) -> usize {
        self.gates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.gates.is_empty()
    }

    /// Number of angles required: one past the largest slot.
    pub fn num_params(&self) -> usize {
        self.gates.iter().map(|g| g.param_slot + 1).max().unwrap_or(0)
    }

    fn check_inputs(&self, init: &StateVector, thetas: &[f64]) -> Result<()> {
        if init.n_qubits != self.n_qubits {
            return invalid(format!(
                "state has {} qubits, circuit expects {}",
                init.n_qubits, self.n_qubits
            ));
        }
        if self.num_params() > thetas.len() {
            return invalid(format!(
                "circuit uses {} parameter slots, got {} angles",
                self.num_params(),
                thetas.len()
            ));
        }
        Ok(())
    }
}

/// `|0...0>` on `n` qubits.
pub fn basis_state(n: usize) -> Result<StateVector> {
    if n < 1 {
        return invalid("basis state needs at least one qubit");
    }
    let mut amps = vec![0.0; 1 << n];
    amps[0] = 1.0;
    Ok(StateVector::from_parts(n, amps))
}

/// Amplitude embedding of a non-negative vector whose length is a power of
/// two. A (near-)zero vector maps to the uniform superposition.
pub fn amplitude_embed(v: &[f64]) -> Result<StateVector> {
    let n = log2_exact(v.len())?;
    if let Some(x) = v.iter().find(|x| !(**x >= 0.0) || !x.is_finite()) {
        return invalid(format!("amplitude embedding needs finite non-negative entries, got {x}"));
    }
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let amps = if norm < EMBED_ZERO_NORM {
        vec![(v.len() as f64).sqrt().recip(); v.len()]
    } else {
        v.iter().map(|x| x / norm).collect()
    };
    Ok(StateVector::from_parts(n, amps))
}

/// `a ⊗ b`, with `a` occupying the leading (most significant) qubits.
pub fn tensor_product(a: &StateVector, b: &StateVector) -> StateVector {
    let mut amps = Vec::with_capacity(a.dim() * b.dim());
    for &x in &a.amps {
        amps.extend(b.amps.iter().map(|y| x * y));
    }
    StateVector::from_parts(a.n_qubits + b.n_qubits, amps)
}

pub fn expectation_z(state: &StateVector, qubit: usize) -> Result<f64> {
    state.expectation_z(qubit)
}

/// Applies the circuit's gates in order, gate `k` using `thetas[slot_k]`.
pub fn run_circuit(init: &StateVector, circuit: &CircuitSpec, thetas: &[f64]) -> Result<StateVector> {
    circuit.check_inputs(init, thetas)?;
    let mut state = init.clone();
    for g in &circuit.gates {
        state.apply_gate(g, thetas[g.param_slot]);
    }
    Ok(state)
}

/// Gradients of a loss `L(<Z_0>, ..., <Z_(n-1)>)` through a circuit.
#[derive(Clone, Debug, PartialEq)]
pub struct CircuitGradient {
    /// `dL/dtheta`, same length as the angle vector passed in.
    pub thetas: Vec<f64>,
    /// `dL/da_i` for every amplitude of the initial state.
    pub init_amps: Vec<f64>,
    /// Forward `<Z_q>` values, returned because the caller usually needs them.
    pub expectations: Vec<f64>,
}

/// Reverse-mode gradient through `run_circuit` followed by `expectations_z`.
///
/// `upstream[q]` is `dL/d<Z_q>`. The backward sweep uncomputes the forward
/// state gate by gate (every gate is orthogonal) instead of storing it, so
/// memory stays at two vectors of length `2^n`.
pub fn backprop_circuit(
    init: &StateVector,
    circuit: &CircuitSpec,
    thetas: &[f64],
    upstream: &[f64],
) -> Result<CircuitGradient> {
    let n = circuit.n_qubits;
    if upstream.len() != n {
        return invalid(format!("upstream has {} entries, expected {n}", upstream.len()));
    }
    let state = run_circuit(init, circuit, thetas)?;
    let expectations = state.expectations_z();
    let mut psi = state.amps;
    let mut lam: Vec<f64> = psi
        .iter()
        .enumerate()
        .map(|(i, a)| {
            let w: f64 = (0..n)
                .map(|q| if i & qubit_mask(n, q) == 0 { upstream[q] } else { -upstream[q] })
                .sum();
            2.0 * a * w
        })
        .collect();

    let mut grads = vec![0.0; thetas.len()];
    for g in circuit.gates.iter().rev() {
        let tmask = qubit_mask(n, g.target);
        let cmask = g.control.map_or(0, |q| qubit_mask(n, q));
        grads[g.param_slot] += rotation_grad(&psi, &lam, tmask, cmask);
        let (s, c) = (-0.5 * thetas[g.param_slot]).sin_cos();
        rotate(&mut psi, tmask, cmask, c, s);
        rotate(&mut lam, tmask, cmask, c, s);
    }
    Ok(CircuitGradient { thetas: grads, init_amps: lam, expectations })
}

impl TryFrom<Vec<f64>> for StateVector {
    type Error = Error;

    fn try_from(amps: Vec<f64>) -> Result<Self> {
        Self::from_amplitudes(amps)
    }
}
