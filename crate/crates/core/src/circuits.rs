//! Ansatz construction for the Full and Dual-Branch models.
//!
//! Circuits are assembled from three layer primitives: a rotational layer
//! (one `RY` per qubit), a dense entangling layer (a controlled-`RY` for
//! every qubit pair) and a partial entangling layer (controlled-`RY` from
//! each positional qubit onto each view qubit). Every gate owns exactly one
//! parameter slot and slots are numbered in gate order.
//!
//! Positional qubits occupy indices `[0, n_pos)` and view qubits
//! `[n_pos, n)`.

use std::fmt::Write as _;
use std::str::FromStr;

use crate::error::{invalid, Error, Result};
use crate::qsim::{CircuitSpec, Gate, GateKind};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum AnsatzVariant {
    Full,
    DualBranch,
}

/// Register layout and depth of an ansatz.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct AnsatzConfig {
    pub n_qubits: usize,
    pub n_pos: usize,
    pub n_view: usize,
    pub ell: usize,
    pub variant: AnsatzVariant,
}

impl AnsatzConfig {
    /// Single register of `n` qubits, `ell` blocks.
    pub fn full(n_qubits: usize, ell: usize) -> Self {
        Self { n_qubits, n_pos: 0, n_view: 0, ell, variant: AnsatzVariant::Full }
    }

    /// Splits `n` as `n_pos = ceil(n/2)`, `n_view = floor(n/2)`.
    pub fn dual_branch(n_qubits: usize, ell: usize) -> Self {
        let n_pos = n_qubits.div_ceil(2);
        Self { n_qubits, n_pos, n_view: n_qubits - n_pos, ell, variant: AnsatzVariant::DualBranch }
    }

    /// Default depth for the variant: 1 for Full, 2 for Dual-Branch.
    pub fn with_default_depth(variant: AnsatzVariant, n_qubits: usize) -> Self {
        match variant {
            AnsatzVariant::Full => Self::full(n_qubits, 1),
            AnsatzVariant::DualBranch => Self::dual_branch(n_qubits, 2),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_qubits < 2 {
            return invalid(format!("ansatz needs at least 2 qubits, got {}", self.n_qubits));
        }
        match self.variant {
            AnsatzVariant::Full => {
                if self.ell < 1 {
                    return invalid("full ansatz needs ell >= 1");
                }
            }
            AnsatzVariant::DualBranch => {
                if self.ell < 2 {
                    return invalid("dual-branch ansatz needs ell >= 2");
                }
                if self.n_pos + self.n_view != self.n_qubits || self.n_pos == 0 || self.n_view == 0 {
                    return invalid(format!(
                        "dual-branch split {}+{} does not cover {} qubits",
                        self.n_pos, self.n_view, self.n_qubits
                    ));
                }
            }
        }
        Ok(())
    }

    /// Number of amplitudes the classical encoder(s) must produce.
    pub fn amplitudes(&self) -> usize {
        match self.variant {
            AnsatzVariant::Full => 1 << self.n_qubits,
            AnsatzVariant::DualBranch => (1 << self.n_pos) + (1 << self.n_view),
        }
    }

    /// Gate count from the closed-form layer enumeration.
    pub fn gate_count(&self) -> usize {
        let n = self.n_qubits;
        let block = n * (n - 1) / 2 + n;
        match self.variant {
            AnsatzVariant::Full => self.ell * block,
            AnsatzVariant::DualBranch => {
                let p = self.n_pos;
                p * (p - 1) / 2 + p + p * self.n_view + n + (self.ell.saturating_sub(2)) * block
            }
        }
    }

    pub fn positional_qubits(&self) -> Vec<usize> {
        (0..self.n_pos).collect()
    }

    pub fn view_qubits(&self) -> Vec<usize> {
        (self.n_pos..self.n_qubits).collect()
    }
}

/// Allocates consecutive parameter slots while layers are appended.
#[derive(Debug, Default)]
struct SlotCounter(usize);

impl SlotCounter {
    fn take(&mut self, k: usize) -> usize {
        let start = self.0;
        self.0 += k;
        start
    }
}

/// One `RY` per listed qubit, slots `[slot_offset, slot_offset + len)`.
pub fn rotational_layer(qubits: &[usize], slot_offset: usize) -> Vec<Gate> {
    qubits.iter().enumerate().map(|(k, &q)| Gate::ry(q, slot_offset + k)).collect()
}

/// Controlled-`RY` for every pair `i > j` of the listed qubits, with `i` as
/// control and `j` as target. Pairs are visited in ascending `(j, i)` order.
pub fn dense_entangling_layer(qubits: &[usize], slot_offset: usize) -> Result<Vec<Gate>> {
    if qubits.len() < 2 {
        return invalid(format!("dense entangling layer needs >= 2 qubits, got {}", qubits.len()));
    }
    let mut sorted = qubits.to_vec();
    sorted.sort_unstable();
    if sorted.windows(2).any(|w| w[0] == w[1]) {
        return invalid("dense entangling layer got duplicate qubits");
    }
    let mut gates = Vec::with_capacity(sorted.len() * (sorted.len() - 1) / 2);
    for (a, &j) in sorted.iter().enumerate() {
        for &i in &sorted[a + 1..] {
            gates.push(Gate::cry(i, j, slot_offset + gates.len()));
        }
    }
    Ok(gates)
}

/// Controlled-`RY` from every positional qubit (control) onto every view
/// qubit (target), row-major over `(pos, view)`.
pub fn partial_entangling_layer(
    pos_qubits: &[usize],
    view_qubits: &[usize],
    slot_offset: usize,
) -> Result<Vec<Gate>> {
    if pos_qubits.is_empty() || view_qubits.is_empty() {
        return invalid("partial entangling layer needs two nonempty qubit sets");
    }
    if pos_qubits.iter().any(|p| view_qubits.contains(p)) {
        return invalid("partial entangling layer qubit sets overlap");
    }
    let mut gates = Vec::with_capacity(pos_qubits.len() * view_qubits.len());
    for &p in pos_qubits {
        for &v in view_qubits {
            gates.push(Gate::cry(p, v, slot_offset + gates.len()));
        }
    }
    Ok(gates)
}

/// Full ansatz gates, appended to `gates`: `ell` blocks of
/// [dense over all qubits, rotation over all qubits].
fn push_full_blocks(
    gates: &mut Vec<Gate>,
    slots: &mut SlotCounter,
    qubits: &[usize],
    blocks: usize,
) -> Result<()> {
    for _ in 0..blocks {
        let dense = dense_entangling_layer(qubits, slots.0)?;
        slots.take(dense.len());
        gates.extend(dense);
        gates.extend(rotational_layer(qubits, slots.take(qubits.len())));
    }
    Ok(())
}

pub fn build_full(cfg: &AnsatzConfig) -> Result<CircuitSpec> {
    if cfg.variant != AnsatzVariant::Full {
        return invalid("build_full called with a dual-branch config");
    }
    cfg.validate()?;
    let all: Vec<usize> = (0..cfg.n_qubits).collect();
    let mut gates = Vec::with_capacity(cfg.gate_count());
    push_full_blocks(&mut gates, &mut SlotCounter::default(), &all, cfg.ell)?;
    CircuitSpec::new(cfg.n_qubits, gates)
}

pub fn build_dual_branch(cfg: &AnsatzConfig) -> Result<CircuitSpec> {
    if cfg.variant != AnsatzVariant::DualBranch {
        return invalid("build_dual_branch called with a full config");
    }
    cfg.validate()?;
    let pos = cfg.positional_qubits();
    let view = cfg.view_qubits();
    let all: Vec<usize> = (0..cfg.n_qubits).collect();
    let mut slots = SlotCounter::default();
    let mut gates = Vec::with_capacity(cfg.gate_count());

    // A single positional qubit has no pairs to entangle.
    if pos.len() >= 2 {
        let dense = dense_entangling_layer(&pos, slots.0)?;
        slots.take(dense.len());
        gates.extend(dense);
    }
    gates.extend(rotational_layer(&pos, slots.take(pos.len())));
    let partial = partial_entangling_layer(&pos, &view, slots.0)?;
    slots.take(partial.len());
    gates.extend(partial);
    gates.extend(rotational_layer(&all, slots.take(all.len())));
    push_full_blocks(&mut gates, &mut slots, &all, cfg.ell - 2)?;
    CircuitSpec::new(cfg.n_qubits, gates)
}

pub fn build(cfg: &AnsatzConfig) -> Result<CircuitSpec> {
    match cfg.variant {
        AnsatzVariant::Full => build_full(cfg),
        AnsatzVariant::DualBranch => build_dual_branch(cfg),
    }
}

/// All-zero angles: every gate is the identity.
pub fn identity_init(circuit: &CircuitSpec) -> Vec<f64> {
    vec![0.0; circuit.num_params()]
}

/// Number of gates belonging to the positional "prefix" of a Dual-Branch
/// circuit (its dense + rotational layers over positional qubits).
pub fn dual_branch_prefix_len(cfg: &AnsatzConfig) -> usize {
    let p = cfg.n_pos;
    p * (p.saturating_sub(1)) / 2 + p
}

/// Text dump, one gate per line: `kind control target slot`, with `-` for
/// a missing control. The first line is `qubits <n>`.
pub fn dump(circuit: &CircuitSpec) -> String {
    let mut out = format!("qubits {}\n", circuit.n_qubits());
    for g in circuit.gates() {
        let kind = match g.kind {
            GateKind::RotY => "ry",
            GateKind::ControlledRotY => "cry",
        };
        let control = g.control.map_or_else(|| "-".to_string(), |c| c.to_string());
        let _ = writeln!(out, "{kind} {control} {} {}", g.target, g.param_slot);
    }
    out
}

/// Inverse of [`dump`].
pub fn parse_dump(text: &str) -> Result<CircuitSpec> {
    let bad = |line: usize, msg: &str| Error::InvalidArgument(format!("circuit dump line {line}: {msg}"));
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines.next().ok_or_else(|| bad(1, "empty dump"))?;
    let n = header
        .strip_prefix("qubits ")
        .and_then(|s| usize::from_str(s.trim()).ok())
        .ok_or_else(|| bad(1, "expected `qubits <n>`"))?;
    let mut gates = Vec::new();
    for (k, line) in lines {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 4 {
            return Err(bad(k + 1, "expected 4 fields"));
        }
        let num = |s: &str| usize::from_str(s).map_err(|_| bad(k + 1, "bad integer"));
        let (target, slot) = (num(f[2])?, num(f[3])?);
        let gate = match (f[0], f[1]) {
            ("ry", "-") => Gate::ry(target, slot),
            ("cry", c) => Gate::cry(num(c)?, target, slot),
            _ => return Err(bad(k + 1, "unknown gate kind")),
        };
        gates.push(gate);
    }
    CircuitSpec::new(n, gates)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qsim::{amplitude_embed, run_circuit};

    #[test]
    fn rotational_layer_slots() {
        let l = rotational_layer(&[0, 1, 2, 3], 5);
        assert_eq!(l.len(), 4);
        assert_eq!(rotational_layer(&(0..8).collect::<Vec<_>>(), 0).len(), 8);
        let slots: Vec<usize> = l.iter().map(|g| g.param_slot).collect();
        assert_eq!(slots, vec![5, 6, 7, 8]);
    }

    #[test]
    fn dense_layer_counts_and_order() {
        assert_eq!(dense_entangling_layer(&[0, 1, 2, 3], 0).unwrap().len(), 6);
        assert_eq!(dense_entangling_layer(&(0..8).collect::<Vec<_>>(), 0).unwrap().len(), 28);
        assert_eq!(dense_entangling_layer(&[2, 3], 0).unwrap().len(), 1);
        assert!(dense_entangling_layer(&[1], 0).is_err());
        let l = dense_entangling_layer(&[0, 1, 2], 0).unwrap();
        let pairs: Vec<(usize, usize)> = l.iter().map(|g| (g.target, g.control.unwrap())).collect();
        assert_eq!(pairs, vec![(0, 1), (0, 2), (1, 2)]);
    }

    #[test]
    fn partial_layer_counts() {
        assert_eq!(partial_entangling_layer(&[0, 1, 2, 3], &[4, 5, 6, 7], 0).unwrap().len(), 16);
        assert_eq!(partial_entangling_layer(&[0, 1], &[2, 3], 0).unwrap().len(), 4);
        assert_eq!(partial_entangling_layer(&[0, 1, 2], &[3, 4, 5], 0).unwrap().len(), 9);
        assert!(partial_entangling_layer(&[0, 1], &[1, 2], 0).is_err());
        let l = partial_entangling_layer(&[0, 1], &[2, 3], 0).unwrap();
        assert!(l.iter().all(|g| g.control.unwrap() < 2 && g.target >= 2));
    }

    #[test]
    fn full_gate_counts() {
        for (n, expected) in [(4, 10), (6, 21), (8, 36), (10, 55), (12, 78)] {
            let cfg = AnsatzConfig::full(n, 1);
            assert_eq!(build_full(&cfg).unwrap().len(), expected);
            assert_eq!(cfg.gate_count(), expected);
        }
        assert_eq!(build_full(&AnsatzConfig::full(4, 3)).unwrap().len(), 30);
        assert!(build_full(&AnsatzConfig::full(4, 0)).is_err());
        assert!(build_full(&AnsatzConfig::dual_branch(4, 2)).is_err());
    }

    #[test]
    fn dual_branch_gate_counts() {
        assert_eq!(build_dual_branch(&AnsatzConfig::dual_branch(8, 2)).unwrap().len(), 34);
        assert_eq!(build_dual_branch(&AnsatzConfig::dual_branch(6, 2)).unwrap().len(), 21);
        assert_eq!(build_dual_branch(&AnsatzConfig::dual_branch(6, 3)).unwrap().len(), 42);
        for n in [4, 6, 8, 10] {
            for ell in 2..4 {
                let cfg = AnsatzConfig::dual_branch(n, ell);
                assert_eq!(build(&cfg).unwrap().len(), cfg.gate_count());
            }
        }
        assert!(build_dual_branch(&AnsatzConfig::dual_branch(8, 1)).is_err());
    }

    #[test]
    fn slots_are_a_bijection() {
        for cfg in [AnsatzConfig::full(6, 2), AnsatzConfig::dual_branch(8, 3)] {
            let c = build(&cfg).unwrap();
            let slots: Vec<usize> = c.gates().iter().map(|g| g.param_slot).collect();
            assert_eq!(slots, (0..c.len()).collect::<Vec<_>>());
            assert_eq!(c.num_params(), c.len());
        }
    }

    #[test]
    fn dual_branch_has_no_view_entanglement_before_partial_layer() {
        let cfg = AnsatzConfig::dual_branch(8, 2);
        let c = build(&cfg).unwrap();
        let prefix = dual_branch_prefix_len(&cfg);
        for g in &c.gates()[..prefix] {
            assert!(g.target < cfg.n_pos);
            assert!(g.control.map_or(true, |q| q < cfg.n_pos));
        }
        // first partial-layer gate is the first one to touch a view qubit
        assert!(c.gates()[prefix].target >= cfg.n_pos);
    }

    #[test]
    fn identity_init_leaves_state_unchanged() {
        let c = build(&AnsatzConfig::full(3, 2)).unwrap();
        let th = identity_init(&c);
        assert_eq!(th, vec![0.0; c.len()]);
        let s = amplitude_embed(&[0.1, 0.2, 0.0, 0.4, 0.5, 0.0, 0.7, 0.8]).unwrap();
        assert_eq!(run_circuit(&s, &c, &th).unwrap(), s);
    }

    #[test]
    fn dump_round_trip() {
        let c = build(&AnsatzConfig::dual_branch(4, 3)).unwrap();
        let text = dump(&c);
        assert!(text.starts_with("qubits 4\ncry 1 0 0\nry - 0 1\n"));
        assert_eq!(parse_dump(&text).unwrap(), c);
        assert!(parse_dump("qubits 2\nrz - 0 0\n").is_err());
        assert!(parse_dump("").is_err());
    }
}
