//! Radiance-field models mapping `(position, direction)` to `(rgb, sigma)`.
//!
//! The quantum variants encode the input into amplitudes with an MLP, run
//! the ansatz, and read channels from averaged Pauli-Z expectations. The
//! classical baseline and the classical-head ablation share the interface.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{CustomOp, Matrix, Mlp, NodeId, OutputActivation, ParamGroup, ParamId, ParamStore, Tape};
use crate::circuits::{self, AnsatzConfig};
use crate::error::{invalid, Error, Result};
use crate::noise::{execution_rng, perturb_thetas, readout_factor, NoiseConfig};
use crate::qsim::{backprop_circuit, run_circuit, CircuitSpec, StateVector};

pub const DEFAULT_SIGMA_SCALE: f64 = 10.0;
/// Half-extent of the scene cube mapped onto `[-1, 1]` before encoding.
pub const DEFAULT_SCENE_BOUND: f64 = 3.0;
pub const CHANNELS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelVariant {
    FullQ,
    DualBranchQ,
    ClassicalNeRF,
    ClassicalQNeRF,
}

impl ModelVariant {
    pub fn name(self) -> &'static str {
        match self {
            Self::FullQ => "full",
            Self::DualBranchQ => "dual",
            Self::ClassicalNeRF => "classical",
            Self::ClassicalQNeRF => "classical-q",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::FullQ),
            "dual" => Ok(Self::DualBranchQ),
            "classical" => Ok(Self::ClassicalNeRF),
            "classical-q" => Ok(Self::ClassicalQNeRF),
            _ => invalid(format!("unknown variant {s:?} (expected full, dual, classical, classical-q)")),
        }
    }

    pub fn is_quantum(self) -> bool {
        matches!(self, Self::FullQ | Self::DualBranchQ)
    }
}

/// `(sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(L-1) pi x), cos(2^(L-1) pi x))`.
pub fn positional_encoding(x: f64, l: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * l);
    for k in 0..l {
        let (s, c) = ((1u64 << k) as f64 * PI * x).sin_cos();
        out.push(s);
        out.push(c);
    }
    out
}

/// Encodes every coordinate of every row, concatenating per coordinate.
pub fn encode_rows(x: &Matrix, l: usize) -> Matrix {
    let cols = x.ncols();
    let mut out = Matrix::zeros((x.nrows(), cols * 2 * l));
    for (mut o, row) in out.rows_mut().into_iter().zip(x.rows()) {
        for (j, &v) in row.iter().enumerate() {
            for (k, e) in positional_encoding(v, l).into_iter().enumerate() {
                o[j * 2 * l + k] = e;
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldInput {
    /// Scene position mapped to `[-1, 1]` per axis.
    pub position: [f64; 3],
    /// Unit viewing direction.
    pub direction: [f64; 3],
}

impl FieldInput {
    pub fn new(position: [f64; 3], direction: [f64; 3]) -> Result<Self> {
        let norm = direction.iter().map(|d| d * d).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-6 {
            return invalid(format!("direction must be a unit vector, got norm {norm}"));
        }
        Ok(Self { position, direction })
    }

    fn matrices(&self) -> (Matrix, Matrix) {
        (
            Matrix::from_shape_vec((1, 3), self.position.to_vec()).expect("1x3"),
            Matrix::from_shape_vec((1, 3), self.direction.to_vec()).expect("1x3"),
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FieldOutput {
    pub rgb: [f64; 3],
    pub sigma: f64,
}

/// Contiguous disjoint qubit groups, one per channel. With `n = 8` this is
/// `{0,1},{2,3},{4,5},{6,7}`; when 4 does not divide `n` the leading
/// channels get the extra qubits.
pub fn default_parity_sets(n: usize) -> Vec<Vec<usize>> {
    let base = n / CHANNELS;
    let extra = n % CHANNELS;
    let mut start = 0;
    (0..CHANNELS)
        .map(|c| {
            let size = base + usize::from(c < extra);
            let set = (start..start + size).collect();
            start += size;
            set
        })
        .collect()
}

pub fn validate_parity_sets(n: usize, sets: &[Vec<usize>]) -> Result<()> {
    if sets.len() != CHANNELS {
        return invalid(format!("need {CHANNELS} parity sets, got {}", sets.len()));
    }
    let mut seen = vec![false; n];
    for set in sets {
        if set.is_empty() {
            return invalid("parity sets must be non-empty");
        }
        for &q in set {
            if q >= n || seen[q] {
                return invalid(format!("qubit {q} is out of range or in more than one parity set"));
            }
            seen[q] = true;
        }
    }
    Ok(())
}

/// Mean of `<Z_j>` over each set.
pub fn parity_average(expectations: &[f64], sets: &[Vec<usize>]) -> Vec<f64> {
    sets.iter()
        .map(|set| set.iter().map(|&q| expectations[q]).sum::<f64>() / set.len() as f64)
        .collect()
}

/// `n x 4` averaging matrix, so that `expectations . M` is the parity average.
pub fn parity_matrix(n: usize, sets: &[Vec<usize>]) -> Matrix {
    let mut m = Matrix::zeros((n, sets.len()));
    for (c, set) in sets.iter().enumerate() {
        for &q in set {
            m[[q, c]] = 1.0 / set.len() as f64;
        }
    }
    m
}

/// Scales each channel by its `alpha`, clips rgb to `[0, 1]`, and maps the
/// density channel to `max(alpha * o, 0) * sigma_scale`.
pub fn apply_output_scaling(raw: &[f64; 4], alphas: &[f64; 4], sigma_scale: f64) -> FieldOutput {
    let scaled: Vec<f64> = raw.iter().zip(alphas).map(|(o, a)| a * o).collect();
    FieldOutput {
        rgb: [scaled[0].clamp(0.0, 1.0), scaled[1].clamp(0.0, 1.0), scaled[2].clamp(0.0, 1.0)],
        sigma: scaled[3].max(0.0) * sigma_scale,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: ModelVariant,
    pub n_qubits: usize,
    pub ell: usize,
    pub l_pos: usize,
    pub l_view: usize,
    pub hidden: usize,
    pub hidden_layers: usize,
    pub parity_sets: Vec<Vec<usize>>,
    pub sigma_scale: f64,
    pub scene_bound: f64,
}

impl ModelConfig {
    /// Defaults for a variant: `l = 1` for Full, `l = 2` for Dual-Branch.
    pub fn new(variant: ModelVariant, n_qubits: usize) -> Self {
        let ell = if variant == ModelVariant::DualBranchQ { 2 } else { 1 };
        Self {
            variant,
            n_qubits,
            ell,
            l_pos: 10,
            l_view: 4,
            hidden: 256,
            hidden_layers: 3,
            parity_sets: default_parity_sets(n_qubits),
            sigma_scale: DEFAULT_SIGMA_SCALE,
            scene_bound: DEFAULT_SCENE_BOUND,
        }
    }

    pub fn with_ell(mut self, ell: usize) -> Self {
        self.ell = ell;
        self
    }

    pub fn pos_dim(&self) -> usize {
        6 * self.l_pos
    }

    pub fn view_dim(&self) -> usize {
        6 * self.l_view
    }

    pub fn ansatz(&self) -> Option<AnsatzConfig> {
        match self.variant {
            ModelVariant::FullQ => Some(AnsatzConfig::full(self.n_qubits, self.ell)),
            ModelVariant::DualBranchQ => Some(AnsatzConfig::dual_branch(self.n_qubits, self.ell)),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.l_pos < 1 || self.l_view < 1 || self.hidden < 1 || self.hidden_layers < 1 {
            return invalid("encoding sizes, hidden width and hidden layer count must be >= 1");
        }
        if !(self.sigma_scale > 0.0) || !(self.scene_bound > 0.0) {
            return invalid("sigma_scale and scene_bound must be positive");
        }
        if self.variant != ModelVariant::ClassicalNeRF {
            if self.n_qubits < CHANNELS {
                return invalid(format!("need at least {CHANNELS} qubits, got {}", self.n_qubits));
            }
            if self.n_qubits > 16 {
                return invalid(format!("{} qubits exceeds the supported maximum of 16", self.n_qubits));
            }
            validate_parity_sets(self.n_qubits, &self.parity_sets)?;
        }
        if let Some(a) = self.ansatz() {
            a.validate()?;
        }
        Ok(())
    }

    fn encoder_dims(&self, input: usize, output: usize) -> Vec<usize> {
        let mut dims = vec![input];
        dims.extend(std::iter::repeat_n(self.hidden, self.hidden_layers));
        dims.push(output);
        dims
    }

    fn nerf_dims(&self) -> NerfDims {
        let (p, v, h) = (self.pos_dim(), self.view_dim(), self.hidden);
        NerfDims {
            trunk_a: vec![p, h, h, h, h],
            trunk_b: vec![h + p, h, h, h, h],
            sigma: vec![h, 1],
            feature: vec![h, h],
            view: vec![h + v, h / 2, 3],
        }
    }

    /// Amplitudes the encoder has to produce: `2^n`, or `2^n_p + 2^n_v`.
    pub fn amplitudes(&self) -> usize {
        match self.ansatz() {
            Some(a) => a.amplitudes(),
            None if self.variant == ModelVariant::ClassicalQNeRF => 1 << self.n_qubits,
            None => 0,
        }
    }

    /// Closed-form number of trainable scalars.
    pub fn param_count(&self) -> usize {
        let (p, v) = (self.pos_dim(), self.view_dim());
        let n = self.n_qubits;
        match self.variant {
            ModelVariant::FullQ => {
                let gates = self.ansatz().map_or(0, |a| a.gate_count());
                Mlp::count_for(&self.encoder_dims(p + v, 1 << n)) + gates + CHANNELS
            }
            ModelVariant::DualBranchQ => {
                let a = AnsatzConfig::dual_branch(n, self.ell);
                Mlp::count_for(&self.encoder_dims(p, 1 << a.n_pos))
                    + Mlp::count_for(&self.encoder_dims(v, 1 << a.n_view))
                    + a.gate_count()
                    + CHANNELS
            }
            ModelVariant::ClassicalQNeRF => {
                Mlp::count_for(&self.encoder_dims(p + v, 1 << n))
                    + Mlp::count_for(&[1 << n, self.hidden, self.hidden, CHANNELS])
                    + CHANNELS
            }
            ModelVariant::ClassicalNeRF => {
                let d = self.nerf_dims();
                [&d.trunk_a, &d.trunk_b, &d.sigma, &d.feature, &d.view]
                    .iter()
                    .map(|dims| Mlp::count_for(dims))
                    .sum()
            }
        }
    }

    /// Applies one `key=value` setting. Returns `Ok(false)` for keys this
    /// config does not own.
    pub fn set_key(&mut self, key: &str, value: &str) -> Result<bool> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
            value.trim().parse().map_err(|_| Error::InvalidArgument(format!("bad value for {key}: {value:?}")))
        }
        match key {
            "variant" => self.variant = ModelVariant::from_name(value.trim())?,
            "qubits" => {
                self.n_qubits = num(key, value)?;
                self.parity_sets = default_parity_sets(self.n_qubits);
            }
            "ell" => self.ell = num(key, value)?,
            "l_pos" => self.l_pos = num(key, value)?,
            "l_view" => self.l_view = num(key, value)?,
            "hidden" => self.hidden = num(key, value)?,
            "hidden_layers" => self.hidden_layers = num(key, value)?,
            "sigma_scale" => self.sigma_scale = num(key, value)?,
            "scene_bound" => self.scene_bound = num(key, value)?,
            "parity_sets" => {
                self.parity_sets = value
                    .trim()
                    .split(';')
                    .map(|set| set.split(',').map(|q| num::<usize>(key, q)).collect::<Result<Vec<_>>>())
                    .collect::<Result<_>>()?;
            }
            _ => return Ok(false),
        }
        Ok(true)
    }

    pub fn to_text(&self) -> String {
        let sets = self
            .parity_sets
            .iter()
            .map(|s| s.iter().map(|q| q.to_string()).collect::<Vec<_>>().join(","))
            .collect::<Vec<_>>()
            .join(";");
        format!(
            "variant={}\nqubits={}\nell={}\nl_pos={}\nl_view={}\nhidden={}\nhidden_layers={}\nparity_sets={}\nsigma_scale={}\nscene_bound={}\n",
            self.variant.name(),
            self.n_qubits,
            self.ell,
            self.l_pos,
            self.l_view,
            self.hidden,
            self.hidden_layers,
            sets,
            self.sigma_scale,
            self.scene_bound
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::new(ModelVariant::FullQ, 8);
        // qubits resets the parity sets, so apply it before everything else
        let pairs: Vec<(&str, &str)> = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(|l| l.split_once('=').ok_or_else(|| Error::InvalidArgument(format!("expected key=value, got {l:?}"))))
            .collect::<Result<_>>()?;
        for (k, v) in pairs.iter().filter(|(k, _)| *k == "qubits").chain(pairs.iter().filter(|(k, _)| *k != "qubits")) {
            if !cfg.set_key(k, v)? {
                return invalid(format!("unknown model key {k:?}"));
            }
        }
        Ok(cfg)
    }
}

struct NerfDims {
    trunk_a: Vec<usize>,
    trunk_b: Vec<usize>,
    sigma: Vec<usize>,
    feature: Vec<usize>,
    view: Vec<usize>,
}

#[derive(Clone, Debug)]
enum Arch {
    FullQ { enc: Mlp, theta: ParamId, alpha: ParamId },
    DualQ { pos: Mlp, view: Mlp, theta: ParamId, alpha: ParamId },
    ClassicalQ { enc: Mlp, head: Mlp, alpha: ParamId },
    Nerf { trunk_a: Mlp, trunk_b: Mlp, sigma: Mlp, feature: Mlp, view: Mlp },
}

/// Noise applied to circuit executions of one forward pass. `stream`
/// distinguishes forward calls so every call draws fresh perturbations.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NoiseContext {
    pub config: NoiseConfig,
    pub stream: u64,
}

impl NoiseContext {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn new(config: NoiseConfig, stream: u64) -> Self {
        Self { config, stream }
    }
}

/// Nodes recorded by [`Model::forward`].
#[derive(Clone, Copy, Debug)]
pub struct FieldNodes {
    /// Rows of `[r, g, b, sigma]` after output scaling.
    pub output: NodeId,
    /// Channel values before output scaling.
    pub raw: NodeId,
    /// Per-qubit `<Z>` (quantum variants only).
    pub expectations: Option<NodeId>,
    /// Embedded input state rows (all variants except the classical baseline).
    pub state: Option<NodeId>,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    store: ParamStore,
    arch: Arch,
    circuit: Option<Arc<CircuitSpec>>,
    seed: u64,
}

impl Model {
    /// Builds the model with MLP weights drawn from `seed` and identity
    /// circuit angles.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (p, v, n) = (config.pos_dim(), config.view_dim(), config.n_qubits);
        let circuit = config.ansatz().map(|a| circuits::build(&a)).transpose()?.map(Arc::new);
        let angles = |store: &mut ParamStore| {
            let c = circuit.as_ref().expect("quantum variant has a circuit");
            let init = circuits::identity_init(c);
            store.add("theta", ParamGroup::Main, Matrix::from_shape_vec((1, init.len()), init).expect("row"))
        };
        let alphas = |store: &mut ParamStore| store.add("alpha", ParamGroup::Scale, Matrix::ones((1, CHANNELS)));
        let arch = match config.variant {
            ModelVariant::FullQ => {
                let enc = Mlp::new(&mut store, "enc", &config.encoder_dims(p + v, 1 << n), OutputActivation::Relu, &mut rng)?;
                let theta = angles(&mut store);
                Arch::FullQ { enc, theta, alpha: alphas(&mut store) }
            }
            ModelVariant::DualBranchQ => {
                let a = config.ansatz().expect("dual ansatz");
                let pos = Mlp::new(&mut store, "pos", &config.encoder_dims(p, 1 << a.n_pos), OutputActivation::Relu, &mut rng)?;
                let view = Mlp::new(&mut store, "view", &config.encoder_dims(v, 1 << a.n_view), OutputActivation::Relu, &mut rng)?;
                let theta = angles(&mut store);
                Arch::DualQ { pos, view, theta, alpha: alphas(&mut store) }
            }
            ModelVariant::ClassicalQNeRF => {
                let enc = Mlp::new(&mut store, "enc", &config.encoder_dims(p + v, 1 << n), OutputActivation::Relu, &mut rng)?;
                let head = Mlp::new(
                    &mut store,
                    "head",
                    &[1 << n, config.hidden, config.hidden, CHANNELS],
                    OutputActivation::Identity,
                    &mut rng,
                )?;
                Arch::ClassicalQ { enc, head, alpha: alphas(&mut store) }
            }
            ModelVariant::ClassicalNeRF => {
                let d = config.nerf_dims();
                let mut mk = |name: &str, dims: &[usize], out| Mlp::new(&mut store, name, dims, out, &mut rng);
                let arch = Arch::Nerf {
                    trunk_a: mk("trunk_a", &d.trunk_a, OutputActivation::Relu)?,
                    trunk_b: mk("trunk_b", &d.trunk_b, OutputActivation::Relu)?,
                    sigma: mk("sigma", &d.sigma, OutputActivation::Identity)?,
                    feature: mk("feature", &d.feature, OutputActivation::Identity)?,
                    view: mk("view", &d.view, OutputActivation::Identity)?,
                };
                // The trunk output is non-negative and nearly input-independent at
                // init, so a random density head is either positive everywhere or
                // dead everywhere (about one seed in six). Start from a thin fog.
                if let Arch::Nerf { sigma, .. } = &arch {
                    let (w, b) = sigma.layers()[0];
                    store.value_mut(w).fill(0.0);
                    store.value_mut(b).fill(0.1);
                }
                arch
            }
        };
        Ok(Self { config, store, arch, circuit, seed })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn circuit(&self) -> Option<&CircuitSpec> {
        self.circuit.as_deref()
    }

    pub fn theta_param(&self) -> Option<ParamId> {
        match &self.arch {
            Arch::FullQ { theta, .. } | Arch::DualQ { theta, .. } => Some(*theta),
            _ => None,
        }
    }

    pub fn alpha_param(&self) -> Option<ParamId> {
        match &self.arch {
            Arch::FullQ { alpha, .. } | Arch::DualQ { alpha, .. } | Arch::ClassicalQ { alpha, .. } => Some(*alpha),
            Arch::Nerf { .. } => None,
        }
    }

    /// Number of trainable scalars actually allocated.
    pub fn param_count(&self) -> usize {
        self.store.num_scalars()
    }

    fn scale_output(&self, tape: &mut Tape<'_>, raw: NodeId, alpha: ParamId) -> Result<NodeId> {
        let a = tape.param(alpha);
        let scaled = tape.mul_row(raw, a)?;
        let clipped = tape.clamp_cols(scaled, vec![0.0; 4], vec![1.0, 1.0, 1.0, f64::INFINITY])?;
        tape.scale_cols(clipped, vec![1.0, 1.0, 1.0, self.config.sigma_scale])
    }

    fn run_ansatz(&self, tape: &mut Tape<'_>, state: NodeId, theta: ParamId, noise: &NoiseContext) -> Result<NodeId> {
        noise.config.validate()?;
        let layer = CircuitLayer {
            circuit: Arc::clone(self.circuit.as_ref().expect("quantum variant has a circuit")),
            gaussian_std: noise.config.gaussian_std,
            seed: noise.config.seed,
            stream: noise.stream,
            row_thetas: Vec::new(),
        };
        let t = tape.param(theta);
        let mut e = tape.custom(&[state, t], Box::new(layer))?;
        if noise.config.readout_p != 0.0 {
            e = tape.scale(e, readout_factor(noise.config.readout_p));
        }
        Ok(e)
    }

    /// Records the field on a batch. `positions` are already mapped to
    /// `[-1, 1]`, `directions` are unit rows.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        positions: &Matrix,
        directions: &Matrix,
        noise: &NoiseContext,
    ) -> Result<FieldNodes> {
        if positions.ncols() != 3 || directions.dim() != positions.dim() {
            return invalid(format!(
                "positions {:?} and directions {:?} must both be rows x 3",
                positions.dim(),
                directions.dim()
            ));
        }
        let gp = tape.leaf(encode_rows(positions, self.config.l_pos));
        let gd = tape.leaf(encode_rows(directions, self.config.l_view));
        match &self.arch {
            Arch::FullQ { enc, theta, alpha } => {
                let x = tape.concat(gp, gd)?;
                let h = enc.forward(tape, x)?;
                let state = tape.normalize_rows(h);
                let e = self.run_ansatz(tape, state, *theta, noise)?;
                let m = parity_matrix(self.config.n_qubits, &self.config.parity_sets);
                let raw = tape.matmul_const(e, m)?;
                let output = self.scale_output(tape, raw, *alpha)?;
                Ok(FieldNodes { output, raw, expectations: Some(e), state: Some(state) })
            }
            Arch::DualQ { pos, view, theta, alpha } => {
                let hp = pos.forward(tape, gp)?;
                let sp = tape.normalize_rows(hp);
                let hv = view.forward(tape, gd)?;
                let sv = tape.normalize_rows(hv);
                let state = tape.row_kron(sp, sv)?;
                let e = self.run_ansatz(tape, state, *theta, noise)?;
                let m = parity_matrix(self.config.n_qubits, &self.config.parity_sets);
                let raw = tape.matmul_const(e, m)?;
                let output = self.scale_output(tape, raw, *alpha)?;
                Ok(FieldNodes { output, raw, expectations: Some(e), state: Some(state) })
            }
            Arch::ClassicalQ { enc, head, alpha } => {
                let x = tape.concat(gp, gd)?;
                let h = enc.forward(tape, x)?;
                let state = tape.normalize_rows(h);
                let raw = head.forward(tape, state)?;
                let output = self.scale_output(tape, raw, *alpha)?;
                Ok(FieldNodes { output, raw, expectations: None, state: Some(state) })
            }
            Arch::Nerf { trunk_a, trunk_b, sigma, feature, view } => {
                let h = trunk_a.forward(tape, gp)?;
                let h = tape.concat(h, gp)?;
                let h = trunk_b.forward(tape, h)?;
                let s = sigma.forward(tape, h)?;
                let s = tape.relu(s);
                let f = feature.forward(tape, h)?;
                let f = tape.concat(f, gd)?;
                let c = view.forward(tape, f)?;
                let c = tape.sigmoid(c);
                let output = tape.concat(c, s)?;
                Ok(FieldNodes { output, raw: output, expectations: None, state: None })
            }
        }
    }

    fn forward_single(&self, input: &FieldInput, noise: &NoiseContext) -> Result<(Vec<f64>, Vec<f64>, Option<Vec<f64>>)> {
        let (p, d) = input.matrices();
        let mut tape = Tape::new(&self.store);
        let nodes = self.forward(&mut tape, &p, &d, noise)?;
        let row = |n: NodeId| tape.value(n).iter().copied().collect::<Vec<f64>>();
        Ok((row(nodes.output), row(nodes.raw), nodes.state.map(row)))
    }

    /// Embedded state fed to the circuit (or to the classical head).
    pub fn encode(&self, input: &FieldInput) -> Result<StateVector> {
        let (_, _, state) = self.forward_single(input, &NoiseContext::none())?;
        let amps = state.ok_or_else(|| Error::InvalidState("the classical baseline has no embedded state".into()))?;
        StateVector::from_amplitudes(amps)
    }

    /// Positional and view register states of the Dual-Branch encoder.
    pub fn branch_states(&self, input: &FieldInput) -> Result<(StateVector, StateVector)> {
        let Arch::DualQ { pos, view, .. } = &self.arch else {
            return Err(Error::InvalidState("branch states exist only for the dual-branch variant".into()));
        };
        let (p, d) = input.matrices();
        let mut tape = Tape::new(&self.store);
        let gp = tape.leaf(encode_rows(&p, self.config.l_pos));
        let gd = tape.leaf(encode_rows(&d, self.config.l_view));
        let hp = pos.forward(&mut tape, gp)?;
        let sp = tape.normalize_rows(hp);
        let hv = view.forward(&mut tape, gd)?;
        let sv = tape.normalize_rows(hv);
        let vec = |n: NodeId| tape.value(n).iter().copied().collect::<Vec<f64>>();
        Ok((StateVector::from_amplitudes(vec(sp))?, StateVector::from_amplitudes(vec(sv))?))
    }

    /// Channel values before output scaling.
    pub fn raw_outputs(&self, input: &FieldInput, noise: &NoiseContext) -> Result<Vec<f64>> {
        Ok(self.forward_single(input, noise)?.1)
    }
}

/// Evaluates the field at one input.
pub fn field_forward(model: &Model, input: &FieldInput, noise: &NoiseContext) -> Result<FieldOutput> {
    let (out, _, _) = model.forward_single(input, noise)?;
    Ok(FieldOutput { rgb: [out[0], out[1], out[2]], sigma: out[3] })
}

/// Ansatz applied to every row of a state batch, producing `<Z_q>` rows.
struct CircuitLayer {
    circuit: Arc<CircuitSpec>,
    gaussian_std: f64,
    seed: u64,
    stream: u64,
    /// Perturbed angles per row, kept for the backward pass when noisy.
    row_thetas: Vec<Vec<f64>>,
}

impl CircuitLayer {
    fn thetas_for_row<'a>(&'a self, base: &'a [f64], row: usize) -> &'a [f64] {
        if self.row_thetas.is_empty() {
            base
        } else {
            &self.row_thetas[row]
        }
    }
}

impl CustomOp for CircuitLayer {
    fn name(&self) -> &'static str {
        "circuit"
    }

    fn forward(&mut self, inputs: &[&Matrix]) -> Result<Matrix> {
        let (states, thetas) = (inputs[0], inputs[1]);
        let n = self.circuit.n_qubits();
        if states.ncols() != 1 << n || thetas.nrows() != 1 {
            return invalid(format!("circuit layer got states {:?}, thetas {:?}", states.dim(), thetas.dim()));
        }
        let base: Vec<f64> = thetas.iter().copied().collect();
        if self.gaussian_std > 0.0 {
            self.row_thetas = (0..states.nrows())
                .into_par_iter()
                .map(|r| {
                    let mut rng = execution_rng(self.seed, self.stream, r as u64);
                    perturb_thetas(&base, self.gaussian_std, &mut rng)
                })
                .collect::<Result<_>>()?;
        }
        let rows: Vec<Vec<f64>> = (0..states.nrows())
            .into_par_iter()
            .map(|r| {
                let init = StateVector::from_parts(n, states.row(r).to_vec());
                Ok(run_circuit(&init, &self.circuit, self.thetas_for_row(&base, r))?.expectations_z())
            })
            .collect::<Result<_>>()?;
        let mut out = Matrix::zeros((states.nrows(), n));
        for (mut o, e) in out.rows_mut().into_iter().zip(rows) {
            o.iter_mut().zip(e).for_each(|(o, e)| *o = e);
        }
        Ok(out)
    }

    fn backward(&self, inputs: &[&Matrix], _output: &Matrix, grad_out: &Matrix) -> Vec<Matrix> {
        let (states, thetas) = (inputs[0], inputs[1]);
        let n = self.circuit.n_qubits();
        let base: Vec<f64> = thetas.iter().copied().collect();
        let per_row: Vec<(Vec<f64>, Vec<f64>)> = (0..states.nrows())
            .into_par_iter()
            .map(|r| {
                let init = StateVector::from_parts(n, states.row(r).to_vec());
                let upstream = grad_out.row(r).to_vec();
                let grad = backprop_circuit(&init, &self.circuit, self.thetas_for_row(&base, r), &upstream)
                    .expect("inputs were checked in forward");
                (grad.init_amps, grad.thetas)
            })
            .collect();
        let mut d_states = Matrix::zeros(states.raw_dim());
        let mut d_thetas = Matrix::zeros(thetas.raw_dim());
        for (r, (da, dt)) in per_row.into_iter().enumerate() {
            d_states.row_mut(r).iter_mut().zip(da).for_each(|(o, v)| *o = v);
            d_thetas.iter_mut().zip(dt).for_each(|(o, v)| *o += v);
        }
        vec![d_states, d_thetas]
    }
}

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"QNRFCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Checkpoint layout, all integers little-endian:
///
/// ```text
/// magic        8 bytes  "QNRFCKPT"
/// version      u32
/// seed         u64
/// config_len   u32, then config_len bytes of key=value text
/// array_count  u32
/// per array:   name_len u32, name bytes, group u8 (0 main, 1 scale),
///              rows u32, cols u32, rows*cols f64 in row-major order
/// ```
pub fn save_checkpoint(path: &Path, model: &Model) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&model.seed.to_le_bytes());
    let text = model.config.to_text();
    buf.extend_from_slice(&(text.len() as u32).to_le_bytes());
    buf.extend_from_slice(text.as_bytes());
    buf.extend_from_slice(&(model.store.len() as u32).to_le_bytes());
    for (_, p) in model.store.iter() {
        buf.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(p.name.as_bytes());
        buf.push(match p.group {
            ParamGroup::Main => 0,
            ParamGroup::Scale => 1,
        });
        buf.extend_from_slice(&(p.value.nrows() as u32).to_le_bytes());
        buf.extend_from_slice(&(p.value.ncols() as u32).to_le_bytes());
        for v in p.value.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, k: usize) -> Result<&'a [u8]> {
        if self.pos + k > self.bytes.len() {
            return Err(self.err("unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + k];
        self.pos += k;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn err(&self, message: impl Into<String>) -> Error {
        Error::Format { path: self.path.to_path_buf(), message: message.into() }
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::Load { path: path.to_path_buf(), message: e.to_string() })?;
    let mut r = Reader { bytes: &bytes, pos: 0, path };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(r.err("not a checkpoint file"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion { found: version, expected: CHECKPOINT_VERSION });
    }
    let seed = r.u64()?;
    let len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(len)?).map_err(|_| r.err("config is not UTF-8"))?;
    let config = ModelConfig::from_text(text).map_err(|e| r.err(e.to_string()))?;
    let mut model = Model::new(config, seed)?;
    let count = r.u32()? as usize;
    if count != model.store.len() {
        return Err(r.err(format!("{count} arrays stored, model has {}", model.store.len())));
    }
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?).map_err(|_| r.err("array name is not UTF-8"))?.to_owned();
        let _group = r.take(1)?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let id = model.store.find(&name).ok_or_else(|| r.err(format!("unexpected array {name}")))?;
        if model.store.value(id).dim() != (rows, cols) {
            return Err(r.err(format!("array {name} has shape {rows}x{cols}")));
        }
        let raw = r.take(rows * cols * 8)?;
        let value = model.store.value_mut(id);
        for (v, chunk) in value.iter_mut().zip(raw.chunks_exact(8)) {
            *v = f64::from_le_bytes(chunk.try_into().expect("8 bytes"));
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encoding_examples() {
        assert_eq!(positional_encoding(0.0, 1), vec![0.0, 1.0]);
        let e = positional_encoding(0.5, 2);
        let want = [1.0, 0.0, 0.0, -1.0];
        assert!(e.iter().zip(want).all(|(a, b)| (a - b).abs() < 1e-15));
        let e = positional_encoding(0.25, 1);
        assert!((e[0] - 0.70711).abs() < 1e-5 && (e[1] - 0.70711).abs() < 1e-5);
    }

    #[test]
    fn encode_rows_is_per_coordinate() {
        let x = Matrix::from_shape_vec((1, 3), vec![0.0, 0.5, 0.25]).unwrap();
        let e = encode_rows(&x, 2);
        assert_eq!(e.ncols(), 12);
        let row: Vec<f64> = e.row(0).to_vec();
        assert_eq!(&row[0..4], &positional_encoding(0.0, 2)[..]);
        assert_eq!(&row[4..8], &positional_encoding(0.5, 2)[..]);
        assert_eq!(&row[8..12], &positional_encoding(0.25, 2)[..]);
    }

    #[test]
    fn parity_defaults() {
        assert_eq!(default_parity_sets(8), vec![vec![0, 1], vec![2, 3], vec![4, 5], vec![6, 7]]);
        assert_eq!(default_parity_sets(6), vec![vec![0, 1], vec![2, 3], vec![4], vec![5]]);
        assert_eq!(default_parity_sets(4), vec![vec![0], vec![1], vec![2], vec![3]]);
        for n in 4..=12 {
            validate_parity_sets(n, &default_parity_sets(n)).unwrap();
        }
        assert!(validate_parity_sets(4, &[vec![0, 1], vec![1], vec![2], vec![3]]).is_err());
    }

    #[test]
    fn parity_average_examples() {
        let sets = default_parity_sets(8);
        assert_eq!(parity_average(&[1.0; 8], &sets), vec![1.0; 4]);
        let e = [1.0, -1.0, 0.5, 0.5, 0.0, 0.0, 0.2, 0.4];
        let p = parity_average(&e, &sets);
        assert_eq!(p[0], 0.0);
        assert!((p[3] - 0.3).abs() < 1e-15);
    }

    #[test]
    fn output_scaling_examples() {
        let out = apply_output_scaling(&[0.2, 0.5, 0.9, 0.3], &[1.0; 4], 25.0);
        assert_eq!(out.rgb, [0.2, 0.5, 0.9]);
        assert!((out.sigma - 7.5).abs() < 1e-12);
        let out = apply_output_scaling(&[0.5, 0.5, 0.5, 0.5], &[10.0; 4], 25.0);
        assert_eq!(out.rgb, [1.0; 3]);
        let out = apply_output_scaling(&[0.0, 0.0, 0.0, -0.1], &[1.0, 1.0, 1.0, 2.0], 25.0);
        assert_eq!(out.sigma, 0.0);
    }

    #[test]
    fn config_text_round_trip() {
        let mut cfg = ModelConfig::new(ModelVariant::DualBranchQ, 6).with_ell(3);
        cfg.sigma_scale = 12.5;
        let back = ModelConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert!(ModelConfig::from_text("nope=1").is_err());
    }

    #[test]
    fn closed_form_counts_match_allocation() {
        for variant in [ModelVariant::FullQ, ModelVariant::DualBranchQ, ModelVariant::ClassicalQNeRF, ModelVariant::ClassicalNeRF] {
            for n in [4, 6] {
                let mut cfg = ModelConfig::new(variant, n);
                cfg.hidden = 16;
                let m = Model::new(cfg.clone(), 0).unwrap();
                assert_eq!(m.param_count(), cfg.param_count(), "{variant:?} n={n}");
            }
        }
    }

    #[test]
    fn identity_circuit_on_uniform_state_gives_zero_raw() {
        let mut m = Model::new(ModelConfig::new(ModelVariant::FullQ, 4), 1).unwrap();
        for p in m.store_mut().iter_mut() {
            if p.name.starts_with("enc") {
                p.value.fill(0.0);
            }
        }
        let input = FieldInput::new([0.1, 0.2, -0.3], [0.0, 0.0, 1.0]).unwrap();
        assert_eq!(m.encode(&input).unwrap().amps(), &[0.25; 16]);
        let raw = m.raw_outputs(&input, &NoiseContext::none()).unwrap();
        assert!(raw.iter().all(|v| v.abs() < 1e-15));
    }

    #[test]
    fn unit_direction_is_enforced() {
        assert!(FieldInput::new([0.0; 3], [1.0, 1.0, 0.0]).is_err());
    }
}
