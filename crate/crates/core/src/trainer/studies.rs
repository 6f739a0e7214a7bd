//! Trainability studies: gradient variance over random initialisations,
//! output concentration, and the output-scaling ablation.

use std::f64::consts::TAU;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{evaluate, train_epoch, TrainConfig, TrainData, TrainState};
use crate::autodiff::{Matrix, Tape};
use crate::dataio::{Frame, SceneDataset};
use crate::error::{invalid, Result};
use crate::field::{FieldInput, Model, ModelConfig, ModelVariant, NoiseContext};
use crate::renderer::{render_rays, Ray, RenderConfig};

/// Draws every circuit angle uniformly from `[0, 2pi)`.
pub fn randomize_thetas<R: Rng + ?Sized>(model: &mut Model, rng: &mut R) {
    if let Some(id) = model.theta_param() {
        model.store_mut().value_mut(id).mapv_inplace(|_| rng.random_range(0.0..TAU));
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradVarConfig {
    pub base: ModelConfig,
    pub qubits: Vec<usize>,
    pub n_inits: usize,
    pub batches_per_init: usize,
    pub batch_rays: usize,
    pub seed: u64,
    pub render: RenderConfig,
}

impl GradVarConfig {
    /// Desk-scale protocol: 20 initialisations x 20 batches of 64 rays.
    pub fn desk(variant: ModelVariant, qubits: Vec<usize>) -> Self {
        Self {
            base: ModelConfig::new(variant, qubits.first().copied().unwrap_or(8)),
            qubits,
            n_inits: 20,
            batches_per_init: 20,
            batch_rays: 64,
            seed: 0,
            render: RenderConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradVarRow {
    pub variant: ModelVariant,
    pub n_qubits: usize,
    /// Per-angle variance of `dL/dtheta`, averaged over angles.
    pub variance: f64,
    pub samples: usize,
}

fn sample_variance(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0)
}

/// Circuit-angle gradient of the batch MSE, with everything else frozen.
pub fn theta_gradient(
    model: &Model,
    rays: &[Ray],
    targets: &[[f64; 3]],
    render: &RenderConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<f64>> {
    let theta = model.theta_param().ok_or_else(|| crate::Error::InvalidArgument("model has no circuit".into()))?;
    let target = Matrix::from_shape_fn((targets.len(), 3), |(r, k)| targets[r][k]);
    let mut tape = Tape::new(model.store());
    tape.freeze_all_except(&[theta]);
    let rgb = render_rays(&mut tape, model, rays, render, Some(rng), &NoiseContext::none())?;
    let loss = tape.mse(rgb, target)?;
    let grads = tape.backward(loss)?;
    Ok(grads.param(theta).map(|g| g.iter().copied().collect()).unwrap_or_default())
}

/// For each qubit count: random angles per initialisation, gradients over
/// random ray batches, variance per angle over all (init, batch) samples,
/// averaged over angles. An empty dataset yields zero variance.
pub fn gradient_variance_study(cfg: &GradVarConfig, data: &TrainData) -> Result<Vec<GradVarRow>> {
    if !cfg.base.variant.is_quantum() {
        return invalid("gradient variance needs a quantum variant");
    }
    let mut rows = Vec::with_capacity(cfg.qubits.len());
    for &n in &cfg.qubits {
        let mut mcfg = cfg.base.clone();
        mcfg.set_key("qubits", &n.to_string())?;
        let mut per_param: Vec<Vec<f64>> = Vec::new();
        if !data.is_empty() {
            for init in 0..cfg.n_inits {
                let init_seed = cfg.seed.wrapping_mul(1_000_003).wrapping_add((n * 10_000 + init) as u64);
                let mut rng = ChaCha8Rng::seed_from_u64(init_seed);
                let mut model = Model::new(mcfg.clone(), init_seed)?;
                randomize_thetas(&mut model, &mut rng);
                for _ in 0..cfg.batches_per_init {
                    let idx: Vec<usize> = (0..cfg.batch_rays).map(|_| rng.random_range(0..data.len())).collect();
                    let rays: Vec<Ray> = idx.iter().map(|&i| data.rays[i]).collect();
                    let cols: Vec<[f64; 3]> = idx.iter().map(|&i| data.colors[i]).collect();
                    let g = theta_gradient(&model, &rays, &cols, &cfg.render, &mut rng)?;
                    if per_param.is_empty() {
                        per_param = vec![Vec::new(); g.len()];
                    }
                    for (acc, v) in per_param.iter_mut().zip(g) {
                        acc.push(v);
                    }
                }
            }
        }
        let samples = per_param.first().map_or(0, Vec::len);
        let variance = if per_param.is_empty() {
            0.0
        } else {
            per_param.iter().map(|v| sample_variance(v)).sum::<f64>() / per_param.len() as f64
        };
        rows.push(GradVarRow { variant: mcfg.variant, n_qubits: n, variance, samples });
    }
    Ok(rows)
}

fn random_input<R: Rng + ?Sized>(rng: &mut R) -> FieldInput {
    let p = [0; 3].map(|_| rng.random_range(-1.0..1.0));
    let d = loop {
        let v = [0; 3].map(|_| rng.random_range(-1.0..1.0f64));
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 && n <= 1.0 {
            break v.map(|x| x / n);
        }
    };
    FieldInput { position: p, direction: d }
}

/// Sample variance of the four raw channel outputs over `draws` random
/// models (fresh weights and uniform angles) at random inputs, averaged over
/// channels, for each qubit count.
pub fn concentration_study(base: &ModelConfig, qubits: &[usize], draws: usize, seed: u64) -> Result<Vec<(usize, f64)>> {
    let mut out = Vec::with_capacity(qubits.len());
    for &n in qubits {
        let mut cfg = base.clone();
        cfg.set_key("qubits", &n.to_string())?;
        let mut channels: Vec<Vec<f64>> = vec![Vec::with_capacity(draws); 4];
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (n as u64).wrapping_mul(0x9e37_79b9));
        for d in 0..draws {
            let mut model = Model::new(cfg.clone(), seed.wrapping_add((n * 1_000_000 + d) as u64))?;
            randomize_thetas(&mut model, &mut rng);
            let raw = model.raw_outputs(&random_input(&mut rng), &NoiseContext::none())?;
            for (c, v) in channels.iter_mut().zip(raw) {
                c.push(v);
            }
        }
        let var = channels.iter().map(|c| sample_variance(c)).sum::<f64>() / 4.0;
        out.push((n, var));
    }
    Ok(out)
}

/// Trains for exactly `steps` batches (wrapping epochs as needed).
pub fn train_steps(state: &mut TrainState, data: &TrainData, cfg: &TrainConfig, steps: usize) -> Result<()> {
    let per_epoch = data.len().div_ceil(cfg.batch_rays);
    while state.step < steps {
        let remaining = steps - state.step;
        let mut c = cfg.clone();
        c.steps_per_epoch = Some(remaining.min(per_epoch).min(cfg.steps_per_epoch.unwrap_or(usize::MAX)));
        train_epoch(state, data, &c)?;
    }
    Ok(())
}

#[derive(Debug)]
pub struct AblationResult {
    pub psnr_with: f64,
    pub psnr_without: f64,
    pub with_scaling: TrainState,
    pub without_scaling: TrainState,
}

/// Twin runs from identical initial parameters, one with learnable output
/// scales and one with the scales frozen at 1, scored on `eval`.
pub fn scaling_ablation(
    model_cfg: &ModelConfig,
    data: &SceneDataset,
    train: &TrainData,
    eval: &[Frame],
    cfg: &TrainConfig,
    steps: usize,
) -> Result<AblationResult> {
    let run = |freeze: bool| -> Result<(f64, TrainState)> {
        let model = Model::new(model_cfg.clone(), cfg.seed)?;
        let mut state = TrainState::new(model, cfg.seed);
        let mut c = cfg.clone();
        c.freeze_scales = freeze;
        train_steps(&mut state, train, &c, steps)?;
        let (p, _) = evaluate(&state.model, data, eval, &cfg.render)?;
        Ok((p, state))
    };
    let (psnr_with, with_scaling) = run(false)?;
    let (psnr_without, without_scaling) = run(true)?;
    Ok(AblationResult { psnr_with, psnr_without, with_scaling, without_scaling })
}

/// Trains each variant for the same number of steps and scores it.
pub fn matched_budget_comparison(
    variants: &[ModelConfig],
    data: &SceneDataset,
    train: &TrainData,
    eval: &[Frame],
    cfg: &TrainConfig,
    steps: usize,
) -> Result<Vec<(ModelVariant, f64)>> {
    variants
        .iter()
        .map(|mc| {
            let mut state = TrainState::new(Model::new(mc.clone(), cfg.seed)?, cfg.seed);
            train_steps(&mut state, train, cfg, steps)?;
            Ok((mc.variant, evaluate(&state.model, data, eval, &cfg.render)?.0))
        })
        .collect()
}

pub fn write_gradvar_csv(path: &Path, rows: &[GradVarRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "variant,qubits,variance,samples")?;
    for r in rows {
        writeln!(f, "{},{},{},{}", r.variant.name(), r.n_qubits, r.variance, r.samples)?;
    }
    f.flush()?;
    Ok(())
}

pub fn write_concentration_csv(path: &Path, variant: ModelVariant, rows: &[(usize, f64)]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "variant,qubits,variance")?;
    for (n, v) in rows {
        writeln!(f, "{},{n},{v}", variant.name())?;
    }
    f.flush()?;
    Ok(())
}
