//! Optimisation loop: Adam with per-group learning rates, a multistep
//! schedule, ray-batch epochs, evaluation and early stopping.

pub mod studies;

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Matrix, ParamGroup, ParamStore, Tape};
use crate::dataio::{pixel_rays, Frame, SceneDataset};
use crate::error::{invalid, Error, Result};
use crate::field::{save_checkpoint, Model, NoiseContext};
use crate::renderer::{image_psnr, render_image, render_rays, ssim, Image, Ray, RenderConfig, SSIM_WINDOW};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_main: f64,
    pub lr_scale: f64,
    /// Epochs after which both learning rates are multiplied by `gamma`.
    pub milestones: Vec<usize>,
    pub gamma: f64,
    pub batch_rays: usize,
    pub max_epochs: usize,
    pub eval_every: usize,
    pub seed: u64,
    /// Keep the output scales fixed at their initial value.
    pub freeze_scales: bool,
    /// Caps the number of ray batches per epoch (`None` = one pass over all
    /// training pixels).
    pub steps_per_epoch: Option<usize>,
    /// Linear ramp of both learning rates over the first optimiser steps.
    /// Without it the encoder can push every density amplitude below the
    /// ReLU within a few steps, leaving an empty field with zero gradient.
    pub warmup_steps: usize,
    pub render: RenderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_main: 5e-4,
            lr_scale: 1e-2,
            milestones: vec![15, 30, 45],
            gamma: 0.5,
            batch_rays: 64,
            max_epochs: 50,
            eval_every: 5,
            seed: 0,
            freeze_scales: false,
            steps_per_epoch: None,
            warmup_steps: 200,
            render: RenderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_main > 0.0 && self.lr_scale > 0.0) {
            return invalid("learning rates must be positive");
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return invalid("gamma must lie in (0, 1]");
        }
        if self.batch_rays == 0 || self.max_epochs == 0 || self.eval_every == 0 {
            return invalid("batch_rays, max_epochs and eval_every must be >= 1");
        }
        if self.milestones.windows(2).any(|w| w[0] >= w[1]) {
            return invalid("milestones must be strictly increasing");
        }
        if self.render.n_samples < 2 {
            return invalid("need at least 2 samples per ray");
        }
        Ok(())
    }

    /// Learning rate of a group while training epoch `epoch` (1-based).
    pub fn lr_at(&self, group: ParamGroup, epoch: usize) -> f64 {
        let base = match group {
            ParamGroup::Main => self.lr_main,
            ParamGroup::Scale => self.lr_scale,
        };
        let passed = self.milestones.iter().filter(|&&m| epoch > m).count();
        base * self.gamma.powi(passed as i32)
    }

    /// Warmup multiplier for optimiser step `step` (0-based).
    pub fn warmup_factor(&self, step: usize) -> f64 {
        if step >= self.warmup_steps {
            1.0
        } else {
            (step + 1) as f64 / self.warmup_steps as f64
        }
    }

    /// Learning rate after the last milestone.
    pub fn lr_floor(&self, group: ParamGroup) -> f64 {
        self.lr_at(group, usize::MAX)
    }
}

/// Adam with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
    t: i32,
}

impl Adam {
    pub fn new(store: &ParamStore) -> Self {
        let zeros = || store.iter().map(|(_, p)| Matrix::zeros(p.value.raw_dim())).collect::<Vec<_>>();
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: zeros(), v: zeros(), t: 0 }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Applies one update from the gradients in `store`. Groups for which
    /// `lr` returns `None` are left untouched.
    pub fn step(&mut self, store: &mut ParamStore, lr: impl Fn(ParamGroup) -> Option<f64>) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let Some(rate) = lr(p.group) else { continue };
            ndarray::Zip::from(&mut p.value).and(&p.grad).and(m).and(v).for_each(|x, &g, m, v| {
                *m = b1 * *m + (1.0 - b1) * g;
                *v = b2 * *v + (1.0 - b2) * g * g;
                *x -= rate * (*m / c1) / ((*v / c2).sqrt() + eps);
            });
        }
    }
}

/// Training pixels flattened to rays.
#[derive(Clone, Debug, Default)]
pub struct TrainData {
    pub rays: Vec<Ray>,
    pub colors: Vec<[f64; 3]>,
}

impl TrainData {
    pub fn from_frames(data: &SceneDataset, frames: &[Frame]) -> Result<Self> {
        let (rays, colors) = pixel_rays(data, frames)?;
        Ok(Self { rays, colors })
    }

    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalRecord {
    pub epoch: usize,
    pub psnr: f64,
    pub ssim: f64,
}

#[derive(Debug)]
pub struct TrainState {
    pub model: Model,
    pub adam: Adam,
    pub epoch: usize,
    pub step: usize,
    pub best_test_psnr: f64,
    pub history: Vec<EvalRecord>,
    pub losses: Vec<f64>,
    pub stopped: bool,
    rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(model: Model, seed: u64) -> Self {
        let adam = Adam::new(model.store());
        Self {
            model,
            adam,
            epoch: 0,
            step: 0,
            best_test_psnr: f64::NEG_INFINITY,
            history: Vec::new(),
            losses: Vec::new(),
            stopped: false,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

/// Rendered batch loss and its gradient, accumulated into the store.
pub fn batch_loss_and_grad(
    model: &mut Model,
    rays: &[Ray],
    targets: &[[f64; 3]],
    render: &RenderConfig,
    freeze_scales: bool,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let target = Matrix::from_shape_fn((targets.len(), 3), |(r, k)| targets[r][k]);
    let grads = {
        let mut tape = Tape::new(model.store());
        if freeze_scales {
            if let Some(a) = model.alpha_param() {
                tape.freeze(a);
            }
        }
        let rgb = render_rays(&mut tape, model, rays, render, Some(rng), &NoiseContext::none())?;
        let loss = tape.mse(rgb, target)?;
        let value = tape.value(loss)[[0, 0]];
        if !value.is_finite() {
            return Ok(value);
        }
        (value, tape.backward(loss)?)
    };
    model.store_mut().zero_grad();
    model.store_mut().accumulate(&grads.1);
    Ok(grads.0)
}

/// One optimisation step on a ray batch. Returns the batch loss.
pub fn train_step(state: &mut TrainState, rays: &[Ray], targets: &[[f64; 3]], cfg: &TrainConfig) -> Result<f64> {
    let batch = state.step;
    let loss = batch_loss_and_grad(&mut state.model, rays, targets, &cfg.render, cfg.freeze_scales, &mut state.rng)?;
    if !loss.is_finite() {
        return Err(Error::NonFinite { step: state.step, batch, norms: state.model.store().norms_summary() });
    }
    let epoch = state.epoch.max(1);
    let freeze = cfg.freeze_scales;
    let warm = cfg.warmup_factor(state.step);
    state.adam.step(state.model.store_mut(), |g| {
        if freeze && g == ParamGroup::Scale {
            None
        } else {
            Some(cfg.lr_at(g, epoch) * warm)
        }
    });
    if state.model.store().iter().any(|(_, p)| p.value.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFinite { step: state.step, batch, norms: state.model.store().norms_summary() });
    }
    state.step += 1;
    state.losses.push(loss);
    Ok(loss)
}

/// One pass over shuffled ray batches. Returns the mean batch loss.
pub fn train_epoch(state: &mut TrainState, data: &TrainData, cfg: &TrainConfig) -> Result<f64> {
    if data.is_empty() {
        return invalid("no training rays");
    }
    state.epoch += 1;
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut state.rng);
    let mut total = 0.0;
    let mut count = 0;
    for chunk in order.chunks(cfg.batch_rays) {
        if cfg.steps_per_epoch.is_some_and(|cap| count >= cap) {
            break;
        }
        let rays: Vec<Ray> = chunk.iter().map(|&i| data.rays[i]).collect();
        let cols: Vec<[f64; 3]> = chunk.iter().map(|&i| data.colors[i]).collect();
        total += train_step(state, &rays, &cols, cfg)?;
        count += 1;
    }
    Ok(total / count as f64)
}

/// Mean PSNR and SSIM of `render(frame)` against each frame's image, plus
/// the per-frame values. SSIM is NaN for images smaller than its window.
pub fn evaluate_with(
    frames: &[Frame],
    mut render: impl FnMut(&Frame) -> Result<Image>,
) -> Result<(f64, f64, Vec<(f64, f64)>)> {
    let mut per = Vec::with_capacity(frames.len());
    for f in frames {
        let img = render(f)?;
        let p = image_psnr(&img, &f.image)?;
        let s = if img.width >= SSIM_WINDOW && img.height >= SSIM_WINDOW { ssim(&img, &f.image)? } else { f64::NAN };
        per.push((p, s));
    }
    let n = per.len().max(1) as f64;
    let mean_p = per.iter().map(|x| x.0).sum::<f64>() / n;
    let mean_s = per.iter().map(|x| x.1).sum::<f64>() / n;
    Ok((mean_p, mean_s, per))
}

/// Renders every frame with midpoint sampling and scores it.
pub fn evaluate(model: &Model, data: &SceneDataset, frames: &[Frame], render: &RenderConfig) -> Result<(f64, f64)> {
    let (p, s, _) = evaluate_with(frames, |f| render_image(model, &data.camera(f)?, render, &NoiseContext::none()))?;
    Ok((p, s))
}

/// True once the latest test PSNR fell below the previous one, or the
/// epoch budget is spent.
pub fn early_stop_check(history: &[f64], epoch: usize, max_epochs: usize) -> bool {
    if epoch >= max_epochs {
        return true;
    }
    matches!(history, [.., prev, last] if last < prev)
}

/// Where a training run writes its logs and checkpoints.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub dir: PathBuf,
}

impl RunOutput {
    pub fn new(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        Ok(Self { dir: dir.to_path_buf() })
    }

    pub fn loss_log(&self) -> PathBuf {
        self.dir.join("train_loss.csv")
    }

    pub fn eval_log(&self) -> PathBuf {
        self.dir.join("eval.csv")
    }

    pub fn checkpoint(&self) -> PathBuf {
        self.dir.join("model.ckpt")
    }
}

/// Trains until early stop, evaluating on `test` every `eval_every` epochs.
pub fn fit(
    state: &mut TrainState,
    data: &SceneDataset,
    train: &TrainData,
    test: &[Frame],
    cfg: &TrainConfig,
    out: Option<&RunOutput>,
) -> Result<()> {
    cfg.validate()?;
    let mut loss_file = match out {
        Some(o) => {
            let mut f = std::io::BufWriter::new(std::fs::File::create(o.loss_log())?);
            writeln!(f, "step,loss")?;
            let mut e = std::fs::File::create(o.eval_log())?;
            writeln!(e, "epoch,test_psnr,test_ssim")?;
            Some(f)
        }
        None => None,
    };
    while !state.stopped {
        let first = state.step;
        train_epoch(state, train, cfg)?;
        if let Some(f) = loss_file.as_mut() {
            for (k, l) in state.losses[first..].iter().enumerate() {
                writeln!(f, "{},{l}", first + k + 1)?;
            }
            f.flush()?;
        }
        let epoch = state.epoch;
        if epoch % cfg.eval_every == 0 || epoch >= cfg.max_epochs {
            let (p, s) = evaluate(&state.model, data, test, &cfg.render)?;
            state.history.push(EvalRecord { epoch, psnr: p, ssim: s });
            state.best_test_psnr = state.best_test_psnr.max(p);
            if let Some(o) = out {
                let mut e = std::fs::OpenOptions::new().append(true).open(o.eval_log())?;
                writeln!(e, "{epoch},{p},{s}")?;
                save_checkpoint(&o.checkpoint(), &state.model)?;
            }
            let psnrs: Vec<f64> = state.history.iter().map(|h| h.psnr).collect();
            state.stopped = early_stop_check(&psnrs, epoch, cfg.max_epochs);
        } else if epoch >= cfg.max_epochs {
            state.stopped = true;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn schedule_reaches_an_eighth() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(ParamGroup::Main, 1), 5e-4);
        assert_eq!(cfg.lr_at(ParamGroup::Main, 15), 5e-4);
        assert_eq!(cfg.lr_at(ParamGroup::Main, 16), 2.5e-4);
        assert_eq!(cfg.lr_floor(ParamGroup::Main), 6.25e-5);
        assert_eq!(cfg.lr_floor(ParamGroup::Scale), 1e-2 / 8.0);
    }

    #[test]
    fn early_stop_examples() {
        assert!(early_stop_check(&[20.0, 22.0, 21.0], 15, 50));
        assert!(!early_stop_check(&[20.0, 22.0, 23.0], 15, 50));
        assert!(!early_stop_check(&[20.0], 5, 50));
        assert!(early_stop_check(&[20.0], 50, 50));
    }

    #[test]
    fn adam_zero_gradient_does_not_move() {
        let mut store = ParamStore::new();
        let id = store.add("w", ParamGroup::Main, array![[1.0, -2.0]]);
        let mut adam = Adam::new(&store);
        for _ in 0..3 {
            adam.step(&mut store, |_| Some(0.1));
        }
        assert_eq!(store.value(id), &array![[1.0, -2.0]]);
    }

    #[test]
    fn adam_skips_frozen_groups() {
        let mut store = ParamStore::new();
        let a = store.add("a", ParamGroup::Scale, array![[1.0]]);
        let w = store.add("w", ParamGroup::Main, array![[1.0]]);
        store.get_mut(a).grad.fill(1.0);
        store.get_mut(w).grad.fill(1.0);
        let mut adam = Adam::new(&store);
        adam.step(&mut store, |g| (g == ParamGroup::Main).then_some(0.1));
        assert_eq!(store.value(a)[[0, 0]], 1.0);
        assert!((store.value(w)[[0, 0]] - 0.9).abs() < 1e-6);
    }
}
