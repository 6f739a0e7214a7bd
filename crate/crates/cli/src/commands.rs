use std::io::Write;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use qnerf::circuits::AnsatzConfig;
use qnerf::dataio::{load_blender, parse_pose, synthetic, SceneDataset};
use qnerf::field::{load_checkpoint, save_checkpoint, Model, ModelVariant, NoiseContext};
use qnerf::noise::{fidelity_study, write_fidelity_csv, NoiseConfig};
use qnerf::renderer::{
    append_metrics_csv, image_psnr, render_image, ssim, write_png, Camera, Image, SSIM_WINDOW,
};
use qnerf::trainer::studies::{
    concentration_study, gradient_variance_study, scaling_ablation, write_concentration_csv, write_gradvar_csv,
    GradVarConfig,
};
use qnerf::trainer::{fit, evaluate_with, RunOutput, TrainData, TrainState};
use qnerf::{Error, Result};

use crate::config::RunConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StudyKind {
    Fidelity,
    GradVar,
    Concentration,
    ScalingAblation,
}

impl StudyKind {
    pub fn from_name(s: &str) -> Result<Self> {
        Ok(match s {
            "fidelity" => Self::Fidelity,
            "gradvar" => Self::GradVar,
            "concentration" => Self::Concentration,
            "scaling-ablation" => Self::ScalingAblation,
            _ => return Err(Error::InvalidArgument(format!("unknown study {s:?}"))),
        })
    }
}

pub struct Ctx {
    pub cfg: RunConfig,
    pub data_root: Option<PathBuf>,
}

fn ensure_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Load { path: dir.to_path_buf(), message: e.to_string() })
}

fn load_scene(ctx: &Ctx) -> Result<SceneDataset> {
    let dir = ctx.cfg.scene_dir(ctx.data_root.as_deref())?;
    let mut data = load_blender(&dir)?;
    if ctx.cfg.downscale > 1 {
        data = data.downscale(ctx.cfg.downscale)?;
    }
    let n_train = if ctx.cfg.n_train == 0 { data.train.len() } else { ctx.cfg.n_train };
    let n_test = if ctx.cfg.n_test == 0 { data.test.len() } else { ctx.cfg.n_test };
    Ok(data.subset(n_train, n_test, ctx.cfg.seed))
}

fn checkpoint_path(cfg: &RunConfig) -> Result<PathBuf> {
    let path = cfg.checkpoint.clone().unwrap_or_else(|| cfg.out.join("model.ckpt"));
    if !path.is_file() {
        return Err(Error::Load { path, message: "checkpoint not found".into() });
    }
    Ok(path)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

pub fn train(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    cfg.validate()?;
    ctx.cfg.scene_dir(ctx.data_root.as_deref())?;
    ensure_out(&cfg.out)?;
    let data = load_scene(ctx)?;
    let train = TrainData::from_frames(&data, &data.train)?;
    let out = RunOutput::new(&cfg.out)?;
    write_text(&cfg.out.join("config.txt"), &cfg.to_text())?;
    let model = Model::new(cfg.model.clone(), cfg.seed)?;
    println!(
        "training {} n={} ell={} ({} params) on {} train / {} test frames at {}x{}",
        cfg.model.variant.name(),
        cfg.model.n_qubits,
        cfg.model.ell,
        model.param_count(),
        data.train.len(),
        data.test.len(),
        data.width,
        data.height
    );
    let mut state = TrainState::new(model, cfg.seed);
    fit(&mut state, &data, &train, &data.test, &cfg.train, Some(&out))?;
    save_checkpoint(&out.checkpoint(), &state.model)?;
    for h in &state.history {
        println!("epoch {:>3}  test psnr {:.3}  ssim {:.4}", h.epoch, h.psnr, h.ssim);
    }
    println!(
        "done: {} epochs, {} steps, best test psnr {:.3}; checkpoint {}",
        state.epoch,
        state.step,
        state.best_test_psnr,
        out.checkpoint().display()
    );
    Ok(())
}

#[derive(Deserialize)]
struct PoseFile {
    camera_angle_x: f64,
    width: usize,
    height: usize,
    transform_matrix: Vec<Vec<f64>>,
}

fn pose_camera(path: &Path) -> Result<Camera> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Load { path: path.to_path_buf(), message: e.to_string() })?;
    let pf: PoseFile =
        serde_json::from_str(&text).map_err(|e| Error::Format { path: path.to_path_buf(), message: e.to_string() })?;
    let pose = parse_pose(path, &pf.transform_matrix)?;
    Camera::new(pf.width, pf.height, pf.camera_angle_x, pose)
}

pub fn render(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    cfg.noise.validate()?;
    let ckpt = checkpoint_path(cfg)?;
    if let Some(p) = &cfg.pose_file {
        if !p.is_file() {
            return Err(Error::Load { path: p.clone(), message: "pose file not found".into() });
        }
    } else {
        cfg.scene_dir(ctx.data_root.as_deref())?;
    }
    ensure_out(&cfg.out)?;
    let model = load_checkpoint(&ckpt)?;
    let noise = NoiseContext::new(cfg.noise, 0);
    let (camera, truth, name) = match &cfg.pose_file {
        Some(p) => (pose_camera(p)?, None, "render_pose".to_string()),
        None => {
            let data = load_scene(ctx)?;
            let frames = if cfg.split == "train" { &data.train } else { &data.test };
            let frame = frames.get(cfg.frame).ok_or_else(|| {
                Error::InvalidArgument(format!("frame {} out of range ({} in {} split)", cfg.frame, frames.len(), cfg.split))
            })?;
            (data.camera(frame)?, Some(frame.image.clone()), format!("render_{}_{}", cfg.split, cfg.frame))
        }
    };
    let img = render_image(&model, &camera, &cfg.train.render, &noise)?;
    let png = cfg.out.join(format!("{name}.png"));
    write_png(&png, &img)?;
    println!("wrote {}", png.display());
    if let Some(truth) = truth {
        let (p, s) = score(&img, &truth)?;
        append_metrics_csv(&cfg.out.join("render_metrics.csv"), &name, p, s)?;
        println!("psnr {p:.4} ssim {s:.4}");
    }
    Ok(())
}

fn score(img: &Image, truth: &Image) -> Result<(f64, f64)> {
    let p = image_psnr(img, truth)?;
    let s = if img.width >= SSIM_WINDOW && img.height >= SSIM_WINDOW { ssim(img, truth)? } else { f64::NAN };
    Ok((p, s))
}

pub fn eval(ctx: &Ctx) -> Result<()> {
    let cfg = &ctx.cfg;
    cfg.noise.validate()?;
    let ckpt = checkpoint_path(cfg)?;
    cfg.scene_dir(ctx.data_root.as_deref())?;
    ensure_out(&cfg.out)?;
    let model = load_checkpoint(&ckpt)?;
    let data = load_scene(ctx)?;
    let frames = if cfg.split == "train" { &data.train } else { &data.test };
    let noise = NoiseContext::new(cfg.noise, 0);
    let (p, s, per) =
        evaluate_with(frames, |f| render_image(&model, &data.camera(f)?, &cfg.train.render, &noise))?;
    let csv = cfg.out.join("eval_metrics.csv");
    if csv.exists() {
        std::fs::remove_file(&csv)?;
    }
    for (f, (fp, fs)) in frames.iter().zip(&per) {
        append_metrics_csv(&csv, &f.file.display().to_string(), *fp, *fs)?;
    }
    println!("{} frames ({} split): mean psnr {p:.4} ssim {s:.4}", frames.len(), cfg.split);
    Ok(())
}

/// One row of the structural comparison table.
pub fn info_row(cfg: &RunConfig) -> Result<String> {
    let m = &cfg.model;
    m.validate()?;
    let gates = m.ansatz().map(|a: AnsatzConfig| a.gate_count());
    let (q, amps) = match m.variant {
        ModelVariant::ClassicalNeRF => ("-".to_string(), "-".to_string()),
        _ => (m.n_qubits.to_string(), m.amplitudes().to_string()),
    };
    Ok(format!(
        "{:<12} {:>6} {:>4} {:>10} {:>12} {:>6}",
        m.variant.name(),
        q,
        m.ell,
        amps,
        m.param_count(),
        gates.map_or("-".into(), |g| g.to_string())
    ))
}

pub fn info(ctx: &Ctx) -> Result<()> {
    ctx.cfg.validate()?;
    println!("{:<12} {:>6} {:>4} {:>10} {:>12} {:>6}", "variant", "qubits", "ell", "amplitudes", "parameters", "gates");
    println!("{}", info_row(&ctx.cfg)?);
    Ok(())
}

pub fn study(ctx: &Ctx, kind: StudyKind) -> Result<()> {
    let cfg = &ctx.cfg;
    cfg.validate()?;
    let needs_data = matches!(kind, StudyKind::GradVar | StudyKind::ScalingAblation);
    if needs_data {
        cfg.scene_dir(ctx.data_root.as_deref())?;
    }
    ensure_out(&cfg.out)?;
    let st = &cfg.study;
    match kind {
        StudyKind::Fidelity => {
            let ansatz = cfg
                .model
                .ansatz()
                .ok_or_else(|| Error::InvalidArgument("fidelity study needs a quantum variant".into()))?;
            let mut rows = Vec::new();
            for &sigma in &st.sigmas {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                let summary = fidelity_study(&ansatz, st.runs, &NoiseConfig::gaussian(sigma, cfg.seed), st.scope, &mut rng)?;
                println!("sigma {sigma}: mean fidelity {:.6} (std {:.6})", summary.mean, summary.std);
                rows.extend(summary.samples.iter().enumerate().map(|(i, &f)| (i, sigma, f)));
            }
            write_fidelity_csv(&cfg.out.join("fidelity.csv"), &rows)?;
        }
        StudyKind::GradVar => {
            let data = load_scene(ctx)?;
            let train = TrainData::from_frames(&data, &data.train)?;
            let gv = GradVarConfig {
                base: cfg.model.clone(),
                qubits: st.qubit_list.clone(),
                n_inits: st.n_inits,
                batches_per_init: st.batches_per_init,
                batch_rays: cfg.train.batch_rays,
                seed: cfg.seed,
                render: cfg.train.render,
            };
            let rows = gradient_variance_study(&gv, &train)?;
            for r in &rows {
                println!("n={}: gradient variance {:.6e} over {} samples", r.n_qubits, r.variance, r.samples);
            }
            write_gradvar_csv(&cfg.out.join("gradvar.csv"), &rows)?;
        }
        StudyKind::Concentration => {
            let rows = concentration_study(&cfg.model, &st.qubit_list, st.draws, cfg.seed)?;
            for (n, v) in &rows {
                println!("n={n}: output variance {v:.6e}");
            }
            write_concentration_csv(&cfg.out.join("concentration.csv"), cfg.model.variant, &rows)?;
        }
        StudyKind::ScalingAblation => {
            let data = load_scene(ctx)?;
            let train = TrainData::from_frames(&data, &data.train)?;
            let res = scaling_ablation(&cfg.model, &data, &train, &data.test, &cfg.train, st.steps)?;
            let mut f = std::fs::File::create(cfg.out.join("scaling_ablation.csv"))?;
            writeln!(f, "arm,steps,test_psnr")?;
            writeln!(f, "learnable,{},{}", st.steps, res.psnr_with)?;
            writeln!(f, "frozen,{},{}", st.steps, res.psnr_without)?;
            println!("learnable scales {:.3} dB, frozen {:.3} dB", res.psnr_with, res.psnr_without);
        }
    }
    Ok(())
}

/// Writes the procedural test scene under the output directory.
pub fn synth(ctx: &Ctx, size: usize, n_train: usize, n_test: usize) -> Result<()> {
    let dir = ctx.cfg.out.join("scene");
    ensure_out(&dir)?;
    synthetic::write_scene(&dir, size, n_train, n_test, ctx.cfg.seed)?;
    println!("wrote {}", dir.display());
    Ok(())
}
