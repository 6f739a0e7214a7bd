//! Plain-text `key = value` run configuration.
//!
//! Lines are `key = value`; `#` starts a comment. Every key must be known,
//! and later lines override earlier ones. Command-line flags are applied on
//! top of the file.

use std::path::{Path, PathBuf};

use qnerf::field::ModelConfig;
use qnerf::field::ModelVariant;
use qnerf::noise::{NoiseConfig, PerturbScope};
use qnerf::trainer::TrainConfig;
use qnerf::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct StudyConfig {
    pub runs: usize,
    pub sigmas: Vec<f64>,
    pub qubit_list: Vec<usize>,
    pub n_inits: usize,
    pub batches_per_init: usize,
    pub draws: usize,
    pub steps: usize,
    pub scope: PerturbScope,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            runs: 50,
            sigmas: vec![0.01, 0.05, 0.1],
            qubit_list: vec![4, 6, 8],
            n_inits: 20,
            batches_per_init: 20,
            draws: 1000,
            steps: 500,
            scope: PerturbScope::Ansatz,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub scene: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub noise: NoiseConfig,
    /// Integer factor applied to every image after loading.
    pub downscale: usize,
    /// Frames kept per split (0 = all).
    pub n_train: usize,
    pub n_test: usize,
    pub checkpoint: Option<PathBuf>,
    pub split: String,
    pub frame: usize,
    pub pose_file: Option<PathBuf>,
    pub study: StudyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            scene: None,
            out: PathBuf::from("runs/qnerf"),
            seed: 0,
            model: ModelConfig::new(ModelVariant::FullQ, 8),
            train: TrainConfig::default(),
            noise: NoiseConfig::none(),
            downscale: 1,
            n_train: 0,
            n_test: 0,
            checkpoint: None,
            split: "test".into(),
            frame: 0,
            pose_file: None,
            study: StudyConfig::default(),
        }
    }
}

fn bad(key: &str, value: &str) -> Error {
    Error::InvalidArgument(format!("bad value for {key}: {value:?}"))
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| bad(key, value))
}

fn list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>> {
    if value.is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| num(key, v.trim())).collect()
}

fn flag(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(bad(key, value)),
    }
}

impl RunConfig {
    /// Sets one key. `qubits` is applied before `parity_sets` only if it
    /// appears first, so configs should list it early.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        let t = &mut self.train;
        match key {
            "scene" => self.scene = Some(PathBuf::from(value)),
            "out" => self.out = PathBuf::from(value),
            "seed" => {
                self.seed = num(key, value)?;
                t.seed = self.seed;
            }
            "downscale" => self.downscale = num(key, value)?,
            "n_train" => self.n_train = num(key, value)?,
            "n_test" => self.n_test = num(key, value)?,
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "split" => {
                if value != "train" && value != "test" {
                    return Err(bad(key, value));
                }
                self.split = value.into();
            }
            "frame" => self.frame = num(key, value)?,
            "pose_file" => self.pose_file = Some(PathBuf::from(value)),
            "lr_main" => t.lr_main = num(key, value)?,
            "lr_scale" => t.lr_scale = num(key, value)?,
            "milestones" => t.milestones = list(key, value)?,
            "gamma" => t.gamma = num(key, value)?,
            "batch_rays" => t.batch_rays = num(key, value)?,
            "max_epochs" => t.max_epochs = num(key, value)?,
            "eval_every" => t.eval_every = num(key, value)?,
            "freeze_scales" => t.freeze_scales = flag(key, value)?,
            "steps_per_epoch" => t.steps_per_epoch = if value == "all" { None } else { Some(num(key, value)?) },
            "warmup_steps" => t.warmup_steps = num(key, value)?,
            "n_samples" => t.render.n_samples = num(key, value)?,
            "last_delta" => t.render.last_delta = num(key, value)?,
            "background" => t.render.background = num(key, value)?,
            "chunk_rays" => t.render.chunk_rays = num(key, value)?,
            "noise_sigma" => self.noise.gaussian_std = num(key, value)?,
            "readout_p" => self.noise.readout_p = num(key, value)?,
            "noise_seed" => self.noise.seed = num(key, value)?,
            "study_runs" => self.study.runs = num(key, value)?,
            "study_sigmas" => self.study.sigmas = list(key, value)?,
            "study_qubits" => self.study.qubit_list = list(key, value)?,
            "study_inits" => self.study.n_inits = num(key, value)?,
            "study_batches" => self.study.batches_per_init = num(key, value)?,
            "study_draws" => self.study.draws = num(key, value)?,
            "study_steps" => self.study.steps = num(key, value)?,
            "study_scope" => {
                self.study.scope = match value {
                    "ansatz" => PerturbScope::Ansatz,
                    "ansatz+embedding" => PerturbScope::AnsatzAndEmbedding,
                    _ => return Err(bad(key, value)),
                }
            }
            _ => {
                if !self.model.set_key(key, value)? {
                    return Err(Error::InvalidArgument(format!("unknown config key {key:?}")));
                }
            }
        }
        Ok(())
    }

    pub fn parse_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::InvalidArgument(format!("line {}: expected key = value", i + 1)))?;
            cfg.set(k.trim(), v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Load { path: path.to_path_buf(), message: e.to_string() })?;
        Self::parse_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.noise.validate()?;
        if self.downscale == 0 {
            return Err(bad("downscale", "0"));
        }
        Ok(())
    }

    /// Scene directory: the configured path, resolved against
    /// `data_root` when relative and not present as given, or
    /// `data_root/lego` when unset.
    pub fn scene_dir(&self, data_root: Option<&Path>) -> Result<PathBuf> {
        let path = match (&self.scene, data_root) {
            (Some(p), Some(root)) if p.is_relative() && !p.exists() => root.join(p),
            (Some(p), _) => p.clone(),
            (None, Some(root)) => root.join("lego"),
            (None, None) => {
                return Err(Error::InvalidArgument("no scene given (use --scene or set QNERF_DATA_DIR)".into()))
            }
        };
        if !path.join("transforms_train.json").is_file() {
            return Err(Error::Load { path, message: "missing transforms_train.json".into() });
        }
        Ok(path)
    }

    /// Resolved configuration in the same `key = value` format.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let join = |v: &[String]| v.join(",");
        let mut s = String::new();
        if let Some(p) = &self.scene {
            s += &format!("scene = {}\n", p.display());
        }
        s += &format!("out = {}\nseed = {}\n", self.out.display(), self.seed);
        for line in self.model.to_text().lines() {
            if let Some((k, v)) = line.split_once('=') {
                s += &format!("{k} = {v}\n");
            }
        }
        s += &format!(
            "lr_main = {}\nlr_scale = {}\nmilestones = {}\ngamma = {}\nbatch_rays = {}\nmax_epochs = {}\neval_every = {}\n",
            t.lr_main,
            t.lr_scale,
            join(&t.milestones.iter().map(|m| m.to_string()).collect::<Vec<_>>()),
            t.gamma,
            t.batch_rays,
            t.max_epochs,
            t.eval_every
        );
        s += &format!(
            "freeze_scales = {}\nsteps_per_epoch = {}\nwarmup_steps = {}\n",
            t.freeze_scales,
            t.steps_per_epoch.map_or("all".into(), |v| v.to_string()),
            t.warmup_steps
        );
        s += &format!(
            "n_samples = {}\nlast_delta = {}\nbackground = {}\nchunk_rays = {}\n",
            t.render.n_samples, t.render.last_delta, t.render.background, t.render.chunk_rays
        );
        s += &format!(
            "noise_sigma = {}\nreadout_p = {}\nnoise_seed = {}\n",
            self.noise.gaussian_std, self.noise.readout_p, self.noise.seed
        );
        s += &format!("downscale = {}\nn_train = {}\nn_test = {}\n", self.downscale, self.n_train, self.n_test);
        s
    }
}
