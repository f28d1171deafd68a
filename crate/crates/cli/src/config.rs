use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use fuseseg::fusion::{default_ablation_alphas, AlphaMode, FuseMode, TeacherMode, TrainOptions};
use fuseseg::nn::ModelConfig;

use crate::error::CliError;

pub const SEED_ENV: &str = "FUSESEG_SEED";

/// Which model a training run produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Role {
    T1,
    T2,
    Fuse,
}

impl Role {
    pub fn name(self) -> &'static str {
        match self {
            Role::T1 => "t1",
            Role::T2 => "t2",
            Role::Fuse => "fuse",
        }
    }
}

impl std::str::FromStr for Role {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "t1" => Ok(Role::T1),
            "t2" => Ok(Role::T2),
            "fuse" => Ok(Role::Fuse),
            other => Err(CliError::Config(format!("role `{other}` is not t1, t2 or fuse"))),
        }
    }
}

/// Which modalities `eval` segments.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalModality {
    T1,
    T2,
    Both,
}

impl std::str::FromStr for EvalModality {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self, CliError> {
        match s {
            "t1" => Ok(EvalModality::T1),
            "t2" => Ok(EvalModality::T2),
            "both" => Ok(EvalModality::Both),
            other => Err(CliError::Config(format!("modality `{other}` is not t1, t2 or both"))),
        }
    }
}

impl EvalModality {
    pub fn name(self) -> &'static str {
        match self {
            EvalModality::T1 => "t1",
            EvalModality::T2 => "t2",
            EvalModality::Both => "both",
        }
    }
}

/// Every setting a subcommand may read. Serializes to flat `key = value`
/// text; loading that text back yields the same configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub command: String,
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub data: Option<PathBuf>,
    // generate
    pub dims: [usize; 3],
    pub count: usize,
    // model
    pub model: ModelConfig,
    // train
    pub role: Role,
    pub epochs: usize,
    pub patches: usize,
    pub patch_size: usize,
    pub batch: usize,
    pub lr: f64,
    pub alpha_mode: AlphaMode,
    pub fuse_mode: FuseMode,
    pub teachers: TeacherMode,
    pub tm1: Option<PathBuf>,
    pub tm2: Option<PathBuf>,
    pub holdout: usize,
    pub val_every: usize,
    // eval
    pub checkpoint: Option<PathBuf>,
    pub step: usize,
    pub modality: EvalModality,
    // ablate
    pub alphas: Vec<AlphaMode>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainOptions::default();
        Self {
            command: String::new(),
            seed: 0,
            out: None,
            data: None,
            dims: [64, 64, 64],
            count: 10,
            model: ModelConfig::toy(),
            role: Role::Fuse,
            epochs: t.epochs,
            patches: t.patches_per_epoch,
            patch_size: t.patch_size,
            batch: t.batch,
            lr: t.lr,
            alpha_mode: t.alpha_mode,
            fuse_mode: t.fuse_mode,
            teachers: t.teachers,
            tm1: None,
            tm2: None,
            holdout: 1,
            val_every: t.val_every,
            checkpoint: None,
            step: 32,
            modality: EvalModality::Both,
            alphas: default_ablation_alphas(),
        }
    }
}

fn opt_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

fn opt_usize(v: Option<usize>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

pub fn parse_dims(s: &str) -> Result<[usize; 3], CliError> {
    let parts: Vec<&str> = s.split(['x', 'X', ',']).map(str::trim).collect();
    let nums = parts
        .iter()
        .map(|p| p.parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|_| CliError::Config(format!("dims `{s}` must be N or DxHxW")))?;
    match nums[..] {
        [n] => Ok([n; 3]),
        [d, h, w] => Ok([d, h, w]),
        _ => Err(CliError::Config(format!("dims `{s}` must be N or DxHxW"))),
    }
}

pub fn parse_alphas(s: &str) -> Result<Vec<AlphaMode>, CliError> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            if let Ok(v) = p.parse::<f64>() {
                format!("constant:{v}").parse::<AlphaMode>()
            } else {
                p.parse::<AlphaMode>()
            }
            .map_err(CliError::from)
        })
        .collect()
}

fn alpha_label(a: &AlphaMode) -> String {
    match a {
        AlphaMode::Constant(v) => v.to_string(),
        other => other.to_string(),
    }
}

fn teachers_name(t: TeacherMode) -> &'static str {
    match t {
        TeacherMode::Joint => "joint",
        TeacherMode::Sequential => "sequential",
    }
}

pub fn parse_teachers(s: &str) -> Result<TeacherMode, CliError> {
    match s {
        "joint" => Ok(TeacherMode::Joint),
        "sequential" => Ok(TeacherMode::Sequential),
        other => Err(CliError::Config(format!("teachers `{other}` is not joint or sequential"))),
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T, CliError> {
    v.parse()
        .map_err(|_| CliError::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn path(v: &str) -> Option<PathBuf> {
    (!v.is_empty()).then(|| PathBuf::from(v))
}

impl RunConfig {
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("command", self.command.clone());
        kv("seed", self.seed.to_string());
        kv("out", opt_path(&self.out));
        kv("data", opt_path(&self.data));
        kv("dims", format!("{}x{}x{}", self.dims[0], self.dims[1], self.dims[2]));
        kv("count", self.count.to_string());
        kv("base_channels", m.base_channels.to_string());
        kv("enc_blocks", m.enc_blocks.to_string());
        kv("dec_blocks", m.dec_blocks.to_string());
        kv("heads", m.heads.to_string());
        kv("c_k", opt_usize(m.c_k));
        kv("c_v", opt_usize(m.c_v));
        kv("dropout_p", m.dropout_p.to_string());
        kv("num_classes", m.num_classes.to_string());
        kv("in_channels", m.in_channels.to_string());
        kv("attention_levels", m.attention_levels.to_string());
        kv("role", self.role.name().to_string());
        kv("epochs", self.epochs.to_string());
        kv("patches", self.patches.to_string());
        kv("patch_size", self.patch_size.to_string());
        kv("batch", self.batch.to_string());
        kv("lr", self.lr.to_string());
        kv("alpha_mode", self.alpha_mode.to_string());
        kv("fuse_mode", self.fuse_mode.to_string());
        kv("teachers", teachers_name(self.teachers).to_string());
        kv("tm1", opt_path(&self.tm1));
        kv("tm2", opt_path(&self.tm2));
        kv("holdout", self.holdout.to_string());
        kv("val_every", self.val_every.to_string());
        kv("checkpoint", opt_path(&self.checkpoint));
        kv("step", self.step.to_string());
        kv("modality", self.modality.name().to_string());
        kv(
            "alphas",
            self.alphas.iter().map(alpha_label).collect::<Vec<_>>().join(","),
        );
        s
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and `#`
    /// comments are skipped; unknown keys are errors.
    pub fn apply_text(&mut self, text: &str) -> Result<(), CliError> {
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected key = value", i + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn set(&mut self, k: &str, v: &str) -> Result<(), CliError> {
        let m = &mut self.model;
        match k {
            "command" => self.command = v.to_string(),
            "seed" => self.seed = num(k, v)?,
            "out" => self.out = path(v),
            "data" => self.data = path(v),
            "dims" => self.dims = parse_dims(v)?,
            "count" => self.count = num(k, v)?,
            "base_channels" => m.base_channels = num(k, v)?,
            "enc_blocks" => m.enc_blocks = num(k, v)?,
            "dec_blocks" => m.dec_blocks = num(k, v)?,
            "heads" => m.heads = num(k, v)?,
            "c_k" => m.c_k = if v.is_empty() { None } else { Some(num(k, v)?) },
            "c_v" => m.c_v = if v.is_empty() { None } else { Some(num(k, v)?) },
            "dropout_p" => m.dropout_p = num(k, v)?,
            "num_classes" => m.num_classes = num(k, v)?,
            "in_channels" => m.in_channels = num(k, v)?,
            "attention_levels" => m.attention_levels = num(k, v)?,
            "role" => self.role = v.parse()?,
            "epochs" => self.epochs = num(k, v)?,
            "patches" => self.patches = num(k, v)?,
            "patch_size" => self.patch_size = num(k, v)?,
            "batch" => self.batch = num(k, v)?,
            "lr" => self.lr = num(k, v)?,
            "alpha_mode" => self.alpha_mode = v.parse()?,
            "fuse_mode" => self.fuse_mode = v.parse()?,
            "teachers" => self.teachers = parse_teachers(v)?,
            "tm1" => self.tm1 = path(v),
            "tm2" => self.tm2 = path(v),
            "holdout" => self.holdout = num(k, v)?,
            "val_every" => self.val_every = num(k, v)?,
            "checkpoint" => self.checkpoint = path(v),
            "step" => self.step = num(k, v)?,
            "modality" => self.modality = v.parse()?,
            "alphas" => self.alphas = parse_alphas(v)?,
            other => return Err(CliError::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut c = RunConfig::default();
        c.apply_text(&text)?;
        Ok(c)
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        std::fs::write(path, self.to_text()).map_err(|e| CliError::io(path, e))
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            epochs: self.epochs,
            patches_per_epoch: self.patches,
            patch_size: self.patch_size,
            batch: self.batch,
            lr: self.lr,
            seed: self.seed,
            alpha_mode: self.alpha_mode,
            fuse_mode: self.fuse_mode,
            teachers: self.teachers,
            val_every: self.val_every,
            val_step: self.step,
        }
    }
}
