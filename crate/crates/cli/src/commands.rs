use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use fuseseg::data::{
    generate_subjects, load_checkpoint, load_subjects, save_checkpoint, save_subject, stitch_inference,
    Modality, PhantomSpec, Subject,
};
use fuseseg::fusion::{
    ablation_alpha, ablation_csv, metrics_csv, train_fuse, train_teacher, FuseRun, MetricRow, TeacherMode,
};
use fuseseg::gradcheck::{model_check, op_suite};
use fuseseg::metrics::{report_csv, report_table, DiceReport, ModelDice};
use fuseseg::nn::{build_model, param_counts, ModelConfig, NamedWeights};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::{EvalModality, Role, RunConfig, SEED_ENV};
use crate::error::CliError;
use crate::{Cli, Command};

/// Reference count reported for the fuse model at full scale.
const REFERENCE_FUSE_PARAMS: usize = 2_123_211;

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::io(path, e))
}

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a PathBuf, CliError> {
    p.as_ref()
        .ok_or_else(|| CliError::Config(format!("--{flag} is required")))
}

fn set<T: ToString>(cfg: &mut RunConfig, key: &str, v: &Option<T>) -> Result<(), CliError> {
    match v {
        Some(v) => cfg.set(key, &v.to_string()),
        None => Ok(()),
    }
}

fn set_path(cfg: &mut RunConfig, key: &str, v: &Option<PathBuf>) -> Result<(), CliError> {
    set(cfg, key, &v.as_ref().map(|p| p.display().to_string()))
}

/// Defaults, then `FUSESEG_SEED`, then the config file, then flags.
pub fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::default();
    if let Ok(v) = std::env::var(SEED_ENV) {
        cfg.set("seed", v.trim())?;
    }
    if let Some(p) = &cli.config {
        let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
        cfg.apply_text(&text)?;
    }
    set(&mut cfg, "seed", &cli.seed)?;
    match &cli.command {
        Command::Generate { dims, count, out } => {
            cfg.command = "generate".into();
            set(&mut cfg, "dims", dims)?;
            set(&mut cfg, "count", count)?;
            set_path(&mut cfg, "out", out)?;
        }
        Command::Train {
            role,
            data,
            epochs,
            patches,
            patch_size,
            batch,
            lr,
            alpha_mode,
            fuse_mode,
            teachers,
            tm1,
            tm2,
            holdout,
            val_every,
            out,
        } => {
            cfg.command = "train".into();
            set(&mut cfg, "role", role)?;
            set_path(&mut cfg, "data", data)?;
            set(&mut cfg, "epochs", epochs)?;
            set(&mut cfg, "patches", patches)?;
            set(&mut cfg, "patch_size", patch_size)?;
            set(&mut cfg, "batch", batch)?;
            set(&mut cfg, "lr", lr)?;
            set(&mut cfg, "alpha_mode", alpha_mode)?;
            set(&mut cfg, "fuse_mode", fuse_mode)?;
            set(&mut cfg, "teachers", teachers)?;
            set_path(&mut cfg, "tm1", tm1)?;
            set_path(&mut cfg, "tm2", tm2)?;
            set(&mut cfg, "holdout", holdout)?;
            set(&mut cfg, "val_every", val_every)?;
            set_path(&mut cfg, "out", out)?;
            if teachers.is_none() && cfg.tm1.is_some() && cfg.tm2.is_some() {
                cfg.teachers = TeacherMode::Sequential;
            }
        }
        Command::Eval {
            checkpoint,
            data,
            step,
            modality,
            out,
        } => {
            cfg.command = "eval".into();
            set_path(&mut cfg, "checkpoint", checkpoint)?;
            set_path(&mut cfg, "data", data)?;
            set(&mut cfg, "step", step)?;
            set(&mut cfg, "modality", modality)?;
            set_path(&mut cfg, "out", out)?;
        }
        Command::Gradcheck { out } => {
            cfg.command = "gradcheck".into();
            set_path(&mut cfg, "out", out)?;
        }
        Command::Paramcount { out } => {
            cfg.command = "paramcount".into();
            set_path(&mut cfg, "out", out)?;
        }
        Command::Ablate {
            alphas,
            data,
            epochs,
            patches,
            patch_size,
            batch,
            lr,
            fuse_mode,
            tm1,
            tm2,
            holdout,
            out,
        } => {
            cfg.command = "ablate".into();
            set(&mut cfg, "alphas", alphas)?;
            set_path(&mut cfg, "data", data)?;
            set(&mut cfg, "epochs", epochs)?;
            set(&mut cfg, "patches", patches)?;
            set(&mut cfg, "patch_size", patch_size)?;
            set(&mut cfg, "batch", batch)?;
            set(&mut cfg, "lr", lr)?;
            set(&mut cfg, "fuse_mode", fuse_mode)?;
            set_path(&mut cfg, "tm1", tm1)?;
            set_path(&mut cfg, "tm2", tm2)?;
            set(&mut cfg, "holdout", holdout)?;
            set_path(&mut cfg, "out", out)?;
            cfg.teachers = if cfg.tm1.is_some() && cfg.tm2.is_some() {
                TeacherMode::Sequential
            } else {
                TeacherMode::Joint
            };
        }
    }
    cfg.model.validate()?;
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<String, CliError> {
    let cfg = resolve(&cli)?;
    match cfg.command.as_str() {
        "generate" => generate(&cfg),
        "train" => train(&cfg),
        "eval" => eval(&cfg),
        "gradcheck" => gradcheck(&cfg),
        "paramcount" => paramcount(&cfg),
        "ablate" => ablate(&cfg),
        other => Err(CliError::Config(format!("unknown command `{other}`"))),
    }
}

fn generate(cfg: &RunConfig) -> Result<String, CliError> {
    let out = required(&cfg.out, "out")?;
    let spec = PhantomSpec {
        dims: cfg.dims,
        seed: cfg.seed,
        ..Default::default()
    };
    let subjects = generate_subjects(&spec, cfg.count)?;
    for s in &subjects {
        save_subject(out, s)?;
    }
    cfg.save(&out.join("generate.cfg"))?;
    Ok(format!(
        "wrote {} subjects ({} files) of {:?} to {}\n",
        subjects.len(),
        3 * subjects.len(),
        cfg.dims,
        out.display()
    ))
}

/// Trailing `holdout` subjects validate; the rest train. With a single
/// subject there is no validation split.
fn split(subjects: &[Subject], holdout: usize) -> (&[Subject], &[Subject]) {
    if subjects.len() <= holdout {
        (subjects, &[])
    } else {
        subjects.split_at(subjects.len() - holdout)
    }
}

fn load_teacher(path: &Path, model: &ModelConfig) -> Result<NamedWeights<f32>, CliError> {
    let (config, w) = load_checkpoint(path)?;
    if &config != model {
        return Err(CliError::Config(format!(
            "teacher checkpoint {} was built with a different model config",
            path.display()
        )));
    }
    Ok(w)
}

fn sequential_teachers(cfg: &RunConfig) -> Result<(NamedWeights<f32>, NamedWeights<f32>), CliError> {
    match (&cfg.tm1, &cfg.tm2) {
        (Some(a), Some(b)) => Ok((load_teacher(a, &cfg.model)?, load_teacher(b, &cfg.model)?)),
        _ => Err(CliError::Config(
            "sequential fuse training needs both --tm1 and --tm2 checkpoints".into(),
        )),
    }
}

fn dice_rows(log: &[MetricRow]) -> Vec<ModelDice> {
    ["tm1", "tm2", "fuse"]
        .iter()
        .filter_map(|m| {
            log.iter().rev().find(|r| r.model == *m && r.dice.is_some()).map(|r| ModelDice {
                model: m.to_string(),
                dice: r.dice.unwrap_or_default(),
            })
        })
        .collect()
}

fn train(cfg: &RunConfig) -> Result<String, CliError> {
    let data = required(&cfg.data, "data")?;
    let out = required(&cfg.out, "out")?;
    let subjects = load_subjects(data)?;
    let (train_set, val_set) = split(&subjects, cfg.holdout);
    let opts = cfg.train_options();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = build_model::<f32, _>(&cfg.model, &mut rng)?;
    cfg.save(&out.join("run.cfg"))?;
    let log = match cfg.role {
        Role::T1 | Role::T2 => {
            let (name, modality) = if cfg.role == Role::T1 {
                ("tm1", Modality::T1)
            } else {
                ("tm2", Modality::T2)
            };
            let (w, log) = train_teacher(name, init, &cfg.model, train_set, val_set, modality, &opts, &mut rng)?;
            save_checkpoint(out.join("checkpoint"), &cfg.model, &w)?;
            log
        }
        Role::Fuse => {
            let (tm1, tm2) = match cfg.teachers {
                TeacherMode::Joint => (init.clone(), init.clone()),
                TeacherMode::Sequential => sequential_teachers(cfg)?,
            };
            let FuseRun { fuse, tm1, tm2, log, .. } =
                train_fuse(init, tm1, tm2, &cfg.model, train_set, val_set, &opts, &mut rng)?;
            save_checkpoint(out.join("checkpoint"), &cfg.model, &fuse)?;
            if cfg.teachers == TeacherMode::Joint {
                save_checkpoint(out.join("tm1"), &cfg.model, &tm1)?;
                save_checkpoint(out.join("tm2"), &cfg.model, &tm2)?;
            }
            log
        }
    };
    write(&out.join("metrics.csv"), &metrics_csv(&log))?;
    let rows = dice_rows(&log);
    let mut report = format!(
        "trained {} for {} epochs on {} subjects (seed {}); outputs in {}\n",
        cfg.role.name(),
        cfg.epochs,
        train_set.len(),
        cfg.seed,
        out.display()
    );
    if !rows.is_empty() {
        write(&out.join("dice.csv"), &report_csv(&rows))?;
        report.push_str(&report_table(&rows));
    }
    Ok(report)
}

fn eval(cfg: &RunConfig) -> Result<String, CliError> {
    let ckpt = required(&cfg.checkpoint, "checkpoint")?;
    let data = required(&cfg.data, "data")?;
    if cfg.step == 0 || cfg.step > cfg.patch_size {
        return Err(CliError::Config(format!(
            "overlap step {} must be between 1 and the patch size {}",
            cfg.step, cfg.patch_size
        )));
    }
    let (model, weights) = load_checkpoint(ckpt)?;
    let subjects = load_subjects(data)?;
    let modalities: &[Modality] = match cfg.modality {
        EvalModality::T1 => &[Modality::T1],
        EvalModality::T2 => &[Modality::T2],
        EvalModality::Both => &[Modality::T1, Modality::T2],
    };
    let mut csv = String::from("subject,modality,dice_csf,dice_gm,dice_wm,mean\n");
    let mut table = format!("{:<10} {:<4} {:>7} {:>7} {:>7} {:>7}\n", "subject", "mod", "CSF", "GM", "WM", "mean");
    let mut all = Vec::new();
    for s in &subjects {
        for &m in modalities {
            let pred = stitch_inference(&weights, &model, s.modality(m), cfg.patch_size, cfg.step)?;
            let r = DiceReport::compute(&s.labels.labels, &pred.labels)?;
            let [c, g, w] = r.per_class();
            let _ = writeln!(csv, "{},{},{c:.6},{g:.6},{w:.6},{:.6}", s.name, m.name(), r.mean());
            let _ = writeln!(table, "{:<10} {:<4} {c:>7.4} {g:>7.4} {w:>7.4} {:>7.4}", s.name, m.name(), r.mean());
            all.push(r);
        }
    }
    let [c, g, w] = DiceReport::average(&all);
    let _ = writeln!(table, "{:<15} {c:>7.4} {g:>7.4} {w:>7.4} {:>7.4}", "average", (c + g + w) / 3.0);
    let out = cfg.out.clone().unwrap_or_else(|| ckpt.clone());
    write(&out.join("eval.csv"), &csv)?;
    cfg.save(&out.join("eval.cfg"))?;
    Ok(table)
}

fn gradcheck(cfg: &RunConfig) -> Result<String, CliError> {
    let mut checks = op_suite(cfg.seed)?;
    checks.push(model_check(cfg.seed)?);
    let mut report = String::new();
    for c in &checks {
        let _ = writeln!(report, "{c}");
    }
    if let Some(out) = &cfg.out {
        write(&out.join("gradcheck.txt"), &report)?;
        cfg.save(&out.join("gradcheck.cfg"))?;
    }
    let failed: Vec<&str> = checks.iter().filter(|c| !c.passed()).map(|c| c.name.as_str()).collect();
    if failed.is_empty() {
        Ok(report)
    } else {
        print!("{report}");
        Err(CliError::Check(format!("gradient check failed for {}", failed.join(", "))))
    }
}

fn count_block(title: &str, config: &ModelConfig) -> Result<(String, usize), CliError> {
    let (stages, total) = param_counts(config)?;
    let mut s = format!("{title} (base_channels {})\n", config.base_channels);
    for (stage, n) in &stages {
        let _ = writeln!(s, "  {stage:<8} {n:>10}");
    }
    let _ = writeln!(s, "  {:<8} {total:>10}", "total");
    Ok((s, total))
}

fn paramcount(cfg: &RunConfig) -> Result<String, CliError> {
    let (mut report, _) = count_block("configured model", &cfg.model)?;
    let full = ModelConfig {
        base_channels: ModelConfig::full_scale().base_channels,
        ..cfg.model.clone()
    };
    let (block, total) = count_block("full-scale model", &full)?;
    report.push_str(&block);
    let _ = writeln!(
        report,
        "  reference fuse-model count: {REFERENCE_FUSE_PARAMS} (ours {total}, difference {:+}).\n  \
         The reference layer widths are unspecified and its teacher and fuse counts differ \
         although fusion needs identical shapes, so equality is not expected.",
        total as i64 - REFERENCE_FUSE_PARAMS as i64
    );
    if let Some(out) = &cfg.out {
        write(&out.join("paramcount.txt"), &report)?;
        cfg.save(&out.join("paramcount.cfg"))?;
    }
    Ok(report)
}

fn ablate(cfg: &RunConfig) -> Result<String, CliError> {
    let data = required(&cfg.data, "data")?;
    let out = required(&cfg.out, "out")?;
    let subjects = load_subjects(data)?;
    let (train_set, val_set) = split(&subjects, cfg.holdout);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let init = build_model::<f32, _>(&cfg.model, &mut rng)?;
    let (tm1, tm2) = match cfg.teachers {
        TeacherMode::Joint => (init.clone(), init.clone()),
        TeacherMode::Sequential => sequential_teachers(cfg)?,
    };
    cfg.save(&out.join("ablate.cfg"))?;
    let rows = ablation_alpha(&init, &tm1, &tm2, &cfg.model, train_set, val_set, &cfg.alphas, &cfg.train_options())?;
    let csv = ablation_csv(&rows);
    write(&out.join("ablation.csv"), &csv)?;
    Ok(csv)
}
