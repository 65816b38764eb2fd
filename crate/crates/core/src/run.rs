//! Run-directory orchestration shared by the CLI and the test suites.
//!
//! A run directory holds `config.txt` (the resolved configuration),
//! `metrics.csv`, `checkpoints/` and `dumps/`.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::net::{checkpoint, metrics_csv, Metrics, Phase, TrainState, Trainer};
use crate::synthdata::{generate_split, read_dataset, Sample, Split};

pub struct Data {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

impl Data {
    pub fn in_channels(&self) -> usize {
        self.train
            .first()
            .or(self.val.first())
            .map_or(1, |s| s.image.shape()[0])
    }
}

/// Fails early if a directory the run depends on does not exist.
pub fn check_inputs(cfg: &RunConfig, extra: &[&Path]) -> Result<()> {
    if !cfg.data_dir.as_os_str().is_empty() {
        let m = cfg.data_dir.join("manifest.csv");
        if !m.exists() {
            return Err(Error::MissingFile(m));
        }
    }
    for p in extra {
        if !p.exists() {
            return Err(Error::MissingFile(p.to_path_buf()));
        }
    }
    Ok(())
}

/// Reads the dataset directory, or generates the synthetic set when no
/// directory is configured.
pub fn load_data(cfg: &RunConfig) -> Result<Data> {
    if cfg.data_dir.as_os_str().is_empty() {
        let spec = cfg.scene_spec();
        return Ok(Data {
            train: generate_split(&spec, cfg.data_seed, Split::Train, cfg.train_size)?,
            val: generate_split(&spec, cfg.data_seed, Split::Val, cfg.val_size)?,
        });
    }
    let (_, train) = read_dataset(&cfg.data_dir, Some("train"))?;
    let (_, val) = read_dataset(&cfg.data_dir, Some("val"))?;
    Ok(Data { train, val })
}

fn create(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Creates the run layout and echoes the resolved configuration.
pub fn prepare_run_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.run_dir.clone();
    create(&dir)?;
    create(&dir.join("checkpoints"))?;
    create(&dir.join("dumps"))?;
    write_text(&dir.join("config.txt"), &cfg.to_text())?;
    Ok(dir)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopAt {
    End,
    /// Stop once pretraining is finished.
    AfterPretrain,
    /// Stop after this many epochs in total (both phases).
    Epochs(usize),
}

pub struct RunOutcome {
    pub state: TrainState,
    pub final_val: Metrics,
    pub dir: PathBuf,
}

fn checkpoint_name(state: &TrainState, total: usize) -> String {
    format!("epoch_{total:03}_{}", state.phase.as_str())
}

/// Trains from scratch, or from `resume`, writing metrics and checkpoints
/// under the run directory.
pub fn train_run(cfg: &RunConfig, data: &Data, resume: Option<&Path>, stop: StopAt) -> Result<RunOutcome> {
    cfg.validate()?;
    if let Some(r) = resume {
        check_inputs(cfg, &[r])?;
    }
    let trainer = Trainer::new(cfg.clone(), data.in_channels())?;
    let dir = prepare_run_dir(cfg)?;
    let mut state = match resume {
        Some(r) => checkpoint::load(r, &trainer)?,
        None => trainer.init_state()?,
    };
    loop {
        let done = match stop {
            StopAt::End => state.phase == Phase::Done,
            StopAt::AfterPretrain => state.phase != Phase::Pretrain,
            StopAt::Epochs(n) => state.phase == Phase::Done || state.history.len() >= n,
        };
        if done {
            break;
        }
        trainer.run_epoch(&mut state, &data.train, &data.val)?;
        let total = state.history.len();
        if cfg.checkpoint_every > 0 && total % cfg.checkpoint_every == 0 {
            checkpoint::save(&dir.join("checkpoints").join(checkpoint_name(&state, total)), &state)?;
        }
        write_text(&dir.join("metrics.csv"), &metrics_csv(&state.history))?;
    }
    checkpoint::save(&dir.join("checkpoints").join("final"), &state)?;
    write_text(&dir.join("metrics.csv"), &metrics_csv(&state.history))?;
    let final_val = state
        .history
        .iter()
        .rev()
        .find(|r| r.split == "val")
        .map(|r| r.metrics)
        .unwrap_or_default();
    Ok(RunOutcome { state, final_val, dir })
}

/// A predictor restored from a checkpoint directory.
pub fn load_model(cfg: &RunConfig, ckpt: &Path, in_channels: usize) -> Result<(Trainer, TrainState)> {
    check_inputs(cfg, &[ckpt])?;
    let trainer = Trainer::new(cfg.clone(), in_channels)?;
    let state = checkpoint::load(ckpt, &trainer)?;
    Ok((trainer, state))
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub id: usize,
    pub cfg: RunConfig,
    pub metrics: Metrics,
    pub params: usize,
}

pub const ABLATION_HEADER: &str = "id,uoic,base_hr,unc_guidance,fgbg_groups,params,miou,mdsc,recall,precision";

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for r in rows {
        let m = r.metrics;
        s.push_str(&format!(
            "{},{},{},{},{},{},{},{},{},{}\n",
            r.id,
            r.cfg.uoic,
            r.cfg.base_hr,
            r.cfg.unc_guidance,
            r.cfg.fgbg_groups,
            r.params,
            m.miou,
            m.mdsc,
            m.recall,
            m.precision
        ));
    }
    s
}

/// Trains each preset in its own sub-run and writes `ablation.csv`.
pub fn ablate(cfg: &RunConfig, data: &Data, presets: &[usize]) -> Result<Vec<AblationRow>> {
    let configs: Vec<RunConfig> = presets.iter().map(|&p| cfg.ablation_preset(p)).collect::<Result<_>>()?;
    let dir = prepare_run_dir(cfg)?;
    let mut rows = Vec::new();
    for (&id, preset) in presets.iter().zip(configs) {
        let sub = RunConfig {
            run_dir: dir.join(format!("preset_{id}")),
            ..preset
        };
        let out = train_run(&sub, data, None, StopAt::End)?;
        rows.push(AblationRow {
            id,
            cfg: sub,
            metrics: out.final_val,
            params: out.state.params.count(),
        });
        write_text(&dir.join("ablation.csv"), &ablation_csv(&rows))?;
    }
    Ok(rows)
}
