//! Checkpoint directory layout:
//!
//! - `manifest.csv`: `name,shape,role` per parameter, shape as `AxBxC`
//! - `params.bin`, `adam_m.bin`, `adam_v.bin`: concatenated f64 tensor blobs
//! - `state.txt`: phase, epoch and optimiser step as `key = value`
//! - `history.csv`: metrics rows recorded so far
//!
//! Blobs are stored at full precision so a resumed run is bit-identical.

use std::fs;
use std::path::Path;

use super::adam::Adam;
use super::trainer::{EpochRecord, Phase, TrainState, Trainer, CSV_HEADER};
use crate::error::{Error, Result};
use crate::params::Role;
use crate::tensor::dump::{read_many, write_many, Precision};
use crate::tensor::Tensor;

fn shape_text(s: &[usize]) -> String {
    s.iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x")
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_text(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn save(dir: &Path, state: &TrainState) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = String::from("name,shape,role\n");
    for p in state.params.iter() {
        manifest.push_str(&format!("{},{},{}\n", p.name, shape_text(p.value.shape()), p.role.as_str()));
    }
    write_text(&dir.join("manifest.csv"), &manifest)?;
    let values: Vec<&Tensor> = state.params.iter().map(|p| &p.value).collect();
    write_many(&dir.join("params.bin"), &values, Precision::F64)?;
    let moments = |ms: &[Vec<f64>]| -> Result<Vec<Tensor>> {
        ms.iter().map(|m| Tensor::new([m.len()], m.clone())).collect()
    };
    let m = moments(&state.adam.m)?;
    let v = moments(&state.adam.v)?;
    write_many(&dir.join("adam_m.bin"), &m.iter().collect::<Vec<_>>(), Precision::F64)?;
    write_many(&dir.join("adam_v.bin"), &v.iter().collect::<Vec<_>>(), Precision::F64)?;
    let a = &state.adam;
    let text = format!(
        "phase = {}\nepoch = {}\nadam_t = {}\nlr = {}\nbeta1 = {}\nbeta2 = {}\nadam_eps = {}\n",
        state.phase.as_str(),
        state.epoch,
        a.t,
        a.lr,
        a.beta1,
        a.beta2,
        a.eps
    );
    write_text(&dir.join("state.txt"), &text)?;
    let mut hist = format!("{CSV_HEADER}\n");
    for r in &state.history {
        hist.push_str(&r.csv_row());
        hist.push('\n');
    }
    write_text(&dir.join("history.csv"), &hist)
}

/// Loads a checkpoint written by [`save`] for the network of `trainer`.
pub fn load(dir: &Path, trainer: &Trainer) -> Result<TrainState> {
    for f in ["manifest.csv", "params.bin", "adam_m.bin", "adam_v.bin", "state.txt", "history.csv"] {
        let p = dir.join(f);
        if !p.exists() {
            return Err(Error::MissingFile(p));
        }
    }
    let mut state = trainer.init_state()?;
    let manifest = read_text(&dir.join("manifest.csv"))?;
    let rows: Vec<&str> = manifest.lines().skip(1).filter(|l| !l.is_empty()).collect();
    if rows.len() != state.params.len() {
        return Err(Error::Config(format!(
            "checkpoint has {} parameters, network has {}",
            rows.len(),
            state.params.len()
        )));
    }
    let values = read_many(&dir.join("params.bin"))?;
    if values.len() != rows.len() {
        return Err(Error::Config("params.bin does not match manifest.csv".into()));
    }
    for (i, (row, value)) in rows.iter().zip(values).enumerate() {
        let f: Vec<&str> = row.split(',').collect();
        let expected = state.params.get(i);
        if f.len() != 3 || f[0] != expected.name || Role::parse(f[2])? != expected.role {
            return Err(Error::Config(format!(
                "checkpoint entry {row:?} does not match parameter {}",
                expected.name
            )));
        }
        if f[1] != shape_text(value.shape()) {
            return Err(Error::Config(format!("{}: manifest shape disagrees with blob", f[0])));
        }
        state.params.set_value(i, value)?;
    }
    let read_moments = |name: &str| -> Result<Vec<Vec<f64>>> {
        Ok(read_many(&dir.join(name))?.into_iter().map(Tensor::into_vec).collect())
    };
    let mut adam = Adam::new(trainer.cfg.lr, std::iter::empty());
    adam.m = read_moments("adam_m.bin")?;
    adam.v = read_moments("adam_v.bin")?;
    let sizes: Vec<usize> = state.params.iter().map(|p| p.value.numel()).collect();
    if adam.m.iter().map(Vec::len).ne(sizes.iter().copied()) || adam.v.iter().map(Vec::len).ne(sizes.iter().copied()) {
        return Err(Error::Config("optimiser moments do not match parameters".into()));
    }
    let text = read_text(&dir.join("state.txt"))?;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("bad state line {line:?}")))?;
        let (k, v) = (k.trim(), v.trim());
        let num = |v: &str| v.parse::<f64>().map_err(|_| Error::Config(format!("bad value for {k}: {v:?}")));
        match k {
            "phase" => state.phase = Phase::parse(v)?,
            "epoch" => state.epoch = num(v)? as usize,
            "adam_t" => adam.t = v.parse().map_err(|_| Error::Config(format!("bad adam_t {v:?}")))?,
            "lr" => adam.lr = num(v)?,
            "beta1" => adam.beta1 = num(v)?,
            "beta2" => adam.beta2 = num(v)?,
            "adam_eps" => adam.eps = num(v)?,
            other => return Err(Error::Config(format!("unknown state key {other:?}"))),
        }
    }
    state.adam = adam;
    let hist = read_text(&dir.join("history.csv"))?;
    state.history = hist
        .lines()
        .skip(1)
        .filter(|l| !l.is_empty())
        .map(EpochRecord::parse_row)
        .collect::<Result<_>>()?;
    Ok(state)
}
