//! Run configuration as line-oriented `key = value` text.
//!
//! Precedence, lowest first: built-in defaults, the config file, the
//! `UHR_SEED` environment variable (seed only), explicit overrides.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::imgeo::CopyPasteConfig;
use crate::synthdata::SceneSpec;
use crate::ughr::BlockConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub tau: f64,
    pub lambda_ic: f64,
    pub lambda_aux: f64,
    pub m: usize,
    pub beta: f64,
    pub eps: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub paste_retries: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub epochs: usize,
    pub pretrain_epochs: usize,
    pub seed: u64,
    pub uoic: bool,
    pub base_hr: bool,
    pub unc_guidance: bool,
    pub fgbg_groups: bool,
    pub detach_uncertainty: bool,
    pub flips: bool,
    pub channels: Vec<usize>,
    pub width: usize,
    pub feature_scale: usize,
    pub threads: usize,
    pub checkpoint_every: usize,
    /// Dataset directory; empty means generate a synthetic set in memory.
    pub data_dir: PathBuf,
    pub data_seed: u64,
    pub image_size: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub run_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            tau: 0.10,
            lambda_ic: 1.0,
            lambda_aux: 0.1,
            m: 8,
            beta: 1.0,
            eps: 1e-8,
            scale_min: 0.3,
            scale_max: 0.7,
            paste_retries: 3,
            batch_size: 8,
            lr: 1e-4,
            epochs: 30,
            pretrain_epochs: 10,
            seed: 0,
            uoic: true,
            base_hr: true,
            unc_guidance: true,
            fgbg_groups: true,
            detach_uncertainty: false,
            flips: true,
            channels: vec![16, 32, 64],
            width: 16,
            feature_scale: 1,
            threads: 1,
            checkpoint_every: 0,
            data_dir: PathBuf::new(),
            data_seed: 1,
            image_size: 64,
            train_size: 200,
            val_size: 50,
            run_dir: PathBuf::from("runs/default"),
        }
    }
}

fn parse_bool(v: &str) -> Option<bool> {
    match v {
        "true" | "1" | "on" | "yes" => Some(true),
        "false" | "0" | "off" | "no" => Some(false),
        _ => None,
    }
}

fn parse_list(v: &str) -> Option<Vec<usize>> {
    v.split(',').map(|s| s.trim().parse().ok()).collect()
}

fn join(v: &[usize]) -> String {
    v.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(",")
}

macro_rules! keys {
    ($($key:literal => $field:ident : $kind:ident),* $(,)?) => {
        pub const KEYS: &[&str] = &[$($key),*];

        impl RunConfig {
            /// Assigns one key from its textual value.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                let value = value.trim();
                let bad = || Error::Config(format!("invalid value {value:?} for key {key}"));
                match key {
                    $($key => keys!(@parse self.$field, $kind, value, bad),)*
                    _ => return Err(Error::Config(format!(
                        "unknown key {key:?}; valid keys: {}", KEYS.join(", ")
                    ))),
                }
                Ok(())
            }

            /// Textual value of one key, in the form [`RunConfig::set`] accepts.
            pub fn get(&self, key: &str) -> Option<String> {
                match key {
                    $($key => Some(keys!(@show self.$field, $kind)),)*
                    _ => None,
                }
            }
        }
    };
    (@parse $dst:expr, num, $v:ident, $bad:ident) => { $dst = $v.parse().map_err(|_| $bad())? };
    (@parse $dst:expr, flag, $v:ident, $bad:ident) => { $dst = parse_bool($v).ok_or_else($bad)? };
    (@parse $dst:expr, list, $v:ident, $bad:ident) => { $dst = parse_list($v).ok_or_else($bad)? };
    (@parse $dst:expr, path, $v:ident, $bad:ident) => { $dst = PathBuf::from($v) };
    (@show $src:expr, num) => { format!("{}", $src) };
    (@show $src:expr, flag) => { format!("{}", $src) };
    (@show $src:expr, list) => { join(&$src) };
    (@show $src:expr, path) => { $src.display().to_string() };
}

keys! {
    "tau" => tau: num,
    "lambda_ic" => lambda_ic: num,
    "lambda_aux" => lambda_aux: num,
    "m" => m: num,
    "beta" => beta: num,
    "eps" => eps: num,
    "scale_min" => scale_min: num,
    "scale_max" => scale_max: num,
    "paste_retries" => paste_retries: num,
    "batch_size" => batch_size: num,
    "lr" => lr: num,
    "epochs" => epochs: num,
    "pretrain_epochs" => pretrain_epochs: num,
    "seed" => seed: num,
    "uoic" => uoic: flag,
    "base_hr" => base_hr: flag,
    "unc_guidance" => unc_guidance: flag,
    "fgbg_groups" => fgbg_groups: flag,
    "detach_uncertainty" => detach_uncertainty: flag,
    "flips" => flips: flag,
    "channels" => channels: list,
    "width" => width: num,
    "feature_scale" => feature_scale: num,
    "threads" => threads: num,
    "checkpoint_every" => checkpoint_every: num,
    "data_dir" => data_dir: path,
    "data_seed" => data_seed: num,
    "image_size" => image_size: num,
    "train_size" => train_size: num,
    "val_size" => val_size: num,
    "run_dir" => run_dir: path,
}

impl RunConfig {
    /// Applies every `key = value` line of `text`; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        let mut offset = 0;
        for line in text.split_inclusive('\n') {
            let here = offset;
            offset += line.len();
            let body = line.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (k, v) = body.split_once('=').ok_or_else(|| Error::Parse {
                path: origin.to_path_buf(),
                offset: here,
                msg: format!("expected `key = value`, got {body:?}"),
            })?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        cfg.apply_file(path)?;
        Ok(cfg)
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        if !path.exists() {
            return Err(Error::MissingFile(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        self.apply_text(&text, path)
    }

    /// Seed override from `UHR_SEED`, if set.
    pub fn apply_env_seed(&mut self, value: Option<&str>) -> Result<()> {
        if let Some(v) = value {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("UHR_SEED={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    /// `key=value` overrides, applied in order.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, pairs: &[S]) -> Result<()> {
        for p in pairs {
            let (k, v) = p
                .as_ref()
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override {:?} is not key=value", p.as_ref())))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Every key in fixed order; parsing it back reproduces `self`.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k).expect("listed key"));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.tau > 0.0) {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        if !(self.lambda_ic >= 0.0 && self.lambda_aux >= 0.0) {
            return bad("loss weights must be nonnegative".into());
        }
        if !(self.eps > 0.0) {
            return bad("eps must be positive".into());
        }
        if !(0.0 < self.scale_min && self.scale_min <= self.scale_max && self.scale_max <= 1.0) {
            return bad(format!(
                "scale range [{}, {}] must satisfy 0 < min <= max <= 1",
                self.scale_min, self.scale_max
            ));
        }
        if self.batch_size == 0 || self.threads == 0 {
            return bad("batch_size and threads must be >= 1".into());
        }
        if !(self.lr > 0.0) {
            return bad("lr must be positive".into());
        }
        if self.channels.len() < 2 {
            return bad("at least two scales are required".into());
        }
        if self.channels.contains(&0) || self.width == 0 {
            return bad("channel counts must be >= 1".into());
        }
        if self.channels.windows(2).any(|w| w[0] > w[1]) {
            return bad("channels must be nondecreasing with depth".into());
        }
        if self.feature_scale >= self.channels.len() {
            return bad(format!(
                "feature_scale {} out of range for {} scales",
                self.feature_scale,
                self.channels.len()
            ));
        }
        let stride = 1usize << (self.channels.len() - 1);
        if self.image_size % stride != 0 {
            return bad(format!("image_size {} must be divisible by {stride}", self.image_size));
        }
        self.block_config().validate()
    }

    pub fn block_config(&self) -> BlockConfig {
        BlockConfig {
            m: self.m,
            beta: self.beta,
            dilations: [1, 2],
            base_hr: self.base_hr,
            unc_guidance: self.unc_guidance,
            fgbg_groups: self.fgbg_groups,
        }
    }

    pub fn copy_paste(&self) -> CopyPasteConfig {
        CopyPasteConfig {
            scale_min: self.scale_min,
            scale_max: self.scale_max,
            max_retries: self.paste_retries,
        }
    }

    pub fn scene_spec(&self) -> SceneSpec {
        SceneSpec {
            size: self.image_size,
            ..SceneSpec::default()
        }
    }

    /// Ablation presets `(1)` to `(7)`: `(uoic, base_hr, unc_guidance, fgbg_groups)`.
    pub fn ablation_preset(&self, id: usize) -> Result<RunConfig> {
        let flags = match id {
            1 => (false, false, false, false),
            2 => (true, false, false, false),
            3 => (false, true, false, false),
            4 => (false, true, false, true),
            5 => (false, true, true, false),
            6 => (false, true, true, true),
            7 => (true, true, true, true),
            _ => return Err(Error::Config(format!("ablation preset {id} not in 1..=7"))),
        };
        Ok(RunConfig {
            uoic: flags.0,
            base_hr: flags.1,
            unc_guidance: flags.2,
            fgbg_groups: flags.3,
            ..self.clone()
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trips() {
        let mut c = RunConfig::default();
        c.set("channels", "8,16").unwrap();
        c.set("lr", "0.001").unwrap();
        let text = c.to_text();
        let mut d = RunConfig {
            seed: 99,
            ..Default::default()
        };
        d.apply_text(&text, Path::new("echo")).unwrap();
        assert_eq!(c, d);
    }

    #[test]
    fn unknown_key_lists_valid_keys() {
        let err = RunConfig::default().set("temperature", "1").unwrap_err().to_string();
        assert!(err.contains("tau") && err.contains("lambda_aux"));
    }

    #[test]
    fn precedence_is_file_then_env_then_flags() {
        let mut c = RunConfig::default();
        c.apply_text("seed = 5\n", Path::new("f")).unwrap();
        c.apply_env_seed(Some("6")).unwrap();
        assert_eq!(c.seed, 6);
        c.apply_overrides(&["seed=7"]).unwrap();
        assert_eq!(c.seed, 7);
    }
}
