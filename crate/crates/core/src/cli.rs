//! Command-line surface. Every subcommand resolves a [`RunConfig`] from
//! defaults, `--config`, `UHR_SEED` and then explicit flags.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::imgeo::copy_paste;
use crate::net::{image_metrics, mean_metrics, metrics_csv, EpochRecord, Metrics};
use crate::run::{ablate, check_inputs, load_data, load_model, prepare_run_dir, train_run, write_text, StopAt};
use crate::synthdata::{self, generate_split, mask_raster, pnm, read_dataset, SceneSpec, Split};
use crate::tensor::dump::{write_file, Precision};
use crate::tensor::Tensor;
use crate::uncertainty::{to_gray8, uncertainty_map, ProbMap};

#[derive(Parser, Debug)]
#[command(name = "uhr", version, about = "Uncertainty-guided hypergraph refinement for lesion segmentation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// Config file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override one key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub run_dir: Option<PathBuf>,
    /// Dataset directory written by `synth`; omit to generate in memory.
    #[arg(long)]
    pub data_dir: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub threads: Option<usize>,
}

impl Common {
    pub fn resolve(&self, env_seed: Option<&str>) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        if let Some(p) = &self.config {
            cfg.apply_file(p)?;
        }
        cfg.apply_env_seed(env_seed)?;
        cfg.apply_overrides(&self.set)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(d) = &self.run_dir {
            cfg.run_dir = d.clone();
        }
        if let Some(d) = &self.data_dir {
            cfg.data_dir = d.clone();
        }
        if let Some(e) = self.epochs {
            cfg.epochs = e;
        }
        if let Some(t) = self.threads {
            cfg.threads = t;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug, Clone)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub train: usize,
    #[arg(long, default_value_t = 50)]
    pub val: usize,
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 1)]
    pub lesions_min: usize,
    #[arg(long, default_value_t = 3)]
    pub lesions_max: usize,
    #[arg(long, default_value_t = 4.0)]
    pub radius_min: f64,
    #[arg(long, default_value_t = 10.0)]
    pub radius_max: f64,
    #[arg(long, default_value_t = 0.3)]
    pub small_fraction: f64,
    #[arg(long, default_value_t = 3.0)]
    pub small_radius_min: f64,
    #[arg(long, default_value_t = 4.5)]
    pub small_radius_max: f64,
    #[arg(long, default_value_t = 0)]
    pub distractors_min: usize,
    #[arg(long, default_value_t = 2)]
    pub distractors_max: usize,
    #[arg(long, default_value_t = 0.35)]
    pub lesion_contrast: f64,
    #[arg(long, default_value_t = 0.15)]
    pub distractor_contrast: f64,
    #[arg(long, default_value_t = 1.5)]
    pub edge: f64,
    #[arg(long, default_value_t = 0.03)]
    pub noise: f64,
}

impl SynthArgs {
    pub fn spec(&self) -> SceneSpec {
        SceneSpec {
            size: self.size,
            lesions: (self.lesions_min, self.lesions_max),
            radius: (self.radius_min, self.radius_max),
            small_fraction: self.small_fraction,
            small_radius: (self.small_radius_min, self.small_radius_max),
            distractors: (self.distractors_min, self.distractors_max),
            lesion_contrast: self.lesion_contrast,
            distractor_contrast: self.distractor_contrast,
            edge: self.edge,
            noise: self.noise,
        }
    }
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset directory.
    Synth(SynthArgs),
    /// Preview copy-paste augmentation on a dataset directory.
    Augment {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Contrastive pretraining only.
    Pretrain {
        #[command(flatten)]
        common: Common,
    },
    /// Full training; pretrains first when `uoic` is enabled.
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from a checkpoint directory.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop after this many epochs across both phases.
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Score a checkpoint on the validation split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Train the component presets (1)-(7) and tabulate them.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6,7")]
        presets: Vec<usize>,
    },
    /// Write per-scale uncertainty maps for validation images.
    DumpUncertainty {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
    /// Write pooled lesion, replica and background embeddings.
    DumpEmbeddings {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn print_metrics(m: &Metrics) {
    println!(
        "miou {:.4}  mdsc {:.4}  recall {:.4}  precision {:.4}",
        m.miou, m.mdsc, m.recall, m.precision
    );
}

fn gray(path: &Path, h: usize, w: usize, values: &[f64]) -> Result<()> {
    pnm::write(
        path,
        &pnm::Raster {
            width: w,
            height: h,
            channels: 1,
            samples: to_gray8(values),
        },
    )
}

fn synth(a: &SynthArgs) -> Result<()> {
    let spec = a.spec();
    spec.validate()?;
    let train = generate_split(&spec, a.seed, Split::Train, a.train)?;
    let val = generate_split(&spec, a.seed, Split::Val, a.val)?;
    let notes = vec![format!("seed = {}", a.seed), format!("spec = {spec:?}")];
    synthdata::write_dataset(&a.out, &[("train", &train), ("val", &val)], &notes)?;
    println!("wrote {} train and {} val scenes to {}", a.train, a.val, a.out.display());
    Ok(())
}

fn augment(data: &Path, out: &Path, seed: u64, cfg: &RunConfig) -> Result<()> {
    let (manifest, samples) = read_dataset(data, None)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut log = String::from("index,source,seed,instance,scale,center_row,center_col,radius,success\n");
    for (i, (entry, s)) in manifest.entries.iter().zip(&samples).enumerate() {
        let sample_seed = seed.wrapping_add(i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed);
        let aug = copy_paste(&s.image, &s.mask, &cfg.copy_paste(), &mut rng)?;
        let (img, _) = synthdata::sample_to_rasters(&synthdata::Sample {
            image: aug.image.clone(),
            mask: aug.mask.clone(),
        })?;
        let ext = if img.channels == 1 { "pgm" } else { "ppm" };
        pnm::write(&out.join(format!("{i:05}_image.{ext}")), &img)?;
        pnm::write(&out.join(format!("{i:05}_mask.pgm")), &mask_raster(&aug.mask))?;
        pnm::write(&out.join(format!("{i:05}_ma.pgm")), &mask_raster(&aug.m_a))?;
        pnm::write(&out.join(format!("{i:05}_mb.pgm")), &mask_raster(&aug.m_b))?;
        let r = &aug.record;
        let (cr, cc) = r.center.map_or((String::new(), String::new()), |(a, b)| (a.to_string(), b.to_string()));
        log.push_str(&format!(
            "{i},{},{sample_seed},{},{},{cr},{cc},{},{}\n",
            entry.image.display(),
            r.instance_index.map_or(String::new(), |v| v.to_string()),
            r.scale,
            r.radius,
            r.success
        ));
    }
    write_text(&out.join("augment.csv"), &log)?;
    println!("augmented {} samples into {}", samples.len(), out.display());
    Ok(())
}

fn eval(cfg: &RunConfig, ckpt: &Path) -> Result<()> {
    check_inputs(cfg, &[ckpt])?;
    let data = load_data(cfg)?;
    let (trainer, state) = load_model(cfg, ckpt, data.in_channels())?;
    let (m, _) = trainer.evaluate(&state.params, &data.val)?;
    print_metrics(&m);
    let dir = prepare_run_dir(cfg)?;
    let row = EpochRecord {
        epoch: state.history.len(),
        split: "eval".into(),
        metrics: m,
        loss: 0.0,
        seg_loss: 0.0,
        nce_loss: 0.0,
        skipped_pairs: 0,
        dropped_negatives: 0,
        fallbacks: 0,
    };
    write_text(&dir.join("metrics.csv"), &metrics_csv(&[row]))
}

fn dump_uncertainty(cfg: &RunConfig, ckpt: &Path, count: usize) -> Result<()> {
    check_inputs(cfg, &[ckpt])?;
    let data = load_data(cfg)?;
    let (trainer, state) = load_model(cfg, ckpt, data.in_channels())?;
    let dir = prepare_run_dir(cfg)?.join("dumps");
    let mut scores = Vec::new();
    for (i, s) in data.val.iter().take(count).enumerate() {
        let p = trainer.predict(&state.params, &s.image)?;
        scores.push(image_metrics(p.y_hat.data(), &s.mask));
        for (k, m) in p.m_i.iter().enumerate() {
            let u = match &p.u[k] {
                Some(u) => u.clone(),
                None => uncertainty_map(&ProbMap::new(m.clone())?, cfg.eps).into_tensor(),
            };
            let (h, w) = (u.shape()[1], u.shape()[2]);
            gray(&dir.join(format!("sample{i:03}_u{k}.pgm")), h, w, u.data())?;
            write_file(&dir.join(format!("sample{i:03}_u{k}.uhrt")), &u, Precision::F32)?;
        }
        let (h, w) = s.mask.dims();
        gray(&dir.join(format!("sample{i:03}_pred.pgm")), h, w, p.y_hat.data())?;
    }
    println!("wrote uncertainty maps for {} images to {}", scores.len(), dir.display());
    print_metrics(&mean_metrics(&scores));
    Ok(())
}

fn dump_embeddings(cfg: &RunConfig, ckpt: &Path) -> Result<()> {
    check_inputs(cfg, &[ckpt])?;
    let data = load_data(cfg)?;
    let (trainer, state) = load_model(cfg, ckpt, data.in_channels())?;
    let dir = prepare_run_dir(cfg)?.join("dumps");
    let embs = trainer.embeddings(&state.params, &data.train, cfg.seed)?;
    let mut csv = String::from("sample,lesion_area,source,file\n");
    for (i, e) in embs.iter().enumerate() {
        for (tag, z) in [("lesion_a", &e.z_a), ("lesion_b", &e.z_b), ("background", &e.z_bg)] {
            if let Some(z) = z {
                let file = format!("emb{i:04}_{tag}.uhrt");
                write_file(&dir.join(&file), &Tensor::new([z.len()], z.clone())?, Precision::F32)?;
                csv.push_str(&format!("{i},{},{tag},{file}\n", e.lesion_area));
            }
        }
    }
    write_text(&dir.join("embeddings.csv"), &csv)?;
    println!("wrote embeddings for {} samples to {}", embs.len(), dir.display());
    Ok(())
}

/// Runs one parsed command; `env_seed` is the value of `UHR_SEED`.
pub fn execute(cli: &Cli, env_seed: Option<&str>) -> Result<()> {
    match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Augment { data, out, common } => {
            let cfg = common.resolve(env_seed)?;
            check_inputs(&cfg, &[&data.join("manifest.csv")])?;
            augment(data, out, cfg.seed, &cfg)
        }
        Command::Pretrain { common } => {
            let cfg = RunConfig {
                uoic: true,
                ..common.resolve(env_seed)?
            };
            check_inputs(&cfg, &[])?;
            let data = load_data(&cfg)?;
            let out = train_run(&cfg, &data, None, StopAt::AfterPretrain)?;
            if let Some(r) = out.state.history.last() {
                print_metrics(&r.metrics);
            }
            Ok(())
        }
        Command::Train { common, resume, stop_after } => {
            let cfg = common.resolve(env_seed)?;
            let extra: Vec<&Path> = resume.iter().map(PathBuf::as_path).collect();
            check_inputs(&cfg, &extra)?;
            let data = load_data(&cfg)?;
            let stop = stop_after.map_or(StopAt::End, StopAt::Epochs);
            let out = train_run(&cfg, &data, resume.as_deref(), stop)?;
            print_metrics(&out.final_val);
            Ok(())
        }
        Command::Eval { common, checkpoint } => eval(&common.resolve(env_seed)?, checkpoint),
        Command::Ablate { common, presets } => {
            let cfg = common.resolve(env_seed)?;
            check_inputs(&cfg, &[])?;
            let data = load_data(&cfg)?;
            for row in ablate(&cfg, &data, presets)? {
                print!("({}) ", row.id);
                print_metrics(&row.metrics);
            }
            Ok(())
        }
        Command::DumpUncertainty { common, checkpoint, count } => {
            dump_uncertainty(&common.resolve(env_seed)?, checkpoint, *count)
        }
        Command::DumpEmbeddings { common, checkpoint } => dump_embeddings(&common.resolve(env_seed)?, checkpoint),
    }
}
