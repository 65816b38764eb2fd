//! Two-phase training: contrastive pretraining of the encoder and guidance
//! head, then end-to-end training of the full network.
//!
//! Every random draw of an epoch comes from a generator derived from
//! `(seed, phase, epoch)`, so a run resumed from a checkpoint replays the
//! remaining epochs exactly.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::adam::Adam;
use super::loss::{seg_loss, train_loss};
use super::metrics::{image_metrics, mean_metrics, Metrics};
use super::model::{Network, NetworkSpec};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::imgeo::{copy_paste, flip_tensor_horizontal, flip_tensor_vertical, AugmentedSample};
use crate::params::{ParamStore, Role};
use crate::synthdata::Sample;
use crate::tensor::{Tape, Tensor, Var};
use crate::uoic::{info_nce, masked_avg_pool, mine_hard_negative, pretrain_loss};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Train,
    Done,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Train => "train",
            Phase::Done => "done",
        }
    }

    pub fn parse(s: &str) -> Result<Phase> {
        match s {
            "pretrain" => Ok(Phase::Pretrain),
            "train" => Ok(Phase::Train),
            "done" => Ok(Phase::Done),
            other => Err(Error::Config(format!("unknown phase {other:?}"))),
        }
    }
}

const STREAM_INIT_PRETRAIN: u64 = 1;
const STREAM_INIT_TRAIN: u64 = 2;
const STREAM_PRETRAIN: u64 = 3;
const STREAM_TRAIN: u64 = 4;

pub fn stream_rng(seed: u64, stream: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((stream << 48) | index);
    rng
}

/// One row of `metrics.csv`. Pretraining rows score the upsampled guidance
/// map on the validation set; training rows score the final prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub split: String,
    pub metrics: Metrics,
    pub loss: f64,
    pub seg_loss: f64,
    pub nce_loss: f64,
    pub skipped_pairs: usize,
    pub dropped_negatives: usize,
    pub fallbacks: usize,
}

pub const CSV_HEADER: &str =
    "epoch,split,miou,mdsc,recall,precision,loss,seg_loss,nce_loss,skipped_pairs,dropped_negatives,fallbacks";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        let m = &self.metrics;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.split,
            m.miou,
            m.mdsc,
            m.recall,
            m.precision,
            self.loss,
            self.seg_loss,
            self.nce_loss,
            self.skipped_pairs,
            self.dropped_negatives,
            self.fallbacks
        )
    }

    pub fn parse_row(line: &str) -> Result<EpochRecord> {
        let f: Vec<&str> = line.split(',').collect();
        let bad = || Error::Config(format!("malformed metrics row {line:?}"));
        if f.len() != 12 {
            return Err(bad());
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad());
        let int = |i: usize| f[i].parse::<usize>().map_err(|_| bad());
        Ok(EpochRecord {
            epoch: int(0)?,
            split: f[1].to_string(),
            metrics: Metrics {
                miou: num(2)?,
                mdsc: num(3)?,
                recall: num(4)?,
                precision: num(5)?,
            },
            loss: num(6)?,
            seg_loss: num(7)?,
            nce_loss: num(8)?,
            skipped_pairs: int(9)?,
            dropped_negatives: int(10)?,
            fallbacks: int(11)?,
        })
    }
}

pub fn metrics_csv(history: &[EpochRecord]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in history {
        s.push_str(&r.csv_row());
        s.push('\n');
    }
    s
}

/// Everything needed to continue a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub phase: Phase,
    /// Epochs completed in the current phase.
    pub epoch: usize,
    pub params: ParamStore,
    pub adam: Adam,
    pub history: Vec<EpochRecord>,
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub net: Network,
    pool: Option<rayon::ThreadPool>,
}

pub fn network_spec(cfg: &RunConfig, in_channels: usize) -> NetworkSpec {
    NetworkSpec {
        in_channels,
        channels: cfg.channels.clone(),
        width: cfg.width,
        block: cfg.block_config(),
        eps: cfg.eps,
        detach_uncertainty: cfg.detach_uncertainty,
    }
}

/// Horizontal and vertical flips, each with probability 0.5.
fn flip_sample<R: Rng + ?Sized>(s: &Sample, enabled: bool, rng: &mut R) -> Sample {
    if !enabled {
        return s.clone();
    }
    let (h, v) = (rng.random_bool(0.5), rng.random_bool(0.5));
    let mut out = s.clone();
    if h {
        out.image = flip_tensor_horizontal(&out.image);
        out.mask = out.mask.flip_horizontal();
    }
    if v {
        out.image = flip_tensor_vertical(&out.image);
        out.mask = out.mask.flip_vertical();
    }
    out
}

fn gradients(tape: &Tape, n: usize) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::new(); n];
    for (i, g) in tape.param_grads() {
        out[i] = g.to_vec();
    }
    out
}

fn accumulate(total: &mut [Vec<f64>], add: &[Vec<f64>]) {
    for (t, a) in total.iter_mut().zip(add) {
        if t.is_empty() {
            t.clone_from(a);
        } else {
            t.iter_mut().zip(a).for_each(|(x, y)| *x += y);
        }
    }
}

/// Per-sample result of one training step.
struct SampleStep {
    loss: f64,
    seg: f64,
    fallbacks: usize,
    grads: Vec<Vec<f64>>,
}

/// Pooled representations of one augmented sample.
#[derive(Clone, Debug)]
pub struct SampleEmbeddings {
    pub z_a: Option<Vec<f64>>,
    pub z_b: Option<Vec<f64>>,
    pub z_bg: Option<Vec<f64>>,
    pub lesion_area: usize,
}

impl Trainer {
    pub fn new(cfg: RunConfig, in_channels: usize) -> Result<Trainer> {
        cfg.validate()?;
        let spec = network_spec(&cfg, in_channels);
        let (net, _) = Network::build(&spec, &mut stream_rng(cfg.seed, STREAM_INIT_TRAIN, 0))?;
        let pool = if cfg.threads > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(cfg.threads)
                    .build()
                    .map_err(|e| Error::Config(format!("thread pool: {e}")))?,
            )
        } else {
            None
        };
        Ok(Trainer { cfg, net, pool })
    }

    fn fresh_params(&self, stream: u64) -> Result<ParamStore> {
        let (_, store) = Network::build(&self.net.spec, &mut stream_rng(self.cfg.seed, stream, 0))?;
        Ok(store)
    }

    fn fresh_adam(&self, params: &ParamStore) -> Adam {
        Adam::new(self.cfg.lr, params.iter().map(|p| p.value.numel()))
    }

    pub fn init_state(&self) -> Result<TrainState> {
        let pretrain = self.cfg.uoic && self.cfg.pretrain_epochs > 0;
        let params = if pretrain {
            self.fresh_params(STREAM_INIT_PRETRAIN)?
        } else {
            self.fresh_params(STREAM_INIT_TRAIN)?
        };
        let adam = self.fresh_adam(&params);
        let phase = if pretrain {
            Phase::Pretrain
        } else if self.cfg.epochs > 0 {
            Phase::Train
        } else {
            Phase::Done
        };
        Ok(TrainState {
            phase,
            epoch: 0,
            params,
            adam,
            history: Vec::new(),
        })
    }

    /// Encoder and guidance weights carry over; everything else and the
    /// optimiser restart.
    fn hand_off(&self, state: &mut TrainState) -> Result<()> {
        let mut params = self.fresh_params(STREAM_INIT_TRAIN)?;
        params.copy_roles_from(&state.params, &[Role::Encoder, Role::Guidance])?;
        state.adam = self.fresh_adam(&params);
        state.params = params;
        state.phase = if self.cfg.epochs > 0 { Phase::Train } else { Phase::Done };
        state.epoch = 0;
        Ok(())
    }

    fn map_parallel<T: Send, F>(&self, n: usize, f: F) -> Vec<T>
    where
        F: Fn(usize) -> T + Sync + Send,
    {
        match &self.pool {
            Some(pool) => pool.install(|| (0..n).into_par_iter().map(&f).collect()),
            None => (0..n).map(f).collect(),
        }
    }

    /// Runs one epoch of the current phase and appends its record.
    pub fn run_epoch(&self, state: &mut TrainState, train: &[Sample], val: &[Sample]) -> Result<EpochRecord> {
        if train.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        let record = match state.phase {
            Phase::Pretrain => self.pretrain_epoch(state, train, val)?,
            Phase::Train => self.train_epoch(state, train, val)?,
            Phase::Done => return Err(Error::Contract("run already finished".into())),
        };
        state.history.push(record.clone());
        state.epoch += 1;
        match state.phase {
            Phase::Pretrain if state.epoch >= self.cfg.pretrain_epochs => self.hand_off(state)?,
            Phase::Train if state.epoch >= self.cfg.epochs => state.phase = Phase::Done,
            _ => {}
        }
        Ok(record)
    }

    pub fn run_to_end(&self, state: &mut TrainState, train: &[Sample], val: &[Sample]) -> Result<()> {
        while state.phase != Phase::Done {
            self.run_epoch(state, train, val)?;
        }
        Ok(())
    }

    fn pretrain_epoch(&self, state: &mut TrainState, train: &[Sample], val: &[Sample]) -> Result<EpochRecord> {
        let cfg = &self.cfg;
        let mut rng = stream_rng(cfg.seed, STREAM_PRETRAIN, state.epoch as u64);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut rec = EpochRecord {
            epoch: state.epoch + 1,
            split: Phase::Pretrain.as_str().into(),
            metrics: Metrics::default(),
            loss: 0.0,
            seg_loss: 0.0,
            nce_loss: 0.0,
            skipped_pairs: 0,
            dropped_negatives: 0,
            fallbacks: 0,
        };
        let batches: Vec<&[usize]> = order.chunks(cfg.batch_size).collect();
        let mut nce_batches = 0usize;
        for batch in &batches {
            let mut augmented = Vec::with_capacity(batch.len());
            for &i in *batch {
                let s = flip_sample(&train[i], cfg.flips, &mut rng);
                augmented.push(copy_paste(&s.image, &s.mask, &cfg.copy_paste(), &mut rng)?);
            }
            let mut tape = Tape::new();
            let vars = state.params.bind(&mut tape)?;
            let step = self.pretrain_batch(&mut tape, &vars, &augmented)?;
            rec.skipped_pairs += step.skipped;
            rec.dropped_negatives += step.dropped;
            rec.fallbacks += step.fallbacks;
            rec.seg_loss += tape.value(step.seg).item();
            if let Some(n) = step.nce {
                rec.nce_loss += tape.value(n).item();
                nce_batches += 1;
            }
            rec.loss += tape.value(step.loss).item();
            tape.backward(step.loss)?;
            let grads = gradients(&tape, state.params.len());
            state.adam.step(state.params.values_mut(), &grads)?;
        }
        let nb = batches.len() as f64;
        rec.loss /= nb;
        rec.seg_loss /= nb;
        if nce_batches > 0 {
            rec.nce_loss /= nce_batches as f64;
        }
        rec.metrics = self.evaluate_guidance(&state.params, val)?;
        Ok(rec)
    }

    fn pretrain_batch(&self, tape: &mut Tape, vars: &[Var], batch: &[AugmentedSample]) -> Result<PretrainStep> {
        let cfg = &self.cfg;
        let mut segs = Vec::with_capacity(batch.len());
        let (mut anchors, mut positives, mut negatives) = (Vec::new(), Vec::new(), Vec::new());
        let (mut skipped, mut dropped, mut fallbacks) = (0, 0, 0);
        for aug in batch {
            let img = tape.constant(aug.image.clone())?;
            let enc = self.net.encode(tape, vars, img)?;
            let (h, w) = aug.mask.dims();
            let y_cp_hat = self.net.upsample_guidance(tape, &enc, h, w)?;
            let seg = seg_loss(tape, y_cp_hat, &aug.mask)?;
            segs.push(tape.reshape(seg, &[1])?);
            let f = enc.features[cfg.feature_scale];
            if aug.succeeded() {
                let za = masked_avg_pool(tape, f, &aug.m_a)?;
                let zb = masked_avg_pool(tape, f, &aug.m_b)?;
                match (za, zb) {
                    (Some(a), Some(b)) => {
                        anchors.push(a);
                        positives.push(b);
                    }
                    _ => skipped += 1,
                }
            } else {
                skipped += 1;
                fallbacks += 1;
            }
            match mine_hard_negative(tape, f, &aug.mask, y_cp_hat)? {
                Some(z) => negatives.push(z),
                None => dropped += 1,
            }
        }
        let all = tape.concat(&segs, 0)?;
        let seg = tape.mean(all)?;
        let nce = if anchors.is_empty() || negatives.is_empty() {
            None
        } else {
            let out = info_nce(tape, &anchors, &positives, &negatives, cfg.tau)?;
            skipped += out.dropped_terms;
            out.loss
        };
        let loss = pretrain_loss(tape, seg, nce, cfg.lambda_ic)?;
        Ok(PretrainStep {
            loss,
            seg,
            nce,
            skipped,
            dropped,
            fallbacks,
        })
    }

    fn sample_step(&self, params: &ParamStore, s: &Sample, scale: f64) -> Result<SampleStep> {
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape)?;
        let img = tape.constant(s.image.clone())?;
        let fwd = self.net.forward(&mut tape, &vars, img)?;
        let (total, main) = train_loss(&mut tape, fwd.y_hat, &s.mask, fwd.m_up, self.cfg.lambda_aux)?;
        let scaled = tape.scalar_mul(total, scale)?;
        tape.backward(scaled)?;
        Ok(SampleStep {
            loss: tape.value(total).item(),
            seg: tape.value(main).item(),
            fallbacks: fwd.fallbacks(),
            grads: gradients(&tape, params.len()),
        })
    }

    fn train_epoch(&self, state: &mut TrainState, train: &[Sample], val: &[Sample]) -> Result<EpochRecord> {
        let cfg = &self.cfg;
        let mut rng = stream_rng(cfg.seed, STREAM_TRAIN, state.epoch as u64);
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let (mut loss, mut seg, mut fallbacks) = (0.0, 0.0, 0);
        for batch in order.chunks(cfg.batch_size) {
            let samples: Vec<Sample> = batch.iter().map(|&i| flip_sample(&train[i], cfg.flips, &mut rng)).collect();
            let scale = 1.0 / samples.len() as f64;
            let params = &state.params;
            let steps = self.map_parallel(samples.len(), |k| self.sample_step(params, &samples[k], scale));
            let mut total = vec![Vec::new(); state.params.len()];
            for step in steps {
                let step = step?;
                accumulate(&mut total, &step.grads);
                loss += step.loss;
                seg += step.seg;
                fallbacks += step.fallbacks;
            }
            state.adam.step(state.params.values_mut(), &total)?;
        }
        let n = train.len() as f64;
        Ok(EpochRecord {
            epoch: state.epoch + 1,
            split: "val".into(),
            metrics: self.evaluate(&state.params, val)?.0,
            loss: loss / n,
            seg_loss: seg / n,
            nce_loss: 0.0,
            skipped_pairs: 0,
            dropped_negatives: 0,
            fallbacks,
        })
    }

    /// Final prediction for one image.
    pub fn predict(&self, params: &ParamStore, image: &Tensor) -> Result<Prediction> {
        let mut tape = Tape::new();
        let vars = params.bind(&mut tape)?;
        let img = tape.constant(image.clone())?;
        let fwd = self.net.forward(&mut tape, &vars, img)?;
        Ok(Prediction {
            y_hat: tape.value(fwd.y_hat).clone(),
            m_hat: tape.value(fwd.encoded.m_hat).clone(),
            m_up: tape.value(fwd.m_up).clone(),
            u: fwd.u_i.iter().map(|u| u.map(|v| tape.value(v).clone())).collect(),
            m_i: fwd.m_i.iter().map(|&v| tape.value(v).clone()).collect(),
        })
    }

    /// Mean metrics of the final prediction and the per-image scores.
    pub fn evaluate(&self, params: &ParamStore, samples: &[Sample]) -> Result<(Metrics, Vec<Metrics>)> {
        let per: Vec<Result<Metrics>> = self.map_parallel(samples.len(), |i| {
            let p = self.predict(params, &samples[i].image)?;
            Ok(image_metrics(p.y_hat.data(), &samples[i].mask))
        });
        let per: Vec<Metrics> = per.into_iter().collect::<Result<_>>()?;
        Ok((mean_metrics(&per), per))
    }

    /// Mean metrics of the upsampled guidance map.
    pub fn evaluate_guidance(&self, params: &ParamStore, samples: &[Sample]) -> Result<Metrics> {
        let per: Vec<Result<Metrics>> = self.map_parallel(samples.len(), |i| {
            let mut tape = Tape::new();
            let vars = params.bind(&mut tape)?;
            let img = tape.constant(samples[i].image.clone())?;
            let enc = self.net.encode(&mut tape, &vars, img)?;
            let (h, w) = samples[i].mask.dims();
            let up = self.net.upsample_guidance(&mut tape, &enc, h, w)?;
            Ok(image_metrics(tape.value(up).data(), &samples[i].mask))
        });
        Ok(mean_metrics(&per.into_iter().collect::<Result<Vec<_>>>()?))
    }

    /// Augments each sample with the copy-paste draw of `seed` and pools
    /// `z_A`, `z_B` and `z_bg` with the given weights.
    pub fn embeddings(&self, params: &ParamStore, samples: &[Sample], seed: u64) -> Result<Vec<SampleEmbeddings>> {
        let mut rng = stream_rng(seed, STREAM_PRETRAIN, u64::from(u32::MAX));
        let mut out = Vec::with_capacity(samples.len());
        for s in samples {
            let aug = copy_paste(&s.image, &s.mask, &self.cfg.copy_paste(), &mut rng)?;
            let mut tape = Tape::new();
            let vars = params.bind(&mut tape)?;
            let img = tape.constant(aug.image.clone())?;
            let enc = self.net.encode(&mut tape, &vars, img)?;
            let (h, w) = aug.mask.dims();
            let up = self.net.upsample_guidance(&mut tape, &enc, h, w)?;
            let f = enc.features[self.cfg.feature_scale];
            let value = |tape: &Tape, v: Option<Var>| v.map(|v| tape.value(v).to_vec());
            let (za, zb) = if aug.succeeded() {
                (
                    masked_avg_pool(&mut tape, f, &aug.m_a)?,
                    masked_avg_pool(&mut tape, f, &aug.m_b)?,
                )
            } else {
                (None, None)
            };
            let zbg = mine_hard_negative(&mut tape, f, &aug.mask, up)?;
            out.push(SampleEmbeddings {
                z_a: value(&tape, za),
                z_b: value(&tape, zb),
                z_bg: value(&tape, zbg),
                lesion_area: aug.m_a.count(),
            });
        }
        Ok(out)
    }
}

struct PretrainStep {
    loss: Var,
    seg: Var,
    nce: Option<Var>,
    skipped: usize,
    dropped: usize,
    fallbacks: usize,
}

/// Eager outputs of one forward pass.
#[derive(Clone, Debug)]
pub struct Prediction {
    pub y_hat: Tensor,
    pub m_hat: Tensor,
    pub m_up: Tensor,
    /// Uncertainty per scale, shallowest first; `None` where unused.
    pub u: Vec<Option<Tensor>>,
    pub m_i: Vec<Tensor>,
}
