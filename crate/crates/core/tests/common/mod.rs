#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use uhr_core::params::ParamStore;
use uhr_core::tensor::{Tape, Tensor, Var};
use uhr_core::ughr::{BlockConfig, BlockOutput, UghrBlock};
use uhr_core::uncertainty::entropy_uncertainty;
use uhr_core::Result;

pub fn random(shape: &[usize], lo: f64, hi: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

pub fn weighted_sum(t: &mut Tape, y: Var, weights: &Tensor) -> Result<Var> {
    let w = t.constant(weights.clone())?;
    let p = t.mul(y, w)?;
    t.sum(p)
}

/// Which input of [`BlockCase::loss`] the probe variable replaces.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Input,
    /// Logits of the guidance map; gradient reaches the block through both
    /// the contexts and the uncertainty map.
    Logits,
    Param(usize),
}

/// One refinement block with every parameter drawn at random, so no branch
/// is short-circuited by a zero initialisation.
pub struct BlockCase {
    pub block: UghrBlock,
    pub store: ParamStore,
    pub d_tilde: Tensor,
    pub logits: Tensor,
    pub weights: Tensor,
}

impl BlockCase {
    pub fn new(cfg: BlockConfig, d: usize, h: usize, w: usize, seed: u64) -> BlockCase {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let block = UghrBlock::new(&mut store, "b", d, cfg, &mut rng).unwrap();
        let normal = Normal::new(0.0, 0.4).unwrap();
        for v in store.values_mut() {
            for x in v.data_mut() {
                *x = normal.sample(&mut rng);
            }
        }
        BlockCase {
            block,
            store,
            d_tilde: random(&[d, h, w], -1.0, 1.0, seed ^ 0x11),
            logits: random(&[1, h, w], -2.5, 2.5, seed ^ 0x22),
            weights: random(&[d, h, w], -1.0, 1.0, seed ^ 0x33),
        }
    }

    pub fn slot_value(&self, slot: Slot) -> Tensor {
        match slot {
            Slot::Input => self.d_tilde.clone(),
            Slot::Logits => self.logits.clone(),
            Slot::Param(i) => self.store.get(i).value.clone(),
        }
    }

    pub fn run(&self, t: &mut Tape, slot: Slot, x: Var) -> Result<BlockOutput> {
        let vars = (0..self.store.len())
            .map(|i| {
                if slot == Slot::Param(i) {
                    Ok(x)
                } else {
                    t.constant(self.store.get(i).value.clone())
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let d = if slot == Slot::Input { x } else { t.constant(self.d_tilde.clone())? };
        let z = if slot == Slot::Logits { x } else { t.constant(self.logits.clone())? };
        let m = t.sigmoid(z)?;
        let u = if self.block.cfg.unc_guidance {
            Some(entropy_uncertainty(t, m, 1e-8)?)
        } else {
            None
        };
        self.block.forward(t, &vars, d, m, u)
    }

    pub fn loss(&self, t: &mut Tape, slot: Slot, x: Var) -> Result<Var> {
        let out = self.run(t, slot, x)?;
        weighted_sum(t, out.e, &self.weights)
    }

    pub fn grad_error(&self, slot: Slot, h: f64) -> f64 {
        scaled_grad_check(|t, x| self.loss(t, slot, x), &self.slot_value(slot), h)
    }

    /// Worst error over the input, the guidance logits and every parameter.
    pub fn worst_grad_error(&self, h: f64) -> (f64, String) {
        let mut slots = vec![(Slot::Input, "input".to_string()), (Slot::Logits, "logits".to_string())];
        for (i, p) in self.store.iter().enumerate() {
            slots.push((Slot::Param(i), p.name.clone()));
        }
        slots
            .into_iter()
            .map(|(s, name)| (self.grad_error(s, h), name))
            .fold((0.0, String::new()), |acc, x| if x.0 > acc.0 { x } else { acc })
    }
}

pub fn param_index(store: &ParamStore, name: &str) -> usize {
    store
        .iter()
        .position(|p| p.name == name)
        .unwrap_or_else(|| panic!("no parameter {name}"))
}

/// Central-difference check whose error is normalised by the largest
/// gradient magnitude of the tensor rather than per coordinate, so
/// near-zero entries are not judged against pure roundoff.
pub fn scaled_grad_check(f: impl Fn(&mut Tape, Var) -> Result<Var>, x: &Tensor, h: f64) -> f64 {
    let mut t = Tape::new();
    let v = t.leaf(x.clone(), true).unwrap();
    let l = f(&mut t, v).unwrap();
    t.backward(l).unwrap();
    let analytic = t.grad(v).unwrap().to_vec();
    let eval = |probe: Tensor| {
        let mut t = Tape::new();
        let v = t.constant(probe).unwrap();
        let l = f(&mut t, v).unwrap();
        t.value(l).item()
    };
    let numeric: Vec<f64> = (0..x.numel())
        .map(|i| {
            let mut plus = x.clone();
            plus.data_mut()[i] += h;
            let mut minus = x.clone();
            minus.data_mut()[i] -= h;
            (eval(plus) - eval(minus)) / (2.0 * h)
        })
        .collect();
    let scale = analytic
        .iter()
        .chain(&numeric)
        .fold(1e-8f64, |m, g| m.max(g.abs()));
    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| (a - n).abs() / scale)
        .fold(0.0, f64::max)
}

/// A run small enough for the test suite: 32×32 scenes, two scales.
pub fn tiny_config(run_dir: &std::path::Path) -> uhr_core::config::RunConfig {
    uhr_core::config::RunConfig {
        image_size: 32,
        train_size: 8,
        val_size: 4,
        channels: vec![4, 8],
        width: 4,
        m: 2,
        batch_size: 4,
        epochs: 3,
        pretrain_epochs: 2,
        lr: 1e-3,
        run_dir: run_dir.to_path_buf(),
        ..Default::default()
    }
}
