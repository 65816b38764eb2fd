use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamStore, Role};
use crate::tensor::{Tape, Var};
use crate::ughr::{BlockConfig, BlockOutput, UghrBlock};
use crate::uncertainty::scale_uncertainty;

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkSpec {
    pub in_channels: usize,
    /// Encoder channels per scale, shallowest first.
    pub channels: Vec<usize>,
    /// Channel width `D` of every refinement block.
    pub width: usize,
    pub block: BlockConfig,
    pub eps: f64,
    pub detach_uncertainty: bool,
}

impl Default for NetworkSpec {
    fn default() -> Self {
        NetworkSpec {
            in_channels: 1,
            channels: vec![16, 32, 64],
            width: 16,
            block: BlockConfig::default(),
            eps: 1e-8,
            detach_uncertainty: false,
        }
    }
}

impl NetworkSpec {
    pub fn scales(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales() < 2 {
            return Err(Error::Config("network needs at least two scales".into()));
        }
        if self.channels.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config("channels must be nondecreasing with depth".into()));
        }
        if self.in_channels == 0 || self.width == 0 || self.channels.contains(&0) {
            return Err(Error::Config("channel counts must be >= 1".into()));
        }
        self.block.validate()
    }

    /// Required divisor of the input height and width.
    pub fn stride(&self) -> usize {
        1 << (self.scales() - 1)
    }
}

type Conv = (ParamId, ParamId);

/// Parameter layout of the encoder, guidance head, refinement path and
/// decoder. Holds handles only; values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Network {
    pub spec: NetworkSpec,
    encoder: Vec<[Conv; 2]>,
    guidance: Conv,
    align: Vec<Conv>,
    blocks: Vec<UghrBlock>,
    decoder: [Conv; 2],
}

/// Encoder features and the coarse guidance map.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub features: Vec<Var>,
    /// `1×h×w` at the deepest scale.
    pub m_hat: Var,
}

#[derive(Clone, Debug)]
pub struct Forward {
    pub encoded: Encoded,
    pub y_hat: Var,
    /// Guidance map upsampled to the input size.
    pub m_up: Var,
    /// Per scale, shallowest first.
    pub m_i: Vec<Var>,
    pub u_i: Vec<Option<Var>>,
    pub blocks: Vec<BlockOutput>,
}

impl Forward {
    pub fn refined(&self) -> Vec<Var> {
        self.blocks.iter().map(|b| b.e).collect()
    }

    pub fn fallbacks(&self) -> usize {
        self.blocks.iter().map(|b| b.mce.fallbacks).sum()
    }
}

fn conv<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    role: Role,
    cout: usize,
    cin: usize,
    k: usize,
    zero: bool,
    rng: &mut R,
) -> Conv {
    let init = if zero {
        Init::Zeros
    } else {
        Init::Normal((2.0 / (cin * k * k) as f64).sqrt())
    };
    (
        store.add(format!("{name}.w"), role, &[cout, cin, k, k], init, rng),
        store.add(format!("{name}.b"), role, &[cout], Init::Zeros, rng),
    )
}

impl Network {
    /// Builds the layout and a freshly initialised store.
    pub fn build<R: Rng + ?Sized>(spec: &NetworkSpec, rng: &mut R) -> Result<(Network, ParamStore)> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let mut encoder = Vec::new();
        let mut cin = spec.in_channels;
        for (i, &c) in spec.channels.iter().enumerate() {
            encoder.push([
                conv(&mut store, &format!("enc{i}.conv1"), Role::Encoder, c, cin, 3, false, rng),
                conv(&mut store, &format!("enc{i}.conv2"), Role::Encoder, c, c, 3, false, rng),
            ]);
            cin = c;
        }
        let deepest = *spec.channels.last().expect("validated");
        let guidance = conv(&mut store, "guide", Role::Guidance, 1, deepest, 1, false, rng);
        let d = spec.width;
        let mut align = Vec::new();
        let mut blocks = Vec::new();
        for (i, &c) in spec.channels.iter().enumerate() {
            align.push(conv(&mut store, &format!("ughr{i}.align"), Role::Ughr, d, c, 1, false, rng));
            blocks.push(UghrBlock::new(&mut store, &format!("ughr{i}"), d, spec.block, rng)?);
        }
        let decoder = [
            conv(&mut store, "dec.conv", Role::Decoder, d, d, 3, false, rng),
            conv(&mut store, "dec.out", Role::Decoder, 1, d, 1, true, rng),
        ];
        Ok((
            Network {
                spec: spec.clone(),
                encoder,
                guidance,
                align,
                blocks,
                decoder,
            },
            store,
        ))
    }

    pub fn blocks(&self) -> &[UghrBlock] {
        &self.blocks
    }

    fn check_input(&self, tape: &Tape, image: Var) -> Result<(usize, usize)> {
        let (c, h, w) = match tape.shape(image) {
            &[c, h, w] => (c, h, w),
            other => return Err(Error::shape("network input", format!("expected CxHxW, got {other:?}"))),
        };
        if c != self.spec.in_channels {
            return Err(Error::shape(
                "network input",
                format!("{c} channels, network expects {}", self.spec.in_channels),
            ));
        }
        let s = self.spec.stride();
        if h % s != 0 || w % s != 0 {
            let pad = |n: usize| (s - n % s) % s;
            return Err(Error::Config(format!(
                "input {h}x{w} must be divisible by {s}; pad by {} rows and {} columns",
                pad(h),
                pad(w)
            )));
        }
        Ok((h, w))
    }

    /// Encoder and guidance head only.
    pub fn encode(&self, tape: &mut Tape, vars: &[Var], image: Var) -> Result<Encoded> {
        self.check_input(tape, image)?;
        let mut features = Vec::with_capacity(self.encoder.len());
        let mut x = image;
        for (i, [c1, c2]) in self.encoder.iter().enumerate() {
            if i > 0 {
                x = tape.avg_pool(x, 2)?;
            }
            x = tape.conv2d(x, vars[c1.0], Some(vars[c1.1]), 1)?;
            x = tape.relu(x)?;
            x = tape.conv2d(x, vars[c2.0], Some(vars[c2.1]), 1)?;
            x = tape.relu(x)?;
            features.push(x);
        }
        let deepest = *features.last().expect("at least two scales");
        let logits = tape.conv2d(deepest, vars[self.guidance.0], Some(vars[self.guidance.1]), 1)?;
        let m_hat = tape.sigmoid(logits)?;
        Ok(Encoded { features, m_hat })
    }

    /// Guidance map bilinearly upsampled to the input size.
    pub fn upsample_guidance(&self, tape: &mut Tape, enc: &Encoded, h: usize, w: usize) -> Result<Var> {
        tape.bilinear_resize(enc.m_hat, h, w)
    }

    pub fn forward(&self, tape: &mut Tape, vars: &[Var], image: Var) -> Result<Forward> {
        let (h, w) = self.check_input(tape, image)?;
        let encoded = self.encode(tape, vars, image)?;
        let n = self.blocks.len();
        let mut m_i = vec![encoded.m_hat; n];
        let mut u_i = vec![None; n];
        let mut outs: Vec<Option<BlockOutput>> = vec![None; n];
        let mut deeper: Option<Var> = None;
        for i in (0..n).rev() {
            let f = encoded.features[i];
            let (fh, fw) = (tape.shape(f)[1], tape.shape(f)[2]);
            let (aw, ab) = self.align[i];
            let mut d_tilde = tape.conv2d(f, vars[aw], Some(vars[ab]), 1)?;
            if let Some(e) = deeper {
                let up = tape.bilinear_resize(e, fh, fw)?;
                d_tilde = tape.add(d_tilde, up)?;
            }
            let block = &self.blocks[i];
            let (m, u) = if block.cfg.unc_guidance && block.cfg.base_hr {
                let (m, u) = scale_uncertainty(
                    tape,
                    encoded.m_hat,
                    fh,
                    fw,
                    self.spec.eps,
                    self.spec.detach_uncertainty,
                )?;
                (m, Some(u))
            } else {
                (tape.bilinear_resize(encoded.m_hat, fh, fw)?, None)
            };
            let out = block.forward(tape, vars, d_tilde, m, u)?;
            deeper = Some(out.e);
            m_i[i] = m;
            u_i[i] = u;
            outs[i] = Some(out);
        }
        let e0 = deeper.expect("at least one block");
        let [(w1, b1), (w2, b2)] = self.decoder;
        let hdec = tape.conv2d(e0, vars[w1], Some(vars[b1]), 1)?;
        let hdec = tape.relu(hdec)?;
        let logits = tape.conv2d(hdec, vars[w2], Some(vars[b2]), 1)?;
        let y_hat = tape.sigmoid(logits)?;
        let m_up = self.upsample_guidance(tape, &encoded, h, w)?;
        Ok(Forward {
            encoded,
            y_hat,
            m_up,
            m_i,
            u_i,
            blocks: outs.into_iter().map(|o| o.expect("every scale visited")).collect(),
        })
    }
}
