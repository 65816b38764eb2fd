//! Uncertainty-guided hypergraph refinement block.
//!
//! Nodes are the pixels of `d̃_i` in row-major order, so node `n` sits at
//! `(n / w, n % w)` and the flattened uncertainty map uses the same order.
//! The participation matrix `S` is `N×2M`; columns `0..M` are foreground
//! hyperedges and `M..2M` background ones when the groups are enabled.

use rand::Rng;

use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamStore, Role};
use crate::tensor::{Tape, Var};
use crate::uoic::{wmap, NEGATIVE_MIN_WEIGHT};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BlockConfig {
    /// Prototypes per group.
    pub m: usize,
    pub beta: f64,
    pub dilations: [usize; 2],
    pub base_hr: bool,
    pub unc_guidance: bool,
    pub fgbg_groups: bool,
}

impl Default for BlockConfig {
    fn default() -> Self {
        BlockConfig {
            m: 8,
            beta: 1.0,
            dilations: [1, 2],
            base_hr: true,
            unc_guidance: true,
            fgbg_groups: true,
        }
    }
}

impl BlockConfig {
    pub fn validate(&self) -> Result<()> {
        if self.m == 0 {
            return Err(Error::Config("prototypes per group must be >= 1".into()));
        }
        if !(self.beta >= 0.0) {
            return Err(Error::Config(format!("beta must be >= 0, got {}", self.beta)));
        }
        if self.dilations.contains(&0) {
            return Err(Error::Config("dilation rates must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MceStats {
    /// How many of the two contexts fell back to the global mean.
    pub fallbacks: usize,
}

fn dims(tape: &Tape, x: Var, op: &'static str) -> Result<(usize, usize, usize)> {
    match tape.shape(x) {
        &[d, h, w] => Ok((d, h, w)),
        other => Err(Error::shape(op, format!("expected DxHxW, got {other:?}"))),
    }
}

/// `D×h×w` feature map as the `N×D` node matrix.
pub fn to_nodes(tape: &mut Tape, d_tilde: Var) -> Result<Var> {
    let (d, h, w) = dims(tape, d_tilde, "nodes")?;
    let flat = tape.reshape(d_tilde, &[d, h * w])?;
    tape.transpose(flat)
}

/// Inverse of [`to_nodes`].
pub fn from_nodes(tape: &mut Tape, x: Var, h: usize, w: usize) -> Result<Var> {
    let d = tape.shape(x)[1];
    let t = tape.transpose(x)?;
    tape.reshape(t, &[d, h, w])
}

fn global_mean(tape: &mut Tape, d_tilde: Var) -> Result<Var> {
    let x = to_nodes(tape, d_tilde)?;
    tape.reduce_mean(x, 0)
}

/// Soft-weighted foreground and background contexts of `d̃_i`, using
/// `M̂_i` and `1 − M̂_i` as weights. A side whose weight sum is below the
/// negative-drop threshold falls back to the global mean.
pub fn mce_contexts(tape: &mut Tape, d_tilde: Var, m_i: Var) -> Result<(Var, Var, MceStats)> {
    let (_, h, w) = dims(tape, d_tilde, "mce")?;
    if tape.shape(m_i) != [1, h, w] {
        return Err(Error::shape("mce", format!("map {:?} for {h}x{w} features", tape.shape(m_i))));
    }
    let mut stats = MceStats::default();
    let (c_fg, fg_mass) = wmap(tape, d_tilde, m_i)?;
    let bg = tape.one_minus(m_i)?;
    let (c_bg, bg_mass) = wmap(tape, d_tilde, bg)?;
    let mut pick = |tape: &mut Tape, c: Var, mass: f64| -> Result<Var> {
        if mass < NEGATIVE_MIN_WEIGHT {
            stats.fallbacks += 1;
            global_mean(tape, d_tilde)
        } else {
            Ok(c)
        }
    };
    let c_fg = pick(tape, c_fg, fg_mass)?;
    let c_bg = pick(tape, c_bg, bg_mass)?;
    Ok((c_fg, c_bg, stats))
}

/// Shared query, key and value projections, each `D×D`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
}

/// Attention over the two-token sequence `C = [c_FG; c_BG]`:
/// `C̃ = C + softmax(QKᵀ/√D)·V` with `Q = CW_q`, `K = CW_k`, `V = CW_v`.
pub fn context_interact(
    tape: &mut Tape,
    c_fg: Var,
    c_bg: Var,
    att: AttentionVars,
) -> Result<(Var, Var)> {
    let d = tape.value(c_fg).numel();
    if tape.value(c_bg).numel() != d {
        return Err(Error::shape("context interaction", "contexts differ in length"));
    }
    let a = tape.reshape(c_fg, &[1, d])?;
    let b = tape.reshape(c_bg, &[1, d])?;
    let c = tape.concat(&[a, b], 0)?;
    let q = tape.matmul(c, att.wq)?;
    let k = tape.matmul(c, att.wk)?;
    let v = tape.matmul(c, att.wv)?;
    let kt = tape.transpose(k)?;
    let logits = tape.matmul(q, kt)?;
    let logits = tape.scalar_mul(logits, 1.0 / (d as f64).sqrt())?;
    let attn = tape.softmax(logits, 1)?;
    let mixed = tape.matmul(attn, v)?;
    let out = tape.add(c, mixed)?;
    let fg = tape.slice(out, 0, 0, 1)?;
    let bg = tape.slice(out, 0, 1, 1)?;
    Ok((tape.reshape(fg, &[d])?, tape.reshape(bg, &[d])?))
}

/// `base + reshape(affine(context), rows×D)`.
pub fn offset_prototypes(
    tape: &mut Tape,
    base: Var,
    context: Var,
    w: Var,
    b: Var,
) -> Result<Var> {
    let (rows, d) = match tape.shape(base) {
        &[r, d] => (r, d),
        other => return Err(Error::shape("prototypes", format!("base {other:?}"))),
    };
    let c = tape.reshape(context, &[1, d])?;
    let delta = tape.affine(c, w, b)?;
    let delta = tape.reshape(delta, &[rows, d])?;
    tape.add(base, delta)
}

/// `P = concat(P^g_FG + ΔP_FG, P^g_BG + ΔP_BG)`, `2M×D`.
#[allow(clippy::too_many_arguments)]
pub fn dynamic_prototypes(
    tape: &mut Tape,
    base_fg: Var,
    base_bg: Var,
    c_fg: Var,
    c_bg: Var,
    offset_fg: (Var, Var),
    offset_bg: (Var, Var),
) -> Result<Var> {
    let p_fg = offset_prototypes(tape, base_fg, c_fg, offset_fg.0, offset_fg.1)?;
    let p_bg = offset_prototypes(tape, base_bg, c_bg, offset_bg.0, offset_bg.1)?;
    tape.concat(&[p_fg, p_bg], 0)
}

/// `S = softmax_nodes(z ⊙ 2^{βu})` with `z = XPᵀ/√D`. `u` is the `N`-vector
/// of node uncertainties, or `None` to skip modulation.
pub fn participation(tape: &mut Tape, x: Var, p: Var, u: Option<Var>, beta: f64) -> Result<Var> {
    let (n, d) = match tape.shape(x) {
        &[n, d] => (n, d),
        other => return Err(Error::shape("participation", format!("nodes {other:?}"))),
    };
    let pt = tape.transpose(p)?;
    let z = tape.matmul(x, pt)?;
    let z = tape.scalar_mul(z, 1.0 / (d as f64).sqrt())?;
    let edges = tape.shape(z)[1];
    let z = match u {
        Some(u) => {
            if tape.value(u).numel() != n {
                return Err(Error::shape(
                    "participation",
                    format!("{} uncertainties for {n} nodes", tape.value(u).numel()),
                ));
            }
            let bu = tape.scalar_mul(u, beta)?;
            let gain = tape.power_of_two(bu)?;
            let gain = tape.reshape(gain, &[n, 1])?;
            let gain = tape.expand(gain, &[n, edges])?;
            tape.mul(z, gain)?
        }
        None => z,
    };
    let s = tape.softmax(z, 0)?;
    debug_assert!(columns_normalised(tape.value(s).data(), n, edges, 1e-9));
    Ok(s)
}

pub fn columns_normalised(s: &[f64], n: usize, edges: usize, tol: f64) -> bool {
    (0..edges).all(|m| ((0..n).map(|i| s[i * edges + m]).sum::<f64>() - 1.0).abs() <= tol)
}

/// `relu(x)·W + b`
pub fn mapping(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let r = tape.relu(x)?;
    tape.affine(r, w, b)
}

/// `H_e = SᵀX`, `X_e = S·φ_e(H_e)`, `X^hg = X + φ_n(X_e)`.
pub fn message_pass(
    tape: &mut Tape,
    x: Var,
    s: Var,
    phi_e: (Var, Var),
    phi_n: (Var, Var),
) -> Result<Var> {
    let st = tape.transpose(s)?;
    let h_e = tape.matmul(st, x)?;
    let h_e = mapping(tape, h_e, phi_e.0, phi_e.1)?;
    let x_e = tape.matmul(s, h_e)?;
    let upd = mapping(tape, x_e, phi_n.0, phi_n.1)?;
    tape.add(x, upd)
}

#[derive(Clone, Debug)]
enum Prototypes {
    Grouped {
        base_fg: ParamId,
        base_bg: ParamId,
        wq: ParamId,
        wk: ParamId,
        wv: ParamId,
        off_fg: (ParamId, ParamId),
        off_bg: (ParamId, ParamId),
    },
    Shared {
        base: ParamId,
        off: (ParamId, ParamId),
    },
}

#[derive(Clone, Debug)]
struct Hypergraph {
    protos: Prototypes,
    phi_e: (ParamId, ParamId),
    phi_n: (ParamId, ParamId),
}

#[derive(Clone, Debug)]
enum Branch {
    Hypergraph(Hypergraph),
    /// `d̃ + conv3×3(d̃)` standing in for the hypergraph branch.
    Conv(ParamId, ParamId),
}

/// Parameter handles of one refinement block.
#[derive(Clone, Debug)]
pub struct UghrBlock {
    pub cfg: BlockConfig,
    pub width: usize,
    conv: [(ParamId, ParamId); 2],
    branch: Branch,
}

/// Everything a block produced during one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct BlockOutput {
    pub e: Var,
    pub f_hg: Var,
    pub f_conv: Var,
    pub s: Option<Var>,
    pub p: Option<Var>,
    pub mce: MceStats,
}

fn conv_std(fan_in: usize) -> f64 {
    (2.0 / fan_in as f64).sqrt()
}

impl UghrBlock {
    /// Registers the block's parameters under `prefix`.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        prefix: &str,
        width: usize,
        cfg: BlockConfig,
        rng: &mut R,
    ) -> Result<UghrBlock> {
        cfg.validate()?;
        let d = width;
        let m = cfg.m;
        let lin = Init::Normal(1.0 / (d as f64).sqrt());
        let mut add = |name: &str, shape: &[usize], init: Init, rng: &mut R| {
            store.add(format!("{prefix}.{name}"), Role::Ughr, shape, init, rng)
        };
        let conv_init = Init::Normal(conv_std(d * 9));
        let conv = [
            (
                add("conv1.w", &[d, d, 3, 3], conv_init, rng),
                add("conv1.b", &[d], Init::Zeros, rng),
            ),
            (
                add("conv2.w", &[d, d, 3, 3], conv_init, rng),
                add("conv2.b", &[d], Init::Zeros, rng),
            ),
        ];
        let branch = if !cfg.base_hr {
            Branch::Conv(
                add("hr_conv.w", &[d, d, 3, 3], Init::Zeros, rng),
                add("hr_conv.b", &[d], Init::Zeros, rng),
            )
        } else {
            let protos = if cfg.fgbg_groups {
                Prototypes::Grouped {
                    base_fg: add("proto.fg", &[m, d], lin, rng),
                    base_bg: add("proto.bg", &[m, d], lin, rng),
                    wq: add("attn.q", &[d, d], lin, rng),
                    wk: add("attn.k", &[d, d], lin, rng),
                    wv: add("attn.v", &[d, d], Init::Zeros, rng),
                    off_fg: (
                        add("offset.fg.w", &[d, m * d], Init::Zeros, rng),
                        add("offset.fg.b", &[m * d], Init::Zeros, rng),
                    ),
                    off_bg: (
                        add("offset.bg.w", &[d, m * d], Init::Zeros, rng),
                        add("offset.bg.b", &[m * d], Init::Zeros, rng),
                    ),
                }
            } else {
                Prototypes::Shared {
                    base: add("proto.shared", &[2 * m, d], lin, rng),
                    off: (
                        add("offset.shared.w", &[d, 2 * m * d], Init::Zeros, rng),
                        add("offset.shared.b", &[2 * m * d], Init::Zeros, rng),
                    ),
                }
            };
            Branch::Hypergraph(Hypergraph {
                protos,
                phi_e: (
                    add("phi_e.w", &[d, d], lin, rng),
                    add("phi_e.b", &[d], Init::Zeros, rng),
                ),
                phi_n: (
                    add("phi_n.w", &[d, d], Init::Zeros, rng),
                    add("phi_n.b", &[d], Init::Zeros, rng),
                ),
            })
        };
        Ok(UghrBlock {
            cfg,
            width,
            conv,
            branch,
        })
    }

    /// Local enhancement: two dilated 3×3 convs, each followed by ReLU.
    pub fn conv_branch(&self, tape: &mut Tape, vars: &[Var], d_tilde: Var) -> Result<Var> {
        let mut x = d_tilde;
        for (&(w, b), &dil) in self.conv.iter().zip(&self.cfg.dilations) {
            x = tape.conv2d(x, vars[w], Some(vars[b]), dil)?;
            x = tape.relu(x)?;
        }
        Ok(x)
    }

    /// `e_i = F^hg + F^conv`. `u_i` is required only with uncertainty
    /// guidance enabled.
    pub fn forward(
        &self,
        tape: &mut Tape,
        vars: &[Var],
        d_tilde: Var,
        m_i: Var,
        u_i: Option<Var>,
    ) -> Result<BlockOutput> {
        let (d, h, w) = dims(tape, d_tilde, "ughr block")?;
        if d != self.width {
            return Err(Error::shape("ughr block", format!("{d} channels, block width {}", self.width)));
        }
        let f_conv = self.conv_branch(tape, vars, d_tilde)?;
        let (f_hg, s, p, mce) = match &self.branch {
            Branch::Conv(cw, cb) => {
                let c = tape.conv2d(d_tilde, vars[*cw], Some(vars[*cb]), 1)?;
                (tape.add(d_tilde, c)?, None, None, MceStats::default())
            }
            Branch::Hypergraph(hg) => {
                let x = to_nodes(tape, d_tilde)?;
                let (p, mce) = match &hg.protos {
                    Prototypes::Grouped {
                        base_fg,
                        base_bg,
                        wq,
                        wk,
                        wv,
                        off_fg,
                        off_bg,
                    } => {
                        let (c_fg, c_bg, stats) = mce_contexts(tape, d_tilde, m_i)?;
                        let att = AttentionVars {
                            wq: vars[*wq],
                            wk: vars[*wk],
                            wv: vars[*wv],
                        };
                        let (c_fg, c_bg) = context_interact(tape, c_fg, c_bg, att)?;
                        let p = dynamic_prototypes(
                            tape,
                            vars[*base_fg],
                            vars[*base_bg],
                            c_fg,
                            c_bg,
                            (vars[off_fg.0], vars[off_fg.1]),
                            (vars[off_bg.0], vars[off_bg.1]),
                        )?;
                        (p, stats)
                    }
                    Prototypes::Shared { base, off } => {
                        let c = tape.reduce_mean(x, 0)?;
                        let p = offset_prototypes(tape, vars[*base], c, vars[off.0], vars[off.1])?;
                        (p, MceStats::default())
                    }
                };
                let u = if self.cfg.unc_guidance {
                    let u = u_i.ok_or_else(|| {
                        Error::Contract("uncertainty guidance enabled without an uncertainty map".into())
                    })?;
                    Some(tape.reshape(u, &[h * w])?)
                } else {
                    None
                };
                let s = participation(tape, x, p, u, self.cfg.beta)?;
                let xh = message_pass(
                    tape,
                    x,
                    s,
                    (vars[hg.phi_e.0], vars[hg.phi_e.1]),
                    (vars[hg.phi_n.0], vars[hg.phi_n.1]),
                )?;
                (from_nodes(tape, xh, h, w)?, Some(s), Some(p), mce)
            }
        };
        let e = tape.add(f_hg, f_conv)?;
        Ok(BlockOutput {
            e,
            f_hg,
            f_conv,
            s,
            p,
            mce,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn two_node_modulation_closed_form() {
        let (a, b) = (0.7_f64, -0.4_f64);
        let mut t = Tape::new();
        // with D = 1 and p = 1, z = x
        let x = t.constant(Tensor::new([2, 1], vec![a, b]).unwrap()).unwrap();
        let p = t.constant(Tensor::new([1, 1], vec![1.0]).unwrap()).unwrap();
        let u = t.constant(Tensor::new([2], vec![1.0, 0.0]).unwrap()).unwrap();
        let s = participation(&mut t, x, p, Some(u), 1.0).unwrap();
        let (ea, eb) = ((2.0 * a).exp(), b.exp());
        let got = t.value(s).data();
        assert!((got[0] - ea / (ea + eb)).abs() < 1e-12);
        assert!((got[1] - eb / (ea + eb)).abs() < 1e-12);
    }

    #[test]
    fn rejects_invalid_config() {
        assert!(BlockConfig { m: 0, ..Default::default() }.validate().is_err());
        assert!(BlockConfig { beta: -1.0, ..Default::default() }.validate().is_err());
    }
}
