//! Two-way attention between projected context rows and flattened image tokens.

use std::f64::consts::PI;

use diffcore::{Graph, ParamStore, Scalar, Tensor, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Linear, Norm};

pub const DEFAULT_TOKEN_CAP: usize = 131_072;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AlignConfig {
    pub blocks: usize,
    pub heads: usize,
    pub token_cap: usize,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self { blocks: 2, heads: 4, token_cap: DEFAULT_TOKEN_CAP }
    }
}

#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    heads: usize,
}

impl Attention {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize, heads: usize, zero_out: bool, rng: &mut impl Rng) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), c, c, rng),
            k: Linear::new(store, &format!("{name}.k"), c, c, rng),
            v: Linear::new(store, &format!("{name}.v"), c, c, rng),
            o: if zero_out { Linear::zeroed(store, &format!("{name}.o"), c, c) } else { Linear::new(store, &format!("{name}.o"), c, c, rng) },
            heads,
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, q: Var, k: Var, v: Var) -> Result<(Var, Probe)> {
        let q = self.q.forward(g, store, q)?;
        let k = self.k.forward(g, store, k)?;
        let v = self.v.forward(g, store, v)?;
        let keys = g.shape(k)[1];
        let a = g.attention(q, k, v, self.heads, false)?;
        Ok((self.o.forward(g, store, a)?, Probe { node: a, keys }))
    }
}

/// An attention node on the tape and its key count; its cached weights form
/// rows of length `keys`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Probe {
    pub node: Var,
    pub keys: usize,
}

#[derive(Clone, Debug)]
pub struct TwoWayBlock {
    pub self_attn: Attention,
    ln1: Norm,
    pub ctx_to_img: Attention,
    ln2: Norm,
    fc1: Linear,
    fc2: Linear,
    ln3: Norm,
    pub img_to_ctx: Attention,
}

impl TwoWayBlock {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, c: usize, heads: usize, rng: &mut impl Rng) -> Self {
        let n = |s: &str| format!("{name}.{s}");
        Self {
            self_attn: Attention::new(store, &n("self"), c, heads, false, rng),
            ln1: Norm::new(store, &n("ln1"), c),
            ctx_to_img: Attention::new(store, &n("ctx_img"), c, heads, false, rng),
            ln2: Norm::new(store, &n("ln2"), c),
            fc1: Linear::new(store, &n("fc1"), c, 2 * c, rng),
            fc2: Linear::new(store, &n("fc2"), 2 * c, c, rng),
            ln3: Norm::new(store, &n("ln3"), c),
            img_to_ctx: Attention::new(store, &n("img_ctx"), c, heads, true, rng),
        }
    }

    /// `ctx: (B, N, C)`, `img: (B, P, C)`, `pe: (P, C)`.
    fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, ctx: Var, img: Var, pe: Var, probes: &mut Vec<Probe>) -> Result<(Var, Var)> {
        let (a, w) = self.self_attn.forward(g, store, ctx, ctx, ctx)?;
        probes.push(w);
        let ctx = g.add(ctx, a)?;
        let ctx = self.ln1.layer(g, store, ctx)?;

        let keyed = g.add(img, pe)?;
        let (a, w) = self.ctx_to_img.forward(g, store, ctx, keyed, img)?;
        probes.push(w);
        let ctx = g.add(ctx, a)?;
        let ctx = self.ln2.layer(g, store, ctx)?;

        let m = self.fc1.forward(g, store, ctx)?;
        let m = g.relu(m)?;
        let m = self.fc2.forward(g, store, m)?;
        let ctx = g.add(ctx, m)?;
        let ctx = self.ln3.layer(g, store, ctx)?;

        let (a, w) = self.img_to_ctx.forward(g, store, keyed, ctx, ctx)?;
        probes.push(w);
        let img = g.add(img, a)?;
        Ok((ctx, img))
    }
}

/// Projection plus two-way blocks for one encoder level.
#[derive(Clone, Debug)]
pub struct LevelAlign {
    pub proj: Linear,
    pub blocks: Vec<TwoWayBlock>,
    pub channels: usize,
}

/// Fixed sinusoidal code for an `h×w×s` token grid: a third of the channels per
/// axis (rounded down to even), sin/cos pairs at frequencies `π·2^j` of the
/// cell-centre coordinate in `(0, 1)`, zero in leftover channels.
pub fn positional_encoding<T: Scalar>(dims: [usize; 3], c: usize) -> Tensor<T> {
    let per = (c / 3) & !1;
    let mut out = vec![T::zero(); dims.iter().product::<usize>() * c];
    let mut p = 0;
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for k in 0..dims[2] {
                let coord = [i, j, k];
                let row = &mut out[p * c..(p + 1) * c];
                for axis in 0..3 {
                    let x = (coord[axis] as f64 + 0.5) / dims[axis] as f64;
                    for f in 0..per / 2 {
                        let ang = PI * 2f64.powi(f as i32) * x;
                        row[axis * per + 2 * f] = T::from_f64_lossy(ang.sin());
                        row[axis * per + 2 * f + 1] = T::from_f64_lossy(ang.cos());
                    }
                }
                p += 1;
            }
        }
    }
    Tensor::new(&[p, c], out).expect("sized above")
}

impl LevelAlign {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, level: usize, dim: usize, c: usize, cfg: AlignConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.heads == 0 || c % cfg.heads != 0 {
            return Err(Error::Config(format!("level {level} width {c} is not divisible by {} attention heads", cfg.heads)));
        }
        let name = format!("align.level{level}");
        Ok(Self {
            proj: Linear::new(store, &format!("{name}.proj"), dim, c, rng),
            blocks: (0..cfg.blocks).map(|t| TwoWayBlock::new(store, &format!("{name}.block{t}"), c, cfg.heads, rng)).collect(),
            channels: c,
        })
    }

    /// `g: (B, N, D)` → `(B, N, C_l)`.
    pub fn project_context<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, ctx: Var) -> Result<Var> {
        self.proj.forward(g, store, ctx)
    }

    /// Runs the blocks on `f: (B, C, H, W, S)` and returns `f*` of the same
    /// shape, plus the attention nodes visited.
    pub fn interact<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, f: Var, ctx: Var, token_cap: usize) -> Result<(Var, Vec<Probe>)> {
        let s = g.shape(f).to_vec();
        if s.len() != 5 || s[1] != self.channels {
            return Err(Error::Contract(format!("alignment expects (B, {}, H, W, S) features, got {s:?}", self.channels)));
        }
        let (b, c) = (s[0], s[1]);
        let tokens = s[2] * s[3] * s[4];
        if tokens > token_cap {
            return Err(Error::Capacity(format!(
                "{tokens} image tokens exceed the alignment cap of {token_cap}; use a smaller patch or align only the deepest levels"
            )));
        }
        let flat = g.reshape(f, &[b, c, tokens])?;
        let mut img = g.permute(flat, &[0, 2, 1])?;
        let pe = g.constant(positional_encoding([s[2], s[3], s[4]], c));
        let mut ctx = ctx;
        let mut probes = Vec::new();
        for block in &self.blocks {
            (ctx, img) = block.forward(g, store, ctx, img, pe, &mut probes)?;
        }
        let back = g.permute(img, &[0, 2, 1])?;
        Ok((g.reshape(back, &s)?, probes))
    }
}

/// Per-level alignment; `None` levels pass their features through unchanged.
#[derive(Clone, Debug)]
pub struct Alignment {
    pub levels: Vec<Option<LevelAlign>>,
    pub config: AlignConfig,
}

impl Alignment {
    /// Aligns the deepest `deepest` levels (all when `None`).
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, dim: usize, channels: &[usize], deepest: Option<usize>, cfg: AlignConfig, rng: &mut impl Rng) -> Result<Self> {
        let k = deepest.unwrap_or(channels.len());
        if k == 0 || k > channels.len() {
            return Err(Error::Config(format!("cannot align the deepest {k} of {} levels", channels.len())));
        }
        let levels = channels
            .iter()
            .enumerate()
            .map(|(l, &c)| if l + k >= channels.len() { LevelAlign::new(store, l, dim, c, cfg, rng).map(Some) } else { Ok(None) })
            .collect::<Result<_>>()?;
        Ok(Self { levels, config: cfg })
    }

    /// `f*` for every level given context `(B, N, D)`.
    pub fn align_all<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, feats: &[Var], ctx: Var) -> Result<Vec<Var>> {
        Ok(self.align_all_probed(g, store, feats, ctx)?.0)
    }

    pub fn align_all_probed<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, feats: &[Var], ctx: Var) -> Result<(Vec<Var>, Vec<Probe>)> {
        if feats.len() != self.levels.len() {
            return Err(Error::Contract(format!("{} feature levels for {} alignment levels", feats.len(), self.levels.len())));
        }
        let mut out = Vec::with_capacity(feats.len());
        let mut probes = Vec::new();
        for (level, &f) in self.levels.iter().zip(feats) {
            match level {
                Some(a) => {
                    let bar = a.project_context(g, store, ctx)?;
                    let (fs, p) = a.interact(g, store, f, bar, self.config.token_cap)?;
                    out.push(fs);
                    probes.extend(p);
                }
                None => out.push(f),
            }
        }
        Ok((out, probes))
    }
}
