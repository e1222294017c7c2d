//! 3D residual U-Net: per-level encoder features and a decoder over aligned skips.

use diffcore::{Graph, ParamId, ParamStore, Scalar, Var};
use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{Conv, Norm};

pub const LEAKY_SLOPE: f64 = 0.01;

/// Two 3³ convolutions with instance norm and a residual add; a 1³ projection
/// carries the skip when widths differ.
#[derive(Clone, Debug)]
pub struct ResBlock {
    c1: Conv,
    n1: Norm,
    c2: Conv,
    n2: Norm,
    proj: Option<Conv>,
}

impl ResBlock {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, rng: &mut impl Rng) -> Self {
        Self {
            c1: Conv::new(store, &format!("{name}.c1"), cin, cout, 3, 1, false, rng),
            n1: Norm::new(store, &format!("{name}.n1"), cout),
            c2: Conv::new(store, &format!("{name}.c2"), cout, cout, 3, 1, false, rng),
            n2: Norm::new(store, &format!("{name}.n2"), cout),
            proj: (cin != cout).then(|| Conv::new(store, &format!("{name}.proj"), cin, cout, 1, 1, true, rng)),
        }
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let h = self.c1.forward(g, store, x)?;
        let h = self.n1.instance(g, store, h)?;
        let h = g.leaky_relu(h, LEAKY_SLOPE)?;
        let h = self.c2.forward(g, store, h)?;
        let h = self.n2.instance(g, store, h)?;
        let skip = match &self.proj {
            Some(p) => p.forward(g, store, x)?,
            None => x,
        };
        let s = g.add(h, skip)?;
        Ok(g.leaky_relu(s, LEAKY_SLOPE)?)
    }
}

#[derive(Clone, Debug)]
struct EncoderLevel {
    entry: Conv,
    norm: Norm,
    block: ResBlock,
}

#[derive(Clone, Debug)]
struct DecoderLevel {
    up: Conv,
    block: ResBlock,
}

#[derive(Clone, Debug)]
pub struct VolNet {
    pub channels: Vec<usize>,
    encoder: Vec<EncoderLevel>,
    decoder: Vec<DecoderLevel>,
    head: Conv,
}

impl VolNet {
    /// One encoder level per channel entry; level 0 runs at full resolution.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, channels: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if channels.is_empty() || channels.contains(&0) {
            return Err(Error::Config(format!("channel schedule {channels:?} must be non-empty and positive")));
        }
        let mut encoder = Vec::new();
        for (l, &c) in channels.iter().enumerate() {
            let (cin, stride) = if l == 0 { (1, 1) } else { (channels[l - 1], 2) };
            encoder.push(EncoderLevel {
                entry: Conv::new(store, &format!("unet.enc{l}.entry"), cin, c, 3, stride, false, rng),
                norm: Norm::new(store, &format!("unet.enc{l}.norm"), c),
                block: ResBlock::new(store, &format!("unet.enc{l}.block"), c, c, rng),
            });
        }
        let mut decoder = Vec::new();
        for l in (0..channels.len() - 1).rev() {
            let c = channels[l];
            decoder.push(DecoderLevel {
                up: Conv::transposed(store, &format!("unet.dec{l}.up"), channels[l + 1], c, rng),
                block: ResBlock::new(store, &format!("unet.dec{l}.block"), 2 * c, c, rng),
            });
        }
        let head = Conv::new(store, "unet.head", channels[0], 1, 1, 1, true, rng);
        Ok(Self { channels: channels.to_vec(), encoder, decoder, head })
    }

    pub fn levels(&self) -> usize {
        self.channels.len()
    }

    /// Spatial dims must halve cleanly down to the deepest level.
    pub fn check_dims(&self, dims: [usize; 3]) -> Result<()> {
        let f = 1 << (self.levels() - 1);
        if dims.iter().any(|&d| d == 0 || d % f != 0) {
            return Err(Error::Config(format!("patch {dims:?} is not divisible by {f} for a {}-level network", self.levels())));
        }
        Ok(())
    }

    /// `x: (B, 1, H, W, S)` → features `f_l: (B, C_l, H/2^l, W/2^l, S/2^l)`.
    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Vec<Var>> {
        let s = g.shape(x).to_vec();
        if s.len() != 5 || s[1] != 1 {
            return Err(Error::Contract(format!("network input must be (B, 1, H, W, S), got {s:?}")));
        }
        self.check_dims([s[2], s[3], s[4]])?;
        let mut feats = Vec::with_capacity(self.levels());
        let mut h = x;
        for level in &self.encoder {
            h = level.entry.forward(g, store, h)?;
            h = level.norm.instance(g, store, h)?;
            h = g.leaky_relu(h, LEAKY_SLOPE)?;
            h = level.block.forward(g, store, h)?;
            feats.push(h);
        }
        Ok(feats)
    }

    /// Aligned skips, shallowest first → logits `(B, 1, H, W, S)`.
    pub fn decode<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, aligned: &[Var]) -> Result<Var> {
        if aligned.len() != self.levels() {
            return Err(Error::Contract(format!("decoder expects {} aligned features, got {}", self.levels(), aligned.len())));
        }
        let mut h = aligned[self.levels() - 1];
        for (level, &skip) in self.decoder.iter().zip(aligned.iter().rev().skip(1)) {
            let up = level.up.forward(g, store, h)?;
            let cat = g.concat(&[up, skip], 1)?;
            h = level.block.forward(g, store, cat)?;
        }
        self.head.forward(g, store, h)
    }

    pub fn param_ids<T: Scalar>(store: &ParamStore<T>) -> Vec<ParamId> {
        store.iter().filter(|(_, p)| p.name.starts_with("unet.")).map(|(id, _)| id).collect()
    }
}
