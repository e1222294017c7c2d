//! Full segmentation model over its five variants.

use std::fmt;
use std::str::FromStr;

use diffcore::{Graph, ParamStore, Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::align::{AlignConfig, Alignment, Probe};
use crate::error::{Error, Result};
use crate::phantom::{ClinicalRecord, Field};
use crate::textenc::{DigitEmbedding, FrozenLm, LmConfig, PromptBank, TextEncoder, Vocabulary};
use crate::volnet::VolNet;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    Multimodal,
    VisionOnly,
    NumericCategory,
    SinglePrompt,
    NoTuning,
}

impl Variant {
    pub const ALL: [Variant; 5] = [Variant::Multimodal, Variant::VisionOnly, Variant::NumericCategory, Variant::SinglePrompt, Variant::NoTuning];

    pub fn key(self) -> &'static str {
        match self {
            Variant::Multimodal => "multimodal",
            Variant::VisionOnly => "vision-only",
            Variant::NumericCategory => "numeric-category",
            Variant::SinglePrompt => "single-prompt",
            Variant::NoTuning => "no-tuning",
        }
    }

    /// Whether the variant reads a frozen language model.
    pub fn uses_lm(self) -> bool {
        matches!(self, Variant::Multimodal | Variant::SinglePrompt | Variant::NoTuning)
    }

    pub fn uses_context(self) -> bool {
        self != Variant::VisionOnly
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL.into_iter().find(|v| v.key() == s).ok_or_else(|| {
            Error::Config(format!("unknown variant '{s}'; expected one of multimodal, vision-only, numeric-category, single-prompt, no-tuning"))
        })
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub channels: Vec<usize>,
    pub prompts: usize,
    pub prompt_len: usize,
    pub lm: LmConfig,
    pub align: AlignConfig,
    /// Align only this many of the deepest levels; `None` aligns all.
    pub align_levels: Option<usize>,
}

impl ModelConfig {
    pub fn new(variant: Variant, channels: Vec<usize>) -> Self {
        let vocab = Vocabulary::clinical().len();
        let (prompts, prompt_len) = match variant {
            Variant::SinglePrompt => (1, 8),
            Variant::NoTuning => (1, 0),
            _ => (4, 8),
        };
        Self { variant, channels, prompts, prompt_len, lm: LmConfig::small(vocab), align: AlignConfig::default(), align_levels: None }
    }

    pub fn validate(&self) -> Result<()> {
        match self.variant {
            Variant::NoTuning if self.prompt_len > 0 => {
                return Err(Error::Config(format!("no-tuning forbids prompts, got prompt_len = {}", self.prompt_len)))
            }
            Variant::SinglePrompt if self.prompts != 1 => {
                return Err(Error::Config(format!("single-prompt requires prompts = 1, got {}", self.prompts)))
            }
            Variant::Multimodal | Variant::SinglePrompt if self.prompts == 0 || self.prompt_len == 0 => {
                return Err(Error::Config("prompt tuning needs prompts ≥ 1 and prompt_len ≥ 1".into()))
            }
            _ => {}
        }
        if self.lm.dim % self.lm.heads != 0 {
            return Err(Error::Config(format!("language model width {} is not divisible by {} heads", self.lm.dim, self.lm.heads)));
        }
        Ok(())
    }
}

/// What the model is told about a case.
pub fn render_record(variant: Variant, record: &ClinicalRecord, omitted: &[Field]) -> String {
    match variant {
        Variant::NumericCategory => record.render_numeric(omitted),
        _ => record.render_text(omitted),
    }
}

#[derive(Clone, Debug)]
pub struct SegModel<T: Scalar> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub text: Option<TextEncoder>,
    pub digits: Option<DigitEmbedding>,
    pub net: VolNet,
    pub align: Option<Alignment>,
}

impl<T: Scalar> SegModel<T> {
    /// Fresh parameters from `seed`; the language model starts random and frozen
    /// until [`SegModel::load_lm`] copies pretrained weights in.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let dim = config.lm.dim;
        let text = if config.variant.uses_lm() {
            let lm = FrozenLm::new(&mut store, config.lm, &mut rng);
            lm.freeze(&mut store, true);
            let prompts = (config.prompt_len > 0).then(|| PromptBank::new(&mut store, config.prompts, config.prompt_len, dim, &mut rng));
            Some(TextEncoder { vocab: Vocabulary::clinical(), lm, prompts })
        } else {
            None
        };
        let digits = (config.variant == Variant::NumericCategory).then(|| DigitEmbedding::new(&mut store, dim, &mut rng));
        let net = VolNet::new(&mut store, &config.channels, &mut rng)?;
        let align = if config.variant.uses_context() {
            Some(Alignment::new(&mut store, dim, &config.channels, config.align_levels, config.align, &mut rng)?)
        } else {
            None
        };
        Ok(Self { config, store, text, digits, net, align })
    }

    pub fn load_lm(&mut self, lm: &FrozenLm, weights: &ParamStore<f32>) -> Result<()> {
        let Some(text) = &self.text else { return Ok(()) };
        let cast: ParamStore<T> = weights.cast();
        text.lm.copy_from(&mut self.store, lm, &cast)
    }

    pub fn render(&self, record: &ClinicalRecord, omitted: &[Field]) -> String {
        render_record(self.config.variant, record, omitted)
    }

    /// Context rows for one rendered record, `(N, D)`; `None` for vision-only.
    pub fn context(&self, g: &mut Graph<T>, text: &str) -> Result<Option<Var>> {
        if let Some(enc) = &self.text {
            return enc.encode(g, &self.store, text).map(Some);
        }
        if let Some(d) = &self.digits {
            return d.encode(g, &self.store, text).map(Some);
        }
        Ok(None)
    }

    /// Context values detached from any tape, for reuse across windows.
    pub fn context_value(&self, text: &str) -> Result<Option<Tensor<T>>> {
        let mut g = Graph::new();
        Ok(self.context(&mut g, text)?.map(|v| g.value(v).clone()))
    }

    /// Stacks per-case context rows into `(B, N, D)`.
    pub fn batch_context(&self, g: &mut Graph<T>, rows: &[Var]) -> Result<Var> {
        let mut parts = Vec::with_capacity(rows.len());
        for &r in rows {
            let s = g.shape(r).to_vec();
            parts.push(g.reshape(r, &[1, s[0], s[1]])?);
        }
        Ok(if parts.len() == 1 { parts[0] } else { g.concat(&parts, 0)? })
    }

    /// Logits `(B, 1, H, W, S)` for `x: (B, 1, H, W, S)` and context `(B, N, D)`.
    pub fn forward_with_context(&self, g: &mut Graph<T>, x: Var, ctx: Option<Var>) -> Result<Var> {
        Ok(self.forward_probed(g, x, ctx)?.0)
    }

    pub fn forward_probed(&self, g: &mut Graph<T>, x: Var, ctx: Option<Var>) -> Result<(Var, Vec<Probe>)> {
        let feats = self.net.encode(g, &self.store, x)?;
        let (aligned, probes) = match (&self.align, ctx) {
            (Some(a), Some(c)) => a.align_all_probed(g, &self.store, &feats, c)?,
            (None, _) => (feats, Vec::new()),
            (Some(_), None) => return Err(Error::Contract(format!("{} model needs clinical context", self.config.variant))),
        };
        Ok((self.net.decode(g, &self.store, &aligned)?, probes))
    }

    /// End-to-end forward with one rendered record per batch element.
    pub fn forward(&self, g: &mut Graph<T>, x: Var, texts: &[String]) -> Result<Var> {
        let batch = g.shape(x)[0];
        if texts.len() != batch {
            return Err(Error::Contract(format!("{} records for a batch of {batch}", texts.len())));
        }
        let ctx = if self.config.variant.uses_context() {
            let rows = texts.iter().map(|t| self.context(g, t).map(|c| c.expect("context variant"))).collect::<Result<Vec<_>>>()?;
            Some(self.batch_context(g, &rows)?)
        } else {
            None
        };
        self.forward_with_context(g, x, ctx)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::objective::partition_params;

    fn input(dims: [usize; 3], seed: u64) -> Tensor<f64> {
        Tensor::uniform(&[1, 1, dims[0], dims[1], dims[2]], 0.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    fn logits(m: &SegModel<f64>, x: &Tensor<f64>, text: &str) -> Tensor<f64> {
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let y = m.forward(&mut g, xv, &[text.to_string()]).unwrap();
        g.value(y).clone()
    }

    #[test]
    fn variant_names_round_trip() {
        for v in Variant::ALL {
            assert_eq!(v.key().parse::<Variant>().unwrap(), v);
        }
        assert!("bimodal".parse::<Variant>().is_err());
    }

    #[test]
    fn config_consistency() {
        let mut c = ModelConfig::new(Variant::NoTuning, vec![4, 8]);
        c.prompt_len = 3;
        assert!(matches!(SegModel::<f64>::new(c, 0), Err(Error::Config(_))));
        let mut c = ModelConfig::new(Variant::SinglePrompt, vec![4, 8]);
        c.prompts = 2;
        assert!(c.validate().is_err());
    }

    #[test]
    fn partitions_per_variant() {
        for v in Variant::ALL {
            let m = SegModel::<f64>::new(ModelConfig::new(v, vec![4, 8]), 1).unwrap();
            let p = partition_params(&m.store).unwrap();
            assert_eq!(p.trainable.len() + p.frozen.len(), m.store.len());
            assert_eq!(!p.frozen.is_empty(), v.uses_lm(), "{v}");
            let has = |prefix: &str| m.store.iter().any(|(_, q)| q.name.starts_with(prefix));
            assert_eq!(has("prompt."), matches!(v, Variant::Multimodal | Variant::SinglePrompt), "{v}");
            assert_eq!(has("digits."), v == Variant::NumericCategory, "{v}");
            assert_eq!(has("align."), v != Variant::VisionOnly, "{v}");
        }
    }

    #[test]
    fn neutral_alignment_matches_vision_only() {
        let full = SegModel::<f64>::new(ModelConfig::new(Variant::Multimodal, vec![4, 8]), 7).unwrap();
        let mut vision = SegModel::<f64>::new(ModelConfig::new(Variant::VisionOnly, vec![4, 8]), 8).unwrap();
        for (id, p) in vision.store.iter().map(|(id, p)| (id, p.name.clone())).collect::<Vec<_>>() {
            let src = full.store.find(&p).unwrap();
            vision.store.get_mut(id).value = full.store.value(src).clone();
        }
        let x = input([4, 4, 2], 3);
        let text = ClinicalRecord::sample(1).render_text(&[]);
        assert_eq!(logits(&full, &x, &text).data(), logits(&vision, &x, "").data());
    }

    #[test]
    fn vision_only_ignores_text() {
        let m = SegModel::<f64>::new(ModelConfig::new(Variant::VisionOnly, vec![4, 8]), 2).unwrap();
        let x = input([4, 4, 2], 1);
        assert!(logits(&m, &x, "t1 n0 m0 cancer in the left breast.").bitwise_eq(&logits(&m, &x, "t4 n2 m0 cancer in the right breast.")));
    }

    #[test]
    fn prompt_gradient_flows_only_through_alignment() {
        let mut m = SegModel::<f64>::new(ModelConfig::new(Variant::Multimodal, vec![4, 8]), 4).unwrap();
        // open the residual path so text reaches the logits
        let names: Vec<_> = m.store.iter().filter(|(_, p)| p.name.contains("img_ctx.o.w")).map(|(id, _)| id).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for id in &names {
            let shape = m.store.value(*id).shape().to_vec();
            m.store.get_mut(*id).value = Tensor::randn(&shape, 0.3, &mut rng);
        }
        let prompt = m.text.as_ref().unwrap().prompts.as_ref().unwrap().id;
        let x = input([4, 4, 2], 5);
        let text = ClinicalRecord::sample(3).render_text(&[]);
        let grad = |m: &SegModel<f64>| {
            let mut g = Graph::new();
            let xv = g.input(x.clone());
            let y = m.forward(&mut g, xv, &[text.clone()]).unwrap();
            let l = g.mean(y).unwrap();
            let grads = g.backward(l).unwrap();
            assert!(m.text.as_ref().unwrap().lm.param_ids().iter().all(|&id| grads.param(id).is_none()));
            grads.param(prompt).map(|t| t.data().iter().any(|&v| v != 0.0)).unwrap_or(false)
        };
        assert!(grad(&m));
        for level in m.align.as_ref().unwrap().levels.iter().flatten() {
            m.store.get_mut(level.proj.w).value.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        assert!(!grad(&m));
    }

    #[test]
    fn numeric_variant_runs() {
        let m = SegModel::<f64>::new(ModelConfig::new(Variant::NumericCategory, vec![4, 8]), 5).unwrap();
        let r = ClinicalRecord::sample(9);
        let code = m.render(&r, &[Field::TStage]);
        assert_eq!(code.len(), 4);
        let y = logits(&m, &input([4, 4, 2], 0), &code);
        assert_eq!(y.shape(), &[1, 1, 4, 4, 2]);
    }
}
