//! Word tokenizer, small causal language model, learnable prompts and the
//! prompted-sequence encoder that turns a clinical sentence into context rows.

use std::collections::HashMap;
use std::io::Write as _;
use std::path::Path;

use diffcore::{Graph, ParamId, ParamStore, Scalar, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Linear, Norm};
use crate::objective::AdamW;
use crate::phantom::{ClinicalRecord, Field, Laterality, NStage, Surgery, TStage, AGE_RANGE};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const SEG: &str = "[SEG]";

/// Bijective token table. Ids 0, 1, 2 are `[PAD]`, `[UNK]`, `[SEG]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("vocabulary repeats token '{t}'")));
            }
        }
        for (i, special) in [PAD, UNK, SEG].iter().enumerate() {
            if index.get(*special) != Some(&i) {
                return Err(Error::Data(format!("vocabulary must start with {PAD}, {UNK}, {SEG}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Every word the record template can produce, sorted, after the specials.
    pub fn clinical() -> Self {
        let mut words: Vec<String> = Vec::new();
        let mut sentences = Vec::new();
        for lat in [Laterality::Left, Laterality::Right] {
            for t in TStage::ALL {
                for n in NStage::ALL {
                    for s in [Surgery::BreastConserving, Surgery::Mastectomy] {
                        sentences.push(ClinicalRecord::new(lat, t, n, s, *AGE_RANGE.start()).render_text(&[]));
                    }
                }
            }
        }
        sentences.extend(AGE_RANGE.map(|a| format!("age {a}")));
        for s in &sentences {
            words.extend(words_of(s));
        }
        words.sort();
        words.dedup();
        let tokens = [PAD, UNK, SEG].iter().map(|s| s.to_string()).chain(words).collect();
        Self::from_tokens(tokens).expect("template words are not special tokens")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn pad(&self) -> usize {
        0
    }

    pub fn unk(&self) -> usize {
        1
    }

    pub fn seg(&self) -> usize {
        2
    }

    /// Lowercased words with punctuation stripped; unknown words become `[UNK]`.
    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        let ids: Vec<usize> = words_of(text).map(|w| self.id(&w).unwrap_or(self.unk())).collect();
        if ids.is_empty() {
            return Err(Error::Data("clinical text is empty".into()));
        }
        Ok(ids)
    }

    /// One token per line; line number is the id.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }
}

fn words_of(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).map(str::to_lowercase)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LmConfig {
    pub layers: usize,
    pub dim: usize,
    pub heads: usize,
    pub vocab: usize,
}

/// Positional capacity of the language model.
pub const LM_CAPACITY: usize = 64;

impl LmConfig {
    pub fn small(vocab: usize) -> Self {
        Self { layers: 2, dim: 64, heads: 4, vocab }
    }
}

#[derive(Clone, Debug)]
struct LmBlock {
    ln1: Norm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: Norm,
    fc1: Linear,
    fc2: Linear,
}

/// Pre-norm causal transformer with learned positions and a tied output head.
#[derive(Clone, Debug)]
pub struct FrozenLm {
    pub config: LmConfig,
    tok: ParamId,
    pos: ParamId,
    blocks: Vec<LmBlock>,
    lnf: Norm,
}

impl FrozenLm {
    /// Registers fresh parameters under `lm.` in declaration order.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, config: LmConfig, rng: &mut impl Rng) -> Self {
        let d = config.dim;
        let tok = store.add("lm.tok", Tensor::randn(&[config.vocab, d], 0.02, rng));
        let pos = store.add("lm.pos", Tensor::randn(&[LM_CAPACITY, d], 0.02, rng));
        let blocks = (0..config.layers)
            .map(|l| {
                let n = |s: &str| format!("lm.block{l}.{s}");
                LmBlock {
                    ln1: Norm::new(store, &n("ln1"), d),
                    q: Linear::new(store, &n("q"), d, d, rng),
                    k: Linear::new(store, &n("k"), d, d, rng),
                    v: Linear::new(store, &n("v"), d, d, rng),
                    o: Linear::new(store, &n("o"), d, d, rng),
                    ln2: Norm::new(store, &n("ln2"), d),
                    fc1: Linear::new(store, &n("fc1"), d, 4 * d, rng),
                    fc2: Linear::new(store, &n("fc2"), 4 * d, d, rng),
                }
            })
            .collect();
        let lnf = Norm::new(store, "lm.lnf", d);
        Self { config, tok, pos, blocks, lnf }
    }

    /// Parameter ids in declaration order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.tok, self.pos];
        for b in &self.blocks {
            ids.extend([b.ln1.gamma, b.ln1.beta]);
            for l in [&b.q, &b.k, &b.v, &b.o] {
                ids.extend(l.ids());
            }
            ids.extend([b.ln2.gamma, b.ln2.beta]);
            ids.extend(b.fc1.ids());
            ids.extend(b.fc2.ids());
        }
        ids.extend([self.lnf.gamma, self.lnf.beta]);
        ids
    }

    pub fn freeze<T: Scalar>(&self, store: &mut ParamStore<T>, frozen: bool) {
        for id in self.param_ids() {
            store.set_frozen(id, frozen);
        }
    }

    pub fn snapshot<T: Scalar>(&self, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        self.param_ids().into_iter().map(|id| store.value(id).clone()).collect()
    }

    /// Copies values from another store holding the same architecture.
    pub fn copy_from<T: Scalar>(&self, store: &mut ParamStore<T>, src: &FrozenLm, src_store: &ParamStore<T>) -> Result<()> {
        if self.config != src.config {
            return Err(Error::Contract(format!("language model {:?} cannot load {:?}", self.config, src.config)));
        }
        for (dst, s) in self.param_ids().into_iter().zip(src.param_ids()) {
            store.get_mut(dst).value = src_store.value(s).clone();
        }
        Ok(())
    }

    /// Embedding rows of `ids`, shape `(len, D)`.
    pub fn embed<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, ids: &[usize]) -> Result<Var> {
        let tok = g.param(store, self.tok);
        Ok(g.gather(tok, ids)?)
    }

    /// Final-norm hidden states for input embeddings `(B, L, D)`.
    pub fn hidden<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let len = g.shape(x)[1];
        if len > LM_CAPACITY {
            return Err(Error::Capacity(format!("sequence of {len} tokens exceeds the language model capacity {LM_CAPACITY}")));
        }
        let pos = g.param(store, self.pos);
        let pos = g.slice(pos, 0, 0, len)?;
        let mut h = g.add(x, pos)?;
        for b in &self.blocks {
            let a = b.ln1.layer(g, store, h)?;
            let q = b.q.forward(g, store, a)?;
            let k = b.k.forward(g, store, a)?;
            let v = b.v.forward(g, store, a)?;
            let att = g.attention(q, k, v, self.config.heads, true)?;
            let o = b.o.forward(g, store, att)?;
            h = g.add(h, o)?;
            let m = b.ln2.layer(g, store, h)?;
            let m = b.fc1.forward(g, store, m)?;
            let m = g.relu(m)?;
            let m = b.fc2.forward(g, store, m)?;
            h = g.add(h, m)?;
        }
        self.lnf.layer(g, store, h)
    }

    /// Next-token log-probabilities `(B, L, V)` through the tied embedding.
    pub fn log_probs<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, hidden: Var) -> Result<Var> {
        let tok = g.param(store, self.tok);
        let head = g.permute(tok, &[1, 0])?;
        let logits = g.matmul(hidden, head)?;
        Ok(g.log_softmax(logits)?)
    }

    /// `[SEG]` hidden state of the plain text, without prompts: `(1, D)`.
    pub fn seg_embedding<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, vocab: &Vocabulary, tokens: &[usize]) -> Result<Var> {
        let mut ids = tokens.to_vec();
        ids.push(vocab.seg());
        let e = self.embed(g, store, &ids)?;
        let e = g.reshape(e, &[1, ids.len(), self.config.dim])?;
        let h = self.hidden(g, store, e)?;
        let last = g.slice(h, 1, ids.len() - 1, 1)?;
        Ok(g.reshape(last, &[1, self.config.dim])?)
    }

    /// Little-endian `CLM1` file: header `(L, D, H, V)` as u32, then every
    /// parameter in declaration order as f32.
    pub fn write_checkpoint<T: Scalar>(&self, store: &ParamStore<T>, path: &Path) -> Result<()> {
        let mut out = Vec::new();
        out.extend_from_slice(b"CLM1");
        for v in [self.config.layers, self.config.dim, self.config.heads, self.config.vocab] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for id in self.param_ids() {
            for &x in store.value(id).data() {
                out.extend_from_slice(&(x.to_f64_lossy() as f32).to_le_bytes());
            }
        }
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }

    /// Reads a `CLM1` file into a fresh store; all parameters come back frozen.
    pub fn read_checkpoint<T: Scalar>(path: &Path) -> Result<(Self, ParamStore<T>)> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let fmt = |offset: usize, msg: String| Error::Format { offset: offset as u64, msg };
        if bytes.len() < 4 || &bytes[..4] != b"CLM1" {
            return Err(fmt(0, "bad language model magic".into()));
        }
        if bytes.len() < 20 {
            return Err(fmt(bytes.len(), "truncated language model header".into()));
        }
        let u = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as usize;
        let config = LmConfig { layers: u(4), dim: u(8), heads: u(12), vocab: u(16) };
        if config.dim == 0 || config.heads == 0 || config.dim % config.heads != 0 || config.vocab < 3 {
            return Err(fmt(4, format!("inconsistent language model header {config:?}")));
        }
        let mut store = ParamStore::new();
        let lm = FrozenLm::new(&mut store, config, &mut ChaCha8Rng::seed_from_u64(0));
        let mut off = 20;
        for id in lm.param_ids() {
            let n = store.value(id).len();
            if bytes.len() < off + 4 * n {
                return Err(fmt(bytes.len(), format!("truncated parameter blob '{}'", store.get(id).name)));
            }
            let data = store.get_mut(id).value.data_mut();
            for (i, x) in data.iter_mut().enumerate() {
                let o = off + 4 * i;
                *x = T::from_f64_lossy(f32::from_le_bytes(bytes[o..o + 4].try_into().unwrap()) as f64);
            }
            off += 4 * n;
        }
        if off != bytes.len() {
            return Err(fmt(off, format!("{} trailing bytes", bytes.len() - off)));
        }
        lm.freeze(&mut store, true);
        Ok((lm, store))
    }
}

/// True iff both snapshots are bitwise identical.
pub fn assert_frozen<T: Scalar>(before: &[Tensor<T>], after: &[Tensor<T>]) -> bool {
    before.len() == after.len() && before.iter().zip(after).all(|(a, b)| a.bitwise_eq(b))
}

pub const PRETRAIN_SENTENCES: usize = 10_000;
pub const PRETRAIN_STEPS: usize = 2_000;
const PRETRAIN_BATCH: usize = 16;
const PRETRAIN_LR: f64 = 1e-3;

/// One pretraining document: a clinical sentence with randomly omitted fields,
/// the present fields restated in a fixed order (laterality first), and the
/// class of each clinical field, 0 when omitted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PretrainDoc {
    pub note: String,
    pub summary: String,
    pub classes: [usize; 4],
}

/// Class counts of laterality, T stage, N stage and surgery, absent included.
pub const FIELD_CLASSES: [usize; 4] = [3, 5, 4, 3];

fn field_classes(r: &ClinicalRecord) -> [usize; 4] {
    [
        r.laterality.map_or(0, |l| 1 + (l == Laterality::Right) as usize),
        r.t_stage.map_or(0, |t| t.number() as usize),
        r.n_stage.map_or(0, |n| 1 + n.number() as usize),
        r.surgery.map_or(0, |s| 1 + (s == Surgery::Mastectomy) as usize),
    ]
}

pub fn pretraining_corpus(n: usize, seed: u64) -> Vec<PretrainDoc> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let r = ClinicalRecord::sample(rng.random());
            let omitted: Vec<Field> = [Field::Laterality, Field::TStage, Field::NStage, Field::Surgery, Field::Age]
                .into_iter()
                .filter(|_| rng.random_bool(0.15))
                .collect();
            let kept = r.without_all(&omitted);
            PretrainDoc { note: r.render_text(&omitted), summary: kept.field_phrases().join(" "), classes: field_classes(&kept) }
        })
        .collect()
}

/// Pretrains a fresh model on [`pretraining_corpus`] and returns it frozen.
///
/// The loss is next-token prediction over `note [SEG] summary` plus, from the
/// `[SEG]` state alone, a linear read-out of every clinical field. Later
/// summary tokens can look back at the note, so without the read-out the
/// `[SEG]` state only needs the leading field. The read-out heads are dropped.
pub fn pretrain(vocab: &Vocabulary, config: LmConfig, sentences: usize, steps: usize, seed: u64) -> Result<(FrozenLm, ParamStore<f32>, Vec<f64>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let lm = FrozenLm::new(&mut store, config, &mut rng);
    let heads: Vec<Linear> = FIELD_CLASSES.iter().enumerate().map(|(f, &k)| Linear::new(&mut store, &format!("pretrain.field{f}"), config.dim, k, &mut rng)).collect();
    let docs = pretraining_corpus(sentences, seed ^ 0xc0ffee);
    let corpus: Vec<(Vec<usize>, usize, [usize; 4])> = docs
        .iter()
        .map(|d| {
            let mut t = vocab.tokenize(&d.note)?;
            let seg = t.len();
            t.push(vocab.seg());
            if !d.summary.is_empty() {
                t.extend(vocab.tokenize(&d.summary)?);
            }
            if t.len() > LM_CAPACITY {
                return Err(Error::Capacity(format!("pretraining document of {} tokens exceeds {LM_CAPACITY}", t.len())));
            }
            Ok((t, seg, d.classes))
        })
        .collect::<Result<_>>()?;
    let mut opt = AdamW::new(PRETRAIN_LR, 0.0);
    let mut losses = Vec::with_capacity(steps);
    for _ in 0..steps {
        let batch: Vec<&(Vec<usize>, usize, [usize; 4])> = (0..PRETRAIN_BATCH).map(|_| &corpus[rng.random_range(0..corpus.len())]).collect();
        let b = batch.len();
        let len = batch.iter().map(|d| d.0.len()).max().unwrap();
        let mut ids = Vec::with_capacity(b * len);
        let mut target = vec![0f32; b * (len - 1) * config.vocab];
        let mut count = 0usize;
        for (i, (s, _, _)) in batch.iter().enumerate() {
            ids.extend(s.iter().copied().chain(std::iter::repeat(vocab.pad())).take(len));
            for p in 0..s.len() - 1 {
                target[(i * (len - 1) + p) * config.vocab + s[p + 1]] = 1.0;
                count += 1;
            }
        }
        let mut g = Graph::new();
        let e = lm.embed(&mut g, &store, &ids)?;
        let e = g.reshape(e, &[b, len, config.dim])?;
        let h = lm.hidden(&mut g, &store, e)?;
        let next = g.slice(h, 1, 0, len - 1)?;
        let lp = lm.log_probs(&mut g, &store, next)?;
        let t = g.constant(Tensor::new(&[b, len - 1, config.vocab], target)?);
        let picked = g.mul(lp, t)?;
        let total = g.sum(picked)?;
        let mut loss = g.scale(total, -1.0 / count as f64)?;

        let rows = batch
            .iter()
            .enumerate()
            .map(|(i, d)| {
                let row = g.slice(h, 0, i, 1)?;
                g.slice(row, 1, d.1, 1)
            })
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let seg = g.concat(&rows, 0)?;
        let seg = g.reshape(seg, &[b, config.dim])?;
        for (f, head) in heads.iter().enumerate() {
            let k = FIELD_CLASSES[f];
            let logits = head.forward(&mut g, &store, seg)?;
            let lp = g.log_softmax(logits)?;
            let mut onehot = vec![0f32; b * k];
            for (i, d) in batch.iter().enumerate() {
                onehot[i * k + d.2[f]] = 1.0;
            }
            let t = g.constant(Tensor::new(&[b, k], onehot)?);
            let picked = g.mul(lp, t)?;
            let total = g.sum(picked)?;
            let nll = g.scale(total, -1.0 / b as f64)?;
            loss = g.add(loss, nll)?;
        }
        losses.push(g.value(loss).data()[0] as f64);
        let grads = g.backward(loss)?;
        opt.step(&mut store, &grads);
    }
    lm.freeze(&mut store, true);
    Ok((lm, store, losses))
}

/// `N` learnable prompt matrices of `M×D`, stored as one `(N, M, D)` tensor.
#[derive(Clone, Debug)]
pub struct PromptBank {
    pub id: ParamId,
    pub count: usize,
    pub len: usize,
}

impl PromptBank {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, count: usize, len: usize, dim: usize, rng: &mut impl Rng) -> Self {
        Self { id: store.add("prompt.bank", Tensor::randn(&[count, len, dim], 0.02, rng)), count, len }
    }
}

/// The frozen model together with an optional prompt bank (absent without tuning).
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub vocab: Vocabulary,
    pub lm: FrozenLm,
    pub prompts: Option<PromptBank>,
}

impl TextEncoder {
    /// Rows of the context matrix: the prompt count, or 1 without prompts.
    pub fn rows(&self) -> usize {
        self.prompts.as_ref().map_or(1, |p| p.count)
    }

    /// Prompted input embeddings `(N, M + |tokens| + 1, D)`: prompt vectors,
    /// then token embeddings, then `[SEG]`.
    pub fn build_prompted_input<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, tokens: &[usize]) -> Result<Var> {
        let d = self.lm.config.dim;
        let m = self.prompts.as_ref().map_or(0, |p| p.len);
        let total = m + tokens.len() + 1;
        if total > LM_CAPACITY {
            return Err(Error::Capacity(format!(
                "prompted sequence of {total} tokens exceeds the language model capacity {LM_CAPACITY}; shorten the prompts or the text"
            )));
        }
        let mut ids = tokens.to_vec();
        ids.push(self.vocab.seg());
        let text = self.lm.embed(g, store, &ids)?;
        let text = g.reshape(text, &[1, ids.len(), d])?;
        let n = self.rows();
        let text = if n == 1 { text } else { g.concat(&vec![text; n], 0)? };
        match &self.prompts {
            Some(p) if p.len > 0 => {
                let bank = g.param(store, p.id);
                Ok(g.concat(&[bank, text], 1)?)
            }
            _ => Ok(text),
        }
    }

    /// Context matrix `g` of shape `(N, D)`: the `[SEG]` hidden state of each prompted sequence.
    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, text: &str) -> Result<Var> {
        let tokens = self.vocab.tokenize(text)?;
        let x = self.build_prompted_input(g, store, &tokens)?;
        let len = g.shape(x)[1];
        let h = self.lm.hidden(g, store, x)?;
        let last = g.slice(h, 1, len - 1, 1)?;
        Ok(g.reshape(last, &[self.rows(), self.lm.config.dim])?)
    }
}

/// Learned table for the four-character numeric record code: one row per
/// (position, symbol) with symbols `0`–`9` and `?`.
#[derive(Clone, Debug)]
pub struct DigitEmbedding {
    pub table: ParamId,
}

const DIGIT_SYMBOLS: usize = 11;

impl DigitEmbedding {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, dim: usize, rng: &mut impl Rng) -> Self {
        Self { table: store.add("digits.table", Tensor::randn(&[4 * DIGIT_SYMBOLS, dim], 1.0, rng)) }
    }

    /// `(4, D)` context rows for a code such as `0301` or `?301`.
    pub fn encode<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, code: &str) -> Result<Var> {
        let chars: Vec<char> = code.chars().collect();
        if chars.len() != 4 {
            return Err(Error::Data(format!("numeric record code must have 4 characters, got '{code}'")));
        }
        let ids = chars
            .iter()
            .enumerate()
            .map(|(pos, c)| match c {
                '?' => Ok(pos * DIGIT_SYMBOLS + 10),
                c => c.to_digit(10).map(|d| pos * DIGIT_SYMBOLS + d as usize).ok_or_else(|| Error::Data(format!("bad code symbol '{c}'"))),
            })
            .collect::<Result<Vec<_>>>()?;
        let t = g.param(store, self.table);
        Ok(g.gather(t, &ids)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn encoder(n: usize, m: usize, seed: u64) -> (TextEncoder, ParamStore<f64>) {
        let vocab = Vocabulary::clinical();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lm = FrozenLm::new(&mut store, LmConfig::small(vocab.len()), &mut rng);
        lm.freeze(&mut store, true);
        let prompts = (m > 0).then(|| PromptBank::new(&mut store, n, m, 64, &mut rng));
        (TextEncoder { vocab, lm, prompts }, store)
    }

    #[test]
    fn corpus_restates_present_fields_and_tokenizes() {
        let v = Vocabulary::clinical();
        let corpus = pretraining_corpus(300, 4);
        assert_eq!(corpus, pretraining_corpus(300, 4));
        let mut dropped = 0;
        for PretrainDoc { note, summary, classes } in &corpus {
            assert_eq!(classes[0] == 0, !summary.starts_with("left") && !summary.starts_with("right"));
            assert_eq!(classes[3] == 0, !summary.contains("surgery") && !summary.contains("mastectomy"));
            for word in summary.split(' ') {
                assert!(note.split(|c: char| !c.is_alphanumeric()).any(|w| w == word), "{word} not in {note}");
            }
            if !summary.is_empty() {
                v.tokenize(summary).unwrap();
            }
            dropped += !summary.contains("age") as usize;
        }
        assert!((20..80).contains(&dropped), "{dropped}");
        assert!(corpus.iter().filter(|d| d.classes[0] != 0).count() > 200);
    }

    #[test]
    fn tokenizer_examples() {
        let v = Vocabulary::clinical();
        assert_eq!(v.tokenize("left breast").unwrap(), vec![v.id("left").unwrap(), v.id("breast").unwrap()]);
        assert!(v.tokenize("").is_err());
        assert!(v.tokenize(" .. ").is_err());
        assert_eq!(v.tokenize("Left, BREAST!").unwrap(), v.tokenize("left breast").unwrap());
        assert_eq!(v.tokenize("quantum").unwrap(), vec![v.unk()]);
        assert_eq!(v.tokenize("[SEG]").unwrap(), vec![v.unk()]);
    }

    #[test]
    fn vocabulary_covers_the_template() {
        let v = Vocabulary::clinical();
        for seed in 0..200 {
            let ids = v.tokenize(&ClinicalRecord::sample(seed).render_text(&[])).unwrap();
            assert!(!ids.contains(&v.unk()) && !ids.contains(&v.seg()));
        }
    }

    #[test]
    fn prompted_input_layout() {
        let (enc, store) = encoder(3, 2, 1);
        let mut g = Graph::new();
        let tokens = enc.vocab.tokenize("left breast cancer").unwrap();
        let x = enc.build_prompted_input(&mut g, &store, &tokens).unwrap();
        assert_eq!(g.shape(x), &[3, 6, 64]);
        let seg = enc.lm.embed(&mut g, &store, &[enc.vocab.seg()]).unwrap();
        let (xv, sv) = (g.value(x).data(), g.value(seg).data());
        for n in 0..3 {
            assert_eq!(&xv[(n * 6 + 5) * 64..(n * 6 + 6) * 64], sv);
            assert_eq!(&xv[n * 6 * 64..(n * 6 + 2) * 64], &store.value(enc.prompts.as_ref().unwrap().id).data()[n * 128..(n + 1) * 128]);
        }
        let (plain, store) = encoder(1, 0, 1);
        let mut g = Graph::new();
        let x = plain.build_prompted_input(&mut g, &store, &tokens).unwrap();
        assert_eq!(g.shape(x), &[1, 4, 64]);
    }

    #[test]
    fn context_shape_and_plain_equivalence() {
        let (enc, store) = encoder(4, 8, 2);
        let mut g = Graph::new();
        let c = enc.encode(&mut g, &store, "age 52. t1 n0 m0 cancer in the left breast.").unwrap();
        assert_eq!(g.shape(c), &[4, 64]);
        let (plain, store) = encoder(1, 0, 2);
        let mut g = Graph::new();
        let text = "t2 n1 m0 cancer.";
        let c = plain.encode(&mut g, &store, text).unwrap();
        let tokens = plain.vocab.tokenize(text).unwrap();
        let direct = plain.lm.seg_embedding(&mut g, &store, &plain.vocab, &tokens).unwrap();
        assert!(g.value(c).bitwise_eq(g.value(direct)));
    }

    #[test]
    fn rows_depend_only_on_their_prompt() {
        let (enc, mut store) = encoder(4, 3, 3);
        let text = "t3 n0 m0 cancer in the right breast.";
        let run = |store: &ParamStore<f64>| {
            let mut g = Graph::new();
            let c = enc.encode(&mut g, store, text).unwrap();
            g.value(c).clone()
        };
        let before = run(&store);
        let id = enc.prompts.as_ref().unwrap().id;
        store.get_mut(id).value.data_mut()[2 * 3 * 64 + 5] += 0.5;
        let after = run(&store);
        for n in 0..4 {
            let same = before.data()[n * 64..(n + 1) * 64] == after.data()[n * 64..(n + 1) * 64];
            assert_eq!(same, n != 2, "row {n}");
        }
    }

    #[test]
    fn over_long_sequences_hit_capacity() {
        let (enc, store) = encoder(1, 60, 4);
        let mut g = Graph::new();
        assert!(matches!(enc.encode(&mut g, &store, "t1 n0 m0 cancer in the left breast"), Err(Error::Capacity(_))));
    }

    #[test]
    fn causal_mask_hides_later_tokens() {
        let (enc, store) = encoder(1, 0, 5);
        let mut g = Graph::new();
        let ids = enc.vocab.tokenize("t1 n0 m0 cancer").unwrap();
        let run = |g: &mut Graph<f64>, ids: &[usize]| {
            let e = enc.lm.embed(g, &store, ids).unwrap();
            let e = g.reshape(e, &[1, ids.len(), 64]).unwrap();
            enc.lm.hidden(g, &store, e).unwrap()
        };
        let short = run(&mut g, &ids);
        let mut longer = ids.clone();
        longer.extend([enc.vocab.seg(), enc.vocab.id("left").unwrap()]);
        let long = run(&mut g, &longer);
        let n = ids.len() * 64;
        assert!(g.value(short).data() == &g.value(long).data()[..n]);
    }

    #[test]
    fn digit_codes() {
        let mut store = ParamStore::<f64>::new();
        let d = DigitEmbedding::new(&mut store, 8, &mut ChaCha8Rng::seed_from_u64(0));
        let mut g = Graph::new();
        let c = d.encode(&mut g, &store, "?301").unwrap();
        assert_eq!(g.shape(c), &[4, 8]);
        assert!(d.encode(&mut g, &store, "03x1").is_err());
        assert!(d.encode(&mut g, &store, "031").is_err());
    }

    #[test]
    fn lm_checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let vocab = Vocabulary::clinical();
        let mut store = ParamStore::<f32>::new();
        let lm = FrozenLm::new(&mut store, LmConfig::small(vocab.len()), &mut ChaCha8Rng::seed_from_u64(1));
        let path = dir.path().join("lm.bin");
        lm.write_checkpoint(&store, &path).unwrap();
        let (back, bstore) = FrozenLm::read_checkpoint::<f32>(&path).unwrap();
        assert!(assert_frozen(&lm.snapshot(&store), &back.snapshot(&bstore)));
        vocab.write(&dir.path().join("vocab.txt")).unwrap();
        assert_eq!(Vocabulary::read(&dir.path().join("vocab.txt")).unwrap(), vocab);
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(FrozenLm::read_checkpoint::<f32>(&path), Err(Error::Format { .. })));
    }
}
