//! Character vocabulary, corpus splits, window batching, metrics and sampling.

use std::collections::BTreeSet;
use std::f64::consts::LN_2;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::InnModel;
use crate::tensor::{no_grad, Element, Tensor};

/// What a vocabulary symbol stands for.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SymbolKind {
    /// Unicode scalar values.
    Chars,
    /// Raw bytes, used when the corpus is not valid UTF-8.
    Bytes,
}

/// Sorted set of observed symbols; ids are positions in that order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub kind: SymbolKind,
    /// Codepoints or byte values, ascending.
    pub symbols: Vec<u32>,
}

impl Vocab {
    pub fn from_text(text: &str) -> Result<Self> {
        let set: BTreeSet<u32> = text.chars().map(u32::from).collect();
        Self::from_set(SymbolKind::Chars, set)
    }

    /// Character vocabulary for UTF-8 input, byte vocabulary otherwise.
    pub fn from_bytes(raw: &[u8]) -> Result<Self> {
        match std::str::from_utf8(raw) {
            Ok(text) => Self::from_text(text),
            Err(_) => Self::from_set(SymbolKind::Bytes, raw.iter().map(|&b| u32::from(b)).collect()),
        }
    }

    fn from_set(kind: SymbolKind, set: BTreeSet<u32>) -> Result<Self> {
        if set.is_empty() {
            return Err(Error::Input("cannot build a vocabulary from empty text".into()));
        }
        Ok(Vocab {
            kind,
            symbols: set.into_iter().collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn id(&self, symbol: u32) -> Option<usize> {
        self.symbols.binary_search(&symbol).ok()
    }

    fn describe(&self, symbol: u32) -> String {
        match (self.kind, char::from_u32(symbol)) {
            (SymbolKind::Chars, Some(c)) => format!("{c:?}"),
            _ => format!("byte 0x{symbol:02x}"),
        }
    }

    fn encode_symbols(&self, symbols: impl Iterator<Item = u32>) -> Result<Vec<usize>> {
        symbols
            .enumerate()
            .map(|(pos, s)| {
                self.id(s).ok_or_else(|| {
                    Error::Input(format!("{} at position {pos} is not in the vocabulary", self.describe(s)))
                })
            })
            .collect()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        match self.kind {
            SymbolKind::Chars => self.encode_symbols(text.chars().map(u32::from)),
            SymbolKind::Bytes => self.encode_raw(text.as_bytes()),
        }
    }

    /// Encodes a raw corpus; for a character vocabulary it must be UTF-8.
    pub fn encode_raw(&self, raw: &[u8]) -> Result<Vec<usize>> {
        match self.kind {
            SymbolKind::Chars => {
                let text = std::str::from_utf8(raw)
                    .map_err(|e| Error::Input(format!("corpus is not UTF-8: {e}")))?;
                self.encode(text)
            }
            SymbolKind::Bytes => self.encode_symbols(raw.iter().map(|&b| u32::from(b))),
        }
    }

    /// Byte sequence for `ids`.
    pub fn decode_raw(&self, ids: &[usize]) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(ids.len());
        for (pos, &id) in ids.iter().enumerate() {
            let &s = self.symbols.get(id).ok_or_else(|| {
                Error::Input(format!("token id {id} at position {pos} is outside the vocabulary of {}", self.len()))
            })?;
            match self.kind {
                SymbolKind::Chars => {
                    let c = char::from_u32(s).expect("vocabulary holds scalar values");
                    out.extend_from_slice(c.encode_utf8(&mut [0; 4]).as_bytes());
                }
                SymbolKind::Bytes => out.push(s as u8),
            }
        }
        Ok(out)
    }

    /// Text for `ids`; byte vocabularies decode lossily.
    pub fn decode(&self, ids: &[usize]) -> Result<String> {
        Ok(String::from_utf8_lossy(&self.decode_raw(ids)?).into_owned())
    }
}

/// A tokenized corpus cut into contiguous train / valid / test ranges.
#[derive(Clone, Debug)]
pub struct CorpusSplit {
    pub vocab: Vocab,
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

pub const DEFAULT_SPLIT: (f64, f64) = (0.9, 0.05);

impl CorpusSplit {
    /// `fractions` are the train and valid shares; the rest is test.
    pub fn from_raw(raw: &[u8], fractions: (f64, f64)) -> Result<Self> {
        let vocab = Vocab::from_bytes(raw)?;
        let ids = vocab.encode_raw(raw)?;
        Self::from_ids(vocab, ids, fractions)
    }

    pub fn from_ids(vocab: Vocab, ids: Vec<usize>, (f_train, f_valid): (f64, f64)) -> Result<Self> {
        if !(f_train > 0.0 && f_valid >= 0.0 && f_train + f_valid <= 1.0) {
            return Err(Error::Config(format!("bad split fractions {f_train} / {f_valid}")));
        }
        let n = ids.len();
        let n_train = (n as f64 * f_train).round() as usize;
        let n_valid = ((n as f64 * f_valid).round() as usize).min(n - n_train);
        let mut train = ids;
        let mut valid = train.split_off(n_train);
        let test = valid.split_off(n_valid);
        Ok(CorpusSplit {
            vocab,
            train,
            valid,
            test,
        })
    }

    pub fn read(path: impl AsRef<Path>, fractions: (f64, f64)) -> Result<Self> {
        let path = path.as_ref();
        let raw = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_raw(&raw, fractions)
    }
}

/// `inputs` and `targets` are row-major `[batch, len]` grids;
/// `targets[r][t]` is the id following `inputs[r][t]` in the corpus.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
    pub batch: usize,
    pub len: usize,
    /// Start offset in the id sequence of each row.
    pub starts: Vec<usize>,
}

/// Splits `ids` into windows and groups them into batches.
///
/// Window `w` reads `ids[w·l ..= w·l + l]`: its first `l` ids are inputs and
/// its last `l` ids are targets, so consecutive windows share one boundary id
/// and every id after the first is a target exactly once. A corpus of `n` ids
/// yields `⌊(n − 1) / l⌋` windows and `⌊windows / b⌋` batches per epoch; the
/// trailing partial batch is dropped.
#[derive(Clone, Debug)]
pub struct Batcher {
    ids: Vec<usize>,
    batch: usize,
    len: usize,
    n_windows: usize,
    shuffle_seed: Option<u64>,
}

impl Batcher {
    pub fn new(ids: Vec<usize>, batch: usize, len: usize, shuffle_seed: Option<u64>) -> Result<Self> {
        if batch == 0 || len == 0 {
            return Err(Error::Config("batch size and window length must be at least 1".into()));
        }
        let need = batch * len + 1;
        if ids.len() < need {
            return Err(Error::Input(format!(
                "corpus of {} ids is too small for batch {batch} x window {len}: need at least {need}",
                ids.len()
            )));
        }
        let n_windows = (ids.len() - 1) / len;
        Ok(Batcher {
            ids,
            batch,
            len,
            n_windows,
            shuffle_seed,
        })
    }

    pub fn n_windows(&self) -> usize {
        self.n_windows
    }

    pub fn batches_per_epoch(&self) -> usize {
        self.n_windows / self.batch
    }

    /// Window order for one epoch; a seeded shuffle when enabled.
    pub fn window_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.n_windows).collect();
        if let Some(seed) = self.shuffle_seed {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(epoch as u64);
            order.shuffle(&mut rng);
        }
        order
    }

    fn assemble(&self, windows: &[usize]) -> Batch {
        let l = self.len;
        let mut inputs = Vec::with_capacity(windows.len() * l);
        let mut targets = Vec::with_capacity(windows.len() * l);
        let mut starts = Vec::with_capacity(windows.len());
        for &w in windows {
            let s = w * l;
            inputs.extend_from_slice(&self.ids[s..s + l]);
            targets.extend_from_slice(&self.ids[s + 1..s + l + 1]);
            starts.push(s);
        }
        Batch {
            inputs,
            targets,
            batch: windows.len(),
            len: l,
            starts,
        }
    }

    /// The batch used at global training step `step`. A pure function of
    /// the step, so a resumed run sees the same sequence.
    pub fn batch_at(&self, step: usize) -> Batch {
        let per_epoch = self.batches_per_epoch();
        let (epoch, k) = (step / per_epoch, step % per_epoch);
        let order = self.window_order(epoch);
        self.assemble(&order[k * self.batch..(k + 1) * self.batch])
    }

    /// Every batch of one epoch.
    pub fn epoch(&self, epoch: usize) -> Vec<Batch> {
        let order = self.window_order(epoch);
        order
            .chunks_exact(self.batch)
            .map(|w| self.assemble(w))
            .collect()
    }

    /// All windows in corpus order, the last batch possibly short.
    pub fn sequential(&self) -> Vec<Batch> {
        let order: Vec<usize> = (0..self.n_windows).collect();
        order.chunks(self.batch).map(|w| self.assemble(w)).collect()
    }
}

/// First-epoch batches of `ids`.
pub fn batchify(ids: &[usize], batch: usize, len: usize, shuffle_seed: Option<u64>) -> Result<Vec<Batch>> {
    Ok(Batcher::new(ids.to_vec(), batch, len, shuffle_seed)?.epoch(0))
}

/// Bits per character from mean negative log-likelihood in nats.
pub fn bpc(mean_nll_nats: f64) -> f64 {
    mean_nll_nats / LN_2
}

pub fn nll_from_bpc(bpc: f64) -> f64 {
    bpc * LN_2
}

pub fn perplexity(mean_nll_nats: f64) -> f64 {
    mean_nll_nats.exp()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct EvalResult {
    pub nll: f64,
    pub bpc: f64,
    pub perplexity: f64,
    pub tokens: usize,
}

/// Mean next-id loss of `logits_fn` over non-overlapping windows of `ids`,
/// with no context carried between windows. `max_batches` caps the work.
pub fn evaluate_with<T: Element>(
    ids: &[usize],
    batch: usize,
    len: usize,
    max_batches: Option<usize>,
    mut logits_fn: impl FnMut(&[usize], usize, usize) -> Result<Tensor<T>>,
) -> Result<EvalResult> {
    let batcher = Batcher::new(ids.to_vec(), 1, len.min(ids.len().saturating_sub(1)).max(1), None)?;
    let windows: Vec<usize> = (0..batcher.n_windows()).collect();
    let _g = no_grad();
    let (mut total, mut tokens) = (0.0, 0usize);
    for chunk in windows.chunks(batch).take(max_batches.unwrap_or(usize::MAX)) {
        let b = batcher.assemble(chunk);
        let logits = logits_fn(&b.inputs, b.batch, b.len)?;
        let v = *logits.shape().last().expect("logits have a vocabulary axis");
        let loss = logits.reshape(&[b.batch * b.len, v])?.cross_entropy(&b.targets)?;
        let n = b.targets.len();
        total += loss.item().f64() * n as f64;
        tokens += n;
    }
    let nll = total / tokens as f64;
    Ok(EvalResult {
        nll,
        bpc: bpc(nll),
        perplexity: perplexity(nll),
        tokens,
    })
}

pub fn evaluate<T: Element>(
    model: &InnModel<T>,
    ids: &[usize],
    batch: usize,
    len: usize,
    max_batches: Option<usize>,
) -> Result<EvalResult> {
    evaluate_with(ids, batch, len, max_batches, |x, b, l| model.logits(x, b, l))
}

/// Draws an index from `softmax(logits / temperature)` by inverting the CDF.
pub fn sample_logits<R: Rng + ?Sized>(logits: &[f64], temperature: f64, rng: &mut R) -> Result<usize> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let scaled: Vec<f64> = logits.iter().map(|&z| z / temperature).collect();
    let max = scaled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = scaled.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let u = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return Ok(i);
        }
    }
    // u landed on the rounding gap at the top; take the last nonzero weight
    Ok(weights.iter().rposition(|&w| w > 0.0).unwrap_or(0))
}

/// Longest context fed back to the model while sampling.
pub const GENERATE_CONTEXT: usize = 256;

/// Continues `seed_text` by `length` sampled symbols.
pub fn generate<T: Element>(
    model: &InnModel<T>,
    vocab: &Vocab,
    seed_text: &str,
    length: usize,
    temperature: f64,
    rng_seed: u64,
) -> Result<String> {
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
    }
    let mut ids = vocab.encode(seed_text)?;
    if ids.is_empty() {
        return Err(Error::Input("seed text is empty".into()));
    }
    let prompt = ids.len();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let v = vocab.len();
    for _ in 0..length {
        let ctx = &ids[ids.len().saturating_sub(GENERATE_CONTEXT)..];
        let logits = {
            let _g = no_grad();
            model.logits(ctx, 1, ctx.len())?
        };
        let all = logits.to_f64_vec();
        let next = sample_logits(&all[all.len() - v..], temperature, &mut rng)?;
        ids.push(next);
    }
    let mut text = seed_text.to_string();
    text.push_str(&vocab.decode(&ids[prompt..])?);
    Ok(text)
}

/// English letter frequencies (per mille), `a` to `z`.
const LETTER_FREQ: [f64; 26] = [
    82.0, 15.0, 28.0, 43.0, 127.0, 22.0, 20.0, 61.0, 70.0, 1.5, 7.7, 40.0, 24.0, 67.0, 75.0, 19.0, 0.95, 60.0, 63.0,
    91.0, 28.0, 9.8, 24.0, 1.5, 20.0, 0.74,
];

/// Deterministic Text8-format text (lowercase `a`-`z` and single spaces) of
/// exactly `bytes` bytes, for when no real corpus is at hand.
///
/// Words come from a fixed random lexicon with Zipfian frequencies; each word
/// prefers a small set of successors, so the text has both spelling and
/// word-order structure for a model to learn.
pub fn synthetic_text8(bytes: usize, seed: u64) -> String {
    use rand::distr::weighted::WeightedIndex;
    use rand_distr::{Distribution, Geometric, Zipf};

    const LEXICON: usize = 4000;
    const SUCCESSORS: usize = 12;
    const FOLLOW_P: f64 = 0.6;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let letters = WeightedIndex::new(LETTER_FREQ).expect("positive weights");
    let word_len = Geometric::new(0.22).expect("valid probability");
    let mut lexicon: Vec<String> = (0..LEXICON)
        .map(|_| {
            let len = 1 + (word_len.sample(&mut rng) as usize).min(11);
            (0..len).map(|_| (b'a' + letters.sample(&mut rng) as u8) as char).collect()
        })
        .collect();
    // every letter also appears as a word of its own, spread over the ranks
    for (i, c) in (b'a'..=b'z').enumerate() {
        lexicon[3 + i * 37] = (c as char).to_string();
    }
    let zipf = Zipf::new(LEXICON as f64, 1.05).expect("valid zipf");
    let follow = Zipf::new(SUCCESSORS as f64, 1.0).expect("valid zipf");
    let successors: Vec<Vec<usize>> = (0..LEXICON)
        .map(|_| (0..SUCCESSORS).map(|_| zipf.sample(&mut rng) as usize - 1).collect())
        .collect();

    let mut out = String::with_capacity(bytes + 16);
    let mut word = 0usize;
    while out.len() < bytes {
        word = if rng.random_bool(FOLLOW_P) {
            successors[word][follow.sample(&mut rng) as usize - 1]
        } else {
            zipf.sample(&mut rng) as usize - 1
        };
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(&lexicon[word]);
    }
    out.truncate(bytes);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn vocab_examples() {
        let v = Vocab::from_text("abcab").unwrap();
        assert_eq!(v.symbols, vec!['a' as u32, 'b' as u32, 'c' as u32]);
        assert_eq!(v.encode("cab").unwrap(), vec![2, 0, 1]);
        assert_eq!(v.decode(&[2, 0, 1]).unwrap(), "cab");
        assert!(matches!(Vocab::from_text(""), Err(Error::Input(_))));
        let err = v.encode("abz").unwrap_err().to_string();
        assert!(err.contains("position 2"), "{err}");
    }

    #[test]
    fn byte_fallback_for_invalid_utf8() {
        let raw = [0xffu8, 0x00, 0xff, 0x41];
        let v = Vocab::from_bytes(&raw).unwrap();
        assert_eq!(v.kind, SymbolKind::Bytes);
        assert_eq!(v.symbols, vec![0x00, 0x41, 0xff]);
        let ids = v.encode_raw(&raw).unwrap();
        assert_eq!(ids, vec![2, 0, 2, 1]);
        assert_eq!(v.decode_raw(&ids).unwrap(), raw);
    }

    #[test]
    fn batchify_hundred_ids() {
        let ids: Vec<usize> = (0..100).collect();
        // 99 / 10 = 9 windows, 9 / 2 = 4 batches
        let batches = batchify(&ids, 2, 10, None).unwrap();
        assert_eq!(batches.len(), 4);
        assert_eq!(&batches[0].inputs[..10], &ids[0..10]);
        assert_eq!(&batches[0].inputs[10..], &ids[10..20]);
        assert_eq!(&batches[3].targets[10..], &ids[71..81]);
        for b in &batches {
            for (r, &s) in b.starts.iter().enumerate() {
                for t in 0..b.len {
                    assert_eq!(b.targets[r * b.len + t], ids[s + t + 1]);
                }
            }
        }
    }

    #[test]
    fn batchify_too_small_names_minimum() {
        let err = batchify(&[0; 20], 2, 10, None).unwrap_err().to_string();
        assert!(err.contains("at least 21"), "{err}");
    }

    #[test]
    fn shuffled_order_is_seeded() {
        let ids: Vec<usize> = (0..1000).collect();
        let a = batchify(&ids, 4, 10, Some(7)).unwrap();
        assert_eq!(a, batchify(&ids, 4, 10, Some(7)).unwrap());
        assert_ne!(a, batchify(&ids, 4, 10, Some(8)).unwrap());
        let b = Batcher::new(ids, 4, 10, Some(7)).unwrap();
        assert_eq!(b.batch_at(3), a[3]);
        assert_ne!(b.window_order(0), b.window_order(1));
    }

    #[test]
    fn split_is_contiguous() {
        let v = Vocab::from_text("ab").unwrap();
        let ids: Vec<usize> = (0..200).map(|i| i % 2).collect();
        let s = CorpusSplit::from_ids(v, ids.clone(), DEFAULT_SPLIT).unwrap();
        assert_eq!((s.train.len(), s.valid.len(), s.test.len()), (180, 10, 10));
        assert_eq!([s.train, s.valid, s.test].concat(), ids);
    }

    #[test]
    fn metric_conversions() {
        assert!((bpc(LN_2) - 1.0).abs() < 1e-15);
        assert!((bpc(27f64.ln()) - 4.754887502163468).abs() < 1e-12);
        assert!((nll_from_bpc(1.705) - 1.18181).abs() < 1e-4);
        assert!((bpc(nll_from_bpc(1.705)) - 1.705).abs() < 1e-12);
        assert_eq!(perplexity(0.0), 1.0);
        assert!((perplexity(10f64.ln()) - 10.0).abs() < 1e-12);
    }

    #[test]
    fn synthetic_text8_format() {
        let text = synthetic_text8(20_000, 1);
        assert_eq!(text.len(), 20_000);
        assert_eq!(text, synthetic_text8(20_000, 1));
        assert!(text.bytes().all(|b| b == b' ' || b.is_ascii_lowercase()));
        assert!(!text.contains("  "));
        assert_eq!(Vocab::from_text(&text).unwrap().len(), 27);
    }

    #[test]
    fn sampling_rejects_bad_temperature() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_logits(&[0.0, 1.0], 0.0, &mut rng).is_err());
        assert!(sample_logits(&[0.0, 1.0], f64::NAN, &mut rng).is_err());
    }
}
