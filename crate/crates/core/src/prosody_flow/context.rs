//! Word vocabulary and the transformer that turns a window of words plus a
//! speaker into one condition vector per word.

use std::collections::HashMap;

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{broadcast_rows, Bound, Embedding, Linear, ParamId, ParamStore};
use crate::scalar::Scalar;

/// Word strings to ids; id 0 is the unknown word.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct WordVocab {
    words: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for WordVocab {
    fn from(words: Vec<String>) -> Self {
        Self::from_words(words)
    }
}

impl From<WordVocab> for Vec<String> {
    fn from(v: WordVocab) -> Self {
        v.words
    }
}

pub const UNKNOWN_WORD: &str = "<unk>";

impl WordVocab {
    /// Sorted, de-duplicated vocabulary of every whitespace token.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words: Vec<String> = texts
            .into_iter()
            .flat_map(|t| t.split_whitespace())
            .map(str::to_owned)
            .collect();
        words.sort();
        words.dedup();
        words.retain(|w| w != UNKNOWN_WORD);
        words.insert(0, UNKNOWN_WORD.into());
        Self::from_words(words)
    }

    pub fn from_words(words: Vec<String>) -> Self {
        let index = words.iter().enumerate().map(|(i, w)| (w.clone(), i)).collect();
        Self { words, index }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(0)
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.split_whitespace().map(|w| self.id(w)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContextConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub ff_dim: usize,
    pub cond_dim: usize,
}

impl Default for ContextConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            heads: 2,
            layers: 2,
            ff_dim: 64,
            cond_dim: 32,
        }
    }
}

impl ContextConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(Error::config("context_heads", "must divide context_dim"));
        }
        if self.ff_dim == 0 || self.cond_dim == 0 {
            return Err(Error::config("context_cond_dim", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
struct LayerNorm {
    gain: ParamId,
    bias: ParamId,
}

impl LayerNorm {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Array2::ones((1, dim))),
            bias: store.add(format!("{name}.bias"), Array2::zeros((1, dim))),
        }
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Var {
        let h = g.layer_norm_rows(x, T::c(1e-5));
        let h = g.mul_row(h, p[self.gain]);
        g.add_row(h, p[self.bias])
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

/// Pre-norm transformer over the window, then a projection of each word
/// state together with the speaker vector.
#[derive(Clone, Debug)]
pub struct ContextEncoder {
    pub config: ContextConfig,
    emb: Embedding,
    boundary: Linear,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    speaker: Linear,
    out: Linear,
}

impl ContextEncoder {
    pub fn new<T: Scalar, R: Rng>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        config: ContextConfig,
        vocab: usize,
        speaker_dim: usize,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let emb = Embedding::new(store, rng, &format!("{name}.emb"), vocab.max(1), d, 0.5);
        let boundary = Linear::new(store, rng, &format!("{name}.boundary"), 3, d);
        let blocks = (0..config.layers)
            .map(|i| {
                let n = format!("{name}.block{i}");
                Block {
                    ln1: LayerNorm::new(store, &format!("{n}.ln1"), d),
                    q: Linear::new(store, rng, &format!("{n}.q"), d, d),
                    k: Linear::new(store, rng, &format!("{n}.k"), d, d),
                    v: Linear::new(store, rng, &format!("{n}.v"), d, d),
                    o: Linear::new(store, rng, &format!("{n}.o"), d, d),
                    ln2: LayerNorm::new(store, &format!("{n}.ln2"), d),
                    ff1: Linear::new(store, rng, &format!("{n}.ff1"), d, config.ff_dim),
                    ff2: Linear::new(store, rng, &format!("{n}.ff2"), config.ff_dim, d),
                }
            })
            .collect();
        let ln_f = LayerNorm::new(store, &format!("{name}.ln_f"), d);
        let speaker = Linear::new(store, rng, &format!("{name}.spk"), speaker_dim, d);
        let out = Linear::new(store, rng, &format!("{name}.out"), 2 * d, config.cond_dim);
        Ok(Self {
            config,
            emb,
            boundary,
            blocks,
            ln_f,
            speaker,
            out,
        })
    }

    /// `W × cond_dim` conditions for the words of a window. `offsets` are
    /// the sentence starts within the window followed by its length.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, p: &Bound, words: &[usize], offsets: &[usize], speaker: Var) -> Result<Var> {
        if words.is_empty() {
            return Err(Error::Argument("empty context window".into()));
        }
        let n = words.len();
        let d = self.config.d_model;
        let x = self.emb.lookup(g, p, words)?;
        let pos = g.constant(positional(n, d));
        let b = g.constant(sentence_features(offsets, n)?);
        let b = self.boundary.forward(g, p, b);
        let x = g.add(x, b);
        let mut h = g.add(x, pos);
        let dh = d / self.config.heads;
        let inv = T::c(1.0 / (dh as f64).sqrt());
        for b in &self.blocks {
            let a = b.ln1.forward(g, p, h);
            let q = b.q.forward(g, p, a);
            let k = b.k.forward(g, p, a);
            let v = b.v.forward(g, p, a);
            let heads: Vec<Var> = (0..self.config.heads)
                .map(|i| {
                    let qh = g.slice_cols(q, i * dh, dh);
                    let kh = g.slice_cols(k, i * dh, dh);
                    let vh = g.slice_cols(v, i * dh, dh);
                    let kt = g.transpose(kh);
                    let s = g.matmul(qh, kt);
                    let s = g.scale(s, inv);
                    let w = g.softmax_rows(s);
                    g.matmul(w, vh)
                })
                .collect();
            let att = g.concat_cols(&heads);
            let att = b.o.forward(g, p, att);
            h = g.add(h, att);
            let f = b.ln2.forward(g, p, h);
            let f = b.ff1.forward(g, p, f);
            let f = g.leaky_relu(f, T::c(0.1));
            let f = b.ff2.forward(g, p, f);
            h = g.add(h, f);
        }
        let h = self.ln_f.forward(g, p, h);
        let s = self.speaker.forward(g, p, speaker);
        let s = broadcast_rows(g, s, n);
        let cat = g.concat_cols(&[h, s]);
        Ok(self.out.forward(g, p, cat))
    }
}

/// Per word: relative position in its sentence, sentence-initial flag and
/// sentence-final flag.
pub fn sentence_features<T: Scalar>(offsets: &[usize], n: usize) -> Result<Array2<T>> {
    if offsets.len() < 2 || offsets[0] != 0 || *offsets.last().unwrap() != n || offsets.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Argument(format!("sentence offsets {offsets:?} do not partition {n} words")));
    }
    let mut f = Array2::zeros((n, 3));
    for w in offsets.windows(2) {
        let len = w[1] - w[0];
        for i in 0..len {
            let mut row = f.row_mut(w[0] + i);
            row[0] = T::c(if len > 1 { i as f64 / (len - 1) as f64 } else { 0.0 });
            row[1] = T::c(f64::from(u8::from(i == 0)));
            row[2] = T::c(f64::from(u8::from(i + 1 == len)));
        }
    }
    Ok(f)
}

/// Sinusoidal position codes, `n × d`.
fn positional<T: Scalar>(n: usize, d: usize) -> Array2<T> {
    Array2::from_shape_fn((n, d), |(pos, i)| {
        let rate = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / d as f64);
        let a = pos as f64 * rate;
        T::c(if i % 2 == 0 { a.sin() } else { a.cos() })
    })
}
