//! Byte-level text encoder producing decoupled label and prompt embeddings,
//! plus the language cache that keeps it off the steady-state inference path.

use std::io::{Read, Write};
use std::num::NonZeroUsize;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use efh_numcore::{multi_head_self_attention, Scalar, Tensor, Var};
use lru::LruCache;
use parking_lot::Mutex;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Attention, Builder, FeedForward, LayerNorm};
use crate::params::{ParamId, ParamStore, Session};

pub const BYTE_TOKENS: usize = 256;
pub const CLS: usize = 256;
pub const PAD: usize = 257;
pub const VOCAB_SIZE: usize = 258;

/// `[cls]` followed by the UTF-8 bytes of `text`, truncated to `max_len`
/// tokens. Text that is empty after trimming is rejected; the bytes
/// themselves are not trimmed.
pub fn tokenize(text: &str, max_len: usize) -> Result<Vec<usize>> {
    if text.trim().is_empty() {
        return Err(Error::arg("text is empty"));
    }
    if max_len < 2 {
        return Err(Error::arg("max_len must allow [cls] and one byte"));
    }
    let mut ids = Vec::with_capacity(max_len.min(text.len() + 1));
    ids.push(CLS);
    ids.extend(text.bytes().take(max_len - 1).map(usize::from));
    Ok(ids)
}

/// Sentence-level label embeddings, one `[cls]` row per label.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelEmbeddings<T> {
    pub names: Vec<String>,
    pub embeddings: Tensor<T>,
}

impl<T: Scalar> LabelEmbeddings<T> {
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Token-level prompt embeddings with a per-row validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEncoding<T> {
    pub embeddings: Tensor<T>,
    pub valid: Vec<bool>,
}

#[derive(Debug, Clone, Copy)]
struct TextLayer {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    ffn: FeedForward,
}

/// Pre-norm transformer over byte tokens with learned positions.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub token_table: ParamId,
    pub position_table: ParamId,
    layers: Vec<TextLayer>,
    ln_final: LayerNorm,
    pub d_text: usize,
    pub max_len: usize,
}

impl TextEncoder {
    pub fn new<T: Scalar>(b: &mut Builder<T>, cfg: &ModelConfig) -> Self {
        let d = cfg.d_text;
        let bound = 1.0 / (d as f64).sqrt();
        let token_table = b.uniform("tokens", &[VOCAB_SIZE, d], bound);
        let position_table = b.uniform("positions", &[cfg.max_text_len, d], bound);
        let layers = (0..cfg.text_layers)
            .map(|i| {
                let mut s = b.sub(&format!("layer{i}"));
                TextLayer {
                    ln1: LayerNorm::new(&mut s, "ln1", d),
                    attn: Attention::new(&mut s, "attn", d, cfg.text_heads),
                    ln2: LayerNorm::new(&mut s, "ln2", d),
                    ffn: FeedForward::new(&mut s, "ffn", d, 2 * d),
                }
            })
            .collect();
        Self {
            token_table,
            position_table,
            layers,
            ln_final: LayerNorm::new(b, "ln_final", d),
            d_text: d,
            max_len: cfg.max_text_len,
        }
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    /// Marks the embedding tables and the first `n` layers as not trainable.
    pub fn freeze<T: Scalar>(&self, store: &mut ParamStore<T>, prefix: &str, n: usize) {
        if n == 0 {
            return;
        }
        store.set_trainable(self.token_table, false);
        store.set_trainable(self.position_table, false);
        for i in 0..n.min(self.layers.len()) {
            let layer = format!("{prefix}.layer{i}.");
            let ids: Vec<_> = store.ids_with_prefix(&layer).collect();
            for id in ids {
                store.set_trainable(id, false);
            }
        }
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<usize>> {
        tokenize(text, self.max_len)
    }

    /// Encodes one token sequence into `[T, d_text]`.
    pub fn forward<T: Scalar>(&self, s: &mut Session<T>, tokens: &[usize]) -> Result<Var> {
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let (tok, pos) = (s.p(self.token_table), s.p(self.position_table));
        let e = s.g.gather_rows(tok, tokens)?;
        let p = s.g.gather_rows(pos, &positions)?;
        let mut x = s.g.add(e, p)?;
        for l in &self.layers {
            let h = l.ln1.forward(s, x)?;
            let mha = l.attn.bind(s);
            let h = multi_head_self_attention(&mut s.g, h, &mha, None)?;
            x = s.g.add(x, h)?;
            let h = l.ln2.forward(s, x)?;
            let h = l.ffn.forward(s, h)?;
            x = s.g.add(x, h)?;
        }
        self.ln_final.forward(s, x)
    }

    /// `[cls]` output of one label, `[1, d_text]`.
    pub fn label_var<T: Scalar>(&self, s: &mut Session<T>, label: &str) -> Result<Var> {
        let tokens = self.tokenize(label)?;
        let out = self.forward(s, &tokens)?;
        Ok(s.g.slice_rows(out, 0, 1)?)
    }

    /// Differentiable label embeddings `[K_lbl, d_text]`, each label encoded
    /// on its own.
    pub fn labels_var<T: Scalar>(&self, s: &mut Session<T>, labels: &[String]) -> Result<Var> {
        if labels.is_empty() {
            return Err(Error::arg("label list is empty"));
        }
        let rows = labels
            .iter()
            .map(|l| self.label_var(s, l))
            .collect::<Result<Vec<_>>>()?;
        Ok(s.g.concat_rows(&rows)?)
    }

    pub fn prompt_var<T: Scalar>(&self, s: &mut Session<T>, prompt: &str) -> Result<Var> {
        let tokens = self.tokenize(prompt)?;
        self.forward(s, &tokens)
    }

    fn compute<T: Scalar>(&self, store: &ParamStore<T>, role: Role, text: &str) -> Result<Tensor<T>> {
        let mut s = Session::inference(store);
        let v = match role {
            Role::Label => self.label_var(&mut s, text)?,
            Role::Prompt => self.prompt_var(&mut s, text)?,
        };
        Ok(s.g.value(v).clone())
    }

    fn lookup<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        role: Role,
        text: &str,
        cache: Option<&LanguageCache<T>>,
    ) -> Result<Arc<Tensor<T>>> {
        match cache {
            Some(c) => c.get_or_compute(role, text, || self.compute(store, role, text)),
            None => Ok(Arc::new(self.compute(store, role, text)?)),
        }
    }

    /// Label embeddings, consulting `cache` once per label.
    pub fn encode_labels<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        labels: &[String],
        cache: Option<&LanguageCache<T>>,
    ) -> Result<LabelEmbeddings<T>> {
        if labels.is_empty() {
            return Err(Error::arg("label list is empty"));
        }
        let mut data = Vec::with_capacity(labels.len() * self.d_text);
        for l in labels {
            data.extend_from_slice(self.lookup(store, Role::Label, l, cache)?.data());
        }
        Ok(LabelEmbeddings {
            names: labels.to_vec(),
            embeddings: Tensor::new(&[labels.len(), self.d_text], data)?,
        })
    }

    /// Token-level prompt embeddings, cached by the whole prompt string.
    pub fn encode_prompt<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        prompt: &str,
        cache: Option<&LanguageCache<T>>,
    ) -> Result<PromptEncoding<T>> {
        let e = self.lookup(store, Role::Prompt, prompt, cache)?;
        Ok(PromptEncoding {
            valid: vec![true; e.rows()],
            embeddings: (*e).clone(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Role {
    Label,
    Prompt,
}

impl Role {
    fn code(self) -> u8 {
        match self {
            Role::Label => 0,
            Role::Prompt => 1,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Role::Label),
            1 => Some(Role::Prompt),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub entries: usize,
    pub evictions: u64,
}

/// LRU memo of text embeddings keyed by `(role, exact string)`.
///
/// Values are only valid for the weights that produced them; keys are not
/// normalized, so callers that want case folding must do it themselves.
/// Embeddings are computed outside the lock, so a slow miss never blocks
/// hits on other keys.
pub struct LanguageCache<T> {
    map: Mutex<LruCache<(Role, String), Arc<Tensor<T>>>>,
    hits: AtomicU64,
    misses: AtomicU64,
    evictions: AtomicU64,
}

impl<T: Scalar> LanguageCache<T> {
    pub fn new(capacity: usize) -> Result<Self> {
        let cap = NonZeroUsize::new(capacity).ok_or_else(|| Error::arg("cache capacity must be positive"))?;
        Ok(Self {
            map: Mutex::new(LruCache::new(cap)),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            evictions: AtomicU64::new(0),
        })
    }

    pub fn capacity(&self) -> usize {
        self.map.lock().cap().get()
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
            entries: self.map.lock().len(),
            evictions: self.evictions.load(Ordering::Relaxed),
        }
    }

    pub fn get(&self, role: Role, text: &str) -> Option<Arc<Tensor<T>>> {
        let found = self.map.lock().get(&(role, text.to_string())).cloned();
        let counter = if found.is_some() { &self.hits } else { &self.misses };
        counter.fetch_add(1, Ordering::Relaxed);
        found
    }

    pub fn insert(&self, role: Role, text: &str, value: Arc<Tensor<T>>) {
        let key = (role, text.to_string());
        let displaced = self.map.lock().push(key.clone(), value);
        if matches!(displaced, Some((k, _)) if k != key) {
            self.evictions.fetch_add(1, Ordering::Relaxed);
        }
    }

    pub fn get_or_compute(
        &self,
        role: Role,
        text: &str,
        compute: impl FnOnce() -> Result<Tensor<T>>,
    ) -> Result<Arc<Tensor<T>>> {
        if let Some(v) = self.get(role, text) {
            return Ok(v);
        }
        let v = Arc::new(compute()?);
        self.insert(role, text, v.clone());
        Ok(v)
    }

    /// Keys from least to most recently used.
    pub fn keys(&self) -> Vec<(Role, String)> {
        self.map.lock().iter().rev().map(|(k, _)| k.clone()).collect()
    }

    /// Writes every entry, least recently used first, so that loading the
    /// dump restores the same recency order.
    pub fn dump<W: Write>(&self, w: &mut W) -> Result<()> {
        let entries: Vec<_> = {
            let map = self.map.lock();
            map.iter().rev().map(|(k, v)| (k.clone(), v.clone())).collect()
        };
        let mut buf = Vec::new();
        for ((role, key), v) in entries {
            buf.push(role.code());
            buf.extend_from_slice(&(key.len() as u32).to_le_bytes());
            buf.extend_from_slice(key.as_bytes());
            v.write_tnsr(&mut buf)?;
        }
        w.write_all(&buf).map_err(|e| Error::io("<cache dump>", e))
    }

    /// Inserts every record of a dump. Hit and miss counters are untouched.
    pub fn load<R: Read>(&self, r: &mut R) -> Result<usize> {
        let bad = |m: &str| Error::format("<cache dump>", m.to_string());
        let mut n = 0;
        loop {
            let mut role = [0u8; 1];
            match r.read(&mut role) {
                Ok(0) => return Ok(n),
                Ok(_) => {}
                Err(e) => return Err(Error::io("<cache dump>", e)),
            }
            let role = Role::from_code(role[0]).ok_or_else(|| bad("unknown role byte"))?;
            let mut len = [0u8; 4];
            r.read_exact(&mut len).map_err(|_| bad("truncated key length"))?;
            let len = u32::from_le_bytes(len) as usize;
            if len > 1 << 20 {
                return Err(bad("key too long"));
            }
            let mut key = vec![0u8; len];
            r.read_exact(&mut key).map_err(|_| bad("truncated key"))?;
            let key = String::from_utf8(key).map_err(|_| bad("key is not UTF-8"))?;
            let t = Tensor::read_tnsr(r)?;
            self.insert(role, &key, Arc::new(t));
            n += 1;
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf = Vec::new();
        self.dump(&mut buf)?;
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load_file(&self, path: impl AsRef<Path>) -> Result<usize> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        self.load(&mut bytes.as_slice())
    }
}
