//! Transformer encoder plus one shared decoder with two self-attention modes.
//!
//! The decoder parameters exist once; CAUSAL and FULL mode differ only in the
//! attention mask applied at forward time. Positions are always supplied by
//! the caller, so a decoder input may live at sparse positions like
//! `(0, 2, 4)` while earlier weights stay untouched.

use crate::elem::Elem;
use crate::error::{Error, Result};
use crate::tensor::{AttnSpans, Graph, Tensor};
use crate::vocab::RESERVED;
use rand::distributions::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

// ═══════════════════════════════════════════════════════════════════════
// Configuration
// ═══════════════════════════════════════════════════════════════════════

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub model_dim: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub max_position: usize,
    pub dropout: f64,
    /// Chunk size `k` the model is trained for (selects `BOS_k`).
    pub chunk_size: usize,
    /// Target-length classification head over offsets -8..=+8; present only
    /// in mask-predict-only checkpoints. The hybrid model never has one.
    #[serde(default)]
    pub length_head: bool,
}

/// Span of length offsets the length head classifies over.
pub const LEN_OFFSET_RANGE: i64 = 8;
pub const LEN_CLASSES: usize = (2 * LEN_OFFSET_RANGE + 1) as usize;

impl ModelConfig {
    /// Desk-scale defaults: minutes of CPU training.
    pub fn desk(vocab_size: usize) -> Self {
        ModelConfig {
            vocab_size,
            model_dim: 64,
            ffn_dim: 128,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            max_position: 256,
            dropout: 0.0,
            chunk_size: 2,
            length_head: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by heads {}",
                self.model_dim, self.heads
            )));
        }
        if self.encoder_layers == 0 || self.decoder_layers == 0 {
            return Err(Error::Config("encoder/decoder need at least one layer".into()));
        }
        if self.vocab_size <= RESERVED as usize {
            return Err(Error::Config(format!(
                "vocab_size {} leaves no content tokens (reserved {})",
                self.vocab_size, RESERVED
            )));
        }
        if self.chunk_size == 0 || self.chunk_size > crate::vocab::MAX_CHUNK {
            return Err(Error::Config(format!("chunk_size {} outside 1..=4", self.chunk_size)));
        }
        Ok(())
    }
}

/// Self-attention mask mode of the shared decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderMode {
    /// Position i sees inputs 1..=i — the sparse autoregressive pass.
    Causal,
    /// Every position sees the whole input — the one-shot fill pass.
    Full,
}

// ═══════════════════════════════════════════════════════════════════════
// Parameter store
// ═══════════════════════════════════════════════════════════════════════

pub type ParamId = usize;

#[derive(Debug, Clone)]
pub struct ParamEntry<E> {
    pub name: String,
    pub data: Arc<Vec<E>>,
    pub shape: Vec<usize>,
}

/// Flat named parameter arena. Construction order is manifest order.
#[derive(Debug, Clone)]
pub struct ParamStore<E> {
    entries: Vec<ParamEntry<E>>,
}

impl<E> Default for ParamStore<E> {
    fn default() -> Self {
        ParamStore { entries: Vec::new() }
    }
}

impl<E: Elem> ParamStore<E> {
    fn add(&mut self, name: String, data: Vec<E>, shape: Vec<usize>) -> ParamId {
        debug_assert_eq!(data.len(), shape.iter().product::<usize>());
        self.entries.push(ParamEntry { name, data: Arc::new(data), shape });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<E> {
        &self.entries[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamEntry<E>> {
        self.entries.iter()
    }

    /// Total scalar count across all entries.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    /// Overwrite an entry's values (optimizer step, fine-tune init).
    pub fn set(&mut self, id: ParamId, data: Vec<E>) {
        debug_assert_eq!(data.len(), self.entries[id].data.len());
        self.entries[id].data = Arc::new(data);
    }

    /// In-place update; clones only if a graph still holds the buffer.
    pub fn update(&mut self, id: ParamId, f: impl FnOnce(&mut [E])) {
        f(Arc::make_mut(&mut self.entries[id].data).as_mut_slice());
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct LinearIds {
    weight: ParamId, // [out x in]
    /// Absent on key projections: a key bias shifts every score of a query
    /// row equally and softmax cancels it, so the parameter would be dead.
    bias: Option<ParamId>, // [out]
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct NormIds {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct AttnIds {
    wq: LinearIds,
    wk: LinearIds,
    wv: LinearIds,
    wo: LinearIds,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct EncLayerIds {
    norm1: NormIds,
    attn: AttnIds,
    norm2: NormIds,
    ffn1: LinearIds,
    ffn2: LinearIds,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct DecLayerIds {
    norm1: NormIds,
    self_attn: AttnIds,
    norm2: NormIds,
    cross_attn: AttnIds,
    norm3: NormIds,
    ffn1: LinearIds,
    ffn2: LinearIds,
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct DecoderIds {
    layers: Vec<DecLayerIds>,
    norm: NormIds,
}

// ═══════════════════════════════════════════════════════════════════════
// Model
// ═══════════════════════════════════════════════════════════════════════

/// Training provenance carried in the checkpoint manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub mode: String,
    pub p_raw: f64,
    pub label_smoothing: f64,
    pub init: String,
    pub seed: u64,
}

#[derive(Clone)]
pub struct Model<E> {
    pub config: ModelConfig,
    pub store: ParamStore<E>,
    pub step: u64,
    pub provenance: Option<Provenance>,
    embed: ParamId,
    enc_layers: Vec<EncLayerIds>,
    enc_norm: NormIds,
    /// Decoder parameter ids as resolved in CAUSAL mode.
    dec_causal: DecoderIds,
    /// Decoder parameter ids as resolved in FULL mode. Identical to
    /// `dec_causal` by construction; `unshare_decoder` breaks the tie.
    dec_full: DecoderIds,
    len_head: Option<LinearIds>,
}

impl<E: Elem> Model<E> {
    /// Randomly initialized model: embeddings N(0, dim^-0.5), linear weights
    /// uniform with fan-in scaling, norms at identity.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::default();
        let d = config.model_dim;
        let ffn = config.ffn_dim;

        let embed_std = (d as f64).powf(-0.5);
        let normal = rand::distributions::Uniform::new(0.0f64, 1.0);
        let gauss = move |rng: &mut ChaCha8Rng| -> f64 {
            // Box-Muller keeps the draw sequence identical for f32 and f64.
            let u1: f64 = normal.sample(rng).max(1e-12);
            let u2: f64 = normal.sample(rng);
            (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
        };
        let embed_data: Vec<E> = (0..config.vocab_size * d)
            .map(|_| E::from_f64(gauss(&mut rng) * embed_std))
            .collect();
        let embed = store.add("embed.weight".into(), embed_data, vec![config.vocab_size, d]);

        let linear_any = |store: &mut ParamStore<E>,
                              rng: &mut ChaCha8Rng,
                              name: &str,
                              out: usize,
                              inp: usize,
                              with_bias: bool| {
            let bound = (1.0 / inp as f64).sqrt();
            let w: Vec<E> =
                (0..out * inp).map(|_| E::from_f64(rng.gen_range(-bound..bound))).collect();
            let weight = store.add(format!("{name}.weight"), w, vec![out, inp]);
            let bias = with_bias
                .then(|| store.add(format!("{name}.bias"), vec![E::zero(); out], vec![out]));
            LinearIds { weight, bias }
        };
        let linear = |store: &mut ParamStore<E>, rng: &mut ChaCha8Rng, name: &str, out: usize, inp: usize| {
            linear_any(store, rng, name, out, inp, true)
        };
        let norm = |store: &mut ParamStore<E>, name: &str, n: usize| NormIds {
            gain: store.add(format!("{name}.gain"), vec![E::one(); n], vec![n]),
            bias: store.add(format!("{name}.bias"), vec![E::zero(); n], vec![n]),
        };
        let attn = |store: &mut ParamStore<E>, rng: &mut ChaCha8Rng, name: &str| AttnIds {
            wq: linear_any(store, rng, &format!("{name}.wq"), d, d, true),
            wk: linear_any(store, rng, &format!("{name}.wk"), d, d, false),
            wv: linear_any(store, rng, &format!("{name}.wv"), d, d, true),
            wo: linear_any(store, rng, &format!("{name}.wo"), d, d, true),
        };

        let mut enc_layers = Vec::new();
        for i in 0..config.encoder_layers {
            let p = format!("enc.{i}");
            enc_layers.push(EncLayerIds {
                norm1: norm(&mut store, &format!("{p}.norm1"), d),
                attn: attn(&mut store, &mut rng, &format!("{p}.attn")),
                norm2: norm(&mut store, &format!("{p}.norm2"), d),
                ffn1: linear(&mut store, &mut rng, &format!("{p}.ffn.w1"), ffn, d),
                ffn2: linear(&mut store, &mut rng, &format!("{p}.ffn.w2"), d, ffn),
            });
        }
        let enc_norm = norm(&mut store, "enc.norm", d);

        let mut dec_layers = Vec::new();
        for i in 0..config.decoder_layers {
            let p = format!("dec.{i}");
            dec_layers.push(DecLayerIds {
                norm1: norm(&mut store, &format!("{p}.norm1"), d),
                self_attn: attn(&mut store, &mut rng, &format!("{p}.self_attn")),
                norm2: norm(&mut store, &format!("{p}.norm2"), d),
                cross_attn: attn(&mut store, &mut rng, &format!("{p}.cross_attn")),
                norm3: norm(&mut store, &format!("{p}.norm3"), d),
                ffn1: linear(&mut store, &mut rng, &format!("{p}.ffn.w1"), ffn, d),
                ffn2: linear(&mut store, &mut rng, &format!("{p}.ffn.w2"), d, ffn),
            });
        }
        let dec = DecoderIds { layers: dec_layers, norm: norm(&mut store, "dec.norm", d) };

        let len_head = if config.length_head {
            Some(linear(&mut store, &mut rng, "len_head", LEN_CLASSES, d))
        } else {
            None
        };

        Ok(Model {
            config,
            store,
            step: 0,
            provenance: None,
            embed,
            enc_layers,
            enc_norm,
            dec_causal: dec.clone(),
            dec_full: dec,
            len_head,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.scalar_count()
    }

    /// True iff both decoder modes resolve to the identical parameter set.
    pub fn shared_decoder_check(&self) -> bool {
        self.dec_causal == self.dec_full
    }

    /// Diagnostic: clone the decoder parameters so FULL mode resolves to its
    /// own copies. Turns `shared_decoder_check` false.
    pub fn unshare_decoder(&mut self) {
        let clone_linear = |store: &mut ParamStore<E>, l: &LinearIds| {
            let w = store.entry(l.weight);
            let (wd, ws, wn) = (w.data.as_ref().clone(), w.shape.clone(), format!("{}.unshared", w.name));
            let weight = store.add(wn, wd, ws);
            let bias = l.bias.map(|bid| {
                let b = store.entry(bid);
                let (bd, bs, bn) =
                    (b.data.as_ref().clone(), b.shape.clone(), format!("{}.unshared", b.name));
                store.add(bn, bd, bs)
            });
            LinearIds { weight, bias }
        };
        let clone_norm = |store: &mut ParamStore<E>, n: &NormIds| {
            let g = store.entry(n.gain);
            let (gd, gs, gn) = (g.data.as_ref().clone(), g.shape.clone(), format!("{}.unshared", g.name));
            let b = store.entry(n.bias);
            let (bd, bs, bn) = (b.data.as_ref().clone(), b.shape.clone(), format!("{}.unshared", b.name));
            NormIds { gain: store.add(gn, gd, gs), bias: store.add(bn, bd, bs) }
        };
        let clone_attn = |store: &mut ParamStore<E>, a: &AttnIds| AttnIds {
            wq: clone_linear(store, &a.wq),
            wk: clone_linear(store, &a.wk),
            wv: clone_linear(store, &a.wv),
            wo: clone_linear(store, &a.wo),
        };
        let src = self.dec_causal.clone();
        let layers = src
            .layers
            .iter()
            .map(|l| DecLayerIds {
                norm1: clone_norm(&mut self.store, &l.norm1),
                self_attn: clone_attn(&mut self.store, &l.self_attn),
                norm2: clone_norm(&mut self.store, &l.norm2),
                cross_attn: clone_attn(&mut self.store, &l.cross_attn),
                norm3: clone_norm(&mut self.store, &l.norm3),
                ffn1: clone_linear(&mut self.store, &l.ffn1),
                ffn2: clone_linear(&mut self.store, &l.ffn2),
            })
            .collect();
        self.dec_full = DecoderIds { layers, norm: clone_norm(&mut self.store, &src.norm) };
    }

    fn decoder(&self, mode: DecoderMode) -> &DecoderIds {
        match mode {
            DecoderMode::Causal => &self.dec_causal,
            DecoderMode::Full => &self.dec_full,
        }
    }

    /// Start a forward session on a fresh graph.
    pub fn session(&self) -> Session<'_, E> {
        Session {
            model: self,
            graph: Graph::new(),
            leased: vec![None; self.store.len()],
            override_param: None,
            dropout_rng: None,
        }
    }

    /// Session with dropout enabled (training); `rng` drives the masks.
    pub fn train_session(&self, rng: ChaCha8Rng) -> Session<'_, E> {
        let mut s = self.session();
        if self.config.dropout > 0.0 {
            s.dropout_rng = Some(rng);
        }
        s
    }
}

// ═══════════════════════════════════════════════════════════════════════
// Forward sessions
// ═══════════════════════════════════════════════════════════════════════

/// Encoder output inside a session's graph.
pub struct Encoded<E> {
    pub memory: Tensor<E>,
    pub spans: Vec<(usize, usize)>,
    pub kv_allowed: Option<Vec<Vec<bool>>>,
}

/// Graph-independent encoder output, reusable across later decode graphs.
#[derive(Clone)]
pub struct Memory<E> {
    pub data: Arc<Vec<E>>,
    pub rows: usize,
    pub spans: Vec<(usize, usize)>,
    pub kv_allowed: Option<Vec<Vec<bool>>>,
}

impl<E: Elem> Encoded<E> {
    /// Detach from the graph for reuse by later forward calls.
    pub fn detach(&self) -> Memory<E> {
        Memory {
            data: Arc::clone(&self.memory.data),
            rows: self.memory.rows(),
            spans: self.spans.clone(),
            kv_allowed: self.kv_allowed.clone(),
        }
    }
}

/// One decoder input block: ids plus their explicit positions.
pub struct DecInput<'a> {
    pub ids: &'a [u32],
    pub positions: &'a [usize],
}

/// A single forward pass under construction. Parameters are leased onto the
/// graph once per session, so the tied embedding accumulates one gradient.
pub struct Session<'m, E: Elem> {
    pub model: &'m Model<E>,
    pub graph: Graph<E>,
    leased: Vec<Option<Tensor<E>>>,
    override_param: Option<(ParamId, Tensor<E>)>,
    dropout_rng: Option<ChaCha8Rng>,
}

impl<'m, E: Elem> Session<'m, E> {
    /// Substitute one parameter with an existing graph tensor (gradient
    /// verification hook).
    pub fn override_param(&mut self, id: ParamId, t: Tensor<E>) {
        self.override_param = Some((id, t));
    }

    fn lease(&mut self, id: ParamId) -> Tensor<E> {
        if let Some((oid, t)) = &self.override_param {
            if *oid == id {
                return t.clone();
            }
        }
        if let Some(t) = &self.leased[id] {
            return t.clone();
        }
        let e = self.model.store.entry(id);
        let t = self.graph.param(Arc::clone(&e.data), e.shape.clone());
        self.leased[id] = Some(t.clone());
        t
    }

    /// Node ids of every parameter leased during this session.
    pub fn param_nodes(&self) -> Vec<(ParamId, crate::tensor::NodeId)> {
        self.leased
            .iter()
            .enumerate()
            .filter_map(|(pid, t)| t.as_ref().map(|t| (pid, t.id)))
            .collect()
    }

    fn dropout(&mut self, x: Tensor<E>) -> Result<Tensor<E>> {
        match self.dropout_rng.as_mut() {
            None => Ok(x),
            Some(rng) => {
                let p = self.model.config.dropout;
                let mut r = rng.clone();
                let t = self.graph.dropout(&x, p, &mut r)?;
                *rng = r;
                Ok(t)
            }
        }
    }

    fn linear(&mut self, ids: &LinearIds, x: &Tensor<E>) -> Result<Tensor<E>> {
        let w = self.lease(ids.weight);
        let y = self.graph.matmul_nt(x, &w)?;
        match ids.bias {
            Some(bid) => {
                let b = self.lease(bid);
                self.graph.add_bias(&y, &b)
            }
            None => Ok(y),
        }
    }

    fn norm(&mut self, ids: &NormIds, x: &Tensor<E>) -> Result<Tensor<E>> {
        let g = self.lease(ids.gain);
        let b = self.lease(ids.bias);
        self.graph.layer_norm(x, &g, &b, E::from_f64(1e-5))
    }

    fn attn_block(
        &mut self,
        ids: &AttnIds,
        x: &Tensor<E>,
        kv: &Tensor<E>,
        spans: Arc<AttnSpans>,
        causal: bool,
    ) -> Result<Tensor<E>> {
        let q = self.linear(&ids.wq, x)?;
        let k = self.linear(&ids.wk, kv)?;
        let v = self.linear(&ids.wv, kv)?;
        let o = self.graph.attention(&q, &k, &v, spans, self.model.config.heads, causal)?;
        self.linear(&ids.wo, &o)
    }

    fn ffn(&mut self, w1: &LinearIds, w2: &LinearIds, x: &Tensor<E>) -> Result<Tensor<E>> {
        let h = self.linear(w1, x)?;
        let h = self.graph.relu(&h);
        self.linear(w2, &h)
    }

    /// Token embedding at explicit positions: `embed * sqrt(d) + sinusoid`.
    fn embed_tokens(&mut self, ids: &[u32], positions: &[usize]) -> Result<Tensor<E>> {
        debug_assert_eq!(ids.len(), positions.len());
        let cfg = &self.model.config;
        if let Some(&p) = positions.iter().find(|&&p| p >= cfg.max_position) {
            return Err(Error::PositionOverflow { position: p, max: cfg.max_position });
        }
        let table = self.lease(self.model.embed);
        let e = self.graph.embed(&table, ids)?;
        let e = self.graph.scale(&e, E::from_f64((cfg.model_dim as f64).sqrt()));
        let pe = sinusoid::<E>(positions, cfg.model_dim);
        let pe = self.graph.input(pe, vec![ids.len(), cfg.model_dim]);
        let x = self.graph.add(&e, &pe)?;
        self.dropout(x)
    }

    /// Encode a ragged batch of sources. `pad_masks`, when given, marks PAD
    /// positions that all attention queries must ignore.
    pub fn encode_batch(
        &mut self,
        srcs: &[&[u32]],
        pad_masks: Option<&[Vec<bool>]>,
    ) -> Result<Encoded<E>> {
        if srcs.is_empty() || srcs.iter().any(|s| s.is_empty()) {
            return Err(Error::Decode("encode: empty input".into()));
        }
        let lens: Vec<usize> = srcs.iter().map(|s| s.len()).collect();
        let mut ids = Vec::with_capacity(lens.iter().sum());
        let mut positions = Vec::with_capacity(ids.capacity());
        for s in srcs {
            ids.extend_from_slice(s);
            positions.extend(0..s.len());
        }
        let kv_allowed = pad_masks.map(|ms| {
            ms.iter().map(|m| m.iter().map(|&pad| !pad).collect::<Vec<bool>>()).collect::<Vec<_>>()
        });
        let mut spans = AttnSpans::ragged(&lens);
        spans.kv_allowed = kv_allowed.clone();
        let spans = Arc::new(spans);

        let mut x = self.embed_tokens(&ids, &positions)?;
        let layers = self.model.enc_layers.clone();
        for l in &layers {
            let h = self.norm(&l.norm1, &x)?;
            let a = self.attn_block(&l.attn, &h, &h, Arc::clone(&spans), false)?;
            let a = self.dropout(a)?;
            x = self.graph.add(&x, &a)?;
            let h = self.norm(&l.norm2, &x)?;
            let f = self.ffn(&l.ffn1, &l.ffn2, &h)?;
            let f = self.dropout(f)?;
            x = self.graph.add(&x, &f)?;
        }
        let memory = self.norm(&self.model.enc_norm.clone(), &x)?;
        Ok(Encoded { memory, spans: spans.q_spans.clone(), kv_allowed })
    }

    /// Decode a ragged batch of blocks against encoder memory rows.
    ///
    /// `mem_of[i]` names the memory span block `i` cross-attends to. Returns
    /// one logits row per input token, `[sum(lens) x vocab]`.
    pub fn decode_batch(
        &mut self,
        inputs: &[DecInput<'_>],
        memory: &Tensor<E>,
        mem_spans: &[(usize, usize)],
        mem_allowed: Option<&Vec<Vec<bool>>>,
        mem_of: &[usize],
        mode: DecoderMode,
    ) -> Result<Tensor<E>> {
        if inputs.is_empty() || inputs.iter().any(|b| b.ids.is_empty()) {
            return Err(Error::Decode("decode: empty input".into()));
        }
        debug_assert_eq!(inputs.len(), mem_of.len());
        let lens: Vec<usize> = inputs.iter().map(|b| b.ids.len()).collect();
        let mut ids = Vec::with_capacity(lens.iter().sum());
        let mut positions = Vec::with_capacity(ids.capacity());
        for b in inputs {
            debug_assert_eq!(b.ids.len(), b.positions.len());
            ids.extend_from_slice(b.ids);
            positions.extend_from_slice(b.positions);
        }
        let self_spans = Arc::new(AttnSpans::ragged(&lens));
        let cross_spans = Arc::new(AttnSpans {
            q_spans: self_spans.q_spans.clone(),
            kv_spans: mem_of.iter().map(|&s| mem_spans[s]).collect(),
            kv_allowed: mem_allowed
                .map(|a| mem_of.iter().map(|&s| a[s].clone()).collect::<Vec<_>>()),
        });
        let causal = mode == DecoderMode::Causal;

        let mut x = self.embed_tokens(&ids, &positions)?;
        let dec = self.model.decoder(mode).clone();
        for l in &dec.layers {
            let h = self.norm(&l.norm1, &x)?;
            let a = self.attn_block(&l.self_attn, &h, &h, Arc::clone(&self_spans), causal)?;
            let a = self.dropout(a)?;
            x = self.graph.add(&x, &a)?;
            let h = self.norm(&l.norm2, &x)?;
            let c = self.cross_attn(&l.cross_attn, &h, memory, Arc::clone(&cross_spans))?;
            let c = self.dropout(c)?;
            x = self.graph.add(&x, &c)?;
            let h = self.norm(&l.norm3, &x)?;
            let f = self.ffn(&l.ffn1, &l.ffn2, &h)?;
            let f = self.dropout(f)?;
            x = self.graph.add(&x, &f)?;
        }
        let h = self.norm(&dec.norm, &x)?;
        // Tied output projection against the embedding table.
        let table = self.lease(self.model.embed);
        self.graph.matmul_nt(&h, &table)
    }

    fn cross_attn(
        &mut self,
        ids: &AttnIds,
        x: &Tensor<E>,
        memory: &Tensor<E>,
        spans: Arc<AttnSpans>,
    ) -> Result<Tensor<E>> {
        let q = self.linear(&ids.wq, x)?;
        let k = self.linear(&ids.wk, memory)?;
        let v = self.linear(&ids.wv, memory)?;
        let o = self.graph.attention(&q, &k, &v, spans, self.model.config.heads, false)?;
        self.linear(&ids.wo, &o)
    }

    /// Length-offset logits `[sentences x 17]` from mean-pooled memory.
    pub fn length_logits(&mut self, enc: &Encoded<E>) -> Result<Tensor<E>> {
        let spans = enc.spans.clone();
        self.length_logits_over(&enc.memory.clone(), &spans)
    }

    /// Same, over an injected memory tensor and its sentence spans.
    pub fn length_logits_over(
        &mut self,
        memory: &Tensor<E>,
        spans: &[(usize, usize)],
    ) -> Result<Tensor<E>> {
        let head = self
            .model
            .len_head
            .clone()
            .ok_or_else(|| Error::Config("model has no length head".into()))?;
        let pooled = self.graph.mean_rows(memory, Arc::new(spans.to_vec()))?;
        self.linear(&head, &pooled)
    }

    /// Re-attach a detached memory to this session's graph.
    pub fn inject_memory(&mut self, mem: &Memory<E>) -> Tensor<E> {
        self.graph.input_shared(Arc::clone(&mem.data), vec![mem.rows, self.model.config.model_dim])
    }
}

/// Sinusoidal position encoding rows for explicit position indices.
pub fn sinusoid<E: Elem>(positions: &[usize], d: usize) -> Vec<E> {
    let mut out = Vec::with_capacity(positions.len() * d);
    for &pos in positions {
        for j in 0..d {
            let pair = (j / 2) as f64;
            let freq = (10000f64).powf(-2.0 * pair / d as f64);
            let angle = pos as f64 * freq;
            out.push(E::from_f64(if j % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    out
}

// ═══════════════════════════════════════════════════════════════════════
// Single-sentence convenience ops
// ═══════════════════════════════════════════════════════════════════════

impl<E: Elem> Model<E> {
    /// Encode one source; `pad_mask` marks PAD positions. Output has one row
    /// per input token.
    pub fn encode(&self, src_ids: &[u32], pad_mask: &[bool]) -> Result<Memory<E>> {
        if src_ids.len() != pad_mask.len() {
            return Err(Error::ShapeMismatch {
                op: "encode",
                lhs: vec![src_ids.len()],
                rhs: vec![pad_mask.len()],
            });
        }
        if src_ids.len() > self.config.max_position {
            return Err(Error::PositionOverflow {
                position: src_ids.len(),
                max: self.config.max_position,
            });
        }
        let mut s = self.session();
        let enc = s.encode_batch(&[src_ids], Some(&[pad_mask.to_vec()]))?;
        Ok(enc.detach())
    }

    /// One decoder forward over a full input block at explicit positions.
    pub fn decode_step(
        &self,
        dec_ids: &[u32],
        positions: &[usize],
        memory: &Memory<E>,
        mode: DecoderMode,
    ) -> Result<Vec<E>> {
        if dec_ids.len() != positions.len() {
            return Err(Error::ShapeMismatch {
                op: "decode_step",
                lhs: vec![dec_ids.len()],
                rhs: vec![positions.len()],
            });
        }
        let mut s = self.session();
        let mem = s.inject_memory(memory);
        let logits = s.decode_batch(
            &[DecInput { ids: dec_ids, positions }],
            &mem,
            &memory.spans,
            memory.kv_allowed.as_ref(),
            &[0],
            mode,
        )?;
        Ok(logits.data.as_ref().clone())
    }
}

// ═══════════════════════════════════════════════════════════════════════
// Checkpoints
// ═══════════════════════════════════════════════════════════════════════

#[derive(Debug, Serialize, Deserialize)]
struct ParamMeta {
    name: String,
    shape: Vec<usize>,
    /// Float offset into the blob that follows the manifest line.
    offset: usize,
}

/// First line of a checkpoint file: UTF-8 JSON manifest. The rest of the
/// file is the little-endian f32 blob, parameters in manifest order.
#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: String,
    config: ModelConfig,
    step: u64,
    provenance: Option<Provenance>,
    params: Vec<ParamMeta>,
}

const CKPT_FORMAT: &str = "hrt.ckpt.v1";

impl<E: Elem> Model<E> {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut metas = Vec::with_capacity(self.store.len());
        let mut offset = 0usize;
        for e in self.store.iter() {
            metas.push(ParamMeta { name: e.name.clone(), shape: e.shape.clone(), offset });
            offset += e.data.len();
        }
        let manifest = Manifest {
            format: CKPT_FORMAT.into(),
            config: self.config.clone(),
            step: self.step,
            provenance: self.provenance.clone(),
            params: metas,
        };
        let json = serde_json::to_string(&manifest)
            .map_err(|e| Error::Checkpoint(format!("manifest encode: {e}")))?;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        f.write_all(json.as_bytes())?;
        f.write_all(b"\n")?;
        for e in self.store.iter() {
            for &v in e.data.iter() {
                f.write_all(&v.to_f32().to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut raw = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?
            .read_to_end(&mut raw)?;
        let nl = raw
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Checkpoint("missing manifest line".into()))?;
        let manifest: Manifest = serde_json::from_slice(&raw[..nl])
            .map_err(|e| Error::Checkpoint(format!("manifest parse: {e}")))?;
        if manifest.format != CKPT_FORMAT {
            return Err(Error::Checkpoint(format!("unknown format {:?}", manifest.format)));
        }
        let blob = &raw[nl + 1..];
        let floats = blob.len() / 4;
        let mut model = Model::<E>::new(manifest.config.clone(), 0)?;
        if manifest.params.len() != model.store.len() {
            return Err(Error::Checkpoint(format!(
                "parameter count mismatch: file has {}, config implies {}",
                manifest.params.len(),
                model.store.len()
            )));
        }
        for (pid, meta) in manifest.params.iter().enumerate() {
            let e = model.store.entry(pid);
            if e.name != meta.name || e.shape != meta.shape {
                return Err(Error::Checkpoint(format!(
                    "parameter {pid} mismatch: file {} {:?}, config implies {} {:?}",
                    meta.name, meta.shape, e.name, e.shape
                )));
            }
            let n: usize = meta.shape.iter().product();
            if meta.offset + n > floats {
                return Err(Error::Checkpoint(format!("blob truncated at {}", meta.name)));
            }
            let mut data = Vec::with_capacity(n);
            for i in 0..n {
                let base = (meta.offset + i) * 4;
                let v = f32::from_le_bytes([blob[base], blob[base + 1], blob[base + 2], blob[base + 3]]);
                data.push(E::from_f32(v));
            }
            model.store.set(pid, data);
        }
        model.step = manifest.step;
        model.provenance = manifest.provenance;
        Ok(model)
    }

    /// Copy every parameter from `source` verbatim. Errors if any name or
    /// shape differs.
    pub fn init_from(&mut self, source: &Model<E>) -> Result<()> {
        if self.store.len() != source.store.len() {
            return Err(Error::Checkpoint(format!(
                "init_from: {} vs {} parameters",
                source.store.len(),
                self.store.len()
            )));
        }
        for pid in 0..self.store.len() {
            let (dst, src) = (self.store.entry(pid), source.store.entry(pid));
            if dst.name != src.name || dst.shape != src.shape {
                return Err(Error::Checkpoint(format!(
                    "init_from: parameter mismatch {} {:?} vs {} {:?}",
                    src.name, src.shape, dst.name, dst.shape
                )));
            }
            let data = src.data.as_ref().clone();
            self.store.set(pid, data);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 16,
            model_dim: 16,
            ffn_dim: 24,
            heads: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            max_position: 32,
            dropout: 0.0,
            chunk_size: 2,
            length_head: false,
        }
    }

    fn tiny_model() -> Model<f32> {
        Model::new(tiny_config(), 42).unwrap()
    }

    #[test]
    fn encode_shape_law() {
        let m = tiny_model();
        let mem = m.encode(&[8], &[false]).unwrap();
        assert_eq!(mem.rows, 1);
        assert_eq!(mem.data.len(), m.config.model_dim);
    }

    #[test]
    fn appended_pad_leaves_memory_unchanged() {
        let m = tiny_model();
        let src = [8u32, 9, 10];
        let base = m.encode(&src, &[false; 3]).unwrap();
        let padded = m
            .encode(&[8, 9, 10, vocab::PAD, vocab::PAD], &[false, false, false, true, true])
            .unwrap();
        let d = m.config.model_dim;
        for r in 0..3 {
            for j in 0..d {
                let a = base.data[r * d + j];
                let b = padded.data[r * d + j];
                assert!((a - b).abs() < 1e-5, "row {r} col {j}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn permuting_tokens_changes_memory() {
        let m = tiny_model();
        let a = m.encode(&[8, 9], &[false; 2]).unwrap();
        let b = m.encode(&[9, 8], &[false; 2]).unwrap();
        let diff = a.data.iter().zip(b.data.iter()).any(|(x, y)| (x - y).abs() > 1e-6);
        assert!(diff, "self-attention must be position-aware");
    }

    #[test]
    fn causal_rows_ignore_later_inputs() {
        let m = tiny_model();
        let mem = m.encode(&[8, 9, 10], &[false; 3]).unwrap();
        let v = m.config.vocab_size;
        let l1 = m
            .decode_step(&[vocab::BOS, 8, 9], &[0, 1, 2], &mem, DecoderMode::Causal)
            .unwrap();
        let l2 = m
            .decode_step(&[vocab::BOS, 8, 12], &[0, 1, 2], &mem, DecoderMode::Causal)
            .unwrap();
        assert_eq!(l1[..2 * v], l2[..2 * v], "earlier rows must be bit-identical");
        assert_ne!(l1[2 * v..], l2[2 * v..]);
    }

    #[test]
    fn full_mode_sees_everything() {
        let m = tiny_model();
        let mem = m.encode(&[8, 9, 10], &[false; 3]).unwrap();
        let l1 = m
            .decode_step(&[vocab::MASK, 9, vocab::EOS], &[1, 2, 3], &mem, DecoderMode::Full)
            .unwrap();
        let l2 = m
            .decode_step(&[vocab::MASK, 10, vocab::EOS], &[1, 2, 3], &mem, DecoderMode::Full)
            .unwrap();
        let v = m.config.vocab_size;
        // replacing a middle token changes the first row too
        assert_ne!(l1[..v], l2[..v]);
    }

    #[test]
    fn sparse_positions_give_one_row_per_token() {
        let m = tiny_model();
        let mem = m.encode(&[8, 9, 10, 11], &[false; 4]).unwrap();
        let b2 = vocab::bos_k(2).unwrap();
        let logits =
            m.decode_step(&[b2, 9, 11], &[0, 2, 4], &mem, DecoderMode::Causal).unwrap();
        assert_eq!(logits.len(), 3 * m.config.vocab_size);
    }

    #[test]
    fn shared_decoder_identity() {
        let mut m = tiny_model();
        assert!(m.shared_decoder_check());
        // parameter updates keep the tie
        m.store.update(3, |w| w[0] += 1.0);
        assert!(m.shared_decoder_check());
        m.unshare_decoder();
        assert!(!m.shared_decoder_check());
    }

    #[test]
    fn param_count_matches_plain_at_model() {
        let hrt = tiny_model();
        let at = Model::<f32>::new(ModelConfig { chunk_size: 1, ..tiny_config() }, 7).unwrap();
        assert_eq!(hrt.param_count(), at.param_count());
        // the length head is the one legitimate difference, for the
        // mask-predict baseline only
        let cmlm =
            Model::<f32>::new(ModelConfig { length_head: true, ..tiny_config() }, 7).unwrap();
        assert!(cmlm.param_count() > at.param_count());
    }

    #[test]
    fn checkpoint_roundtrip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("a.ckpt");
        let p2 = dir.path().join("b.ckpt");
        let mut m = tiny_model();
        m.step = 123;
        m.provenance = Some(Provenance {
            mode: "at_only".into(),
            p_raw: 1.0,
            label_smoothing: 0.1,
            init: "random".into(),
            seed: 42,
        });
        m.save(&p1).unwrap();
        let loaded = Model::<f32>::load(&p1).unwrap();
        assert_eq!(loaded.step, 123);
        loaded.save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn load_rejects_mismatched_config() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        tiny_model().save(&p).unwrap();
        let raw = std::fs::read(&p).unwrap();
        let nl = raw.iter().position(|&b| b == b'\n').unwrap();
        let mut manifest: serde_json::Value = serde_json::from_slice(&raw[..nl]).unwrap();
        manifest["params"][0]["name"] = serde_json::Value::String("wrong.name".into());
        let mut tampered = serde_json::to_vec(&manifest).unwrap();
        tampered.push(b'\n');
        tampered.extend_from_slice(&raw[nl + 1..]);
        let p2 = dir.path().join("bad.ckpt");
        std::fs::write(&p2, tampered).unwrap();
        assert!(Model::<f32>::load(&p2).is_err());
    }

    #[test]
    fn golden_dense_decoding_regression() {
        // Frozen logits from a seeded model: dense positions (0,1,2) in
        // CAUSAL mode must keep reproducing this exact run.
        let m = tiny_model();
        let mem = m.encode(&[8, 9, 10, vocab::EOS], &[false; 4]).unwrap();
        let logits = m
            .decode_step(&[vocab::BOS, 8, 9], &[0, 1, 2], &mem, DecoderMode::Causal)
            .unwrap();
        let golden: [(usize, f32); 5] = [
            (0, 1.1577401),
            (7, -0.96265185),
            (19, -0.26512837),
            (43, -1.2521313),
            (47, 1.962066),
        ];
        for (i, want) in golden {
            assert_eq!(logits[i], want, "logit {i} drifted");
        }
    }

    #[test]
    fn full_model_loss_grad_check() {
        for (name, err) in full_model_grad_check(1e-5).unwrap() {
            assert!(err < 1e-4, "{name}: grad error {err}");
        }
    }

}

/// Gradient-check every parameter of a small two-layer model against
/// central differences of the decoder cross-entropy. Returns per-parameter
/// `(name, max rel error)`.
pub fn full_model_grad_check(eps: f64) -> Result<Vec<(String, f64)>> {
    let config = ModelConfig {
        vocab_size: 12,
        model_dim: 8,
        ffn_dim: 12,
        heads: 2,
        encoder_layers: 1,
        decoder_layers: 1,
        max_position: 16,
        dropout: 0.0,
        chunk_size: 2,
        length_head: false,
    };
    let model = Model::<f64>::new(config, 5)?;
    let src: Vec<u32> = vec![8, 9, 10];
    let ids: Vec<u32> = vec![crate::vocab::BOS, 9, 8];
    let positions = [0usize, 1, 2];
    let targets: Vec<u32> = vec![9, 8, crate::vocab::EOS];
    let ignore = [false, false, false];
    let mut out = Vec::with_capacity(model.store.len());
    for pid in 0..model.store.len() {
        let entry = model.store.entry(pid);
        let (x0, shape, name) =
            (entry.data.as_ref().clone(), entry.shape.clone(), entry.name.clone());
        let err = crate::tensor::grad_check(
            |g, xt| {
                let mut s = model.session();
                s.graph = std::mem::take(g);
                s.override_param(pid, xt.clone());
                let res = (|| {
                    let enc = s.encode_batch(&[&src], None)?;
                    let logits = s.decode_batch(
                        &[DecInput { ids: &ids, positions: &positions }],
                        &enc.memory,
                        &enc.spans,
                        None,
                        &[0],
                        DecoderMode::Causal,
                    )?;
                    let (loss, _) = s.graph.cross_entropy(&logits, &targets, &ignore, 0.1)?;
                    Ok(loss)
                })();
                *g = std::mem::take(&mut s.graph);
                res
            },
            &x0,
            &shape,
            eps,
        )?;
        out.push((name, err));
    }
    Ok(out)
}
