//! Vision-language bridge: linear token projection with layer norm, a
//! K-query cross-attention pooler producing a fixed-size visual prefix, an
//! autoregressive caption likelihood against a pluggable sequence decoder,
//! and length-unnormalized beam search. The included decoder is a 2-layer
//! causal transformer with cross-attention to the prefix and a whitespace
//! vocabulary.

use std::collections::HashMap;

use ndarray::IxDyn;
use radenc_core::error::{Error, Result};
use radenc_core::ops;
use radenc_core::optim::{AdamW, GradAccumulator};
use radenc_core::tensor::{Arr, Bindings, Tensor};
use radenc_core::{ImageBatch, ParameterStore, Rng};
use radenc_data::{epoch_order, CapDataset};
use radenc_metrics::{rouge_l, BleuAccumulator};
use serde::{Deserialize, Serialize};

use crate::encoder::{register as register_encoder, Encoder, EncoderConfig};
use crate::fwd::{layer_norm_param, linear_param, Fwd};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;

/// Whitespace-token vocabulary with fixed special ids.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    words: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn from_captions<S: AsRef<str>>(captions: &[S]) -> Vocab {
        let mut words: Vec<String> = vec![
            "<pad>".into(),
            "<bos>".into(),
            "<eos>".into(),
            "<unk>".into(),
        ];
        for c in captions {
            for w in c.as_ref().split_whitespace() {
                if !words.iter().any(|x| x == w) {
                    words.push(w.to_string());
                }
            }
        }
        let index = words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
        Vocab { words, index }
    }

    pub fn rebuild_index(&mut self) {
        self.index = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i as u32))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// `<bos> tokens <eos>`.
    pub fn encode(&self, caption: &str) -> Vec<u32> {
        let mut out = vec![BOS];
        for w in caption.split_whitespace() {
            out.push(self.index.get(w).copied().unwrap_or(UNK));
        }
        out.push(EOS);
        out
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| id > UNK)
            .map(|&id| self.words[id as usize].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

fn d_dl() -> usize {
    64
}
fn d_k() -> usize {
    64
}
fn d_beams() -> usize {
    5
}
fn d_max_tokens() -> usize {
    64
}
fn d_epochs() -> usize {
    20
}
fn d_lr() -> f64 {
    5e-5
}
fn d_eff_batch() -> usize {
    64
}
fn d_micro() -> usize {
    8
}
fn d_layers() -> usize {
    2
}
fn d_heads() -> usize {
    4
}
fn d_image() -> usize {
    56
}
fn d_one() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CapConfig {
    /// Decoder embedding width D_l; the projection maps D_v -> D_l.
    #[serde(default = "d_dl")]
    pub d_l: usize,
    /// Number of learnable pooling queries K.
    #[serde(default = "d_k")]
    pub k_queries: usize,
    #[serde(default = "d_beams")]
    pub beams: usize,
    #[serde(default = "d_max_tokens")]
    pub max_tokens: usize,
    #[serde(default = "d_epochs")]
    pub epochs: usize,
    #[serde(default = "d_lr")]
    pub learning_rate: f64,
    #[serde(default = "d_eff_batch")]
    pub effective_batch: usize,
    #[serde(default = "d_micro")]
    pub micro_batch: usize,
    #[serde(default = "d_layers")]
    pub decoder_layers: usize,
    #[serde(default = "d_heads")]
    pub decoder_heads: usize,
    #[serde(default = "d_image")]
    pub image_size: usize,
    #[serde(default = "d_one")]
    pub eval_every: usize,
    #[serde(default)]
    pub early_stop_train_loss: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl Default for CapConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults")
    }
}

impl CapConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beams == 0 {
            return Err(Error::domain("beams must be >= 1"));
        }
        if !self.d_l.is_multiple_of(self.decoder_heads) {
            return Err(Error::config("d_l must be divisible by decoder_heads"));
        }
        if self.micro_batch == 0 || self.effective_batch == 0 {
            return Err(Error::config("batch sizes must be positive"));
        }
        Ok(())
    }

    /// Longest token sequence the decoder's positional table supports
    /// (bos + generated tokens + eos).
    pub fn max_len(&self) -> usize {
        self.max_tokens + 2
    }
}

// ---------------------------------------------------------------------------
// Bridge: projection + patch merger
// ---------------------------------------------------------------------------

pub fn register_bridge(
    store: &mut ParameterStore,
    cfg: &CapConfig,
    encoder_dim: usize,
    vocab_size: usize,
    rng: &mut Rng,
) -> Result<()> {
    let dl = cfg.d_l;
    let tn = |shape: &[usize], rng: &mut Rng| {
        Arr::from_shape_fn(IxDyn(shape), |_| rng.trunc_normal(0.02))
    };
    store.insert("cap.proj.weight", tn(&[dl, encoder_dim], rng))?;
    store.insert("cap.proj_ln.gamma", Arr::from_elem(IxDyn(&[dl]), 1.0))?;
    store.insert_zeros("cap.proj_ln.beta", &[dl])?;
    store.insert("cap.merger.queries", tn(&[cfg.k_queries, dl], rng))?;

    store.insert("cap.decoder.embed.weight", tn(&[vocab_size, dl], rng))?;
    store.insert("cap.decoder.pos.weight", tn(&[cfg.max_len(), dl], rng))?;
    for i in 0..cfg.decoder_layers {
        let p = format!("cap.decoder.layers.{i}");
        for norm in ["self_norm", "cross_norm", "mlp_norm"] {
            store.insert(&format!("{p}.{norm}.gamma"), Arr::from_elem(IxDyn(&[dl]), 1.0))?;
            store.insert_zeros(&format!("{p}.{norm}.beta"), &[dl])?;
        }
        for attn in ["self_attn", "cross_attn"] {
            for name in ["q", "k", "v", "proj"] {
                store.insert(&format!("{p}.{attn}.{name}.weight"), tn(&[dl, dl], rng))?;
                store.insert_zeros(&format!("{p}.{attn}.{name}.bias"), &[dl])?;
            }
        }
        store.insert(&format!("{p}.mlp.fc1.weight"), tn(&[4 * dl, dl], rng))?;
        store.insert_zeros(&format!("{p}.mlp.fc1.bias"), &[4 * dl])?;
        store.insert(&format!("{p}.mlp.fc2.weight"), tn(&[dl, 4 * dl], rng))?;
        store.insert_zeros(&format!("{p}.mlp.fc2.bias"), &[dl])?;
    }
    store.insert("cap.decoder.norm.gamma", Arr::from_elem(IxDyn(&[dl]), 1.0))?;
    store.insert_zeros("cap.decoder.norm.beta", &[dl])?;
    store.insert("cap.decoder.out.weight", tn(&[vocab_size, dl], rng))?;
    store.insert_zeros("cap.decoder.out.bias", &[vocab_size])?;
    Ok(())
}

/// `Z = LN(W_p T)`: linear projection of patch tokens followed by per-token
/// layer normalization.
pub fn project_tokens(fwd: &Fwd, tokens: &Tensor) -> Tensor {
    let w = fwd.get("cap.proj.weight");
    let projected = ops::linear(tokens, &w, None);
    layer_norm_param(fwd, "cap.proj_ln", &projected)
}

/// `A = softmax(Q Z^T / sqrt(D_l))`, `P = A Z`: fixed learnable queries
/// attend directly over the N projected tokens, no key/value projections.
/// Returns `(P [B,K,D_l], A [B,K,N])`.
pub fn patch_merge(fwd: &Fwd, z: &Tensor) -> (Tensor, Tensor) {
    let q = fwd.get("cap.merger.queries");
    let (b, _n, dl) = (z.shape()[0], z.shape()[1], z.shape()[2]);
    let k = q.shape()[0];
    let qb = ops::add(&q, &Tensor::lit(Arr::zeros(IxDyn(&[b, k, dl]))));
    let zt = ops::permute(z, &[0, 2, 1]);
    let logits = ops::scale(&ops::matmul(&qb, &zt), 1.0 / (dl as f64).sqrt());
    let attn = ops::softmax(&logits, 2);
    let pooled = ops::matmul(&attn, z);
    (pooled, attn)
}

// ---------------------------------------------------------------------------
// Sequence decoder interface and the toy transformer implementation
// ---------------------------------------------------------------------------

/// Contract between the bridge and any autoregressive decoder: teacher-forced
/// log-probabilities for training and stepwise log-probabilities for search.
pub trait SeqDecoder {
    fn vocab_size(&self) -> usize;

    /// `inputs[b]` is the shifted target (starts with BOS), padded with PAD
    /// to a common length T. Returns `[B, T, V]` log-probabilities for the
    /// next token at each position.
    fn teacher_forced_log_probs(&self, prefix: &Tensor, inputs: &[Vec<u32>]) -> Tensor;

    /// Next-token log-probabilities given one visual prefix `[K, D_l]` and
    /// the history so far (history[0] == BOS).
    fn step_log_probs(&self, prefix: &Arr, history: &[u32]) -> Vec<f64>;
}

/// 2-layer causal transformer with cross-attention to the visual prefix.
pub struct ToyDecoder<'a> {
    pub fwd: &'a Fwd<'a>,
    pub cfg: &'a CapConfig,
    pub vocab_size: usize,
}

impl ToyDecoder<'_> {
    fn attention(
        &self,
        prefix: &str,
        x: &Tensor,
        kv: &Tensor,
        causal: bool,
    ) -> Tensor {
        let dl = self.cfg.d_l;
        let heads = self.cfg.decoder_heads;
        let dh = dl / heads;
        let (b, t) = (x.shape()[0], x.shape()[1]);
        let s = kv.shape()[1];
        let split = |y: &Tensor, len: usize| {
            let y = ops::reshape(y, &[b, len, heads, dh]);
            let y = ops::permute(&y, &[0, 2, 1, 3]);
            ops::reshape(&y, &[b * heads, len, dh])
        };
        let q = split(&linear_param(self.fwd, &format!("{prefix}.q"), x), t);
        let k = split(&linear_param(self.fwd, &format!("{prefix}.k"), kv), s);
        let v = split(&linear_param(self.fwd, &format!("{prefix}.v"), kv), s);
        let mut scores = ops::scale(&ops::matmul(&q, &ops::permute(&k, &[0, 2, 1])), 1.0 / (dh as f64).sqrt());
        if causal {
            let mut mask = Arr::zeros(IxDyn(&[t, s]));
            for i in 0..t {
                for j in (i + 1)..s {
                    mask[[i, j]] = -1e30;
                }
            }
            scores = ops::add(&scores, &Tensor::lit(mask));
        }
        let attn = ops::softmax(&scores, 2);
        let o = ops::matmul(&attn, &v);
        let o = ops::reshape(&ops::permute(&ops::reshape(&o, &[b, heads, t, dh]), &[0, 2, 1, 3]), &[b, t, dl]);
        linear_param(self.fwd, &format!("{prefix}.proj"), &o)
    }

    fn forward(&self, prefix: &Tensor, inputs: &[Vec<u32>]) -> Tensor {
        let b = inputs.len();
        let t = inputs.iter().map(Vec::len).max().unwrap_or(0);
        assert!(t <= self.cfg.max_len(), "sequence longer than positional table");
        let dl = self.cfg.d_l;
        let mut flat_ids = Vec::with_capacity(b * t);
        for seq in inputs {
            for pos in 0..t {
                flat_ids.push(*seq.get(pos).unwrap_or(&PAD) as usize);
            }
        }
        let embed = fwdget_gather(self.fwd, "cap.decoder.embed.weight", &flat_ids);
        let mut x = ops::reshape(&embed, &[b, t, dl]);
        let pos_ids: Vec<usize> = (0..t).collect();
        let pos = fwdget_gather(self.fwd, "cap.decoder.pos.weight", &pos_ids);
        x = ops::add(&x, &ops::reshape(&pos, &[1, t, dl]));

        for i in 0..self.cfg.decoder_layers {
            let p = format!("cap.decoder.layers.{i}");
            let h = layer_norm_param(self.fwd, &format!("{p}.self_norm"), &x);
            let sa = self.attention(&format!("{p}.self_attn"), &h, &h, true);
            x = ops::add(&x, &sa);
            let h = layer_norm_param(self.fwd, &format!("{p}.cross_norm"), &x);
            let ca = self.attention(&format!("{p}.cross_attn"), &h, prefix, false);
            x = ops::add(&x, &ca);
            let h = layer_norm_param(self.fwd, &format!("{p}.mlp_norm"), &x);
            let h = linear_param(self.fwd, &format!("{p}.mlp.fc1"), &h);
            let h = ops::gelu(&h);
            let h = linear_param(self.fwd, &format!("{p}.mlp.fc2"), &h);
            x = ops::add(&x, &h);
        }
        let x = layer_norm_param(self.fwd, "cap.decoder.norm", &x);
        let w = self.fwd.get("cap.decoder.out.weight");
        let bb = self.fwd.get("cap.decoder.out.bias");
        ops::linear(&x, &w, Some(&bb))
    }
}

fn fwdget_gather(fwd: &Fwd, path: &str, ids: &[usize]) -> Tensor {
    ops::gather_rows(&fwd.get(path), ids)
}

impl SeqDecoder for ToyDecoder<'_> {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn teacher_forced_log_probs(&self, prefix: &Tensor, inputs: &[Vec<u32>]) -> Tensor {
        let logits = self.forward(prefix, inputs);
        ops::log_softmax(&logits, 2)
    }

    fn step_log_probs(&self, prefix: &Arr, history: &[u32]) -> Vec<f64> {
        let k = prefix.shape()[0];
        let dl = prefix.shape()[1];
        let p3 = prefix
            .view()
            .into_shape_with_order(IxDyn(&[1, k, dl]))
            .unwrap()
            .to_owned();
        let logp = self.teacher_forced_log_probs(&Tensor::lit(p3), &[history.to_vec()]);
        let t = history.len();
        logp.value()
            .slice(ndarray::s![0, t - 1, ..])
            .iter()
            .cloned()
            .collect()
    }
}

// ---------------------------------------------------------------------------
// Loss and generation
// ---------------------------------------------------------------------------

/// Sum of next-token negative log-likelihoods over non-pad positions plus
/// the position count; divide to get the mean the training objective uses.
pub fn caption_nll_sum(
    prefix: &Tensor,
    targets: &[Vec<u32>],
    decoder: &dyn SeqDecoder,
) -> Result<(Tensor, usize)> {
    if targets.is_empty() || targets.iter().any(|t| t.len() < 2) {
        return Err(Error::data("caption targets need at least bos+eos"));
    }
    let inputs: Vec<Vec<u32>> = targets.iter().map(|t| t[..t.len() - 1].to_vec()).collect();
    let logp = decoder.teacher_forced_log_probs(prefix, &inputs);
    let (b, t, v) = (logp.shape()[0], logp.shape()[1], logp.shape()[2]);
    let flat = ops::reshape(&logp, &[b * t, v]);
    let mut ids = vec![0usize; b * t];
    let mut include = vec![false; b * t];
    let mut count = 0usize;
    for (bi, target) in targets.iter().enumerate() {
        for pos in 0..t {
            if pos + 1 < target.len() {
                let y = target[pos + 1];
                if y != PAD {
                    ids[bi * t + pos] = y as usize;
                    include[bi * t + pos] = true;
                    count += 1;
                }
            }
        }
    }
    if count == 0 {
        return Err(Error::data("caption batch has no supervised positions"));
    }
    Ok((ops::nll_sum(&flat, &ids, Some(&include)), count))
}

/// Mean negative log-likelihood per non-pad target position.
pub fn caption_loss(
    prefix: &Tensor,
    targets: &[Vec<u32>],
    decoder: &dyn SeqDecoder,
) -> Result<Tensor> {
    let (sum, count) = caption_nll_sum(prefix, targets, decoder)?;
    Ok(ops::scale(&sum, 1.0 / count as f64))
}

#[derive(Debug, Clone)]
struct Beam {
    tokens: Vec<u32>,
    score: f64,
    finished: bool,
}

/// Length-unnormalized beam search over one visual prefix. Terminates each
/// beam at EOS or after `max_tokens` generated tokens; `beams == 1` is
/// greedy decoding. Ties break toward the lower token id, so the result is
/// deterministic for a fixed decoder and prefix.
pub fn generate(
    prefix: &Arr,
    decoder: &dyn SeqDecoder,
    beams: usize,
    max_tokens: usize,
) -> Result<Vec<u32>> {
    generate_scored(prefix, decoder, beams, max_tokens).map(|(ids, _)| ids)
}

/// `generate` plus the total log-probability of the winning beam.
pub fn generate_scored(
    prefix: &Arr,
    decoder: &dyn SeqDecoder,
    beams: usize,
    max_tokens: usize,
) -> Result<(Vec<u32>, f64)> {
    if beams < 1 {
        return Err(Error::domain("beams must be >= 1"));
    }
    let mut alive = vec![Beam {
        tokens: vec![BOS],
        score: 0.0,
        finished: false,
    }];
    loop {
        if alive.iter().all(|b| b.finished) {
            break;
        }
        let mut candidates: Vec<Beam> = Vec::new();
        for beam in &alive {
            if beam.finished {
                candidates.push(beam.clone());
                continue;
            }
            let logp = decoder.step_log_probs(prefix, &beam.tokens);
            for (tok, lp) in logp.iter().enumerate() {
                let tok = tok as u32;
                if tok == PAD || tok == BOS {
                    continue;
                }
                let mut tokens = beam.tokens.clone();
                tokens.push(tok);
                let generated = tokens.len() - 1;
                let finished = tok == EOS || generated > max_tokens || generated >= max_tokens && tok != EOS;
                candidates.push(Beam {
                    tokens,
                    score: beam.score + lp,
                    finished: finished || generated >= max_tokens,
                });
            }
        }
        candidates.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap()
                .then_with(|| a.tokens.cmp(&b.tokens))
        });
        candidates.truncate(beams);
        alive = candidates;
    }
    let best = alive
        .into_iter()
        .max_by(|a, b| a.score.partial_cmp(&b.score).unwrap().then_with(|| b.tokens.cmp(&a.tokens)))
        .expect("at least one beam");
    let mut out = best.tokens;
    out.remove(0); // bos
    if out.last() == Some(&EOS) {
        out.pop();
    }
    Ok((out, best.score))
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct CapEpoch {
    pub epoch: usize,
    pub split: String,
    pub loss: f64,
    pub bleu: f64,
    pub rouge_l: f64,
}

impl CapEpoch {
    pub fn csv_header() -> &'static str {
        "epoch,split,loss,bleu,rouge_l"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.epoch, self.split, self.loss, self.bleu, self.rouge_l
        )
    }
}

pub struct Captioner {
    pub cfg: CapConfig,
    pub enc_cfg: EncoderConfig,
    pub store: ParameterStore,
    pub vocab: Vocab,
    pub rng: Rng,
    opt: AdamW,
    /// Cached encoder patch tokens per training image (frozen encoder).
    token_cache: Vec<Arr>,
}

impl Captioner {
    /// Fresh captioner over a frozen randomly initialized encoder; callers
    /// with a pretrained encoder pass its store through `with_store`.
    pub fn new(cfg: CapConfig, enc_cfg: EncoderConfig, dataset: &CapDataset) -> Result<Self> {
        cfg.validate()?;
        let mut rng = Rng::seed_from(cfg.seed);
        let mut store = ParameterStore::new();
        register_encoder(&mut store, &enc_cfg, "encoder", &mut rng)?;
        Self::with_store(store, cfg, enc_cfg, dataset, rng)
    }

    pub fn with_store(
        mut store: ParameterStore,
        cfg: CapConfig,
        enc_cfg: EncoderConfig,
        dataset: &CapDataset,
        mut rng: Rng,
    ) -> Result<Self> {
        if dataset.train.is_empty() {
            return Err(Error::data("captioning dataset has an empty train split"));
        }
        store.freeze_prefix("encoder.");
        let vocab = Vocab::from_captions(&dataset.train.captions);
        register_bridge(&mut store, &cfg, enc_cfg.embed_dim, vocab.len(), &mut rng)?;
        let mut cap = Captioner {
            cfg,
            enc_cfg,
            store,
            vocab,
            rng,
            opt: AdamW::new(),
            token_cache: Vec::new(),
        };
        cap.token_cache = cap.encode_images(&dataset.train.images)?;
        Ok(cap)
    }

    /// Frozen-encoder patch tokens `[N, D]` for each image.
    pub fn encode_images(&self, images: &[Arr]) -> Result<Vec<Arr>> {
        let bind = Bindings::eval(&self.store);
        let fwd = Fwd::eval(&bind);
        let enc = Encoder::new(&fwd, &self.enc_cfg, "encoder");
        let mut out = Vec::with_capacity(images.len());
        for img in images {
            let batch = ImageBatch::from_images(std::slice::from_ref(img))?;
            let tokens = enc.forward(&batch)?;
            let p = tokens.patches().value().clone();
            let (n, d) = (p.shape()[1], p.shape()[2]);
            out.push(p.into_shape_with_order(IxDyn(&[n, d])).unwrap());
        }
        Ok(out)
    }

    /// Stack cached token arrays for the given image indices, in order.
    fn stack_tokens(&self, idx: &[usize]) -> Tensor {
        let views: Vec<_> = idx
            .iter()
            .map(|&i| self.token_cache[i].view().insert_axis(ndarray::Axis(0)))
            .collect();
        Tensor::lit(ndarray::concatenate(ndarray::Axis(0), &views).unwrap().into_dyn())
    }

    /// One accumulated optimizer step over `group` (image indices + encoded
    /// captions): micro-batches contribute NLL sums, the final gradient is
    /// scaled by the total supervised position count. Returns the mean loss.
    pub fn step_on(&mut self, group: &[usize], captions: &[Vec<u32>]) -> Result<f64> {
        let mut acc = GradAccumulator::new();
        let mut total_positions = 0usize;
        let mut total_nll = 0.0;
        for (chunk_idx, chunk) in group.chunks(self.cfg.micro_batch).enumerate() {
            let offset = chunk_idx * self.cfg.micro_batch;
            let tokens = self.stack_tokens(chunk);
            let targets: Vec<Vec<u32>> = (0..chunk.len())
                .map(|i| captions[offset + i].clone())
                .collect();
            let bind = Bindings::train(&self.store);
            {
                let fwd = Fwd::eval(&bind);
                let z = project_tokens(&fwd, &tokens);
                let (prefix, _) = patch_merge(&fwd, &z);
                let decoder = ToyDecoder {
                    fwd: &fwd,
                    cfg: &self.cfg,
                    vocab_size: self.vocab.len(),
                };
                let (nll, count) = caption_nll_sum(&prefix, &targets, &decoder)?;
                total_positions += count;
                total_nll += nll.item();
                nll.backward();
            }
            acc.add(&bind.grads());
        }
        if total_positions == 0 {
            return Err(Error::data("empty caption group"));
        }
        let grads = acc.finish(1.0 / total_positions as f64);
        self.opt
            .step(&mut self.store, &grads, self.cfg.learning_rate, 0.0)?;
        Ok(total_nll / total_positions as f64)
    }

    /// Caption one image with the trained bridge.
    pub fn caption_image(&self, image: &Arr) -> Result<String> {
        Ok(self.caption_image_scored(image)?.0)
    }

    /// Caption plus the beam's total log-probability.
    pub fn caption_image_scored(&self, image: &Arr) -> Result<(String, f64)> {
        let tokens = self.encode_images(std::slice::from_ref(image))?;
        let (ids, score) = self.generate_from_tokens_scored(&tokens[0])?;
        Ok((self.vocab.decode(&ids), score))
    }

    pub fn generate_from_tokens(&self, tokens: &Arr) -> Result<Vec<u32>> {
        self.generate_from_tokens_scored(tokens).map(|(ids, _)| ids)
    }

    pub fn generate_from_tokens_scored(&self, tokens: &Arr) -> Result<(Vec<u32>, f64)> {
        let bind = Bindings::eval(&self.store);
        let fwd = Fwd::eval(&bind);
        let (n, d) = (tokens.shape()[0], tokens.shape()[1]);
        let t3 = tokens
            .view()
            .into_shape_with_order(IxDyn(&[1, n, d]))
            .unwrap()
            .to_owned();
        let z = project_tokens(&fwd, &Tensor::lit(t3));
        let (prefix, _) = patch_merge(&fwd, &z);
        let p2 = prefix
            .value()
            .view()
            .into_shape_with_order(IxDyn(&[self.cfg.k_queries, self.cfg.d_l]))
            .unwrap()
            .to_owned();
        let decoder = ToyDecoder {
            fwd: &fwd,
            cfg: &self.cfg,
            vocab_size: self.vocab.len(),
        };
        generate_scored(&p2, &decoder, self.cfg.beams, self.cfg.max_tokens)
    }

    /// Epoch loop with gradient accumulation to the effective batch size.
    /// Logs train loss plus BLEU / ROUGE-L on the validation split.
    pub fn train(&mut self, dataset: &CapDataset) -> Result<Vec<CapEpoch>> {
        let encoded: Vec<Vec<u32>> = dataset
            .train
            .captions
            .iter()
            .map(|c| self.vocab.encode(c))
            .collect();
        let mut history = Vec::new();
        for epoch in 0..self.cfg.epochs {
            let order = epoch_order(dataset.train.len(), self.cfg.seed, epoch as u64);
            let mut loss_sum = 0.0;
            let mut groups = 0usize;
            for group in order.chunks(self.cfg.effective_batch) {
                let caps: Vec<Vec<u32>> = group.iter().map(|&i| encoded[i].clone()).collect();
                loss_sum += self.step_on_ordered(group, &caps)?;
                groups += 1;
            }
            let train_loss = loss_sum / groups as f64;

            let (bleu, rouge) = if !dataset.val.is_empty()
                && self.cfg.eval_every > 0
                && (epoch % self.cfg.eval_every == 0 || epoch + 1 == self.cfg.epochs)
            {
                self.eval_generation(&dataset.val.images, &dataset.val.captions)?
            } else {
                (f64::NAN, f64::NAN)
            };
            history.push(CapEpoch {
                epoch,
                split: "val".into(),
                loss: train_loss,
                bleu,
                rouge_l: rouge,
            });
            if let Some(target) = self.cfg.early_stop_train_loss {
                if train_loss < target {
                    break;
                }
            }
        }
        Ok(history)
    }

    fn step_on_ordered(&mut self, group: &[usize], captions: &[Vec<u32>]) -> Result<f64> {
        self.step_on(group, captions)
    }

    /// Corpus BLEU and mean ROUGE-L of beam-search captions against refs.
    pub fn eval_generation(&self, images: &[Arr], refs: &[String]) -> Result<(f64, f64)> {
        let tokens = self.encode_images(images)?;
        let mut bleu_acc = BleuAccumulator::new(4);
        let mut rouge_sum = 0.0;
        for (t, reference) in tokens.iter().zip(refs) {
            let ids = self.generate_from_tokens(t)?;
            let hyp_text = self.vocab.decode(&ids);
            let hyp: Vec<&str> = hyp_text.split_whitespace().collect();
            let rf: Vec<&str> = reference.split_whitespace().collect();
            bleu_acc.add(&hyp, std::slice::from_ref(&rf));
            rouge_sum += rouge_l(&hyp, &rf);
        }
        Ok((bleu_acc.finalize().bleu, rouge_sum / refs.len() as f64))
    }
}
