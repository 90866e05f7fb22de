//! Decoder-only transformer over codebook indices.
//!
//! The vocabulary is the `K` codebook entries followed by three specials:
//! `START = K`, `END = K + 1` and `PAD = K + 2`. Training is teacher-forced
//! next-token cross-entropy with batch 1; generation is stochastic beam
//! search over a per-beam key/value cache.

use std::cmp::Ordering;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{Block, KvCache, LayerNorm, Linear};
use crate::tensor::{
    cosine_lr, epoch_stream, kernels, model_checkpoint, read_checkpoint, restore_adam,
    restore_params, write_checkpoint, AdamConfig, AdamState, BoundParams, Checkpoint, ParamSet,
    Resume, Tape, Tensor, TensorError, Var,
};
use crate::tree::{TreeError, VesselTree};
use crate::vqvae::{VqError, VqVae};

#[derive(Debug, Error)]
pub enum GptError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Vq(#[from] VqError),
    #[error("malformed tree: {0}")]
    Tree(#[from] TreeError),
    #[error("sequence of {len} tokens exceeds context length {context}")]
    Context { len: usize, context: usize },
    #[error("sequence `{id}`: token {token} at position {position} is outside the vocabulary of {vocab}")]
    Vocabulary {
        id: String,
        position: usize,
        token: usize,
        vocab: usize,
    },
    #[error("sequence `{id}` is not in training form: {reason}")]
    Form { id: String, reason: &'static str },
    #[error("empty token sequence")]
    Empty,
    #[error("{len} codebook tokens is not a multiple of {per_node}")]
    NotDivisible { len: usize, per_node: usize },
    #[error("empty training set")]
    EmptyDataset,
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GptConfig {
    /// Codebook size `K`; the vocabulary has `K + 3` entries.
    pub codebook_size: usize,
    pub context: usize,
    pub layers: usize,
    pub heads: usize,
    pub d_model: usize,
    /// Applied to the summed token and position embeddings while training.
    pub dropout: f64,
}

impl Default for GptConfig {
    fn default() -> Self {
        Self {
            codebook_size: 256,
            context: 4096,
            layers: 4,
            heads: 4,
            d_model: 256,
            dropout: 0.0,
        }
    }
}

impl GptConfig {
    pub fn vocab(&self) -> usize {
        self.codebook_size + 3
    }

    pub fn start(&self) -> usize {
        self.codebook_size
    }

    pub fn end(&self) -> usize {
        self.codebook_size + 1
    }

    pub fn pad(&self) -> usize {
        self.codebook_size + 2
    }

    pub fn validate(&self) -> Result<(), GptError> {
        let bad = |m: &str| Err(GptError::Config(m.to_string()));
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad("d_model must be divisible by heads");
        }
        if self.codebook_size < 2 {
            return bad("codebook needs at least two entries");
        }
        if self.context < 2 {
            return bad("context must hold at least two tokens");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must lie in [0, 1)");
        }
        Ok(())
    }
}

/// Codebook indices of one tree, as exchanged in JSON lines.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tree_id: String,
    pub indices: Vec<usize>,
}

impl TokenSequence {
    /// `START, indices..., END`.
    pub fn training_form(&self, cfg: &GptConfig) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.indices.len() + 2);
        out.push(cfg.start());
        out.extend_from_slice(&self.indices);
        out.push(cfg.end());
        out
    }
}

/// Checks the training-form invariants and the vocabulary bound.
pub fn check_training_form(id: &str, tokens: &[usize], cfg: &GptConfig) -> Result<(), GptError> {
    let form = |reason| GptError::Form {
        id: id.to_string(),
        reason,
    };
    if let Some((position, &token)) = tokens.iter().enumerate().find(|(_, &t)| t >= cfg.vocab()) {
        return Err(GptError::Vocabulary {
            id: id.to_string(),
            position,
            token,
            vocab: cfg.vocab(),
        });
    }
    if tokens.len() < 2 || tokens[0] != cfg.start() {
        return Err(form("must begin with START"));
    }
    if *tokens.last().unwrap() != cfg.end() {
        return Err(form("must end with END"));
    }
    let inner = &tokens[1..tokens.len() - 1];
    if inner.iter().any(|&t| t >= cfg.codebook_size) {
        return Err(form("special token inside the body"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gpt {
    pub config: GptConfig,
    pub params: ParamSet,
}

const TOK: &str = "tok_emb";
const POS: &str = "pos_emb";

impl Gpt {
    pub fn new(config: GptConfig, seed: u64) -> Result<Self, GptError> {
        config.validate()?;
        let mut rng = crate::rng::substream(seed, "gpt.init");
        let mut params = ParamSet::new();
        let (v, d) = (config.vocab(), config.d_model);
        let mut normal = |shape: &[usize], std: f64| {
            Tensor::from_fn(shape, |_| std * rng.sample::<f64, _>(StandardNormal))
        };
        params.insert(TOK, normal(&[v, d], 0.02));
        params.insert(POS, normal(&[config.context, d], 0.02));
        for i in 0..config.layers {
            Block::new(&mut params, &format!("block{i}"), d, config.heads, &mut rng);
        }
        LayerNorm::new(&mut params, "ln_f", d);
        Linear::new(&mut params, "head", d, v, &mut rng);
        // Zero head so the initial next-token distribution is uniform.
        params.get_mut("head.w")?.data_mut().fill(0.0);
        Ok(Self { config, params })
    }

    fn blocks(&self) -> Vec<Block> {
        (0..self.config.layers)
            .map(|i| Block::named(&format!("block{i}"), self.config.d_model, self.config.heads))
            .collect()
    }

    fn check_input(&self, tokens: &[usize]) -> Result<(), GptError> {
        if tokens.is_empty() {
            return Err(GptError::Empty);
        }
        if tokens.len() > self.config.context {
            return Err(GptError::Context {
                len: tokens.len(),
                context: self.config.context,
            });
        }
        if let Some((position, &token)) = tokens
            .iter()
            .enumerate()
            .find(|(_, &t)| t >= self.config.vocab())
        {
            return Err(GptError::Vocabulary {
                id: String::new(),
                position,
                token,
                vocab: self.config.vocab(),
            });
        }
        Ok(())
    }

    /// Logits `T × vocab`; row `t` scores the token following `tokens[..=t]`.
    pub fn logits_on(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        tokens: &[usize],
        dropout: Option<&mut crate::rng::Rng>,
    ) -> Result<Var, GptError> {
        self.check_input(tokens)?;
        let d = self.config.d_model;
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let tok = tape.gather_rows(p.var(TOK)?, tokens)?;
        let pos = tape.gather_rows(p.var(POS)?, &positions)?;
        let mut h = tape.add(tok, pos)?;
        if let Some(rng) = dropout {
            let rate = self.config.dropout;
            if rate > 0.0 {
                let keep = 1.0 / (1.0 - rate);
                let mask = Tensor::from_fn(&[tokens.len(), d], |_| {
                    if rng.random::<f64>() < rate {
                        0.0
                    } else {
                        keep
                    }
                });
                let m = tape.constant(mask);
                h = tape.mul(h, m)?;
            }
        }
        for b in self.blocks() {
            h = b.forward(tape, p, h, true)?;
        }
        h = LayerNorm::named("ln_f", d).forward(tape, p, h)?;
        Ok(Linear::named("head", d, self.config.vocab()).forward(tape, p, h)?)
    }

    /// All-position logits of `tokens` without gradients.
    pub fn logits(&self, tokens: &[usize]) -> Result<Tensor, GptError> {
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let y = self.logits_on(&mut tape, &p, tokens, None)?;
        Ok(tape.value(y).clone())
    }

    /// Scores of the token following `prefix`.
    pub fn next_token_logits(&self, prefix: &[usize]) -> Result<Vec<f64>, GptError> {
        if prefix.len() >= self.config.context {
            return Err(GptError::Context {
                len: prefix.len(),
                context: self.config.context,
            });
        }
        let all = self.logits(prefix)?;
        Ok(all.row(all.rows() - 1).to_vec())
    }

    /// Mean next-token negative log-likelihood of a training-form sequence.
    pub fn sequence_loss(&self, tokens: &[usize]) -> Result<f64, GptError> {
        if tokens.len() < 2 {
            return Err(GptError::Empty);
        }
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let y = self.logits_on(&mut tape, &p, &tokens[..tokens.len() - 1], None)?;
        let l = tape.cross_entropy(y, &tokens[1..])?;
        Ok(tape.value(l).item())
    }

    /// `Σ_t log p(tokens[t] | tokens[..t])` for `t ≥ 1`, by per-step
    /// log-softmax.
    pub fn log_prob(&self, tokens: &[usize]) -> Result<f64, GptError> {
        if tokens.len() < 2 {
            return Err(GptError::Empty);
        }
        let all = self.logits(&tokens[..tokens.len() - 1])?;
        Ok((0..all.rows())
            .map(|t| log_softmax(all.row(t))[tokens[t + 1]])
            .sum())
    }

    /// Key/value-cached decoder positioned before the first token.
    pub fn decoder(&self) -> Decoder<'_> {
        Decoder {
            model: self,
            blocks: self.blocks(),
            caches: vec![KvCache::default(); self.config.layers],
            len: 0,
        }
    }

    pub fn to_checkpoint(&self, adam: Option<&AdamState>, meta: serde_json::Value) -> Checkpoint {
        let m = serde_json::json!({
            "kind": "gpt",
            "config": self.config,
            "extra": meta,
        });
        model_checkpoint(&self.params, adam, m)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, Option<AdamState>), GptError> {
        if ck.meta.get("kind").and_then(|k| k.as_str()) != Some("gpt") {
            return Err(TensorError::Checkpoint("missing kind=gpt".into()).into());
        }
        let config: GptConfig = serde_json::from_value(ck.meta["config"].clone())
            .map_err(|e| TensorError::Checkpoint(e.to_string()))?;
        let template = Self::new(config.clone(), 0)?;
        let params = restore_params(ck, &template.params)?;
        let adam = restore_adam(ck, &params)?;
        Ok((Self { config, params }, adam))
    }

    pub fn save(
        &self,
        path: &Path,
        adam: Option<&AdamState>,
        meta: serde_json::Value,
    ) -> Result<(), GptError> {
        Ok(write_checkpoint(path, &self.to_checkpoint(adam, meta))?)
    }

    pub fn load(path: &Path) -> Result<Self, GptError> {
        Ok(Self::from_checkpoint(&read_checkpoint(path)?)?.0)
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|&x| (x - m).exp()).sum::<f64>().ln();
    logits.iter().map(|&x| x - lse).collect()
}

/// Incremental causal decoding, one token per call.
#[derive(Debug, Clone)]
pub struct Decoder<'a> {
    model: &'a Gpt,
    blocks: Vec<Block>,
    caches: Vec<KvCache>,
    len: usize,
}

impl Decoder<'_> {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Appends `token` and returns the logits of the next position.
    pub fn push(&mut self, token: usize) -> Result<Vec<f64>, GptError> {
        let cfg = &self.model.config;
        if self.len >= cfg.context {
            return Err(GptError::Context {
                len: self.len + 1,
                context: cfg.context,
            });
        }
        if token >= cfg.vocab() {
            return Err(GptError::Vocabulary {
                id: String::new(),
                position: self.len,
                token,
                vocab: cfg.vocab(),
            });
        }
        let p = &self.model.params;
        let mut h: Vec<f64> = p.get(TOK)?.row(token).to_vec();
        kernels::axpy(1.0, p.get(POS)?.row(self.len), &mut h);
        for (b, c) in self.blocks.iter().zip(self.caches.iter_mut()) {
            h = b.step(p, &h, c)?;
        }
        self.len += 1;
        let h = LayerNorm::named("ln_f", cfg.d_model).apply(p, &h)?;
        Ok(Linear::named("head", cfg.d_model, cfg.vocab()).apply(p, &h)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GptTrainConfig {
    pub max_epochs: usize,
    pub adam: AdamConfig,
    /// Learning rate reached at `max_epochs` by cosine decay; constant when
    /// unset.
    pub final_lr: Option<f64>,
    /// Stop once every training sequence is reproduced by greedy decoding
    /// from its shortest distinguishing prefix.
    pub stop_when_memorized: bool,
    /// With `stop_when_memorized`, also require the epoch's mean token NLL
    /// to be below this.
    pub target_loss: Option<f64>,
    pub eval_every: usize,
}

impl Default for GptTrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 1000,
            adam: AdamConfig::default(),
            final_lr: None,
            stop_when_memorized: false,
            target_loss: None,
            eval_every: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GptEpochStats {
    pub epoch: usize,
    /// Mean per-token negative log-likelihood over the epoch.
    pub loss: f64,
    pub perplexity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GptTrainReport {
    pub epochs: Vec<GptEpochStats>,
    pub memorized_at: Option<usize>,
}

/// For each sequence, the length of the shortest prefix no other sequence
/// shares. Identical sequences get their full length.
pub fn distinguishing_prefixes(seqs: &[Vec<usize>]) -> Vec<usize> {
    seqs.iter()
        .enumerate()
        .map(|(i, s)| {
            let shared = seqs
                .iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, o)| s.iter().zip(o).take_while(|(a, b)| a == b).count())
                .max()
                .unwrap_or(0);
            (shared + 1).min(s.len())
        })
        .collect()
}

/// True when teacher-forced argmax matches every token from the
/// distinguishing prefix onward, which makes greedy continuation from that
/// prefix reproduce the sequence.
pub fn is_memorized(model: &Gpt, seqs: &[Vec<usize>]) -> Result<bool, GptError> {
    let prefixes = distinguishing_prefixes(seqs);
    for (s, &p) in seqs.iter().zip(&prefixes) {
        if p >= s.len() {
            continue;
        }
        let all = model.logits(&s[..s.len() - 1])?;
        for (t, &tok) in s.iter().enumerate().skip(p) {
            if argmax(all.row(t - 1)) != tok {
                return Ok(false);
            }
        }
    }
    Ok(true)
}

/// Perplexity `exp(total NLL / predicted tokens)` over training-form
/// sequences.
pub fn perplexity(model: &Gpt, seqs: &[Vec<usize>]) -> Result<f64, GptError> {
    let (mut nll, mut n) = (0.0, 0usize);
    for s in seqs {
        let l = model.sequence_loss(s)?;
        nll += l * (s.len() - 1) as f64;
        n += s.len() - 1;
    }
    if n == 0 {
        return Err(GptError::EmptyDataset);
    }
    Ok((nll / n as f64).exp())
}

fn argmax(x: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in x.iter().enumerate() {
        if v > x[best] {
            best = i;
        }
    }
    best
}

/// Teacher-forced batch-1 training over training-form sequences.
pub fn train(
    model: &mut Gpt,
    corpus: &[TokenSequence],
    cfg: &GptTrainConfig,
    seed: u64,
    resume: Option<Resume>,
    mut on_epoch: impl FnMut(&GptEpochStats),
) -> Result<(GptTrainReport, AdamState), GptError> {
    if corpus.is_empty() {
        return Err(GptError::EmptyDataset);
    }
    let seqs: Vec<Vec<usize>> = corpus
        .iter()
        .map(|s| s.training_form(&model.config))
        .collect();
    for (s, t) in corpus.iter().zip(&seqs) {
        check_training_form(&s.tree_id, t, &model.config)?;
        if t.len() - 1 > model.config.context {
            return Err(GptError::Context {
                len: t.len() - 1,
                context: model.config.context,
            });
        }
    }
    let (mut adam, done) = match resume {
        Some(r) => (r.adam, r.epochs_done),
        None => (AdamState::new(&model.params, cfg.adam), 0),
    };
    let mut rng = epoch_stream(seed, "gpt.train", done);
    let mut drop_rng = epoch_stream(seed, "gpt.dropout", done);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut report = GptTrainReport {
        epochs: Vec::new(),
        memorized_at: None,
    };
    let mut step = 0;
    for epoch in done + 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        if let Some(last) = cfg.final_lr {
            let progress = (epoch - 1) as f64 / cfg.max_epochs.max(2).saturating_sub(1) as f64;
            adam.config.lr = cosine_lr(cfg.adam.lr, last, progress);
        }
        let (mut nll, mut count) = (0.0, 0usize);
        for &i in &order {
            let s = &seqs[i];
            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape);
            let y = model.logits_on(&mut tape, &bound, &s[..s.len() - 1], Some(&mut drop_rng))?;
            let loss = tape.cross_entropy(y, &s[1..])?;
            let l = tape.value(loss).item();
            step += 1;
            if !l.is_finite() {
                return Err(GptError::NonFiniteLoss { epoch, step });
            }
            nll += l * (s.len() - 1) as f64;
            count += s.len() - 1;
            tape.backward(loss)?;
            let grads = bound.grads(&tape);
            adam.step(&mut model.params, &grads).map_err(|e| match e {
                TensorError::NonFiniteGradient(_) => GptError::NonFiniteLoss { epoch, step },
                other => other.into(),
            })?;
        }
        let loss = nll / count as f64;
        let stats = GptEpochStats {
            epoch,
            loss,
            perplexity: loss.exp(),
        };
        log::debug!(
            "gpt epoch {epoch}: nll {loss:.5} ppl {:.4}",
            stats.perplexity
        );
        on_epoch(&stats);
        report.epochs.push(stats);
        if cfg.stop_when_memorized
            && (epoch % cfg.eval_every.max(1) == 0 || epoch == cfg.max_epochs)
            && cfg.target_loss.is_none_or(|t| loss < t)
            && is_memorized(model, &seqs)?
        {
            report.memorized_at = Some(epoch);
            break;
        }
    }
    Ok((report, adam))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub beams: usize,
    /// `0` selects the highest-scoring continuations deterministically.
    pub temperature: f64,
    /// Restricts sampling to the `k` most likely tokens; `0` disables.
    pub top_k: usize,
    /// Upper bound on the sequence length, START and END included.
    pub max_tokens: usize,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            beams: 4,
            temperature: 1.0,
            top_k: 0,
            max_tokens: 4096,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn greedy(max_tokens: usize) -> Self {
        Self {
            beams: 1,
            temperature: 0.0,
            top_k: 0,
            max_tokens,
            seed: 0,
        }
    }

    /// Plain ancestral sampling: one beam at temperature 1.
    pub fn sampling(max_tokens: usize, seed: u64) -> Self {
        Self {
            beams: 1,
            temperature: 1.0,
            top_k: 0,
            max_tokens,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Beam {
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Generation {
    /// Full sequence including START and, unless truncated, END.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub truncated: bool,
    /// Every beam alive at termination, best first.
    pub beams: Vec<Beam>,
}

struct Live<'a> {
    beam: Beam,
    dec: Decoder<'a>,
    next: Vec<f64>,
}

fn by_score(a: &Beam, b: &Beam) -> Ordering {
    b.log_prob.total_cmp(&a.log_prob)
}

/// Stochastic beam search from START.
pub fn generate(model: &Gpt, sampler: &SamplerConfig) -> Result<Generation, GptError> {
    generate_from(model, &[model.config.start()], sampler)
}

/// Stochastic beam search continuing `prefix`.
///
/// Each live beam proposes up to `B` distinct continuations drawn without
/// replacement via Gumbel-perturbed log-probabilities at the given
/// temperature (plain top-`B` at temperature 0). All proposals and the frozen
/// finished beams compete on cumulative model log-probability and the best
/// `B` survive. Search stops once the best survivor is finished, since
/// extending a beam can only lower its score, or at `max_tokens`.
pub fn generate_from(
    model: &Gpt,
    prefix: &[usize],
    sampler: &SamplerConfig,
) -> Result<Generation, GptError> {
    let cfg = &model.config;
    if sampler.beams == 0 {
        return Err(GptError::Config("at least one beam is required".into()));
    }
    if sampler.temperature.is_nan() || sampler.temperature < 0.0 {
        return Err(GptError::Config("temperature must be non-negative".into()));
    }
    if sampler.max_tokens > cfg.context {
        return Err(GptError::Config(format!(
            "max_tokens {} exceeds context {}",
            sampler.max_tokens, cfg.context
        )));
    }
    if prefix.is_empty() || prefix.len() > sampler.max_tokens {
        return Err(GptError::Context {
            len: prefix.len(),
            context: sampler.max_tokens,
        });
    }
    let mut rng = crate::rng::seeded(sampler.seed);
    let mut dec = model.decoder();
    let mut next = Vec::new();
    for &t in prefix {
        next = dec.push(t)?;
    }
    let start = Beam {
        tokens: prefix.to_vec(),
        log_prob: 0.0,
        finished: prefix.last() == Some(&cfg.end()),
    };
    let mut finished: Vec<Beam> = Vec::new();
    let mut live: Vec<Live> = Vec::new();
    if start.finished {
        finished.push(start);
    } else {
        live.push(Live {
            beam: start,
            dec,
            next,
        });
    }
    let b = sampler.beams;
    while !live.is_empty() {
        if live[0].beam.tokens.len() >= sampler.max_tokens {
            break;
        }
        let mut proposals: Vec<(usize, usize, f64)> = Vec::new();
        for (li, l) in live.iter().enumerate() {
            let lp = log_softmax(&l.next);
            for tok in propose(&lp, cfg, sampler, b, &mut rng) {
                proposals.push((li, tok, l.beam.log_prob + lp[tok]));
            }
        }
        // Rank proposals against frozen beams; ties keep earlier entries.
        let mut pool: Vec<(f64, Option<usize>)> =
            finished.iter().map(|f| (f.log_prob, None)).collect();
        pool.extend(proposals.iter().enumerate().map(|(pi, p)| (p.2, Some(pi))));
        let mut idx: Vec<usize> = (0..pool.len()).collect();
        idx.sort_by(|&x, &y| pool[y].0.total_cmp(&pool[x].0));
        idx.truncate(b);
        let mut kept_finished = Vec::new();
        let mut chosen: Vec<usize> = Vec::new();
        for &i in &idx {
            match pool[i].1 {
                None => kept_finished.push(finished[i].clone()),
                Some(pi) => chosen.push(pi),
            }
        }
        let mut new_live = Vec::new();
        for pi in chosen {
            let (li, tok, score) = proposals[pi];
            let mut tokens = live[li].beam.tokens.clone();
            tokens.push(tok);
            if tok == cfg.end() {
                kept_finished.push(Beam {
                    tokens,
                    log_prob: score,
                    finished: true,
                });
            } else {
                let mut dec = live[li].dec.clone();
                let next = dec.push(tok)?;
                new_live.push(Live {
                    beam: Beam {
                        tokens,
                        log_prob: score,
                        finished: false,
                    },
                    dec,
                    next,
                });
            }
        }
        kept_finished.sort_by(by_score);
        new_live.sort_by(|x, y| by_score(&x.beam, &y.beam));
        finished = kept_finished;
        live = new_live;
        let best_live = live.first().map(|l| l.beam.log_prob);
        if let (Some(f), Some(l)) = (finished.first(), best_live) {
            if f.log_prob >= l {
                break;
            }
        }
    }
    let mut beams: Vec<Beam> = finished
        .iter()
        .cloned()
        .chain(live.iter().map(|l| l.beam.clone()))
        .collect();
    beams.sort_by(by_score);
    let (best, truncated) = match finished.first() {
        Some(f) => (f.clone(), false),
        None => (live[0].beam.clone(), true),
    };
    Ok(Generation {
        tokens: best.tokens,
        log_prob: best.log_prob,
        truncated,
        beams,
    })
}

/// Up to `n` distinct candidate tokens from one beam. START and PAD are never
/// proposed.
fn propose(
    lp: &[f64],
    cfg: &GptConfig,
    s: &SamplerConfig,
    n: usize,
    rng: &mut crate::rng::Rng,
) -> Vec<usize> {
    let mut allowed: Vec<usize> = (0..cfg.vocab())
        .filter(|&t| t != cfg.start() && t != cfg.pad())
        .collect();
    allowed.sort_by(|&a, &b| lp[b].total_cmp(&lp[a]));
    if s.top_k > 0 {
        allowed.truncate(s.top_k);
    }
    if s.temperature > 0.0 {
        let mut keyed: Vec<(f64, usize)> = allowed
            .iter()
            .map(|&t| {
                let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
                (lp[t] / s.temperature - (-u.ln()).ln(), t)
            })
            .collect();
        keyed.sort_by(|a, b| b.0.total_cmp(&a.0));
        allowed = keyed.into_iter().map(|(_, t)| t).collect();
    }
    allowed.truncate(n);
    allowed
}

/// What to do with a body whose length is not a multiple of the
/// tokens-per-node count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LengthPolicy {
    #[default]
    Reject,
    /// Complete the last node with the tokens a lone null marker encodes to.
    PadWithNull,
}

/// Codebook body of a generated sequence: drops a leading START and
/// everything from the first END on.
pub fn strip_specials(tokens: &[usize], cfg: &GptConfig) -> Result<Vec<usize>, GptError> {
    let body = match tokens.first() {
        Some(&t) if t == cfg.start() => &tokens[1..],
        _ => tokens,
    };
    let body = match body.iter().position(|&t| t == cfg.end()) {
        Some(e) => &body[..e],
        None => body,
    };
    if let Some((position, &token)) = body
        .iter()
        .enumerate()
        .find(|(_, &t)| t >= cfg.codebook_size)
    {
        return Err(GptError::Vocabulary {
            id: String::new(),
            position,
            token,
            vocab: cfg.codebook_size,
        });
    }
    Ok(body.to_vec())
}

/// Decodes a token sequence to a tree through the VQ-VAE decoder and null
/// thresholding.
pub fn tokens_to_tree(
    tokens: &[usize],
    gpt: &GptConfig,
    vq: &VqVae,
    policy: LengthPolicy,
    null_threshold: f64,
) -> Result<VesselTree, GptError> {
    let mut body = strip_specials(tokens, gpt)?;
    if body.is_empty() {
        return Err(GptError::Empty);
    }
    let per = vq.config.tokens_per_node;
    let rem = body.len() % per;
    if rem != 0 {
        match policy {
            LengthPolicy::Reject => {
                return Err(GptError::NotDivisible {
                    len: body.len(),
                    per_node: per,
                })
            }
            LengthPolicy::PadWithNull => {
                let null = vq.tokenize(&[[0.0; crate::tree::ATTR_DIM]])?;
                body.extend_from_slice(&null[rem..]);
            }
        }
    }
    let rows = vq.decode_indices(&body)?;
    Ok(VesselTree::deserialize(&rows, null_threshold)?)
}

/// Coarse reason a generated sample failed to decode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    Truncated,
    Empty,
    NotDivisible,
    Vocabulary,
    MalformedTree,
    Other,
}

impl RejectReason {
    pub fn of(e: &GptError) -> Self {
        match e {
            GptError::Empty => Self::Empty,
            GptError::NotDivisible { .. } => Self::NotDivisible,
            GptError::Vocabulary { .. }
            | GptError::Vq(VqError::Tensor(TensorError::Shape { .. })) => Self::Vocabulary,
            GptError::Tree(_) => Self::MalformedTree,
            _ => Self::Other,
        }
    }
}
