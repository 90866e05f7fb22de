//! Vector-quantized autoencoder over serialized vessel trees.
//!
//! Each attribute vector is embedded, contextualized by a bidirectional
//! transformer and projected to `tokens_per_node` latent vectors of size
//! `d_z`. Latents snap to their nearest codebook entry; the decoder maps the
//! quantized latents of each node back to its attributes.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{sinusoidal_positions, Block, LayerNorm, Linear};
use crate::tensor::{
    cosine_lr, epoch_stream, model_checkpoint, read_checkpoint, restore_adam, restore_params,
    write_checkpoint, AdamConfig, AdamState, BoundParams, Checkpoint, ParamSet, Resume, Tape,
    Tensor, TensorError, Var,
};
use crate::tree::{is_null, Attr, VesselTree, ATTR_DIM};

#[derive(Debug, Error)]
pub enum VqError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("attribute {value} at entry {row}, component {col} is outside [-1, 1]")]
    OutOfRange { row: usize, col: usize, value: f64 },
    #[error("latent row count {rows} is not a multiple of {per_node}")]
    RowsNotDivisible { rows: usize, per_node: usize },
    #[error("empty sequence")]
    Empty,
    #[error("empty training set")]
    EmptyDataset,
    #[error("non-finite loss at epoch {epoch}, step {step}")]
    NonFiniteLoss { epoch: usize, step: usize },
    #[error("checkpoint is not a vqvae checkpoint: {0}")]
    BadCheckpoint(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VqConfig {
    pub d_model: usize,
    pub layers: usize,
    pub heads: usize,
    pub tokens_per_node: usize,
    pub d_z: usize,
    pub codebook_size: usize,
    pub commitment: f64,
}

impl Default for VqConfig {
    fn default() -> Self {
        Self {
            d_model: 256,
            layers: 2,
            heads: 4,
            tokens_per_node: 16,
            d_z: 64,
            codebook_size: 256,
            commitment: 0.25,
        }
    }
}

impl VqConfig {
    pub fn validate(&self) -> Result<(), VqError> {
        let bad = |m: &str| Err(VqError::BadCheckpoint(m.to_string()));
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return bad("d_model must be divisible by heads");
        }
        if self.codebook_size < 2 {
            return bad("codebook needs at least two entries");
        }
        if self.tokens_per_node == 0 || self.d_z == 0 {
            return bad("latent sizes must be positive");
        }
        Ok(())
    }
}

/// Nearest-entry assignment of latent rows.
#[derive(Debug, Clone, PartialEq)]
pub struct Quantized {
    pub indices: Vec<usize>,
    pub z_q: Tensor,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Maps each row of `z` to the codebook entry with the smallest Euclidean
/// distance; ties go to the lowest index.
pub fn quantize(z: &Tensor, codebook: &Tensor) -> Quantized {
    let d = codebook.cols();
    let k = codebook.rows();
    let rows = z.numel() / d.max(1);
    let mut indices = Vec::with_capacity(rows);
    let mut data = Vec::with_capacity(rows * d);
    for r in 0..rows {
        let q = &z.data()[r * d..(r + 1) * d];
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for e in 0..k {
            let dist = sq_dist(q, codebook.row(e));
            if dist < best_d {
                best_d = dist;
                best = e;
            }
        }
        indices.push(best);
        data.extend_from_slice(codebook.row(best));
    }
    Quantized {
        indices,
        z_q: Tensor::new(vec![rows, d], data).expect("row-major latents"),
    }
}

/// Stop-gradient inputs held fixed at given values, so the loss becomes an
/// ordinary function of the parameters for finite-difference checks.
#[derive(Debug, Clone)]
pub struct FrozenTerms {
    pub indices: Vec<usize>,
    pub z_hat: Tensor,
    pub z_q: Tensor,
}

/// Scalars of one loss evaluation.
#[derive(Debug, Clone, PartialEq)]
pub struct LossParts {
    pub total: f64,
    pub reconstruction: f64,
    pub codebook: f64,
    pub commitment: f64,
    pub indices: Vec<usize>,
}

pub struct Forward {
    pub loss: Var,
    pub recon: Var,
    pub z_hat: Var,
    pub z_q: Var,
    pub parts: LossParts,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VqVae {
    pub config: VqConfig,
    pub params: ParamSet,
}

pub const CODEBOOK: &str = "codebook";

impl VqVae {
    pub fn new(config: VqConfig, seed: u64) -> Result<Self, VqError> {
        config.validate()?;
        let mut rng = crate::rng::substream(seed, "vqvae.init");
        let mut params = ParamSet::new();
        let (d, lat) = (config.d_model, config.tokens_per_node * config.d_z);
        Linear::new(&mut params, "enc.in", ATTR_DIM, d, &mut rng);
        for i in 0..config.layers {
            Block::new(
                &mut params,
                &format!("enc.block{i}"),
                d,
                config.heads,
                &mut rng,
            );
        }
        LayerNorm::new(&mut params, "enc.ln_f", d);
        Linear::new(&mut params, "enc.head", d, lat, &mut rng);
        let k = config.codebook_size;
        let lim = 1.0 / k as f64;
        params.insert(
            CODEBOOK,
            Tensor::from_fn(&[k, config.d_z], |_| rng.random_range(-lim..lim)),
        );
        Linear::new(&mut params, "dec.in", lat, d, &mut rng);
        for i in 0..config.layers {
            Block::new(
                &mut params,
                &format!("dec.block{i}"),
                d,
                config.heads,
                &mut rng,
            );
        }
        LayerNorm::new(&mut params, "dec.ln_f", d);
        Linear::new(&mut params, "dec.head", d, ATTR_DIM, &mut rng);
        Ok(Self { config, params })
    }

    fn latent_width(&self) -> usize {
        self.config.tokens_per_node * self.config.d_z
    }

    fn stack(&self, prefix: &str) -> Vec<Block> {
        (0..self.config.layers)
            .map(|i| {
                Block::named(
                    &format!("{prefix}.block{i}"),
                    self.config.d_model,
                    self.config.heads,
                )
            })
            .collect()
    }

    pub fn codebook(&self) -> &Tensor {
        self.params.get(CODEBOOK).expect("codebook parameter")
    }

    fn encode_on(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Result<Var, TensorError> {
        let c = &self.config;
        let t = tape.value(x).rows();
        let mut h = Linear::named("enc.in", ATTR_DIM, c.d_model).forward(tape, p, x)?;
        let pe = tape.constant(sinusoidal_positions(t, c.d_model));
        h = tape.add(h, pe)?;
        for b in self.stack("enc") {
            h = b.forward(tape, p, h, false)?;
        }
        h = LayerNorm::named("enc.ln_f", c.d_model).forward(tape, p, h)?;
        let z = Linear::named("enc.head", c.d_model, self.latent_width()).forward(tape, p, h)?;
        tape.reshape(z, &[t * c.tokens_per_node, c.d_z])
    }

    fn decode_on(&self, tape: &mut Tape, p: &BoundParams, z: Var) -> Result<Var, TensorError> {
        let c = &self.config;
        let rows = tape.value(z).rows();
        let t = rows / c.tokens_per_node;
        let z = tape.reshape(z, &[t, self.latent_width()])?;
        let mut h = Linear::named("dec.in", self.latent_width(), c.d_model).forward(tape, p, z)?;
        let pe = tape.constant(sinusoidal_positions(t, c.d_model));
        h = tape.add(h, pe)?;
        for b in self.stack("dec") {
            h = b.forward(tape, p, h, false)?;
        }
        h = LayerNorm::named("dec.ln_f", c.d_model).forward(tape, p, h)?;
        Linear::named("dec.head", c.d_model, ATTR_DIM).forward(tape, p, h)
    }

    /// Continuous latents Ẑ, `(T·tokens_per_node) × d_z`.
    pub fn encode(&self, seq: &[Attr]) -> Result<Tensor, VqError> {
        let x = sequence_tensor(seq)?;
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let xv = tape.constant(x);
        let z = self.encode_on(&mut tape, &p, xv)?;
        Ok(tape.value(z).clone())
    }

    pub fn quantize(&self, z_hat: &Tensor) -> Quantized {
        quantize(z_hat, self.codebook())
    }

    /// Decoder output for quantized latents, `T × 19`.
    pub fn decode(&self, z_q: &Tensor) -> Result<Tensor, VqError> {
        let per = self.config.tokens_per_node;
        if z_q.rows() == 0 || !z_q.rows().is_multiple_of(per) || z_q.cols() != self.config.d_z {
            return Err(VqError::RowsNotDivisible {
                rows: z_q.rows(),
                per_node: per,
            });
        }
        let mut tape = Tape::new();
        let p = self.params.bind_frozen(&mut tape);
        let zv = tape.constant(z_q.clone());
        let y = self.decode_on(&mut tape, &p, zv)?;
        Ok(tape.value(y).clone())
    }

    /// Codebook indices to decoded attribute rows.
    pub fn decode_indices(&self, indices: &[usize]) -> Result<Vec<Attr>, VqError> {
        let cb = self.codebook();
        let k = cb.rows();
        if let Some(&bad) = indices.iter().find(|&&i| i >= k) {
            return Err(VqError::Tensor(TensorError::Shape {
                op: "decode_indices",
                lhs: vec![k],
                rhs: vec![bad],
            }));
        }
        let mut data = Vec::with_capacity(indices.len() * cb.cols());
        for &i in indices {
            data.extend_from_slice(cb.row(i));
        }
        let z = Tensor::new(vec![indices.len(), cb.cols()], data)?;
        let y = self.decode(&z)?;
        Ok(tensor_rows(&y))
    }

    /// Encode then quantize: the token indices of a sequence.
    pub fn tokenize(&self, seq: &[Attr]) -> Result<Vec<usize>, VqError> {
        Ok(self.quantize(&self.encode(seq)?).indices)
    }

    /// Full encode → quantize → decode pass.
    pub fn reconstruct(&self, seq: &[Attr]) -> Result<Vec<Attr>, VqError> {
        let q = self.quantize(&self.encode(seq)?);
        Ok(tensor_rows(&self.decode(&q.z_q)?))
    }

    /// Records the training objective on `tape`:
    /// `mean|V−V̂| + mean(sg(Ẑ)−Z_q)² + λ·mean(Ẑ−sg(Z_q))²`, with the
    /// straight-through estimator `Ẑ + sg(Z_q − Ẑ)` feeding the decoder.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        seq: &[Attr],
        frozen: Option<&FrozenTerms>,
    ) -> Result<Forward, VqError> {
        let x = tape.constant(sequence_tensor(seq)?);
        let z_hat = self.encode_on(tape, p, x)?;
        let cb = p.var(CODEBOOK)?;
        let indices = match frozen {
            Some(f) => f.indices.clone(),
            None => quantize(tape.value(z_hat), tape.value(cb)).indices,
        };
        let z_q = tape.gather_rows(cb, &indices)?;
        let (sg_z_hat, sg_z_q, sg_offset) = match frozen {
            Some(f) => {
                let mut off = f.z_q.clone();
                for (o, z) in off.data_mut().iter_mut().zip(f.z_hat.data()) {
                    *o -= z;
                }
                (
                    tape.constant(f.z_hat.clone()),
                    tape.constant(f.z_q.clone()),
                    tape.constant(off),
                )
            }
            None => {
                let diff = tape.sub(z_q, z_hat)?;
                (
                    tape.stop_gradient(z_hat),
                    tape.stop_gradient(z_q),
                    tape.stop_gradient(diff),
                )
            }
        };
        let z_st = tape.add(z_hat, sg_offset)?;
        let recon = self.decode_on(tape, p, z_st)?;
        let l1 = tape.mean_abs_diff(recon, x)?;
        let l_cb = tape.mean_sq_diff(sg_z_hat, z_q)?;
        let l_commit = tape.mean_sq_diff(z_hat, sg_z_q)?;
        let commit_w = tape.scale(l_commit, self.config.commitment);
        let s = tape.add(l1, l_cb)?;
        let loss = tape.add(s, commit_w)?;
        let parts = LossParts {
            total: tape.value(loss).item(),
            reconstruction: tape.value(l1).item(),
            codebook: tape.value(l_cb).item(),
            commitment: tape.value(l_commit).item(),
            indices,
        };
        Ok(Forward {
            loss,
            recon,
            z_hat,
            z_q,
            parts,
        })
    }

    pub fn to_checkpoint(&self, adam: Option<&AdamState>, meta: serde_json::Value) -> Checkpoint {
        let m = serde_json::json!({
            "kind": "vqvae",
            "config": self.config,
            "extra": meta,
        });
        model_checkpoint(&self.params, adam, m)
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<(Self, Option<AdamState>), VqError> {
        if ck.meta.get("kind").and_then(|k| k.as_str()) != Some("vqvae") {
            return Err(VqError::BadCheckpoint("missing kind=vqvae".into()));
        }
        let config: VqConfig = serde_json::from_value(ck.meta["config"].clone())
            .map_err(|e| VqError::BadCheckpoint(e.to_string()))?;
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
    ) -> Result<(), VqError> {
        Ok(write_checkpoint(path, &self.to_checkpoint(adam, meta))?)
    }

    pub fn load(path: &Path) -> Result<Self, VqError> {
        Ok(Self::from_checkpoint(&read_checkpoint(path)?)?.0)
    }
}

/// `T × 19` tensor of a sequence, checking the `[-1, 1]` contract.
pub fn sequence_tensor(seq: &[Attr]) -> Result<Tensor, VqError> {
    if seq.is_empty() {
        return Err(VqError::Empty);
    }
    for (row, a) in seq.iter().enumerate() {
        for (col, &value) in a.iter().enumerate() {
            if value.is_nan() || value.abs() > 1.0 + 1e-6 {
                return Err(VqError::OutOfRange { row, col, value });
            }
        }
    }
    Ok(Tensor::new(
        vec![seq.len(), ATTR_DIM],
        seq.iter().flat_map(|a| a.iter().copied()).collect(),
    )?)
}

pub fn tensor_rows(t: &Tensor) -> Vec<Attr> {
    (0..t.rows())
        .map(|r| {
            let mut a = [0.0; ATTR_DIM];
            a.copy_from_slice(t.row(r));
            a
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VqTrainConfig {
    pub max_epochs: usize,
    pub adam: AdamConfig,
    /// Learning rate reached at `max_epochs` by cosine decay from
    /// `adam.lr`; constant when unset.
    pub final_lr: Option<f64>,
    /// Stop once the evaluated mean reconstruction L1 falls below this and
    /// every topology is recovered.
    pub target_l1: Option<f64>,
    pub eval_every: usize,
    pub null_threshold: f64,
    pub reseed_dead_codes: bool,
}

impl Default for VqTrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 2000,
            adam: AdamConfig::default(),
            final_lr: None,
            target_l1: None,
            eval_every: 10,
            null_threshold: crate::tree::NULL_THRESHOLD,
            reseed_dead_codes: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub loss: f64,
    pub reconstruction: f64,
    pub perplexity: f64,
    pub codes_used: usize,
    pub reseeded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub mean_l1: f64,
    pub max_abs_error: f64,
    pub topology_recovered: usize,
    pub trees: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VqTrainReport {
    pub epochs: Vec<EpochStats>,
    pub evaluations: Vec<(usize, Evaluation)>,
    pub stopped_early: bool,
}

/// Reconstruction quality over a set of trees: mean L1 over all entries and
/// how many topologies survive null thresholding.
pub fn evaluate(
    model: &VqVae,
    trees: &[VesselTree],
    null_threshold: f64,
) -> Result<Evaluation, VqError> {
    let mut total = 0.0;
    let mut count = 0usize;
    let mut max_abs: f64 = 0.0;
    let mut ok = 0;
    for t in trees {
        let seq = t.serialize();
        let rec = model.reconstruct(&seq)?;
        for (a, b) in seq.iter().zip(&rec) {
            for (x, y) in a.iter().zip(b) {
                total += (x - y).abs();
                max_abs = max_abs.max((x - y).abs());
                count += 1;
            }
        }
        if same_topology(t, &rec, null_threshold) {
            ok += 1;
        }
    }
    Ok(Evaluation {
        mean_l1: total / count.max(1) as f64,
        max_abs_error: max_abs,
        topology_recovered: ok,
        trees: trees.len(),
    })
}

fn same_topology(t: &VesselTree, rec: &[Attr], threshold: f64) -> bool {
    match VesselTree::deserialize(rec, threshold) {
        Ok(back) => {
            back.len() == t.len()
                && (0..t.len()).all(|i| back.left(i) == t.left(i) && back.right(i) == t.right(i))
        }
        Err(_) => false,
    }
}

/// Batch-1 ADAM training with a seeded shuffle per epoch. Unused codebook
/// entries are re-seeded at the end of each epoch to random encoder outputs
/// of that epoch, with their optimizer moments cleared.
pub fn train(
    model: &mut VqVae,
    trees: &[VesselTree],
    cfg: &VqTrainConfig,
    seed: u64,
    resume: Option<Resume>,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<(VqTrainReport, AdamState), VqError> {
    if trees.is_empty() {
        return Err(VqError::EmptyDataset);
    }
    let seqs: Vec<Vec<Attr>> = trees.iter().map(VesselTree::serialize).collect();
    for s in &seqs {
        sequence_tensor(s)?;
    }
    let (mut adam, done) = match resume {
        Some(r) => (r.adam, r.epochs_done),
        None => (AdamState::new(&model.params, cfg.adam), 0),
    };
    let mut rng = epoch_stream(seed, "vqvae.train", done);
    let cb_index = model
        .params
        .names()
        .iter()
        .position(|n| n == CODEBOOK)
        .expect("codebook parameter");
    let k = model.config.codebook_size;
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut report = VqTrainReport {
        epochs: Vec::new(),
        evaluations: Vec::new(),
        stopped_early: false,
    };
    let mut step = 0;
    for epoch in done + 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        if let Some(last) = cfg.final_lr {
            let progress = (epoch - 1) as f64 / cfg.max_epochs.max(2).saturating_sub(1) as f64;
            adam.config.lr = cosine_lr(cfg.adam.lr, last, progress);
        }
        let mut usage = vec![0u64; k];
        let mut latents: Vec<Vec<f64>> = Vec::new();
        let (mut loss_sum, mut rec_sum) = (0.0, 0.0);
        for &i in &order {
            let mut tape = Tape::new();
            let bound = model.params.bind(&mut tape);
            let f = model.forward(&mut tape, &bound, &seqs[i], None)?;
            step += 1;
            if !f.parts.total.is_finite() {
                return Err(VqError::NonFiniteLoss { epoch, step });
            }
            for &ix in &f.parts.indices {
                usage[ix] += 1;
            }
            let zh = tape.value(f.z_hat);
            latents.extend((0..zh.rows()).map(|r| zh.row(r).to_vec()));
            loss_sum += f.parts.total;
            rec_sum += f.parts.reconstruction;
            tape.backward(f.loss)?;
            let grads = bound.grads(&tape);
            adam.step(&mut model.params, &grads).map_err(|e| match e {
                TensorError::NonFiniteGradient(_) => VqError::NonFiniteLoss { epoch, step },
                other => other.into(),
            })?;
        }
        let total: u64 = usage.iter().sum();
        let entropy: f64 = usage
            .iter()
            .filter(|&&u| u > 0)
            .map(|&u| {
                let p = u as f64 / total as f64;
                -p * p.ln()
            })
            .sum();
        let mut reseeded = 0;
        if cfg.reseed_dead_codes && !latents.is_empty() {
            let dead: Vec<usize> = (0..k).filter(|&e| usage[e] == 0).collect();
            let cb = model.params.get_mut(CODEBOOK)?;
            let d = cb.cols();
            for &e in &dead {
                let src = &latents[rng.random_range(0..latents.len())];
                cb.data_mut()[e * d..(e + 1) * d].copy_from_slice(src);
            }
            adam.reset_rows(cb_index, &dead);
            reseeded = dead.len();
        }
        let stats = EpochStats {
            epoch,
            loss: loss_sum / seqs.len() as f64,
            reconstruction: rec_sum / seqs.len() as f64,
            perplexity: entropy.exp(),
            codes_used: usage.iter().filter(|&&u| u > 0).count(),
            reseeded,
        };
        log::debug!(
            "vqvae epoch {epoch}: loss {:.5} l1 {:.5} ppl {:.1} used {}",
            stats.loss,
            stats.reconstruction,
            stats.perplexity,
            stats.codes_used
        );
        on_epoch(&stats);
        report.epochs.push(stats);
        if let Some(target) = cfg.target_l1 {
            if epoch % cfg.eval_every.max(1) == 0 || epoch == cfg.max_epochs {
                let ev = evaluate(model, trees, cfg.null_threshold)?;
                let done = ev.mean_l1 < target && ev.topology_recovered == ev.trees;
                report.evaluations.push((epoch, ev));
                if done {
                    report.stopped_early = epoch < cfg.max_epochs;
                    break;
                }
            }
        }
    }
    Ok((report, adam))
}

/// Null-marker count an exact decode of `seq` would produce.
pub fn marker_count(seq: &[Attr], threshold: f64) -> usize {
    seq.iter().filter(|a| is_null(a, threshold)).count()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{numeric_gradients, relative_error};
    use crate::tree::tests::random_tree;

    fn tiny() -> VqConfig {
        VqConfig {
            d_model: 8,
            layers: 1,
            heads: 2,
            tokens_per_node: 2,
            d_z: 3,
            codebook_size: 5,
            commitment: 0.25,
        }
    }

    fn small_tree(seed: u64, n: usize) -> VesselTree {
        let t = random_tree(&mut crate::rng::seeded(seed), n);
        t.normalize().unwrap().0
    }

    #[test]
    fn quantize_picks_nearest() {
        let cb = Tensor::from_rows(&[vec![0.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let q = quantize(
            &Tensor::from_rows(&[vec![0.9, 0.1], vec![0.0, 0.0]]).unwrap(),
            &cb,
        );
        assert_eq!(q.indices, vec![1, 0]);
        assert_eq!(q.z_q.row(0), &[1.0, 0.0]);
    }

    #[test]
    fn quantize_ties_go_low() {
        let cb = Tensor::from_rows(&[vec![1.0], vec![-1.0], vec![1.0]]).unwrap();
        let q = quantize(&Tensor::from_rows(&[vec![0.0], vec![1.0]]).unwrap(), &cb);
        assert_eq!(q.indices, vec![0, 0]);
    }

    #[test]
    fn quantize_matches_exhaustive_oracle() {
        let mut rng = crate::rng::seeded(12);
        let cb = Tensor::from_fn(&[32, 4], |_| rng.random_range(-1.0..1.0));
        let z = Tensor::from_fn(&[100, 4], |_| rng.random_range(-1.0..1.0));
        let q = quantize(&z, &cb);
        for r in 0..100 {
            let dists: Vec<f64> = (0..32)
                .map(|e| {
                    (0..4)
                        .map(|j| (z.row(r)[j] - cb.row(e)[j]).powi(2))
                        .sum::<f64>()
                })
                .collect();
            let min = dists.iter().copied().fold(f64::INFINITY, f64::min);
            let oracle = dists.iter().position(|&d| d == min).unwrap();
            assert_eq!(q.indices[r], oracle);
        }
    }

    #[test]
    fn shapes() {
        let m = VqVae::new(
            VqConfig {
                d_model: 16,
                ..tiny()
            },
            1,
        )
        .unwrap();
        let t = small_tree(3, 2);
        let s = t.serialize();
        assert_eq!(s.len(), 5);
        let z = m.encode(&s).unwrap();
        assert_eq!(z.shape(), &[10, 3]);
        let full = VqVae::new(
            VqConfig {
                d_model: 16,
                layers: 1,
                heads: 2,
                ..VqConfig::default()
            },
            1,
        )
        .unwrap();
        let z = full.encode(&s).unwrap();
        assert_eq!(z.shape(), &[80, 64]);
        let y = full.decode(&full.quantize(&z).z_q).unwrap();
        assert_eq!(y.shape(), &[5, 19]);
        assert!(matches!(
            full.decode(&Tensor::zeros(&[33, 64])),
            Err(VqError::RowsNotDivisible { rows: 33, .. })
        ));
    }

    #[test]
    fn positions_matter_and_calls_are_deterministic() {
        let m = VqVae::new(tiny(), 2).unwrap();
        let s = small_tree(4, 3).serialize();
        let a = m.encode(&s).unwrap();
        assert_eq!(a, m.encode(&s).unwrap());
        let mut swapped = s.clone();
        swapped.swap(0, 1);
        let b = m.encode(&swapped).unwrap();
        // rows of node 0 under the swap differ from rows of node 1 before it
        assert_ne!(a.row(2), b.row(0));
        let q = m.quantize(&a);
        assert_eq!(m.decode(&q.z_q).unwrap(), m.decode(&q.z_q).unwrap());
    }

    #[test]
    fn out_of_range_attributes_rejected() {
        let m = VqVae::new(tiny(), 2).unwrap();
        let mut s = small_tree(4, 3).serialize();
        s[1][4] = 1.5;
        assert!(matches!(
            m.encode(&s),
            Err(VqError::OutOfRange { row: 1, col: 4, .. })
        ));
    }

    #[test]
    fn perfect_reconstruction_has_zero_loss() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::from_fn(&[4, 3], |i| i as f64 * 0.1));
        let b = tape.constant(tape.value(a).clone());
        let l1 = tape.mean_abs_diff(a, b).unwrap();
        let l2 = tape.mean_sq_diff(a, b).unwrap();
        assert_eq!(tape.value(l1).item() + tape.value(l2).item(), 0.0);
    }

    #[test]
    fn codebook_gets_gradient_only_from_codebook_term() {
        let m = VqVae::new(tiny(), 5).unwrap();
        let s = small_tree(6, 2).serialize();
        let mut tape = Tape::new();
        let p = m.params.bind(&mut tape);
        let f = m.forward(&mut tape, &p, &s, None).unwrap();
        tape.backward(f.loss).unwrap();
        let g = tape.grad_tensor(p.var(CODEBOOK).unwrap());
        // d/dz_q of mean(z_hat - z_q)^2 gathered back per entry
        let zh = tape.value(f.z_hat);
        let zq = tape.value(f.z_q);
        let n = zh.numel() as f64;
        let mut expect = vec![0.0; g.numel()];
        let d = zq.cols();
        for (r, &ix) in f.parts.indices.iter().enumerate() {
            for j in 0..d {
                expect[ix * d + j] += 2.0 * (zq.row(r)[j] - zh.row(r)[j]) / n;
            }
        }
        assert!(relative_error(g.data(), &expect) < 1e-12);
    }

    #[test]
    fn zero_commitment_removes_encoder_pull() {
        let cfg = VqConfig {
            commitment: 0.0,
            ..tiny()
        };
        let m = VqVae::new(cfg, 5).unwrap();
        let s = small_tree(6, 2).serialize();
        let mut tape = Tape::new();
        let p = m.params.bind(&mut tape);
        let f = m.forward(&mut tape, &p, &s, None).unwrap();
        let commit = f.parts.commitment;
        assert!(commit > 0.0);
        tape.backward(f.loss).unwrap();
        // Ẑ's gradient equals exactly what the decoder sends back through
        // the straight-through path (the gradient at its input).
        let g_zhat = tape.grad(f.z_hat).unwrap().to_vec();
        let mut tape2 = Tape::new();
        let p2 = m.params.bind_frozen(&mut tape2);
        let zst = tape2.param(tape.value(f.z_q).clone());
        let rec = m.decode_on(&mut tape2, &p2, zst).unwrap();
        let x = tape2.constant(sequence_tensor(&s).unwrap());
        let l1 = tape2.mean_abs_diff(rec, x).unwrap();
        tape2.backward(l1).unwrap();
        let g_dec = tape2.grad(zst).unwrap();
        assert!(relative_error(&g_zhat, g_dec) < 1e-12);
    }

    fn full_loss_error(cfg: VqConfig, seed: u64) -> f64 {
        let m = VqVae::new(cfg, seed).unwrap();
        // two-node tree serialized to five entries
        let s = small_tree(seed + 1, 2).serialize();
        let mut tape = Tape::new();
        let p = m.params.bind(&mut tape);
        let f = m.forward(&mut tape, &p, &s, None).unwrap();
        let frozen = FrozenTerms {
            indices: f.parts.indices.clone(),
            z_hat: tape.value(f.z_hat).clone(),
            z_q: tape.value(f.z_q).clone(),
        };
        tape.backward(f.loss).unwrap();
        let analytic = p.grads(&tape);
        let inputs: Vec<Tensor> = m.params.iter().map(|(_, t)| t.clone()).collect();
        let numeric = numeric_gradients(&inputs, 1e-6, |xs| {
            let mut ps = m.params.clone();
            for ((n, _), x) in m.params.iter().zip(xs) {
                *ps.get_mut(n)? = x.clone();
            }
            let mut t = Tape::new();
            let b = ps.bind_frozen(&mut t);
            let model = VqVae {
                config: m.config.clone(),
                params: ps,
            };
            let f = model
                .forward(&mut t, &b, &s, Some(&frozen))
                .map_err(|e| TensorError::Checkpoint(e.to_string()))?;
            Ok(f.parts.total)
        })
        .unwrap();
        let a: Vec<f64> = analytic.iter().flat_map(|t| t.data().to_vec()).collect();
        let n: Vec<f64> = numeric.into_iter().flatten().collect();
        relative_error(&a, &n)
    }

    #[test]
    fn full_loss_matches_finite_differences() {
        let err = full_loss_error(tiny(), 21);
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn tiny_training_reduces_loss_and_is_reproducible() {
        let trees: Vec<VesselTree> = (0..2).map(|i| small_tree(30 + i, 2)).collect();
        let cfg = VqTrainConfig {
            max_epochs: 60,
            adam: AdamConfig {
                lr: 3e-3,
                ..AdamConfig::default()
            },
            ..VqTrainConfig::default()
        };
        let run = || {
            let mut m = VqVae::new(
                VqConfig {
                    d_model: 16,
                    ..tiny()
                },
                9,
            )
            .unwrap();
            let (rep, adam) = train(&mut m, &trees, &cfg, 9, None, |_| {}).unwrap();
            (m, rep, adam)
        };
        let (m1, r1, a1) = run();
        let (m2, _, a2) = run();
        assert_eq!(m1.params, m2.params);
        assert_eq!(a1, a2);
        let first: f64 = r1.epochs[..10].iter().map(|e| e.reconstruction).sum();
        let last: f64 = r1.epochs[50..].iter().map(|e| e.reconstruction).sum();
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn checkpoint_roundtrip_with_optimizer() {
        let trees = vec![small_tree(40, 2)];
        let mut m = VqVae::new(tiny(), 3).unwrap();
        let cfg = VqTrainConfig {
            max_epochs: 2,
            ..VqTrainConfig::default()
        };
        let (_, adam) = train(&mut m, &trees, &cfg, 3, None, |_| {}).unwrap();
        let ck = m.to_checkpoint(Some(&adam), serde_json::json!({"epochs": 2}));
        let bytes = ck.to_bytes().unwrap();
        let (back, a) = VqVae::from_checkpoint(&Checkpoint::from_bytes(&bytes).unwrap()).unwrap();
        assert_eq!(back, m);
        assert_eq!(a.unwrap(), adam);
    }
}
