//! Transformer building blocks shared by the VQ-VAE and the GPT model.
//!
//! Layers only hold parameter names; weights live in a [`ParamSet`] and are
//! bound to a fresh tape for every forward pass.

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::tensor::kernels;
use crate::tensor::{BoundParams, ParamSet, Tape, Tensor, TensorError, Var};

fn randn(rng: &mut crate::rng::Rng, shape: &[usize], std: f64) -> Tensor {
    Tensor::from_fn(shape, |_| std * rng.sample::<f64, _>(StandardNormal))
}

/// `y = x·W + b` with `W: in×out`.
#[derive(Debug, Clone)]
pub struct Linear {
    w: String,
    b: String,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut crate::rng::Rng,
    ) -> Self {
        let std = 1.0 / (fan_in as f64).sqrt();
        params.insert(format!("{name}.w"), randn(rng, &[fan_in, fan_out], std));
        params.insert(format!("{name}.b"), Tensor::zeros(&[fan_out]));
        Self::named(name, fan_in, fan_out)
    }

    /// Refers to existing parameters without initializing them.
    pub fn named(name: &str, fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: format!("{name}.w"),
            b: format!("{name}.b"),
            fan_in,
            fan_out,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Result<Var, TensorError> {
        let y = tape.matmul(x, p.var(&self.w)?)?;
        tape.add_row(y, p.var(&self.b)?)
    }

    /// One row, without a tape.
    pub fn apply(&self, params: &ParamSet, x: &[f64]) -> Result<Vec<f64>, TensorError> {
        let mut y = params.get(&self.b)?.data().to_vec();
        kernels::matmul_acc(
            x,
            params.get(&self.w)?.data(),
            &mut y,
            1,
            self.fan_in,
            self.fan_out,
        );
        Ok(y)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    g: String,
    b: String,
    dim: usize,
}

impl LayerNorm {
    pub fn new(params: &mut ParamSet, name: &str, dim: usize) -> Self {
        params.insert(format!("{name}.g"), Tensor::from_fn(&[dim], |_| 1.0));
        params.insert(format!("{name}.b"), Tensor::zeros(&[dim]));
        Self::named(name, dim)
    }

    pub fn named(name: &str, dim: usize) -> Self {
        Self {
            g: format!("{name}.g"),
            b: format!("{name}.b"),
            dim,
        }
    }

    pub fn forward(&self, tape: &mut Tape, p: &BoundParams, x: Var) -> Result<Var, TensorError> {
        tape.layer_norm(x, p.var(&self.g)?, p.var(&self.b)?)
    }

    pub fn apply(&self, params: &ParamSet, x: &[f64]) -> Result<Vec<f64>, TensorError> {
        let mut out = vec![0.0; self.dim];
        kernels::layer_norm_rows(
            x,
            params.get(&self.g)?.data(),
            params.get(&self.b)?.data(),
            &mut out,
            1,
            self.dim,
            1e-5,
        );
        Ok(out)
    }
}

/// Multi-head self-attention with fused QKV projection.
#[derive(Debug, Clone)]
pub struct Attention {
    qkv: Linear,
    out: Linear,
    heads: usize,
    dim: usize,
}

/// Pre-norm transformer block: `x + attn(ln(x))`, then `x + mlp(ln(x))`.
#[derive(Debug, Clone)]
pub struct Block {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

/// Keys and values of past positions for one block.
#[derive(Debug, Clone, Default)]
pub struct KvCache {
    keys: Vec<f64>,
    values: Vec<f64>,
    len: usize,
}

impl KvCache {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

impl Block {
    pub fn new(
        params: &mut ParamSet,
        name: &str,
        dim: usize,
        heads: usize,
        rng: &mut crate::rng::Rng,
    ) -> Self {
        let b = Self::named(name, dim, heads);
        LayerNorm::new(params, &format!("{name}.ln1"), dim);
        LayerNorm::new(params, &format!("{name}.ln2"), dim);
        Linear::new(params, &format!("{name}.attn.qkv"), dim, 3 * dim, rng);
        Linear::new(params, &format!("{name}.attn.out"), dim, dim, rng);
        Linear::new(params, &format!("{name}.mlp.fc1"), dim, 4 * dim, rng);
        Linear::new(params, &format!("{name}.mlp.fc2"), 4 * dim, dim, rng);
        b
    }

    pub fn named(name: &str, dim: usize, heads: usize) -> Self {
        Self {
            ln1: LayerNorm::named(&format!("{name}.ln1"), dim),
            attn: Attention {
                qkv: Linear::named(&format!("{name}.attn.qkv"), dim, 3 * dim),
                out: Linear::named(&format!("{name}.attn.out"), dim, dim),
                heads,
                dim,
            },
            ln2: LayerNorm::named(&format!("{name}.ln2"), dim),
            fc1: Linear::named(&format!("{name}.mlp.fc1"), dim, 4 * dim),
            fc2: Linear::named(&format!("{name}.mlp.fc2"), 4 * dim, dim),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        x: Var,
        causal: bool,
    ) -> Result<Var, TensorError> {
        let h = self.ln1.forward(tape, p, x)?;
        let a = self.attention(tape, p, h, causal)?;
        let x = tape.add(x, a)?;
        let h = self.ln2.forward(tape, p, x)?;
        let h = self.fc1.forward(tape, p, h)?;
        let h = tape.gelu(h);
        let h = self.fc2.forward(tape, p, h)?;
        tape.add(x, h)
    }

    fn attention(
        &self,
        tape: &mut Tape,
        p: &BoundParams,
        x: Var,
        causal: bool,
    ) -> Result<Var, TensorError> {
        let (d, heads) = (self.attn.dim, self.attn.heads);
        let dh = d / heads;
        let qkv = self.attn.qkv.forward(tape, p, x)?;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let q = tape.slice_cols(qkv, h * dh, dh)?;
            let k = tape.slice_cols(qkv, d + h * dh, dh)?;
            let v = tape.slice_cols(qkv, 2 * d + h * dh, dh)?;
            let s = tape.matmul_bt(q, k)?;
            let s = tape.scale(s, scale);
            let w = if causal {
                tape.causal_softmax(s)?
            } else {
                tape.softmax(s)
            };
            outs.push(tape.matmul(w, v)?);
        }
        let merged = if heads == 1 {
            outs[0]
        } else {
            tape.concat_cols(&outs)?
        };
        self.attn.out.forward(tape, p, merged)
    }

    /// Causal forward of one new position given the cache of earlier ones.
    /// Matches row `cache.len()` of [`Block::forward`] with `causal = true`.
    pub fn step(
        &self,
        params: &ParamSet,
        x: &[f64],
        cache: &mut KvCache,
    ) -> Result<Vec<f64>, TensorError> {
        let (d, heads) = (self.attn.dim, self.attn.heads);
        let dh = d / heads;
        let h = self.ln1.apply(params, x)?;
        let qkv = self.attn.qkv.apply(params, &h)?;
        cache.keys.extend_from_slice(&qkv[d..2 * d]);
        cache.values.extend_from_slice(&qkv[2 * d..]);
        cache.len += 1;
        let n = cache.len;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut merged = vec![0.0; d];
        let mut scores = vec![0.0; n];
        for hd in 0..heads {
            let q = &qkv[hd * dh..(hd + 1) * dh];
            for (j, s) in scores.iter_mut().enumerate() {
                *s = kernels::dot(q, &cache.keys[j * d + hd * dh..j * d + (hd + 1) * dh]) * scale;
            }
            kernels::softmax_rows(&mut scores, 1, n, false);
            let o = &mut merged[hd * dh..(hd + 1) * dh];
            for (j, &w) in scores.iter().enumerate() {
                kernels::axpy(w, &cache.values[j * d + hd * dh..j * d + (hd + 1) * dh], o);
            }
        }
        let a = self.attn.out.apply(params, &merged)?;
        let x: Vec<f64> = x.iter().zip(&a).map(|(u, v)| u + v).collect();
        let h = self.ln2.apply(params, &x)?;
        let h: Vec<f64> = self
            .fc1
            .apply(params, &h)?
            .into_iter()
            .map(kernels::gelu)
            .collect();
        let h = self.fc2.apply(params, &h)?;
        Ok(x.iter().zip(&h).map(|(u, v)| u + v).collect())
    }
}

/// Sinusoidal position table, `rows × dim`.
pub fn sinusoidal_positions(rows: usize, dim: usize) -> Tensor {
    Tensor::from_fn(&[rows, dim], |idx| {
        let (pos, j) = (idx / dim, idx % dim);
        let freq = 10000f64.powf(-((j / 2 * 2) as f64) / dim as f64);
        let a = pos as f64 * freq;
        if j % 2 == 0 {
            a.sin()
        } else {
            a.cos()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cached_step_matches_tape_forward() {
        let mut rng = crate::rng::seeded(3);
        let mut params = ParamSet::new();
        let block = Block::new(&mut params, "b0", 8, 2, &mut rng);
        let x = randn(&mut rng, &[5, 8], 1.0);
        let mut tape = Tape::new();
        let p = params.bind_frozen(&mut tape);
        let xv = tape.constant(x.clone());
        let y = block.forward(&mut tape, &p, xv, true).unwrap();
        let full = tape.value(y).clone();
        let mut cache = KvCache::default();
        for t in 0..5 {
            let row = block.step(&params, x.row(t), &mut cache).unwrap();
            for (a, b) in row.iter().zip(full.row(t)) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let mut rng = crate::rng::seeded(4);
        let mut params = ParamSet::new();
        let block = Block::new(&mut params, "b", 4, 2, &mut rng);
        let x = randn(&mut rng, &[3, 4], 1.0);
        let names: Vec<String> = params.names().to_vec();
        let inputs: Vec<Tensor> = std::iter::once(x)
            .chain(params.iter().map(|(_, t)| t.clone()))
            .collect();
        for causal in [false, true] {
            let err = crate::tensor::gradcheck::check_graph(&inputs, 1e-5, |tape, vars| {
                let mut ps = ParamSet::new();
                for (n, v) in names.iter().zip(&vars[1..]) {
                    ps.insert(n.clone(), tape.value(*v).clone());
                }
                let bound = BoundParams::from_vars(&ps, vars[1..].to_vec());
                let y = block.forward(tape, &bound, vars[0], causal)?;
                let w = tape.constant(Tensor::from_fn(&[3, 4], |i| (i as f64 * 0.37).sin()));
                let m = tape.mul(y, w)?;
                Ok(tape.sum(m))
            })
            .unwrap();
            assert!(err < 1e-6, "causal={causal}: {err}");
        }
    }

    #[test]
    fn positions_are_distinct() {
        let pe = sinusoidal_positions(4, 6);
        assert_eq!(pe.row(0)[..2], [0.0, 1.0]);
        assert_ne!(pe.row(1), pe.row(2));
    }
}
