//! Central finite-difference gradient checking.
//!
//! The numeric side only evaluates the forward function; it never touches
//! the tape's backward rules.

use super::{Tensor, TensorError};

/// Norm-wise relative error `‖a − n‖ / max(‖a‖, ‖n‖)`, or the absolute
/// error when both gradients are (numerically) zero.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n) * (a - n))
        .sum::<f64>()
        .sqrt();
    let na = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nn = numeric.iter().map(|a| a * a).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of a scalar function with respect to every entry of
/// every input, step `h`.
pub fn numeric_gradients(
    inputs: &[Tensor],
    h: f64,
    mut f: impl FnMut(&[Tensor]) -> Result<f64, TensorError>,
) -> Result<Vec<Vec<f64>>, TensorError> {
    let mut work: Vec<Tensor> = inputs.to_vec();
    let mut out = Vec::with_capacity(inputs.len());
    for i in 0..inputs.len() {
        let mut g = vec![0.0; inputs[i].numel()];
        for (j, gj) in g.iter_mut().enumerate() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + h;
            let fp = f(&work)?;
            work[i].data_mut()[j] = orig - h;
            let fm = f(&work)?;
            work[i].data_mut()[j] = orig;
            *gj = (fp - fm) / (2.0 * h);
        }
        out.push(g);
    }
    Ok(out)
}

use rand::Rng as _;
use rand_distr::StandardNormal;

use super::{Tape, Var};

type Builder = fn(&mut Tape, &[Var]) -> Result<Var, TensorError>;

fn randn(rng: &mut crate::rng::Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
}

/// Analytic-vs-numeric check of one scalar-valued graph. Returns the worst
/// per-input relative error.
pub fn check_graph(
    inputs: &[Tensor],
    h: f64,
    build: impl Fn(&mut Tape, &[Var]) -> Result<Var, TensorError>,
) -> Result<f64, TensorError> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    tape.backward(loss)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| tape.grad_tensor(v)).collect();
    let numeric = numeric_gradients(inputs, h, |xs| {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|x| t.constant(x.clone())).collect();
        let l = build(&mut t, &vs)?;
        Ok(t.value(l).item())
    })?;
    Ok(analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| relative_error(a.data(), n))
        .fold(0.0, f64::max))
}

/// Contracts an arbitrary-shaped output against a fixed pseudo-random
/// weight so that every output entry contributes a distinct gradient.
fn project(tape: &mut Tape, y: Var) -> Result<Var, TensorError> {
    let shape = tape.value(y).shape().to_vec();
    let w = Tensor::from_fn(&shape, |i| ((i as f64 + 1.0) * 0.618_034).fract() - 0.5);
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

/// Every differentiable tape primitive, each checked on random inputs with
/// central differences at step `h`. Returns `(name, relative error)`.
pub fn check_all_primitives(seed: u64, h: f64) -> Result<Vec<(&'static str, f64)>, TensorError> {
    let mut rng = crate::rng::seeded(seed);
    // Inputs for ReLU and L1 are kept away from their kinks.
    let away = |rng: &mut crate::rng::Rng, shape: &[usize]| {
        Tensor::from_fn(shape, |_| {
            let v: f64 = rng.random_range(0.2..1.5);
            if rng.random::<bool>() {
                v
            } else {
                -v
            }
        })
    };
    let cases: Vec<(&'static str, Vec<Tensor>, Builder)> = vec![
        (
            "matmul",
            vec![randn(&mut rng, &[3, 4]), randn(&mut rng, &[4, 2])],
            |t, v| {
                let y = t.matmul(v[0], v[1])?;
                project(t, y)
            },
        ),
        (
            "matmul_bt",
            vec![randn(&mut rng, &[3, 4]), randn(&mut rng, &[5, 4])],
            |t, v| {
                let y = t.matmul_bt(v[0], v[1])?;
                project(t, y)
            },
        ),
        (
            "add",
            vec![randn(&mut rng, &[2, 3]), randn(&mut rng, &[2, 3])],
            |t, v| {
                let y = t.add(v[0], v[1])?;
                project(t, y)
            },
        ),
        (
            "sub",
            vec![randn(&mut rng, &[2, 3]), randn(&mut rng, &[2, 3])],
            |t, v| {
                let y = t.sub(v[0], v[1])?;
                project(t, y)
            },
        ),
        (
            "mul",
            vec![randn(&mut rng, &[2, 3]), randn(&mut rng, &[2, 3])],
            |t, v| {
                let y = t.mul(v[0], v[1])?;
                project(t, y)
            },
        ),
        (
            "add_row",
            vec![randn(&mut rng, &[3, 4]), randn(&mut rng, &[4])],
            |t, v| {
                let y = t.add_row(v[0], v[1])?;
                project(t, y)
            },
        ),
        ("scale", vec![randn(&mut rng, &[5])], |t, v| {
            let y = t.scale(v[0], -1.7);
            project(t, y)
        }),
        ("relu", vec![away(&mut rng, &[2, 5])], |t, v| {
            let y = t.relu(v[0]);
            project(t, y)
        }),
        ("gelu", vec![randn(&mut rng, &[2, 5])], |t, v| {
            let y = t.gelu(v[0]);
            project(t, y)
        }),
        (
            "layer_norm",
            vec![
                randn(&mut rng, &[3, 6]),
                randn(&mut rng, &[6]),
                randn(&mut rng, &[6]),
            ],
            |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2])?;
                project(t, y)
            },
        ),
        ("softmax", vec![randn(&mut rng, &[1, 8])], |t, v| {
            let y = t.softmax(v[0]);
            project(t, y)
        }),
        ("causal_softmax", vec![randn(&mut rng, &[4, 4])], |t, v| {
            let y = t.causal_softmax(v[0])?;
            project(t, y)
        }),
        ("slice_cols", vec![randn(&mut rng, &[3, 6])], |t, v| {
            let y = t.slice_cols(v[0], 2, 3)?;
            project(t, y)
        }),
        (
            "concat_cols",
            vec![randn(&mut rng, &[3, 2]), randn(&mut rng, &[3, 4])],
            |t, v| {
                let y = t.concat_cols(&[v[0], v[1], v[0]])?;
                project(t, y)
            },
        ),
        ("reshape", vec![randn(&mut rng, &[2, 6])], |t, v| {
            let y = t.reshape(v[0], &[4, 3])?;
            project(t, y)
        }),
        ("gather_rows", vec![randn(&mut rng, &[5, 3])], |t, v| {
            let y = t.gather_rows(v[0], &[4, 0, 4, 2])?;
            project(t, y)
        }),
        (
            "mean_abs_diff",
            vec![away(&mut rng, &[2, 4]), Tensor::zeros(&[2, 4])],
            |t, v| t.mean_abs_diff(v[0], v[1]),
        ),
        (
            "mean_sq_diff",
            vec![randn(&mut rng, &[2, 4]), randn(&mut rng, &[2, 4])],
            |t, v| t.mean_sq_diff(v[0], v[1]),
        ),
        ("sum", vec![randn(&mut rng, &[3, 2])], |t, v| {
            let y = t.sum(v[0]);
            Ok(t.scale(y, 2.0))
        }),
        ("cross_entropy", vec![randn(&mut rng, &[4, 7])], |t, v| {
            t.cross_entropy(v[0], &[0, 6, 3, 3])
        }),
    ];
    let mut out = Vec::with_capacity(cases.len() + 1);
    for (name, inputs, build) in cases {
        out.push((name, check_graph(&inputs, h, build)?));
    }
    out.push((
        "stop_gradient",
        check_stop_gradient(&randn(&mut rng, &[4]), h)?,
    ));
    Ok(out)
}

/// `sg` forward is identity and its backward is zero, so the analytic
/// gradient of `sum(x·sg(x))` is `sg(x)`. The numeric oracle differentiates
/// only through the non-stopped factor by holding the stopped copy fixed.
fn check_stop_gradient(x: &Tensor, h: f64) -> Result<f64, TensorError> {
    let mut tape = Tape::new();
    let v = tape.param(x.clone());
    let s = tape.stop_gradient(v);
    let p = tape.mul(v, s)?;
    let l = tape.sum(p);
    tape.backward(l)?;
    let analytic = tape.grad_tensor(v);
    let frozen = x.clone();
    let numeric = numeric_gradients(std::slice::from_ref(x), h, |xs| {
        Ok(xs[0]
            .data()
            .iter()
            .zip(frozen.data())
            .map(|(a, b)| a * b)
            .sum())
    })?;
    Ok(relative_error(analytic.data(), &numeric[0]))
}
