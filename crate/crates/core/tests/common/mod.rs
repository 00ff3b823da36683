//! Shared oracles and fixtures for the integration tests.
#![allow(dead_code)]

use inn_core::graph::{AttentionParams, CommunicationMode};
use inn_core::ssm::{causal_conv1d, mamba_block, scan, selective_scan, MambaBlockParams, SsmParams};
use inn_core::tensor::check_params;
use inn_core::{neuron_attention, InnConfig, InnModel, Result, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub type T64 = Tensor<f64>;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> T64 {
    Tensor::randn(shape, 1.0, rng).into_param()
}

pub fn rand_shape(rng: &mut ChaCha8Rng, max_rank: usize, max_dim: usize) -> Vec<usize> {
    let rank = rng.random_range(1..=max_rank);
    (0..rank).map(|_| rng.random_range(1..=max_dim)).collect()
}

/// Central-difference step for the f64 checks. Smaller steps let loss
/// rounding swamp the ~1e-10 gradients some model parameters carry.
pub const H: f64 = 1e-4;

/// Contracts `y` against fixed random weights so that no coordinate's
/// gradient vanishes by symmetry.
fn probe(y: &T64, seed: u64) -> Result<T64> {
    let w = Tensor::<f64>::randn(y.shape(), 1.0, &mut rng(seed));
    Ok(y.mul(&w)?.sum())
}

/// Max relative error of tape vs. numeric gradients of `probe(f(inputs))`
/// with respect to every input.
pub fn check(inputs: &[T64], f: impl Fn(&[T64]) -> Result<T64>, seed: u64) -> f64 {
    let report = check_params(inputs, || probe(&f(inputs)?, seed), H).expect("grad check runs");
    report.max_rel_err
}

/// One line of the gradient suite: an operation and its worst error over
/// five random shapes.
pub struct GradResult {
    pub op: &'static str,
    pub max_rel_err: f64,
}

const SHAPES_PER_OP: u64 = 5;

fn over_shapes(op: &'static str, mut case: impl FnMut(&mut ChaCha8Rng, u64) -> f64) -> GradResult {
    let mut worst = 0.0f64;
    for s in 0..SHAPES_PER_OP {
        let mut r = rng(0x5eed ^ (s << 8) ^ op.len() as u64);
        let e = case(&mut r, s);
        worst = if e.is_finite() { worst.max(e) } else { f64::INFINITY };
    }
    GradResult { op, max_rel_err: worst }
}

/// `shape` with some axes collapsed to 1 and possibly leading axes dropped,
/// so it broadcasts against `shape`.
fn broadcastable(shape: &[usize], r: &mut ChaCha8Rng) -> Vec<usize> {
    let drop = r.random_range(0..shape.len());
    shape[drop..]
        .iter()
        .map(|&d| if r.random_bool(0.4) { 1 } else { d })
        .collect()
}

fn positive(shape: &[usize], r: &mut ChaCha8Rng) -> T64 {
    let x = Tensor::<f64>::randn(shape, 1.0, r).to_vec();
    Tensor::from_vec(x.iter().map(|v| v.abs() + 0.5).collect(), shape).unwrap().into_param()
}

fn unary(op: &'static str, f: fn(&T64) -> T64, positive_input: bool) -> GradResult {
    over_shapes(op, |r, s| {
        let shape = rand_shape(r, 3, 4);
        let x = if positive_input { positive(&shape, r) } else { randn(&shape, r) };
        check(&[x], |i| Ok(f(&i[0])), s)
    })
}

fn binary(op: &'static str, f: fn(&T64, &T64) -> Result<T64>) -> GradResult {
    over_shapes(op, |r, s| {
        let shape = rand_shape(r, 3, 4);
        let other = broadcastable(&shape, r);
        let (a, b) = if s % 2 == 0 { (shape, other) } else { (other, shape) };
        let x = randn(&a, r);
        // keep divisors away from zero
        let y = if op == "div" { positive(&b, r) } else { randn(&b, r) };
        check(&[x, y], |i| f(&i[0], &i[1]), s)
    })
}

pub fn gradient_suite() -> Vec<GradResult> {
    let mut out = vec![
        binary("add", |a, b| a.add(b)),
        binary("sub", |a, b| a.sub(b)),
        binary("mul", |a, b| a.mul(b)),
        binary("div", |a, b| a.div(b)),
        unary("neg", |x| x.neg(), false),
        unary("scale", |x| x.scale(-1.7), false),
        unary("add_scalar", |x| x.add_scalar(0.3), false),
        unary("exp", |x| x.exp(), false),
        unary("ln", |x| x.ln(), true),
        unary("square", |x| x.square(), false),
        unary("tanh", |x| x.tanh(), false),
        unary("sigmoid", |x| x.sigmoid(), false),
        unary("silu", |x| x.silu(), false),
        unary("softplus", |x| x.softplus(), false),
        unary("sum", |x| x.sum(), false),
        unary("mean", |x| x.mean(), false),
    ];
    out.push(over_shapes("sum_axis", |r, s| {
        let shape = rand_shape(r, 3, 4);
        let axis = r.random_range(0..shape.len());
        let keep = r.random_bool(0.5);
        check(&[randn(&shape, r)], |i| i[0].sum_axis(axis, keep), s)
    }));
    out.push(over_shapes("mean_axis", |r, s| {
        let shape = rand_shape(r, 3, 4);
        let axis = r.random_range(0..shape.len());
        check(&[randn(&shape, r)], |i| i[0].mean_axis(axis, false), s)
    }));
    out.push(over_shapes("reshape", |r, s| {
        let shape = rand_shape(r, 3, 4);
        let n: usize = shape.iter().product();
        check(&[randn(&shape, r)], |i| i[0].reshape(&[1, n]), s)
    }));
    out.push(over_shapes("unsqueeze", |r, s| {
        let shape = rand_shape(r, 3, 4);
        let axis = r.random_range(0..=shape.len());
        check(&[randn(&shape, r)], |i| i[0].unsqueeze(axis), s)
    }));
    out.push(over_shapes("permute", |r, s| {
        let shape = rand_shape(r, 4, 4);
        let mut perm: Vec<usize> = (0..shape.len()).collect();
        perm.shuffle(r);
        check(&[randn(&shape, r)], |i| i[0].permute(&perm), s)
    }));
    out.push(over_shapes("transpose", |r, s| {
        let mut shape = rand_shape(r, 3, 4);
        if shape.len() == 1 {
            shape.push(3);
        }
        let a = r.random_range(0..shape.len());
        let b = r.random_range(0..shape.len());
        check(&[randn(&shape, r)], |i| i[0].transpose(a, b), s)
    }));
    out.push(over_shapes("narrow", |r, s| {
        let shape = rand_shape(r, 3, 5);
        let axis = r.random_range(0..shape.len());
        let start = r.random_range(0..shape[axis]);
        let len = r.random_range(1..=shape[axis] - start);
        check(&[randn(&shape, r)], |i| i[0].narrow(axis, start, len), s)
    }));
    out.push(over_shapes("concat", |r, s| {
        let shape = rand_shape(r, 3, 4);
        let axis = r.random_range(0..shape.len());
        let parts: Vec<T64> = (0..r.random_range(2..=3))
            .map(|_| {
                let mut sh = shape.clone();
                sh[axis] = r.random_range(1..=3);
                randn(&sh, r)
            })
            .collect();
        check(&parts, |i| Tensor::concat(i, axis), s)
    }));
    out.push(over_shapes("broadcast_to", |r, s| {
        let shape = rand_shape(r, 3, 4);
        let small = broadcastable(&shape, r);
        check(&[randn(&small, r)], |i| i[0].broadcast_to(&shape), s)
    }));
    out.push(over_shapes("gather_rows", |r, s| {
        let (v, d) = (r.random_range(2..6), r.random_range(1..5));
        let ids: Vec<usize> = (0..r.random_range(1..8)).map(|_| r.random_range(0..v)).collect();
        check(&[randn(&[v, d], r)], |i| i[0].gather_rows(&ids), s)
    }));
    out.push(over_shapes("matmul", |r, s| {
        let (m, k, n) = (r.random_range(1..5), r.random_range(1..5), r.random_range(1..5));
        let bsz = r.random_range(1..4);
        let (a, b) = match s % 4 {
            0 => (vec![m, k], vec![k, n]),
            1 => (vec![bsz, m, k], vec![k, n]),
            2 => (vec![bsz, m, k], vec![bsz, k, n]),
            _ => (vec![1, m, k], vec![bsz, k, n]),
        };
        check(&[randn(&a, r), randn(&b, r)], |i| i[0].matmul(&i[1]), s)
    }));
    out.push(over_shapes("softmax", |r, s| {
        let shape = rand_shape(r, 3, 4);
        let axis = r.random_range(0..shape.len());
        check(&[randn(&shape, r)], |i| i[0].softmax(axis), s)
    }));
    out.push(over_shapes("layer_norm", |r, s| {
        let mut shape = rand_shape(r, 3, 4);
        *shape.last_mut().unwrap() += 1;
        let d = *shape.last().unwrap();
        let inputs = [randn(&shape, r), randn(&[d], r), randn(&[d], r)];
        check(&inputs, |i| i[0].layer_norm(&i[1], &i[2], 1e-5), s)
    }));
    out.push(over_shapes("cross_entropy", |r, s| {
        let (b, v) = (r.random_range(1..6), r.random_range(2..7));
        let targets: Vec<usize> = (0..b).map(|_| r.random_range(0..v)).collect();
        check(&[randn(&[b, v], r)], |i| i[0].cross_entropy(&targets), s)
    }));
    out.push(over_shapes("dropout", |r, s| {
        let shape = rand_shape(r, 3, 4);
        // the same seed on every call gives the same mask
        check(&[randn(&shape, r)], |i| i[0].dropout(0.3, &mut rng(99 + s)), s)
    }));
    out.push(over_shapes("selective_scan_kernel", |r, s| {
        let (nb, l, d, n) = (r.random_range(1..3), r.random_range(1..6), r.random_range(1..4), r.random_range(1..4));
        let delta = positive(&[nb, l, d], r).scale(0.3).detach().into_param();
        let a = positive(&[d, n], r).neg().detach().into_param();
        let inputs = [
            randn(&[nb, l, d], r),
            delta,
            a,
            randn(&[nb, l, n], r),
            randn(&[nb, l, n], r),
            randn(&[d], r),
        ];
        check(&inputs, |i| scan(&i[0], &i[1], &i[2], &i[3], &i[4], &i[5]), s)
    }));
    out.push(over_shapes("causal_conv1d", |r, s| {
        let (nb, l, d, k) = (r.random_range(1..3), r.random_range(1..7), r.random_range(1..4), r.random_range(1..5));
        let inputs = [randn(&[nb, l, d], r), randn(&[d, k], r), randn(&[d], r)];
        check(&inputs, |i| causal_conv1d(&i[0], &i[1], &i[2]), s)
    }));
    out.push(over_shapes("selective_scan", |r, s| {
        let (nb, l, di, n) = (r.random_range(1..3), r.random_range(1..5), r.random_range(2..5), r.random_range(1..3));
        let p = SsmParams::<f64>::init(di, n, 1, r);
        let u = randn(&[nb, l, di], r);
        let inputs = [u, p.a_log.clone(), p.d.clone(), p.w_bc.clone(), p.w_dt.clone(), p.dt_bias.clone()];
        check(&inputs, |i| selective_scan(&i[0], &p), s)
    }));
    out.push(over_shapes("mamba_block", |r, s| {
        let (nb, l, dm) = (r.random_range(1..3), r.random_range(1..5), r.random_range(2..5));
        let p = MambaBlockParams::<f64>::init(dm, 2, 2, 3, r);
        let mut params = vec![randn(&[nb, l, dm], r)];
        let mut named = Vec::new();
        p.params("m", &mut named);
        params.extend(named.into_iter().map(|p| p.tensor));
        check(&params, |i| mamba_block(&i[0], &p), s)
    }));
    for (name, mode) in [
        ("neuron_attention_learned", CommunicationMode::Learned),
        ("neuron_attention_static", CommunicationMode::Static),
        ("neuron_attention_none", CommunicationMode::None),
    ] {
        out.push(over_shapes(name, |r, s| {
            let (b, n, l) = (r.random_range(1..3), r.random_range(1..4), r.random_range(1..4));
            let heads = r.random_range(1..3);
            let d = heads * r.random_range(1..3);
            let p = AttentionParams::<f64>::init(d, heads, mode, r).unwrap();
            let mut params = vec![randn(&[b, n, l, d], r)];
            let mut named = Vec::new();
            p.params("a", &mut named);
            params.extend(named.into_iter().map(|p| p.tensor));
            check(&params, |i| Ok(neuron_attention(&i[0], &p, mode)?.0), s)
        }));
    }
    out
}

/// The end-to-end tiny configuration: b=1, N=2, l=4, d_model=8, d_state=2, V=5.
pub fn tiny_config(mode: CommunicationMode) -> InnConfig {
    InnConfig {
        n_neurons: 2,
        n_layers: 2,
        d_model: 8,
        d_state: 2,
        n_heads: 2,
        vocab_size: 5,
        comm_mode: mode,
        dropout: 0.0,
        seed: 3,
        expand: 2,
        k_conv: 4,
        neuron_embeddings: true,
    }
}

/// Gradient check of the full model's cross-entropy loss with respect to
/// every parameter.
pub fn tiny_model_grad_error(mode: CommunicationMode) -> f64 {
    let model = InnModel::<f64>::new(tiny_config(mode)).unwrap();
    let ids = [1usize, 4, 0, 2];
    let targets = [4usize, 0, 2, 3];
    let params: Vec<T64> = model.params().into_iter().map(|p| p.tensor).collect();
    let report = check_params(
        &params,
        || model.logits(&ids, 1, 4)?.reshape(&[4, 5])?.cross_entropy(&targets),
        H,
    )
    .unwrap();
    report.max_rel_err
}

/// Per-step loop oracle for the scan kernel, in f64 throughout.
#[allow(clippy::too_many_arguments)]
pub fn scan_oracle(
    u: &[f64],
    delta: &[f64],
    a: &[f64],
    b_t: &[f64],
    c_t: &[f64],
    d_skip: &[f64],
    (nb, l, d, n): (usize, usize, usize, usize),
) -> Vec<f64> {
    let mut y = vec![0.0; nb * l * d];
    for bi in 0..nb {
        for c in 0..d {
            let mut h = vec![0.0; n];
            for t in 0..l {
                let row = bi * l + t;
                let (x, dt) = (u[row * d + c], delta[row * d + c]);
                let mut acc = d_skip[c] * x;
                for j in 0..n {
                    let abar = (dt * a[c * n + j]).exp();
                    let bbar = dt * b_t[row * n + j];
                    h[j] = abar * h[j] + bbar * x;
                    acc += c_t[row * n + j] * h[j];
                }
                y[row * d + c] = acc;
            }
        }
    }
    y
}

fn matvec(x: &[f64], w: &[f64], d_in: usize, d_out: usize) -> Vec<f64> {
    (0..d_out)
        .map(|o| (0..d_in).map(|i| x[i] * w[i * d_out + o]).sum())
        .collect()
}

/// Brute-force neuron attention: loops over (batch, timestep, head) and
/// builds each N x N score matrix explicitly.
pub fn attention_oracle(h: &[f64], p: &AttentionParams<f64>, (b, n, l, d): (usize, usize, usize, usize)) -> Vec<f64> {
    let heads = p.n_heads;
    let dh = d / heads;
    let (wq, wk) = (p.w_q.as_ref().unwrap().to_vec(), p.w_k.as_ref().unwrap().to_vec());
    let (wv, wo) = (p.w_v.to_vec(), p.w_o.to_vec());
    let mut out = vec![0.0; h.len()];
    for bi in 0..b {
        for t in 0..l {
            let state = |i: usize| &h[((bi * n + i) * l + t) * d..][..d];
            let q: Vec<Vec<f64>> = (0..n).map(|i| matvec(state(i), &wq, d, d)).collect();
            let k: Vec<Vec<f64>> = (0..n).map(|i| matvec(state(i), &wk, d, d)).collect();
            let v: Vec<Vec<f64>> = (0..n).map(|i| matvec(state(i), &wv, d, d)).collect();
            let mut mixed = vec![vec![0.0; d]; n];
            for hd in 0..heads {
                let cols = hd * dh..(hd + 1) * dh;
                for i in 0..n {
                    let scores: Vec<f64> = (0..n)
                        .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (dh as f64).sqrt())
                        .collect();
                    let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                    let z: f64 = e.iter().sum();
                    for j in 0..n {
                        for c in cols.clone() {
                            mixed[i][c] += e[j] / z * v[j][c];
                        }
                    }
                }
            }
            for i in 0..n {
                let o = matvec(&mixed[i], &wo, d, d);
                out[((bi * n + i) * l + t) * d..][..d].copy_from_slice(&o);
            }
        }
    }
    out
}

/// A Text8-style corpus (lowercase letters and single spaces) used when no
/// real Text8 file is supplied through `INN_TEXT8`.
pub fn text8_corpus(bytes: usize) -> Vec<u8> {
    match std::env::var_os("INN_TEXT8") {
        Some(path) => {
            let mut raw = std::fs::read(&path).expect("INN_TEXT8 names a readable file");
            raw.truncate(bytes);
            raw
        }
        None => inn_core::data::synthetic_text8(bytes, 8).into_bytes(),
    }
}
