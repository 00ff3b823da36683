//! Selective state-space memory and the Mamba-style block that wraps it.
//!
//! Per channel, with diagonal `A < 0` and input-dependent `B_t`, `C_t`, `Δ_t`:
//!
//! ```text
//! h_t = exp(Δ_t A) ⊙ h_{t-1} + Δ_t B_t u_t        (h_0 = 0)
//! y_t = ⟨C_t, h_t⟩ + D u_t
//! ```
//!
//! `A` is discretized with a zero-order hold and `B` with an Euler step.

use rand::Rng;

use crate::error::{Error, Result};
use crate::param::Param;
use crate::tensor::counter::add_macs;
use crate::tensor::{Element, Tensor};

/// `(A_bar, B_bar) = (exp(Δ A), Δ B)`.
pub fn discretize<T: Element>(a: T, b: T, delta: T) -> (T, T) {
    ((delta * a).exp(), delta * b)
}

/// Learned parameters of the selective scan for one block.
#[derive(Clone, Debug)]
pub struct SsmParams<T: Element = f32> {
    /// `log(-A)`, `[d_inner, d_state]`.
    pub a_log: Tensor<T>,
    /// Skip coefficient, `[d_inner]`.
    pub d: Tensor<T>,
    /// Input projection to `(Δ features, B, C)`, `[d_inner, dt_rank + 2 d_state]`.
    pub w_bc: Tensor<T>,
    /// `[dt_rank, d_inner]`.
    pub w_dt: Tensor<T>,
    /// `[d_inner]`.
    pub dt_bias: Tensor<T>,
}

pub fn dt_rank(d_model: usize) -> usize {
    d_model.div_ceil(16)
}

fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl<T: Element> SsmParams<T> {
    pub fn init<R: Rng + ?Sized>(d_inner: usize, d_state: usize, dt_rank: usize, rng: &mut R) -> Self {
        let a_log: Vec<f64> = (0..d_inner)
            .flat_map(|_| (1..=d_state).map(|j| (j as f64).ln()))
            .collect();
        let (lo, hi) = (1e-3f64.ln(), 0.1f64.ln());
        let dt_bias: Vec<f64> = (0..d_inner)
            .map(|_| inverse_softplus(rng.random_range(lo..hi).exp()))
            .collect();
        let bc = 1.0 / (d_inner as f64).sqrt();
        let dt = 1.0 / (dt_rank as f64).sqrt();
        SsmParams {
            a_log: Tensor::from_f64(&a_log, &[d_inner, d_state]).expect("shape").into_param(),
            d: Tensor::ones(&[d_inner]).into_param(),
            w_bc: Tensor::uniform(&[d_inner, dt_rank + 2 * d_state], -bc, bc, rng).into_param(),
            w_dt: Tensor::uniform(&[dt_rank, d_inner], -dt, dt, rng).into_param(),
            dt_bias: Tensor::from_f64(&dt_bias, &[d_inner]).expect("shape").into_param(),
        }
    }

    pub fn d_inner(&self) -> usize {
        self.a_log.dim(0)
    }

    pub fn d_state(&self) -> usize {
        self.a_log.dim(1)
    }

    pub fn dt_rank(&self) -> usize {
        self.w_dt.dim(0)
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<Param<T>>) {
        out.push(Param::new(format!("{prefix}.a_log"), &self.a_log, false));
        out.push(Param::new(format!("{prefix}.d"), &self.d, false));
        out.push(Param::new(format!("{prefix}.w_bc"), &self.w_bc, true));
        out.push(Param::new(format!("{prefix}.w_dt"), &self.w_dt, true));
        out.push(Param::new(format!("{prefix}.dt_bias"), &self.dt_bias, false));
    }
}

/// Projections around the scan: `W_in -> (main, gate)`, causal depthwise
/// convolution on `main`, and `W_out` back to the model width.
#[derive(Clone, Debug)]
pub struct MambaBlockParams<T: Element = f32> {
    /// `[d_model, 2 d_inner]`.
    pub w_in: Tensor<T>,
    /// `[d_inner, k_conv]`.
    pub conv_w: Tensor<T>,
    /// `[d_inner]`.
    pub conv_b: Tensor<T>,
    /// `[d_inner, d_model]`.
    pub w_out: Tensor<T>,
    pub ssm: SsmParams<T>,
}

impl<T: Element> MambaBlockParams<T> {
    pub fn init<R: Rng + ?Sized>(
        d_model: usize,
        d_state: usize,
        expand: usize,
        k_conv: usize,
        rng: &mut R,
    ) -> Self {
        let d_inner = expand * d_model;
        let s_in = 1.0 / (d_model as f64).sqrt();
        let s_conv = 1.0 / (k_conv as f64).sqrt();
        let s_out = 1.0 / (d_inner as f64).sqrt();
        MambaBlockParams {
            w_in: Tensor::uniform(&[d_model, 2 * d_inner], -s_in, s_in, rng).into_param(),
            conv_w: Tensor::uniform(&[d_inner, k_conv], -s_conv, s_conv, rng).into_param(),
            conv_b: Tensor::zeros(&[d_inner]).into_param(),
            w_out: Tensor::uniform(&[d_inner, d_model], -s_out, s_out, rng).into_param(),
            ssm: SsmParams::init(d_inner, d_state, dt_rank(d_model), rng),
        }
    }

    pub fn d_model(&self) -> usize {
        self.w_in.dim(0)
    }

    pub fn params(&self, prefix: &str, out: &mut Vec<Param<T>>) {
        out.push(Param::new(format!("{prefix}.w_in"), &self.w_in, true));
        out.push(Param::new(format!("{prefix}.conv_w"), &self.conv_w, true));
        out.push(Param::new(format!("{prefix}.conv_b"), &self.conv_b, false));
        out.push(Param::new(format!("{prefix}.w_out"), &self.w_out, true));
        self.ssm.params(&format!("{prefix}.ssm"), out);
    }
}

fn dims3<T: Element>(t: &Tensor<T>, what: &str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [b, l, d] => Ok((b, l, d)),
        _ => Err(Error::Contract(format!("{what} must be [batch, len, channels], got {:?}", t.shape()))),
    }
}

/// The fused selective-scan kernel.
///
/// `u`, `delta`: `[b, l, d]`; `a`: `[d, n]` (strictly negative);
/// `b_t`, `c_t`: `[b, l, n]`; `d_skip`: `[d]`. Returns `y`: `[b, l, d]`.
pub fn scan<T: Element>(
    u: &Tensor<T>,
    delta: &Tensor<T>,
    a: &Tensor<T>,
    b_t: &Tensor<T>,
    c_t: &Tensor<T>,
    d_skip: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (nb, l, d) = dims3(u, "scan input")?;
    if delta.shape() != u.shape() {
        return Err(Error::shape("scan", u.shape(), delta.shape()));
    }
    let n = *a.shape().get(1).ok_or_else(|| Error::shape("scan", u.shape(), a.shape()))?;
    if a.shape() != [d, n] {
        return Err(Error::shape("scan", u.shape(), a.shape()));
    }
    for m in [b_t, c_t] {
        if m.shape() != [nb, l, n] {
            return Err(Error::shape("scan", u.shape(), m.shape()));
        }
    }
    if d_skip.shape() != [d] {
        return Err(Error::shape("scan", u.shape(), d_skip.shape()));
    }

    let dn = d * n;
    let mut hs = vec![T::zero(); nb * l * dn];
    let mut abar = vec![T::zero(); nb * l * dn];
    let mut y = vec![T::zero(); nb * l * d];
    {
        let (uu, dl, av, bv, cv, dv) = (u.data(), delta.data(), a.data(), b_t.data(), c_t.data(), d_skip.data());
        for bi in 0..nb {
            for t in 0..l {
                let row = bi * l + t;
                let bt = &bv[row * n..][..n];
                let ct = &cv[row * n..][..n];
                let (done, rest) = hs.split_at_mut(row * dn);
                let prev_row = (t > 0).then(|| &done[(row - 1) * dn..]);
                let cur = &mut rest[..dn];
                let ab_row = &mut abar[row * dn..][..dn];
                for c in 0..d {
                    let x = uu[row * d + c];
                    let dt = dl[row * d + c];
                    let ac = &av[c * n..][..n];
                    let hc = &mut cur[c * n..][..n];
                    let abc = &mut ab_row[c * n..][..n];
                    for j in 0..n {
                        abc[j] = discretize(ac[j], bt[j], dt).0;
                    }
                    match prev_row {
                        Some(p) => {
                            let pc = &p[c * n..][..n];
                            for j in 0..n {
                                hc[j] = abc[j] * pc[j] + dt * bt[j] * x;
                            }
                        }
                        None => {
                            for j in 0..n {
                                hc[j] = dt * bt[j] * x;
                            }
                        }
                    }
                    let acc = dv[c] * x + hc.iter().zip(ct).map(|(&h, &cj)| h * cj).sum::<T>();
                    y[row * d + c] = acc;
                }
            }
        }
    }
    add_macs((nb * l * dn * 3) as u64);

    Ok(Tensor::from_op(
        "selective_scan",
        vec![nb, l, d],
        y,
        vec![u.clone(), delta.clone(), a.clone(), b_t.clone(), c_t.clone(), d_skip.clone()],
        Box::new(move |gy, _, inputs| {
            let (uu, dl, av, bv, cv, dv) = (
                inputs[0].data(),
                inputs[1].data(),
                inputs[2].data(),
                inputs[3].data(),
                inputs[4].data(),
                inputs[5].data(),
            );
            let mut gu = vec![T::zero(); nb * l * d];
            let mut gdelta = vec![T::zero(); nb * l * d];
            let mut ga = vec![T::zero(); dn];
            let mut gb = vec![T::zero(); nb * l * n];
            let mut gc = vec![T::zero(); nb * l * n];
            let mut gd = vec![T::zero(); d];
            let mut dh = vec![T::zero(); dn];
            let zeros = vec![T::zero(); n];
            for bi in 0..nb {
                dh.iter_mut().for_each(|v| *v = T::zero());
                for t in (0..l).rev() {
                    let row = bi * l + t;
                    let h_row = &hs[row * dn..][..dn];
                    let prev_row = (t > 0).then(|| &hs[(row - 1) * dn..][..dn]);
                    let ab_row = &abar[row * dn..][..dn];
                    let bt = &bv[row * n..][..n];
                    let ct = &cv[row * n..][..n];
                    let gbt = &mut gb[row * n..][..n];
                    let gct = &mut gc[row * n..][..n];
                    for c in 0..d {
                        let g = gy[row * d + c];
                        let x = uu[row * d + c];
                        let dt = dl[row * d + c];
                        gd[c] += g * x;
                        let hc = &h_row[c * n..][..n];
                        let prev = prev_row.map_or(&zeros[..n], |p| &p[c * n..][..n]);
                        let abc = &ab_row[c * n..][..n];
                        let ac = &av[c * n..][..n];
                        let gac = &mut ga[c * n..][..n];
                        let dhc = &mut dh[c * n..][..n];
                        let mut gx = g * dv[c];
                        let mut gdt = T::zero();
                        for j in 0..n {
                            // dL/dh_t: carried from t+1 plus the readout at t
                            let dhj = dhc[j] + g * ct[j];
                            gct[j] += g * hc[j];
                            let g_ab = dhj * prev[j] * abc[j];
                            gdt += g_ab * ac[j] + dhj * bt[j] * x;
                            gac[j] += g_ab * dt;
                            gbt[j] += dhj * dt * x;
                            gx += dhj * dt * bt[j];
                            dhc[j] = dhj * abc[j];
                        }
                        gu[row * d + c] = gx;
                        gdelta[row * d + c] = gdt;
                    }
                }
            }
            vec![Some(gu), Some(gdelta), Some(ga), Some(gb), Some(gc), Some(gd)]
        }),
    ))
}

/// Causal depthwise convolution: `y[t, c] = bias[c] + Σ_j w[c, j] x[t - (k-1) + j, c]`
/// with zero left padding. `x`: `[b, l, d]`, `w`: `[d, k]`, `bias`: `[d]`.
pub fn causal_conv1d<T: Element>(x: &Tensor<T>, w: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (nb, l, d) = dims3(x, "conv input")?;
    let k = match *w.shape() {
        [wd, k] if wd == d => k,
        _ => return Err(Error::shape("causal_conv1d", x.shape(), w.shape())),
    };
    if bias.shape() != [d] {
        return Err(Error::shape("causal_conv1d", x.shape(), bias.shape()));
    }
    let mut y = vec![T::zero(); nb * l * d];
    {
        let (xv, wv, bv) = (x.data(), w.data(), bias.data());
        for bi in 0..nb {
            for t in 0..l {
                let out = &mut y[(bi * l + t) * d..][..d];
                out.copy_from_slice(&bv);
                for j in 0..k {
                    let Some(s) = (t + j).checked_sub(k - 1) else { continue };
                    let src = &xv[(bi * l + s) * d..][..d];
                    for c in 0..d {
                        out[c] += wv[c * k + j] * src[c];
                    }
                }
            }
        }
    }
    add_macs((nb * l * d * k) as u64);
    Ok(Tensor::from_op(
        "causal_conv1d",
        vec![nb, l, d],
        y,
        vec![x.clone(), w.clone(), bias.clone()],
        Box::new(move |g, _, inputs| {
            let (xv, wv) = (inputs[0].data(), inputs[1].data());
            let mut gx = vec![T::zero(); nb * l * d];
            let mut gw = vec![T::zero(); d * k];
            let mut gbias = vec![T::zero(); d];
            for bi in 0..nb {
                for t in 0..l {
                    let gr = &g[(bi * l + t) * d..][..d];
                    gbias.iter_mut().zip(gr).for_each(|(a, &b)| *a += b);
                    for j in 0..k {
                        let Some(s) = (t + j).checked_sub(k - 1) else { continue };
                        let row = (bi * l + s) * d;
                        for c in 0..d {
                            gx[row + c] += gr[c] * wv[c * k + j];
                            gw[c * k + j] += gr[c] * xv[row + c];
                        }
                    }
                }
            }
            vec![Some(gx), Some(gw), Some(gbias)]
        }),
    ))
}

/// Selective scan with `Δ`, `B`, `C` computed from the input itself.
///
/// `u`: `[b, l, d_inner]` -> `[b, l, d_inner]`.
pub fn selective_scan<T: Element>(u: &Tensor<T>, p: &SsmParams<T>) -> Result<Tensor<T>> {
    let (_, _, d) = dims3(u, "selective_scan input")?;
    if d != p.d_inner() {
        return Err(Error::shape("selective_scan", u.shape(), p.a_log.shape()));
    }
    if let Some(pos) = u.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::Contract(format!("selective_scan: non-finite input at flat index {pos}")));
    }
    let (r, n) = (p.dt_rank(), p.d_state());
    let feats = u.matmul(&p.w_bc)?;
    let dt_in = feats.narrow(2, 0, r)?;
    let b_t = feats.narrow(2, r, n)?;
    let c_t = feats.narrow(2, r + n, n)?;
    let delta = dt_in.matmul(&p.w_dt)?.add(&p.dt_bias)?.softplus();
    let a = p.a_log.exp().neg();
    scan(u, &delta, &a, &b_t, &c_t, &p.d)
}

/// `x`: `[b, l, d_model]` -> `[b, l, d_model]`.
pub fn mamba_block<T: Element>(x: &Tensor<T>, p: &MambaBlockParams<T>) -> Result<Tensor<T>> {
    let (_, _, dm) = dims3(x, "mamba_block input")?;
    if dm != p.d_model() {
        return Err(Error::shape("mamba_block", x.shape(), p.w_in.shape()));
    }
    let di = p.ssm.d_inner();
    let xz = x.matmul(&p.w_in)?;
    let main = xz.narrow(2, 0, di)?;
    let gate = xz.narrow(2, di, di)?;
    let main = causal_conv1d(&main, &p.conv_w, &p.conv_b)?.silu();
    let y = selective_scan(&main, &p.ssm)?;
    y.mul(&gate.silu())?.matmul(&p.w_out)
}
