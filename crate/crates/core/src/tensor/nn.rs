use rand::Rng;

use super::ops::{axis_split, normalize_axis};
use super::{Element, Tensor};
use crate::error::{Error, Result};

impl<T: Element> Tensor<T> {
    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        let axis = normalize_axis(axis, self.rank(), "softmax")?;
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let mut out = self.to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let at = |k: usize| base + k * inner;
                let max = (0..len).map(|k| out[at(k)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for k in 0..len {
                    let e = (out[at(k)] - max).exp();
                    out[at(k)] = e;
                    total += e;
                }
                for k in 0..len {
                    out[at(k)] = out[at(k)] / total;
                }
            }
        }
        Ok(Tensor::from_op(
            "softmax",
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g, y, _| {
                let mut gx = vec![T::zero(); g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let dot: T = (0..len).map(|k| g[base + k * inner] * y[base + k * inner]).sum();
                        for k in 0..len {
                            let p = base + k * inner;
                            gx[p] = y[p] * (g[p] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Normalizes each vector along the last axis to zero mean and unit
    /// variance, then applies `gamma * x + beta`.
    pub fn layer_norm(&self, gamma: &Tensor<T>, beta: &Tensor<T>, eps: f64) -> Result<Tensor<T>> {
        let d = *self
            .shape()
            .last()
            .ok_or_else(|| Error::Contract("layer_norm on a scalar".into()))?;
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::shape("layer_norm", self.shape(), gamma.shape()));
        }
        let rows = self.numel() / d;
        let eps = T::of(eps);
        let dt = T::of(d as f64);
        let mut xhat = vec![T::zero(); rows * d];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        {
            let (x, gm, bt) = (self.data(), gamma.data(), beta.data());
            for r in 0..rows {
                let row = &x[r * d..][..d];
                let mean = row.iter().copied().sum::<T>() / dt;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
                let is = T::one() / (var + eps).sqrt();
                inv_std[r] = is;
                for j in 0..d {
                    let h = (row[j] - mean) * is;
                    xhat[r * d + j] = h;
                    out[r * d + j] = gm[j] * h + bt[j];
                }
            }
        }
        Ok(Tensor::from_op(
            "layer_norm",
            self.shape().to_vec(),
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g, _, inputs| {
                let gm = inputs[1].data();
                let mut gx = vec![T::zero(); rows * d];
                let mut ggamma = vec![T::zero(); d];
                let mut gbeta = vec![T::zero(); d];
                for r in 0..rows {
                    let gr = &g[r * d..][..d];
                    let hr = &xhat[r * d..][..d];
                    let mut sum_gh = T::zero();
                    let mut sum_ghh = T::zero();
                    for j in 0..d {
                        let gh = gr[j] * gm[j];
                        sum_gh += gh;
                        sum_ghh += gh * hr[j];
                        ggamma[j] += gr[j] * hr[j];
                        gbeta[j] += gr[j];
                    }
                    for j in 0..d {
                        let gh = gr[j] * gm[j];
                        gx[r * d + j] = inv_std[r] * (gh - sum_gh / dt - hr[j] * sum_ghh / dt);
                    }
                }
                vec![Some(gx), Some(ggamma), Some(gbeta)]
            }),
        ))
    }

    /// Mean negative log-likelihood (nats) of `targets` under logits whose
    /// last axis indexes classes.
    pub fn cross_entropy(&self, targets: &[usize]) -> Result<Tensor<T>> {
        let v = *self
            .shape()
            .last()
            .ok_or_else(|| Error::Contract("cross_entropy on a scalar".into()))?;
        let rows = self.numel() / v;
        if targets.len() != rows {
            return Err(Error::Contract(format!(
                "cross_entropy: {} targets for {rows} rows",
                targets.len()
            )));
        }
        if let Some(pos) = targets.iter().position(|&t| t >= v) {
            return Err(Error::Input(format!(
                "target {} at position {pos} out of range for {v} classes",
                targets[pos]
            )));
        }
        let mut probs = vec![T::zero(); rows * v];
        let mut nll = 0.0f64;
        {
            let x = self.data();
            for r in 0..rows {
                let row = &x[r * v..][..v];
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let total: T = row.iter().map(|&z| (z - max).exp()).sum();
                let lse = max + total.ln();
                nll += (lse - row[targets[r]]).f64();
                for j in 0..v {
                    probs[r * v + j] = (row[j] - lse).exp();
                }
            }
        }
        let targets = targets.to_vec();
        let inv = T::of(1.0 / rows as f64);
        Ok(Tensor::from_op(
            "cross_entropy",
            vec![],
            vec![T::of(nll / rows as f64)],
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = probs.clone();
                for (r, &t) in targets.iter().enumerate() {
                    gx[r * v + t] -= T::one();
                }
                let s = g[0] * inv;
                gx.iter_mut().for_each(|x| *x *= s);
                vec![Some(gx)]
            }),
        ))
    }

    /// Inverted dropout: zeroes each entry with probability `p` and scales
    /// survivors by `1 / (1 - p)`.
    pub fn dropout<R: Rng + ?Sized>(&self, p: f64, rng: &mut R) -> Result<Tensor<T>> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Config(format!("dropout probability {p} outside [0, 1)")));
        }
        if p == 0.0 {
            return Ok(self.clone());
        }
        let keep = T::of(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.numel())
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let m = Tensor::from_vec(mask, self.shape())?;
        self.mul(&m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_examples() {
        let t = Tensor::<f32>::from_f64(&[0.0, 0.0], &[2]).unwrap();
        assert_eq!(t.softmax(0).unwrap().to_vec(), vec![0.5, 0.5]);
        let shifted = Tensor::<f32>::from_f64(&[7.25, 7.25], &[2]).unwrap();
        assert_eq!(shifted.softmax(0).unwrap().to_vec(), vec![0.5, 0.5]);
        let big = Tensor::<f32>::from_f64(&[1000.0, 0.0], &[2]).unwrap().softmax(0).unwrap();
        let v = big.to_vec();
        assert!(v.iter().all(|x| x.is_finite()));
        assert_eq!(v[0], 1.0);
        assert_eq!(v[1], 0.0);
    }

    #[test]
    fn softmax_along_middle_axis() {
        let t = Tensor::<f64>::from_f64(&[1., 2., 3., 4., 5., 6.], &[1, 2, 3]).unwrap();
        let s = t.softmax(1).unwrap().to_vec();
        for i in 0..3 {
            assert!((s[i] + s[3 + i] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_examples() {
        let g = Tensor::<f32>::ones(&[4]);
        let b = Tensor::<f32>::zeros(&[4]);
        let c = Tensor::<f32>::full(&[4], 5.0);
        assert_eq!(c.layer_norm(&g, &b, 1e-5).unwrap().to_vec(), vec![0.0; 4]);

        let g = Tensor::<f64>::ones(&[2]);
        let b = Tensor::<f64>::zeros(&[2]);
        let x = Tensor::<f64>::from_f64(&[1.0, -1.0], &[2]).unwrap();
        let y = x.layer_norm(&g, &b, 1e-5).unwrap().to_vec();
        assert!((y[0] - 1.0).abs() < 1e-5 && (y[1] + 1.0).abs() < 1e-5, "{y:?}");
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln_v() {
        let x = Tensor::<f64>::zeros(&[3, 27]);
        let l = x.cross_entropy(&[0, 5, 26]).unwrap().item();
        assert!((l - 27f64.ln()).abs() < 1e-12);
        assert!(x.cross_entropy(&[0, 5, 27]).is_err());
    }

    #[test]
    fn dropout_scales_survivors() {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f64>::ones(&[10_000]);
        let y = x.dropout(0.25, &mut rng).unwrap().to_vec();
        let kept = y.iter().filter(|&&v| v != 0.0).count() as f64 / 1e4;
        assert!((kept - 0.75).abs() < 0.02);
        assert!(y.iter().all(|&v| v == 0.0 || (v - 4.0 / 3.0).abs() < 1e-12));
        let mean = y.iter().sum::<f64>() / 1e4;
        assert!((mean - 1.0).abs() < 0.03);
    }
}
