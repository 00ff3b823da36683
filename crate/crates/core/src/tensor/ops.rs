//! Elementwise arithmetic, reductions and shape manipulation.

use super::{numel, strides, Element, Tensor};
use crate::error::{Error, Result};

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out` (right-aligned), with zero stride on
/// broadcast axes.
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let offset = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < offset || shape[i - offset] == 1 {
                0
            } else {
                own[i - offset]
            }
        })
        .collect()
}

/// Visits every index of `out` together with the matching offsets into two
/// broadcast operands.
pub(crate) fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total = numel(out);
    if out.is_empty() {
        f(0, 0, 0);
        return;
    }
    let rank = out.len();
    let inner = out[rank - 1];
    let (ia_step, ib_step) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank - 1];
    let (mut ia, mut ib) = (0usize, 0usize);
    let mut o = 0;
    while o < total {
        let (mut a, mut b) = (ia, ib);
        for _ in 0..inner {
            f(o, a, b);
            o += 1;
            a += ia_step;
            b += ib_step;
        }
        // advance the outer odometer
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            ia += sa[ax];
            ib += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            ia -= sa[ax] * out[ax];
            ib -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

/// Sums a gradient of shape `out` down to a broadcast operand's shape.
#[cfg(test)]
pub(crate) fn reduce_to_shape<T: Element>(g: &[T], out: &[usize], shape: &[usize]) -> Vec<T> {
    if out == shape {
        return g.to_vec();
    }
    let s = broadcast_strides(shape, out);
    let zero = vec![0; out.len()];
    let mut acc = vec![T::zero(); numel(shape)];
    for_each_broadcast(out, &s, &zero, |o, i, _| acc[i] += g[o]);
    acc
}

pub(crate) fn normalize_axis(axis: usize, rank: usize, op: &str) -> Result<usize> {
    if axis < rank {
        Ok(axis)
    } else {
        Err(Error::Contract(format!("{op}: axis {axis} out of range for rank {rank}")))
    }
}

/// `(outer, len, inner)` split of a shape around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

impl<T: Element> Tensor<T> {
    fn binary<F, DA, DB>(&self, other: &Tensor<T>, op: &'static str, f: F, da: DA, db: DB) -> Result<Tensor<T>>
    where
        F: Fn(T, T) -> T,
        DA: Fn(T, T) -> T + Send + Sync + 'static,
        DB: Fn(T, T) -> T + Send + Sync + 'static,
    {
        let out_shape = broadcast_shape(self.shape(), other.shape())
            .ok_or_else(|| Error::shape(op, self.shape(), other.shape()))?;
        let data = if self.shape() == other.shape() {
            let (a, b) = (self.data(), other.data());
            a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let sa = broadcast_strides(self.shape(), &out_shape);
            let sb = broadcast_strides(other.shape(), &out_shape);
            let (a, b) = (self.data(), other.data());
            let mut out = vec![T::zero(); numel(&out_shape)];
            for_each_broadcast(&out_shape, &sa, &sb, |o, i, j| out[o] = f(a[i], b[j]));
            out
        };
        let oshape = out_shape.clone();
        Ok(Tensor::from_op(
            op,
            out_shape,
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g, _, inputs| {
                let (x, y) = (&inputs[0], &inputs[1]);
                let (a, b) = (x.data(), y.data());
                if x.shape() == y.shape() {
                    let ga = x.requires_grad().then(|| {
                        g.iter().zip(a.iter().zip(b.iter())).map(|(&g, (&a, &b))| g * da(a, b)).collect()
                    });
                    let gb = y.requires_grad().then(|| {
                        g.iter().zip(a.iter().zip(b.iter())).map(|(&g, (&a, &b))| g * db(a, b)).collect()
                    });
                    return vec![ga, gb];
                }
                let sa = broadcast_strides(x.shape(), &oshape);
                let sb = broadcast_strides(y.shape(), &oshape);
                let mut ga = x.requires_grad().then(|| vec![T::zero(); a.len()]);
                let mut gb = y.requires_grad().then(|| vec![T::zero(); b.len()]);
                for_each_broadcast(&oshape, &sa, &sb, |o, i, j| {
                    if let Some(ga) = ga.as_mut() {
                        ga[i] += g[o] * da(a[i], b[j]);
                    }
                    if let Some(gb) = gb.as_mut() {
                        gb[j] += g[o] * db(a[i], b[j]);
                    }
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, "add", |a, b| a + b, |_, _| T::one(), |_, _| T::one())
    }

    pub fn sub(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, "sub", |a, b| a - b, |_, _| T::one(), |_, _| -T::one())
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(other, "mul", |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn div(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary(
            other,
            "div",
            |a, b| a / b,
            |_, b| T::one() / b,
            |a, b| -a / (b * b),
        )
    }

    /// `f` maps input to output; `df(x, y)` is the derivative at input `x`
    /// with output `y`.
    pub fn map(
        &self,
        op: &'static str,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + Send + Sync + 'static,
    ) -> Tensor<T> {
        let data: Vec<T> = self.data().iter().map(|&x| f(x)).collect();
        Tensor::from_op(
            op,
            self.shape().to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g, out, inputs| {
                let x = inputs[0].data();
                vec![Some(
                    g.iter()
                        .zip(x.iter().zip(out))
                        .map(|(&g, (&x, &y))| g * df(x, y))
                        .collect(),
                )]
            }),
        )
    }

    pub fn neg(&self) -> Tensor<T> {
        self.map("neg", |x| -x, |_, _| -T::one())
    }

    pub fn scale(&self, c: f64) -> Tensor<T> {
        let c = T::of(c);
        self.map("scale", move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor<T> {
        let c = T::of(c);
        self.map("add_scalar", move |x| x + c, |_, _| T::one())
    }

    pub fn exp(&self) -> Tensor<T> {
        self.map("exp", T::exp, |_, y| y)
    }

    pub fn ln(&self) -> Tensor<T> {
        self.map("ln", T::ln, |x, _| T::one() / x)
    }

    pub fn square(&self) -> Tensor<T> {
        self.map("square", |x| x * x, |x, _| x + x)
    }

    pub fn tanh(&self) -> Tensor<T> {
        self.map("tanh", T::tanh, |_, y| T::one() - y * y)
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        self.map("sigmoid", sigmoid, |_, y| y * (T::one() - y))
    }

    /// `x * sigmoid(x)`.
    pub fn silu(&self) -> Tensor<T> {
        self.map(
            "silu",
            |x| x * sigmoid(x),
            |x, _| {
                let s = sigmoid(x);
                s * (T::one() + x * (T::one() - s))
            },
        )
    }

    /// `ln(1 + e^x)`, linear above 20.
    pub fn softplus(&self) -> Tensor<T> {
        self.map("softplus", softplus, |x, _| sigmoid(x))
    }

    pub fn sum(&self) -> Tensor<T> {
        let s = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op(
            "sum",
            vec![],
            vec![s],
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor<T> {
        self.sum().scale(1.0 / self.numel() as f64)
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor<T>> {
        let axis = normalize_axis(axis, self.rank(), "sum_axis")?;
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let mut out = vec![T::zero(); outer * inner];
        {
            let x = self.data();
            for o in 0..outer {
                for k in 0..len {
                    let src = &x[(o * len + k) * inner..][..inner];
                    let dst = &mut out[o * inner..][..inner];
                    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
                }
            }
        }
        let mut shape = self.shape().to_vec();
        if keepdim {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        Ok(Tensor::from_op(
            "sum_axis",
            shape,
            out,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for k in 0..len {
                        gx[(o * len + k) * inner..][..inner]
                            .copy_from_slice(&g[o * inner..][..inner]);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor<T>> {
        let len = self.shape().get(axis).copied().unwrap_or(1);
        Ok(self.sum_axis(axis, keepdim)?.scale(1.0 / len as f64))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != self.numel() || shape.contains(&0) {
            return Err(Error::shape("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(
            "reshape",
            shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(|g, _, _| vec![Some(g.to_vec())]),
        ))
    }

    pub fn unsqueeze(&self, axis: usize) -> Result<Tensor<T>> {
        let mut shape = self.shape().to_vec();
        if axis > shape.len() {
            return Err(Error::Contract(format!("unsqueeze: axis {axis} out of range")));
        }
        shape.insert(axis, 1);
        self.reshape(&shape)
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<T>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Contract(format!(
                "permute: {perm:?} is not a permutation of {rank} axes"
            )));
        }
        let in_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let data = permute_data(&self.data(), &in_shape, perm);
        let mut inverse = vec![0; rank];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let oshape = out_shape.clone();
        Ok(Tensor::from_op(
            "permute",
            out_shape,
            data,
            vec![self.clone()],
            Box::new(move |g, _, _| vec![Some(permute_data(g, &oshape, &inverse))]),
        ))
    }

    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor<T>> {
        let mut perm: Vec<usize> = (0..self.rank()).collect();
        if a >= perm.len() || b >= perm.len() {
            return Err(Error::Contract(format!(
                "transpose: axes ({a}, {b}) out of range for rank {}",
                self.rank()
            )));
        }
        perm.swap(a, b);
        self.permute(&perm)
    }

    /// The slice `start..start + len` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        let axis = normalize_axis(axis, self.rank(), "narrow")?;
        let full = self.shape()[axis];
        if len == 0 || start + len > full {
            return Err(Error::Contract(format!(
                "narrow: range {start}..{} outside axis {axis} of length {full}",
                start + len
            )));
        }
        let (outer, _, inner) = axis_split(self.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        {
            let x = self.data();
            for o in 0..outer {
                data.extend_from_slice(&x[(o * full + start) * inner..][..len * inner]);
            }
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(Tensor::from_op(
            "narrow",
            shape,
            data,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gx = vec![T::zero(); outer * full * inner];
                for o in 0..outer {
                    gx[(o * full + start) * inner..][..len * inner]
                        .copy_from_slice(&g[o * len * inner..][..len * inner]);
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Concatenates tensors that agree on every axis except `axis`.
    pub fn concat(parts: &[Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let axis = normalize_axis(axis, first.rank(), "concat")?;
        for p in parts {
            let same = p.rank() == first.rank()
                && (0..first.rank()).all(|i| i == axis || p.shape()[i] == first.shape()[i]);
            if !same {
                return Err(Error::shape("concat", first.shape(), p.shape()));
            }
        }
        let (outer, _, inner) = axis_split(first.shape(), axis);
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                data.extend_from_slice(&p.data()[o * l * inner..][..l * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Ok(Tensor::from_op(
            "concat",
            shape,
            data,
            parts.to_vec(),
            Box::new(move |g, _, _| {
                let mut grads: Vec<Vec<T>> =
                    lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
                for o in 0..outer {
                    let mut off = o * total * inner;
                    for (gp, &l) in grads.iter_mut().zip(&lens) {
                        gp.extend_from_slice(&g[off..off + l * inner]);
                        off += l * inner;
                    }
                }
                grads.into_iter().map(Some).collect()
            }),
        ))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor<T>> {
        match broadcast_shape(self.shape(), shape) {
            Some(s) if s == shape => Tensor::zeros(shape).add(self),
            _ => Err(Error::shape("broadcast_to", self.shape(), shape)),
        }
    }

    /// Row lookup: `self` is `[rows, d]`, result is `[ids.len(), d]`.
    pub fn gather_rows(&self, ids: &[usize]) -> Result<Tensor<T>> {
        if self.rank() != 2 {
            return Err(Error::Contract(format!(
                "gather_rows needs a matrix, got shape {:?}",
                self.shape()
            )));
        }
        let (rows, d) = (self.shape()[0], self.shape()[1]);
        if let Some(pos) = ids.iter().position(|&i| i >= rows) {
            return Err(Error::Input(format!(
                "id {} at position {pos} out of range for {rows} rows",
                ids[pos]
            )));
        }
        if ids.is_empty() {
            return Err(Error::Contract("gather_rows with no ids".into()));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        {
            let w = self.data();
            for &i in ids {
                data.extend_from_slice(&w[i * d..][..d]);
            }
        }
        let ids = ids.to_vec();
        Ok(Tensor::from_op(
            "gather_rows",
            vec![ids.len(), d],
            data,
            vec![self.clone()],
            Box::new(move |g, _, _| {
                let mut gw = vec![T::zero(); rows * d];
                for (r, &i) in ids.iter().enumerate() {
                    gw[i * d..][..d]
                        .iter_mut()
                        .zip(&g[r * d..][..d])
                        .for_each(|(a, &b)| *a += b);
                }
                vec![Some(gw)]
            }),
        ))
    }
}

pub(crate) fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softplus<T: Element>(x: T) -> T {
    if x > T::of(20.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn permute_data<T: Element>(x: &[T], in_shape: &[usize], perm: &[usize]) -> Vec<T> {
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let zero = vec![0; out_shape.len()];
    let mut out = vec![T::zero(); x.len()];
    for_each_broadcast(&out_shape, &src_strides, &zero, |o, i, _| out[o] = x[i]);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[4]), None);
        assert_eq!(broadcast_shape(&[], &[5]), Some(vec![5]));
    }

    #[test]
    fn broadcast_add_and_reduce() {
        let a = Tensor::<f64>::from_f64(&[1., 2., 3., 4., 5., 6.], &[2, 3]).unwrap();
        let b = Tensor::<f64>::from_f64(&[10., 20., 30.], &[3]).unwrap();
        let c = a.add(&b).unwrap();
        assert_eq!(c.to_vec(), vec![11., 22., 33., 14., 25., 36.]);
        let r = reduce_to_shape(&c.to_vec(), &[2, 3], &[3]);
        assert_eq!(r, vec![25., 47., 69.]);
    }

    #[test]
    fn incompatible_broadcast_names_both_shapes() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[4]);
        let err = a.add(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4]"), "{err}");
    }

    #[test]
    fn elementwise_examples() {
        let z = Tensor::<f64>::from_f64(&[0.0], &[1]).unwrap();
        assert_eq!(z.silu().item(), 0.0);
        assert!((z.softplus().item() - std::f64::consts::LN_2).abs() < 1e-12);
        let big = Tensor::<f32>::from_f64(&[50.0, -50.0], &[2]).unwrap().softplus();
        assert_eq!(big.to_vec()[0], 50.0);
        assert!(big.to_vec()[1] >= 0.0 && big.to_vec()[1] < 1e-20);
    }

    #[test]
    fn mean_axis_of_identical_slices() {
        let slice = [0.5, -1.0, 2.0];
        let rows: Vec<f64> = slice.iter().cycle().take(12).copied().collect();
        let t = Tensor::<f64>::from_f64(&rows, &[4, 3]).unwrap();
        assert_eq!(t.mean_axis(0, false).unwrap().to_vec(), slice.to_vec());
    }

    #[test]
    #[allow(clippy::identity_op)]
    fn permute_roundtrip_and_values() {
        let t = Tensor::<f64>::from_f64(&(0..24).map(f64::from).collect::<Vec<_>>(), &[2, 3, 4])
            .unwrap();
        let p = t.permute(&[2, 0, 1]).unwrap();
        assert_eq!(p.shape(), &[4, 2, 3]);
        // p[i][j][k] = t[j][k][i]
        assert_eq!(p.data()[(1 * 2 + 1) * 3 + 2], t.data()[(1 * 3 + 2) * 4 + 1]);
        let back = p.permute(&[1, 2, 0]).unwrap();
        assert_eq!(back.to_vec(), t.to_vec());
        assert!(t.permute(&[0, 0, 1]).is_err());
    }

    #[test]
    fn narrow_and_concat_invert() {
        let t = Tensor::<f64>::from_f64(&(0..12).map(f64::from).collect::<Vec<_>>(), &[2, 6])
            .unwrap();
        let a = t.narrow(1, 0, 2).unwrap();
        let b = t.narrow(1, 2, 4).unwrap();
        assert_eq!(a.to_vec(), vec![0., 1., 6., 7.]);
        let c = Tensor::concat(&[a, b], 1).unwrap();
        assert_eq!(c.to_vec(), t.to_vec());
        assert!(t.narrow(1, 4, 3).is_err());
    }

    #[test]
    fn gather_rows_rejects_out_of_range() {
        let w = Tensor::<f32>::zeros(&[3, 2]);
        let err = w.gather_rows(&[0, 5]).unwrap_err().to_string();
        assert!(err.contains("position 1"), "{err}");
    }
}
