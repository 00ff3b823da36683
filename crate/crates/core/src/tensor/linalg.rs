use super::ops::{broadcast_shape, broadcast_strides, for_each_broadcast};
use super::{gemm, numel, Element, Layout, Tensor};
use crate::error::{Error, Result};

/// Batch bookkeeping for a broadcast matmul: for each output matrix, the
/// offsets of its two operand matrices.
struct BatchPlan {
    pairs: Vec<(usize, usize)>,
}

impl BatchPlan {
    fn new(a_batch: &[usize], b_batch: &[usize], out_batch: &[usize], a_mat: usize, b_mat: usize) -> Self {
        let sa = broadcast_strides(a_batch, out_batch);
        let sb = broadcast_strides(b_batch, out_batch);
        let mut pairs = Vec::with_capacity(numel(out_batch));
        for_each_broadcast(out_batch, &sa, &sb, |_, i, j| pairs.push((i * a_mat, j * b_mat)));
        BatchPlan { pairs }
    }
}

impl<T: Element> Tensor<T> {
    /// Batched matrix product `[..., m, k] x [..., k, n] -> [..., m, n]` with
    /// broadcasting over the leading axes.
    pub fn matmul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(), other.shape());
        if sa.len() < 2 || sb.len() < 2 || sa[sa.len() - 1] != sb[sb.len() - 2] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, k, n) = (sa[sa.len() - 2], sa[sa.len() - 1], sb[sb.len() - 1]);
        let (a_batch, b_batch) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);

        // [..., m, k] x [k, n]: one tall gemm.
        if b_batch.iter().all(|&d| d == 1) && b_batch.len() <= a_batch.len() {
            let rows = numel(a_batch) * m;
            let mut out = vec![T::zero(); rows * n];
            gemm(
                rows,
                k,
                n,
                &self.data(),
                Layout::row_major(k),
                &other.data(),
                Layout::row_major(n),
                T::zero(),
                &mut out,
                Layout::row_major(n),
            );
            let mut shape = a_batch.to_vec();
            shape.extend([m, n]);
            return Ok(Tensor::from_op(
                "matmul",
                shape,
                out,
                vec![self.clone(), other.clone()],
                Box::new(move |g, _, inputs| {
                    let (a, b) = (&inputs[0], &inputs[1]);
                    let ga = a.requires_grad().then(|| {
                        let mut ga = vec![T::zero(); rows * k];
                        gemm(rows, n, k, g, Layout::row_major(n), &b.data(), Layout::transposed(n), T::zero(), &mut ga, Layout::row_major(k));
                        ga
                    });
                    let gb = b.requires_grad().then(|| {
                        let mut gb = vec![T::zero(); k * n];
                        gemm(k, rows, n, &a.data(), Layout::transposed(k), g, Layout::row_major(n), T::zero(), &mut gb, Layout::row_major(n));
                        gb
                    });
                    vec![ga, gb]
                }),
            ));
        }

        let out_batch = broadcast_shape(a_batch, b_batch).ok_or_else(|| Error::shape("matmul", sa, sb))?;
        let plan = BatchPlan::new(a_batch, b_batch, &out_batch, m * k, k * n);
        let mut out = vec![T::zero(); numel(&out_batch) * m * n];
        {
            let (a, b) = (self.data(), other.data());
            for (bi, &(oa, ob)) in plan.pairs.iter().enumerate() {
                gemm(
                    m,
                    k,
                    n,
                    &a[oa..oa + m * k],
                    Layout::row_major(k),
                    &b[ob..ob + k * n],
                    Layout::row_major(n),
                    T::zero(),
                    &mut out[bi * m * n..][..m * n],
                    Layout::row_major(n),
                );
            }
        }
        let mut shape = out_batch;
        shape.extend([m, n]);
        Ok(Tensor::from_op(
            "matmul",
            shape,
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g, _, inputs| {
                let (x, y) = (&inputs[0], &inputs[1]);
                let (a, b) = (x.data(), y.data());
                let mut ga = x.requires_grad().then(|| vec![T::zero(); a.len()]);
                let mut gb = y.requires_grad().then(|| vec![T::zero(); b.len()]);
                for (bi, &(oa, ob)) in plan.pairs.iter().enumerate() {
                    let gout = &g[bi * m * n..][..m * n];
                    if let Some(ga) = ga.as_mut() {
                        // dA += G Bᵀ
                        gemm(m, n, k, gout, Layout::row_major(n), &b[ob..ob + k * n], Layout::transposed(n), T::one(), &mut ga[oa..oa + m * k], Layout::row_major(k));
                    }
                    if let Some(gb) = gb.as_mut() {
                        // dB += Aᵀ G
                        gemm(k, m, n, &a[oa..oa + m * k], Layout::transposed(k), gout, Layout::row_major(n), T::one(), &mut gb[ob..ob + k * n], Layout::row_major(n));
                    }
                }
                vec![ga, gb]
            }),
        ))
    }
}
