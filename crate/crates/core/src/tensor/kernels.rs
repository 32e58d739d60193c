// Forward and backward numeric kernels on plain tensors.

use super::{Tensor, MASK_SENTINEL};
use crate::error::{Error, Result};

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

/// Element strides of `shape` laid out inside `out`, right-aligned, 0 on broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let mut strides = vec![0; out.len()];
    let offset = out.len() - shape.len();
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        if shape[i] != 1 {
            strides[i + offset] = acc;
        }
        acc *= shape[i];
    }
    strides
}

/// Visits every output index with the matching flat offsets into two broadcast operands.
fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let n: usize = out.iter().product();
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..n {
        f(o, ia, ib);
        for d in (0..rank).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_parts(a.shape.clone(), data));
    }
    let out = broadcast_shape(&a.shape, &b.shape).ok_or_else(|| Error::dim(op, &a.shape, &b.shape))?;
    let sa = broadcast_strides(&a.shape, &out);
    let sb = broadcast_strides(&b.shape, &out);
    let mut data = vec![0.0; out.iter().product()];
    for_each_broadcast(&out, &sa, &sb, |o, ia, ib| data[o] = f(a.data[ia], b.data[ib]));
    Ok(Tensor::from_parts(out, data))
}

/// Sums `grad` down to `shape`, undoing broadcasting.
pub(crate) fn sum_to_shape(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape == shape {
        return grad.clone();
    }
    let target = broadcast_strides(shape, &grad.shape);
    let zero = vec![0; grad.shape.len()];
    let mut out = vec![0.0; shape.iter().product()];
    for_each_broadcast(&grad.shape, &target, &zero, |o, it, _| out[it] += grad.data[o]);
    Tensor::from_parts(shape.to_vec(), out)
}

/// `c += op(a) · op(b)` where `op(a)` is `m × k` and `op(b)` is `k × n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    a: &[f64],
    b: &[f64],
    c: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
    trans_a: bool,
    trans_b: bool,
) {
    match (trans_a, trans_b) {
        (false, false) => {
            for i in 0..m {
                let crow = &mut c[i * n..(i + 1) * n];
                for p in 0..k {
                    let aip = a[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    let brow = &b[p * n..(p + 1) * n];
                    for (cv, &bv) in crow.iter_mut().zip(brow) {
                        *cv += aip * bv;
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    let brow = &b[j * k..(j + 1) * k];
                    c[i * n + j] += arow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                }
            }
        }
        (true, false) => {
            for p in 0..k {
                let brow = &b[p * n..(p + 1) * n];
                for i in 0..m {
                    let aip = a[p * m + i];
                    if aip == 0.0 {
                        continue;
                    }
                    let crow = &mut c[i * n..(i + 1) * n];
                    for (cv, &bv) in crow.iter_mut().zip(brow) {
                        *cv += aip * bv;
                    }
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut acc = 0.0;
                    for p in 0..k {
                        acc += a[p * m + i] * b[j * k + p];
                    }
                    c[i * n + j] += acc;
                }
            }
        }
    }
}

/// Shape bookkeeping for a (batch-broadcast) matrix product.
pub(crate) struct MatmulPlan {
    pub out_shape: Vec<usize>,
    pub batch: usize,
    pub a_off: Vec<usize>,
    pub b_off: Vec<usize>,
    pub m: usize,
    pub k: usize,
    pub n: usize,
}

pub(crate) fn matmul_plan(a: &[usize], b: &[usize]) -> Result<MatmulPlan> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::dim("matmul", a, b));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
    if k != k2 {
        return Err(Error::dim("matmul", a, b));
    }
    let ba = &a[..a.len() - 2];
    let bb = &b[..b.len() - 2];
    let batch_shape = broadcast_shape(ba, bb).ok_or_else(|| Error::dim("matmul", a, b))?;
    let sa = broadcast_strides(ba, &batch_shape);
    let sb = broadcast_strides(bb, &batch_shape);
    let batch: usize = batch_shape.iter().product();
    let mut a_off = Vec::with_capacity(batch);
    let mut b_off = Vec::with_capacity(batch);
    for_each_broadcast(&batch_shape, &sa, &sb, |_, ia, ib| {
        a_off.push(ia * m * k);
        b_off.push(ib * k * n);
    });
    let mut out_shape = batch_shape;
    out_shape.extend_from_slice(&[m, n]);
    Ok(MatmulPlan {
        out_shape,
        batch,
        a_off,
        b_off,
        m,
        k,
        n,
    })
}

pub(crate) fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let plan = matmul_plan(&a.shape, &b.shape)?;
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let mut out = vec![0.0; plan.batch * m * n];
    for i in 0..plan.batch {
        gemm(
            &a.data[plan.a_off[i]..plan.a_off[i] + m * k],
            &b.data[plan.b_off[i]..plan.b_off[i] + k * n],
            &mut out[i * m * n..(i + 1) * m * n],
            m,
            k,
            n,
            false,
            false,
        );
    }
    Ok(Tensor::from_parts(plan.out_shape, out))
}

/// Gradients of `a · b` given the upstream gradient `g`.
pub(crate) fn matmul_backward(a: &Tensor, b: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let plan = matmul_plan(&a.shape, &b.shape).expect("validated in forward");
    let (m, k, n) = (plan.m, plan.k, plan.n);
    let mut ga = vec![0.0; a.len()];
    let mut gb = vec![0.0; b.len()];
    for i in 0..plan.batch {
        let gi = &g.data[i * m * n..(i + 1) * m * n];
        let (ao, bo) = (plan.a_off[i], plan.b_off[i]);
        // dA = G · Bᵀ, dB = Aᵀ · G; broadcast batches accumulate.
        gemm(gi, &b.data[bo..bo + k * n], &mut ga[ao..ao + m * k], m, n, k, false, true);
        gemm(&a.data[ao..ao + m * k], gi, &mut gb[bo..bo + k * n], k, m, n, true, false);
    }
    (
        Tensor::from_parts(a.shape.clone(), ga),
        Tensor::from_parts(b.shape.clone(), gb),
    )
}

pub(crate) fn permute(x: &Tensor, axes: &[usize]) -> Result<Tensor> {
    let rank = x.rank();
    let mut seen = vec![false; rank];
    if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
        return Err(Error::dim("permute", &x.shape, axes));
    }
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * x.shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| x.shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let zero = vec![0; rank];
    let mut out = vec![0.0; x.len()];
    for_each_broadcast(&out_shape, &src_strides, &zero, |o, is, _| out[o] = x.data[is]);
    Ok(Tensor::from_parts(out_shape, out))
}

pub(crate) fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Splits a shape around `axis` into (outer, extent, inner) element counts.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts[0];
    if axis >= first.rank() {
        return Err(Error::dim("concat", &first.shape, &[axis]));
    }
    for p in parts {
        let ok = p.rank() == first.rank()
            && p.shape.iter().zip(&first.shape).enumerate().all(|(i, (x, y))| i == axis || x == y);
        if !ok {
            return Err(Error::dim("concat", &first.shape, &p.shape));
        }
    }
    let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
    let (outer, _, inner) = axis_split(&first.shape, axis);
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape[axis] * inner;
            data.extend_from_slice(&p.data[o * chunk..(o + 1) * chunk]);
        }
    }
    let mut shape = first.shape.clone();
    shape[axis] = total;
    Ok(Tensor::from_parts(shape, data))
}

pub(crate) fn narrow(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    if axis >= x.rank() || len == 0 || start + len > x.shape[axis] {
        return Err(Error::dim("narrow", &x.shape, &[axis, start, len]));
    }
    let (outer, extent, inner) = axis_split(&x.shape, axis);
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * extent * inner + start * inner;
        data.extend_from_slice(&x.data[base..base + len * inner]);
    }
    let mut shape = x.shape.clone();
    shape[axis] = len;
    Ok(Tensor::from_parts(shape, data))
}

pub(crate) fn sum_axis(x: &Tensor, axis: usize, keepdim: bool) -> Result<Tensor> {
    if axis >= x.rank() {
        return Err(Error::dim("sum_axis", &x.shape, &[axis]));
    }
    let (outer, extent, inner) = axis_split(&x.shape, axis);
    let mut out = vec![0.0; outer * inner];
    for o in 0..outer {
        for e in 0..extent {
            let src = &x.data[(o * extent + e) * inner..(o * extent + e + 1) * inner];
            for (d, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    let mut shape = x.shape.clone();
    if keepdim {
        shape[axis] = 1;
    } else {
        shape.remove(axis);
    }
    Ok(Tensor::from_parts(shape, out))
}

pub(crate) fn last_axis(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
}

/// Row-wise softmax over the last axis. A row made only of the mask sentinel maps to zeros.
pub(crate) fn softmax_rows(x: &Tensor) -> Tensor {
    let w = last_axis(&x.shape);
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.data.chunks(w).zip(out.chunks_mut(w)) {
        if src.iter().all(|&v| v == MASK_SENTINEL) {
            continue;
        }
        let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - max).exp();
            total += *d;
        }
        for d in dst.iter_mut() {
            *d /= total;
        }
    }
    Tensor::from_parts(x.shape.clone(), out)
}

pub(crate) fn softmax_rows_backward(y: &Tensor, g: &Tensor) -> Tensor {
    let w = last_axis(&y.shape);
    let mut out = vec![0.0; y.len()];
    for ((yr, gr), dr) in y.data.chunks(w).zip(g.data.chunks(w)).zip(out.chunks_mut(w)) {
        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
            *d = yv * (gv - dot);
        }
    }
    Tensor::from_parts(y.shape.clone(), out)
}

/// Scale factor `‖s‖² / ((1 + ‖s‖²)(‖s‖ + ε))` applied by the squashing nonlinearity.
pub(crate) fn squash_factor(norm: f64, eps: f64) -> f64 {
    let sq = norm * norm;
    sq / ((1.0 + sq) * (norm + eps))
}

pub(crate) fn squash_rows(x: &Tensor, eps: f64) -> Tensor {
    let w = last_axis(&x.shape);
    let mut out = vec![0.0; x.len()];
    for (src, dst) in x.data.chunks(w).zip(out.chunks_mut(w)) {
        let norm = src.iter().map(|v| v * v).sum::<f64>().sqrt();
        let f = squash_factor(norm, eps);
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = s * f;
        }
    }
    Tensor::from_parts(x.shape.clone(), out)
}

pub(crate) fn squash_rows_backward(x: &Tensor, g: &Tensor, eps: f64) -> Tensor {
    let w = last_axis(&x.shape);
    let mut out = vec![0.0; x.len()];
    for ((sr, gr), dr) in x.data.chunks(w).zip(g.data.chunks(w)).zip(out.chunks_mut(w)) {
        let norm = sr.iter().map(|v| v * v).sum::<f64>().sqrt();
        let f = squash_factor(norm, eps);
        // d(s f(n)) = f I + s (f'(n)/n) sᵀ; the rank-one term vanishes at n = 0.
        let radial = if norm > 0.0 {
            let sq = norm * norm;
            let den = (1.0 + sq) * (norm + eps);
            let dden = 2.0 * norm * (norm + eps) + (1.0 + sq);
            let df = (2.0 * norm * den - sq * dden) / (den * den);
            let dot: f64 = sr.iter().zip(gr).map(|(a, b)| a * b).sum();
            df / norm * dot
        } else {
            0.0
        };
        for ((d, &s), &gv) in dr.iter_mut().zip(sr).zip(gr) {
            *d = f * gv + s * radial;
        }
    }
    Tensor::from_parts(x.shape.clone(), out)
}

/// Normalizes each last-axis row to zero mean and unit variance. Returns the
/// normalized tensor and the per-row inverse standard deviation.
pub(crate) fn layer_norm_rows(x: &Tensor, eps: f64) -> (Tensor, Vec<f64>) {
    let w = last_axis(&x.shape);
    let mut out = vec![0.0; x.len()];
    let mut inv_std = Vec::with_capacity(x.len() / w);
    for (src, dst) in x.data.chunks(w).zip(out.chunks_mut(w)) {
        let mean = src.iter().sum::<f64>() / w as f64;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
        let inv = 1.0 / (var + eps).sqrt();
        for (d, &s) in dst.iter_mut().zip(src) {
            *d = (s - mean) * inv;
        }
        inv_std.push(inv);
    }
    (Tensor::from_parts(x.shape.clone(), out), inv_std)
}

pub(crate) fn layer_norm_rows_backward(y: &Tensor, inv_std: &[f64], g: &Tensor) -> Tensor {
    let w = last_axis(&y.shape);
    let mut out = vec![0.0; y.len()];
    for (((yr, gr), dr), &inv) in y
        .data
        .chunks(w)
        .zip(g.data.chunks(w))
        .zip(out.chunks_mut(w))
        .zip(inv_std)
    {
        let mean_g = gr.iter().sum::<f64>() / w as f64;
        let mean_gy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / w as f64;
        for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
            *d = inv * (gv - mean_g - yv * mean_gy);
        }
    }
    Tensor::from_parts(y.shape.clone(), out)
}

/// Expands a broadcastable boolean mask to the full shape `out`.
pub(crate) fn expand_mask(mask: &[bool], mask_shape: &[usize], out: &[usize]) -> Result<Vec<bool>> {
    match broadcast_shape(mask_shape, out) {
        Some(s) if s == out => {}
        _ => return Err(Error::dim("masked_fill", out, mask_shape)),
    }
    let sm = broadcast_strides(mask_shape, out);
    let zero = vec![0; out.len()];
    let mut full = vec![false; out.iter().product()];
    for_each_broadcast(out, &sm, &zero, |o, im, _| full[o] = mask[im]);
    Ok(full)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[4, 1, 3], &[2, 1]), Some(vec![4, 2, 3]));
        assert_eq!(broadcast_shape(&[2, 3], &[2]), None);
    }

    #[test]
    fn sum_to_shape_undoes_row_broadcast() {
        let g = Tensor::new(&[2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        assert_eq!(sum_to_shape(&g, &[3]).data(), &[5., 7., 9.]);
        assert_eq!(sum_to_shape(&g, &[2, 1]).data(), &[6., 15.]);
    }

    #[test]
    fn permute_and_inverse() {
        let x = Tensor::new(&[2, 3, 4], (0..24).map(f64::from).collect()).unwrap();
        let p = permute(&x, &[1, 0, 2]).unwrap();
        assert_eq!(p.shape(), &[3, 2, 4]);
        assert_eq!(p.get(&[2, 1, 3]), x.get(&[1, 2, 3]));
        let back = permute(&p, &inverse_permutation(&[1, 0, 2])).unwrap();
        assert_eq!(back, x);
    }

    #[test]
    fn gemm_transposed_variants_agree() {
        let a = [1., 2., 3., 4., 5., 6.]; // 2x3
        let b = [1., 0., 2., 1., 0., 3.]; // 3x2
        let mut c = [0.0; 4];
        gemm(&a, &b, &mut c, 2, 3, 2, false, false);
        // aᵀ stored 3x2, bᵀ stored 2x3
        let at = [1., 4., 2., 5., 3., 6.];
        let bt = [1., 2., 0., 0., 1., 3.];
        let mut c2 = [0.0; 4];
        gemm(&at, &bt, &mut c2, 2, 3, 2, true, true);
        assert_eq!(c, c2);
        assert_eq!(c, [5., 11., 14., 23.]);
    }
}
