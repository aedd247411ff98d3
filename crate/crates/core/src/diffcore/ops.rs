//! Differentiable operations on [`Tensor`].
//!
//! Binary elementwise ops broadcast the right operand over leading axes
//! only: the right shape must equal a suffix of the left shape.

use std::sync::Arc;

use super::tape::{GradStore, Tensor};
use super::{Error, Result};

/// Additive penalty applied to masked attention logits before the softmax.
pub const MASK_PENALTY: f64 = -1e30;

fn same_tape(a: &Tensor<'_>, b: &Tensor<'_>) {
    assert!(std::ptr::eq(a.tape, b.tape), "tensors recorded on different tapes");
}

/// Number of times `rhs` repeats inside `lhs` when broadcast over leading axes.
fn leading_repeat(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<usize> {
    if rhs.len() > lhs.len() || lhs[lhs.len() - rhs.len()..] != *rhs {
        return Err(Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        });
    }
    Ok(lhs[..lhs.len() - rhs.len()].iter().product())
}

fn split_last2(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::Rank {
            op,
            shape: shape.to_vec(),
            min: 2,
        });
    }
    let n = shape.len();
    Ok((shape[..n - 2].iter().product(), shape[n - 2], shape[n - 1]))
}

impl<'t> Tensor<'t> {
    fn binary<F, DA, DB>(self, rhs: Tensor<'t>, op: &'static str, f: F, da: DA, db: DB) -> Result<Tensor<'t>>
    where
        F: Fn(f64, f64) -> f64,
        DA: Fn(f64, f64) -> f64 + 'static,
        DB: Fn(f64, f64) -> f64 + 'static,
    {
        same_tape(&self, &rhs);
        let shape = self.shape();
        let rshape = rhs.shape();
        leading_repeat(op, &shape, &rshape)?;
        let a = self.value();
        let b = rhs.value();
        let period = b.len().max(1);
        let out: Vec<f64> = a.iter().enumerate().map(|(i, &x)| f(x, b[i % period])).collect();
        let (ia, ib) = (self.id, rhs.id);
        Ok(self
            .tape
            .record(shape, out, &[self, rhs], move |g, store: &mut GradStore| {
                if let Some(slot) = store.slot(ia) {
                    for (i, s) in slot.iter_mut().enumerate() {
                        *s += g[i] * da(a[i], b[i % period]);
                    }
                }
                if let Some(slot) = store.slot(ib) {
                    for (i, &gi) in g.iter().enumerate() {
                        slot[i % period] += gi * db(a[i], b[i % period]);
                    }
                }
            }))
    }

    fn unary<F, D>(self, f: F, d: D) -> Tensor<'t>
    where
        F: Fn(f64) -> f64,
        D: Fn(f64, f64) -> f64 + 'static,
    {
        let x = self.value();
        let y: Arc<Vec<f64>> = Arc::new(x.iter().map(|&v| f(v)).collect());
        let id = self.id;
        let y_saved = Arc::clone(&y);
        self.tape.record(self.shape(), y, &[self], move |g, store| {
            if let Some(slot) = store.slot(id) {
                for i in 0..slot.len() {
                    slot[i] += g[i] * d(x[i], y_saved[i]);
                }
            }
        })
    }

    pub fn add(self, rhs: Tensor<'t>) -> Result<Tensor<'t>> {
        self.binary(rhs, "add", |x, y| x + y, |_, _| 1.0, |_, _| 1.0)
    }

    pub fn sub(self, rhs: Tensor<'t>) -> Result<Tensor<'t>> {
        self.binary(rhs, "sub", |x, y| x - y, |_, _| 1.0, |_, _| -1.0)
    }

    pub fn mul(self, rhs: Tensor<'t>) -> Result<Tensor<'t>> {
        self.binary(rhs, "mul", |x, y| x * y, |_, y| y, |x, _| x)
    }

    pub fn div(self, rhs: Tensor<'t>) -> Result<Tensor<'t>> {
        self.binary(rhs, "div", |x, y| x / y, |_, y| 1.0 / y, |x, y| -x / (y * y))
    }

    /// Elementwise minimum; ties send the gradient to the left operand.
    pub fn minimum(self, rhs: Tensor<'t>) -> Result<Tensor<'t>> {
        self.binary(
            rhs,
            "minimum",
            f64::min,
            |x, y| if x <= y { 1.0 } else { 0.0 },
            |x, y| if x <= y { 0.0 } else { 1.0 },
        )
    }

    /// Elementwise maximum; ties send the gradient to the left operand.
    pub fn maximum(self, rhs: Tensor<'t>) -> Result<Tensor<'t>> {
        self.binary(
            rhs,
            "maximum",
            f64::max,
            |x, y| if x >= y { 1.0 } else { 0.0 },
            |x, y| if x >= y { 0.0 } else { 1.0 },
        )
    }

    pub fn scale(self, c: f64) -> Tensor<'t> {
        self.unary(move |x| x * c, move |_, _| c)
    }

    pub fn add_scalar(self, c: f64) -> Tensor<'t> {
        self.unary(move |x| x + c, |_, _| 1.0)
    }

    /// `c - self`.
    pub fn rsub_scalar(self, c: f64) -> Tensor<'t> {
        self.unary(move |x| c - x, |_, _| -1.0)
    }

    pub fn neg(self) -> Tensor<'t> {
        self.scale(-1.0)
    }

    pub fn sigmoid(self) -> Tensor<'t> {
        self.unary(sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn relu(self) -> Tensor<'t> {
        self.unary(|x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn exp(self) -> Tensor<'t> {
        self.unary(f64::exp, |_, y| y)
    }

    pub fn ln(self) -> Tensor<'t> {
        self.unary(f64::ln, |x, _| 1.0 / x)
    }

    pub fn sin(self) -> Tensor<'t> {
        self.unary(f64::sin, |x, _| x.cos())
    }

    pub fn cos(self) -> Tensor<'t> {
        self.unary(f64::cos, |x, _| -x.sin())
    }

    pub fn powf(self, p: f64) -> Tensor<'t> {
        self.unary(move |x| x.powf(p), move |x, _| p * x.powf(p - 1.0))
    }

    pub fn abs(self) -> Tensor<'t> {
        self.unary(f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the open interval.
    pub fn clamp(self, lo: f64, hi: f64) -> Tensor<'t> {
        self.unary(
            move |x| x.clamp(lo, hi),
            move |x, _| if x > lo && x < hi { 1.0 } else { 0.0 },
        )
    }

    /// Matrix product over the last two axes.
    ///
    /// `self` is `[.., m, k]`; `rhs` is either `[k, n]` (shared across the
    /// leading axes) or `[.., k, n]` with the same leading axes as `self`.
    pub fn matmul(self, rhs: Tensor<'t>) -> Result<Tensor<'t>> {
        same_tape(&self, &rhs);
        let ashape = self.shape();
        let bshape = rhs.shape();
        let mismatch = || Error::Shape {
            op: "matmul",
            lhs: ashape.clone(),
            rhs: bshape.clone(),
        };
        let (batch, m, k) = split_last2("matmul", &ashape)?;
        let (bbatch, k2, n) = split_last2("matmul", &bshape)?;
        if k != k2 {
            return Err(mismatch());
        }
        let shared_rhs = bshape.len() == 2;
        if !shared_rhs && ashape[..ashape.len() - 2] != bshape[..bshape.len() - 2] {
            return Err(mismatch());
        }
        debug_assert!(shared_rhs || bbatch == batch);

        let a = self.value();
        let b = rhs.value();
        let b_stride = if shared_rhs { 0 } else { k * n };
        let mut out = vec![0.0; batch * m * n];
        for t in 0..batch {
            let a_t = &a[t * m * k..(t + 1) * m * k];
            let b_t = &b[t * b_stride..t * b_stride + k * n];
            let c_t = &mut out[t * m * n..(t + 1) * m * n];
            for i in 0..m {
                let c_row = &mut c_t[i * n..(i + 1) * n];
                for (p, &av) in a_t[i * k..(i + 1) * k].iter().enumerate() {
                    if av == 0.0 {
                        continue;
                    }
                    for (c, &bv) in c_row.iter_mut().zip(&b_t[p * n..(p + 1) * n]) {
                        *c += av * bv;
                    }
                }
            }
        }
        let mut shape = ashape.clone();
        let last = shape.len() - 1;
        shape[last] = n;
        let (ia, ib) = (self.id, rhs.id);
        Ok(self.tape.record(shape, out, &[self, rhs], move |g, store| {
            if let Some(da) = store.slot(ia) {
                // dA = dC · Bᵀ
                for t in 0..batch {
                    let b_t = &b[t * b_stride..t * b_stride + k * n];
                    for i in 0..m {
                        let g_row = &g[t * m * n + i * n..t * m * n + (i + 1) * n];
                        let da_row = &mut da[t * m * k + i * k..t * m * k + (i + 1) * k];
                        for (p, d) in da_row.iter_mut().enumerate() {
                            let b_row = &b_t[p * n..(p + 1) * n];
                            *d += g_row.iter().zip(b_row).map(|(x, y)| x * y).sum::<f64>();
                        }
                    }
                }
            }
            if let Some(db) = store.slot(ib) {
                // dB = Aᵀ · dC
                for t in 0..batch {
                    let a_t = &a[t * m * k..(t + 1) * m * k];
                    let db_t = &mut db[t * b_stride..t * b_stride + k * n];
                    for i in 0..m {
                        let g_row = &g[t * m * n + i * n..t * m * n + (i + 1) * n];
                        for (p, &av) in a_t[i * k..(i + 1) * k].iter().enumerate() {
                            if av == 0.0 {
                                continue;
                            }
                            for (d, &gv) in db_t[p * n..(p + 1) * n].iter_mut().zip(g_row) {
                                *d += av * gv;
                            }
                        }
                    }
                }
            }
        }))
    }

    /// Swaps the last two axes.
    pub fn transpose_last(self) -> Result<Tensor<'t>> {
        let shape = self.shape();
        let (batch, m, n) = split_last2("transpose_last", &shape)?;
        let x = self.value();
        let mut out = vec![0.0; x.len()];
        for t in 0..batch {
            for i in 0..m {
                for j in 0..n {
                    out[t * m * n + j * m + i] = x[t * m * n + i * n + j];
                }
            }
        }
        let mut oshape = shape.clone();
        let r = oshape.len();
        oshape.swap(r - 1, r - 2);
        let id = self.id;
        Ok(self.tape.record(oshape, out, &[self], move |g, store| {
            if let Some(slot) = store.slot(id) {
                for t in 0..batch {
                    for i in 0..m {
                        for j in 0..n {
                            slot[t * m * n + i * n + j] += g[t * m * n + j * m + i];
                        }
                    }
                }
            }
        }))
    }

    /// `[rows, heads * d]` to `[heads, rows, d]`.
    pub fn split_heads(self, heads: usize) -> Result<Tensor<'t>> {
        let shape = self.shape();
        if shape.len() != 2 || heads == 0 || shape[1] % heads != 0 {
            return Err(Error::Shape {
                op: "split_heads",
                lhs: shape,
                rhs: vec![heads],
            });
        }
        let (rows, width) = (shape[0], shape[1]);
        let d = width / heads;
        let x = self.value();
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            for h in 0..heads {
                out[(h * rows + r) * d..(h * rows + r + 1) * d]
                    .copy_from_slice(&x[r * width + h * d..r * width + (h + 1) * d]);
            }
        }
        let id = self.id;
        Ok(self.tape.record(vec![heads, rows, d], out, &[self], move |g, store| {
            if let Some(slot) = store.slot(id) {
                for r in 0..rows {
                    for h in 0..heads {
                        let src = &g[(h * rows + r) * d..(h * rows + r + 1) * d];
                        for (s, v) in slot[r * width + h * d..r * width + (h + 1) * d].iter_mut().zip(src) {
                            *s += v;
                        }
                    }
                }
            }
        }))
    }

    /// `[heads, rows, d]` to `[rows, heads * d]`.
    pub fn merge_heads(self) -> Result<Tensor<'t>> {
        let shape = self.shape();
        if shape.len() != 3 {
            return Err(Error::Rank {
                op: "merge_heads",
                shape,
                min: 3,
            });
        }
        let (heads, rows, d) = (shape[0], shape[1], shape[2]);
        let width = heads * d;
        let x = self.value();
        let mut out = vec![0.0; x.len()];
        for h in 0..heads {
            for r in 0..rows {
                out[r * width + h * d..r * width + (h + 1) * d]
                    .copy_from_slice(&x[(h * rows + r) * d..(h * rows + r + 1) * d]);
            }
        }
        let id = self.id;
        Ok(self.tape.record(vec![rows, width], out, &[self], move |g, store| {
            if let Some(slot) = store.slot(id) {
                for h in 0..heads {
                    for r in 0..rows {
                        let src = &g[r * width + h * d..r * width + (h + 1) * d];
                        for (s, v) in slot[(h * rows + r) * d..(h * rows + r + 1) * d].iter_mut().zip(src) {
                            *s += v;
                        }
                    }
                }
            }
        }))
    }

    /// Softmax over the last axis.
    ///
    /// `mask`, when given, has shape `[rows, cols]` matching the last two
    /// axes and is broadcast over the leading ones; `true` marks an
    /// attendable entry. Masked logits receive [`MASK_PENALTY`] and their
    /// outputs are forced to exactly zero. A row with no attendable entry
    /// is an error.
    pub fn softmax(self, mask: Option<&[bool]>) -> Result<Tensor<'t>> {
        let shape = self.shape();
        let cols = *shape.last().ok_or(Error::Rank {
            op: "softmax",
            shape: shape.clone(),
            min: 1,
        })?;
        let x = self.value();
        let rows_total = if cols == 0 { 0 } else { x.len() / cols };
        let mask: Option<Arc<Vec<bool>>> = match mask {
            Some(m) => {
                let (_, r, c) = split_last2("softmax", &shape)?;
                if m.len() != r * c {
                    return Err(Error::Shape {
                        op: "softmax",
                        lhs: shape.clone(),
                        rhs: vec![m.len()],
                    });
                }
                Some(Arc::new(m.to_vec()))
            }
            None => None,
        };
        let mask_period = mask.as_ref().map_or(1, |m| m.len());
        let mut out = vec![0.0; x.len()];
        for row in 0..rows_total {
            let base = row * cols;
            let allowed = |j: usize| mask.as_ref().is_none_or(|m| m[(base + j) % mask_period]);
            let mut max = f64::NEG_INFINITY;
            for j in 0..cols {
                let logit = if allowed(j) {
                    x[base + j]
                } else {
                    x[base + j] + MASK_PENALTY
                };
                max = max.max(logit);
            }
            if !(max > MASK_PENALTY / 2.0) || !max.is_finite() {
                return Err(Error::FullyMasked { row });
            }
            let mut total = 0.0;
            for j in 0..cols {
                if allowed(j) {
                    let e = (x[base + j] - max).exp();
                    out[base + j] = e;
                    total += e;
                }
            }
            for v in &mut out[base..base + cols] {
                *v /= total;
            }
        }
        let y = Arc::new(out);
        let id = self.id;
        Ok(self.tape.record(shape, Arc::clone(&y), &[self], move |g, store| {
            if let Some(slot) = store.slot(id) {
                for row in 0..rows_total {
                    let r = row * cols..(row + 1) * cols;
                    let dot: f64 = y[r.clone()].iter().zip(&g[r.clone()]).map(|(a, b)| a * b).sum();
                    for j in r {
                        slot[j] += y[j] * (g[j] - dot);
                    }
                }
            }
        }))
    }

    /// Normalizes the last axis to zero mean and unit variance.
    pub fn layer_norm(self, eps: f64) -> Result<Tensor<'t>> {
        let shape = self.shape();
        let cols = *shape.last().ok_or(Error::Rank {
            op: "layer_norm",
            shape: shape.clone(),
            min: 1,
        })?;
        let x = self.value();
        let rows = if cols == 0 { 0 } else { x.len() / cols };
        let mut out = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *o = (v - mean) * inv;
            }
        }
        let y = Arc::new(out);
        let id = self.id;
        Ok(self.tape.record(shape, Arc::clone(&y), &[self], move |g, store| {
            if let Some(slot) = store.slot(id) {
                let n = cols as f64;
                for r in 0..rows {
                    let span = r * cols..(r + 1) * cols;
                    let gm = g[span.clone()].iter().sum::<f64>() / n;
                    let gy = g[span.clone()]
                        .iter()
                        .zip(&y[span.clone()])
                        .map(|(a, b)| a * b)
                        .sum::<f64>()
                        / n;
                    for j in span {
                        slot[j] += inv_std[r] * (g[j] - gm - y[j] * gy);
                    }
                }
            }
        }))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(self) -> Tensor<'t> {
        let x = self.value();
        let total = x.iter().sum();
        let (id, n) = (self.id, x.len());
        self.tape.record(Vec::new(), vec![total], &[self], move |g, store| {
            if let Some(slot) = store.slot(id) {
                for s in slot.iter_mut().take(n) {
                    *s += g[0];
                }
            }
        })
    }

    /// Mean of all elements, as a scalar. Empty tensors yield zero.
    pub fn mean(self) -> Tensor<'t> {
        let n = self.len();
        let s = self.sum();
        if n == 0 {
            s
        } else {
            s.scale(1.0 / n as f64)
        }
    }

    /// Sums over the last axis, dropping it.
    pub fn sum_last(self) -> Result<Tensor<'t>> {
        let mut shape = self.shape();
        let cols = shape.pop().ok_or(Error::Rank {
            op: "sum_last",
            shape: Vec::new(),
            min: 1,
        })?;
        let x = self.value();
        let rows = if cols == 0 {
            shape.iter().product()
        } else {
            x.len() / cols
        };
        let out: Vec<f64> = (0..rows).map(|r| x[r * cols..(r + 1) * cols].iter().sum()).collect();
        let id = self.id;
        Ok(self.tape.record(shape, out, &[self], move |g, store| {
            if let Some(slot) = store.slot(id) {
                for r in 0..rows {
                    for s in &mut slot[r * cols..(r + 1) * cols] {
                        *s += g[r];
                    }
                }
            }
        }))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Tensor<'t>> {
        if shape.iter().product::<usize>() != self.len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape(),
                rhs: shape.to_vec(),
            });
        }
        let id = self.id;
        Ok(self
            .tape
            .record(shape.to_vec(), self.to_vec(), &[self], move |g, store| {
                store.add(id, g);
            }))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(self, axis: usize, start: usize, end: usize) -> Result<Tensor<'t>> {
        let shape = self.shape();
        if axis >= shape.len() || start > end || end > shape[axis] {
            return Err(Error::Slice {
                shape,
                axis,
                start,
                end,
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let full = shape[axis] * inner;
        let part = (end - start) * inner;
        let x = self.value();
        let mut out = Vec::with_capacity(outer * part);
        for o in 0..outer {
            out.extend_from_slice(&x[o * full + start * inner..o * full + end * inner]);
        }
        let mut oshape = shape;
        oshape[axis] = end - start;
        let id = self.id;
        Ok(self.tape.record(oshape, out, &[self], move |g, store| {
            if let Some(slot) = store.slot(id) {
                for o in 0..outer {
                    let dst = &mut slot[o * full + start * inner..o * full + end * inner];
                    for (d, v) in dst.iter_mut().zip(&g[o * part..(o + 1) * part]) {
                        *d += v;
                    }
                }
            }
        }))
    }

    /// Rows of the leading axis, in the given order (repeats allowed).
    pub fn select_rows(self, rows: &[usize]) -> Result<Tensor<'t>> {
        let shape = self.shape();
        let Some(&count) = shape.first() else {
            return Err(Error::Rank {
                op: "select_rows",
                shape,
                min: 1,
            });
        };
        if let Some(&bad) = rows.iter().find(|&&r| r >= count) {
            return Err(Error::Index {
                op: "select_rows",
                index: bad,
                len: count,
            });
        }
        let width: usize = shape[1..].iter().product();
        let x = self.value();
        let mut out = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            out.extend_from_slice(&x[r * width..(r + 1) * width]);
        }
        let mut oshape = shape;
        oshape[0] = rows.len();
        let rows = rows.to_vec();
        let id = self.id;
        Ok(self.tape.record(oshape, out, &[self], move |g, store| {
            if let Some(slot) = store.slot(id) {
                for (k, &r) in rows.iter().enumerate() {
                    for (d, v) in slot[r * width..(r + 1) * width]
                        .iter_mut()
                        .zip(&g[k * width..(k + 1) * width])
                    {
                        *d += v;
                    }
                }
            }
        }))
    }
}

/// Joins tensors along `axis`; all other extents must agree.
pub fn concat<'t>(parts: &[Tensor<'t>], axis: usize) -> Result<Tensor<'t>> {
    let first = parts.first().ok_or(Error::Empty("concat"))?;
    let base = first.shape();
    if axis >= base.len() {
        return Err(Error::Rank {
            op: "concat",
            shape: base,
            min: axis + 1,
        });
    }
    let mut total_axis = 0;
    for p in parts {
        same_tape(first, p);
        let s = p.shape();
        let compatible =
            s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(Error::Shape {
                op: "concat",
                lhs: base.clone(),
                rhs: s,
            });
        }
        total_axis += s[axis];
    }
    let outer: usize = base[..axis].iter().product();
    let inner: usize = base[axis + 1..].iter().product();
    let chunks: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
    let values: Vec<Arc<Vec<f64>>> = parts.iter().map(|p| p.value()).collect();
    let row = total_axis * inner;
    let mut out = Vec::with_capacity(outer * row);
    for o in 0..outer {
        for (v, &c) in values.iter().zip(&chunks) {
            out.extend_from_slice(&v[o * c..(o + 1) * c]);
        }
    }
    let mut shape = base;
    shape[axis] = total_axis;
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    Ok(first.tape.record(shape, out, parts, move |g, store| {
        let mut offset = 0;
        for (&id, &c) in ids.iter().zip(&chunks) {
            if store.wants(id) {
                let slot = store.slot(id).expect("wanted slot");
                for o in 0..outer {
                    for (d, v) in slot[o * c..(o + 1) * c]
                        .iter_mut()
                        .zip(&g[o * row + offset..o * row + offset + c])
                    {
                        *d += v;
                    }
                }
            }
            offset += c;
        }
    }))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
