use std::ops::Range;

use super::{
    non_finite_policy, numel, raise_non_finite_flag, BackwardCtx, NonFinitePolicy, Result, Tensor, TensorError,
};

/// Output shape of a trailing-aligned broadcast, size-1 expansion only.
pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(TensorError::ShapeMismatch {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                })
            }
        };
    }
    Ok(out)
}

/// For each flat index of `out`, the flat index of the broadcast source.
fn broadcast_map(out: &[usize], src: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let offset = rank - src.len();
    let mut strides = vec![0; rank];
    let mut s = 1;
    for i in (0..src.len()).rev() {
        if src[i] != 1 {
            strides[i + offset] = s;
        }
        s *= src[i];
    }
    let n = numel(out);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut pos = 0usize;
    for _ in 0..n {
        map.push(pos);
        for d in (0..rank).rev() {
            idx[d] += 1;
            pos += strides[d];
            if idx[d] < out[d] {
                break;
            }
            pos -= strides[d] * out[d];
            idx[d] = 0;
        }
    }
    map
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    strides
}

type Binary = fn(f64, f64) -> f64;
type BinaryGrad = fn(f64, f64, f64) -> f64;

impl Tensor {
    fn check_axis(&self, op: &'static str, axis: usize) -> Result<()> {
        if axis >= self.rank() {
            return Err(TensorError::InvalidAxis {
                op,
                axis,
                rank: self.rank(),
            });
        }
        Ok(())
    }

    fn unary(
        &self,
        name: &'static str,
        f: impl Fn(f64) -> f64,
        df: impl Fn(f64, f64) -> f64 + Send + Sync + 'static,
    ) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&x| f(x)).collect();
        Tensor::from_op(
            name,
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let x = ctx.parents[0].data();
                let g = ctx
                    .grad
                    .iter()
                    .zip(x.iter().zip(ctx.output))
                    .map(|(g, (&x, &y))| g * df(x, y))
                    .collect();
                vec![Some(g)]
            }),
        )
    }

    fn binary(&self, other: &Tensor, name: &'static str, f: Binary, da: BinaryGrad, db: BinaryGrad) -> Result<Tensor> {
        let a_shape = self.shape().to_vec();
        let b_shape = other.shape().to_vec();
        if a_shape == b_shape {
            let data: Vec<f64> = {
                let a = self.data();
                let b = other.data();
                a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
            };
            return Ok(Tensor::from_op(
                name,
                data,
                a_shape,
                vec![self.clone(), other.clone()],
                Box::new(move |ctx: &BackwardCtx<'_>| {
                    let a = ctx.parents[0].data();
                    let b = ctx.parents[1].data();
                    let ga = ctx.parents[0].requires_grad().then(|| {
                        (0..ctx.grad.len())
                            .map(|i| ctx.grad[i] * da(a[i], b[i], ctx.output[i]))
                            .collect()
                    });
                    let gb = ctx.parents[1].requires_grad().then(|| {
                        (0..ctx.grad.len())
                            .map(|i| ctx.grad[i] * db(a[i], b[i], ctx.output[i]))
                            .collect()
                    });
                    vec![ga, gb]
                }),
            ));
        }
        let out_shape = broadcast_shape(name, &a_shape, &b_shape)?;
        let map_a = broadcast_map(&out_shape, &a_shape);
        let map_b = broadcast_map(&out_shape, &b_shape);
        let data: Vec<f64> = {
            let a = self.data();
            let b = other.data();
            map_a.iter().zip(&map_b).map(|(&i, &j)| f(a[i], b[j])).collect()
        };
        Ok(Tensor::from_op(
            name,
            data,
            out_shape,
            vec![self.clone(), other.clone()],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let a = ctx.parents[0].data();
                let b = ctx.parents[1].data();
                let ga = ctx.parents[0].requires_grad().then(|| {
                    let mut g = vec![0.0; a.len()];
                    for k in 0..ctx.grad.len() {
                        let (i, j) = (map_a[k], map_b[k]);
                        g[i] += ctx.grad[k] * da(a[i], b[j], ctx.output[k]);
                    }
                    g
                });
                let gb = ctx.parents[1].requires_grad().then(|| {
                    let mut g = vec![0.0; b.len()];
                    for k in 0..ctx.grad.len() {
                        let (i, j) = (map_a[k], map_b[k]);
                        g[j] += ctx.grad[k] * db(a[i], b[j], ctx.output[k]);
                    }
                    g
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "add", |a, b| a + b, |_, _, _| 1.0, |_, _, _| 1.0)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "sub", |a, b| a - b, |_, _, _| 1.0, |_, _, _| -1.0)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "mul", |a, b| a * b, |_, b, _| b, |a, _, _| a)
    }

    pub fn div(&self, other: &Tensor) -> Result<Tensor> {
        if other.data().contains(&0.0) {
            match non_finite_policy() {
                NonFinitePolicy::Reject => {
                    return Err(TensorError::Domain {
                        op: "div",
                        detail: "division by zero".into(),
                    })
                }
                NonFinitePolicy::Propagate => raise_non_finite_flag(),
            }
        }
        self.binary(other, "div", |a, b| a / b, |_, b, _| 1.0 / b, |a, b, _| -a / (b * b))
    }

    pub fn neg(&self) -> Tensor {
        self.unary("neg", |x| -x, |_, _| -1.0)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.unary("scale", move |x| c * x, move |_, _| c)
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        self.unary("add_scalar", move |x| x + c, |_, _| 1.0)
    }

    pub fn exp(&self) -> Tensor {
        self.unary("exp", f64::exp, |_, y| y)
    }

    pub fn log(&self) -> Result<Tensor> {
        if self.data().iter().any(|&v| v <= 0.0) {
            match non_finite_policy() {
                NonFinitePolicy::Reject => {
                    return Err(TensorError::Domain {
                        op: "log",
                        detail: "non-positive operand".into(),
                    })
                }
                NonFinitePolicy::Propagate => raise_non_finite_flag(),
            }
        }
        Ok(self.unary("log", f64::ln, |x, _| 1.0 / x))
    }

    pub fn pow(&self, p: f64) -> Tensor {
        self.unary("pow", move |x| x.powf(p), move |x, _| p * x.powf(p - 1.0))
    }

    pub fn sqrt(&self) -> Tensor {
        self.unary("sqrt", f64::sqrt, |_, y| 0.5 / y)
    }

    /// Rectifier with subgradient 0 at 0.
    pub fn relu(&self) -> Tensor {
        self.unary(
            "relu",
            |x| if x > 0.0 { x } else { 0.0 },
            |x, _| if x > 0.0 { 1.0 } else { 0.0 },
        )
    }

    pub fn sum_all(&self) -> Tensor {
        let n = self.numel();
        let s: f64 = self.data().iter().sum();
        Tensor::from_op(
            "sum_all",
            vec![s],
            vec![1],
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx<'_>| vec![Some(vec![ctx.grad[0]; n])]),
        )
    }

    pub fn mean_all(&self) -> Tensor {
        self.sum_all().scale(1.0 / self.numel() as f64)
    }

    fn reduced_shape(&self, axis: usize, keepdim: bool) -> Vec<usize> {
        let mut shape = self.shape().to_vec();
        if keepdim || shape.len() == 1 {
            shape[axis] = 1;
        } else {
            shape.remove(axis);
        }
        shape
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        self.check_axis("sum_axis", axis)?;
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        {
            let x = self.data();
            for o in 0..outer {
                for l in 0..len {
                    let src = &x[(o * len + l) * inner..(o * len + l + 1) * inner];
                    let dst = &mut out[o * inner..(o + 1) * inner];
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                }
            }
        }
        Ok(Tensor::from_op(
            "sum_axis",
            out,
            self.reduced_shape(axis, keepdim),
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let mut g = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        g[(o * len + l) * inner..(o * len + l + 1) * inner]
                            .copy_from_slice(&ctx.grad[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        self.check_axis("mean_axis", axis)?;
        let len = self.shape()[axis] as f64;
        Ok(self.sum_axis(axis, keepdim)?.scale(1.0 / len))
    }

    /// Maximum along `axis`; the gradient goes to the first maximal entry.
    pub fn max_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor> {
        self.check_axis("max_axis", axis)?;
        let (outer, len, inner) = axis_split(self.shape(), axis);
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut arg = vec![0usize; outer * inner];
        {
            let x = self.data();
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        let v = x[(o * len + l) * inner + i];
                        let k = o * inner + i;
                        if l == 0 || v > out[k] {
                            out[k] = v;
                            arg[k] = l;
                        }
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            "max_axis",
            out,
            self.reduced_shape(axis, keepdim),
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let mut g = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let k = o * inner + i;
                        g[(o * len + arg[k]) * inner + i] = ctx.grad[k];
                    }
                }
                vec![Some(g)]
            }),
        ))
    }

    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        let out = broadcast_shape("broadcast_to", self.shape(), shape)?;
        if out != shape {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast_to",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let map = broadcast_map(shape, self.shape());
        let data: Vec<f64> = {
            let x = self.data();
            map.iter().map(|&i| x[i]).collect()
        };
        let src_len = self.numel();
        Ok(Tensor::from_op(
            "broadcast_to",
            data,
            shape.to_vec(),
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let mut g = vec![0.0; src_len];
                for (k, &i) in map.iter().enumerate() {
                    g[i] += ctx.grad[k];
                }
                vec![Some(g)]
            }),
        ))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() || shape.contains(&0) {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(
            "reshape",
            self.to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            Box::new(|ctx: &BackwardCtx<'_>| vec![Some(ctx.grad.to_vec())]),
        ))
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(TensorError::Invalid(format!(
                "permute: {perm:?} is not a permutation of rank {rank}"
            )));
        }
        let in_shape = self.shape().to_vec();
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let in_strides = contiguous_strides(&in_shape);
        let gather: Vec<usize> = {
            // for each output position, the input flat index
            let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
            let n = numel(&out_shape);
            let mut idx = vec![0usize; rank];
            let mut pos = 0usize;
            let mut map = Vec::with_capacity(n);
            for _ in 0..n {
                map.push(pos);
                for d in (0..rank).rev() {
                    idx[d] += 1;
                    pos += strides[d];
                    if idx[d] < out_shape[d] {
                        break;
                    }
                    pos -= strides[d] * out_shape[d];
                    idx[d] = 0;
                }
            }
            map
        };
        let data: Vec<f64> = {
            let x = self.data();
            gather.iter().map(|&i| x[i]).collect()
        };
        Ok(Tensor::from_op(
            "permute",
            data,
            out_shape,
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let mut g = vec![0.0; gather.len()];
                for (k, &i) in gather.iter().enumerate() {
                    g[i] = ctx.grad[k];
                }
                vec![Some(g)]
            }),
        ))
    }

    /// Swaps two axes.
    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor> {
        self.check_axis("transpose", a)?;
        self.check_axis("transpose", b)?;
        let mut perm: Vec<usize> = (0..self.rank()).collect();
        perm.swap(a, b);
        self.permute(&perm)
    }

    /// Sub-block given one index range per axis.
    pub fn slice(&self, ranges: &[Range<usize>]) -> Result<Tensor> {
        let shape = self.shape().to_vec();
        if ranges.len() != shape.len() || ranges.iter().zip(&shape).any(|(r, &d)| r.start >= r.end || r.end > d) {
            return Err(TensorError::Invalid(format!(
                "slice: ranges {ranges:?} invalid for shape {shape:?}"
            )));
        }
        let out_shape: Vec<usize> = ranges.iter().map(|r| r.end - r.start).collect();
        let rank = shape.len();
        let strides = contiguous_strides(&shape);
        // contiguous runs along the last axis
        let run = out_shape[rank - 1];
        let runs = numel(&out_shape) / run;
        let mut starts = Vec::with_capacity(runs);
        let mut idx = vec![0usize; rank.saturating_sub(1)];
        for _ in 0..runs {
            let mut pos = ranges[rank - 1].start;
            for d in 0..rank - 1 {
                pos += (ranges[d].start + idx[d]) * strides[d];
            }
            starts.push(pos);
            for d in (0..rank - 1).rev() {
                idx[d] += 1;
                if idx[d] < out_shape[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        let mut data = Vec::with_capacity(runs * run);
        {
            let x = self.data();
            for &s in &starts {
                data.extend_from_slice(&x[s..s + run]);
            }
        }
        let src_len = self.numel();
        Ok(Tensor::from_op(
            "slice",
            data,
            out_shape,
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let mut g = vec![0.0; src_len];
                for (k, &s) in starts.iter().enumerate() {
                    g[s..s + run].copy_from_slice(&ctx.grad[k * run..(k + 1) * run]);
                }
                vec![Some(g)]
            }),
        ))
    }

    pub fn concat(tensors: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = tensors
            .first()
            .ok_or_else(|| TensorError::Invalid("concat of zero tensors".into()))?;
        first.check_axis("concat", axis)?;
        let base = first.shape();
        for t in tensors {
            let ok = t.rank() == base.len()
                && t.shape()
                    .iter()
                    .zip(base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: base.to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        let (outer, _, inner) = axis_split(base, axis);
        let lens: Vec<usize> = tensors.iter().map(|t| t.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut out_shape = base.to_vec();
        out_shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        {
            let guards: Vec<_> = tensors.iter().map(|t| t.data()).collect();
            for o in 0..outer {
                for (g, &len) in guards.iter().zip(&lens) {
                    data.extend_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
            }
        }
        Ok(Tensor::from_op(
            "concat",
            data,
            out_shape,
            tensors.to_vec(),
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let mut grads: Vec<Vec<f64>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (g, &len) in grads.iter_mut().zip(&lens) {
                        g.extend_from_slice(&ctx.grad[pos..pos + len * inner]);
                        pos += len * inner;
                    }
                }
                grads
                    .into_iter()
                    .zip(ctx.parents)
                    .map(|(g, p)| p.requires_grad().then_some(g))
                    .collect()
            }),
        ))
    }

    /// Matrix product of `[.., m, k]` and `[.., k, n]` with equal leading
    /// batch extents (rank 2 or 3).
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = (self.shape(), other.shape());
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        };
        let (batch, m, k, n) = match (a.len(), b.len()) {
            (2, 2) if a[1] == b[0] => (1, a[0], a[1], b[1]),
            (3, 3) if a[0] == b[0] && a[2] == b[1] => (a[0], a[1], a[2], b[2]),
            _ => return Err(mismatch()),
        };
        let mut out = vec![0.0; batch * m * n];
        {
            let x = self.data();
            let y = other.data();
            for bi in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &x[bi * m * k..],
                    (k, 1),
                    &y[bi * k * n..],
                    (n, 1),
                    &mut out[bi * m * n..],
                    0.0,
                );
            }
        }
        let out_shape = if batch == 1 && a.len() == 2 {
            vec![m, n]
        } else {
            vec![batch, m, n]
        };
        Ok(Tensor::from_op(
            "matmul",
            out,
            out_shape,
            vec![self.clone(), other.clone()],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let x = ctx.parents[0].data();
                let y = ctx.parents[1].data();
                let g = ctx.grad;
                let ga = ctx.parents[0].requires_grad().then(|| {
                    // dA = G Bᵀ
                    let mut da = vec![0.0; batch * m * k];
                    for bi in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &g[bi * m * n..],
                            (n, 1),
                            &y[bi * k * n..],
                            (1, n),
                            &mut da[bi * m * k..],
                            0.0,
                        );
                    }
                    da
                });
                let gb = ctx.parents[1].requires_grad().then(|| {
                    // dB = Aᵀ G
                    let mut db = vec![0.0; batch * k * n];
                    for bi in 0..batch {
                        gemm(
                            k,
                            m,
                            n,
                            &x[bi * m * k..],
                            (1, k),
                            &g[bi * m * n..],
                            (n, 1),
                            &mut db[bi * k * n..],
                            0.0,
                        );
                    }
                    db
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Softmax along `axis` with max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        self.check_axis("softmax", axis)?;
        if self.data().iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "softmax" });
        }
        let (outer, len, inner) = axis_split(self.shape(), axis);
        self.softmax_impl("softmax", outer, len, inner, None)
    }

    /// Softmax over the last axis where positions with `keep[j] == false`
    /// receive exactly zero weight.
    pub fn masked_softmax(&self, keep: &[bool]) -> Result<Tensor> {
        let len = *self.shape().last().expect("rank >= 1");
        if keep.len() != len {
            return Err(TensorError::ShapeMismatch {
                op: "masked_softmax",
                lhs: self.shape().to_vec(),
                rhs: vec![keep.len()],
            });
        }
        if !keep.iter().any(|&k| k) {
            return Err(TensorError::Invalid("masked_softmax: every position masked".into()));
        }
        if self.data().iter().any(|v| !v.is_finite()) {
            return Err(TensorError::NonFinite { op: "masked_softmax" });
        }
        let outer = self.numel() / len;
        self.softmax_impl("masked_softmax", outer, len, 1, Some(keep.to_vec()))
    }

    fn softmax_impl(
        &self,
        name: &'static str,
        outer: usize,
        len: usize,
        inner: usize,
        keep: Option<Vec<bool>>,
    ) -> Result<Tensor> {
        let mut out = vec![0.0; outer * len * inner];
        {
            let x = self.data();
            let live = |l: usize| keep.as_ref().is_none_or(|k| k[l]);
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let mut mx = f64::NEG_INFINITY;
                    for l in (0..len).filter(|&l| live(l)) {
                        mx = mx.max(x[at(l)]);
                    }
                    let mut sum = 0.0;
                    for l in (0..len).filter(|&l| live(l)) {
                        let e = (x[at(l)] - mx).exp();
                        out[at(l)] = e;
                        sum += e;
                    }
                    for l in (0..len).filter(|&l| live(l)) {
                        out[at(l)] /= sum;
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            name,
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let y = ctx.output;
                let g = ctx.grad;
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |l: usize| (o * len + l) * inner + i;
                        let dot: f64 = (0..len).map(|l| g[at(l)] * y[at(l)]).sum();
                        for l in 0..len {
                            dx[at(l)] = y[at(l)] * (g[at(l)] - dot);
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Normalizes over the last axis, then applies per-feature gain and bias.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let d = *self.shape().last().expect("rank >= 1");
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape().to_vec(),
                rhs: gain.shape().to_vec(),
            });
        }
        let rows = self.numel() / d;
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        {
            let x = self.data();
            let gm = gain.data();
            let bs = bias.data();
            for r in 0..rows {
                let row = &x[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[r] = is;
                for j in 0..d {
                    let h = (row[j] - mean) * is;
                    xhat[r * d + j] = h;
                    out[r * d + j] = h * gm[j] + bs[j];
                }
            }
        }
        Ok(Tensor::from_op(
            "layer_norm",
            out,
            self.shape().to_vec(),
            vec![self.clone(), gain.clone(), bias.clone()],
            Box::new(move |ctx: &BackwardCtx<'_>| {
                let g = ctx.grad;
                let gm = ctx.parents[1].data();
                let mut dx = vec![0.0; rows * d];
                let mut dgain = vec![0.0; d];
                let mut dbias = vec![0.0; d];
                for (r, &is) in inv_std.iter().enumerate() {
                    let mut sum_dh = 0.0;
                    let mut sum_dh_h = 0.0;
                    for j in 0..d {
                        let k = r * d + j;
                        let dh = g[k] * gm[j];
                        sum_dh += dh;
                        sum_dh_h += dh * xhat[k];
                        dgain[j] += g[k] * xhat[k];
                        dbias[j] += g[k];
                    }
                    for j in 0..d {
                        let k = r * d + j;
                        let dh = g[k] * gm[j];
                        dx[k] = is * (dh - sum_dh / d as f64 - xhat[k] * sum_dh_h / d as f64);
                    }
                }
                vec![
                    ctx.parents[0].requires_grad().then_some(dx),
                    ctx.parents[1].requires_grad().then_some(dgain),
                    ctx.parents[2].requires_grad().then_some(dbias),
                ]
            }),
        ))
    }
}

/// `c = a·b + beta·c` for row/column-strided operands (strides as
/// `(row_stride, col_stride)`).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(a.len() > (m - 1) * a_strides.0 + (k.max(1) - 1) * a_strides.1 || k == 0);
    assert!(b.len() > (k.max(1) - 1) * b_strides.0 + (n - 1) * b_strides.1 || k == 0);
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
