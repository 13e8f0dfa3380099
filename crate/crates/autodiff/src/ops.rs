//! Forward implementations of the primitive operator set.

use crate::error::{dim_err, AutodiffError, Result};
use crate::scalar::Scalar;
use crate::tape::{BatchStats, BnMode, Op, PoolMode, Tape, Var};
use crate::tensor::{strides, Tensor};

pub(crate) fn permute_data<T: Scalar>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; out_shape.len()];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for d in (0..out_shape.len()).rev() {
            idx[d] += 1;
            offset += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

/// Maps each input element to its output slot when `axes` are reduced away.
pub(crate) fn reduction_targets(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let out_shape: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &d)| d)
        .collect();
    let out_strides = strides(&out_shape);
    let mut dim_to_out = vec![None; shape.len()];
    let mut j = 0;
    for (i, slot) in dim_to_out.iter_mut().enumerate() {
        if !axes.contains(&i) {
            *slot = Some(out_strides[j]);
            j += 1;
        }
    }
    let numel: usize = shape.iter().product();
    let mut targets = Vec::with_capacity(numel);
    let mut idx = vec![0usize; shape.len()];
    let mut offset = 0usize;
    for _ in 0..numel {
        targets.push(offset);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            if let Some(s) = dim_to_out[d] {
                offset += s;
            }
            if idx[d] < shape[d] {
                break;
            }
            if let Some(s) = dim_to_out[d] {
                offset -= s * shape[d];
            }
            idx[d] = 0;
        }
    }
    let out_shape = if out_shape.is_empty() { vec![1] } else { out_shape };
    (targets, out_shape)
}

pub(crate) fn conv_out(size: usize, stride: usize) -> usize {
    (size - 1) / stride + 1
}

/// Unfolds one `[C,H,W]` image into `[C*9, Ho*Wo]` patch columns (3x3 window, padding 1).
pub(crate) fn im2col<T: Scalar>(x: &[T], c: usize, h: usize, w: usize, stride: usize) -> Vec<T> {
    let (ho, wo) = (conv_out(h, stride), conv_out(w, stride));
    let mut cols = vec![T::zero(); c * 9 * ho * wo];
    for ch in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ch * 9 + ky * 3 + kx) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[row + oy * wo + ox] = x[ch * h * w + iy as usize * w + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

pub(crate) fn col2im<T: Scalar>(cols: &[T], dx: &mut [T], c: usize, h: usize, w: usize, stride: usize) {
    let (ho, wo) = (conv_out(h, stride), conv_out(w, stride));
    for ch in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = (ch * 9 + ky * 3 + kx) * ho * wo;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - 1;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dx[ch * h * w + iy as usize * w + ix as usize] += cols[row + oy * wo + ox];
                    }
                }
            }
        }
    }
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        dim_err(op, format!("{a:?} vs {b:?}"))
    }
}

impl<T: Scalar> Tape<T> {
    fn emit(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var], name: &'static str) -> Result<Var> {
        let value = value.ensure_finite(name)?;
        Ok(self.push(value, op, inputs))
    }

    /// `[M,K] @ [K,N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return dim_err("matmul", format!("{sa:?} x {sb:?}"));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            T::one(),
            self.value(a).data(),
            k,
            1,
            self.value(b).data(),
            n,
            1,
            T::zero(),
            &mut out,
            n,
            1,
        );
        self.emit(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b }, &[a, b], "matmul")
    }

    /// Batched `[B,M,K] @ [B,K,N]`, or `[B,M,K] @ [B,N,K]^T` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return dim_err("bmm", format!("{sa:?} x {sb:?}"));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return dim_err("bmm", format!("{sa:?} x {sb:?} (trans_b={trans_b})"));
        }
        let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
        let mut out = vec![T::zero(); batch * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            T::gemm(
                m,
                k,
                n,
                T::one(),
                &av[i * m * k..(i + 1) * m * k],
                k,
                1,
                &bv[i * k * n..(i + 1) * k * n],
                rsb,
                csb,
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
                n,
                1,
            );
        }
        self.emit(
            Tensor::new(vec![batch, m, n], out)?,
            Op::BatchMatMul { a, b, trans_b },
            &[a, b],
            "bmm",
        )
    }

    fn zip_with(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        same_shape(name, self.shape(a), self.shape(b))?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "add", |x, y| x + y)?;
        self.emit(t, Op::Add(a, b), &[a, b], "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "sub", |x, y| x - y)?;
        self.emit(t, Op::Sub(a, b), &[a, b], "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "mul", |x, y| x * y)?;
        self.emit(t, Op::Mul(a, b), &[a, b], "mul")
    }

    /// Adds a `[C]` vector along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap_or(&0);
        if self.shape(bias) != [c] {
            return dim_err("add_bias", format!("{:?} + {:?}", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias).data().to_vec();
        let mut out = self.value(x).clone();
        for row in out.data_mut().chunks_mut(c) {
            for (v, &bb) in row.iter_mut().zip(&b) {
                *v += bb;
            }
        }
        self.emit(out, Op::AddBias { x, bias }, &[x, bias], "add_bias")
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let t = self.value(x).map(|v| v * factor);
        self.emit(t, Op::Scale { x, factor }, &[x], "scale")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.emit(t, Op::Relu(x), &[x], "relu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(sigmoid);
        self.emit(t, Op::Sigmoid(x), &[x], "sigmoid")
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v.tanh());
        self.emit(t, Op::Tanh(x), &[x], "tanh")
    }

    /// `ln(1 + e^x)`, evaluated stably.
    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v.max(T::zero()) + (-v.abs()).exp().ln_1p());
        self.emit(t, Op::Softplus(x), &[x], "softplus")
    }

    /// Softmax over the last axis. Entries with `mask[i] == false` get
    /// probability exactly zero; a fully masked row yields all zeros.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap_or(&0);
        if let Some(m) = mask {
            if m.len() != self.value(x).numel() {
                return dim_err("softmax", format!("mask of {} for {shape:?}", m.len()));
            }
        }
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for (r, (row, orow)) in xv.chunks(c).zip(out.chunks_mut(c)).enumerate() {
            let allowed = |j: usize| mask.is_none_or(|m| m[r * c + j]);
            let mut max = T::neg_infinity();
            for (j, &v) in row.iter().enumerate() {
                if allowed(j) && v > max {
                    max = v;
                }
            }
            if max == T::neg_infinity() {
                continue;
            }
            let mut total = T::zero();
            for (j, &v) in row.iter().enumerate() {
                if allowed(j) {
                    let e = (v - max).exp();
                    orow[j] = e;
                    total += e;
                }
            }
            for o in orow.iter_mut() {
                *o /= total;
            }
        }
        self.emit(Tensor::new(shape, out)?, Op::Softmax { x }, &[x], "softmax")
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return dim_err("permute", format!("{perm:?} for {shape:?}"));
        }
        let (data, out_shape) = permute_data(self.value(x).data(), &shape, perm);
        let t = Tensor::new(out_shape, data)?;
        Ok(self.push(
            t,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            &[x],
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return dim_err("concat", "no inputs");
        };
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return dim_err("concat", format!("axis {axis} for {base:?}"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len() || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i]) {
                return dim_err("concat", format!("{s:?} vs {base:?} on axis {axis}"));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.value(p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(shape, data)?;
        Ok(self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return dim_err("narrow", format!("{start}+{len} on axis {axis} of {shape:?}"));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let t = Tensor::new(out_shape, data)?;
        Ok(self.push(t, Op::Narrow { x, axis, start }, &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let t = Tensor::scalar(self.value(x).sum());
        self.emit(t, Op::Sum(x), &[x], "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let t = Tensor::scalar(v.sum() / T::from_usize(v.numel()).unwrap());
        self.emit(t, Op::Mean(x), &[x], "mean")
    }

    /// Reduces `axes` by max or mean; reduced axes are dropped from the shape.
    /// Max routes its gradient to the first maximal element in row-major order.
    pub fn pool(&mut self, x: Var, axes: &[usize], mode: PoolMode) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.is_empty() || sorted.len() != axes.len() {
            return dim_err("pool", format!("axes {axes:?}"));
        }
        for &a in &sorted {
            if a >= shape.len() {
                return dim_err("pool", format!("axis {a} for {shape:?}"));
            }
            if shape[a] == 0 {
                return Err(AutodiffError::EmptyReduction(a));
            }
        }
        let (targets, out_shape) = reduction_targets(&shape, &sorted);
        let out_n: usize = out_shape.iter().product();
        let xv = self.value(x).data();
        let mut argmax = Vec::new();
        let out = match mode {
            PoolMode::Mean => {
                let k: usize = sorted.iter().map(|&a| shape[a]).product();
                let mut acc = vec![T::zero(); out_n];
                for (&t, &v) in targets.iter().zip(xv) {
                    acc[t] += v;
                }
                let kk = T::from_usize(k).unwrap();
                acc.iter_mut().for_each(|v| *v /= kk);
                acc
            }
            PoolMode::Max => {
                let mut best = vec![T::neg_infinity(); out_n];
                argmax = vec![usize::MAX; out_n];
                for (i, (&t, &v)) in targets.iter().zip(xv).enumerate() {
                    if argmax[t] == usize::MAX || v > best[t] {
                        best[t] = v;
                        argmax[t] = i;
                    }
                }
                best
            }
        };
        let t = Tensor::new(out_shape, out)?;
        self.emit(
            t,
            Op::Pool {
                x,
                axes: sorted,
                mode,
                argmax,
            },
            &[x],
            "pool",
        )
    }

    /// 3x3 cross-correlation with zero padding 1: `[N,C,H,W] * [F,C,3,3]`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if sx.len() != 4 || sk.len() != 4 || sk[2] != 3 || sk[3] != 3 || stride == 0 {
            return dim_err("conv2d", format!("{sx:?} * {sk:?} stride {stride}"));
        }
        if sx[1] != sk[1] {
            return dim_err("conv2d", format!("channel mismatch: input {} vs kernel {}", sx[1], sk[1]));
        }
        let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let f = sk[0];
        let (ho, wo) = (conv_out(h, stride), conv_out(w, stride));
        let mut out = vec![T::zero(); n * f * ho * wo];
        let (xv, kv) = (self.value(x).data(), self.value(k).data());
        for i in 0..n {
            let cols = im2col(&xv[i * c * h * w..(i + 1) * c * h * w], c, h, w, stride);
            T::gemm(
                f,
                c * 9,
                ho * wo,
                T::one(),
                kv,
                c * 9,
                1,
                &cols,
                ho * wo,
                1,
                T::zero(),
                &mut out[i * f * ho * wo..(i + 1) * f * ho * wo],
                ho * wo,
                1,
            );
        }
        let t = Tensor::new(vec![n, f, ho, wo], out)?;
        self.emit(t, Op::Conv2d { x, k, stride }, &[x, k], "conv2d")
    }

    /// Batch normalisation over axis 1 of `[N,C,...]`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: &BnMode<T>,
        eps: T,
    ) -> Result<(Var, Option<BatchStats<T>>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return dim_err("batch_norm", format!("{shape:?}"));
        }
        let (n, c) = (shape[0], shape[1]);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return dim_err(
                "batch_norm",
                format!("{c} channels, gamma {:?}, beta {:?}", self.shape(gamma), self.shape(beta)),
            );
        }
        let spatial: usize = shape[2..].iter().product();
        let m = n * spatial;
        let xv = self.value(x).data();
        let (mean, var_b, stats) = match mode {
            BnMode::Train => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * spatial;
                        for &v in &xv[base..base + spatial] {
                            mean[ch] += v;
                        }
                    }
                }
                let mm = T::from_usize(m).unwrap();
                mean.iter_mut().for_each(|v| *v /= mm);
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * spatial;
                        for &v in &xv[base..base + spatial] {
                            let d = v - mean[ch];
                            var[ch] += d * d;
                        }
                    }
                }
                let unbiased: Vec<T> = if m > 1 {
                    let denom = T::from_usize(m - 1).unwrap();
                    var.iter().map(|&v| v / denom).collect()
                } else {
                    vec![T::zero(); c]
                };
                var.iter_mut().for_each(|v| *v /= mm);
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return dim_err("batch_norm", "running statistics length");
                }
                (mean.clone(), var.clone(), None)
            }
        };
        let inv_std: Vec<T> = var_b.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * spatial;
                for j in base..base + spatial {
                    let xh = (xv[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = xh;
                    out[j] = xh * g[ch] + b[ch];
                }
            }
        }
        let t = Tensor::new(shape.clone(), out)?;
        let var = self.emit(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat: Tensor::new(shape, xhat)?,
                inv_std,
                train: matches!(mode, BnMode::Train),
            },
            &[x, gamma, beta],
            "batch_norm",
        )?;
        Ok((var, stats))
    }

    /// Layer normalisation over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap_or(&0);
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return dim_err("layer_norm", format!("{shape:?} with gamma {:?}", self.shape(gamma)));
        }
        let xv = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let dd = T::from_usize(d).unwrap();
        let rows = xv.len() / d;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dd;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dd;
            let is = T::one() / (var + eps).sqrt();
            inv_std.push(is);
            for j in 0..d {
                let xh = (row[j] - mean) * is;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        let t = Tensor::new(shape.clone(), out)?;
        self.emit(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat: Tensor::new(shape, xhat)?,
                inv_std,
            },
            &[x, gamma, beta],
            "layer_norm",
        )
    }

    /// Feature-wise affine modulation: `x[n,c,..] * gamma[n,c] + beta[n,c]`.
    pub fn film(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || self.shape(gamma) != [shape[0], shape[1]] || self.shape(beta) != [shape[0], shape[1]] {
            return dim_err(
                "film",
                format!("{shape:?} with gamma {:?} beta {:?}", self.shape(gamma), self.shape(beta)),
            );
        }
        let spatial: usize = shape[2..].iter().product();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = self.value(x).clone();
        for (nc, chunk) in out.data_mut().chunks_mut(spatial).enumerate() {
            for v in chunk.iter_mut() {
                *v = *v * g[nc] + b[nc];
            }
        }
        self.emit(out, Op::Film { x, gamma, beta }, &[x, gamma, beta], "film")
    }

    /// Gathers rows of a `[V,E]` table; output is `[ids.len(), E]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 || ids.is_empty() {
            return dim_err("embedding", format!("table {shape:?}, {} ids", ids.len()));
        }
        let (v, e) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return dim_err("embedding", format!("id {bad} out of vocabulary {v}"));
        }
        let tv = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * e);
        for &i in ids {
            data.extend_from_slice(&tv[i * e..(i + 1) * e]);
        }
        let t = Tensor::new(vec![ids.len(), e], data)?;
        Ok(self.push(
            t,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Row-wise cosine similarity of two `[N,P]` matrices, stabilised as
    /// `a.b / sqrt((|a|^2 + eps)(|b|^2 + eps))`.
    pub fn row_cosine(&mut self, a: Var, b: Var, eps: T) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || self.shape(b) != shape.as_slice() {
            return dim_err("row_cosine", format!("{shape:?} vs {:?}", self.shape(b)));
        }
        let p = shape[1];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let out: Vec<T> = av
            .chunks(p)
            .zip(bv.chunks(p))
            .map(|(x, y)| cosine(x, y, eps))
            .collect();
        let t = Tensor::new(vec![shape[0]], out)?;
        self.emit(t, Op::RowCosine { a, b, eps }, &[a, b], "row_cosine")
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Stabilised cosine similarity of two slices.
pub fn cosine<T: Scalar>(x: &[T], y: &[T], eps: T) -> T {
    let mut dot = T::zero();
    let mut nx = T::zero();
    let mut ny = T::zero();
    for (&a, &b) in x.iter().zip(y) {
        dot += a * b;
        nx += a * a;
        ny += b * b;
    }
    dot / ((nx + eps) * (ny + eps)).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permute_matches_transpose() {
        let data: Vec<f64> = (0..6).map(f64::from).collect();
        let (out, shape) = permute_data(&data, &[2, 3], &[1, 0]);
        assert_eq!(shape, vec![3, 2]);
        assert_eq!(out, vec![0.0, 3.0, 1.0, 4.0, 2.0, 5.0]);
    }

    #[test]
    fn reduction_targets_middle_axis() {
        let (t, s) = reduction_targets(&[2, 3, 2], &[1]);
        assert_eq!(s, vec![2, 2]);
        assert_eq!(t, vec![0, 1, 0, 1, 0, 1, 2, 3, 2, 3, 2, 3]);
    }
}
