//! Reverse sweep over the tape.

use crate::error::{AutodiffError, Result};
use crate::ops::{col2im, conv_out, im2col, permute_data, reduction_targets, sigmoid};
use crate::param::Gradients;
use crate::scalar::Scalar;
use crate::tape::{Op, PoolMode, Tape, Var};
use crate::tensor::Tensor;

struct GradBuf<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> GradBuf<T> {
    fn add(&mut self, tape: &Tape<T>, v: Var, g: Tensor<T>) {
        if !tape.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn add_with(&mut self, tape: &Tape<T>, v: Var, f: impl FnOnce() -> Vec<T>) {
        if tape.nodes[v.0].requires_grad {
            let shape = tape.shape(v).to_vec();
            let g = Tensor::new(shape, f()).expect("gradient shape");
            self.add(tape, v, g);
        }
    }
}

impl<T: Scalar> Tape<T> {
    /// Reverse-mode sweep from a scalar loss. Returns gradients for every
    /// trainable parameter read on this tape; gradients of parameters read
    /// more than once are summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let loss_shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(AutodiffError::NonScalarLoss(loss_shape.to_vec()));
        }
        let mut buf = GradBuf {
            grads: (0..self.nodes.len()).map(|_| None).collect(),
        };
        let mut out = Gradients::default();
        if !self.nodes[loss.0].requires_grad {
            return Ok(out);
        }
        buf.grads[loss.0] = Some(Tensor::ones(loss_shape.to_vec()));
        for i in (0..=loss.0).rev() {
            let Some(g) = buf.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, g, &mut buf, &mut out);
        }
        Ok(out)
    }

    fn backprop_node(&self, i: usize, g: Tensor<T>, buf: &mut GradBuf<T>, out: &mut Gradients<T>) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Param(key) => out.add(*key, g),
            Op::MatMul { a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                buf.add_with(self, *a, || {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, T::one(), gd, n, 1, self.value(*b).data(), 1, n, T::zero(), &mut da, k, 1);
                    da
                });
                buf.add_with(self, *b, || {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(k, m, n, T::one(), self.value(*a).data(), 1, k, gd, n, 1, T::zero(), &mut db, n, 1);
                    db
                });
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                buf.add_with(self, *a, || {
                    let mut da = vec![T::zero(); batch * m * k];
                    // b^T as an n x k operand
                    let (rs, cs) = if *trans_b { (k, 1) } else { (1, n) };
                    for j in 0..batch {
                        T::gemm(
                            m,
                            n,
                            k,
                            T::one(),
                            &gd[j * m * n..(j + 1) * m * n],
                            n,
                            1,
                            &bv[j * k * n..(j + 1) * k * n],
                            rs,
                            cs,
                            T::zero(),
                            &mut da[j * m * k..(j + 1) * m * k],
                            k,
                            1,
                        );
                    }
                    da
                });
                buf.add_with(self, *b, || {
                    let mut db = vec![T::zero(); batch * k * n];
                    for j in 0..batch {
                        let gj = &gd[j * m * n..(j + 1) * m * n];
                        let aj = &av[j * m * k..(j + 1) * m * k];
                        let dj = &mut db[j * k * n..(j + 1) * k * n];
                        if *trans_b {
                            // db (n x k) = g^T (n x m) @ a (m x k)
                            T::gemm(n, m, k, T::one(), gj, 1, n, aj, k, 1, T::zero(), dj, k, 1);
                        } else {
                            // db (k x n) = a^T (k x m) @ g (m x n)
                            T::gemm(k, m, n, T::one(), aj, 1, k, gj, n, 1, T::zero(), dj, n, 1);
                        }
                    }
                    db
                });
            }
            Op::Add(a, b) => {
                buf.add(self, *a, g.clone());
                buf.add(self, *b, g);
            }
            Op::Sub(a, b) => {
                buf.add(self, *b, g.map(|v| -v));
                buf.add(self, *a, g);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                buf.add_with(self, *a, || gd.iter().zip(bv).map(|(&x, &y)| x * y).collect());
                buf.add_with(self, *b, || gd.iter().zip(av).map(|(&x, &y)| x * y).collect());
            }
            Op::AddBias { x, bias } => {
                let c = self.shape(*bias)[0];
                buf.add_with(self, *bias, || {
                    let mut db = vec![T::zero(); c];
                    for row in gd.chunks(c) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    db
                });
                buf.add(self, *x, g);
            }
            Op::Scale { x, factor } => buf.add(self, *x, g.map(|v| v * *factor)),
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                buf.add_with(self, *x, || {
                    gd.iter()
                        .zip(xv)
                        .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                        .collect()
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                buf.add_with(self, *x, || gd.iter().zip(y).map(|(&d, &s)| d * s * (T::one() - s)).collect());
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                buf.add_with(self, *x, || gd.iter().zip(y).map(|(&d, &t)| d * (T::one() - t * t)).collect());
            }
            Op::Softplus(x) => {
                let xv = self.value(*x).data();
                buf.add_with(self, *x, || gd.iter().zip(xv).map(|(&d, &v)| d * sigmoid(v)).collect());
            }
            Op::Softmax { x } => {
                let c = *node.value.shape().last().unwrap();
                let p = node.value.data();
                buf.add_with(self, *x, || {
                    let mut dx = vec![T::zero(); p.len()];
                    for ((prow, grow), drow) in p.chunks(c).zip(gd.chunks(c)).zip(dx.chunks_mut(c)) {
                        let dot: T = prow.iter().zip(grow).map(|(&a, &b)| a * b).sum();
                        for j in 0..c {
                            drow[j] = prow[j] * (grow[j] - dot);
                        }
                    }
                    dx
                });
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                buf.add(self, *x, g.reshape(shape).expect("reshape grad"));
            }
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                let (data, shape) = permute_data(gd, node.value.shape(), &inv);
                buf.add(self, *x, Tensor::new(shape, data).expect("permute grad"));
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis] * inner;
                    buf.add_with(self, p, || {
                        let mut d = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            d.extend_from_slice(&gd[o * total + offset..o * total + offset + len]);
                        }
                        d
                    });
                    offset += len;
                }
            }
            Op::Narrow { x, axis, start } => {
                let in_shape = self.shape(*x);
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let len = node.value.shape()[*axis];
                buf.add_with(self, *x, || {
                    let mut d = vec![T::zero(); self.value(*x).numel()];
                    for o in 0..outer {
                        let dst = (o * in_shape[*axis] + start) * inner;
                        d[dst..dst + len * inner].copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                    }
                    d
                });
            }
            Op::Sum(x) => {
                let shape = self.shape(*x).to_vec();
                buf.add(self, *x, Tensor::full(shape, gd[0]));
            }
            Op::Mean(x) => {
                let shape = self.shape(*x).to_vec();
                let n = T::from_usize(self.value(*x).numel()).unwrap();
                buf.add(self, *x, Tensor::full(shape, gd[0] / n));
            }
            Op::Pool { x, axes, mode, argmax } => {
                let in_shape = self.shape(*x).to_vec();
                buf.add_with(self, *x, || {
                    let mut d = vec![T::zero(); in_shape.iter().product()];
                    match mode {
                        PoolMode::Max => {
                            for (o, &src) in argmax.iter().enumerate() {
                                d[src] += gd[o];
                            }
                        }
                        PoolMode::Mean => {
                            let k: usize = axes.iter().map(|&a| in_shape[a]).product();
                            let kk = T::from_usize(k).unwrap();
                            let (targets, _) = reduction_targets(&in_shape, axes);
                            for (dv, &t) in d.iter_mut().zip(&targets) {
                                *dv = gd[t] / kk;
                            }
                        }
                    }
                    d
                });
            }
            Op::Conv2d { x, k, stride } => {
                let sx = self.shape(*x);
                let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
                let f = self.shape(*k)[0];
                let hw = conv_out(h, *stride) * conv_out(w, *stride);
                let (xv, kv) = (self.value(*x).data(), self.value(*k).data());
                let need_x = self.nodes[x.0].requires_grad;
                let need_k = self.nodes[k.0].requires_grad;
                let mut dk = vec![T::zero(); f * c * 9];
                let mut dx = vec![T::zero(); if need_x { xv.len() } else { 0 }];
                for i in 0..n {
                    let gi = &gd[i * f * hw..(i + 1) * f * hw];
                    if need_k {
                        let cols = im2col(&xv[i * c * h * w..(i + 1) * c * h * w], c, h, w, *stride);
                        // dk (f x c9) += g (f x hw) @ cols^T (hw x c9)
                        T::gemm(f, hw, c * 9, T::one(), gi, hw, 1, &cols, 1, hw, T::one(), &mut dk, c * 9, 1);
                    }
                    if need_x {
                        let mut dcols = vec![T::zero(); c * 9 * hw];
                        // dcols (c9 x hw) = k^T (c9 x f) @ g (f x hw)
                        T::gemm(c * 9, f, hw, T::one(), kv, 1, c * 9, gi, hw, 1, T::zero(), &mut dcols, hw, 1);
                        col2im(&dcols, &mut dx[i * c * h * w..(i + 1) * c * h * w], c, h, w, *stride);
                    }
                }
                if need_k {
                    buf.add(self, *k, Tensor::new(self.shape(*k).to_vec(), dk).unwrap());
                }
                if need_x {
                    buf.add(self, *x, Tensor::new(sx.to_vec(), dx).unwrap());
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let shape = node.value.shape();
                let (n, c) = (shape[0], shape[1]);
                let spatial: usize = shape[2..].iter().product();
                let xh = xhat.data();
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for i in 0..n {
                    for ch in 0..c {
                        let base = (i * c + ch) * spatial;
                        for j in base..base + spatial {
                            dgamma[ch] += gd[j] * xh[j];
                            dbeta[ch] += gd[j];
                        }
                    }
                }
                buf.add_with(self, *x, || {
                    let mut dx = vec![T::zero(); gd.len()];
                    let m = T::from_usize(n * spatial).unwrap();
                    for i in 0..n {
                        for ch in 0..c {
                            let base = (i * c + ch) * spatial;
                            for j in base..base + spatial {
                                dx[j] = if *train {
                                    // dxhat = g*gamma; sums over the batch reduce to dbeta/dgamma
                                    gv[ch] * inv_std[ch] / m * (m * gd[j] - dbeta[ch] - xh[j] * dgamma[ch])
                                } else {
                                    gd[j] * gv[ch] * inv_std[ch]
                                };
                            }
                        }
                    }
                    dx
                });
                buf.add(self, *gamma, Tensor::new(vec![c], dgamma).unwrap());
                buf.add(self, *beta, Tensor::new(vec![c], dbeta).unwrap());
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let d = *node.value.shape().last().unwrap();
                let xh = xhat.data();
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); d];
                let mut dbeta = vec![T::zero(); d];
                for (grow, xrow) in gd.chunks(d).zip(xh.chunks(d)) {
                    for j in 0..d {
                        dgamma[j] += grow[j] * xrow[j];
                        dbeta[j] += grow[j];
                    }
                }
                buf.add_with(self, *x, || {
                    let dd = T::from_usize(d).unwrap();
                    let mut dx = vec![T::zero(); gd.len()];
                    for (r, ((grow, xrow), drow)) in gd.chunks(d).zip(xh.chunks(d)).zip(dx.chunks_mut(d)).enumerate() {
                        let mut sum_dxh = T::zero();
                        let mut sum_dxh_xh = T::zero();
                        for j in 0..d {
                            let dxh = grow[j] * gv[j];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xrow[j];
                        }
                        for j in 0..d {
                            let dxh = grow[j] * gv[j];
                            drow[j] = inv_std[r] / dd * (dd * dxh - sum_dxh - xrow[j] * sum_dxh_xh);
                        }
                    }
                    dx
                });
                buf.add(self, *gamma, Tensor::new(vec![d], dgamma).unwrap());
                buf.add(self, *beta, Tensor::new(vec![d], dbeta).unwrap());
            }
            Op::Film { x, gamma, beta } => {
                let shape = node.value.shape();
                let spatial: usize = shape[2..].iter().product();
                let nc = shape[0] * shape[1];
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                buf.add_with(self, *x, || {
                    let mut dx = vec![T::zero(); gd.len()];
                    for j in 0..nc {
                        for s in 0..spatial {
                            dx[j * spatial + s] = gd[j * spatial + s] * gv[j];
                        }
                    }
                    dx
                });
                buf.add_with(self, *gamma, || {
                    (0..nc)
                        .map(|j| (0..spatial).map(|s| gd[j * spatial + s] * xv[j * spatial + s]).sum())
                        .collect()
                });
                buf.add_with(self, *beta, || (0..nc).map(|j| gd[j * spatial..(j + 1) * spatial].iter().copied().sum()).collect());
            }
            Op::Embedding { table, ids } => {
                let e = self.shape(*table)[1];
                buf.add_with(self, *table, || {
                    let mut d = vec![T::zero(); self.value(*table).numel()];
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..e {
                            d[id * e + j] += gd[r * e + j];
                        }
                    }
                    d
                });
            }
            Op::RowCosine { a, b, eps } => {
                let p = self.shape(*a)[1];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let mut da = vec![T::zero(); av.len()];
                let mut db = vec![T::zero(); bv.len()];
                for r in 0..gd.len() {
                    let (x, y) = (&av[r * p..(r + 1) * p], &bv[r * p..(r + 1) * p]);
                    let dot: T = x.iter().zip(y).map(|(&u, &v)| u * v).sum();
                    let nx2 = x.iter().map(|&u| u * u).sum::<T>() + *eps;
                    let ny2 = y.iter().map(|&u| u * u).sum::<T>() + *eps;
                    let denom = (nx2 * ny2).sqrt();
                    let s = dot / denom;
                    for j in 0..p {
                        da[r * p + j] = gd[r] * (y[j] / denom - s * x[j] / nx2);
                        db[r * p + j] = gd[r] * (x[j] / denom - s * y[j] / ny2);
                    }
                }
                buf.add(self, *a, Tensor::new(vec![gd.len(), p], da).unwrap());
                buf.add(self, *b, Tensor::new(vec![gd.len(), p], db).unwrap());
            }
        }
    }
}
