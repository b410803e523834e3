//! Differentiable operations recorded on a [`Graph`].

use super::graph::Graph;
use super::kernels::{self, ConvGeom};
use super::{cst, numel, Element, Tensor, Var};
use crate::error::{Error, Result};

fn need(needs: &[bool], i: usize) -> bool {
    needs[i]
}

fn row_max<T: Element>(row: &[T]) -> T {
    row.iter().copied().fold(T::neg_infinity(), T::max)
}

/// Numerically stable softmax of one row into `out`.
fn softmax_row<T: Element>(row: &[T], out: &mut [T]) {
    let max = row_max(row);
    let mut total = T::zero();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o = *o / total;
    }
}

/// Log-softmax of one row into `out`.
fn log_softmax_row<T: Element>(row: &[T], out: &mut [T]) {
    let max = row_max(row);
    let total: T = row.iter().map(|&x| (x - max).exp()).sum();
    let lse = max + total.ln();
    for (o, &x) in out.iter_mut().zip(row) {
        *o = x - lse;
    }
}

impl<T: Element> Graph<T> {
    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a).clone(), self.value(b).clone());
        let (m, k, k2, n) = match (ta.shape(), tb.shape()) {
            (&[m, k], &[k2, n]) => (m, k, k2, n),
            (sa, sb) => return Err(Error::dim("matmul", sa, sb)),
        };
        if k != k2 {
            return Err(Error::dim("matmul", ta.shape(), tb.shape()));
        }
        let out = kernels::matmul(ta.data(), tb.data(), m, k, n);
        self.push("matmul", Tensor::from_parts(vec![m, n], out), &[a, b], move |g, needs| {
            let ga = need(needs, 0).then(|| {
                let bt = kernels::transpose(tb.data(), k, n);
                kernels::matmul(g, &bt, m, n, k)
            });
            let gb = need(needs, 1).then(|| kernels::matmul_at(ta.data(), g, m, k, n));
            vec![ga, gb]
        })
    }

    /// Batched matmul `[B,m,k] x [B,k,n] -> [B,m,n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a).clone(), self.value(b).clone());
        let (bs, m, k, n) = match (ta.shape(), tb.shape()) {
            (&[b1, m, k], &[b2, k2, n]) if b1 == b2 && k == k2 => (b1, m, k, n),
            (sa, sb) => return Err(Error::dim("bmm", sa, sb)),
        };
        let mut out = vec![T::zero(); bs * m * n];
        for i in 0..bs {
            kernels::matmul_acc(
                &ta.data()[i * m * k..(i + 1) * m * k],
                &tb.data()[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        self.push("bmm", Tensor::from_parts(vec![bs, m, n], out), &[a, b], move |g, needs| {
            let ga = need(needs, 0).then(|| {
                let mut ga = vec![T::zero(); bs * m * k];
                for i in 0..bs {
                    let bt = kernels::transpose(&tb.data()[i * k * n..(i + 1) * k * n], k, n);
                    kernels::matmul_acc(
                        &g[i * m * n..(i + 1) * m * n],
                        &bt,
                        &mut ga[i * m * k..(i + 1) * m * k],
                        m,
                        n,
                        k,
                    );
                }
                ga
            });
            let gb = need(needs, 1).then(|| {
                let mut gb = Vec::with_capacity(bs * k * n);
                for i in 0..bs {
                    gb.extend(kernels::matmul_at(
                        &ta.data()[i * m * k..(i + 1) * m * k],
                        &g[i * m * n..(i + 1) * m * n],
                        m,
                        k,
                        n,
                    ));
                }
                gb
            });
            vec![ga, gb]
        })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::dim("add", ta.shape(), tb.shape()));
        }
        let out: Vec<T> = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x + y).collect();
        let shape = ta.shape().to_vec();
        self.push("add", Tensor::from_parts(shape, out), &[a, b], |g, needs| {
            vec![need(needs, 0).then(|| g.to_vec()), need(needs, 1).then(|| g.to_vec())]
        })
    }

    /// `x + y` where `y`'s shape is a suffix of `x`'s; `y` is repeated over the leading axes.
    pub fn add_broadcast(&mut self, x: Var, y: Var) -> Result<Var> {
        let (tx, ty) = (self.value(x), self.value(y));
        if !tx.shape().ends_with(ty.shape()) {
            return Err(Error::dim("add_broadcast", tx.shape(), ty.shape()));
        }
        let inner = ty.len();
        let mut out = tx.to_vec();
        for chunk in out.chunks_exact_mut(inner) {
            for (o, &v) in chunk.iter_mut().zip(ty.data()) {
                *o += v;
            }
        }
        let shape = tx.shape().to_vec();
        self.push("add_broadcast", Tensor::from_parts(shape, out), &[x, y], move |g, needs| {
            let gy = need(needs, 1).then(|| {
                let mut gy = vec![T::zero(); inner];
                for chunk in g.chunks_exact(inner) {
                    for (a, &v) in gy.iter_mut().zip(chunk) {
                        *a += v;
                    }
                }
                gy
            });
            vec![need(needs, 0).then(|| g.to_vec()), gy]
        })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a).clone(), self.value(b).clone());
        if ta.shape() != tb.shape() {
            return Err(Error::dim("mul", ta.shape(), tb.shape()));
        }
        let out: Vec<T> = ta.data().iter().zip(tb.data()).map(|(&x, &y)| x * y).collect();
        let shape = ta.shape().to_vec();
        self.push("mul", Tensor::from_parts(shape, out), &[a, b], move |g, needs| {
            let ga = need(needs, 0)
                .then(|| g.iter().zip(tb.data()).map(|(&g, &y)| g * y).collect());
            let gb = need(needs, 1)
                .then(|| g.iter().zip(ta.data()).map(|(&g, &x)| g * x).collect());
            vec![ga, gb]
        })
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let s: T = cst(factor);
        let out = self.value(x).map(|v| v * s);
        self.push("scale", out, &[x], move |g, _| vec![Some(g.iter().map(|&v| v * s).collect())])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let n = tx.len();
        let total: T = tx.data().iter().copied().sum();
        self.push("sum", Tensor::scalar(total), &[x], move |g, _| vec![Some(vec![g[0]; n])])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n as f64)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        self.push("reshape", out, &[x], |g, _| vec![Some(g.to_vec())])
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (shape, out) = kernels::permute(tx.data(), tx.shape(), axes)?;
        let inv = kernels::inverse_axes(axes);
        self.push("permute", Tensor::from_parts(shape.clone(), out), &[x], move |g, _| {
            let (_, back) = kernels::permute(g, &shape, &inv).expect("inverse permutation");
            vec![Some(back)]
        })
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let shape = tx.shape().to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::Contract(format!(
                "narrow axis {axis} [{start}, {}) of shape {shape:?}",
                start + len
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let dim = shape[axis];
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            out.extend_from_slice(&tx.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let total = tx.len();
        self.push("narrow", Tensor::from_parts(out_shape, out), &[x], move |g, _| {
            let mut gx = vec![T::zero(); total];
            for o in 0..outer {
                let base = (o * dim + start) * inner;
                gx[base..base + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        })
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = self.value(*xs.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?);
        let base_shape = first.shape().to_vec();
        if axis >= base_shape.len() {
            return Err(Error::Contract(format!("concat axis {axis} for shape {base_shape:?}")));
        }
        let mut dims = Vec::with_capacity(xs.len());
        for &v in xs {
            let s = self.shape(v);
            let compatible = s.len() == base_shape.len()
                && s.iter().zip(&base_shape).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::dim("concat", &base_shape, s));
            }
            dims.push(s[axis]);
        }
        let outer: usize = base_shape[..axis].iter().product();
        let inner: usize = base_shape[axis + 1..].iter().product();
        let total_dim: usize = dims.iter().sum();
        let mut out = Vec::with_capacity(outer * total_dim * inner);
        for o in 0..outer {
            for (&v, &d) in xs.iter().zip(&dims) {
                let data = self.value(v).data();
                out.extend_from_slice(&data[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let mut out_shape = base_shape;
        out_shape[axis] = total_dim;
        self.push("concat", Tensor::from_parts(out_shape, out), xs, move |g, needs| {
            let mut grads: Vec<Vec<T>> = dims.iter().map(|&d| Vec::with_capacity(outer * d * inner)).collect();
            let mut offset = 0;
            for _ in 0..outer {
                for (grad, &d) in grads.iter_mut().zip(&dims) {
                    grad.extend_from_slice(&g[offset..offset + d * inner]);
                    offset += d * inner;
                }
            }
            grads.into_iter().zip(needs).map(|(g, &n)| n.then_some(g)).collect()
        })
    }

    /// `[S...] -> [b, S...]` by repetition.
    pub fn repeat_batch(&mut self, x: Var, b: usize) -> Result<Var> {
        let tx = self.value(x);
        let n = tx.len();
        let mut shape = vec![b];
        shape.extend_from_slice(tx.shape());
        let mut out = Vec::with_capacity(b * n);
        for _ in 0..b {
            out.extend_from_slice(tx.data());
        }
        self.push("repeat_batch", Tensor::from_parts(shape, out), &[x], move |g, _| {
            let mut gx = vec![T::zero(); n];
            for chunk in g.chunks_exact(n) {
                for (a, &v) in gx.iter_mut().zip(chunk) {
                    *a += v;
                }
            }
            vec![Some(gx)]
        })
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let width = *tx.shape().last().ok_or_else(|| Error::Contract("softmax of a scalar".into()))?;
        let mut out = vec![T::zero(); tx.len()];
        for (row, o) in tx.data().chunks_exact(width).zip(out.chunks_exact_mut(width)) {
            softmax_row(row, o);
        }
        let y = Tensor::from_parts(tx.shape().to_vec(), out);
        let yc = y.clone();
        self.push("softmax", y, &[x], move |g, _| {
            let mut gx = vec![T::zero(); g.len()];
            for ((gr, yr), o) in g
                .chunks_exact(width)
                .zip(yc.data().chunks_exact(width))
                .zip(gx.chunks_exact_mut(width))
            {
                let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for ((o, &gv), &yv) in o.iter_mut().zip(gr).zip(yr) {
                    *o = yv * (gv - dot);
                }
            }
            vec![Some(gx)]
        })
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x).clone();
        let out = tx.map(|v| v.max(T::zero()));
        self.push("relu", out, &[x], move |g, _| {
            vec![Some(
                g.iter()
                    .zip(tx.data())
                    .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                    .collect(),
            )]
        })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x).clone();
        let c: T = cst((2.0 / std::f64::consts::PI).sqrt());
        let a: T = cst(0.044715);
        let half: T = cst(0.5);
        let three: T = cst(3.0);
        let tanh: Vec<T> = tx.data().iter().map(|&v| (c * (v + a * v * v * v)).tanh()).collect();
        let out = Tensor::from_fn(tx.shape(), |i| half * tx.data()[i] * (T::one() + tanh[i]));
        self.push("gelu", out, &[x], move |g, _| {
            vec![Some(
                g.iter()
                    .zip(tx.data())
                    .zip(&tanh)
                    .map(|((&g, &v), &t)| {
                        let dt = (T::one() - t * t) * c * (T::one() + three * a * v * v);
                        g * (half * (T::one() + t) + half * v * dt)
                    })
                    .collect(),
            )]
        })
    }

    /// Standardizes over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Config(format!("layer_norm eps must be positive, got {eps}")));
        }
        let tx = self.value(x);
        let d = *tx.shape().last().ok_or_else(|| Error::Contract("layer_norm of a scalar".into()))?;
        let (tg, tb) = (self.value(gain).clone(), self.value(bias).clone());
        if tg.shape() != [d] || tb.shape() != [d] {
            return Err(Error::dim("layer_norm", tx.shape(), tg.shape()));
        }
        let rows = tx.len() / d;
        let eps_t: T = cst(eps);
        let inv_d: T = cst(1.0 / d as f64);
        let mut xhat = vec![T::zero(); tx.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); tx.len()];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rs = T::one() / (var + eps_t).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let xh = (row[j] - mean) * rs;
                xhat[r * d + j] = xh;
                out[r * d + j] = xh * tg.data()[j] + tb.data()[j];
            }
        }
        let shape = tx.shape().to_vec();
        self.push("layer_norm", Tensor::from_parts(shape, out), &[x, gain, bias], move |g, needs| {
            let mut gx = need(needs, 0).then(|| vec![T::zero(); g.len()]);
            let mut gg = vec![T::zero(); d];
            let mut gb = vec![T::zero(); d];
            for r in 0..rows {
                let gr = &g[r * d..(r + 1) * d];
                let xr = &xhat[r * d..(r + 1) * d];
                for j in 0..d {
                    gg[j] += gr[j] * xr[j];
                    gb[j] += gr[j];
                }
                if let Some(gx) = gx.as_mut() {
                    let mut mean_dx = T::zero();
                    let mut mean_dx_xh = T::zero();
                    for j in 0..d {
                        let dxh = gr[j] * tg.data()[j];
                        mean_dx += dxh;
                        mean_dx_xh += dxh * xr[j];
                    }
                    mean_dx = mean_dx * inv_d;
                    mean_dx_xh = mean_dx_xh * inv_d;
                    for j in 0..d {
                        let dxh = gr[j] * tg.data()[j];
                        gx[r * d + j] = rstd[r] * (dxh - mean_dx - xr[j] * mean_dx_xh);
                    }
                }
            }
            vec![gx, need(needs, 1).then_some(gg), need(needs, 2).then_some(gb)]
        })
    }

    /// Batch normalization of `[b,c,h,w]` with statistics of the current batch.
    /// Returns the output and the per-channel batch mean and (biased) variance.
    pub fn batch_norm2d_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let tx = self.value(x);
        let (b, c, h, w) = kernels::dims4(tx.shape(), "batch_norm2d")?;
        let (tg, tb) = (self.value(gamma).clone(), self.value(beta).clone());
        if tg.shape() != [c] || tb.shape() != [c] {
            return Err(Error::dim("batch_norm2d", tx.shape(), tg.shape()));
        }
        let hw = h * w;
        let count = b * hw;
        let inv_n: T = cst(1.0 / count as f64);
        let eps_t: T = cst(eps);
        let mut means = vec![T::zero(); c];
        let mut vars = vec![T::zero(); c];
        for ch in 0..c {
            let mut s = T::zero();
            for bi in 0..b {
                s += tx.data()[(bi * c + ch) * hw..(bi * c + ch + 1) * hw].iter().copied().sum::<T>();
            }
            let mean = s * inv_n;
            let mut v = T::zero();
            for bi in 0..b {
                for &val in &tx.data()[(bi * c + ch) * hw..(bi * c + ch + 1) * hw] {
                    v += (val - mean) * (val - mean);
                }
            }
            means[ch] = mean;
            vars[ch] = v * inv_n;
        }
        let rstd: Vec<T> = vars.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
        let mut xhat = vec![T::zero(); tx.len()];
        let mut out = vec![T::zero(); tx.len()];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * hw;
                for i in base..base + hw {
                    let xh = (tx.data()[i] - means[ch]) * rstd[ch];
                    xhat[i] = xh;
                    out[i] = xh * tg.data()[ch] + tb.data()[ch];
                }
            }
        }
        let shape = tx.shape().to_vec();
        let mean_out = means.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
        let var_out = vars.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect();
        let y = self.push(
            "batch_norm2d",
            Tensor::from_parts(shape, out),
            &[x, gamma, beta],
            move |g, needs| {
                let mut gg = vec![T::zero(); c];
                let mut gb = vec![T::zero(); c];
                for bi in 0..b {
                    for ch in 0..c {
                        let base = (bi * c + ch) * hw;
                        for i in base..base + hw {
                            gg[ch] += g[i] * xhat[i];
                            gb[ch] += g[i];
                        }
                    }
                }
                let gx = need(needs, 0).then(|| {
                    let mut gx = vec![T::zero(); g.len()];
                    for ch in 0..c {
                        let k = tg.data()[ch] * rstd[ch];
                        let mean_g = gb[ch] * inv_n;
                        let mean_gx = gg[ch] * inv_n;
                        for bi in 0..b {
                            let base = (bi * c + ch) * hw;
                            for i in base..base + hw {
                                gx[i] = k * (g[i] - mean_g - xhat[i] * mean_gx);
                            }
                        }
                    }
                    gx
                });
                vec![gx, need(needs, 1).then_some(gg), need(needs, 2).then_some(gb)]
            },
        )?;
        Ok((y, mean_out, var_out))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm2d_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let tx = self.value(x).clone();
        let (b, c, h, w) = kernels::dims4(tx.shape(), "batch_norm2d")?;
        let (tg, tb) = (self.value(gamma).clone(), self.value(beta).clone());
        if tg.shape() != [c] || tb.shape() != [c] || mean.len() != c || var.len() != c {
            return Err(Error::dim("batch_norm2d", tx.shape(), tg.shape()));
        }
        let hw = h * w;
        let eps_t: T = cst(eps);
        let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
        let mean = mean.to_vec();
        let mut out = vec![T::zero(); tx.len()];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * hw;
                for i in base..base + hw {
                    out[i] = (tx.data()[i] - mean[ch]) * rstd[ch] * tg.data()[ch] + tb.data()[ch];
                }
            }
        }
        let shape = tx.shape().to_vec();
        self.push("batch_norm2d", Tensor::from_parts(shape, out), &[x, gamma, beta], move |g, needs| {
            let mut gx = vec![T::zero(); g.len()];
            let mut gg = vec![T::zero(); c];
            let mut gb = vec![T::zero(); c];
            for bi in 0..b {
                for ch in 0..c {
                    let base = (bi * c + ch) * hw;
                    for i in base..base + hw {
                        let xh = (tx.data()[i] - mean[ch]) * rstd[ch];
                        gg[ch] += g[i] * xh;
                        gb[ch] += g[i];
                        gx[i] = g[i] * rstd[ch] * tg.data()[ch];
                    }
                }
            }
            vec![need(needs, 0).then_some(gx), need(needs, 1).then_some(gg), need(needs, 2).then_some(gb)]
        })
    }

    /// Cross-correlation of `[b,c_in,h,w]` with `[c_out,c_in,kh,kw]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let tx = self.value(input).clone();
        let tk = self.value(kernel).clone();
        let (b, c, h, w) = kernels::dims4(tx.shape(), "conv2d")?;
        let (co, ci, kh, kw) = kernels::dims4(tk.shape(), "conv2d")?;
        if ci != c {
            return Err(Error::dim("conv2d", tx.shape(), tk.shape()));
        }
        if stride == 0 {
            return Err(Error::Config("conv2d stride must be positive".into()));
        }
        let (ph, pw) = (h + 2 * padding, w + 2 * padding);
        if kh > ph || kw > pw || (ph - kh) % stride != 0 || (pw - kw) % stride != 0 {
            return Err(Error::Config(format!(
                "conv2d: kernel {kh}x{kw}, stride {stride}, padding {padding} does not tile a {h}x{w} input"
            )));
        }
        let geom = ConvGeom {
            b,
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad: padding,
            oh: (ph - kh) / stride + 1,
            ow: (pw - kw) / stride + 1,
        };
        let plen = geom.patch_len();
        let rows = geom.rows();
        let cols = kernels::im2col(tx.data(), &geom);
        let kt = kernels::transpose(tk.data(), co, plen);
        let flat = kernels::matmul(&cols, &kt, rows, plen, co);
        let (_, out) = kernels::permute(&flat, &[b, geom.oh * geom.ow, co], &[0, 2, 1])?;
        let shape = vec![b, co, geom.oh, geom.ow];
        self.push("conv2d", Tensor::from_parts(shape, out), &[input, kernel], move |g, needs| {
            let (_, gflat) = kernels::permute(g, &[b, co, geom.oh * geom.ow], &[0, 2, 1])
                .expect("conv2d grad layout");
            let gx = need(needs, 0).then(|| {
                let gcols = kernels::matmul(&gflat, tk.data(), rows, co, plen);
                kernels::col2im(&gcols, &geom)
            });
            let gk = need(needs, 1).then(|| {
                let gkt = kernels::matmul_at(&cols, &gflat, rows, plen, co);
                kernels::transpose(&gkt, plen, co)
            });
            vec![gx, gk]
        })
    }

    /// Mean over each `k x k` window of `[b,c,h,w]`.
    pub fn avg_pool2d(&mut self, x: Var, k: usize, stride: usize) -> Result<Var> {
        let tx = self.value(x);
        let (b, c, h, w) = kernels::dims4(tx.shape(), "avg_pool2d")?;
        if k == 0 || stride == 0 || k > h || k > w || (h - k) % stride != 0 || (w - k) % stride != 0 {
            return Err(Error::Config(format!(
                "avg_pool2d: window {k} stride {stride} does not tile a {h}x{w} input"
            )));
        }
        let (oh, ow) = ((h - k) / stride + 1, (w - k) / stride + 1);
        let inv: T = cst(1.0 / (k * k) as f64);
        let planes = b * c;
        let mut out = vec![T::zero(); planes * oh * ow];
        for p in 0..planes {
            let src = &tx.data()[p * h * w..(p + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = T::zero();
                    for dy in 0..k {
                        for dx in 0..k {
                            s += src[(oy * stride + dy) * w + ox * stride + dx];
                        }
                    }
                    out[(p * oh + oy) * ow + ox] = s * inv;
                }
            }
        }
        let total = tx.len();
        self.push("avg_pool2d", Tensor::from_parts(vec![b, c, oh, ow], out), &[x], move |g, _| {
            let mut gx = vec![T::zero(); total];
            for p in 0..planes {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let gv = g[(p * oh + oy) * ow + ox] * inv;
                        for dy in 0..k {
                            for dx in 0..k {
                                gx[p * h * w + (oy * stride + dy) * w + ox * stride + dx] += gv;
                            }
                        }
                    }
                }
            }
            vec![Some(gx)]
        })
    }

    /// `[b,c,h,w] -> [b,c]`, mean over both spatial axes.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let (b, c, h, w) = kernels::dims4(tx.shape(), "global_avg_pool")?;
        let hw = h * w;
        let inv: T = cst(1.0 / hw as f64);
        let out: Vec<T> = tx
            .data()
            .chunks_exact(hw)
            .map(|plane| plane.iter().copied().sum::<T>() * inv)
            .collect();
        self.push("global_avg_pool", Tensor::from_parts(vec![b, c], out), &[x], move |g, _| {
            let mut gx = Vec::with_capacity(b * c * hw);
            for &gv in g {
                gx.extend(std::iter::repeat_n(gv * inv, hw));
            }
            vec![Some(gx)]
        })
    }

    /// Mean cross-entropy of `[b,C]` logits against integer targets.
    pub fn softmax_ce(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (b, classes) = match *tl.shape() {
            [b, c] => (b, c),
            _ => return Err(Error::dim("softmax_ce", tl.shape(), &[targets.len(), 0])),
        };
        if targets.len() != b {
            return Err(Error::dim("softmax_ce", tl.shape(), &[targets.len()]));
        }
        if let Some(&label) = targets.iter().find(|&&t| t >= classes) {
            return Err(Error::Label { label, classes });
        }
        let mut probs = vec![T::zero(); tl.len()];
        let mut logp = vec![T::zero(); classes];
        let mut loss = T::zero();
        for (i, (row, p)) in tl
            .data()
            .chunks_exact(classes)
            .zip(probs.chunks_exact_mut(classes))
            .enumerate()
        {
            log_softmax_row(row, &mut logp);
            loss += -logp[targets[i]];
            for (pv, &lv) in p.iter_mut().zip(&logp) {
                *pv = lv.exp();
            }
        }
        let inv_b: T = cst(1.0 / b as f64);
        let targets = targets.to_vec();
        self.push("softmax_ce", Tensor::scalar(loss * inv_b), &[logits], move |g, _| {
            let k = g[0] * inv_b;
            let mut gx = probs.clone();
            for (i, &t) in targets.iter().enumerate() {
                gx[i * classes + t] -= T::one();
            }
            for v in gx.iter_mut() {
                *v = *v * k;
            }
            vec![Some(gx)]
        })
    }

    /// `T^2 * KL(softmax(teacher/T) || softmax(student/T))`, mean over rows.
    /// The teacher input never receives a gradient.
    pub fn kl_div_temperature(&mut self, student: Var, teacher: Var, temperature: f64) -> Result<Var> {
        if !(temperature > 0.0) || !temperature.is_finite() {
            return Err(Error::Config(format!("temperature must be positive, got {temperature}")));
        }
        let (ts, tt) = (self.value(student), self.value(teacher));
        if ts.shape() != tt.shape() || ts.rank() != 2 {
            return Err(Error::dim("kl_div_temperature", ts.shape(), tt.shape()));
        }
        let (b, classes) = (ts.shape()[0], ts.shape()[1]);
        let inv_t: T = cst(1.0 / temperature);
        let t2: T = cst(temperature * temperature);
        let mut ps = vec![T::zero(); ts.len()];
        let mut pt = vec![T::zero(); ts.len()];
        let mut ls = vec![T::zero(); classes];
        let mut lt = vec![T::zero(); classes];
        let mut scaled_s = vec![T::zero(); classes];
        let mut scaled_t = vec![T::zero(); classes];
        let mut total = T::zero();
        for i in 0..b {
            let rs = &ts.data()[i * classes..(i + 1) * classes];
            let rt = &tt.data()[i * classes..(i + 1) * classes];
            for j in 0..classes {
                scaled_s[j] = rs[j] * inv_t;
                scaled_t[j] = rt[j] * inv_t;
            }
            log_softmax_row(&scaled_s, &mut ls);
            log_softmax_row(&scaled_t, &mut lt);
            for j in 0..classes {
                let p = lt[j].exp();
                pt[i * classes + j] = p;
                ps[i * classes + j] = ls[j].exp();
                if p > T::zero() {
                    total += p * (lt[j] - ls[j]);
                }
            }
        }
        let inv_b: T = cst(1.0 / b as f64);
        let value = Tensor::scalar(total * t2 * inv_b);
        let k_base: T = cst::<T>(temperature) * inv_b;
        self.push("kl_div_temperature", value, &[student, teacher], move |g, needs| {
            let gs = need(needs, 0).then(|| {
                let k = g[0] * k_base;
                ps.iter().zip(&pt).map(|(&s, &t)| k * (s - t)).collect()
            });
            vec![gs, None]
        })
    }

    /// Affine map over the last axis: `x[..., in] * w[in, out] + b[out]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let ws = self.shape(weight).to_vec();
        let (din, dout) = match *ws {
            [i, o] => (i, o),
            _ => return Err(Error::dim("linear", &shape, &ws)),
        };
        if shape.last() != Some(&din) {
            return Err(Error::dim("linear", &shape, &ws));
        }
        let rows = numel(&shape) / din;
        let flat = self.reshape(x, &[rows, din])?;
        let y = self.matmul(flat, weight)?;
        let y = self.add_broadcast(y, bias)?;
        let mut out_shape = shape;
        *out_shape.last_mut().expect("nonempty shape") = dout;
        self.reshape(y, &out_shape)
    }
}

/// Row-wise softmax of the last axis of a plain tensor.
pub fn softmax_last<T: Element>(x: &Tensor<T>) -> Tensor<T> {
    let width = *x.shape().last().unwrap_or(&1);
    let mut out = vec![T::zero(); x.len()];
    for (row, o) in x.data().chunks_exact(width).zip(out.chunks_exact_mut(width)) {
        softmax_row(row, o);
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}
