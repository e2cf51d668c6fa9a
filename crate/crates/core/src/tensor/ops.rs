//! Differentiable tensor operations.
//!
//! Each op computes its forward value eagerly and, when any input is
//! tracked, records a node whose closure maps the upstream gradient to the
//! gradients of the inputs. Shapes are validated up front so failures carry
//! the offending dimensions.

use std::rc::Rc;

use super::{shape_err, Element, Tensor, TensorError, VjpFn};
use crate::rng::RngState;

// ── raw matmul kernels ──────────────────────────────────────────────

/// C[m,n] = A[m,k] * B[k,n]
pub(crate) fn mm_nn<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::ZERO; m * n];
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let o_row = &mut out[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

/// C[m,k] = A[m,n] * B[k,n]^T  (rows of A dotted with rows of B)
fn mm_nt<E: Element>(a: &[E], b: &[E], m: usize, n: usize, k: usize) -> Vec<E> {
    let mut out = vec![E::ZERO; m * k];
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let mut acc = E::ZERO;
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            out[i * k + p] = acc;
        }
    }
    out
}

/// C[k,n] = A[m,k]^T * B[m,n]
fn mm_tn<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize) -> Vec<E> {
    let mut out = vec![E::ZERO; k * n];
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let o_row = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in o_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
    out
}

fn dims2<E: Element>(t: &Tensor<E>, op: &'static str) -> Result<(usize, usize), TensorError> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(shape_err(op, format!("expected a 2-d tensor, got shape {s:?}"))),
    }
}

/// Split a shape into (outer, len, inner) around `axis`.
fn axis_split(shape: &[usize], axis: usize, op: &'static str) -> Result<(usize, usize, usize), TensorError> {
    if axis >= shape.len() {
        return Err(shape_err(op, format!("axis {axis} out of range for shape {shape:?}")));
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

impl<E: Element> Tensor<E> {
    // ── elementwise / structural ────────────────────────────────────

    pub fn add(&self, other: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        if self.shape() != other.shape() {
            return Err(shape_err(
                "add",
                format!("shape {:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        let data: Vec<E> = self.data().iter().zip(other.data()).map(|(&a, &b)| a + b).collect();
        let vjp: VjpFn<E> = Box::new(move |g| vec![g.to_vec(), g.to_vec()]);
        Ok(Tensor::from_op(self.shape().to_vec(), Rc::new(data), &[self, other], vjp))
    }

    pub fn sub(&self, other: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        if self.shape() != other.shape() {
            return Err(shape_err(
                "sub",
                format!("shape {:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        let data: Vec<E> = self.data().iter().zip(other.data()).map(|(&a, &b)| a - b).collect();
        let vjp: VjpFn<E> =
            Box::new(move |g| vec![g.to_vec(), g.iter().map(|&v| -v).collect()]);
        Ok(Tensor::from_op(self.shape().to_vec(), Rc::new(data), &[self, other], vjp))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, other: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        if self.shape() != other.shape() {
            return Err(shape_err(
                "mul",
                format!("shape {:?} vs {:?}", self.shape(), other.shape()),
            ));
        }
        let data: Vec<E> = self.data().iter().zip(other.data()).map(|(&a, &b)| a * b).collect();
        let a = self.data_rc();
        let b = other.data_rc();
        let vjp: VjpFn<E> = Box::new(move |g| {
            vec![
                g.iter().zip(b.iter()).map(|(&gv, &bv)| gv * bv).collect(),
                g.iter().zip(a.iter()).map(|(&gv, &av)| gv * av).collect(),
            ]
        });
        Ok(Tensor::from_op(self.shape().to_vec(), Rc::new(data), &[self, other], vjp))
    }

    /// Multiply by a compile-time constant.
    pub fn scale(&self, c: f64) -> Tensor<E> {
        let ce = E::from_f64(c);
        let data: Vec<E> = self.data().iter().map(|&v| v * ce).collect();
        let vjp: VjpFn<E> = Box::new(move |g| vec![g.iter().map(|&v| v * ce).collect()]);
        Tensor::from_op(self.shape().to_vec(), Rc::new(data), &[self], vjp)
    }

    pub fn neg(&self) -> Tensor<E> {
        self.scale(-1.0)
    }

    /// Multiply every element by a tracked scalar (shape `[1]`) tensor.
    pub fn scale_by(&self, s: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        if s.numel() != 1 {
            return Err(shape_err("scale_by", format!("scalar expected, got {:?}", s.shape())));
        }
        let sv = s.data()[0];
        let data: Vec<E> = self.data().iter().map(|&v| v * sv).collect();
        let x = self.data_rc();
        let vjp: VjpFn<E> = Box::new(move |g| {
            let dx: Vec<E> = g.iter().map(|&v| v * sv).collect();
            let mut ds = E::ZERO;
            for (&gv, &xv) in g.iter().zip(x.iter()) {
                ds += gv * xv;
            }
            vec![dx, vec![ds]]
        });
        Ok(Tensor::from_op(self.shape().to_vec(), Rc::new(data), &[self, s], vjp))
    }

    /// Broadcast-add a bias row `[c]` to every row of `[r, c]`.
    pub fn add_bias(&self, bias: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        let (r, c) = dims2(self, "add_bias")?;
        if bias.shape() != [c] {
            return Err(shape_err(
                "add_bias",
                format!("bias {:?} does not match row width {c}", bias.shape()),
            ));
        }
        let mut data = self.data().to_vec();
        for row in data.chunks_exact_mut(c) {
            for (d, &b) in row.iter_mut().zip(bias.data()) {
                *d += b;
            }
        }
        let vjp: VjpFn<E> = Box::new(move |g| {
            let mut db = vec![E::ZERO; c];
            for row in g.chunks_exact(c) {
                for (d, &gv) in db.iter_mut().zip(row) {
                    *d += gv;
                }
            }
            vec![g.to_vec(), db]
        });
        let _ = r;
        Ok(Tensor::from_op(self.shape().to_vec(), Rc::new(data), &[self, bias], vjp))
    }

    pub fn matmul(&self, other: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
        let (m, k) = dims2(self, "matmul")?;
        let (k2, n) = dims2(other, "matmul")?;
        if k != k2 {
            return Err(shape_err(
                "matmul",
                format!("inner extents disagree: [{m}x{k}] * [{k2}x{n}]"),
            ));
        }
        let data = mm_nn(self.data(), other.data(), m, k, n);
        let a = self.data_rc();
        let b = other.data_rc();
        let vjp: VjpFn<E> = Box::new(move |g| {
            let da = mm_nt(g, &b, m, n, k); // dL/dA = G * B^T
            let db = mm_tn(&a, g, m, k, n); // dL/dB = A^T * G
            vec![da, db]
        });
        Ok(Tensor::from_op(vec![m, n], Rc::new(data), &[self, other], vjp))
    }

    pub fn transpose(&self) -> Result<Tensor<E>, TensorError> {
        let (r, c) = dims2(self, "transpose")?;
        let x = self.data();
        let mut data = vec![E::ZERO; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = x[i * c + j];
            }
        }
        let vjp: VjpFn<E> = Box::new(move |g| {
            let mut dx = vec![E::ZERO; r * c];
            for j in 0..c {
                for i in 0..r {
                    dx[i * c + j] = g[j * r + i];
                }
            }
            vec![dx]
        });
        Ok(Tensor::from_op(vec![c, r], Rc::new(data), &[self], vjp))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<E>, TensorError> {
        let numel: usize = shape.iter().product();
        if numel != self.numel() {
            return Err(shape_err(
                "reshape",
                format!("cannot view {:?} as {:?}", self.shape(), shape),
            ));
        }
        let vjp: VjpFn<E> = Box::new(move |g| vec![g.to_vec()]);
        Ok(Tensor::from_op(shape.to_vec(), self.data_rc(), &[self], vjp))
    }

    /// Rows `indices[j]` of a `[r, c]` tensor, in order. Repeats allowed;
    /// their gradients accumulate.
    pub fn gather_rows(&self, indices: &[usize]) -> Result<Tensor<E>, TensorError> {
        let (r, c) = dims2(self, "gather_rows")?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(shape_err("gather_rows", format!("row {bad} out of range 0..{r}")));
        }
        let x = self.data();
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(&x[i * c..(i + 1) * c]);
        }
        let idx = indices.to_vec();
        let vjp: VjpFn<E> = Box::new(move |g| {
            let mut dx = vec![E::ZERO; r * c];
            for (j, &i) in idx.iter().enumerate() {
                let src = &g[j * c..(j + 1) * c];
                let dst = &mut dx[i * c..(i + 1) * c];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
            vec![dx]
        });
        Ok(Tensor::from_op(vec![indices.len(), c], Rc::new(data), &[self], vjp))
    }

    /// Single row of a `[r, c]` tensor as a `[c]` vector.
    pub fn row(&self, index: usize) -> Result<Tensor<E>, TensorError> {
        let (_, c) = dims2(self, "row")?;
        self.gather_rows(&[index])?.reshape(&[c])
    }

    /// Columns `start..start+len` of a `[r, c]` tensor.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Tensor<E>, TensorError> {
        let (r, c) = dims2(self, "slice_cols")?;
        if start + len > c {
            return Err(shape_err(
                "slice_cols",
                format!("columns {start}..{} out of range 0..{c}", start + len),
            ));
        }
        let x = self.data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&x[i * c + start..i * c + start + len]);
        }
        let vjp: VjpFn<E> = Box::new(move |g| {
            let mut dx = vec![E::ZERO; r * c];
            for i in 0..r {
                dx[i * c + start..i * c + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
            }
            vec![dx]
        });
        Ok(Tensor::from_op(vec![r, len], Rc::new(data), &[self], vjp))
    }

    // ── reductions ──────────────────────────────────────────────────

    pub fn sum_all(&self) -> Tensor<E> {
        let mut acc = E::ZERO;
        for &v in self.data() {
            acc += v;
        }
        let n = self.numel();
        let vjp: VjpFn<E> = Box::new(move |g| vec![vec![g[0]; n]]);
        Tensor::from_op(vec![1], Rc::new(vec![acc]), &[self], vjp)
    }

    pub fn mean_all(&self) -> Tensor<E> {
        assert!(self.numel() > 0, "mean_all of an empty tensor");
        self.sum_all().scale(1.0 / self.numel() as f64)
    }

    /// Sum a `[r, c]` tensor over `axis` (0 -> `[c]`, 1 -> `[r]`).
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor<E>, TensorError> {
        let (r, c) = dims2(self, "sum_axis")?;
        let x = self.data();
        match axis {
            0 => {
                let mut data = vec![E::ZERO; c];
                for row in x.chunks_exact(c) {
                    for (d, &v) in data.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                let vjp: VjpFn<E> = Box::new(move |g| {
                    let mut dx = Vec::with_capacity(r * c);
                    for _ in 0..r {
                        dx.extend_from_slice(g);
                    }
                    vec![dx]
                });
                Ok(Tensor::from_op(vec![c], Rc::new(data), &[self], vjp))
            }
            1 => {
                let mut data = vec![E::ZERO; r];
                for (d, row) in data.iter_mut().zip(x.chunks_exact(c)) {
                    for &v in row {
                        *d += v;
                    }
                }
                let vjp: VjpFn<E> = Box::new(move |g| {
                    let mut dx = vec![E::ZERO; r * c];
                    for (i, &gv) in g.iter().enumerate() {
                        for d in &mut dx[i * c..(i + 1) * c] {
                            *d = gv;
                        }
                    }
                    vec![dx]
                });
                Ok(Tensor::from_op(vec![r], Rc::new(data), &[self], vjp))
            }
            _ => Err(shape_err("sum_axis", format!("axis {axis} invalid for a 2-d tensor"))),
        }
    }

    /// Euclidean norm over the last axis: `[.., c] -> [.., 1]`.
    pub fn l2_norm(&self) -> Result<Tensor<E>, TensorError> {
        let shape = self.shape();
        let c = *shape.last().ok_or(TensorError::EmptyAxis)?;
        if c == 0 {
            return Err(TensorError::EmptyAxis);
        }
        let rows = self.numel() / c;
        let x = self.data();
        let mut data = Vec::with_capacity(rows);
        for row in x.chunks_exact(c) {
            let mut acc = E::ZERO;
            for &v in row {
                acc += v * v;
            }
            data.push(acc.sqrt());
        }
        let mut out_shape = shape.to_vec();
        *out_shape.last_mut().unwrap() = 1;
        let xs = self.data_rc();
        let norms = data.clone();
        let vjp: VjpFn<E> = Box::new(move |g| {
            let mut dx = vec![E::ZERO; xs.len()];
            for (i, (row, d_row)) in xs.chunks_exact(c).zip(dx.chunks_exact_mut(c)).enumerate() {
                let n = norms[i];
                if n > E::ZERO {
                    let f = g[i] / n;
                    for (d, &v) in d_row.iter_mut().zip(row) {
                        *d = f * v; // subgradient 0 at the origin
                    }
                }
            }
            vec![dx]
        });
        Ok(Tensor::from_op(out_shape, Rc::new(data), &[self], vjp))
    }

    // ── elementwise nonlinearities ──────────────────────────────────

    pub fn exp(&self) -> Tensor<E> {
        let data: Vec<E> = self.data().iter().map(|&v| v.exp()).collect();
        let out = Rc::new(data);
        let y = Rc::clone(&out);
        let vjp: VjpFn<E> =
            Box::new(move |g| vec![g.iter().zip(y.iter()).map(|(&gv, &yv)| gv * yv).collect()]);
        Tensor::from_op(self.shape().to_vec(), out, &[self], vjp)
    }

    pub fn sqrt(&self) -> Tensor<E> {
        let data: Vec<E> = self.data().iter().map(|&v| v.sqrt()).collect();
        let out = Rc::new(data);
        let y = Rc::clone(&out);
        let half = E::from_f64(0.5);
        let vjp: VjpFn<E> = Box::new(move |g| {
            vec![g.iter().zip(y.iter()).map(|(&gv, &yv)| gv * half / yv).collect()]
        });
        Tensor::from_op(self.shape().to_vec(), out, &[self], vjp)
    }

    pub fn recip(&self) -> Tensor<E> {
        let data: Vec<E> = self.data().iter().map(|&v| E::ONE / v).collect();
        let out = Rc::new(data);
        let y = Rc::clone(&out);
        let vjp: VjpFn<E> = Box::new(move |g| {
            vec![g.iter().zip(y.iter()).map(|(&gv, &yv)| -gv * yv * yv).collect()]
        });
        Tensor::from_op(self.shape().to_vec(), out, &[self], vjp)
    }

    /// Exact GELU: `x * Phi(x)` with `Phi` the standard normal CDF.
    pub fn gelu(&self) -> Tensor<E> {
        let data: Vec<E> = self.data().iter().map(|&v| v * normal_cdf(v)).collect();
        let x = self.data_rc();
        let vjp: VjpFn<E> = Box::new(move |g| {
            vec![g
                .iter()
                .zip(x.iter())
                .map(|(&gv, &xv)| gv * (normal_cdf(xv) + xv * normal_pdf(xv)))
                .collect()]
        });
        Tensor::from_op(self.shape().to_vec(), Rc::new(data), &[self], vjp)
    }

    // ── normalization ───────────────────────────────────────────────

    pub fn softmax(&self, axis: usize) -> Result<Tensor<E>, TensorError> {
        let (outer, len, inner) = axis_split(self.shape(), axis, "softmax")?;
        if len == 0 {
            return Err(TensorError::EmptyAxis);
        }
        let x = self.data();
        let mut data = vec![E::ZERO; x.len()];
        for_each_lane(outer, len, inner, |base, stride| {
            let mut m = x[base];
            for a in 1..len {
                m = m.maximum(x[base + a * stride]);
            }
            let mut s = E::ZERO;
            for a in 0..len {
                let e = (x[base + a * stride] - m).exp();
                data[base + a * stride] = e;
                s += e;
            }
            for a in 0..len {
                data[base + a * stride] = data[base + a * stride] / s;
            }
        });
        let out = Rc::new(data);
        let y = Rc::clone(&out);
        let vjp: VjpFn<E> = Box::new(move |g| {
            let mut dx = vec![E::ZERO; y.len()];
            for_each_lane(outer, len, inner, |base, stride| {
                let mut dot = E::ZERO;
                for a in 0..len {
                    dot += g[base + a * stride] * y[base + a * stride];
                }
                for a in 0..len {
                    let i = base + a * stride;
                    dx[i] = y[i] * (g[i] - dot);
                }
            });
            vec![dx]
        });
        Ok(Tensor::from_op(self.shape().to_vec(), out, &[self], vjp))
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Tensor<E>, TensorError> {
        let (outer, len, inner) = axis_split(self.shape(), axis, "log_softmax")?;
        if len == 0 {
            return Err(TensorError::EmptyAxis);
        }
        let x = self.data();
        let mut data = vec![E::ZERO; x.len()];
        for_each_lane(outer, len, inner, |base, stride| {
            let mut m = x[base];
            for a in 1..len {
                m = m.maximum(x[base + a * stride]);
            }
            let mut s = E::ZERO;
            for a in 0..len {
                s += (x[base + a * stride] - m).exp();
            }
            let lse = m + s.ln();
            for a in 0..len {
                data[base + a * stride] = x[base + a * stride] - lse;
            }
        });
        let out = Rc::new(data);
        let y = Rc::clone(&out);
        let vjp: VjpFn<E> = Box::new(move |g| {
            let mut dx = vec![E::ZERO; y.len()];
            for_each_lane(outer, len, inner, |base, stride| {
                let mut gsum = E::ZERO;
                for a in 0..len {
                    gsum += g[base + a * stride];
                }
                for a in 0..len {
                    let i = base + a * stride;
                    dx[i] = g[i] - y[i].exp() * gsum;
                }
            });
            vec![dx]
        });
        Ok(Tensor::from_op(self.shape().to_vec(), out, &[self], vjp))
    }

    /// Per-row normalization over the last axis with biased variance, then
    /// an affine map by `gamma`/`beta`.
    pub fn layer_norm(
        &self,
        gamma: &Tensor<E>,
        beta: &Tensor<E>,
        eps: f64,
    ) -> Result<Tensor<E>, TensorError> {
        let c = *self.shape().last().ok_or(TensorError::EmptyAxis)?;
        if c == 0 {
            return Err(TensorError::EmptyAxis);
        }
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "gamma {:?} / beta {:?} do not match last axis {c}",
                    gamma.shape(),
                    beta.shape()
                ),
            ));
        }
        let rows = self.numel() / c;
        let x = self.data();
        let gm = gamma.data();
        let bt = beta.data();
        let inv_c = E::from_f64(1.0 / c as f64);
        let eps_e = E::from_f64(eps);
        let mut data = vec![E::ZERO; x.len()];
        let mut x_hat = vec![E::ZERO; x.len()];
        let mut inv_std = vec![E::ZERO; rows];
        for (i, row) in x.chunks_exact(c).enumerate() {
            let mut mean = E::ZERO;
            for &v in row {
                mean += v;
            }
            mean *= inv_c;
            let mut var = E::ZERO;
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var *= inv_c;
            let istd = E::ONE / (var + eps_e).sqrt();
            inv_std[i] = istd;
            for (j, &v) in row.iter().enumerate() {
                let xh = (v - mean) * istd;
                x_hat[i * c + j] = xh;
                data[i * c + j] = gm[j] * xh + bt[j];
            }
        }
        let gm_rc = gamma.data_rc();
        let x_hat = Rc::new(x_hat);
        let vjp: VjpFn<E> = Box::new(move |g| {
            let mut dx = vec![E::ZERO; rows * c];
            let mut dgamma = vec![E::ZERO; c];
            let mut dbeta = vec![E::ZERO; c];
            for i in 0..rows {
                let g_row = &g[i * c..(i + 1) * c];
                let xh_row = &x_hat[i * c..(i + 1) * c];
                let mut mean_gg = E::ZERO; // mean of gamma*g
                let mut mean_ggx = E::ZERO; // mean of gamma*g*x_hat
                for j in 0..c {
                    let gg = gm_rc[j] * g_row[j];
                    mean_gg += gg;
                    mean_ggx += gg * xh_row[j];
                    dgamma[j] += g_row[j] * xh_row[j];
                    dbeta[j] += g_row[j];
                }
                mean_gg *= inv_c;
                mean_ggx *= inv_c;
                let istd = inv_std[i];
                let d_row = &mut dx[i * c..(i + 1) * c];
                for j in 0..c {
                    let gg = gm_rc[j] * g_row[j];
                    d_row[j] = (gg - mean_gg - xh_row[j] * mean_ggx) * istd;
                }
            }
            vec![dx, dgamma, dbeta]
        });
        Ok(Tensor::from_op(self.shape().to_vec(), Rc::new(data), &[self, gamma, beta], vjp))
    }

    // ── dropout ─────────────────────────────────────────────────────

    /// Inverted dropout: zero with probability `p` and scale survivors by
    /// `1/(1-p)` in training mode; identity in eval mode.
    pub fn dropout(
        &self,
        p: f64,
        rng: &mut RngState,
        training: bool,
    ) -> Result<Tensor<E>, TensorError> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::DropoutProbability(p));
        }
        if !training || p == 0.0 {
            return Ok(self.clone());
        }
        let keep_scale = E::from_f64(1.0 / (1.0 - p));
        let factors: Vec<E> = (0..self.numel())
            .map(|_| if rng.uniform() < p { E::ZERO } else { keep_scale })
            .collect();
        let data: Vec<E> =
            self.data().iter().zip(&factors).map(|(&v, &f)| v * f).collect();
        let vjp: VjpFn<E> = Box::new(move |g| {
            vec![g.iter().zip(&factors).map(|(&gv, &f)| gv * f).collect()]
        });
        Ok(Tensor::from_op(self.shape().to_vec(), Rc::new(data), &[self], vjp))
    }

    // ── spatial ops (height x width x channels layout) ──────────────

    /// 2-d convolution over an `[h, w, c_in]` map with kernel
    /// `[kh, kw, c_in, c_out]`, square stride and zero padding.
    pub fn conv2d(
        &self,
        kernel: &Tensor<E>,
        bias: Option<&Tensor<E>>,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor<E>, TensorError> {
        let (h, w, c_in) = match self.shape() {
            [h, w, c] => (*h, *w, *c),
            s => return Err(shape_err("conv2d", format!("input must be [h,w,c], got {s:?}"))),
        };
        let (kh, kw, kc_in, c_out) = match kernel.shape() {
            [a, b, c, d] => (*a, *b, *c, *d),
            s => {
                return Err(shape_err(
                    "conv2d",
                    format!("kernel must be [kh,kw,c_in,c_out], got {s:?}"),
                ))
            }
        };
        if kc_in != c_in {
            return Err(shape_err(
                "conv2d",
                format!("kernel expects {kc_in} input channels, map has {c_in}"),
            ));
        }
        if stride == 0 {
            return Err(shape_err("conv2d", "stride must be >= 1".into()));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(shape_err(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * pad, w + 2 * pad),
            ));
        }
        if let Some(b) = bias {
            if b.shape() != [c_out] {
                return Err(shape_err(
                    "conv2d",
                    format!("bias {:?} does not match {c_out} output channels", b.shape()),
                ));
            }
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        let x = self.data();
        let k = kernel.data();
        let mut data = vec![E::ZERO; ho * wo * c_out];
        for oy in 0..ho {
            for ox in 0..wo {
                let o_base = (oy * wo + ox) * c_out;
                for ky in 0..kh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..kw {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let x_base = (iy as usize * w + ix as usize) * c_in;
                        let k_base = (ky * kw + kx) * c_in * c_out;
                        for ci in 0..c_in {
                            let xv = x[x_base + ci];
                            let k_row = &k[k_base + ci * c_out..k_base + (ci + 1) * c_out];
                            let o_row = &mut data[o_base..o_base + c_out];
                            for (o, &kv) in o_row.iter_mut().zip(k_row) {
                                *o += xv * kv;
                            }
                        }
                    }
                }
                if let Some(b) = bias {
                    let o_row = &mut data[o_base..o_base + c_out];
                    for (o, &bv) in o_row.iter_mut().zip(b.data()) {
                        *o += bv;
                    }
                }
            }
        }
        let xs = self.data_rc();
        let ks = kernel.data_rc();
        let has_bias = bias.is_some();
        let vjp: VjpFn<E> = Box::new(move |g| {
            let mut dx = vec![E::ZERO; h * w * c_in];
            let mut dk = vec![E::ZERO; kh * kw * c_in * c_out];
            let mut db = vec![E::ZERO; c_out];
            for oy in 0..ho {
                for ox in 0..wo {
                    let g_row = &g[(oy * wo + ox) * c_out..(oy * wo + ox + 1) * c_out];
                    for (d, &gv) in db.iter_mut().zip(g_row) {
                        *d += gv;
                    }
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let x_base = (iy as usize * w + ix as usize) * c_in;
                            let k_base = (ky * kw + kx) * c_in * c_out;
                            for ci in 0..c_in {
                                let xv = xs[x_base + ci];
                                let k_row = &ks[k_base + ci * c_out..k_base + (ci + 1) * c_out];
                                let dk_row =
                                    &mut dk[k_base + ci * c_out..k_base + (ci + 1) * c_out];
                                let mut acc = E::ZERO;
                                for ((&gv, &kv), dkv) in
                                    g_row.iter().zip(k_row).zip(dk_row.iter_mut())
                                {
                                    acc += gv * kv;
                                    *dkv += gv * xv;
                                }
                                dx[x_base + ci] += acc;
                            }
                        }
                    }
                }
            }
            if has_bias {
                vec![dx, dk, db]
            } else {
                vec![dx, dk]
            }
        });
        let parents: Vec<&Tensor<E>> = match bias {
            Some(b) => vec![self, kernel, b],
            None => vec![self, kernel],
        };
        Ok(Tensor::from_op(vec![ho, wo, c_out], Rc::new(data), &parents, vjp))
    }

    /// Max pooling over square windows of an `[h, w, c]` map. Ties resolve
    /// to the first element in scan order.
    pub fn max_pool2d(&self, window: usize, stride: usize) -> Result<Tensor<E>, TensorError> {
        let (h, w, c) = match self.shape() {
            [h, w, ch] => (*h, *w, *ch),
            s => return Err(shape_err("max_pool2d", format!("input must be [h,w,c], got {s:?}"))),
        };
        if window == 0 || stride == 0 {
            return Err(shape_err("max_pool2d", "window and stride must be >= 1".into()));
        }
        if h < window || w < window {
            return Err(shape_err(
                "max_pool2d",
                format!("window {window} larger than input {h}x{w}"),
            ));
        }
        let ho = (h - window) / stride + 1;
        let wo = (w - window) / stride + 1;
        let x = self.data();
        let mut data = vec![E::ZERO; ho * wo * c];
        let mut argmax = vec![0usize; ho * wo * c];
        for oy in 0..ho {
            for ox in 0..wo {
                for ch in 0..c {
                    let mut best_idx = (oy * stride * w + ox * stride) * c + ch;
                    let mut best = x[best_idx];
                    for ky in 0..window {
                        for kx in 0..window {
                            let idx = ((oy * stride + ky) * w + ox * stride + kx) * c + ch;
                            if x[idx] > best {
                                best = x[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = (oy * wo + ox) * c + ch;
                    data[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        let in_len = x.len();
        let vjp: VjpFn<E> = Box::new(move |g| {
            let mut dx = vec![E::ZERO; in_len];
            for (o, &i) in argmax.iter().enumerate() {
                dx[i] += g[o];
            }
            vec![dx]
        });
        Ok(Tensor::from_op(vec![ho, wo, c], Rc::new(data), &[self], vjp))
    }
}

/// Concatenate tensors of equal rank along `axis`; all other extents must
/// agree.
pub fn concat<E: Element>(parts: &[&Tensor<E>], axis: usize) -> Result<Tensor<E>, TensorError> {
    let first = parts.first().ok_or_else(|| shape_err("concat", "no inputs".into()))?;
    let rank = first.shape().len();
    if axis >= rank {
        return Err(shape_err("concat", format!("axis {axis} out of range for rank {rank}")));
    }
    let mut axis_total = 0;
    for p in parts {
        if p.shape().len() != rank {
            return Err(shape_err(
                "concat",
                format!("rank mismatch: {:?} vs {:?}", first.shape(), p.shape()),
            ));
        }
        for (d, (a, b)) in first.shape().iter().zip(p.shape()).enumerate() {
            if d != axis && a != b {
                return Err(shape_err(
                    "concat",
                    format!("extent mismatch at axis {d}: {:?} vs {:?}", first.shape(), p.shape()),
                ));
            }
        }
        axis_total += p.shape()[axis];
    }
    let mut out_shape = first.shape().to_vec();
    out_shape[axis] = axis_total;
    let outer: usize = out_shape[..axis].iter().product();
    let inner: usize = out_shape[axis + 1..].iter().product();
    let block_sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis] * inner).collect();
    let out_block: usize = axis_total * inner;

    let mut data = vec![E::ZERO; outer * out_block];
    for o in 0..outer {
        let mut offset = 0;
        for (p, &bs) in parts.iter().zip(&block_sizes) {
            let src = &p.data()[o * bs..(o + 1) * bs];
            data[o * out_block + offset..o * out_block + offset + bs].copy_from_slice(src);
            offset += bs;
        }
    }
    let blocks = block_sizes.clone();
    let vjp: VjpFn<E> = Box::new(move |g| {
        let mut grads: Vec<Vec<E>> = blocks.iter().map(|&bs| vec![E::ZERO; outer * bs]).collect();
        for o in 0..outer {
            let mut offset = 0;
            for (dst, &bs) in grads.iter_mut().zip(&blocks) {
                dst[o * bs..(o + 1) * bs]
                    .copy_from_slice(&g[o * out_block + offset..o * out_block + offset + bs]);
                offset += bs;
            }
        }
        grads
    });
    Ok(Tensor::from_op(out_shape, Rc::new(data), parts, vjp))
}

fn for_each_lane<F>(outer: usize, len: usize, inner: usize, mut f: F)
where
    F: FnMut(usize, usize),
{
    for o in 0..outer {
        for i in 0..inner {
            f(o * len * inner + i, inner);
        }
    }
}

fn normal_cdf<E: Element>(x: E) -> E {
    let half = E::from_f64(0.5);
    let inv_sqrt2 = E::from_f64(std::f64::consts::FRAC_1_SQRT_2);
    half * (E::ONE + (x * inv_sqrt2).erf())
}

fn normal_pdf<E: Element>(x: E) -> E {
    let inv_sqrt_tau = E::from_f64(1.0 / (std::f64::consts::TAU).sqrt());
    inv_sqrt_tau * (-(x * x) * E::from_f64(0.5)).exp()
}
