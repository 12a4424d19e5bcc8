//! Differentiable operations.
//!
//! Each op validates shapes, computes the forward value eagerly, and attaches
//! a closure that adds its gradient contribution into the parents. Closures
//! capture parent handles (and, for cheap reuse, the forward output of the
//! saturating nonlinearities), never the node they belong to, so the graph
//! stays acyclic.

use super::{elem, Element, Tensor, TensorError};

// ---------------------------------------------------------------------------
// Dense kernels. Written as contiguous row-slice loops so LLVM vectorizes
// them; the dot kernel keeps eight independent accumulators for the same
// reason. These four loops are where training time goes.
// ---------------------------------------------------------------------------

fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    let n = a.len().min(b.len());
    let mut acc = [T::zero(); 8];
    let mut i = 0;
    while i + 8 <= n {
        for u in 0..8 {
            acc[u] = acc[u] + a[i + u] * b[i + u];
        }
        i += 8;
    }
    let mut s = ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7]));
    while i < n {
        s = s + a[i] * b[i];
        i += 1;
    }
    s
}

fn axpy<T: Element>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

/// C[m×n] += A[m×k] · B[k×n]
fn gemm_nn<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let crow = &mut c[i * n..(i + 1) * n];
        for (l, &ail) in arow.iter().enumerate() {
            axpy(ail, &b[l * n..(l + 1) * n], crow);
        }
    }
}

/// C[m×k] += A[m×n] · B[k×n]ᵀ
fn gemm_nt<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let crow = &mut c[i * k..(i + 1) * k];
        for (l, cl) in crow.iter_mut().enumerate() {
            *cl = *cl + dot(arow, &b[l * n..(l + 1) * n]);
        }
    }
}

/// C[k×n] += A[m×k]ᵀ · B[m×n]
fn gemm_tn<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (l, &ail) in arow.iter().enumerate() {
            axpy(ail, brow, &mut c[l * n..(l + 1) * n]);
        }
    }
}

fn stable_sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// ln(1 + eˣ) without overflow for large |x|.
fn softplus<T: Element>(x: T) -> T {
    x.max(T::zero()) + (-(x.abs())).exp().ln_1p()
}

fn dims2<T: Element>(t: &Tensor<T>, op: &'static str) -> Result<(usize, usize), TensorError> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(TensorError::Invalid {
            op,
            msg: format!("expected a 2-d tensor, got shape {other:?}"),
        }),
    }
}

fn shape_mismatch<T: Element>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl<T: Element> Tensor<T> {
    /// Matrix product of two 2-d tensors.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let (m, k) = dims2(self, "matmul")?;
        let (k2, n) = dims2(rhs, "matmul")?;
        if k != k2 {
            return Err(shape_mismatch("matmul", self, rhs));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn(&self.value(), &rhs.value(), &mut out, m, k, n);
        let a = self.clone();
        let b = rhs.clone();
        Ok(Tensor::from_op(
            out,
            vec![m, n],
            vec![self.clone(), rhs.clone()],
            Box::new(move |up| {
                if a.requires_grad() {
                    let bv = b.value();
                    let mut ga = a.grad_mut();
                    gemm_nt(up, &bv, &mut ga, m, n, k);
                }
                if b.requires_grad() {
                    let av = a.value();
                    let mut gb = b.grad_mut();
                    gemm_tn(&av, up, &mut gb, m, k, n);
                }
            }),
        ))
    }

    /// Elementwise sum; shapes must match exactly.
    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        if self.shape() != rhs.shape() {
            return Err(shape_mismatch("add", self, rhs));
        }
        let out: Vec<T> = {
            let (av, bv) = (self.value(), rhs.value());
            av.iter().zip(bv.iter()).map(|(&x, &y)| x + y).collect()
        };
        let a = self.clone();
        let b = rhs.clone();
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), rhs.clone()],
            Box::new(move |up| {
                if a.requires_grad() {
                    axpy(T::one(), up, &mut a.grad_mut());
                }
                if b.requires_grad() {
                    axpy(T::one(), up, &mut b.grad_mut());
                }
            }),
        ))
    }

    /// Add a 1-d bias of length `q` to every row of a `p×q` tensor.
    pub fn add_bias(&self, bias: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let (p, q) = dims2(self, "add_bias")?;
        if bias.shape() != [q] {
            return Err(shape_mismatch("add_bias", self, bias));
        }
        let out: Vec<T> = {
            let (xv, bv) = (self.value(), bias.value());
            xv.chunks_exact(q)
                .flat_map(|row| row.iter().zip(bv.iter()).map(|(&x, &b)| x + b))
                .collect()
        };
        let x = self.clone();
        let b = bias.clone();
        Ok(Tensor::from_op(
            out,
            vec![p, q],
            vec![self.clone(), bias.clone()],
            Box::new(move |up| {
                if x.requires_grad() {
                    axpy(T::one(), up, &mut x.grad_mut());
                }
                if b.requires_grad() {
                    let mut gb = b.grad_mut();
                    for row in up.chunks_exact(q) {
                        axpy(T::one(), row, &mut gb);
                    }
                }
            }),
        ))
    }

    /// Elementwise (Hadamard) product; shapes must match exactly.
    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        if self.shape() != rhs.shape() {
            return Err(shape_mismatch("mul", self, rhs));
        }
        let out: Vec<T> = {
            let (av, bv) = (self.value(), rhs.value());
            av.iter().zip(bv.iter()).map(|(&x, &y)| x * y).collect()
        };
        let a = self.clone();
        let b = rhs.clone();
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone(), rhs.clone()],
            Box::new(move |up| {
                if a.requires_grad() {
                    let bv = b.value();
                    let mut ga = a.grad_mut();
                    for ((g, &u), &y) in ga.iter_mut().zip(up).zip(bv.iter()) {
                        *g = *g + u * y;
                    }
                }
                if b.requires_grad() {
                    let av = a.value();
                    let mut gb = b.grad_mut();
                    for ((g, &u), &x) in gb.iter_mut().zip(up).zip(av.iter()) {
                        *g = *g + u * x;
                    }
                }
            }),
        ))
    }

    /// Multiply row `i` of a `p×q` tensor by scale `s[i]`.
    pub fn scale_rows(&self, scales: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let (p, q) = dims2(self, "scale_rows")?;
        if scales.shape() != [p] {
            return Err(shape_mismatch("scale_rows", self, scales));
        }
        let out: Vec<T> = {
            let (xv, sv) = (self.value(), scales.value());
            xv.chunks_exact(q)
                .zip(sv.iter())
                .flat_map(|(row, &s)| row.iter().map(move |&x| x * s))
                .collect()
        };
        let x = self.clone();
        let s = scales.clone();
        Ok(Tensor::from_op(
            out,
            vec![p, q],
            vec![self.clone(), scales.clone()],
            Box::new(move |up| {
                if x.requires_grad() {
                    let sv = s.value();
                    let mut gx = x.grad_mut();
                    for ((grow, urow), &si) in
                        gx.chunks_exact_mut(q).zip(up.chunks_exact(q)).zip(sv.iter())
                    {
                        axpy(si, urow, grow);
                    }
                }
                if s.requires_grad() {
                    let xv = x.value();
                    let mut gs = s.grad_mut();
                    for ((gi, urow), xrow) in
                        gs.iter_mut().zip(up.chunks_exact(q)).zip(xv.chunks_exact(q))
                    {
                        *gi = *gi + dot(urow, xrow);
                    }
                }
            }),
        ))
    }

    /// Rowwise blend: `out[i] = m[i]·a[i] + (1−m[i])·b[i]`.
    ///
    /// With a 0/1 mask this writes "keep the new state where the sequence is
    /// still live, carry the old state elsewhere" as one node, which is how
    /// PAD steps are skipped inside the recurrent loops.
    pub fn blend_rows(&self, other: &Tensor<T>, mask: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
        let (p, q) = dims2(self, "blend_rows")?;
        if other.shape() != self.shape() {
            return Err(shape_mismatch("blend_rows", self, other));
        }
        if mask.shape() != [p] {
            return Err(shape_mismatch("blend_rows", self, mask));
        }
        let out: Vec<T> = {
            let (av, bv, mv) = (self.value(), other.value(), mask.value());
            av.chunks_exact(q)
                .zip(bv.chunks_exact(q))
                .zip(mv.iter())
                .flat_map(|((ar, br), &m)| {
                    ar.iter()
                        .zip(br.iter())
                        .map(move |(&x, &y)| m * x + (T::one() - m) * y)
                })
                .collect()
        };
        let a = self.clone();
        let b = other.clone();
        let mk = mask.clone();
        Ok(Tensor::from_op(
            out,
            vec![p, q],
            vec![self.clone(), other.clone(), mask.clone()],
            Box::new(move |up| {
                let mv = mk.value();
                if a.requires_grad() {
                    let mut ga = a.grad_mut();
                    for ((grow, urow), &m) in
                        ga.chunks_exact_mut(q).zip(up.chunks_exact(q)).zip(mv.iter())
                    {
                        axpy(m, urow, grow);
                    }
                }
                if b.requires_grad() {
                    let mut gb = b.grad_mut();
                    for ((grow, urow), &m) in
                        gb.chunks_exact_mut(q).zip(up.chunks_exact(q)).zip(mv.iter())
                    {
                        axpy(T::one() - m, urow, grow);
                    }
                }
                if mk.requires_grad() {
                    let (av, bv) = (a.value(), b.value());
                    let mut gm = mk.grad_mut();
                    for (((gi, urow), ar), br) in gm
                        .iter_mut()
                        .zip(up.chunks_exact(q))
                        .zip(av.chunks_exact(q))
                        .zip(bv.chunks_exact(q))
                    {
                        let mut s = T::zero();
                        for ((&u, &x), &y) in urow.iter().zip(ar).zip(br) {
                            s = s + u * (x - y);
                        }
                        *gi = *gi + s;
                    }
                }
            }),
        ))
    }

    /// Multiply every element by a constant.
    pub fn scale_const(&self, c: T) -> Tensor<T> {
        let out: Vec<T> = self.value().iter().map(|&x| x * c).collect();
        let x = self.clone();
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |up| {
                if x.requires_grad() {
                    axpy(c, up, &mut x.grad_mut());
                }
            }),
        )
    }

    pub fn sigmoid(&self) -> Tensor<T> {
        let out: Vec<T> = self.value().iter().map(|&x| stable_sigmoid(x)).collect();
        let y = out.clone();
        let x = self.clone();
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |up| {
                if x.requires_grad() {
                    let mut gx = x.grad_mut();
                    for ((g, &u), &yi) in gx.iter_mut().zip(up).zip(y.iter()) {
                        *g = *g + u * yi * (T::one() - yi);
                    }
                }
            }),
        )
    }

    pub fn tanh(&self) -> Tensor<T> {
        let out: Vec<T> = self.value().iter().map(|&x| x.tanh()).collect();
        let y = out.clone();
        let x = self.clone();
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |up| {
                if x.requires_grad() {
                    let mut gx = x.grad_mut();
                    for ((g, &u), &yi) in gx.iter_mut().zip(up).zip(y.iter()) {
                        *g = *g + u * (T::one() - yi * yi);
                    }
                }
            }),
        )
    }

    pub fn relu(&self) -> Tensor<T> {
        self.leaky_relu(T::zero())
    }

    /// `x` for `x > 0`, `slope·x` otherwise.
    pub fn leaky_relu(&self, slope: T) -> Tensor<T> {
        let out: Vec<T> = self
            .value()
            .iter()
            .map(|&x| if x > T::zero() { x } else { slope * x })
            .collect();
        let x = self.clone();
        Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(move |up| {
                if x.requires_grad() {
                    let xv = x.value();
                    let mut gx = x.grad_mut();
                    for ((g, &u), &xi) in gx.iter_mut().zip(up).zip(xv.iter()) {
                        *g = *g + if xi > T::zero() { u } else { u * slope };
                    }
                }
            }),
        )
    }

    /// Numerically stable softmax over each row of a 2-d tensor.
    pub fn softmax_rows(&self) -> Result<Tensor<T>, TensorError> {
        let (p, q) = dims2(self, "softmax_rows")?;
        let mut out = vec![T::zero(); p * q];
        {
            let xv = self.value();
            for (orow, xrow) in out.chunks_exact_mut(q).zip(xv.chunks_exact(q)) {
                let mx = xrow.iter().cloned().fold(T::neg_infinity(), T::max);
                let mut z = T::zero();
                for (o, &x) in orow.iter_mut().zip(xrow) {
                    *o = (x - mx).exp();
                    z = z + *o;
                }
                for o in orow.iter_mut() {
                    *o = *o / z;
                }
            }
        }
        let y = out.clone();
        let x = self.clone();
        Ok(Tensor::from_op(
            out,
            vec![p, q],
            vec![self.clone()],
            Box::new(move |up| {
                if x.requires_grad() {
                    let mut gx = x.grad_mut();
                    for ((grow, urow), yrow) in gx
                        .chunks_exact_mut(q)
                        .zip(up.chunks_exact(q))
                        .zip(y.chunks_exact(q))
                    {
                        let s = dot(urow, yrow);
                        for ((g, &u), &yi) in grow.iter_mut().zip(urow).zip(yrow) {
                            *g = *g + yi * (u - s);
                        }
                    }
                }
            }),
        ))
    }

    /// Columns `from..to` of a 2-d tensor, as a copy.
    pub fn slice_cols(&self, from: usize, to: usize) -> Result<Tensor<T>, TensorError> {
        let (p, q) = dims2(self, "slice_cols")?;
        if from >= to || to > q {
            return Err(TensorError::Invalid {
                op: "slice_cols",
                msg: format!("range {from}..{to} out of bounds for {q} columns"),
            });
        }
        let w = to - from;
        let out: Vec<T> = {
            let xv = self.value();
            xv.chunks_exact(q)
                .flat_map(|row| row[from..to].iter().copied())
                .collect()
        };
        let x = self.clone();
        Ok(Tensor::from_op(
            out,
            vec![p, w],
            vec![self.clone()],
            Box::new(move |up| {
                if x.requires_grad() {
                    let mut gx = x.grad_mut();
                    for (grow, urow) in gx.chunks_exact_mut(q).zip(up.chunks_exact(w)) {
                        axpy(T::one(), urow, &mut grow[from..to]);
                    }
                }
            }),
        ))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum_all(&self) -> Tensor<T> {
        let s = self.value().iter().fold(T::zero(), |acc, &x| acc + x);
        let x = self.clone();
        Tensor::from_op(
            vec![s],
            vec![1],
            vec![self.clone()],
            Box::new(move |up| {
                if x.requires_grad() {
                    let u = up[0];
                    for g in x.grad_mut().iter_mut() {
                        *g = *g + u;
                    }
                }
            }),
        )
    }

    /// Mean of all elements, as a scalar.
    pub fn mean_all(&self) -> Tensor<T> {
        let n = elem::<T>(self.numel() as f64);
        let s = self.value().iter().fold(T::zero(), |acc, &x| acc + x) / n;
        let x = self.clone();
        Tensor::from_op(
            vec![s],
            vec![1],
            vec![self.clone()],
            Box::new(move |up| {
                if x.requires_grad() {
                    let u = up[0] / n;
                    for g in x.grad_mut().iter_mut() {
                        *g = *g + u;
                    }
                }
            }),
        )
    }
}

/// Concatenate 2-d tensors with equal row counts along columns.
pub fn concat_cols<T: Element>(parts: &[Tensor<T>]) -> Result<Tensor<T>, TensorError> {
    if parts.is_empty() {
        return Err(TensorError::Invalid {
            op: "concat_cols",
            msg: "no tensors given".into(),
        });
    }
    let (p, _) = dims2(&parts[0], "concat_cols")?;
    let mut widths = Vec::with_capacity(parts.len());
    for t in parts {
        let (r, c) = dims2(t, "concat_cols")?;
        if r != p {
            return Err(shape_mismatch("concat_cols", &parts[0], t));
        }
        widths.push(c);
    }
    let total: usize = widths.iter().sum();
    let mut out = vec![T::zero(); p * total];
    let mut off = 0;
    for (t, &w) in parts.iter().zip(&widths) {
        let tv = t.value();
        for (i, row) in tv.chunks_exact(w).enumerate() {
            out[i * total + off..i * total + off + w].copy_from_slice(row);
        }
        off += w;
    }
    let captured: Vec<Tensor<T>> = parts.to_vec();
    let widths_c = widths.clone();
    Ok(Tensor::from_op(
        out,
        vec![p, total],
        parts.to_vec(),
        Box::new(move |up| {
            let mut off = 0;
            for (t, &w) in captured.iter().zip(&widths_c) {
                if t.requires_grad() {
                    let mut g = t.grad_mut();
                    for (grow, urow) in g.chunks_exact_mut(w).zip(up.chunks_exact(total)) {
                        axpy(T::one(), &urow[off..off + w], grow);
                    }
                }
                off += w;
            }
        }),
    ))
}

/// Interleave per-step batch tensors into one position-major tensor.
///
/// Given `m` tensors of shape `B×d` (one per time step), produces `(B·m)×d`
/// where row `b·m + t` is row `b` of step `t` — the layout the attention and
/// discriminator ops expect.
pub fn stack_positions<T: Element>(steps: &[Tensor<T>]) -> Result<Tensor<T>, TensorError> {
    if steps.is_empty() {
        return Err(TensorError::Invalid {
            op: "stack_positions",
            msg: "no steps given".into(),
        });
    }
    let (b, d) = dims2(&steps[0], "stack_positions")?;
    for t in steps {
        if t.shape() != [b, d] {
            return Err(shape_mismatch("stack_positions", &steps[0], t));
        }
    }
    let m = steps.len();
    let mut out = vec![T::zero(); b * m * d];
    for (t, step) in steps.iter().enumerate() {
        let sv = step.value();
        for (i, row) in sv.chunks_exact(d).enumerate() {
            let r = i * m + t;
            out[r * d..(r + 1) * d].copy_from_slice(row);
        }
    }
    let captured: Vec<Tensor<T>> = steps.to_vec();
    Ok(Tensor::from_op(
        out,
        vec![b * m, d],
        steps.to_vec(),
        Box::new(move |up| {
            for (t, step) in captured.iter().enumerate() {
                if step.requires_grad() {
                    let mut g = step.grad_mut();
                    for i in 0..b {
                        let r = i * m + t;
                        axpy(T::one(), &up[r * d..(r + 1) * d], &mut g[i * d..(i + 1) * d]);
                    }
                }
            }
        }),
    ))
}

/// Gather rows of an embedding table: `out[i] = table[ids[i]]`.
pub fn embedding_lookup<T: Element>(
    table: &Tensor<T>,
    ids: &[u32],
) -> Result<Tensor<T>, TensorError> {
    let (v, d) = dims2(table, "embedding_lookup")?;
    if let Some(&bad) = ids.iter().find(|&&id| id as usize >= v) {
        return Err(TensorError::Invalid {
            op: "embedding_lookup",
            msg: format!("id {bad} out of range for table with {v} rows"),
        });
    }
    let n = ids.len();
    let mut out = vec![T::zero(); n * d];
    {
        let tv = table.value();
        for (i, &id) in ids.iter().enumerate() {
            let r = id as usize;
            out[i * d..(i + 1) * d].copy_from_slice(&tv[r * d..(r + 1) * d]);
        }
    }
    let tab = table.clone();
    let ids_c: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
    Ok(Tensor::from_op(
        out,
        vec![n, d],
        vec![table.clone()],
        Box::new(move |up| {
            if tab.requires_grad() {
                let mut g = tab.grad_mut();
                for (i, &r) in ids_c.iter().enumerate() {
                    axpy(T::one(), &up[i * d..(i + 1) * d], &mut g[r * d..(r + 1) * d]);
                }
            }
        }),
    ))
}

/// Weighted token-level cross-entropy, fused with log-softmax.
///
/// `logits` is `N×V`; row `i` is scored against class `targets[i]` and scaled
/// by `weights[i]`. Returns the scalar `Σᵢ wᵢ·(logsumexp(logitsᵢ) − logitsᵢ[tᵢ])`.
/// PAD positions are excluded by giving them weight 0.
pub fn cross_entropy_logits<T: Element>(
    logits: &Tensor<T>,
    targets: &[u32],
    weights: &[T],
) -> Result<Tensor<T>, TensorError> {
    let (n, v) = dims2(logits, "cross_entropy_logits")?;
    if targets.len() != n || weights.len() != n {
        return Err(TensorError::Invalid {
            op: "cross_entropy_logits",
            msg: format!(
                "{} logits rows but {} targets / {} weights",
                n,
                targets.len(),
                weights.len()
            ),
        });
    }
    if let Some(&bad) = targets.iter().find(|&&t| t as usize >= v) {
        return Err(TensorError::Invalid {
            op: "cross_entropy_logits",
            msg: format!("target {bad} out of range for {v} classes"),
        });
    }
    let mut lses = vec![T::zero(); n];
    let mut loss = T::zero();
    {
        let xv = logits.value();
        for (i, row) in xv.chunks_exact(v).enumerate() {
            let mx = row.iter().cloned().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for &x in row {
                z = z + (x - mx).exp();
            }
            let lse = mx + z.ln();
            lses[i] = lse;
            loss = loss + weights[i] * (lse - row[targets[i] as usize]);
        }
    }
    let x = logits.clone();
    let targets_c: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    let weights_c = weights.to_vec();
    Ok(Tensor::from_op(
        vec![loss],
        vec![1],
        vec![logits.clone()],
        Box::new(move |up| {
            if x.requires_grad() {
                let u = up[0];
                let xv = x.value();
                let mut gx = x.grad_mut();
                for (i, (grow, xrow)) in
                    gx.chunks_exact_mut(v).zip(xv.chunks_exact(v)).enumerate()
                {
                    let wu = u * weights_c[i];
                    if wu == T::zero() {
                        continue;
                    }
                    let lse = lses[i];
                    for (g, &xj) in grow.iter_mut().zip(xrow) {
                        *g = *g + wu * (xj - lse).exp();
                    }
                    grow[targets_c[i]] = grow[targets_c[i]] - wu;
                }
            }
        }),
    ))
}

/// Weighted binary cross-entropy on logits, in the overflow-free form
/// `softplus(u) − y·u`, summed with per-element weights into a scalar.
pub fn bce_with_logits<T: Element>(
    logits: &Tensor<T>,
    targets: &[T],
    weights: &[T],
) -> Result<Tensor<T>, TensorError> {
    let n = logits.numel();
    if targets.len() != n || weights.len() != n {
        return Err(TensorError::Invalid {
            op: "bce_with_logits",
            msg: format!(
                "{} logits but {} targets / {} weights",
                n,
                targets.len(),
                weights.len()
            ),
        });
    }
    let loss = {
        let xv = logits.value();
        xv.iter()
            .zip(targets)
            .zip(weights)
            .fold(T::zero(), |acc, ((&u, &y), &w)| {
                acc + w * (softplus(u) - y * u)
            })
    };
    let x = logits.clone();
    let targets_c = targets.to_vec();
    let weights_c = weights.to_vec();
    Ok(Tensor::from_op(
        vec![loss],
        vec![1],
        vec![logits.clone()],
        Box::new(move |up| {
            if x.requires_grad() {
                let u0 = up[0];
                let xv = x.value();
                let mut gx = x.grad_mut();
                for (i, g) in gx.iter_mut().enumerate() {
                    *g = *g + u0 * weights_c[i] * (stable_sigmoid(xv[i]) - targets_c[i]);
                }
            }
        }),
    ))
}

/// Attention scores: `out[b,j] = ⟨query[b], keys[b·m + j]⟩`.
///
/// `query` is `B×n`, `keys` is `(B·m)×n` in the [`stack_positions`] layout.
pub fn attn_scores<T: Element>(
    query: &Tensor<T>,
    keys: &Tensor<T>,
    m: usize,
) -> Result<Tensor<T>, TensorError> {
    let (b, n) = dims2(query, "attn_scores")?;
    let (rows, n2) = dims2(keys, "attn_scores")?;
    if n2 != n || rows != b * m {
        return Err(shape_mismatch("attn_scores", query, keys));
    }
    let mut out = vec![T::zero(); b * m];
    {
        let (qv, kv) = (query.value(), keys.value());
        for i in 0..b {
            let q = &qv[i * n..(i + 1) * n];
            for j in 0..m {
                let r = i * m + j;
                out[r] = dot(q, &kv[r * n..(r + 1) * n]);
            }
        }
    }
    let qt = query.clone();
    let kt = keys.clone();
    Ok(Tensor::from_op(
        out,
        vec![b, m],
        vec![query.clone(), keys.clone()],
        Box::new(move |up| {
            if qt.requires_grad() {
                let kv = kt.value();
                let mut gq = qt.grad_mut();
                for i in 0..b {
                    let grow = &mut gq[i * n..(i + 1) * n];
                    for j in 0..m {
                        let r = i * m + j;
                        axpy(up[r], &kv[r * n..(r + 1) * n], grow);
                    }
                }
            }
            if kt.requires_grad() {
                let qv = qt.value();
                let mut gk = kt.grad_mut();
                for i in 0..b {
                    let q = &qv[i * n..(i + 1) * n];
                    for j in 0..m {
                        let r = i * m + j;
                        axpy(up[r], q, &mut gk[r * n..(r + 1) * n]);
                    }
                }
            }
        }),
    ))
}

/// Attention context: `out[b] = Σⱼ weights[b,j] · values[b·m + j]`.
pub fn attn_context<T: Element>(
    weights: &Tensor<T>,
    values: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    let (b, m) = dims2(weights, "attn_context")?;
    let (rows, d) = dims2(values, "attn_context")?;
    if rows != b * m {
        return Err(shape_mismatch("attn_context", weights, values));
    }
    let mut out = vec![T::zero(); b * d];
    {
        let (wv, vv) = (weights.value(), values.value());
        for i in 0..b {
            let orow = &mut out[i * d..(i + 1) * d];
            for j in 0..m {
                let r = i * m + j;
                axpy(wv[r], &vv[r * d..(r + 1) * d], orow);
            }
        }
    }
    let wt = weights.clone();
    let vt = values.clone();
    Ok(Tensor::from_op(
        out,
        vec![b, d],
        vec![weights.clone(), values.clone()],
        Box::new(move |up| {
            if wt.requires_grad() {
                let vv = vt.value();
                let mut gw = wt.grad_mut();
                for i in 0..b {
                    let urow = &up[i * d..(i + 1) * d];
                    for j in 0..m {
                        let r = i * m + j;
                        gw[r] = gw[r] + dot(urow, &vv[r * d..(r + 1) * d]);
                    }
                }
            }
            if vt.requires_grad() {
                let wv = wt.value();
                let mut gv = vt.grad_mut();
                for i in 0..b {
                    let urow = &up[i * d..(i + 1) * d];
                    for j in 0..m {
                        let r = i * m + j;
                        axpy(wv[r], urow, &mut gv[r * d..(r + 1) * d]);
                    }
                }
            }
        }),
    ))
}
