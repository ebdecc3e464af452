//! Forward operations. Each op records enough to drive the backward pass.

use super::{Float, Tape, TensorId};

/// Recorded operation kinds.
#[derive(Debug, Clone)]
pub enum Op {
    Leaf,
    MatMul {
        a: TensorId,
        b: TensorId,
    },
    Add {
        a: TensorId,
        b: TensorId,
    },
    Sub {
        a: TensorId,
        b: TensorId,
    },
    Mul {
        a: TensorId,
        b: TensorId,
    },
    AddRowBias {
        a: TensorId,
        bias: TensorId,
    },
    ScaleConst {
        a: TensorId,
        c: f64,
    },
    AddConst {
        a: TensorId,
    },
    ScaleBy {
        a: TensorId,
        s: TensorId,
    },
    Transpose {
        a: TensorId,
    },
    Concat {
        parts: Vec<TensorId>,
        axis: usize,
    },
    Slice {
        a: TensorId,
        axis: usize,
        start: usize,
    },
    GatherRows {
        a: TensorId,
        rows: Vec<usize>,
    },
    Gelu {
        a: TensorId,
    },
    Sigmoid {
        a: TensorId,
    },
    Tanh {
        a: TensorId,
    },
    Exp {
        a: TensorId,
    },
    Ln {
        a: TensorId,
    },
    Softplus {
        a: TensorId,
    },
    Clamp {
        a: TensorId,
        lo: f64,
        hi: f64,
    },
    Sum {
        a: TensorId,
    },
    Mean {
        a: TensorId,
    },
    Softmax {
        a: TensorId,
        axis: usize,
    },
    LogSoftmax {
        a: TensorId,
        axis: usize,
    },
    LayerNorm {
        a: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    },
    L2NormalizeRows {
        a: TensorId,
    },
}

/// `out[i,j] += sum_p a[i,p] * b[p,j]`; a: [m,k], b: [k,n].
pub(crate) fn matmul_into<F: Float>(a: &[F], b: &[F], m: usize, k: usize, n: usize, out: &mut [F]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_ip * bv;
            }
        }
    }
}

/// `out[i,p] += sum_j g[i,j] * b[p,j]`, i.e. G * B^T; g: [m,n], b: [k,n].
pub(crate) fn matmul_bt_into<F: Float>(
    g: &[F],
    b: &[F],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [F],
) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        let out_row = &mut out[i * k..(i + 1) * k];
        for (p, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            let mut acc = F::ZERO;
            for (&gv, &bv) in g_row.iter().zip(b_row) {
                acc += gv * bv;
            }
            *o += acc;
        }
    }
}

/// `out[p,j] += sum_i a[i,p] * g[i,j]`, i.e. A^T * G; a: [m,k], g: [m,n].
pub(crate) fn matmul_at_into<F: Float>(
    a: &[F],
    g: &[F],
    m: usize,
    k: usize,
    n: usize,
    out: &mut [F],
) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let g_row = &g[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o += a_ip * gv;
            }
        }
    }
}

fn gelu_val<F: Float>(x: F) -> F {
    // tanh approximation
    let c = F::from_f64(0.797_884_560_802_865_4); // sqrt(2/pi)
    let k = F::from_f64(0.044715);
    let half = F::from_f64(0.5);
    let inner = c * (x + k * x * x * x);
    half * x * (F::ONE + inner.tanh())
}

fn sigmoid_val<F: Float>(x: F) -> F {
    F::ONE / (F::ONE + (-x).exp())
}

fn softplus_val<F: Float>(x: F) -> F {
    // max(x,0) + ln(1 + e^{-|x|}), stable for large |x|
    x.maxf(F::ZERO) + (F::ONE + (-x.abs()).exp()).ln()
}

pub(crate) fn softmax_rows_into<F: Float>(x: &[F], rows: usize, cols: usize, out: &mut [F]) {
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let out_row = &mut out[r * cols..(r + 1) * cols];
        let mut mx = row[0];
        for &v in row.iter() {
            mx = mx.maxf(v);
        }
        let mut denom = F::ZERO;
        for (o, &v) in out_row.iter_mut().zip(row) {
            let e = (v - mx).exp();
            *o = e;
            denom += e;
        }
        for o in out_row.iter_mut() {
            *o = *o / denom;
        }
    }
}

impl<F: Float> Tape<F> {
    fn elementwise(&mut self, a: TensorId, op: Op, f: impl Fn(F) -> F) -> TensorId {
        let node = &self.nodes[a.0];
        let data: Vec<F> = node.data.iter().map(|&x| f(x)).collect();
        let shape = node.shape.clone();
        self.push(data, shape, op)
    }

    fn binary_same_shape(&mut self, a: TensorId, b: TensorId, name: &str) {
        assert_eq!(
            self.nodes[a.0].shape, self.nodes[b.0].shape,
            "{name}: shape mismatch {:?} vs {:?}",
            self.nodes[a.0].shape, self.nodes[b.0].shape
        );
    }

    /// Matrix product `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        let (m, k) = self.rows_cols(a);
        let (k2, n) = self.rows_cols(b);
        assert_eq!(
            k, k2,
            "matmul: inner dimensions disagree, {:?} x {:?}",
            self.nodes[a.0].shape, self.nodes[b.0].shape
        );
        let mut out = vec![F::ZERO; m * n];
        matmul_into(
            &self.nodes[a.0].data,
            &self.nodes[b.0].data,
            m,
            k,
            n,
            &mut out,
        );
        self.push(out, vec![m, n], Op::MatMul { a, b })
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary_same_shape(a, b, "add");
        let data: Vec<F> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(data, shape, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary_same_shape(a, b, "sub");
        let data: Vec<F> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x - y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(data, shape, Op::Sub { a, b })
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> TensorId {
        self.binary_same_shape(a, b, "mul");
        let data: Vec<F> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(data, shape, Op::Mul { a, b })
    }

    /// `[r,c] + [c]`, bias added to every row.
    pub fn add_row_bias(&mut self, a: TensorId, bias: TensorId) -> TensorId {
        let (rows, cols) = self.rows_cols(a);
        assert_eq!(
            self.nodes[bias.0].shape,
            vec![cols],
            "add_row_bias: bias shape {:?} does not match row width {cols}",
            self.nodes[bias.0].shape
        );
        let mut data = self.nodes[a.0].data.clone();
        for r in 0..rows {
            for (o, &bv) in data[r * cols..(r + 1) * cols]
                .iter_mut()
                .zip(&self.nodes[bias.0].data)
            {
                *o += bv;
            }
        }
        let shape = self.nodes[a.0].shape.clone();
        self.push(data, shape, Op::AddRowBias { a, bias })
    }

    /// Multiply by a compile-time constant (no gradient to the constant).
    pub fn scale(&mut self, a: TensorId, c: f64) -> TensorId {
        let cf = F::from_f64(c);
        self.elementwise(a, Op::ScaleConst { a, c }, |x| x * cf)
    }

    pub fn add_const(&mut self, a: TensorId, c: f64) -> TensorId {
        let cf = F::from_f64(c);
        self.elementwise(a, Op::AddConst { a }, |x| x + cf)
    }

    /// Broadcast-multiply by a scalar tensor `s` (shape `[1]`); gradient
    /// flows to both inputs.
    pub fn scale_by(&mut self, a: TensorId, s: TensorId) -> TensorId {
        assert_eq!(self.nodes[s.0].numel(), 1, "scale_by: s must be a scalar");
        let sv = self.nodes[s.0].data[0];
        self.elementwise(a, Op::ScaleBy { a, s }, |x| x * sv)
    }

    pub fn transpose(&mut self, a: TensorId) -> TensorId {
        let (rows, cols) = self.rows_cols(a);
        let src = &self.nodes[a.0].data;
        let mut data = vec![F::ZERO; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                data[c * rows + r] = src[r * cols + c];
            }
        }
        self.push(data, vec![cols, rows], Op::Transpose { a })
    }

    /// Concatenate along `axis` (0 = stack rows, 1 = widen rows).
    pub fn concat(&mut self, parts: &[TensorId], axis: usize) -> TensorId {
        assert!(!parts.is_empty(), "concat: no parts");
        assert!(axis < 2, "concat: axis {axis} out of range");
        let rank = self.nodes[parts[0].0].shape.len();
        if rank == 1 {
            assert_eq!(axis, 0, "concat: axis 1 invalid for rank-1 tensors");
            let mut data = Vec::new();
            for &p in parts {
                assert_eq!(self.nodes[p.0].shape.len(), 1, "concat: mixed ranks");
                data.extend_from_slice(&self.nodes[p.0].data);
            }
            let n = data.len();
            return self.push(
                data,
                vec![n],
                Op::Concat {
                    parts: parts.to_vec(),
                    axis,
                },
            );
        }
        if axis == 0 {
            let cols = self.rows_cols(parts[0]).1;
            let mut rows = 0;
            let mut data = Vec::new();
            for &p in parts {
                let (r, c) = self.rows_cols(p);
                assert_eq!(c, cols, "concat axis 0: column mismatch");
                rows += r;
                data.extend_from_slice(&self.nodes[p.0].data);
            }
            self.push(
                data,
                vec![rows, cols],
                Op::Concat {
                    parts: parts.to_vec(),
                    axis,
                },
            )
        } else {
            let rows = self.rows_cols(parts[0]).0;
            let widths: Vec<usize> = parts
                .iter()
                .map(|&p| {
                    let (r, c) = self.rows_cols(p);
                    assert_eq!(r, rows, "concat axis 1: row mismatch");
                    c
                })
                .collect();
            let total: usize = widths.iter().sum();
            let mut data = vec![F::ZERO; rows * total];
            for r in 0..rows {
                let mut off = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    let src = &self.nodes[p.0].data[r * w..(r + 1) * w];
                    data[r * total + off..r * total + off + w].copy_from_slice(src);
                    off += w;
                }
            }
            self.push(
                data,
                vec![rows, total],
                Op::Concat {
                    parts: parts.to_vec(),
                    axis,
                },
            )
        }
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn slice(&mut self, a: TensorId, axis: usize, start: usize, len: usize) -> TensorId {
        let shape = self.nodes[a.0].shape.clone();
        assert!(axis < shape.len(), "slice: axis {axis} out of range");
        assert!(
            start + len <= shape[axis],
            "slice: [{start}, {}) exceeds dim {} of {:?}",
            start + len,
            shape[axis],
            shape
        );
        let data = if shape.len() == 1 {
            self.nodes[a.0].data[start..start + len].to_vec()
        } else if axis == 0 {
            let cols = shape[1];
            self.nodes[a.0].data[start * cols..(start + len) * cols].to_vec()
        } else {
            let (rows, cols) = (shape[0], shape[1]);
            let mut out = vec![F::ZERO; rows * len];
            for r in 0..rows {
                out[r * len..(r + 1) * len].copy_from_slice(
                    &self.nodes[a.0].data[r * cols + start..r * cols + start + len],
                );
            }
            out
        };
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.push(data, out_shape, Op::Slice { a, axis, start })
    }

    /// Gather rows of a `[n, c]` tensor (embedding lookup / row select).
    /// Backward scatter-adds into the source rows.
    pub fn gather_rows(&mut self, a: TensorId, rows: &[usize]) -> TensorId {
        let (n, c) = self.rows_cols(a);
        let mut data = Vec::with_capacity(rows.len() * c);
        for &r in rows {
            assert!(r < n, "gather_rows: row {r} out of range {n}");
            data.extend_from_slice(&self.nodes[a.0].data[r * c..(r + 1) * c]);
        }
        self.push(
            data,
            vec![rows.len(), c],
            Op::GatherRows {
                a,
                rows: rows.to_vec(),
            },
        )
    }

    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        self.elementwise(a, Op::Gelu { a }, gelu_val)
    }

    pub fn sigmoid(&mut self, a: TensorId) -> TensorId {
        self.elementwise(a, Op::Sigmoid { a }, sigmoid_val)
    }

    pub fn tanh(&mut self, a: TensorId) -> TensorId {
        self.elementwise(a, Op::Tanh { a }, |x| x.tanh())
    }

    pub fn exp(&mut self, a: TensorId) -> TensorId {
        self.elementwise(a, Op::Exp { a }, |x| x.exp())
    }

    pub fn ln(&mut self, a: TensorId) -> TensorId {
        self.elementwise(a, Op::Ln { a }, |x| x.ln())
    }

    /// `ln(1 + e^x)`, computed stably.
    pub fn softplus(&mut self, a: TensorId) -> TensorId {
        self.elementwise(a, Op::Softplus { a }, softplus_val)
    }

    /// Clamp to `[lo, hi]`; gradient passes only strictly inside the range.
    pub fn clamp(&mut self, a: TensorId, lo: f64, hi: f64) -> TensorId {
        let (lf, hf) = (F::from_f64(lo), F::from_f64(hi));
        self.elementwise(a, Op::Clamp { a, lo, hi }, |x| x.maxf(lf).minf(hf))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: TensorId) -> TensorId {
        let mut acc = F::ZERO;
        for &v in &self.nodes[a.0].data {
            acc += v;
        }
        self.push(vec![acc], vec![1], Op::Sum { a })
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&mut self, a: TensorId) -> TensorId {
        let n = self.nodes[a.0].data.len();
        assert!(n > 0, "mean of empty tensor");
        let mut acc = F::ZERO;
        for &v in &self.nodes[a.0].data {
            acc += v;
        }
        let m = acc / F::from_f64(n as f64);
        self.push(vec![m], vec![1], Op::Mean { a })
    }

    /// Softmax along `axis` (max-subtracted). Rank-1 tensors use axis 0.
    pub fn softmax(&mut self, a: TensorId, axis: usize) -> TensorId {
        let shape = self.nodes[a.0].shape.clone();
        let data = self.softmax_like(a, axis);
        self.push(data, shape, Op::Softmax { a, axis })
    }

    /// `ln(softmax(x))` along `axis`, fused for stability.
    pub fn log_softmax(&mut self, a: TensorId, axis: usize) -> TensorId {
        let shape = self.nodes[a.0].shape.clone();
        let rank = shape.len();
        let (rows, cols) = self.rows_cols(a);
        let x = &self.nodes[a.0].data;
        let mut out = vec![F::ZERO; x.len()];
        let row_major = rank == 1 || axis == 1;
        assert!(
            axis < rank.max(1),
            "log_softmax: axis {axis} out of range for shape {shape:?}"
        );
        let (groups, span, stride_in_group, stride_between) = if row_major {
            (rows, cols, 1usize, cols)
        } else {
            (cols, rows, cols, 1usize)
        };
        for g in 0..groups {
            let base = g * stride_between;
            let mut mx = x[base];
            for i in 0..span {
                mx = mx.maxf(x[base + i * stride_in_group]);
            }
            let mut denom = F::ZERO;
            for i in 0..span {
                denom += (x[base + i * stride_in_group] - mx).exp();
            }
            let lse = denom.ln() + mx;
            for i in 0..span {
                out[base + i * stride_in_group] = x[base + i * stride_in_group] - lse;
            }
        }
        self.push(out, shape, Op::LogSoftmax { a, axis })
    }

    fn softmax_like(&self, a: TensorId, axis: usize) -> Vec<F> {
        let shape = &self.nodes[a.0].shape;
        let rank = shape.len();
        assert!(
            (rank == 1 && axis == 0) || (rank == 2 && axis < 2),
            "softmax: axis {axis} invalid for shape {shape:?}"
        );
        let (rows, cols) = self.rows_cols(a);
        let x = &self.nodes[a.0].data;
        let mut out = vec![F::ZERO; x.len()];
        if rank == 1 || axis == 1 {
            softmax_rows_into(x, rows, cols, &mut out);
        } else {
            for c in 0..cols {
                let mut mx = x[c];
                for r in 0..rows {
                    mx = mx.maxf(x[r * cols + c]);
                }
                let mut denom = F::ZERO;
                for r in 0..rows {
                    let e = (x[r * cols + c] - mx).exp();
                    out[r * cols + c] = e;
                    denom += e;
                }
                for r in 0..rows {
                    out[r * cols + c] = out[r * cols + c] / denom;
                }
            }
        }
        out
    }

    /// Per-row layer normalization with affine parameters.
    pub fn layer_norm(
        &mut self,
        a: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f64,
    ) -> TensorId {
        let (rows, cols) = self.rows_cols(a);
        assert_eq!(self.nodes[gamma.0].shape, vec![cols], "layer_norm: gamma");
        assert_eq!(self.nodes[beta.0].shape, vec![cols], "layer_norm: beta");
        let x = &self.nodes[a.0].data;
        let g = &self.nodes[gamma.0].data;
        let b = &self.nodes[beta.0].data;
        let epsf = F::from_f64(eps);
        let inv_n = F::from_f64(1.0 / cols as f64);
        let mut out = vec![F::ZERO; x.len()];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let mut mean = F::ZERO;
            for &v in row {
                mean += v;
            }
            mean = mean * inv_n;
            let mut var = F::ZERO;
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var = var * inv_n;
            let inv_std = F::ONE / (var + epsf).sqrt();
            for c in 0..cols {
                out[r * cols + c] = (row[c] - mean) * inv_std * g[c] + b[c];
            }
        }
        let shape = self.nodes[a.0].shape.clone();
        self.push(
            out,
            shape,
            Op::LayerNorm {
                a,
                gamma,
                beta,
                eps,
            },
        )
    }

    /// Normalize each row to unit L2 norm (whole vector for rank-1).
    pub fn l2_normalize_rows(&mut self, a: TensorId) -> TensorId {
        let (rows, cols) = self.rows_cols(a);
        let x = &self.nodes[a.0].data;
        let mut out = vec![F::ZERO; x.len()];
        for r in 0..rows {
            let row = &x[r * cols..(r + 1) * cols];
            let mut sq = F::ZERO;
            for &v in row {
                sq += v * v;
            }
            let norm = sq.sqrt();
            assert!(norm.to_f64() > 0.0, "l2_normalize_rows: zero-norm row {r}");
            for c in 0..cols {
                out[r * cols + c] = row[c] / norm;
            }
        }
        let shape = self.nodes[a.0].shape.clone();
        self.push(out, shape, Op::L2NormalizeRows { a })
    }
}
