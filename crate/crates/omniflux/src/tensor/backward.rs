//! Reverse pass: visits recorded nodes once, newest to oldest.

use super::ops::{matmul_at_into, matmul_bt_into};
use super::{Float, Op, Tape, TensorId};

impl<F: Float> Tape<F> {
    /// Backpropagate from a scalar loss. Gradients of `requires_grad`
    /// leaves accumulate additively; calling twice doubles them.
    ///
    /// Panics if `loss` is not a scalar (contract error).
    pub fn backward(&mut self, loss: TensorId) {
        assert_eq!(
            self.nodes[loss.0].numel(),
            1,
            "backward: loss must be a scalar, got shape {:?}",
            self.nodes[loss.0].shape
        );
        let n = self.nodes.len();
        let mut adj: Vec<Option<Vec<F>>> = (0..n).map(|_| None).collect();
        adj[loss.0] = Some(vec![F::ONE]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf => {
                    if self.nodes[idx].requires_grad {
                        let sink = self.nodes[idx]
                            .grad
                            .get_or_insert_with(|| vec![F::ZERO; g.len()]);
                        for (s, &gv) in sink.iter_mut().zip(&g) {
                            *s += gv;
                        }
                    }
                }
                Op::MatMul { a, b } => {
                    let (m, k) = self.rows_cols(a);
                    let nn = self.rows_cols(b).1;
                    {
                        let buf = Self::adj_buf(&mut adj, a, m * k);
                        matmul_bt_into(&g, &self.nodes[b.0].data, m, k, nn, buf);
                    }
                    {
                        let buf = Self::adj_buf(&mut adj, b, k * nn);
                        matmul_at_into(&self.nodes[a.0].data, &g, m, k, nn, buf);
                    }
                }
                Op::Add { a, b } => {
                    Self::add_into(&mut adj, a, &g);
                    Self::add_into(&mut adj, b, &g);
                }
                Op::Sub { a, b } => {
                    Self::add_into(&mut adj, a, &g);
                    let buf = Self::adj_buf(&mut adj, b, g.len());
                    for (o, &gv) in buf.iter_mut().zip(&g) {
                        *o += -gv;
                    }
                }
                Op::Mul { a, b } => {
                    {
                        let bd = &self.nodes[b.0].data;
                        let buf = Self::adj_buf(&mut adj, a, g.len());
                        for ((o, &gv), &bv) in buf.iter_mut().zip(&g).zip(bd) {
                            *o += gv * bv;
                        }
                    }
                    {
                        let ad = &self.nodes[a.0].data;
                        let buf = Self::adj_buf(&mut adj, b, g.len());
                        for ((o, &gv), &av) in buf.iter_mut().zip(&g).zip(ad) {
                            *o += gv * av;
                        }
                    }
                }
                Op::AddRowBias { a, bias } => {
                    Self::add_into(&mut adj, a, &g);
                    let (rows, cols) = self.rows_cols(a);
                    let buf = Self::adj_buf(&mut adj, bias, cols);
                    for r in 0..rows {
                        for (o, &gv) in buf.iter_mut().zip(&g[r * cols..(r + 1) * cols]) {
                            *o += gv;
                        }
                    }
                }
                Op::ScaleConst { a, c } => {
                    let cf = F::from_f64(c);
                    let buf = Self::adj_buf(&mut adj, a, g.len());
                    for (o, &gv) in buf.iter_mut().zip(&g) {
                        *o += gv * cf;
                    }
                }
                Op::AddConst { a } => {
                    Self::add_into(&mut adj, a, &g);
                }
                Op::ScaleBy { a, s } => {
                    let sv = self.nodes[s.0].data[0];
                    {
                        let buf = Self::adj_buf(&mut adj, a, g.len());
                        for (o, &gv) in buf.iter_mut().zip(&g) {
                            *o += gv * sv;
                        }
                    }
                    {
                        let ad = &self.nodes[a.0].data;
                        let mut acc = F::ZERO;
                        for (&gv, &av) in g.iter().zip(ad) {
                            acc += gv * av;
                        }
                        let buf = Self::adj_buf(&mut adj, s, 1);
                        buf[0] += acc;
                    }
                }
                Op::Transpose { a } => {
                    let (rows, cols) = self.rows_cols(a);
                    let buf = Self::adj_buf(&mut adj, a, rows * cols);
                    for r in 0..rows {
                        for c in 0..cols {
                            buf[r * cols + c] += g[c * rows + r];
                        }
                    }
                }
                Op::Concat { parts, axis } => {
                    if axis == 0 || self.nodes[parts[0].0].shape.len() == 1 {
                        let mut off = 0;
                        for &p in &parts {
                            let numel = self.nodes[p.0].numel();
                            let buf = Self::adj_buf(&mut adj, p, numel);
                            for (o, &gv) in buf.iter_mut().zip(&g[off..off + numel]) {
                                *o += gv;
                            }
                            off += numel;
                        }
                    } else {
                        let rows = self.rows_cols(parts[0]).0;
                        let total: usize = parts.iter().map(|&p| self.rows_cols(p).1).sum();
                        let mut off = 0;
                        for &p in &parts {
                            let w = self.rows_cols(p).1;
                            let buf = Self::adj_buf(&mut adj, p, rows * w);
                            for r in 0..rows {
                                for c in 0..w {
                                    buf[r * w + c] += g[r * total + off + c];
                                }
                            }
                            off += w;
                        }
                    }
                }
                Op::Slice { a, axis, start } => {
                    let shape = self.nodes[a.0].shape.clone();
                    let numel = self.nodes[a.0].numel();
                    let out_shape = self.nodes[idx].shape.clone();
                    let buf = Self::adj_buf(&mut adj, a, numel);
                    if shape.len() == 1 {
                        for (i, &gv) in g.iter().enumerate() {
                            buf[start + i] += gv;
                        }
                    } else if axis == 0 {
                        let cols = shape[1];
                        for (i, &gv) in g.iter().enumerate() {
                            buf[start * cols + i] += gv;
                        }
                    } else {
                        let cols = shape[1];
                        let len = out_shape[1];
                        for r in 0..out_shape[0] {
                            for c in 0..len {
                                buf[r * cols + start + c] += g[r * len + c];
                            }
                        }
                    }
                }
                Op::GatherRows { a, rows } => {
                    let cols = self.rows_cols(a).1;
                    let numel = self.nodes[a.0].numel();
                    let buf = Self::adj_buf(&mut adj, a, numel);
                    for (i, &r) in rows.iter().enumerate() {
                        for c in 0..cols {
                            buf[r * cols + c] += g[i * cols + c];
                        }
                    }
                }
                Op::Gelu { a } => {
                    let xd = &self.nodes[a.0].data;
                    let buf = Self::adj_buf(&mut adj, a, g.len());
                    let cc = F::from_f64(0.797_884_560_802_865_4);
                    let kk = F::from_f64(0.044715);
                    let half = F::from_f64(0.5);
                    let three_k = F::from_f64(3.0 * 0.044715);
                    for ((o, &gv), &x) in buf.iter_mut().zip(&g).zip(xd) {
                        let inner = cc * (x + kk * x * x * x);
                        let t = inner.tanh();
                        let sech2 = F::ONE - t * t;
                        let d_inner = cc * (F::ONE + three_k * x * x);
                        *o += gv * (half * (F::ONE + t) + half * x * sech2 * d_inner);
                    }
                }
                Op::Sigmoid { a } => {
                    let yd = &self.nodes[idx].data;
                    let buf = Self::adj_buf(&mut adj, a, g.len());
                    for ((o, &gv), &y) in buf.iter_mut().zip(&g).zip(yd) {
                        *o += gv * y * (F::ONE - y);
                    }
                }
                Op::Tanh { a } => {
                    let yd = &self.nodes[idx].data;
                    let buf = Self::adj_buf(&mut adj, a, g.len());
                    for ((o, &gv), &y) in buf.iter_mut().zip(&g).zip(yd) {
                        *o += gv * (F::ONE - y * y);
                    }
                }
                Op::Exp { a } => {
                    let yd = &self.nodes[idx].data;
                    let buf = Self::adj_buf(&mut adj, a, g.len());
                    for ((o, &gv), &y) in buf.iter_mut().zip(&g).zip(yd) {
                        *o += gv * y;
                    }
                }
                Op::Ln { a } => {
                    let xd = &self.nodes[a.0].data;
                    let buf = Self::adj_buf(&mut adj, a, g.len());
                    for ((o, &gv), &x) in buf.iter_mut().zip(&g).zip(xd) {
                        *o += gv / x;
                    }
                }
                Op::Softplus { a } => {
                    let xd = &self.nodes[a.0].data;
                    let buf = Self::adj_buf(&mut adj, a, g.len());
                    for ((o, &gv), &x) in buf.iter_mut().zip(&g).zip(xd) {
                        *o += gv * (F::ONE / (F::ONE + (-x).exp()));
                    }
                }
                Op::Clamp { a, lo, hi } => {
                    let (lf, hf) = (F::from_f64(lo), F::from_f64(hi));
                    let xd = &self.nodes[a.0].data;
                    let buf = Self::adj_buf(&mut adj, a, g.len());
                    for ((o, &gv), &x) in buf.iter_mut().zip(&g).zip(xd) {
                        if x > lf && x < hf {
                            *o += gv;
                        }
                    }
                }
                Op::Sum { a } => {
                    let numel = self.nodes[a.0].numel();
                    let gv = g[0];
                    let buf = Self::adj_buf(&mut adj, a, numel);
                    for o in buf.iter_mut() {
                        *o += gv;
                    }
                }
                Op::Mean { a } => {
                    let numel = self.nodes[a.0].numel();
                    let gv = g[0] / F::from_f64(numel as f64);
                    let buf = Self::adj_buf(&mut adj, a, numel);
                    for o in buf.iter_mut() {
                        *o += gv;
                    }
                }
                Op::Softmax { a, axis } => {
                    let y = &self.nodes[idx].data;
                    let rank = self.nodes[a.0].shape.len();
                    let (rows, cols) = self.rows_cols(a);
                    let row_major = rank == 1 || axis == 1;
                    let (groups, span, step, between) = if row_major {
                        (rows, cols, 1usize, cols)
                    } else {
                        (cols, rows, cols, 1usize)
                    };
                    let buf = Self::adj_buf(&mut adj, a, y.len());
                    for grp in 0..groups {
                        let base = grp * between;
                        let mut dot = F::ZERO;
                        for i in 0..span {
                            let f = base + i * step;
                            dot += g[f] * y[f];
                        }
                        for i in 0..span {
                            let f = base + i * step;
                            buf[f] += y[f] * (g[f] - dot);
                        }
                    }
                }
                Op::LogSoftmax { a, axis } => {
                    let y = &self.nodes[idx].data;
                    let rank = self.nodes[a.0].shape.len();
                    let (rows, cols) = self.rows_cols(a);
                    let row_major = rank == 1 || axis == 1;
                    let (groups, span, step, between) = if row_major {
                        (rows, cols, 1usize, cols)
                    } else {
                        (cols, rows, cols, 1usize)
                    };
                    let buf = Self::adj_buf(&mut adj, a, y.len());
                    for grp in 0..groups {
                        let base = grp * between;
                        let mut gsum = F::ZERO;
                        for i in 0..span {
                            gsum += g[base + i * step];
                        }
                        for i in 0..span {
                            let f = base + i * step;
                            buf[f] += g[f] - y[f].exp() * gsum;
                        }
                    }
                }
                Op::LayerNorm {
                    a,
                    gamma,
                    beta,
                    eps,
                } => {
                    let (rows, cols) = self.rows_cols(a);
                    let x = &self.nodes[a.0].data;
                    let gam = &self.nodes[gamma.0].data;
                    let inv_n = F::from_f64(1.0 / cols as f64);
                    let epsf = F::from_f64(eps);
                    let mut dx = vec![F::ZERO; x.len()];
                    let mut dgamma = vec![F::ZERO; cols];
                    let mut dbeta = vec![F::ZERO; cols];
                    let mut xhat = vec![F::ZERO; cols];
                    let mut dxhat = vec![F::ZERO; cols];
                    for r in 0..rows {
                        let row = &x[r * cols..(r + 1) * cols];
                        let grow = &g[r * cols..(r + 1) * cols];
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
                            xhat[c] = (row[c] - mean) * inv_std;
                            dxhat[c] = grow[c] * gam[c];
                            dgamma[c] += grow[c] * xhat[c];
                            dbeta[c] += grow[c];
                        }
                        let mut sum_dxhat = F::ZERO;
                        let mut sum_dxhat_xhat = F::ZERO;
                        for c in 0..cols {
                            sum_dxhat += dxhat[c];
                            sum_dxhat_xhat += dxhat[c] * xhat[c];
                        }
                        for c in 0..cols {
                            dx[r * cols + c] = inv_std
                                * (dxhat[c] - inv_n * sum_dxhat - xhat[c] * inv_n * sum_dxhat_xhat);
                        }
                    }
                    Self::add_into(&mut adj, a, &dx);
                    Self::add_into(&mut adj, gamma, &dgamma);
                    Self::add_into(&mut adj, beta, &dbeta);
                }
                Op::L2NormalizeRows { a } => {
                    let (rows, cols) = self.rows_cols(a);
                    let x = &self.nodes[a.0].data;
                    let y = &self.nodes[idx].data;
                    let buf = Self::adj_buf(&mut adj, a, x.len());
                    for r in 0..rows {
                        let row_x = &x[r * cols..(r + 1) * cols];
                        let row_y = &y[r * cols..(r + 1) * cols];
                        let row_g = &g[r * cols..(r + 1) * cols];
                        let mut sq = F::ZERO;
                        for &v in row_x {
                            sq += v * v;
                        }
                        let norm = sq.sqrt();
                        let mut dot = F::ZERO;
                        for (&gv, &yv) in row_g.iter().zip(row_y) {
                            dot += gv * yv;
                        }
                        for c in 0..cols {
                            buf[r * cols + c] += (row_g[c] - row_y[c] * dot) / norm;
                        }
                    }
                }
            }
        }
    }

    fn adj_buf<'a>(adj: &'a mut [Option<Vec<F>>], id: TensorId, numel: usize) -> &'a mut Vec<F> {
        adj[id.0].get_or_insert_with(|| vec![F::ZERO; numel])
    }

    fn add_into(adj: &mut [Option<Vec<F>>], id: TensorId, g: &[F]) {
        let buf = adj[id.0].get_or_insert_with(|| vec![F::ZERO; g.len()]);
        for (o, &gv) in buf.iter_mut().zip(g) {
            *o += gv;
        }
    }
}
