use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::linalg::{matmul_nn, matmul_nt, matmul_tn};
use super::Tensor;
use crate::error::{Error, Result};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// How the operand shapes of an elementwise op line up. Broadcasting is over
/// leading dimensions only: the smaller shape must be a suffix of the larger.
enum Align {
    Equal,
    RhsSmaller,
    LhsSmaller,
}

fn align(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Result<Align> {
    if lhs == rhs {
        return Ok(Align::Equal);
    }
    if lhs.len() >= rhs.len() && lhs[lhs.len() - rhs.len()..] == *rhs {
        return Ok(Align::RhsSmaller);
    }
    if rhs.len() >= lhs.len() && rhs[rhs.len() - lhs.len()..] == *lhs {
        return Ok(Align::LhsSmaller);
    }
    Err(Error::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    })
}

/// Sums a gradient of `big_len` values down to the broadcast operand's size.
fn reduce_to(g: &[f64], small_len: usize) -> Vec<f64> {
    let mut out = vec![0.0; small_len];
    for (i, v) in g.iter().enumerate() {
        out[i % small_len] += v;
    }
    out
}

fn lane_geometry(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let axis_len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, axis_len, inner)
}

impl Tensor {
    /// Standard-normal samples from a deterministic generator.
    pub fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            // Box-Muller, consuming uniforms in a fixed order.
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            data.push(r * theta.cos());
            if data.len() < n {
                data.push(r * theta.sin());
            }
        }
        Tensor::from_vec(shape, data).expect("sample count matches shape")
    }

    /// Normal(0, std) truncated to ±2 std by resampling.
    pub fn trunc_normal(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
            if z.abs() <= 2.0 {
                data.push(z * std);
            }
        }
        Tensor::from_vec(shape, data).expect("sample count matches shape")
    }

    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        let kind = align("add", self.shape(), rhs.shape())?;
        let (a, b) = (self.data(), rhs.data());
        let (out, out_shape): (Vec<f64>, Vec<usize>) = match kind {
            Align::Equal | Align::RhsSmaller => (
                a.iter()
                    .enumerate()
                    .map(|(i, v)| v + b[i % b.len()])
                    .collect(),
                self.shape().to_vec(),
            ),
            Align::LhsSmaller => (
                b.iter()
                    .enumerate()
                    .map(|(i, v)| a[i % a.len()] + v)
                    .collect(),
                rhs.shape().to_vec(),
            ),
        };
        drop(a);
        drop(b);
        let (la, lb) = (self.len(), rhs.len());
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                let da = if g.len() == la {
                    g.to_vec()
                } else {
                    reduce_to(g, la)
                };
                let db = if g.len() == lb {
                    g.to_vec()
                } else {
                    reduce_to(g, lb)
                };
                vec![Some(da), Some(db)]
            }),
        ))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        let kind = align("sub", self.shape(), rhs.shape())?;
        let (a, b) = (self.data(), rhs.data());
        let (out, out_shape): (Vec<f64>, Vec<usize>) = match kind {
            Align::Equal | Align::RhsSmaller => (
                a.iter()
                    .enumerate()
                    .map(|(i, v)| v - b[i % b.len()])
                    .collect(),
                self.shape().to_vec(),
            ),
            Align::LhsSmaller => (
                b.iter()
                    .enumerate()
                    .map(|(i, v)| a[i % a.len()] - v)
                    .collect(),
                rhs.shape().to_vec(),
            ),
        };
        drop(a);
        drop(b);
        let (la, lb) = (self.len(), rhs.len());
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                let da = if g.len() == la {
                    g.to_vec()
                } else {
                    reduce_to(g, la)
                };
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                let db = if neg.len() == lb {
                    neg
                } else {
                    reduce_to(&neg, lb)
                };
                vec![Some(da), Some(db)]
            }),
        ))
    }

    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        let kind = align("mul", self.shape(), rhs.shape())?;
        let (a, b) = (self.data(), rhs.data());
        let (out, out_shape): (Vec<f64>, Vec<usize>) = match kind {
            Align::Equal | Align::RhsSmaller => (
                a.iter()
                    .enumerate()
                    .map(|(i, v)| v * b[i % b.len()])
                    .collect(),
                self.shape().to_vec(),
            ),
            Align::LhsSmaller => (
                b.iter()
                    .enumerate()
                    .map(|(i, v)| a[i % a.len()] * v)
                    .collect(),
                rhs.shape().to_vec(),
            ),
        };
        let (av, bv) = (a.clone(), b.clone());
        drop(a);
        drop(b);
        let (la, lb) = (self.len(), rhs.len());
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                let big = g.len();
                let mut da_big = vec![0.0; big];
                let mut db_big = vec![0.0; big];
                for i in 0..big {
                    da_big[i] = g[i] * bv[i % bv.len()];
                    db_big[i] = g[i] * av[i % av.len()];
                }
                let da = if la == big {
                    da_big
                } else {
                    reduce_to(&da_big, la)
                };
                let db = if lb == big {
                    db_big
                } else {
                    reduce_to(&db_big, lb)
                };
                vec![Some(da), Some(db)]
            }),
        ))
    }

    pub fn scale(&self, c: f64) -> Tensor {
        let out = self.data().iter().map(|v| v * c).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g| vec![Some(g.iter().map(|v| v * c).collect())]),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Tensor {
        let out = self.data().iter().map(|v| v + c).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(|g| vec![Some(g.to_vec())]),
        )
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn sum(&self) -> Tensor {
        let total: f64 = self.data().iter().sum();
        let n = self.len();
        Tensor::from_op(
            vec![],
            vec![total],
            vec![self.clone()],
            Box::new(move |g| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor {
        let n = self.len();
        let total: f64 = self.data().iter().sum();
        Tensor::from_op(
            vec![],
            vec![total / n as f64],
            vec![self.clone()],
            Box::new(move |g| vec![Some(vec![g[0] / n as f64; n])]),
        )
    }

    /// Matrix product over the trailing two axes. Leading axes must match
    /// exactly, or `rhs` may be rank-2 and is then shared across the batch.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let ls = self.shape();
        let rs = rhs.shape();
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: ls.to_vec(),
            rhs: rs.to_vec(),
        };
        if ls.len() < 2 || rs.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (ls[ls.len() - 2], ls[ls.len() - 1]);
        let (k2, n) = (rs[rs.len() - 2], rs[rs.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let shared_rhs = rs.len() == 2 && ls.len() > 2;
        if !shared_rhs && ls[..ls.len() - 2] != rs[..rs.len() - 2] {
            return Err(mismatch());
        }
        let batch: usize = ls[..ls.len() - 2].iter().product();

        let a = self.data();
        let b = rhs.data();
        let mut out = vec![0.0; batch * m * n];
        for l in 0..batch {
            let a_l = &a[l * m * k..(l + 1) * m * k];
            let b_l = if shared_rhs {
                &b[..]
            } else {
                &b[l * k * n..(l + 1) * k * n]
            };
            matmul_nn(a_l, b_l, m, k, n, &mut out[l * m * n..(l + 1) * m * n]);
        }
        let mut out_shape = ls[..ls.len() - 2].to_vec();
        out_shape.push(m);
        out_shape.push(n);

        let (av, bv) = (a.clone(), b.clone());
        drop(a);
        drop(b);
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                let mut da = vec![0.0; batch * m * k];
                let mut db = vec![0.0; if shared_rhs { k * n } else { batch * k * n }];
                for l in 0..batch {
                    let g_l = &g[l * m * n..(l + 1) * m * n];
                    let a_l = &av[l * m * k..(l + 1) * m * k];
                    let b_l = if shared_rhs {
                        &bv[..]
                    } else {
                        &bv[l * k * n..(l + 1) * k * n]
                    };
                    matmul_nt(g_l, b_l, m, n, k, &mut da[l * m * k..(l + 1) * m * k]);
                    if shared_rhs {
                        matmul_tn(a_l, g_l, m, k, n, &mut db);
                    } else {
                        matmul_tn(a_l, g_l, m, k, n, &mut db[l * k * n..(l + 1) * k * n]);
                    }
                }
                vec![Some(da), Some(db)]
            }),
        ))
    }

    /// Swaps two axes (copying).
    pub fn transpose(&self, ax0: usize, ax1: usize) -> Result<Tensor> {
        let rank = self.rank();
        for ax in [ax0, ax1] {
            if ax >= rank {
                return Err(Error::InvalidAxis { axis: ax, rank });
            }
        }
        let (out, out_shape) = transpose_raw(&self.data(), self.shape(), ax0, ax1);
        Ok(Tensor::from_op(
            out_shape.clone(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let (back, _) = transpose_raw(g, &out_shape, ax0, ax1);
                vec![Some(back)]
            }),
        ))
    }

    pub fn reshape(&self, new_shape: &[usize]) -> Result<Tensor> {
        let n: usize = new_shape.iter().product();
        if n != self.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: new_shape.to_vec(),
            });
        }
        Ok(Tensor::from_op(
            new_shape.to_vec(),
            self.to_vec(),
            vec![self.clone()],
            Box::new(|g| vec![Some(g.to_vec())]),
        ))
    }

    /// Concatenates along `axis`; all other dimensions must match.
    pub fn concat(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
        let first = parts.first().ok_or(Error::EmptyInput)?;
        let rank = first.rank();
        if axis >= rank {
            return Err(Error::InvalidAxis { axis, rank });
        }
        let mut axis_total = 0;
        for p in parts {
            if p.rank() != rank
                || p.shape()[..axis] != first.shape()[..axis]
                || p.shape()[axis + 1..] != first.shape()[axis + 1..]
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            axis_total += p.shape()[axis];
        }
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = axis_total;
        let (outer, _, inner) = lane_geometry(&out_shape, axis);

        let mut out = vec![0.0; outer * axis_total * inner];
        let mut offset = 0;
        let mut part_axis_lens = Vec::with_capacity(parts.len());
        for p in parts {
            let pa = p.shape()[axis];
            part_axis_lens.push(pa);
            let data = p.data();
            for o in 0..outer {
                let src = &data[o * pa * inner..(o + 1) * pa * inner];
                let dst_base = o * axis_total * inner + offset * inner;
                out[dst_base..dst_base + pa * inner].copy_from_slice(src);
            }
            offset += pa;
        }

        let parents: Vec<Tensor> = parts.iter().map(|p| (*p).clone()).collect();
        Ok(Tensor::from_op(
            out_shape,
            out,
            parents,
            Box::new(move |g| {
                let mut grads = Vec::with_capacity(part_axis_lens.len());
                let mut offset = 0;
                for &pa in &part_axis_lens {
                    let mut pg = vec![0.0; outer * pa * inner];
                    for o in 0..outer {
                        let src_base = o * axis_total * inner + offset * inner;
                        pg[o * pa * inner..(o + 1) * pa * inner]
                            .copy_from_slice(&g[src_base..src_base + pa * inner]);
                    }
                    grads.push(Some(pg));
                    offset += pa;
                }
                grads
            }),
        ))
    }

    /// Stacks equally-shaped tensors along a new leading axis.
    pub fn stack(parts: &[&Tensor]) -> Result<Tensor> {
        let first = parts.first().ok_or(Error::EmptyInput)?;
        let mut lifted_shape = vec![1usize];
        lifted_shape.extend_from_slice(first.shape());
        let lifted: Vec<Tensor> = parts
            .iter()
            .map(|p| p.reshape(&lifted_shape))
            .collect::<Result<_>>()?;
        let refs: Vec<&Tensor> = lifted.iter().collect();
        Tensor::concat(&refs, 0)
    }

    /// Gathers slices along `axis` by index. Repeated indices are allowed;
    /// their gradients scatter-add back.
    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        if axis >= rank {
            return Err(Error::InvalidAxis { axis, rank });
        }
        let (outer, axis_len, inner) = lane_geometry(self.shape(), axis);
        for &idx in indices {
            if idx >= axis_len {
                return Err(Error::OffsetOutOfRange {
                    offset: idx,
                    total: axis_len,
                });
            }
        }
        let sel = indices.len();
        let data = self.data();
        let mut out = vec![0.0; outer * sel * inner];
        for o in 0..outer {
            for (j, &idx) in indices.iter().enumerate() {
                let src = o * axis_len * inner + idx * inner;
                let dst = o * sel * inner + j * inner;
                out[dst..dst + inner].copy_from_slice(&data[src..src + inner]);
            }
        }
        drop(data);
        let mut out_shape = self.shape().to_vec();
        out_shape[axis] = sel;
        let idx_owned = indices.to_vec();
        Ok(Tensor::from_op(
            out_shape,
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dg = vec![0.0; outer * axis_len * inner];
                for o in 0..outer {
                    for (j, &idx) in idx_owned.iter().enumerate() {
                        let dst = o * axis_len * inner + idx * inner;
                        let src = o * sel * inner + j * inner;
                        for t in 0..inner {
                            dg[dst + t] += g[src + t];
                        }
                    }
                }
                vec![Some(dg)]
            }),
        ))
    }

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        let rank = self.rank();
        if axis >= rank {
            return Err(Error::InvalidAxis { axis, rank });
        }
        let (outer, axis_len, inner) = lane_geometry(self.shape(), axis);
        let data = self.data();
        let mut out = vec![0.0; data.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * axis_len * inner + j * inner + i;
                let mut max = f64::NEG_INFINITY;
                for j in 0..axis_len {
                    max = max.max(data[at(j)]);
                }
                let mut total = 0.0;
                for j in 0..axis_len {
                    let e = (data[at(j)] - max).exp();
                    out[at(j)] = e;
                    total += e;
                }
                for j in 0..axis_len {
                    out[at(j)] /= total;
                }
            }
        }
        drop(data);
        let s = out.clone();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * axis_len * inner + j * inner + i;
                        let mut dot = 0.0;
                        for j in 0..axis_len {
                            dot += g[at(j)] * s[at(j)];
                        }
                        for j in 0..axis_len {
                            dx[at(j)] = s[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// log(softmax(x)) computed stably in one pass.
    pub fn log_softmax(&self, axis: usize) -> Result<Tensor> {
        let rank = self.rank();
        if axis >= rank {
            return Err(Error::InvalidAxis { axis, rank });
        }
        let (outer, axis_len, inner) = lane_geometry(self.shape(), axis);
        let data = self.data();
        let mut out = vec![0.0; data.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * axis_len * inner + j * inner + i;
                let mut max = f64::NEG_INFINITY;
                for j in 0..axis_len {
                    max = max.max(data[at(j)]);
                }
                let mut total = 0.0;
                for j in 0..axis_len {
                    total += (data[at(j)] - max).exp();
                }
                let log_z = max + total.ln();
                for j in 0..axis_len {
                    out[at(j)] = data[at(j)] - log_z;
                }
            }
        }
        drop(data);
        let lsm = out.clone();
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut dx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * axis_len * inner + j * inner + i;
                        let mut g_sum = 0.0;
                        for j in 0..axis_len {
                            g_sum += g[at(j)];
                        }
                        for j in 0..axis_len {
                            dx[at(j)] = g[at(j)] - lsm[at(j)].exp() * g_sum;
                        }
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Layer normalization over the last axis, then affine (`gamma`, `beta`).
    /// Uses population variance; `eps` sits inside the square root.
    pub fn layernorm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let d = *self.shape().last().ok_or(Error::InvalidShape {
            op: "layernorm",
            shape: vec![],
            reason: "rank must be >= 1".into(),
        })?;
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::ShapeMismatch {
                op: "layernorm",
                lhs: self.shape().to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        let rows = self.len() / d;
        let data = self.data();
        let gm = gamma.data();
        let bt = beta.data();
        let mut out = vec![0.0; data.len()];
        let mut xhat = vec![0.0; data.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &data[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let xh = (row[j] - mean) * inv;
                xhat[r * d + j] = xh;
                out[r * d + j] = gm[j] * xh + bt[j];
            }
        }
        let gm_v = gm.clone();
        drop(data);
        drop(gm);
        drop(bt);
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g| {
                let mut dx = vec![0.0; g.len()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                for (r, &inv) in inv_std.iter().enumerate() {
                    let base = r * d;
                    let mut mean_dxhat = 0.0;
                    let mut mean_dxhat_xhat = 0.0;
                    for j in 0..d {
                        let gj = g[base + j];
                        let xh = xhat[base + j];
                        dgamma[j] += gj * xh;
                        dbeta[j] += gj;
                        let dxh = gj * gm_v[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xh;
                    }
                    mean_dxhat /= d as f64;
                    mean_dxhat_xhat /= d as f64;
                    for j in 0..d {
                        let dxh = g[base + j] * gm_v[j];
                        dx[base + j] =
                            inv * (dxh - mean_dxhat - xhat[base + j] * mean_dxhat_xhat);
                    }
                }
                vec![Some(dx), Some(dgamma), Some(dbeta)]
            }),
        ))
    }

    /// GELU activation, tanh approximation.
    pub fn gelu(&self) -> Tensor {
        let x = self.to_vec();
        let out = x.iter().map(|&v| gelu_scalar(v)).collect();
        Tensor::from_op(
            self.shape().to_vec(),
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let dx = g
                    .iter()
                    .zip(&x)
                    .map(|(gv, &v)| gv * gelu_derivative(v))
                    .collect();
                vec![Some(dx)]
            }),
        )
    }
}

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * GELU_A * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

fn transpose_raw(data: &[f64], shape: &[usize], ax0: usize, ax1: usize) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let mut out_shape = shape.to_vec();
    out_shape.swap(ax0, ax1);

    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    // Strides of the output index decomposition, mapped back to input axes.
    let mut map_strides = vec![1usize; rank];
    for (i, s) in map_strides.iter_mut().enumerate() {
        let src_axis = if i == ax0 {
            ax1
        } else if i == ax1 {
            ax0
        } else {
            i
        };
        *s = in_strides[src_axis];
    }

    let n: usize = shape.iter().product();
    let mut out = vec![0.0; n];
    for (flat, slot) in out.iter_mut().enumerate() {
        let mut rem = flat;
        let mut src = 0;
        for (dim_i, &dim) in out_shape.iter().enumerate() {
            let tail: usize = out_shape[dim_i + 1..].iter().product();
            let coord = rem / tail.max(1) % dim;
            rem %= tail.max(1);
            src += coord * map_strides[dim_i];
        }
        *slot = data[src];
    }
    (out, out_shape)
}
