//! Elementwise, broadcasting, reduction, shape and matrix operations.

use super::{gemm, numel, strides, Tensor};
use crate::error::{arg_err, Result};

/// Numpy-style broadcast of two shapes (right-aligned).
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(arg_err!("cannot broadcast {a:?} with {b:?}")),
        };
    }
    Ok(out)
}

/// For each flat index of `out_shape`, the flat index into a tensor of `in_shape`
/// broadcast to it.
fn broadcast_index_map(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let rank = out_shape.len();
    let offset = rank - in_shape.len();
    let in_strides = strides(in_shape);
    let mut eff = vec![0usize; rank];
    for i in 0..in_shape.len() {
        eff[i + offset] = if in_shape[i] == 1 { 0 } else { in_strides[i] };
    }
    let n = numel(out_shape);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut flat = 0usize;
    for _ in 0..n {
        map.push(flat);
        for d in (0..rank).rev() {
            idx[d] += 1;
            flat += eff[d];
            if idx[d] < out_shape[d] {
                break;
            }
            flat -= eff[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

fn unary(x: &Tensor, f: impl Fn(f64) -> f64, df: impl Fn(f64, f64) -> f64 + 'static) -> Tensor {
    let data: Vec<f64> = x.data().iter().map(|&v| f(v)).collect();
    let xs = x.clone();
    let out_vals = data.clone();
    Tensor::from_op(
        x.shape().to_vec(),
        data,
        vec![x.clone()],
        Box::new(move |g| {
            let gx = g
                .iter()
                .zip(xs.data())
                .zip(&out_vals)
                .map(|((g, &xv), &yv)| g * df(xv, yv))
                .collect();
            vec![Some(gx)]
        }),
    )
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

impl Tensor {
    /// Materializes this tensor at a broadcast-compatible larger shape.
    pub fn broadcast_to(&self, shape: &[usize]) -> Result<Tensor> {
        let target = broadcast_shape(self.shape(), shape)?;
        if target != shape {
            return Err(arg_err!("cannot broadcast {:?} to {shape:?}", self.shape()));
        }
        if self.shape() == shape {
            return Ok(self.clone());
        }
        let map = broadcast_index_map(self.shape(), shape);
        let src = self.data();
        let data = map.iter().map(|&i| src[i]).collect();
        let n_in = self.numel();
        Ok(Tensor::from_op(
            shape.to_vec(),
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; n_in];
                for (&i, &gv) in map.iter().zip(g) {
                    gx[i] += gv;
                }
                vec![Some(gx)]
            }),
        ))
    }

    fn binary_same(
        &self,
        other: &Tensor,
        f: fn(f64, f64) -> f64,
        grads: fn(f64, f64, f64) -> (f64, f64),
    ) -> Tensor {
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| f(a, b))
            .collect();
        let (a, b) = (self.clone(), other.clone());
        Tensor::from_op(
            self.shape().to_vec(),
            data,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let n = g.len();
                let mut ga = Vec::with_capacity(n);
                let mut gb = Vec::with_capacity(n);
                for i in 0..n {
                    let (da, db) = grads(a.data()[i], b.data()[i], g[i]);
                    ga.push(da);
                    gb.push(db);
                }
                vec![
                    a.requires_grad().then_some(ga),
                    b.requires_grad().then_some(gb),
                ]
            }),
        )
    }

    fn binary(
        &self,
        other: &Tensor,
        f: fn(f64, f64) -> f64,
        grads: fn(f64, f64, f64) -> (f64, f64),
    ) -> Result<Tensor> {
        if self.shape() == other.shape() {
            return Ok(self.binary_same(other, f, grads));
        }
        let shape = broadcast_shape(self.shape(), other.shape())?;
        let a = self.broadcast_to(&shape)?;
        let b = other.broadcast_to(&shape)?;
        Ok(a.binary_same(&b, f, grads))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, |a, b| a + b, |_, _, g| (g, g))
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, |a, b| a - b, |_, _, g| (g, -g))
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, |a, b| a * b, |a, b, g| (g * b, g * a))
    }

    pub fn scale(&self, s: f64) -> Tensor {
        unary(self, |v| v * s, move |_, _| s)
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        unary(self, |v| v + s, |_, _| 1.0)
    }

    pub fn neg(&self) -> Tensor {
        self.scale(-1.0)
    }

    pub fn relu(&self) -> Tensor {
        unary(self, |v| v.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&self) -> Tensor {
        unary(
            self,
            |x| 0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh()),
            |x, _| {
                let u = GELU_K * (x + GELU_C * x * x * x);
                let t = u.tanh();
                let du = GELU_K * (1.0 + 3.0 * GELU_C * x * x);
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
            },
        )
    }

    pub fn sigmoid(&self) -> Tensor {
        unary(
            self,
            |x| {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            },
            |_, y| y * (1.0 - y),
        )
    }

    pub fn abs(&self) -> Tensor {
        unary(self, f64::abs, |x, _| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        })
    }

    pub fn square(&self) -> Tensor {
        unary(self, |x| x * x, |x, _| 2.0 * x)
    }

    pub fn sqrt(&self) -> Tensor {
        unary(self, f64::sqrt, |_, y| 0.5 / y)
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        let n = self.numel();
        Tensor::from_op(
            vec![1],
            vec![s],
            vec![self.clone()],
            Box::new(move |g| vec![Some(vec![g[0]; n])]),
        )
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum along one axis; the axis is kept with extent 1.
    pub fn sum_axis(&self, axis: usize) -> Result<Tensor> {
        self.check_axis(axis)?;
        let shape = self.shape().to_vec();
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        let x = self.data();
        for o in 0..outer {
            for a in 0..len {
                let base = (o * len + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += x[base + i];
                }
            }
        }
        let mut oshape = shape.clone();
        oshape[axis] = 1;
        Ok(Tensor::from_op(
            oshape,
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for a in 0..len {
                        let base = (o * len + a) * inner;
                        gx[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    pub fn mean_axis(&self, axis: usize) -> Result<Tensor> {
        self.check_axis(axis)?;
        let n = self.shape()[axis] as f64;
        Ok(self.sum_axis(axis)?.scale(1.0 / n))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel(shape) != self.numel() || shape.contains(&0) {
            return Err(arg_err!("cannot reshape {:?} to {shape:?}", self.shape()));
        }
        Ok(Tensor::from_op(
            shape.to_vec(),
            self.data().to_vec(),
            vec![self.clone()],
            Box::new(|g| vec![Some(g.to_vec())]),
        ))
    }

    /// General axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank
            || perm
                .iter()
                .any(|&p| p >= rank || std::mem::replace(&mut seen[p], true))
        {
            return Err(arg_err!("invalid permutation {perm:?} for rank {rank}"));
        }
        let in_shape = self.shape();
        let in_strides = strides(in_shape);
        let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
        let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let n = self.numel();
        // map[out_flat] = in_flat
        let mut map = Vec::with_capacity(n);
        let mut idx = vec![0usize; rank];
        let mut flat = 0usize;
        for _ in 0..n {
            map.push(flat);
            for d in (0..rank).rev() {
                idx[d] += 1;
                flat += src_strides[d];
                if idx[d] < out_shape[d] {
                    break;
                }
                flat -= src_strides[d] * idx[d];
                idx[d] = 0;
            }
        }
        let src = self.data();
        let data = map.iter().map(|&i| src[i]).collect();
        Ok(Tensor::from_op(
            out_shape,
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; n];
                for (&i, &gv) in map.iter().zip(g) {
                    gx[i] = gv;
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Swaps two axes.
    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor> {
        self.check_axis(a)?;
        self.check_axis(b)?;
        let mut perm: Vec<usize> = (0..self.rank()).collect();
        perm.swap(a, b);
        self.permute(&perm)
    }

    /// Concatenation along `axis`; all other extents must agree.
    pub fn cat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| arg_err!("cat of zero tensors"))?;
        first.check_axis(axis)?;
        let shape = first.shape();
        for p in parts {
            if p.rank() != shape.len()
                || p.shape()
                    .iter()
                    .enumerate()
                    .any(|(i, &d)| i != axis && d != shape[i])
            {
                return Err(arg_err!(
                    "cat along {axis}: incompatible shapes {shape:?} and {:?}",
                    p.shape()
                ));
            }
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let lens: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                data.extend_from_slice(&p.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut oshape = shape.to_vec();
        oshape[axis] = total;
        let lens_c = lens.clone();
        Ok(Tensor::from_op(
            oshape,
            data,
            parts.to_vec(),
            Box::new(move |g| {
                let mut grads: Vec<Vec<f64>> = lens_c
                    .iter()
                    .map(|&l| Vec::with_capacity(outer * l * inner))
                    .collect();
                let mut off = 0;
                for _ in 0..outer {
                    for (gp, &l) in grads.iter_mut().zip(&lens_c) {
                        gp.extend_from_slice(&g[off..off + l * inner]);
                        off += l * inner;
                    }
                }
                grads.into_iter().map(Some).collect()
            }),
        ))
    }

    /// Plain 2-D matrix product `[m,k] @ [k,n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        self.expect_rank(2, "matmul")?;
        other.expect_rank(2, "matmul")?;
        let a3 = self.reshape(&[1, self.shape()[0], self.shape()[1]])?;
        let b3 = other.reshape(&[1, other.shape()[0], other.shape()[1]])?;
        let out = a3.bmm(&b3, false)?;
        let s = out.shape().to_vec();
        out.reshape(&s[1..])
    }

    /// Batched product `[B,m,k] @ [B,k,n]`, or `[B,m,k] @ [B,n,k]ᵀ` when `trans_b`.
    pub fn bmm(&self, other: &Tensor, trans_b: bool) -> Result<Tensor> {
        self.expect_rank(3, "bmm")?;
        other.expect_rank(3, "bmm")?;
        let (bs, m, k) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (bs2, r1, r2) = (other.shape()[0], other.shape()[1], other.shape()[2]);
        let (kb, n) = if trans_b { (r2, r1) } else { (r1, r2) };
        if bs != bs2 || k != kb {
            return Err(arg_err!(
                "bmm shape mismatch {:?} x {:?} (trans_b={trans_b})",
                self.shape(),
                other.shape()
            ));
        }
        let mut out = vec![0.0; bs * m * n];
        for b in 0..bs {
            gemm(
                m,
                k,
                n,
                &self.data()[b * m * k..(b + 1) * m * k],
                false,
                &other.data()[b * k * n..(b + 1) * k * n],
                trans_b,
                &mut out[b * m * n..(b + 1) * m * n],
                false,
            );
        }
        let (a, bt) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            vec![bs, m, n],
            out,
            vec![self.clone(), other.clone()],
            Box::new(move |g| {
                let ga = a.requires_grad().then(|| {
                    let mut ga = vec![0.0; bs * m * k];
                    for b in 0..bs {
                        // dA = G @ op(B)ᵀ
                        gemm(
                            m,
                            n,
                            k,
                            &g[b * m * n..(b + 1) * m * n],
                            false,
                            &bt.data()[b * k * n..(b + 1) * k * n],
                            !trans_b,
                            &mut ga[b * m * k..(b + 1) * m * k],
                            false,
                        );
                    }
                    ga
                });
                let gb = bt.requires_grad().then(|| {
                    let mut gb = vec![0.0; bs * k * n];
                    for b in 0..bs {
                        let gs = &g[b * m * n..(b + 1) * m * n];
                        let asl = &a.data()[b * m * k..(b + 1) * m * k];
                        let dst = &mut gb[b * k * n..(b + 1) * k * n];
                        if trans_b {
                            // B is [n,k]: dB = Gᵀ @ A
                            gemm(n, m, k, gs, true, asl, false, dst, false);
                        } else {
                            // dB = Aᵀ @ G
                            gemm(k, m, n, asl, true, gs, false, dst, false);
                        }
                    }
                    gb
                });
                vec![ga, gb]
            }),
        ))
    }

    /// Affine layer over the last axis: `x @ weight + bias`, weight `[in, out]`.
    pub fn linear(&self, weight: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        weight.expect_rank(2, "linear weight")?;
        let in_dim = *self.shape().last().unwrap();
        if weight.shape()[0] != in_dim {
            return Err(arg_err!(
                "linear: input width {in_dim} vs weight {:?}",
                weight.shape()
            ));
        }
        let rows = self.numel() / in_dim;
        let out_dim = weight.shape()[1];
        let y = self.reshape(&[rows, in_dim])?.matmul(weight)?;
        let y = match bias {
            Some(b) => {
                if b.shape() != [out_dim] {
                    return Err(arg_err!("linear bias shape {:?}", b.shape()));
                }
                y.add(b)?
            }
            None => y,
        };
        let mut oshape = self.shape().to_vec();
        *oshape.last_mut().unwrap() = out_dim;
        y.reshape(&oshape)
    }

    /// Row gather from a `[R, C]` table: output `[indices.len(), C]`.
    /// Gradients scatter-add back into the selected rows.
    pub fn index_select_rows(&self, indices: &[usize]) -> Result<Tensor> {
        self.expect_rank(2, "index_select_rows")?;
        let (r, c) = (self.shape()[0], self.shape()[1]);
        if indices.is_empty() {
            return Err(arg_err!("index_select_rows with no indices"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= r) {
            return Err(arg_err!("row index {bad} out of range for {r} rows"));
        }
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            data.extend_from_slice(&self.data()[i * c..(i + 1) * c]);
        }
        let idx = indices.to_vec();
        Ok(Tensor::from_op(
            vec![indices.len(), c],
            data,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gt = vec![0.0; r * c];
                for (row, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        gt[i * c + j] += g[row * c + j];
                    }
                }
                vec![Some(gt)]
            }),
        ))
    }
}
