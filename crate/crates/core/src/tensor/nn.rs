//! Neural-network operators on `[N, C, H, W]` maps and feature rows.

use super::{gemm, Tensor};
use crate::error::{arg_err, Result};

fn dims4(x: &Tensor, what: &str) -> Result<(usize, usize, usize, usize)> {
    x.expect_rank(4, what)?;
    let s = x.shape();
    Ok((s[0], s[1], s[2], s[3]))
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    /// `[C*kh*kw, oh*ow]` patch matrix for one image, zero outside the map.
    fn im2col(&self, img: &[f64]) -> Vec<f64> {
        let p = self.oh * self.ow;
        let mut cols = vec![0.0; self.c * self.kh * self.kw * p];
        for ci in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let dst = &mut cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src = &img[(ci * self.h + iy as usize) * self.w..];
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[oy * self.ow + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let p = self.oh * self.ow;
        for ci in 0..self.c {
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let row = (ci * self.kh + ky) * self.kw + kx;
                    let src = &cols[row * p..(row + 1) * p];
                    for oy in 0..self.oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let base = (ci * self.h + iy as usize) * self.w;
                        for ox in 0..self.ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                img[base + ix as usize] += src[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

impl Tensor {
    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        self.check_axis(axis)?;
        let shape = self.shape();
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let m = (0..len).map(|a| x[at(a)]).fold(f64::NEG_INFINITY, f64::max);
                let mut s = 0.0;
                for a in 0..len {
                    let e = (x[at(a)] - m).exp();
                    y[at(a)] = e;
                    s += e;
                }
                for a in 0..len {
                    y[at(a)] /= s;
                }
            }
        }
        let yv = y.clone();
        Ok(Tensor::from_op(
            shape.to_vec(),
            y,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| (o * len + a) * inner + i;
                        let dot: f64 = (0..len).map(|a| g[at(a)] * yv[at(a)]).sum();
                        for a in 0..len {
                            gx[at(a)] = yv[at(a)] * (g[at(a)] - dot);
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta` of width C.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let c = *self.shape().last().unwrap();
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(arg_err!(
                "layer_norm: width {c}, gamma {:?}, beta {:?}",
                gamma.shape(),
                beta.shape()
            ));
        }
        let rows = self.numel() / c;
        let x = self.data();
        let mut xhat = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        let mut y = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * c..(r + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[r * c + j] = h;
                y[r * c + j] = h * gamma.data()[j] + beta.data()[j];
            }
        }
        let (gm, bt, xin) = (gamma.clone(), beta.clone(), self.clone());
        Ok(Tensor::from_op(
            self.shape().to_vec(),
            y,
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; g.len()];
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                for r in 0..rows {
                    let gr = &g[r * c..(r + 1) * c];
                    let hr = &xhat[r * c..(r + 1) * c];
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for j in 0..c {
                        gg[j] += gr[j] * hr[j];
                        gb[j] += gr[j];
                        let d = gr[j] * gm.data()[j];
                        m1 += d;
                        m2 += d * hr[j];
                    }
                    m1 /= c as f64;
                    m2 /= c as f64;
                    for j in 0..c {
                        let d = gr[j] * gm.data()[j];
                        gx[r * c + j] = inv_std[r] * (d - m1 - hr[j] * m2);
                    }
                }
                vec![
                    xin.requires_grad().then_some(gx),
                    gm.requires_grad().then_some(gg),
                    bt.requires_grad().then_some(gb),
                ]
            }),
        ))
    }

    /// 2-D cross-correlation with symmetric zero padding.
    pub fn conv2d(
        &self,
        weight: &Tensor,
        bias: Option<&Tensor>,
        stride: usize,
        padding: usize,
    ) -> Result<Tensor> {
        let (n, c, h, w) = dims4(self, "conv2d input")?;
        let (o, wc, kh, kw) = dims4(weight, "conv2d weight")?;
        if stride == 0 {
            return Err(arg_err!("conv2d stride must be >= 1"));
        }
        if wc != c {
            return Err(arg_err!(
                "conv2d: input has {c} channels, weight {:?}",
                weight.shape()
            ));
        }
        if kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(arg_err!(
                "conv2d: kernel {kh}x{kw} exceeds padded input {}x{}",
                h + 2 * padding,
                w + 2 * padding
            ));
        }
        if let Some(b) = bias {
            if b.shape() != [o] {
                return Err(arg_err!("conv2d bias shape {:?}, want [{o}]", b.shape()));
            }
        }
        let geom = ConvGeom {
            c,
            h,
            w,
            kh,
            kw,
            stride,
            pad: padding,
            oh: (h + 2 * padding - kh) / stride + 1,
            ow: (w + 2 * padding - kw) / stride + 1,
        };
        let p = geom.oh * geom.ow;
        let ckk = c * kh * kw;
        let mut out = vec![0.0; n * o * p];
        let mut all_cols = Vec::with_capacity(n);
        for b in 0..n {
            let cols = geom.im2col(&self.data()[b * c * h * w..(b + 1) * c * h * w]);
            let dst = &mut out[b * o * p..(b + 1) * o * p];
            gemm(o, ckk, p, weight.data(), false, &cols, false, dst, false);
            if let Some(bv) = bias {
                for oc in 0..o {
                    let bval = bv.data()[oc];
                    dst[oc * p..(oc + 1) * p]
                        .iter_mut()
                        .for_each(|v| *v += bval);
                }
            }
            all_cols.push(cols);
        }
        let (x, wt) = (self.clone(), weight.clone());
        let has_bias = bias.is_some();
        let bias_rg = bias.map(|b| b.requires_grad()).unwrap_or(false);
        let mut parents = vec![self.clone(), weight.clone()];
        if let Some(b) = bias {
            parents.push(b.clone());
        }
        let (oh, ow) = (geom.oh, geom.ow);
        Ok(Tensor::from_op(
            vec![n, o, oh, ow],
            out,
            parents,
            Box::new(move |g| {
                let gw = wt.requires_grad().then(|| {
                    let mut gw = vec![0.0; o * ckk];
                    for (b, cols) in all_cols.iter().enumerate() {
                        gemm(
                            o,
                            p,
                            ckk,
                            &g[b * o * p..(b + 1) * o * p],
                            false,
                            cols,
                            true,
                            &mut gw,
                            true,
                        );
                    }
                    gw
                });
                let gx = x.requires_grad().then(|| {
                    let mut gx = vec![0.0; n * c * h * w];
                    let mut dcols = vec![0.0; ckk * p];
                    for b in 0..n {
                        gemm(
                            ckk,
                            o,
                            p,
                            wt.data(),
                            true,
                            &g[b * o * p..(b + 1) * o * p],
                            false,
                            &mut dcols,
                            false,
                        );
                        geom.col2im(&dcols, &mut gx[b * c * h * w..(b + 1) * c * h * w]);
                    }
                    gx
                });
                let mut res = vec![gx, gw];
                if has_bias {
                    res.push(bias_rg.then(|| {
                        let mut gb = vec![0.0; o];
                        for b in 0..n {
                            for (oc, gbv) in gb.iter_mut().enumerate() {
                                *gbv += g[(b * o + oc) * p..(b * o + oc + 1) * p]
                                    .iter()
                                    .sum::<f64>();
                            }
                        }
                        gb
                    }));
                }
                res
            }),
        ))
    }

    /// Average pooling with a square window and no padding.
    pub fn avg_pool2d(&self, kernel: usize, stride: usize) -> Result<Tensor> {
        let (n, c, h, w) = dims4(self, "avg_pool2d")?;
        if kernel == 0 || stride == 0 || kernel > h || kernel > w {
            return Err(arg_err!(
                "avg_pool2d: kernel {kernel}, stride {stride} on {h}x{w}"
            ));
        }
        let oh = (h - kernel) / stride + 1;
        let ow = (w - kernel) / stride + 1;
        let norm = 1.0 / (kernel * kernel) as f64;
        let x = self.data();
        let mut out = vec![0.0; n * c * oh * ow];
        for nc in 0..n * c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = 0.0;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            s += x[(nc * h + oy * stride + ky) * w + ox * stride + kx];
                        }
                    }
                    out[(nc * oh + oy) * ow + ox] = s * norm;
                }
            }
        }
        Ok(Tensor::from_op(
            vec![n, c, oh, ow],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; n * c * h * w];
                for nc in 0..n * c {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = g[(nc * oh + oy) * ow + ox] * norm;
                            for ky in 0..kernel {
                                for kx in 0..kernel {
                                    gx[(nc * h + oy * stride + ky) * w + ox * stride + kx] += gv;
                                }
                            }
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Spatial mean per channel: `[N,C,H,W] -> [N,C,1,1]`.
    pub fn global_avg_pool(&self) -> Result<Tensor> {
        let (n, c, h, w) = dims4(self, "global_avg_pool")?;
        self.reshape(&[n, c, h * w])?
            .mean_axis(2)?
            .reshape(&[n, c, 1, 1])
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(&self, factor: usize) -> Result<Tensor> {
        let (n, c, h, w) = dims4(self, "upsample_nearest")?;
        if factor == 0 {
            return Err(arg_err!("upsample factor must be >= 1"));
        }
        let (oh, ow) = (h * factor, w * factor);
        let x = self.data();
        let mut out = vec![0.0; n * c * oh * ow];
        for nc in 0..n * c {
            for y in 0..oh {
                for xx in 0..ow {
                    out[(nc * oh + y) * ow + xx] = x[(nc * h + y / factor) * w + xx / factor];
                }
            }
        }
        Ok(Tensor::from_op(
            vec![n, c, oh, ow],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; n * c * h * w];
                for nc in 0..n * c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            gx[(nc * h + y / factor) * w + xx / factor] +=
                                g[(nc * oh + y) * ow + xx];
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Nearest-neighbour downsampling: keeps the top-left sample of each cell.
    pub fn downsample_nearest(&self, factor: usize) -> Result<Tensor> {
        let (n, c, h, w) = dims4(self, "downsample_nearest")?;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(arg_err!(
                "downsample factor {factor} does not divide {h}x{w}"
            ));
        }
        let (oh, ow) = (h / factor, w / factor);
        let x = self.data();
        let mut out = vec![0.0; n * c * oh * ow];
        for nc in 0..n * c {
            for y in 0..oh {
                for xx in 0..ow {
                    out[(nc * oh + y) * ow + xx] = x[(nc * h + y * factor) * w + xx * factor];
                }
            }
        }
        Ok(Tensor::from_op(
            vec![n, c, oh, ow],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; n * c * h * w];
                for nc in 0..n * c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            gx[(nc * h + y * factor) * w + xx * factor] =
                                g[(nc * oh + y) * ow + xx];
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Edge-replicating padding of `pad` pixels on every side.
    pub fn pad_replicate(&self, pad: usize) -> Result<Tensor> {
        let (n, c, h, w) = dims4(self, "pad_replicate")?;
        let (oh, ow) = (h + 2 * pad, w + 2 * pad);
        let src = move |o: usize, len: usize| {
            (o as isize - pad as isize).clamp(0, len as isize - 1) as usize
        };
        let x = self.data();
        let mut out = vec![0.0; n * c * oh * ow];
        for nc in 0..n * c {
            for y in 0..oh {
                for xx in 0..ow {
                    out[(nc * oh + y) * ow + xx] = x[(nc * h + src(y, h)) * w + src(xx, w)];
                }
            }
        }
        Ok(Tensor::from_op(
            vec![n, c, oh, ow],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; n * c * h * w];
                for nc in 0..n * c {
                    for y in 0..oh {
                        for xx in 0..ow {
                            gx[(nc * h + src(y, h)) * w + src(xx, w)] += g[(nc * oh + y) * ow + xx];
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }

    /// Doubles the spatial size placing inputs at even coordinates and zeros elsewhere.
    pub fn zero_insert2(&self) -> Result<Tensor> {
        let (n, c, h, w) = dims4(self, "zero_insert2")?;
        let (oh, ow) = (2 * h, 2 * w);
        let x = self.data();
        let mut out = vec![0.0; n * c * oh * ow];
        for nc in 0..n * c {
            for y in 0..h {
                for xx in 0..w {
                    out[(nc * oh + 2 * y) * ow + 2 * xx] = x[(nc * h + y) * w + xx];
                }
            }
        }
        Ok(Tensor::from_op(
            vec![n, c, oh, ow],
            out,
            vec![self.clone()],
            Box::new(move |g| {
                let mut gx = vec![0.0; n * c * h * w];
                for nc in 0..n * c {
                    for y in 0..h {
                        for xx in 0..w {
                            gx[(nc * h + y) * w + xx] = g[(nc * oh + 2 * y) * ow + 2 * xx];
                        }
                    }
                }
                vec![Some(gx)]
            }),
        ))
    }
}
