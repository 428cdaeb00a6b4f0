//! Training objectives: alpha L1, compositing L1, Laplacian-pyramid L1 and
//! their weighted sum.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub comp: f64,
    pub lap: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.4,
            comp: 1.2,
            lap: 0.16,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub weights: LossWeights,
    /// Restrict alpha and compositing losses to the unknown region.
    pub unknown_only: bool,
    pub lap_levels: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            weights: LossWeights::default(),
            unknown_only: true,
            lap_levels: 5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let w = &self.weights;
        if [w.alpha, w.comp, w.lap]
            .iter()
            .any(|v| !(v.is_finite() && *v >= 0.0))
        {
            return Err(Error::Config(format!(
                "loss weights must be finite and >= 0: {w:?}"
            )));
        }
        if self.lap_levels == 0 {
            return Err(Error::Config("lap_levels must be >= 1".into()));
        }
        Ok(())
    }
}

/// Scalar components of one loss evaluation.
#[derive(Debug, Clone)]
pub struct LossParts {
    pub alpha: Tensor,
    pub comp: Tensor,
    pub lap: Tensor,
    pub total: Tensor,
}

/// Pixel weights for a masked mean: the mask when it has support, else all ones.
fn region(mask: Option<&[f64]>, pixels: usize) -> Result<(Vec<f64>, f64)> {
    match mask {
        Some(m) => {
            if m.len() != pixels {
                return Err(arg_err!("mask has {} entries for {pixels} pixels", m.len()));
            }
            let s: f64 = m.iter().sum();
            if s > 0.0 {
                return Ok((m.to_vec(), s));
            }
            Ok((vec![1.0; pixels], pixels as f64))
        }
        None => Ok((vec![1.0; pixels], pixels as f64)),
    }
}

fn same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(arg_err!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        ));
    }
    Ok(())
}

/// Mean absolute alpha error over the masked pixels (all pixels when the mask is empty).
/// `pred`, `gt` are `[1, 1, H, W]`; `mask` has `H*W` entries.
pub fn alpha_loss(pred: &Tensor, gt: &Tensor, mask: Option<&[f64]>) -> Result<Tensor> {
    same_shape(pred, gt, "alpha_loss")?;
    let (m, count) = region(mask, pred.numel())?;
    let m = Tensor::new(pred.shape(), m)?;
    Ok(pred.sub(gt)?.abs().mul(&m)?.sum().scale(1.0 / count))
}

/// Mean absolute compositing error `|αF + (1−α)B − I|` over masked pixels and channels.
pub fn composition_loss(
    pred_alpha: &Tensor,
    fg: &Tensor,
    bg: &Tensor,
    image: &Tensor,
    mask: Option<&[f64]>,
) -> Result<Tensor> {
    same_shape(fg, bg, "composition_loss")?;
    same_shape(fg, image, "composition_loss")?;
    pred_alpha.expect_rank(4, "composition_loss alpha")?;
    fg.expect_rank(4, "composition_loss fg")?;
    let (h, w) = (fg.shape()[2], fg.shape()[3]);
    let ch = fg.shape()[1];
    if pred_alpha.shape() != [1, 1, h, w] {
        return Err(arg_err!(
            "alpha {:?} is not broadcastable over {:?}",
            pred_alpha.shape(),
            fg.shape()
        ));
    }
    let (m, count) = region(mask, h * w)?;
    let m = Tensor::new(&[1, 1, h, w], m)?;
    // αF + (1−α)B = B + α(F − B)
    let comp = bg.add(&pred_alpha.mul(&fg.sub(bg)?)?)?;
    Ok(comp
        .sub(image)?
        .abs()
        .mul(&m)?
        .sum()
        .scale(1.0 / (count * ch as f64)))
}

/// Normalized 5×5 binomial kernel `[1 4 6 4 1]ᵀ[1 4 6 4 1] / 256`.
pub fn binomial_kernel() -> Vec<f64> {
    let k = [1.0, 4.0, 6.0, 4.0, 1.0];
    let mut out = Vec::with_capacity(25);
    for a in k {
        for b in k {
            out.push(a * b / 256.0);
        }
    }
    out
}

fn blur(x: &Tensor) -> Result<Tensor> {
    let c = x.shape()[1];
    let kernel = binomial_kernel();
    let mut w = vec![0.0; c * c * 25];
    for i in 0..c {
        w[(i * c + i) * 25..(i * c + i + 1) * 25].copy_from_slice(&kernel);
    }
    let w = Tensor::new(&[c, c, 5, 5], w)?;
    x.pad_replicate(2)?.conv2d(&w, None, 1, 0)
}

fn pyr_down(x: &Tensor) -> Result<Tensor> {
    blur(x)?.downsample_nearest(2)
}

fn pyr_up(x: &Tensor) -> Result<Tensor> {
    blur(&x.zero_insert2()?.scale(4.0))
}

/// Band-pass levels (finest first) plus the low-pass residual of a `[N,C,H,W]` map.
pub fn laplacian_pyramid(x: &Tensor, levels: usize) -> Result<(Vec<Tensor>, Tensor)> {
    x.expect_rank(4, "laplacian_pyramid")?;
    let (h, w) = (x.shape()[2], x.shape()[3]);
    let f = 1usize << levels;
    if levels == 0 || h % f != 0 || w % f != 0 {
        return Err(arg_err!("{h}x{w} is not divisible by 2^{levels}"));
    }
    let mut bands = Vec::with_capacity(levels);
    let mut cur = x.clone();
    for _ in 0..levels {
        let down = pyr_down(&cur)?;
        bands.push(cur.sub(&pyr_up(&down)?)?);
        cur = down;
    }
    Ok((bands, cur))
}

/// Inverse of [`laplacian_pyramid`].
pub fn reconstruct_pyramid(bands: &[Tensor], residual: &Tensor) -> Result<Tensor> {
    let mut cur = residual.clone();
    for band in bands.iter().rev() {
        cur = pyr_up(&cur)?.add(band)?;
    }
    Ok(cur)
}

/// `Σ_i 2^(i−1) · mean|Lap_i(pred) − Lap_i(gt)|` over `levels` band-pass levels.
pub fn laplacian_loss(pred: &Tensor, gt: &Tensor, levels: usize) -> Result<Tensor> {
    same_shape(pred, gt, "laplacian_loss")?;
    let (bp, _) = laplacian_pyramid(pred, levels)?;
    let (bg, _) = laplacian_pyramid(gt, levels)?;
    let mut total: Option<Tensor> = None;
    for (i, (a, b)) in bp.iter().zip(&bg).enumerate() {
        let term = a.sub(b)?.abs().mean().scale((1u64 << i) as f64);
        total = Some(match total {
            Some(t) => t.add(&term)?,
            None => term,
        });
    }
    Ok(total.expect("levels >= 1"))
}

/// Weighted sum of the three components.
pub fn total_loss(
    alpha: &Tensor,
    comp: &Tensor,
    lap: &Tensor,
    weights: &LossWeights,
) -> Result<Tensor> {
    alpha
        .scale(weights.alpha)
        .add(&comp.scale(weights.comp))?
        .add(&lap.scale(weights.lap))
}

/// Ground truth for one training sample, as `[1, C, H, W]` tensors.
pub struct LossTargets<'a> {
    pub alpha: &'a Tensor,
    pub fg: &'a Tensor,
    pub bg: &'a Tensor,
    pub image: &'a Tensor,
    pub unknown_mask: &'a [f64],
}

pub fn compute(cfg: &LossConfig, pred: &Tensor, gt: &LossTargets) -> Result<LossParts> {
    let mask = cfg.unknown_only.then_some(gt.unknown_mask);
    let alpha = alpha_loss(pred, gt.alpha, mask)?;
    let comp = composition_loss(pred, gt.fg, gt.bg, gt.image, mask)?;
    let lap = laplacian_loss(pred, gt.alpha, cfg.lap_levels)?;
    let total = total_loss(&alpha, &comp, &lap, &cfg.weights)?;
    Ok(LossParts {
        alpha,
        comp,
        lap,
        total,
    })
}
