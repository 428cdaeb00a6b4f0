//! U-shaped decoder with multi-scale global-guided fusion (MGF).
//!
//! For an interior pyramid level `n` the fusion takes the shallower map
//! `T_prev` (twice the resolution), the current map `T_n` and the deeper map
//! `T_next` (half the resolution):
//!
//! 1. `T_prev` is masked by the non-background mask and downsampled ×2;
//! 2. `T_f = conv(cat(T_prev, T_n))` with `C_n` output channels;
//! 3. `s = GAP(T_next)`, `h = gelu(fc1(s))`, `γ = fc_γ(h)`, `β = fc_β(h)`;
//! 4. `out = conv(σ(γ) ⊗ T_f ⊕ β) + T_n`.

use serde::{Deserialize, Serialize};

use crate::encoder::FeaturePyramid;
use crate::error::{arg_err, Error, Result};
use crate::params::Params;
use crate::tensor::Tensor;
use crate::trimap::Trimap;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    /// Pyramid levels (1..=3) fused with MGF; others use concat+conv.
    pub mgf_levels: Vec<usize>,
    pub squeeze_ratio: usize,
    /// Width of the full-resolution head.
    pub head_channels: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig {
            mgf_levels: vec![1, 2, 3],
            squeeze_ratio: 4,
            head_channels: 8,
        }
    }
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(l) = self.mgf_levels.iter().find(|&&l| l == 0 || l > 3) {
            return Err(Error::Config(format!(
                "mgf level {l} has no shallower and deeper neighbour (valid: 1..=3)"
            )));
        }
        if self.squeeze_ratio == 0 || self.head_channels == 0 {
            return Err(Error::Config(
                "squeeze_ratio and head_channels must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Width of the squeezed global vector for a deeper map of `c_next` channels.
    pub fn squeezed(&self, c_next: usize) -> usize {
        (c_next / self.squeeze_ratio).max(1)
    }
}

/// Inputs of one fusion step (all `[1, C, h, w]`).
pub struct MgfInputs<'a> {
    pub t_prev: &'a Tensor,
    pub t_n: &'a Tensor,
    pub t_next: &'a Tensor,
    /// Non-background mask at `t_prev`'s resolution, `[1, 1, 2h, 2w]`.
    pub nb_mask: &'a Tensor,
}

fn spatial(t: &Tensor) -> Result<(usize, usize, usize)> {
    t.expect_rank(4, "mgf input")?;
    Ok((t.shape()[1], t.shape()[2], t.shape()[3]))
}

pub fn mgf_fuse(p: &Params, prefix: &str, inputs: &MgfInputs) -> Result<Tensor> {
    let (_, hp, wp) = spatial(inputs.t_prev)?;
    let (cn, h, w) = spatial(inputs.t_n)?;
    let (cx, hx, wx) = spatial(inputs.t_next)?;
    if hp != 2 * h || wp != 2 * w || 2 * hx != h || 2 * wx != w {
        return Err(arg_err!(
            "mgf needs 2:1:1/2 spatial ratios, got {hp}x{wp}, {h}x{w}, {hx}x{wx}"
        ));
    }
    if inputs.nb_mask.shape() != [1, 1, hp, wp] {
        return Err(arg_err!(
            "non-background mask {:?} does not match T_prev {hp}x{wp}",
            inputs.nb_mask.shape()
        ));
    }
    let get = |n: &str| p.get(&format!("{prefix}.{n}"));

    let prev = inputs.t_prev.mul(inputs.nb_mask)?.downsample_nearest(2)?;
    let fused = Tensor::cat(&[prev, inputs.t_n.clone()], 1)?.conv2d(
        get("fuse.w")?,
        Some(get("fuse.b")?),
        1,
        1,
    )?;

    let s = inputs.t_next.global_avg_pool()?.reshape(&[1, cx])?;
    let hidden = s.linear(get("fc1.w")?, Some(get("fc1.b")?))?.gelu();
    let gamma = hidden.linear(get("fc_gamma.w")?, Some(get("fc_gamma.b")?))?;
    let beta = hidden.linear(get("fc_beta.w")?, Some(get("fc_beta.b")?))?;
    let gamma = gamma.sigmoid().reshape(&[1, cn, 1, 1])?;
    let beta = beta.reshape(&[1, cn, 1, 1])?;

    let reweighted = fused.mul(&gamma)?.add(&beta)?;
    reweighted
        .conv2d(get("out.w")?, Some(get("out.b")?), 1, 1)?
        .add(inputs.t_n)
}

fn conv3(p: &Params, name: &str, x: &Tensor) -> Result<Tensor> {
    x.conv2d(
        p.get(&format!("{name}.w"))?,
        Some(p.get(&format!("{name}.b"))?),
        1,
        1,
    )
}

/// Decodes a pyramid into an alpha matte `[1, 1, H, W]` in [0, 1].
pub fn decode(
    cfg: &DecoderConfig,
    p: &Params,
    pyramid: &FeaturePyramid,
    trimap: &Trimap,
    image: &Tensor,
) -> Result<Tensor> {
    cfg.validate()?;
    let levels = &pyramid.levels;
    if levels.len() != 5 {
        return Err(arg_err!("pyramid has {} levels, expected 5", levels.len()));
    }
    let (h, w) = (image.shape()[2], image.shape()[3]);
    for (l, stride) in levels.iter().zip(FeaturePyramid::strides()) {
        if l.shape()[2] * stride != h || l.shape()[3] * stride != w {
            return Err(arg_err!(
                "pyramid level {:?} is not at stride {stride} of {h}x{w}",
                l.shape()
            ));
        }
    }
    if trimap.height() != h || trimap.width() != w {
        return Err(arg_err!(
            "trimap {}x{} does not match pyramid input {h}x{w}",
            trimap.height(),
            trimap.width()
        ));
    }

    let mut d = levels[4].clone();
    for n in (0..4).rev() {
        let skip = if cfg.mgf_levels.contains(&n) {
            let mask = trimap
                .downsample(FeaturePyramid::strides()[n - 1])?
                .non_background_mask();
            mgf_fuse(
                p,
                &format!("dec.{n}.mgf"),
                &MgfInputs {
                    t_prev: &levels[n - 1],
                    t_n: &levels[n],
                    t_next: &levels[n + 1],
                    nb_mask: &mask,
                },
            )?
        } else {
            levels[n].clone()
        };
        let up = d.upsample_nearest(2)?;
        d = conv3(p, &format!("dec.{n}.fuse"), &Tensor::cat(&[up, skip], 1)?)?.gelu();
    }
    let up = d.upsample_nearest(2)?;
    let x = conv3(p, "head.conv1", &Tensor::cat(&[up, image.clone()], 1)?)?.gelu();
    Ok(conv3(p, "head.conv2", &x)?.sigmoid())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_checks() {
        assert!(DecoderConfig::default().validate().is_ok());
        let bad = DecoderConfig {
            mgf_levels: vec![0],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert_eq!(DecoderConfig::default().squeezed(2), 1);
        assert_eq!(DecoderConfig::default().squeezed(64), 16);
    }

    #[test]
    fn ratio_violation_is_rejected() {
        let p = Params::default();
        let a = Tensor::zeros(&[1, 2, 8, 8]);
        let b = Tensor::zeros(&[1, 2, 4, 4]);
        let m = Tensor::zeros(&[1, 1, 8, 8]);
        let err = mgf_fuse(
            &p,
            "x",
            &MgfInputs {
                t_prev: &a,
                t_n: &b,
                t_next: &b,
                nb_mask: &m,
            },
        );
        assert!(matches!(err, Err(Error::Argument(_))));
    }
}
