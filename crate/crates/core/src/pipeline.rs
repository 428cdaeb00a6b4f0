//! Inference, evaluation and attention probing on top of a trained model.

use rayon::prelude::*;

use crate::data::{FloatImage, MattingSample};
use crate::encoder::{AttentionProbe, EncoderConfig, NUM_STAGES};
use crate::error::{arg_err, Error, Result};
use crate::metrics::{self, EvalRegion, MetricReport, Metrics};
use crate::model::{self, ModelConfig};
use crate::netpbm::{to_byte, ByteImage};
use crate::params::ParamStore;
use crate::tensor::no_grad;
use crate::trimap::{Trimap, BACKGROUND, FOREGROUND};

/// Smallest accepted input extent `>= n` along both axes.
pub fn padded_size(cfg: &EncoderConfig, h: usize, w: usize) -> Result<(usize, usize)> {
    // each axis is constrained independently, so search them one at a time
    let axis = |n: usize| -> Result<usize> {
        let start = n.div_ceil(32).max(1) * 32;
        (start..start + 32 * 256)
            .step_by(32)
            .find(|&m| cfg.check_input(m, m).is_ok())
            .ok_or_else(|| Error::Config(format!("no valid padded extent near {n}")))
    };
    Ok((axis(h)?, axis(w)?))
}

/// Mirror index into `0..n` (period `2n`, edge sample repeated).
fn reflect(i: usize, n: usize) -> usize {
    let m = i % (2 * n);
    if m < n {
        m
    } else {
        2 * n - 1 - m
    }
}

pub fn pad_image(img: &FloatImage, ph: usize, pw: usize) -> FloatImage {
    let mut data = Vec::with_capacity(img.channels * ph * pw);
    for c in 0..img.channels {
        for y in 0..ph {
            for x in 0..pw {
                data.push(img.at(c, reflect(y, img.height), reflect(x, img.width)));
            }
        }
    }
    FloatImage::new(img.channels, ph, pw, data).expect("sized")
}

pub fn pad_trimap(t: &Trimap, ph: usize, pw: usize) -> Trimap {
    let classes = (0..ph * pw)
        .map(|i| t.class_at(reflect(i / pw, t.height()), reflect(i % pw, t.width())))
        .collect();
    Trimap::new(ph, pw, classes).expect("sized")
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct InferOptions {
    /// Force alpha to 1 on known foreground and 0 on known background.
    pub clamp_known: bool,
}

/// Alpha matte for an RGB image of any size (reflect-padded, then cropped back).
pub fn predict(
    cfg: &ModelConfig,
    store: &ParamStore,
    image: &FloatImage,
    trimap: &Trimap,
    opts: InferOptions,
) -> Result<FloatImage> {
    if image.channels != 3 {
        return Err(arg_err!(
            "image must be RGB, got {} channels",
            image.channels
        ));
    }
    if (image.height, image.width) != (trimap.height(), trimap.width()) {
        return Err(arg_err!(
            "image {}x{} and trimap {}x{} differ in size",
            image.height,
            image.width,
            trimap.height(),
            trimap.width()
        ));
    }
    let (ph, pw) = padded_size(&cfg.encoder, image.height, image.width)?;
    let pimg = pad_image(image, ph, pw);
    let ptri = pad_trimap(trimap, ph, pw);
    let p = store.bind_frozen();
    let out = no_grad(|| model::forward(cfg, &p, &pimg.to_tensor(), &ptri, None))?;
    let mut alpha = FloatImage::from_tensor(&out)?.crop(0, 0, image.height, image.width)?;
    if opts.clamp_known {
        for (a, &c) in alpha.data.iter_mut().zip(trimap.classes()) {
            match c {
                FOREGROUND => *a = 1.0,
                BACKGROUND => *a = 0.0,
                _ => {}
            }
        }
    }
    Ok(alpha)
}

/// 8-bit matte, `round(α·255)` per pixel.
pub fn alpha_to_pgm(alpha: &FloatImage) -> ByteImage {
    ByteImage {
        width: alpha.width,
        height: alpha.height,
        channels: 1,
        data: alpha.data.iter().map(|&a| to_byte(a)).collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub whole_image: bool,
    pub tt_threshold: f64,
    /// Score the ground truth against itself instead of running the model.
    pub oracle: bool,
    pub infer: InferOptions,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            whole_image: false,
            tt_threshold: 0.05,
            oracle: false,
            infer: InferOptions::default(),
        }
    }
}

pub fn region_for(trimap: &Trimap, whole_image: bool) -> EvalRegion {
    if whole_image {
        EvalRegion::all(trimap.height(), trimap.width())
    } else {
        EvalRegion::unknown(trimap)
    }
}

/// Metrics for every sample plus the predictions they were computed from.
pub fn evaluate(
    cfg: &ModelConfig,
    store: &ParamStore,
    samples: &[MattingSample],
    opts: EvalOptions,
) -> Result<(MetricReport, Vec<FloatImage>)> {
    let preds: Vec<FloatImage> = samples
        .par_iter()
        .map(|s| {
            if opts.oracle {
                Ok(s.alpha.clone())
            } else {
                predict(cfg, store, &s.image, &s.trimap, opts.infer)
            }
        })
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(samples.len());
    for (s, pred) in samples.iter().zip(&preds) {
        let region = region_for(&s.trimap, opts.whole_image);
        let m = Metrics::compute(&pred.data, &s.alpha.data, &region)?;
        rows.push((s.id.clone(), m, region.fallback));
    }
    let trimaps: Vec<&Trimap> = samples.iter().map(|s| &s.trimap).collect();
    let report = metrics::tt_tp_report(rows, &trimaps, opts.tt_threshold)?;
    Ok((report, preds))
}

#[derive(Debug, Clone)]
pub struct AttentionRequest {
    /// Query point in input pixels.
    pub y: usize,
    pub x: usize,
    pub stage: usize,
    pub block: usize,
    /// Class written over the query's feature cell before the pass.
    pub substitute: Option<u8>,
}

/// One 8-bit heatmap per head at input resolution, each scaled so its maximum is 255.
pub fn attention_heatmaps(
    cfg: &ModelConfig,
    store: &ParamStore,
    image: &FloatImage,
    trimap: &Trimap,
    req: &AttentionRequest,
) -> Result<Vec<ByteImage>> {
    let (h, w) = (image.height, image.width);
    if req.y >= h || req.x >= w {
        return Err(arg_err!(
            "query point ({}, {}) outside {h}x{w} image",
            req.y,
            req.x
        ));
    }
    if req.stage == 0 || req.stage > NUM_STAGES {
        return Err(arg_err!("stage {} not in 1..={NUM_STAGES}", req.stage));
    }
    if req.block >= cfg.encoder.stage_depths[req.stage - 1] {
        return Err(arg_err!(
            "stage {} has {} blocks, block {} requested",
            req.stage,
            cfg.encoder.stage_depths[req.stage - 1],
            req.block
        ));
    }
    if (h, w) != (trimap.height(), trimap.width()) {
        return Err(arg_err!("image and trimap differ in size"));
    }
    let (ph, pw) = padded_size(&cfg.encoder, h, w)?;
    let pimg = pad_image(image, ph, pw);
    let mut ptri = pad_trimap(trimap, ph, pw);
    let stride = EncoderConfig::stage_stride(req.stage);
    let (fy, fx) = (req.y / stride, req.x / stride);
    if let Some(class) = req.substitute {
        for y in fy * stride..(fy + 1) * stride {
            for x in fx * stride..(fx + 1) * stride {
                ptri.set_class(y, x, class)?;
            }
        }
    }
    let p = store.bind_frozen();
    let mut probe = AttentionProbe::new(req.stage, req.block);
    no_grad(|| model::forward(cfg, &p, &pimg.to_tensor(), &ptri, Some(&mut probe)))?;
    let cap = probe
        .capture
        .ok_or_else(|| arg_err!("block {} of stage {} was not reached", req.block, req.stage))?;
    let mut maps = Vec::with_capacity(cap.heads);
    for head in 0..cap.heads {
        let fmap = cap.query_map(head, fy, fx);
        let max = fmap.iter().cloned().fold(0.0, f64::max);
        let data = (0..h * w)
            .map(|i| {
                let v = fmap[(i / w / stride) * cap.map_w + (i % w) / stride];
                if max > 0.0 {
                    (v / max * 255.0).round() as u8
                } else {
                    0
                }
            })
            .collect();
        maps.push(ByteImage::new(w, h, 1, data)?);
    }
    Ok(maps)
}
