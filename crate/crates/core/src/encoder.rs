//! Token-guided feature extractor: a small strided CNN followed by four stages
//! of windowed self-attention blocks.
//!
//! Trimap guidance enters in two places, both additive. In the CNN, the token
//! map is added to the output of a block's first convolution. In a
//! token-guided attention block the token map (split across heads exactly like
//! the queries) is added to the queries before the `QKᵀ/√d` logits.

use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::params::Params;
use crate::tensor::Tensor;
use crate::trimap::{TriTokenTable, Trimap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub cnn_channels: Vec<usize>,
    pub stage_channels: Vec<usize>,
    pub stage_depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub window_size: usize,
    pub tgtb_period: usize,
    pub mlp_ratio: usize,
    /// 1-based CNN block indices receiving additive token maps.
    pub cnn_inject_positions: Vec<usize>,
    /// 1-based attention stages containing token-guided blocks.
    pub transformer_inject_stages: Vec<usize>,
    /// One token table per stage (true) or per token-guided block (false).
    pub share_stage_tokens: bool,
    pub cnn_residual: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            cnn_channels: vec![8, 16],
            stage_channels: vec![16, 32, 64, 128],
            stage_depths: vec![1, 1, 2, 1],
            heads: vec![1, 2, 4, 4],
            window_size: 4,
            tgtb_period: 5,
            mlp_ratio: 4,
            cnn_inject_positions: vec![2],
            transformer_inject_stages: vec![1, 2, 3, 4],
            share_stage_tokens: true,
            cnn_residual: false,
        }
    }
}

pub const NUM_STAGES: usize = 4;

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.cnn_channels.len() != 2 {
            return bad(format!(
                "cnn_channels needs 2 entries, got {:?}",
                self.cnn_channels
            ));
        }
        for (name, v) in [
            ("stage_channels", &self.stage_channels),
            ("stage_depths", &self.stage_depths),
            ("heads", &self.heads),
        ] {
            if v.len() != NUM_STAGES {
                return bad(format!("{name} needs {NUM_STAGES} entries, got {v:?}"));
            }
        }
        if self
            .cnn_channels
            .iter()
            .chain(&self.stage_channels)
            .any(|&c| c == 0)
        {
            return bad("channel widths must be positive".into());
        }
        if self.stage_depths.contains(&0) {
            return bad("stage depths must be positive".into());
        }
        for s in 0..NUM_STAGES {
            let (c, h) = (self.stage_channels[s], self.heads[s]);
            if h == 0 || c % h != 0 {
                return bad(format!(
                    "stage {} width {c} not divisible by {h} heads",
                    s + 1
                ));
            }
        }
        if self.window_size == 0 {
            return bad("window_size must be >= 1".into());
        }
        if self.tgtb_period == 0 {
            return bad("tgtb_period must be >= 1".into());
        }
        if self.mlp_ratio == 0 {
            return bad("mlp_ratio must be >= 1".into());
        }
        if let Some(p) = self.cnn_inject_positions.iter().find(|&&p| p == 0 || p > 2) {
            return bad(format!("cnn inject position {p} not in 1..=2"));
        }
        if let Some(s) = self
            .transformer_inject_stages
            .iter()
            .find(|&&s| s == 0 || s > NUM_STAGES)
        {
            return bad(format!(
                "transformer inject stage {s} not in 1..={NUM_STAGES}"
            ));
        }
        Ok(())
    }

    /// Whether block `block` (0-based) of `stage` (1-based) is token-guided.
    ///
    /// Blocks are counted over the whole encoder; a block is token-guided when
    /// its stage is listed for injection and either its global index is a
    /// multiple of `tgtb_period` or it opens the stage.
    pub fn is_tgtb(&self, stage: usize, block: usize) -> bool {
        if !self.transformer_inject_stages.contains(&stage) {
            return false;
        }
        let global: usize = self.stage_depths[..stage - 1].iter().sum::<usize>() + block;
        block == 0 || global.is_multiple_of(self.tgtb_period)
    }

    /// Stride of stage `stage` (1-based) relative to the input.
    pub fn stage_stride(stage: usize) -> usize {
        4 << (stage - 1)
    }

    /// Effective window (rows, cols) at a feature resolution.
    pub fn window_at(&self, h: usize, w: usize) -> (usize, usize) {
        (self.window_size.min(h), self.window_size.min(w))
    }

    /// Checks that an `h x w` input passes through every stride and window.
    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        if !h.is_multiple_of(32) || !w.is_multiple_of(32) || h == 0 || w == 0 {
            return Err(arg_err!("input {h}x{w} is not a positive multiple of 32"));
        }
        for s in 1..=NUM_STAGES {
            let st = Self::stage_stride(s);
            let (fh, fw) = (h / st, w / st);
            let (mh, mw) = self.window_at(fh, fw);
            if fh % mh != 0 || fw % mw != 0 {
                return Err(arg_err!(
                    "stage {s} map {fh}x{fw} is not divisible by window {mh}x{mw}"
                ));
            }
        }
        Ok(())
    }

    pub fn cnn_token_name(pos: usize) -> String {
        format!("tokens.cnn.{pos}")
    }

    pub fn stage_token_name(&self, stage: usize, block: usize) -> String {
        if self.share_stage_tokens {
            format!("tokens.stage.{stage}")
        } else {
            format!("tokens.stage.{stage}.block.{block}")
        }
    }
}

/// Feature maps at strides 2, 4, 8, 16, 32 (each `[1, C, h, w]`).
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub levels: Vec<Tensor>,
}

impl FeaturePyramid {
    pub fn strides() -> [usize; 5] {
        [2, 4, 8, 16, 32]
    }
}

/// `[C, H, W]` to `[nW, mh*mw, C]`, windows in row-major order.
pub fn window_partition(x: &Tensor, mh: usize, mw: usize) -> Result<Tensor> {
    x.expect_rank(3, "window_partition")?;
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if mh == 0 || mw == 0 || h % mh != 0 || w % mw != 0 {
        return Err(arg_err!("window {mh}x{mw} does not tile {h}x{w}"));
    }
    let (nh, nw) = (h / mh, w / mw);
    x.reshape(&[c, nh, mh, nw, mw])?
        .permute(&[1, 3, 2, 4, 0])?
        .reshape(&[nh * nw, mh * mw, c])
}

/// Inverse of [`window_partition`].
pub fn window_reverse(
    windows: &Tensor,
    mh: usize,
    mw: usize,
    h: usize,
    w: usize,
) -> Result<Tensor> {
    windows.expect_rank(3, "window_reverse")?;
    let c = windows.shape()[2];
    if mh == 0 || mw == 0 || !h.is_multiple_of(mh) || !w.is_multiple_of(mw) {
        return Err(arg_err!("window {mh}x{mw} does not tile {h}x{w}"));
    }
    let (nh, nw) = (h / mh, w / mw);
    if windows.shape()[0] != nh * nw || windows.shape()[1] != mh * mw {
        return Err(arg_err!(
            "window tensor {:?} does not match {h}x{w} with {mh}x{mw} windows",
            windows.shape()
        ));
    }
    windows
        .reshape(&[nh, nw, mh, mw, c])?
        .permute(&[4, 0, 2, 1, 3])?
        .reshape(&[c, h, w])
}

fn check_qkv(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<()> {
    for t in [q, k, v] {
        t.expect_rank(2, "attention")?;
    }
    if q.shape() != k.shape() || q.shape()[0] != v.shape()[0] {
        return Err(arg_err!(
            "attention shapes Q {:?}, K {:?}, V {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        ));
    }
    Ok(())
}

/// Pre-softmax logits `QKᵀ/√d` for a single head, `[M², M²]`.
pub fn attention_logits(q: &Tensor, k: &Tensor) -> Result<Tensor> {
    let d = q.shape()[1] as f64;
    Ok(q.matmul(&k.transpose(0, 1)?)?.scale(1.0 / d.sqrt()))
}

/// Single-head `softmax(QKᵀ/√d) V` on `[M², d]` operands.
pub fn windowed_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
    check_qkv(q, k, v)?;
    attention_logits(q, k)?.softmax(1)?.matmul(v)
}

/// Token-guided variant: `softmax((Q + T)Kᵀ/√d) V`.
pub fn tritoken_attention(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    window_tokens: &Tensor,
) -> Result<Tensor> {
    check_qkv(q, k, v)?;
    if window_tokens.shape() != q.shape() {
        return Err(arg_err!(
            "window tokens {:?} do not match Q {:?}",
            window_tokens.shape(),
            q.shape()
        ));
    }
    windowed_attention(&q.add(window_tokens)?, k, v)
}

/// Attention weights captured from one block during a forward pass.
#[derive(Debug, Clone)]
pub struct AttentionCapture {
    /// Softmax weights `[nW, heads, M², M²]`, flattened.
    pub probs: Vec<f64>,
    /// Pre-softmax logits, same layout as `probs`.
    pub logits: Vec<f64>,
    pub heads: usize,
    pub win_h: usize,
    pub win_w: usize,
    pub map_h: usize,
    pub map_w: usize,
    pub tgtb: bool,
}

impl AttentionCapture {
    pub fn windows_per_row(&self) -> usize {
        self.map_w / self.win_w
    }

    /// Attention weights of the query at feature position (y, x) for `head`,
    /// scattered onto the full `map_h x map_w` grid (zero outside its window).
    pub fn query_map(&self, head: usize, y: usize, x: usize) -> Vec<f64> {
        let m2 = self.win_h * self.win_w;
        let win = (y / self.win_h) * self.windows_per_row() + x / self.win_w;
        let pos = (y % self.win_h) * self.win_w + x % self.win_w;
        let base = ((win * self.heads + head) * m2 + pos) * m2;
        let row = &self.probs[base..base + m2];
        let (wy0, wx0) = ((y / self.win_h) * self.win_h, (x / self.win_w) * self.win_w);
        let mut out = vec![0.0; self.map_h * self.map_w];
        for (j, &p) in row.iter().enumerate() {
            out[(wy0 + j / self.win_w) * self.map_w + wx0 + j % self.win_w] = p;
        }
        out
    }
}

/// Selects the block whose attention should be captured.
#[derive(Debug, Clone, Default)]
pub struct AttentionProbe {
    pub stage: usize,
    pub block: usize,
    pub capture: Option<AttentionCapture>,
}

impl AttentionProbe {
    pub fn new(stage: usize, block: usize) -> Self {
        AttentionProbe {
            stage,
            block,
            capture: None,
        }
    }
}

fn conv(p: &Params, name: &str, x: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    x.conv2d(
        p.get(&format!("{name}.w"))?,
        Some(p.get(&format!("{name}.b"))?),
        stride,
        pad,
    )
}

fn linear(p: &Params, name: &str, x: &Tensor) -> Result<Tensor> {
    x.linear(
        p.get(&format!("{name}.w"))?,
        Some(p.get(&format!("{name}.b"))?),
    )
}

fn layer_norm(p: &Params, name: &str, x: &Tensor) -> Result<Tensor> {
    x.layer_norm(
        p.get(&format!("{name}.g"))?,
        p.get(&format!("{name}.b"))?,
        1e-5,
    )
}

/// One windowed-attention block on `[1, C, H, W]`; `token_map` switches it to
/// the token-guided form.
#[allow(clippy::too_many_arguments)]
pub fn block_forward(
    p: &Params,
    prefix: &str,
    x: &Tensor,
    heads: usize,
    window: (usize, usize),
    token_map: Option<&Tensor>,
    capture: Option<&mut Option<AttentionCapture>>,
) -> Result<Tensor> {
    x.expect_rank(4, "attention block")?;
    let (c, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    if let Some(t) = token_map {
        if t.shape() != x.shape() {
            return Err(arg_err!(
                "token map {:?} does not match feature {:?}",
                t.shape(),
                x.shape()
            ));
        }
    }
    let (mh, mw) = window;
    let m2 = mh * mw;
    let d = c / heads;
    let xw = window_partition(&x.reshape(&[c, h, w])?, mh, mw)?;
    let nwin = xw.shape()[0];

    let hn = layer_norm(p, &format!("{prefix}.ln1"), &xw)?;
    let mut q = linear(p, &format!("{prefix}.q"), &hn)?;
    let k = linear(p, &format!("{prefix}.k"), &hn)?;
    let v = linear(p, &format!("{prefix}.v"), &hn)?;
    if let Some(t) = token_map {
        let tw = window_partition(&t.reshape(&[c, h, w])?, mh, mw)?;
        q = q.add(&tw)?;
    }
    let split = |t: &Tensor| -> Result<Tensor> {
        t.reshape(&[nwin, m2, heads, d])?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[nwin * heads, m2, d])
    };
    let (qh, kh, vh) = (split(&q)?, split(&k)?, split(&v)?);
    let logits = qh.bmm(&kh, true)?.scale(1.0 / (d as f64).sqrt());
    let probs = logits.softmax(2)?;
    if let Some(slot) = capture {
        *slot = Some(AttentionCapture {
            probs: probs.data().to_vec(),
            logits: logits.data().to_vec(),
            heads,
            win_h: mh,
            win_w: mw,
            map_h: h,
            map_w: w,
            tgtb: token_map.is_some(),
        });
    }
    let att = probs
        .bmm(&vh, false)?
        .reshape(&[nwin, heads, m2, d])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[nwin, m2, c])?;
    let xw = xw.add(&linear(p, &format!("{prefix}.proj"), &att)?)?;

    let hn = layer_norm(p, &format!("{prefix}.ln2"), &xw)?;
    let mlp = linear(
        p,
        &format!("{prefix}.fc2"),
        &linear(p, &format!("{prefix}.fc1"), &hn)?.gelu(),
    )?;
    let xw = xw.add(&mlp)?;
    window_reverse(&xw, mh, mw, h, w)?.reshape(&[1, c, h, w])
}

/// Two stride-2 conv blocks: `[1,3,H,W] -> ([1,c1,H/2,W/2], [1,c2,H/4,W/4])`.
///
/// At each enabled position the token map, built at the first convolution's
/// output resolution, is added between the two convolutions.
pub fn cnn_extract(
    cfg: &EncoderConfig,
    p: &Params,
    image: &Tensor,
    trimap: &Trimap,
) -> Result<(Tensor, Tensor)> {
    image.expect_rank(4, "cnn_extract")?;
    let (h, w) = (image.shape()[2], image.shape()[3]);
    if h % 4 != 0 || w % 4 != 0 {
        return Err(arg_err!("cnn input {h}x{w} not divisible by 4"));
    }
    if trimap.height() != h || trimap.width() != w {
        return Err(arg_err!(
            "trimap {}x{} does not match image {h}x{w}",
            trimap.height(),
            trimap.width()
        ));
    }
    let mut x = image.clone();
    let mut outs = Vec::with_capacity(2);
    for pos in 1..=2 {
        let name = format!("cnn.{pos}");
        let mut y = conv(p, &format!("{name}.conv1"), &x, 2, 1)?.relu();
        let skip = y.clone();
        if cfg.cnn_inject_positions.contains(&pos) {
            let table = TriTokenTable::from_tensor(
                EncoderConfig::cnn_token_name(pos),
                p.get(&EncoderConfig::cnn_token_name(pos))?.clone(),
            )?;
            let factor = h / y.shape()[2];
            let map = table.build_map(&trimap.downsample(factor)?)?;
            if map.shape() != y.shape() {
                return Err(Error::Argument(format!(
                    "internal: token map {:?} vs feature {:?}",
                    map.shape(),
                    y.shape()
                )));
            }
            y = y.add(&map)?;
        }
        y = conv(p, &format!("{name}.conv2"), &y, 1, 1)?;
        if cfg.cnn_residual {
            y = y.add(&skip)?;
        }
        x = y.relu();
        outs.push(x.clone());
    }
    let second = outs.pop().unwrap();
    let first = outs.pop().unwrap();
    Ok((first, second))
}

/// Full encoder pass producing the five-level pyramid.
pub fn encode(
    cfg: &EncoderConfig,
    p: &Params,
    image: &Tensor,
    trimap: &Trimap,
    mut probe: Option<&mut AttentionProbe>,
) -> Result<FeaturePyramid> {
    cfg.validate()?;
    image.expect_rank(4, "encode")?;
    let (h, w) = (image.shape()[2], image.shape()[3]);
    if image.shape()[0] != 1 || image.shape()[1] != 3 {
        return Err(arg_err!(
            "encode expects a [1,3,H,W] image, got {:?}",
            image.shape()
        ));
    }
    cfg.check_input(h, w)?;
    let (l0, c2) = cnn_extract(cfg, p, image, trimap)?;
    let mut levels = vec![l0];
    let mut x = conv(p, "embed", &c2, 1, 0)?;
    for stage in 1..=NUM_STAGES {
        if stage > 1 {
            x = conv(p, &format!("stage.{stage}.merge"), &x, 2, 0)?;
        }
        let (fh, fw) = (x.shape()[2], x.shape()[3]);
        let window = cfg.window_at(fh, fw);
        let stage_trimap = trimap.downsample(EncoderConfig::stage_stride(stage))?;
        for block in 0..cfg.stage_depths[stage - 1] {
            let token_map = if cfg.is_tgtb(stage, block) {
                let name = cfg.stage_token_name(stage, block);
                let table = TriTokenTable::from_tensor(name.clone(), p.get(&name)?.clone())?;
                Some(table.build_map(&stage_trimap)?)
            } else {
                None
            };
            let capture = match probe.as_deref_mut() {
                Some(pr) if pr.stage == stage && pr.block == block => Some(&mut pr.capture),
                _ => None,
            };
            x = block_forward(
                p,
                &format!("stage.{stage}.block.{block}"),
                &x,
                cfg.heads[stage - 1],
                window,
                token_map.as_ref(),
                capture,
            )?;
        }
        levels.push(x.clone());
    }
    Ok(FeaturePyramid { levels })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor::new(shape, (0..n).map(|v| v as f64).collect()).unwrap()
    }

    #[test]
    fn partition_index_layout() {
        let x = seq(&[1, 4, 4]);
        let w = window_partition(&x, 2, 2).unwrap();
        assert_eq!(w.shape(), &[4, 4, 1]);
        assert_eq!(&w.data()[0..4], &[0., 1., 4., 5.]);
        assert_eq!(&w.data()[4..8], &[2., 3., 6., 7.]);
        assert_eq!(&w.data()[8..12], &[8., 9., 12., 13.]);
    }

    #[test]
    fn single_window_covers_map() {
        let x = seq(&[2, 3, 3]);
        let w = window_partition(&x, 3, 3).unwrap();
        assert_eq!(w.shape(), &[1, 9, 2]);
        let back = window_reverse(&w, 3, 3, 3, 3).unwrap();
        assert_eq!(back.data(), x.data());
        assert!(window_partition(&x, 2, 2).is_err());
    }

    #[test]
    fn single_position_attention_is_value() {
        let q = Tensor::new(&[1, 3], vec![5.0, -2.0, 1.0]).unwrap();
        let k = Tensor::new(&[1, 3], vec![0.3, 0.1, 9.0]).unwrap();
        let v = Tensor::new(&[1, 3], vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(windowed_attention(&q, &k, &v).unwrap().data(), v.data());
        let t = Tensor::new(&[1, 3], vec![100.0, 0.0, -4.0]).unwrap();
        assert_eq!(tritoken_attention(&q, &k, &v, &t).unwrap().data(), v.data());
    }

    #[test]
    fn zero_query_averages_values() {
        let q = Tensor::zeros(&[3, 2]);
        let k = Tensor::new(&[3, 2], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let v = Tensor::new(&[3, 2], vec![1., 10., 2., 20., 6., 60.]).unwrap();
        let out = windowed_attention(&q, &k, &v).unwrap();
        for r in 0..3 {
            assert!((out.data()[r * 2] - 3.0).abs() < 1e-12);
            assert!((out.data()[r * 2 + 1] - 30.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_shape_errors() {
        let a = Tensor::zeros(&[4, 2]);
        let b = Tensor::zeros(&[4, 3]);
        assert!(windowed_attention(&a, &b, &a).is_err());
        assert!(tritoken_attention(&a, &a, &a, &b).is_err());
    }

    #[test]
    fn tgtb_schedule() {
        let cfg = EncoderConfig::default();
        assert!(cfg.is_tgtb(1, 0));
        assert!(cfg.is_tgtb(3, 0));
        assert!(!cfg.is_tgtb(3, 1));
        let cfg = EncoderConfig {
            stage_depths: vec![2, 2, 6, 2],
            transformer_inject_stages: vec![3],
            ..Default::default()
        };
        // global indices of stage 3 are 4..10; 5 is a multiple of the period
        assert!(cfg.is_tgtb(3, 0) && cfg.is_tgtb(3, 1) && !cfg.is_tgtb(3, 2));
        assert!(!cfg.is_tgtb(1, 0));
        let none = EncoderConfig {
            transformer_inject_stages: vec![],
            ..Default::default()
        };
        assert!(!none.is_tgtb(1, 0));
    }

    #[test]
    fn config_validation() {
        assert!(EncoderConfig::default().validate().is_ok());
        let bad = EncoderConfig {
            heads: vec![3, 2, 4, 4],
            ..Default::default()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let bad = EncoderConfig {
            tgtb_period: 0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = EncoderConfig {
            transformer_inject_stages: vec![5],
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let cfg = EncoderConfig::default();
        assert!(cfg.check_input(64, 64).is_ok());
        assert!(cfg.check_input(64, 48).is_err());
        assert!(cfg.check_input(64, 96).is_err());
        assert!(cfg.check_input(128, 256).is_ok());
    }
}
