//! Sample synthesis and ingestion.
//!
//! Images are planar `f64` in [0, 1]. Synthetic samples are generated on the
//! 8-bit grid (every plane is `k/255`) so that writing them as PPM/PGM and
//! reading them back is lossless.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::netpbm::{self, from_byte, to_byte, ByteImage};
use crate::tensor::Tensor;
use crate::trimap::{Trimap, BACKGROUND, FOREGROUND, UNKNOWN};

/// Certainty threshold for turning a real-valued alpha into known fg/bg.
pub const EPSILON: f64 = 1.0 / 255.0;

/// Planar image with `channels` planes of `height x width`.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatImage {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl FloatImage {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 || data.len() != channels * height * width {
            return Err(arg_err!(
                "{channels}x{height}x{width} image needs {} values, got {}",
                channels * height * width,
                data.len()
            ));
        }
        Ok(FloatImage {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, v: f64) -> Self {
        FloatImage {
            channels,
            height,
            width,
            data: vec![v; channels * height * width],
        }
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// `[1, C, H, W]` constant tensor.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            &[1, self.channels, self.height, self.width],
            self.data.clone(),
        )
        .expect("validated dimensions")
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.rank() != 4 || t.shape()[0] != 1 {
            return Err(arg_err!("expected a [1,C,H,W] tensor, got {:?}", t.shape()));
        }
        FloatImage::new(t.shape()[1], t.shape()[2], t.shape()[3], t.data().to_vec())
    }

    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Self> {
        if y0 + h > self.height || x0 + w > self.width || h == 0 || w == 0 {
            return Err(arg_err!(
                "crop {h}x{w} at ({y0},{x0}) exceeds {}x{}",
                self.height,
                self.width
            ));
        }
        let mut data = Vec::with_capacity(self.channels * h * w);
        for c in 0..self.channels {
            for y in y0..y0 + h {
                let row = (c * self.height + y) * self.width;
                data.extend_from_slice(&self.data[row + x0..row + x0 + w]);
            }
        }
        FloatImage::new(self.channels, h, w, data)
    }

    /// Interleaved 8-bit version for netpbm output.
    pub fn to_bytes(&self) -> ByteImage {
        let n = self.height * self.width;
        let mut data = Vec::with_capacity(n * self.channels);
        for p in 0..n {
            for c in 0..self.channels {
                data.push(to_byte(self.data[c * n + p]));
            }
        }
        ByteImage {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data,
        }
    }

    pub fn from_bytes(img: &ByteImage) -> Self {
        let n = img.height * img.width;
        let mut data = vec![0.0; n * img.channels];
        for p in 0..n {
            for c in 0..img.channels {
                data[c * n + p] = from_byte(img.data[p * img.channels + c]);
            }
        }
        FloatImage {
            channels: img.channels,
            height: img.height,
            width: img.width,
            data,
        }
    }

    pub fn read(path: &Path) -> Result<Self> {
        Ok(Self::from_bytes(&netpbm::read(path)?))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        if self.channels != 1 && self.channels != 3 {
            return Err(arg_err!("cannot write {}-channel image", self.channels));
        }
        netpbm::write(path, &self.to_bytes())
    }

    /// Snaps every value to the nearest `k/255`.
    pub fn quantized(mut self) -> Self {
        for v in &mut self.data {
            *v = from_byte(to_byte(*v));
        }
        self
    }
}

/// Image, trimap and ground truth at one resolution.
#[derive(Debug, Clone, PartialEq)]
pub struct MattingSample {
    pub id: String,
    pub image: FloatImage,
    pub alpha: FloatImage,
    pub trimap: Trimap,
    pub fg: Option<FloatImage>,
    pub bg: Option<FloatImage>,
}

impl MattingSample {
    pub fn height(&self) -> usize {
        self.alpha.height
    }

    pub fn width(&self) -> usize {
        self.alpha.width
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        if self.alpha.channels != 1 || self.image.channels != 3 {
            return Err(arg_err!("sample {}: wrong channel counts", self.id));
        }
        let dims_ok = |img: &FloatImage| img.height == h && img.width == w;
        if !dims_ok(&self.image) || self.trimap.height() != h || self.trimap.width() != w {
            return Err(arg_err!(
                "sample {}: planes disagree in resolution",
                self.id
            ));
        }
        for extra in [&self.fg, &self.bg].into_iter().flatten() {
            if !dims_ok(extra) || extra.channels != 3 {
                return Err(arg_err!("sample {}: fg/bg resolution mismatch", self.id));
            }
        }
        Ok(())
    }

    pub fn crop(&self, y0: usize, x0: usize, size: usize) -> Result<MattingSample> {
        let classes: Vec<u8> = (y0..y0 + size)
            .flat_map(|y| (x0..x0 + size).map(move |x| (y, x)))
            .map(|(y, x)| self.trimap.class_at(y, x))
            .collect();
        Ok(MattingSample {
            id: self.id.clone(),
            image: self.image.crop(y0, x0, size, size)?,
            alpha: self.alpha.crop(y0, x0, size, size)?,
            trimap: Trimap::new(size, size, classes)?,
            fg: self
                .fg
                .as_ref()
                .map(|f| f.crop(y0, x0, size, size))
                .transpose()?,
            bg: self
                .bg
                .as_ref()
                .map(|b| b.crop(y0, x0, size, size))
                .transpose()?,
        })
    }
}

/// `I = αF + (1−α)B` per pixel and channel.
pub fn composite(fg: &FloatImage, bg: &FloatImage, alpha: &FloatImage) -> Result<FloatImage> {
    if fg.channels != bg.channels
        || fg.height != bg.height
        || fg.width != bg.width
        || alpha.channels != 1
        || alpha.height != fg.height
        || alpha.width != fg.width
    {
        return Err(arg_err!("composite: fg, bg and alpha resolutions differ"));
    }
    if let Some(i) = alpha.data.iter().position(|a| !(0.0..=1.0).contains(a)) {
        return Err(arg_err!(
            "alpha {} at pixel {i} is outside [0, 1]",
            alpha.data[i]
        ));
    }
    let n = fg.height * fg.width;
    let data = (0..fg.channels * n)
        .map(|i| {
            let a = alpha.data[i % n];
            a * fg.data[i] + (1.0 - a) * bg.data[i]
        })
        .collect();
    FloatImage::new(fg.channels, fg.height, fg.width, data)
}

/// Binary erosion with a `k x k` square and replicate padding.
///
/// A pixel survives iff every pixel of its (clamped) neighbourhood is set.
pub fn erode(mask: &[bool], height: usize, width: usize, k: usize) -> Vec<bool> {
    let r = k / 2;
    // separable: rows then columns
    let mut tmp = vec![false; mask.len()];
    for y in 0..height {
        for x in 0..width {
            let lo = x.saturating_sub(r);
            let hi = (x + r).min(width - 1);
            tmp[y * width + x] = (lo..=hi).all(|xx| mask[y * width + xx]);
        }
    }
    let mut out = vec![false; mask.len()];
    for y in 0..height {
        let lo = y.saturating_sub(r);
        let hi = (y + r).min(height - 1);
        for x in 0..width {
            out[y * width + x] = (lo..=hi).all(|yy| tmp[yy * width + x]);
        }
    }
    out
}

/// Odd kernel size from the 1..=30 range, even draws rounded up.
pub fn random_kernel(rng: &mut impl Rng) -> usize {
    let k = rng.random_range(1..=30usize);
    k | 1
}

/// Trimap by eroding the certain-foreground and certain-background sets.
pub fn generate_trimap(alpha: &FloatImage, kernel: usize) -> Result<Trimap> {
    if kernel.is_multiple_of(2) || kernel > 31 {
        return Err(arg_err!(
            "trimap kernel {kernel} must be odd and within 1..=31"
        ));
    }
    if alpha.channels != 1 {
        return Err(arg_err!("alpha must have one channel"));
    }
    if let Some(v) = alpha.data.iter().find(|a| !(0.0..=1.0).contains(*a)) {
        return Err(arg_err!("alpha value {v} outside [0, 1]"));
    }
    let (h, w) = (alpha.height, alpha.width);
    let fg: Vec<bool> = alpha.data.iter().map(|&a| a >= 1.0 - EPSILON).collect();
    let bg: Vec<bool> = alpha.data.iter().map(|&a| a <= EPSILON).collect();
    let fg = erode(&fg, h, w, kernel);
    let bg = erode(&bg, h, w, kernel);
    let classes = fg
        .iter()
        .zip(&bg)
        .map(|(&f, &b)| {
            if f {
                FOREGROUND
            } else if b {
                BACKGROUND
            } else {
                UNKNOWN
            }
        })
        .collect();
    Trimap::new(h, w, classes)
}

/// Top-left corner of a `crop x crop` window centred on a random unknown pixel
/// (clamped into the image), or a uniform window when nothing is unknown.
pub fn crop_window(trimap: &Trimap, crop: usize, rng: &mut impl Rng) -> Result<(usize, usize)> {
    let (h, w) = (trimap.height(), trimap.width());
    if crop == 0 || crop > h || crop > w {
        return Err(arg_err!("crop {crop} does not fit {h}x{w}"));
    }
    let unknown: Vec<usize> = trimap
        .classes()
        .iter()
        .enumerate()
        .filter(|(_, &c)| c == UNKNOWN)
        .map(|(i, _)| i)
        .collect();
    if unknown.is_empty() {
        return Ok((
            rng.random_range(0..=h - crop),
            rng.random_range(0..=w - crop),
        ));
    }
    let p = unknown[rng.random_range(0..unknown.len())];
    let (cy, cx) = (p / w, p % w);
    let y0 = (cy as isize - (crop / 2) as isize).clamp(0, (h - crop) as isize) as usize;
    let x0 = (cx as isize - (crop / 2) as isize).clamp(0, (w - crop) as isize) as usize;
    Ok((y0, x0))
}

pub fn crop_unknown_centered(
    sample: &MattingSample,
    crop: usize,
    rng: &mut impl Rng,
) -> Result<MattingSample> {
    let (y0, x0) = crop_window(&sample.trimap, crop, rng)?;
    sample.crop(y0, x0, crop)
}

fn mix_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finalizer over the pair
    let mut z = seed
        ^ index
            .wrapping_mul(0x9E37_79B9_7F4A_7C15)
            .wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub count: usize,
    pub size: usize,
    pub seed: u64,
    /// Fraction of fully semi-transparent samples (no alpha = 1 anywhere).
    pub tt_ratio: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            count: 8,
            size: 64,
            seed: 0,
            tt_ratio: 0.25,
        }
    }
}

/// Whether sample `i` of `n` is transparent-totally; spreads exactly
/// `round(n * ratio)` such samples over the corpus.
pub fn is_tt_index(i: usize, n: usize, ratio: f64) -> bool {
    let n_tt = ((n as f64) * ratio).round() as usize;
    (i * n_tt) / n != ((i + 1) * n_tt) / n
}

fn smooth_field(rng: &mut impl Rng, size: usize, lo: f64, hi: f64) -> FloatImage {
    let mut data = Vec::with_capacity(3 * size * size);
    for _ in 0..3 {
        let base = rng.random_range(lo..hi);
        let gx = rng.random_range(-0.3..0.3);
        let gy = rng.random_range(-0.3..0.3);
        let amp = rng.random_range(0.0..0.2);
        let fx = rng.random_range(0.5..3.0);
        let fy = rng.random_range(0.5..3.0);
        let ph = rng.random_range(0.0..std::f64::consts::TAU);
        for y in 0..size {
            for x in 0..size {
                let u = x as f64 / size as f64;
                let v = y as f64 / size as f64;
                let val = base
                    + gx * (u - 0.5)
                    + gy * (v - 0.5)
                    + amp * (std::f64::consts::TAU * (fx * u + fy * v) + ph).sin();
                data.push(val.clamp(0.0, 1.0));
            }
        }
    }
    FloatImage::new(3, size, size, data).expect("sized")
}

fn synth_alpha(rng: &mut impl Rng, size: usize, tt: bool) -> FloatImage {
    let s = size as f64;
    let mut a = vec![0.0f64; size * size];
    let kind = rng.random_range(0..3);
    let blobs = rng.random_range(1..=3);
    for _ in 0..blobs {
        let cx = rng.random_range(0.25..0.75) * s;
        let cy = rng.random_range(0.25..0.75) * s;
        let sigma = rng.random_range(0.08..0.2) * s;
        let gain = if tt { 1.0 } else { rng.random_range(1.5..3.0) };
        for y in 0..size {
            for x in 0..size {
                let d2 = (x as f64 - cx).powi(2) + (y as f64 - cy).powi(2);
                let v = match kind {
                    // soft disc with a linear ramp at its rim
                    1 => ((sigma * 1.5 - d2.sqrt()) / (0.4 * sigma)).clamp(0.0, 1.0),
                    _ => (-d2 / (2.0 * sigma * sigma)).exp(),
                };
                a[y * size + x] = (a[y * size + x] + gain * v).min(1.0);
            }
        }
    }
    if kind == 2 {
        // thin strokes crossing the object
        let strokes = rng.random_range(1..=3);
        for _ in 0..strokes {
            let (x0, y0) = (rng.random_range(0.0..s), rng.random_range(0.0..s));
            let ang = rng.random_range(0.0..std::f64::consts::PI);
            let (dx, dy) = (ang.cos(), ang.sin());
            let width = rng.random_range(0.6..1.6);
            for y in 0..size {
                for x in 0..size {
                    let dist = ((x as f64 - x0) * dy - (y as f64 - y0) * dx).abs();
                    let v = (1.0 - dist / width).clamp(0.0, 1.0) * 0.9;
                    a[y * size + x] = a[y * size + x].max(v);
                }
            }
        }
    }
    if tt {
        let peak = rng.random_range(0.35..0.85);
        let m = a.iter().cloned().fold(0.0, f64::max).max(1e-9);
        for v in &mut a {
            *v = *v / m * peak;
        }
    }
    FloatImage::new(1, size, size, a)
        .expect("sized")
        .quantized()
}

/// One deterministic synthetic sample, a pure function of `(seed, index)`.
pub fn synth_sample(spec: &SynthSpec, index: usize) -> Result<MattingSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(spec.seed, index as u64));
    let size = spec.size;
    let tt = is_tt_index(index, spec.count, spec.tt_ratio);
    let alpha = synth_alpha(&mut rng, size, tt);
    let fg = smooth_field(&mut rng, size, 0.4, 1.0).quantized();
    let bg = smooth_field(&mut rng, size, 0.0, 0.6).quantized();
    let image = composite(&fg, &bg, &alpha)?.quantized();
    let trimap = generate_trimap(&alpha, random_kernel(&mut rng))?;
    Ok(MattingSample {
        id: format!("synth_{index:04}"),
        image,
        alpha,
        trimap,
        fg: Some(fg),
        bg: Some(bg),
    })
}

pub fn synth_dataset(spec: &SynthSpec) -> Result<Vec<MattingSample>> {
    if spec.size == 0 || !spec.size.is_multiple_of(32) {
        return Err(arg_err!(
            "synthetic size {} is not a positive multiple of 32",
            spec.size
        ));
    }
    if !(0.0..=1.0).contains(&spec.tt_ratio) {
        return Err(arg_err!("tt_ratio {} outside [0, 1]", spec.tt_ratio));
    }
    (0..spec.count).map(|i| synth_sample(spec, i)).collect()
}

/// One ingestion record: a foreground, its alpha and the backgrounds to composite it over.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub fg: PathBuf,
    pub alpha: PathBuf,
    pub bgs: Vec<PathBuf>,
    /// Fixed trimap; without one a trimap is generated from the alpha.
    pub trimap: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub split: String,
    pub records: Vec<ManifestRecord>,
}

const TRIMAP_PREFIX: &str = "trimap:";

impl CorpusManifest {
    /// Line format: `fg<TAB>alpha<TAB>bg[<TAB>bg...][<TAB>trimap:path]`;
    /// `# split: <name>` sets the split; other `#` lines are comments.
    pub fn parse(text: &str) -> Result<CorpusManifest> {
        let mut split = "train".to_string();
        let mut records = Vec::new();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(s) = rest.trim().strip_prefix("split:") {
                    split = s.trim().to_string();
                }
                continue;
            }
            let mut fields: Vec<&str> = line.split('\t').collect();
            let trimap = match fields.last() {
                Some(f) if f.starts_with(TRIMAP_PREFIX) => {
                    Some(PathBuf::from(&fields.pop().unwrap()[TRIMAP_PREFIX.len()..]))
                }
                _ => None,
            };
            if fields.len() < 3 || fields.iter().any(|f| f.is_empty()) {
                return Err(Error::Format(format!(
                    "manifest line {}: need fg, alpha and at least one bg",
                    no + 1
                )));
            }
            if trimap.is_some() && fields.len() != 3 {
                return Err(Error::Format(format!(
                    "manifest line {}: a fixed trimap needs exactly one background",
                    no + 1
                )));
            }
            records.push(ManifestRecord {
                fg: fields[0].into(),
                alpha: fields[1].into(),
                bgs: fields[2..].iter().map(PathBuf::from).collect(),
                trimap,
            });
        }
        Ok(CorpusManifest { split, records })
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("# split: {}\n", self.split);
        for r in &self.records {
            let mut fields: Vec<String> =
                vec![r.fg.display().to_string(), r.alpha.display().to_string()];
            fields.extend(r.bgs.iter().map(|b| b.display().to_string()));
            if let Some(t) = &r.trimap {
                fields.push(format!("{TRIMAP_PREFIX}{}", t.display()));
            }
            out.push_str(&fields.join("\t"));
            out.push('\n');
        }
        out
    }

    pub fn read(path: &Path) -> Result<CorpusManifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    /// Composites every (record, background) pair. Relative paths resolve
    /// against `base`; generated trimaps are seeded by `seed` and pair index.
    pub fn load(&self, base: &Path, seed: u64) -> Result<Vec<MattingSample>> {
        let mut out = Vec::new();
        for (ri, r) in self.records.iter().enumerate() {
            let fg = FloatImage::read(&base.join(&r.fg))?;
            let alpha = FloatImage::read(&base.join(&r.alpha))?;
            if fg.channels != 3 || alpha.channels != 1 {
                return Err(Error::Format(format!(
                    "record {ri}: fg must be RGB and alpha grayscale"
                )));
            }
            if (fg.height, fg.width) != (alpha.height, alpha.width) {
                return Err(Error::Format(format!(
                    "record {ri}: fg {}x{} vs alpha {}x{}",
                    fg.height, fg.width, alpha.height, alpha.width
                )));
            }
            for (bi, bgp) in r.bgs.iter().enumerate() {
                let bg_full = FloatImage::read(&base.join(bgp))?;
                if bg_full.channels != 3 || bg_full.height < fg.height || bg_full.width < fg.width {
                    return Err(Error::Format(format!(
                        "{}: background must be RGB and at least {}x{}",
                        bgp.display(),
                        fg.height,
                        fg.width
                    )));
                }
                let bg = bg_full.crop(0, 0, fg.height, fg.width)?;
                let image = composite(&fg, &bg, &alpha)?;
                let trimap = match &r.trimap {
                    Some(t) => Trimap::read_pgm(&base.join(t))?,
                    None => {
                        let mut rng =
                            ChaCha8Rng::seed_from_u64(mix_seed(seed, (ri * 1000 + bi) as u64));
                        generate_trimap(&alpha, random_kernel(&mut rng))?
                    }
                };
                let sample = MattingSample {
                    id: format!(
                        "{}_{bi}",
                        r.fg.file_stem().and_then(|s| s.to_str()).unwrap_or("fg")
                    ),
                    image,
                    alpha: alpha.clone(),
                    trimap,
                    fg: Some(fg.clone()),
                    bg: Some(bg),
                };
                sample.validate()?;
                out.push(sample);
            }
        }
        Ok(out)
    }
}

/// Writes samples as PPM/PGM files plus a manifest with fixed trimaps.
pub fn write_corpus(dir: &Path, samples: &[MattingSample], split: &str) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(samples.len());
    for s in samples {
        let (fg, bg) = match (&s.fg, &s.bg) {
            (Some(f), Some(b)) => (f, b),
            _ => return Err(arg_err!("sample {} lacks fg/bg planes", s.id)),
        };
        let name = |suffix: &str| PathBuf::from(format!("{}_{suffix}", s.id));
        let rec = ManifestRecord {
            fg: name("fg.ppm"),
            alpha: name("alpha.pgm"),
            bgs: vec![name("bg.ppm")],
            trimap: Some(name("trimap.pgm")),
        };
        fg.write(&dir.join(&rec.fg))?;
        s.alpha.write(&dir.join(&rec.alpha))?;
        bg.write(&dir.join(&rec.bgs[0]))?;
        s.trimap
            .write_pgm(&dir.join(rec.trimap.as_ref().unwrap()))?;
        s.image.write(&dir.join(format!("{}_image.ppm", s.id)))?;
        records.push(rec);
    }
    let manifest = CorpusManifest {
        split: split.to_string(),
        records,
    };
    let path = dir.join("manifest.txt");
    std::fs::write(&path, manifest.to_text()).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
