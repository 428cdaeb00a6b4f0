//! Trimaps and the learnable three-token tables substituted for them.
//!
//! Class indices are fixed: 0 = background, 1 = unknown, 2 = foreground, stored
//! on disk as bytes 0, 128 and 255.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{arg_err, Error, Result};
use crate::netpbm::{self, ByteImage};
use crate::tensor::Tensor;

pub const BACKGROUND: u8 = 0;
pub const UNKNOWN: u8 = 1;
pub const FOREGROUND: u8 = 2;

const CLASS_BYTES: [u8; 3] = [0, 128, 255];

/// Per-pixel three-class map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Trimap {
    height: usize,
    width: usize,
    classes: Vec<u8>,
}

impl Trimap {
    pub fn new(height: usize, width: usize, classes: Vec<u8>) -> Result<Trimap> {
        if height == 0 || width == 0 || classes.len() != height * width {
            return Err(arg_err!(
                "trimap {height}x{width} needs {} classes, got {}",
                height * width,
                classes.len()
            ));
        }
        if let Some(i) = classes.iter().position(|&c| c > FOREGROUND) {
            return Err(arg_err!(
                "class {} at pixel {i} is not in {{0,1,2}}",
                classes[i]
            ));
        }
        Ok(Trimap {
            height,
            width,
            classes,
        })
    }

    pub fn filled(height: usize, width: usize, class: u8) -> Result<Trimap> {
        Trimap::new(height, width, vec![class; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn classes(&self) -> &[u8] {
        &self.classes
    }

    pub fn class_at(&self, y: usize, x: usize) -> u8 {
        self.classes[y * self.width + x]
    }

    pub fn set_class(&mut self, y: usize, x: usize, class: u8) -> Result<()> {
        if class > FOREGROUND {
            return Err(arg_err!("class {class} is not in {{0,1,2}}"));
        }
        if y >= self.height || x >= self.width {
            return Err(arg_err!(
                "pixel ({y},{x}) outside {}x{}",
                self.height,
                self.width
            ));
        }
        self.classes[y * self.width + x] = class;
        Ok(())
    }

    pub fn count(&self, class: u8) -> usize {
        self.classes.iter().filter(|&&c| c == class).count()
    }

    /// Decodes bytes in {0,128,255}; any other value is a format error naming the pixel.
    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Result<Trimap> {
        if bytes.len() != height * width {
            return Err(Error::Format(format!(
                "trimap {height}x{width} needs {} bytes, got {}",
                height * width,
                bytes.len()
            )));
        }
        let classes = bytes
            .iter()
            .enumerate()
            .map(|(i, &b)| match b {
                0 => Ok(BACKGROUND),
                128 => Ok(UNKNOWN),
                255 => Ok(FOREGROUND),
                other => Err(Error::Format(format!(
                    "trimap byte {other} at pixel (y={}, x={}) is not one of 0/128/255",
                    i / width,
                    i % width
                ))),
            })
            .collect::<Result<Vec<u8>>>()?;
        Trimap::new(height, width, classes)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.classes
            .iter()
            .map(|&c| CLASS_BYTES[c as usize])
            .collect()
    }

    pub fn read_pgm(path: &Path) -> Result<Trimap> {
        let img = netpbm::read(path)?;
        if img.channels != 1 {
            return Err(Error::Format(format!(
                "{}: trimap must be grayscale",
                path.display()
            )));
        }
        Trimap::from_bytes(img.height, img.width, &img.data)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        netpbm::write(path, &self.to_byte_image())
    }

    pub fn to_byte_image(&self) -> ByteImage {
        ByteImage {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.to_bytes(),
        }
    }

    /// Nearest-neighbour downsampling keeping the top-left pixel of each cell.
    pub fn downsample(&self, factor: usize) -> Result<Trimap> {
        if factor == 0 || !factor.is_power_of_two() {
            return Err(arg_err!("downsample factor {factor} is not a power of two"));
        }
        if !self.height.is_multiple_of(factor) || !self.width.is_multiple_of(factor) {
            return Err(arg_err!(
                "downsample factor {factor} does not divide {}x{}",
                self.height,
                self.width
            ));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let mut classes = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                classes.push(self.class_at(y * factor, x * factor));
            }
        }
        Trimap::new(h, w, classes)
    }

    /// 1.0 on unknown and foreground, 0.0 on background; shape `[1,1,h,w]`.
    pub fn non_background_mask(&self) -> Tensor {
        let data = self
            .classes
            .iter()
            .map(|&c| if c == BACKGROUND { 0.0 } else { 1.0 })
            .collect();
        Tensor::new(&[1, 1, self.height, self.width], data).expect("shape matches class count")
    }

    /// 1.0 where the class is unknown, as a flat row-major vector.
    pub fn unknown_mask(&self) -> Vec<f64> {
        self.classes
            .iter()
            .map(|&c| if c == UNKNOWN { 1.0 } else { 0.0 })
            .collect()
    }

    /// Fraction of pixels marked known foreground.
    pub fn foreground_fraction(&self) -> f64 {
        self.count(FOREGROUND) as f64 / self.classes.len() as f64
    }
}

/// Initial values of the three tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TokenInit {
    /// Background, unknown, foreground filled with -1, 0, 1.
    MinusOneZeroOne,
    /// Background, unknown, foreground filled with 0, 1, 2.
    #[default]
    ZeroOneTwo,
    /// Independent uniform draws in [-1, 1].
    Uniform,
    /// All zero; the additive injection then reduces to the token-free model.
    Zero,
}

/// Three learnable channel vectors for one injection site, stored as a `[3, C]` leaf.
#[derive(Debug, Clone)]
pub struct TriTokenTable {
    pub site_id: String,
    tokens: Tensor,
}

impl TriTokenTable {
    pub fn init(
        site_id: impl Into<String>,
        dim: usize,
        init: TokenInit,
        rng: &mut impl Rng,
    ) -> TriTokenTable {
        let data: Vec<f64> = match init {
            TokenInit::MinusOneZeroOne => (0..3).flat_map(|i| vec![i as f64 - 1.0; dim]).collect(),
            TokenInit::ZeroOneTwo => (0..3).flat_map(|i| vec![i as f64; dim]).collect(),
            TokenInit::Zero => vec![0.0; 3 * dim],
            TokenInit::Uniform => (0..3 * dim)
                .map(|_| rng.random_range(-1.0f32..=1.0f32) as f64)
                .collect(),
        };
        Self::from_values(site_id, dim, data).expect("3*dim values")
    }

    pub fn from_values(
        site_id: impl Into<String>,
        dim: usize,
        values: Vec<f64>,
    ) -> Result<TriTokenTable> {
        Ok(TriTokenTable {
            site_id: site_id.into(),
            tokens: Tensor::param(&[3, dim], values)?,
        })
    }

    /// Wraps an existing `[3, C]` tensor (a bound parameter).
    pub fn from_tensor(site_id: impl Into<String>, tokens: Tensor) -> Result<TriTokenTable> {
        if tokens.rank() != 2 || tokens.shape()[0] != 3 {
            return Err(arg_err!(
                "token table must be [3, C], got {:?}",
                tokens.shape()
            ));
        }
        Ok(TriTokenTable {
            site_id: site_id.into(),
            tokens,
        })
    }

    pub fn dim(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tokens
    }

    pub fn token(&self, class: u8) -> &[f64] {
        let c = self.dim();
        &self.tokens.data()[class as usize * c..(class as usize + 1) * c]
    }

    /// Replaces every trimap pixel by its class token: output `[1, C, h, w]`.
    /// Differentiable with respect to the table.
    pub fn build_map(&self, trimap: &Trimap) -> Result<Tensor> {
        let idx: Vec<usize> = trimap.classes().iter().map(|&c| c as usize).collect();
        let rows = self.tokens.index_select_rows(&idx)?;
        rows.transpose(0, 1)?
            .reshape(&[1, self.dim(), trimap.height(), trimap.width()])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn random_trimap(h: usize, w: usize, rng: &mut impl Rng) -> Trimap {
        Trimap::new(h, w, (0..h * w).map(|_| rng.random_range(0..3u8)).collect()).unwrap()
    }

    #[test]
    fn byte_alphabet() {
        let t = Trimap::from_bytes(1, 3, &[0, 128, 255]).unwrap();
        assert_eq!(t.classes(), &[BACKGROUND, UNKNOWN, FOREGROUND]);
        assert_eq!(t.to_bytes(), vec![0, 128, 255]);
        let err = Trimap::from_bytes(2, 2, &[0, 0, 0, 7]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("byte 7") && msg.contains("y=1, x=1"), "{msg}");
    }

    #[test]
    fn all_background_map_is_token_zero() {
        let table = TriTokenTable::init("s", 4, TokenInit::Uniform, &mut rng());
        let t = Trimap::filled(3, 2, BACKGROUND).unwrap();
        let map = table.build_map(&t).unwrap();
        assert_eq!(map.shape(), &[1, 4, 3, 2]);
        for c in 0..4 {
            for p in 0..6 {
                assert_eq!(map.data()[c * 6 + p], table.token(0)[c]);
            }
        }
    }

    #[test]
    fn scalar_tokens_zero_one_two() {
        let table = TriTokenTable::init("s", 1, TokenInit::ZeroOneTwo, &mut rng());
        let t = Trimap::new(2, 2, vec![0, 1, 2, 0]).unwrap();
        assert_eq!(table.build_map(&t).unwrap().data(), &[0.0, 1.0, 2.0, 0.0]);
    }

    #[test]
    fn random_map_matches_lookup() {
        let mut r = rng();
        let t = random_trimap(8, 8, &mut r);
        let table = TriTokenTable::init("s", 4, TokenInit::Uniform, &mut r);
        let map = table.build_map(&t).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let tok = table.token(t.class_at(y, x));
                for c in 0..4 {
                    assert_eq!(map.data()[(c * 8 + y) * 8 + x], tok[c]);
                }
            }
        }
    }

    #[test]
    fn map_gradient_counts_pixels() {
        let mut r = rng();
        let t = random_trimap(5, 7, &mut r);
        let table = TriTokenTable::init("s", 3, TokenInit::Uniform, &mut r);
        table.build_map(&t).unwrap().sum().backward().unwrap();
        let g = table.tensor().grad().unwrap();
        for class in 0..3u8 {
            for c in 0..3 {
                assert_eq!(g[class as usize * 3 + c], t.count(class) as f64);
            }
        }
    }

    #[test]
    fn downsample_rules() {
        let t = Trimap::new(2, 2, vec![0, 2, 2, 0]).unwrap();
        assert_eq!(t.downsample(2).unwrap().classes(), &[0]);
        let u = Trimap::filled(8, 4, UNKNOWN).unwrap();
        assert_eq!(
            u.downsample(4).unwrap(),
            Trimap::filled(2, 1, UNKNOWN).unwrap()
        );
        assert!(u.downsample(3).is_err());
        assert!(u.downsample(8).is_err());

        let mut r = rng();
        let big = random_trimap(16, 16, &mut r);
        let small = big.downsample(4).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(small.class_at(y, x), big.classes()[(4 * y) * 16 + 4 * x]);
            }
        }
    }

    #[test]
    fn masks() {
        let t = Trimap::new(2, 2, vec![0, 1, 2, 0]).unwrap();
        assert_eq!(t.non_background_mask().data(), &[0.0, 1.0, 1.0, 0.0]);
        assert_eq!(t.unknown_mask(), vec![0.0, 1.0, 0.0, 0.0]);
        let fg = Trimap::filled(2, 3, FOREGROUND).unwrap();
        assert!(fg.non_background_mask().data().iter().all(|&v| v == 1.0));
        let bg = Trimap::filled(2, 3, BACKGROUND).unwrap();
        assert!(bg.non_background_mask().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_strategies() {
        let t = TriTokenTable::init("s", 2, TokenInit::MinusOneZeroOne, &mut rng());
        assert_eq!(t.tensor().data(), &[-1., -1., 0., 0., 1., 1.]);
        let u = TriTokenTable::init("s", 64, TokenInit::Uniform, &mut rng());
        assert!(u.tensor().data().iter().all(|v| (-1.0..=1.0).contains(v)));
        assert!(u.tensor().requires_grad());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn byte_round_trip(classes in proptest::collection::vec(0u8..3, 1..64)) {
                let t = Trimap::new(1, classes.len(), classes).unwrap();
                let back = Trimap::from_bytes(1, t.width(), &t.to_bytes()).unwrap();
                prop_assert_eq!(back, t);
            }

            #[test]
            fn class_recovery_from_distinct_tokens(seed in any::<u64>()) {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                let t = random_trimap(6, 6, &mut r);
                let table = TriTokenTable::init("s", 3, TokenInit::Uniform, &mut r);
                let map = table.build_map(&t).unwrap();
                for p in 0..36 {
                    let v: Vec<f64> = (0..3).map(|c| map.data()[c * 36 + p]).collect();
                    let cls = (0..3u8).find(|&k| table.token(k) == v.as_slice()).unwrap();
                    prop_assert_eq!(cls, t.classes()[p]);
                }
            }

            #[test]
            fn downsample_stays_in_alphabet(seed in any::<u64>(), f in prop::sample::select(vec![1usize, 2, 4, 8])) {
                let mut r = ChaCha8Rng::seed_from_u64(seed);
                let t = random_trimap(16, 8, &mut r);
                let d = t.downsample(f).unwrap();
                prop_assert!(d.classes().iter().all(|&c| c <= FOREGROUND));
            }
        }
    }
}
