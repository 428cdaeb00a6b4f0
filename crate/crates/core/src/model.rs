//! The complete matting network: parameter layout, initialization and forward pass.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decoder::{self, DecoderConfig};
use crate::encoder::{self, AttentionProbe, EncoderConfig, NUM_STAGES};
use crate::error::{arg_err, Result};
use crate::params::{glorot, ParamStore, Params};
use crate::tensor::Tensor;
use crate::trimap::{TokenInit, TriTokenTable, Trimap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub token_init: TokenInit,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()
    }

    /// Channel width of each pyramid level (strides 2..32).
    pub fn level_channels(&self) -> [usize; 5] {
        let e = &self.encoder;
        [
            e.cnn_channels[0],
            e.stage_channels[0],
            e.stage_channels[1],
            e.stage_channels[2],
            e.stage_channels[3],
        ]
    }

    /// Same architecture with every token injection disabled.
    pub fn without_tokens(&self) -> ModelConfig {
        let mut c = self.clone();
        c.encoder.cnn_inject_positions.clear();
        c.encoder.transformer_inject_stages.clear();
        c
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Glorot { fan_in: usize, fan_out: usize },
    Zeros,
    Ones,
    Tokens,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

struct Decls(Vec<ParamDecl>);

impl Decls {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) {
        self.0.push(ParamDecl { name, shape, init });
    }

    fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize) {
        let init = Init::Glorot {
            fan_in: cin * k * k,
            fan_out: cout * k * k,
        };
        self.push(format!("{name}.w"), vec![cout, cin, k, k], init);
        self.push(format!("{name}.b"), vec![cout], Init::Zeros);
    }

    fn linear(&mut self, name: &str, cin: usize, cout: usize) {
        let init = Init::Glorot {
            fan_in: cin,
            fan_out: cout,
        };
        self.push(format!("{name}.w"), vec![cin, cout], init);
        self.push(format!("{name}.b"), vec![cout], Init::Zeros);
    }

    fn norm(&mut self, name: &str, c: usize) {
        self.push(format!("{name}.g"), vec![c], Init::Ones);
        self.push(format!("{name}.b"), vec![c], Init::Zeros);
    }

    fn tokens(&mut self, name: String, c: usize) {
        if !self.0.iter().any(|d| d.name == name) {
            self.push(name, vec![3, c], Init::Tokens);
        }
    }
}

/// Every parameter of the network in a fixed order.
pub fn declare_params(cfg: &ModelConfig) -> Vec<ParamDecl> {
    let e = &cfg.encoder;
    let mut d = Decls(Vec::new());
    let mut cin = 3;
    for pos in 1..=2 {
        let c = e.cnn_channels[pos - 1];
        d.conv(&format!("cnn.{pos}.conv1"), c, cin, 3);
        d.conv(&format!("cnn.{pos}.conv2"), c, c, 3);
        cin = c;
    }
    d.conv("embed", e.stage_channels[0], cin, 1);
    for stage in 1..=NUM_STAGES {
        let c = e.stage_channels[stage - 1];
        if stage > 1 {
            d.conv(
                &format!("stage.{stage}.merge"),
                c,
                e.stage_channels[stage - 2],
                2,
            );
        }
        for block in 0..e.stage_depths[stage - 1] {
            let pre = format!("stage.{stage}.block.{block}");
            d.norm(&format!("{pre}.ln1"), c);
            for n in ["q", "k", "v", "proj"] {
                d.linear(&format!("{pre}.{n}"), c, c);
            }
            d.norm(&format!("{pre}.ln2"), c);
            d.linear(&format!("{pre}.fc1"), c, c * e.mlp_ratio);
            d.linear(&format!("{pre}.fc2"), c * e.mlp_ratio, c);
        }
    }
    let ch = cfg.level_channels();
    for n in (0..4).rev() {
        if cfg.decoder.mgf_levels.contains(&n) {
            let pre = format!("dec.{n}.mgf");
            let sq = cfg.decoder.squeezed(ch[n + 1]);
            d.conv(&format!("{pre}.fuse"), ch[n], ch[n - 1] + ch[n], 3);
            d.linear(&format!("{pre}.fc1"), ch[n + 1], sq);
            d.linear(&format!("{pre}.fc_gamma"), sq, ch[n]);
            d.linear(&format!("{pre}.fc_beta"), sq, ch[n]);
            d.conv(&format!("{pre}.out"), ch[n], ch[n], 3);
        }
        d.conv(&format!("dec.{n}.fuse"), ch[n], ch[n + 1] + ch[n], 3);
    }
    let hc = cfg.decoder.head_channels;
    d.conv("head.conv1", hc, ch[0] + 3, 3);
    d.conv("head.conv2", 1, hc, 3);

    for &pos in &e.cnn_inject_positions {
        d.tokens(EncoderConfig::cnn_token_name(pos), e.cnn_channels[pos - 1]);
    }
    for stage in 1..=NUM_STAGES {
        for block in 0..e.stage_depths[stage - 1] {
            if e.is_tgtb(stage, block) {
                d.tokens(
                    e.stage_token_name(stage, block),
                    e.stage_channels[stage - 1],
                );
            }
        }
    }
    d.0
}

pub fn is_token_param(name: &str) -> bool {
    name.starts_with("tokens.")
}

/// Deterministic initialization from a seed.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for decl in declare_params(cfg) {
        let n: usize = decl.shape.iter().product();
        let data = match decl.init {
            Init::Glorot { fan_in, fan_out } => glorot(&mut rng, n, fan_in, fan_out),
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Tokens => {
                TriTokenTable::init(&decl.name, decl.shape[1], cfg.token_init, &mut rng)
                    .tensor()
                    .data()
                    .to_vec()
            }
        };
        store.insert(decl.name, &decl.shape, data)?;
    }
    Ok(store)
}

/// Planar RGB to a `[1, 3, H, W]` tensor.
pub fn image_tensor(rgb_planar: &[f64], height: usize, width: usize) -> Result<Tensor> {
    Tensor::new(&[1, 3, height, width], rgb_planar.to_vec())
}

/// Encoder then decoder. `image` is `[1, 3, H, W]` with values in [0, 1].
pub fn forward(
    cfg: &ModelConfig,
    p: &Params,
    image: &Tensor,
    trimap: &Trimap,
    probe: Option<&mut AttentionProbe>,
) -> Result<Tensor> {
    if image.rank() != 4
        || image.shape()[2] != trimap.height()
        || image.shape()[3] != trimap.width()
    {
        return Err(arg_err!(
            "image {:?} and trimap {}x{} disagree",
            image.shape(),
            trimap.height(),
            trimap.width()
        ));
    }
    let pyramid = encoder::encode(&cfg.encoder, p, image, trimap, probe)?;
    decoder::decode(&cfg.decoder, p, &pyramid, trimap, image)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn declarations_are_unique_and_complete() {
        let cfg = ModelConfig::default();
        let decls = declare_params(&cfg);
        let mut names: Vec<&str> = decls.iter().map(|d| d.name.as_str()).collect();
        names.sort();
        let before = names.len();
        names.dedup();
        assert_eq!(before, names.len());
        for n in [
            "tokens.cnn.2",
            "tokens.stage.1",
            "tokens.stage.4",
            "dec.2.mgf.fc_gamma.w",
        ] {
            assert!(names.contains(&n), "{n}");
        }
        assert!(!names.contains(&"tokens.cnn.1"));
    }

    #[test]
    fn token_free_config_is_a_subset() {
        let cfg = ModelConfig::default();
        let full = declare_params(&cfg);
        let bare = declare_params(&cfg.without_tokens());
        assert!(bare.iter().all(|d| !is_token_param(&d.name)));
        let non_token: Vec<_> = full
            .into_iter()
            .filter(|d| !is_token_param(&d.name))
            .collect();
        assert_eq!(non_token, bare);
    }

    #[test]
    fn init_is_seeded() {
        let cfg = ModelConfig::default();
        let a = init_params(&cfg, 3).unwrap();
        let b = init_params(&cfg, 3).unwrap();
        let c = init_params(&cfg, 4).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.get("tokens.stage.2").unwrap().data[..2], [0.0, 0.0]);
        assert_eq!(a.get("tokens.stage.2").unwrap().data[32 * 2], 2.0);
    }
}
