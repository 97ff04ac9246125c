//! Named parameter set of the network.
//!
//! `param_specs` is the single source of truth for which tensors exist under
//! a given config: initialization, counting, checkpointing, and the forward
//! pass all key off the same names.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{ModalityId, ModelConfig, ModelError};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// Truncated normal (resampled beyond 2 sigma) with the given std.
    TruncNormal(f32),
    /// Normal with std sqrt(2 / fan_in).
    FanIn(usize),
    Zeros,
    Ones,
}

#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

const TRUNC_STD: f32 = 0.02;

fn conv_spec(specs: &mut Vec<ParamSpec>, name: &str, cout: usize, cin: usize, k: usize) {
    specs.push(ParamSpec {
        name: format!("{name}.w"),
        shape: vec![cout, cin, k, k, k],
        init: Init::FanIn(cin * k * k * k),
    });
    specs.push(ParamSpec { name: format!("{name}.b"), shape: vec![cout], init: Init::Zeros });
}

fn tconv_spec(specs: &mut Vec<ParamSpec>, name: &str, cin: usize, cout: usize, k: usize) {
    specs.push(ParamSpec {
        name: format!("{name}.w"),
        shape: vec![cin, cout, k, k, k],
        init: Init::FanIn(cin * k * k * k),
    });
    specs.push(ParamSpec { name: format!("{name}.b"), shape: vec![cout], init: Init::Zeros });
}

fn norm_spec(specs: &mut Vec<ParamSpec>, name: &str, c: usize) {
    specs.push(ParamSpec { name: format!("{name}.gamma"), shape: vec![c], init: Init::Ones });
    specs.push(ParamSpec { name: format!("{name}.beta"), shape: vec![c], init: Init::Zeros });
}

fn linear_spec(specs: &mut Vec<ParamSpec>, name: &str, din: usize, dout: usize, bias: bool) {
    specs.push(ParamSpec {
        name: format!("{name}.w"),
        shape: vec![din, dout],
        init: Init::TruncNormal(TRUNC_STD),
    });
    if bias {
        specs.push(ParamSpec { name: format!("{name}.b"), shape: vec![dout], init: Init::Zeros });
    }
}

/// One pre-activation conv block: group norm, ReLU, then a 3x3x3 conv.
fn block_spec(specs: &mut Vec<ParamSpec>, name: &str, cin: usize, cout: usize) {
    norm_spec(specs, &format!("{name}.norm"), cin);
    conv_spec(specs, &format!("{name}.conv"), cout, cin, 3);
}

fn transformer_block_spec(specs: &mut Vec<ParamSpec>, prefix: &str, dim: usize, ffn_mult: usize) {
    norm_spec(specs, &format!("{prefix}.ln1"), dim);
    for proj in ["wq", "wk", "wv", "wo"] {
        specs.push(ParamSpec {
            name: format!("{prefix}.attn.{proj}"),
            shape: vec![dim, dim],
            init: Init::TruncNormal(TRUNC_STD),
        });
    }
    norm_spec(specs, &format!("{prefix}.ln2"), dim);
    linear_spec(specs, &format!("{prefix}.ffn.l1"), dim, dim * ffn_mult, true);
    linear_spec(specs, &format!("{prefix}.ffn.l2"), dim * ffn_mult, dim, true);
}

/// Decoder parameter layout, shared between the main decoder (4-modality
/// skips) and the auxiliary shared-weight decoder (own skips only).
fn decoder_spec(specs: &mut Vec<ParamSpec>, prefix: &str, cfg: &ModelConfig, merge_cin: usize, skip_mult: usize) {
    let ch = &cfg.channels;
    let top = cfg.stages - 1;
    conv_spec(specs, &format!("{prefix}.merge"), ch[top], merge_cin, 3);
    for lev in (0..top).rev() {
        let stage = format!("{prefix}.s{lev}");
        tconv_spec(specs, &format!("{stage}.up"), ch[lev + 1], ch[lev], 2);
        block_spec(specs, &format!("{stage}.b1"), ch[lev] * (1 + skip_mult), ch[lev]);
        block_spec(specs, &format!("{stage}.b2"), ch[lev], ch[lev]);
    }
    conv_spec(specs, &format!("{prefix}.head"), cfg.classes, ch[0], 1);
}

/// Every parameter tensor of the network under `cfg`, in creation order.
/// The name set is a pure function of the config; ablation flags remove the
/// corresponding tensors.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    let ch = &cfg.channels;
    let top = cfg.stages - 1;
    let s = cfg.token_count();

    for m in ModalityId::ALL {
        let tag = m.tag();
        // Stage 1: a plain conv block then one pre-activation block.
        conv_spec(&mut specs, &format!("enc.{tag}.s1.conv1"), ch[0], 1, 3);
        block_spec(&mut specs, &format!("enc.{tag}.s1.b2"), ch[0], ch[0]);
        // Later stages: strided downsample conv between stages, then two blocks.
        for i in 1..cfg.stages {
            conv_spec(&mut specs, &format!("enc.{tag}.down{i}"), ch[i], ch[i - 1], 3);
            block_spec(&mut specs, &format!("enc.{tag}.s{i}.b1"), ch[i], ch[i]);
            block_spec(&mut specs, &format!("enc.{tag}.s{i}.b2"), ch[i], ch[i]);
        }
        // Tokenizer: linear projection into token space plus a learnable
        // position embedding.
        linear_spec(&mut specs, &format!("intra.{tag}.token"), ch[top], cfg.token_dim, false);
        specs.push(ParamSpec {
            name: format!("intra.{tag}.pos"),
            shape: vec![s, cfg.token_dim],
            init: Init::Zeros,
        });
        if cfg.use_intra {
            for d in 0..cfg.intra_depth {
                transformer_block_spec(&mut specs, &format!("intra.{tag}.blk{d}"), cfg.token_dim, cfg.ffn_mult);
            }
        }
    }

    // Multimodal token: shared projection and a fresh position embedding over
    // the concatenated 4S sequence.
    linear_spec(&mut specs, "inter.proj", cfg.token_dim, cfg.token_dim, false);
    specs.push(ParamSpec {
        name: "inter.pos".into(),
        shape: vec![4 * s, cfg.token_dim],
        init: Init::Zeros,
    });
    if cfg.use_inter {
        for d in 0..cfg.inter_depth {
            transformer_block_spec(&mut specs, &format!("inter.blk{d}"), cfg.token_dim, cfg.ffn_mult);
        }
    }

    // Main decoder consumes the reshaped multimodal feature map (4 C'
    // channels) and 4-modality skips.
    decoder_spec(&mut specs, "dec", cfg, 4 * cfg.token_dim, 4);
    if cfg.use_aux {
        // Deep-supervision heads on every decoder stage output.
        for lev in (0..top).rev() {
            conv_spec(&mut specs, &format!("dec.ds{lev}"), cfg.classes, ch[lev], 1);
        }
        // Shared-weight auxiliary decoder over each modality's own features.
        decoder_spec(&mut specs, "aux", cfg, ch[top], 1);
    }

    specs
}

/// The named parameter tensors of a model. Iteration order is name order,
/// which keeps optimizer updates and serialization deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    map: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn from_map(map: BTreeMap<String, Tensor>) -> Self {
        ModelParams { map }
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, ModelError> {
        self.map.get(name).ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, ModelError> {
        self.map.get_mut(name).ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.map.contains_key(name)
    }

    pub fn num_scalars(&self) -> usize {
        self.map.values().map(|t| t.numel()).sum()
    }

    /// FNV-1a over every value byte, in name order. Used to assert that
    /// evaluation leaves parameters untouched.
    pub fn content_hash(&self) -> u64 {
        let mut h = 0xcbf29ce484222325u64;
        for (name, t) in &self.map {
            for b in name.as_bytes() {
                h = (h ^ *b as u64).wrapping_mul(0x100000001b3);
            }
            for v in &t.data {
                for b in v.to_le_bytes() {
                    h = (h ^ b as u64).wrapping_mul(0x100000001b3);
                }
            }
        }
        h
    }
}

/// Standard-normal draw via Box-Muller, consuming two uniforms.
fn normal(rng: &mut ChaCha8Rng) -> f32 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    ((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()) as f32
}

fn trunc_normal(rng: &mut ChaCha8Rng, std: f32) -> f32 {
    loop {
        let v = normal(rng);
        if v.abs() <= 2.0 {
            return v * std;
        }
    }
}

/// Deterministic parameter initialization: truncated normal for Transformer
/// and linear weights, fan-in-scaled normal for convolutions, zeros for
/// biases, shifts, and position embeddings, ones for norm scales.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ModelParams, ModelError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut map = BTreeMap::new();
    for spec in param_specs(cfg) {
        let n = spec.numel();
        let data: Vec<f32> = match spec.init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::TruncNormal(std) => (0..n).map(|_| trunc_normal(&mut rng, std)).collect(),
            Init::FanIn(fan_in) => {
                let std = (2.0 / fan_in as f32).sqrt();
                (0..n).map(|_| normal(&mut rng) * std).collect()
            }
        };
        map.insert(spec.name, Tensor::new(spec.shape, data));
    }
    Ok(ModelParams::from_map(map))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_config_determined() {
        let cfg = ModelConfig::desk();
        let specs = param_specs(&cfg);
        let mut names: Vec<&str> = specs.iter().map(|s| s.name.as_str()).collect();
        let before = names.len();
        names.sort_unstable();
        names.dedup();
        assert_eq!(before, names.len(), "duplicate parameter names");
        // Pure function of the config.
        let again: Vec<String> = param_specs(&cfg).into_iter().map(|s| s.name).collect();
        let first: Vec<String> = specs.into_iter().map(|s| s.name).collect();
        assert_eq!(first, again);
    }

    #[test]
    fn ablations_strictly_shrink_the_name_set() {
        let full = param_specs(&ModelConfig::desk()).len();
        for (intra, inter, aux) in [(false, true, true), (true, false, true), (true, true, false)] {
            let cfg = ModelConfig { use_intra: intra, use_inter: inter, use_aux: aux, ..ModelConfig::desk() };
            assert!(param_specs(&cfg).len() < full);
        }
    }

    #[test]
    fn init_is_deterministic_and_respects_kinds() {
        let cfg = ModelConfig::tiny();
        let a = init_params(&cfg, 9).unwrap();
        let b = init_params(&cfg, 9).unwrap();
        assert_eq!(a, b);
        let c = init_params(&cfg, 10).unwrap();
        assert_ne!(a, c);

        // Norm scales are ones, shifts zero, position embeddings zero.
        assert!(a.get("enc.flair.s1.b2.norm.gamma").unwrap().data.iter().all(|&v| v == 1.0));
        assert!(a.get("enc.flair.s1.b2.norm.beta").unwrap().data.iter().all(|&v| v == 0.0));
        assert!(a.get("intra.t2.pos").unwrap().data.iter().all(|&v| v == 0.0));
        assert!(a.get("dec.head.b").unwrap().data.iter().all(|&v| v == 0.0));
        // Truncated normal stays within 2 sigma.
        let tok = a.get("intra.t1.token.w").unwrap();
        assert!(tok.data.iter().all(|&v| v.abs() <= 0.04 + 1e-6));
        assert!(tok.data.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn tiny_config_param_count_matches_hand_sum() {
        // extent 16, channels [2,4,8,16,32], groups 2, C'=8, heads 2: count
        // every tensor by an independent arithmetic walk of the layout.
        let cfg = ModelConfig {
            stages: 5,
            channels: vec![2, 4, 8, 16, 32],
            token_dim: 8,
            heads: 2,
            ffn_mult: 4,
            intra_depth: 1,
            inter_depth: 1,
            groups: 2,
            classes: 3,
            extent: 16,
            use_intra: true,
            use_inter: true,
            use_aux: true,
        };
        let ch = [2usize, 4, 8, 16, 32];
        let k3 = 27;
        let conv = |cout: usize, cin: usize, k: usize| cout * cin * k + cout;
        let block = |cin: usize, cout: usize| 2 * cin + conv(cout, cin, k3);
        // encoder per modality
        let mut enc = conv(ch[0], 1, k3) + block(ch[0], ch[0]);
        for i in 1..5 {
            enc += conv(ch[i], ch[i - 1], k3) + 2 * block(ch[i], ch[i]);
        }
        let s = 1usize; // 16^3 / 2^12
        let cp = 8usize; // token dim
        let tokenizer = ch[4] * cp + s * cp;
        let tblock = 2 * cp + 4 * cp * cp + 2 * cp + (cp * 4 * cp + 4 * cp) + (4 * cp * cp + cp);
        let per_modality = enc + tokenizer + tblock;
        let inter = cp * cp + 4 * s * cp + tblock;
        let decoder = |merge_cin: usize, skip_mult: usize| {
            let mut d = conv(ch[4], merge_cin, k3);
            for lev in (0..4).rev() {
                let tconv = ch[lev + 1] * ch[lev] * 8 + ch[lev];
                d += tconv + block(ch[lev] * (1 + skip_mult), ch[lev]) + block(ch[lev], ch[lev]);
            }
            d + conv(3, ch[0], 1)
        };
        let ds_heads: usize = (0..4).map(|lev| conv(3, ch[lev], 1)).sum();
        let expected = 4 * per_modality + inter + decoder(4 * cp, 4) + ds_heads + decoder(ch[4], 1);

        let specs = param_specs(&cfg);
        let total: usize = specs.iter().map(|s| s.numel()).sum();
        assert_eq!(total, expected);

        let params = init_params(&cfg, 1).unwrap();
        assert_eq!(params.num_scalars(), expected);
    }
}
