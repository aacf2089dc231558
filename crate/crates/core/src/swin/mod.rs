//! SwinIR-style grayscale denoiser.
//!
//! Topology: 3x3 conv shallow features, residual groups of Swin blocks
//! (alternating unshifted / half-window-shifted attention, each group closed
//! by a 3x3 conv and an always-on group residual), then a 3x3 reconstruction
//! conv back to one channel. Two long skips can be toggled:
//!
//! * global (①): input image added to the output;
//! * trunk (②): shallow features added to the trunk output before
//!   reconstruction.
//!
//! Both are parameter-free, so toggling them never changes the parameter set.

mod attention;
mod window;

pub use attention::{
    swin_block, window_attention, AttentionConfig, AttentionOutput, AttentionWeights,
    BlockContext, BlockWeights, LN_EPS,
};
pub use window::{
    cyclic_shift, partition_var, relative_position_index, reverse_var, shift_attention_mask,
    window_partition, window_reverse, TokenBatch, MASK_PENALTY,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{trunc_normal, Bound, ParamStore};
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;

/// The two toggleable long skips.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Shortcuts {
    /// ①: add the input image to the output.
    pub global: bool,
    /// ②: add shallow features to the trunk output.
    pub trunk: bool,
}

impl Shortcuts {
    pub const ON: Shortcuts = Shortcuts {
        global: true,
        trunk: true,
    };
    pub const OFF: Shortcuts = Shortcuts {
        global: false,
        trunk: false,
    };

    pub fn any(&self) -> bool {
        self.global || self.trunk
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Training image size `(h, w)`; any grid divisible by the window works at
    /// inference.
    pub image_size: (usize, usize),
    pub window_size: usize,
    pub depths: Vec<usize>,
    pub embed_dim: usize,
    pub num_heads: usize,
    pub mlp_ratio: f64,
    pub rel_pos_bias: bool,
    pub shortcuts: Shortcuts,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: (256, 256),
            window_size: 8,
            depths: vec![4, 4, 4, 4],
            embed_dim: 60,
            num_heads: 6,
            mlp_ratio: 2.0,
            rel_pos_bias: true,
            shortcuts: Shortcuts::ON,
        }
    }
}

impl ModelConfig {
    /// One group of two blocks, width 12, two heads.
    pub fn tiny(size: usize) -> Self {
        ModelConfig {
            image_size: (size, size),
            depths: vec![2],
            embed_dim: 12,
            num_heads: 2,
            ..Self::default()
        }
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.image_size;
        let ws = self.window_size;
        let fail = |m: String| Err(Error::Config(m));
        if ws == 0 {
            return fail("window_size must be positive".into());
        }
        if h == 0 || w == 0 || h % ws != 0 || w % ws != 0 {
            return fail(format!("image size {h}x{w} is not divisible by window size {ws}"));
        }
        if self.num_heads == 0 || self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return fail(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.depths.is_empty() || self.depths.contains(&0) {
            return fail(format!("depths {:?} must be non-empty and all >= 1", self.depths));
        }
        if !(self.mlp_ratio > 0.0) || self.mlp_hidden() == 0 {
            return fail(format!("mlp_ratio {} gives an empty hidden layer", self.mlp_ratio));
        }
        Ok(())
    }

    /// Whether two configs describe interchangeable parameter sets.
    /// Image size and shortcut flags are not architectural.
    pub fn same_architecture(&self, other: &ModelConfig) -> bool {
        self.window_size == other.window_size
            && self.depths == other.depths
            && self.embed_dim == other.embed_dim
            && self.num_heads == other.num_heads
            && self.mlp_hidden() == other.mlp_hidden()
            && self.rel_pos_bias == other.rel_pos_bias
    }

    fn attention(&self, shift: usize) -> AttentionConfig {
        AttentionConfig {
            num_heads: self.num_heads,
            head_dim: self.head_dim(),
            window_size: self.window_size,
            shift,
        }
    }

    /// Attention setup of block `i` within a group: even blocks unshifted,
    /// odd blocks shifted by half a window.
    pub fn block_attention(&self, i: usize) -> AttentionConfig {
        self.attention(if i % 2 == 1 { self.window_size / 2 } else { 0 })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    TruncNormal,
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Every parameter of the model, in registration order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let d = cfg.embed_dim;
    let hidden = cfg.mlp_hidden();
    let span = 2 * cfg.window_size - 1;
    let mut out = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init: Init| out.push(ParamSpec { name, shape, init });
    let dense = |push: &mut dyn FnMut(String, Vec<usize>, Init), name: &str, fan_in: usize, fan_out: usize| {
        push(format!("{name}.weight"), vec![fan_in, fan_out], Init::TruncNormal);
        push(format!("{name}.bias"), vec![fan_out], Init::Zeros);
    };
    dense(&mut push, "conv_first", 9, d);
    for (g, &depth) in cfg.depths.iter().enumerate() {
        for i in 0..depth {
            let p = format!("layers.{g}.blocks.{i}");
            push(format!("{p}.norm1.weight"), vec![d], Init::Ones);
            push(format!("{p}.norm1.bias"), vec![d], Init::Zeros);
            dense(&mut push, &format!("{p}.attn.qkv"), d, 3 * d);
            if cfg.rel_pos_bias {
                push(
                    format!("{p}.attn.relative_position_bias_table"),
                    vec![span * span, cfg.num_heads],
                    Init::TruncNormal,
                );
            }
            dense(&mut push, &format!("{p}.attn.proj"), d, d);
            push(format!("{p}.norm2.weight"), vec![d], Init::Ones);
            push(format!("{p}.norm2.bias"), vec![d], Init::Zeros);
            dense(&mut push, &format!("{p}.mlp.fc1"), d, hidden);
            dense(&mut push, &format!("{p}.mlp.fc2"), hidden, d);
        }
        dense(&mut push, &format!("layers.{g}.conv"), 9 * d, d);
    }
    dense(&mut push, "conv_last", 9 * d, 1);
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct SwinDenoiser {
    config: ModelConfig,
    params: ParamStore,
}

impl SwinDenoiser {
    /// Fresh model: truncated-normal(0.02) weights, zero biases, unit norms.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for spec in param_specs(&config) {
            let t = match spec.init {
                Init::TruncNormal => trunc_normal(&mut rng, &spec.shape, INIT_STD),
                Init::Zeros => Tensor::zeros(&spec.shape),
                Init::Ones => Tensor::ones(&spec.shape),
            };
            params.insert(spec.name, t)?;
        }
        Ok(SwinDenoiser { config, params })
    }

    /// Assemble from existing parameters, checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        let mut missing = Vec::new();
        for spec in &specs {
            match params.get(&spec.name) {
                None => missing.push(spec.name.clone()),
                Some(p) if p.value.shape() != spec.shape.as_slice() => {
                    return Err(Error::Checkpoint(format!(
                        "parameter `{}` has shape {:?}, model expects {:?}",
                        spec.name,
                        p.value.shape(),
                        spec.shape
                    )))
                }
                Some(_) => {}
            }
        }
        if !missing.is_empty() {
            return Err(Error::Checkpoint(format!("missing parameters: {}", missing.join(", "))));
        }
        let extra: Vec<&str> = params
            .names()
            .filter(|n| !specs.iter().any(|s| s.name == *n))
            .collect();
        if !extra.is_empty() {
            return Err(Error::Checkpoint(format!("unexpected parameters: {}", extra.join(", "))));
        }
        // Re-register in canonical order.
        let mut ordered = ParamStore::new();
        for spec in &specs {
            ordered.insert(spec.name.clone(), params.get(&spec.name).unwrap().value.clone())?;
        }
        Ok(SwinDenoiser {
            config,
            params: ordered,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn shortcuts(&self) -> Shortcuts {
        self.config.shortcuts
    }

    pub fn set_shortcuts(&mut self, s: Shortcuts) {
        self.config.shortcuts = s;
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let ws = self.config.window_size;
        match *shape {
            [_, h, w, 1] if h % ws == 0 && w % ws == 0 => Ok(()),
            [_, h, w, 1] => Err(Error::invalid(
                "forward",
                format!("image {h}x{w} must have both sides divisible by the window size {ws}"),
            )),
            _ => Err(Error::invalid(
                "forward",
                format!("expected a [b, h, w, 1] image batch, got {shape:?}"),
            )),
        }
    }

    /// Shallow features `conv_first(x)`.
    pub fn shallow_var<'g>(&self, bound: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        x.conv3x3(bound.var("conv_first.weight")?, bound.var("conv_first.bias")?)
    }

    /// Differentiable forward pass on a `[b, h, w, 1]` batch.
    pub fn forward_var<'g>(&self, bound: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        let shape = x.shape();
        self.check_input(&shape)?;
        let cfg = &self.config;
        let (h, w) = (shape[1], shape[2]);
        let graph = x.graph();
        let shifted = cfg.depths.iter().any(|&d| d > 1);
        let ctx = BlockContext {
            rel_index: cfg.rel_pos_bias.then(|| relative_position_index(cfg.window_size)),
            shift_mask: if shifted {
                let m = shift_attention_mask(h, w, cfg.window_size, cfg.window_size / 2)?;
                Some(graph.constant(m))
            } else {
                None
            },
        };

        let shallow = self.shallow_var(bound, x)?;
        let mut t = shallow;
        for (g, &depth) in cfg.depths.iter().enumerate() {
            let group_in = t;
            for i in 0..depth {
                let wts = BlockWeights::from_bound(bound, &format!("layers.{g}.blocks.{i}"), cfg.rel_pos_bias)?;
                t = swin_block(t, &wts, &cfg.block_attention(i), &ctx)?;
            }
            t = t
                .conv3x3(
                    bound.var(&format!("layers.{g}.conv.weight"))?,
                    bound.var(&format!("layers.{g}.conv.bias"))?,
                )?
                .add(group_in)?;
        }
        if cfg.shortcuts.trunk {
            t = t.add(shallow)?;
        }
        let mut out = t.conv3x3(bound.var("conv_last.weight")?, bound.var("conv_last.bias")?)?;
        if cfg.shortcuts.global {
            out = out.add(x)?;
        }
        Ok(out)
    }

    /// Inference on a `[b, h, w, 1]` batch.
    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        let g = Graph::inference();
        let bound = self.params.bind(&g);
        let x = g.constant(image.clone());
        let out = self.forward_var(&bound, x)?;
        Ok(out.value().as_ref().clone())
    }

    /// Shallow features of a `[b, h, w, 1]` batch.
    pub fn shallow_features(&self, image: &Tensor) -> Result<Tensor> {
        self.check_input(image.shape())?;
        let g = Graph::inference();
        let bound = self.params.bind(&g);
        let f = self.shallow_var(&bound, g.constant(image.clone()))?;
        Ok(f.value().as_ref().clone())
    }
}
