//! Configurable 3D Unet: an encoder of `levels` resolution levels with two
//! conv+ReLU each, a decoder of `levels - 1` stages (upsample, concatenate
//! skip, one conv+ReLU), and a final 1×1×1 conv with sigmoid.

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Checkpoint, Graph, NamedArray, Tensor, Var};
use crate::rng::{self, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UnetConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub in_channels: usize,
    pub convs_down_per_level: usize,
    pub convs_up_per_level: usize,
    pub kernel: [usize; 3],
    pub pool: [usize; 3],
    /// Use 1×3×3 convs and a 1×2×2 pool into the deepest level.
    pub axial_disabled_at_deepest: bool,
    /// (depth, height, width) of network input patches.
    pub input_shape: [usize; 3],
}

impl Default for UnetConfig {
    fn default() -> Self {
        UnetConfig {
            levels: 5,
            base_channels: 16,
            in_channels: 1,
            convs_down_per_level: 2,
            convs_up_per_level: 1,
            kernel: [3, 3, 3],
            pool: [2, 2, 2],
            axial_disabled_at_deepest: true,
            input_shape: [104, 352, 240],
        }
    }
}

impl UnetConfig {
    /// Desk-scale variant used by tests and phantom experiments.
    pub fn desk() -> Self {
        UnetConfig {
            levels: 3,
            base_channels: 4,
            input_shape: [16, 32, 32],
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::config("net.levels", "must be >= 1"));
        }
        if self.base_channels == 0 {
            return Err(Error::config("net.base_channels", "must be >= 1"));
        }
        if self.in_channels == 0 {
            return Err(Error::config("net.in_channels", "must be >= 1"));
        }
        if self.kernel.iter().any(|&k| k % 2 == 0) {
            return Err(Error::config("net.kernel", "kernel sizes must be odd"));
        }
        if self.pool.iter().any(|&p| p == 0) {
            return Err(Error::config("net.pool", "pool sizes must be >= 1"));
        }
        if self.input_shape.iter().any(|&d| d == 0) {
            return Err(Error::config("net.input_shape", "dims must be >= 1"));
        }
        let factors = self.total_downsampling();
        let names = ["input_depth", "input_height", "input_width"];
        for a in 0..3 {
            if self.input_shape[a] % factors[a] != 0 {
                let rule = if a == 0 && self.axial_disabled_at_deepest && self.levels >= 2 {
                    format!(
                        "depth {} must be divisible by {} (pool^(levels-2), axial pooling disabled into the deepest level)",
                        self.input_shape[a], factors[a]
                    )
                } else {
                    format!(
                        "{} must be divisible by {} (pool^(levels-1))",
                        self.input_shape[a], factors[a]
                    )
                };
                return Err(Error::config(format!("net.{}", names[a]), rule));
            }
        }
        Ok(())
    }

    /// Pool window used on the way from level `i` to level `i + 1`.
    pub fn pool_into(&self, i: usize) -> [usize; 3] {
        let mut p = self.pool;
        if self.axial_disabled_at_deepest && i + 2 == self.levels {
            p[0] = 1;
        }
        p
    }

    /// Conv kernel used at encoder level `i`.
    pub fn kernel_at(&self, i: usize) -> [usize; 3] {
        let mut k = self.kernel;
        if self.axial_disabled_at_deepest && self.levels >= 2 && i + 1 == self.levels {
            k[0] = 1;
        }
        k
    }

    pub fn channels_at(&self, i: usize) -> usize {
        self.base_channels << i
    }

    /// Cumulative downsampling factor at level `i`.
    pub fn scale_at(&self, i: usize) -> [usize; 3] {
        let mut s = [1usize; 3];
        for l in 0..i {
            let p = self.pool_into(l);
            for a in 0..3 {
                s[a] *= p[a];
            }
        }
        s
    }

    pub fn total_downsampling(&self) -> [usize; 3] {
        self.scale_at(self.levels - 1)
    }

    pub fn conv_layer_count(&self) -> usize {
        self.convs_down_per_level * self.levels + self.convs_up_per_level * (self.levels - 1) + 1
    }

    /// Spatial shape of the activations at every encoder level.
    pub fn level_shapes(&self) -> Vec<[usize; 3]> {
        (0..self.levels)
            .map(|i| {
                let s = self.scale_at(i);
                [
                    self.input_shape[0] / s[0],
                    self.input_shape[1] / s[1],
                    self.input_shape[2] / s[2],
                ]
            })
            .collect()
    }

    /// Output shape by shape arithmetic alone (no allocation).
    pub fn output_shape(&self) -> Result<[usize; 3]> {
        self.validate()?;
        let shapes = self.level_shapes();
        let mut cur = shapes[self.levels - 1];
        for i in (0..self.levels - 1).rev() {
            let p = self.pool_into(i);
            cur = [cur[0] * p[0], cur[1] * p[1], cur[2] * p[2]];
            if cur != shapes[i] {
                return Err(Error::shape(format!(
                    "decoder level {i} shape {cur:?} != skip shape {:?}",
                    shapes[i]
                )));
            }
        }
        Ok(cur)
    }

    /// One-sided output shrinkage, per axis, of the same network built with
    /// valid (unpadded) convolutions.
    pub fn valid_shrinkage(&self) -> [f64; 3] {
        let mut total = [0f64; 3];
        let mut add = |k: [usize; 3], s: [usize; 3], times: usize| {
            for a in 0..3 {
                total[a] += ((k[a] - 1) / 2 * s[a] * times) as f64;
            }
        };
        for i in 0..self.levels {
            add(self.kernel_at(i), self.scale_at(i), self.convs_down_per_level);
        }
        for i in 0..self.levels.saturating_sub(1) {
            add(self.kernel_at(i), self.scale_at(i), self.convs_up_per_level);
        }
        total
    }
}

/// Parameter tensor plus the name it is stored under.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: UnetConfig,
    pub params: Vec<Param>,
}

struct ConvSpec {
    name: String,
    out_ch: usize,
    in_ch: usize,
    kernel: [usize; 3],
}

fn conv_specs(cfg: &UnetConfig) -> Vec<ConvSpec> {
    let mut specs = Vec::new();
    for i in 0..cfg.levels {
        let mut in_ch = if i == 0 { cfg.in_channels } else { cfg.channels_at(i - 1) };
        for j in 0..cfg.convs_down_per_level {
            specs.push(ConvSpec {
                name: format!("enc{i}.conv{j}"),
                out_ch: cfg.channels_at(i),
                in_ch,
                kernel: cfg.kernel_at(i),
            });
            in_ch = cfg.channels_at(i);
        }
    }
    for i in (0..cfg.levels.saturating_sub(1)).rev() {
        let mut in_ch = cfg.channels_at(i) + cfg.channels_at(i + 1);
        for j in 0..cfg.convs_up_per_level {
            specs.push(ConvSpec {
                name: format!("dec{i}.conv{j}"),
                out_ch: cfg.channels_at(i),
                in_ch,
                kernel: cfg.kernel_at(i),
            });
            in_ch = cfg.channels_at(i);
        }
    }
    specs.push(ConvSpec {
        name: "head".into(),
        out_ch: 1,
        in_ch: if cfg.levels >= 1 { cfg.channels_at(0) } else { cfg.in_channels },
        kernel: [1, 1, 1],
    });
    specs
}

impl Model {
    /// Builds the network with He-uniform weights and zero biases.
    pub fn build(cfg: &UnetConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut rng = rng::stream(seed, Stream::Init, 0, 0);
        let mut params = Vec::new();
        for s in conv_specs(cfg) {
            let fan_in = s.in_ch * s.kernel.iter().product::<usize>();
            let bound = (6.0 / fan_in as f64).sqrt();
            let shape = [s.out_ch, s.in_ch, s.kernel[0], s.kernel[1], s.kernel[2]];
            let n: usize = shape.iter().product();
            let w = (0..n).map(|_| rng.gen_range(-bound..bound) as f32).collect();
            params.push(Param {
                name: format!("{}.w", s.name),
                value: Tensor::new(shape, w)?,
            });
            params.push(Param {
                name: format!("{}.b", s.name),
                value: Tensor::zeros([s.out_ch, 1, 1, 1, 1]),
            });
        }
        Ok(Model {
            cfg: cfg.clone(),
            params,
        })
    }

    pub fn count_parameters(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn conv_layers(&self) -> usize {
        self.params.iter().filter(|p| p.name.ends_with(".w")).count()
    }

    /// Encoder output channels per level.
    pub fn encoder_channels(&self) -> Vec<usize> {
        (0..self.cfg.levels)
            .map(|i| {
                let name = format!("enc{i}.conv0.w");
                self.params
                    .iter()
                    .find(|p| p.name == name)
                    .map_or(0, |p| p.value.shape()[0])
            })
            .collect()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let s = x.shape();
        if s[1] != self.cfg.in_channels || x.spatial() != self.cfg.input_shape {
            return Err(Error::shape(format!(
                "input {:?} does not match net input [_, {}, {:?}]",
                s, self.cfg.in_channels, self.cfg.input_shape
            )));
        }
        Ok(())
    }

    /// Records the forward pass on `g`. Returns the output probability map
    /// and the parameter leaves, in `self.params` order.
    pub fn forward_graph(&self, g: &mut Graph, x: Var, train: bool) -> Result<(Var, Vec<Var>)> {
        self.check_input(g.value(x))?;
        let leaves: Vec<Var> = self
            .params
            .iter()
            .map(|p| g.leaf(p.value.clone(), train))
            .collect();
        let mut next = 0usize;
        let mut conv = |g: &mut Graph, h: Var, relu: bool| -> Result<Var> {
            let (w, b) = (leaves[next], leaves[next + 1]);
            next += 2;
            let y = g.conv3d(h, w, b)?;
            Ok(if relu { g.relu(y) } else { y })
        };
        let cfg = &self.cfg;
        let mut skips = Vec::with_capacity(cfg.levels);
        let mut h = x;
        for i in 0..cfg.levels {
            if i > 0 {
                h = g.maxpool3d(h, cfg.pool_into(i - 1))?;
            }
            for _ in 0..cfg.convs_down_per_level {
                h = conv(g, h, true)?;
            }
            skips.push(h);
        }
        for i in (0..cfg.levels.saturating_sub(1)).rev() {
            let up = g.upsample3d(h, cfg.pool_into(i))?;
            h = g.concat_channels(skips[i], up)?;
            for _ in 0..cfg.convs_up_per_level {
                h = conv(g, h, true)?;
            }
        }
        let logits = conv(g, h, false)?;
        Ok((g.sigmoid(logits), leaves))
    }

    /// Inference: probability map with the input's shape and one channel.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone(), false);
        let (out, _) = self.forward_graph(&mut g, xv, false)?;
        Ok(g.value(out).clone())
    }

    pub fn param_arrays(&self) -> Vec<NamedArray> {
        self.params
            .iter()
            .map(|p| NamedArray {
                name: p.name.clone(),
                shape: p.value.shape().to_vec(),
                data: p.value.data().to_vec(),
            })
            .collect()
    }

    /// Restores weights from a checkpoint, rejecting it when its config or
    /// array shapes disagree with `cfg`.
    pub fn from_checkpoint(ckpt: &Checkpoint, cfg: &UnetConfig) -> Result<Model> {
        let stored: UnetConfig = serde_json::from_value(ckpt.config.clone())
            .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        if &stored != cfg {
            return Err(Error::shape(format!(
                "checkpoint net config {stored:?} differs from requested {cfg:?}"
            )));
        }
        let mut model = Model::build(cfg, 0)?;
        if ckpt.params.len() != model.params.len() {
            return Err(Error::shape(format!(
                "checkpoint has {} arrays, model needs {}",
                ckpt.params.len(),
                model.params.len()
            )));
        }
        for (p, a) in model.params.iter_mut().zip(&ckpt.params) {
            if p.name != a.name || p.value.shape().as_slice() != a.shape.as_slice() {
                return Err(Error::shape(format!(
                    "checkpoint array {} {:?} does not match {} {:?}",
                    a.name,
                    a.shape,
                    p.name,
                    p.value.shape()
                )));
            }
            p.value.data_mut().copy_from_slice(&a.data);
        }
        Ok(model)
    }

    /// Reads the net config stored in a checkpoint and restores the model.
    pub fn from_checkpoint_self(ckpt: &Checkpoint) -> Result<Model> {
        let cfg: UnetConfig = serde_json::from_value(ckpt.config.clone())
            .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        Model::from_checkpoint(ckpt, &cfg)
    }
}
