//! U-Net and U-Net++ segmentation models.
//!
//! Both share an encoder of `depth` resolution levels (max-pool between
//! levels). With `pointwise_heavy` the encoder blocks are inverted residual
//! style: 1x1 expand, 3x3 depthwise, 1x1 project. Decoders always use two 3x3
//! convolutions per node and nearest-neighbour upsampling. U-Net++ replaces
//! the single skip per level with nested dense skip pathways; its output is
//! taken from the final top-level node only.

use alloc::format;
use alloc::vec::Vec;

use crate::error::{bail, Result};
use crate::nn::{Gradients, Graph, NodeId, ParamId, ParamStore};
use crate::rng;
use crate::tensor::Tensor;

pub const INPUT_CHANNELS: usize = 3;
pub const NUM_CLASSES: usize = 2;

/// Anything mapping a composite batch `(b, 3, h, w)` to logits `(b, 2, h, w)`.
pub trait SegmentationModel {
    fn forward(&self, input: &Tensor) -> Result<Tensor>;
}

impl<M: SegmentationModel + ?Sized> SegmentationModel for &M {
    fn forward(&self, input: &Tensor) -> Result<Tensor> {
        (**self).forward(input)
    }
}

impl<M: SegmentationModel + ?Sized> SegmentationModel for alloc::boxed::Box<M> {
    fn forward(&self, input: &Tensor) -> Result<Tensor> {
        (**self).forward(input)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    UNet,
    UNetPlusPlus,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::UNet => "unet",
            Variant::UNetPlusPlus => "unetpp",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "unet" => Some(Variant::UNet),
            "unetpp" => Some(Variant::UNetPlusPlus),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UNetConfig {
    pub variant: Variant,
    /// Channel count per resolution level; its length is the model depth.
    pub encoder_widths: Vec<usize>,
    pub pointwise_heavy: bool,
    /// Channel multiplier of the 1x1 expansion in pointwise-heavy blocks.
    pub expansion: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self { variant: Variant::UNet, encoder_widths: alloc::vec![16, 32, 64, 128], pointwise_heavy: true, expansion: 2 }
    }
}

impl UNetConfig {
    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        self
    }

    pub fn depth(&self) -> usize {
        self.encoder_widths.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth() < 2 {
            bail!(Config, "model depth must be at least 2, got {}", self.depth());
        }
        if self.encoder_widths.iter().any(|w| *w == 0) {
            bail!(Config, "encoder widths must be positive, got {:?}", self.encoder_widths);
        }
        if self.pointwise_heavy && self.expansion == 0 {
            bail!(Config, "expansion must be positive");
        }
        Ok(())
    }

    /// Spatial dims must be multiples of this (inputs are reflect-padded up to it).
    pub fn size_multiple(&self) -> usize {
        1 << (self.depth() - 1)
    }
}

#[derive(Debug, Clone, Copy)]
struct ConvIds {
    w: ParamId,
    b: ParamId,
}

#[derive(Debug, Clone)]
enum Block {
    Double { first: ConvIds, second: ConvIds },
    Inverted { expand: ConvIds, depthwise: ConvIds, project: ConvIds },
}

impl Block {
    fn double(params: &mut ParamStore, name: &str, cin: usize, cout: usize, r: &mut rng::SeededRng) -> Self {
        let (w, b) = params.add_conv(&format!("{name}.conv1"), cout, cin, 3, 2.0, r);
        let first = ConvIds { w, b };
        let (w, b) = params.add_conv(&format!("{name}.conv2"), cout, cout, 3, 2.0, r);
        Block::Double { first, second: ConvIds { w, b } }
    }

    fn inverted(params: &mut ParamStore, name: &str, cin: usize, cout: usize, t: usize, r: &mut rng::SeededRng) -> Self {
        let hidden = cout * t;
        let (w, b) = params.add_conv(&format!("{name}.expand"), hidden, cin, 1, 2.0, r);
        let expand = ConvIds { w, b };
        let (w, b) = params.add_conv(&format!("{name}.depthwise"), hidden, 1, 3, 2.0, r);
        let depthwise = ConvIds { w, b };
        let (w, b) = params.add_conv(&format!("{name}.project"), cout, hidden, 1, 2.0, r);
        Block::Inverted { expand, depthwise, project: ConvIds { w, b } }
    }

    fn apply(&self, g: &mut Graph<'_>, x: NodeId) -> Result<NodeId> {
        match self {
            Block::Double { first, second } => {
                let h = g.conv(x, first.w, first.b)?;
                let h = g.relu(h);
                let h = g.conv(h, second.w, second.b)?;
                Ok(g.relu(h))
            }
            Block::Inverted { expand, depthwise, project } => {
                let h = g.conv(x, expand.w, expand.b)?;
                let h = g.relu(h);
                let h = g.depthwise(h, depthwise.w, depthwise.b)?;
                let h = g.relu(h);
                let h = g.conv(h, project.w, project.b)?;
                Ok(g.relu(h))
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Layout {
    encoder: Vec<Block>,
    /// U-Net: one block per level `0..depth-1`. U-Net++: nested node `(i, j)`
    /// for `j >= 1` stored at `nested_slot(i, j)`.
    decoder: Vec<Block>,
    head: ConvIds,
}

/// Trainable U-Net or U-Net++.
#[derive(Debug, Clone)]
pub struct UNet {
    config: UNetConfig,
    seed: u64,
    params: ParamStore,
    layout: Layout,
}

fn nested_slot(depth: usize, i: usize, j: usize) -> usize {
    // columns j = 1.. hold depth - j nodes each
    let before: usize = (1..j).map(|jj| depth - jj).sum();
    before + i
}

/// Deterministic initialization from `(config, seed)`.
pub fn build_model(config: &UNetConfig, seed: u64) -> Result<UNet> {
    config.validate()?;
    let mut r = rng::stream(seed, &[0x1417]);
    let mut params = ParamStore::new();
    let widths = &config.encoder_widths;
    let depth = config.depth();
    let mut encoder = Vec::with_capacity(depth);
    for (i, &w) in widths.iter().enumerate() {
        let cin = if i == 0 { INPUT_CHANNELS } else { widths[i - 1] };
        let name = format!("enc{i}");
        encoder.push(if config.pointwise_heavy {
            Block::inverted(&mut params, &name, cin, w, config.expansion, &mut r)
        } else {
            Block::double(&mut params, &name, cin, w, &mut r)
        });
    }
    let mut decoder = Vec::new();
    match config.variant {
        Variant::UNet => {
            for i in 0..depth - 1 {
                decoder.push(Block::double(&mut params, &format!("dec{i}"), widths[i] + widths[i + 1], widths[i], &mut r));
            }
        }
        Variant::UNetPlusPlus => {
            for j in 1..depth {
                for i in 0..depth - j {
                    let cin = j * widths[i] + widths[i + 1];
                    decoder.push(Block::double(&mut params, &format!("x{i}_{j}"), cin, widths[i], &mut r));
                }
            }
        }
    }
    let (w, b) = params.add_conv("head", NUM_CLASSES, widths[0], 1, 1.0, &mut r);
    Ok(UNet { config: config.clone(), seed, params, layout: Layout { encoder, decoder, head: ConvIds { w, b } } })
}

impl UNet {
    /// Rebuilds a model from stored parameters; names and shapes must match
    /// what `build_model(config, seed)` produces.
    pub fn from_parts(config: &UNetConfig, seed: u64, entries: Vec<(alloc::string::String, Tensor)>) -> Result<Self> {
        let mut model = build_model(config, seed)?;
        model.params.load(entries)?;
        Ok(model)
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn padded_dims(&self, h: usize, w: usize) -> (usize, usize) {
        let m = self.config.size_multiple();
        (h.div_ceil(m) * m, w.div_ceil(m) * m)
    }

    fn build_graph<'a>(&'a self, input: &Tensor) -> Result<(Graph<'a>, NodeId)> {
        if input.channels() != INPUT_CHANNELS {
            bail!(Shape, "model expects {} input channels, got {}", INPUT_CHANNELS, input.channels());
        }
        let (ph, pw) = self.padded_dims(input.height(), input.width());
        let mut g = Graph::new(&self.params);
        let x = g.input(input.reflect_pad(ph, pw));
        let depth = self.config.depth();
        let mut enc = Vec::with_capacity(depth);
        let mut h = x;
        for (i, block) in self.layout.encoder.iter().enumerate() {
            if i > 0 {
                h = g.maxpool(h)?;
            }
            h = block.apply(&mut g, h)?;
            enc.push(h);
        }
        let top = match self.config.variant {
            Variant::UNet => {
                let mut up = enc[depth - 1];
                for i in (0..depth - 1).rev() {
                    let u = g.upsample(up);
                    let cat = g.concat(&[enc[i], u])?;
                    up = self.layout.decoder[i].apply(&mut g, cat)?;
                }
                up
            }
            Variant::UNetPlusPlus => {
                // nodes[i][j]
                let mut nodes: Vec<Vec<NodeId>> = enc.iter().map(|e| alloc::vec![*e]).collect();
                for j in 1..depth {
                    for i in 0..depth - j {
                        let below = nodes[i + 1][j - 1];
                        let u = g.upsample(below);
                        let mut parts: Vec<NodeId> = nodes[i][..j].to_vec();
                        parts.push(u);
                        let cat = g.concat(&parts)?;
                        let out = self.layout.decoder[nested_slot(depth, i, j)].apply(&mut g, cat)?;
                        nodes[i].push(out);
                    }
                }
                nodes[0][depth - 1]
            }
        };
        let logits = g.conv(top, self.layout.head.w, self.layout.head.b)?;
        Ok((g, logits))
    }

    /// Forward pass plus gradients. `loss` receives the logits and returns
    /// the scalar loss with its gradient w.r.t. those logits.
    pub fn forward_backward<F>(&self, input: &Tensor, loss: F) -> Result<(f64, Gradients)>
    where
        F: FnOnce(&Tensor) -> Result<(f64, Tensor)>,
    {
        let (g, root) = self.build_graph(input)?;
        let padded = g.value(root);
        let logits = padded.crop(input.height(), input.width());
        let (value, dlogits) = loss(&logits)?;
        if dlogits.shape() != logits.shape() {
            bail!(Shape, "loss gradient {:?} vs logits {:?}", dlogits.shape(), logits.shape());
        }
        let grad = dlogits.uncrop(padded.height(), padded.width());
        let grads = g.backward(root, grad)?;
        Ok((value, grads))
    }
}

impl SegmentationModel for UNet {
    fn forward(&self, input: &Tensor) -> Result<Tensor> {
        let (g, root) = self.build_graph(input)?;
        Ok(g.value(root).crop(input.height(), input.width()))
    }
}
