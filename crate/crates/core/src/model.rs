//! The victim verifier: a Siamese CNN embedding network trained with
//! contrastive loss.
//!
//! Both branches share one weight set, so a "Siamese forward" is simply two
//! calls to [`ModelWeights::forward`] with the same weights.

use crate::data::{Pair, SigImage, CANVAS_HEIGHT, CANVAS_WIDTH};
use crate::error::{dim_err, Error, Result};
use crate::eval::{DistanceRecord, Label};
use crate::optim::{Adam, AdamSettings};
use crate::tensor::{Graph, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::path::Path;

const MAGIC: &[u8; 8] = b"SIGNETW\0";
pub const FORMAT_VERSION: u32 = 1;

/// Conv blocks (3×3, stride 1, pad 1, ReLU, 2×2 max pool) followed by global
/// average pooling and a linear embedding layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub height: usize,
    pub width: usize,
    /// Channel widths from the input channel through the last conv block.
    pub channels: Vec<usize>,
    pub embed_dim: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            height: CANVAS_HEIGHT,
            width: CANVAS_WIDTH,
            channels: vec![1, 16, 32, 64],
            embed_dim: 64,
        }
    }
}

impl Architecture {
    pub fn conv_blocks(&self) -> usize {
        self.channels.len() - 1
    }

    fn validate(&self) -> Result<()> {
        let blocks = self.channels.len().saturating_sub(1);
        if blocks == 0 || self.channels[0] != 1 || self.channels.contains(&0) || self.embed_dim == 0 {
            return Err(Error::Config(format!("invalid architecture {self:?}")));
        }
        let div = 1usize << blocks;
        if self.height % div != 0 || self.width % div != 0 {
            return Err(Error::Config(format!(
                "input {}x{} must be divisible by {div} for {blocks} pooling stages",
                self.height, self.width
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Conv,
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    pub weight: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWeights {
    arch: Architecture,
    layers: Vec<Layer>,
    frozen: bool,
}

/// Graph handles produced by one forward pass.
#[derive(Debug, Clone)]
pub struct GraphTrace {
    /// `[N, embed_dim]`
    pub embedding: Var,
    /// Post-ReLU conv outputs `[N, C, H, W]`, in layer order.
    pub features: Vec<(String, Var)>,
    /// Weight and bias leaves per layer, in layer order.
    pub params: Vec<(Var, Var)>,
}

/// Values of one single-image forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    /// `[embed_dim]`
    pub embedding: Tensor,
    /// Post-ReLU conv outputs `[C, H, W]` keyed by layer name, in layer order.
    pub features: Vec<(String, Tensor)>,
}

impl ForwardTrace {
    pub fn feature(&self, name: &str) -> Option<&Tensor> {
        self.features.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

impl ModelWeights {
    /// He-initialized weights, zero biases.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = |shape: &[usize], fan_in: usize| {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            let n: usize = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| normal.sample(&mut rng)).collect()).expect("shape")
        };
        let mut layers = Vec::new();
        for (i, pair) in arch.channels.windows(2).enumerate() {
            let (cin, cout) = (pair[0], pair[1]);
            layers.push(Layer {
                name: format!("conv{}", i + 1),
                kind: LayerKind::Conv,
                weight: draw(&[cout, cin, 3, 3], cin * 9),
                bias: Tensor::zeros(&[cout]),
            });
        }
        let last = *arch.channels.last().unwrap();
        layers.push(Layer {
            name: "fc".into(),
            kind: LayerKind::Linear,
            weight: draw(&[arch.embed_dim, last], last),
            bias: Tensor::zeros(&[arch.embed_dim]),
        });
        Ok(Self {
            arch,
            layers,
            frozen: false,
        })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    /// Trainable copy of frozen weights.
    pub fn thawed(&self) -> Self {
        Self {
            frozen: false,
            ..self.clone()
        }
    }

    /// Layer registry: name to index.
    pub fn registry(&self) -> BTreeMap<&str, usize> {
        self.layers.iter().enumerate().map(|(i, l)| (l.name.as_str(), i)).collect()
    }

    pub fn conv_layer_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .filter(|l| l.kind == LayerKind::Conv)
            .map(|l| l.name.clone())
            .collect()
    }

    /// Records a forward pass over an `[N, 1, H, W]` batch on `g`.
    ///
    /// With `train_params = false` the weights enter the graph as constants and
    /// can never receive gradients.
    pub fn forward(&self, g: &mut Graph, input: Var, train_params: bool) -> Result<GraphTrace> {
        let s = g.value(input).shape();
        if s.len() != 4 || s[1] != 1 || s[2] != self.arch.height || s[3] != self.arch.width {
            return Err(dim_err!(
                "model expects [N, 1, {}, {}] input, got {s:?}",
                self.arch.height,
                self.arch.width
            ));
        }
        let mut params = Vec::with_capacity(self.layers.len());
        let mut features = Vec::new();
        let mut x = input;
        for layer in &self.layers {
            let w = g.leaf(layer.weight.clone(), train_params);
            let b = g.leaf(layer.bias.clone(), train_params);
            params.push((w, b));
            match layer.kind {
                LayerKind::Conv => {
                    let c = g.conv2d(x, w, b, 1, 1)?;
                    let r = g.relu(c)?;
                    features.push((layer.name.clone(), r));
                    x = g.maxpool2(r)?;
                }
                LayerKind::Linear => {
                    let pooled = g.global_avg_pool(x)?;
                    x = g.linear(pooled, w, b)?;
                }
            }
        }
        Ok(GraphTrace {
            embedding: x,
            features,
            params,
        })
    }

    fn check_image(&self, image: &SigImage) -> Result<()> {
        if (image.height, image.width) != (self.arch.height, self.arch.width) {
            return Err(dim_err!(
                "image is {}x{}, model expects {}x{}",
                image.height,
                image.width,
                self.arch.height,
                self.arch.width
            ));
        }
        Ok(())
    }

    /// Embedding and feature maps of a single image.
    pub fn trace(&self, image: &SigImage) -> Result<ForwardTrace> {
        self.check_image(image)?;
        let mut g = Graph::new();
        let x = g.constant(image.to_tensor());
        let t = self.forward(&mut g, x, false)?;
        let embedding = g.value(t.embedding).clone().reshape(&[self.arch.embed_dim])?;
        let features = t
            .features
            .iter()
            .map(|(name, v)| {
                let s = g.value(*v).shape().to_vec();
                Ok((name.clone(), g.value(*v).clone().reshape(&s[1..])?))
            })
            .collect::<Result<_>>()?;
        Ok(ForwardTrace { embedding, features })
    }

    pub fn embed(&self, image: &SigImage) -> Result<Tensor> {
        Ok(self.embed_batch(&[image])?.remove(0))
    }

    /// Embeddings of many images, evaluated in small batches.
    pub fn embed_batch(&self, images: &[&SigImage]) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(16) {
            let mut g = Graph::new();
            let x = g.constant(stack(chunk, &self.arch)?);
            let t = self.forward(&mut g, x, false)?;
            let d = self.arch.embed_dim;
            for row in g.value(t.embedding).data().chunks(d) {
                out.push(Tensor::vector(row.to_vec()));
            }
        }
        Ok(out)
    }

    /// Euclidean embedding distance between two images.
    pub fn distance(&self, a: &SigImage, b: &SigImage) -> Result<f64> {
        let e = self.embed_batch(&[a, b])?;
        Ok(embedding_distance(&e[0], &e[1]))
    }

    /// Distance records for `pairs` over `images`, embedding each image once.
    pub fn pair_distances(&self, images: &[SigImage], pairs: &[Pair]) -> Result<Vec<DistanceRecord>> {
        let mut used: Vec<usize> = pairs.iter().flat_map(|p| [p.a, p.b]).collect();
        used.sort_unstable();
        used.dedup();
        let refs: Vec<&SigImage> = used.iter().map(|&i| &images[i]).collect();
        let embeds = self.embed_batch(&refs)?;
        let lookup: BTreeMap<usize, &Tensor> = used.iter().copied().zip(embeds.iter()).collect();
        Ok(pairs
            .iter()
            .map(|p| DistanceRecord::new(p.id.clone(), p.label, embedding_distance(lookup[&p.a], lookup[&p.b])))
            .collect())
    }

    /// SHA-256 of the serialized weights, hex encoded.
    pub fn checksum(&self) -> String {
        hex::encode(Sha256::digest(self.to_bytes()))
    }

    /// Serializes to the versioned binary model format (see [`ModelWeights::from_bytes`]).
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(u8::from(self.frozen));
        let put = |out: &mut Vec<u8>, v: usize| out.extend_from_slice(&(v as u32).to_le_bytes());
        put(&mut out, self.arch.height);
        put(&mut out, self.arch.width);
        put(&mut out, self.arch.conv_blocks());
        for &c in &self.arch.channels {
            put(&mut out, c);
        }
        put(&mut out, self.arch.embed_dim);
        put(&mut out, self.layers.len());
        for layer in &self.layers {
            out.extend_from_slice(&(layer.name.len() as u16).to_le_bytes());
            out.extend_from_slice(layer.name.as_bytes());
            out.push(match layer.kind {
                LayerKind::Conv => 0,
                LayerKind::Linear => 1,
            });
            put(&mut out, 2);
            for t in [&layer.weight, &layer.bias] {
                put(&mut out, t.rank());
                for &d in t.shape() {
                    put(&mut out, d);
                }
                for v in t.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        out
    }

    /// Parses the model format:
    ///
    /// ```text
    /// magic "SIGNETW\0" | u32 version | u8 frozen
    /// u32 height | u32 width | u32 blocks | (blocks+1) × u32 channels | u32 embed_dim
    /// u32 layer count, then per layer:
    ///   u16 name length | name (UTF-8) | u8 kind (0 conv, 1 linear) | u32 tensor count (2)
    ///   per tensor: u32 rank | rank × u32 dims | numel × f64
    /// ```
    /// All integers and floats are little-endian.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Format("not a model file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "model format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let frozen = match r.take(1)?[0] {
            0 => false,
            1 => true,
            f => return Err(Error::Format(format!("bad frozen flag {f}"))),
        };
        let height = r.u32()? as usize;
        let width = r.u32()? as usize;
        let blocks = r.u32()? as usize;
        if blocks > 64 {
            return Err(Error::Format(format!("implausible block count {blocks}")));
        }
        let channels = (0..=blocks).map(|_| r.u32().map(|c| c as usize)).collect::<Result<Vec<_>>>()?;
        let embed_dim = r.u32()? as usize;
        let arch = Architecture {
            height,
            width,
            channels,
            embed_dim,
        };
        arch.validate().map_err(|e| Error::Format(e.to_string()))?;
        let expected = ModelWeights::init(arch.clone(), 0)?;

        let count = r.u32()? as usize;
        if count != expected.layers.len() {
            return Err(Error::Format(format!(
                "{count} layers stored, architecture has {}",
                expected.layers.len()
            )));
        }
        let mut layers = Vec::with_capacity(count);
        for want in &expected.layers {
            let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Format("layer name is not UTF-8".into()))?;
            let kind = match r.take(1)?[0] {
                0 => LayerKind::Conv,
                1 => LayerKind::Linear,
                k => return Err(Error::Format(format!("bad layer kind {k}"))),
            };
            if name != want.name || kind != want.kind || r.u32()? != 2 {
                return Err(Error::Format(format!("unexpected layer {name:?}")));
            }
            let weight = r.tensor(want.weight.shape())?;
            let bias = r.tensor(want.bias.shape())?;
            layers.push(Layer {
                name,
                kind,
                weight,
                bias,
            });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Self { arch, layers, frozen })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Format("model file is truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn tensor(&mut self, want: &[usize]) -> Result<Tensor> {
        let rank = self.u32()? as usize;
        let shape = (0..rank).map(|_| self.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if shape != want {
            return Err(Error::Format(format!("tensor shape {shape:?}, expected {want:?}")));
        }
        let n: usize = shape.iter().product();
        let raw = self.take(n * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        Tensor::new(&shape, data).map_err(|e| Error::Format(e.to_string()))
    }
}

pub fn embedding_distance(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
}

/// Stacks images into an `[N, 1, H, W]` tensor.
pub fn stack(images: &[&SigImage], arch: &Architecture) -> Result<Tensor> {
    let mut data = Vec::with_capacity(images.len() * arch.height * arch.width);
    for img in images {
        if (img.height, img.width) != (arch.height, arch.width) {
            return Err(dim_err!(
                "image is {}x{}, model expects {}x{}",
                img.height,
                img.width,
                arch.height,
                arch.width
            ));
        }
        data.extend_from_slice(&img.pixels);
    }
    Tensor::new(&[images.len(), 1, arch.height, arch.width], data)
}

/// Contrastive loss: `D²` for similar pairs, `max(0, margin − D)²` for
/// dissimilar ones.
pub fn contrastive_loss(g: &mut Graph, x1: Var, x2: Var, label: Label, margin: f64) -> Result<Var> {
    if !(margin > 0.0) {
        return Err(Error::Config(format!("margin must be positive, got {margin}")));
    }
    match label {
        Label::Similar => {
            let diff = g.sub(x1, x2)?;
            g.square_sum(diff)
        }
        Label::Dissimilar => {
            let d = g.euclidean_distance(x1, x2)?;
            let neg = g.mul_scalar(d, -1.0)?;
            let gap = g.add_scalar(neg, margin)?;
            let hinge = g.relu(gap)?;
            let sq = g.square(hinge)?;
            g.sum(sq)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub margin: f64,
    pub adam: AdamSettings,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 16,
            margin: 1.0,
            adam: AdamSettings::with_lr(1e-3),
            seed: 0,
        }
    }
}

/// `(image index, image index, label)` training example.
pub type PairRef = (usize, usize, Label);

/// Trains on `pairs` with shuffled mini-batches; returns the mean batch loss
/// per epoch. The weights are frozen afterwards.
pub fn train(weights: &mut ModelWeights, images: &[SigImage], pairs: &[Pair], cfg: &TrainConfig) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(Error::Config("empty training pair set".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    let refs: Vec<PairRef> = pairs.iter().map(|p| (p.a, p.b, p.label)).collect();
    let batch = cfg.batch_size;
    train_with_batches(weights, images, cfg, |_, rng| {
        let mut order = refs.clone();
        order.shuffle(rng);
        order.chunks(batch).map(|c| c.to_vec()).collect()
    })
}

/// Training loop over caller-planned mini-batches. `plan(epoch, rng)` yields
/// the batches of one epoch; each batch embeds its distinct images once.
pub fn train_with_batches<F>(weights: &mut ModelWeights, images: &[SigImage], cfg: &TrainConfig, mut plan: F) -> Result<Vec<f64>>
where
    F: FnMut(usize, &mut ChaCha8Rng) -> Vec<Vec<PairRef>>,
{
    if weights.frozen {
        return Err(Error::Contract("cannot train frozen weights".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut optimizers: Vec<(Adam, Adam)> = weights
        .layers
        .iter()
        .map(|l| (Adam::new(cfg.adam, l.weight.numel()), Adam::new(cfg.adam, l.bias.numel())))
        .collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let batches = plan(epoch, &mut rng);
        let mut total = 0.0;
        let mut counted = 0usize;
        for batch in batches.iter().filter(|b| !b.is_empty()) {
            let mut members: Vec<usize> = batch.iter().flat_map(|&(a, b, _)| [a, b]).collect();
            members.sort_unstable();
            members.dedup();
            let refs: Vec<&SigImage> = members.iter().map(|&i| &images[i]).collect();

            let mut g = Graph::new();
            let x = g.constant(stack(&refs, &weights.arch)?);
            let trace = weights.forward(&mut g, x, true)?;
            let slot = |i: usize| members.binary_search(&i).expect("member");
            let mut loss: Option<Var> = None;
            for &(a, b, label) in batch {
                let ea = g.row(trace.embedding, slot(a))?;
                let eb = g.row(trace.embedding, slot(b))?;
                let l = contrastive_loss(&mut g, ea, eb, label, cfg.margin)?;
                loss = Some(match loss {
                    Some(acc) => g.add(acc, l)?,
                    None => l,
                });
            }
            let loss = g.mul_scalar(loss.expect("non-empty batch"), 1.0 / batch.len() as f64)?;
            let value = g.value(loss).item()?;
            if !value.is_finite() {
                return Err(Error::Numeric(format!("non-finite training loss {value} in epoch {epoch}")));
            }
            g.backward(loss)?;
            for ((layer, (wv, bv)), (ow, ob)) in weights.layers.iter_mut().zip(&trace.params).zip(&mut optimizers) {
                if let Some(gw) = g.grad(*wv) {
                    ow.step(layer.weight.data_mut(), gw.data());
                }
                if let Some(gb) = g.grad(*bv) {
                    ob.step(layer.bias.data_mut(), gb.data());
                }
            }
            total += value;
            counted += 1;
        }
        let mean = if counted == 0 { 0.0 } else { total / counted as f64 };
        log::debug!("epoch {epoch}: mean contrastive loss {mean:.6}");
        curve.push(mean);
    }
    weights.freeze();
    Ok(curve)
}
