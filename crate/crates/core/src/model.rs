//! The ViT masked autoencoder.
//!
//! The encoder embeds only the visible patches (linear projection plus fixed
//! sin-cos positions) and runs pre-norm transformer blocks over them. The
//! decoder projects the latents to its own width, appends one learned mask
//! token per hidden patch, restores patch order, adds its own positions and
//! runs its blocks before a linear head maps every token back to pixels.
//! There is no class token.

use std::collections::HashMap;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{EnkiError, Result};
use crate::numerics::{Graph, Tensor, Var};
use crate::patching::{patchify, positional_embedding, MaskSpec, PatchGrid};
use crate::rng::{rng_from_seed, Rng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub encoder_dim: usize,
    pub encoder_depth: usize,
    pub encoder_heads: usize,
    pub decoder_dim: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub mlp_ratio: usize,
    pub layer_norm_eps: f64,
}

impl Default for ModelConfig {
    /// The full-size architecture: 64×64×1 cutouts, 4×4 patches, a
    /// 256-wide encoder and a 512-wide decoder.
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            channels: 1,
            patch_size: 4,
            encoder_dim: 256,
            encoder_depth: 6,
            encoder_heads: 8,
            decoder_dim: 512,
            decoder_depth: 4,
            decoder_heads: 8,
            mlp_ratio: 4,
            layer_norm_eps: 1e-6,
        }
    }
}

impl ModelConfig {
    pub fn full() -> Self {
        Self::default()
    }

    /// Small enough to train on 64×64 cutouts on one CPU core.
    pub fn desk() -> Self {
        ModelConfig {
            encoder_dim: 32,
            encoder_depth: 2,
            encoder_heads: 2,
            decoder_dim: 32,
            decoder_depth: 1,
            decoder_heads: 2,
            mlp_ratio: 2,
            ..Self::default()
        }
    }

    /// A one-block model for gradient checks and overfitting tests.
    pub fn toy(image_size: usize, patch_size: usize, dim: usize) -> Self {
        ModelConfig {
            image_size,
            channels: 1,
            patch_size,
            encoder_dim: dim,
            encoder_depth: 1,
            encoder_heads: 2,
            decoder_dim: dim,
            decoder_depth: 1,
            decoder_heads: 2,
            mlp_ratio: 4,
            layer_norm_eps: 1e-6,
        }
    }

    pub fn grid(&self) -> PatchGrid {
        PatchGrid {
            image_size: self.image_size,
            patch_size: self.patch_size,
        }
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn validate(&self) -> Result<()> {
        PatchGrid::new(self.image_size, self.patch_size)?;
        if self.channels != 1 {
            return Err(EnkiError::invalid("only single-channel cutouts are supported"));
        }
        for (name, dim, heads) in [
            ("encoder", self.encoder_dim, self.encoder_heads),
            ("decoder", self.decoder_dim, self.decoder_heads),
        ] {
            if heads == 0 || dim % heads != 0 {
                return Err(EnkiError::invalid(format!("{name}_dim {dim} not divisible by {heads} heads")));
            }
            if dim % 4 != 0 {
                return Err(EnkiError::invalid(format!("{name}_dim {dim} must be divisible by 4")));
            }
        }
        if self.mlp_ratio == 0 || self.layer_norm_eps <= 0.0 {
            return Err(EnkiError::invalid("mlp_ratio and layer_norm_eps must be positive"));
        }
        Ok(())
    }

    /// Every learnable tensor as `(name, shape)`, in canonical order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let p = self.patch_len();
        let (d, dd) = (self.encoder_dim, self.decoder_dim);
        let mut out = vec![
            ("patch_embed.weight".to_string(), vec![p, d]),
            ("patch_embed.bias".to_string(), vec![d]),
        ];
        let block = |out: &mut Vec<(String, Vec<usize>)>, prefix: String, dim: usize| {
            let hidden = dim * self.mlp_ratio;
            let shapes: [(&str, Vec<usize>); 16] = [
                ("norm1.weight", vec![dim]),
                ("norm1.bias", vec![dim]),
                ("attn.q.weight", vec![dim, dim]),
                ("attn.q.bias", vec![dim]),
                ("attn.k.weight", vec![dim, dim]),
                ("attn.k.bias", vec![dim]),
                ("attn.v.weight", vec![dim, dim]),
                ("attn.v.bias", vec![dim]),
                ("attn.out.weight", vec![dim, dim]),
                ("attn.out.bias", vec![dim]),
                ("norm2.weight", vec![dim]),
                ("norm2.bias", vec![dim]),
                ("mlp.fc1.weight", vec![dim, hidden]),
                ("mlp.fc1.bias", vec![hidden]),
                ("mlp.fc2.weight", vec![hidden, dim]),
                ("mlp.fc2.bias", vec![dim]),
            ];
            for (n, s) in shapes {
                out.push((format!("{prefix}.{n}"), s));
            }
        };
        for l in 0..self.encoder_depth {
            block(&mut out, format!("encoder.{l}"), d);
        }
        out.push(("encoder.norm.weight".into(), vec![d]));
        out.push(("encoder.norm.bias".into(), vec![d]));
        out.push(("decoder_embed.weight".into(), vec![d, dd]));
        out.push(("decoder_embed.bias".into(), vec![dd]));
        out.push(("mask_token".into(), vec![dd]));
        for l in 0..self.decoder_depth {
            block(&mut out, format!("decoder.{l}"), dd);
        }
        out.push(("decoder.norm.weight".into(), vec![dd]));
        out.push(("decoder.norm.bias".into(), vec![dd]));
        out.push(("pred.weight".into(), vec![dd, p]));
        out.push(("pred.bias".into(), vec![p]));
        out
    }
}

/// All learnable tensors plus the fixed positional tables.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    lookup: HashMap<String, usize>,
    encoder_pos: Tensor,
    decoder_pos: Tensor,
}

fn truncated_normal(rng: &mut Rng, std: f64) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

impl ModelParams {
    /// Weights and the mask token ~ N(0, 0.02²) truncated at 2σ; biases zero;
    /// norm gains one.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from_seed(seed);
        let tensors = config
            .param_shapes()
            .into_iter()
            .map(|(name, shape)| {
                let t = if name.contains("norm") && name.ends_with(".weight") {
                    Tensor::full(&shape, 1.0)
                } else if name.ends_with(".bias") {
                    Tensor::zeros(&shape)
                } else {
                    Tensor::from_fn(&shape, |_| truncated_normal(&mut rng, 0.02))
                };
                (name, t)
            })
            .collect();
        Self::from_named(config, tensors)
    }

    /// Assemble from named tensors, checking names and shapes against `config`.
    pub fn from_named(config: &ModelConfig, named: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let expected = config.param_shapes();
        if expected.len() != named.len() {
            return Err(EnkiError::invalid(format!(
                "expected {} parameter tensors, found {}",
                expected.len(),
                named.len()
            )));
        }
        let mut names = Vec::with_capacity(named.len());
        let mut tensors = Vec::with_capacity(named.len());
        let mut by_name: HashMap<String, Tensor> = named.into_iter().collect();
        for (name, shape) in expected {
            let t = by_name
                .remove(&name)
                .ok_or_else(|| EnkiError::invalid(format!("missing parameter {name}")))?;
            if t.shape() != shape.as_slice() {
                return Err(EnkiError::Shape {
                    op: "load parameter",
                    lhs: t.shape().to_vec(),
                    rhs: shape,
                });
            }
            names.push(name);
            tensors.push(t);
        }
        let lookup = names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect();
        let grid = config.grid();
        Ok(ModelParams {
            names,
            tensors,
            lookup,
            encoder_pos: positional_embedding(&grid, config.encoder_dim)?,
            decoder_pos: positional_embedding(&grid, config.decoder_dim)?,
        })
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.lookup.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.lookup.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Vectors (biases, norm parameters, the mask token) are exempt from decay.
    pub fn decays(&self, index: usize) -> bool {
        self.tensors[index].ndim() > 1
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor::all_finite)
    }

    pub fn encoder_pos(&self) -> &Tensor {
        &self.encoder_pos
    }

    pub fn decoder_pos(&self) -> &Tensor {
        &self.decoder_pos
    }
}

/// Parameters placed on a graph, addressable by name.
pub struct Bound<'p> {
    params: &'p ModelParams,
    vars: Vec<Var>,
}

impl Bound<'_> {
    pub fn var(&self, name: &str) -> Var {
        self.vars[self.params.lookup[name]]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Put every parameter on `g`; `trainable` decides whether they take gradients.
pub fn bind<'p>(g: &mut Graph, params: &'p ModelParams, trainable: bool) -> Bound<'p> {
    let vars = params
        .tensors
        .iter()
        .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
        .collect();
    Bound { params, vars }
}

fn linear(g: &mut Graph, b: &Bound, prefix: &str, x: Var) -> Result<Var> {
    let y = g.matmul(x, b.var(&format!("{prefix}.weight")))?;
    g.add(y, b.var(&format!("{prefix}.bias")))
}

fn norm(g: &mut Graph, b: &Bound, prefix: &str, x: Var, eps: f64) -> Result<Var> {
    let gain = b.var(&format!("{prefix}.weight"));
    let shift = b.var(&format!("{prefix}.bias"));
    g.layer_norm(x, gain, shift, eps)
}

/// `[B, T, H·dh]` → `[B·H, T, dh]`
fn split_heads(g: &mut Graph, x: Var, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (batch, t, dim) = (s[0], s[1], s[2]);
    let x = g.reshape(x, &[batch, t, heads, dim / heads])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[batch * heads, t, dim / heads])
}

fn merge_heads(g: &mut Graph, x: Var, batch: usize, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (t, dh) = (s[1], s[2]);
    let x = g.reshape(x, &[batch, heads, t, dh])?;
    let x = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(x, &[batch, t, heads * dh])
}

fn attention(g: &mut Graph, b: &Bound, prefix: &str, x: Var, heads: usize) -> Result<Var> {
    let batch = g.shape(x)[0];
    let dim = g.shape(x)[2];
    let q = linear(g, b, &format!("{prefix}.q"), x)?;
    let k = linear(g, b, &format!("{prefix}.k"), x)?;
    let v = linear(g, b, &format!("{prefix}.v"), x)?;
    let q = split_heads(g, q, heads)?;
    let q = g.scale(q, 1.0 / ((dim / heads) as f64).sqrt());
    let k = split_heads(g, k, heads)?;
    let kt = g.transpose(k)?;
    let v = split_heads(g, v, heads)?;
    let scores = g.matmul(q, kt)?;
    let weights = g.softmax(scores)?;
    let ctx = g.matmul(weights, v)?;
    let ctx = merge_heads(g, ctx, batch, heads)?;
    linear(g, b, &format!("{prefix}.out"), ctx)
}

fn block(g: &mut Graph, b: &Bound, prefix: &str, x: Var, heads: usize, eps: f64) -> Result<Var> {
    let h = norm(g, b, &format!("{prefix}.norm1"), x, eps)?;
    let a = attention(g, b, &format!("{prefix}.attn"), h, heads)?;
    let x = g.add(x, a)?;
    let h = norm(g, b, &format!("{prefix}.norm2"), x, eps)?;
    let h = linear(g, b, &format!("{prefix}.mlp.fc1"), h)?;
    let h = g.gelu(h);
    let h = linear(g, b, &format!("{prefix}.mlp.fc2"), h)?;
    g.add(x, h)
}

fn gather_rows(table: &Tensor, rows: &[usize], batch: usize) -> Result<Tensor> {
    let d = table.shape()[1];
    let mut out = Vec::with_capacity(rows.len() * d);
    for &r in rows {
        out.extend_from_slice(&table.data()[r * d..(r + 1) * d]);
    }
    Tensor::new(out, &[batch, rows.len() / batch.max(1), d])
}

/// Encoder over visible patches only.
///
/// `visible` is `[B, V, patch_len]`; `positions` holds the `B·V` patch indices
/// those rows came from. Returns `[B, V, encoder_dim]`.
pub fn encode(
    g: &mut Graph,
    b: &Bound,
    config: &ModelConfig,
    visible: Var,
    positions: &[usize],
) -> Result<Var> {
    let s = g.shape(visible).to_vec();
    if s.len() != 3 || s[2] != config.patch_len() || positions.len() != s[0] * s[1] {
        return Err(EnkiError::shape("encode", &s, &[positions.len(), config.patch_len()]));
    }
    if s[1] == 0 {
        return Err(EnkiError::NoVisiblePatches);
    }
    let n = config.grid().num_patches();
    if positions.iter().any(|&p| p >= n) {
        return Err(EnkiError::invalid("patch position outside grid"));
    }
    let x = linear(g, b, "patch_embed", visible)?;
    let pos = g.constant(gather_rows(b.params.encoder_pos(), positions, s[0])?);
    let mut x = g.add(x, pos)?;
    for l in 0..config.encoder_depth {
        x = block(g, b, &format!("encoder.{l}"), x, config.encoder_heads, config.layer_norm_eps)?;
    }
    norm(g, b, "encoder.norm", x, config.layer_norm_eps)
}

/// Decoder over the full sequence. `latents` is `[B, V, encoder_dim]` in the
/// ascending visible order of each mask. Returns `[B, N, patch_len]`.
pub fn decode(g: &mut Graph, b: &Bound, config: &ModelConfig, latents: Var, masks: &[MaskSpec]) -> Result<Var> {
    let s = g.shape(latents).to_vec();
    let n = config.grid().num_patches();
    let batch = masks.len();
    if s.len() != 3 || s[0] != batch || s[2] != config.encoder_dim {
        return Err(EnkiError::shape("decode", &s, &[batch, 0, config.encoder_dim]));
    }
    let visible = s[1];
    for m in masks {
        if m.num_patches() != n || m.num_visible() != visible {
            return Err(EnkiError::invalid(format!(
                "latent count {visible} inconsistent with mask ({} visible of {})",
                m.num_visible(),
                m.num_patches()
            )));
        }
    }
    let dd = config.decoder_dim;
    let y = linear(g, b, "decoder_embed", latents)?;
    let hidden = n - visible;
    let seq = if hidden > 0 {
        let zeros = g.constant(Tensor::zeros(&[batch, hidden, dd]));
        let tokens = g.add(zeros, b.var("mask_token"))?;
        g.concat(&[y, tokens], 1)?
    } else {
        y
    };
    let restore: Vec<usize> = masks.iter().flat_map(MaskSpec::restore_order).collect();
    let seq = g.gather(seq, &restore, n)?;
    let pos = g.constant(b.params.decoder_pos().clone());
    let mut x = g.add(seq, pos)?;
    for l in 0..config.decoder_depth {
        x = block(g, b, &format!("decoder.{l}"), x, config.decoder_heads, config.layer_norm_eps)?;
    }
    let x = norm(g, b, "decoder.norm", x, config.layer_norm_eps)?;
    linear(g, b, "pred", x)
}

/// Sum of squared errors over masked patches only, plus the number of
/// masked pixels it covers.
pub fn masked_sse(g: &mut Graph, pred: Var, target: &[f64], masks: &[MaskSpec]) -> Result<(Var, usize)> {
    let shape = g.shape(pred).to_vec();
    if shape.len() != 3 || shape[0] != masks.len() || target.len() != shape.iter().product::<usize>() {
        return Err(EnkiError::shape("masked_mse_loss", &shape, &[target.len()]));
    }
    let (n, p) = (shape[1], shape[2]);
    let mut weights = Vec::with_capacity(target.len());
    let mut count = 0;
    for m in masks {
        if m.num_patches() != n {
            return Err(EnkiError::shape("masked_mse_loss", &[m.num_patches()], &[n]));
        }
        for &f in &m.flags {
            weights.extend(std::iter::repeat_n(if f { 1.0 } else { 0.0 }, p));
            count += usize::from(f) * p;
        }
    }
    if count == 0 {
        return Err(EnkiError::EmptyMask);
    }
    let t = g.constant(Tensor::new(target.to_vec(), &shape)?);
    let w = g.constant(Tensor::new(weights, &shape)?);
    let diff = g.sub(pred, t)?;
    let sq = g.mul(diff, diff)?;
    let masked = g.mul(sq, w)?;
    Ok((g.sum(masked), count))
}

/// Mean squared pixel error over masked patches only.
pub fn masked_mse_loss(g: &mut Graph, pred: Var, target: &[f64], masks: &[MaskSpec]) -> Result<Var> {
    let (sse, count) = masked_sse(g, pred, target, masks)?;
    Ok(g.scale(sse, 1.0 / count as f64))
}

/// Handles from one forward pass.
pub struct Forward {
    /// `[B, V, patch_len]`: exactly what the encoder consumed.
    pub encoder_input: Var,
    pub latents: Var,
    /// `[B, N, patch_len]`
    pub pred: Var,
}

/// Patchify each image, keep visible rows, encode, decode.
pub fn forward(
    g: &mut Graph,
    b: &Bound,
    config: &ModelConfig,
    images: &[&[f64]],
    masks: &[MaskSpec],
) -> Result<Forward> {
    if images.len() != masks.len() || images.is_empty() {
        return Err(EnkiError::invalid("need one mask per image and at least one image"));
    }
    let grid = config.grid();
    let p = config.patch_len();
    let visible = masks[0].num_visible();
    if masks.iter().any(|m| m.num_visible() != visible) {
        return Err(EnkiError::invalid("all masks in a batch must hide the same number of patches"));
    }
    if visible == 0 {
        return Err(EnkiError::NoVisiblePatches);
    }
    let mut rows = Vec::with_capacity(images.len() * visible * p);
    let mut positions = Vec::with_capacity(images.len() * visible);
    for (img, m) in images.iter().zip(masks) {
        if m.num_patches() != grid.num_patches() {
            return Err(EnkiError::shape("forward", &[m.num_patches()], &[grid.num_patches()]));
        }
        let patches = patchify(img, &grid)?;
        for k in m.visible() {
            rows.extend_from_slice(&patches[k * p..(k + 1) * p]);
            positions.push(k);
        }
    }
    let encoder_input = g.constant(Tensor::new(rows, &[images.len(), visible, p])?);
    let latents = encode(g, b, config, encoder_input, &positions)?;
    let pred = decode(g, b, config, latents, masks)?;
    Ok(Forward {
        encoder_input,
        latents,
        pred,
    })
}

/// A configured model with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedAutoencoder {
    pub config: ModelConfig,
    pub params: ModelParams,
}

/// Loss value and one gradient per parameter tensor, in canonical order.
pub struct LossAndGrads {
    pub loss: f64,
    pub grads: Vec<Tensor>,
}

impl MaskedAutoencoder {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, seed)?;
        Ok(MaskedAutoencoder { config, params })
    }

    /// Masked squared error of a batch divided by `normalizer` (the batch's
    /// masked-pixel count when `None`), with gradients.
    pub fn loss_and_grads(
        &self,
        inputs: &[&[f64]],
        targets: &[&[f64]],
        masks: &[MaskSpec],
        normalizer: Option<f64>,
    ) -> Result<LossAndGrads> {
        if targets.len() != inputs.len() {
            return Err(EnkiError::invalid("inputs and targets differ in length"));
        }
        let grid = self.config.grid();
        let mut g = Graph::new();
        let b = bind(&mut g, &self.params, true);
        let out = forward(&mut g, &b, &self.config, inputs, masks)?;
        let mut target = Vec::with_capacity(targets.len() * grid.num_pixels());
        for t in targets {
            target.extend(patchify(t, &grid)?);
        }
        let (sse, count) = masked_sse(&mut g, out.pred, &target, masks)?;
        let loss = g.scale(sse, 1.0 / normalizer.unwrap_or(count as f64));
        g.backward(loss)?;
        let value = g.value(loss).item().expect("scalar");
        let vars = b.vars().to_vec();
        let grads = vars
            .iter()
            .zip(self.params.tensors())
            .map(|(&v, t)| g.take_grad(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok(LossAndGrads { loss: value, grads })
    }

    /// Flat `[N·patch_len]` decoder output for each image.
    pub fn predict_batch(&self, images: &[&[f64]], masks: &[MaskSpec]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let b = bind(&mut g, &self.params, false);
        let out = forward(&mut g, &b, &self.config, images, masks)?;
        let per = self.config.grid().num_pixels();
        Ok(g.value(out.pred).data().chunks(per).map(<[f64]>::to_vec).collect())
    }

    pub fn predict(&self, image: &[f64], mask: &MaskSpec) -> Result<Vec<f64>> {
        Ok(self.predict_batch(&[image], std::slice::from_ref(mask))?.remove(0))
    }
}
