//! Small vision transformer producing a class token plus patch tokens.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{DivaError, Result};
use crate::params::{self, Bound, ParamSet};
use crate::rng::RngStream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const CHANNELS: usize = 3;

/// RGB image stored as an `[height, width, 3]` tensor with values in
/// `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    pixels: Tensor,
}

impl ImageTensor {
    pub fn new(pixels: Tensor) -> Result<Self> {
        match pixels.shape() {
            [_, _, CHANNELS] => Ok(Self { pixels }),
            s => Err(DivaError::InvalidShape(
                s.to_vec(),
                "image must be [height, width, 3]".into(),
            )),
        }
    }

    /// Maps bytes linearly from `[0, 255]` onto `[-1, 1]`.
    pub fn from_bytes(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        let data = bytes.iter().map(|&b| byte_to_unit(b)).collect();
        Self::new(Tensor::new(&[height, width, CHANNELS], data)?)
    }

    /// Inverse of [`ImageTensor::from_bytes`], rounding to the nearest byte.
    pub fn to_bytes(&self) -> Vec<u8> {
        self.pixels
            .data()
            .iter()
            .map(|&v| ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn height(&self) -> usize {
        self.pixels.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.pixels.shape()[1]
    }

    pub fn channels(&self) -> usize {
        CHANNELS
    }

    pub fn tensor(&self) -> &Tensor {
        &self.pixels
    }
}

pub fn byte_to_unit(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            embed_dim: 64,
            depth: 4,
            heads: 4,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(DivaError::Config(format!(
                "encoder image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(DivaError::Config(format!(
                "encoder embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let g = self.image_size / self.patch_size;
        g * g
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * CHANNELS
    }
}

/// Flat source index for each output element of [`patchify`].
pub fn patch_index_map(height: usize, width: usize, patch: usize) -> Result<Vec<usize>> {
    if patch == 0 || !height.is_multiple_of(patch) || !width.is_multiple_of(patch) {
        return Err(DivaError::InvalidShape(
            vec![height, width, CHANNELS],
            format!("image size not divisible by patch size {patch}"),
        ));
    }
    let mut map = Vec::with_capacity(height * width * CHANNELS);
    for gy in 0..height / patch {
        for gx in 0..width / patch {
            for py in 0..patch {
                for px in 0..patch {
                    let (y, x) = (gy * patch + py, gx * patch + px);
                    for c in 0..CHANNELS {
                        map.push((y * width + x) * CHANNELS + c);
                    }
                }
            }
        }
    }
    Ok(map)
}

/// Splits an image into non-overlapping `patch×patch` tiles, each flattened
/// as `(row, col, channel)`, tiles ordered row-major over the grid.
pub fn patchify(image: &ImageTensor, patch: usize) -> Result<Tensor> {
    let map = patch_index_map(image.height(), image.width(), patch)?;
    let src = image.tensor().data();
    let n = (image.height() / patch) * (image.width() / patch);
    Tensor::new(
        &[n, patch * patch * CHANNELS],
        map.iter().map(|&i| src[i]).collect(),
    )
}

/// Inverse of [`patchify`].
pub fn unpatchify(
    patches: &Tensor,
    height: usize,
    width: usize,
    patch: usize,
) -> Result<ImageTensor> {
    let map = patch_index_map(height, width, patch)?;
    if patches.len() != map.len() {
        return Err(DivaError::ShapeMismatch {
            left: patches.shape().to_vec(),
            right: vec![height, width, CHANNELS],
            context: "unpatchify",
        });
    }
    let mut out = vec![0.0; map.len()];
    for (i, &dst) in map.iter().enumerate() {
        out[dst] = patches.data()[i];
    }
    ImageTensor::new(Tensor::new(&[height, width, CHANNELS], out)?)
}

/// Encoder output: one class token and a row-major grid of patch tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    /// `[1 + num_patches, embed_dim]`, class token first.
    tokens: Tensor,
}

impl TokenSequence {
    pub fn new(tokens: Tensor) -> Result<Self> {
        match tokens.shape() {
            [n, _] if *n >= 2 => Ok(Self { tokens }),
            s => Err(DivaError::InvalidShape(
                s.to_vec(),
                "token sequence needs a class token and at least one patch token".into(),
            )),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn num_patches(&self) -> usize {
        self.tokens.shape()[0] - 1
    }

    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn class_token(&self) -> &[f64] {
        self.tokens.row(0)
    }

    pub fn patch_token(&self, i: usize) -> &[f64] {
        self.tokens.row(i + 1)
    }

    pub fn tokens(&self) -> &Tensor {
        &self.tokens
    }
}

/// Class token scaled to unit L2 norm.
pub fn embed_global(ts: &TokenSequence) -> Result<Vec<f64>> {
    l2_normalize(ts.class_token())
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 || !norm.is_finite() {
        return Err(DivaError::ZeroVector);
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// Vision transformer with pre-norm blocks.
#[derive(Clone, Debug)]
pub struct Encoder {
    config: EncoderConfig,
    patch_map: Arc<[usize]>,
}

impl Encoder {
    pub fn new(config: EncoderConfig) -> Result<Self> {
        config.validate()?;
        let patch_map =
            patch_index_map(config.image_size, config.image_size, config.patch_size)?.into();
        Ok(Self { config, patch_map })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    /// Fresh parameters; every name starts with `enc.`.
    pub fn init_params(&self, rng: &mut RngStream) -> ParamSet {
        let c = &self.config;
        let d = c.embed_dim;
        let mut p = ParamSet::new();
        p.add_linear("enc.patch", c.patch_dim(), d, rng);
        p.insert("enc.cls", params::normal(&[1, d], 0.02, rng));
        p.insert("enc.pos", params::normal(&[c.num_patches(), d], 0.02, rng));
        for i in 0..c.depth {
            let b = format!("enc.blocks.{i}");
            p.add_layer_norm(&format!("{b}.ln1"), d);
            p.add_attention(&format!("{b}.attn"), d, d, rng);
            p.add_layer_norm(&format!("{b}.ln2"), d);
            p.add_mlp(&format!("{b}.mlp"), d, 4 * d, rng);
        }
        p.add_layer_norm("enc.ln_f", d);
        p
    }

    fn check_image(&self, image: &ImageTensor) -> Result<()> {
        let s = self.config.image_size;
        if image.height() != s || image.width() != s {
            return Err(DivaError::ShapeMismatch {
                left: image.tensor().shape().to_vec(),
                right: vec![s, s, CHANNELS],
                context: "encoder input size",
            });
        }
        Ok(())
    }

    /// Records the forward pass; returns the `[1 + num_patches, embed_dim]`
    /// token matrix.
    pub fn forward(&self, tape: &mut Tape, image: &ImageTensor, p: &Bound) -> Result<Var> {
        self.check_image(image)?;
        let c = &self.config;
        let n = c.num_patches();
        let pixels = tape.constant(image.tensor().clone());
        let patches = tape.gather(pixels, self.patch_map.clone(), &[n, c.patch_dim()])?;
        let x = params::linear(tape, patches, p, "enc.patch")?;
        let x = tape.add(x, p.get("enc.pos")?)?;
        let mut x = tape.concat_rows(&[p.get("enc.cls")?, x])?;
        for i in 0..c.depth {
            let b = format!("enc.blocks.{i}");
            let h = params::layer_norm(tape, x, p, &format!("{b}.ln1"))?;
            let h = params::attention(tape, h, h, p, &format!("{b}.attn"), c.heads)?;
            x = tape.add(x, h)?;
            let h = params::layer_norm(tape, x, p, &format!("{b}.ln2"))?;
            let h = params::mlp(tape, h, p, &format!("{b}.mlp"))?;
            x = tape.add(x, h)?;
        }
        params::layer_norm(tape, x, p, "enc.ln_f")
    }

    /// Eager encoding without gradient recording.
    pub fn encode(&self, image: &ImageTensor, params: &ParamSet) -> Result<TokenSequence> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let out = self.forward(&mut tape, image, &bound)?;
        TokenSequence::new(tape.value(out).clone())
    }

    pub fn embed(&self, image: &ImageTensor, params: &ParamSet) -> Result<Vec<f64>> {
        embed_global(&self.encode(image, params)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_image(size: usize, seed: u64) -> ImageTensor {
        let mut rng = RngStream::new(seed, 77);
        let data = (0..size * size * 3)
            .map(|_| rng.uniform() * 2.0 - 1.0)
            .collect();
        ImageTensor::new(Tensor::new(&[size, size, 3], data).unwrap()).unwrap()
    }

    #[test]
    fn patchify_shapes_and_roundtrip() {
        let img = random_image(32, 1);
        let p = patchify(&img, 4).unwrap();
        assert_eq!(p.shape(), &[64, 48]);
        let back = unpatchify(&p, 32, 32, 4).unwrap();
        assert_eq!(back.tensor().data(), img.tensor().data());
        let odd = random_image(30, 2);
        assert!(patchify(&odd, 4).is_err());
    }

    #[test]
    fn first_patch_is_top_left_tile() {
        let img = random_image(8, 3);
        let p = patchify(&img, 4).unwrap();
        // second element of patch 1 is pixel (0, 4) channel 1
        assert_eq!(p.row(1)[1], img.tensor().data()[(4) * 3 + 1]);
        // patch 2 starts at row 4
        assert_eq!(p.row(2)[0], img.tensor().data()[(4 * 8) * 3]);
    }

    #[test]
    fn encode_shape_and_determinism() {
        let enc = Encoder::new(EncoderConfig::default()).unwrap();
        let params = enc.init_params(&mut RngStream::new(1, 0));
        let img = random_image(32, 4);
        let a = enc.encode(&img, &params).unwrap();
        let b = enc.encode(&img, &params).unwrap();
        assert_eq!(a.len(), 65);
        assert_eq!(a.embed_dim(), 64);
        assert_eq!(a.tokens().data(), b.tokens().data());
    }

    #[test]
    fn single_pixel_change_moves_some_token() {
        let cfg = EncoderConfig {
            embed_dim: 16,
            depth: 1,
            heads: 2,
            ..EncoderConfig::default()
        };
        let enc = Encoder::new(cfg).unwrap();
        let params = enc.init_params(&mut RngStream::new(9, 0));
        let img = random_image(32, 5);
        let mut data = img.tensor().to_vec();
        data[123] = -data[123] + 0.5;
        let flipped = ImageTensor::new(Tensor::new(&[32, 32, 3], data).unwrap()).unwrap();
        let a = enc.encode(&img, &params).unwrap();
        let b = enc.encode(&flipped, &params).unwrap();
        assert!(a.tokens().max_abs_diff(b.tokens()).unwrap() > 0.0);
    }

    #[test]
    fn size_mismatch_is_rejected() {
        let enc = Encoder::new(EncoderConfig::default()).unwrap();
        let params = enc.init_params(&mut RngStream::new(1, 0));
        assert!(enc.encode(&random_image(16, 1), &params).is_err());
        assert!(Encoder::new(EncoderConfig {
            embed_dim: 10,
            heads: 4,
            ..EncoderConfig::default()
        })
        .is_err());
    }

    #[test]
    fn embed_global_is_unit_norm() {
        let ts =
            TokenSequence::new(Tensor::new(&[2, 3], vec![3.0, 0.0, 4.0, 1.0, 1.0, 1.0]).unwrap())
                .unwrap();
        let e = embed_global(&ts).unwrap();
        let norm: f64 = e.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
        let cos: f64 = e.iter().zip(&e).map(|(a, b)| a * b).sum();
        assert!((cos - 1.0).abs() < 1e-12);
        let zero = TokenSequence::new(Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(embed_global(&zero), Err(DivaError::ZeroVector)));
    }

    #[test]
    fn byte_mapping_endpoints() {
        let img = ImageTensor::from_bytes(1, 1, &[0, 255, 128]).unwrap();
        assert_eq!(img.tensor().data()[0], -1.0);
        assert_eq!(img.tensor().data()[1], 1.0);
        assert_eq!(img.to_bytes(), vec![0, 255, 128]);
    }
}
