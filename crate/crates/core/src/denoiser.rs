//! Conditional transformer noise predictor.
//!
//! Image tokens get learned positions and a timestep embedding, then pass
//! through blocks of self-attention, cross-attention over the adapted
//! condition, and an MLP. Condition tokens carry no positional encoding,
//! so the prediction does not depend on the order of the recapped tokens.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::condition::Condition;
use crate::encoder::{patch_index_map, ImageTensor, CHANNELS};
use crate::error::{DivaError, Result};
use crate::params::{self, Bound, ParamSet};
use crate::rng::RngStream;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DenoiserConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub time_embed_dim: usize,
    /// Width of incoming condition tokens (the encoder's `embed_dim`).
    pub cond_dim: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            patch_size: 4,
            embed_dim: 64,
            depth: 4,
            heads: 4,
            time_embed_dim: 64,
            cond_dim: 64,
        }
    }
}

impl DenoiserConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || self.image_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(DivaError::Config(format!(
                "denoiser image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.heads == 0 || self.embed_dim == 0 || !self.embed_dim.is_multiple_of(self.heads) {
            return Err(DivaError::Config(format!(
                "denoiser embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.time_embed_dim == 0 || !self.time_embed_dim.is_multiple_of(2) {
            return Err(DivaError::Config(format!(
                "time_embed_dim must be even, got {}",
                self.time_embed_dim
            )));
        }
        if self.cond_dim == 0 {
            return Err(DivaError::Config("cond_dim must be positive".into()));
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

/// Sinusoidal embedding: entry `2i` is `sin(t·ω_i)`, entry `2i+1` is
/// `cos(t·ω_i)`, with `ω_i = 10000^(−2i/dim)`.
pub fn time_embed(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(DivaError::InvalidArgument(format!(
            "time embedding dim must be even and positive, got {dim}"
        )));
    }
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let freq = 10000f64.powf(-((2 * i) as f64) / dim as f64);
        out.push((t * freq).sin());
        out.push((t * freq).cos());
    }
    Ok(out)
}

/// Mean squared error over all elements.
pub fn diffusion_loss(eps_hat: &Tensor, eps: &Tensor) -> Result<f64> {
    let d = eps_hat.sub(eps)?;
    Ok(d.data().iter().map(|v| v * v).sum::<f64>() / d.len() as f64)
}

#[derive(Clone, Debug)]
pub struct Denoiser {
    config: DenoiserConfig,
    patch_map: Arc<[usize]>,
    unpatch_map: Arc<[usize]>,
}

impl Denoiser {
    pub fn new(config: DenoiserConfig) -> Result<Self> {
        config.validate()?;
        let map = patch_index_map(config.image_size, config.image_size, config.patch_size)?;
        let mut inverse = vec![0; map.len()];
        for (i, &dst) in map.iter().enumerate() {
            inverse[dst] = i;
        }
        Ok(Self {
            config,
            patch_map: map.into(),
            unpatch_map: inverse.into(),
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    /// Fresh parameters; every name starts with `den.`. The condition
    /// adapter (`den.cond_adapter`) is part of this set. The output
    /// projection starts at zero.
    pub fn init_params(&self, rng: &mut RngStream) -> ParamSet {
        let c = &self.config;
        let d = c.embed_dim;
        let mut p = ParamSet::new();
        p.add_linear("den.patch", c.patch_dim(), d, rng);
        p.insert("den.pos", params::normal(&[c.num_patches(), d], 0.02, rng));
        p.add_linear("den.time.fc1", c.time_embed_dim, d, rng);
        p.add_linear("den.time.fc2", d, d, rng);
        p.add_linear("den.cond_adapter", c.cond_dim, d, rng);
        for i in 0..c.depth {
            let b = format!("den.blocks.{i}");
            p.add_layer_norm(&format!("{b}.ln1"), d);
            p.add_attention(&format!("{b}.self_attn"), d, d, rng);
            p.add_layer_norm(&format!("{b}.ln2"), d);
            p.add_attention(&format!("{b}.cross_attn"), d, d, rng);
            p.add_layer_norm(&format!("{b}.ln3"), d);
            p.add_mlp(&format!("{b}.mlp"), d, 4 * d, rng);
        }
        p.add_layer_norm("den.ln_f", d);
        p.add_linear("den.out", d, c.patch_dim(), rng);
        p.insert("den.out.weight", Tensor::zeros(&[d, c.patch_dim()]));
        p
    }

    /// Patch-space view of an image-shaped tensor, as a tape constant.
    pub fn patches_constant(&self, tape: &mut Tape, image: &Tensor) -> Result<Var> {
        let s = self.config.image_size;
        if image.shape() != [s, s, CHANNELS] {
            return Err(DivaError::ShapeMismatch {
                left: image.shape().to_vec(),
                right: vec![s, s, CHANNELS],
                context: "denoiser input size",
            });
        }
        let v = tape.constant(image.clone());
        tape.gather(
            v,
            self.patch_map.clone(),
            &[self.config.num_patches(), self.config.patch_dim()],
        )
    }

    /// Records `ε_φ(x_t, t, c)` in patch space (`[num_patches, patch_dim]`).
    pub fn forward_patches(
        &self,
        tape: &mut Tape,
        x_patches: Var,
        t: usize,
        cond: Var,
        p: &Bound,
    ) -> Result<Var> {
        let c = &self.config;
        let cond_dim = tape.value(cond).shape()[1];
        if cond_dim != c.cond_dim {
            return Err(DivaError::ShapeMismatch {
                left: tape.value(cond).shape().to_vec(),
                right: vec![c.cond_dim],
                context: "condition width vs adapter input",
            });
        }
        let temb = Tensor::new(
            &[1, c.time_embed_dim],
            time_embed(t as f64, c.time_embed_dim)?,
        )?;
        let temb = tape.constant(temb);
        let temb = params::linear(tape, temb, p, "den.time.fc1")?;
        let temb = tape.gelu(temb)?;
        let temb = params::linear(tape, temb, p, "den.time.fc2")?;

        let ctx = params::linear(tape, cond, p, "den.cond_adapter")?;

        let x = params::linear(tape, x_patches, p, "den.patch")?;
        let x = tape.add(x, p.get("den.pos")?)?;
        let mut x = tape.add_row(x, temb)?;
        for i in 0..c.depth {
            let b = format!("den.blocks.{i}");
            let h = params::layer_norm(tape, x, p, &format!("{b}.ln1"))?;
            let h = params::attention(tape, h, h, p, &format!("{b}.self_attn"), c.heads)?;
            x = tape.add(x, h)?;
            let h = params::layer_norm(tape, x, p, &format!("{b}.ln2"))?;
            let h = params::attention(tape, h, ctx, p, &format!("{b}.cross_attn"), c.heads)?;
            x = tape.add(x, h)?;
            let h = params::layer_norm(tape, x, p, &format!("{b}.ln3"))?;
            let h = params::mlp(tape, h, p, &format!("{b}.mlp"))?;
            x = tape.add(x, h)?;
        }
        let x = params::layer_norm(tape, x, p, "den.ln_f")?;
        params::linear(tape, x, p, "den.out")
    }

    /// Records the prediction reshaped back to image layout.
    pub fn forward(
        &self,
        tape: &mut Tape,
        x_t: &Tensor,
        t: usize,
        cond: Var,
        p: &Bound,
    ) -> Result<Var> {
        let xp = self.patches_constant(tape, x_t)?;
        let out = self.forward_patches(tape, xp, t, cond, p)?;
        let s = self.config.image_size;
        tape.gather(out, self.unpatch_map.clone(), &[s, s, CHANNELS])
    }

    /// Eager noise prediction; the output has the shape of `x_t`.
    pub fn denoise(
        &self,
        x_t: &ImageTensor,
        t: usize,
        cond: &Condition,
        params: &ParamSet,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, false);
        let c = tape.constant(cond.tokens().clone());
        let out = self.forward(&mut tape, x_t.tensor(), t, c, &bound)?;
        Ok(tape.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::sample_gaussian;

    fn tiny() -> DenoiserConfig {
        DenoiserConfig {
            image_size: 8,
            patch_size: 4,
            embed_dim: 8,
            depth: 1,
            heads: 2,
            time_embed_dim: 8,
            cond_dim: 6,
        }
    }

    fn image(seed: u64, size: usize) -> ImageTensor {
        ImageTensor::new(sample_gaussian(
            &[size, size, 3],
            &mut RngStream::new(seed, 1),
        ))
        .unwrap()
    }

    fn cond(seed: u64, n: usize, d: usize) -> Condition {
        Condition::new(sample_gaussian(&[n, d], &mut RngStream::new(seed, 2))).unwrap()
    }

    #[test]
    fn time_embed_examples() {
        let e = time_embed(0.0, 6).unwrap();
        assert_eq!(e, vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0]);
        assert!(time_embed(1.0, 7).is_err());
    }

    #[test]
    fn time_embeddings_are_distinct_over_all_steps() {
        let embs: Vec<Vec<f64>> = (1..=1000)
            .map(|t| time_embed(t as f64, 64).unwrap())
            .collect();
        for i in 0..embs.len() {
            for j in i + 1..embs.len() {
                let d = embs[i]
                    .iter()
                    .zip(&embs[j])
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                assert!(d > 1e-6, "t={} vs t={}", i + 1, j + 1);
            }
        }
    }

    #[test]
    fn output_shape_matches_input() {
        let den = Denoiser::new(tiny()).unwrap();
        let p = den.init_params(&mut RngStream::new(1, 0));
        let x = image(3, 8);
        let out = den.denoise(&x, 17, &cond(4, 5, 6), &p).unwrap();
        assert_eq!(out.shape(), x.tensor().shape());
        let again = den.denoise(&x, 17, &cond(4, 5, 6), &p).unwrap();
        assert_eq!(out.data(), again.data());
    }

    /// Fresh parameters with a random output projection, so predictions
    /// depend on the input.
    fn nonzero_params(den: &Denoiser) -> ParamSet {
        let mut p = den.init_params(&mut RngStream::new(1, 0));
        let shape = p.get("den.out.weight").unwrap().shape().to_vec();
        p.insert(
            "den.out.weight",
            sample_gaussian(&shape, &mut RngStream::new(2, 0)),
        );
        p
    }

    #[test]
    fn untrained_prediction_is_zero() {
        let den = Denoiser::new(tiny()).unwrap();
        let p = den.init_params(&mut RngStream::new(1, 0));
        let out = den.denoise(&image(3, 8), 250, &cond(5, 7, 6), &p).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn prediction_ignores_order_of_recapped_tokens() {
        let den = Denoiser::new(tiny()).unwrap();
        let p = nonzero_params(&den);
        let x = image(3, 8);
        let c = cond(5, 7, 6);
        let permuted = c.permute_patch_segment(&[3, 0, 2, 1]).unwrap();
        assert_ne!(permuted.tokens().data(), c.tokens().data());
        let a = den.denoise(&x, 250, &c, &p).unwrap();
        let b = den.denoise(&x, 250, &permuted, &p).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-10);
    }

    #[test]
    fn condition_receives_gradient() {
        let den = Denoiser::new(tiny()).unwrap();
        let p = nonzero_params(&den);
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, false);
        let c = tape.leaf(cond(6, 4, 6).tokens().clone().with_grad(true));
        let out = den
            .forward(&mut tape, image(2, 8).tensor(), 40, c, &bound)
            .unwrap();
        let sq = tape.mul(out, out).unwrap();
        let loss = tape.sum(sq).unwrap();
        let g = tape.backward(loss).unwrap();
        let gc = g.get(c).unwrap();
        assert!(gc.data().iter().any(|v| v.abs() > 0.0));
        assert!(bound.iter().all(|(_, &v)| g.get(v).is_none()));
    }

    #[test]
    fn mismatched_condition_width_is_rejected() {
        let den = Denoiser::new(tiny()).unwrap();
        let p = den.init_params(&mut RngStream::new(1, 0));
        assert!(den.denoise(&image(1, 8), 3, &cond(1, 4, 5), &p).is_err());
        assert!(den.denoise(&image(1, 16), 3, &cond(1, 4, 6), &p).is_err());
    }

    #[test]
    fn loss_examples() {
        let eps = sample_gaussian(&[4, 4, 3], &mut RngStream::new(1, 1));
        assert_eq!(diffusion_loss(&eps, &eps).unwrap(), 0.0);
        assert!(diffusion_loss(&eps, &Tensor::zeros(&[4, 4, 2])).is_err());
        // E‖ε‖²/D = 1 with a zero prediction.
        let zero = Tensor::zeros(&[8, 8, 3]);
        let mut rng = RngStream::new(2, 9);
        let mean = (0..10_000)
            .map(|_| diffusion_loss(&zero, &sample_gaussian(&[8, 8, 3], &mut rng)).unwrap())
            .sum::<f64>()
            / 10_000.0;
        assert!((mean - 1.0).abs() < 0.05, "{mean}");
    }
}
