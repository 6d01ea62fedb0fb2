//! The full finite-difference suite: every tape primitive at a random
//! point, then the end-to-end training losses of a tiny model.

use std::sync::Arc;

use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::Result;
use crate::gradcheck::{compare_with_central_differences, finite_diff_check, GradCheckReport};
use crate::params::ParamSet;
use crate::rng::{sample_gaussian, RngStream};
use crate::synth;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::trainer::{train_step, Models, Phase, Sample, ScheduleConfig, TrainConfig};

pub const OP_TOLERANCE: f64 = 1e-6;
pub const MODEL_TOLERANCE: f64 = 1e-4;
pub const STEP: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub name: String,
    pub report: GradCheckReport,
    pub tolerance: f64,
}

impl SuiteEntry {
    pub fn passes(&self) -> bool {
        self.report.passes(self.tolerance)
    }
}

type OpFn = dyn Fn(&mut Tape, &[Var]) -> Result<Var>;

/// Checks `op` with respect to each input in turn. Non-scalar outputs are
/// reduced through a fixed random weighting so every output entry matters.
pub fn check_op(
    name: &str,
    inputs: &[Tensor],
    op: &OpFn,
    rng: &mut RngStream,
) -> Result<Vec<SuiteEntry>> {
    let out_shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let y = op(&mut tape, &vars)?;
        tape.value(y).shape().to_vec()
    };
    let weights = sample_gaussian(&out_shape, rng);
    let mut entries = Vec::new();
    for wrt in 0..inputs.len() {
        let f = |tape: &mut Tape, x: Var| -> Result<Var> {
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(i, t)| {
                    if i == wrt {
                        x
                    } else {
                        tape.constant(t.clone())
                    }
                })
                .collect();
            let y = op(tape, &vars)?;
            let w = tape.constant(weights.clone());
            let yw = tape.mul(y, w)?;
            tape.sum(yw)
        };
        let report = finite_diff_check(f, &inputs[wrt], STEP)?;
        let label = if inputs.len() > 1 {
            format!("{name}[{wrt}]")
        } else {
            name.to_string()
        };
        entries.push(SuiteEntry {
            name: label,
            report,
            tolerance: OP_TOLERANCE,
        });
    }
    Ok(entries)
}

fn randn(shape: &[usize], rng: &mut RngStream) -> Tensor {
    sample_gaussian(shape, rng)
}

/// Every tape primitive at a random point drawn from `rng`.
pub fn op_checks(rng: &mut RngStream) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    let a = randn(&[3, 4], rng);
    let b = randn(&[4, 5], rng);
    let c = randn(&[3, 4], rng);
    let row = randn(&[4], rng);
    let bt = randn(&[5, 4], rng);
    let at = randn(&[4, 3], rng);

    let cases: Vec<(&str, Vec<Tensor>, Box<OpFn>)> = vec![
        (
            "matmul",
            vec![a.clone(), b.clone()],
            Box::new(|t, v| t.matmul(v[0], v[1])),
        ),
        (
            "matmul_bt",
            vec![a.clone(), bt.clone()],
            Box::new(|t, v| t.matmul_t(v[0], v[1], false, true)),
        ),
        (
            "matmul_at",
            vec![at.clone(), b.clone()],
            Box::new(|t, v| t.matmul_t(v[0], v[1], true, false)),
        ),
        (
            "matmul_at_bt",
            vec![at.clone(), bt.clone()],
            Box::new(|t, v| t.matmul_t(v[0], v[1], true, true)),
        ),
        (
            "add",
            vec![a.clone(), c.clone()],
            Box::new(|t, v| t.add(v[0], v[1])),
        ),
        (
            "sub",
            vec![a.clone(), c.clone()],
            Box::new(|t, v| t.sub(v[0], v[1])),
        ),
        (
            "mul",
            vec![a.clone(), c.clone()],
            Box::new(|t, v| t.mul(v[0], v[1])),
        ),
        (
            "add_row",
            vec![a.clone(), row.clone()],
            Box::new(|t, v| t.add_row(v[0], v[1])),
        ),
        (
            "scale",
            vec![a.clone()],
            Box::new(|t, v| t.scale(v[0], -1.7)),
        ),
        ("gelu", vec![a.scale(2.0)], Box::new(|t, v| t.gelu(v[0]))),
        (
            "softmax_rows",
            vec![a.clone()],
            Box::new(|t, v| t.softmax(v[0], 1)),
        ),
        (
            "softmax_cols",
            vec![a.clone()],
            Box::new(|t, v| t.softmax(v[0], 0)),
        ),
        (
            "layer_norm",
            vec![a.clone(), row.clone(), randn(&[4], rng)],
            Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5)),
        ),
        ("sum", vec![a.clone()], Box::new(|t, v| t.sum(v[0]))),
        ("mean", vec![a.clone()], Box::new(|t, v| t.mean(v[0]))),
        (
            "mse",
            vec![a.clone(), c.clone()],
            Box::new(|t, v| t.mse(v[0], v[1])),
        ),
        (
            "concat_rows",
            vec![a.clone(), randn(&[2, 4], rng)],
            Box::new(|t, v| t.concat_rows(&[v[0], v[1], v[0]])),
        ),
        (
            "slice_rows",
            vec![a.clone()],
            Box::new(|t, v| t.slice_rows(v[0], 1, 2)),
        ),
        (
            "gather_rows",
            vec![a.clone()],
            Box::new(|t, v| t.gather_rows(v[0], &[2, 0, 2, 1])),
        ),
        (
            "gather",
            vec![a.clone()],
            Box::new(|t, v| {
                let idx: Arc<[usize]> = vec![11, 0, 5, 5, 7, 3].into();
                t.gather(v[0], idx, &[2, 3])
            }),
        ),
        (
            "slice_cols",
            vec![a.clone()],
            Box::new(|t, v| t.slice_cols(v[0], 1, 2)),
        ),
        (
            "concat_cols",
            vec![a.clone(), randn(&[3, 2], rng)],
            Box::new(|t, v| t.concat_cols(&[v[0], v[1]])),
        ),
        (
            "reshape",
            vec![a.clone()],
            Box::new(|t, v| t.reshape(v[0], &[2, 6])),
        ),
    ];
    for (name, inputs, op) in cases {
        out.extend(check_op(name, &inputs, op.as_ref(), rng)?);
    }
    Ok(out)
}

/// The tiny model used by the end-to-end checks.
pub fn tiny_models() -> Result<Models> {
    let encoder = Encoder::new(EncoderConfig {
        image_size: synth::IMAGE_SIZE,
        patch_size: 4,
        embed_dim: 8,
        depth: 1,
        heads: 2,
    })?;
    let denoiser = Denoiser::new(DenoiserConfig {
        image_size: synth::IMAGE_SIZE,
        patch_size: 4,
        embed_dim: 8,
        depth: 1,
        heads: 2,
        time_embed_dim: 8,
        cond_dim: 8,
    })?;
    Models::new(encoder, denoiser, ScheduleConfig::default().build()?)
}

/// Checks the batch loss gradient of `phase` on at least `min_entries`
/// entries spread over every trainable tensor.
pub fn training_loss_check(
    models: &Models,
    phase: Phase,
    seed: u64,
    min_entries: usize,
) -> Result<SuiteEntry> {
    let images = synth::train_corpus(2, seed);
    let enc = models.init_encoder(seed);
    let den = models.init_denoiser(seed);
    let cfg = TrainConfig {
        phase,
        batch_size: images.len(),
        ..TrainConfig::phase_b(seed)
    };
    let batch: Vec<Sample<'_>> = images
        .iter()
        .enumerate()
        .map(|(id, image)| Sample {
            id,
            image,
            tokens: None,
        })
        .collect();
    let out = train_step(models, &batch, &enc, &den, &cfg, 0)?;
    let trained = match phase {
        Phase::A => &den,
        Phase::B => &enc,
    };
    let per_tensor = min_entries.div_ceil(trained.len()).max(1);
    let mut rng = RngStream::new(seed, 0).derive(0x67c);
    let mut report: Option<GradCheckReport> = None;
    for (name, value) in trained.iter() {
        let analytic = out
            .grads
            .get(name)
            .map(Tensor::to_vec)
            .unwrap_or_else(|| vec![0.0; value.len()]);
        let mut indices: Vec<usize> = (0..value.len()).collect();
        rng.shuffle(&mut indices);
        indices.truncate(per_tensor);
        let eval = |p: &Tensor| -> Result<f64> {
            let mut perturbed = trained.clone();
            perturbed.insert(name.clone(), p.clone());
            let (e, d): (&ParamSet, &ParamSet) = match phase {
                Phase::A => (&enc, &perturbed),
                Phase::B => (&perturbed, &den),
            };
            Ok(train_step(models, &batch, e, d, &cfg, 0)?.loss)
        };
        let r = compare_with_central_differences(&analytic, eval, value, &indices, STEP)?;
        report = Some(match report {
            None => r,
            Some(acc) => acc.merge(r),
        });
    }
    Ok(SuiteEntry {
        name: format!("phase_{}_loss", phase.to_string().to_lowercase()),
        report: report.expect("models have parameters"),
        tolerance: MODEL_TOLERANCE,
    })
}

/// Primitive ops followed by the tiny-model training losses.
pub fn run_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = RngStream::new(seed, 0).derive(0x6a5);
    let mut entries = op_checks(&mut rng)?;
    let models = tiny_models()?;
    entries.push(training_loss_check(&models, Phase::B, seed, 64)?);
    entries.push(training_loss_check(&models, Phase::A, seed, 64)?);
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_phase_b_loss_passes() {
        let models = tiny_models().unwrap();
        let e = training_loss_check(&models, Phase::B, 3, 64).unwrap();
        assert!(e.report.checked >= 64);
        assert!(e.passes(), "{e:?}");
    }

    #[test]
    fn ops_pass_at_a_random_point() {
        let entries = op_checks(&mut RngStream::new(5, 0)).unwrap();
        for e in &entries {
            assert!(e.passes(), "{}: {:?}", e.name, e.report);
        }
        assert!(entries.len() >= 23);
    }
}
