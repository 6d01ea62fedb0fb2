//! Denoiser pretraining (phase A) and diffusion-feedback encoder tuning
//! (phase B) with momentum SGD.
//!
//! Every random draw is addressed by `(seed, step, sample id)`, so a
//! sample's timesteps, noise, and recap selection do not depend on its
//! position in the batch. Per-sample results are reduced in ascending id
//! order, which keeps the batch loss bit-identical under reordering.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::condition::{condition_on_tape, RecapStrategy, Sentinels};
use crate::denoiser::Denoiser;
use crate::encoder::{Encoder, ImageTensor};
use crate::error::{DivaError, Result};
use crate::params::{collect_grads, ParamGrads, ParamSet};
use crate::rng::{sample_gaussian, RngStream};
use crate::schedule::NoiseSchedule;
use crate::tape::Tape;
use crate::tensor::Tensor;

const TAG_INIT: u64 = 1;
const TAG_SHUFFLE: u64 = 2;
const TAG_STEP: u64 = 3;
const TAG_RECAP: u64 = 10;
const TAG_STATES: u64 = 11;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    /// Train the denoiser against a frozen encoder snapshot.
    A,
    /// Tune the encoder against the frozen denoiser.
    B,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::A => "A",
            Phase::B => "B",
        })
    }
}

impl FromStr for Phase {
    type Err = DivaError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "A" | "a" => Ok(Phase::A),
            "B" | "b" => Ok(Phase::B),
            _ => Err(DivaError::Config(format!("unknown phase `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    pub timesteps: usize,
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            beta_min: 1e-4,
            beta_max: 0.02,
        }
    }
}

impl ScheduleConfig {
    pub fn build(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::linear(self.timesteps, self.beta_min, self.beta_max)
    }
}

/// Optimization settings for one phase.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub phase: Phase,
    pub steps: usize,
    pub batch_size: usize,
    /// Timestep states drawn per image (`N`).
    pub states_per_image: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
    pub strategy: RecapStrategy,
}

impl TrainConfig {
    pub fn phase_a(seed: u64) -> Self {
        Self {
            phase: Phase::A,
            steps: 2000,
            batch_size: 32,
            states_per_image: 2,
            learning_rate: 1e-3,
            momentum: 0.9,
            seed,
            strategy: RecapStrategy::default(),
        }
    }

    pub fn phase_b(seed: u64) -> Self {
        Self {
            phase: Phase::B,
            steps: 500,
            learning_rate: 1e-4,
            ..Self::phase_a(seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.states_per_image == 0 {
            return Err(DivaError::Config("states_per_image must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(DivaError::Config("batch_size must be >= 1".into()));
        }
        check_hyper(self.learning_rate, self.momentum)?;
        self.strategy.validate()
    }
}

fn check_hyper(lr: f64, momentum: f64) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(DivaError::Config(format!(
            "learning_rate must be > 0, got {lr}"
        )));
    }
    if !(0.0..1.0).contains(&momentum) {
        return Err(DivaError::Config(format!(
            "momentum must be in [0, 1), got {momentum}"
        )));
    }
    Ok(())
}

/// Velocity buffers for the trainable parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    velocity: BTreeMap<String, Vec<f64>>,
}

impl OptimizerState {
    pub fn velocity(&self, name: &str) -> Option<&[f64]> {
        self.velocity.get(name).map(Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.velocity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.velocity.is_empty()
    }
}

/// `v ← momentum·v + g; θ ← θ − lr·v` for every parameter with a gradient.
/// Parameters without a gradient are left untouched.
pub fn sgd_update(
    params: &mut ParamSet,
    grads: &ParamGrads,
    state: &mut OptimizerState,
    lr: f64,
    momentum: f64,
) -> Result<()> {
    check_hyper(lr, momentum)?;
    for (name, g) in grads {
        let p = params.get(name)?;
        if p.shape() != g.shape() {
            return Err(DivaError::ShapeMismatch {
                left: p.shape().to_vec(),
                right: g.shape().to_vec(),
                context: "parameter vs gradient",
            });
        }
    }
    for (name, g) in grads {
        let p = params.get(name)?;
        let v = state
            .velocity
            .entry(name.clone())
            .or_insert_with(|| vec![0.0; g.len()]);
        let mut data = p.to_vec();
        for ((theta, vel), &gi) in data.iter_mut().zip(v.iter_mut()).zip(g.data()) {
            *vel = momentum * *vel + gi;
            *theta -= lr * *vel;
        }
        let updated = Tensor::new(p.shape(), data)?;
        params.insert(name.clone(), updated);
    }
    Ok(())
}

/// The two networks plus the fixed pieces shared by both phases.
#[derive(Clone, Debug)]
pub struct Models {
    pub encoder: Encoder,
    pub denoiser: Denoiser,
    pub schedule: NoiseSchedule,
    pub sentinels: Sentinels,
}

impl Models {
    pub fn new(encoder: Encoder, denoiser: Denoiser, schedule: NoiseSchedule) -> Result<Self> {
        let (e, d) = (encoder.config(), denoiser.config());
        if d.cond_dim != e.embed_dim {
            return Err(DivaError::Config(format!(
                "denoiser cond_dim {} must equal encoder embed_dim {}",
                d.cond_dim, e.embed_dim
            )));
        }
        if d.image_size != e.image_size {
            return Err(DivaError::Config(format!(
                "denoiser image_size {} must equal encoder image_size {}",
                d.image_size, e.image_size
            )));
        }
        let sentinels = Sentinels::new(e.embed_dim);
        Ok(Self {
            encoder,
            denoiser,
            schedule,
            sentinels,
        })
    }

    /// Initial encoder parameters for `seed`.
    pub fn init_encoder(&self, seed: u64) -> ParamSet {
        self.encoder
            .init_params(&mut RngStream::new(seed, 0).derive_path(&[TAG_INIT, 0]))
    }

    /// Initial denoiser parameters for `seed`.
    pub fn init_denoiser(&self, seed: u64) -> ParamSet {
        self.denoiser
            .init_params(&mut RngStream::new(seed, 0).derive_path(&[TAG_INIT, 1]))
    }
}

/// One image in a batch, identified by its dataset index.
#[derive(Clone, Copy, Debug)]
pub struct Sample<'a> {
    pub id: usize,
    pub image: &'a ImageTensor,
    /// Precomputed encoder tokens, valid only while the encoder is frozen.
    pub tokens: Option<&'a Tensor>,
}

/// Per-sample draws, recorded for accounting and oracle checks.
#[derive(Clone, Debug, PartialEq)]
pub struct StateDraw {
    pub timestep: usize,
    pub noise: Tensor,
}

#[derive(Clone, Debug)]
pub struct SampleOutput {
    pub id: usize,
    pub loss: f64,
    pub grads: ParamGrads,
    pub draws: Vec<StateDraw>,
}

#[derive(Clone, Debug)]
pub struct StepOutput {
    pub loss: f64,
    /// Mean gradient over the batch, trainable parameters only.
    pub grads: ParamGrads,
    /// Number of `(timestep, noise)` pairs consumed.
    pub states_drawn: usize,
}

/// Random stream for one sample of one step.
pub fn sample_stream(seed: u64, phase: Phase, step: usize, sample_id: usize) -> RngStream {
    let phase_tag = match phase {
        Phase::A => 0,
        Phase::B => 1,
    };
    RngStream::new(seed, 0).derive_path(&[TAG_STEP, phase_tag, step as u64, sample_id as u64])
}

/// Loss and trainable-parameter gradients for a single image: encode,
/// build the condition, draw `states` timestep/noise pairs, and average
/// their noise-prediction errors.
#[allow(clippy::too_many_arguments)]
pub fn sample_loss(
    models: &Models,
    sample: Sample<'_>,
    encoder_params: &ParamSet,
    denoiser_params: &ParamSet,
    strategy: RecapStrategy,
    states: usize,
    phase: Phase,
    rng: &RngStream,
    want_grads: bool,
) -> Result<SampleOutput> {
    let mut tape = Tape::new();
    let train_enc = want_grads && phase == Phase::B;
    let train_den = want_grads && phase == Phase::A;
    let den_bound = denoiser_params.bind(&mut tape, train_den);
    let (tokens, enc_bound) = match sample.tokens {
        Some(t) if !train_enc => (tape.constant(t.clone()), None),
        _ => {
            let b = encoder_params.bind(&mut tape, train_enc);
            (
                models.encoder.forward(&mut tape, sample.image, &b)?,
                Some(b),
            )
        }
    };
    let num_patches = models.encoder.config().num_patches();
    let plan = strategy.plan(num_patches, &mut rng.derive(TAG_RECAP))?;
    let cond = condition_on_tape(&mut tape, tokens, &plan, &models.sentinels)?;

    let mut state_rng = rng.derive(TAG_STATES);
    let steps = models.schedule.steps();
    let shape = sample.image.tensor().shape().to_vec();
    let mut total = None;
    let mut draws = Vec::with_capacity(states);
    for _ in 0..states {
        let t = state_rng.int_inclusive(1, steps);
        let eps = sample_gaussian(&shape, &mut state_rng);
        let x_t = models
            .schedule
            .forward_diffuse(sample.image.tensor(), t, &eps)?;
        let xp = models.denoiser.patches_constant(&mut tape, &x_t)?;
        let pred = models
            .denoiser
            .forward_patches(&mut tape, xp, t, cond, &den_bound)?;
        let target = models.denoiser.patches_constant(&mut tape, &eps)?;
        let l = tape.mse(pred, target)?;
        total = Some(match total {
            None => l,
            Some(acc) => tape.add(acc, l)?,
        });
        draws.push(StateDraw {
            timestep: t,
            noise: eps,
        });
    }
    let total = total.ok_or_else(|| DivaError::Config("states_per_image must be >= 1".into()))?;
    let loss = tape.scale(total, 1.0 / states as f64)?;
    let value = tape.value(loss).item();
    let grads = if want_grads {
        let g = tape.backward(loss)?;
        match phase {
            Phase::A => collect_grads(&g, &den_bound),
            Phase::B => collect_grads(&g, enc_bound.as_ref().expect("encoder bound in phase B")),
        }
    } else {
        ParamGrads::new()
    };
    Ok(SampleOutput {
        id: sample.id,
        loss: value,
        grads,
        draws,
    })
}

/// Batch loss and mean gradient on the phase's trainable parameters.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    models: &Models,
    batch: &[Sample<'_>],
    encoder_params: &ParamSet,
    denoiser_params: &ParamSet,
    cfg: &TrainConfig,
    step: usize,
) -> Result<StepOutput> {
    if batch.is_empty() {
        return Err(DivaError::Train("empty batch".into()));
    }
    let mut outputs = batch
        .iter()
        .map(|&s| {
            let rng = sample_stream(cfg.seed, cfg.phase, step, s.id);
            sample_loss(
                models,
                s,
                encoder_params,
                denoiser_params,
                cfg.strategy,
                cfg.states_per_image,
                cfg.phase,
                &rng,
                true,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    outputs.sort_by_key(|o| o.id);
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut sums: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    let mut shapes: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    let mut states_drawn = 0;
    for out in &outputs {
        loss += out.loss;
        states_drawn += out.draws.len();
        for (name, g) in &out.grads {
            let acc = sums.entry(name.clone()).or_insert_with(|| {
                shapes.insert(name.clone(), g.shape().to_vec());
                vec![0.0; g.len()]
            });
            for (a, v) in acc.iter_mut().zip(g.data()) {
                *a += v;
            }
        }
    }
    let grads = sums
        .into_iter()
        .map(|(name, v)| {
            let t = Tensor::new(&shapes[&name], v.into_iter().map(|x| x * scale).collect())?;
            Ok((name, t))
        })
        .collect::<Result<ParamGrads>>()?;
    Ok(StepOutput {
        loss: loss * scale,
        grads,
        states_drawn,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub step: usize,
    pub phase: Phase,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub encoder: ParamSet,
    pub denoiser: ParamSet,
    pub metrics: Vec<MetricRow>,
}

/// Dataset indices for `step`, drawn from a fresh seeded permutation per
/// epoch.
pub struct BatchOrder {
    seed: u64,
    len: usize,
    batch: usize,
    perms: BTreeMap<usize, Vec<usize>>,
}

impl BatchOrder {
    pub fn new(seed: u64, len: usize, batch: usize) -> Self {
        Self {
            seed,
            len,
            batch,
            perms: BTreeMap::new(),
        }
    }

    pub fn batch(&mut self, step: usize) -> Vec<usize> {
        (0..self.batch)
            .map(|j| {
                let pos = step * self.batch + j;
                let epoch = pos / self.len;
                let seed = self.seed;
                let len = self.len;
                let perm = self.perms.entry(epoch).or_insert_with(|| {
                    let mut p: Vec<usize> = (0..len).collect();
                    RngStream::new(seed, 0)
                        .derive_path(&[TAG_SHUFFLE, epoch as u64])
                        .shuffle(&mut p);
                    p
                });
                perm[pos % len]
            })
            .collect()
    }
}

/// Runs `cfg.steps` optimization steps of the configured phase.
///
/// Phase A trains `denoiser` (initialized from the seed when `None`) and
/// leaves `encoder` untouched; phase B requires a pretrained `denoiser`
/// and trains `encoder` only. `on_step` sees every metrics row as it is
/// produced.
pub fn run_training(
    models: &Models,
    cfg: &TrainConfig,
    data: &[ImageTensor],
    encoder: ParamSet,
    denoiser: Option<ParamSet>,
    mut on_step: impl FnMut(&MetricRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(DivaError::Train("training set is empty".into()));
    }
    let mut denoiser = match (cfg.phase, denoiser) {
        (_, Some(d)) => d,
        (Phase::A, None) => models.init_denoiser(cfg.seed),
        (Phase::B, None) => {
            return Err(DivaError::Train(
                "phase B requires a pretrained denoiser checkpoint".into(),
            ))
        }
    };
    let mut encoder = encoder;
    // The encoder is frozen in phase A, so its tokens can be computed once.
    let cached: Option<Vec<Tensor>> = match cfg.phase {
        Phase::A if cfg.steps > 0 => Some(
            data.iter()
                .map(|img| Ok(models.encoder.encode(img, &encoder)?.tokens().clone()))
                .collect::<Result<_>>()?,
        ),
        _ => None,
    };
    let mut order = BatchOrder::new(cfg.seed, data.len(), cfg.batch_size);
    let mut state = OptimizerState::default();
    let mut metrics = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let ids = order.batch(step);
        let batch: Vec<Sample<'_>> = ids
            .iter()
            .map(|&id| Sample {
                id,
                image: &data[id],
                tokens: cached.as_ref().map(|c| &c[id]),
            })
            .collect();
        let out = train_step(models, &batch, &encoder, &denoiser, cfg, step)?;
        if !out.loss.is_finite() {
            return Err(DivaError::Train(format!(
                "non-finite loss at step {}",
                step + 1
            )));
        }
        let target = match cfg.phase {
            Phase::A => &mut denoiser,
            Phase::B => &mut encoder,
        };
        sgd_update(
            target,
            &out.grads,
            &mut state,
            cfg.learning_rate,
            cfg.momentum,
        )?;
        let row = MetricRow {
            step: step + 1,
            phase: cfg.phase,
            loss: out.loss,
            lr: cfg.learning_rate,
        };
        on_step(&row);
        metrics.push(row);
    }
    Ok(TrainOutcome {
        encoder,
        denoiser,
        metrics,
    })
}

/// Mean of `loss` over the metrics rows at indices `range`.
pub fn mean_loss(metrics: &[MetricRow], range: std::ops::Range<usize>) -> f64 {
    let rows = &metrics[range];
    rows.iter().map(|r| r.loss).sum::<f64>() / rows.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p(v: f64) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.insert("w", Tensor::scalar(v));
        ps
    }

    fn g(v: f64) -> ParamGrads {
        let mut gs = ParamGrads::new();
        gs.insert("w".into(), Tensor::scalar(v));
        gs
    }

    #[test]
    fn sgd_hand_iteration() {
        let mut params = p(1.0);
        let mut st = OptimizerState::default();
        sgd_update(&mut params, &g(2.0), &mut st, 0.1, 0.9).unwrap();
        assert!((st.velocity("w").unwrap()[0] - 2.0).abs() < 1e-15);
        assert!((params.get("w").unwrap().item() - 0.8).abs() < 1e-15);
        sgd_update(&mut params, &g(2.0), &mut st, 0.1, 0.9).unwrap();
        assert!((st.velocity("w").unwrap()[0] - 3.8).abs() < 1e-15);
        assert!((params.get("w").unwrap().item() - 0.42).abs() < 1e-15);
    }

    #[test]
    fn sgd_zero_gradient_and_plain_descent() {
        let mut params = p(1.5);
        let mut st = OptimizerState::default();
        sgd_update(&mut params, &g(0.0), &mut st, 0.1, 0.9).unwrap();
        assert_eq!(params.get("w").unwrap().item(), 1.5);
        let mut params = p(1.0);
        let mut st = OptimizerState::default();
        for _ in 0..3 {
            let before = params.get("w").unwrap().item();
            sgd_update(&mut params, &g(0.5), &mut st, 0.2, 0.0).unwrap();
            assert_eq!(params.get("w").unwrap().item(), before - 0.2 * 0.5);
        }
    }

    #[test]
    fn sgd_rejects_mismatch_and_bad_hyperparameters() {
        let mut params = p(1.0);
        let mut st = OptimizerState::default();
        let mut bad = ParamGrads::new();
        bad.insert("w".into(), Tensor::zeros(&[2]));
        assert!(sgd_update(&mut params, &bad, &mut st, 0.1, 0.9).is_err());
        assert!(sgd_update(&mut params, &g(1.0), &mut st, 0.0, 0.9).is_err());
        assert!(sgd_update(&mut params, &g(1.0), &mut st, 0.1, 1.0).is_err());
        assert!(st.is_empty());
    }

    #[test]
    fn batch_order_covers_each_epoch_once() {
        let mut order = BatchOrder::new(3, 10, 4);
        let mut seen: Vec<usize> = (0..5).flat_map(|s| order.batch(s)).collect();
        assert_eq!(seen.len(), 20);
        let mut first: Vec<usize> = seen.drain(..10).collect();
        first.sort();
        assert_eq!(first, (0..10).collect::<Vec<_>>());
        let mut again = BatchOrder::new(3, 10, 4);
        assert_eq!(again.batch(2), order.batch(2));
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::phase_b(1);
        assert!(c.validate().is_ok());
        c.states_per_image = 0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::phase_b(1);
        c.momentum = 1.0;
        assert!(c.validate().is_err());
        assert_eq!("B".parse::<Phase>().unwrap(), Phase::B);
        assert!("C".parse::<Phase>().is_err());
    }
}
