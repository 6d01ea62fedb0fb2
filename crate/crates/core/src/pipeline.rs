//! End-to-end commands: corpus generation, pretraining, tuning,
//! evaluation, and the recap-density sweep. Each command writes its
//! artifacts plus an effective-config echo into the output directory.

use std::fs;
use std::path::{Path, PathBuf};

use crate::condition::RecapStrategy;
use crate::config::RunConfig;
use crate::encoder::ImageTensor;
use crate::error::{DivaError, Result};
use crate::eval;
use crate::io::{self, Corpus};
use crate::params::ParamSet;
use crate::rng::RngStream;
use crate::synth::VisualPattern;
use crate::trainer::{run_training, sample_loss, MetricRow, Models, Phase, Sample, TrainConfig};

pub const ENCODER_INIT: &str = "encoder_init.ckpt";
pub const DENOISER: &str = "denoiser.ckpt";
pub const ENCODER_TUNED: &str = "encoder_tuned.ckpt";
pub const METRICS_PRETRAIN: &str = "metrics_pretrain.csv";
pub const METRICS_TUNE: &str = "metrics_tune.csv";
pub const EVAL_CSV: &str = "eval.csv";
pub const ABLATION_CSV: &str = "ablation.csv";

/// Held-out images and draws used to score a denoiser; chosen apart from
/// every training stream.
const HELD_OUT_STEP: usize = usize::MAX;
const HELD_OUT_IMAGES: usize = 64;

pub fn write_config_echo(dir: &Path, command: &str, cfg: &RunConfig) -> Result<PathBuf> {
    let path = dir.join(format!("{command}_config.toml"));
    io::write_atomic(&path, cfg.to_toml().as_bytes())?;
    Ok(path)
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Result<usize> {
    let mut spec = cfg.dataset.clone();
    spec.dir = None;
    let n = io::export_corpus(out, &spec)?;
    let mut echo = cfg.clone();
    echo.dataset.dir = Some(out.to_path_buf());
    write_config_echo(out, "gen-data", &echo)?;
    Ok(n)
}

fn load_corpus(cfg: &RunConfig) -> Result<Corpus> {
    Corpus::load(&cfg.dataset, cfg.encoder.image_size)
}

#[derive(Clone, Debug)]
pub struct PretrainOutput {
    pub encoder: ParamSet,
    pub denoiser: ParamSet,
    pub metrics: Vec<MetricRow>,
}

/// Phase A from a seeded encoder snapshot. Saves the snapshot, the
/// trained denoiser, and the metrics.
pub fn pretrain(cfg: &RunConfig, mut on_step: impl FnMut(&MetricRow)) -> Result<PretrainOutput> {
    let models = cfg.models()?;
    let corpus = load_corpus(cfg)?;
    let out = &cfg.output.dir;
    write_config_echo(out, "pretrain", cfg)?;
    let encoder = models.init_encoder(cfg.seed);
    io::write_checkpoint(&out.join(ENCODER_INIT), &encoder)?;
    let res = run_training(
        &models,
        &cfg.train_config(Phase::A),
        &corpus.train,
        encoder,
        None,
        &mut on_step,
    )?;
    io::write_checkpoint(&out.join(DENOISER), &res.denoiser)?;
    io::write_metrics(&out.join(METRICS_PRETRAIN), &res.metrics)?;
    Ok(PretrainOutput {
        encoder: res.encoder,
        denoiser: res.denoiser,
        metrics: res.metrics,
    })
}

#[derive(Clone, Debug)]
pub struct TuneOutput {
    pub encoder: ParamSet,
    pub metrics: Vec<MetricRow>,
}

/// Checks that `params` holds exactly the tensors `reference` does, with
/// matching shapes.
fn check_params(what: &str, params: &ParamSet, reference: &ParamSet) -> Result<()> {
    for (name, t) in reference.iter() {
        let got = params
            .get(name)
            .map_err(|_| DivaError::MissingParam(format!("{what} checkpoint lacks `{name}`")))?;
        if got.shape() != t.shape() {
            return Err(DivaError::ShapeMismatch {
                left: got.shape().to_vec(),
                right: t.shape().to_vec(),
                context: "checkpoint tensor vs configured model",
            });
        }
    }
    if params.len() != reference.len() {
        return Err(DivaError::MalformedCheckpoint(format!(
            "{what} checkpoint has {} tensors, configured model has {}",
            params.len(),
            reference.len()
        )));
    }
    Ok(())
}

/// Phase B against the frozen denoiser at `denoiser_path`. The encoder
/// starts from `encoder_path` when given, else from the seeded snapshot.
pub fn tune(
    cfg: &RunConfig,
    denoiser_path: &Path,
    encoder_path: Option<&Path>,
    mut on_step: impl FnMut(&MetricRow),
) -> Result<TuneOutput> {
    let models = cfg.models()?;
    let denoiser = io::read_checkpoint(denoiser_path)?;
    check_params("denoiser", &denoiser, &models.init_denoiser(0))?;
    let encoder = match encoder_path {
        Some(p) => {
            let e = io::read_checkpoint(p)?;
            check_params("encoder", &e, &models.init_encoder(0))?;
            e
        }
        None => models.init_encoder(cfg.seed),
    };
    let corpus = load_corpus(cfg)?;
    let out = &cfg.output.dir;
    write_config_echo(out, "tune", cfg)?;
    let res = run_training(
        &models,
        &cfg.train_config(Phase::B),
        &corpus.train,
        encoder,
        Some(denoiser),
        &mut on_step,
    )?;
    io::write_checkpoint(&out.join(ENCODER_TUNED), &res.encoder)?;
    io::write_metrics(&out.join(METRICS_TUNE), &res.metrics)?;
    Ok(TuneOutput {
        encoder: res.encoder,
        metrics: res.metrics,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSummary {
    pub label: String,
    pub pair_separation: f64,
    /// Separation restricted to each pattern, in [`VisualPattern::ALL`] order.
    pub per_pattern: Vec<f64>,
    pub knn_retention: f64,
    pub consistency: f64,
}

impl EvalSummary {
    pub fn header() -> String {
        let mut h = String::from("checkpoint,pair_separation");
        for p in VisualPattern::ALL {
            h.push_str(&format!(",sep_{p}"));
        }
        h.push_str(",knn_retention,consistency");
        h
    }

    pub fn row(&self) -> String {
        let mut r = format!("{},{:.6}", self.label, self.pair_separation);
        for v in &self.per_pattern {
            r.push_str(&format!(",{v:.6}"));
        }
        r.push_str(&format!(
            ",{:.3},{:.6}",
            self.knn_retention, self.consistency
        ));
        r
    }
}

/// Runs the three embedding probes on an already loaded corpus.
pub fn evaluate_params(
    cfg: &RunConfig,
    models: &Models,
    corpus: &Corpus,
    params: &ParamSet,
    label: &str,
) -> Result<EvalSummary> {
    let enc = &models.encoder;
    let mut dists = Vec::with_capacity(corpus.pairs.len());
    let mut per_pattern = vec![(0.0, 0usize); VisualPattern::ALL.len()];
    for (pattern, _, a, b) in &corpus.pairs {
        let d = 1.0 - eval::cosine(&enc.embed(a, params)?, &enc.embed(b, params)?);
        let slot = VisualPattern::ALL
            .iter()
            .position(|p| p == pattern)
            .expect("pattern listed in ALL");
        per_pattern[slot].0 += d;
        per_pattern[slot].1 += 1;
        dists.push(d);
    }
    if dists.is_empty() {
        return Err(DivaError::Eval("no contrastive pairs".into()));
    }
    let pair_separation = dists.iter().sum::<f64>() / dists.len() as f64;
    let knn_retention = eval::knn_retention(enc, params, &corpus.labeled, cfg.eval.knn_k)?;
    let n = cfg.eval.consistency_images.min(corpus.labeled.len());
    let mut rng = RngStream::new(cfg.seed, 0).derive(0xc0);
    let consistency = eval::augmentation_consistency(
        enc,
        params,
        &corpus.labeled.images[..n],
        cfg.eval.jitter,
        &mut rng,
    )?;
    Ok(EvalSummary {
        label: label.to_string(),
        pair_separation,
        per_pattern: per_pattern
            .into_iter()
            .map(|(s, c)| if c == 0 { f64::NAN } else { s / c as f64 })
            .collect(),
        knn_retention,
        consistency,
    })
}

/// Evaluates the encoder checkpoint at `path` and appends the summary to
/// the output directory's eval table.
pub fn evaluate(cfg: &RunConfig, path: &Path) -> Result<EvalSummary> {
    let models = cfg.models()?;
    let params = io::read_checkpoint(path)?;
    check_params("encoder", &params, &models.init_encoder(0))?;
    let corpus = load_corpus(cfg)?;
    let summary = evaluate_params(cfg, &models, &corpus, &params, &path.display().to_string())?;
    let out = &cfg.output.dir;
    write_config_echo(out, "eval", cfg)?;
    let table = out.join(EVAL_CSV);
    let mut text = match fs::read_to_string(&table) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            format!("{}\n", EvalSummary::header())
        }
        Err(e) => return Err(e.into()),
    };
    text.push_str(&summary.row());
    text.push('\n');
    io::write_atomic(&table, text.as_bytes())?;
    Ok(summary)
}

/// Mean denoising loss over fixed held-out images and draws. Every
/// strategy and checkpoint sees the same timesteps and noise.
pub fn held_out_loss(
    models: &Models,
    encoder: &ParamSet,
    denoiser: &ParamSet,
    strategy: RecapStrategy,
    images: &[ImageTensor],
    seed: u64,
    states: usize,
) -> Result<f64> {
    let mut total = 0.0;
    for (id, image) in images.iter().enumerate() {
        let rng = crate::trainer::sample_stream(seed, Phase::A, HELD_OUT_STEP, id);
        let out = sample_loss(
            models,
            Sample {
                id,
                image,
                tokens: None,
            },
            encoder,
            denoiser,
            strategy,
            states,
            Phase::A,
            &rng,
            false,
        )?;
        total += out.loss;
    }
    Ok(total / images.len() as f64)
}

/// Images disjoint from the training corpus for held-out scoring.
pub fn held_out_images(cfg: &RunConfig) -> Vec<ImageTensor> {
    let base = cfg.dataset.train_seed + cfg.dataset.train_images as u64 + 1_000_000;
    crate::synth::train_corpus(HELD_OUT_IMAGES, base)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub strategy: RecapStrategy,
    pub expected_tokens: f64,
    /// Mean training loss over the last tenth of phase A.
    pub final_train_loss: f64,
    pub held_out_loss: f64,
}

pub fn ablation_header() -> &'static str {
    "strategy,expected_patch_tokens,final_train_loss,held_out_loss"
}

impl AblationRow {
    pub fn row(&self) -> String {
        format!(
            "{},{:.2},{:.6},{:.6}",
            self.strategy, self.expected_tokens, self.final_train_loss, self.held_out_loss
        )
    }
}

/// Parses a density list such as `class,0.15,0.3,0.5,all`.
pub fn parse_densities(list: &str) -> Result<Vec<RecapStrategy>> {
    list.split(',')
        .filter(|s| !s.trim().is_empty())
        .map(str::parse)
        .collect()
}

/// Runs phase A once per strategy with identical budgets and seeds.
pub fn ablate_strategies(
    cfg: &RunConfig,
    strategies: &[RecapStrategy],
    train: &[ImageTensor],
    mut on_step: impl FnMut(RecapStrategy, &MetricRow),
) -> Result<Vec<AblationRow>> {
    if strategies.is_empty() {
        return Err(DivaError::InvalidArgument(
            "no recap strategies given".into(),
        ));
    }
    let models = cfg.models()?;
    let encoder = models.init_encoder(cfg.seed);
    let held_out = held_out_images(cfg);
    let num_patches = cfg.encoder.num_patches();
    strategies
        .iter()
        .map(|&strategy| {
            let tc = TrainConfig {
                strategy,
                ..cfg.train_config(Phase::A)
            };
            let res = run_training(&models, &tc, train, encoder.clone(), None, |r| {
                on_step(strategy, r)
            })?;
            let tail = (res.metrics.len() / 10).max(1).min(res.metrics.len());
            let final_train_loss = if res.metrics.is_empty() {
                f64::NAN
            } else {
                crate::trainer::mean_loss(&res.metrics, res.metrics.len() - tail..res.metrics.len())
            };
            let held_out_loss = held_out_loss(
                &models,
                &encoder,
                &res.denoiser,
                strategy,
                &held_out,
                cfg.seed,
                tc.states_per_image,
            )?;
            Ok(AblationRow {
                strategy,
                expected_tokens: strategy.expected_density(num_patches),
                final_train_loss,
                held_out_loss,
            })
        })
        .collect()
}

/// The sweep behind the `ablate` command; writes the comparison table.
pub fn ablate(
    cfg: &RunConfig,
    strategies: &[RecapStrategy],
    on_step: impl FnMut(RecapStrategy, &MetricRow),
) -> Result<Vec<AblationRow>> {
    let corpus = load_corpus(cfg)?;
    let rows = ablate_strategies(cfg, strategies, &corpus.train, on_step)?;
    let out = &cfg.output.dir;
    write_config_echo(out, "ablate", cfg)?;
    let mut text = format!("{}\n", ablation_header());
    for r in &rows {
        text.push_str(&r.row());
        text.push('\n');
    }
    io::write_atomic(&out.join(ABLATION_CSV), text.as_bytes())?;
    Ok(rows)
}
