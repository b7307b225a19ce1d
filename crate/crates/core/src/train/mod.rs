//! Training pipeline: deterministic shuffled epochs, permutation-averaged
//! cross-entropy over per-sample graphs, Adam with a one-cycle schedule,
//! line-oriented metrics, and resumable checkpoints.

pub mod adam;
pub mod checkpoint;
pub mod config;
pub mod eval;
pub mod schedule;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use checkpoint::Checkpoint;
pub use config::TrainConfig;
pub use eval::{levenshtein, run_eval, EvalReport};
pub use schedule::one_cycle_lr;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::decoder::{sample_permutations, Charset};
use crate::event::SamplePair;
use crate::model::Model;
use crate::nn::{GradStore, Graph, ParamSet};
use crate::rng::derive_seed;
use crate::tensor::TensorError;

/// Samples processed sequentially per parallel work unit; gradients are
/// merged across units in index order, so the result is bit-identical for
/// any worker count.
const GRAD_CHUNK: usize = 4;

/// Seed-stream tags for the independent random decisions of a run.
const STREAM_INIT: u64 = 0;
const STREAM_EPOCH: u64 = 1_000_000;
const STREAM_PERMS: u64 = 2_000_000;

#[derive(Debug)]
pub struct TrainOutcome {
    pub final_loss: f64,
    pub steps: u64,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub wall_secs: f64,
}

/// Builds the model and its parameters exactly as a training run would
/// (deterministic in `cfg.seed`).
pub fn build_model(cfg: &TrainConfig) -> Result<(ParamSet, Model), TensorError> {
    cfg.validate()?;
    let charset = Charset::new(&cfg.charset)?;
    let mut params = ParamSet::new();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_INIT));
    let model = Model::init(&mut params, cfg.model.clone(), charset, &mut rng)?;
    Ok((params, model))
}

/// Mean loss and mean parameter gradients over one batch. Work is fanned
/// out in fixed chunks and merged in order (deterministic).
pub fn batch_gradients(
    model: &Model,
    params: &ParamSet,
    samples: &[SamplePair],
    batch: &[usize],
    perms: &[Vec<usize>],
) -> Result<(GradStore, f64), TensorError> {
    let partials: Vec<(GradStore, f64)> = batch
        .par_chunks(GRAD_CHUNK)
        .map(|chunk| -> Result<(GradStore, f64), TensorError> {
            let mut acc = GradStore::zeros_like(params);
            let mut loss_sum = 0.0;
            for &idx in chunk {
                let s = &samples[idx];
                let mut g = Graph::new(params);
                let loss = model.sample_loss(&mut g, &s.rgb, &s.event_gray, &s.label, perms)?;
                loss_sum += g.tape.value(loss).data()[0];
                g.tape.backward(loss)?;
                g.collect_grads(&mut acc);
            }
            Ok((acc, loss_sum))
        })
        .collect::<Result<_, _>>()?;

    let mut grads = GradStore::zeros_like(params);
    let mut loss_sum = 0.0;
    for (partial, partial_loss) in &partials {
        grads.add(partial);
        loss_sum += partial_loss;
    }
    let inv = 1.0 / batch.len() as f64;
    grads.scale(inv);
    Ok((grads, loss_sum * inv))
}

fn configs_compatible(stored: &TrainConfig, current: &TrainConfig) -> bool {
    // a resumed run may extend the horizon or change checkpoint cadence;
    // everything else must match or the restored weights are meaningless
    let mut stored = stored.clone();
    stored.epochs = current.epochs;
    stored.checkpoint_every = current.checkpoint_every;
    stored == *current
}

/// Trains on `samples`, writing `model.ckpt` and `metrics.log` into
/// `out_dir`. `resume` continues a checkpoint of the same run;
/// `stop_after` ends the run early at that global step (used to exercise
/// interruption+resume).
pub fn run_training(
    samples: &[SamplePair],
    cfg: &TrainConfig,
    out_dir: &Path,
    resume: Option<&Path>,
    stop_after: Option<u64>,
) -> Result<TrainOutcome, TensorError> {
    let start = Instant::now();
    cfg.validate()?;
    if samples.is_empty() {
        return Err(TensorError::Config("training set is empty".into()));
    }
    let (mut params, model) = build_model(cfg)?;
    for s in samples {
        model.charset.encode_label(&s.label, cfg.model.dec.t_max).map_err(|e| {
            TensorError::Config(format!("sample `{}`: {e}", s.id))
        })?;
    }

    let mut adam = AdamState::new(&params);
    let mut global_step: u64 = 0;
    if let Some(ck_path) = resume {
        let ck = Checkpoint::load(ck_path)?;
        let stored = TrainConfig::from_text(&ck.config_text)?;
        if !configs_compatible(&stored, cfg) {
            return Err(TensorError::Config(format!(
                "checkpoint {} was trained with a different config",
                ck_path.display()
            )));
        }
        ck.apply_params(&mut params)?;
        adam = ck.adam_state(&params)?;
        global_step = ck.global_step;
    }

    std::fs::create_dir_all(out_dir).map_err(|e| {
        TensorError::Config(format!("cannot create {}: {e}", out_dir.display()))
    })?;
    let ckpt_path = out_dir.join("model.ckpt");
    let metrics_path = out_dir.join("metrics.log");
    let mut metrics = std::fs::OpenOptions::new()
        .create(true)
        .append(resume.is_some())
        .truncate(resume.is_none())
        .write(true)
        .open(&metrics_path)
        .map_err(|e| {
            TensorError::Config(format!("cannot open {}: {e}", metrics_path.display()))
        })?;

    let n = samples.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size) as u64;
    let total_steps = steps_per_epoch * cfg.epochs as u64;
    let save = |params: &ParamSet, adam: &AdamState, step: u64| -> Result<(), TensorError> {
        Checkpoint::capture(params, adam, &cfg.to_text(), cfg.seed, step).save(&ckpt_path)
    };

    let mut last_loss = f64::NAN;
    'epochs: for epoch in 0..cfg.epochs as u64 {
        if (epoch + 1) * steps_per_epoch <= global_step {
            continue; // fully covered by the resumed checkpoint
        }
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, STREAM_EPOCH + epoch));
        order.shuffle(&mut rng);

        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            if epoch * steps_per_epoch + (batch_idx as u64) < global_step {
                continue; // resumed mid-epoch
            }
            let perms = sample_permutations(
                cfg.model.dec.t_max,
                cfg.k_perms,
                derive_seed(cfg.seed, STREAM_PERMS + global_step),
            )?;
            let (grads, loss) = batch_gradients(&model, &params, samples, batch, &perms)?;
            if !loss.is_finite() {
                metrics.flush().ok();
                return Err(TensorError::Config(format!(
                    "training diverged (loss {loss}) at step {global_step}; last checkpoint kept at {}",
                    ckpt_path.display()
                )));
            }
            let lr = one_cycle_lr(global_step, total_steps, cfg.lr_peak, cfg.warmup_frac, cfg.floor_frac);
            adam_step(&mut params, &grads, &mut adam, &cfg.adam, lr)?;
            global_step += 1;
            last_loss = loss;
            writeln!(metrics, "step={global_step} lr={lr:.10e} loss={loss:.10e}").map_err(|e| {
                TensorError::Config(format!("cannot write metrics: {e}"))
            })?;
            if cfg.checkpoint_every > 0 && global_step % cfg.checkpoint_every as u64 == 0 {
                save(&params, &adam, global_step)?;
            }
            if stop_after == Some(global_step) {
                break 'epochs;
            }
        }
    }
    metrics.flush().map_err(|e| TensorError::Config(format!("cannot flush metrics: {e}")))?;
    save(&params, &adam, global_step)?;
    Ok(TrainOutcome {
        final_loss: last_loss,
        steps: global_step,
        checkpoint: ckpt_path,
        metrics: metrics_path,
        wall_secs: start.elapsed().as_secs_f64(),
    })
}
