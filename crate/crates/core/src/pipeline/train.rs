//! The training loop: AdamW over shuffled non-overlapping clips, a
//! validation pass per epoch, and retention of the checkpoint with the
//! lowest validation loss. Fully deterministic for a fixed seed, config
//! and manifest.

use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Shape, SparseMatrix, Tape};
use crate::error::{Error, Result};
use crate::model::{save_checkpoint, CheckpointMeta, MeshPhys, ModelHierarchy};
use crate::objective::{composite_loss, LossBreakdown, ObjectiveConfig, SmoothnessTerm};
use crate::stgraph::node_positions;

use super::ingest::{clip_features, ClipRef, Dataset};
use super::optim::{adamw_step, AdamWHyper, AdamWState};
use super::{ingest, TrainConfig};

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub checkpoint: PathBuf,
    /// Clips per split actually used, `(train, val)`.
    pub clip_counts: (usize, usize),
}

/// Builds the pooling hierarchy for this dataset: canonical node
/// positions drive geometric clustering, the first span's adjacency is
/// the base graph.
pub fn dataset_hierarchy(dataset: &Dataset, levels: usize) -> Result<ModelHierarchy> {
    let base = dataset
        .videos
        .iter()
        .flat_map(|v| v.spans.first())
        .next()
        .ok_or_else(|| Error::Data("dataset has no spans".into()))?;
    let positions = node_positions(&dataset.topology, &dataset.region);
    ModelHierarchy::build(&base.graph.adjacency, Some(&positions), levels)
}

fn batch_tensors(
    dataset: &Dataset,
    clips: &[ClipRef],
    window: usize,
) -> Result<(Vec<f32>, Shape, Vec<f32>, Shape)> {
    let nodes = dataset.span(clips[0]).graph.nodes;
    let b = clips.len();
    let mut x = Vec::with_capacity(b * 3 * window * nodes);
    let mut r = Vec::with_capacity(b * window);
    for &clip in clips {
        let g = &dataset.span(clip).graph;
        x.extend(clip_features::<f32>(g, clip.offset, window)?);
        r.extend(
            dataset
                .clip_reference(clip, window)
                .iter()
                .map(|&v| v as f32),
        );
    }
    Ok((
        x,
        Shape::new(b, 3, window, nodes),
        r,
        Shape::new(b, 1, window, 1),
    ))
}

fn nan_diagnostic(step: usize, breakdown: &LossBreakdown) -> Error {
    Error::Numeric(format!(
        "non-finite loss at step {step}: total {}, waveform {}, smoothness {}, \
         snr weights {:?}, degenerate {:?}",
        breakdown.total,
        breakdown.waveform,
        breakdown.smoothness,
        breakdown.snr_weights,
        breakdown.degenerate
    ))
}

struct BatchRun {
    loss: f64,
    breakdown: LossBreakdown,
}

/// Runs one batch. In training mode the gradients are applied and batch
/// normalization running statistics advance.
fn run_batch(
    model: &mut MeshPhys<f32>,
    dataset: &Dataset,
    clips: &[ClipRef],
    window: usize,
    laplacian: &Arc<SparseMatrix<f32>>,
    objective: &ObjectiveConfig,
    optimizer: Option<(&mut AdamWState, &AdamWHyper)>,
) -> Result<BatchRun> {
    let training = optimizer.is_some();
    let (x, sx, r, sr) = batch_tensors(dataset, clips, window)?;
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape)?;
    let xv = tape.constant(sx, x)?;
    let rv = tape.constant(sr, r)?;
    let fwd = model.forward(&mut tape, &binding, xv, training)?;
    let smooth = SmoothnessTerm {
        features: fwd.smooth_tap,
        laplacian: laplacian.clone(),
        fs: dataset.fps,
    };
    let out = composite_loss(
        &mut tape,
        fwd.prediction,
        rv,
        Some(&smooth),
        dataset.fps,
        objective,
    )?;
    let loss = tape.scalar_value(out.total)?;
    let run = BatchRun {
        loss: loss as f64,
        breakdown: out.breakdown,
    };
    if let Some((state, hyper)) = optimizer {
        let grads = tape.backward(out.total)?;
        let grad_list: Vec<Option<Vec<f32>>> = model
            .params
            .tensors()
            .iter()
            .map(|t| {
                if !t.trainable {
                    return Ok(None);
                }
                let var = binding.var(&t.name)?;
                Ok(grads.wrt(var).map(|g| g.to_vec()))
            })
            .collect::<Result<_>>()?;
        for g in grad_list.iter().flatten() {
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(
                    "non-finite gradient; aborting before the parameter update".into(),
                ));
            }
        }
        adamw_step(&mut model.params, &grad_list, state, hyper)?;
        model.apply_bn_updates(&fwd.bn_updates)?;
    }
    Ok(run)
}

/// Trains on an already ingested dataset; `out_checkpoint` receives the
/// weights of the epoch with the lowest validation loss.
pub fn train_model(
    config: &TrainConfig,
    dataset: &Dataset,
    out_checkpoint: &Path,
) -> Result<TrainReport> {
    config.validate()?;
    let region = config.graph.to_region()?;
    if region.tag() != dataset.region.tag() {
        return Err(Error::Config(format!(
            "config region '{}' does not match the ingested dataset '{}'",
            region.tag(),
            dataset.region.tag()
        )));
    }
    let arch = config.model.to_arch()?;
    let window = config.window;

    let train_clips = dataset.clips(window, config.stride, Some("train"));
    if train_clips.is_empty() {
        return Err(Error::Data(format!(
            "no training clips of {window} frames; check split tags and spans"
        )));
    }
    let mut val_clips = dataset.clips(window, config.stride, Some("val"));
    if val_clips.is_empty() {
        log::warn!("no validation videos; selecting checkpoints on the training clips");
        val_clips = train_clips.clone();
    }

    let hierarchy = dataset_hierarchy(dataset, arch.pool_after.len())?;
    let mut model = MeshPhys::<f32>::new(arch, hierarchy, &region.tag(), config.seed)?;
    let tap_level = model.arch.level_of_block(model.arch.block_count() - 1);
    let laplacian = Arc::new(model.laplacian_at(tap_level)?);

    let hyper = AdamWHyper::from_config(config);
    let mut opt = AdamWState::new(&model.params);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);

    let mut report = TrainReport {
        epochs: config.epochs,
        best_epoch: 0,
        best_val_loss: f64::INFINITY,
        train_loss: Vec::with_capacity(config.epochs),
        val_loss: Vec::with_capacity(config.epochs),
        checkpoint: out_checkpoint.to_path_buf(),
        clip_counts: (train_clips.len(), val_clips.len()),
    };
    log::info!(
        "training: {} parameters, {} train / {} val clips, window {window}",
        model.param_count(),
        train_clips.len(),
        val_clips.len()
    );

    let mut step = 0usize;
    for epoch in 0..config.epochs {
        let t0 = Instant::now();
        let mut order = train_clips.clone();
        order.shuffle(&mut rng);

        let mut train_sum = 0.0;
        for batch in order.chunks(config.batch_size) {
            let run = run_batch(
                &mut model,
                dataset,
                batch,
                window,
                &laplacian,
                &config.objective,
                Some((&mut opt, &hyper)),
            )?;
            step += 1;
            if !run.loss.is_finite() {
                return Err(nan_diagnostic(step, &run.breakdown));
            }
            train_sum += run.loss * batch.len() as f64;
        }
        let train_loss = train_sum / order.len() as f64;

        let mut val_sum = 0.0;
        for batch in val_clips.chunks(config.batch_size) {
            let run = run_batch(
                &mut model,
                dataset,
                batch,
                window,
                &laplacian,
                &config.objective,
                None,
            )?;
            if !run.loss.is_finite() {
                return Err(nan_diagnostic(step, &run.breakdown));
            }
            val_sum += run.loss * batch.len() as f64;
        }
        let val_loss = val_sum / val_clips.len() as f64;

        report.train_loss.push(train_loss);
        report.val_loss.push(val_loss);
        log::info!(
            "epoch {epoch}: train {train_loss:.5}, val {val_loss:.5} ({:.1} s)",
            t0.elapsed().as_secs_f64()
        );

        if val_loss < report.best_val_loss {
            report.best_val_loss = val_loss;
            report.best_epoch = epoch;
            let mut meta = CheckpointMeta::default();
            meta.set("epoch", epoch);
            meta.set("val_loss", format!("{val_loss:.9}"));
            meta.set("seed", config.seed);
            meta.set("fps", dataset.fps);
            meta.set("window", window);
            save_checkpoint(out_checkpoint, &model, &meta)?;
        }
    }
    Ok(report)
}

/// Ingests `manifest` (building the graph cache) and trains.
pub fn train(
    config: &TrainConfig,
    manifest: &Path,
    out_checkpoint: &Path,
) -> Result<TrainReport> {
    config.validate()?;
    let region = config.graph.to_region()?;
    let dataset = ingest(manifest, &region, true)?;
    train_model(config, &dataset, out_checkpoint)
}
