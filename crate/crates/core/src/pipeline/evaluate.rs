//! Pulse-rate evaluation: per video, non-overlapping clip predictions are
//! concatenated, band-passed and sent through Welch spectral analysis;
//! the dominant-frequency estimate is compared against the reference
//! waveform pushed through the same protocol.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Shape, Tape};
use crate::dsp::{bandpass_filter, dominant_frequency, pulse_rate_metrics, welch_psd, RateMetrics};
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, CheckpointMeta, MeshPhys};
use crate::stgraph::RegionConfig;

use super::ingest::{clip_features, ingest, ClipRef, Dataset};
use super::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalProtocol {
    /// Clip length in frames.
    pub window: usize,
    /// Clip stride; the default protocol is non-overlapping.
    pub stride: usize,
    pub band_lo_hz: f64,
    pub band_hi_hz: f64,
}

impl EvalProtocol {
    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self {
            window: cfg.window,
            stride: cfg.window,
            band_lo_hz: cfg.objective.band_lo_hz,
            band_hi_hz: cfg.objective.band_hi_hz,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.window == 0 || self.stride == 0 {
            return Err(Error::Config("window and stride must be positive".into()));
        }
        if !(0.0 <= self.band_lo_hz && self.band_lo_hz < self.band_hi_hz) {
            return Err(Error::Config("bad evaluation band".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipRate {
    pub video: String,
    /// First frame of the clip within the video.
    pub start: usize,
    pub est_bpm: f64,
    pub ref_bpm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoRate {
    pub video: String,
    pub clip_count: usize,
    pub est_bpm: f64,
    pub ref_bpm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub videos: Vec<VideoRate>,
    pub clips: Vec<ClipRate>,
    /// Error statistics over per-video rates.
    pub video_metrics: RateMetrics,
    /// Error statistics over per-clip rates.
    pub clip_metrics: RateMetrics,
}

/// Pulse rate (BPM) of one series: band-pass, Welch spectrum with
/// segments of at most 256 samples, parabolic peak refinement.
pub fn clip_pulse_rate(series: &[f64], fs: f64, lo_hz: f64, hi_hz: f64) -> Result<f64> {
    let filtered = bandpass_filter(series, fs, lo_hz, hi_hz)?;
    let (freqs, psd) = welch_psd(&filtered, fs, filtered.len().min(256))?;
    Ok(60.0 * dominant_frequency(&freqs, &psd, lo_hz, hi_hz)?)
}

/// Forward pass over one clip in evaluation mode; returns the predicted
/// waveform.
fn predict_clip(model: &MeshPhys<f32>, dataset: &Dataset, clip: ClipRef, window: usize) -> Result<Vec<f64>> {
    let graph = &dataset.span(clip).graph;
    let x = clip_features::<f32>(graph, clip.offset, window)?;
    let mut tape = Tape::new();
    let binding = model.bind(&mut tape)?;
    let xv = tape.constant(Shape::new(1, 3, window, graph.nodes), x)?;
    let fwd = model.forward(&mut tape, &binding, xv, false)?;
    Ok(tape.value(fwd.prediction).iter().map(|&v| v as f64).collect())
}

fn eval_video(
    model: &MeshPhys<f32>,
    dataset: &Dataset,
    video_idx: usize,
    protocol: &EvalProtocol,
) -> Result<Option<(VideoRate, Vec<ClipRate>)>> {
    let video = &dataset.videos[video_idx];
    let clips: Vec<ClipRef> = dataset
        .clips(protocol.window, protocol.stride, None)
        .into_iter()
        .filter(|c| c.video == video_idx)
        .collect();
    if clips.is_empty() {
        log::warn!(
            "video {}: no span holds {} frames; skipped",
            video.name,
            protocol.window
        );
        return Ok(None);
    }
    let mut est_series = Vec::with_capacity(clips.len() * protocol.window);
    let mut ref_series = Vec::with_capacity(clips.len() * protocol.window);
    let mut rows = Vec::with_capacity(clips.len());
    for &clip in &clips {
        let est = predict_clip(model, dataset, clip, protocol.window)?;
        let reference = dataset.clip_reference(clip, protocol.window);
        rows.push(ClipRate {
            video: video.name.clone(),
            start: dataset.span(clip).start + clip.offset,
            est_bpm: clip_pulse_rate(&est, video.fps, protocol.band_lo_hz, protocol.band_hi_hz)?,
            ref_bpm: clip_pulse_rate(
                reference,
                video.fps,
                protocol.band_lo_hz,
                protocol.band_hi_hz,
            )?,
        });
        est_series.extend(est);
        ref_series.extend_from_slice(reference);
    }
    let row = VideoRate {
        video: video.name.clone(),
        clip_count: clips.len(),
        est_bpm: clip_pulse_rate(
            &est_series,
            video.fps,
            protocol.band_lo_hz,
            protocol.band_hi_hz,
        )?,
        ref_bpm: clip_pulse_rate(
            &ref_series,
            video.fps,
            protocol.band_lo_hz,
            protocol.band_hi_hz,
        )?,
    };
    Ok(Some((row, rows)))
}

/// Evaluates a model over every video of `split` (all videos when
/// `None`). Videos run in parallel; the report order follows the
/// manifest.
pub fn evaluate(
    model: &MeshPhys<f32>,
    dataset: &Dataset,
    split: Option<&str>,
    protocol: &EvalProtocol,
) -> Result<EvalReport> {
    protocol.validate()?;
    if model.input_nodes() != dataset.videos[0].spans[0].graph.nodes {
        return Err(Error::Shape(format!(
            "model expects {} nodes but the dataset graphs have {}",
            model.input_nodes(),
            dataset.videos[0].spans[0].graph.nodes
        )));
    }
    let selected: Vec<usize> = (0..dataset.videos.len())
        .filter(|&i| split.is_none_or(|s| dataset.videos[i].split == s))
        .collect();
    if selected.is_empty() {
        return Err(Error::Data(format!(
            "no videos in split {:?}; present splits: {:?}",
            split,
            dataset.splits()
        )));
    }
    let per_video: Vec<Option<(VideoRate, Vec<ClipRate>)>> = selected
        .par_iter()
        .map(|&i| eval_video(model, dataset, i, protocol))
        .collect::<Result<_>>()?;

    let mut videos = Vec::new();
    let mut clips = Vec::new();
    for entry in per_video.into_iter().flatten() {
        videos.push(entry.0);
        clips.extend(entry.1);
    }
    if videos.is_empty() {
        return Err(Error::Data(format!(
            "no evaluable clips of {} frames in split {split:?}",
            protocol.window
        )));
    }
    let video_metrics = pulse_rate_metrics(
        &videos.iter().map(|v| v.est_bpm).collect::<Vec<_>>(),
        &videos.iter().map(|v| v.ref_bpm).collect::<Vec<_>>(),
    )?;
    let clip_metrics = pulse_rate_metrics(
        &clips.iter().map(|c| c.est_bpm).collect::<Vec<_>>(),
        &clips.iter().map(|c| c.ref_bpm).collect::<Vec<_>>(),
    )?;
    Ok(EvalReport {
        videos,
        clips,
        video_metrics,
        clip_metrics,
    })
}

/// Loads a checkpoint, ingests the manifest with the region the model
/// was trained with, and evaluates. The clip window defaults to the one
/// recorded in the checkpoint.
pub fn evaluate_checkpoint(
    checkpoint: &Path,
    manifest: &Path,
    split: Option<&str>,
    protocol: Option<EvalProtocol>,
) -> Result<(EvalReport, CheckpointMeta)> {
    let (model, meta) = load_checkpoint::<f32>(checkpoint)?;
    let region = RegionConfig::from_tag(&model.region_tag)?;
    let dataset = ingest(manifest, &region, true)?;
    let protocol = match protocol {
        Some(p) => p,
        None => {
            let window = meta
                .get("window")
                .and_then(|w| w.parse::<usize>().ok())
                .ok_or_else(|| {
                    Error::Config(
                        "checkpoint does not record a clip window; pass one explicitly".into(),
                    )
                })?;
            EvalProtocol {
                window,
                stride: window,
                band_lo_hz: 0.5,
                band_hi_hz: 3.0,
            }
        }
    };
    Ok((evaluate(&model, &dataset, split, &protocol)?, meta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::MeshPhys;
    use crate::pipeline::train::dataset_hierarchy;
    use crate::synth::{emit_dataset, FacePulseScenario, MotionProfile, PulseProfile};

    fn scenario(seed: u64, hz: f64) -> FacePulseScenario {
        FacePulseScenario {
            faces: 60,
            image_size: 48,
            fps: 20.0,
            duration_s: 6.4,
            pulse: PulseProfile::Constant { hz },
            harmonic_ratio: 0.3,
            amplitude: 0.05,
            noise_sigma: 0.0,
            drift_amplitude: 0.0,
            drift_period_s: 23.0,
            motion: MotionProfile::none(),
            base_color: [0.55, 0.40, 0.33],
            seed,
        }
    }

    fn tiny_eval_fixture(dir: &Path) -> (Dataset, MeshPhys<f32>) {
        let scenarios = vec![
            ("a".to_string(), scenario(3, 1.2)),
            ("b".to_string(), scenario(4, 1.5)),
        ];
        emit_dataset(dir, &scenarios).unwrap();
        let ds = ingest(&dir.join("manifest.toml"), &RegionConfig::default(), false).unwrap();
        let arch = crate::model::ArchitectureSpec::with_channels(&[4, 6], &[0]);
        let hierarchy = dataset_hierarchy(&ds, 1).unwrap();
        let model = MeshPhys::<f32>::new(arch, hierarchy, &ds.region.tag(), 1).unwrap();
        (ds, model)
    }

    #[test]
    fn evaluation_is_deterministic_and_reference_rates_are_right() {
        let dir = tempfile::tempdir().unwrap();
        let (ds, model) = tiny_eval_fixture(dir.path());
        let protocol = EvalProtocol {
            window: 64,
            stride: 64,
            band_lo_hz: 0.5,
            band_hi_hz: 3.0,
        };
        let r1 = evaluate(&model, &ds, None, &protocol).unwrap();
        let r2 = evaluate(&model, &ds, None, &protocol).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(r1.videos.len(), 2);
        assert_eq!(r1.clips.len(), 4);
        // The reference protocol must recover the driving pulse.
        assert!((r1.videos[0].ref_bpm - 72.0).abs() < 3.0, "{:?}", r1.videos[0]);
        assert!((r1.videos[1].ref_bpm - 90.0).abs() < 3.0, "{:?}", r1.videos[1]);
        for c in &r1.clips {
            assert!(c.est_bpm.is_finite() && c.ref_bpm.is_finite());
        }
    }

    #[test]
    fn reference_against_itself_scores_zero_error() {
        // A rate series compared with itself must give zero MAE; this is
        // the degenerate case of the metrics path.
        let rates = [72.0, 90.0, 66.0];
        let m = pulse_rate_metrics(&rates, &rates).unwrap();
        assert_eq!(m.mae, 0.0);
        assert_eq!(m.rmse, 0.0);

        // And the spectral protocol is symmetric: same series, same rate.
        let fs = 20.0;
        let series: Vec<f64> = (0..128)
            .map(|t| (2.0 * std::f64::consts::PI * 1.2 * t as f64 / fs).sin())
            .collect();
        let a = clip_pulse_rate(&series, fs, 0.5, 3.0).unwrap();
        let b = clip_pulse_rate(&series, fs, 0.5, 3.0).unwrap();
        assert_eq!(a, b);
        assert!((a - 72.0).abs() < 2.0);
    }

    #[test]
    fn missing_split_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let (ds, model) = tiny_eval_fixture(dir.path());
        let protocol = EvalProtocol {
            window: 64,
            stride: 64,
            band_lo_hz: 0.5,
            band_hi_hz: 3.0,
        };
        assert!(evaluate(&model, &ds, Some("test"), &protocol).is_err());
    }
}
