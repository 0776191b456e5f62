//! Manifest loading: per video, contiguous landmark spans become cached
//! spatiotemporal graphs, and the reference waveform is resampled to one
//! value per frame.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;

use crate::autodiff::Real;
use crate::error::{Error, Result};
use crate::files::{self, DatasetManifest, LandmarkFile, ManifestVideo, PngDirSource};
use crate::mesh::{CanonicalTopology, MeshSequence, Vec3};
use crate::stgraph::{
    build_stgraph, node_count, read_stgraph_cache, write_stgraph_cache, FrameImage, FrameSource,
    RegionConfig, StGraph,
};

/// One contiguous detection span of a video, as a built graph.
#[derive(Debug, Clone)]
pub struct SpanGraph {
    /// First frame of the span within the video.
    pub start: usize,
    pub graph: StGraph,
}

#[derive(Debug, Clone)]
pub struct VideoData {
    pub name: String,
    pub split: String,
    pub fps: f64,
    pub frame_count: usize,
    pub spans: Vec<SpanGraph>,
    /// Reference pulse value per frame (linearly resampled).
    pub reference: Vec<f64>,
}

/// A length-`window` clip: span-local offset plus owning indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClipRef {
    pub video: usize,
    pub span: usize,
    /// Offset in frames from the start of the span.
    pub offset: usize,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub topology: Arc<CanonicalTopology>,
    pub region: RegionConfig,
    /// Frame rate shared by every video.
    pub fps: f64,
    pub videos: Vec<VideoData>,
}

impl Dataset {
    /// Non-overlapping-by-default clip enumeration, restricted to one
    /// split when given. Order: manifest order, then span, then offset.
    pub fn clips(&self, window: usize, stride: usize, split: Option<&str>) -> Vec<ClipRef> {
        let mut out = Vec::new();
        for (vi, video) in self.videos.iter().enumerate() {
            if split.is_some_and(|s| s != video.split) {
                continue;
            }
            for (si, span) in video.spans.iter().enumerate() {
                let frames = span.graph.frames;
                let mut offset = 0;
                while offset + window <= frames {
                    out.push(ClipRef {
                        video: vi,
                        span: si,
                        offset,
                    });
                    offset += stride;
                }
            }
        }
        out
    }

    pub fn video(&self, clip: ClipRef) -> &VideoData {
        &self.videos[clip.video]
    }

    pub fn span(&self, clip: ClipRef) -> &SpanGraph {
        &self.videos[clip.video].spans[clip.span]
    }

    /// Reference slice aligned with a clip.
    pub fn clip_reference(&self, clip: ClipRef, window: usize) -> &[f64] {
        let video = &self.videos[clip.video];
        let start = video.spans[clip.span].start + clip.offset;
        &video.reference[start..start + window]
    }

    pub fn splits(&self) -> Vec<&str> {
        let mut tags: Vec<&str> = self.videos.iter().map(|v| v.split.as_str()).collect();
        tags.sort_unstable();
        tags.dedup();
        tags
    }
}

/// Standardized clip features, shape `(3, window, nodes)` row-major.
/// Each channel is centered and scaled by the statistics of its visible
/// entries; occluded entries stay zero.
pub fn clip_features<F: Real>(graph: &StGraph, offset: usize, window: usize) -> Result<Vec<F>> {
    if offset + window > graph.frames {
        return Err(Error::Shape(format!(
            "clip [{offset}, {}) exceeds span of {} frames",
            offset + window,
            graph.frames
        )));
    }
    let n = graph.nodes;
    let mut out = vec![F::cast(0.0); graph.channels * window * n];
    for c in 0..graph.channels {
        let mut sum = 0.0f64;
        let mut sumsq = 0.0f64;
        let mut count = 0usize;
        for t in 0..window {
            for i in 0..n {
                if !graph.occluded(offset + t, i) {
                    let v = graph.feature(c, offset + t, i) as f64;
                    sum += v;
                    sumsq += v * v;
                    count += 1;
                }
            }
        }
        if count == 0 {
            continue;
        }
        let mean = sum / count as f64;
        let var = (sumsq / count as f64 - mean * mean).max(0.0);
        let scale = 1.0 / var.sqrt().max(1e-6);
        for t in 0..window {
            for i in 0..n {
                if !graph.occluded(offset + t, i) {
                    let v = graph.feature(c, offset + t, i) as f64;
                    out[(c * window + t) * n + i] = F::cast((v - mean) * scale);
                }
            }
        }
    }
    Ok(out)
}

/// Mean landmark position per vertex over all non-gap frames.
pub fn mean_landmark_vertices(lm: &LandmarkFile) -> Result<Vec<Vec3>> {
    let mut out = vec![[0.0f64; 3]; lm.vertex_count];
    let mut frames = 0usize;
    for t in 0..lm.frame_count {
        if lm.frame_is_gap(t) {
            continue;
        }
        frames += 1;
        for (o, p) in out.iter_mut().zip(lm.frame_vertices(t)) {
            for k in 0..3 {
                o[k] += p[k];
            }
        }
    }
    if frames == 0 {
        return Err(Error::Data("landmark track has no detected frames".into()));
    }
    let inv = 1.0 / frames as f64;
    for o in &mut out {
        for k in 0..3 {
            o[k] *= inv;
        }
    }
    Ok(out)
}

/// Linear interpolation of `(times, values)` onto the frame grid
/// `0, 1/fps, ...`. Endpoints are held; coverage must reach within
/// `slack_s` seconds of both ends of the video.
fn resample_to_frames(
    times: &[f64],
    values: &[f64],
    fps: f64,
    frame_count: usize,
    slack_s: f64,
) -> Result<Vec<f64>> {
    if times.len() != values.len() || times.is_empty() {
        return Err(Error::Data("reference waveform is empty".into()));
    }
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Data(
            "reference timestamps must strictly increase".into(),
        ));
    }
    let end = (frame_count.saturating_sub(1)) as f64 / fps;
    if times[0] > slack_s || times[times.len() - 1] < end - slack_s {
        return Err(Error::Data(format!(
            "reference covers [{:.3}, {:.3}] s but the video spans [0, {:.3}] s",
            times[0],
            times[times.len() - 1],
            end
        )));
    }
    let mut out = Vec::with_capacity(frame_count);
    let mut j = 0usize;
    for k in 0..frame_count {
        let t = k as f64 / fps;
        while j + 1 < times.len() && times[j + 1] < t {
            j += 1;
        }
        let v = if t <= times[0] {
            values[0]
        } else if t >= times[times.len() - 1] {
            values[values.len() - 1]
        } else {
            let (t0, t1) = (times[j], times[j + 1]);
            let a = (t - t0) / (t1 - t0);
            values[j] * (1.0 - a) + values[j + 1] * a
        };
        out.push(v);
    }
    Ok(out)
}

/// Maximal runs of frames with detections: `(start, length)` pairs.
fn detection_spans(lm: &LandmarkFile) -> Vec<(usize, usize)> {
    let mut spans = Vec::new();
    let mut start = None;
    for t in 0..lm.frame_count {
        match (lm.frame_is_gap(t), start) {
            (false, None) => start = Some(t),
            (true, Some(s)) => {
                spans.push((s, t - s));
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        spans.push((s, lm.frame_count - s));
    }
    spans
}

/// A window into another frame source.
struct SpanFrames<'a> {
    src: &'a PngDirSource,
    offset: usize,
    len: usize,
}

impl FrameSource for SpanFrames<'_> {
    fn frame_count(&self) -> usize {
        self.len
    }
    fn frame(&self, t: usize) -> Result<FrameImage> {
        self.src.frame(self.offset + t)
    }
    fn dimensions(&self) -> (u32, u32) {
        self.src.dimensions()
    }
}

fn cache_path(dir: &Path, video: &str, span_start: usize, tag: &str) -> PathBuf {
    let safe: String = tag
        .chars()
        .map(|c| if c == '/' || c == ':' { '-' } else { c })
        .collect();
    dir.join(format!("{video}_{span_start:06}_{safe}.stg"))
}

/// Loads a cached span graph if it matches what fresh construction would
/// produce structurally; otherwise rebuilds and rewrites the cache.
fn span_graph(
    frames: &PngDirSource,
    topology: &Arc<CanonicalTopology>,
    lm: &LandmarkFile,
    region: &RegionConfig,
    video: &str,
    span: (usize, usize),
    cache_dir: Option<&Path>,
) -> Result<StGraph> {
    let (start, len) = span;
    let expected_nodes = node_count(topology, region);
    if let Some(dir) = cache_dir {
        let path = cache_path(dir, video, start, &region.tag());
        if path.is_file() {
            match read_stgraph_cache(&path) {
                Ok(g)
                    if g.frames == len
                        && g.nodes == expected_nodes
                        && g.region_tag == region.tag()
                        && (g.fps - lm.fps).abs() < 1e-9 =>
                {
                    return Ok(g);
                }
                Ok(_) => log::warn!("cache {} is stale; rebuilding", path.display()),
                Err(e) => log::warn!("cache {} unreadable ({e}); rebuilding", path.display()),
            }
        }
    }
    let mut vertices = Vec::with_capacity(len * topology.vertex_count());
    for t in start..start + len {
        vertices.extend(lm.frame_vertices(t));
    }
    let mesh = MeshSequence::new(topology.clone(), vertices, lm.fps)?;
    let view = SpanFrames {
        src: frames,
        offset: start,
        len,
    };
    let (graph, stats) = build_stgraph(&view, &mesh, region)?;
    log::info!(
        "built graph for {video} span {start}+{len}: {} nodes, visibility {:.3}",
        graph.nodes,
        stats.visible_fraction
    );
    if let Some(dir) = cache_dir {
        write_stgraph_cache(&cache_path(dir, video, start, &region.tag()), &graph)?;
    }
    Ok(graph)
}

fn load_video(
    root: &Path,
    entry: &ManifestVideo,
    topology: &Arc<CanonicalTopology>,
    region: &RegionConfig,
    cache_dir: Option<&Path>,
) -> Result<VideoData> {
    let lm = files::read_landmarks(&root.join(&entry.landmarks))?;
    if lm.vertex_count != topology.vertex_count() {
        return Err(Error::Data(format!(
            "video {}: {} landmark vertices but the topology has {}",
            entry.name,
            lm.vertex_count,
            topology.vertex_count()
        )));
    }
    if (lm.fps - entry.fps).abs() > 1e-6 * entry.fps.max(1.0) {
        return Err(Error::Data(format!(
            "video {}: landmark fps {} disagrees with manifest fps {}",
            entry.name, lm.fps, entry.fps
        )));
    }
    let frames = PngDirSource::open(&root.join(&entry.frames_dir))?;
    if frames.frame_count() != lm.frame_count {
        return Err(Error::Data(format!(
            "video {}: {} frames on disk but {} landmark frames",
            entry.name,
            frames.frame_count(),
            lm.frame_count
        )));
    }
    let (times, values) = files::read_waveform(&root.join(&entry.reference))?;
    let reference = resample_to_frames(&times, &values, lm.fps, lm.frame_count, 1.0)?;

    let spans_idx = detection_spans(&lm);
    if spans_idx.is_empty() {
        return Err(Error::Data(format!(
            "video {}: no frames with landmark detections",
            entry.name
        )));
    }
    let gap_frames = lm.frame_count - spans_idx.iter().map(|&(_, l)| l).sum::<usize>();
    if gap_frames > 0 {
        log::info!(
            "video {}: {gap_frames} frames without detections; clips crossing them are dropped",
            entry.name
        );
    }
    let mut spans = Vec::with_capacity(spans_idx.len());
    for &span in &spans_idx {
        spans.push(SpanGraph {
            start: span.0,
            graph: span_graph(&frames, topology, &lm, region, &entry.name, span, cache_dir)?,
        });
    }
    Ok(VideoData {
        name: entry.name.clone(),
        split: entry.split.clone(),
        fps: lm.fps,
        frame_count: lm.frame_count,
        spans,
        reference,
    })
}

/// Reads a manifest and builds (or reloads) every span graph. Canonical
/// vertex positions come from the mean landmarks of the first training
/// video, falling back to the first video. With `cache` set, graphs are
/// stored under `stgraph_cache/` next to the manifest.
pub fn ingest(manifest_path: &Path, region: &RegionConfig, cache: bool) -> Result<Dataset> {
    region.validate()?;
    let manifest = DatasetManifest::load(manifest_path)?;
    if manifest.videos.is_empty() {
        return Err(Error::Data("manifest lists no videos".into()));
    }
    let root = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let faces = files::read_topology(&root.join(&manifest.topology))?;

    let canonical_entry = manifest
        .videos
        .iter()
        .find(|v| v.split == "train")
        .unwrap_or(&manifest.videos[0]);
    let lm0 = files::read_landmarks(&root.join(&canonical_entry.landmarks))?;
    let vertices = mean_landmark_vertices(&lm0)?;
    let topology = Arc::new(CanonicalTopology::new(faces, vertices)?);

    let fps = manifest.videos[0].fps;
    if manifest.videos.iter().any(|v| (v.fps - fps).abs() > 1e-9) {
        return Err(Error::Config(
            "all videos in a dataset must share one frame rate".into(),
        ));
    }

    let cache_dir = if cache {
        let dir = root.join("stgraph_cache");
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
        Some(dir)
    } else {
        None
    };

    let videos: Vec<VideoData> = manifest
        .videos
        .par_iter()
        .map(|entry| load_video(&root, entry, &topology, region, cache_dir.as_deref()))
        .collect::<Result<_>>()?;

    Ok(Dataset {
        topology,
        region: *region,
        fps,
        videos,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{emit_dataset, FacePulseScenario, MotionProfile, PulseProfile};

    fn tiny_scenario(seed: u64) -> FacePulseScenario {
        FacePulseScenario {
            faces: 60,
            image_size: 48,
            fps: 20.0,
            duration_s: 3.2,
            pulse: PulseProfile::Constant { hz: 1.3 },
            harmonic_ratio: 0.3,
            amplitude: 0.04,
            noise_sigma: 0.0,
            drift_amplitude: 0.0,
            drift_period_s: 23.0,
            motion: MotionProfile::none(),
            base_color: [0.55, 0.40, 0.33],
            seed,
        }
    }

    fn tiny_dataset(dir: &Path, videos: usize) -> PathBuf {
        let scenarios: Vec<(String, FacePulseScenario)> = (0..videos)
            .map(|i| (format!("video_{i:03}"), tiny_scenario(7 + i as u64)))
            .collect();
        emit_dataset(dir, &scenarios).unwrap();
        dir.join("manifest.toml")
    }

    #[test]
    fn ingest_builds_spans_and_clips() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = tiny_dataset(dir.path(), 1);
        let region = RegionConfig::default();
        let ds = ingest(&manifest, &region, false).unwrap();
        assert_eq!(ds.videos.len(), 1);
        let video = &ds.videos[0];
        assert_eq!(video.frame_count, 64);
        assert_eq!(video.spans.len(), 1);
        assert_eq!(video.reference.len(), 64);

        // 64 frames, window 16, stride 16 -> 4 clips; stride 8 -> 7.
        assert_eq!(ds.clips(16, 16, None).len(), 4);
        assert_eq!(ds.clips(16, 8, None).len(), 7);
        assert_eq!(ds.clips(16, 16, Some("train")).len(), 4);
        assert_eq!(ds.clips(16, 16, Some("test")).len(), 0);

        let clip = ds.clips(16, 16, None)[1];
        assert_eq!(clip.offset, 16);
        assert_eq!(ds.clip_reference(clip, 16).len(), 16);

        let x: Vec<f32> = clip_features(&video.spans[0].graph, 16, 16).unwrap();
        assert_eq!(x.len(), 3 * 16 * video.spans[0].graph.nodes);
        assert!(x.iter().all(|v| v.is_finite()));
        // Standardization centers each channel near zero.
        let n = video.spans[0].graph.nodes;
        let mean: f32 = x[..16 * n].iter().sum::<f32>() / (16.0 * n as f32);
        assert!(mean.abs() < 0.05, "channel mean {mean}");
    }

    #[test]
    fn landmark_gap_splits_spans_and_drops_clips() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = tiny_dataset(dir.path(), 1);
        // Punch a 2-frame gap into the landmark track at frame 30.
        let lm_path = dir.path().join("video_000/landmarks.bin");
        let mut lm = files::read_landmarks(&lm_path).unwrap();
        let v = lm.vertex_count;
        for t in 30..32 {
            for x in &mut lm.data[t * v * 3..(t + 1) * v * 3] {
                *x = f32::NAN;
            }
        }
        files::write_landmarks(&lm_path, &lm).unwrap();

        let ds = ingest(&manifest, &RegionConfig::default(), false).unwrap();
        let video = &ds.videos[0];
        assert_eq!(video.spans.len(), 2);
        assert_eq!(video.spans[0].start, 0);
        assert_eq!(video.spans[0].graph.frames, 30);
        assert_eq!(video.spans[1].start, 32);
        assert_eq!(video.spans[1].graph.frames, 32);
        // Window 16: floor(30/16) + floor(32/16) = 1 + 2.
        assert_eq!(ds.clips(16, 16, None).len(), 3);
    }

    #[test]
    fn cache_reload_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = tiny_dataset(dir.path(), 1);
        let region = RegionConfig::default();
        let fresh = ingest(&manifest, &region, false).unwrap();
        let cached = ingest(&manifest, &region, true).unwrap();
        let reloaded = ingest(&manifest, &region, true).unwrap();
        let a = &fresh.videos[0].spans[0].graph;
        let b = &cached.videos[0].spans[0].graph;
        let c = &reloaded.videos[0].spans[0].graph;
        assert_eq!(a, b);
        assert_eq!(a, c);
        let cache_file = std::fs::read_dir(dir.path().join("stgraph_cache"))
            .unwrap()
            .next()
            .unwrap()
            .unwrap();
        assert!(cache_file.path().extension().is_some_and(|e| e == "stg"));
    }

    #[test]
    fn fps_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let manifest_path = tiny_dataset(dir.path(), 1);
        let mut manifest = DatasetManifest::load(&manifest_path).unwrap();
        manifest.videos[0].fps = 25.0;
        manifest.save(&manifest_path).unwrap();
        let err = ingest(&manifest_path, &RegionConfig::default(), false).unwrap_err();
        assert!(err.to_string().contains("fps"), "{err}");
    }

    #[test]
    fn short_reference_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = tiny_dataset(dir.path(), 1);
        let ref_path = dir.path().join("video_000/reference.txt");
        let (times, values) = files::read_waveform(&ref_path).unwrap();
        files::write_waveform(&ref_path, &times[..20], &values[..20], "truncated").unwrap();
        let err = ingest(&manifest, &RegionConfig::default(), false).unwrap_err();
        assert!(err.to_string().contains("covers"), "{err}");
    }

    #[test]
    fn resample_holds_endpoints_and_interpolates() {
        let times = vec![0.0, 0.5, 1.0];
        let values = vec![1.0, 2.0, 4.0];
        let out = resample_to_frames(&times, &values, 4.0, 5, 1.0).unwrap();
        assert_eq!(out.len(), 5);
        assert!((out[0] - 1.0).abs() < 1e-12);
        assert!((out[1] - 1.5).abs() < 1e-12);
        assert!((out[2] - 2.0).abs() < 1e-12);
        assert!((out[3] - 3.0).abs() < 1e-12);
        assert!((out[4] - 4.0).abs() < 1e-12);
    }
}
