//! Synthetic facial-surface pulse videos with exact ground truth: a
//! triangulated spherical cap tracked perfectly, colored by a pulse
//! waveform, rendered to frames. Every output is a pure function of the
//! scenario, so runs are reproducible bit for bit.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::Path;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::files;
use crate::mesh::{face_normal, is_occluded, project_face, CanonicalTopology, MeshSequence, Vec3};
use crate::raster::rasterize_triangle;
use crate::stgraph::FrameImage;

/// Angular radius of the cap. Narrow enough to look like a face patch,
/// wide enough that yaw rotations push rim regions past the silhouette.
const THETA_MAX_DEG: f64 = 75.0;

/// Default canonical face-region count.
pub const CANONICAL_FACE_COUNT: usize = 852;

fn ring_vertex(theta: f64, phi: f64) -> Vec3 {
    [theta.sin() * phi.cos(), theta.sin() * phi.sin(), -theta.cos()]
}

/// Builds a triangulated spherical cap with exactly `target` faces. The
/// apex points toward the camera (negative z); faces wind so normals point
/// outward. A deterministic edge-flip pass varies vertex degrees the way
/// artist-made face meshes do.
pub fn make_synthetic_topology(target: usize) -> Result<CanonicalTopology> {
    if target < 3 {
        return Err(Error::Config(format!(
            "topology needs at least 3 faces, got {target}"
        )));
    }
    let theta_max = THETA_MAX_DEG.to_radians();
    let mut verts: Vec<Vec3> = vec![[0.0, 0.0, -1.0]];
    let mut faces: Vec<[u32; 3]> = Vec::with_capacity(target);

    if target <= 14 {
        // Pure apex fan: one ring of `target` boundary vertices.
        let m = target;
        for j in 0..m {
            let phi = 2.0 * std::f64::consts::PI * j as f64 / m as f64;
            verts.push(ring_vertex(theta_max, phi));
        }
        for j in 0..m {
            faces.push([0, 1 + j as u32, 1 + ((j + 1) % m) as u32]);
        }
    } else {
        // R full hexagonal rings plus a partial outer ring of m_last
        // vertices: 6R^2 + 6R + m_last faces in total.
        let mut r = 1usize;
        while 6 * (r + 1) * (r + 1) + 6 * (r + 1) + 3 <= target {
            r += 1;
        }
        let m_last = target - 6 * r * r - 6 * r;
        let r_total = r + 1;

        let mut ring_start = Vec::with_capacity(r_total + 1);
        let mut ring_m = Vec::with_capacity(r_total + 1);
        ring_start.push(0usize);
        ring_m.push(1usize);
        for i in 1..=r {
            ring_start.push(verts.len());
            ring_m.push(6 * i);
            let theta = theta_max * i as f64 / r_total as f64;
            for j in 0..6 * i {
                let phi = 2.0 * std::f64::consts::PI * j as f64 / (6 * i) as f64;
                verts.push(ring_vertex(theta, phi));
            }
        }
        ring_start.push(verts.len());
        ring_m.push(m_last);
        for j in 0..m_last {
            let phi = 2.0 * std::f64::consts::PI * j as f64 / m_last as f64;
            verts.push(ring_vertex(theta_max, phi));
        }

        // Apex fan to ring 1.
        let s1 = ring_start[1] as u32;
        for j in 0..6u32 {
            faces.push([0, s1 + j, s1 + (j + 1) % 6]);
        }
        // Regular annuli between full rings i and i+1, triangulated by
        // hexagonal sectors.
        for i in 1..r {
            let (sa, ma) = (ring_start[i], ring_m[i]);
            let (sb, mb) = (ring_start[i + 1], ring_m[i + 1]);
            for s in 0..6 {
                let ia = s * i;
                let ib = s * (i + 1);
                for j in 0..=i {
                    let o1 = (sb + (ib + j) % mb) as u32;
                    let o2 = (sb + (ib + j + 1) % mb) as u32;
                    let inn = (sa + (ia + j) % ma) as u32;
                    faces.push([inn, o2, o1]);
                    if j < i {
                        let i2 = (sa + (ia + j + 1) % ma) as u32;
                        faces.push([inn, i2, o2]);
                    }
                }
            }
        }
        // Fractional bridge from ring R to the partial outer ring: advance
        // whichever ring has the smaller next angular fraction.
        let (sa, ma) = (ring_start[r], ring_m[r]);
        let (sb, mb) = (ring_start[r + 1], ring_m[r + 1]);
        let (mut i, mut j) = (0usize, 0usize);
        while i < ma || j < mb {
            let advance_inner = if j >= mb {
                true
            } else if i >= ma {
                false
            } else {
                (i + 1) as f64 / ma as f64 <= (j + 1) as f64 / mb as f64
            };
            if advance_inner {
                faces.push([
                    (sa + i % ma) as u32,
                    (sb + j % mb) as u32,
                    (sa + (i + 1) % ma) as u32,
                ]);
                i += 1;
            } else {
                faces.push([
                    (sa + i % ma) as u32,
                    (sb + (j + 1) % mb) as u32,
                    (sb + j % mb) as u32,
                ]);
                j += 1;
            }
        }
    }

    orient_outward(&mut faces, &verts)?;
    edge_flip_pass(&mut faces);
    orient_outward(&mut faces, &verts)?;
    debug_assert_eq!(faces.len(), target);
    CanonicalTopology::new(faces, verts)
}

/// The canonical face-region topology used by the default configuration.
pub fn canonical_face_topology() -> CanonicalTopology {
    make_synthetic_topology(CANONICAL_FACE_COUNT).expect("canonical topology must build")
}

/// Makes the winding consistent by propagating an orientation across
/// shared edges, then flips the whole mesh if the area-weighted vote says
/// normals point toward the origin. Purely topological propagation keeps
/// this robust even where triangles are skewed.
fn orient_outward(faces: &mut [[u32; 3]], verts: &[Vec3]) -> Result<()> {
    let mut edge_faces: BTreeMap<(u32, u32), Vec<usize>> = BTreeMap::new();
    for (fi, f) in faces.iter().enumerate() {
        for k in 0..3 {
            let a = f[k];
            let b = f[(k + 1) % 3];
            edge_faces.entry((a.min(b), a.max(b))).or_default().push(fi);
        }
    }
    let traverses = |f: &[u32; 3], u: u32, v: u32| {
        (0..3).any(|k| f[k] == u && f[(k + 1) % 3] == v)
    };
    let mut visited = vec![false; faces.len()];
    let mut queue = std::collections::VecDeque::from([0usize]);
    visited[0] = true;
    while let Some(fi) = queue.pop_front() {
        let f = faces[fi];
        for k in 0..3 {
            let (u, v) = (f[k], f[(k + 1) % 3]);
            for &g in &edge_faces[&(u.min(v), u.max(v))] {
                if g == fi || visited[g] {
                    continue;
                }
                // Neighbors must traverse the shared edge oppositely.
                if traverses(&faces[g], u, v) {
                    faces[g].swap(1, 2);
                }
                visited[g] = true;
                queue.push_back(g);
            }
        }
    }
    if visited.iter().any(|&v| !v) {
        return Err(Error::Topology("generated mesh is not connected".into()));
    }
    let mut vote = 0.0;
    for f in faces.iter() {
        let (a, b, c) = (
            verts[f[0] as usize],
            verts[f[1] as usize],
            verts[f[2] as usize],
        );
        let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
        let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
        let n = [
            u[1] * v[2] - u[2] * v[1],
            u[2] * v[0] - u[0] * v[2],
            u[0] * v[1] - u[1] * v[0],
        ];
        let centroid = [
            (a[0] + b[0] + c[0]) / 3.0,
            (a[1] + b[1] + c[1]) / 3.0,
            (a[2] + b[2] + c[2]) / 3.0,
        ];
        vote += n[0] * centroid[0] + n[1] * centroid[1] + n[2] * centroid[2];
    }
    if vote < 0.0 {
        for f in faces.iter_mut() {
            f.swap(1, 2);
        }
    }
    Ok(())
}

/// Flips a deterministic selection of interior edges. This spreads vertex
/// degrees (regular triangulations are too uniform) while keeping the mesh
/// manifold; every step has fixed iteration order, so the result is
/// reproducible.
fn edge_flip_pass(faces: &mut [[u32; 3]]) {
    let mut edge_faces: BTreeMap<(u32, u32), Vec<usize>> = BTreeMap::new();
    for (fi, f) in faces.iter().enumerate() {
        for k in 0..3 {
            let a = f[k];
            let b = f[(k + 1) % 3];
            edge_faces.entry((a.min(b), a.max(b))).or_default().push(fi);
        }
    }
    let mut boundary: BTreeSet<u32> = BTreeSet::new();
    let mut degree: BTreeMap<u32, i64> = BTreeMap::new();
    let mut existing: HashSet<(u32, u32)> = HashSet::new();
    for (&(a, b), fs) in &edge_faces {
        existing.insert((a, b));
        *degree.entry(a).or_insert(0) += 1;
        *degree.entry(b).or_insert(0) += 1;
        if fs.len() == 1 {
            boundary.insert(a);
            boundary.insert(b);
        }
    }
    let interior: Vec<((u32, u32), (usize, usize))> = edge_faces
        .iter()
        .filter(|(_, fs)| fs.len() == 2)
        .map(|(&e, fs)| (e, (fs[0], fs[1])))
        .collect();

    let mut touched: HashSet<u32> = HashSet::new();
    let mut flips = 0usize;
    let mut idx = 0usize;
    while idx < interior.len() && flips < 200 {
        let ((a, b), (f1, f2)) = interior[idx];
        idx += 6;
        if boundary.contains(&a) || boundary.contains(&b) {
            continue;
        }
        if touched.contains(&a) || touched.contains(&b) {
            continue;
        }
        let opposite = |f: &[u32; 3]| f.iter().copied().find(|&v| v != a && v != b);
        let (Some(c), Some(d)) = (opposite(&faces[f1]), opposite(&faces[f2])) else {
            continue;
        };
        if c == d || touched.contains(&c) || touched.contains(&d) {
            continue;
        }
        if existing.contains(&(c.min(d), c.max(d))) {
            continue;
        }
        if degree[&a] <= 5 || degree[&b] <= 5 {
            continue;
        }
        faces[f1] = [c, d, b];
        faces[f2] = [d, c, a];
        *degree.get_mut(&a).unwrap() -= 1;
        *degree.get_mut(&b).unwrap() -= 1;
        *degree.entry(c).or_insert(0) += 1;
        *degree.entry(d).or_insert(0) += 1;
        existing.remove(&(a.min(b), a.max(b)));
        existing.insert((c.min(d), c.max(d)));
        for v in [a, b, c, d] {
            touched.insert(v);
        }
        flips += 1;
    }
}

/// Pulse frequency over the clip.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PulseProfile {
    Constant { hz: f64 },
    /// Frequency ramps linearly from `start_hz` to `end_hz` over the clip.
    LinearRamp { start_hz: f64, end_hz: f64 },
}

impl PulseProfile {
    /// Accumulated phase in cycles at time `t` (seconds).
    pub fn phase(&self, t: f64, duration: f64) -> f64 {
        match *self {
            PulseProfile::Constant { hz } => hz * t,
            PulseProfile::LinearRamp { start_hz, end_hz } => {
                start_hz * t + (end_hz - start_hz) * t * t / (2.0 * duration)
            }
        }
    }

    pub fn instantaneous_hz(&self, t: f64, duration: f64) -> f64 {
        match *self {
            PulseProfile::Constant { hz } => hz,
            PulseProfile::LinearRamp { start_hz, end_hz } => {
                start_hz + (end_hz - start_hz) * t / duration
            }
        }
    }

    pub fn mean_hz(&self) -> f64 {
        match *self {
            PulseProfile::Constant { hz } => hz,
            PulseProfile::LinearRamp { start_hz, end_hz } => 0.5 * (start_hz + end_hz),
        }
    }
}

/// Rigid head-like motion: sinusoidal yaw and pitch plus translational
/// sway, all phase-locked to the clock so runs are reproducible.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionProfile {
    pub yaw_deg: f64,
    pub yaw_period_s: f64,
    pub pitch_deg: f64,
    pub pitch_period_s: f64,
    pub sway_px: f64,
    pub sway_period_s: f64,
}

impl MotionProfile {
    pub fn none() -> Self {
        Self {
            yaw_deg: 0.0,
            yaw_period_s: 7.0,
            pitch_deg: 0.0,
            pitch_period_s: 5.0,
            sway_px: 0.0,
            sway_period_s: 11.0,
        }
    }
}

/// Full description of one synthetic video.
#[derive(Debug, Clone, PartialEq)]
pub struct FacePulseScenario {
    /// Target mesh face count.
    pub faces: usize,
    /// Square frame side length in pixels.
    pub image_size: u32,
    pub fps: f64,
    pub duration_s: f64,
    pub pulse: PulseProfile,
    /// Relative strength of the second harmonic in the pulse waveform.
    pub harmonic_ratio: f64,
    /// Peak fractional color modulation at the cap center.
    pub amplitude: f64,
    /// Per-pixel Gaussian noise sigma (channel value units).
    pub noise_sigma: f64,
    /// Slow multiplicative illumination drift.
    pub drift_amplitude: f64,
    pub drift_period_s: f64,
    pub motion: MotionProfile,
    pub base_color: [f64; 3],
    pub seed: u64,
}

impl Default for FacePulseScenario {
    fn default() -> Self {
        Self {
            faces: CANONICAL_FACE_COUNT,
            image_size: 128,
            fps: 30.0,
            duration_s: 10.0,
            pulse: PulseProfile::Constant { hz: 1.1 },
            harmonic_ratio: 0.3,
            amplitude: 0.02,
            noise_sigma: 0.005,
            drift_amplitude: 0.0,
            drift_period_s: 17.0,
            motion: MotionProfile::none(),
            base_color: [0.72, 0.52, 0.42],
            seed: 0,
        }
    }
}

/// Shared knobs for generating a family of benchmark videos. Video `index`
/// selects the pulse rate (66 + 12 * index bpm) and staggers the motion
/// period so no two videos move in lockstep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetPreset {
    /// When false, motion, noise, and drift are all disabled.
    pub perturbed: bool,
    pub faces: usize,
    pub image_size: u32,
    pub fps: f64,
    pub duration_s: f64,
    pub amplitude: f64,
    pub noise_sigma: Option<f64>,
    pub yaw_deg: Option<f64>,
    pub seed: u64,
}

impl Default for DatasetPreset {
    fn default() -> Self {
        Self {
            perturbed: true,
            faces: 200,
            image_size: 64,
            fps: 30.0,
            duration_s: 60.0,
            amplitude: 0.02,
            noise_sigma: None,
            yaw_deg: None,
            seed: 0,
        }
    }
}

impl DatasetPreset {
    pub fn scenario(&self, index: usize) -> FacePulseScenario {
        let rate_bpm = 66.0 + 12.0 * index as f64;
        let motion = if self.perturbed {
            MotionProfile {
                yaw_deg: self.yaw_deg.unwrap_or(20.0),
                yaw_period_s: 7.0 + index as f64,
                pitch_deg: 4.0,
                pitch_period_s: 5.0,
                sway_px: 1.5,
                sway_period_s: 11.0,
            }
        } else {
            MotionProfile::none()
        };
        FacePulseScenario {
            faces: self.faces,
            image_size: self.image_size,
            fps: self.fps,
            duration_s: self.duration_s,
            pulse: PulseProfile::Constant {
                hz: rate_bpm / 60.0,
            },
            harmonic_ratio: 0.3,
            amplitude: self.amplitude,
            noise_sigma: if self.perturbed {
                self.noise_sigma.unwrap_or(0.005)
            } else {
                self.noise_sigma.unwrap_or(0.0)
            },
            drift_amplitude: if self.perturbed { 0.01 } else { 0.0 },
            drift_period_s: 17.0,
            motion,
            base_color: [0.58, 0.42, 0.35],
            seed: self.seed.wrapping_add(index as u64),
        }
    }
}

impl FacePulseScenario {
    pub fn validate(&self) -> Result<()> {
        if self.fps < 12.0 {
            return Err(Error::Config(format!(
                "fps {} too low; need at least 12",
                self.fps
            )));
        }
        if !(self.duration_s > 0.0) {
            return Err(Error::Config("duration must be positive".into()));
        }
        if self.frame_count() < 2 {
            return Err(Error::Config("scenario yields fewer than 2 frames".into()));
        }
        if self.image_size < 16 {
            return Err(Error::Config("image size too small".into()));
        }
        if self.amplitude < 0.0 || self.noise_sigma < 0.0 || self.harmonic_ratio < 0.0 {
            return Err(Error::Config(
                "amplitude, noise and harmonic ratio must be nonnegative".into(),
            ));
        }
        for c in self.base_color {
            if !(0.0 < c && c < 1.0) {
                return Err(Error::Config("base color must lie inside (0, 1)".into()));
            }
        }
        let (lo, hi) = match self.pulse {
            PulseProfile::Constant { hz } => (hz, hz),
            PulseProfile::LinearRamp { start_hz, end_hz } => {
                (start_hz.min(end_hz), start_hz.max(end_hz))
            }
        };
        if !(lo > 0.0) {
            return Err(Error::Config("pulse frequency must be positive".into()));
        }
        if hi * 2.0 >= self.fps / 2.0 {
            return Err(Error::Config(format!(
                "pulse {hi} Hz too fast for fps {} (second harmonic aliases)",
                self.fps
            )));
        }
        Ok(())
    }

    pub fn frame_count(&self) -> usize {
        (self.duration_s * self.fps).round() as usize
    }

    pub fn frame_times(&self) -> Vec<f64> {
        (0..self.frame_count()).map(|t| t as f64 / self.fps).collect()
    }

    /// Unit pulse waveform: fundamental plus a weaker second harmonic.
    pub fn bvp_value(&self, t_s: f64) -> f64 {
        let phase = self.pulse.phase(t_s, self.duration_s);
        let w = 2.0 * std::f64::consts::PI * phase;
        (w.sin() + self.harmonic_ratio * (2.0 * w).sin()) / (1.0 + self.harmonic_ratio)
    }

    pub fn bvp_series(&self) -> Vec<f64> {
        self.frame_times().iter().map(|&t| self.bvp_value(t)).collect()
    }

    pub fn mean_rate_bpm(&self) -> f64 {
        self.pulse.mean_hz() * 60.0
    }

    fn scale(&self) -> f64 {
        0.40 * self.image_size as f64
    }

    /// Mesh positions over time: canonical cap rotated and swayed, scaled
    /// into image coordinates.
    pub fn animate(&self, topology: &Arc<CanonicalTopology>) -> Result<MeshSequence> {
        self.validate()?;
        let t_len = self.frame_count();
        let v = topology.vertex_count();
        let center = self.image_size as f64 / 2.0;
        let scale = self.scale();
        let tau = 2.0 * std::f64::consts::PI;
        let mut data = Vec::with_capacity(t_len * v);
        for t in 0..t_len {
            let ts = t as f64 / self.fps;
            let yaw = self.motion.yaw_deg.to_radians()
                * (tau * ts / self.motion.yaw_period_s).sin();
            let pitch = self.motion.pitch_deg.to_radians()
                * (tau * ts / self.motion.pitch_period_s + 1.0).sin();
            let sway_x = self.motion.sway_px * (tau * ts / self.motion.sway_period_s).sin();
            let sway_y = 0.5 * self.motion.sway_px * (tau * ts / self.motion.sway_period_s).cos();
            let (sy, cy) = yaw.sin_cos();
            let (sp, cp) = pitch.sin_cos();
            for p in topology.canonical_vertices() {
                // Pitch about x, then yaw about y.
                let y1 = p[1] * cp - p[2] * sp;
                let z1 = p[1] * sp + p[2] * cp;
                let x2 = p[0] * cy + z1 * sy;
                let z2 = -p[0] * sy + z1 * cy;
                data.push([
                    center + sway_x + scale * x2,
                    center + sway_y + scale * y1,
                    scale * z2,
                ]);
            }
        }
        MeshSequence::new(topology.clone(), data, self.fps)
    }

    /// Per-face fractional modulation amplitudes: strongest at the cap
    /// center, tapering to half at the rim.
    pub fn face_amplitudes(&self, topology: &CanonicalTopology) -> Vec<f64> {
        let rho_max = THETA_MAX_DEG.to_radians().sin();
        topology
            .canonical_face_centroids()
            .iter()
            .map(|c| {
                let rho = (c[0] * c[0] + c[1] * c[1]).sqrt() / rho_max;
                self.amplitude * (1.0 - 0.5 * rho.min(1.0))
            })
            .collect()
    }

    /// Per-face RGB at time `t` before pixel noise.
    pub fn face_colors(&self, amplitudes: &[f64], t_s: f64) -> Vec<[f64; 3]> {
        let b = self.bvp_value(t_s);
        let drift = self.drift_amplitude
            * (2.0 * std::f64::consts::PI * t_s / self.drift_period_s).sin();
        amplitudes
            .iter()
            .map(|&a| {
                let gain = (1.0 + a * b) * (1.0 + drift);
                [
                    self.base_color[0] * gain,
                    self.base_color[1] * gain,
                    self.base_color[2] * gain,
                ]
            })
            .collect()
    }

    /// Renders frame `t` of the animated mesh. Deterministic: noise comes
    /// from a stream derived from (seed, t) only.
    pub fn render_frame(
        &self,
        topology: &CanonicalTopology,
        mesh: &MeshSequence,
        amplitudes: &[f64],
        t: usize,
    ) -> Result<FrameImage> {
        let w = self.image_size;
        let mut frame = FrameImage::new(w, w);
        let mut rng = frame_rng(self.seed, t);
        let noise = if self.noise_sigma > 0.0 {
            Some(Normal::new(0.0f64, self.noise_sigma).map_err(|e| {
                Error::Config(format!("noise sigma: {e}"))
            })?)
        } else {
            None
        };
        let background = [0.08f64, 0.08, 0.10];
        let put = |frame: &mut FrameImage, x: u32, y: u32, rgb: [f64; 3], rng: &mut ChaCha8Rng| {
            let mut out = [0.0f32; 3];
            for c in 0..3 {
                let v = rgb[c] + noise.map_or(0.0, |n| n.sample(rng));
                out[c] = v.clamp(0.0, 1.0) as f32;
            }
            frame.set_pixel(x, y, out);
        };
        for y in 0..w {
            for x in 0..w {
                put(&mut frame, x, y, background, &mut rng);
            }
        }
        let verts = mesh.frame(t);
        let colors = self.face_colors(amplitudes, t as f64 / self.fps);
        for (i, &face) in topology.faces().iter().enumerate() {
            if is_occluded(face_normal(verts, face)?) {
                continue;
            }
            let proj = project_face(verts, face)?;
            if proj.degenerate {
                continue;
            }
            for (x, y) in rasterize_triangle(&proj.pts, w, w) {
                put(&mut frame, x, y, colors[i], &mut rng);
            }
        }
        Ok(frame)
    }

    /// Renders the whole clip into memory (tests and small clips only;
    /// dataset emission streams frames to disk instead).
    pub fn render_video(
        &self,
        topology: &Arc<CanonicalTopology>,
    ) -> Result<(MeshSequence, Vec<FrameImage>)> {
        let mesh = self.animate(topology)?;
        let amplitudes = self.face_amplitudes(topology);
        let frames: Result<Vec<FrameImage>> = (0..self.frame_count())
            .into_par_iter()
            .map(|t| self.render_frame(topology, &mesh, &amplitudes, t))
            .collect();
        Ok((mesh, frames?))
    }
}

fn frame_rng(seed: u64, t: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_add((t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)))
}

/// Emits a dataset directory: shared topology, then per video a frames
/// directory of 16-bit PNGs, a landmark track, and the reference pulse
/// waveform; finally a manifest tying it together. All scenarios must
/// share one face count. Returns the manifest.
pub fn emit_dataset(
    dir: &Path,
    scenarios: &[(String, FacePulseScenario)],
) -> Result<files::DatasetManifest> {
    if scenarios.is_empty() {
        return Err(Error::Config("no videos requested".into()));
    }
    let faces = scenarios[0].1.faces;
    if scenarios.iter().any(|(_, s)| s.faces != faces) {
        return Err(Error::Config(
            "all videos in a dataset must share one topology".into(),
        ));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let topology = Arc::new(make_synthetic_topology(faces)?);
    files::write_topology(&dir.join("topology.bin"), topology.faces())?;

    let mut videos = Vec::new();
    for (name, scenario) in scenarios {
        scenario.validate()?;
        let vdir = dir.join(name);
        let frames_dir = vdir.join("frames");
        std::fs::create_dir_all(&frames_dir)
            .map_err(|e| Error::io(frames_dir.display().to_string(), e))?;
        let mesh = scenario.animate(&topology)?;
        let amplitudes = scenario.face_amplitudes(&topology);
        (0..scenario.frame_count())
            .into_par_iter()
            .map(|t| {
                let frame = scenario.render_frame(&topology, &mesh, &amplitudes, t)?;
                files::write_frame_png(&frames_dir.join(format!("frame_{t:06}.png")), &frame)
            })
            .collect::<Result<Vec<()>>>()?;

        let v = topology.vertex_count();
        let mut lm = Vec::with_capacity(mesh.frame_count() * v * 3);
        for t in 0..mesh.frame_count() {
            for p in mesh.frame(t) {
                lm.extend(p.iter().map(|&x| x as f32));
            }
        }
        let landmarks = files::LandmarkFile::new(v, mesh.frame_count(), scenario.fps, lm)?;
        files::write_landmarks(&vdir.join("landmarks.bin"), &landmarks)?;

        let times = scenario.frame_times();
        let values = scenario.bvp_series();
        files::write_waveform(
            &vdir.join("reference.txt"),
            &times,
            &values,
            &format!("synthetic pulse, mean rate {:.2} bpm", scenario.mean_rate_bpm()),
        )?;

        videos.push(files::ManifestVideo {
            name: name.clone(),
            frames_dir: format!("{name}/frames"),
            landmarks: format!("{name}/landmarks.bin"),
            reference: format!("{name}/reference.txt"),
            fps: scenario.fps,
            split: "train".into(),
        });
    }
    let manifest = files::DatasetManifest {
        topology: "topology.bin".into(),
        videos,
    };
    manifest.save(&dir.join("manifest.toml"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stgraph::{build_adjacency, build_stgraph, EdgeScheme, RegionConfig};

    #[test]
    fn canonical_topology_has_frozen_statistics() {
        let topo = canonical_face_topology();
        assert_eq!(topo.face_count(), 852);
        assert_eq!(topo.vertex_count(), 457);
        topo.validate_winding().unwrap();
        let sv = build_adjacency(&topo, EdgeScheme::SharedVertex).unwrap();
        let se = build_adjacency(&topo, EdgeScheme::SharedEdge).unwrap();
        assert!((sv.avg_degree() - 12.739).abs() < 0.05, "{}", sv.avg_degree());
        assert!((se.avg_degree() - 3.930).abs() < 0.05, "{}", se.avg_degree());
    }

    #[test]
    fn topology_face_count_is_exact_across_sizes() {
        for target in [3, 7, 12, 13, 15, 24, 53, 96, 150, 200, 213, 216, 500, 852] {
            let topo = make_synthetic_topology(target).unwrap();
            assert_eq!(topo.face_count(), target, "target {target}");
            topo.validate_winding().unwrap();
        }
        assert!(make_synthetic_topology(2).is_err());
    }

    #[test]
    fn static_cap_is_fully_visible() {
        let topo = Arc::new(make_synthetic_topology(200).unwrap());
        let scenario = FacePulseScenario {
            faces: 200,
            duration_s: 0.2,
            noise_sigma: 0.0,
            ..FacePulseScenario::default()
        };
        let mesh = scenario.animate(&topo).unwrap();
        let verts = mesh.frame(0);
        for &face in topo.faces() {
            assert!(!is_occluded(face_normal(verts, face).unwrap()));
        }
    }

    #[test]
    fn yaw_occludes_rim_faces() {
        let topo = Arc::new(make_synthetic_topology(200).unwrap());
        let scenario = FacePulseScenario {
            faces: 200,
            duration_s: 8.0,
            fps: 12.0,
            motion: MotionProfile {
                yaw_deg: 25.0,
                ..MotionProfile::none()
            },
            ..FacePulseScenario::default()
        };
        let mesh = scenario.animate(&topo).unwrap();
        // At peak yaw (quarter period = 1.75 s -> frame 21) some faces turn away.
        let verts = mesh.frame(21);
        let occluded = topo
            .faces()
            .iter()
            .filter(|&&f| is_occluded(face_normal(verts, f).unwrap()))
            .count();
        assert!(occluded > 0, "expected occlusions at peak yaw");
        assert!(occluded < topo.face_count() / 2);
    }

    #[test]
    fn rendered_face_means_track_the_pulse_exactly() {
        // Zero noise: the measured mean color of every visible region must
        // equal base * (1 + amplitude_i * bvp(t)) up to f32 rounding.
        let topo = Arc::new(make_synthetic_topology(96).unwrap());
        let scenario = FacePulseScenario {
            faces: 96,
            image_size: 96,
            duration_s: 0.5,
            fps: 20.0,
            noise_sigma: 0.0,
            ..FacePulseScenario::default()
        };
        let (mesh, frames) = scenario.render_video(&topo).unwrap();
        let (g, _) = build_stgraph(&frames, &mesh, &RegionConfig::default()).unwrap();
        let amplitudes = scenario.face_amplitudes(&topo);
        for t in 0..g.frames {
            let b = scenario.bvp_value(t as f64 / scenario.fps);
            for n in 0..g.nodes {
                if g.occluded(t, n) {
                    continue;
                }
                for c in 0..3 {
                    let expected = scenario.base_color[c] * (1.0 + amplitudes[n] * b);
                    assert!(
                        (g.feature(c, t, n) as f64 - expected).abs() < 1e-5,
                        "node {n} frame {t} channel {c}"
                    );
                }
            }
        }
    }

    #[test]
    fn rendering_is_deterministic_including_noise() {
        let topo = Arc::new(make_synthetic_topology(53).unwrap());
        let scenario = FacePulseScenario {
            faces: 53,
            image_size: 64,
            duration_s: 0.25,
            fps: 16.0,
            noise_sigma: 0.01,
            ..FacePulseScenario::default()
        };
        let (_, f1) = scenario.render_video(&topo).unwrap();
        let (_, f2) = scenario.render_video(&topo).unwrap();
        assert_eq!(f1, f2);
        let other = FacePulseScenario {
            seed: 1,
            ..scenario
        };
        let (_, f3) = other.render_video(&topo).unwrap();
        assert_ne!(f1, f3);
    }

    #[test]
    fn ramp_phase_matches_numeric_integration() {
        let p = PulseProfile::LinearRamp {
            start_hz: 1.0,
            end_hz: 1.5,
        };
        let duration = 10.0;
        let mut acc = 0.0;
        let dt = 1e-4;
        let mut t = 0.0;
        while t < 4.0 {
            acc += p.instantaneous_hz(t + dt / 2.0, duration) * dt;
            t += dt;
        }
        assert!((acc - p.phase(4.0, duration)).abs() < 1e-6);
    }

    #[test]
    fn scenario_validation_catches_bad_inputs() {
        let base = FacePulseScenario::default();
        assert!(base.validate().is_ok());
        assert!(FacePulseScenario {
            fps: 10.0,
            ..base.clone()
        }
        .validate()
        .is_err());
        assert!(FacePulseScenario {
            pulse: PulseProfile::Constant { hz: 8.0 },
            ..base.clone()
        }
        .validate()
        .is_err());
        assert!(FacePulseScenario {
            amplitude: -0.1,
            ..base
        }
        .validate()
        .is_err());
    }

    #[test]
    fn emit_dataset_round_trips_through_readers() {
        let dir = tempfile::tempdir().unwrap();
        let scenario = FacePulseScenario {
            faces: 53,
            image_size: 64,
            duration_s: 0.5,
            fps: 16.0,
            ..FacePulseScenario::default()
        };
        let manifest = emit_dataset(
            dir.path(),
            &[
                ("video_000".into(), scenario.clone()),
                (
                    "video_001".into(),
                    FacePulseScenario {
                        seed: 9,
                        ..scenario
                    },
                ),
            ],
        )
        .unwrap();
        assert_eq!(manifest.videos.len(), 2);
        let loaded = files::DatasetManifest::load(&dir.path().join("manifest.toml")).unwrap();
        assert_eq!(loaded, manifest);
        let faces = files::read_topology(&dir.path().join(&manifest.topology)).unwrap();
        assert_eq!(faces.len(), 53);
        let lm = files::read_landmarks(&dir.path().join(&manifest.videos[0].landmarks)).unwrap();
        assert_eq!(lm.frame_count, 8);
        let (t, v) = files::read_waveform(&dir.path().join(&manifest.videos[0].reference)).unwrap();
        assert_eq!(t.len(), 8);
        assert_eq!(v.len(), 8);
        let src = files::PngDirSource::open(&dir.path().join(&manifest.videos[0].frames_dir)).unwrap();
        use crate::stgraph::FrameSource;
        assert_eq!(src.frame_count(), 8);
        assert_eq!(src.dimensions(), (64, 64));
    }

    #[test]
    fn face_pixels_partition_for_the_canonical_mesh() {
        // The 852-face cap (with edge flips) must still rasterize without
        // overlaps when front-facing.
        let topo = canonical_face_topology();
        let scenario = FacePulseScenario {
            duration_s: 0.2,
            fps: 15.0,
            ..FacePulseScenario::default()
        };
        let mesh = scenario.animate(&Arc::new(topo.clone())).unwrap();
        let verts = mesh.frame(0);
        let mut seen = std::collections::HashSet::new();
        for &face in topo.faces() {
            let proj = project_face(verts, face).unwrap();
            for p in rasterize_triangle(&proj.pts, 128, 128) {
                assert!(seen.insert(p), "pixel {p:?} covered twice");
            }
        }
        assert!(seen.len() > 6_000, "cap should cover a large area");
    }
}
