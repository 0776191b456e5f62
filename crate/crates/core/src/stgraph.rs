//! Construction of spatiotemporal graphs from video frames and tracked
//! meshes: one node per surface region, RGB mean features per frame, an
//! occlusion mask from back-face culling, and a time-invariant spatial
//! adjacency.

use rayon::prelude::*;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::SparseAdjacency;
use crate::mesh::{
    face_centroid, face_normal, is_occluded, project_face, CanonicalTopology, MeshSequence, Vec3,
};
use crate::raster::rasterize_triangle;

/// An RGB frame with channel values in `[0, 1]`, row-major `H x W x 3`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f32>,
}

impl FrameImage {
    pub fn new(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; (width * height * 3) as usize],
        }
    }

    #[inline]
    pub fn pixel(&self, x: u32, y: u32) -> [f32; 3] {
        let i = ((y * self.width + x) * 3) as usize;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: u32, y: u32, rgb: [f32; 3]) {
        let i = ((y * self.width + x) * 3) as usize;
        self.data[i] = rgb[0];
        self.data[i + 1] = rgb[1];
        self.data[i + 2] = rgb[2];
    }
}

/// Source of frames for graph construction. Implementations must be cheap
/// to query concurrently; frames are fetched per time step so full videos
/// never need to sit in memory.
pub trait FrameSource: Sync {
    fn frame_count(&self) -> usize;
    fn frame(&self, t: usize) -> Result<FrameImage>;
    fn dimensions(&self) -> (u32, u32);
}

impl FrameSource for Vec<FrameImage> {
    fn frame_count(&self) -> usize {
        self.len()
    }
    fn frame(&self, t: usize) -> Result<FrameImage> {
        Ok(self[t].clone())
    }
    fn dimensions(&self) -> (u32, u32) {
        (self[0].width, self[0].height)
    }
}

/// How nodes are connected spatially.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EdgeScheme {
    /// Faces sharing at least one vertex are adjacent (plus self edges).
    SharedVertex,
    /// Faces sharing a full edge (two vertices) are adjacent.
    SharedEdge,
    /// Self edges only; no spatial mixing.
    SelfOnly,
    /// Every pair of nodes adjacent.
    FullyConnected,
    /// Random symmetric graph with the same undirected edge count as
    /// `SharedVertex` on the same topology.
    RandomMatchedDegree { seed: u64 },
    /// 8-neighborhood on a grid of nodes (for grid region schemes).
    Grid8,
}

impl EdgeScheme {
    pub fn tag(&self) -> String {
        match self {
            EdgeScheme::SharedVertex => "shared_vertex".into(),
            EdgeScheme::SharedEdge => "shared_edge".into(),
            EdgeScheme::SelfOnly => "self_only".into(),
            EdgeScheme::FullyConnected => "fully_connected".into(),
            EdgeScheme::RandomMatchedDegree { seed } => format!("random_matched_degree:{seed}"),
            EdgeScheme::Grid8 => "grid8".into(),
        }
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        if let Some(seed) = tag.strip_prefix("random_matched_degree:") {
            let seed: u64 = seed
                .parse()
                .map_err(|_| Error::Config(format!("bad edge scheme tag {tag}")))?;
            return Ok(EdgeScheme::RandomMatchedDegree { seed });
        }
        match tag {
            "shared_vertex" => Ok(EdgeScheme::SharedVertex),
            "shared_edge" => Ok(EdgeScheme::SharedEdge),
            "self_only" => Ok(EdgeScheme::SelfOnly),
            "fully_connected" => Ok(EdgeScheme::FullyConnected),
            "grid8" => Ok(EdgeScheme::Grid8),
            _ => Err(Error::Config(format!("unknown edge scheme tag {tag}"))),
        }
    }
}

/// Adjacency over the faces of a topology under the given scheme.
pub fn build_adjacency(topology: &CanonicalTopology, scheme: EdgeScheme) -> Result<SparseAdjacency> {
    let f = topology.face_count();
    match scheme {
        EdgeScheme::SelfOnly => Ok(SparseAdjacency::identity(f)),
        EdgeScheme::FullyConnected => Ok(SparseAdjacency::full(f)),
        EdgeScheme::SharedVertex => {
            let mut vertex_faces: Vec<Vec<u32>> = vec![Vec::new(); topology.vertex_count()];
            for (i, face) in topology.faces().iter().enumerate() {
                for &v in face {
                    vertex_faces[v as usize].push(i as u32);
                }
            }
            let rows: Vec<Vec<u32>> = topology
                .faces()
                .iter()
                .enumerate()
                .map(|(i, face)| {
                    let mut row: Vec<u32> = face
                        .iter()
                        .flat_map(|&v| vertex_faces[v as usize].iter().copied())
                        .collect();
                    row.push(i as u32);
                    row
                })
                .collect();
            SparseAdjacency::from_rows(rows)
        }
        EdgeScheme::SharedEdge => {
            use std::collections::HashMap;
            let mut edge_faces: HashMap<(u32, u32), Vec<u32>> = HashMap::new();
            for (i, face) in topology.faces().iter().enumerate() {
                for k in 0..3 {
                    let a = face[k];
                    let b = face[(k + 1) % 3];
                    let key = (a.min(b), a.max(b));
                    edge_faces.entry(key).or_default().push(i as u32);
                }
            }
            let mut rows: Vec<Vec<u32>> = (0..f as u32).map(|i| vec![i]).collect();
            for faces in edge_faces.values() {
                if faces.len() > 2 {
                    return Err(Error::Topology(
                        "edge shared by more than two faces".into(),
                    ));
                }
                if let [a, b] = faces[..] {
                    rows[a as usize].push(b);
                    rows[b as usize].push(a);
                }
            }
            SparseAdjacency::from_rows(rows)
        }
        EdgeScheme::RandomMatchedDegree { seed } => {
            let reference = build_adjacency(topology, EdgeScheme::SharedVertex)?;
            let target = reference.undirected_edge_count();
            let max_pairs = f * (f - 1) / 2;
            if target > max_pairs {
                return Err(Error::Topology("edge budget exceeds complete graph".into()));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut chosen = std::collections::HashSet::with_capacity(target);
            let mut pairs = Vec::with_capacity(target);
            while pairs.len() < target {
                let i = rng.gen_range(0..f as u32);
                let j = rng.gen_range(0..f as u32);
                if i == j {
                    continue;
                }
                let key = (i.min(j), i.max(j));
                if chosen.insert(key) {
                    pairs.push(key);
                }
            }
            SparseAdjacency::from_pairs_symmetrized(f, &pairs)
        }
        EdgeScheme::Grid8 => Err(Error::Config(
            "grid adjacency needs grid dimensions; use grid8_adjacency".into(),
        )),
    }
}

/// 8-neighborhood adjacency (plus self edges) for a `rows x cols` grid of
/// nodes in row-major order.
pub fn grid8_adjacency(rows: u32, cols: u32) -> Result<SparseAdjacency> {
    if rows == 0 || cols == 0 {
        return Err(Error::Shape("grid dimensions must be positive".into()));
    }
    let n = (rows * cols) as usize;
    let mut out: Vec<Vec<u32>> = Vec::with_capacity(n);
    for r in 0..rows as i64 {
        for c in 0..cols as i64 {
            let mut row = Vec::with_capacity(9);
            for dr in -1..=1i64 {
                for dc in -1..=1i64 {
                    let (nr, nc) = (r + dr, c + dc);
                    if nr >= 0 && nr < rows as i64 && nc >= 0 && nc < cols as i64 {
                        row.push((nr * cols as i64 + nc) as u32);
                    }
                }
            }
            out.push(row);
        }
    }
    SparseAdjacency::from_rows(out)
}

/// Which image regions become nodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RegionScheme {
    /// Projected mesh faces with back-face occlusion (default).
    Mesh3D,
    /// Projected mesh faces without any occlusion test; only degenerate
    /// projections are zeroed.
    Mesh2D,
    /// Grid cells inside a per-frame bounding box of the projected mesh.
    BoxesPerFrame,
    /// Grid cells inside the frame-0 bounding box, frozen for the video.
    BoxStatic,
    /// Grid cells tiling the whole frame; mesh ignored.
    VideoGrid,
}

impl RegionScheme {
    pub fn is_mesh(&self) -> bool {
        matches!(self, RegionScheme::Mesh3D | RegionScheme::Mesh2D)
    }
}

/// How a node's pixels are turned into one RGB sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureMode {
    /// Mean over every pixel of the region.
    FaceAverage,
    /// The single pixel containing the region centroid.
    CentroidPixel,
    /// Mean over a fixed `h x w` patch centered on the region centroid
    /// (odd dimensions).
    CentroidPatch { h: u32, w: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RegionConfig {
    pub scheme: RegionScheme,
    /// Grid side length for the grid-based schemes.
    pub grid_dim: u32,
    pub feature_mode: FeatureMode,
    /// Spatial connectivity; `None` picks the scheme default
    /// (`SharedVertex` for mesh schemes, `Grid8` for grids).
    pub edge_scheme: Option<EdgeScheme>,
}

impl Default for RegionConfig {
    fn default() -> Self {
        Self {
            scheme: RegionScheme::Mesh3D,
            grid_dim: 29,
            feature_mode: FeatureMode::FaceAverage,
            edge_scheme: None,
        }
    }
}

impl RegionConfig {
    pub fn effective_edge_scheme(&self) -> EdgeScheme {
        self.edge_scheme.unwrap_or(if self.scheme.is_mesh() {
            EdgeScheme::SharedVertex
        } else {
            EdgeScheme::Grid8
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !self.scheme.is_mesh() && self.grid_dim == 0 {
            return Err(Error::Config("grid_dim must be positive".into()));
        }
        if let FeatureMode::CentroidPatch { h, w } = self.feature_mode {
            if h % 2 == 0 || w % 2 == 0 || h == 0 || w == 0 {
                return Err(Error::Config(
                    "centroid patch dimensions must be odd and positive".into(),
                ));
            }
        }
        if matches!(self.edge_scheme, Some(EdgeScheme::Grid8)) && self.scheme.is_mesh() {
            return Err(Error::Config(
                "grid8 adjacency requires a grid region scheme".into(),
            ));
        }
        Ok(())
    }

    /// Stable textual descriptor stored in caches and checkpoints.
    pub fn tag(&self) -> String {
        let scheme = match self.scheme {
            RegionScheme::Mesh3D => "mesh3d".to_string(),
            RegionScheme::Mesh2D => "mesh2d".to_string(),
            RegionScheme::BoxesPerFrame => format!("boxes_per_frame{}", self.grid_dim),
            RegionScheme::BoxStatic => format!("box_static{}", self.grid_dim),
            RegionScheme::VideoGrid => format!("video_grid{}", self.grid_dim),
        };
        let feature = match self.feature_mode {
            FeatureMode::FaceAverage => "face_average".to_string(),
            FeatureMode::CentroidPixel => "centroid_pixel".to_string(),
            FeatureMode::CentroidPatch { h, w } => format!("centroid_patch{h}x{w}"),
        };
        format!("{scheme}/{feature}/{}", self.effective_edge_scheme().tag())
    }

    pub fn from_tag(tag: &str) -> Result<Self> {
        let parts: Vec<&str> = tag.split('/').collect();
        if parts.len() != 3 {
            return Err(Error::Config(format!("bad region tag {tag}")));
        }
        let parse_dim = |s: &str, prefix: &str| -> Result<u32> {
            s.strip_prefix(prefix)
                .and_then(|d| d.parse().ok())
                .ok_or_else(|| Error::Config(format!("bad region tag {tag}")))
        };
        let (scheme, grid_dim) = if parts[0] == "mesh3d" {
            (RegionScheme::Mesh3D, 29)
        } else if parts[0] == "mesh2d" {
            (RegionScheme::Mesh2D, 29)
        } else if parts[0].starts_with("boxes_per_frame") {
            (
                RegionScheme::BoxesPerFrame,
                parse_dim(parts[0], "boxes_per_frame")?,
            )
        } else if parts[0].starts_with("box_static") {
            (RegionScheme::BoxStatic, parse_dim(parts[0], "box_static")?)
        } else if parts[0].starts_with("video_grid") {
            (RegionScheme::VideoGrid, parse_dim(parts[0], "video_grid")?)
        } else {
            return Err(Error::Config(format!("bad region tag {tag}")));
        };
        let feature_mode = if parts[1] == "face_average" {
            FeatureMode::FaceAverage
        } else if parts[1] == "centroid_pixel" {
            FeatureMode::CentroidPixel
        } else if let Some(dims) = parts[1].strip_prefix("centroid_patch") {
            let (h, w) = dims
                .split_once('x')
                .and_then(|(h, w)| Some((h.parse().ok()?, w.parse().ok()?)))
                .ok_or_else(|| Error::Config(format!("bad region tag {tag}")))?;
            FeatureMode::CentroidPatch { h, w }
        } else {
            return Err(Error::Config(format!("bad region tag {tag}")));
        };
        Ok(Self {
            scheme,
            grid_dim,
            feature_mode,
            edge_scheme: Some(EdgeScheme::from_tag(parts[2])?),
        })
    }
}

/// A facial spatiotemporal graph: `C x T x N` node features (RGB in
/// `[0, 1]`), a `T x N` occlusion mask, and a binary spatial adjacency that
/// is symmetric with unit diagonal and shared by all frames. Occluded
/// entries carry zero features.
#[derive(Debug, Clone, PartialEq)]
pub struct StGraph {
    pub channels: usize,
    pub frames: usize,
    pub nodes: usize,
    /// Channel-major layout: `features[(c * T + t) * N + n]`.
    pub features: Vec<f32>,
    /// Frame-major: `occlusion[t * N + n]`.
    pub occlusion: Vec<bool>,
    pub adjacency: SparseAdjacency,
    pub fps: f64,
    pub region_tag: String,
}

impl StGraph {
    #[inline]
    pub fn feature(&self, c: usize, t: usize, n: usize) -> f32 {
        self.features[(c * self.frames + t) * self.nodes + n]
    }

    #[inline]
    pub fn occluded(&self, t: usize, n: usize) -> bool {
        self.occlusion[t * self.nodes + n]
    }

    /// Time series of one channel at one node.
    pub fn node_series(&self, c: usize, n: usize) -> Vec<f32> {
        (0..self.frames).map(|t| self.feature(c, t, n)).collect()
    }

    /// Fraction of (t, n) slots that are visible.
    pub fn visibility(&self) -> f64 {
        let vis = self.occlusion.iter().filter(|&&o| !o).count();
        vis as f64 / self.occlusion.len().max(1) as f64
    }

    /// Checks the structural invariants; ingest runs this on every graph.
    pub fn validate(&self) -> Result<()> {
        let expect = self.channels * self.frames * self.nodes;
        if self.features.len() != expect || self.occlusion.len() != self.frames * self.nodes {
            return Err(Error::Shape("stgraph buffer sizes inconsistent".into()));
        }
        if self.adjacency.node_count() != self.nodes {
            return Err(Error::Shape("adjacency node count mismatch".into()));
        }
        if !(self.fps.is_finite() && self.fps > 0.0) {
            return Err(Error::Data("stgraph fps must be positive".into()));
        }
        if !self.adjacency.is_symmetric() || !self.adjacency.has_unit_diagonal() {
            return Err(Error::Data(
                "adjacency must be symmetric with unit diagonal".into(),
            ));
        }
        for v in &self.features {
            if !(0.0..=1.0).contains(v) {
                return Err(Error::Data(format!("feature {v} outside [0,1]")));
            }
        }
        for t in 0..self.frames {
            for n in 0..self.nodes {
                if self.occluded(t, n) {
                    for c in 0..self.channels {
                        if self.feature(c, t, n) != 0.0 {
                            return Err(Error::Data(format!(
                                "occluded node {n} at frame {t} has nonzero features"
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Construction statistics useful for diagnostics and tests.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BuildStats {
    /// Mean pixel count over visible (node, frame) slots.
    pub mean_pixels_per_node: f64,
    pub visible_fraction: f64,
}

/// Mean RGB over `pixels` of `frame`, as the node feature; occluded or
/// empty regions yield zeros.
pub fn node_feature(frame: &FrameImage, pixels: &[(u32, u32)], occluded: bool) -> [f32; 3] {
    if occluded || pixels.is_empty() {
        return [0.0; 3];
    }
    let mut acc = [0.0f64; 3];
    for &(x, y) in pixels {
        let rgb = frame.pixel(x, y);
        for c in 0..3 {
            acc[c] += rgb[c] as f64;
        }
    }
    let inv = 1.0 / pixels.len() as f64;
    [
        (acc[0] * inv) as f32,
        (acc[1] * inv) as f32,
        (acc[2] * inv) as f32,
    ]
}

fn centroid_pixels(
    cx: f64,
    cy: f64,
    mode: FeatureMode,
    width: u32,
    height: u32,
) -> Vec<(u32, u32)> {
    let (h, w) = match mode {
        FeatureMode::CentroidPixel => (1, 1),
        FeatureMode::CentroidPatch { h, w } => (h as i64, w as i64),
        FeatureMode::FaceAverage => unreachable!(),
    };
    let px = cx.floor() as i64;
    let py = cy.floor() as i64;
    let mut out = Vec::new();
    for y in (py - (h - 1) / 2)..=(py + (h - 1) / 2) {
        for x in (px - (w - 1) / 2)..=(px + (w - 1) / 2) {
            if x >= 0 && y >= 0 && (x as u32) < width && (y as u32) < height {
                out.push((x as u32, y as u32));
            }
        }
    }
    out
}

/// Pixels of grid cell `(row, col)` for a grid of `dim x dim` cells over the
/// box `[x0, x1) x [y0, y1)`: pixel centers inside the half-open cell
/// rectangle, clipped to the image.
fn grid_cell_pixels(
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
    dim: u32,
    row: u32,
    col: u32,
    width: u32,
    height: u32,
) -> Vec<(u32, u32)> {
    let cw = (x1 - x0) / dim as f64;
    let ch = (y1 - y0) / dim as f64;
    if !(cw > 0.0 && ch > 0.0) {
        return Vec::new();
    }
    let cx0 = x0 + col as f64 * cw;
    let cx1 = x0 + (col + 1) as f64 * cw;
    let cy0 = y0 + row as f64 * ch;
    let cy1 = y0 + (row + 1) as f64 * ch;
    // Centers px + 0.5 in [cx0, cx1).
    let px0 = (cx0 - 0.5).ceil().max(0.0) as i64;
    let px1 = ((cx1 - 0.5).ceil() as i64 - 1).min(width as i64 - 1);
    let py0 = (cy0 - 0.5).ceil().max(0.0) as i64;
    let py1 = ((cy1 - 0.5).ceil() as i64 - 1).min(height as i64 - 1);
    let mut out = Vec::new();
    for y in py0..=py1 {
        for x in px0..=px1 {
            out.push((x as u32, y as u32));
        }
    }
    out
}

fn projected_bbox(verts: &[Vec3]) -> (f64, f64, f64, f64) {
    let mut x0 = f64::INFINITY;
    let mut y0 = f64::INFINITY;
    let mut x1 = f64::NEG_INFINITY;
    let mut y1 = f64::NEG_INFINITY;
    for v in verts {
        x0 = x0.min(v[0]);
        x1 = x1.max(v[0]);
        y0 = y0.min(v[1]);
        y1 = y1.max(v[1]);
    }
    (x0, y0, x1, y1)
}

/// Canonical node positions for clustering: face centroids for mesh
/// schemes, unit-spaced cell centers for grid schemes.
pub fn node_positions(topology: &CanonicalTopology, config: &RegionConfig) -> Vec<Vec3> {
    if config.scheme.is_mesh() {
        topology.canonical_face_centroids()
    } else {
        let g = config.grid_dim;
        let mut out = Vec::with_capacity((g * g) as usize);
        for r in 0..g {
            for c in 0..g {
                out.push([c as f64 + 0.5, r as f64 + 0.5, 0.0]);
            }
        }
        out
    }
}

/// Number of nodes the scheme produces for this topology.
pub fn node_count(topology: &CanonicalTopology, config: &RegionConfig) -> usize {
    if config.scheme.is_mesh() {
        topology.face_count()
    } else {
        (config.grid_dim * config.grid_dim) as usize
    }
}

/// Builds the spatiotemporal graph for a full sequence. Frames are
/// processed independently (and in parallel); the result is independent of
/// scheduling.
pub fn build_stgraph(
    frames: &dyn FrameSource,
    mesh: &MeshSequence,
    config: &RegionConfig,
) -> Result<(StGraph, BuildStats)> {
    config.validate()?;
    let t_len = mesh.frame_count();
    if frames.frame_count() != t_len {
        return Err(Error::Data(format!(
            "frame count {} != mesh frame count {}",
            frames.frame_count(),
            t_len
        )));
    }
    let topology = mesh.topology().as_ref();
    let n = node_count(topology, config);
    let (width, height) = frames.dimensions();

    let adjacency = match config.effective_edge_scheme() {
        EdgeScheme::Grid8 => grid8_adjacency(config.grid_dim, config.grid_dim)?,
        scheme => build_adjacency(topology, scheme)?,
    };
    if adjacency.node_count() != n {
        return Err(Error::Shape(
            "edge scheme node count does not match region scheme".into(),
        ));
    }

    // Frame-0 box for the static grid scheme.
    let static_box = match config.scheme {
        RegionScheme::BoxStatic => Some(projected_bbox(mesh.frame(0))),
        _ => None,
    };

    struct FrameOut {
        rgb: Vec<[f32; 3]>,
        occluded: Vec<bool>,
        pixel_count: usize,
        visible: usize,
    }

    let per_frame: Result<Vec<FrameOut>> = (0..t_len)
        .into_par_iter()
        .map(|t| {
            let image = frames.frame(t)?;
            if image.width != width || image.height != height {
                return Err(Error::Data(format!(
                    "frame {t} has size {}x{}, expected {width}x{height}",
                    image.width, image.height
                )));
            }
            let verts = mesh.frame(t);
            let mut rgb = vec![[0.0f32; 3]; n];
            let mut occluded = vec![false; n];
            let mut pixel_count = 0usize;
            let mut visible = 0usize;

            let mut handle = |i: usize, pixels: Vec<(u32, u32)>, occ: bool| {
                let occ = occ || pixels.is_empty();
                occluded[i] = occ;
                if !occ {
                    rgb[i] = node_feature(&image, &pixels, false);
                    pixel_count += pixels.len();
                    visible += 1;
                }
            };

            if config.scheme.is_mesh() {
                for (i, &face) in topology.faces().iter().enumerate() {
                    let proj = project_face(verts, face)?;
                    let occ = match config.scheme {
                        RegionScheme::Mesh3D => {
                            is_occluded(face_normal(verts, face)?) || proj.degenerate
                        }
                        _ => proj.degenerate,
                    };
                    if occ {
                        handle(i, Vec::new(), true);
                        continue;
                    }
                    let pixels = match config.feature_mode {
                        FeatureMode::FaceAverage => {
                            rasterize_triangle(&proj.pts, width, height)
                        }
                        mode => {
                            let c = face_centroid(verts, face)?;
                            centroid_pixels(c[0], c[1], mode, width, height)
                        }
                    };
                    handle(i, pixels, false);
                }
            } else {
                let (x0, y0, x1, y1) = match config.scheme {
                    RegionScheme::BoxesPerFrame => projected_bbox(verts),
                    RegionScheme::BoxStatic => static_box.unwrap(),
                    RegionScheme::VideoGrid => (0.0, 0.0, width as f64, height as f64),
                    _ => unreachable!(),
                };
                let g = config.grid_dim;
                for r in 0..g {
                    for c in 0..g {
                        let i = (r * g + c) as usize;
                        let pixels = match config.feature_mode {
                            FeatureMode::FaceAverage => grid_cell_pixels(
                                x0, y0, x1, y1, g, r, c, width, height,
                            ),
                            mode => {
                                let cw = (x1 - x0) / g as f64;
                                let ch = (y1 - y0) / g as f64;
                                let cx = x0 + (c as f64 + 0.5) * cw;
                                let cy = y0 + (r as f64 + 0.5) * ch;
                                if cw > 0.0 && ch > 0.0 {
                                    centroid_pixels(cx, cy, mode, width, height)
                                } else {
                                    Vec::new()
                                }
                            }
                        };
                        handle(i, pixels, false);
                    }
                }
            }
            Ok(FrameOut {
                rgb,
                occluded,
                pixel_count,
                visible,
            })
        })
        .collect();
    let per_frame = per_frame?;

    let mut features = vec![0.0f32; 3 * t_len * n];
    let mut occlusion = vec![false; t_len * n];
    let mut total_pixels = 0usize;
    let mut total_visible = 0usize;
    for (t, fo) in per_frame.iter().enumerate() {
        for i in 0..n {
            occlusion[t * n + i] = fo.occluded[i];
            for c in 0..3 {
                features[(c * t_len + t) * n + i] = fo.rgb[i][c].clamp(0.0, 1.0);
            }
        }
        total_pixels += fo.pixel_count;
        total_visible += fo.visible;
    }

    let graph = StGraph {
        channels: 3,
        frames: t_len,
        nodes: n,
        features,
        occlusion,
        adjacency,
        fps: mesh.fps(),
        region_tag: config.tag(),
    };
    let stats = BuildStats {
        mean_pixels_per_node: if total_visible > 0 {
            total_pixels as f64 / total_visible as f64
        } else {
            0.0
        },
        visible_fraction: total_visible as f64 / (t_len * n) as f64,
    };
    Ok((graph, stats))
}

/// Coarsens the node set of a graph down to `target_nodes` by repeated
/// quarter-ratio clustering on `positions` (the canonical node geometry),
/// averaging features per cluster. A pooled node is occluded at `t` only
/// when all of its members are. Returns the coarse graph and the pooled
/// positions.
pub fn coarsen_input_nodes(
    graph: &StGraph,
    positions: &[Vec3],
    target_nodes: usize,
) -> Result<(StGraph, Vec<Vec3>)> {
    use crate::pool;
    if positions.len() != graph.nodes {
        return Err(Error::Shape("positions length != node count".into()));
    }
    if target_nodes < 1 || target_nodes > graph.nodes {
        return Err(Error::Shape(format!(
            "cannot coarsen {} nodes to {target_nodes}",
            graph.nodes
        )));
    }
    let mut g = graph.clone();
    let mut pos = positions.to_vec();
    while g.nodes > target_nodes {
        let quarter = (g.nodes / 4).max(1);
        let k = quarter.max(target_nodes);
        let assignment = pool::compute_clusters_k(&pos, k)?;
        let features = pool::pool_node_axis(&g.features, g.nodes, &assignment, k)?;
        let adjacency = pool::pool_adjacency(&g.adjacency, &assignment, k)?;
        let mut occlusion = vec![true; g.frames * k];
        for t in 0..g.frames {
            for i in 0..g.nodes {
                if !g.occluded(t, i) {
                    occlusion[t * k + assignment[i] as usize] = false;
                }
            }
        }
        let mut new_pos = vec![[0.0f64; 3]; k];
        let sizes = pool::cluster_sizes(&assignment, k)?;
        for (i, p) in pos.iter().enumerate() {
            let c = assignment[i] as usize;
            for a in 0..3 {
                new_pos[c][a] += p[a];
            }
        }
        for (c, p) in new_pos.iter_mut().enumerate() {
            for a in 0..3 {
                p[a] /= sizes[c] as f64;
            }
        }
        g = StGraph {
            channels: g.channels,
            frames: g.frames,
            nodes: k,
            features,
            occlusion,
            adjacency,
            fps: g.fps,
            region_tag: format!("{}|coarse{k}", g.region_tag),
        };
        pos = new_pos;
    }
    Ok((g, pos))
}

const STG_MAGIC: &[u8; 4] = b"STG1";

/// Writes the binary graph cache (little-endian): magic, version, dims
/// `C/T/N`, fps, region tag, features (channel-major f32), occlusion
/// (packed bits, frame-major, LSB first), adjacency entries as index pairs.
pub fn write_stgraph_cache(path: &std::path::Path, g: &StGraph) -> Result<()> {
    use byteorder::{LittleEndian, WriteBytesExt};
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = std::io::BufWriter::new(file);
    let ioerr = |e: std::io::Error| Error::io(path.display().to_string(), e);
    w.write_all(STG_MAGIC).map_err(ioerr)?;
    w.write_u32::<LittleEndian>(1).map_err(ioerr)?;
    w.write_u32::<LittleEndian>(g.channels as u32).map_err(ioerr)?;
    w.write_u32::<LittleEndian>(g.frames as u32).map_err(ioerr)?;
    w.write_u32::<LittleEndian>(g.nodes as u32).map_err(ioerr)?;
    w.write_f64::<LittleEndian>(g.fps).map_err(ioerr)?;
    let tag = g.region_tag.as_bytes();
    w.write_u32::<LittleEndian>(tag.len() as u32).map_err(ioerr)?;
    w.write_all(tag).map_err(ioerr)?;
    for &v in &g.features {
        w.write_f32::<LittleEndian>(v).map_err(ioerr)?;
    }
    let bits = g.occlusion.len();
    let mut packed = vec![0u8; bits.div_ceil(8)];
    for (i, &o) in g.occlusion.iter().enumerate() {
        if o {
            packed[i / 8] |= 1 << (i % 8);
        }
    }
    w.write_all(&packed).map_err(ioerr)?;
    let entries: Vec<(u32, u32)> = g.adjacency.entries().collect();
    w.write_u64::<LittleEndian>(entries.len() as u64).map_err(ioerr)?;
    for (i, j) in entries {
        w.write_u32::<LittleEndian>(i).map_err(ioerr)?;
        w.write_u32::<LittleEndian>(j).map_err(ioerr)?;
    }
    Ok(())
}

pub fn read_stgraph_cache(path: &std::path::Path) -> Result<StGraph> {
    use byteorder::{LittleEndian, ReadBytesExt};
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = std::io::BufReader::new(file);
    let p = path.display().to_string();
    let ioerr = |e: std::io::Error| Error::io(p.clone(), e);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(ioerr)?;
    if &magic != STG_MAGIC {
        return Err(Error::format(&p, "bad magic; not a graph cache"));
    }
    let version = r.read_u32::<LittleEndian>().map_err(ioerr)?;
    if version != 1 {
        return Err(Error::format(&p, format!("unsupported version {version}")));
    }
    let channels = r.read_u32::<LittleEndian>().map_err(ioerr)? as usize;
    let frames = r.read_u32::<LittleEndian>().map_err(ioerr)? as usize;
    let nodes = r.read_u32::<LittleEndian>().map_err(ioerr)? as usize;
    let fps = r.read_f64::<LittleEndian>().map_err(ioerr)?;
    let tag_len = r.read_u32::<LittleEndian>().map_err(ioerr)? as usize;
    if tag_len > 4096 {
        return Err(Error::format(&p, "unreasonable tag length"));
    }
    let mut tag = vec![0u8; tag_len];
    r.read_exact(&mut tag).map_err(ioerr)?;
    let region_tag =
        String::from_utf8(tag).map_err(|_| Error::format(&p, "region tag is not utf-8"))?;
    let count = channels
        .checked_mul(frames)
        .and_then(|x| x.checked_mul(nodes))
        .ok_or_else(|| Error::format(&p, "dimension overflow"))?;
    let mut features = vec![0.0f32; count];
    for v in features.iter_mut() {
        *v = r.read_f32::<LittleEndian>().map_err(ioerr)?;
    }
    let bits = frames * nodes;
    let mut packed = vec![0u8; bits.div_ceil(8)];
    r.read_exact(&mut packed).map_err(ioerr)?;
    let occlusion: Vec<bool> = (0..bits).map(|i| packed[i / 8] & (1 << (i % 8)) != 0).collect();
    let entry_count = r.read_u64::<LittleEndian>().map_err(ioerr)? as usize;
    let mut rows: Vec<Vec<u32>> = vec![Vec::new(); nodes];
    for _ in 0..entry_count {
        let i = r.read_u32::<LittleEndian>().map_err(ioerr)?;
        let j = r.read_u32::<LittleEndian>().map_err(ioerr)?;
        if i as usize >= nodes {
            return Err(Error::format(&p, "adjacency index out of range"));
        }
        rows[i as usize].push(j);
    }
    let adjacency = SparseAdjacency::from_rows(rows)?;
    let g = StGraph {
        channels,
        frames,
        nodes,
        features,
        occlusion,
        adjacency,
        fps,
        region_tag,
    };
    g.validate()?;
    Ok(g)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;
    use std::sync::Arc;

    fn flat_quad_mesh() -> (Arc<CanonicalTopology>, MeshSequence) {
        // Two faces tiling a square, one frame, in a 16x16 image.
        let verts3: Vec<Vec3> = vec![
            [2.0, 2.0, -1.0],
            [10.0, 2.0, -1.0],
            [10.0, 10.0, -1.0],
            [2.0, 10.0, -1.0],
        ];
        let topo = Arc::new(
            CanonicalTopology::new(vec![[0, 2, 1], [0, 3, 2]], verts3.clone()).unwrap(),
        );
        let mesh = MeshSequence::new(topo.clone(), verts3, 30.0).unwrap();
        (topo, mesh)
    }

    fn solid_frame(w: u32, h: u32, rgb: [f32; 3]) -> FrameImage {
        let mut f = FrameImage::new(w, h);
        for y in 0..h {
            for x in 0..w {
                f.set_pixel(x, y, rgb);
            }
        }
        f
    }

    #[test]
    fn constant_frame_gives_constant_features() {
        let (_topo, mesh) = flat_quad_mesh();
        let frames = vec![solid_frame(16, 16, [0.25, 0.5, 0.75])];
        let (g, stats) = build_stgraph(&frames, &mesh, &RegionConfig::default()).unwrap();
        g.validate().unwrap();
        assert_eq!((g.channels, g.frames, g.nodes), (3, 1, 2));
        // Winding [0,2,1] gives normals toward -z: visible.
        assert!(!g.occluded(0, 0) && !g.occluded(0, 1));
        for n in 0..2 {
            assert!((g.feature(0, 0, n) - 0.25).abs() < 1e-6);
            assert!((g.feature(1, 0, n) - 0.5).abs() < 1e-6);
            assert!((g.feature(2, 0, n) - 0.75).abs() < 1e-6);
        }
        assert!(stats.mean_pixels_per_node > 10.0);
    }

    #[test]
    fn occluded_faces_have_zero_features() {
        let (topo, _) = flat_quad_mesh();
        // Flip winding of face 0 so its normal points to +z (occluded).
        let verts = topo.canonical_vertices().to_vec();
        let flipped = Arc::new(
            CanonicalTopology::new(vec![[0, 1, 2], [0, 3, 2]], verts.clone()).unwrap(),
        );
        let mesh = MeshSequence::new(flipped, verts, 30.0).unwrap();
        let frames = vec![solid_frame(16, 16, [0.5, 0.5, 0.5])];
        let (g, _) = build_stgraph(&frames, &mesh, &RegionConfig::default()).unwrap();
        assert!(g.occluded(0, 0));
        for c in 0..3 {
            assert_eq!(g.feature(c, 0, 0), 0.0);
        }
        assert!(!g.occluded(0, 1));
        // Same mesh without the occlusion test keeps both faces.
        let cfg2 = RegionConfig {
            scheme: RegionScheme::Mesh2D,
            ..RegionConfig::default()
        };
        let (g2, _) = build_stgraph(&frames, &g2_mesh(), &cfg2).unwrap();
        assert!(!g2.occluded(0, 0));

        fn g2_mesh() -> MeshSequence {
            let verts: Vec<Vec3> = vec![
                [2.0, 2.0, -1.0],
                [10.0, 2.0, -1.0],
                [10.0, 10.0, -1.0],
                [2.0, 10.0, -1.0],
            ];
            let topo = Arc::new(
                CanonicalTopology::new(vec![[0, 1, 2], [0, 3, 2]], verts.clone()).unwrap(),
            );
            MeshSequence::new(topo, verts, 30.0).unwrap()
        }
    }

    #[test]
    fn face_pixels_partition_projected_area() {
        // Face regions of a connected front-facing mesh tile its projection:
        // total pixels over faces equals the pixels of the union.
        let topo = synth::make_synthetic_topology(96).unwrap();
        let scale = 24.0;
        let verts: Vec<Vec3> = topo
            .canonical_vertices()
            .iter()
            .map(|v| [32.0 + scale * v[0], 32.0 + scale * v[1], scale * v[2]])
            .collect();
        let mesh = MeshSequence::new(Arc::new(topo.clone()), verts.clone(), 30.0).unwrap();
        let frames = vec![solid_frame(64, 64, [0.5, 0.5, 0.5])];
        let (g, stats) = build_stgraph(&frames, &mesh, &RegionConfig::default()).unwrap();
        assert!(g.visibility() > 0.99, "convex cap fully visible");

        let mut total = 0usize;
        let mut union = std::collections::HashSet::new();
        for &face in topo.faces() {
            let proj = project_face(&verts, face).unwrap();
            let pixels = rasterize_triangle(&proj.pts, 64, 64);
            total += pixels.len();
            for p in pixels {
                assert!(union.insert(p), "pixel {p:?} covered twice");
            }
        }
        assert_eq!(total, union.len());
        let avg = total as f64 / topo.face_count() as f64;
        assert!((stats.mean_pixels_per_node - avg).abs() < 1e-9);
    }

    #[test]
    fn shared_edge_is_subset_of_shared_vertex() {
        let topo = synth::make_synthetic_topology(216).unwrap();
        let sv = build_adjacency(&topo, EdgeScheme::SharedVertex).unwrap();
        let se = build_adjacency(&topo, EdgeScheme::SharedEdge).unwrap();
        assert!(se.is_subset_of(&sv));
        assert!(sv.is_symmetric() && sv.has_unit_diagonal());
        assert!(se.is_symmetric() && se.has_unit_diagonal());
        assert_eq!(
            build_adjacency(&topo, EdgeScheme::SelfOnly).unwrap().avg_degree(),
            1.0
        );
        assert_eq!(
            build_adjacency(&topo, EdgeScheme::FullyConnected).unwrap().avg_degree(),
            216.0
        );
    }

    #[test]
    fn random_matched_degree_matches_edge_count_and_seed() {
        let topo = synth::make_synthetic_topology(150).unwrap();
        let sv = build_adjacency(&topo, EdgeScheme::SharedVertex).unwrap();
        let r1 = build_adjacency(&topo, EdgeScheme::RandomMatchedDegree { seed: 5 }).unwrap();
        let r2 = build_adjacency(&topo, EdgeScheme::RandomMatchedDegree { seed: 5 }).unwrap();
        let r3 = build_adjacency(&topo, EdgeScheme::RandomMatchedDegree { seed: 6 }).unwrap();
        assert_eq!(r1, r2);
        assert_ne!(r1, r3);
        assert_eq!(r1.undirected_edge_count(), sv.undirected_edge_count());
        assert!(r1.is_symmetric() && r1.has_unit_diagonal());
    }

    #[test]
    fn grid8_interior_degree() {
        let a = grid8_adjacency(5, 5).unwrap();
        // Interior node: 8 neighbors + self.
        assert_eq!(a.degree(12), 9);
        // Corner: 3 neighbors + self.
        assert_eq!(a.degree(0), 4);
        assert!(a.is_symmetric() && a.has_unit_diagonal());
    }

    #[test]
    fn video_grid_covers_frame_exactly() {
        let (_, mesh) = flat_quad_mesh();
        let cfg = RegionConfig {
            scheme: RegionScheme::VideoGrid,
            grid_dim: 4,
            ..RegionConfig::default()
        };
        let frames = vec![solid_frame(16, 16, [0.5, 0.25, 0.125])];
        let (g, stats) = build_stgraph(&frames, &mesh, &cfg).unwrap();
        assert_eq!(g.nodes, 16);
        // 16x16 image over a 4x4 grid: every cell holds exactly 16 pixels.
        assert!((stats.mean_pixels_per_node - 16.0).abs() < 1e-12);
        assert!(g.occlusion.iter().all(|&o| !o));
        for n in 0..16 {
            assert!((g.feature(1, 0, n) - 0.25).abs() < 1e-6);
        }
    }

    #[test]
    fn static_box_freezes_frame_zero() {
        // Mesh moves right between frames; static boxes keep sampling the
        // original area while per-frame boxes follow.
        let verts0: Vec<Vec3> = vec![
            [2.0, 2.0, -1.0],
            [8.0, 2.0, -1.0],
            [8.0, 8.0, -1.0],
            [2.0, 8.0, -1.0],
        ];
        let verts1: Vec<Vec3> = verts0.iter().map(|v| [v[0] + 6.0, v[1], v[2]]).collect();
        let topo = Arc::new(
            CanonicalTopology::new(vec![[0, 2, 1], [0, 3, 2]], verts0.clone()).unwrap(),
        );
        let mut all = verts0.clone();
        all.extend(verts1);
        let mesh = MeshSequence::new(topo, all, 30.0).unwrap();
        // Frame 1 is bright only in the moved area.
        let f0 = solid_frame(16, 16, [0.2, 0.2, 0.2]);
        let mut f1 = solid_frame(16, 16, [0.0, 0.0, 0.0]);
        for y in 2..8 {
            for x in 8..14 {
                f1.set_pixel(x, y, [1.0, 1.0, 1.0]);
            }
        }
        let frames = vec![f0, f1];
        let mk = |scheme| RegionConfig {
            scheme,
            grid_dim: 3,
            ..RegionConfig::default()
        };
        let (gs, _) = build_stgraph(&frames, &mesh, &mk(RegionScheme::BoxStatic)).unwrap();
        let (gp, _) = build_stgraph(&frames, &mesh, &mk(RegionScheme::BoxesPerFrame)).unwrap();
        // Static grid at frame 1 still looks at x in [2,8): mostly dark.
        let static_mean: f32 = (0..9).map(|n| gs.feature(0, 1, n)).sum::<f32>() / 9.0;
        let moving_mean: f32 = (0..9).map(|n| gp.feature(0, 1, n)).sum::<f32>() / 9.0;
        assert!(moving_mean > static_mean + 0.3);
    }

    #[test]
    fn centroid_modes_sample_around_centroid() {
        let (_, mesh) = flat_quad_mesh();
        let mut frame = solid_frame(16, 16, [0.0, 0.0, 0.0]);
        // Bright pixel at the centroid of face 0 ((2,2),(10,10),(10,2)) ->
        // centroid (22/3, 14/3) -> pixel (7, 4).
        frame.set_pixel(7, 4, [0.9, 0.9, 0.9]);
        let cfg = RegionConfig {
            feature_mode: FeatureMode::CentroidPixel,
            ..RegionConfig::default()
        };
        let (g, _) = build_stgraph(&vec![frame.clone()], &mesh, &cfg).unwrap();
        assert!((g.feature(0, 0, 0) - 0.9).abs() < 1e-6);
        let cfg3 = RegionConfig {
            feature_mode: FeatureMode::CentroidPatch { h: 3, w: 3 },
            ..RegionConfig::default()
        };
        let (g3, _) = build_stgraph(&vec![frame], &mesh, &cfg3).unwrap();
        assert!((g3.feature(0, 0, 0) - 0.1).abs() < 1e-6);
    }

    #[test]
    fn patch_dimensions_must_be_odd() {
        let cfg = RegionConfig {
            feature_mode: FeatureMode::CentroidPatch { h: 2, w: 3 },
            ..RegionConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn region_tag_round_trip() {
        for cfg in [
            RegionConfig::default(),
            RegionConfig {
                scheme: RegionScheme::VideoGrid,
                grid_dim: 29,
                feature_mode: FeatureMode::CentroidPatch { h: 5, w: 7 },
                edge_scheme: None,
            },
            RegionConfig {
                scheme: RegionScheme::Mesh3D,
                grid_dim: 29,
                feature_mode: FeatureMode::FaceAverage,
                edge_scheme: Some(EdgeScheme::RandomMatchedDegree { seed: 17 }),
            },
        ] {
            let parsed = RegionConfig::from_tag(&cfg.tag()).unwrap();
            assert_eq!(parsed.tag(), cfg.tag());
        }
    }

    #[test]
    fn cache_round_trip_is_bit_identical() {
        let topo = synth::make_synthetic_topology(53).unwrap();
        let scale = 20.0;
        let verts: Vec<Vec3> = topo
            .canonical_vertices()
            .iter()
            .map(|v| [32.0 + scale * v[0], 32.0 + scale * v[1], scale * v[2]])
            .collect();
        let tiled: Vec<Vec3> = (0..4).flat_map(|_| verts.clone()).collect();
        let mesh = MeshSequence::new(Arc::new(topo), tiled, 25.0).unwrap();
        let mut frames = Vec::new();
        for t in 0..4 {
            frames.push(solid_frame(64, 64, [0.1 * t as f32, 0.5, 0.9]));
        }
        let (g, _) = build_stgraph(&frames, &mesh, &RegionConfig::default()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.stg");
        write_stgraph_cache(&path, &g).unwrap();
        let back = read_stgraph_cache(&path).unwrap();
        assert_eq!(g, back);
        // Re-serialization is byte-identical.
        let path2 = dir.path().join("g2.stg");
        write_stgraph_cache(&path2, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn coarsening_follows_quarter_chain_and_pools_means() {
        let topo = synth::make_synthetic_topology(200).unwrap();
        let scale = 24.0;
        let verts: Vec<Vec3> = topo
            .canonical_vertices()
            .iter()
            .map(|v| [32.0 + scale * v[0], 32.0 + scale * v[1], scale * v[2]])
            .collect();
        let tiled: Vec<Vec3> = (0..2).flat_map(|_| verts.clone()).collect();
        let mesh = MeshSequence::new(Arc::new(topo.clone()), tiled, 30.0).unwrap();
        let frames = vec![solid_frame(64, 64, [0.3, 0.6, 0.9]); 2];
        let (g, _) = build_stgraph(&frames, &mesh, &RegionConfig::default()).unwrap();
        let positions = topo.canonical_face_centroids();
        let (g50, _) = coarsen_input_nodes(&g, &positions, 50).unwrap();
        assert_eq!(g50.nodes, 50);
        g50.validate().unwrap();
        // Constant field must survive pooling exactly where visible.
        for t in 0..2 {
            for n in 0..50 {
                if !g50.occluded(t, n) {
                    assert!((g50.feature(1, t, n) - 0.6).abs() < 1e-6);
                }
            }
        }
        let (g1, _) = coarsen_input_nodes(&g, &positions, 1).unwrap();
        assert_eq!(g1.nodes, 1);
    }

    #[test]
    fn truncated_cache_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.stg");
        std::fs::write(&path, b"STG1\x01\x00\x00\x00").unwrap();
        assert!(read_stgraph_cache(&path).is_err());
        let path2 = dir.path().join("notmagic.stg");
        std::fs::write(&path2, b"NOPE").unwrap();
        assert!(read_stgraph_cache(&path2).is_err());
    }
}
