//! Triangulated face meshes: a fixed canonical triangulation plus per-frame
//! vertex tracks in image coordinates.
//!
//! Coordinate conventions used throughout the crate:
//! * `x`, `y` are image pixel coordinates with `y` pointing down.
//! * `z` is a pixel-scaled relative depth that decreases toward the camera.
//! * Orthographic projection to the image plane just drops `z`.
//! * The camera viewing direction is `(0, 0, -1)`.

use std::sync::Arc;

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];
pub type Vec2 = [f64; 2];

/// Fixed triangulation shared by every frame of a sequence: `F` triangular
/// faces over `V` vertices, plus the vertex positions of the neutral
/// (canonical) shape in a unitless frame. Clustering and pooling operate on
/// the canonical shape so they are independent of any particular frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CanonicalTopology {
    faces: Vec<[u32; 3]>,
    canonical_vertices: Vec<Vec3>,
}

impl CanonicalTopology {
    pub fn new(faces: Vec<[u32; 3]>, canonical_vertices: Vec<Vec3>) -> Result<Self> {
        if faces.is_empty() {
            return Err(Error::Topology("topology has no faces".into()));
        }
        if canonical_vertices.is_empty() {
            return Err(Error::Topology("topology has no vertices".into()));
        }
        let v = canonical_vertices.len() as u32;
        for (i, f) in faces.iter().enumerate() {
            for &idx in f {
                if idx >= v {
                    return Err(Error::Topology(format!(
                        "face {i} references vertex {idx} but only {v} vertices exist"
                    )));
                }
            }
            if f[0] == f[1] || f[1] == f[2] || f[0] == f[2] {
                return Err(Error::Topology(format!(
                    "face {i} repeats a vertex: {f:?}"
                )));
            }
        }
        Ok(Self {
            faces,
            canonical_vertices,
        })
    }

    pub fn face_count(&self) -> usize {
        self.faces.len()
    }

    pub fn vertex_count(&self) -> usize {
        self.canonical_vertices.len()
    }

    pub fn faces(&self) -> &[[u32; 3]] {
        &self.faces
    }

    pub fn canonical_vertices(&self) -> &[Vec3] {
        &self.canonical_vertices
    }

    /// Centroid of face `i` on the canonical shape.
    pub fn canonical_face_centroid(&self, i: usize) -> Vec3 {
        let f = self.faces[i];
        centroid3(
            self.canonical_vertices[f[0] as usize],
            self.canonical_vertices[f[1] as usize],
            self.canonical_vertices[f[2] as usize],
        )
    }

    /// Centroids of all faces on the canonical shape, in face order.
    pub fn canonical_face_centroids(&self) -> Vec<Vec3> {
        (0..self.face_count())
            .map(|i| self.canonical_face_centroid(i))
            .collect()
    }

    /// Checks that every interior edge is traversed in opposite directions by
    /// its two incident faces (consistent winding, so outward normals agree),
    /// and that no edge is shared by more than two faces.
    pub fn validate_winding(&self) -> Result<()> {
        use std::collections::HashMap;
        let mut directed: HashMap<(u32, u32), usize> = HashMap::new();
        for (i, f) in self.faces.iter().enumerate() {
            for k in 0..3 {
                let a = f[k];
                let b = f[(k + 1) % 3];
                if let Some(&j) = directed.get(&(a, b)) {
                    return Err(Error::Topology(format!(
                        "edge ({a},{b}) traversed in the same direction by faces {j} and {i}; \
                         winding is inconsistent"
                    )));
                }
                directed.insert((a, b), i);
            }
        }
        Ok(())
    }
}

/// Per-frame vertex positions for a fixed topology: `T` frames of `V`
/// vertices in image coordinates (pixels, plus pixel-scaled depth). Frames
/// with missing detections are not representable here; sequences are built
/// from contiguous detection spans.
#[derive(Debug, Clone)]
pub struct MeshSequence {
    topology: Arc<CanonicalTopology>,
    /// `frames * vertex_count` positions, frame-major.
    vertices: Vec<Vec3>,
    fps: f64,
}

impl MeshSequence {
    pub fn new(topology: Arc<CanonicalTopology>, vertices: Vec<Vec3>, fps: f64) -> Result<Self> {
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::Data(format!("fps must be positive, got {fps}")));
        }
        let v = topology.vertex_count();
        if v == 0 || vertices.len() % v != 0 {
            return Err(Error::Shape(format!(
                "vertex track length {} is not a multiple of vertex count {v}",
                vertices.len()
            )));
        }
        if vertices.is_empty() {
            return Err(Error::Data("mesh sequence has no frames".into()));
        }
        if vertices.iter().flatten().any(|c| !c.is_finite()) {
            return Err(Error::Data(
                "mesh sequence contains non-finite coordinates".into(),
            ));
        }
        Ok(Self {
            topology,
            vertices,
            fps,
        })
    }

    pub fn topology(&self) -> &Arc<CanonicalTopology> {
        &self.topology
    }

    pub fn frame_count(&self) -> usize {
        self.vertices.len() / self.topology.vertex_count()
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    /// Vertex positions of frame `t`.
    pub fn frame(&self, t: usize) -> &[Vec3] {
        let v = self.topology.vertex_count();
        &self.vertices[t * v..(t + 1) * v]
    }

    /// Mean vertex positions over all frames. Used as the data-driven
    /// canonical geometry when ingesting tracked sequences.
    pub fn mean_vertices(&self) -> Vec<Vec3> {
        let v = self.topology.vertex_count();
        let t = self.frame_count();
        let mut out = vec![[0.0f64; 3]; v];
        for frame in 0..t {
            for (o, p) in out.iter_mut().zip(self.frame(frame)) {
                for k in 0..3 {
                    o[k] += p[k];
                }
            }
        }
        let inv = 1.0 / t as f64;
        for o in &mut out {
            for k in 0..3 {
                o[k] *= inv;
            }
        }
        out
    }
}

/// Unit face normal together with a degeneracy flag. Degenerate faces (zero
/// area) get a zero direction vector and are treated as occluded downstream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FaceNormal {
    pub dir: Vec3,
    pub degenerate: bool,
}

/// Normal of the triangle `face` over `vertices`, computed as the normalized
/// cross product `(v1 - v0) x (v2 - v0)`.
pub fn face_normal(vertices: &[Vec3], face: [u32; 3]) -> Result<FaceNormal> {
    let [v0, v1, v2] = face_positions(vertices, face)?;
    let e1 = sub3(v1, v0);
    let e2 = sub3(v2, v0);
    let cross = [
        e1[1] * e2[2] - e1[2] * e2[1],
        e1[2] * e2[0] - e1[0] * e2[2],
        e1[0] * e2[1] - e1[1] * e2[0],
    ];
    let len = (cross[0] * cross[0] + cross[1] * cross[1] + cross[2] * cross[2]).sqrt();
    if len == 0.0 {
        return Ok(FaceNormal {
            dir: [0.0; 3],
            degenerate: true,
        });
    }
    Ok(FaceNormal {
        dir: [cross[0] / len, cross[1] / len, cross[2] / len],
        degenerate: false,
    })
}

/// Back-face test against the camera direction `(0, 0, -1)`: a face is
/// occluded iff `normal . (0,0,-1) < 0`, i.e. iff `normal_z > 0` (strict).
/// Degenerate faces are occluded by definition.
pub fn is_occluded(normal: FaceNormal) -> bool {
    if normal.degenerate {
        return true;
    }
    normal.dir[2] > 0.0
}

/// A face projected orthographically to the image plane (drop `z`), with a
/// 2D degeneracy flag (zero signed area: collinear or coincident vertices).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectedFace {
    pub pts: [Vec2; 3],
    pub degenerate: bool,
}

pub fn project_face(vertices: &[Vec3], face: [u32; 3]) -> Result<ProjectedFace> {
    let [v0, v1, v2] = face_positions(vertices, face)?;
    let pts = [[v0[0], v0[1]], [v1[0], v1[1]], [v2[0], v2[1]]];
    let area2 = (pts[1][0] - pts[0][0]) * (pts[2][1] - pts[0][1])
        - (pts[1][1] - pts[0][1]) * (pts[2][0] - pts[0][0]);
    Ok(ProjectedFace {
        pts,
        degenerate: area2 == 0.0,
    })
}

fn face_positions(vertices: &[Vec3], face: [u32; 3]) -> Result<[Vec3; 3]> {
    let n = vertices.len() as u32;
    for &idx in &face {
        if idx >= n {
            return Err(Error::Topology(format!(
                "face references vertex {idx} but frame has {n} vertices"
            )));
        }
    }
    Ok([
        vertices[face[0] as usize],
        vertices[face[1] as usize],
        vertices[face[2] as usize],
    ])
}

pub(crate) fn sub3(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn centroid3(a: Vec3, b: Vec3, c: Vec3) -> Vec3 {
    [
        (a[0] + b[0] + c[0]) / 3.0,
        (a[1] + b[1] + c[1]) / 3.0,
        (a[2] + b[2] + c[2]) / 3.0,
    ]
}

/// Centroid of face `i` at frame positions `vertices`.
pub fn face_centroid(vertices: &[Vec3], face: [u32; 3]) -> Result<Vec3> {
    let [a, b, c] = face_positions(vertices, face)?;
    Ok(centroid3(a, b, c))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn unit_triangle_topology() -> CanonicalTopology {
        CanonicalTopology::new(
            vec![[0, 1, 2]],
            vec![[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        )
        .unwrap()
    }

    #[test]
    fn normal_of_axis_aligned_triangle() {
        // (0,0,0), (1,0,0), (0,1,0) -> +z normal per the cross-product order.
        let verts = [[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        let n = face_normal(&verts, [0, 1, 2]).unwrap();
        assert!(!n.degenerate);
        assert_relative_eq!(n.dir[0], 0.0);
        assert_relative_eq!(n.dir[1], 0.0);
        assert_relative_eq!(n.dir[2], 1.0);
        // z > 0 means facing away from the camera.
        assert!(is_occluded(n));
        // Swap winding: normal flips, face becomes visible.
        let n2 = face_normal(&verts, [0, 2, 1]).unwrap();
        assert_relative_eq!(n2.dir[2], -1.0);
        assert!(!is_occluded(n2));
    }

    #[test]
    fn degenerate_face_is_occluded_and_flagged() {
        let verts = [[0.5, 0.5, 0.5]; 3];
        let n = face_normal(&verts, [0, 1, 2]).unwrap();
        assert!(n.degenerate);
        assert_eq!(n.dir, [0.0; 3]);
        assert!(is_occluded(n));
        let p = project_face(&verts, [0, 1, 2]).unwrap();
        assert!(p.degenerate);
    }

    #[test]
    fn boundary_normal_exactly_perpendicular_is_visible() {
        // Normal lies in the image plane (z = 0): the strict inequality
        // classifies it as visible.
        let verts = [[0.0, 0.0, 0.0], [0.0, 0.0, 1.0], [0.0, 1.0, 0.0]];
        let n = face_normal(&verts, [0, 1, 2]).unwrap();
        assert_relative_eq!(n.dir[2], 0.0);
        assert!(!is_occluded(n));
    }

    #[test]
    fn projection_drops_depth() {
        let verts = [[3.0, 4.0, 9.0], [5.0, 4.0, -2.0], [3.0, 7.0, 1.5]];
        let p = project_face(&verts, [0, 1, 2]).unwrap();
        assert_eq!(p.pts, [[3.0, 4.0], [5.0, 4.0], [3.0, 7.0]]);
        assert!(!p.degenerate);
    }

    #[test]
    fn face_index_out_of_range_is_topology_error() {
        let verts = [[0.0; 3], [1.0, 0.0, 0.0]];
        assert!(face_normal(&verts, [0, 1, 2]).is_err());
    }

    #[test]
    fn topology_rejects_bad_faces() {
        let verts = vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
        assert!(CanonicalTopology::new(vec![[0, 1, 3]], verts.clone()).is_err());
        assert!(CanonicalTopology::new(vec![[0, 1, 1]], verts).is_err());
    }

    #[test]
    fn mesh_sequence_shape_checks() {
        let topo = Arc::new(unit_triangle_topology());
        let ok = MeshSequence::new(topo.clone(), vec![[0.0; 3]; 6], 30.0).unwrap();
        assert_eq!(ok.frame_count(), 2);
        assert!(MeshSequence::new(topo.clone(), vec![[0.0; 3]; 5], 30.0).is_err());
        assert!(MeshSequence::new(topo.clone(), vec![[f64::NAN; 3]; 3], 30.0).is_err());
        assert!(MeshSequence::new(topo, vec![[0.0; 3]; 3], 0.0).is_err());
    }

    fn random_rotation(rng: &mut StdRng) -> [[f64; 3]; 3] {
        // Rotation from three Euler angles; enough for property coverage.
        let (a, b, c) = (
            rng.gen_range(-3.0..3.0),
            rng.gen_range(-3.0..3.0),
            rng.gen_range(-3.0..3.0),
        );
        let (sa, ca) = (f64::sin(a), f64::cos(a));
        let (sb, cb) = (f64::sin(b), f64::cos(b));
        let (sc, cc) = (f64::sin(c), f64::cos(c));
        // Rz(a) * Ry(b) * Rx(c)
        [
            [ca * cb, ca * sb * sc - sa * cc, ca * sb * cc + sa * sc],
            [sa * cb, sa * sb * sc + ca * cc, sa * sb * cc - ca * sc],
            [-sb, cb * sc, cb * cc],
        ]
    }

    fn rotate(m: &[[f64; 3]; 3], v: Vec3) -> Vec3 {
        [
            m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
            m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
            m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
        ]
    }

    #[test]
    fn normals_rotate_with_the_mesh() {
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..50 {
            let verts: Vec<Vec3> = (0..3)
                .map(|_| {
                    [
                        rng.gen_range(-2.0..2.0),
                        rng.gen_range(-2.0..2.0),
                        rng.gen_range(-2.0..2.0),
                    ]
                })
                .collect();
            let n = face_normal(&verts, [0, 1, 2]).unwrap();
            if n.degenerate {
                continue;
            }
            let rot = random_rotation(&mut rng);
            let rotated: Vec<Vec3> = verts.iter().map(|&v| rotate(&rot, v)).collect();
            let nr = face_normal(&rotated, [0, 1, 2]).unwrap();
            let expected = rotate(&rot, n.dir);
            for k in 0..3 {
                assert_relative_eq!(nr.dir[k], expected[k], epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn occlusion_flips_under_winding_swap() {
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..100 {
            let verts: Vec<Vec3> = (0..3)
                .map(|_| {
                    [
                        rng.gen_range(-2.0..2.0),
                        rng.gen_range(-2.0..2.0),
                        rng.gen_range(-2.0..2.0),
                    ]
                })
                .collect();
            let n = face_normal(&verts, [0, 1, 2]).unwrap();
            let m = face_normal(&verts, [0, 2, 1]).unwrap();
            if n.degenerate {
                assert!(m.degenerate);
                continue;
            }
            // A non-degenerate face and its winding-swapped twin disagree on
            // occlusion unless the normal is exactly in-plane (z == 0).
            if n.dir[2] != 0.0 {
                assert_ne!(is_occluded(n), is_occluded(m));
            }
        }
    }

    #[test]
    fn winding_validation_catches_inconsistent_faces() {
        // Two faces sharing edge (1,2) with the same traversal direction.
        let verts = vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [1.0, 1.0, 0.0],
        ];
        let good = CanonicalTopology::new(vec![[0, 1, 2], [2, 1, 3]], verts.clone()).unwrap();
        good.validate_winding().unwrap();
        let bad = CanonicalTopology::new(vec![[0, 1, 2], [1, 2, 3]], verts).unwrap();
        assert!(bad.validate_winding().is_err());
    }
}
