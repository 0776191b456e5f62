//! A small reverse-mode automatic differentiation engine over dense 4-axis
//! tensors `(batch, channel, time, node)`. Operations execute eagerly and
//! record themselves on a tape; `backward` replays the tape in reverse.
//! Everything is generic over the float type so training runs in f32 while
//! gradient checking runs in f64.

mod gradcheck;
mod sparse;
mod tape;

pub use gradcheck::{grad_check, GradCheckReport};
pub use sparse::SparseMatrix;
pub use tape::{Gradients, Tape, VarId};

/// Scalar type usable by the engine.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + rustfft::FftNum
    + std::iter::Sum
    + std::fmt::Display
{
    fn cast(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    fn cast(x: f64) -> Self {
        x as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn cast(x: f64) -> Self {
        x
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Dense tensor shape over the fixed axis order `(b, c, t, n)`. Unused
/// axes are size 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub b: usize,
    pub c: usize,
    pub t: usize,
    pub n: usize,
}

impl Shape {
    pub fn new(b: usize, c: usize, t: usize, n: usize) -> Self {
        Self { b, c, t, n }
    }

    pub fn scalar() -> Self {
        Self::new(1, 1, 1, 1)
    }

    pub fn len(&self) -> usize {
        self.b * self.c * self.t * self.n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn idx(&self, b: usize, c: usize, t: usize, n: usize) -> usize {
        ((b * self.c + c) * self.t + t) * self.n + n
    }

    pub fn axes(&self) -> [usize; 4] {
        [self.b, self.c, self.t, self.n]
    }

    /// Broadcast result shape: every axis must match or be 1 on one side.
    pub fn broadcast(&self, other: &Shape) -> Option<Shape> {
        let mut out = [0usize; 4];
        for (i, (x, y)) in self.axes().iter().zip(other.axes()).enumerate() {
            if *x == y {
                out[i] = *x;
            } else if *x == 1 {
                out[i] = y;
            } else if y == 1 {
                out[i] = *x;
            } else {
                return None;
            }
        }
        Some(Shape::new(out[0], out[1], out[2], out[3]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_indexing_is_row_major() {
        let s = Shape::new(2, 3, 4, 5);
        assert_eq!(s.len(), 120);
        assert_eq!(s.idx(0, 0, 0, 0), 0);
        assert_eq!(s.idx(0, 0, 0, 1), 1);
        assert_eq!(s.idx(0, 0, 1, 0), 5);
        assert_eq!(s.idx(0, 1, 0, 0), 20);
        assert_eq!(s.idx(1, 0, 0, 0), 60);
        assert_eq!(s.idx(1, 2, 3, 4), 119);
    }

    #[test]
    fn broadcasting_rules() {
        let a = Shape::new(4, 1, 8, 1);
        let b = Shape::new(1, 3, 8, 6);
        assert_eq!(a.broadcast(&b), Some(Shape::new(4, 3, 8, 6)));
        let c = Shape::new(4, 3, 7, 6);
        assert_eq!(a.broadcast(&c), None);
        assert_eq!(Shape::scalar().broadcast(&c), Some(c));
    }
}
