//! Finite-difference verification of reverse-mode gradients.

use super::{Shape, Tape, VarId};

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Largest relative error across all probed coordinates.
    pub max_rel_error: f64,
    /// Number of coordinates probed.
    pub checked: usize,
    /// `(input index, flat coordinate, analytic, numeric)` for the worst case.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Compares tape gradients of a scalar function against central finite
/// differences in `f64`.
///
/// `build` must be a pure deterministic function of the leaf values: it
/// receives a fresh tape plus one differentiable leaf per entry of
/// `shapes`/`values` and returns the scalar output node. Every coordinate
/// of every leaf is perturbed by `eps` in both directions. Relative error
/// uses `|a - n| / max(|a|, |n|, floor)` so near-zero gradients are judged
/// against `floor` instead of each other.
pub fn grad_check<B>(
    build: B,
    shapes: &[Shape],
    values: &[Vec<f64>],
    eps: f64,
    floor: f64,
) -> GradCheckReport
where
    B: Fn(&mut Tape<f64>, &[VarId]) -> VarId,
{
    assert_eq!(shapes.len(), values.len(), "one value vector per shape");
    for (s, v) in shapes.iter().zip(values) {
        assert_eq!(s.len(), v.len(), "value length must match shape");
    }

    let eval = |values: &[Vec<f64>]| -> f64 {
        let mut tape = Tape::new();
        let ids: Vec<VarId> = shapes
            .iter()
            .zip(values)
            .map(|(&s, v)| tape.param(s, v.clone()).expect("leaf shape"))
            .collect();
        let root = build(&mut tape, &ids);
        tape.scalar_value(root).expect("scalar output")
    };

    // Analytic pass.
    let mut tape = Tape::new();
    let ids: Vec<VarId> = shapes
        .iter()
        .zip(values)
        .map(|(&s, v)| tape.param(s, v.clone()).expect("leaf shape"))
        .collect();
    let root = build(&mut tape, &ids);
    let grads = tape.backward(root).expect("backward");
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| {
            grads
                .wrt(id)
                .map(|g| g.to_vec())
                .unwrap_or_else(|| vec![0.0; tape.shape(id).len()])
        })
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    let mut probe = values.to_vec();
    for (pi, value) in values.iter().enumerate() {
        for ci in 0..value.len() {
            let orig = probe[pi][ci];
            probe[pi][ci] = orig + eps;
            let f_plus = eval(&probe);
            probe[pi][ci] = orig - eps;
            let f_minus = eval(&probe);
            probe[pi][ci] = orig;
            let numeric = (f_plus - f_minus) / (2.0 * eps);
            let a = analytic[pi][ci];
            let denom = a.abs().max(numeric.abs()).max(floor);
            let rel = (a - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((pi, ci, a, numeric));
            }
        }
    }
    report
}
