//! Finite-difference verification suites covering every tape operation
//! and the fully composed network-plus-objective graph. Each suite draws
//! fresh random shapes and values per seed and reports the worst relative
//! error it saw.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{grad_check, Shape, SparseMatrix, Tape, VarId};
use crate::error::{Error, Result};
use crate::graph::SparseAdjacency;
use crate::model::{ArchitectureSpec, MeshPhys, ModelHierarchy};
use crate::objective::{composite_loss, ObjectiveConfig, SmoothnessTerm};

/// Worst case observed for one named check across all its seeds.
#[derive(Debug, Clone)]
pub struct SuiteOutcome {
    pub name: String,
    pub seeds: usize,
    /// Total coordinates probed by finite differences.
    pub coords: usize,
    pub max_rel_error: f64,
}

/// Sane default for accepting a check: well above float noise, far below
/// any real gradient bug.
pub const SUITE_TOLERANCE: f64 = 1e-4;

const FD_EPS: f64 = 1e-5;
// The composed check probes a deep graph whose loss surface has ReLU kinks and
// narrow sqrt curvature zones; a 1e-5 step can straddle one and report a bogus
// mismatch. 1e-6 stays inside the smooth regime yet well above f64 roundoff.
const COMPOSED_FD_EPS: f64 = 1e-6;
const FD_FLOOR: f64 = 1e-6;

fn uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

/// Values pushed away from zero so kinked ops stay locally smooth under
/// the finite-difference step.
fn off_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            sign * rng.gen_range(0.1..1.0)
        })
        .collect()
}

fn small_shape(rng: &mut ChaCha8Rng) -> Shape {
    Shape::new(
        rng.gen_range(1..3),
        rng.gen_range(2..4),
        rng.gen_range(6..13),
        rng.gen_range(4..9),
    )
}

/// Projects a tensor to a scalar with fixed random weights so every
/// output coordinate influences the check.
fn project(tape: &mut Tape<f64>, y: VarId, weights: &[f64]) -> VarId {
    let s = tape.shape(y);
    let w = tape.constant(s, weights.to_vec()).expect("projection weights");
    let p = tape.mul(y, w).expect("projection product");
    tape.reduce_sum(p, [true; 4])
}

struct Check {
    outcome: SuiteOutcome,
}

impl Check {
    fn new(name: &'static str) -> Self {
        Self {
            outcome: SuiteOutcome {
                name: name.to_string(),
                seeds: 0,
                coords: 0,
                max_rel_error: 0.0,
            },
        }
    }

    fn run<B>(&mut self, build: B, shapes: &[Shape], values: &[Vec<f64>])
    where
        B: Fn(&mut Tape<f64>, &[VarId]) -> VarId,
    {
        self.run_eps(build, shapes, values, FD_EPS);
    }

    fn run_eps<B>(&mut self, build: B, shapes: &[Shape], values: &[Vec<f64>], eps: f64)
    where
        B: Fn(&mut Tape<f64>, &[VarId]) -> VarId,
    {
        let report = grad_check(build, shapes, values, eps, FD_FLOOR);
        self.outcome.seeds += 1;
        self.outcome.coords += report.checked;
        if report.max_rel_error > self.outcome.max_rel_error {
            self.outcome.max_rel_error = report.max_rel_error;
        }
    }
}

/// Checks each primitive operation for `seeds` random draws. Returns one
/// outcome per operation.
pub fn op_suite(seeds: usize) -> Result<Vec<SuiteOutcome>> {
    if seeds == 0 {
        return Err(Error::Config("need at least one seed".into()));
    }
    let mut checks: Vec<Check> = [
        "add_broadcast",
        "sub",
        "mul",
        "div",
        "scale_add_scalar",
        "relu",
        "sqrt_eps",
        "pointwise_linear",
        "depthwise_conv_t",
        "depthwise_conv_n",
        "batchnorm_train",
        "softmax_c",
        "reduce_sum_mean",
        "sparse_propagate",
        "concat_select",
        "gated_branches",
        "circ_shift_t",
        "diff_t",
        "second_diff_t",
        "pool_nodes",
        "bandpass_t",
    ]
    .iter()
    .map(|n| Check::new(n))
    .collect();

    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed as u64);
        let s = small_shape(&mut rng);
        let sb = Shape::new(1, s.c, 1, s.n); // broadcastable partner
        let x = uniform(&mut rng, s.len(), -1.0, 1.0);
        let y = uniform(&mut rng, s.len(), -1.0, 1.0);
        let b = uniform(&mut rng, sb.len(), -1.0, 1.0);
        let proj = uniform(&mut rng, s.len(), -1.0, 1.0);

        let mut at = |i: usize, f: &dyn Fn(&mut Tape<f64>, &[VarId]) -> VarId,
                      shapes: &[Shape], values: &[Vec<f64>]| {
            checks[i].run(f, shapes, values);
        };

        let p = proj.clone();
        at(
            0,
            &|t, l| {
                let sum = t.add(l[0], l[1]).unwrap();
                project(t, sum, &p)
            },
            &[s, sb],
            &[x.clone(), b.clone()],
        );
        let p = proj.clone();
        at(
            1,
            &|t, l| {
                let d = t.sub(l[0], l[1]).unwrap();
                project(t, d, &p)
            },
            &[s, s],
            &[x.clone(), y.clone()],
        );
        let p = proj.clone();
        at(
            2,
            &|t, l| {
                let m = t.mul(l[0], l[1]).unwrap();
                project(t, m, &p)
            },
            &[s, sb],
            &[x.clone(), b.clone()],
        );
        let denom = off_zero(&mut rng, sb.len());
        let p = proj.clone();
        at(
            3,
            &|t, l| {
                let q = t.div(l[0], l[1]).unwrap();
                project(t, q, &p)
            },
            &[s, sb],
            &[x.clone(), denom],
        );
        let p = proj.clone();
        at(
            4,
            &|t, l| {
                let a = t.scale(l[0], -1.7);
                let c = t.add_scalar(a, 0.3);
                project(t, c, &p)
            },
            &[s],
            &[x.clone()],
        );
        let xo = off_zero(&mut rng, s.len());
        let p = proj.clone();
        at(
            5,
            &|t, l| {
                let r = t.relu(l[0]);
                project(t, r, &p)
            },
            &[s],
            &[xo],
        );
        let pos = uniform(&mut rng, s.len(), 0.1, 1.2);
        let p = proj.clone();
        at(
            6,
            &|t, l| {
                let r = t.sqrt_eps(l[0], 1e-6);
                project(t, r, &p)
            },
            &[s],
            &[pos],
        );

        let cout = rng.gen_range(2..4);
        let sw = Shape::new(1, cout, s.c, 1);
        let so = Shape::new(s.b, cout, s.t, s.n);
        let w = uniform(&mut rng, sw.len(), -1.0, 1.0);
        let po = uniform(&mut rng, so.len(), -1.0, 1.0);
        at(
            7,
            &|t, l| {
                let y = t.pointwise_linear(l[0], l[1]).unwrap();
                project(t, y, &po)
            },
            &[s, sw],
            &[x.clone(), w],
        );

        let k = 3;
        let skt = Shape::new(1, s.c, k, 1);
        let wk = uniform(&mut rng, skt.len(), -1.0, 1.0);
        let p = proj.clone();
        at(
            8,
            &|t, l| {
                let y = t.depthwise_conv_t(l[0], l[1]).unwrap();
                project(t, y, &p)
            },
            &[s, skt],
            &[x.clone(), wk.clone()],
        );
        let p = proj.clone();
        at(
            9,
            &|t, l| {
                let y = t.depthwise_conv_n(l[0], l[1]).unwrap();
                project(t, y, &p)
            },
            &[s, skt],
            &[x.clone(), wk],
        );

        let sc = Shape::new(1, s.c, 1, 1);
        let gamma = uniform(&mut rng, s.c, 0.5, 1.5);
        let beta = uniform(&mut rng, s.c, -0.5, 0.5);
        let p = proj.clone();
        at(
            10,
            &|t, l| {
                let (y, _, _) = t.batchnorm_train(l[0], l[1], l[2], 1e-5).unwrap();
                project(t, y, &p)
            },
            &[s, sc, sc],
            &[x.clone(), gamma, beta],
        );
        let p = proj.clone();
        at(
            11,
            &|t, l| {
                let y = t.softmax_c(l[0]);
                project(t, y, &p)
            },
            &[s],
            &[x.clone()],
        );
        let pr = uniform(&mut rng, s.b * s.c, -1.0, 1.0);
        at(
            12,
            &|t, l| {
                let m = t.reduce_mean(l[0], [false, false, true, true]);
                let z = t.reduce_sum(l[0], [false, false, true, true]);
                let q = t.add(m, z).unwrap();
                project(t, q, &pr)
            },
            &[s],
            &[x.clone()],
        );

        let adj = random_adjacency(&mut rng, s.n);
        let norm = Arc::new(SparseMatrix::<f64>::normalized_adjacency(&adj).unwrap());
        let p = proj.clone();
        at(
            13,
            &|t, l| {
                let y = t.sparse_propagate(l[0], &norm).unwrap();
                project(t, y, &p)
            },
            &[s],
            &[x.clone()],
        );

        let s2 = Shape::new(s.b, 2 * s.c, s.t, s.n);
        let p2 = uniform(&mut rng, s2.len(), -1.0, 1.0);
        at(
            14,
            &|t, l| {
                let cat = t.concat_c(&[l[0], l[1]]).unwrap();
                let sel = t.select_c(cat, 0, 2 * s.c).unwrap();
                project(t, sel, &p2)
            },
            &[s, s],
            &[x.clone(), y.clone()],
        );

        // Branch gating as the temporal mixer uses it: softmax over
        // per-branch pooled logits, then a weighted sum of branches.
        let p = proj.clone();
        at(
            15,
            &|t, l| {
                let g0 = t.gap(l[0]);
                let g1 = t.gap(l[1]);
                let logits = t.concat_c(&[g0, g1]).unwrap();
                let wts = t.softmax_c(logits);
                let w0 = t.select_c(wts, 0, 1).unwrap();
                let w1 = t.select_c(wts, 1, 2).unwrap();
                let a = t.mul(l[0], w0).unwrap();
                let bb = t.mul(l[1], w1).unwrap();
                let sum = t.add(a, bb).unwrap();
                project(t, sum, &p)
            },
            &[s, s],
            &[x.clone(), y.clone()],
        );

        let shift = rng.gen_range(-3..4);
        let p = proj.clone();
        at(
            16,
            &|t, l| {
                let y = t.circ_shift_t(l[0], shift);
                project(t, y, &p)
            },
            &[s],
            &[x.clone()],
        );
        let sd = Shape::new(s.b, s.c, s.t - 1, s.n);
        let pd = uniform(&mut rng, sd.len(), -1.0, 1.0);
        at(
            17,
            &|t, l| {
                let y = t.diff_t(l[0]).unwrap();
                project(t, y, &pd)
            },
            &[s],
            &[x.clone()],
        );
        let sd2 = Shape::new(s.b, s.c, s.t - 2, s.n);
        let pd2 = uniform(&mut rng, sd2.len(), -1.0, 1.0);
        at(
            18,
            &|t, l| {
                let y = t.second_diff_t(l[0]).unwrap();
                project(t, y, &pd2)
            },
            &[s],
            &[x.clone()],
        );

        let clusters = (s.n / 2).max(1);
        let assignment: Arc<Vec<u32>> =
            Arc::new((0..s.n).map(|i| (i % clusters) as u32).collect());
        let sp = Shape::new(s.b, s.c, s.t, clusters);
        let pp = uniform(&mut rng, sp.len(), -1.0, 1.0);
        at(
            19,
            &|t, l| {
                let y = t.pool_nodes(l[0], &assignment, clusters).unwrap();
                project(t, y, &pp)
            },
            &[s],
            &[x.clone()],
        );
        // Fixed 12-sample axis so the pass band holds at least one bin.
        let sf = Shape::new(s.b, s.c, 12, s.n);
        let xf = uniform(&mut rng, sf.len(), -1.0, 1.0);
        let pf = uniform(&mut rng, sf.len(), -1.0, 1.0);
        at(
            20,
            &|t, l| {
                let y = t.bandpass_t(l[0], 20.0, 0.5, 3.0).unwrap();
                project(t, y, &pf)
            },
            &[sf],
            &[xf],
        );
    }
    Ok(checks.into_iter().map(|c| c.outcome).collect())
}

fn random_adjacency(rng: &mut ChaCha8Rng, n: usize) -> SparseAdjacency {
    let mut pairs = Vec::new();
    for i in 0..n as u32 {
        for j in (i + 1)..n as u32 {
            if rng.gen_bool(0.4) {
                pairs.push((i, j));
            }
        }
    }
    SparseAdjacency::from_pairs_symmetrized(n, &pairs).unwrap()
}

/// Ring-with-chords graph and random positions, pooled once: a small but
/// non-trivial hierarchy for the composed check.
fn tiny_hierarchy(rng: &mut ChaCha8Rng, n: usize) -> Result<ModelHierarchy> {
    let mut pairs: Vec<(u32, u32)> = (0..n as u32).map(|i| (i, (i + 1) % n as u32)).collect();
    pairs.push((0, (n / 2) as u32));
    let adj = SparseAdjacency::from_pairs_symmetrized(n, &pairs)?;
    let positions: Vec<[f64; 3]> = (0..n)
        .map(|_| {
            [
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            ]
        })
        .collect();
    ModelHierarchy::build(&adj, Some(&positions), 1)
}

/// Differentiates the composed network-plus-objective scalar with respect
/// to the input clip and compares against finite differences, once per
/// seed.
pub fn composed_suite(seeds: usize) -> Result<SuiteOutcome> {
    if seeds == 0 {
        return Err(Error::Config("need at least one seed".into()));
    }
    let mut check = Check::new("composed_network_objective");
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5EED ^ seed as u64);
        let n = 12;
        let t_len = 16;
        let hierarchy = tiny_hierarchy(&mut rng, n)?;
        let arch = ArchitectureSpec::with_channels(&[4, 6], &[0]);
        let model = MeshPhys::<f64>::new(arch, hierarchy, "suite", seed as u64)?;
        let tap_level = model.arch.level_of_block(model.arch.block_count() - 1);
        let laplacian = Arc::new(model.laplacian_at(tap_level)?);

        let fs = 20.0;
        let mut objective = ObjectiveConfig::default();
        objective.max_shift = 2;

        let sx = Shape::new(1, 3, t_len, n);
        let x = uniform(&mut rng, sx.len(), -1.0, 1.0);
        let sr = Shape::new(1, 1, t_len, 1);
        let reference = uniform(&mut rng, sr.len(), -1.0, 1.0);

        check.run_eps(
            |tape, leaves| {
                let binding = model.bind(tape).unwrap();
                let r = tape.constant(sr, reference.clone()).unwrap();
                let fwd = model.forward(tape, &binding, leaves[0], true).unwrap();
                let smooth = SmoothnessTerm {
                    features: fwd.smooth_tap,
                    laplacian: laplacian.clone(),
                    fs,
                };
                composite_loss(tape, fwd.prediction, r, Some(&smooth), fs, &objective)
                    .unwrap()
                    .total
            },
            &[sx],
            &[x],
            COMPOSED_FD_EPS,
        );
    }
    Ok(check.outcome)
}

/// Runs both suites; returns all outcomes plus the overall worst error.
pub fn run_all(seeds: usize) -> Result<(Vec<SuiteOutcome>, f64)> {
    let mut outcomes = op_suite(seeds)?;
    outcomes.push(composed_suite(seeds)?);
    let worst = outcomes
        .iter()
        .map(|o| o.max_rel_error)
        .fold(0.0f64, f64::max);
    Ok((outcomes, worst))
}
