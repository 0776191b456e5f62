//! The training objective: an alignment-tolerant correlation loss on the
//! estimated waveform and its first two time differences, weighted per
//! clip by how spectrally clean the reference is, plus a graph smoothness
//! penalty on intermediate features.

use std::sync::Arc;

use crate::autodiff::{Real, Shape, SparseMatrix, Tape, VarId};
use crate::dsp;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ObjectiveConfig {
    /// Variance guard inside the correlation denominator.
    pub pearson_eps: f64,
    /// Weight of the waveform correlation term.
    pub weight_value: f64,
    /// Weight of the first-difference correlation term.
    pub weight_velocity: f64,
    /// Weight of the second-difference correlation term.
    pub weight_accel: f64,
    /// Largest circular shift (frames) the alignment search considers.
    pub max_shift: usize,
    /// Sharpness of the soft minimum over shifts.
    pub softmin_temp: f64,
    /// Weight of the graph smoothness penalty.
    pub smooth_weight: f64,
    /// Physiological band, also used by the smoothness band filter.
    pub band_lo_hz: f64,
    pub band_hi_hz: f64,
    /// Width of the spectral window around the dominant reference peak.
    pub snr_sigma_hz: f64,
    /// Exponent applied to the concentration ratio.
    pub snr_gamma: f64,
    /// Clamp range of the per-clip weight.
    pub snr_floor: f64,
    pub snr_ceil: f64,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            pearson_eps: 1e-12,
            weight_value: 1.00,
            weight_velocity: 0.50,
            weight_accel: 0.10,
            max_shift: 50,
            softmin_temp: 10.0,
            smooth_weight: 0.002,
            band_lo_hz: 0.5,
            band_hi_hz: 3.0,
            snr_sigma_hz: 0.1,
            snr_gamma: 0.5,
            snr_floor: 0.10,
            snr_ceil: 1.0,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.pearson_eps > 0.0) {
            return Err(Error::Config("pearson_eps must be positive".into()));
        }
        if self.softmin_temp < 0.0 {
            return Err(Error::Config("softmin_temp must be nonnegative".into()));
        }
        if !(0.0 <= self.band_lo_hz && self.band_lo_hz < self.band_hi_hz) {
            return Err(Error::Config("bad physiological band".into()));
        }
        if !(self.snr_sigma_hz > 0.0) {
            return Err(Error::Config("snr_sigma_hz must be positive".into()));
        }
        if !(0.0 < self.snr_floor && self.snr_floor <= self.snr_ceil) {
            return Err(Error::Config("bad snr clamp range".into()));
        }
        Ok(())
    }
}

/// Scalar values observed while building the loss, for logging and
/// divergence diagnosis.
#[derive(Debug, Clone)]
pub struct LossBreakdown {
    pub total: f64,
    /// Weighted, alignment-searched waveform term.
    pub waveform: f64,
    /// Smoothness term before its weight.
    pub smoothness: f64,
    /// Per-clip spectral quality weight.
    pub snr_weights: Vec<f64>,
    /// Clips whose waveform loss was replaced because prediction or
    /// reference had no variance.
    pub degenerate: Vec<bool>,
}

pub struct ObjectiveOutput {
    pub total: VarId,
    pub breakdown: LossBreakdown,
}

/// Smoothness input: intermediate features plus the Laplacian of the graph
/// they live on.
pub struct SmoothnessTerm<F: Real> {
    pub features: VarId,
    pub laplacian: Arc<SparseMatrix<F>>,
    /// Sample rate of the feature time axis.
    pub fs: f64,
}

/// `1 - corr(x, y)` per batch element, reducing over channel, time and
/// node axes. Output shape `(b, 1, 1, 1)`.
pub fn correlation_loss<F: Real>(
    tape: &mut Tape<F>,
    x: VarId,
    y: VarId,
    eps: f64,
) -> Result<VarId> {
    if tape.shape(x) != tape.shape(y) {
        return Err(Error::Shape(format!(
            "correlation over mismatched shapes {:?} vs {:?}",
            tape.shape(x),
            tape.shape(y)
        )));
    }
    let per_elem = [false, true, true, true];
    let mx = tape.reduce_mean(x, per_elem);
    let my = tape.reduce_mean(y, per_elem);
    let dx = tape.sub(x, mx)?;
    let dy = tape.sub(y, my)?;
    let xy = tape.mul(dx, dy)?;
    let cov = tape.reduce_mean(xy, per_elem);
    let xx = tape.mul(dx, dx)?;
    let vx = tape.reduce_mean(xx, per_elem);
    let yy = tape.mul(dy, dy)?;
    let vy = tape.reduce_mean(yy, per_elem);
    let vv = tape.mul(vx, vy)?;
    let denom = tape.sqrt_eps(vv, eps);
    let r = tape.div(cov, denom)?;
    let neg = tape.scale(r, -1.0);
    Ok(tape.add_scalar(neg, 1.0))
}

/// Correlation loss of the waveforms, their first differences and their
/// second differences, combined with the configured weights. Output shape
/// `(b, 1, 1, 1)`.
fn combined_waveform_loss<F: Real>(
    tape: &mut Tape<F>,
    pred: VarId,
    dref: VarId,
    d2ref: VarId,
    reference: VarId,
    cfg: &ObjectiveConfig,
) -> Result<VarId> {
    let lv = correlation_loss(tape, pred, reference, cfg.pearson_eps)?;
    let dpred = tape.diff_t(pred)?;
    let lvel = correlation_loss(tape, dpred, dref, cfg.pearson_eps)?;
    let d2pred = tape.second_diff_t(pred)?;
    let lacc = correlation_loss(tape, d2pred, d2ref, cfg.pearson_eps)?;
    let a = tape.scale(lv, cfg.weight_value);
    let b = tape.scale(lvel, cfg.weight_velocity);
    let c = tape.scale(lacc, cfg.weight_accel);
    let ab = tape.add(a, b)?;
    tape.add(ab, c)
}

/// Soft minimum over circular shifts of the prediction: softmax weights at
/// negative temperature select the best-aligned shift smoothly. With
/// `max_shift` 0 this is exactly the unshifted loss.
pub fn alignment_searched_loss<F: Real>(
    tape: &mut Tape<F>,
    prediction: VarId,
    reference: VarId,
    cfg: &ObjectiveConfig,
) -> Result<VarId> {
    let t_len = tape.shape(prediction).t;
    if cfg.max_shift >= t_len {
        return Err(Error::Config(format!(
            "max_shift {} must be below the window length {t_len}",
            cfg.max_shift
        )));
    }
    let dref = tape.diff_t(reference)?;
    let d2ref = tape.second_diff_t(reference)?;
    let mut per_shift = Vec::with_capacity(2 * cfg.max_shift + 1);
    for shift in -(cfg.max_shift as i64)..=cfg.max_shift as i64 {
        let shifted = if shift == 0 {
            prediction
        } else {
            tape.circ_shift_t(prediction, shift)
        };
        per_shift.push(combined_waveform_loss(
            tape, shifted, dref, d2ref, reference, cfg,
        )?);
    }
    if per_shift.len() == 1 {
        return Ok(per_shift[0]);
    }
    let stack = tape.concat_c(&per_shift)?;
    let scaled = tape.scale(stack, -cfg.softmin_temp);
    let weights = tape.softmax_c(scaled);
    let weighted = tape.mul(stack, weights)?;
    Ok(tape.reduce_sum(weighted, [false, true, true, true]))
}

/// Spectral quality weight of one reference series: how concentrated its
/// band-limited power is around the dominant peak. 1 means a clean single
/// tone; the floor keeps noisy clips from vanishing entirely.
pub fn snr_weight(reference: &[f64], fs: f64, cfg: &ObjectiveConfig) -> Result<f64> {
    let (freqs, psd) = dsp::welch_psd(reference, fs, reference.len().min(256))?;
    let band: Vec<usize> = (0..freqs.len())
        .filter(|&i| freqs[i] >= cfg.band_lo_hz && freqs[i] <= cfg.band_hi_hz)
        .collect();
    if band.is_empty() {
        return Err(Error::Config(
            "physiological band contains no spectral bins".into(),
        ));
    }
    let band_power: f64 = band.iter().map(|&i| psd[i]).sum();
    if !(band_power > 0.0) {
        return Ok(cfg.snr_floor);
    }
    let f_peak = dsp::dominant_frequency(&freqs, &psd, cfg.band_lo_hz, cfg.band_hi_hz)?;
    let two_s2 = 2.0 * cfg.snr_sigma_hz * cfg.snr_sigma_hz;
    let focused: f64 = band
        .iter()
        .map(|&i| {
            let d = freqs[i] - f_peak;
            (-d * d / two_s2).exp() * psd[i]
        })
        .sum();
    let ratio = focused / band_power;
    Ok(ratio.powf(cfg.snr_gamma).clamp(cfg.snr_floor, cfg.snr_ceil))
}

/// Builds the full objective.
///
/// `prediction` and `reference` are `(b, 1, t, 1)`; the reference must be
/// a constant (its spectral weight is computed from values, not traced).
/// Clips with zero-variance prediction or reference contribute a constant
/// loss of 1 and are flagged in the breakdown.
pub fn composite_loss<F: Real>(
    tape: &mut Tape<F>,
    prediction: VarId,
    reference: VarId,
    smooth: Option<&SmoothnessTerm<F>>,
    fs: f64,
    cfg: &ObjectiveConfig,
) -> Result<ObjectiveOutput> {
    cfg.validate()?;
    let sp = tape.shape(prediction);
    if tape.shape(reference) != sp || sp.c != 1 || sp.n != 1 {
        return Err(Error::Shape(format!(
            "waveforms must share shape (b, 1, t, 1); got {:?} and {:?}",
            sp,
            tape.shape(reference)
        )));
    }
    if !(fs > 0.0) {
        return Err(Error::Config("sample rate must be positive".into()));
    }
    let b = sp.b;
    let t_len = sp.t;

    // Per-clip quality weights and degeneracy flags, from raw values.
    let mut snr_weights = Vec::with_capacity(b);
    let mut degenerate = Vec::with_capacity(b);
    {
        let pv = tape.value(prediction);
        let rv = tape.value(reference);
        let var_of = |v: &[F], off: usize| -> f64 {
            let mean: f64 = v[off..off + t_len].iter().map(|x| x.as_f64()).sum::<f64>()
                / t_len as f64;
            v[off..off + t_len]
                .iter()
                .map(|x| {
                    let d = x.as_f64() - mean;
                    d * d
                })
                .sum::<f64>()
                / t_len as f64
        };
        for bi in 0..b {
            let off = bi * t_len;
            let ref_series: Vec<f64> =
                rv[off..off + t_len].iter().map(|x| x.as_f64()).collect();
            snr_weights.push(snr_weight(&ref_series, fs, cfg)?);
            let tiny = 100.0 * cfg.pearson_eps;
            degenerate.push(var_of(pv, off) < tiny || var_of(rv, off) < tiny);
        }
    }

    let aligned = alignment_searched_loss(tape, prediction, reference, cfg)?;

    // Replace degenerate clips by a constant loss of 1 without breaking
    // the gradient of healthy clips.
    let mask_shape = Shape::new(b, 1, 1, 1);
    let mask: Vec<F> = degenerate
        .iter()
        .map(|&d| if d { F::one() } else { F::zero() })
        .collect();
    let keep: Vec<F> = degenerate
        .iter()
        .map(|&d| if d { F::zero() } else { F::one() })
        .collect();
    let mask_c = tape.constant(mask_shape, mask)?;
    let keep_c = tape.constant(mask_shape, keep)?;
    let kept = tape.mul(aligned, keep_c)?;
    let masked = tape.add(kept, mask_c)?;

    let w: Vec<F> = snr_weights.iter().map(|&v| F::cast(v)).collect();
    let w_c = tape.constant(mask_shape, w)?;
    let weighted = tape.mul(masked, w_c)?;
    let waveform = tape.reduce_mean(weighted, [true, true, true, true]);

    let (total, smooth_value) = match smooth {
        Some(term) => {
            let z = tape.bandpass_t(term.features, term.fs, cfg.band_lo_hz, cfg.band_hi_hz)?;
            let lz = tape.sparse_propagate(z, &term.laplacian)?;
            let prod = tape.mul(z, lz)?;
            let gs = tape.reduce_mean(prod, [true, true, true, true]);
            let weighted_gs = tape.scale(gs, cfg.smooth_weight);
            let total = tape.add(waveform, weighted_gs)?;
            (total, tape.scalar_value(gs)?)
        }
        None => (waveform, 0.0),
    };

    let breakdown = LossBreakdown {
        total: tape.scalar_value(total)?,
        waveform: tape.scalar_value(waveform)?,
        smoothness: smooth_value,
        snr_weights,
        degenerate,
    };
    Ok(ObjectiveOutput { total, breakdown })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::graph::SparseAdjacency;

    const TAU: f64 = std::f64::consts::TAU;

    fn sine(t_len: usize, fs: f64, hz: f64, phase: f64) -> Vec<f64> {
        (0..t_len)
            .map(|i| (TAU * hz * i as f64 / fs + phase).sin())
            .collect()
    }

    /// Deterministic pseudo-noise reproducible bit-for-bit across
    /// languages: a 64-bit LCG mapped to [-1, 1).
    fn lcg_noise(t_len: usize) -> Vec<f64> {
        let mut state: u64 = 123_456_789;
        (0..t_len)
            .map(|_| {
                state = state
                    .wrapping_mul(6_364_136_223_846_793_005)
                    .wrapping_add(1_442_695_040_888_963_407);
                ((state >> 33) as f64) / (1u64 << 31) as f64 * 2.0 - 1.0
            })
            .collect()
    }

    fn series_const(tape: &mut Tape<f64>, data: Vec<f64>) -> VarId {
        let t = data.len();
        tape.constant(Shape::new(1, 1, t, 1), data).unwrap()
    }

    #[test]
    fn snr_weight_matches_frozen_values() {
        let cfg = ObjectiveConfig::default();
        let clean = sine(512, 30.0, 1.2, 0.0);
        let w = snr_weight(&clean, 30.0, &cfg).unwrap();
        assert!((w - 0.9080647026071139).abs() < 1e-8, "{w}");

        let noise = lcg_noise(512);
        let w = snr_weight(&noise, 30.0, &cfg).unwrap();
        assert!((w - 0.4916966747701817).abs() < 1e-8, "{w}");
    }

    #[test]
    fn snr_weight_respects_clamp() {
        let noise = lcg_noise(512);
        let cfg = ObjectiveConfig {
            snr_gamma: 4.0,
            ..ObjectiveConfig::default()
        };
        let w = snr_weight(&noise, 30.0, &cfg).unwrap();
        assert_eq!(w, 0.1);

        let clean = sine(512, 30.0, 1.2, 0.0);
        let cfg = ObjectiveConfig {
            snr_ceil: 0.8,
            snr_floor: 0.05,
            ..ObjectiveConfig::default()
        };
        let w = snr_weight(&clean, 30.0, &cfg).unwrap();
        assert_eq!(w, 0.8);

        let cfg = ObjectiveConfig::default();
        for series in [sine(256, 30.0, 1.0, 0.3), lcg_noise(256)] {
            let w = snr_weight(&series, 30.0, &cfg).unwrap();
            assert!((cfg.snr_floor..=cfg.snr_ceil).contains(&w));
        }
    }

    #[test]
    fn correlation_loss_is_scale_and_offset_invariant() {
        let mut tape: Tape<f64> = Tape::new();
        let fs = 30.0;
        let x = series_const(&mut tape, sine(128, fs, 1.1, 0.4));
        let y = series_const(&mut tape, sine(128, fs, 1.3, 0.0));
        let base = correlation_loss(&mut tape, x, y, 1e-12).unwrap();
        let base_v = tape.value(base)[0];

        let scaled = tape.scale(x, 37.5);
        let shifted = tape.add_scalar(scaled, -4.2);
        let same = correlation_loss(&mut tape, shifted, y, 1e-12).unwrap();
        let same_v = tape.value(same)[0];
        assert!((base_v - same_v).abs() < 1e-9, "{base_v} vs {same_v}");

        // Perfect correlation gives 0, anticorrelation gives 2.
        let with_self = correlation_loss(&mut tape, x, x, 1e-12).unwrap();
        assert!(tape.value(with_self)[0].abs() < 1e-6);
        let neg = tape.scale(x, -1.0);
        let anti = correlation_loss(&mut tape, x, neg, 1e-12).unwrap();
        assert!((tape.value(anti)[0] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn alignment_search_recovers_shifted_prediction() {
        let cfg = ObjectiveConfig {
            max_shift: 12,
            ..ObjectiveConfig::default()
        };
        let mut tape: Tape<f64> = Tape::new();
        let reference = series_const(&mut tape, sine(128, 30.0, 1.2, 0.0));
        // The prediction lags the reference by 10 frames.
        let pred = tape.circ_shift_t(reference, 10);
        let aligned = alignment_searched_loss(&mut tape, pred, reference, &cfg).unwrap();
        // A soft minimum keeps some weight on neighboring shifts, so the
        // value sits a little above the exact-alignment loss of 0.
        let v = tape.value(aligned)[0];
        assert!(v < 0.15, "aligned loss {v}");

        // Without the search the same lag scores much worse.
        let cfg0 = ObjectiveConfig {
            max_shift: 0,
            ..cfg
        };
        let unaligned = alignment_searched_loss(&mut tape, pred, reference, &cfg0).unwrap();
        assert!(tape.value(unaligned)[0] > 0.5);
    }

    #[test]
    fn zero_shift_config_equals_direct_combined_loss() {
        let cfg = ObjectiveConfig {
            max_shift: 0,
            ..ObjectiveConfig::default()
        };
        let mut tape: Tape<f64> = Tape::new();
        let r = series_const(&mut tape, sine(96, 30.0, 1.0, 0.0));
        let p = series_const(&mut tape, sine(96, 30.0, 1.4, 0.8));
        let searched = alignment_searched_loss(&mut tape, p, r, &cfg).unwrap();
        let dref = tape.diff_t(r).unwrap();
        let d2ref = tape.second_diff_t(r).unwrap();
        let direct = combined_waveform_loss(&mut tape, p, dref, d2ref, r, &cfg).unwrap();
        assert_eq!(tape.value(searched), tape.value(direct));
    }

    #[test]
    fn softmin_weights_sum_to_one() {
        let cfg = ObjectiveConfig {
            max_shift: 5,
            ..ObjectiveConfig::default()
        };
        let mut tape: Tape<f64> = Tape::new();
        let r = series_const(&mut tape, sine(64, 30.0, 1.2, 0.0));
        let p = series_const(&mut tape, sine(64, 30.0, 1.2, 1.0));
        // Rebuild the internals to inspect the weights directly.
        let dref = tape.diff_t(r).unwrap();
        let d2ref = tape.second_diff_t(r).unwrap();
        let mut losses = Vec::new();
        for s in -5i64..=5 {
            let sp = tape.circ_shift_t(p, s);
            losses.push(combined_waveform_loss(&mut tape, sp, dref, d2ref, r, &cfg).unwrap());
        }
        let stack = tape.concat_c(&losses).unwrap();
        let scaled = tape.scale(stack, -cfg.softmin_temp);
        let w = tape.softmax_c(scaled);
        let total: f64 = tape.value(w).iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(tape.value(w).iter().all(|&x| x >= 0.0));
    }

    #[test]
    fn smoothness_penalty_zero_on_node_constant_features() {
        let adj = SparseAdjacency::from_pairs_symmetrized(4, &[(0, 1), (1, 2), (2, 3)]).unwrap();
        let lap: Arc<SparseMatrix<f64>> = Arc::new(SparseMatrix::laplacian(&adj).unwrap());
        let cfg = ObjectiveConfig {
            max_shift: 2,
            ..ObjectiveConfig::default()
        };
        let t_len = 32;
        let fs = 16.0;
        let mut tape: Tape<f64> = Tape::new();
        let pred = series_const(&mut tape, sine(t_len, fs, 1.0, 0.2));
        let reference = series_const(&mut tape, sine(t_len, fs, 1.0, 0.0));

        // Node-constant features: every node carries the same series.
        let feat: Vec<f64> = {
            let base = sine(t_len, fs, 1.0, 0.0);
            let mut v = Vec::new();
            for t in 0..t_len {
                for _ in 0..4 {
                    v.push(base[t]);
                }
            }
            v
        };
        let features = tape.constant(Shape::new(1, 1, t_len, 4), feat).unwrap();
        let term = SmoothnessTerm {
            features,
            laplacian: lap.clone(),
            fs,
        };
        let out = composite_loss(&mut tape, pred, reference, Some(&term), fs, &cfg).unwrap();
        assert!(out.breakdown.smoothness.abs() < 1e-18);

        // Node-alternating features are penalized.
        let feat: Vec<f64> = {
            let base = sine(t_len, fs, 1.0, 0.0);
            let mut v = Vec::new();
            for t in 0..t_len {
                for n in 0..4 {
                    v.push(base[t] * if n % 2 == 0 { 1.0 } else { -1.0 });
                }
            }
            v
        };
        let features = tape.constant(Shape::new(1, 1, t_len, 4), feat).unwrap();
        let term = SmoothnessTerm {
            features,
            laplacian: lap,
            fs,
        };
        let out = composite_loss(&mut tape, pred, reference, Some(&term), fs, &cfg).unwrap();
        assert!(out.breakdown.smoothness > 1e-3);
    }

    #[test]
    fn degenerate_clips_are_masked_and_flagged() {
        let cfg = ObjectiveConfig {
            max_shift: 3,
            ..ObjectiveConfig::default()
        };
        let t_len = 64;
        let fs = 30.0;
        let mut tape: Tape<f64> = Tape::new();
        // Batch of 2: first healthy, second has a flat reference.
        let mut pred_data = sine(t_len, fs, 1.2, 0.3);
        pred_data.extend(sine(t_len, fs, 1.2, 0.3));
        let mut ref_data = sine(t_len, fs, 1.2, 0.0);
        ref_data.extend(std::iter::repeat(0.25).take(t_len));
        let shape = Shape::new(2, 1, t_len, 1);
        let pred = tape.constant(shape, pred_data).unwrap();
        let reference = tape.constant(shape, ref_data).unwrap();
        let out = composite_loss(&mut tape, pred, reference, None, fs, &cfg).unwrap();
        assert_eq!(out.breakdown.degenerate, vec![false, true]);
        assert!(out.breakdown.total.is_finite());
        // Constant reference has zero band power, so its weight is the floor
        // and its masked waveform loss is exactly 1.
        assert_eq!(out.breakdown.snr_weights[1], cfg.snr_floor);
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        let adj = SparseAdjacency::from_pairs_symmetrized(3, &[(0, 1), (1, 2)]).unwrap();
        let lap: Arc<SparseMatrix<f64>> = Arc::new(SparseMatrix::laplacian(&adj).unwrap());
        let cfg = ObjectiveConfig {
            max_shift: 2,
            ..ObjectiveConfig::default()
        };
        let t_len = 24;
        let fs = 12.0;
        let ref_data = sine(t_len, fs, 1.1, 0.0);
        let pred_init: Vec<f64> = sine(t_len, fs, 1.1, 0.9)
            .iter()
            .zip(lcg_noise(t_len))
            .map(|(s, n)| s + 0.3 * n)
            .collect();
        let feat_init: Vec<f64> = lcg_noise(t_len * 3);

        let shapes = [Shape::new(1, 1, t_len, 1), Shape::new(1, 1, t_len, 3)];
        let report = grad_check(
            move |tape, ids| {
                let reference = tape
                    .constant(Shape::new(1, 1, t_len, 1), ref_data.clone())
                    .unwrap();
                let term = SmoothnessTerm {
                    features: ids[1],
                    laplacian: lap.clone(),
                    fs,
                };
                let out =
                    composite_loss(tape, ids[0], reference, Some(&term), fs, &cfg).unwrap();
                out.total
            },
            &shapes,
            &[pred_init, feat_init],
            1e-5,
            1e-6,
        );
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }
}
