//! The wave component: a complex recurrence whose history propagates through
//! norm-preserving Givens rotations, gated by a per-token measurement
//! probability, with a second "Born" pass that perturbatively corrects the
//! input using the first pass's states.
//!
//! One step of the recurrence:
//!
//!   h_t = (1 - p_t) * R(theta_t) h_{t-1} + p_t * (W_r x_t + i W_i x_t)
//!
//! with p_t = sigmoid(s_eff(t) + mu) * 0.5 + eps and
//! s_eff(t) = beta_t * ln(t+2) + w_pos . [sin(pi t / T), cos(pi t / T)].
//! R is a set of disjoint-pair Givens rotations, so ||R h|| = ||h|| exactly
//! (up to rounding) for any angles — the history channel never dissipates on
//! its own; only the (1 - p_t) gate contracts it.

use num_complex::Complex64;
use std::sync::Arc;

use crate::error::{FdmError, Result};
use crate::kernels;
use crate::tape::{Buf, Tape, TensorId};

// ── Rotation structure ───────────────────────────────────────────────

/// Disjoint index pairs acted on by one rotation set. Disjointness makes the
/// rotations commute, so the compose order is irrelevant and the map is
/// exactly orthogonal.
#[derive(Clone, Debug)]
pub struct GivensPairs {
    pairs: Arc<Vec<(usize, usize)>>,
    dim: usize,
}

impl GivensPairs {
    /// Validated construction from explicit pairs.
    pub fn new(dim: usize, pairs: Vec<(usize, usize)>) -> Result<Self> {
        let mut seen = vec![false; dim];
        for &(i, j) in &pairs {
            if i >= j || j >= dim {
                return Err(FdmError::Config(format!(
                    "rotation pair ({i},{j}) out of range for dim {dim}"
                )));
            }
            if seen[i] || seen[j] {
                return Err(FdmError::Config(format!(
                    "rotation pair ({i},{j}) overlaps another pair"
                )));
            }
            seen[i] = true;
            seen[j] = true;
        }
        Ok(GivensPairs { pairs: Arc::new(pairs), dim })
    }

    /// The default pairing (0,1), (2,3), ... with `n_g` pairs.
    pub fn interleaved(dim: usize, n_g: usize) -> Result<Self> {
        if 2 * n_g > dim {
            return Err(FdmError::Config(format!(
                "{n_g} disjoint pairs do not fit in dim {dim}"
            )));
        }
        Self::new(dim, (0..n_g).map(|k| (2 * k, 2 * k + 1)).collect())
    }

    pub fn n_pairs(&self) -> usize {
        self.pairs.len()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn pairs(&self) -> &Arc<Vec<(usize, usize)>> {
        &self.pairs
    }

    /// Kernel-path application (decode, oracles).
    pub fn apply(&self, h: &[Complex64], theta: &[f64]) -> Vec<Complex64> {
        assert_eq!(theta.len(), self.n_pairs(), "angle count {} vs {} pairs", theta.len(), self.n_pairs());
        assert_eq!(h.len(), self.dim);
        let mut out = vec![Complex64::new(0.0, 0.0); h.len()];
        kernels::givens_apply(h, theta, &self.pairs, &mut out);
        out
    }
}

// ── Measurement schedule ─────────────────────────────────────────────

/// Positional features entering s_eff: [sin(pi t / T), cos(pi t / T)].
pub fn pos_features(t: usize, horizon: usize) -> [f64; 2] {
    let phase = std::f64::consts::PI * t as f64 / horizon as f64;
    [phase.sin(), phase.cos()]
}

/// The measurement-probability schedule as plain values, for direct
/// evaluation outside a tape.
#[derive(Clone, Debug)]
pub struct MeasurementSchedule {
    pub w_beta: Vec<f64>,
    pub w_pos: [f64; 2],
    pub mu: f64,
    pub eps: f64,
    pub horizon: usize,
}

impl MeasurementSchedule {
    pub fn new(w_beta: Vec<f64>, w_pos: [f64; 2], mu: f64, eps: f64, horizon: usize) -> Result<Self> {
        if horizon == 0 {
            return Err(FdmError::Config(
                "measurement schedule horizon must be >= 1 (division by zero in positional phase)".into(),
            ));
        }
        if eps <= 0.0 {
            return Err(FdmError::Config("measurement floor eps must be > 0".into()));
        }
        Ok(MeasurementSchedule { w_beta, w_pos, mu, eps, horizon })
    }

    pub fn project_beta(&self, x_t: &[f64]) -> f64 {
        assert_eq!(x_t.len(), self.w_beta.len(), "beta projection dim mismatch");
        let mut out = [0.0];
        kernels::matmul_tb(x_t, &self.w_beta, &mut out, 1, x_t.len(), 1);
        out[0]
    }

    /// (s_eff, p) at position t given the projected beta_t.
    pub fn evaluate_beta(&self, t: usize, beta_t: f64) -> (f64, f64) {
        let pf = pos_features(t, self.horizon);
        let mut pos_term = [0.0];
        kernels::matmul_tb(&pf, &self.w_pos, &mut pos_term, 1, 2, 1);
        let s_eff = beta_t * ((t + 2) as f64).ln() + pos_term[0];
        let p = kernels::sigmoid(s_eff + self.mu) * 0.5 + self.eps;
        (s_eff, p)
    }

    /// (s_eff, p) at position t for the input x_t.
    pub fn evaluate(&self, t: usize, x_t: &[f64]) -> (f64, f64) {
        self.evaluate_beta(t, self.project_beta(x_t))
    }
}

// ── Tape-path scan ───────────────────────────────────────────────────

/// Tape tensors for one layer's wave parameters.
#[derive(Clone, Copy, Debug)]
pub struct WaveTensors {
    pub w_theta: TensorId,   // [n_g, d]
    pub w_theta_h: TensorId, // [n_g, d] second rotation set (Born correction)
    pub w_r: TensorId,       // [d, d]
    pub w_i: TensorId,       // [d, d]
    pub w_beta: TensorId,    // [1, d]
    pub w_pos: TensorId,     // [1, 2]
    pub mu: TensorId,        // [1, 1]
    pub delta_gate: TensorId, // [1, d] per-channel gate logit
    pub conv_w: TensorId,    // [k_c, d]
    pub conv_b: TensorId,    // [1, d]
}

#[derive(Debug)]
pub struct WaveScanOut {
    /// Pass-2 hidden states, complex [T, d].
    pub h2: TensorId,
    /// Pass-1 hidden states, complex [T, d] (exposed for tests).
    pub h1: TensorId,
    /// Detached s_eff values per position (drives global-slot selection).
    pub s_eff: Vec<f64>,
    /// Detached measurement probabilities per position.
    pub p: Vec<f64>,
}

/// Run the two-pass Born scan over a full sequence on the tape.
///
/// `u` is the layer's (normalized) input, real [T, d]. Both passes share all
/// weights; pass 2 re-runs the identical Fan recurrence with the real part
/// of the gated correction g*delta_t added to the W_r channel and its
/// imaginary part added to the W_i channel.
pub fn born_scan(
    tape: &mut Tape,
    wt: &WaveTensors,
    u: TensorId,
    pairs: &GivensPairs,
    eps: f64,
    horizon: usize,
    checked: bool,
) -> Result<WaveScanOut> {
    let t_len = tape.shape(u)[0];
    let d = tape.shape(u)[1];
    assert!(t_len >= 1, "born_scan: empty sequence");
    assert!(horizon >= 1, "born_scan: horizon must be >= 1");

    // Causal depthwise conv, then all wave projections read the conv output.
    let c = tape.causal_conv(u, wt.conv_w, wt.conv_b);
    let betas = tape.matmul_tb(c, wt.w_beta); // [T, 1]

    let logt: Vec<f64> = (0..t_len).map(|t| ((t + 2) as f64).ln()).collect();
    let logt = tape.constant_f64(logt, &[t_len, 1]);
    let mut posf = Vec::with_capacity(t_len * 2);
    for t in 0..t_len {
        posf.extend_from_slice(&pos_features(t, horizon));
    }
    let posf = tape.constant_f64(posf, &[t_len, 2]);
    let pos_term = tape.matmul_tb(posf, wt.w_pos); // [T, 1]

    let s_eff = {
        let growth = tape.mul(betas, logt);
        tape.add(growth, pos_term)
    };
    let mu_rep = tape.repeat_rows(wt.mu, t_len);
    let p = {
        let pre = tape.add(s_eff, mu_rep);
        let sig = tape.sigmoid(pre);
        let half = tape.scale(sig, 0.5);
        tape.add_scalar(half, eps)
    };

    let thetas = tape.matmul_tb(c, wt.w_theta); // [T, n_g]
    let thetas_h = tape.matmul_tb(c, wt.w_theta_h);
    let inj_re = tape.matmul_tb(c, wt.w_r); // [T, d]
    let inj_im = tape.matmul_tb(c, wt.w_i);

    let gate = tape.sigmoid(wt.delta_gate); // [1, d]

    // Per-position slices reused by both passes.
    let mut th_rows = Vec::with_capacity(t_len);
    let mut p_rows = Vec::with_capacity(t_len);
    let mut ir_rows = Vec::with_capacity(t_len);
    let mut ii_rows = Vec::with_capacity(t_len);
    for t in 0..t_len {
        th_rows.push(tape.slice_rows(thetas, t, 1));
        let p_t = tape.slice_rows(p, t, 1);
        p_rows.push(tape.repeat_cols(p_t, d));
        ir_rows.push(tape.slice_rows(inj_re, t, 1));
        ii_rows.push(tape.slice_rows(inj_im, t, 1));
    }

    let fan_pass = |tape: &mut Tape,
                    re_rows: &[TensorId],
                    im_rows: &[TensorId],
                    label: &str|
     -> Result<Vec<TensorId>> {
        let mut h_prev =
            tape.constant(Buf::C128(vec![Complex64::new(0.0, 0.0); d]), &[1, d]);
        let mut states = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let rot = tape.givens_rotate(h_prev, th_rows[t], pairs.pairs());
            let inj = tape.complex_from_parts(re_rows[t], im_rows[t]);
            let omp = {
                let negp = tape.scale(p_rows[t], -1.0);
                tape.add_scalar(negp, 1.0)
            };
            let keep = tape.mul(omp, rot);
            let take = tape.mul(p_rows[t], inj);
            let h_t = tape.add(keep, take);
            if checked && !tape.value(h_t).is_finite() {
                return Err(FdmError::NonFinite { context: format!("fan_step {label}"), position: t });
            }
            states.push(h_t);
            h_prev = h_t;
        }
        Ok(states)
    };

    let h1_rows = fan_pass(tape, &ir_rows, &ii_rows, "pass 1")?;

    // Born correction: delta_t = GivensH(h1_t) - h1_t, gated by sigmoid(delta_gate).
    let mut re2_rows = Vec::with_capacity(t_len);
    let mut im2_rows = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let th_h_t = tape.slice_rows(thetas_h, t, 1);
        let rotated = tape.givens_rotate(h1_rows[t], th_h_t, pairs.pairs());
        let delta = tape.sub(rotated, h1_rows[t]);
        let corr = tape.mul(gate, delta);
        let d_re = tape.real_part(corr);
        let d_im = tape.imag_part(corr);
        re2_rows.push(tape.add(ir_rows[t], d_re));
        im2_rows.push(tape.add(ii_rows[t], d_im));
    }
    let h2_rows = fan_pass(tape, &re2_rows, &im2_rows, "pass 2")?;

    let h1 = tape.concat_rows(&h1_rows);
    let h2 = tape.concat_rows(&h2_rows);
    let s_eff_vals = tape.value_f64(s_eff).to_vec();
    let p_vals = tape.value_f64(p).to_vec();
    Ok(WaveScanOut { h2, h1, s_eff: s_eff_vals, p: p_vals })
}

// ── Decode path (kernels, no tape) ───────────────────────────────────

/// Borrowed wave parameter values for one layer.
#[derive(Clone, Copy)]
pub struct WaveView<'a> {
    pub w_theta: &'a [f64],
    pub w_theta_h: &'a [f64],
    pub w_r: &'a [f64],
    pub w_i: &'a [f64],
    pub w_beta: &'a [f64],
    pub w_pos: &'a [f64],
    pub mu: f64,
    pub delta_gate: &'a [f64],
    pub d: usize,
    pub n_g: usize,
}

/// Decode-time wave state: two complex vectors, O(1) in sequence length.
/// Pass 2's correction depends only on pass 1's state at the same position,
/// so incremental decode carries both passes exactly.
#[derive(Clone, Debug)]
pub struct WaveDecodeState {
    pub h1: Vec<Complex64>,
    pub h2: Vec<Complex64>,
}

impl WaveDecodeState {
    pub fn zeros(d: usize) -> Self {
        WaveDecodeState {
            h1: vec![Complex64::new(0.0, 0.0); d],
            h2: vec![Complex64::new(0.0, 0.0); d],
        }
    }

    pub fn bytes(&self) -> usize {
        (self.h1.len() + self.h2.len()) * std::mem::size_of::<Complex64>()
    }
}

pub struct WaveStepOut {
    pub s_eff: f64,
    pub p: f64,
}

/// One incremental step of the two-pass scan; numerics identical to the
/// batch path. `c_t` is the post-conv input row for position t.
pub fn wave_decode_step(
    state: &mut WaveDecodeState,
    view: &WaveView,
    pairs: &GivensPairs,
    c_t: &[f64],
    t: usize,
    eps: f64,
    horizon: usize,
) -> WaveStepOut {
    let (d, n_g) = (view.d, view.n_g);
    let din = c_t.len();

    let mut theta = vec![0.0; n_g];
    kernels::matmul_tb(c_t, view.w_theta, &mut theta, 1, din, n_g);
    let mut theta_h = vec![0.0; n_g];
    kernels::matmul_tb(c_t, view.w_theta_h, &mut theta_h, 1, din, n_g);
    let mut beta = [0.0];
    kernels::matmul_tb(c_t, view.w_beta, &mut beta, 1, din, 1);
    let pf = pos_features(t, horizon);
    let mut pos_term = [0.0];
    kernels::matmul_tb(&pf, view.w_pos, &mut pos_term, 1, 2, 1);
    let s_eff = beta[0] * ((t + 2) as f64).ln() + pos_term[0];
    let p = kernels::sigmoid(s_eff + view.mu) * 0.5 + eps;

    let mut inj_re = vec![0.0; d];
    kernels::matmul_tb(c_t, view.w_r, &mut inj_re, 1, din, d);
    let mut inj_im = vec![0.0; d];
    kernels::matmul_tb(c_t, view.w_i, &mut inj_im, 1, din, d);

    // pass 1
    let mut rot = vec![Complex64::new(0.0, 0.0); d];
    kernels::givens_apply(&state.h1, &theta, pairs.pairs(), &mut rot);
    let mut h1_new = vec![Complex64::new(0.0, 0.0); d];
    kernels::fan_mix(&rot, p, &inj_re, &inj_im, &mut h1_new);

    // Born correction from the fresh pass-1 state
    let mut rotated = vec![Complex64::new(0.0, 0.0); d];
    kernels::givens_apply(&h1_new, &theta_h, pairs.pairs(), &mut rotated);
    let mut inj2_re = vec![0.0; d];
    let mut inj2_im = vec![0.0; d];
    for c in 0..d {
        let delta = rotated[c] - h1_new[c];
        let g = kernels::sigmoid(view.delta_gate[c]);
        let corr = delta * g;
        inj2_re[c] = inj_re[c] + corr.re;
        inj2_im[c] = inj_im[c] + corr.im;
    }

    // pass 2
    kernels::givens_apply(&state.h2, &theta, pairs.pairs(), &mut rot);
    let mut h2_new = vec![Complex64::new(0.0, 0.0); d];
    kernels::fan_mix(&rot, p, &inj2_re, &inj2_im, &mut h2_new);

    state.h1 = h1_new;
    state.h2 = h2_new;
    WaveStepOut { s_eff, p }
}
