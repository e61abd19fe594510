//! Reliability-weighted trajectory prediction.
//!
//! An 8-state Kalman filter over `[cx, cy, w, h, vcx, vcy, vw, vh]` (pixels and
//! pixels per frame) observed through `H = [I₄ | 0]`. On valid frames the
//! observation noise is divided by a reliability score
//! `r = max(ε, s·|2m − 1|)`, so uncertain observations (low tracker confidence
//! `s`, or a modality weight `m` near 0.5) pull the state less. On invalid
//! frames the filter only predicts, and the process noise grows by `θ` per
//! consecutive invalid frame up to `cap × Q_base`, resetting on the next valid
//! frame.
//!
//! [`Session::step`] reports the estimate for the frame it was given: the
//! corrected state on valid frames, the prediction on invalid ones.

use alloc::vec::Vec;

use crate::bbox::{clip_box, BBox};
use crate::error::{Error, Result};
use crate::linalg::{inverse, symmetrize};
use crate::switch::{classify, Image, Modality, SwitchWeights, TriStateDecision};
use crate::tensor::Tensor;

pub const STATE_DIM: usize = 8;
pub const OBS_DIM: usize = 4;
pub const DEFAULT_EPSILON: f64 = 1e-3;
pub const DEFAULT_THETA: f64 = 1.5;
pub const DEFAULT_CAP: f64 = 10.0;

pub type StateVec = [f64; STATE_DIM];

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MotionModel {
    ConstantVelocity,
    /// Coordinated turn at a fixed rate (rad/frame) on `(cx, cy, vcx, vcy)`;
    /// size components stay constant-velocity.
    CoordinatedTurn { turn_rate: f64 },
}

/// Below this turn rate the coordinated-turn terms use their series limits.
const SMALL_TURN: f64 = 1e-9;

impl MotionModel {
    /// `(sin ω / ω, (1 − cos ω) / ω, cos ω, sin ω)` for a one-frame step.
    fn turn_terms(omega: f64) -> (f64, f64, f64, f64) {
        if libm::fabs(omega) < SMALL_TURN {
            (1.0, 0.5 * omega, 1.0, omega)
        } else {
            let (s, c) = (libm::sin(omega), libm::cos(omega));
            (s / omega, (1.0 - c) / omega, c, s)
        }
    }

    /// State transition `f(x)`.
    pub fn transition(&self, x: &StateVec) -> StateVec {
        let mut out = *x;
        for i in 0..4 {
            out[i] = x[i] + x[i + 4];
        }
        if let MotionModel::CoordinatedTurn { turn_rate } = *self {
            let (a, b, c, s) = Self::turn_terms(turn_rate);
            let (vx, vy) = (x[4], x[5]);
            out[0] = x[0] + a * vx - b * vy;
            out[1] = x[1] + b * vx + a * vy;
            out[4] = c * vx - s * vy;
            out[5] = s * vx + c * vy;
        }
        out
    }

    /// Jacobian of [`Self::transition`] at `x`.
    pub fn jacobian(&self, _x: &StateVec) -> Tensor {
        let mut f = Tensor::eye(STATE_DIM);
        for i in 0..4 {
            f.set2(i, i + 4, 1.0);
        }
        if let MotionModel::CoordinatedTurn { turn_rate } = *self {
            let (a, b, c, s) = Self::turn_terms(turn_rate);
            f.set2(0, 4, a);
            f.set2(0, 5, -b);
            f.set2(1, 4, b);
            f.set2(1, 5, a);
            f.set2(4, 4, c);
            f.set2(4, 5, -s);
            f.set2(5, 4, s);
            f.set2(5, 5, c);
        }
        f
    }
}

/// Filter parameters. Diagonals are in px² (position) and (px/frame)² (velocity).
#[derive(Debug, Clone, PartialEq)]
pub struct CtpConfig {
    pub p0_diag: [f64; STATE_DIM],
    pub q_diag: [f64; STATE_DIM],
    pub r_diag: [f64; OBS_DIM],
    pub theta: f64,
    pub cap: f64,
    pub epsilon: f64,
    pub motion: MotionModel,
    /// Divide R by the reliability score on valid frames.
    pub use_reliability: bool,
    /// Grow Q by `theta` per consecutive invalid frame.
    pub inflate_process_noise: bool,
}

impl Default for CtpConfig {
    fn default() -> Self {
        Self {
            p0_diag: [10.0, 10.0, 10.0, 10.0, 100.0, 100.0, 100.0, 100.0],
            q_diag: [1.0, 1.0, 1.0, 1.0, 0.05, 0.05, 0.05, 0.05],
            r_diag: [4.0; OBS_DIM],
            theta: DEFAULT_THETA,
            cap: DEFAULT_CAP,
            epsilon: DEFAULT_EPSILON,
            motion: MotionModel::ConstantVelocity,
            use_reliability: true,
            inflate_process_noise: true,
        }
    }
}

impl CtpConfig {
    pub fn validate(&self) -> Result<()> {
        let nonneg = |v: &[f64]| v.iter().all(|x| x.is_finite() && *x >= 0.0);
        if !nonneg(&self.p0_diag) || !nonneg(&self.q_diag) || !nonneg(&self.r_diag) {
            return Err(Error::OutOfRange("covariance diagonals must be finite and non-negative".into()));
        }
        if !(self.theta >= 1.0 && self.theta.is_finite()) {
            return Err(Error::OutOfRange(alloc::format!("theta {} must be >= 1", self.theta)));
        }
        if !(self.cap >= 1.0 && self.cap.is_finite()) {
            return Err(Error::OutOfRange(alloc::format!("cap {} must be >= 1", self.cap)));
        }
        if !(self.epsilon > 0.0 && self.epsilon <= 1.0) {
            return Err(Error::OutOfRange(alloc::format!("epsilon {} must be in (0, 1]", self.epsilon)));
        }
        if let MotionModel::CoordinatedTurn { turn_rate } = self.motion {
            if !turn_rate.is_finite() {
                return Err(Error::OutOfRange("turn rate must be finite".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterState {
    pub x: StateVec,
    pub p: Tensor,
    pub q: Tensor,
    pub r: Tensor,
    pub q_base: Tensor,
    /// Current multiple of `q_base` held in `q`.
    pub q_scale: f64,
    pub invalid_streak: u32,
}

impl FilterState {
    pub fn new(x: StateVec, cfg: &CtpConfig) -> Self {
        let q_base = Tensor::diag(&cfg.q_diag);
        Self {
            x,
            p: Tensor::diag(&cfg.p0_diag),
            q: q_base.clone(),
            r: Tensor::diag(&cfg.r_diag),
            q_base,
            q_scale: 1.0,
            invalid_streak: 0,
        }
    }
}

/// Position and size from the box, zero velocity.
pub fn box2state(b: &BBox) -> Result<StateVec> {
    b.validate()?;
    Ok([b.cx, b.cy, b.w, b.h, 0.0, 0.0, 0.0, 0.0])
}

/// First four state components as a box (unvalidated; see [`clip_box`]).
pub fn state2box(x: &StateVec) -> BBox {
    BBox::new(x[0], x[1], x[2], x[3])
}

/// `max(ε, s·|2m − 1|)`.
pub fn reliability(s: f64, m: f64, epsilon: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&s) || !(0.0..=1.0).contains(&m) {
        return Err(Error::OutOfRange(alloc::format!("reliability inputs s={s}, m={m}")));
    }
    Ok((s * libm::fabs(2.0 * m - 1.0)).max(epsilon))
}

fn observation_matrix() -> Tensor {
    let mut h = Tensor::zeros(&[OBS_DIM, STATE_DIM]);
    for i in 0..OBS_DIM {
        h.set2(i, i, 1.0);
    }
    h
}

/// Correction with observation noise `R / r`.
pub fn ctp_update(fs: &FilterState, z: &[f64; OBS_DIM], r: f64) -> Result<FilterState> {
    if !(r > 0.0 && r.is_finite()) {
        return Err(Error::OutOfRange(alloc::format!("reliability {r}")));
    }
    let h = observation_matrix();
    let ht = h.transpose()?;
    let pht = fs.p.matmul(&ht)?;
    let s = h.matmul(&pht)?.add(&fs.r.scale(1.0 / r))?;
    let s_inv = inverse(&s).map_err(|_| Error::FilterDegenerate)?;
    let k = pht.matmul(&s_inv)?;
    let hx = h.matvec(&fs.x)?;
    let innovation: Vec<f64> = z.iter().zip(&hx).map(|(a, b)| a - b).collect();
    let dx = k.matvec(&innovation)?;
    let mut x = fs.x;
    for (xi, d) in x.iter_mut().zip(&dx) {
        *xi += d;
    }
    let ikh = Tensor::eye(STATE_DIM).sub(&k.matmul(&h)?)?;
    let p = symmetrize(&ikh.matmul(&fs.p)?)?;
    Ok(FilterState { x, p, ..fs.clone() })
}

/// Kalman gain `P Hᵀ (H P Hᵀ + R/r)⁻¹`.
pub fn kalman_gain(fs: &FilterState, r: f64) -> Result<Tensor> {
    let h = observation_matrix();
    let pht = fs.p.matmul(&h.transpose()?)?;
    let s = h.matmul(&pht)?.add(&fs.r.scale(1.0 / r))?;
    pht.matmul(&inverse(&s).map_err(|_| Error::FilterDegenerate)?)
}

/// `x ← f(x)`, `P ← J P Jᵀ + Q`.
pub fn ctp_predict(fs: &FilterState, model: &MotionModel) -> Result<FilterState> {
    let j = model.jacobian(&fs.x);
    let p = symmetrize(&j.matmul(&fs.p)?.matmul(&j.transpose()?)?.add(&fs.q)?)?;
    Ok(FilterState {
        x: model.transition(&fs.x),
        p,
        ..fs.clone()
    })
}

/// One invalid frame worth of process-noise growth: scale ← min(θ·scale, cap).
pub fn inflate_q(fs: &FilterState, theta: f64, cap: f64) -> FilterState {
    let q_scale = (fs.q_scale * theta).min(cap);
    FilterState {
        q: fs.q_base.scale(q_scale),
        q_scale,
        invalid_streak: fs.invalid_streak + 1,
        ..fs.clone()
    }
}

/// Back to `Q_base` and a zero streak.
pub fn reset_q(fs: &FilterState) -> FilterState {
    FilterState {
        q: fs.q_base.clone(),
        q_scale: 1.0,
        invalid_streak: 0,
        ..fs.clone()
    }
}

/// Per-frame inputs once the frame has been classified.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measurement {
    pub decision: TriStateDecision,
    pub observed: BBox,
    /// Tracker confidence in `[0, 1]`.
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutput {
    pub bbox: BBox,
    pub decision: TriStateDecision,
    /// Reliability used for the correction; `None` on prediction-only frames.
    pub reliability: Option<f64>,
}

/// Single-target tracking session; one writer, frames in order.
#[derive(Debug, Clone)]
pub struct Session {
    config: CtpConfig,
    state: FilterState,
    frame_size: (f64, f64),
}

impl Session {
    pub fn new(initial: &BBox, frame_size: (f64, f64), config: CtpConfig) -> Result<Self> {
        config.validate()?;
        if !(frame_size.0 > 0.0 && frame_size.1 > 0.0) {
            return Err(Error::OutOfRange(alloc::format!("frame size {frame_size:?}")));
        }
        let state = FilterState::new(box2state(initial)?, &config);
        Ok(Self {
            config,
            state,
            frame_size,
        })
    }

    pub fn state(&self) -> &FilterState {
        &self.state
    }

    pub fn config(&self) -> &CtpConfig {
        &self.config
    }

    /// Classify the frame, then run [`Self::step_measured`].
    pub fn step(
        &mut self,
        image: &Image,
        features: &Tensor,
        weights: &SwitchWeights,
        rho: f64,
        observed: &BBox,
        confidence: f64,
    ) -> Result<StepOutput> {
        let decision = classify(image, features, weights, rho)?;
        self.step_measured(&Measurement {
            decision,
            observed: *observed,
            confidence,
        })
    }

    pub fn step_measured(&mut self, meas: &Measurement) -> Result<StepOutput> {
        let cfg = &self.config;
        let mut reliability_used = None;
        let next = if meas.decision.state == Modality::Invalid {
            let fs = if cfg.inflate_process_noise {
                inflate_q(&self.state, cfg.theta, cfg.cap)
            } else {
                FilterState {
                    invalid_streak: self.state.invalid_streak + 1,
                    ..self.state.clone()
                }
            };
            ctp_predict(&fs, &cfg.motion)?
        } else {
            let r = if cfg.use_reliability {
                reliability(meas.confidence, meas.decision.m, cfg.epsilon)?
            } else {
                1.0
            };
            reliability_used = Some(r);
            let z = box2state(&meas.observed)?;
            let fs = if self.state.invalid_streak > 0 {
                reset_q(&self.state)
            } else {
                self.state.clone()
            };
            let predicted = ctp_predict(&fs, &cfg.motion)?;
            ctp_update(&predicted, &[z[0], z[1], z[2], z[3]], r)?
        };
        self.state = next;
        Ok(StepOutput {
            bbox: clip_box(&state2box(&self.state.x), self.frame_size.0, self.frame_size.1),
            decision: meas.decision,
            reliability: reliability_used,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg::{is_psd, trace};
    use crate::switch::decide;

    fn valid(m: f64) -> TriStateDecision {
        decide(m, 0.0, false)
    }

    fn invalid() -> TriStateDecision {
        decide(0.5, 1.0, true)
    }

    #[test]
    fn box_state_round_trip() {
        let b = BBox::new(10.0, 20.0, 5.0, 8.0);
        let x = box2state(&b).unwrap();
        assert_eq!(x, [10.0, 20.0, 5.0, 8.0, 0.0, 0.0, 0.0, 0.0]);
        assert_eq!(state2box(&x), b);
        assert!(box2state(&BBox::new(1.0, 1.0, -2.0, 3.0)).is_err());
        assert!(box2state(&BBox::new(1.0, 1.0, 2.0, 0.0)).is_err());
    }

    #[test]
    fn reliability_values() {
        assert_eq!(reliability(0.8, 1.0, 1e-3).unwrap(), 0.8);
        assert_eq!(reliability(0.37, 0.5, 1e-3).unwrap(), 1e-3);
        assert_eq!(reliability(0.0, 0.0, 1e-3).unwrap(), 1e-3);
        assert!(reliability(1.2, 0.5, 1e-3).is_err());
        assert!(reliability(0.5, -0.1, 1e-3).is_err());
    }

    #[test]
    fn zero_innovation_keeps_state_and_shrinks_p() {
        let cfg = CtpConfig::default();
        let mut fs = FilterState::new([5.0, 6.0, 7.0, 8.0, 1.0, -1.0, 0.0, 0.5], &cfg);
        fs = ctp_predict(&fs, &cfg.motion).unwrap();
        let z = [fs.x[0], fs.x[1], fs.x[2], fs.x[3]];
        let up = ctp_update(&fs, &z, 0.7).unwrap();
        assert_eq!(up.x, fs.x);
        assert!(trace(&up.p) <= trace(&fs.p));
        // idempotent on x
        let again = ctp_update(&up, &z, 0.7).unwrap();
        assert_eq!(again.x, fs.x);
    }

    #[test]
    fn low_reliability_shrinks_gain() {
        let cfg = CtpConfig::default();
        let fs = FilterState::new([0.0; 8], &cfg);
        let k_lo = kalman_gain(&fs, 1e-3).unwrap();
        let k_hi = kalman_gain(&fs, 1.0).unwrap();
        for (lo, hi) in k_lo.data().iter().zip(k_hi.data()) {
            if *hi != 0.0 {
                assert!(lo.abs() < hi.abs());
            }
        }
    }

    #[test]
    fn cv_prediction() {
        let cfg = CtpConfig::default();
        let fs = FilterState::new([3.0, 4.0, 5.0, 6.0, 0.0, 0.0, 0.0, 0.0], &cfg);
        let next = ctp_predict(&fs, &MotionModel::ConstantVelocity).unwrap();
        assert_eq!(next.x, fs.x);
        // F P Fᵀ moves each velocity variance onto its position entry
        let vel: f64 = (4..8).map(|i| fs.p.get2(i, i)).sum();
        assert!((trace(&next.p) - trace(&fs.p) - vel - trace(&fs.q)).abs() < 1e-9);
        let fs = FilterState::new([0.0, 0.0, 1.0, 1.0, 4.0, 0.0, 0.0, 0.0], &cfg);
        assert_eq!(ctp_predict(&fs, &MotionModel::ConstantVelocity).unwrap().x[0], 4.0);
    }

    #[test]
    fn turn_with_zero_rate_is_cv() {
        let cfg = CtpConfig::default();
        let mut fs = FilterState::new([3.0, 4.0, 5.0, 6.0, 1.5, -2.0, 0.1, 0.2], &cfg);
        fs.p = fs.p.add(&Tensor::full(&[8, 8], 0.5)).unwrap();
        let cv = ctp_predict(&fs, &MotionModel::ConstantVelocity).unwrap();
        for omega in [0.0, 1e-12] {
            let ct = ctp_predict(&fs, &MotionModel::CoordinatedTurn { turn_rate: omega }).unwrap();
            assert!(cv.x.iter().zip(&ct.x).all(|(a, b)| (a - b).abs() < 1e-9));
            assert!(cv.p.max_abs_diff(&ct.p) < 1e-9);
        }
    }

    #[test]
    fn turn_preserves_speed_and_jacobian_matches_differences() {
        let model = MotionModel::CoordinatedTurn { turn_rate: 0.1 };
        let x = [10.0, 20.0, 8.0, 9.0, 3.0, 4.0, 0.1, -0.2];
        let y = model.transition(&x);
        assert!((libm::hypot(y[4], y[5]) - 5.0).abs() < 1e-12);
        let j = model.jacobian(&x);
        let h = 1e-6;
        for col in 0..8 {
            let (mut xp, mut xm) = (x, x);
            xp[col] += h;
            xm[col] -= h;
            let (fp, fm) = (model.transition(&xp), model.transition(&xm));
            for row in 0..8 {
                let fd = (fp[row] - fm[row]) / (2.0 * h);
                assert!((fd - j.get2(row, col)).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn inflation_schedule() {
        let cfg = CtpConfig::default();
        let mut fs = FilterState::new([0.0; 8], &cfg);
        let mut expect = 1.0;
        for k in 1..=12 {
            fs = inflate_q(&fs, 1.5, 10.0);
            expect = f64::min(expect * 1.5, 10.0);
            assert_eq!(fs.q, fs.q_base.scale(expect), "k={k}");
            assert_eq!(fs.invalid_streak, k);
        }
        assert_eq!(fs.q_scale, 10.0);
        let reset = reset_q(&fs);
        assert_eq!(reset.q, reset.q_base);
    }

    #[test]
    fn session_perfect_observation_zero_noise() {
        let cfg = CtpConfig {
            q_diag: [0.0; 8],
            r_diag: [1e-12; 4],
            ..CtpConfig::default()
        };
        let b0 = BBox::new(50.0, 60.0, 20.0, 30.0);
        let mut s = Session::new(&b0, (640.0, 480.0), cfg).unwrap();
        let obs = BBox::new(52.0, 59.0, 21.0, 29.0);
        let out = s
            .step_measured(&Measurement {
                decision: valid(0.0),
                observed: obs,
                confidence: 1.0,
            })
            .unwrap();
        for (a, b) in out.bbox.to_array().iter().zip(obs.to_array()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn invalid_streak_follows_cv_extrapolation() {
        let cfg = CtpConfig::default();
        let mut s = Session::new(&BBox::new(100.0, 100.0, 20.0, 20.0), (1000.0, 1000.0), cfg).unwrap();
        for t in 1..=30 {
            let obs = BBox::new(100.0 + 4.0 * t as f64, 100.0, 20.0, 20.0);
            s.step_measured(&Measurement {
                decision: valid(0.02),
                observed: obs,
                confidence: 0.9,
            })
            .unwrap();
        }
        let base = s.state().x;
        for k in 1..=10 {
            let out = s
                .step_measured(&Measurement {
                    decision: invalid(),
                    observed: BBox::new(1.0, 1.0, 1.0, 1.0),
                    confidence: 0.0,
                })
                .unwrap();
            assert!(out.reliability.is_none());
            let ex = base[0] + k as f64 * base[4];
            let ey = base[1] + k as f64 * base[5];
            assert!((out.bbox.cx - ex).abs() < 1e-9 && (out.bbox.cy - ey).abs() < 1e-9);
            assert!((base[4] - 4.0).abs() < 0.05);
        }
        assert_eq!(s.state().q_scale, 10.0f64.min(1.5f64.powi(10)));
        s.step_measured(&Measurement {
            decision: valid(0.02),
            observed: BBox::new(184.0, 100.0, 20.0, 20.0),
            confidence: 0.9,
        })
        .unwrap();
        assert_eq!(s.state().q_scale, 1.0);
        assert_eq!(s.state().invalid_streak, 0);
    }

    #[test]
    fn covariance_stays_psd() {
        let cfg = CtpConfig {
            motion: MotionModel::CoordinatedTurn { turn_rate: 0.05 },
            ..CtpConfig::default()
        };
        let mut s = Session::new(&BBox::new(300.0, 300.0, 30.0, 30.0), (640.0, 640.0), cfg).unwrap();
        let mut seed = 42u64;
        let mut next = || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (seed >> 11) as f64 / (1u64 << 53) as f64
        };
        for t in 0..1000 {
            let dec = if next() < 0.3 { invalid() } else { valid(next()) };
            let obs = BBox::new(300.0 + 10.0 * next(), 300.0 + 10.0 * next(), 30.0 + next(), 30.0 + next());
            s.step_measured(&Measurement {
                decision: dec,
                observed: obs,
                confidence: next(),
            })
            .unwrap();
            assert!(is_psd(&s.state().p), "P lost PSD at step {t}");
        }
    }
}
