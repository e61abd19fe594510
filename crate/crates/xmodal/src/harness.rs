//! End-to-end tracking loop over a generated sequence.
//!
//! Per frame: classify the crop, refine toy search-region tokens with the
//! adapter on NIR frames, then hand the stub observation to the motion
//! component. Frame 0 is the given initial box.

use serde::{Deserialize, Serialize};
use xmodal_core::ctp::{CtpConfig, Measurement, MotionModel, Session};
use xmodal_core::metrics::TrackRun;
use xmodal_core::nn::{adaptive_avg_pool, linear};
use xmodal_core::switch::{classify, Modality, TriStateDecision, DEFAULT_RHO};
use xmodal_core::{BBox, Tensor};

use crate::sim::{switch_features, Frame, Model, Sequence, TEMPLATE_TOKENS, TOKEN_GRID};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum MotionMode {
    /// Raw observations; the last box is held on invalid frames.
    Off,
    /// Constant-velocity Kalman filter with fixed R.
    Kf,
    /// Coordinated-turn filter at the scenario's turn rate, fixed R.
    Ekf,
    /// Coordinated turn with reliability weighting and Q inflation.
    Ctp,
}

impl MotionMode {
    pub const ALL: [MotionMode; 4] = [MotionMode::Off, MotionMode::Kf, MotionMode::Ekf, MotionMode::Ctp];

    pub fn as_str(self) -> &'static str {
        match self {
            MotionMode::Off => "off",
            MotionMode::Kf => "kf",
            MotionMode::Ekf => "ekf",
            MotionMode::Ctp => "ctp",
        }
    }
}

impl std::fmt::Display for MotionMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.pad(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub motion: MotionMode,
    pub rho: f64,
    /// Covariances, θ, cap and ε; the motion model and the two switches are
    /// set from `motion`.
    pub filter: CtpConfig,
    pub adapter: bool,
    /// Turn rate for `ekf`/`ctp`; the scenario's own when unset.
    pub turn_rate: Option<f64>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            motion: MotionMode::Ctp,
            rho: DEFAULT_RHO,
            filter: CtpConfig::default(),
            adapter: true,
            turn_rate: None,
        }
    }
}

impl RunConfig {
    pub fn filter_for(&self, turn_rate: f64) -> CtpConfig {
        let turn = MotionModel::CoordinatedTurn { turn_rate };
        let (motion, reliability, inflate) = match self.motion {
            MotionMode::Off | MotionMode::Kf => (MotionModel::ConstantVelocity, false, false),
            MotionMode::Ekf => (turn, false, false),
            MotionMode::Ctp => (turn, true, true),
        };
        CtpConfig {
            motion,
            use_reliability: reliability,
            inflate_process_noise: inflate,
            ..self.filter.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameOutput {
    pub index: usize,
    pub pred: [f64; 4],
    pub state: String,
    pub m: f64,
    pub white_ratio: f64,
    /// Reliability used for the correction; absent when none was applied.
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub reliability: Option<f64>,
    /// Largest change the adapter made to any token feature.
    pub adapter_shift: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutput {
    pub sequence: String,
    pub motion: MotionMode,
    pub frames: Vec<FrameOutput>,
}

impl RunOutput {
    pub fn boxes(&self) -> Vec<BBox> {
        self.frames.iter().map(|f| BBox::from_array(f.pred)).collect()
    }

    /// Pair with ground truth and tags for scoring.
    pub fn track_run(&self, seq: &Sequence) -> xmodal_core::Result<TrackRun> {
        TrackRun::new(
            self.boxes(),
            seq.frames.iter().map(|f| f.gt).collect(),
            seq.frames.iter().map(|f| f.tags.clone()).collect(),
        )
    }
}

/// Search-region tokens: the crop pooled to a 4×4 grid, one token per cell,
/// embedded from 3 channel means to `d` features.
fn search_tokens(features: &Tensor, model: &Model) -> xmodal_core::Result<Tensor> {
    let grid = adaptive_avg_pool(features, (TOKEN_GRID, TOKEN_GRID))?;
    let cells = TOKEN_GRID * TOKEN_GRID;
    let mut rows = Tensor::zeros(&[cells, 3]);
    for c in 0..3 {
        for i in 0..cells {
            rows.set2(i, c, grid[c * cells + i]);
        }
    }
    linear(&rows, &model.embed_weight, &model.embed_bias)
}

/// Dynamic template: consecutive token groups averaged down to 4 tokens.
fn template_from(tokens: &Tensor) -> Tensor {
    let (t, d) = tokens.dims2().expect("token matrix");
    let group = t / TEMPLATE_TOKENS;
    let mut out = Tensor::zeros(&[TEMPLATE_TOKENS, d]);
    for g in 0..TEMPLATE_TOKENS {
        for i in g * group..(g + 1) * group {
            for j in 0..d {
                out.set2(g, j, out.get2(g, j) + tokens.get2(i, j) / group as f64);
            }
        }
    }
    out
}

/// Classifier decision and adapter activity for one frame. Independent of
/// the motion component, so ablations compute it once per sequence.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Percept {
    pub decision: TriStateDecision,
    pub adapter_shift: f64,
}

pub fn perceive(seq: &Sequence, model: &Model, rho: f64, adapter: bool) -> xmodal_core::Result<Vec<Percept>> {
    let Some(first) = seq.frames.first() else {
        return Err(xmodal_core::Error::Degenerate("empty sequence"));
    };
    let mut template = if adapter {
        Some(template_from(&search_tokens(&switch_features(&first.image), model)?))
    } else {
        None
    };
    seq.frames
        .iter()
        .map(|frame| {
            let features = switch_features(&frame.image);
            let decision = classify(&frame.image, &features, &model.switch, rho)?;
            let adapter_shift = match template.as_mut() {
                Some(tmpl) if decision.state != Modality::Invalid => {
                    adapt_frame(&features, tmpl, model, decision.m, decision.state)?
                }
                _ => 0.0,
            };
            Ok(Percept { decision, adapter_shift })
        })
        .collect()
}

pub fn run(seq: &Sequence, model: &Model, cfg: &RunConfig) -> xmodal_core::Result<RunOutput> {
    track(seq, &perceive(seq, model, cfg.rho, cfg.adapter)?, cfg)
}

/// Motion component over precomputed percepts.
pub fn track(seq: &Sequence, percepts: &[Percept], cfg: &RunConfig) -> xmodal_core::Result<RunOutput> {
    let scenario = &seq.scenario;
    let Some(first) = seq.frames.first() else {
        return Err(xmodal_core::Error::Degenerate("empty sequence"));
    };
    if percepts.len() != seq.frames.len() {
        return Err(xmodal_core::Error::Dimension {
            op: "track",
            lhs: vec![seq.frames.len()],
            rhs: vec![percepts.len()],
        });
    }
    let size = (scenario.width, scenario.height);
    let mut session = Session::new(&first.gt, size, cfg.filter_for(cfg.turn_rate.unwrap_or(scenario.motion.turn_rate)))?;
    let mut held = first.gt;
    let mut frames = Vec::with_capacity(seq.frames.len());
    for (t, (frame, p)) in seq.frames.iter().zip(percepts).enumerate() {
        let decision = p.decision;
        let (pred, reliability) = if t == 0 {
            (first.gt, None)
        } else {
            track_frame(frame, decision, cfg.motion, &mut session, &mut held)?
        };
        frames.push(FrameOutput {
            index: frame.index,
            pred: pred.to_array(),
            state: decision.state.as_str().to_string(),
            m: decision.m,
            white_ratio: decision.white_ratio,
            reliability,
            adapter_shift: p.adapter_shift,
        });
    }
    Ok(RunOutput {
        sequence: scenario.name.clone(),
        motion: cfg.motion,
        frames,
    })
}

fn adapt_frame(features: &Tensor, template: &mut Tensor, model: &Model, m: f64, state: Modality) -> xmodal_core::Result<f64> {
    let tokens = search_tokens(features, model)?;
    let refined = model.adapter.adapt(&tokens, template, m, state)?;
    let shift = refined.max_abs_diff(&tokens);
    *template = template_from(&refined);
    Ok(shift)
}

fn track_frame(
    frame: &Frame,
    decision: TriStateDecision,
    motion: MotionMode,
    session: &mut Session,
    held: &mut BBox,
) -> xmodal_core::Result<(BBox, Option<f64>)> {
    if motion == MotionMode::Off {
        if decision.state != Modality::Invalid {
            *held = frame.observed;
        }
        return Ok((*held, None));
    }
    let out = session.step_measured(&Measurement {
        decision,
        observed: frame.observed,
        confidence: frame.confidence,
    })?;
    Ok((out.bbox, out.reliability))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate, Band, ConfidenceModel, MotionSpec, Scenario, Span, Window};
    use xmodal_core::metrics::{precision_rate, success_rate};

    fn scenario(invalid: Vec<Window>, sigma: f64) -> Scenario {
        Scenario {
            name: "h".into(),
            frames: 60,
            width: 640.0,
            height: 480.0,
            motion: MotionSpec {
                initial: [100.0, 240.0, 40.0, 40.0],
                velocity: [4.0, 0.0],
                turn_rate: 0.0,
            },
            modality_schedule: vec![Span {
                start: 20,
                end: 40,
                modality: Band::Nir,
            }],
            invalid_windows: invalid,
            sigma,
            confidence: ConfidenceModel::default(),
            seed: 3,
        }
    }

    #[test]
    fn clean_sequence_scores_perfectly_in_every_mode() {
        let seq = generate(&scenario(Vec::new(), 0.0)).unwrap();
        let model = Model::seeded(1);
        for motion in MotionMode::ALL {
            let cfg = RunConfig { motion, ..RunConfig::default() };
            let run = run(&seq, &model, &cfg).unwrap().track_run(&seq).unwrap();
            assert_eq!(precision_rate(&run, 20.0), 100.0, "{motion}");
            assert_eq!(success_rate(&run, 0.5), 100.0, "{motion}");
        }
    }

    #[test]
    fn off_holds_the_last_observation() {
        let seq = generate(&scenario(vec![Window { start: 30, end: 50 }], 2.0)).unwrap();
        let cfg = RunConfig { motion: MotionMode::Off, ..RunConfig::default() };
        let out = run(&seq, &Model::seeded(1), &cfg).unwrap();
        for f in &out.frames[30..50] {
            assert_eq!(f.pred, seq.frames[29].observed.to_array());
        }
    }

    #[test]
    fn ctp_extrapolates_without_looking() {
        let seq = generate(&scenario(vec![Window { start: 30, end: 50 }], 2.0)).unwrap();
        let mut session = Session::new(&seq.frames[0].gt, (640.0, 480.0), RunConfig::default().filter_for(0.0)).unwrap();
        let out = run(&seq, &Model::seeded(1), &RunConfig::default()).unwrap();
        // replay the valid prefix, then extrapolate the pre-window state by hand
        for f in &seq.frames[1..30] {
            let d = classify(&f.image, &switch_features(&f.image), &Model::seeded(1).switch, DEFAULT_RHO).unwrap();
            session.step_measured(&Measurement { decision: d, observed: f.observed, confidence: f.confidence }).unwrap();
        }
        let x = session.state().x;
        for (k, f) in out.frames[30..50].iter().enumerate() {
            let steps = (k + 1) as f64;
            for i in 0..4 {
                assert!((f.pred[i] - (x[i] + steps * x[i + 4])).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn adapter_only_touches_nir_frames() {
        let seq = generate(&scenario(Vec::new(), 1.0)).unwrap();
        let out = run(&seq, &Model::seeded(4), &RunConfig::default()).unwrap();
        for f in &out.frames {
            if f.state == "NIR" {
                assert!(f.adapter_shift > 0.0);
            } else {
                assert_eq!(f.adapter_shift, 0.0);
            }
        }
        let plain = run(&seq, &Model::seeded(4), &RunConfig { adapter: false, ..RunConfig::default() }).unwrap();
        assert_eq!(plain.boxes(), out.boxes());
    }
}
