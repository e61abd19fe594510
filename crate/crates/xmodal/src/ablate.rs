//! Motion-component ablation over seeded scenario suites.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use xmodal_core::metrics::{precision_rate, success_rate, TrackRun, DEFAULT_PR_THRESHOLD, DEFAULT_SR_THRESHOLD};
use xmodal_core::BBox;

use crate::harness::{perceive, track, MotionMode, RunConfig};
use crate::sim::{generate, Band, ConfidenceModel, Model, MotionSpec, Scenario, Span, Window};

/// Scenarios per preset suite.
pub const SUITE_SIZE: usize = 4;

/// Four turning targets, 120 frames each, with the band alternating every 30
/// frames and an 8 to 20 frame over-exposure burst at every switch.
pub fn invalid_heavy_suite(seed: u64, sigma: f64) -> Vec<Scenario> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..SUITE_SIZE)
        .map(|i| {
            let speed = rng.random_range(2.5..4.5);
            let heading: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            let turn = rng.random_range(0.01..0.04) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
            let size = [rng.random_range(30.0..50.0), rng.random_range(30.0..50.0)];
            let modality_schedule = (0..4)
                .map(|k| Span {
                    start: 30 * k,
                    end: 30 * (k + 1),
                    modality: if k % 2 == 0 { Band::Rgb } else { Band::Nir },
                })
                .collect();
            let invalid_windows = [30, 60, 90]
                .into_iter()
                .map(|b| {
                    let start = b - rng.random_range(0..4);
                    Window {
                        start,
                        end: start + rng.random_range(8..=20),
                    }
                })
                .collect();
            Scenario {
                name: format!("suite{seed}-{i}"),
                frames: 120,
                width: 2000.0,
                height: 2000.0,
                motion: MotionSpec {
                    initial: [1000.0, 1000.0, size[0], size[1]],
                    velocity: [speed * heading.cos(), speed * heading.sin()],
                    turn_rate: turn,
                },
                modality_schedule,
                invalid_windows,
                sigma,
                confidence: ConfidenceModel::default(),
                seed: rng.random(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModeScore {
    pub motion: MotionMode,
    pub pr: f64,
    pub sr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteResult {
    pub seed: u64,
    pub frames: usize,
    /// In [`MotionMode::ALL`] order.
    pub scores: Vec<ModeScore>,
}

impl SuiteResult {
    pub fn sr(&self, motion: MotionMode) -> f64 {
        self.scores.iter().find(|s| s.motion == motion).map_or(f64::NAN, |s| s.sr)
    }

    /// `SR(ctp) ≥ SR(ekf) ≥ SR(kf) ≥ SR(off)`.
    pub fn ordered(&self) -> bool {
        use MotionMode::*;
        self.sr(Ctp) >= self.sr(Ekf) && self.sr(Ekf) >= self.sr(Kf) && self.sr(Kf) >= self.sr(Off)
    }
}

/// Every mode over every scenario of one suite, scored on the pooled frames.
pub fn run_suite(seed: u64, scenarios: &[Scenario], model: &Model, base: &RunConfig) -> anyhow::Result<SuiteResult> {
    let seqs = scenarios.iter().map(generate).collect::<Result<Vec<_>, _>>()?;
    let mut scores = Vec::with_capacity(MotionMode::ALL.len());
    let percepts = seqs
        .iter()
        .map(|s| perceive(s, model, base.rho, base.adapter))
        .collect::<Result<Vec<_>, _>>()?;
    for motion in MotionMode::ALL {
        let cfg = RunConfig { motion, ..base.clone() };
        let (mut pred, mut gt) = (Vec::<BBox>::new(), Vec::<BBox>::new());
        for (seq, p) in seqs.iter().zip(&percepts) {
            pred.extend(track(seq, p, &cfg)?.boxes());
            gt.extend(seq.frames.iter().map(|f| f.gt));
        }
        let pooled = TrackRun::untagged(pred, gt)?;
        scores.push(ModeScore {
            motion,
            pr: precision_rate(&pooled, DEFAULT_PR_THRESHOLD),
            sr: success_rate(&pooled, DEFAULT_SR_THRESHOLD),
        });
    }
    Ok(SuiteResult {
        seed,
        frames: seqs.iter().map(|s| s.frames.len()).sum(),
        scores,
    })
}

/// Runs suites in parallel; results come back sorted by seed.
pub fn ablate(suites: &[(u64, Vec<Scenario>)], model: &Model, base: &RunConfig) -> anyhow::Result<Vec<SuiteResult>> {
    anyhow::ensure!(!suites.is_empty(), "empty suite");
    let mut results = suites
        .par_iter()
        .map(|(seed, scenarios)| run_suite(*seed, scenarios, model, base))
        .collect::<anyhow::Result<Vec<_>>>()?;
    results.sort_by_key(|r| r.seed);
    Ok(results)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub suites: usize,
    pub mean: Vec<ModeScore>,
    /// Fraction of suites with the full ordering.
    pub ordered_fraction: f64,
    /// Fraction of suites with `SR(ctp) > SR(off)`.
    pub ctp_beats_off_fraction: f64,
}

pub fn summarize(results: &[SuiteResult]) -> Summary {
    let n = results.len() as f64;
    let mean = MotionMode::ALL
        .iter()
        .enumerate()
        .map(|(i, &motion)| ModeScore {
            motion,
            pr: results.iter().map(|r| r.scores[i].pr).sum::<f64>() / n,
            sr: results.iter().map(|r| r.scores[i].sr).sum::<f64>() / n,
        })
        .collect();
    let frac = |ok: &dyn Fn(&SuiteResult) -> bool| results.iter().filter(|r| ok(r)).count() as f64 / n;
    Summary {
        suites: results.len(),
        mean,
        ordered_fraction: frac(&|r| r.ordered()),
        ctp_beats_off_fraction: frac(&|r| r.sr(MotionMode::Ctp) > r.sr(MotionMode::Off)),
    }
}
