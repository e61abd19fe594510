//! Synthetic cross-modal sequences.
//!
//! Ground truth lives in scene coordinates (`width × height`). Each frame's
//! image is a 64×64 search-region crop centred on the target. RGB crops have
//! distinct per-channel statistics, NIR crops have R = G = B, and frames inside
//! an invalid window are whitened to 95% saturated pixels.
//!
//! Windows and schedule spans are half-open: `[start, end)`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use xmodal_core::adapter::AdapterStack;
use xmodal_core::bbox::cle;
use xmodal_core::ctp::MotionModel;
use xmodal_core::switch::{Image, Modality, SwitchDims, SwitchWeights};
use xmodal_core::{BBox, Tensor};

pub const CROP: usize = 64;
/// Spatial size of the classifier input after pooling the crop.
pub const FEATURE_SIZE: usize = 8;
/// One pixel in this many survives whitening on invalid frames.
const KEEP_EVERY: usize = 20;

pub const TAG_VALID: &str = "valid";
pub const TAG_INVALID: &str = "invalid-window";
pub const TAG_SWITCH: &str = "switch-frame";

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario needs at least one frame")]
    NoFrames,
    #[error("frame size {0}x{1} is too small")]
    FrameSize(f64, f64),
    #[error("{kind} [{start}, {end}) is outside [0, {frames})")]
    OutOfBounds {
        kind: &'static str,
        start: usize,
        end: usize,
        frames: usize,
    },
    #[error("{kind} intervals overlap at frame {at}")]
    Overlap { kind: &'static str, at: usize },
    #[error("{0}")]
    Value(String),
}

/// Pure rotation plus translation of the target centre; size stays fixed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MotionSpec {
    /// Initial box `[cx, cy, w, h]`.
    pub initial: [f64; 4],
    /// Initial centre velocity in px/frame.
    pub velocity: [f64; 2],
    /// Turn rate in rad/frame; 0 is constant velocity.
    #[serde(default)]
    pub turn_rate: f64,
}

impl MotionSpec {
    pub fn model(&self) -> MotionModel {
        if self.turn_rate == 0.0 {
            MotionModel::ConstantVelocity
        } else {
            MotionModel::CoordinatedTurn {
                turn_rate: self.turn_rate,
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    pub start: usize,
    pub end: usize,
}

impl Window {
    pub fn contains(&self, t: usize) -> bool {
        (self.start..self.end).contains(&t)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Band {
    Rgb,
    Nir,
}

impl Band {
    pub fn modality(self) -> Modality {
        match self {
            Band::Rgb => Modality::Rgb,
            Band::Nir => Modality::Nir,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
    pub modality: Band,
}

/// Stub tracker confidence: `clamp(1 − CLE / cle_scale, 0, 1)`, times
/// `switch_damping` within `switch_radius` frames of a modality change.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConfidenceModel {
    pub cle_scale: f64,
    pub switch_damping: f64,
    pub switch_radius: usize,
}

impl Default for ConfidenceModel {
    fn default() -> Self {
        Self {
            cle_scale: 20.0,
            switch_damping: 0.5,
            switch_radius: 1,
        }
    }
}

fn default_name() -> String {
    "scenario".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default = "default_name")]
    pub name: String,
    pub frames: usize,
    pub width: f64,
    pub height: f64,
    pub motion: MotionSpec,
    /// Frames not covered by any span are RGB.
    #[serde(default)]
    pub modality_schedule: Vec<Span>,
    #[serde(default)]
    pub invalid_windows: Vec<Window>,
    /// Observation noise in px, per box coordinate.
    pub sigma: f64,
    #[serde(default)]
    pub confidence: ConfidenceModel,
    pub seed: u64,
}

impl Scenario {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.frames == 0 {
            return Err(ScenarioError::NoFrames);
        }
        if !(self.width >= CROP as f64 && self.height >= CROP as f64) {
            return Err(ScenarioError::FrameSize(self.width, self.height));
        }
        let [cx, cy, w, h] = self.motion.initial;
        if BBox::checked(cx, cy, w, h).is_err() {
            return Err(ScenarioError::Value(format!("bad initial box {:?}", self.motion.initial)));
        }
        if !self.motion.velocity.iter().all(|v| v.is_finite()) || !self.motion.turn_rate.is_finite() {
            return Err(ScenarioError::Value("motion parameters must be finite".into()));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(ScenarioError::Value(format!("sigma {} must be >= 0", self.sigma)));
        }
        let c = &self.confidence;
        if !(c.cle_scale > 0.0 && (0.0..=1.0).contains(&c.switch_damping)) {
            return Err(ScenarioError::Value("confidence model out of range".into()));
        }
        let spans: Vec<Window> = self
            .modality_schedule
            .iter()
            .map(|s| Window { start: s.start, end: s.end })
            .collect();
        check_intervals("modality span", &spans, self.frames)?;
        check_intervals("invalid window", &self.invalid_windows, self.frames)
    }

    /// Scheduled band of frame `t`.
    pub fn band(&self, t: usize) -> Band {
        self.modality_schedule
            .iter()
            .find(|s| (s.start..s.end).contains(&t))
            .map_or(Band::Rgb, |s| s.modality)
    }

    pub fn is_invalid(&self, t: usize) -> bool {
        self.invalid_windows.iter().any(|w| w.contains(t))
    }

    /// Within `switch_radius` frames of a change in scheduled band.
    pub fn near_switch(&self, t: usize) -> bool {
        let r = self.confidence.switch_radius;
        let lo = t.saturating_sub(r).max(1);
        let hi = (t + r).min(self.frames - 1);
        (lo..=hi).any(|b| self.band(b) != self.band(b - 1))
    }

    pub fn tags(&self, t: usize) -> Vec<String> {
        let mut tags = vec![
            if self.is_invalid(t) { TAG_INVALID } else { TAG_VALID }.to_string(),
            self.band(t).modality().as_str().to_ascii_lowercase(),
        ];
        if self.near_switch(t) {
            tags.push(TAG_SWITCH.into());
        }
        tags.sort();
        tags
    }
}

fn check_intervals(kind: &'static str, list: &[Window], frames: usize) -> Result<(), ScenarioError> {
    for w in list {
        if w.start >= w.end || w.end > frames {
            return Err(ScenarioError::OutOfBounds {
                kind,
                start: w.start,
                end: w.end,
                frames,
            });
        }
    }
    let mut sorted = list.to_vec();
    sorted.sort_by_key(|w| w.start);
    for pair in sorted.windows(2) {
        if pair[1].start < pair[0].end {
            return Err(ScenarioError::Overlap { kind, at: pair[1].start });
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub index: usize,
    pub image: Image,
    pub gt: BBox,
    /// Scheduled band; an invalid frame still has one.
    pub band: Band,
    pub invalid: bool,
    pub observed: BBox,
    pub confidence: f64,
    pub tags: Vec<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub scenario: Scenario,
    pub frames: Vec<Frame>,
}

/// Ground-truth boxes: the initial box pushed through the motion model.
pub fn trajectory(spec: &MotionSpec, frames: usize) -> Vec<BBox> {
    let [cx, cy, w, h] = spec.initial;
    let mut x = [cx, cy, w, h, spec.velocity[0], spec.velocity[1], 0.0, 0.0];
    let model = spec.model();
    (0..frames)
        .map(|_| {
            let b = BBox::new(x[0], x[1], x[2], x[3]);
            x = model.transition(&x);
            b
        })
        .collect()
}

pub fn generate(scenario: &Scenario) -> Result<Sequence, ScenarioError> {
    scenario.validate()?;
    let mut obs_rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    let mut img_rng = ChaCha8Rng::seed_from_u64(scenario.seed);
    img_rng.set_stream(1);
    let frames = trajectory(&scenario.motion, scenario.frames)
        .into_iter()
        .enumerate()
        .map(|(t, gt)| {
            let band = scenario.band(t);
            let invalid = scenario.is_invalid(t);
            let (observed, confidence) = if invalid {
                uniform_box(scenario.width, scenario.height, &mut obs_rng)
            } else {
                let damping = if scenario.near_switch(t) {
                    scenario.confidence.switch_damping
                } else {
                    1.0
                };
                stub_tracker(&gt, scenario.sigma, &scenario.confidence, damping, &mut obs_rng)
            };
            Frame {
                index: t,
                image: render(&gt, band, invalid, t, &mut img_rng),
                gt,
                band,
                invalid,
                observed,
                confidence,
                tags: scenario.tags(t),
            }
        })
        .collect();
    Ok(Sequence {
        scenario: scenario.clone(),
        frames,
    })
}

/// Ground truth plus `N(0, σ²)` per coordinate, with confidence from the
/// resulting CLE. Sizes are kept at least 1 px.
pub fn stub_tracker(gt: &BBox, sigma: f64, model: &ConfidenceModel, damping: f64, rng: &mut impl Rng) -> (BBox, f64) {
    let mut noisy = gt.to_array();
    if sigma > 0.0 {
        let normal = Normal::new(0.0, sigma).expect("sigma validated");
        for v in &mut noisy {
            *v += normal.sample(rng);
        }
    }
    noisy[2] = noisy[2].max(1.0);
    noisy[3] = noisy[3].max(1.0);
    let observed = BBox::from_array(noisy);
    let s = (1.0 - cle(&observed, gt) / model.cle_scale).clamp(0.0, 1.0) * damping;
    (observed, s)
}

/// What the stub emits on an over-exposed frame: a box anywhere, confidence 0.
fn uniform_box(width: f64, height: f64, rng: &mut impl Rng) -> (BBox, f64) {
    let b = BBox::new(
        rng.random_range(0.0..width),
        rng.random_range(0.0..height),
        rng.random_range(1.0..width / 4.0),
        rng.random_range(1.0..height / 4.0),
    );
    (b, 0.0)
}

const RGB_BACKGROUND: [i32; 3] = [90, 120, 70];
const RGB_TARGET: [i32; 3] = [180, 60, 50];
const NIR_BACKGROUND: i32 = 110;
const NIR_TARGET: i32 = 190;

fn render(gt: &BBox, band: Band, invalid: bool, frame: usize, rng: &mut impl Rng) -> Image {
    let ox = gt.cx.floor() - (CROP / 2) as f64;
    let oy = gt.cy.floor() - (CROP / 2) as f64;
    let (x0, y0, x1, y1) = gt.corners();
    let mut pixels = Vec::with_capacity(CROP * CROP * 3);
    for py in 0..CROP {
        for px in 0..CROP {
            let sx = ox + px as f64 + 0.5;
            let sy = oy + py as f64 + 0.5;
            let inside = sx >= x0 && sx < x1 && sy >= y0 && sy < y1;
            // checkerboard anchored to the scene so the texture moves with the crop
            let check = if ((sx / 8.0).floor() + (sy / 8.0).floor()) as i64 % 2 == 0 { 12 } else { -12 };
            match band {
                Band::Rgb => {
                    let base = if inside { RGB_TARGET } else { RGB_BACKGROUND };
                    for c in base {
                        pixels.push((c + check + rng.random_range(-15..=15)).clamp(0, 255) as u8);
                    }
                }
                Band::Nir => {
                    let base = if inside { NIR_TARGET } else { NIR_BACKGROUND };
                    let v = (base + check + rng.random_range(-15..=15)).clamp(0, 255) as u8;
                    pixels.extend([v, v, v]);
                }
            }
        }
    }
    if invalid {
        for (i, px) in pixels.chunks_mut(3).enumerate() {
            if !(i * 7 + frame).is_multiple_of(KEEP_EVERY) {
                px.fill(255);
            }
        }
    }
    Image::new(CROP, CROP, 3, pixels).expect("crop dimensions")
}

/// Classifier input: the crop in `[0, 1]`, channel-first, averaged over
/// 8×8 pixel blocks to `[3, 8, 8]`.
pub fn switch_features(image: &Image) -> Tensor {
    let (w, h, c) = (image.width(), image.height(), image.channels());
    let (fh, fw) = (FEATURE_SIZE, FEATURE_SIZE);
    let mut sums = vec![0u32; c * fh * fw];
    let mut counts = vec![0u32; fh * fw];
    for y in 0..h {
        let cy = y * fh / h;
        for x in 0..w {
            let cell = cy * fw + x * fw / w;
            counts[cell] += 1;
            let px = &image.pixels()[(y * w + x) * c..(y * w + x + 1) * c];
            for (ch, v) in px.iter().enumerate() {
                sums[ch * fh * fw + cell] += u32::from(*v);
            }
        }
    }
    let data = sums
        .iter()
        .enumerate()
        .map(|(i, s)| f64::from(*s) / (255.0 * f64::from(counts[i % (fh * fw)])))
        .collect();
    Tensor::new(&[c, fh, fw], data).expect("feature shape")
}

/// Classifier weights that separate the bands by channel spread alone.
///
/// The spatial branch is switched off. Spectral hidden units measure
/// `relu(k(r − g))`, `relu(k(g − r))`, `relu(k(g − b))` and `relu(k(b − g))` on
/// the mean channel values, and `m = σ(4 − Σ spread)`: about 0.98 for a
/// channel-collapsed crop and close to 0 for the RGB palette above.
pub fn fixture_switch_weights() -> SwitchWeights {
    const K: f64 = 100.0;
    let dims = SwitchDims::default();
    let mut w = SwitchWeights::zeros(dims);
    w.spectral_weight = Tensor::from_rows(&[
        vec![K, -K, 0.0, 0.0],
        vec![-K, K, K, -K],
        vec![0.0, 0.0, -K, K],
    ]);
    let spatial = dims.spatial_len();
    for j in 0..dims.spectral_hidden {
        w.fusion1_weight.set2(spatial + j, 0, 1.0);
    }
    w.fusion2_weight.set2(0, 0, -1.0);
    w.fusion2_bias = Tensor::vector(&[4.0]);
    w
}

pub const ADAPTER_LAYERS: usize = 4;
pub const ADAPTER_DIM: usize = 16;
/// Search-region tokens come from the crop pooled to this grid.
pub const TOKEN_GRID: usize = 4;
pub const TEMPLATE_TOKENS: usize = 4;

/// Everything the tracking loop needs besides the filter.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub switch: SwitchWeights,
    /// `[3, d]` token embedding.
    pub embed_weight: Tensor,
    pub embed_bias: Tensor,
    pub adapter: AdapterStack,
}

impl Model {
    /// Fixture classifier plus seeded embedding and adapter weights.
    pub fn seeded(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(2);
        let mut sample = move || rng.random_range(-0.5..0.5);
        let embed_weight = Tensor::new(&[3, ADAPTER_DIM], (0..3 * ADAPTER_DIM).map(|_| sample()).collect()).expect("shape");
        let embed_bias = Tensor::new(&[ADAPTER_DIM], (0..ADAPTER_DIM).map(|_| sample()).collect()).expect("shape");
        let adapter = AdapterStack::from_fn(ADAPTER_LAYERS, ADAPTER_DIM, sample).expect("stack");
        Self {
            switch: fixture_switch_weights(),
            embed_weight,
            embed_bias,
            adapter,
        }
    }
}
