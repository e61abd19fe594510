//! On-disk formats.
//!
//! * weights: JSON `{"format": "xmodal-weights", "version": 1, "tensors": {name: {shape, data}}}`
//! * tracking config (`ctp.json`): JSON, every field optional
//! * scenario: JSON
//! * sequence: JSON lines, a header record then one record per frame, with
//!   sidecar binary PPM (or PGM) crops under `frames/`
//! * track output: JSON
//! * metrics: CSV `sequence,tag,PR,SR,N` plus a JSON summary

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::{Deserialize, Serialize};
use xmodal_core::adapter::AdapterStack;
use xmodal_core::ctp::{CtpConfig, OBS_DIM, STATE_DIM};
use xmodal_core::metrics::{precision_rate, success_rate, tag_breakdown, TrackRun};
use xmodal_core::switch::{Image, SwitchWeights};
use xmodal_core::{BBox, Tensor};

use crate::harness::{MotionMode, RunConfig, RunOutput};
use crate::sim::{Band, Frame, Model, Scenario, Sequence};

pub const WEIGHTS_FORMAT: &str = "xmodal-weights";
pub const SEQUENCE_FORMAT: &str = "xmodal-sequence";
pub const TRACK_FORMAT: &str = "xmodal-track";
pub const VERSION: u32 = 1;

pub const SEQUENCE_FILE: &str = "sequence.jsonl";
pub const TRACK_FILE: &str = "track.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const CONFIG_FILE: &str = "ctp.json";

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorRecord {
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightsFile {
    format: String,
    version: u32,
    tensors: BTreeMap<String, TensorRecord>,
}

pub fn save_model(path: &Path, model: &Model) -> Result<()> {
    let mut named = BTreeMap::new();
    model.switch.to_named("switch.", &mut named);
    model.adapter.to_named("adapter.", &mut named);
    named.insert("embed.weight".into(), model.embed_weight.clone());
    named.insert("embed.bias".into(), model.embed_bias.clone());
    let tensors = named
        .into_iter()
        .map(|(k, t)| {
            let shape = t.shape().to_vec();
            (k, TensorRecord { shape, data: t.into_data() })
        })
        .collect();
    write_json(
        path,
        &WeightsFile {
            format: WEIGHTS_FORMAT.into(),
            version: VERSION,
            tensors,
        },
    )
}

pub fn load_model(path: &Path) -> Result<Model> {
    let file: WeightsFile = read_json(path)?;
    ensure!(file.format == WEIGHTS_FORMAT, "{} is not a weights file", path.display());
    ensure!(file.version == VERSION, "unsupported weights version {}", file.version);
    let mut named = BTreeMap::new();
    for (k, rec) in file.tensors {
        let t = Tensor::new(&rec.shape, rec.data).with_context(|| format!("tensor {k}"))?;
        named.insert(k, t);
    }
    let get = |k: &str| named.get(k).cloned().with_context(|| format!("missing tensor {k}"));
    Ok(Model {
        switch: SwitchWeights::from_named("switch.", &named)?,
        adapter: AdapterStack::from_named("adapter.", &named)?,
        embed_weight: get("embed.weight")?,
        embed_bias: get("embed.bias")?,
    })
}

/// Tracking configuration as stored on disk. Missing fields take the defaults;
/// `rho`, `motion` and `turn_rate` are only set when present.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConfigFile {
    pub p0_diag: [f64; STATE_DIM],
    pub q_diag: [f64; STATE_DIM],
    pub r_diag: [f64; OBS_DIM],
    pub theta: f64,
    pub cap: f64,
    pub epsilon: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub motion: Option<MotionMode>,
    /// Overrides the scenario's turn rate for the coordinated-turn modes.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub turn_rate: Option<f64>,
}

impl Default for ConfigFile {
    fn default() -> Self {
        Self::from(&CtpConfig::default())
    }
}

impl From<&CtpConfig> for ConfigFile {
    fn from(c: &CtpConfig) -> Self {
        Self {
            p0_diag: c.p0_diag,
            q_diag: c.q_diag,
            r_diag: c.r_diag,
            theta: c.theta,
            cap: c.cap,
            epsilon: c.epsilon,
            rho: None,
            motion: None,
            turn_rate: None,
        }
    }
}

impl ConfigFile {
    /// Run configuration with this file applied over the defaults.
    pub fn to_run_config(&self) -> Result<RunConfig> {
        let filter = CtpConfig {
            p0_diag: self.p0_diag,
            q_diag: self.q_diag,
            r_diag: self.r_diag,
            theta: self.theta,
            cap: self.cap,
            epsilon: self.epsilon,
            ..CtpConfig::default()
        };
        filter.validate()?;
        let base = RunConfig::default();
        let rho = self.rho.unwrap_or(base.rho);
        ensure!((0.0..=1.0).contains(&rho), "rho {rho} must be in [0, 1]");
        if let Some(w) = self.turn_rate {
            ensure!(w.is_finite(), "turn rate must be finite");
        }
        Ok(RunConfig {
            motion: self.motion.unwrap_or(base.motion),
            rho,
            filter,
            turn_rate: self.turn_rate,
            ..base
        })
    }
}

/// `dir/ctp.json` applied over the defaults; plain defaults without it.
pub fn load_run_config(dir: Option<&Path>) -> Result<RunConfig> {
    let Some(path) = dir.map(|d| d.join(CONFIG_FILE)).filter(|p| p.exists()) else {
        return Ok(RunConfig::default());
    };
    read_json::<ConfigFile>(&path)?
        .to_run_config()
        .with_context(|| format!("{}", path.display()))
}

pub fn load_scenario(path: &Path) -> Result<Scenario> {
    let s: Scenario = read_json(path)?;
    s.validate().with_context(|| format!("invalid scenario {}", path.display()))?;
    Ok(s)
}

/// A whole suite file: `{"seeds": [...], "scenarios": [...]}`. Each seed
/// replays every scenario with its seed replaced by `seed * 1000 + index`.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SuiteFile {
    pub seeds: Vec<u64>,
    pub scenarios: Vec<Scenario>,
}

impl SuiteFile {
    pub fn expand(&self) -> Result<Vec<(u64, Vec<Scenario>)>> {
        ensure!(!self.seeds.is_empty() && !self.scenarios.is_empty(), "empty suite");
        for s in &self.scenarios {
            s.validate().with_context(|| format!("scenario {}", s.name))?;
        }
        Ok(self
            .seeds
            .iter()
            .map(|&seed| {
                let list = self
                    .scenarios
                    .iter()
                    .enumerate()
                    .map(|(i, s)| Scenario {
                        seed: seed.wrapping_mul(1000).wrapping_add(i as u64),
                        ..s.clone()
                    })
                    .collect();
                (seed, list)
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Record {
    Header {
        format: String,
        version: u32,
        scenario: Scenario,
    },
    Frame(FrameRecord),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub index: usize,
    /// Relative to the sequence file.
    pub image: String,
    pub gt: [f64; 4],
    pub modality: Band,
    pub invalid: bool,
    pub observed: [f64; 4],
    pub confidence: f64,
    pub tags: Vec<String>,
}

/// Writes `dir/sequence.jsonl` and `dir/frames/NNNNNN.ppm`.
pub fn write_sequence(dir: &Path, seq: &Sequence) -> Result<PathBuf> {
    let frames_dir = dir.join("frames");
    fs::create_dir_all(&frames_dir).with_context(|| format!("creating {}", frames_dir.display()))?;
    let path = dir.join(SEQUENCE_FILE);
    let mut out = BufWriter::new(fs::File::create(&path).with_context(|| format!("creating {}", path.display()))?);
    let header = Record::Header {
        format: SEQUENCE_FORMAT.into(),
        version: VERSION,
        scenario: seq.scenario.clone(),
    };
    writeln!(out, "{}", serde_json::to_string(&header)?)?;
    for f in &seq.frames {
        let image = format!("frames/{:06}.ppm", f.index);
        write_pnm(&dir.join(&image), &f.image)?;
        let rec = Record::Frame(FrameRecord {
            index: f.index,
            image,
            gt: f.gt.to_array(),
            modality: f.band,
            invalid: f.invalid,
            observed: f.observed.to_array(),
            confidence: f.confidence,
            tags: f.tags.clone(),
        });
        writeln!(out, "{}", serde_json::to_string(&rec)?)?;
    }
    out.flush()?;
    Ok(path)
}

/// Header and frame records, without touching the images.
pub fn read_records(path: &Path) -> Result<(Scenario, Vec<FrameRecord>)> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut scenario = None;
    let mut frames = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line).with_context(|| format!("{}:{}", path.display(), n + 1))?;
        match rec {
            Record::Header {
                format,
                version,
                scenario: s,
            } => {
                ensure!(n == 0, "{}:{}: header must come first", path.display(), n + 1);
                ensure!(format == SEQUENCE_FORMAT && version == VERSION, "unsupported sequence {format} v{version}");
                scenario = Some(s);
            }
            Record::Frame(f) => {
                ensure!(scenario.is_some(), "{}: missing header", path.display());
                ensure!(f.index == frames.len(), "{}:{}: frame {} out of order", path.display(), n + 1, f.index);
                frames.push(f);
            }
        }
    }
    let scenario = scenario.with_context(|| format!("{}: missing header", path.display()))?;
    ensure!(!frames.is_empty(), "{}: no frames", path.display());
    Ok((scenario, frames))
}

/// Accepts the sequence file or the directory holding it.
pub fn sequence_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(SEQUENCE_FILE)
    } else {
        path.to_path_buf()
    }
}

pub fn load_sequence(path: &Path) -> Result<Sequence> {
    let path = sequence_path(path);
    let (scenario, records) = read_records(&path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let frames = records
        .into_iter()
        .map(|r| {
            let image = read_pnm(&base.join(&r.image))?;
            let gt = BBox::from_array(r.gt);
            let observed = BBox::from_array(r.observed);
            gt.validate().with_context(|| format!("frame {} ground truth", r.index))?;
            observed.validate().with_context(|| format!("frame {} observation", r.index))?;
            ensure!((0.0..=1.0).contains(&r.confidence), "frame {} confidence {}", r.index, r.confidence);
            Ok(Frame {
                index: r.index,
                image,
                gt,
                band: r.modality,
                invalid: r.invalid,
                observed,
                confidence: r.confidence,
                tags: r.tags,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Sequence { scenario, frames })
}

/// Binary PPM for 3-channel images, PGM for 1-channel.
pub fn write_pnm(path: &Path, img: &Image) -> Result<()> {
    let magic = if img.channels() == 3 { "P6" } else { "P5" };
    let mut bytes = format!("{magic}\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    bytes.extend_from_slice(img.pixels());
    fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// Reads binary PPM/PGM. Gray images are expanded to three equal channels.
pub fn read_pnm(path: &Path) -> Result<Image> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if bytes.get(pos) == Some(&b'#') {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        ensure!(start < pos, "truncated header");
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    let channels = match magic.as_str() {
        "P6" => 3,
        "P5" => 1,
        other => bail!("{}: unsupported image type {other}", path.display()),
    };
    let width: usize = token()?.parse().context("width")?;
    let height: usize = token()?.parse().context("height")?;
    let maxval: usize = token()?.parse().context("maxval")?;
    ensure!(maxval == 255, "{}: only 8-bit images are supported", path.display());
    let data = &bytes[pos + 1..];
    ensure!(data.len() == width * height * channels, "{}: truncated pixel data", path.display());
    let pixels = if channels == 3 {
        data.to_vec()
    } else {
        data.iter().flat_map(|&v| [v, v, v]).collect()
    };
    Ok(Image::new(width, height, 3, pixels)?)
}

#[derive(Debug, Serialize, Deserialize)]
struct TrackFile {
    format: String,
    version: u32,
    #[serde(flatten)]
    run: RunOutput,
}

pub fn write_track(path: &Path, run: &RunOutput) -> Result<()> {
    write_json(
        path,
        &TrackFile {
            format: TRACK_FORMAT.into(),
            version: VERSION,
            run: run.clone(),
        },
    )
}

pub fn read_track(path: &Path) -> Result<RunOutput> {
    let file: TrackFile = read_json(path)?;
    ensure!(file.format == TRACK_FORMAT && file.version == VERSION, "{} is not a track file", path.display());
    Ok(file.run)
}

/// Joins predictions with the sequence's ground truth and tags.
pub fn join_run(run: &RunOutput, frames: &[FrameRecord]) -> Result<TrackRun> {
    ensure!(
        run.frames.len() == frames.len(),
        "track has {} frames, sequence has {}",
        run.frames.len(),
        frames.len()
    );
    for (p, f) in run.frames.iter().zip(frames) {
        ensure!(p.index == f.index, "frame index mismatch: {} vs {}", p.index, f.index);
    }
    Ok(TrackRun::new(
        run.frames.iter().map(|f| BBox::from_array(f.pred)).collect(),
        frames.iter().map(|f| BBox::from_array(f.gt)).collect(),
        frames.iter().map(|f| f.tags.clone()).collect(),
    )?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub tag: String,
    pub pr: f64,
    pub sr: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub sequence: String,
    pub tau_pr: f64,
    pub tau_sr: f64,
    /// `all` first, then tags in name order.
    pub rows: Vec<MetricsRow>,
}

pub fn summarize_run(sequence: &str, run: &TrackRun, tau_pr: f64, tau_sr: f64) -> MetricsSummary {
    let mut rows = vec![MetricsRow {
        tag: "all".into(),
        pr: precision_rate(run, tau_pr),
        sr: success_rate(run, tau_sr),
        n: run.len(),
    }];
    rows.extend(tag_breakdown(run, tau_pr, tau_sr).into_iter().map(|r| MetricsRow {
        tag: r.tag,
        pr: r.pr,
        sr: r.sr,
        n: r.n,
    }));
    MetricsSummary {
        sequence: sequence.into(),
        tau_pr,
        tau_sr,
        rows,
    }
}

pub fn metrics_csv(m: &MetricsSummary) -> String {
    let mut out = String::from("sequence,tag,PR,SR,N\n");
    for r in &m.rows {
        out.push_str(&format!("{},{},{:.2},{:.2},{}\n", m.sequence, r.tag, r.pr, r.sr, r.n));
    }
    out
}

pub fn write_metrics(dir: &Path, m: &MetricsSummary) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join(METRICS_CSV), metrics_csv(m))?;
    write_json(&dir.join(METRICS_JSON), m)
}

pub fn write_json_file<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_json(path, value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sim::{generate, ConfidenceModel, MotionSpec, Span, Window};

    fn scenario() -> Scenario {
        Scenario {
            name: "io".into(),
            frames: 6,
            width: 320.0,
            height: 240.0,
            motion: MotionSpec {
                initial: [100.0, 100.0, 30.0, 20.0],
                velocity: [1.5, -0.5],
                turn_rate: 0.02,
            },
            modality_schedule: vec![Span { start: 3, end: 6, modality: Band::Nir }],
            invalid_windows: vec![Window { start: 2, end: 3 }],
            sigma: 1.0,
            confidence: ConfidenceModel::default(),
            seed: 9,
        }
    }

    #[test]
    fn sequence_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let seq = generate(&scenario()).unwrap();
        write_sequence(dir.path(), &seq).unwrap();
        assert_eq!(load_sequence(dir.path()).unwrap(), seq);
    }

    #[test]
    fn gray_images_expand() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("g.pgm");
        write_pnm(&path, &Image::new(2, 1, 1, vec![7, 9]).unwrap()).unwrap();
        assert_eq!(read_pnm(&path).unwrap().pixels(), &[7, 7, 7, 9, 9, 9]);
    }

    #[test]
    fn weights_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("w.json");
        let model = Model::seeded(3);
        save_model(&path, &model).unwrap();
        assert_eq!(load_model(&path).unwrap().adapter, model.adapter);
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded.embed_weight, model.embed_weight);
        assert_eq!(loaded.switch.spectral_weight, model.switch.spectral_weight);
    }

    #[test]
    fn partial_config_file() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(CONFIG_FILE), r#"{"theta": 2.0, "motion": "kf"}"#).unwrap();
        let cfg = load_run_config(Some(dir.path())).unwrap();
        assert_eq!(cfg.filter.theta, 2.0);
        assert_eq!(cfg.motion, MotionMode::Kf);
        assert_eq!(cfg.filter.q_diag, CtpConfig::default().q_diag);
        assert_eq!(cfg.rho, RunConfig::default().rho);
        fs::write(dir.path().join(CONFIG_FILE), r#"{"theta": 0.5}"#).unwrap();
        assert!(load_run_config(Some(dir.path())).is_err());
        fs::write(dir.path().join(CONFIG_FILE), r#"{"gamma": 1}"#).unwrap();
        assert!(load_run_config(Some(dir.path())).is_err());
        assert_eq!(load_run_config(None).unwrap(), RunConfig::default());
    }

    #[test]
    fn rejects_headerless_sequence() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(SEQUENCE_FILE);
        fs::write(&path, "{\"type\":\"frame\",\"index\":0}\n").unwrap();
        assert!(read_records(&path).is_err());
    }
}
