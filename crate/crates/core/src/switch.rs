//! Tri-state frame switch: RGB / NIR / Invalid.
//!
//! RGB versus NIR comes from a small two-branch classifier over search-region
//! features. A spatial branch runs conv → relu → adaptive max-pool → flatten, a
//! spectral branch runs adaptive avg-pool → flatten → linear → relu, and the
//! concatenation goes through linear → relu → linear → sigmoid to give the
//! modality weight `m` (0 ≈ RGB, 1 ≈ NIR). The invalid state comes from the
//! raw pixels: a frame whose white-pixel ratio strictly exceeds `rho` is
//! over-exposed.
//!
//! Fixed hyper-parameters: the convolution is 3×3, stride 1, zero padding 1,
//! with as many output channels as input channels; the spatial pool target is
//! 4×4; a pixel counts as white when its 8-bit gray level is at least
//! [`WHITE_LEVEL`]; `m ≥ 0.5` means NIR.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{dim_err, Error, Result};
use crate::nn::{adaptive_avg_pool, adaptive_max_pool, conv3x3, linear, relu, sigmoid_scalar};
use crate::tensor::Tensor;

pub const DEFAULT_RHO: f64 = 0.40;
pub const WHITE_LEVEL: u8 = 250;
pub const SPATIAL_POOL: (usize, usize) = (4, 4);

/// 8-bit image, row-major, interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::OutOfRange(alloc::format!("{channels} channels")));
        }
        if pixels.len() != width * height * channels {
            return Err(Error::Shape {
                shape: alloc::vec![height, width, channels],
                len: pixels.len(),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: u8) -> Self {
        Self {
            width,
            height,
            channels,
            pixels: alloc::vec![value; width * height * channels],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn is_empty(&self) -> bool {
        self.pixels.is_empty()
    }

    /// Gray level of pixel `i` (BT.601 luma, rounded to nearest).
    pub fn gray(&self, i: usize) -> u8 {
        if self.channels == 1 {
            self.pixels[i]
        } else {
            let p = &self.pixels[i * 3..i * 3 + 3];
            bt601(p[0], p[1], p[2])
        }
    }

    /// Channel-first `[C, H, W]` tensor with values scaled to `[0, 1]`.
    pub fn to_tensor(&self) -> Result<Tensor> {
        let (w, h, c) = (self.width, self.height, self.channels);
        let mut data = alloc::vec![0.0; c * h * w];
        for (i, px) in self.pixels.iter().enumerate() {
            let (pix, ch) = (i / c, i % c);
            data[ch * h * w + pix] = f64::from(*px) / 255.0;
        }
        Tensor::new(&[c, h, w], data)
    }
}

/// `0.299 R + 0.587 G + 0.114 B`, rounded half away from zero.
pub fn bt601(r: u8, g: u8, b: u8) -> u8 {
    // integer form of the rounding: (299 R + 587 G + 114 B + 500) / 1000
    let y = 299 * u32::from(r) + 587 * u32::from(g) + 114 * u32::from(b);
    ((y + 500) / 1000) as u8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Modality {
    Rgb,
    Nir,
    Invalid,
}

impl Modality {
    pub fn as_str(self) -> &'static str {
        match self {
            Modality::Rgb => "RGB",
            Modality::Nir => "NIR",
            Modality::Invalid => "Invalid",
        }
    }
}

impl core::str::FromStr for Modality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rgb" => Ok(Modality::Rgb),
            "nir" => Ok(Modality::Nir),
            "invalid" => Ok(Modality::Invalid),
            other => Err(Error::OutOfRange(alloc::format!("modality `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriStateDecision {
    pub state: Modality,
    /// Modality weight in `(0, 1)`; near 1 means NIR.
    pub m: f64,
    pub white_ratio: f64,
}

/// Feature sizes the classifier is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SwitchDims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub spectral_hidden: usize,
    pub fusion_hidden: usize,
}

impl SwitchDims {
    pub fn spatial_len(&self) -> usize {
        self.channels * SPATIAL_POOL.0 * SPATIAL_POOL.1
    }

    pub fn fusion_in(&self) -> usize {
        self.spatial_len() + self.spectral_hidden
    }
}

impl Default for SwitchDims {
    fn default() -> Self {
        Self {
            channels: 3,
            height: 8,
            width: 8,
            spectral_hidden: 4,
            fusion_hidden: 4,
        }
    }
}

/// Parameters of the RGB/NIR classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct SwitchWeights {
    pub dims: SwitchDims,
    /// `[C, C, 3, 3]`
    pub conv_kernel: Tensor,
    pub conv_bias: Tensor,
    /// `[C, spectral_hidden]`
    pub spectral_weight: Tensor,
    pub spectral_bias: Tensor,
    /// `[fusion_in, fusion_hidden]`
    pub fusion1_weight: Tensor,
    pub fusion1_bias: Tensor,
    /// `[fusion_hidden, 1]`
    pub fusion2_weight: Tensor,
    pub fusion2_bias: Tensor,
}

const SWITCH_NAMES: [&str; 8] = [
    "conv_kernel",
    "conv_bias",
    "spectral_weight",
    "spectral_bias",
    "fusion1_weight",
    "fusion1_bias",
    "fusion2_weight",
    "fusion2_bias",
];

impl SwitchWeights {
    fn shapes(d: &SwitchDims) -> [Vec<usize>; 8] {
        let c = d.channels;
        [
            alloc::vec![c, c, 3, 3],
            alloc::vec![c],
            alloc::vec![c, d.spectral_hidden],
            alloc::vec![d.spectral_hidden],
            alloc::vec![d.fusion_in(), d.fusion_hidden],
            alloc::vec![d.fusion_hidden],
            alloc::vec![d.fusion_hidden, 1],
            alloc::vec![1],
        ]
    }

    /// Every parameter drawn from `sample`, in declaration order.
    pub fn from_fn(dims: SwitchDims, mut sample: impl FnMut() -> f64) -> Self {
        let [a, b, c, d, e, f, g, h] = Self::shapes(&dims).map(|s| {
            let n = s.iter().product();
            Tensor::new(&s, (0..n).map(|_| sample()).collect()).expect("shape")
        });
        Self {
            dims,
            conv_kernel: a,
            conv_bias: b,
            spectral_weight: c,
            spectral_bias: d,
            fusion1_weight: e,
            fusion1_bias: f,
            fusion2_weight: g,
            fusion2_bias: h,
        }
    }

    pub fn zeros(dims: SwitchDims) -> Self {
        Self::from_fn(dims, || 0.0)
    }

    fn tensors(&self) -> [&Tensor; 8] {
        [
            &self.conv_kernel,
            &self.conv_bias,
            &self.spectral_weight,
            &self.spectral_bias,
            &self.fusion1_weight,
            &self.fusion1_bias,
            &self.fusion2_weight,
            &self.fusion2_bias,
        ]
    }

    pub fn validate(&self) -> Result<()> {
        for ((t, s), name) in self.tensors().iter().zip(Self::shapes(&self.dims)).zip(SWITCH_NAMES) {
            if t.shape() != s.as_slice() {
                return Err(Error::Dimension {
                    op: name,
                    lhs: t.shape().to_vec(),
                    rhs: s,
                });
            }
        }
        Ok(())
    }

    /// Named tensors under `prefix` (e.g. `switch.conv_kernel`).
    pub fn to_named(&self, prefix: &str, out: &mut BTreeMap<String, Tensor>) {
        for (t, name) in self.tensors().iter().zip(SWITCH_NAMES) {
            out.insert(alloc::format!("{prefix}{name}"), (*t).clone());
        }
    }

    /// Inverse of [`Self::to_named`]; dims are recovered from the tensor shapes.
    pub fn from_named(prefix: &str, named: &BTreeMap<String, Tensor>) -> Result<Self> {
        let get = |name: &str| {
            let key = alloc::format!("{prefix}{name}");
            named.get(&key).cloned().ok_or(Error::MissingTensor(key))
        };
        let conv_kernel = get("conv_kernel")?;
        let spectral_weight = get("spectral_weight")?;
        let fusion1_weight = get("fusion1_weight")?;
        let channels = conv_kernel.shape()[0];
        let spectral_hidden = *spectral_weight.shape().last().unwrap_or(&0);
        let fusion_hidden = *fusion1_weight.shape().last().unwrap_or(&0);
        // height/width are not stored; the classifier accepts any map of at least 4x4
        let dims = SwitchDims {
            channels,
            height: SPATIAL_POOL.0,
            width: SPATIAL_POOL.1,
            spectral_hidden,
            fusion_hidden,
        };
        let w = Self {
            dims,
            conv_kernel,
            conv_bias: get("conv_bias")?,
            spectral_weight,
            spectral_bias: get("spectral_bias")?,
            fusion1_weight,
            fusion1_bias: get("fusion1_bias")?,
            fusion2_weight: get("fusion2_weight")?,
            fusion2_bias: get("fusion2_bias")?,
        };
        w.validate()?;
        Ok(w)
    }

    fn check_input(&self, f_in: &Tensor) -> Result<()> {
        match f_in.shape() {
            [c, h, w] if *c == self.dims.channels && *h >= SPATIAL_POOL.0 && *w >= SPATIAL_POOL.1 => Ok(()),
            s => Err(dim_err(
                "switch input",
                s,
                &[self.dims.channels, self.dims.height, self.dims.width],
            )),
        }
    }
}

/// conv → relu → adaptive max-pool (4, 4) → flatten.
pub fn spatial_branch(f_in: &Tensor, w: &SwitchWeights) -> Result<Tensor> {
    w.check_input(f_in)?;
    let conv = conv3x3(f_in, &w.conv_kernel, &w.conv_bias)?;
    Ok(adaptive_max_pool(&relu(&conv), SPATIAL_POOL)?.flatten())
}

/// adaptive avg-pool (1, 1) → flatten → linear → relu.
pub fn spectral_branch(f_in: &Tensor, w: &SwitchWeights) -> Result<Tensor> {
    w.check_input(f_in)?;
    let pooled = adaptive_avg_pool(f_in, (1, 1))?.flatten();
    Ok(relu(&linear(&pooled, &w.spectral_weight, &w.spectral_bias)?))
}

/// concat → linear → relu → linear → sigmoid.
pub fn modality_weight(f_spa: &Tensor, f_spe: &Tensor, w: &SwitchWeights) -> Result<f64> {
    let joined = Tensor::concat(&[f_spa, f_spe]);
    if joined.len() != w.dims.fusion_in() {
        return Err(dim_err("modality_weight", &[f_spa.len(), f_spe.len()], &[w.dims.fusion_in()]));
    }
    let hidden = relu(&linear(&joined, &w.fusion1_weight, &w.fusion1_bias)?);
    let logit = linear(&hidden, &w.fusion2_weight, &w.fusion2_bias)?;
    Ok(sigmoid_scalar(logit[0]))
}

/// Modality weight of a feature map through both branches.
pub fn modality_score(f_in: &Tensor, w: &SwitchWeights) -> Result<f64> {
    modality_weight(&spatial_branch(f_in, w)?, &spectral_branch(f_in, w)?, w)
}

/// Fraction of pixels whose gray level is at least `white_level`.
pub fn white_ratio(img: &Image, white_level: u8) -> Result<f64> {
    let n = img.width * img.height;
    if n == 0 {
        return Err(Error::Degenerate("empty image"));
    }
    let white = (0..n).filter(|&i| img.gray(i) >= white_level).count();
    Ok(white as f64 / n as f64)
}

/// `(white_ratio > rho, white_ratio)`.
pub fn is_over_exposed(img: &Image, rho: f64, white_level: u8) -> Result<(bool, f64)> {
    let ratio = white_ratio(img, white_level)?;
    Ok((ratio > rho, ratio))
}

/// Over-exposure first, then RGB/NIR by `m ≥ 0.5`. `m` is always reported.
pub fn classify(img: &Image, f_in: &Tensor, w: &SwitchWeights, rho: f64) -> Result<TriStateDecision> {
    let (invalid, ratio) = is_over_exposed(img, rho, WHITE_LEVEL)?;
    let m = modality_score(f_in, w)?;
    Ok(decide(m, ratio, invalid))
}

pub fn decide(m: f64, white_ratio: f64, invalid: bool) -> TriStateDecision {
    let state = if invalid {
        Modality::Invalid
    } else if m >= 0.5 {
        Modality::Nir
    } else {
        Modality::Rgb
    };
    TriStateDecision { state, m, white_ratio }
}

impl core::fmt::Display for Modality {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl From<Modality> for String {
    fn from(m: Modality) -> String {
        m.as_str().to_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: u64) -> impl FnMut() -> f64 {
        let mut s = seed.wrapping_add(0x2545F4914F6CDD1D);
        move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
        }
    }

    fn rand_input(seed: u64, d: &SwitchDims) -> Tensor {
        let mut g = lcg(seed);
        let n = d.channels * d.height * d.width;
        Tensor::new(&[d.channels, d.height, d.width], (0..n).map(|_| g()).collect()).unwrap()
    }

    #[test]
    fn spatial_zero_and_constant() {
        let d = SwitchDims::default();
        let mut w = SwitchWeights::from_fn(d, lcg(1));
        w.conv_bias = Tensor::zeros(&[3]);
        let z = spatial_branch(&Tensor::zeros(&[3, 8, 8]), &w).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        assert_eq!(z.len(), 48);

        // identity-like kernel: centre tap of channel c → c
        let mut k = Tensor::zeros(&[3, 3, 3, 3]);
        for c in 0..3 {
            k[((c * 3 + c) * 3 + 1) * 3 + 1] = 1.0;
        }
        w.conv_kernel = k;
        let y = spatial_branch(&Tensor::full(&[3, 8, 8], 0.7), &w).unwrap();
        assert!(y.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn spatial_matches_op_composition() {
        let d = SwitchDims::default();
        let w = SwitchWeights::from_fn(d, lcg(2));
        let x = rand_input(3, &d);
        let expect = adaptive_max_pool(&relu(&conv3x3(&x, &w.conv_kernel, &w.conv_bias).unwrap()), (4, 4))
            .unwrap()
            .flatten();
        assert_eq!(spatial_branch(&x, &w).unwrap(), expect);
    }

    #[test]
    fn spectral_uses_channel_means() {
        let d = SwitchDims::default();
        let mut w = SwitchWeights::zeros(d);
        // identity on the first three hidden units
        for c in 0..3 {
            w.spectral_weight.set2(c, c, 1.0);
        }
        let mut x = Tensor::zeros(&[3, 8, 8]);
        for (c, v) in [0.2, 0.5, 0.9].iter().enumerate() {
            for i in 0..64 {
                x[c * 64 + i] = *v;
            }
        }
        let f = spectral_branch(&x, &w).unwrap();
        assert!((f[0] - 0.2).abs() < 1e-15 && (f[1] - 0.5).abs() < 1e-15 && (f[2] - 0.9).abs() < 1e-15);
        w.spectral_bias = Tensor::full(&[4], -5.0);
        assert!(spectral_branch(&x, &w).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn spectral_matches_op_composition() {
        let d = SwitchDims::default();
        let w = SwitchWeights::from_fn(d, lcg(4));
        let x = rand_input(5, &d);
        let means: Vec<f64> = (0..3).map(|c| x.data()[c * 64..(c + 1) * 64].iter().sum::<f64>() / 64.0).collect();
        let mut expect = Vec::new();
        for j in 0..4 {
            let mut s = w.spectral_bias[j];
            for (c, m) in means.iter().enumerate() {
                s += m * w.spectral_weight.get2(c, j);
            }
            expect.push(s.max(0.0));
        }
        let got = spectral_branch(&x, &w).unwrap();
        for (g, e) in got.data().iter().zip(&expect) {
            assert!((g - e).abs() < 1e-14);
        }
    }

    #[test]
    fn modality_weight_landmarks() {
        let d = SwitchDims::default();
        let mut w = SwitchWeights::zeros(d);
        let spa = Tensor::full(&[48], 0.3);
        let spe = Tensor::full(&[4], 0.1);
        assert_eq!(modality_weight(&spa, &spe, &w).unwrap(), 0.5);
        w.fusion2_bias = Tensor::vector(&[40.0]);
        assert!(modality_weight(&spa, &spe, &w).unwrap() > 1.0 - 1e-12);
        assert!(modality_weight(&Tensor::full(&[47], 0.3), &spe, &w).is_err());
    }

    #[test]
    fn modality_weight_matches_layer_oracle() {
        let d = SwitchDims::default();
        let w = SwitchWeights::from_fn(d, lcg(6));
        let mut g = lcg(7);
        let spa: Vec<f64> = (0..48).map(|_| g()).collect();
        let spe: Vec<f64> = (0..4).map(|_| g()).collect();
        let x: Vec<f64> = spa.iter().chain(&spe).copied().collect();
        let mut hidden = [0.0; 4];
        for (j, h) in hidden.iter_mut().enumerate() {
            let mut s = w.fusion1_bias[j];
            for (i, xi) in x.iter().enumerate() {
                s += xi * w.fusion1_weight.get2(i, j);
            }
            *h = s.max(0.0);
        }
        let logit: f64 = w.fusion2_bias[0] + hidden.iter().enumerate().map(|(j, h)| h * w.fusion2_weight.get2(j, 0)).sum::<f64>();
        let expect = 1.0 / (1.0 + (-logit).exp());
        let got = modality_weight(&Tensor::vector(&spa), &Tensor::vector(&spe), &w).unwrap();
        assert!((got - expect).abs() < 1e-14);
        assert!(got > 0.0 && got < 1.0);
    }

    #[test]
    fn over_exposure_landmarks() {
        assert_eq!(is_over_exposed(&Image::filled(8, 8, 3, 255), 0.4, 250).unwrap(), (true, 1.0));
        assert_eq!(is_over_exposed(&Image::filled(8, 8, 1, 0), 0.4, 250).unwrap(), (false, 0.0));
        assert!(is_over_exposed(&Image::new(0, 0, 1, Vec::new()).unwrap(), 0.4, 250).is_err());
    }

    #[test]
    fn over_exposure_boundary_is_strict() {
        for (white, expect) in [(40usize, false), (41, true)] {
            let mut img = Image::filled(10, 10, 1, 0);
            img.pixels_mut()[..white].fill(255);
            let (inv, ratio) = is_over_exposed(&img, 0.40, WHITE_LEVEL).unwrap();
            assert_eq!(inv, expect);
            assert_eq!(ratio, white as f64 / 100.0);
        }
    }

    #[test]
    fn gray_conversion_rounds() {
        assert_eq!(bt601(255, 255, 255), 255);
        assert_eq!(bt601(0, 0, 0), 0);
        // 0.299*250 + 0.587*250 + 0.114*249 = 249.886 → 250
        assert_eq!(bt601(250, 250, 249), 250);
        // pure red 255 → 76.245 → 76
        assert_eq!(bt601(255, 0, 0), 76);
        assert_eq!(bt601(0, 255, 0), 150);
    }

    #[test]
    fn classify_decisions() {
        let d = SwitchDims::default();
        let mut w = SwitchWeights::zeros(d);
        let f = Tensor::full(&[3, 8, 8], 0.5);
        let white = Image::filled(8, 8, 3, 255);
        let dark = Image::filled(8, 8, 3, 10);
        assert_eq!(classify(&white, &f, &w, 0.4).unwrap().state, Modality::Invalid);
        w.fusion2_bias = Tensor::vector(&[2.1972245773362196]); // logit(0.9)
        let dec = classify(&dark, &f, &w, 0.4).unwrap();
        assert_eq!(dec.state, Modality::Nir);
        assert!((dec.m - 0.9).abs() < 1e-12);
        w.fusion2_bias = Tensor::vector(&[-2.1972245773362196]);
        assert_eq!(classify(&dark, &f, &w, 0.4).unwrap().state, Modality::Rgb);
        assert!(classify(&dark, &Tensor::zeros(&[2, 8, 8]), &w, 0.4).is_err());
    }

    #[test]
    fn named_round_trip() {
        let w = SwitchWeights::from_fn(SwitchDims::default(), lcg(9));
        let mut named = BTreeMap::new();
        w.to_named("switch.", &mut named);
        let back = SwitchWeights::from_named("switch.", &named).unwrap();
        assert_eq!(back.tensors(), w.tensors());
        named.remove("switch.fusion2_bias");
        assert!(matches!(SwitchWeights::from_named("switch.", &named), Err(Error::MissingTensor(_))));
    }
}
