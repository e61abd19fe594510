//! NIR gated adapter.
//!
//! On NIR frames each layer refines the search-region tokens `f_sr [T, d]` by
//! attending to dynamic-template tokens `f_dyn [S, d]` (queries from the search
//! region, keys and values from the template), then blends:
//!
//! ```text
//! F'  = softmax(q(f_sr) · k(f_dyn)ᵀ / √d) · v(f_dyn)
//! f_o = (1 − g) · f_sr + g · (m · F' + (1 − m) · f_sr)
//! ```
//!
//! `m` is the modality weight from the switch and `g` is the layer gate: mean
//! over tokens → linear (d → d/4) → relu → linear (→ 2 logits) → softmax, keeping
//! component 0. On RGB frames the adapter returns its input unchanged.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{dim_err, Error, Result};
use crate::nn::{
    attention_backward, attention_forward, linear, linear_backward, relu, relu_backward, softmax,
    softmax_backward, AttentionCache,
};
use crate::switch::Modality;
use crate::tensor::Tensor;

pub const PARAM_NAMES: [&str; 10] = [
    "gate1_weight",
    "gate1_bias",
    "gate2_weight",
    "gate2_bias",
    "q_weight",
    "q_bias",
    "k_weight",
    "k_bias",
    "v_weight",
    "v_bias",
];

/// Hidden width of the gate MLP for embedding width `d`.
pub fn gate_hidden(d: usize) -> usize {
    (d / 4).max(1)
}

/// Parameters of one adapter layer, stored in [`PARAM_NAMES`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterLayerWeights {
    params: [Tensor; 10],
}

impl AdapterLayerWeights {
    pub fn shapes(d: usize) -> [Vec<usize>; 10] {
        let hg = gate_hidden(d);
        [
            alloc::vec![d, hg],
            alloc::vec![hg],
            alloc::vec![hg, 2],
            alloc::vec![2],
            alloc::vec![d, d],
            alloc::vec![d],
            alloc::vec![d, d],
            alloc::vec![d],
            alloc::vec![d, d],
            alloc::vec![d],
        ]
    }

    pub fn from_fn(d: usize, mut sample: impl FnMut() -> f64) -> Self {
        let params = Self::shapes(d).map(|s| {
            let n = s.iter().product();
            Tensor::new(&s, (0..n).map(|_| sample()).collect()).expect("shape")
        });
        Self { params }
    }

    pub fn from_params(params: [Tensor; 10]) -> Result<Self> {
        let d = params[4].shape()[0];
        for ((t, s), name) in params.iter().zip(Self::shapes(d)).zip(PARAM_NAMES) {
            if t.shape() != s.as_slice() {
                return Err(Error::Dimension {
                    op: name,
                    lhs: t.shape().to_vec(),
                    rhs: s,
                });
            }
        }
        Ok(Self { params })
    }

    pub fn dim(&self) -> usize {
        self.params[4].shape()[0]
    }

    pub fn params(&self) -> &[Tensor; 10] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor; 10] {
        &mut self.params
    }

    pub fn gate1(&self) -> (&Tensor, &Tensor) {
        (&self.params[0], &self.params[1])
    }
    pub fn gate2(&self) -> (&Tensor, &Tensor) {
        (&self.params[2], &self.params[3])
    }
    pub fn query(&self) -> (&Tensor, &Tensor) {
        (&self.params[4], &self.params[5])
    }
    pub fn key(&self) -> (&Tensor, &Tensor) {
        (&self.params[6], &self.params[7])
    }
    pub fn value(&self) -> (&Tensor, &Tensor) {
        (&self.params[8], &self.params[9])
    }

    pub fn set_gate2_bias(&mut self, bias: [f64; 2]) {
        self.params[3] = Tensor::vector(&bias);
    }
}

/// One set of weights per encoder layer, applied in order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterStack {
    layers: Vec<AdapterLayerWeights>,
}

impl AdapterStack {
    pub fn new(layers: Vec<AdapterLayerWeights>) -> Result<Self> {
        let Some(first) = layers.first() else {
            return Err(Error::Degenerate("adapter stack needs at least one layer"));
        };
        let d = first.dim();
        if let Some(bad) = layers.iter().find(|l| l.dim() != d) {
            return Err(dim_err("adapter stack", &[d], &[bad.dim()]));
        }
        Ok(Self { layers })
    }

    pub fn from_fn(num_layers: usize, d: usize, mut sample: impl FnMut() -> f64) -> Result<Self> {
        Self::new((0..num_layers).map(|_| AdapterLayerWeights::from_fn(d, &mut sample)).collect())
    }

    pub fn layers(&self) -> &[AdapterLayerWeights] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [AdapterLayerWeights] {
        &mut self.layers
    }

    pub fn dim(&self) -> usize {
        self.layers[0].dim()
    }

    /// Named tensors `{prefix}{i}.{param}`.
    pub fn to_named(&self, prefix: &str, out: &mut BTreeMap<String, Tensor>) {
        for (i, layer) in self.layers.iter().enumerate() {
            for (t, name) in layer.params.iter().zip(PARAM_NAMES) {
                out.insert(alloc::format!("{prefix}{i}.{name}"), t.clone());
            }
        }
    }

    pub fn from_named(prefix: &str, named: &BTreeMap<String, Tensor>) -> Result<Self> {
        let mut layers = Vec::new();
        while named.contains_key(&alloc::format!("{prefix}{}.{}", layers.len(), PARAM_NAMES[0])) {
            let i = layers.len();
            let mut ts = Vec::with_capacity(10);
            for name in PARAM_NAMES {
                let key = alloc::format!("{prefix}{i}.{name}");
                ts.push(named.get(&key).cloned().ok_or(Error::MissingTensor(key))?);
            }
            let params: [Tensor; 10] = ts.try_into().expect("ten tensors");
            layers.push(AdapterLayerWeights::from_params(params)?);
        }
        Self::new(layers)
    }
}

/// Forward intermediates of one NIR layer.
#[derive(Debug, Clone)]
pub struct LayerCache {
    f_sr: Tensor,
    f_dyn: Tensor,
    m: f64,
    mean: Tensor,
    gate_pre: Tensor,
    gate_act: Tensor,
    gate_probs: Tensor,
    attn: AttentionCache,
    enhanced: Tensor,
}

impl LayerCache {
    pub fn gate(&self) -> f64 {
        self.gate_probs[0]
    }

    /// Attention-enhanced features before blending.
    pub fn enhanced(&self) -> &Tensor {
        &self.enhanced
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub f_sr: Tensor,
    pub f_dyn: Tensor,
    pub params: [Tensor; 10],
}

fn check_tokens(f_sr: &Tensor, f_dyn: &Tensor, d: usize) -> Result<()> {
    let (_, dsr) = f_sr.dims2()?;
    let (_, ddyn) = f_dyn.dims2()?;
    if dsr != d || ddyn != d {
        return Err(dim_err("adapter tokens", f_sr.shape(), f_dyn.shape()));
    }
    Ok(())
}

fn token_mean(x: &Tensor) -> Result<Tensor> {
    let (t, d) = x.dims2()?;
    let mut out = alloc::vec![0.0; d];
    for i in 0..t {
        for (o, v) in out.iter_mut().zip(x.row(i)) {
            *o += v;
        }
    }
    Ok(Tensor::vector(&out).scale(1.0 / t as f64))
}

/// Gate value `g ∈ (0, 1)` for one layer.
pub fn layer_gate(f_sr: &Tensor, w: &AdapterLayerWeights) -> Result<f64> {
    let (_, d) = f_sr.dims2()?;
    if d != w.dim() {
        return Err(dim_err("layer_gate", f_sr.shape(), &[w.dim()]));
    }
    let (w1, b1) = w.gate1();
    let (w2, b2) = w.gate2();
    let hidden = relu(&linear(&token_mean(f_sr)?, w1, b1)?);
    Ok(softmax(&linear(&hidden, w2, b2)?, 0)?[0])
}

/// NIR-path forward of one layer with cached intermediates.
pub fn layer_forward(f_sr: &Tensor, f_dyn: &Tensor, m: f64, w: &AdapterLayerWeights) -> Result<(Tensor, LayerCache)> {
    check_tokens(f_sr, f_dyn, w.dim())?;
    let (w1, b1) = w.gate1();
    let (w2, b2) = w.gate2();
    let mean = token_mean(f_sr)?;
    let gate_pre = linear(&mean, w1, b1)?;
    let gate_act = relu(&gate_pre);
    let gate_probs = softmax(&linear(&gate_act, w2, b2)?, 0)?;
    let g = gate_probs[0];

    let (wq, bq) = w.query();
    let (wk, bk) = w.key();
    let (wv, bv) = w.value();
    let q = linear(f_sr, wq, bq)?;
    let k = linear(f_dyn, wk, bk)?;
    let v = linear(f_dyn, wv, bv)?;
    let (enhanced, attn) = attention_forward(&q, &k, &v)?;

    let out = f_sr.zip_map(&enhanced, "adapter blend", |f, e| (1.0 - g) * f + g * (m * e + (1.0 - m) * f))?;
    Ok((
        out,
        LayerCache {
            f_sr: f_sr.clone(),
            f_dyn: f_dyn.clone(),
            m,
            mean,
            gate_pre,
            gate_act,
            gate_probs,
            attn,
            enhanced,
        },
    ))
}

/// Analytic gradients of one layer given the upstream gradient of its output.
pub fn layer_backward(cache: &LayerCache, w: &AdapterLayerWeights, upstream: &Tensor) -> Result<LayerGrads> {
    if upstream.shape() != cache.f_sr.shape() {
        return Err(dim_err("adapter backward", cache.f_sr.shape(), upstream.shape()));
    }
    let (t, _) = cache.f_sr.dims2()?;
    let m = cache.m;
    let g = cache.gate();

    // f_o = f + g·m·(e − f)
    let mut d_f_sr = upstream.scale(1.0 - g * m);
    let d_enhanced = upstream.scale(g * m);
    let d_gate: f64 = upstream
        .data()
        .iter()
        .zip(cache.enhanced.data().iter().zip(cache.f_sr.data()))
        .map(|(u, (e, f))| u * m * (e - f))
        .sum();

    let attn = attention_backward(&cache.attn, &d_enhanced)?;
    let gq = linear_backward(&cache.f_sr, w.query().0, &attn.q)?;
    let gk = linear_backward(&cache.f_dyn, w.key().0, &attn.k)?;
    let gv = linear_backward(&cache.f_dyn, w.value().0, &attn.v)?;
    d_f_sr = d_f_sr.add(&gq.input)?;
    let d_f_dyn = gk.input.add(&gv.input)?;

    let d_logits = softmax_backward(&cache.gate_probs, &Tensor::vector(&[d_gate, 0.0]), 0)?;
    let g2 = linear_backward(&cache.gate_act, w.gate2().0, &d_logits)?;
    let d_pre = relu_backward(&cache.gate_pre, &g2.input)?;
    let g1 = linear_backward(&cache.mean, w.gate1().0, &d_pre)?;
    let d_mean = g1.input.scale(1.0 / t as f64);
    for (i, v) in d_f_sr.data_mut().iter_mut().enumerate() {
        *v += d_mean[i % d_mean.len()];
    }

    Ok(LayerGrads {
        f_sr: d_f_sr,
        f_dyn: d_f_dyn,
        params: [
            g1.weight, g1.bias, g2.weight, g2.bias, gq.weight, gq.bias, gk.weight, gk.bias, gv.weight, gv.bias,
        ],
    })
}

/// Per-layer caches of a stack forward; empty on the RGB bypass.
#[derive(Debug, Clone, Default)]
pub struct StackCache {
    layers: Vec<LayerCache>,
}

impl StackCache {
    pub fn gates(&self) -> Vec<f64> {
        self.layers.iter().map(LayerCache::gate).collect()
    }

    pub fn is_bypass(&self) -> bool {
        self.layers.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackGrads {
    pub f_sr: Tensor,
    pub f_dyn: Tensor,
    pub layers: Vec<[Tensor; 10]>,
}

impl AdapterStack {
    /// Adapter output; the RGB path returns a copy of `f_sr`.
    pub fn adapt(&self, f_sr: &Tensor, f_dyn: &Tensor, m: f64, state: Modality) -> Result<Tensor> {
        Ok(self.forward(f_sr, f_dyn, m, state)?.0)
    }

    pub fn forward(&self, f_sr: &Tensor, f_dyn: &Tensor, m: f64, state: Modality) -> Result<(Tensor, StackCache)> {
        check_tokens(f_sr, f_dyn, self.dim())?;
        if !(0.0..=1.0).contains(&m) {
            return Err(Error::OutOfRange(alloc::format!("modality weight {m}")));
        }
        match state {
            Modality::Rgb => Ok((f_sr.clone(), StackCache::default())),
            Modality::Invalid => Err(Error::OutOfRange("adapter called on an invalid frame".into())),
            Modality::Nir => {
                let mut x = f_sr.clone();
                let mut caches = Vec::with_capacity(self.layers.len());
                for layer in &self.layers {
                    let (y, c) = layer_forward(&x, f_dyn, m, layer)?;
                    caches.push(c);
                    x = y;
                }
                Ok((x, StackCache { layers: caches }))
            }
        }
    }

    /// Gradients for the inputs and every layer's weights.
    ///
    /// Fails with [`Error::Degenerate`] when given the cache of a bypass pass.
    pub fn backward(&self, cache: &StackCache, upstream: &Tensor) -> Result<StackGrads> {
        if cache.layers.len() != self.layers.len() {
            return Err(Error::Degenerate("missing adapter forward cache"));
        }
        let mut up = upstream.clone();
        let mut d_dyn: Option<Tensor> = None;
        let mut layer_grads = Vec::with_capacity(self.layers.len());
        for (layer, c) in self.layers.iter().zip(&cache.layers).rev() {
            let g = layer_backward(c, layer, &up)?;
            d_dyn = Some(match d_dyn {
                Some(acc) => acc.add(&g.f_dyn)?,
                None => g.f_dyn,
            });
            layer_grads.push(g.params);
            up = g.f_sr;
        }
        layer_grads.reverse();
        Ok(StackGrads {
            f_sr: up,
            f_dyn: d_dyn.expect("non-empty stack"),
            layers: layer_grads,
        })
    }
}
