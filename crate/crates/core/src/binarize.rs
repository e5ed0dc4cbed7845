//! Sign projection, per-filter scale factors and straight-through
//! gradient machinery for binarization-aware training.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops;
use crate::tensor::Tensor;

/// Backward rule used for the non-differentiable sign projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SteKind {
    /// Pass the upstream gradient where |x| <= 1, zero elsewhere.
    ClippedSte,
    /// Piecewise-quadratic sign approximation: multiply the upstream
    /// gradient by 2+2x on [-1,0], 2-2x on [0,1], zero outside.
    Polynomial,
}

impl std::str::FromStr for SteKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clipped-ste" | "clipped" => Ok(SteKind::ClippedSte),
            "polynomial" => Ok(SteKind::Polynomial),
            other => Err(Error::Unknown {
                what: "ste kind",
                name: other.to_string(),
            }),
        }
    }
}

/// Binarization mode of a single layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BinarizeMode {
    Off,
    WeightsOnly,
    WeightsAndActs,
}

/// Elementwise sign with the +1-at-zero convention.
pub fn sign(x: &Tensor) -> Tensor {
    x.map(|v| if v >= 0.0 { 1.0 } else { -1.0 })
}

/// Scale factor minimizing ||w - alpha*sign(w)||^2 over alpha: the mean
/// absolute value. An all-zero filter clamps to 1e-8 rather than divide
/// by zero downstream.
pub fn scale_factor(w_filter: &[f64]) -> Result<f64> {
    if w_filter.is_empty() {
        return Err(Error::Invalid("scale_factor: empty filter".to_string()));
    }
    let mut acc = 0.0;
    for v in w_filter {
        acc += v.abs();
    }
    let alpha = acc / w_filter.len() as f64;
    if alpha == 0.0 {
        log::warn!("all-zero filter: clamping scale factor to 1e-8");
        return Ok(1e-8);
    }
    Ok(alpha)
}

/// Per-output-filter scale factors of a [F,C,kh,kw] kernel tensor.
pub fn scale_factors(w: &Tensor) -> Result<Vec<f64>> {
    if w.shape().len() != 4 {
        return Err(Error::shape("scale_factors", "expected rank 4".to_string()));
    }
    let f = w.shape()[0];
    let per = w.numel() / f;
    (0..f)
        .map(|i| scale_factor(&w.data()[i * per..(i + 1) * per]))
        .collect()
}

/// Latent weights, their sign projection, and per-filter scales.
#[derive(Debug, Clone)]
pub struct BinarizedLayerState {
    pub latent_w: Tensor,
    pub bin_w: Tensor,
    pub alpha: Vec<f64>,
    pub mode: BinarizeMode,
}

impl BinarizedLayerState {
    pub fn new(latent_w: Tensor, mode: BinarizeMode) -> Result<Self> {
        let mut state = BinarizedLayerState {
            bin_w: sign(&latent_w),
            alpha: scale_factors(&latent_w)?,
            latent_w,
            mode,
        };
        state.refresh()?;
        Ok(state)
    }

    /// Re-derive bin_w and alpha after the latent weights changed.
    pub fn refresh(&mut self) -> Result<()> {
        self.bin_w = sign(&self.latent_w);
        self.alpha = scale_factors(&self.latent_w)?;
        Ok(())
    }
}

/// Forward convolution under the layer's binarization mode. `Off` reduces
/// exactly to the full-precision convolution.
pub fn binary_forward(
    layer: &BinarizedLayerState,
    a: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    match layer.mode {
        BinarizeMode::Off => ops::conv2d(a, &layer.latent_w, stride, pad, 0.0),
        BinarizeMode::WeightsOnly => {
            let z = ops::conv2d(a, &layer.bin_w, stride, pad, -1.0)?;
            scale_per_filter(&z, &layer.alpha)
        }
        BinarizeMode::WeightsAndActs => {
            let ab = sign(a);
            let z = ops::conv2d(&ab, &layer.bin_w, stride, pad, -1.0)?;
            scale_per_filter(&z, &layer.alpha)
        }
    }
}

/// Multiply each output channel of [N,F,H,W] by its filter scale.
pub fn scale_per_filter(z: &Tensor, alpha: &[f64]) -> Result<Tensor> {
    let s = z.shape();
    if s.len() != 4 || s[1] != alpha.len() {
        return Err(Error::shape(
            "scale_per_filter",
            format!("{:?} vs {} scales", s, alpha.len()),
        ));
    }
    let (n, f, h, w) = (s[0], s[1], s[2], s[3]);
    let mut out = z.clone();
    let od = out.data_mut();
    for ni in 0..n {
        for fi in 0..f {
            let base = (ni * f + fi) * h * w;
            for v in &mut od[base..base + h * w] {
                *v *= alpha[fi];
            }
        }
    }
    Ok(out)
}

/// Straight-through gradient for the sign projection.
pub fn ste_backward(kind: SteKind, x: &Tensor, upstream: &Tensor) -> Result<Tensor> {
    if x.shape() != upstream.shape() {
        return Err(Error::shape(
            "ste_backward",
            format!("{:?} vs {:?}", x.shape(), upstream.shape()),
        ));
    }
    let data = x
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&v, &u)| u * ste_factor(kind, v))
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

fn ste_factor(kind: SteKind, x: f64) -> f64 {
    match kind {
        SteKind::ClippedSte => {
            if x.abs() <= 1.0 {
                1.0
            } else {
                0.0
            }
        }
        SteKind::Polynomial => {
            if (-1.0..0.0).contains(&x) {
                2.0 + 2.0 * x
            } else if (0.0..=1.0).contains(&x) {
                2.0 - 2.0 * x
            } else {
                0.0
            }
        }
    }
}
