//! Logit knowledge distillation and Weight Distribution Mimicking between
//! a fixed full-precision teacher and the binary student.
//!
//! The teacher side always enters the tape as constants, so no gradient
//! can reach teacher parameters by construction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops;
use crate::tape::{soft_hist_forward, Tape, VarId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct WdmConfig {
    /// KD coefficient inside the mimicking loss.
    pub beta: f64,
    /// Coefficient of the whole mimicking loss in the total objective.
    pub alpha_wdm: f64,
    /// Softening temperature for the logit KD term.
    pub temperature: f64,
    pub bins: usize,
    /// Symmetric weight-support bound; densities live on [-range, range].
    pub range: f64,
    /// Triangular kernel width of the soft binning.
    pub bandwidth: f64,
    /// Smoothing mass added to every bin so the KL stays finite.
    pub eps: f64,
}

impl Default for WdmConfig {
    fn default() -> Self {
        let bins = 64;
        let range = 1.5;
        WdmConfig {
            beta: 1.0,
            alpha_wdm: 1.0,
            temperature: 4.0,
            bins,
            range,
            bandwidth: 2.0 * range / bins as f64,
            eps: 1e-6,
        }
    }
}

impl WdmConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, detail: String| -> Result<()> {
            Err(Error::Config {
                key: key.to_string(),
                detail,
            })
        };
        if self.beta < 0.0 {
            return bad("loss.beta", format!("must be >= 0, got {}", self.beta));
        }
        if self.alpha_wdm < 0.0 {
            return bad(
                "loss.alpha_wdm",
                format!("must be >= 0, got {}", self.alpha_wdm),
            );
        }
        if self.temperature <= 0.0 {
            return bad(
                "loss.temperature",
                format!("must be > 0, got {}", self.temperature),
            );
        }
        if self.bins < 8 {
            return bad("loss.bins", format!("must be >= 8, got {}", self.bins));
        }
        if self.range <= 0.0 {
            return bad("loss.range", format!("must be > 0, got {}", self.range));
        }
        if self.bandwidth <= 0.0 {
            return bad(
                "loss.bandwidth",
                format!("must be > 0, got {}", self.bandwidth),
            );
        }
        Ok(())
    }
}

/// Smoothed, normalized density estimate of one layer's weights.
#[derive(Debug, Clone)]
pub struct WeightDensity {
    pub bin_centers: Vec<f64>,
    pub probs: Vec<f64>,
}

/// Soft triangular-kernel histogram of the weights. Probabilities are
/// strictly positive and sum to one.
pub fn weight_density(w: &Tensor, cfg: &WdmConfig) -> Result<WeightDensity> {
    if w.numel() == 0 {
        return Err(Error::Invalid("weight_density: empty tensor".to_string()));
    }
    let fwd = soft_hist_forward(w.data(), cfg.bins, cfg.range, cfg.bandwidth, cfg.eps)?;
    Ok(WeightDensity {
        bin_centers: fwd.centers,
        probs: fwd.probs,
    })
}

/// KL divergence between two discrete densities (reference first).
pub fn kl_divergence(p: &[f64], q: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (&pi, &qi) in p.iter().zip(q) {
        if pi > 0.0 {
            acc += pi * (pi / qi).ln();
        }
    }
    acc
}

/// Batch-mean KL(softmax(z_t/T) || softmax(z_s/T)) as a tape expression.
/// Teacher logits are constants; the gradient reaches the student only.
pub fn kd_loss_on_tape(
    tape: &mut Tape,
    z_t: &Tensor,
    z_s: VarId,
    temperature: f64,
) -> Result<VarId> {
    let s_shape = tape.value(z_s).shape().to_vec();
    if z_t.shape() != s_shape.as_slice() {
        return Err(Error::shape(
            "kd_loss",
            format!("teacher {:?} vs student {:?}", z_t.shape(), s_shape),
        ));
    }
    if temperature <= 0.0 {
        return Err(Error::Invalid(format!(
            "kd_loss: temperature must be > 0, got {temperature}"
        )));
    }
    let n = z_t.shape()[0] as f64;
    let zt_scaled = z_t.map(|v| v / temperature);
    let p_t = ops::softmax(&zt_scaled)?;
    // constant teacher entropy term of the KL
    let log_pt = ops::log_softmax(&zt_scaled)?;
    let mut const_term = 0.0;
    for (p, lp) in p_t.data().iter().zip(log_pt.data()) {
        const_term += p * lp;
    }
    const_term /= n;

    let p_t_leaf = tape.constant(p_t);
    let zs_scaled = tape.mul_scalar(z_s, 1.0 / temperature)?;
    let log_ps = tape.log_softmax(zs_scaled)?;
    let cross = tape.mul(p_t_leaf, log_ps)?;
    let total = tape.sum(cross)?;
    let neg_mean = tape.mul_scalar(total, -1.0 / n)?;
    tape.add_scalar(neg_mean, const_term)
}

/// Weight Distribution Mimicking loss: per-layer KL between teacher and
/// student weight densities (teacher as reference), summed over layers,
/// plus `beta` times the logit KD term.
pub fn wdm_loss_on_tape(
    tape: &mut Tape,
    teacher_weights: &[Tensor],
    student_weights: &[VarId],
    cfg: &WdmConfig,
    z_t: &Tensor,
    z_s: VarId,
) -> Result<VarId> {
    cfg.validate()?;
    if teacher_weights.len() != student_weights.len() {
        return Err(Error::Topology(format!(
            "{} teacher layers vs {} student layers",
            teacher_weights.len(),
            student_weights.len()
        )));
    }
    for (i, (tw, sw)) in teacher_weights.iter().zip(student_weights).enumerate() {
        if tw.shape() != tape.value(*sw).shape() {
            return Err(Error::Topology(format!(
                "layer {i}: teacher {:?} vs student {:?}",
                tw.shape(),
                tape.value(*sw).shape()
            )));
        }
    }

    let mut total: Option<VarId> = None;
    for (tw, &sw) in teacher_weights.iter().zip(student_weights) {
        let t_density = weight_density(tw, cfg)?;
        // constant part: sum_j p_T log p_T
        let mut t_entropy = 0.0;
        for &p in &t_density.probs {
            t_entropy += p * p.ln();
        }
        let p_t = tape.constant(Tensor::new(vec![cfg.bins], t_density.probs)?);
        let flat_len = tape.value(sw).numel();
        let s_flat = tape.reshape(sw, &[flat_len])?;
        let p_s = tape.soft_histogram(s_flat, cfg.bins, cfg.range, cfg.bandwidth, cfg.eps)?;
        let log_ps = tape.ln(p_s)?;
        let cross = tape.mul(p_t, log_ps)?;
        let cross_sum = tape.sum(cross)?;
        let neg = tape.mul_scalar(cross_sum, -1.0)?;
        let kl = tape.add_scalar(neg, t_entropy)?;
        total = Some(match total {
            None => kl,
            Some(t) => tape.add(t, kl)?,
        });
    }
    let kl_total = total.ok_or_else(|| Error::Topology("no layers to mimic".to_string()))?;
    if cfg.beta == 0.0 {
        return Ok(kl_total);
    }
    let kd = kd_loss_on_tape(tape, z_t, z_s, cfg.temperature)?;
    let kd_scaled = tape.mul_scalar(kd, cfg.beta)?;
    tape.add(kl_total, kd_scaled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::seeded_rng;

    fn kd_value(z_t: &Tensor, z_s: &Tensor, temp: f64) -> f64 {
        let mut tape = Tape::new();
        let zs = tape.leaf(z_s.clone(), false);
        let l = kd_loss_on_tape(&mut tape, z_t, zs, temp).unwrap();
        tape.value(l).item().unwrap()
    }

    #[test]
    fn kd_loss_zero_for_identical_logits() {
        let mut rng = seeded_rng(50);
        let z = Tensor::randn(&[4, 10], &mut rng);
        assert!(kd_value(&z, &z, 4.0).abs() < 1e-12);
    }

    #[test]
    fn kd_loss_nonnegative_and_matches_direct_sum_oracle() {
        let mut rng = seeded_rng(51);
        for _ in 0..10 {
            let z_t = Tensor::randn(&[3, 7], &mut rng);
            let z_s = Tensor::randn(&[3, 7], &mut rng);
            let got = kd_value(&z_t, &z_s, 4.0);
            assert!(got >= 0.0);
            // direct sum p*log(p/q) per row, averaged
            let p = ops::softmax(&z_t.map(|v| v / 4.0)).unwrap();
            let q = ops::softmax(&z_s.map(|v| v / 4.0)).unwrap();
            let mut want = 0.0;
            for (pi, qi) in p.data().iter().zip(q.data()) {
                want += pi * (pi / qi).ln();
            }
            want /= 3.0;
            assert!((got - want).abs() < 1e-10, "got {got} want {want}");
        }
    }

    #[test]
    fn kd_loss_rejects_shape_mismatch() {
        let z_t = Tensor::zeros(&[2, 5]);
        let mut tape = Tape::new();
        let zs = tape.leaf(Tensor::zeros(&[2, 4]), false);
        assert!(kd_loss_on_tape(&mut tape, &z_t, zs, 4.0).is_err());
    }

    #[test]
    fn kd_gradient_matches_finite_differences() {
        let mut rng = seeded_rng(52);
        let z_t = Tensor::randn(&[2, 6], &mut rng);
        let z_s0 = Tensor::randn(&[2, 6], &mut rng);
        let mut tape = Tape::new();
        let zs = tape.leaf(z_s0.clone(), true);
        let l = kd_loss_on_tape(&mut tape, &z_t, zs, 4.0).unwrap();
        tape.backward(l).unwrap();
        let grad = tape.grad(zs).unwrap().data().to_vec();
        for i in 0..z_s0.numel() {
            let h = 1e-5;
            let mut p = z_s0.clone();
            p.data_mut()[i] += h;
            let mut m = z_s0.clone();
            m.data_mut()[i] -= h;
            let fd = (kd_value(&z_t, &p, 4.0) - kd_value(&z_t, &m, 4.0)) / (2.0 * h);
            let rel = (grad[i] - fd).abs() / fd.abs().max(1e-6);
            assert!(rel < 1e-5, "[{i}] tape {} fd {fd}", grad[i]);
        }
    }

    #[test]
    fn weight_density_center_mass_and_normalization() {
        let cfg = WdmConfig::default();
        let w = Tensor::zeros(&[100]);
        let d = weight_density(&w, &cfg).unwrap();
        let total: f64 = d.probs.iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
        assert!(d.probs.iter().all(|&p| p > 0.0));
        // zero sits between the two central bins of an even grid
        let mut idx: Vec<usize> = (0..cfg.bins).collect();
        idx.sort_by(|&a, &b| d.probs[b].partial_cmp(&d.probs[a]).unwrap());
        let top2: Vec<usize> = idx[..2].to_vec();
        assert!(top2.contains(&(cfg.bins / 2 - 1)) && top2.contains(&(cfg.bins / 2)));
        let center_mass = d.probs[cfg.bins / 2 - 1] + d.probs[cfg.bins / 2];
        assert!(center_mass > 0.999, "center mass {center_mass}");
    }

    #[test]
    fn weight_density_close_to_hard_histogram() {
        let cfg = WdmConfig::default();
        let mut rng = seeded_rng(53);
        let w = Tensor::randn(&[50_000], &mut rng).map(|v| v * 0.5);
        let d = weight_density(&w, &cfg).unwrap();
        // hard-binned oracle with identical clamping
        let h = 2.0 * cfg.range / cfg.bins as f64;
        let mut hard = vec![0.0; cfg.bins];
        for &v in w.data() {
            let j = (((v + cfg.range) / h).floor() as isize).clamp(0, cfg.bins as isize - 1);
            hard[j as usize] += 1.0;
        }
        let n: f64 = hard.iter().sum();
        let tv: f64 = d
            .probs
            .iter()
            .zip(&hard)
            .map(|(p, c)| (p - c / n).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.05, "total variation {tv}");
    }

    fn wdm_value(tw: &[Tensor], sw: &[Tensor], cfg: &WdmConfig, z_t: &Tensor, z_s: &Tensor) -> f64 {
        let mut tape = Tape::new();
        let svars: Vec<VarId> = sw.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let zs = tape.leaf(z_s.clone(), false);
        let l = wdm_loss_on_tape(&mut tape, tw, &svars, cfg, z_t, zs).unwrap();
        tape.value(l).item().unwrap()
    }

    #[test]
    fn wdm_zero_when_student_copies_teacher_with_beta_zero() {
        let mut rng = seeded_rng(54);
        let w1 = Tensor::randn(&[4, 2, 3, 3], &mut rng).map(|v| v * 0.4);
        let w2 = Tensor::randn(&[8, 4, 3, 3], &mut rng).map(|v| v * 0.4);
        let cfg = WdmConfig {
            beta: 0.0,
            ..WdmConfig::default()
        };
        let z = Tensor::zeros(&[2, 4]);
        let v = wdm_value(
            &[w1.clone(), w2.clone()],
            &[w1, w2],
            &cfg,
            &z,
            &z.clone(),
        );
        assert!(v.abs() < 1e-12, "wdm={v}");
    }

    #[test]
    fn wdm_nonnegative_and_detects_mismatch() {
        let mut rng = seeded_rng(55);
        let tw = Tensor::randn(&[6, 3, 3, 3], &mut rng).map(|v| v * 0.4);
        let sw = Tensor::randn(&[6, 3, 3, 3], &mut rng).map(|v| v * 0.6);
        let cfg = WdmConfig::default();
        let z_t = Tensor::randn(&[2, 5], &mut rng);
        let z_s = Tensor::randn(&[2, 5], &mut rng);
        let v = wdm_value(&[tw.clone()], &[sw], &cfg, &z_t, &z_s);
        assert!(v > 0.0);

        // topology mismatch errors
        let mut tape = Tape::new();
        let s = tape.leaf(Tensor::zeros(&[2, 3, 3, 3]), false);
        let zs = tape.leaf(z_s.clone(), false);
        assert!(wdm_loss_on_tape(&mut tape, &[tw], &[s], &cfg, &z_t, zs).is_err());
    }

    #[test]
    fn wdm_invariant_to_weight_permutation() {
        let mut rng = seeded_rng(56);
        let tw = Tensor::randn(&[4, 4, 3, 3], &mut rng).map(|v| v * 0.4);
        let sw = Tensor::randn(&[4, 4, 3, 3], &mut rng).map(|v| v * 0.5);
        let cfg = WdmConfig {
            beta: 0.0,
            ..WdmConfig::default()
        };
        let z = Tensor::zeros(&[1, 2]);
        let v1 = wdm_value(&[tw.clone()], &[sw.clone()], &cfg, &z, &z.clone());
        let mut reversed = sw.data().to_vec();
        reversed.reverse();
        let swr = Tensor::new(sw.shape().to_vec(), reversed).unwrap();
        let v2 = wdm_value(&[tw], &[swr], &cfg, &z, &z.clone());
        assert!((v1 - v2).abs() < 1e-12);
    }

    #[test]
    fn wdm_gradient_matches_finite_differences() {
        let mut rng = seeded_rng(57);
        let tw = Tensor::randn(&[2, 2, 3, 3], &mut rng).map(|v| v * 0.4);
        let sw0 = Tensor::randn(&[2, 2, 3, 3], &mut rng).map(|v| v * 0.5);
        let cfg = WdmConfig::default();
        let z_t = Tensor::randn(&[2, 4], &mut rng);
        let z_s = Tensor::randn(&[2, 4], &mut rng);

        let mut tape = Tape::new();
        let sv = tape.leaf(sw0.clone(), true);
        let zs = tape.leaf(z_s.clone(), false);
        let l = wdm_loss_on_tape(&mut tape, &[tw.clone()], &[sv], &cfg, &z_t, zs).unwrap();
        tape.backward(l).unwrap();
        let grad = tape.grad(sv).unwrap().data().to_vec();
        for i in 0..sw0.numel() {
            let h = 1e-6;
            let mut p = sw0.clone();
            p.data_mut()[i] += h;
            let mut m = sw0.clone();
            m.data_mut()[i] -= h;
            let fd = (wdm_value(&[tw.clone()], &[p], &cfg, &z_t, &z_s)
                - wdm_value(&[tw.clone()], &[m], &cfg, &z_t, &z_s))
                / (2.0 * h);
            let rel = (grad[i] - fd).abs() / fd.abs().max(1e-3);
            assert!(rel < 1e-4, "[{i}] tape {} fd {fd}", grad[i]);
        }
    }

    #[test]
    fn kl_term_decreases_along_interpolation_path() {
        // Interpolate in quantile space (sorted values) so the density
        // mismatch itself shrinks monotonically along the path; naive
        // elementwise interpolation of independent samples does not have
        // that property (the interpolated spread dips below both ends).
        // The sample is large enough that the KL noise floor of two
        // independent empirical histograms (~bins/2n) stays below the
        // mismatch signal everywhere on the path.
        let mut rng = seeded_rng(58);
        let tw = Tensor::randn(&[50, 10, 10, 10], &mut rng).map(|v| v * 0.4);
        let sw = Tensor::randn(&[50, 10, 10, 10], &mut rng).map(|v| v * 0.8);
        let sort = |t: &Tensor| -> Vec<f64> {
            let mut v = t.data().to_vec();
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v
        };
        let ts = sort(&tw);
        let ss = sort(&sw);
        let cfg = WdmConfig {
            beta: 0.0,
            ..WdmConfig::default()
        };
        let z = Tensor::zeros(&[1, 2]);
        let mut prev = f64::INFINITY;
        for step in 0..=10 {
            let t = step as f64 / 10.0;
            let interp = Tensor::new(
                tw.shape().to_vec(),
                ss.iter()
                    .zip(&ts)
                    .map(|(s, w)| (1.0 - t) * s + t * w)
                    .collect(),
            )
            .unwrap();
            let v = wdm_value(&[tw.clone()], &[interp], &cfg, &z, &z.clone());
            assert!(
                v <= prev + 1e-9,
                "KL increased along the path at t={t}: {v} > {prev}"
            );
            prev = v;
        }
        assert!(prev < 1e-6, "endpoint KL should be ~0, got {prev}");
    }
}
