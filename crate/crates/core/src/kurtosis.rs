//! Moment statistics, the kurtosis regularization loss, its closed-form
//! gradient (kept as a diagnostic), and per-layer target scheduling.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops;
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

/// Targets for the kurtosis regularizer: one global value or one per layer.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(rename_all = "kebab-case")]
pub enum KtTargets {
    Global(f64),
    PerLayer(Vec<(usize, f64)>),
}

impl KtTargets {
    pub fn for_layer(&self, layer_id: usize) -> Option<f64> {
        match self {
            KtTargets::Global(v) => Some(*v),
            KtTargets::PerLayer(pairs) => pairs
                .iter()
                .find(|(id, _)| *id == layer_id)
                .map(|(_, v)| *v),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KurtosisConfig {
    /// Loss coefficient; zero disables the term.
    pub lambda: f64,
    pub targets: KtTargets,
}

impl KurtosisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::Config {
                key: "loss.lambda".to_string(),
                detail: format!("must be >= 0, got {}", self.lambda),
            });
        }
        Ok(())
    }
}

impl Default for KurtosisConfig {
    fn default() -> Self {
        KurtosisConfig {
            lambda: 1e-4,
            targets: KtTargets::Global(1.0),
        }
    }
}

/// Fourth standardized moment E[((w-mu)/sigma)^4] with population moments.
pub fn kurtosis(w: &Tensor) -> Result<f64> {
    if w.numel() < 2 {
        return Err(Error::Invalid(
            "kurtosis needs at least 2 elements".to_string(),
        ));
    }
    let mu = ops::mean(w);
    let mut m2 = 0.0;
    let mut m4 = 0.0;
    for &v in w.data() {
        let d = v - mu;
        let d2 = d * d;
        m2 += d2;
        m4 += d2 * d2;
    }
    let n = w.numel() as f64;
    m2 /= n;
    m4 /= n;
    if m2 <= 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok(m4 / (m2 * m2))
}

/// Kurtosis as a differentiable tape expression: m4 / m2^2 of the
/// centered values. Errors on zero variance before building the graph.
pub fn kurtosis_on_tape(tape: &mut Tape, w: VarId) -> Result<VarId> {
    if ops::variance(tape.value(w)) <= 0.0 {
        return Err(Error::ZeroVariance);
    }
    let mu = tape.mean(w)?;
    let d = tape.sub(w, mu)?;
    let d2 = tape.powi(d, 2)?;
    let m2 = tape.mean(d2)?;
    let d4 = tape.powi(d, 4)?;
    let m4 = tape.mean(d4)?;
    let m2sq = tape.powi(m2, 2)?;
    tape.div(m4, m2sq)
}

/// (1/L) * sum_i |kurtosis(W_i) - K_T(i)|^2 over the given layer weight
/// variables, differentiable end to end.
pub fn kurtosis_loss_on_tape(tape: &mut Tape, layers: &[(VarId, f64)]) -> Result<VarId> {
    if layers.is_empty() {
        return Err(Error::Invalid(
            "kurtosis loss needs at least one layer".to_string(),
        ));
    }
    let mut total: Option<VarId> = None;
    for &(w, kt) in layers {
        let k = kurtosis_on_tape(tape, w)?;
        let d = tape.add_scalar(k, -kt)?;
        let sq = tape.powi(d, 2)?;
        total = Some(match total {
            None => sq,
            Some(t) => tape.add(t, sq)?,
        });
    }
    tape.mul_scalar(total.unwrap(), 1.0 / layers.len() as f64)
}

/// Plain (non-tape) kurtosis loss value.
pub fn kurtosis_loss_value(layers: &[(&Tensor, f64)]) -> Result<f64> {
    if layers.is_empty() {
        return Err(Error::Invalid(
            "kurtosis loss needs at least one layer".to_string(),
        ));
    }
    let mut acc = 0.0;
    for (w, kt) in layers {
        let k = kurtosis(w)?;
        acc += (k - kt) * (k - kt);
    }
    Ok(acc / layers.len() as f64)
}

/// Closed-form per-element gradient of the kurtosis loss with the mean and
/// deviation treated as constants and an absolute-value distance factor:
///
///   g_k = (8/sigma) * ((w_k-mu)/sigma)^3 * |kurtosis(w) - K_T|
///
/// This is a diagnostic only; the optimizer uses the tape gradient, which
/// keeps the expectation factor and the signed chain-rule term.
pub fn kurtosis_grad_analytic(w: &Tensor, kt: f64) -> Result<Tensor> {
    let kurt = kurtosis(w)?;
    let mu = ops::mean(w);
    let sigma = ops::variance(w).sqrt();
    let kappa = (kurt - kt).abs();
    Ok(w.map(|v| {
        let t = (v - mu) / sigma;
        (8.0 / sigma) * t * t * t * kappa
    }))
}

/// Mean relative disagreement between the analytic diagnostic and a tape
/// gradient, logged once per epoch by the training loop.
pub fn analytic_vs_tape_divergence(analytic: &Tensor, tape_grad: &Tensor) -> f64 {
    let mut acc = 0.0;
    let mut n = 0usize;
    for (a, t) in analytic.data().iter().zip(tape_grad.data()) {
        let denom = a.abs().max(t.abs());
        if denom > 1e-12 {
            acc += (a - t).abs() / denom;
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        acc / n as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum KtStrategy {
    Uniform,
    Heterogeneous,
}

/// Per-layer K_T assignment whose arithmetic mean equals `mean_target`.
/// The heterogeneous strategy ramps linearly over depth (shallow layers
/// lower) with half-width `delta`; offsets are mirrored so they cancel
/// pairwise.
pub fn kt_schedule(
    layer_ids: &[usize],
    mean_target: f64,
    strategy: KtStrategy,
    delta: f64,
) -> Result<Vec<(usize, f64)>> {
    if layer_ids.is_empty() {
        return Err(Error::Invalid("kt_schedule: empty layer set".to_string()));
    }
    let l = layer_ids.len();
    match strategy {
        KtStrategy::Uniform => Ok(layer_ids.iter().map(|&id| (id, mean_target)).collect()),
        KtStrategy::Heterogeneous => {
            if l == 1 {
                return Ok(vec![(layer_ids[0], mean_target)]);
            }
            let mut offsets = vec![0.0; l];
            for i in 0..l / 2 {
                let o = -delta + 2.0 * delta * i as f64 / (l - 1) as f64;
                offsets[i] = o;
                offsets[l - 1 - i] = -o;
            }
            Ok(layer_ids
                .iter()
                .zip(&offsets)
                .map(|(&id, &o)| (id, mean_target + o))
                .collect())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::seeded_rng;

    #[test]
    fn kurtosis_of_balanced_sign_sample_is_one() {
        let mut data = vec![1.0; 50];
        data.extend(vec![-1.0; 50]);
        let w = Tensor::new(vec![100], data).unwrap();
        assert_eq!(kurtosis(&w).unwrap(), 1.0);
    }

    #[test]
    fn kurtosis_of_uniform_sample_near_1_8() {
        let mut rng = seeded_rng(42);
        let w = Tensor::rand_uniform(&[100_000], -1.0, 1.0, &mut rng);
        let k = kurtosis(&w).unwrap();
        assert!((k - 1.8).abs() < 0.05, "kurtosis={k}");
    }

    #[test]
    fn kurtosis_of_normal_sample_near_3() {
        let mut rng = seeded_rng(43);
        let w = Tensor::randn(&[100_000], &mut rng);
        let k = kurtosis(&w).unwrap();
        assert!((k - 3.0).abs() < 0.1, "kurtosis={k}");
    }

    #[test]
    fn kurtosis_direct_example() {
        let w = Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let k = kurtosis(&w).unwrap();
        assert!((k - 1.64).abs() < 1e-12, "kurtosis={k}");
    }

    #[test]
    fn kurtosis_rejects_degenerate_input() {
        assert!(matches!(
            kurtosis(&Tensor::full(&[8], 3.0)),
            Err(Error::ZeroVariance)
        ));
        assert!(kurtosis(&Tensor::scalar(1.0)).is_err());
    }

    #[test]
    fn kurtosis_is_scale_and_shift_invariant() {
        let mut rng = seeded_rng(44);
        let w = Tensor::randn(&[512], &mut rng);
        let k0 = kurtosis(&w).unwrap();
        for &(c, d) in &[(2.5, 0.0), (-0.3, 1.7), (10.0, -4.0)] {
            let t = w.map(|v| c * v + d);
            assert!((kurtosis(&t).unwrap() - k0).abs() < 1e-10);
        }
    }

    #[test]
    fn kurtosis_loss_examples() {
        // one layer with kurtosis 3, K_T = 1 -> 4
        let mut rng = seeded_rng(45);
        let w = Tensor::randn(&[100_000], &mut rng);
        let k = kurtosis(&w).unwrap();
        let loss = kurtosis_loss_value(&[(&w, 1.0)]).unwrap();
        assert!((loss - (k - 1.0) * (k - 1.0)).abs() < 1e-12);
        assert!((loss - 4.0).abs() < 0.5);
    }

    #[test]
    fn kurtosis_loss_two_layer_arithmetic() {
        // layers with kurtoses {1.8, 1.0} and K_T = 1 -> 0.32
        // uniform and balanced-sign samples hit those kurtoses
        let mut rng = seeded_rng(46);
        let u = Tensor::rand_uniform(&[200_000], -1.0, 1.0, &mut rng);
        let mut data = vec![1.0; 500];
        data.extend(vec![-1.0; 500]);
        let b = Tensor::new(vec![1000], data).unwrap();
        let loss = kurtosis_loss_value(&[(&u, 1.0), (&b, 1.0)]).unwrap();
        assert!((loss - 0.32).abs() < 0.02, "loss={loss}");
    }

    #[test]
    fn kurtosis_loss_zero_iff_on_target() {
        let mut data = vec![1.0; 8];
        data.extend(vec![-1.0; 8]);
        let w = Tensor::new(vec![16], data).unwrap();
        assert_eq!(kurtosis_loss_value(&[(&w, 1.0)]).unwrap(), 0.0);
        assert!(kurtosis_loss_value(&[(&w, 1.5)]).unwrap() > 0.0);
    }

    #[test]
    fn tape_gradient_matches_finite_differences() {
        let mut rng = seeded_rng(47);
        let w0 = Tensor::randn(&[24], &mut rng);
        let f = |w: &Tensor| -> f64 {
            let mut tape = Tape::new();
            let wi = tape.leaf(w.clone(), false);
            let l = kurtosis_loss_on_tape(&mut tape, &[(wi, 1.0)]).unwrap();
            tape.value(l).item().unwrap()
        };
        let mut tape = Tape::new();
        let wi = tape.leaf(w0.clone(), true);
        let l = kurtosis_loss_on_tape(&mut tape, &[(wi, 1.0)]).unwrap();
        tape.backward(l).unwrap();
        let grad = tape.grad(wi).unwrap().data().to_vec();
        for i in 0..w0.numel() {
            let h = 1e-5;
            let mut p = w0.clone();
            p.data_mut()[i] += h;
            let mut m = w0.clone();
            m.data_mut()[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            let rel = (grad[i] - fd).abs() / fd.abs().max(1e-6);
            assert!(rel < 1e-5, "[{i}] tape {} fd {fd}", grad[i]);
        }
    }

    #[test]
    fn analytic_grad_vanishes_at_mean_and_on_target() {
        let mut rng = seeded_rng(48);
        let mut w = Tensor::randn(&[64], &mut rng);
        let mu = ops::mean(&w);
        w.data_mut()[0] = mu; // put one element exactly at the mean
        let g = kurtosis_grad_analytic(&w, 0.5).unwrap();
        let mu2 = ops::mean(&w);
        // element at the (new) mean has a vanishing cubic factor
        let idx = w
            .data()
            .iter()
            .enumerate()
            .min_by(|a, b| {
                (a.1 - mu2).abs().partial_cmp(&(b.1 - mu2).abs()).unwrap()
            })
            .unwrap()
            .0;
        assert!(g.data()[idx].abs() < 1e-2 * g.data().iter().fold(0.0f64, |m, v| m.max(v.abs())));

        // kurtosis(w) == K_T makes every component zero
        let k = kurtosis(&w).unwrap();
        let g2 = kurtosis_grad_analytic(&w, k).unwrap();
        assert!(g2.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn analytic_sign_pattern_versus_tape_gradient() {
        // Hand-derived exact derivative of kurt = m4/m2^2:
        //   d kurt/d w_k = (4/(n*m2^2)) * ((w_k-mu)^3 - m3 - kurt*m2*(w_k-mu))
        // so with kurt > K_T the tape gradient of the loss carries the sign
        // of that bracket, while the diagnostic always carries sign(w-mu).
        // The two agree exactly on tail elements and flip in the bulk.
        let mut rng = seeded_rng(49);
        let w0 = Tensor::randn(&[4096], &mut rng);
        let kt = 1.0;
        let mut tape = Tape::new();
        let wi = tape.leaf(w0.clone(), true);
        let l = kurtosis_loss_on_tape(&mut tape, &[(wi, kt)]).unwrap();
        tape.backward(l).unwrap();
        let tg = tape.grad(wi).unwrap().clone();
        let ag = kurtosis_grad_analytic(&w0, kt).unwrap();
        let kurt = kurtosis(&w0).unwrap();
        assert!(kurt > kt);
        let mu = ops::mean(&w0);
        let m2 = ops::variance(&w0);
        let n = w0.numel() as f64;
        let m3 = w0.data().iter().map(|v| (v - mu).powi(3)).sum::<f64>() / n;

        let mut tail_checked = 0usize;
        for i in 0..w0.numel() {
            let d = w0.data()[i] - mu;
            let bracket = d.powi(3) - m3 - kurt * m2 * d;
            if bracket.abs() < 1e-6 || ag.data()[i].abs() < 1e-12 {
                continue; // too close to the sign boundary to call
            }
            // tape gradient sign matches the exact closed form everywhere
            assert_eq!(
                tg.data()[i].signum(),
                bracket.signum(),
                "element {i}: tape gradient disagrees with exact derivative"
            );
            // diagnostic agrees with the tape gradient exactly on the tails
            if d * d > 1.1 * kurt * m2 {
                assert_eq!(
                    tg.data()[i].signum(),
                    ag.data()[i].signum(),
                    "tail element {i} should agree"
                );
                tail_checked += 1;
            }
        }
        assert!(tail_checked > 20, "too few tail elements: {tail_checked}");
    }

    #[test]
    fn kt_schedule_uniform_and_degenerate() {
        let ids = [3usize, 7, 9];
        let s = kt_schedule(&ids, 1.0, KtStrategy::Uniform, 0.4).unwrap();
        assert!(s.iter().all(|&(_, v)| v == 1.0));
        let one = kt_schedule(&[5], 1.0, KtStrategy::Heterogeneous, 0.4).unwrap();
        assert_eq!(one, vec![(5, 1.0)]);
        assert!(kt_schedule(&[], 1.0, KtStrategy::Uniform, 0.4).is_err());
    }

    #[test]
    fn kt_schedule_heterogeneous_mean_is_target() {
        for l in [2usize, 4, 5, 9] {
            let ids: Vec<usize> = (0..l).collect();
            let s = kt_schedule(&ids, 1.0, KtStrategy::Heterogeneous, 0.4).unwrap();
            let mean: f64 = s.iter().map(|(_, v)| v).sum::<f64>() / l as f64;
            assert!((mean - 1.0).abs() < 1e-12, "L={l} mean={mean}");
            // shallow layers lower
            assert!(s[0].1 < s[l - 1].1);
        }
    }
}
