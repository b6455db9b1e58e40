//! Contrastive objectives over cosine similarities.
//!
//! `ℓ_CL` is InfoNCE between the two dropout views; `ℓ_re` pulls the
//! reshaped embedding towards both views (which act as fixed targets); the
//! combined loss `λ·ℓ_CL + (1-λ)·max(ℓ_CL, ℓ_re)` only lets `ℓ_re` steer the
//! update while it exceeds `ℓ_CL`. Batch reduction is the mean over rows.

use crate::tensor::{Result, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub tau: f64,
    pub tau_prime: f64,
    pub lambda: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.05,
            tau_prime: 0.05,
            lambda: 0.5,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| {
            Err(TensorError::Param {
                op: "loss_config",
                detail,
            })
        };
        if !(self.tau > 0.0) || !(self.tau_prime > 0.0) {
            return bad(format!("temperatures must be positive, got {} and {}", self.tau, self.tau_prime));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return bad(format!("lambda must be in [0, 1], got {}", self.lambda));
        }
        Ok(())
    }
}

/// The three `[N × d]` embedding sets of one mini-batch.
#[derive(Debug, Clone)]
pub struct BatchEmbeddings {
    pub h_z: Tensor,
    pub h_zp: Tensor,
    pub h_star: Tensor,
}

impl BatchEmbeddings {
    pub fn new(h_z: Tensor, h_zp: Tensor, h_star: Tensor) -> Result<Self> {
        let s = h_z.shape().to_vec();
        if s.len() != 2 || s[0] == 0 || h_zp.shape() != s.as_slice() || h_star.shape() != s.as_slice() {
            return Err(TensorError::Shape {
                op: "batch_embeddings",
                lhs: s,
                rhs: h_star.shape().to_vec(),
            });
        }
        Ok(BatchEmbeddings { h_z, h_zp, h_star })
    }

    pub fn len(&self) -> usize {
        self.h_z.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub l_cl: f64,
    pub l_re: f64,
    pub combined: f64,
    pub gate_re_active: bool,
}

impl LossBreakdown {
    pub fn new(l_cl: f64, l_re: f64, lambda: f64) -> Self {
        let (combined, gate_re_active) = combine(l_cl, l_re, lambda);
        LossBreakdown {
            l_cl,
            l_re,
            combined,
            gate_re_active,
        }
    }
}

/// `mean_i -log softmax_j(cos(anchor_i, candidate_j) / tau)[i]`
pub fn info_nce_on(tape: &Tape, anchors: &Var, candidates: &Var, tau: f64) -> Result<Var> {
    if anchors.shape() != candidates.shape() || anchors.shape().len() != 2 {
        return Err(TensorError::Shape {
            op: "info_nce",
            lhs: anchors.shape().to_vec(),
            rhs: candidates.shape().to_vec(),
        });
    }
    let a = tape.normalize_rows(anchors)?;
    let c = tape.normalize_rows(candidates)?;
    let cos = tape.matmul(&a, &tape.transpose(&c)?)?;
    let log_probs = tape.log_softmax_rows(&tape.scale(&cos, 1.0 / tau))?;
    let picked = tape.diag(&log_probs)?;
    Ok(tape.scale(&tape.mean(&picked), -1.0))
}

/// `ℓ_CL` on tape values.
pub fn loss_cl_on(tape: &Tape, h_z: &Var, h_zp: &Var, tau: f64) -> Result<Var> {
    info_nce_on(tape, h_z, h_zp, tau)
}

/// `ℓ_re` on tape values. `h_z` and `h_zp` are detached here, so only
/// `h_star` receives gradient.
pub fn loss_re_on(tape: &Tape, h_z: &Var, h_zp: &Var, h_star: &Var, tau_prime: f64) -> Result<Var> {
    let from_z = info_nce_on(tape, &tape.detach(h_z), h_star, tau_prime)?;
    let from_zp = info_nce_on(tape, &tape.detach(h_zp), h_star, tau_prime)?;
    tape.add(&from_z, &from_zp)
}

pub fn loss_cl(batch: &BatchEmbeddings, tau: f64) -> Result<f64> {
    let tape = Tape::no_grad();
    let hz = tape.constant(batch.h_z.clone());
    let hzp = tape.constant(batch.h_zp.clone());
    Ok(loss_cl_on(&tape, &hz, &hzp, tau)?.item())
}

pub fn loss_re(batch: &BatchEmbeddings, tau_prime: f64) -> Result<f64> {
    let tape = Tape::no_grad();
    let hz = tape.constant(batch.h_z.clone());
    let hzp = tape.constant(batch.h_zp.clone());
    let hs = tape.constant(batch.h_star.clone());
    Ok(loss_re_on(&tape, &hz, &hzp, &hs, tau_prime)?.item())
}

/// `λ·ℓ_CL + (1-λ)·max(ℓ_CL, ℓ_re)` and whether `ℓ_re` won the max. A tie
/// counts as `ℓ_CL`.
pub fn combine(l_cl: f64, l_re: f64, lambda: f64) -> (f64, bool) {
    let gate = l_re > l_cl;
    let max = if gate { l_re } else { l_cl };
    (lambda * l_cl + (1.0 - lambda) * max, gate)
}

/// Weights `(c_cl, c_re)` such that `combined = c_cl·ℓ_CL + c_re·ℓ_re`
/// has the same gradient as the gated loss.
pub fn gate_coefficients(l_cl: f64, l_re: f64, lambda: f64) -> (f64, f64) {
    if l_re > l_cl {
        (lambda, 1.0 - lambda)
    } else {
        (1.0, 0.0)
    }
}

pub fn evaluate_losses(batch: &BatchEmbeddings, config: &LossConfig) -> Result<LossBreakdown> {
    let l_cl = loss_cl(batch, config.tau)?;
    let l_re = loss_re(batch, config.tau_prime)?;
    Ok(LossBreakdown::new(l_cl, l_re, config.lambda))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rows(n: usize, d: usize, row: &[f64]) -> Tensor {
        Tensor::matrix(n, d, row.iter().copied().cycle().take(n * d).collect()).unwrap()
    }

    #[test]
    fn single_row_is_zero() {
        let b = BatchEmbeddings::new(rows(1, 3, &[1.0, 2.0, 3.0]), rows(1, 3, &[0.5, -1.0, 2.0]), rows(1, 3, &[3.0, 1.0, 0.0]))
            .unwrap();
        assert_eq!(loss_cl(&b, 0.05).unwrap(), 0.0);
        assert_eq!(loss_re(&b, 0.05).unwrap(), 0.0);
    }

    #[test]
    fn identical_rows_give_log_n() {
        for n in [2usize, 4, 8] {
            let t = rows(n, 3, &[1.0, -2.0, 0.5]);
            let b = BatchEmbeddings::new(t.clone(), t.clone(), t).unwrap();
            let ln = (n as f64).ln();
            assert!((loss_cl(&b, 0.05).unwrap() - ln).abs() < 1e-10);
            assert!((loss_re(&b, 0.05).unwrap() - 2.0 * ln).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_row_is_degenerate() {
        let t = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let b = BatchEmbeddings::new(t.clone(), t.clone(), t).unwrap();
        assert!(matches!(loss_cl(&b, 0.05), Err(TensorError::Degenerate { .. })));
    }

    #[test]
    fn combine_cases() {
        assert_eq!(combine(1.0, 2.0, 0.5), (1.5, true));
        assert_eq!(combine(1.0, 0.5, 0.5), (1.0, false));
        assert_eq!(combine(1.0, 1.0, 0.3), (1.0, false));
        assert_eq!(combine(0.7, 9.0, 1.0).0, 0.7);
        assert_eq!(gate_coefficients(1.0, 1.0, 0.3), (1.0, 0.0));
        assert_eq!(gate_coefficients(1.0, 2.0, 0.3), (0.3, 0.7));
    }

    #[test]
    fn config_validation() {
        assert!(LossConfig::default().validate().is_ok());
        assert!(LossConfig { tau: 0.0, ..Default::default() }.validate().is_err());
        assert!(LossConfig { lambda: 1.5, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn loss_re_leaves_views_without_gradient() {
        let tape = Tape::new();
        let hz = tape.leaf(rows(3, 2, &[1.0, 0.2, -0.3, 0.9]));
        let hzp = tape.leaf(rows(3, 2, &[0.4, 1.0, 0.8, -0.1]));
        let hs = tape.leaf(rows(3, 2, &[0.3, -0.7, 1.1, 0.5]));
        let l = loss_re_on(&tape, &hz, &hzp, &hs, 0.1).unwrap();
        tape.backward(&l).unwrap();
        assert!(hz.grad().is_none());
        assert!(hzp.grad().is_none());
        assert!(hs.grad_or_zeros().iter().any(|g| *g != 0.0));
    }
}
