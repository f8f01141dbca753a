//! Empirical verification of the risk decomposition: the noisy expected
//! loss splits into the deterministic loss plus a penalty that is
//! nonnegative under final-layer injection, and to second order the penalty
//! is half the summed trace of the conditional covariance of `B' z_t`,
//! where `B` is the prediction matrix rescaled by the PSD square root of
//! the log-normalizer Hessian.

use crate::data::WindowView;
use crate::model::NoisinModel;
use crate::noise::{InjectionMode, NoiseFamily, NoiseSpec};
use crate::rng::Pcg32;
use crate::tensor::{self, Tensor};
use crate::{Error, Result};

/// Risk decomposition of one model/sequence pair.
#[derive(Clone, Debug)]
pub struct RiskReport {
    /// Monte Carlo estimate of the noisy risk (summed over the sequence).
    pub r_noisy: f64,
    pub r_noisy_stderr: f64,
    /// Deterministic risk of the underlying network.
    pub r_det: f64,
    /// `r_noisy - r_det`, the empirical penalty.
    pub reg_empirical: f64,
    pub reg_empirical_stderr: f64,
    /// Second-order trace-of-covariance approximation of the penalty.
    pub reg_taylor: f64,
    pub reg_taylor_stderr: f64,
    pub per_step: Vec<StepRisk>,
    /// Set when the model injects at every layer: the decomposition proof
    /// conditions on the strong (final-layer) construction.
    pub weak_caveat: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct StepRisk {
    pub r_det: f64,
    pub r_noisy: f64,
    pub reg_taylor: f64,
}

/// One row of the per-spread report emitted by the diagnostics CLI.
#[derive(Clone, Debug)]
pub struct RiskRow {
    pub gamma: f64,
    pub family: NoiseFamily,
    pub mode: InjectionMode,
    pub report: RiskReport,
    /// True when the Taylor term sits below the Monte Carlo noise floor and
    /// the relative comparison is meaningless.
    pub inconclusive: bool,
    /// |reg_empirical - reg_taylor| / reg_taylor when conclusive.
    pub relative_gap: Option<f64>,
}

/// CSV header for [`risk_rows_csv`].
pub const RISK_CSV_HEADER: &str =
    "gamma,family,mode,r_det,r_noisy,stderr,reg_empirical,reg_taylor";

pub fn risk_rows_csv(rows: &[RiskRow]) -> String {
    let mut out = String::from(RISK_CSV_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.gamma,
            r.family.name(),
            r.mode.name(),
            r.report.r_det,
            r.report.r_noisy,
            r.report.r_noisy_stderr,
            r.report.reg_empirical,
            r.report.reg_taylor
        ));
    }
    out
}

/// Monte Carlo estimate of the noisy risk of one sequence: mean and
/// standard error of the summed loss over independent single-rollout
/// passes, plus per-step means.
pub fn empirical_risk(
    model: &NoisinModel,
    window: WindowView<'_>,
    n_samples: usize,
    rng: &mut Pcg32,
) -> Result<(f64, f64, Vec<f64>)> {
    if n_samples < 1000 {
        return Err(Error::InvalidParameter(format!(
            "empirical risk needs n_samples >= 1e3, got {n_samples}"
        )));
    }
    let init = model.initial_states(window.batch);
    let steps = window.steps();
    let mut mean = 0.0f64;
    let mut m2 = 0.0f64;
    let mut step_means = vec![0.0f64; steps];
    for i in 0..n_samples {
        let mut roll = rng.split();
        let (_, _, obj) = model.noisy_forward_k(window, &init, 1, &mut roll, None)?;
        let x = obj.total_nll;
        let count = (i + 1) as f64;
        let d = x - mean;
        mean += d / count;
        m2 += d * (x - mean);
        for (s, v) in step_means.iter_mut().zip(&obj.per_step) {
            *s += (v - *s) / count;
        }
    }
    let var = m2 / (n_samples - 1) as f64;
    let stderr = (var / n_samples as f64).sqrt();
    Ok((mean, stderr, step_means))
}

/// Second-order penalty estimate with the nested scheme: the outer loop
/// samples noisy trajectories, the inner loop resamples the step's noise to
/// estimate the conditional covariance trace of `B' z_t` given the
/// trajectory so far, with `B = V sqrt(hessian A)` evaluated at the
/// deterministic one-step output.
pub fn taylor_reg(
    model: &NoisinModel,
    window: WindowView<'_>,
    n_outer: usize,
    n_inner: usize,
    rng: &mut Pcg32,
) -> Result<(f64, f64, Vec<f64>)> {
    if n_inner < 64 {
        return Err(Error::InvalidParameter(format!(
            "inner resampling size must be >= 64, got {n_inner}"
        )));
    }
    if n_outer == 0 {
        return Err(Error::InvalidParameter("need at least one outer trajectory".into()));
    }
    if window.batch != 1 {
        return Err(Error::InvalidParameter("risk diagnostics run on a single sequence".into()));
    }
    let steps = window.steps();
    let out_dim = model.head.output_dim();

    let mut mean = 0.0f64;
    let mut m2 = 0.0f64;
    let mut step_means = vec![0.0f64; steps];
    for k in 0..n_outer {
        let mut traj_rng = rng.split();
        let mut states = model.initial_states(1);
        let mut reg_k = 0.0f64;
        let count = (k + 1) as f64;
        for t in 0..steps {
            let toks = window.step_inputs(t);
            // Conditional mean of the step under strong unbiasedness.
            let (h_det, _) = model.deterministic_step(toks, &states)?;
            let s = model.head.natural_param(&h_det)?;
            let hess = model.head.hessian_log_normalizer(&s)?;
            let root = psd_sqrt(&hess)?;
            let b = tensor::matmul(&model.head.v, &root)?;

            // Inner resampling of the step's noise, trajectory held fixed.
            // Welford per coordinate: exactly zero spread for identical
            // draws, so the off-mode penalty is exactly zero.
            let mut y_mean = vec![0.0f64; out_dim];
            let mut y_m2 = vec![0.0f64; out_dim];
            for i in 0..n_inner {
                let (z, _) = model.noisy_step(toks, &states, &mut traj_rng)?;
                let y = tensor::matmul(&z, &b)?;
                let cnt = (i + 1) as f64;
                for (j, &v) in y.data().iter().enumerate() {
                    let d = v - y_mean[j];
                    y_mean[j] += d / cnt;
                    y_m2[j] += d * (v - y_mean[j]);
                }
            }
            let tr: f64 = y_m2.iter().sum::<f64>() / (n_inner - 1) as f64;
            let contrib = 0.5 * tr;
            reg_k += contrib;
            step_means[t] += (contrib - step_means[t]) / count;

            // Advance the trajectory with one fresh draw.
            let (_, next) = model.noisy_step(toks, &states, &mut traj_rng)?;
            states = next;
        }
        let d = reg_k - mean;
        mean += d / count;
        m2 += d * (reg_k - mean);
    }
    let var = if n_outer > 1 { m2 / (n_outer - 1) as f64 } else { 0.0 };
    let stderr = (var / n_outer as f64).sqrt();
    Ok((mean, stderr, step_means))
}

/// Full decomposition report for one spread value.
pub fn risk_report(
    model: &NoisinModel,
    window: WindowView<'_>,
    n_samples: usize,
    n_inner: usize,
    rng: &mut Pcg32,
) -> Result<RiskReport> {
    let init = model.initial_states(window.batch);
    let (_, _, det_obj) = model.deterministic_forward(window, &init)?;
    let r_det = det_obj.total_nll;

    let (r_noisy, r_noisy_stderr, noisy_steps) =
        empirical_risk(model, window, n_samples, rng)?;
    let n_outer = (n_samples / 4).max(200);
    let (reg_taylor, reg_taylor_stderr, taylor_steps) =
        taylor_reg(model, window, n_outer, n_inner, rng)?;

    let per_step = det_obj
        .per_step
        .iter()
        .zip(noisy_steps.iter())
        .zip(taylor_steps.iter())
        .map(|((d, n), t)| StepRisk { r_det: *d, r_noisy: *n, reg_taylor: *t })
        .collect();

    Ok(RiskReport {
        r_noisy,
        r_noisy_stderr,
        r_det,
        reg_empirical: r_noisy - r_det,
        reg_empirical_stderr: r_noisy_stderr,
        reg_taylor,
        reg_taylor_stderr,
        per_step,
        weak_caveat: model.injection == crate::model::LayerInjection::EveryLayer
            && model.num_layers() > 1,
    })
}

/// Runs [`risk_report`] across a spread grid. A zero spread is the
/// injection-off configuration: both penalty terms are exactly zero.
pub fn decomposition_check(
    model: &NoisinModel,
    window: WindowView<'_>,
    gammas: &[f64],
    n_samples: usize,
    n_inner: usize,
    rng: &mut Pcg32,
) -> Result<Vec<RiskRow>> {
    let mut rows = Vec::with_capacity(gammas.len());
    for &gamma in gammas {
        let mut m = model.clone();
        if gamma == 0.0 {
            m.noise = NoiseSpec::off();
        } else {
            m.noise = NoiseSpec::new(model.noise.family, gamma, model.noise.shape_alpha, model.noise.mode)?;
        }
        let report = risk_report(&m, window, n_samples, n_inner, rng)?;
        let floor = 3.0 * report.reg_empirical_stderr.max(report.reg_taylor_stderr);
        let inconclusive = report.reg_taylor <= floor && gamma != 0.0;
        let relative_gap = if inconclusive || report.reg_taylor == 0.0 {
            None
        } else {
            Some((report.reg_empirical - report.reg_taylor).abs() / report.reg_taylor)
        };
        rows.push(RiskRow {
            gamma,
            family: m.noise.family,
            mode: m.noise.mode,
            report,
            inconclusive,
            relative_gap,
        });
    }
    Ok(rows)
}

/// Symmetric PSD square root by cyclic Jacobi eigendecomposition.
/// Eigenvalues in [-tol, 0) clamp to zero (the categorical Hessian is
/// rank-deficient by shift invariance); anything further negative is a
/// numerical bug upstream and errors. The result is verified:
/// `|| S S - M ||_F <= 1e-10 * max(1, ||M||_F)`.
pub fn psd_sqrt(m: &Tensor) -> Result<Tensor> {
    let (n, nc) = m.dims2()?;
    if n != nc {
        return Err(Error::ShapeMismatch(format!("psd_sqrt needs square input, got {:?}", m.shape())));
    }
    let (eigvals, eigvecs) = sym_eigen(m)?;
    let max_abs = eigvals.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let tol = 1e-12 * max_abs.max(1.0);
    let mut roots = Vec::with_capacity(n);
    for &w in &eigvals {
        if w < -tol {
            return Err(Error::Domain(format!(
                "matrix is not positive semidefinite: eigenvalue {w}"
            )));
        }
        roots.push(w.max(0.0).sqrt());
    }
    // S = U diag(sqrt(w)) U^T
    let mut scaled = eigvecs.clone();
    for i in 0..n {
        for j in 0..n {
            let v = scaled.get2(i, j) * roots[j];
            scaled.set2(i, j, v);
        }
    }
    let s = tensor::matmul_nt(&scaled, &eigvecs)?;
    // Symmetrize against rounding drift.
    let mut sym = s.clone();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (s.get2(i, j) + s.get2(j, i));
            sym.set2(i, j, v);
            sym.set2(j, i, v);
        }
    }
    let ss = tensor::matmul(&sym, &sym)?;
    let mut err = 0.0f64;
    let mut norm = 0.0f64;
    for (a, b) in ss.data().iter().zip(m.data()) {
        err += (a - b) * (a - b);
        norm += b * b;
    }
    if err.sqrt() > 1e-10 * norm.sqrt().max(1.0) {
        return Err(Error::NonFinite(format!(
            "square-root verification failed: residual {}",
            err.sqrt()
        )));
    }
    Ok(sym)
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix:
/// returns (eigenvalues, eigenvector matrix with eigenvectors as columns).
pub fn sym_eigen(m: &Tensor) -> Result<(Vec<f64>, Tensor)> {
    let (n, nc) = m.dims2()?;
    if n != nc {
        return Err(Error::ShapeMismatch("sym_eigen needs a square matrix".into()));
    }
    let mut a: Vec<f64> = m.data().to_vec();
    let mut v = Tensor::eye(n);
    if n == 1 {
        return Ok((vec![a[0]], v));
    }
    let idx = |i: usize, j: usize| i * n + j;
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);

    for _sweep in 0..64 {
        let mut off = 0.0f64;
        for p in 0..n {
            for q in (p + 1)..n {
                off += a[idx(p, q)] * a[idx(p, q)];
            }
        }
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n - 1 {
            for q in (p + 1)..n {
                let apq = a[idx(p, q)];
                if apq.abs() <= 1e-300 {
                    continue;
                }
                let app = a[idx(p, p)];
                let aqq = a[idx(q, q)];
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;

                for k in 0..n {
                    let akp = a[idx(k, p)];
                    let akq = a[idx(k, q)];
                    a[idx(k, p)] = c * akp - s * akq;
                    a[idx(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[idx(p, k)];
                    let aqk = a[idx(q, k)];
                    a[idx(p, k)] = c * apk - s * aqk;
                    a[idx(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v.get2(k, p);
                    let vkq = v.get2(k, q);
                    v.set2(k, p, c * vkp - s * vkq);
                    v.set2(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let eig = (0..n).map(|i| a[idx(i, i)]).collect();
    Ok((eig, v))
}
