//! Exponential-family likelihood heads.
//!
//! A head maps a hidden state to the natural parameter `s = h V + b` and
//! scores observations with the per-step loss `A(s) - s.x`, where `A` is the
//! family's log-normalizer. The constant base-measure term is dropped from
//! all optimized losses; `exact_nll` restores it for bound checks.
//!
//! Log-normalizers, their gradients and Hessians:
//!
//! | family      | A(s)                  | grad A       | Hessian           |
//! |-------------|-----------------------|--------------|-------------------|
//! | Bernoulli   | sum softplus(s_j)     | sigmoid(s)   | diag sig(1-sig)   |
//! | Gaussian    | s.s / (2 sigma^2)     | s / sigma^2  | I / sigma^2       |
//! | Poisson     | sum exp(s_j)          | exp(s)       | diag exp(s)       |
//! | Categorical | logsumexp(s)          | softmax(s)   | diag(p) - p p^T   |

use crate::tape::{NodeId, Tape};
use crate::tensor::{self, Tensor};
use crate::{Error, Result};

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum Family {
    Bernoulli,
    Gaussian,
    Poisson,
    Categorical,
}

impl Family {
    pub const ALL: [Family; 4] =
        [Family::Bernoulli, Family::Gaussian, Family::Poisson, Family::Categorical];

    pub fn name(&self) -> &'static str {
        match self {
            Family::Bernoulli => "bernoulli",
            Family::Gaussian => "gaussian",
            Family::Poisson => "poisson",
            Family::Categorical => "categorical",
        }
    }
}

impl std::str::FromStr for Family {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "bernoulli" => Ok(Family::Bernoulli),
            "gaussian" | "normal" => Ok(Family::Gaussian),
            "poisson" => Ok(Family::Poisson),
            "categorical" | "softmax" => Ok(Family::Categorical),
            other => Err(Error::Config(format!("unknown likelihood family '{other}'"))),
        }
    }
}

/// Prediction matrix, output bias and family tag of the output layer.
#[derive(Clone, Debug)]
pub struct LikelihoodHead {
    pub family: Family,
    /// hidden x output prediction matrix.
    pub v: Tensor,
    /// 1 x output bias row (the intercept the transition equations omit).
    pub bias: Tensor,
    /// Observation variance parameter; Gaussian only.
    pub sigma2: f64,
}

impl LikelihoodHead {
    pub fn new(family: Family, v: Tensor, bias: Tensor, sigma2: f64) -> Result<Self> {
        let (_, out) = v.dims2()?;
        let (bm, bn) = bias.dims2()?;
        if bm != 1 || bn != out {
            return Err(Error::ShapeMismatch(format!(
                "head bias {:?} does not match output dim {out}",
                bias.shape()
            )));
        }
        if family == Family::Gaussian && !(sigma2 > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "gaussian head needs sigma2 > 0, got {sigma2}"
            )));
        }
        Ok(LikelihoodHead { family, v, bias, sigma2 })
    }

    pub fn hidden_dim(&self) -> usize {
        self.v.dims2().map(|(h, _)| h).unwrap_or(0)
    }

    pub fn output_dim(&self) -> usize {
        self.v.dims2().map(|(_, o)| o).unwrap_or(0)
    }

    /// Natural parameter s = h V + b for a batch of hidden rows.
    pub fn natural_param(&self, h: &Tensor) -> Result<Tensor> {
        let s = tensor::matmul(h, &self.v)?;
        tensor::add_row_broadcast(&s, &self.bias)
    }

    /// Log-normalizer of a single natural-parameter vector, summed over
    /// components for the product families.
    pub fn log_normalizer(&self, s: &Tensor) -> Result<f64> {
        let (rows, _) = s.dims2()?;
        if rows != 1 {
            return Err(Error::ShapeMismatch(format!(
                "log_normalizer expects one natural-parameter vector, got {:?}",
                s.shape()
            )));
        }
        s.assert_finite("natural parameter")?;
        let a = match self.family {
            Family::Bernoulli => tensor::softplus(s).sum(),
            Family::Gaussian => s.sq_norm() / (2.0 * self.sigma2),
            Family::Poisson => tensor::exp(s).sum(),
            Family::Categorical => tensor::logsumexp(s)?,
        };
        if !a.is_finite() {
            return Err(Error::NonFinite("log-normalizer overflow".into()));
        }
        Ok(a)
    }

    /// Gradient of the log-normalizer: the family's mean parameter.
    pub fn grad_log_normalizer(&self, s: &Tensor) -> Result<Tensor> {
        s.assert_finite("natural parameter")?;
        Ok(match self.family {
            Family::Bernoulli => tensor::sigmoid(s),
            Family::Gaussian => tensor::scale(s, 1.0 / self.sigma2),
            Family::Poisson => tensor::exp(s),
            Family::Categorical => tensor::softmax_rows(s)?,
        })
    }

    /// Hessian of the log-normalizer at a single vector s, as a full
    /// output x output matrix (diagonal families fill the diagonal).
    pub fn hessian_log_normalizer(&self, s: &Tensor) -> Result<Tensor> {
        let (rows, n) = s.dims2()?;
        if rows != 1 {
            return Err(Error::ShapeMismatch(format!(
                "hessian expects one natural-parameter vector, got {:?}",
                s.shape()
            )));
        }
        let mut hess = Tensor::zeros(&[n, n]);
        match self.family {
            Family::Bernoulli => {
                for j in 0..n {
                    let p = tensor::sigmoid_scalar(s.data()[j]);
                    hess.set2(j, j, p * (1.0 - p));
                }
            }
            Family::Gaussian => {
                for j in 0..n {
                    hess.set2(j, j, 1.0 / self.sigma2);
                }
            }
            Family::Poisson => {
                for j in 0..n {
                    hess.set2(j, j, s.data()[j].exp());
                }
            }
            Family::Categorical => {
                // diag(p) - p p^T with p = softmax(s); equal to the
                // normalized diag(eta)/1'eta - eta eta^T/(1'eta)^2 form.
                let p = tensor::softmax_rows(s)?;
                for i in 0..n {
                    for j in 0..n {
                        let v = if i == j {
                            p.data()[i] * (1.0 - p.data()[i])
                        } else {
                            -p.data()[i] * p.data()[j]
                        };
                        hess.set2(i, j, v);
                    }
                }
            }
        }
        Ok(hess)
    }

    /// Per-step loss A(s) - s.x for one hidden row and one dense
    /// observation, base measure dropped. Validates the family support.
    pub fn nll(&self, h: &Tensor, x: &Tensor) -> Result<f64> {
        let s = self.natural_param(h)?;
        self.nll_from_natural(&s, x)
    }

    pub fn nll_from_natural(&self, s: &Tensor, x: &Tensor) -> Result<f64> {
        let (_, n) = s.dims2()?;
        let (xr, xn) = x.dims2()?;
        if xr != 1 || xn != n {
            return Err(Error::ShapeMismatch(format!(
                "observation {:?} vs natural parameter {:?}",
                x.shape(),
                s.shape()
            )));
        }
        self.validate_support(x)?;
        let a = self.log_normalizer(s)?;
        let dot: f64 = s.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        Ok(a - dot)
    }

    /// Negative log-likelihood including the base measure, for exact bound
    /// checks. `exact_nll = nll - log nu(x)`.
    pub fn exact_nll(&self, h: &Tensor, x: &Tensor) -> Result<f64> {
        Ok(self.nll(h, x)? - self.log_base_measure(x)?)
    }

    /// log nu(x) for the family as parameterized here: zero for Bernoulli
    /// and categorical, -sum log(x_j!) for Poisson, and the Gaussian
    /// completing constant.
    pub fn log_base_measure(&self, x: &Tensor) -> Result<f64> {
        self.validate_support(x)?;
        Ok(match self.family {
            Family::Bernoulli | Family::Categorical => 0.0,
            Family::Poisson => -x.data().iter().map(|&v| ln_factorial(v as u64)).sum::<f64>(),
            Family::Gaussian => {
                let n = x.numel() as f64;
                0.5 * n * (self.sigma2 / (2.0 * std::f64::consts::PI)).ln()
                    - 0.5 * self.sigma2 * x.sq_norm()
            }
        })
    }

    pub fn validate_support(&self, x: &Tensor) -> Result<()> {
        let ok = match self.family {
            Family::Bernoulli => x.data().iter().all(|&v| v == 0.0 || v == 1.0),
            Family::Gaussian => x.all_finite(),
            Family::Poisson => x.data().iter().all(|&v| v >= 0.0 && v.fract() == 0.0),
            Family::Categorical => {
                x.data().iter().all(|&v| v == 0.0 || v == 1.0)
                    && x.data().iter().filter(|&&v| v == 1.0).count() == 1
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Domain(format!(
                "observation outside {} support",
                self.family.name()
            )))
        }
    }
}

/// Batch loss summed over rows for one-hot targets given as class indices:
/// `sum_i [A(s_i) - s_i[target_i]]`.
///
/// This is the canonical training loss. [`nll_sum_traced`] applies the same
/// kernels in the same order on the tape; the two are bit-identical.
pub fn nll_sum(family: Family, sigma2: f64, s: &Tensor, targets: &[usize]) -> Result<f64> {
    let per_family = match family {
        Family::Bernoulli => tensor::softplus(s).sum(),
        Family::Gaussian => {
            let sq = tensor::mul(s, s)?;
            sq.sum() * (0.5 / sigma2)
        }
        Family::Poisson => tensor::exp(s).sum(),
        Family::Categorical => tensor::logsumexp_rows(s)?.sum(),
    };
    let picked = tensor::gather_cols(s, targets)?.sum();
    Ok(per_family - picked)
}

/// Tape version of [`nll_sum`]; gradients flow into `s`.
pub fn nll_sum_traced(
    tape: &mut Tape,
    family: Family,
    sigma2: f64,
    s: NodeId,
    targets: &[usize],
) -> Result<NodeId> {
    let per_family = match family {
        Family::Bernoulli => {
            let sp = tape.softplus(s);
            tape.sum_all(sp)
        }
        Family::Gaussian => {
            let sq = tape.mul(s, s)?;
            let total = tape.sum_all(sq);
            tape.scale(total, 0.5 / sigma2)
        }
        Family::Poisson => {
            let e = tape.exp(s);
            tape.sum_all(e)
        }
        Family::Categorical => {
            let lse = tape.logsumexp_rows(s)?;
            tape.sum_all(lse)
        }
    };
    let picked = tape.gather_cols(s, targets)?;
    let picked_sum = tape.sum_all(picked);
    tape.sub(per_family, picked_sum)
}

/// ln(n!) by direct summation; observations are small counts.
fn ln_factorial(n: u64) -> f64 {
    (2..=n).map(|k| (k as f64).ln()).sum()
}
