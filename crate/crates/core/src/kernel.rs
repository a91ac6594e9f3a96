//! Diagonal Gaussian embeddings and the probability product kernel.
//!
//! For two diagonal Gaussians `a`, `b` with variances `va`, `vb` the kernel is
//!
//! ```text
//! K(a, b) = prod_d [ (va/vb + vb/va) / 2 ]^(-1/2) * exp( -sum_d (mu_a - mu_b)^2 / (4 (va + vb)) )
//! ```
//!
//! With `s = ln va - ln vb` the prefactor term is `cosh(s)`, so everything is
//! evaluated per dimension in log space and exponentiated once.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lower clamp applied to `exp(log_var)` at read time.
pub const VAR_MIN: f64 = 1e-6;
/// Upper clamp applied to `exp(log_var)` at read time.
pub const VAR_MAX: f64 = 1e6;

pub fn log_var_min() -> f64 {
    VAR_MIN.ln()
}

pub fn log_var_max() -> f64 {
    VAR_MAX.ln()
}

/// An N-dimensional Gaussian with diagonal covariance, stored as mean and log-variance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianEmbedding {
    pub mu: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl GaussianEmbedding {
    pub fn new(mu: Vec<f64>, log_var: Vec<f64>) -> Result<Self> {
        let e = Self { mu, log_var };
        e.validate()?;
        Ok(e)
    }

    /// Builds an embedding from means and (linear) variances.
    pub fn from_var(mu: Vec<f64>, var: &[f64]) -> Result<Self> {
        if var.iter().any(|v| !(*v > 0.0)) {
            return Err(Error::InvalidArgument("variances must be positive".into()));
        }
        Self::new(mu, var.iter().map(|v| v.ln()).collect())
    }

    pub fn isotropic(mu: Vec<f64>, var: f64) -> Result<Self> {
        let n = mu.len();
        Self::from_var(mu, &vec![var; n])
    }

    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.mu.is_empty() {
            return Err(Error::Empty("embedding dimension"));
        }
        if self.mu.len() != self.log_var.len() {
            return Err(Error::DimensionMismatch {
                expected: self.mu.len(),
                got: self.log_var.len(),
            });
        }
        if self.mu.iter().chain(&self.log_var).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("embedding"));
        }
        Ok(())
    }

    /// Clamped log-variance of dimension `d`.
    #[inline]
    pub fn clamped_log_var(&self, d: usize) -> f64 {
        self.log_var[d].clamp(log_var_min(), log_var_max())
    }

    /// Clamped variance of dimension `d`.
    #[inline]
    pub fn var(&self, d: usize) -> f64 {
        self.clamped_log_var(d).exp()
    }

    #[inline]
    fn log_var_active(&self, d: usize) -> bool {
        let l = self.log_var[d];
        l >= log_var_min() && l <= log_var_max()
    }

    /// Product of the per-dimension variances.
    pub fn variance_product(&self) -> f64 {
        (0..self.dim()).map(|d| self.clamped_log_var(d)).sum::<f64>().exp()
    }
}

/// Gradient of a scalar with respect to one embedding's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingGrad {
    pub d_mu: Vec<f64>,
    pub d_log_var: Vec<f64>,
}

impl EmbeddingGrad {
    pub fn zeros(n: usize) -> Self {
        Self {
            d_mu: vec![0.0; n],
            d_log_var: vec![0.0; n],
        }
    }

    pub fn add_scaled(&mut self, other: &EmbeddingGrad, scale: f64) {
        for (x, y) in self.d_mu.iter_mut().zip(&other.d_mu) {
            *x += scale * y;
        }
        for (x, y) in self.d_log_var.iter_mut().zip(&other.d_log_var) {
            *x += scale * y;
        }
    }
}

/// Partial derivatives of a kernel value with respect to both arguments.
#[derive(Clone, Debug, PartialEq)]
pub struct KernelGradient {
    pub d_mu_a: Vec<f64>,
    pub d_logvar_a: Vec<f64>,
    pub d_mu_b: Vec<f64>,
    pub d_logvar_b: Vec<f64>,
}

impl KernelGradient {
    fn zeros(n: usize) -> Self {
        Self {
            d_mu_a: vec![0.0; n],
            d_logvar_a: vec![0.0; n],
            d_mu_b: vec![0.0; n],
            d_logvar_b: vec![0.0; n],
        }
    }

    fn scale(&mut self, k: f64) {
        for v in [
            &mut self.d_mu_a,
            &mut self.d_logvar_a,
            &mut self.d_mu_b,
            &mut self.d_logvar_b,
        ] {
            v.iter_mut().for_each(|x| *x *= k);
        }
    }

    pub fn a(&self) -> EmbeddingGrad {
        EmbeddingGrad {
            d_mu: self.d_mu_a.clone(),
            d_log_var: self.d_logvar_a.clone(),
        }
    }

    pub fn b(&self) -> EmbeddingGrad {
        EmbeddingGrad {
            d_mu: self.d_mu_b.clone(),
            d_log_var: self.d_logvar_b.clone(),
        }
    }
}

fn check_pair(a: &GaussianEmbedding, b: &GaussianEmbedding) -> Result<()> {
    a.validate()?;
    b.validate()?;
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    Ok(())
}

/// `ln cosh(s)` without overflow; symmetric in the sign of `s`.
#[inline]
fn ln_cosh(s: f64) -> f64 {
    let s = s.abs();
    if s == 0.0 {
        return 0.0;
    }
    s + (-2.0 * s).exp().ln_1p() - std::f64::consts::LN_2
}

/// Per-dimension log-kernel contribution.
#[inline]
fn log_term(a: &GaussianEmbedding, b: &GaussianEmbedding, d: usize) -> f64 {
    let la = a.clamped_log_var(d);
    let lb = b.clamped_log_var(d);
    let diff = a.mu[d] - b.mu[d];
    -0.5 * ln_cosh(la - lb) - diff * diff / (4.0 * (la.exp() + lb.exp()))
}

/// Log-kernel with no validation. Callers guarantee matching dimensions.
#[inline]
pub fn log_pp_kernel_unchecked(a: &GaussianEmbedding, b: &GaussianEmbedding) -> f64 {
    (0..a.dim()).map(|d| log_term(a, b, d)).sum()
}

/// Log-kernel and its gradient with no validation.
pub fn log_pp_kernel_grad_unchecked(
    a: &GaussianEmbedding,
    b: &GaussianEmbedding,
) -> (f64, KernelGradient) {
    let n = a.dim();
    let mut g = KernelGradient::zeros(n);
    let mut total = 0.0;
    for d in 0..n {
        let la = a.clamped_log_var(d);
        let lb = b.clamped_log_var(d);
        let (va, vb) = (la.exp(), lb.exp());
        let s = la - lb;
        let sum = va + vb;
        let diff = a.mu[d] - b.mu[d];
        total += -0.5 * ln_cosh(s) - diff * diff / (4.0 * sum);

        g.d_mu_a[d] = -diff / (2.0 * sum);
        g.d_mu_b[d] = diff / (2.0 * sum);

        let t = 0.5 * s.tanh();
        let spread = diff * diff / (4.0 * sum * sum);
        if a.log_var_active(d) {
            g.d_logvar_a[d] = -t + spread * va;
        }
        if b.log_var_active(d) {
            g.d_logvar_b[d] = t + spread * vb;
        }
    }
    (total, g)
}

/// Flat copy of many embeddings with clamped log-variances and variances
/// precomputed, for the all-pairs loops in the losses.
pub(crate) struct Packed {
    n: usize,
    mu: Vec<f64>,
    lv: Vec<f64>,
    var: Vec<f64>,
    active: Vec<bool>,
}

impl Packed {
    pub(crate) fn new(embs: &[&GaussianEmbedding]) -> Self {
        let n = embs.first().map_or(0, |e| e.dim());
        let mut p = Packed {
            n,
            mu: Vec::with_capacity(embs.len() * n),
            lv: Vec::with_capacity(embs.len() * n),
            var: Vec::with_capacity(embs.len() * n),
            active: Vec::with_capacity(embs.len() * n),
        };
        for e in embs {
            for d in 0..n {
                let l = e.clamped_log_var(d);
                p.mu.push(e.mu[d]);
                p.lv.push(l);
                p.var.push(l.exp());
                p.active.push(e.log_var_active(d));
            }
        }
        p
    }

    pub(crate) fn dim(&self) -> usize {
        self.n
    }

    pub(crate) fn log_k(&self, i: usize, j: usize) -> f64 {
        let (a, b) = (i * self.n, j * self.n);
        let mut total = 0.0;
        for d in 0..self.n {
            let diff = self.mu[a + d] - self.mu[b + d];
            total += -0.5 * ln_cosh(self.lv[a + d] - self.lv[b + d])
                - diff * diff / (4.0 * (self.var[a + d] + self.var[b + d]));
        }
        total
    }

    /// `log K(i, j)`, also writing `tanh(ln v_i - ln v_j)` per dimension into `tanh_out`.
    pub(crate) fn log_k_tanh(&self, i: usize, j: usize, tanh_out: &mut [f64]) -> f64 {
        let (a, b) = (i * self.n, j * self.n);
        let mut total = 0.0;
        for d in 0..self.n {
            let diff = self.mu[a + d] - self.mu[b + d];
            let s = self.lv[a + d] - self.lv[b + d];
            let e = (-2.0 * s.abs()).exp();
            let ln_cosh = if s == 0.0 {
                0.0
            } else {
                s.abs() + e.ln_1p() - std::f64::consts::LN_2
            };
            tanh_out[d] = ((1.0 - e) / (1.0 + e)).copysign(s);
            total += -0.5 * ln_cosh - diff * diff / (4.0 * (self.var[a + d] + self.var[b + d]));
        }
        total
    }

    /// Adds `scale * d(log K(i, j)) / d(params of i)` into the two slices,
    /// given `tanh(ln v_i - ln v_j)` per dimension.
    pub(crate) fn add_grad_a(
        &self,
        i: usize,
        j: usize,
        tanh: &[f64],
        scale: f64,
        d_mu: &mut [f64],
        d_log_var: &mut [f64],
    ) {
        let (a, b) = (i * self.n, j * self.n);
        for d in 0..self.n {
            let va = self.var[a + d];
            let inv = 1.0 / (va + self.var[b + d]);
            let diff = self.mu[a + d] - self.mu[b + d];
            d_mu[d] -= scale * 0.5 * diff * inv;
            if self.active[a + d] {
                d_log_var[d] += scale * (0.25 * diff * diff * va * inv * inv - 0.5 * tanh[d]);
            }
        }
    }
}

/// Probability product kernel between two diagonal Gaussians. The value lies in (0, 1].
pub fn pp_kernel(a: &GaussianEmbedding, b: &GaussianEmbedding) -> Result<f64> {
    Ok(log_pp_kernel(a, b)?.exp())
}

/// Natural log of [`pp_kernel`], summed per dimension.
pub fn log_pp_kernel(a: &GaussianEmbedding, b: &GaussianEmbedding) -> Result<f64> {
    check_pair(a, b)?;
    Ok(log_pp_kernel_unchecked(a, b))
}

/// Kernel value plus its derivatives with respect to `mu` and `log_var` of both arguments.
pub fn pp_kernel_grad(a: &GaussianEmbedding, b: &GaussianEmbedding) -> Result<(f64, KernelGradient)> {
    check_pair(a, b)?;
    let (log_k, mut g) = log_pp_kernel_grad_unchecked(a, b);
    let k = log_k.exp();
    g.scale(k);
    Ok((k, g))
}

/// Same as [`pp_kernel_grad`] but for `ln K`.
pub fn log_pp_kernel_grad(
    a: &GaussianEmbedding,
    b: &GaussianEmbedding,
) -> Result<(f64, KernelGradient)> {
    check_pair(a, b)?;
    Ok(log_pp_kernel_grad_unchecked(a, b))
}

/// Gaussian RBF kernel `exp(-|x - y|^2 / (8 sigma2))`: the probability product
/// kernel of two Gaussians sharing the isotropic variance `sigma2`.
pub fn rbf_kernel(x: &[f64], y: &[f64], sigma2: f64) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            expected: x.len(),
            got: y.len(),
        });
    }
    if !(sigma2 > 0.0) || !sigma2.is_finite() {
        return Err(Error::InvalidArgument(format!("sigma2 must be positive, got {sigma2}")));
    }
    let sq: f64 = x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((-sq / (8.0 * sigma2)).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn g1(mu: f64, var: f64) -> GaussianEmbedding {
        GaussianEmbedding::from_var(vec![mu], &[var]).unwrap()
    }

    #[test]
    fn identical_embeddings_give_one() {
        let a = GaussianEmbedding::new(vec![0.3, -1.2, 4.0], vec![0.1, -2.0, 1.5]).unwrap();
        assert_eq!(pp_kernel(&a, &a).unwrap(), 1.0);
        assert_eq!(log_pp_kernel(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn hand_values() {
        let k = pp_kernel(&g1(0.0, 1.0), &g1(2.0, 1.0)).unwrap();
        assert!((k - (-0.5f64).exp()).abs() < 1e-15);
        assert!((k - 0.606531).abs() < 1e-6);

        let k = pp_kernel(&g1(0.0, 1.0), &g1(0.0, 4.0)).unwrap();
        assert!((k - ((0.25 + 4.0) / 2.0f64).powf(-0.5)).abs() < 1e-15);
        assert!((k - 0.685994).abs() < 1e-6);
    }

    #[test]
    fn log_hand_values() {
        let l = log_pp_kernel(&g1(0.0, 1.0), &g1(2.0, 1.0)).unwrap();
        assert!((l + 0.5).abs() < 1e-15);

        let a = GaussianEmbedding::from_var(vec![0.0, 0.0], &[1.0, 1.0]).unwrap();
        let b = GaussianEmbedding::from_var(vec![2.0, 0.0], &[1.0, 4.0]).unwrap();
        let expected = -0.5 + ((0.25 + 4.0) / 2.0f64).powf(-0.5).ln();
        assert!((log_pp_kernel(&a, &b).unwrap() - expected).abs() < 1e-14);
    }

    #[test]
    fn gradient_at_equal_embeddings() {
        let a = GaussianEmbedding::new(vec![1.0, 2.0], vec![0.5, -0.5]).unwrap();
        let (k, g) = pp_kernel_grad(&a, &a).unwrap();
        assert_eq!(k, 1.0);
        for d in 0..2 {
            assert_eq!(g.d_mu_a[d], 0.0);
            assert_eq!(g.d_mu_a[d], -g.d_mu_b[d]);
        }
    }

    #[test]
    fn gradient_hand_value() {
        // dK/dmu_a = K * (mu_b - mu_a) / (2 (va + vb)) = e^-0.5 * 2 / 4
        let (_, g) = pp_kernel_grad(&g1(0.0, 1.0), &g1(2.0, 1.0)).unwrap();
        assert!((g.d_mu_a[0] - 0.5 * (-0.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn rbf_hand_value() {
        let k = rbf_kernel(&[1.0, 1.0], &[0.0, 0.0], 2.0).unwrap();
        assert!((k - (-2.0f64 / 16.0).exp()).abs() < 1e-15);
        assert!((k - 0.882497).abs() < 1e-6);
        assert_eq!(rbf_kernel(&[3.0], &[3.0], 0.5).unwrap(), 1.0);
    }

    #[test]
    fn errors() {
        let a = g1(0.0, 1.0);
        let b = GaussianEmbedding {
            mu: vec![0.0, 1.0],
            log_var: vec![0.0, 0.0],
        };
        assert!(matches!(pp_kernel(&a, &b), Err(Error::DimensionMismatch { .. })));
        let bad = GaussianEmbedding {
            mu: vec![f64::NAN],
            log_var: vec![0.0],
        };
        assert!(matches!(pp_kernel(&a, &bad), Err(Error::NonFinite(_))));
        assert!(rbf_kernel(&[0.0], &[0.0, 1.0], 1.0).is_err());
        assert!(rbf_kernel(&[0.0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn extreme_variance_ratio_stays_positive() {
        let a = GaussianEmbedding::new(vec![0.0; 3], vec![log_var_min(); 3]).unwrap();
        let b = GaussianEmbedding::new(vec![0.0; 3], vec![log_var_max(); 3]).unwrap();
        let l = log_pp_kernel(&a, &b).unwrap();
        assert!(l.is_finite() && l < 0.0);
    }

    #[test]
    fn clamp_applies_on_read() {
        let e = GaussianEmbedding::new(vec![0.0], vec![-40.0]).unwrap();
        assert_eq!(e.var(0), VAR_MIN.ln().exp());
    }
}
