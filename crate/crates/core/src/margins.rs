//! Marginal survival under semiparametric transformation models,
//! `S(t | z) = exp[-G{exp(zᵀβ) Λ(t)}]`, with a monotone Bernstein sieve for Λ.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformKind {
    /// `G(x) = x`
    Ph,
    /// `G(x) = log(1 + x)`
    Po,
    /// `G(x) = ((1 + x)^r - 1) / r`
    BoxCox,
    /// `G(x) = log(1 + r x) / r`
    Logarithmic,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub kind: TransformKind,
    /// Only meaningful for Box-Cox and logarithmic transforms.
    pub r: f64,
    /// Whether `r` is estimated.
    pub r_free: bool,
}

impl TransformSpec {
    pub const PH: TransformSpec = TransformSpec { kind: TransformKind::Ph, r: 1.0, r_free: false };
    pub const PO: TransformSpec = TransformSpec { kind: TransformKind::Po, r: 1.0, r_free: false };

    pub fn box_cox(r: f64) -> Self {
        Self { kind: TransformKind::BoxCox, r, r_free: false }
    }

    pub fn logarithmic(r: f64) -> Self {
        Self { kind: TransformKind::Logarithmic, r, r_free: false }
    }

    pub fn with_free_r(mut self) -> Self {
        self.r_free = self.has_r();
        self
    }

    pub fn has_r(&self) -> bool {
        matches!(self.kind, TransformKind::BoxCox | TransformKind::Logarithmic)
    }

    pub fn validate(&self) -> Result<()> {
        if self.has_r() && !(self.r > 0.0 && self.r.is_finite()) {
            return Err(Error::Domain(format!("transform parameter r = {} must be positive", self.r)));
        }
        Ok(())
    }

    /// `G(x)` without argument checks.
    #[inline]
    pub(crate) fn apply(&self, x: f64) -> f64 {
        match self.kind {
            TransformKind::Ph => x,
            TransformKind::Po => x.ln_1p(),
            TransformKind::BoxCox => (self.r * x.ln_1p()).exp_m1() / self.r,
            TransformKind::Logarithmic => (self.r * x).ln_1p() / self.r,
        }
    }

    /// `G⁻¹(y)` for `y >= 0`.
    pub fn inverse(&self, y: f64) -> f64 {
        match self.kind {
            TransformKind::Ph => y,
            TransformKind::Po => y.exp_m1(),
            TransformKind::BoxCox => ((self.r * y).ln_1p() / self.r).exp_m1(),
            TransformKind::Logarithmic => (self.r * y).exp_m1() / self.r,
        }
    }
}

/// Parses `PH`, `PO`, `boxcox:R`, `log:R`, `boxcox:free` or `log:free`
/// (a free `r` starts at 1).
impl std::str::FromStr for TransformSpec {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        let spec = match lower.split_once(':') {
            None if lower == "ph" => TransformSpec::PH,
            None if lower == "po" => TransformSpec::PO,
            Some((kind, r)) => {
                let make = match kind {
                    "boxcox" => TransformSpec::box_cox,
                    "log" => TransformSpec::logarithmic,
                    _ => return Err(Error::Config(format!("unknown transform '{s}'"))),
                };
                if r == "free" {
                    make(1.0).with_free_r()
                } else {
                    let r = r.parse::<f64>().map_err(|_| Error::Config(format!("transform '{s}': bad r")))?;
                    make(r)
                }
            }
            None => return Err(Error::Config(format!("unknown transform '{s}'"))),
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Transformation `G` evaluated at `x >= 0`.
pub fn transform_g(spec: &TransformSpec, x: f64) -> Result<f64> {
    spec.validate()?;
    if !(x >= 0.0) {
        return Err(Error::Domain(format!("G argument {x} must be nonnegative")));
    }
    Ok(spec.apply(x))
}

/// Bernstein basis polynomial `C(m,k) s^k (1-s)^{m-k}`, `s = (t - lo)/(hi - lo)`.
pub fn bernstein_basis(k: usize, m: usize, t: f64, t_lo: f64, t_hi: f64) -> Result<f64> {
    if k > m {
        return Err(Error::Domain(format!("basis index {k} exceeds degree {m}")));
    }
    if !(t_lo < t_hi) {
        return Err(Error::Domain(format!("empty sieve range [{t_lo}, {t_hi}]")));
    }
    if !(t >= t_lo && t <= t_hi) {
        return Err(Error::Range { t, lo: t_lo, hi: t_hi });
    }
    let s = (t - t_lo) / (t_hi - t_lo);
    Ok(binomial(m, k) * s.powi(k as i32) * (1.0 - s).powi((m - k) as i32))
}

fn binomial(m: usize, k: usize) -> f64 {
    let k = k.min(m - k);
    (0..k).fold(1.0, |acc, i| acc * (m - i) as f64 / (i + 1) as f64)
}

/// All `m + 1` basis values at normalized position `s ∈ [0, 1]`.
pub(crate) fn basis_vector(m: usize, s: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(m + 1);
    let q = 1.0 - s;
    for k in 0..=m {
        out.push(binomial(m, k) * s.powi(k as i32) * q.powi((m - k) as i32));
    }
    out
}

/// Monotone Bernstein sieve for a cumulative baseline hazard.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BernsteinSieve {
    pub degree: usize,
    pub t_lo: f64,
    pub t_hi: f64,
    /// Unconstrained coefficients ξ; `φ_k = Σ_{j<=k} exp(ξ_j)`.
    pub raw: Vec<f64>,
}

impl BernsteinSieve {
    pub fn new(degree: usize, t_lo: f64, t_hi: f64, raw: Vec<f64>) -> Result<Self> {
        if degree < 1 {
            return Err(Error::Domain("sieve degree must be at least 1".into()));
        }
        if raw.len() != degree + 1 {
            return Err(Error::Domain(format!(
                "sieve of degree {degree} needs {} coefficients, got {}",
                degree + 1,
                raw.len()
            )));
        }
        if !(t_lo < t_hi) || !t_hi.is_finite() {
            return Err(Error::Domain(format!("invalid sieve range [{t_lo}, {t_hi}]")));
        }
        Ok(Self { degree, t_lo, t_hi, raw })
    }

    /// Builds the sieve whose monotone coefficients are `phi`.
    pub fn from_coefficients(t_lo: f64, t_hi: f64, phi: &[f64]) -> Result<Self> {
        let mut raw = Vec::with_capacity(phi.len());
        let mut prev = 0.0;
        for &p in phi {
            let inc = p - prev;
            if !(inc > 0.0) {
                return Err(Error::Domain("sieve coefficients must be strictly increasing and positive".into()));
            }
            raw.push(inc.ln());
            prev = p;
        }
        Self::new(phi.len().saturating_sub(1), t_lo, t_hi, raw)
    }

    pub fn coefficients(&self) -> Vec<f64> {
        let mut acc = 0.0;
        self.raw
            .iter()
            .map(|x| {
                acc += x.exp();
                acc
            })
            .collect()
    }

    pub fn contains(&self, t: f64) -> bool {
        t >= self.t_lo && t <= self.t_hi
    }

    pub fn normalized(&self, t: f64) -> f64 {
        (t - self.t_lo) / (self.t_hi - self.t_lo)
    }
}

/// `Λ_n(t) = Σ_k φ_k B_k(t)`.
pub fn cumulative_hazard(sieve: &BernsteinSieve, t: f64) -> Result<f64> {
    if !sieve.contains(t) {
        return Err(Error::Range { t, lo: sieve.t_lo, hi: sieve.t_hi });
    }
    let basis = basis_vector(sieve.degree, sieve.normalized(t));
    Ok(sieve.coefficients().iter().zip(&basis).map(|(p, b)| p * b).sum())
}

/// One margin of the model: regression coefficients, transformation and sieve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginModel {
    pub beta: Vec<f64>,
    pub transform: TransformSpec,
    pub sieve: BernsteinSieve,
}

impl MarginModel {
    pub fn linear_predictor(&self, z: &[f64]) -> Result<f64> {
        if z.len() != self.beta.len() {
            return Err(Error::Domain(format!(
                "covariate vector has {} entries, model expects {}",
                z.len(),
                self.beta.len()
            )));
        }
        Ok(z.iter().zip(&self.beta).map(|(a, b)| a * b).sum())
    }
}

/// `S(t | z)`. `t = 0` returns 1 and `t = +inf` returns 0 without touching
/// the sieve.
pub fn marginal_survival(m: &MarginModel, t: f64, z: &[f64]) -> Result<f64> {
    let eta = m.linear_predictor(z)?;
    if t == 0.0 {
        return Ok(1.0);
    }
    if t == f64::INFINITY {
        return Ok(0.0);
    }
    let lambda = cumulative_hazard(&m.sieve, t)?;
    Ok((-transform_g(&m.transform, eta.exp() * lambda)?).exp())
}
