//! Two-parameter Archimedean copula and the one-parameter families used by
//! the simulator.
//!
//! The two-parameter family is
//! `C(u, v) = [1 + {(u^{-1/κ} - 1)^{1/α} + (v^{-1/κ} - 1)^{1/α}}^α]^{-κ}`
//! with `α ∈ (0, 1]` and `κ > 0`. It reduces to Clayton (θ = 1/κ) at α = 1
//! and tends to Gumbel (θ = 1/α) as κ → ∞.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dependence parameters of the two-parameter copula.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CopulaParams {
    pub alpha: f64,
    pub kappa: f64,
}

impl CopulaParams {
    pub fn new(alpha: f64, kappa: f64) -> Result<Self> {
        let p = Self { alpha, kappa };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::Domain(format!("alpha = {} outside (0, 1]", self.alpha)));
        }
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return Err(Error::Domain(format!("kappa = {} outside (0, inf)", self.kappa)));
        }
        Ok(())
    }

    pub fn tau(&self) -> f64 {
        1.0 - 2.0 * self.alpha * self.kappa / (2.0 * self.kappa + 1.0)
    }
}

/// Copula family used for data generation. The estimator always fits
/// [`CopulaFamily::TwoParameter`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum CopulaFamily {
    TwoParameter { alpha: f64, kappa: f64 },
    Clayton { theta: f64 },
    Gumbel { theta: f64 },
    Frank { theta: f64 },
    Joe { theta: f64 },
    Amh { theta: f64 },
}

/// Family tag without parameters, for `τ`-targeted construction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FamilyTag {
    TwoParameter,
    Clayton,
    Gumbel,
    Frank,
    Joe,
    Amh,
}

impl From<CopulaParams> for CopulaFamily {
    fn from(p: CopulaParams) -> Self {
        CopulaFamily::TwoParameter { alpha: p.alpha, kappa: p.kappa }
    }
}

// ---------------------------------------------------------------------------
// Log-domain kernel shared with the likelihood.
//
// Survival probabilities enter as g = -ln u, so u = 1 is g = 0 and u = 0 is
// g = +inf. The generator term (u^{-1/κ} - 1) becomes expm1(g/κ).
// ---------------------------------------------------------------------------

/// `ln(u^{-1/κ} - 1)` for `u = exp(-g)`.
#[inline]
pub(crate) fn ln_generator(g: f64, kappa: f64) -> f64 {
    if g <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if g == f64::INFINITY {
        return f64::INFINITY;
    }
    let y = g / kappa;
    if y > 30.0 {
        y + (-(-y).exp()).ln_1p()
    } else {
        y.exp_m1().ln()
    }
}

#[inline]
fn log_sum_exp(a: f64, b: f64) -> f64 {
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    if hi == f64::NEG_INFINITY {
        return hi;
    }
    hi + (lo - hi).exp().ln_1p()
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `ln C(u, v)` from precomputed `ln_generator` values. Does not validate
/// `alpha`; the likelihood probes slightly past α = 1.
#[inline]
pub(crate) fn ln_copula_from_generators(lw_u: f64, lw_v: f64, alpha: f64, kappa: f64) -> f64 {
    if lw_u == f64::INFINITY || lw_v == f64::INFINITY {
        return f64::NEG_INFINITY;
    }
    let s = if alpha == 1.0 {
        log_sum_exp(lw_u, lw_v)
    } else {
        alpha * log_sum_exp(lw_u / alpha, lw_v / alpha)
    };
    if s == f64::NEG_INFINITY {
        return 0.0;
    }
    -kappa * softplus(s)
}

fn check_prob(x: f64, name: &str) -> Result<()> {
    if (0.0..=1.0).contains(&x) {
        Ok(())
    } else {
        Err(Error::Domain(format!("{name} = {x} outside [0, 1]")))
    }
}

/// Two-parameter copula `C_{α,κ}(u, v)`.
pub fn copula_cdf(u: f64, v: f64, p: &CopulaParams) -> Result<f64> {
    check_prob(u, "u")?;
    check_prob(v, "v")?;
    p.validate()?;
    if u == 0.0 || v == 0.0 {
        return Ok(0.0);
    }
    if u == 1.0 {
        return Ok(v);
    }
    if v == 1.0 {
        return Ok(u);
    }
    let lu = ln_generator(-u.ln(), p.kappa);
    let lv = ln_generator(-v.ln(), p.kappa);
    let c = ln_copula_from_generators(lu, lv, p.alpha, p.kappa).exp();
    Ok(c.clamp((u + v - 1.0).max(0.0), u.min(v)))
}

/// Clayton copula `(u^{-θ} + v^{-θ} - 1)^{-1/θ}`.
pub fn clayton_cdf(u: f64, v: f64, theta: f64) -> Result<f64> {
    check_prob(u, "u")?;
    check_prob(v, "v")?;
    if !(theta > 0.0 && theta.is_finite()) {
        return Err(Error::Domain(format!("Clayton theta = {theta} must be positive")));
    }
    if u == 0.0 || v == 0.0 {
        return Ok(0.0);
    }
    if u == 1.0 {
        return Ok(v);
    }
    if v == 1.0 {
        return Ok(u);
    }
    Ok((u.powf(-theta) + v.powf(-theta) - 1.0).powf(-1.0 / theta))
}

/// Kendall's τ of the two-parameter copula.
pub fn kendall_tau(p: &CopulaParams) -> Result<f64> {
    p.validate()?;
    Ok(p.tau())
}

/// κ such that the two-parameter copula with the given α has Kendall's τ.
/// Feasible only when `1 - τ < α`.
pub fn solve_kappa_for_tau(alpha: f64, tau: f64) -> Result<f64> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(Error::Domain(format!("alpha = {alpha} outside (0, 1]")));
    }
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Domain(format!("tau = {tau} outside (0, 1)")));
    }
    let q = 1.0 - tau;
    if q >= alpha {
        return Err(Error::Infeasible(format!(
            "tau = {tau} unreachable with alpha = {alpha}: need 1 - tau < alpha"
        )));
    }
    Ok(q / (2.0 * (alpha - q)))
}

/// Rectangle mass `C(u1,v1) - C(u1,v2) - C(u2,v1) + C(u2,v2)` on the
/// survival scale (`u1 >= u2`, `v1 >= v2`).
pub fn rectangle_mass(u1: f64, u2: f64, v1: f64, v2: f64, p: &CopulaParams) -> Result<f64> {
    if u1 < u2 || v1 < v2 {
        return Err(Error::Domain(format!(
            "rectangle ordering violated: u1={u1} u2={u2} v1={v1} v2={v2}"
        )));
    }
    let m = copula_cdf(u1, v1, p)? - copula_cdf(u1, v2, p)? - copula_cdf(u2, v1, p)?
        + copula_cdf(u2, v2, p)?;
    if m >= 0.0 {
        Ok(m)
    } else if m >= -1e-12 {
        Ok(0.0)
    } else {
        Err(Error::Domain(format!("negative rectangle mass {m:.3e}")))
    }
}

// ---------------------------------------------------------------------------
// Families
// ---------------------------------------------------------------------------

impl CopulaFamily {
    pub fn tag(&self) -> FamilyTag {
        match self {
            CopulaFamily::TwoParameter { .. } => FamilyTag::TwoParameter,
            CopulaFamily::Clayton { .. } => FamilyTag::Clayton,
            CopulaFamily::Gumbel { .. } => FamilyTag::Gumbel,
            CopulaFamily::Frank { .. } => FamilyTag::Frank,
            CopulaFamily::Joe { .. } => FamilyTag::Joe,
            CopulaFamily::Amh { .. } => FamilyTag::Amh,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Domain(msg.to_string()));
        match *self {
            CopulaFamily::TwoParameter { alpha, kappa } => CopulaParams { alpha, kappa }.validate(),
            CopulaFamily::Clayton { theta } if !(theta > 0.0 && theta.is_finite()) => {
                bad("Clayton requires theta > 0")
            }
            CopulaFamily::Gumbel { theta } if !(theta >= 1.0 && theta.is_finite()) => {
                bad("Gumbel requires theta >= 1")
            }
            CopulaFamily::Frank { theta } if !(theta != 0.0 && theta.is_finite()) => {
                bad("Frank requires theta != 0")
            }
            CopulaFamily::Joe { theta } if !(theta >= 1.0 && theta.is_finite()) => {
                bad("Joe requires theta >= 1")
            }
            CopulaFamily::Amh { theta } if !((-1.0..1.0).contains(&theta)) => {
                bad("AMH requires theta in [-1, 1)")
            }
            _ => Ok(()),
        }
    }

    /// Joint distribution function `C(u, v)`.
    pub fn cdf(&self, u: f64, v: f64) -> Result<f64> {
        check_prob(u, "u")?;
        check_prob(v, "v")?;
        self.validate()?;
        if u == 0.0 || v == 0.0 {
            return Ok(0.0);
        }
        if u == 1.0 {
            return Ok(v);
        }
        if v == 1.0 {
            return Ok(u);
        }
        let c = match *self {
            CopulaFamily::TwoParameter { alpha, kappa } => {
                return copula_cdf(u, v, &CopulaParams { alpha, kappa })
            }
            CopulaFamily::Clayton { theta } => return clayton_cdf(u, v, theta),
            CopulaFamily::Gumbel { theta } => {
                let a = (-u.ln()).powf(theta) + (-v.ln()).powf(theta);
                (-a.powf(1.0 / theta)).exp()
            }
            CopulaFamily::Frank { theta } => {
                let num = (-theta * u).exp_m1() * (-theta * v).exp_m1();
                -(num / (-theta).exp_m1()).ln_1p() / theta
            }
            CopulaFamily::Joe { theta } => {
                let a = (1.0 - u).powf(theta);
                let b = (1.0 - v).powf(theta);
                1.0 - (a + b - a * b).powf(1.0 / theta)
            }
            CopulaFamily::Amh { theta } => u * v / (1.0 - theta * (1.0 - u) * (1.0 - v)),
        };
        Ok(c.clamp((u + v - 1.0).max(0.0), u.min(v)))
    }

    /// Kendall's τ of the family.
    pub fn kendall_tau(&self) -> Result<f64> {
        self.validate()?;
        Ok(match *self {
            CopulaFamily::TwoParameter { alpha, kappa } => CopulaParams { alpha, kappa }.tau(),
            CopulaFamily::Clayton { theta } => theta / (theta + 2.0),
            CopulaFamily::Gumbel { theta } => 1.0 - 1.0 / theta,
            CopulaFamily::Frank { theta } => frank_tau(theta),
            CopulaFamily::Joe { theta } => joe_tau(theta),
            CopulaFamily::Amh { theta } => amh_tau(theta),
        })
    }

    /// One-parameter family (or the two-parameter family at a given α)
    /// with the requested Kendall's τ.
    pub fn from_tau(tag: FamilyTag, tau: f64, alpha: Option<f64>) -> Result<Self> {
        if !(tau > 0.0 && tau < 1.0) {
            return Err(Error::Domain(format!("tau = {tau} outside (0, 1)")));
        }
        Ok(match tag {
            FamilyTag::TwoParameter => {
                let alpha = alpha.unwrap_or(1.0);
                CopulaFamily::TwoParameter { alpha, kappa: solve_kappa_for_tau(alpha, tau)? }
            }
            FamilyTag::Clayton => CopulaFamily::Clayton { theta: 2.0 * tau / (1.0 - tau) },
            FamilyTag::Gumbel => CopulaFamily::Gumbel { theta: 1.0 / (1.0 - tau) },
            FamilyTag::Frank => {
                let theta = bisect_increasing(frank_tau, tau, 1e-9, 500.0)?;
                CopulaFamily::Frank { theta }
            }
            FamilyTag::Joe => {
                let theta = bisect_increasing(joe_tau, tau, 1.0, 500.0)?;
                CopulaFamily::Joe { theta }
            }
            FamilyTag::Amh => {
                if tau >= 1.0 / 3.0 {
                    return Err(Error::Infeasible(format!(
                        "AMH attains tau < 1/3 only; requested {tau}"
                    )));
                }
                let theta = bisect_increasing(amh_tau, tau, 1e-9, 1.0 - 1e-15)?;
                CopulaFamily::Amh { theta }
            }
        })
    }
}

fn bisect_increasing(f: fn(f64) -> f64, target: f64, mut lo: f64, mut hi: f64) -> Result<f64> {
    if f(lo) > target || f(hi) < target {
        return Err(Error::Infeasible(format!("tau = {target} outside family range")));
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-13 * hi.max(1.0) {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Debye function `D1(θ) = θ^{-1} ∫_0^θ t/(e^t - 1) dt` by composite Simpson.
fn debye1(theta: f64) -> f64 {
    let n = 2000;
    let h = theta / n as f64;
    let f = |t: f64| if t == 0.0 { 1.0 } else { t / t.exp_m1() };
    let mut s = f(0.0) + f(theta);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        s += w * f(i as f64 * h);
    }
    s * h / 3.0 / theta
}

fn frank_tau(theta: f64) -> f64 {
    if theta.abs() < 1e-8 {
        return theta / 9.0;
    }
    1.0 - 4.0 / theta * (1.0 - debye1(theta))
}

fn joe_tau(theta: f64) -> f64 {
    // 1 - 4 Σ 1/(k(θk+2)(θ(k-1)+2)), with an integral tail beyond K.
    let k_max = 20_000usize;
    let mut s = 0.0;
    for k in (1..=k_max).rev() {
        let k = k as f64;
        s += 1.0 / (k * (theta * k + 2.0) * (theta * (k - 1.0) + 2.0));
    }
    let kk = k_max as f64 + 0.5;
    s += 1.0 / (2.0 * theta * theta * kk * kk);
    1.0 - 4.0 * s
}

fn amh_tau(theta: f64) -> f64 {
    if theta.abs() < 1e-6 {
        return 2.0 * theta / 9.0;
    }
    1.0 - 2.0 * (theta + (1.0 - theta).powi(2) * (-theta).ln_1p()) / (3.0 * theta * theta)
}

// ---------------------------------------------------------------------------
// Conditional distributions for sampling by conditioning
// ---------------------------------------------------------------------------

/// `∂C(u, v)/∂u`, the distribution function of V given U = u.
pub fn conditional_cdf_given_u(u: f64, v: f64, family: &CopulaFamily) -> Result<f64> {
    if !(u > 0.0 && u < 1.0) {
        return Err(Error::Domain(format!("conditioning value u = {u} must be in (0, 1)")));
    }
    check_prob(v, "v")?;
    family.validate()?;
    if v == 0.0 {
        return Ok(0.0);
    }
    if v == 1.0 {
        return Ok(1.0);
    }
    let h = match *family {
        CopulaFamily::Clayton { theta } => {
            let a = u.powf(-theta) + v.powf(-theta) - 1.0;
            u.powf(-theta - 1.0) * a.powf(-1.0 / theta - 1.0)
        }
        CopulaFamily::Frank { theta } => {
            let eu = (-theta * u).exp();
            let ev1 = (-theta * v).exp_m1();
            let denom = (-theta).exp_m1() + (-theta * u).exp_m1() * ev1;
            eu * ev1 / denom
        }
        CopulaFamily::Amh { theta } => {
            let d = 1.0 - theta * (1.0 - u) * (1.0 - v);
            v * (1.0 - theta * (1.0 - v)) / (d * d)
        }
        CopulaFamily::Gumbel { theta } => {
            let lu = -u.ln();
            let a = lu.powf(theta) + (-v.ln()).powf(theta);
            let c = (-a.powf(1.0 / theta)).exp();
            c * a.powf(1.0 / theta - 1.0) * lu.powf(theta - 1.0) / u
        }
        CopulaFamily::TwoParameter { .. } | CopulaFamily::Joe { .. } => {
            let step = (1e-6f64).max(1e-6 * u);
            let lo = (u - step).max(0.5 * u);
            let hi = (u + step).min(0.5 * (1.0 + u));
            (family.cdf(hi, v)? - family.cdf(lo, v)?) / (hi - lo)
        }
    };
    Ok(h.clamp(0.0, 1.0))
}

/// Solves `conditional_cdf_given_u(u, v) = w` for v by bisection.
pub fn invert_conditional(u: f64, w: f64, family: &CopulaFamily) -> Result<f64> {
    if !(w > 0.0 && w < 1.0) {
        return Err(Error::Domain(format!("w = {w} must be in (0, 1)")));
    }
    const EPS: f64 = 1e-12;
    let mut lo = EPS;
    let mut hi = 1.0 - EPS;
    if conditional_cdf_given_u(u, lo, family)? >= w {
        return Ok(lo);
    }
    if conditional_cdf_given_u(u, hi, family)? <= w {
        return Ok(hi);
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if conditional_cdf_given_u(u, mid, family)? < w {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-10 {
            return Ok(0.5 * (lo + hi));
        }
    }
    Err(Error::Convergence("conditional inversion exceeded 200 bisection steps".into()))
}
