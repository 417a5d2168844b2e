//! Joint sieve log-likelihood for bivariate interval-censored data, with the
//! marginal contribution used for subjects observed on one margin only.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::copula::{copula_cdf, ln_copula_from_generators, ln_generator, CopulaParams};
use crate::error::{Error, Result};
use crate::margins::{basis_vector, marginal_survival, BernsteinSieve, MarginModel, TransformSpec};
use crate::par::{self, compensated_sum, Execution};

/// Probability floor applied before taking logs.
pub const PROB_FLOOR: f64 = 1e-300;

/// Relative margin added to the largest finite endpoint to get the upper
/// end of the sieve range.
pub const T_HI_MARGIN: f64 = 0.05;

/// Observation of one margin: the event lies in `(l, r]`. `l = 0` is
/// left-censoring and `r = +inf` right-censoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginObs {
    pub l: f64,
    pub r: f64,
    pub z: Vec<f64>,
}

impl MarginObs {
    pub fn new(l: f64, r: f64, z: Vec<f64>) -> Self {
        Self { l, r, z }
    }

    fn validate(&self, id: &str) -> Result<()> {
        let bad = |reason: String| Err(Error::InvalidRecord { id: id.to_string(), reason });
        if !(self.l >= 0.0 && self.l.is_finite()) {
            return bad(format!("left endpoint {} must be finite and >= 0", self.l));
        }
        if self.r.is_nan() || !(self.l < self.r) {
            return bad(format!("interval ({}, {}] is empty", self.l, self.r));
        }
        if self.z.iter().any(|v| !v.is_finite()) {
            return bad("non-finite covariate".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Group {
    Bivariate,
    /// Only margin `j` (0 or 1) is at risk.
    SingleMargin(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub id: String,
    pub margins: [Option<MarginObs>; 2],
}

impl SubjectRecord {
    pub fn bivariate(id: impl Into<String>, m1: MarginObs, m2: MarginObs) -> Self {
        Self { id: id.into(), margins: [Some(m1), Some(m2)] }
    }

    pub fn single(id: impl Into<String>, j: usize, m: MarginObs) -> Self {
        let mut margins = [None, None];
        margins[j] = Some(m);
        Self { id: id.into(), margins }
    }

    pub fn group(&self) -> Option<Group> {
        match (&self.margins[0], &self.margins[1]) {
            (Some(_), Some(_)) => Some(Group::Bivariate),
            (Some(_), None) => Some(Group::SingleMargin(0)),
            (None, Some(_)) => Some(Group::SingleMargin(1)),
            (None, None) => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.group().is_none() {
            return Err(Error::InvalidRecord { id: self.id.clone(), reason: "no margin observed".into() });
        }
        for m in self.margins.iter().flatten() {
            m.validate(&self.id)?;
        }
        Ok(())
    }
}

/// A validated collection of records with a common covariate layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub records: Vec<SubjectRecord>,
    /// Covariate column names per margin, e.g. `["z1_age", "zs_smoke"]`.
    pub covariate_names: [Vec<String>; 2],
    pub t_hi: f64,
}

impl Dataset {
    /// Validates the records and derives the sieve upper bound from the
    /// largest finite endpoint.
    pub fn new(records: Vec<SubjectRecord>, covariate_names: [Vec<String>; 2]) -> Result<Self> {
        let max_t = records
            .iter()
            .flat_map(|r| r.margins.iter().flatten())
            .flat_map(|m| [m.l, m.r])
            .filter(|t| t.is_finite())
            .fold(0.0f64, f64::max);
        if !(max_t > 0.0) {
            return Err(Error::DegenerateData("no positive finite interval endpoint".into()));
        }
        Self::with_t_hi(records, covariate_names, max_t * (1.0 + T_HI_MARGIN))
    }

    pub fn with_t_hi(records: Vec<SubjectRecord>, covariate_names: [Vec<String>; 2], t_hi: f64) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::DegenerateData("dataset has no records".into()));
        }
        for rec in &records {
            rec.validate()?;
            for (j, m) in rec.margins.iter().enumerate() {
                if let Some(m) = m {
                    if m.z.len() != covariate_names[j].len() {
                        return Err(Error::InvalidRecord {
                            id: rec.id.clone(),
                            reason: format!(
                                "margin {} has {} covariates, expected {}",
                                j + 1,
                                m.z.len(),
                                covariate_names[j].len()
                            ),
                        });
                    }
                    if m.l > t_hi || (m.r.is_finite() && m.r > t_hi) {
                        return Err(Error::InvalidRecord {
                            id: rec.id.clone(),
                            reason: format!("endpoint beyond sieve range {t_hi}"),
                        });
                    }
                }
            }
        }
        let mut seen = std::collections::HashSet::with_capacity(records.len());
        if let Some(dup) = records.iter().find(|r| !seen.insert(r.id.as_str())) {
            return Err(Error::InvalidRecord { id: dup.id.clone(), reason: "duplicate id".into() });
        }
        Ok(Self { records, covariate_names, t_hi })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Stable SHA-256 fingerprint of ids, intervals and covariates.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for names in &self.covariate_names {
            for n in names {
                h.update(n.as_bytes());
                h.update([0u8]);
            }
            h.update([1u8]);
        }
        for rec in &self.records {
            h.update(rec.id.as_bytes());
            h.update([0u8]);
            for m in &rec.margins {
                match m {
                    None => h.update([2u8]),
                    Some(m) => {
                        h.update(m.l.to_le_bytes());
                        h.update(m.r.to_le_bytes());
                        for z in &m.z {
                            h.update(z.to_le_bytes());
                        }
                    }
                }
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Records restricted to those accepted by `keep`, with the same sieve range.
    pub fn filtered(&self, keep: impl Fn(&SubjectRecord) -> bool) -> Result<Self> {
        let records = self.records.iter().filter(|r| keep(r)).cloned().collect();
        Self::with_t_hi(records, self.covariate_names.clone(), self.t_hi)
    }
}

/// How the two margins share parameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TieMode {
    /// Everything margin-specific.
    #[default]
    None,
    /// Shared regression coefficients (matched by covariate name).
    Beta,
    /// Shared coefficients, sieve and transformation.
    All,
}

/// Strips the `z1_`/`z2_`/`zs_` prefix used to pair covariates across margins.
pub fn covariate_key(name: &str) -> &str {
    for p in ["z1_", "z2_", "zs_"] {
        if let Some(rest) = name.strip_prefix(p) {
            return rest;
        }
    }
    name
}

/// Coordinate system for a flat parameter vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coords {
    /// Unconstrained: logit α, log κ, ξ, log r. Used by the optimizer.
    Working,
    /// Natural α, κ and r; the sieve stays on the log-increment scale.
    /// Used for the observed information, whose finite-dimensional block of
    /// the inverse does not depend on how the sieve is parameterized.
    Natural,
}

const ALPHA_EPS: f64 = 1e-10;

/// Scaled logistic map onto `(0, 1]`; reaches 1 exactly for `a >= ln(1/ε)`.
pub fn alpha_from_logit(a: f64) -> f64 {
    ((1.0 + ALPHA_EPS) / (1.0 + (-a).exp())).min(1.0)
}

pub fn logit_from_alpha(alpha: f64) -> f64 {
    let p = alpha / (1.0 + ALPHA_EPS);
    (p / (1.0 - p)).ln()
}

/// α at or above this value is reported as the Clayton boundary.
pub const ALPHA_BOUNDARY: f64 = 1.0 - 1e-7;

/// Map from flat parameter vectors to the model components.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamLayout {
    pub beta_names: Vec<String>,
    /// `beta_index[j][k]` is the β slot used by covariate `k` of margin `j`.
    pub beta_index: [Vec<usize>; 2],
    pub degree: usize,
    pub t_lo: f64,
    pub t_hi: f64,
    pub sieve_shared: bool,
    pub transforms: [TransformSpec; 2],
    pub transform_shared: bool,
}

pub(crate) struct Resolved {
    pub beta: [Vec<f64>; 2],
    pub alpha: f64,
    pub kappa: f64,
    pub phi: [Vec<f64>; 2],
    pub transforms: [TransformSpec; 2],
}

impl ParamLayout {
    pub fn new(
        names: &[Vec<String>; 2],
        transforms: [TransformSpec; 2],
        degree: usize,
        tie: TieMode,
        t_hi: f64,
    ) -> Result<Self> {
        if degree < 1 {
            return Err(Error::Config("sieve degree must be at least 1".into()));
        }
        for t in &transforms {
            t.validate()?;
        }
        let (beta_names, beta_index) = match tie {
            TieMode::None => {
                let mut bn = Vec::new();
                let mut idx = [Vec::new(), Vec::new()];
                for j in 0..2 {
                    for n in &names[j] {
                        idx[j].push(bn.len());
                        bn.push(format!("m{}:{}", j + 1, n));
                    }
                }
                (bn, idx)
            }
            TieMode::Beta | TieMode::All => {
                let k1: Vec<&str> = names[0].iter().map(|n| covariate_key(n)).collect();
                let k2: Vec<&str> = names[1].iter().map(|n| covariate_key(n)).collect();
                let mut s1 = k1.clone();
                let mut s2 = k2.clone();
                s1.sort_unstable();
                s2.sort_unstable();
                if s1 != s2 {
                    return Err(Error::Config(format!(
                        "tied coefficients need matching covariates, got {k1:?} and {k2:?}"
                    )));
                }
                let bn: Vec<String> = k1.iter().map(|k| k.to_string()).collect();
                let idx2 = k2.iter().map(|k| k1.iter().position(|x| x == k).unwrap()).collect();
                (bn, [(0..k1.len()).collect(), idx2])
            }
        };
        let shared = tie == TieMode::All;
        if shared && transforms[0] != transforms[1] {
            return Err(Error::Config("tying all parameters requires identical transformations".into()));
        }
        Ok(Self {
            beta_names,
            beta_index,
            degree,
            t_lo: 0.0,
            t_hi,
            sieve_shared: shared,
            transforms,
            transform_shared: shared,
        })
    }

    /// Appends one covariate to both margins. The new coefficient is shared
    /// across margins or margin-specific; returns the new layout and the
    /// β slots created.
    pub fn with_extra_covariate(&self, name: &str, shared: bool) -> (Self, Vec<usize>) {
        let mut out = self.clone();
        let n = self.beta_names.len();
        if shared {
            out.beta_names.push(name.to_string());
            out.beta_index[0].push(n);
            out.beta_index[1].push(n);
            (out, vec![n])
        } else {
            out.beta_names.push(format!("m1:{name}"));
            out.beta_names.push(format!("m2:{name}"));
            out.beta_index[0].push(n);
            out.beta_index[1].push(n + 1);
            (out, vec![n, n + 1])
        }
    }

    pub fn n_beta(&self) -> usize {
        self.beta_names.len()
    }

    pub fn alpha_index(&self) -> usize {
        self.n_beta()
    }

    pub fn kappa_index(&self) -> usize {
        self.n_beta() + 1
    }

    pub fn sieve_range(&self, j: usize) -> std::ops::Range<usize> {
        let start = self.n_beta() + 2 + if j == 1 && !self.sieve_shared { self.degree + 1 } else { 0 };
        start..start + self.degree + 1
    }

    fn r_base(&self) -> usize {
        self.n_beta() + 2 + (self.degree + 1) * if self.sieve_shared { 1 } else { 2 }
    }

    pub fn r_index(&self, j: usize) -> Option<usize> {
        if !self.transforms[j].r_free {
            return None;
        }
        if j == 0 || self.transform_shared {
            Some(self.r_base())
        } else {
            Some(self.r_base() + usize::from(self.transforms[0].r_free))
        }
    }

    pub fn len(&self) -> usize {
        let mut n = self.r_base();
        if self.transforms[0].r_free {
            n += 1;
        }
        if self.transforms[1].r_free && !self.transform_shared {
            n += 1;
        }
        n
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Indices of the finite-dimensional parameters (β, α, κ, free r).
    pub fn finite_indices(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.n_beta() + 2).collect();
        idx.extend(self.r_base()..self.len());
        idx
    }

    pub fn finite_names(&self) -> Vec<String> {
        let mut names = self.beta_names.clone();
        names.push("alpha".into());
        names.push("kappa".into());
        if self.r_index(0).is_some() {
            names.push(if self.transform_shared { "r".into() } else { "r1".into() });
        }
        if self.r_index(1).is_some() && !self.transform_shared {
            names.push("r2".into());
        }
        names
    }

    /// Indices of everything that enters the marginal likelihoods (β, ξ, r).
    pub fn marginal_indices(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.n_beta()).collect();
        idx.extend(self.n_beta() + 2..self.len());
        idx
    }

    /// Indices of parameters that affect margin `j` alone.
    pub fn margin_indices(&self, j: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = self.beta_index[j].clone();
        idx.sort_unstable();
        idx.dedup();
        idx.extend(self.sieve_range(j));
        if let Some(r) = self.r_index(j) {
            idx.push(r);
        }
        idx
    }

    fn r_slots(&self) -> Vec<usize> {
        let mut v: Vec<usize> = [self.r_index(0), self.r_index(1)].into_iter().flatten().collect();
        v.dedup();
        v
    }

    pub fn to_natural(&self, working: &[f64]) -> Vec<f64> {
        let mut x = working.to_vec();
        x[self.alpha_index()] = alpha_from_logit(working[self.alpha_index()]);
        x[self.kappa_index()] = working[self.kappa_index()].exp();
        for i in self.r_slots() {
            x[i] = working[i].exp();
        }
        x
    }

    pub fn to_working(&self, natural: &[f64]) -> Vec<f64> {
        let mut x = natural.to_vec();
        x[self.alpha_index()] = logit_from_alpha(natural[self.alpha_index()]);
        x[self.kappa_index()] = natural[self.kappa_index()].ln();
        for i in self.r_slots() {
            x[i] = natural[i].ln();
        }
        x
    }

    pub(crate) fn resolve(&self, x: &[f64], coords: Coords) -> Resolved {
        let beta = [
            self.beta_index[0].iter().map(|&i| x[i]).collect(),
            self.beta_index[1].iter().map(|&i| x[i]).collect(),
        ];
        let (alpha, kappa) = match coords {
            Coords::Working => (
                alpha_from_logit(x[self.alpha_index()]),
                x[self.kappa_index()].clamp(-30.0, 30.0).exp(),
            ),
            Coords::Natural => (x[self.alpha_index()], x[self.kappa_index()].max(1e-300)),
        };
        let phi_of = |j: usize| {
            let mut acc = 0.0;
            x[self.sieve_range(j)]
                .iter()
                .map(|&v| {
                    acc += v.clamp(-60.0, 60.0).exp();
                    acc
                })
                .collect::<Vec<f64>>()
        };
        let mut transforms = self.transforms;
        for (j, t) in transforms.iter_mut().enumerate() {
            if let Some(i) = self.r_index(j) {
                t.r = match coords {
                    Coords::Working => x[i].clamp(-30.0, 30.0).exp(),
                    Coords::Natural => x[i].max(1e-300),
                };
            }
        }
        Resolved { beta, alpha, kappa, phi: [phi_of(0), phi_of(1)], transforms }
    }
}

/// Flat parameter vector in working coordinates, with its layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub layout: ParamLayout,
    pub values: Vec<f64>,
}

impl ParamVector {
    pub fn new(layout: ParamLayout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::LayoutMismatch(format!(
                "layout needs {} values, got {}",
                layout.len(),
                values.len()
            )));
        }
        Ok(Self { layout, values })
    }

    pub fn natural(&self) -> Vec<f64> {
        self.layout.to_natural(&self.values)
    }

    pub fn copula(&self) -> CopulaParams {
        let r = self.layout.resolve(&self.values, Coords::Working);
        CopulaParams { alpha: r.alpha, kappa: r.kappa }
    }

    pub fn alpha_at_boundary(&self) -> bool {
        self.copula().alpha >= ALPHA_BOUNDARY
    }
}

/// Flattens two margin models and copula parameters into working coordinates.
pub fn encode_params(layout: &ParamLayout, margins: &[MarginModel; 2], copula: &CopulaParams) -> Result<ParamVector> {
    copula.validate()?;
    let mut x = vec![f64::NAN; layout.len()];
    for j in 0..2 {
        let m = &margins[j];
        if m.beta.len() != layout.beta_index[j].len() {
            return Err(Error::LayoutMismatch(format!(
                "margin {} has {} coefficients, layout expects {}",
                j + 1,
                m.beta.len(),
                layout.beta_index[j].len()
            )));
        }
        for (k, &slot) in layout.beta_index[j].iter().enumerate() {
            set_tied(&mut x, slot, m.beta[k], "coefficient")?;
        }
        if m.sieve.degree != layout.degree || m.sieve.t_lo != layout.t_lo || m.sieve.t_hi != layout.t_hi {
            return Err(Error::LayoutMismatch(format!("margin {} sieve does not match layout", j + 1)));
        }
        for (k, slot) in layout.sieve_range(j).enumerate() {
            set_tied(&mut x, slot, m.sieve.raw[k], "sieve coefficient")?;
        }
        let lt = &layout.transforms[j];
        if m.transform.kind != lt.kind || m.transform.r_free != lt.r_free {
            return Err(Error::LayoutMismatch(format!("margin {} transformation does not match layout", j + 1)));
        }
        match layout.r_index(j) {
            Some(slot) => set_tied(&mut x, slot, m.transform.r.ln(), "transformation parameter")?,
            None if lt.has_r() && m.transform.r != lt.r => {
                return Err(Error::LayoutMismatch(format!("margin {} fixed r differs from layout", j + 1)))
            }
            None => {}
        }
    }
    x[layout.alpha_index()] = logit_from_alpha(copula.alpha);
    x[layout.kappa_index()] = copula.kappa.ln();
    if x.iter().any(|v| v.is_nan()) {
        return Err(Error::LayoutMismatch("layout slot left unset".into()));
    }
    ParamVector::new(layout.clone(), x)
}

fn set_tied(x: &mut [f64], slot: usize, v: f64, what: &str) -> Result<()> {
    if x[slot].is_nan() || x[slot] == v {
        x[slot] = v;
        Ok(())
    } else {
        Err(Error::LayoutMismatch(format!("tied {what} differs between margins")))
    }
}

pub fn decode_params(pv: &ParamVector) -> Result<([MarginModel; 2], CopulaParams)> {
    let layout = &pv.layout;
    if pv.values.len() != layout.len() {
        return Err(Error::LayoutMismatch(format!(
            "layout needs {} values, got {}",
            layout.len(),
            pv.values.len()
        )));
    }
    let res = layout.resolve(&pv.values, Coords::Working);
    let mk = |j: usize| -> Result<MarginModel> {
        let raw = pv.values[layout.sieve_range(j)].to_vec();
        Ok(MarginModel {
            beta: res.beta[j].clone(),
            transform: res.transforms[j],
            sieve: BernsteinSieve::new(layout.degree, layout.t_lo, layout.t_hi, raw)?,
        })
    };
    let copula = CopulaParams::new(res.alpha, res.kappa)?;
    Ok(([mk(0)?, mk(1)?], copula))
}

// ---------------------------------------------------------------------------
// Reference (per-subject) evaluation
// ---------------------------------------------------------------------------

/// Log-likelihood contribution of one record, evaluated through the public
/// survival and copula functions.
pub fn subject_loglik(rec: &SubjectRecord, params: &ParamVector) -> Result<f64> {
    rec.validate()?;
    let (margins, copula) = decode_params(params)?;
    let surv = |j: usize, t: f64, z: &[f64]| -> Result<f64> {
        marginal_survival(&margins[j], t, z).map_err(|e| Error::InvalidRecord {
            id: rec.id.clone(),
            reason: e.to_string(),
        })
    };
    let prob = match (&rec.margins[0], &rec.margins[1]) {
        (Some(a), Some(b)) => {
            let (u1, u2) = (surv(0, a.l, &a.z)?, surv(0, a.r, &a.z)?);
            let (v1, v2) = (surv(1, b.l, &b.z)?, surv(1, b.r, &b.z)?);
            copula_cdf(u1, v1, &copula)? - copula_cdf(u1, v2, &copula)? - copula_cdf(u2, v1, &copula)?
                + copula_cdf(u2, v2, &copula)?
        }
        (Some(a), None) => surv(0, a.l, &a.z)? - surv(0, a.r, &a.z)?,
        (None, Some(b)) => surv(1, b.l, &b.z)? - surv(1, b.r, &b.z)?,
        (None, None) => unreachable!("validated"),
    };
    let ll = prob.max(PROB_FLOOR).ln();
    if ll.is_finite() {
        Ok(ll)
    } else {
        Err(Error::NonFinite { id: rec.id.clone() })
    }
}

// ---------------------------------------------------------------------------
// Prepared evaluation: basis values cached per endpoint.
// ---------------------------------------------------------------------------

struct PreparedMargin {
    z: Vec<f64>,
    l_basis: Option<Vec<f64>>,
    r_basis: Option<Vec<f64>>,
}

struct PreparedRecord {
    margins: [Option<PreparedMargin>; 2],
}

/// A dataset bound to a layout, with Bernstein basis values precomputed at
/// every finite positive endpoint.
///
/// A prepared dataset may center covariates: with centers `c` (one per β
/// slot), `exp(β·z)·φ = exp(β·(z − c))·exp(β·c)·φ`, so the sieve absorbs
/// `exp(β·c)` and the log-increments shift by `β·c`. This reparameterization
/// is exact and leaves β unchanged but removes most of the correlation
/// between coefficients and the sieve level. Evaluation methods take
/// internal (centered) vectors; see [`PreparedData::to_internal`].
pub struct PreparedData {
    records: Vec<PreparedRecord>,
    ids: Vec<String>,
    centers: Vec<f64>,
    pub layout: ParamLayout,
    pub execution: Execution,
}

/// Which part of the likelihood to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Part {
    /// Copula contributions for bivariate records, marginal ones otherwise.
    Joint,
    /// Sum of marginal contributions, treating margins as independent.
    Marginal,
    /// Marginal contributions of margin `j` only.
    Margin(usize),
}

impl PreparedData {
    pub fn new(data: &Dataset, layout: &ParamLayout, execution: Execution) -> Result<Self> {
        Self::with_centers(data, layout, execution, vec![0.0; layout.n_beta()])
    }

    /// Prepares with each β slot's covariates centered at their pooled mean.
    pub fn centered(data: &Dataset, layout: &ParamLayout, execution: Execution) -> Result<Self> {
        let mut sum = vec![0.0; layout.n_beta()];
        let mut count = vec![0usize; layout.n_beta()];
        for rec in &data.records {
            for (j, m) in rec.margins.iter().enumerate() {
                if let Some(m) = m {
                    for (k, &slot) in layout.beta_index[j].iter().enumerate() {
                        if let Some(v) = m.z.get(k) {
                            sum[slot] += v;
                            count[slot] += 1;
                        }
                    }
                }
            }
        }
        let centers = sum.iter().zip(&count).map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 }).collect();
        Self::with_centers(data, layout, execution, centers)
    }

    fn with_centers(data: &Dataset, layout: &ParamLayout, execution: Execution, centers: Vec<f64>) -> Result<Self> {
        for j in 0..2 {
            if layout.beta_index[j].len() != data.covariate_names[j].len() {
                return Err(Error::LayoutMismatch(format!(
                    "margin {} has {} covariates, layout expects {}",
                    j + 1,
                    data.covariate_names[j].len(),
                    layout.beta_index[j].len()
                )));
            }
        }
        let width = layout.t_hi - layout.t_lo;
        let basis_at = |id: &str, t: f64| -> Result<Vec<f64>> {
            if t < layout.t_lo || t > layout.t_hi {
                return Err(Error::InvalidRecord {
                    id: id.to_string(),
                    reason: format!("endpoint {t} outside sieve range [{}, {}]", layout.t_lo, layout.t_hi),
                });
            }
            Ok(basis_vector(layout.degree, (t - layout.t_lo) / width))
        };
        let mut records = Vec::with_capacity(data.records.len());
        for rec in &data.records {
            rec.validate()?;
            let mut margins = [None, None];
            for (j, m) in rec.margins.iter().enumerate() {
                if let Some(m) = m {
                    margins[j] = Some(PreparedMargin {
                        z: m.z.iter().zip(&layout.beta_index[j]).map(|(v, &slot)| v - centers[slot]).collect(),
                        l_basis: if m.l > 0.0 { Some(basis_at(&rec.id, m.l)?) } else { None },
                        r_basis: if m.r.is_finite() { Some(basis_at(&rec.id, m.r)?) } else { None },
                    });
                }
            }
            records.push(PreparedRecord { margins });
        }
        Ok(Self {
            records,
            ids: data.records.iter().map(|r| r.id.clone()).collect(),
            centers,
            layout: layout.clone(),
            execution,
        })
    }

    pub fn centers(&self) -> &[f64] {
        &self.centers
    }

    fn sieve_shift(&self, x: &[f64], j: usize) -> f64 {
        self.layout.beta_index[j].iter().map(|&s| x[s] * self.centers[s]).sum()
    }

    fn shift_sieve(&self, x: &[f64], sign: f64) -> Vec<f64> {
        let mut y = x.to_vec();
        let shifts = [self.sieve_shift(x, 0), self.sieve_shift(x, 1)];
        let js: &[usize] = if self.layout.sieve_shared { &[0] } else { &[0, 1] };
        for &j in js {
            for i in self.layout.sieve_range(j) {
                y[i] += sign * shifts[j];
            }
        }
        y
    }

    /// Converts a vector in the layout's parameterization (working or
    /// natural) to the internal centered one.
    pub fn to_internal(&self, x: &[f64]) -> Vec<f64> {
        self.shift_sieve(x, 1.0)
    }

    pub fn to_external(&self, x: &[f64]) -> Vec<f64> {
        self.shift_sieve(x, -1.0)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Per-record contributions in input order.
    pub fn contributions(&self, x: &[f64], coords: Coords, part: Part) -> Vec<f64> {
        let res = self.layout.resolve(x, coords);
        par::map(self.execution, &self.records, |rec| record_loglik(rec, &res, part))
    }

    /// Total log-likelihood; NaN if any contribution is not finite.
    pub fn loglik(&self, x: &[f64], coords: Coords, part: Part) -> f64 {
        let c = self.contributions(x, coords, part);
        if c.iter().any(|v| !v.is_finite()) {
            return f64::NAN;
        }
        compensated_sum(c)
    }

    /// Total log-likelihood with the offending record named on failure.
    pub fn checked_loglik(&self, x: &[f64], coords: Coords, part: Part) -> Result<f64> {
        let c = self.contributions(x, coords, part);
        if let Some(i) = c.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { id: self.ids[i].clone() });
        }
        Ok(compensated_sum(c))
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `(-ln S(L), -ln S(R))` for one margin.
#[inline]
fn neg_log_surv(pm: &PreparedMargin, beta: &[f64], phi: &[f64], g: &TransformSpec) -> (f64, f64) {
    let scale = dot(&pm.z, beta).exp();
    let at = |b: &Option<Vec<f64>>, empty: f64| match b {
        None => empty,
        Some(b) => g.apply((scale * dot(phi, b)).max(0.0)),
    };
    (at(&pm.l_basis, 0.0), at(&pm.r_basis, f64::INFINITY))
}

#[inline]
fn ln_interval_prob(gl: f64, gr: f64) -> f64 {
    if gr == f64::INFINITY {
        return -gl;
    }
    if gr <= gl {
        return PROB_FLOOR.ln();
    }
    let v = -gl + (-(gl - gr).exp_m1()).ln();
    v.max(PROB_FLOOR.ln())
}

/// Largest `g/(κα)` for which the direct power form cannot overflow.
const DIRECT_LIMIT: f64 = 600.0;

/// Copula mass of `(L1, R1] × (L2, R2]` from `g = -ln S` at the four
/// endpoints. Uses `C = exp(-κ·ln1p((w_u^{1/α} + w_v^{1/α})^α))` with
/// `w = expm1(g/κ)` when that cannot overflow, the log-domain kernel
/// otherwise.
#[inline]
fn rectangle_from_generators(g1: [f64; 2], g2: [f64; 2], alpha: f64, kappa: f64) -> f64 {
    let finite_max = [g1[0], g1[1], g2[0], g2[1]]
        .into_iter()
        .filter(|g| g.is_finite())
        .fold(0.0f64, f64::max);
    if finite_max / (kappa * alpha.min(1.0)) > DIRECT_LIMIT {
        let w1 = [ln_generator(g1[0], kappa), ln_generator(g1[1], kappa)];
        let w2 = [ln_generator(g2[0], kappa), ln_generator(g2[1], kappa)];
        let c = |i: usize, j: usize| ln_copula_from_generators(w1[i], w2[j], alpha, kappa).exp();
        return c(0, 0) - c(0, 1) - c(1, 0) + c(1, 1);
    }
    // Transformed generator values; +inf marks S = 0.
    let tw = |g: f64| {
        if g == f64::INFINITY {
            f64::INFINITY
        } else {
            let w = (g / kappa).exp_m1();
            if alpha == 1.0 {
                w
            } else {
                w.powf(1.0 / alpha)
            }
        }
    };
    let p1 = [tw(g1[0]), tw(g1[1])];
    let p2 = [tw(g2[0]), tw(g2[1])];
    let c = |i: usize, j: usize| {
        let s = p1[i] + p2[j];
        if s == f64::INFINITY {
            return 0.0;
        }
        let sa = if alpha == 1.0 { s } else { s.powf(alpha) };
        (-kappa * sa.ln_1p()).exp()
    };
    c(0, 0) - c(0, 1) - c(1, 0) + c(1, 1)
}

fn record_loglik(rec: &PreparedRecord, res: &Resolved, part: Part) -> f64 {
    let g = |j: usize| {
        rec.margins[j]
            .as_ref()
            .map(|m| neg_log_surv(m, &res.beta[j], &res.phi[j], &res.transforms[j]))
    };
    match part {
        Part::Margin(j) => g(j).map_or(0.0, |(l, r)| ln_interval_prob(l, r)),
        Part::Marginal => (0..2).filter_map(g).map(|(l, r)| ln_interval_prob(l, r)).sum(),
        Part::Joint => match (g(0), g(1)) {
            (Some((l1, r1)), Some((l2, r2))) => {
                let mass = rectangle_from_generators([l1, r1], [l2, r2], res.alpha, res.kappa);
                if mass.is_nan() {
                    f64::NAN
                } else {
                    mass.max(PROB_FLOOR).ln()
                }
            }
            (Some((l, r)), None) | (None, Some((l, r))) => ln_interval_prob(l, r),
            (None, None) => f64::NAN,
        },
    }
}

/// Joint sieve log-likelihood of the dataset at `params`.
pub fn total_loglik(data: &Dataset, params: &ParamVector) -> Result<f64> {
    let prep = PreparedData::new(data, &params.layout, Execution::default())?;
    prep.checked_loglik(&params.values, Coords::Working, Part::Joint)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::margins::TransformSpec;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn names() -> [Vec<String>; 2] {
        [vec!["z1_x".into(), "zs_b".into()], vec!["z2_x".into(), "zs_b".into()]]
    }

    fn layout(tie: TieMode) -> ParamLayout {
        ParamLayout::new(&names(), [TransformSpec::PO, TransformSpec::PO], 3, tie, 10.0).unwrap()
    }

    fn params(tie: TieMode, alpha: f64, kappa: f64) -> ParamVector {
        let l = layout(tie);
        let mut x = vec![0.0; l.len()];
        for (i, b) in [0.3, -0.2, 0.1, 0.25].iter().enumerate().take(l.n_beta()) {
            x[i] = *b;
        }
        x[l.alpha_index()] = logit_from_alpha(alpha);
        x[l.kappa_index()] = kappa.ln();
        for j in 0..2 {
            for (k, i) in l.sieve_range(j).enumerate() {
                x[i] = -1.5 + 0.4 * k as f64 + 0.1 * j as f64;
            }
        }
        ParamVector::new(l, x).unwrap()
    }

    fn rec(id: &str, l1: f64, r1: f64, l2: f64, r2: f64) -> SubjectRecord {
        SubjectRecord::bivariate(id, MarginObs::new(l1, r1, vec![1.0, 1.0]), MarginObs::new(l2, r2, vec![-0.5, 1.0]))
    }

    #[test]
    fn layout_slots() {
        let l = layout(TieMode::None);
        assert_eq!(l.n_beta(), 4);
        assert_eq!(l.len(), 4 + 2 + 8);
        let t = layout(TieMode::All);
        assert_eq!(t.n_beta(), 2);
        assert_eq!(t.len(), 2 + 2 + 4);
        assert_eq!(t.beta_index, [vec![0, 1], vec![0, 1]]);
        let swapped = [vec!["zs_b".to_string(), "z1_x".to_string()], vec!["z2_x".to_string(), "zs_b".to_string()]];
        let s = ParamLayout::new(&swapped, [TransformSpec::PO; 2], 3, TieMode::Beta, 10.0).unwrap();
        assert_eq!(s.beta_index, [vec![0, 1], vec![1, 0]]);
        let free = ParamLayout::new(&names(), [TransformSpec::box_cox(1.0).with_free_r(); 2], 2, TieMode::None, 5.0).unwrap();
        assert_eq!(free.r_index(0), Some(4 + 2 + 6));
        assert_eq!(free.r_index(1), Some(4 + 2 + 7));
        assert_eq!(free.finite_names().len(), 8);
    }

    #[test]
    fn encode_decode_round_trip() {
        for tie in [TieMode::None, TieMode::All] {
            let pv = params(tie, 0.6, 1.7);
            let (m, c) = decode_params(&pv).unwrap();
            let back = encode_params(&pv.layout, &m, &c).unwrap();
            for (i, (a, b)) in pv.values.iter().zip(&back.values).enumerate() {
                if i == pv.layout.alpha_index() || i == pv.layout.kappa_index() {
                    assert!((a - b).abs() < 1e-12);
                } else {
                    assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }
        let pv = params(TieMode::None, 1.0, 1.0);
        assert_eq!(pv.values[pv.layout.kappa_index()], 0.0);
        let (_, c) = decode_params(&pv).unwrap();
        assert!((c.alpha - 1.0).abs() < 1e-12);
        assert!(pv.alpha_at_boundary());
    }

    #[test]
    fn encode_rejects_mismatch() {
        let pv = params(TieMode::None, 0.6, 1.7);
        let (mut m, c) = decode_params(&pv).unwrap();
        m[0].beta.push(1.0);
        assert!(matches!(encode_params(&pv.layout, &m, &c), Err(Error::LayoutMismatch(_))));
        let tied = layout(TieMode::All);
        let (m, c) = decode_params(&pv).unwrap();
        assert!(matches!(encode_params(&tied, &m, &c), Err(Error::LayoutMismatch(_))));
    }

    #[test]
    fn doubly_right_censored_collapses_to_one_term() {
        let pv = params(TieMode::None, 0.6, 1.7);
        let r = rec("a", 2.0, f64::INFINITY, 3.0, f64::INFINITY);
        let (m, c) = decode_params(&pv).unwrap();
        let u = marginal_survival(&m[0], 2.0, &[1.0, 1.0]).unwrap();
        let v = marginal_survival(&m[1], 3.0, &[-0.5, 1.0]).unwrap();
        let expect = copula_cdf(u, v, &c).unwrap().ln();
        assert_abs_diff_eq!(subject_loglik(&r, &pv).unwrap(), expect, epsilon = 1e-12);
    }

    #[test]
    fn near_independence_is_product() {
        // α = 1, κ = 1/θ with θ = 1e-6.
        let pv = params(TieMode::None, 1.0, 1e6);
        let r = rec("a", 1.0, 4.0, 2.5, 7.0);
        let (m, _) = decode_params(&pv).unwrap();
        let p1 = marginal_survival(&m[0], 1.0, &[1.0, 1.0]).unwrap() - marginal_survival(&m[0], 4.0, &[1.0, 1.0]).unwrap();
        let p2 = marginal_survival(&m[1], 2.5, &[-0.5, 1.0]).unwrap() - marginal_survival(&m[1], 7.0, &[-0.5, 1.0]).unwrap();
        assert!((subject_loglik(&r, &pv).unwrap().exp() - p1 * p2).abs() < 1e-4);
    }

    #[test]
    fn rectangles_partition_the_plane() {
        let pv = params(TieMode::None, 0.55, 0.8);
        let cuts = [0.0, 0.5, 1.3, 2.0, 4.0, 6.5, 9.0, f64::INFINITY];
        let mut total = 0.0;
        for w1 in cuts.windows(2) {
            for w2 in cuts.windows(2) {
                total += subject_loglik(&rec("p", w1[0], w1[1], w2[0], w2[1]), &pv).unwrap().exp();
            }
        }
        assert!((total - 1.0).abs() < 1e-8, "{total}");
    }

    #[test]
    fn prepared_matches_reference() {
        let pv = params(TieMode::None, 0.7, 0.5);
        let recs = vec![
            rec("a", 0.0, 2.0, 1.0, 3.0),
            rec("b", 1.5, f64::INFINITY, 0.0, 0.7),
            rec("c", 2.0, 2.5, 4.0, f64::INFINITY),
            rec("d", 0.0, f64::INFINITY, 3.0, 9.5),
            SubjectRecord::single("e", 1, MarginObs::new(1.0, 5.0, vec![0.2, 0.0])),
        ];
        let data = Dataset::with_t_hi(recs.clone(), names(), 10.0).unwrap();
        let total = total_loglik(&data, &pv).unwrap();
        let reference: f64 = recs.iter().map(|r| subject_loglik(r, &pv).unwrap()).sum();
        assert_abs_diff_eq!(total, reference, epsilon = 1e-10);
    }

    #[test]
    fn centering_is_an_exact_reparameterization() {
        for tie in [TieMode::None, TieMode::All] {
            let pv = params(tie, 0.7, 0.5);
            let recs = vec![
                rec("a", 0.0, 2.0, 1.0, 3.0),
                rec("b", 1.5, f64::INFINITY, 0.0, 0.7),
                SubjectRecord::single("e", 1, MarginObs::new(1.0, 5.0, vec![4.2, 0.0])),
            ];
            let data = Dataset::with_t_hi(recs, names(), 10.0).unwrap();
            let plain = PreparedData::new(&data, &pv.layout, Execution::Sequential).unwrap();
            let centered = PreparedData::centered(&data, &pv.layout, Execution::Sequential).unwrap();
            assert!(centered.centers().iter().any(|c| *c != 0.0));
            let inner = centered.to_internal(&pv.values);
            let a = plain.loglik(&pv.values, Coords::Working, Part::Joint);
            let b = centered.loglik(&inner, Coords::Working, Part::Joint);
            assert!((a - b).abs() < 1e-12, "{a} {b}");
            let back = centered.to_external(&inner);
            for (x, y) in back.iter().zip(&pv.values) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn direct_rectangle_matches_log_domain() {
        let grid = [0.0, 1e-8, 0.03, 0.4, 1.7, 6.0, f64::INFINITY];
        for &(alpha, kappa) in &[(1.0, 0.33), (0.6, 2.0), (0.25, 0.05), (0.9, 40.0)] {
            for a in 0..grid.len() {
                for b in a + 1..grid.len() {
                    for c in 0..grid.len() {
                        for d in c + 1..grid.len() {
                            let (g1, g2) = ([grid[a], grid[b]], [grid[c], grid[d]]);
                            let direct = rectangle_from_generators(g1, g2, alpha, kappa);
                            let w1 = [ln_generator(g1[0], kappa), ln_generator(g1[1], kappa)];
                            let w2 = [ln_generator(g2[0], kappa), ln_generator(g2[1], kappa)];
                            let cc = |i: usize, j: usize| ln_copula_from_generators(w1[i], w2[j], alpha, kappa).exp();
                            let logd = cc(0, 0) - cc(0, 1) - cc(1, 0) + cc(1, 1);
                            assert!((direct - logd).abs() < 1e-13, "{g1:?} {g2:?} {alpha} {kappa}: {direct} {logd}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn total_is_additive() {
        let pv = params(TieMode::None, 0.7, 0.5);
        let r = rec("a", 0.4, 2.0, 1.0, 3.0);
        let one = Dataset::with_t_hi(vec![r.clone()], names(), 10.0).unwrap();
        let mut r2 = r.clone();
        r2.id = "b".into();
        let two = Dataset::with_t_hi(vec![r.clone(), r2], names(), 10.0).unwrap();
        let single = subject_loglik(&r, &pv).unwrap();
        assert_abs_diff_eq!(total_loglik(&one, &pv).unwrap(), single, epsilon = 1e-14);
        assert_eq!(total_loglik(&two, &pv).unwrap(), 2.0 * total_loglik(&one, &pv).unwrap());
    }

    #[test]
    fn infinite_sentinel_equals_zero_survival() {
        // A finite R with S(R) = 0 reproduces the right-censored value: push
        // the sieve so high that S underflows at R.
        let l = ParamLayout::new(&names(), [TransformSpec::PH, TransformSpec::PO], 3, TieMode::None, 10.0).unwrap();
        let mut pv = params(TieMode::None, 0.7, 0.5);
        pv.layout = l.clone();
        let last = l.sieve_range(0).end - 1;
        pv.values[last] = 12.0;
        let finite = rec("a", 1.0, 10.0, 2.0, f64::INFINITY);
        let inf = rec("a", 1.0, f64::INFINITY, 2.0, f64::INFINITY);
        let (m, _) = decode_params(&pv).unwrap();
        assert_eq!(marginal_survival(&m[0], 10.0, &[1.0, 1.0]).unwrap(), 0.0);
        assert_eq!(subject_loglik(&finite, &pv).unwrap(), subject_loglik(&inf, &pv).unwrap());
    }

    #[test]
    fn loglik_increases_with_tau_for_equal_survivals() {
        let l = layout(TieMode::None);
        let r = SubjectRecord::bivariate(
            "q",
            MarginObs::new(3.0, f64::INFINITY, vec![0.0, 0.0]),
            MarginObs::new(3.0, f64::INFINITY, vec![0.0, 0.0]),
        );
        let mut prev = f64::NEG_INFINITY;
        for i in 1..=8 {
            let tau = 0.1 * i as f64;
            let kappa = crate::copula::solve_kappa_for_tau(1.0, tau).unwrap();
            let mut x = params(TieMode::None, 1.0, kappa).values;
            // Same sieve on both margins so S1(L) = S2(L).
            for (a, b) in l.sieve_range(0).zip(l.sieve_range(1)) {
                x[b] = x[a];
            }
            let pv = ParamVector::new(l.clone(), x).unwrap();
            let ll = subject_loglik(&r, &pv).unwrap();
            assert!(ll > prev);
            prev = ll;
        }
    }

    #[test]
    fn invalid_records() {
        let bad = rec("bad", 3.0, 2.0, 0.0, 1.0);
        assert!(matches!(bad.validate(), Err(Error::InvalidRecord { .. })));
        let out_of_range = rec("far", 3.0, 12.0, 0.0, 1.0);
        assert!(Dataset::with_t_hi(vec![out_of_range], names(), 10.0).is_err());
        assert!(Dataset::new(vec![], names()).is_err());
    }

    proptest! {
        #[test]
        fn order_invariance(perm_seed in 0u64..1000) {
            let pv = params(TieMode::None, 0.8, 0.9);
            let mut recs: Vec<SubjectRecord> = (0..40)
                .map(|i| {
                    let a = 0.2 * (i % 7) as f64;
                    let b = 0.3 * (i % 5) as f64;
                    rec(&i.to_string(), a, a + 1.0 + (i % 3) as f64, b, if i % 4 == 0 { f64::INFINITY } else { b + 2.0 })
                })
                .collect();
            let base = total_loglik(&Dataset::with_t_hi(recs.clone(), names(), 10.0).unwrap(), &pv).unwrap();
            let mut s = perm_seed;
            for i in (1..recs.len()).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                recs.swap(i, (s >> 33) as usize % (i + 1));
            }
            let shuffled = total_loglik(&Dataset::with_t_hi(recs, names(), 10.0).unwrap(), &pv).unwrap();
            prop_assert!((base - shuffled).abs() < 1e-10);
        }
    }
}
