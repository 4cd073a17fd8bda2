//! Exact optimal velocities and guidance-error curves.
//!
//! Under `x_t = (1-t) x_0 + t ε` the minimiser of the flow-matching loss is
//! `v*(x_t, t, c) = (x_t - E[x_0 | x_t, c]) / t`. For a finite dataset the posterior
//! is a softmax over atoms; for a Gaussian mixture it is a softmax over components,
//! each contributing its own Gaussian posterior mean.

use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::guidance::{GuidanceError, GuidanceSpec, GuidedField};
use crate::mixture::{gaussian_log_pdf, Dataset, MixtureError, MixtureSpec};
use crate::rng::{purpose, substream};
use crate::{Condition, Mat2, Vec2, VelocityField};

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("time must lie in (0, 1], got {0}")]
    BadTime(f64),
    #[error("no data points for condition {0:?}")]
    EmptyClass(Condition),
    #[error("t grid must be ascending inside (0, 1)")]
    BadGrid,
    #[error("n_states must be >= 1")]
    NoStates,
    #[error(transparent)]
    Mixture(#[from] MixtureError),
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
}

pub type Result<T> = std::result::Result<T, OracleError>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VelocityQuery {
    pub x_t: Vec2,
    pub t: f64,
    pub class: Condition,
}

fn check_time(t: f64) -> Result<()> {
    if t > 0.0 && t <= 1.0 {
        Ok(())
    } else {
        Err(OracleError::BadTime(t))
    }
}

/// Total order on points used to make results independent of dataset order.
fn point_order(a: &Vec2, b: &Vec2) -> std::cmp::Ordering {
    a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1]))
}

/// Dataset grouped by class, with atoms in a canonical order.
#[derive(Clone, Debug)]
pub struct EmpiricalOracle {
    by_class: Vec<Vec<Vec2>>,
    all: Vec<Vec2>,
}

impl EmpiricalOracle {
    pub fn new(data: &Dataset) -> Self {
        let n_classes = data.points.iter().map(|p| p.class + 1).max().unwrap_or(0);
        let mut by_class = vec![Vec::new(); n_classes];
        for p in &data.points {
            by_class[p.class].push(p.x);
        }
        for v in &mut by_class {
            v.sort_by(point_order);
        }
        let mut all: Vec<Vec2> = data.points.iter().map(|p| p.x).collect();
        all.sort_by(point_order);
        Self { by_class, all }
    }

    pub fn atoms(&self, class: Condition) -> &[Vec2] {
        match class {
            Some(c) => self.by_class.get(c).map(Vec::as_slice).unwrap_or(&[]),
            None => &self.all,
        }
    }

    pub fn velocity(&self, q: &VelocityQuery) -> Result<Vec2> {
        check_time(q.t)?;
        let atoms = self.atoms(q.class);
        if atoms.is_empty() {
            return Err(OracleError::EmptyClass(q.class));
        }
        Ok(empirical_velocity(atoms, q.x_t, q.t))
    }
}

/// Softmax-weighted `Σ (x_t - x_0^i) w_i / (t Σ w_i)` with log weights
/// `-|x_t - (1-t) x_0^i|² / (2t²)`.
fn empirical_velocity(atoms: &[Vec2], x_t: Vec2, t: f64) -> Vec2 {
    let a = 1.0 - t;
    let inv = 1.0 / (2.0 * t * t);
    let mut max = f64::NEG_INFINITY;
    for x0 in atoms {
        let l = -(x_t - x0 * a).norm_squared() * inv;
        if l > max {
            max = l;
        }
    }
    let mut den = 0.0;
    let mut num = Vec2::zeros();
    for x0 in atoms {
        let w = (-(x_t - x0 * a).norm_squared() * inv - max).exp();
        den += w;
        num += (x_t - x0) * w;
    }
    num / (t * den)
}

pub fn optimal_velocity_empirical(data: &Dataset, q: &VelocityQuery) -> Result<Vec2> {
    EmpiricalOracle::new(data).velocity(q)
}

impl VelocityField for EmpiricalOracle {
    /// Panics on an empty class or `t` outside `(0, 1]`.
    fn velocity_batch(&self, xs: &[Vec2], t: f64, conds: &[Condition]) -> Vec<Vec2> {
        xs.iter()
            .zip(conds)
            .map(|(x, c)| self.velocity(&VelocityQuery { x_t: *x, t, class: *c }).expect("valid oracle query"))
            .collect()
    }
}

/// Closed-form optimal velocity of a Gaussian mixture.
#[derive(Clone, Copy, Debug)]
pub struct MixtureOracle<'a>(pub &'a MixtureSpec);

/// Posterior component probabilities `w_i ∝ π_i N(x_t; (1-t) μ_i, (1-t)² Σ_i + t² I)`
/// together with the per-component posterior means of `x_0`.
pub fn mixture_posterior(spec: &MixtureSpec, q: &VelocityQuery) -> Result<Vec<(usize, f64, Vec2)>> {
    check_time(q.t)?;
    let t = q.t;
    let a = 1.0 - t;
    let members = spec.weighted_members(q.class)?;
    let mut out = Vec::with_capacity(members.len());
    let mut max = f64::NEG_INFINITY;
    for (i, pi) in members {
        let comp = &spec.components()[i];
        let cov_t = comp.cov * (a * a) + Mat2::identity() * (t * t);
        let mean_t = comp.mean * a;
        let lw = pi.ln() + gaussian_log_pdf(&q.x_t, &mean_t, &cov_t);
        let inv = cov_t.try_inverse().expect("noised covariance is SPD");
        let m = comp.mean + comp.cov * inv * (q.x_t - mean_t) * a;
        max = max.max(lw);
        out.push((i, lw, m));
    }
    let mut total = 0.0;
    for e in &mut out {
        e.1 = (e.1 - max).exp();
        total += e.1;
    }
    for e in &mut out {
        e.1 /= total;
    }
    Ok(out)
}

pub fn optimal_velocity_mixture(spec: &MixtureSpec, q: &VelocityQuery) -> Result<Vec2> {
    let post = mixture_posterior(spec, q)?;
    let mean = post.iter().fold(Vec2::zeros(), |acc, (_, w, m)| acc + m * *w);
    Ok((q.x_t - mean) / q.t)
}

impl VelocityField for MixtureOracle<'_> {
    /// Panics on an unselected class or `t` outside `(0, 1]`.
    fn velocity_batch(&self, xs: &[Vec2], t: f64, conds: &[Condition]) -> Vec<Vec2> {
        xs.iter()
            .zip(conds)
            .map(|(x, c)| {
                optimal_velocity_mixture(self.0, &VelocityQuery { x_t: *x, t, class: *c }).expect("valid oracle query")
            })
            .collect()
    }
}

/// Where ground-truth states and the reference velocity come from.
#[derive(Clone, Copy, Debug)]
pub enum OracleSource<'a> {
    Mixture(&'a MixtureSpec),
    Empirical(&'a Dataset),
}

/// `n` midpoints of `(0, 1)`.
pub fn midpoint_grid(n: usize) -> Vec<f64> {
    (0..n).map(|k| (k as f64 + 0.5) / n as f64).collect()
}

/// Default grid: 28 midpoints.
pub fn default_t_grid() -> Vec<f64> {
    midpoint_grid(28)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ErrorCurve {
    pub t_grid: Vec<f64>,
    /// Mean squared Euclidean distance to the oracle per `t`.
    pub values: Vec<f64>,
    /// Standard error of each mean.
    pub stderr: Vec<f64>,
    pub guidance_label: String,
    pub w: f64,
    pub n_states: usize,
}

impl ErrorCurve {
    /// Mean of `values` over grid points with `lo <= t <= hi`.
    pub fn band_mean(&self, lo: f64, hi: f64) -> f64 {
        let sel: Vec<f64> = self
            .t_grid
            .iter()
            .zip(&self.values)
            .filter(|(t, _)| **t >= lo && **t <= hi)
            .map(|(_, v)| *v)
            .collect();
        sel.iter().sum::<f64>() / sel.len().max(1) as f64
    }
}

/// Forward-noised states `(x_t, class)` at time `t`, classes stratified round-robin
/// over the selected classes.
pub(crate) fn stratified_states<R: Rng>(
    source: &OracleSource,
    empirical: Option<&EmpiricalOracle>,
    t: f64,
    n: usize,
    rng: &mut R,
) -> (Vec<Vec2>, Vec<Condition>) {
    let classes: Vec<usize> = match source {
        OracleSource::Mixture(spec) => spec.selected_classes().to_vec(),
        OracleSource::Empirical(_) => {
            let e = empirical.expect("empirical index");
            (0..e.by_class.len()).filter(|&c| !e.by_class[c].is_empty()).collect()
        }
    };
    let mut xs = Vec::with_capacity(n);
    let mut cs = Vec::with_capacity(n);
    for j in 0..n {
        let class = classes[j % classes.len()];
        let x0 = match source {
            OracleSource::Mixture(spec) => spec.sample_from_class(class, rng).x,
            OracleSource::Empirical(_) => {
                let atoms = empirical.unwrap().atoms(Some(class));
                atoms[rng.random_range(0..atoms.len())]
            }
        };
        let eps = Vec2::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
        xs.push(x0 * (1.0 - t) + eps * t);
        cs.push(Some(class));
    }
    (xs, cs)
}

fn mean_and_stderr(vals: &[f64]) -> (f64, f64) {
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    if vals.len() < 2 {
        return (mean, 0.0);
    }
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Per-`t` mean squared distance between the guided velocity and the oracle.
///
/// Each grid index draws its states from its own substream of `seed`.
pub fn guidance_error_curve(
    strong: &dyn VelocityField,
    weak: Option<&dyn VelocityField>,
    guidance: &GuidanceSpec,
    source: OracleSource,
    t_grid: &[f64],
    n_states: usize,
    seed: u64,
) -> Result<ErrorCurve> {
    if n_states == 0 {
        return Err(OracleError::NoStates);
    }
    if t_grid.is_empty() || t_grid.iter().any(|&t| !(t > 0.0 && t < 1.0)) || t_grid.windows(2).any(|w| w[0] >= w[1]) {
        return Err(OracleError::BadGrid);
    }
    let guided = GuidedField::new(strong, weak, guidance)?;
    let empirical = match source {
        OracleSource::Empirical(d) => {
            if d.is_empty() {
                return Err(OracleError::EmptyClass(None));
            }
            Some(EmpiricalOracle::new(d))
        }
        OracleSource::Mixture(_) => None,
    };
    let mut values = Vec::with_capacity(t_grid.len());
    let mut stderr = Vec::with_capacity(t_grid.len());
    for (k, &t) in t_grid.iter().enumerate() {
        let mut rng = substream(seed, purpose::ERROR_CURVE, k as u64);
        let (xs, cs) = stratified_states(&source, empirical.as_ref(), t, n_states, &mut rng);
        let v = guided.velocity_batch(&xs, t, &cs);
        let reference = match (&source, &empirical) {
            (OracleSource::Mixture(spec), _) => MixtureOracle(spec).velocity_batch(&xs, t, &cs),
            (_, Some(e)) => e.velocity_batch(&xs, t, &cs),
            _ => unreachable!(),
        };
        let d: Vec<f64> = v.iter().zip(&reference).map(|(a, b)| (a - b).norm_squared()).collect();
        let (m, se) = mean_and_stderr(&d);
        values.push(m);
        stderr.push(se);
    }
    Ok(ErrorCurve {
        t_grid: t_grid.to_vec(),
        values,
        stderr,
        guidance_label: guidance.label(),
        w: guidance.primary_scale(),
        n_states,
    })
}
