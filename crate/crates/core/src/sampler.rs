//! Euler ODE and Euler–Maruyama SDE samplers running from noise (`t_start`) to data
//! (`t_end`).
//!
//! Chain `i` draws its initial noise from `substream(seed, SAMPLE_NOISE, i)` and its
//! diffusion noise from `substream(seed, SDE_NOISE, i)`, so results do not depend on
//! batch size and a zero-churn SDE reproduces the ODE exactly.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::rng::{purpose, substream};
use crate::{Condition, Vec2, VelocityField};

#[derive(Debug, Error, PartialEq)]
pub enum SamplerError {
    #[error("invalid sampler spec: {0}")]
    Invalid(String),
    #[error("non-finite state at step {step} (t = {t})")]
    NonFinite { step: usize, t: f64 },
    #[error("unknown sampler kind `{0}` (expected ode or sde)")]
    UnknownKind(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SamplerKind {
    OdeEuler,
    SdeEulerMaruyama,
}

impl fmt::Display for SamplerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SamplerKind::OdeEuler => "ode",
            SamplerKind::SdeEulerMaruyama => "sde",
        })
    }
}

impl FromStr for SamplerKind {
    type Err = SamplerError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "ode" | "ode_euler" | "euler" => Ok(SamplerKind::OdeEuler),
            "sde" | "sde_euler_maruyama" | "euler_maruyama" => Ok(SamplerKind::SdeEulerMaruyama),
            _ => Err(SamplerError::UnknownKind(s.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SamplerSpec {
    pub kind: SamplerKind,
    pub steps: usize,
    pub t_start: f64,
    pub t_end: f64,
    /// Diffusion level of the reverse SDE; ignored by the ODE.
    pub churn: f64,
    pub seed: u64,
    pub record_trajectory: bool,
}

impl Default for SamplerSpec {
    fn default() -> Self {
        Self {
            kind: SamplerKind::OdeEuler,
            steps: 128,
            t_start: 1.0,
            t_end: 1e-3,
            churn: 1.0,
            seed: 0,
            record_trajectory: false,
        }
    }
}

impl SamplerSpec {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.steps == 0 {
            return Err(SamplerError::Invalid("steps must be >= 1".into()));
        }
        if !(self.t_start > self.t_end && self.t_end >= 0.0 && self.t_start <= 1.0) {
            return Err(SamplerError::Invalid(format!(
                "need 1 >= t_start > t_end >= 0, got t_start = {}, t_end = {}",
                self.t_start, self.t_end
            )));
        }
        if !(self.churn >= 0.0 && self.churn.is_finite()) {
            return Err(SamplerError::Invalid(format!("churn must be >= 0, got {}", self.churn)));
        }
        Ok(())
    }

    /// Uniform descending grid `t_0 = t_start, ..., t_steps = t_end`.
    pub fn grid(&self) -> Vec<f64> {
        let h = (self.t_start - self.t_end) / self.steps as f64;
        (0..=self.steps)
            .map(|k| if k == self.steps { self.t_end } else { self.t_start - k as f64 * h })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SampleBatch {
    pub finals: Vec<Vec2>,
    pub class_labels: Vec<Condition>,
    /// `trajectories[k][i]`: state of chain `i` at grid point `k`.
    pub trajectories: Option<Vec<Vec<Vec2>>>,
    pub guidance_label: String,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.finals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.finals.is_empty()
    }
}

/// `n` prompts cycling through `classes`.
pub fn round_robin_prompts(classes: &[usize], n: usize) -> Vec<Condition> {
    if classes.is_empty() {
        return vec![None; n];
    }
    (0..n).map(|i| Some(classes[i % classes.len()])).collect()
}

fn initial_noise(seed: u64, n: usize) -> Vec<Vec2> {
    (0..n)
        .map(|i| {
            let mut r = substream(seed, purpose::SAMPLE_NOISE, i as u64);
            Vec2::new(r.sample(StandardNormal), r.sample(StandardNormal))
        })
        .collect()
}

fn integrate(
    field: &dyn VelocityField,
    spec: &SamplerSpec,
    classes: &[Condition],
    label: &str,
    stochastic: bool,
) -> Result<SampleBatch, SamplerError> {
    spec.validate()?;
    let n = classes.len();
    let grid = spec.grid();
    let mut xs = initial_noise(spec.seed, n);
    let mut noise: Vec<ChaCha8Rng> = if stochastic {
        (0..n).map(|i| substream(spec.seed, purpose::SDE_NOISE, i as u64)).collect()
    } else {
        Vec::new()
    };
    let mut traj = spec.record_trajectory.then(|| vec![xs.clone()]);
    for k in 0..spec.steps {
        let t = grid[k];
        let h = t - grid[k + 1];
        let v = field.velocity_batch(&xs, t, classes);
        if stochastic && spec.churn > 0.0 {
            let amp = (2.0 * spec.churn * t * h).sqrt();
            for i in 0..n {
                let z = Vec2::new(noise[i].sample(StandardNormal), noise[i].sample(StandardNormal));
                let corr = (xs[i] + v[i] * (1.0 - t)) * spec.churn;
                xs[i] = xs[i] - v[i] * h - corr * h + z * amp;
            }
        } else {
            for i in 0..n {
                xs[i] -= v[i] * h;
            }
        }
        if xs.iter().any(|x| !x.iter().all(|c| c.is_finite())) {
            return Err(SamplerError::NonFinite { step: k, t });
        }
        if let Some(tr) = traj.as_mut() {
            tr.push(xs.clone());
        }
    }
    Ok(SampleBatch { finals: xs, class_labels: classes.to_vec(), trajectories: traj, guidance_label: label.to_string() })
}

/// Euler integration of `dx = v dt` backwards in time.
pub fn sample_ode(
    field: &dyn VelocityField,
    spec: &SamplerSpec,
    classes: &[Condition],
    label: &str,
) -> Result<SampleBatch, SamplerError> {
    integrate(field, spec, classes, label, false)
}

/// Euler–Maruyama for the reverse SDE with diffusion `g² = 2·churn·t`.
///
/// The score follows from the velocity as `-(x + (1-t) v) / t`, giving the step
/// `x ← x - h v - h·churn·(x + (1-t) v) + sqrt(2·churn·t·h) z`.
pub fn sample_sde(
    field: &dyn VelocityField,
    spec: &SamplerSpec,
    classes: &[Condition],
    label: &str,
) -> Result<SampleBatch, SamplerError> {
    integrate(field, spec, classes, label, true)
}

pub fn sample(
    field: &dyn VelocityField,
    spec: &SamplerSpec,
    classes: &[Condition],
    label: &str,
) -> Result<SampleBatch, SamplerError> {
    match spec.kind {
        SamplerKind::OdeEuler => sample_ode(field, spec, classes, label),
        SamplerKind::SdeEulerMaruyama => sample_sde(field, spec, classes, label),
    }
}
