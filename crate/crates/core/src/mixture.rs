//! Recursive class-conditional Gaussian mixtures.
//!
//! A main branch is grown from a base point and cut into one segment per class.
//! Each segment anchors a class subbranch which recursively spawns children; every
//! branch emits a few anisotropic Gaussian components along its length. The result
//! is a [`MixtureSpec`] that is both the training distribution and the exact oracle.

use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::rng::{purpose, substream};
use crate::{Condition, Mat2, Vec2};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Error)]
pub enum MixtureError {
    #[error("component {index}: raw weight must be positive, got {weight}")]
    NonPositiveWeight { index: usize, weight: f64 },
    #[error("component {index}: covariance is not symmetric positive-definite")]
    NotPositiveDefinite { index: usize },
    #[error("invalid toy config: {0}")]
    InvalidConfig(String),
    #[error("class {0} is selected but has no components")]
    EmptyClass(usize),
    #[error("class {class} is not among the selected classes")]
    UnknownClass { class: usize },
    #[error("time {0} outside [0, 1)")]
    TimeOutOfRange(f64),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
}

pub type Result<T> = std::result::Result<T, MixtureError>;

/// Label attached to a component: a class, or the main-branch sentinel.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ComponentLabel {
    Class(usize),
    Base,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GaussianComponent {
    pub weight_raw: f64,
    pub mean: Vec2,
    pub cov: Mat2,
    pub label: ComponentLabel,
}

impl GaussianComponent {
    pub fn new(weight_raw: f64, mean: Vec2, cov: Mat2, label: ComponentLabel) -> Result<Self> {
        let c = Self { weight_raw, mean, cov, label };
        c.validate(0)?;
        Ok(c)
    }

    fn validate(&self, index: usize) -> Result<()> {
        if !(self.weight_raw > 0.0) || !self.weight_raw.is_finite() {
            return Err(MixtureError::NonPositiveWeight { index, weight: self.weight_raw });
        }
        if !is_spd(&self.cov) || !self.mean.iter().all(|v| v.is_finite()) {
            return Err(MixtureError::NotPositiveDefinite { index });
        }
        Ok(())
    }
}

/// Symmetric with both eigenvalues strictly positive.
pub fn is_spd(m: &Mat2) -> bool {
    let (a, b, c, d) = (m[(0, 0)], m[(0, 1)], m[(1, 0)], m[(1, 1)]);
    if ![a, b, c, d].iter().all(|v| v.is_finite()) {
        return false;
    }
    let tol = 1e-12 * (a.abs() + d.abs()).max(f64::MIN_POSITIVE);
    if (b - c).abs() > tol {
        return false;
    }
    // 2x2 symmetric: both eigenvalues positive iff trace > 0 and det > 0.
    a > 0.0 && a * d - b * c > 0.0
}

/// Log density of `N(mean, cov)` at `x` for a 2×2 SPD covariance.
pub fn gaussian_log_pdf(x: &Vec2, mean: &Vec2, cov: &Mat2) -> f64 {
    let (a, b, d) = (cov[(0, 0)], cov[(0, 1)], cov[(1, 1)]);
    let det = a * d - b * b;
    let dx = x[0] - mean[0];
    let dy = x[1] - mean[1];
    let quad = (d * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det;
    -LN_2PI - 0.5 * det.ln() - 0.5 * quad
}

/// Squared Mahalanobis distance of `x` from `N(mean, cov)`.
pub fn mahalanobis_sq(x: &Vec2, mean: &Vec2, cov: &Mat2) -> f64 {
    let (a, b, d) = (cov[(0, 0)], cov[(0, 1)], cov[(1, 1)]);
    let det = a * d - b * b;
    let dx = x[0] - mean[0];
    let dy = x[1] - mean[1];
    (d * dx * dx - 2.0 * b * dx * dy + a * dy * dy) / det
}

/// `log Σ exp(v_i)` with max subtraction. Empty input gives `-inf`.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    let sum: f64 = values.iter().map(|v| (v - max).exp()).sum();
    max + sum.ln()
}

/// Cholesky factor of a 2×2 SPD matrix (lower triangular).
pub fn cholesky2(m: &Mat2) -> Mat2 {
    let l00 = m[(0, 0)].sqrt();
    let l10 = m[(1, 0)] / l00;
    let l11 = (m[(1, 1)] - l10 * l10).sqrt();
    Mat2::new(l00, 0.0, l10, l11)
}

/// Rotation by `angle` radians.
pub fn rotation(angle: f64) -> Mat2 {
    let (s, c) = angle.sin_cos();
    Mat2::new(c, -s, s, c)
}

/// Class-conditional Gaussian mixture with per-class normalized weights.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureSpec {
    components: Vec<GaussianComponent>,
    num_classes: usize,
    selected: Vec<usize>,
    /// Component indices per class (indexed by class id).
    members: Vec<Vec<usize>>,
    /// π_i within the component's class; 0 for base components.
    class_weights: Vec<f64>,
}

impl MixtureSpec {
    pub fn new(
        components: Vec<GaussianComponent>,
        num_classes: usize,
        selected_classes: Option<Vec<usize>>,
    ) -> Result<Self> {
        if num_classes == 0 {
            return Err(MixtureError::InvalidConfig("num_classes must be >= 1".into()));
        }
        for (i, c) in components.iter().enumerate() {
            c.validate(i)?;
            if let ComponentLabel::Class(k) = c.label {
                if k >= num_classes {
                    return Err(MixtureError::InvalidConfig(format!(
                        "component {i} has class {k} >= num_classes {num_classes}"
                    )));
                }
            }
        }
        let mut selected = selected_classes.unwrap_or_else(|| (0..num_classes).collect());
        selected.sort_unstable();
        selected.dedup();
        if selected.is_empty() {
            return Err(MixtureError::InvalidConfig("no classes selected".into()));
        }
        if let Some(&bad) = selected.iter().find(|&&c| c >= num_classes) {
            return Err(MixtureError::UnknownClass { class: bad });
        }
        let mut members = vec![Vec::new(); num_classes];
        for (i, c) in components.iter().enumerate() {
            if let ComponentLabel::Class(k) = c.label {
                members[k].push(i);
            }
        }
        for &c in &selected {
            if members[c].is_empty() {
                return Err(MixtureError::EmptyClass(c));
            }
        }
        let mut class_weights = vec![0.0; components.len()];
        for idx in &members {
            let total: f64 = idx.iter().map(|&i| components[i].weight_raw).sum();
            for &i in idx {
                class_weights[i] = components[i].weight_raw / total;
            }
        }
        Ok(Self { components, num_classes, selected, members, class_weights })
    }

    pub fn components(&self) -> &[GaussianComponent] {
        &self.components
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn selected_classes(&self) -> &[usize] {
        &self.selected
    }

    pub fn is_selected(&self, class: usize) -> bool {
        self.selected.binary_search(&class).is_ok()
    }

    /// Component indices `I_c` of a class.
    pub fn class_members(&self, class: usize) -> &[usize] {
        self.members.get(class).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Normalized within-class weight `π_i^(c)` of component `i`.
    pub fn class_weight(&self, component: usize) -> f64 {
        self.class_weights[component]
    }

    /// `(component index, mixture weight)` pairs realizing `p(x | c)`; for the null
    /// condition the weights include the uniform class prior.
    pub fn weighted_members(&self, cond: Condition) -> Result<Vec<(usize, f64)>> {
        match cond {
            Some(c) => {
                if !self.is_selected(c) {
                    return Err(MixtureError::UnknownClass { class: c });
                }
                Ok(self.members[c].iter().map(|&i| (i, self.class_weights[i])).collect())
            }
            None => {
                let prior = 1.0 / self.selected.len() as f64;
                Ok(self
                    .selected
                    .iter()
                    .flat_map(|&c| self.members[c].iter().map(move |&i| (i, prior)))
                    .map(|(i, p)| (i, p * self.class_weights[i]))
                    .collect())
            }
        }
    }

    /// `log p_t(x | c)` of the forward-noised mixture `x_t = (1-t) x_0 + t ε`.
    pub fn log_density(&self, x: &Vec2, cond: Condition, t: f64) -> Result<f64> {
        if !(0.0..1.0).contains(&t) {
            return Err(MixtureError::TimeOutOfRange(t));
        }
        let a = 1.0 - t;
        let terms: Vec<f64> = self
            .weighted_members(cond)?
            .into_iter()
            .map(|(i, w)| {
                let comp = &self.components[i];
                let mean = comp.mean * a;
                let cov = comp.cov * (a * a) + Mat2::identity() * (t * t);
                w.ln() + gaussian_log_pdf(x, &mean, &cov)
            })
            .collect();
        Ok(log_sum_exp(&terms))
    }

    /// The mixture pushed through the forward process at time `t`: means scaled by
    /// `1-t`, covariances `(1-t)^2 Σ + t^2 I`.
    pub fn noised(&self, t: f64) -> Result<MixtureSpec> {
        if !(0.0..1.0).contains(&t) {
            return Err(MixtureError::TimeOutOfRange(t));
        }
        let a = 1.0 - t;
        let comps = self
            .components
            .iter()
            .map(|c| GaussianComponent {
                weight_raw: c.weight_raw,
                mean: c.mean * a,
                cov: c.cov * (a * a) + Mat2::identity() * (t * t),
                label: c.label,
            })
            .collect();
        MixtureSpec::new(comps, self.num_classes, Some(self.selected.clone()))
    }

    /// Component-weighted mean of class `c`.
    pub fn class_mean(&self, class: usize) -> Result<Vec2> {
        Ok(self
            .weighted_members(Some(class))?
            .into_iter()
            .fold(Vec2::zeros(), |acc, (i, w)| acc + self.components[i].mean * w))
    }

    /// Draws `(x, class, component)` ancestrally: uniform class, then π, then Gaussian.
    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> LabeledPoint {
        let class = self.selected[rng.random_range(0..self.selected.len())];
        self.sample_from_class(class, rng)
    }

    pub fn sample_from_class<R: Rng + ?Sized>(&self, class: usize, rng: &mut R) -> LabeledPoint {
        let members = &self.members[class];
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = *members.last().expect("selected classes are nonempty");
        for &i in members {
            acc += self.class_weights[i];
            if u < acc {
                pick = i;
                break;
            }
        }
        let comp = &self.components[pick];
        let z = Vec2::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
        LabeledPoint { x: comp.mean + cholesky2(&comp.cov) * z, class, component: pick }
    }

    /// Versioned text serialization; floats use round-trip formatting.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str("# guidance-lab mixture spec\n");
        s.push_str("format = mixture-spec/1\n");
        let _ = writeln!(s, "num_classes = {}", self.num_classes);
        let sel: Vec<String> = self.selected.iter().map(|c| c.to_string()).collect();
        let _ = writeln!(s, "selected_classes = {}", sel.join(","));
        let _ = writeln!(s, "components = {}", self.components.len());
        s.push_str("# label weight_raw mean_x mean_y cov_xx cov_xy cov_yy\n");
        for c in &self.components {
            let label = match c.label {
                ComponentLabel::Class(k) => k.to_string(),
                ComponentLabel::Base => "base".to_string(),
            };
            let _ = writeln!(
                s,
                "{} {} {} {} {} {} {}",
                label,
                c.weight_raw,
                c.mean[0],
                c.mean[1],
                c.cov[(0, 0)],
                c.cov[(0, 1)],
                c.cov[(1, 1)]
            );
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let perr = |line: usize, msg: &str| MixtureError::Parse { line, msg: msg.to_string() };
        let mut num_classes = None;
        let mut selected = None;
        let mut expected = None;
        let mut format_ok = false;
        let mut comps = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line_no = n + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some((k, v)) = line.split_once('=') {
                let (k, v) = (k.trim(), v.trim());
                match k {
                    "format" => {
                        if v != "mixture-spec/1" {
                            return Err(perr(line_no, &format!("unsupported format {v}")));
                        }
                        format_ok = true;
                    }
                    "num_classes" => {
                        num_classes = Some(v.parse::<usize>().map_err(|e| perr(line_no, &e.to_string()))?)
                    }
                    "selected_classes" => {
                        let list = v
                            .split(',')
                            .filter(|s| !s.trim().is_empty())
                            .map(|s| s.trim().parse::<usize>())
                            .collect::<std::result::Result<Vec<_>, _>>()
                            .map_err(|e| perr(line_no, &e.to_string()))?;
                        selected = Some(list);
                    }
                    "components" => {
                        expected = Some(v.parse::<usize>().map_err(|e| perr(line_no, &e.to_string()))?)
                    }
                    other => return Err(perr(line_no, &format!("unknown key {other}"))),
                }
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 7 {
                return Err(perr(line_no, "expected 7 fields in component row"));
            }
            let label = if fields[0] == "base" {
                ComponentLabel::Base
            } else {
                ComponentLabel::Class(fields[0].parse().map_err(|_| perr(line_no, "bad label"))?)
            };
            let nums = fields[1..]
                .iter()
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| perr(line_no, &e.to_string()))?;
            comps.push(GaussianComponent {
                weight_raw: nums[0],
                mean: Vec2::new(nums[1], nums[2]),
                cov: Mat2::new(nums[3], nums[4], nums[4], nums[5]),
                label,
            });
        }
        if !format_ok {
            return Err(perr(0, "missing format line"));
        }
        let num_classes = num_classes.ok_or_else(|| perr(0, "missing num_classes"))?;
        if let Some(k) = expected {
            if k != comps.len() {
                return Err(perr(0, &format!("expected {k} components, found {}", comps.len())));
            }
        }
        MixtureSpec::new(comps, num_classes, selected)
    }

    /// SHA-256 of the canonical text form, hex encoded.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }
}

/// Geometry and size parameters of the recursive construction.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyConfig {
    pub num_classes: usize,
    pub max_depth: usize,
    pub branch_factor: usize,
    pub seed: u64,
    pub scale: [f64; 2],
    pub base_point: [f64; 2],
    pub main_angle_deg: f64,
    pub depth_decay: f64,
    pub points_per_branch: usize,
    /// Length `s^(0)` of a class subbranch.
    pub subbranch_length: f64,
    /// Angle between a class subbranch and the main branch; sides alternate by class.
    pub subbranch_angle_deg: f64,
    /// Children of a branch fan out over `±child_angle_deg`.
    pub child_angle_deg: f64,
    /// `s^(d+1) = child_length_ratio · s^(d)`.
    pub child_length_ratio: f64,
    /// Standard deviation along the branch, relative to `s^(d)`.
    pub thickness_along: f64,
    /// Standard deviation across the branch, relative to `s^(d)`.
    pub thickness_across: f64,
    /// Uniform random perturbation of every branch angle.
    pub angle_jitter_deg: f64,
    /// Components emitted on the main branch with the base label (dropped by class selection).
    pub main_branch_points: usize,
    pub selected_classes: Option<Vec<usize>>,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            num_classes: 12,
            max_depth: 2,
            branch_factor: 2,
            seed: 0,
            scale: [1.0, 1.0],
            base_point: [0.0, -1.0],
            main_angle_deg: 85.0,
            depth_decay: 0.6,
            points_per_branch: 3,
            subbranch_length: 0.5,
            subbranch_angle_deg: 60.0,
            child_angle_deg: 35.0,
            child_length_ratio: 0.55,
            thickness_along: 0.08,
            thickness_across: 0.03,
            angle_jitter_deg: 6.0,
            main_branch_points: 0,
            selected_classes: None,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(MixtureError::InvalidConfig(m.to_string()));
        if self.num_classes < 1 {
            return bad("num_classes must be >= 1");
        }
        if self.max_depth < 1 {
            return bad("max_depth must be >= 1");
        }
        if self.branch_factor < 1 {
            return bad("branch_factor must be >= 1");
        }
        if !(self.depth_decay > 0.0 && self.depth_decay <= 1.0) {
            return bad("depth_decay must be in (0, 1]");
        }
        if self.points_per_branch < 1 {
            return bad("points_per_branch must be >= 1");
        }
        if !(self.subbranch_length > 0.0) || !(self.child_length_ratio > 0.0) {
            return bad("branch lengths must be positive");
        }
        Ok(())
    }

    /// Length of the main branch.
    pub fn main_branch_length(&self) -> f64 {
        0.4 * (1.0 + 0.1 * self.num_classes as f64)
    }

    /// `λ` positions of the components along a branch.
    pub fn lambdas(&self) -> Vec<f64> {
        let p = self.points_per_branch;
        (1..=p).map(|j| j as f64 / (p + 1) as f64).collect()
    }
}

/// The three regimes of the toy study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Preset {
    /// Few classes, deep in-class structure.
    A,
    /// Many classes, shallow in-class structure.
    B,
    /// Intermediate.
    C,
}

impl std::str::FromStr for Preset {
    type Err = MixtureError;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "A" | "a" => Ok(Preset::A),
            "B" | "b" => Ok(Preset::B),
            "C" | "c" => Ok(Preset::C),
            other => Err(MixtureError::InvalidConfig(format!("unknown preset {other:?}"))),
        }
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Preset::A => "A",
            Preset::B => "B",
            Preset::C => "C",
        };
        f.write_str(s)
    }
}

pub fn preset_config(name: Preset) -> ToyConfig {
    let (num_classes, max_depth, branch_factor) = match name {
        Preset::A => (4, 3, 2),
        Preset::B => (24, 1, 2),
        Preset::C => (12, 2, 2),
    };
    ToyConfig { num_classes, max_depth, branch_factor, ..ToyConfig::default() }
}

struct Builder<'a, R> {
    cfg: &'a ToyConfig,
    rng: R,
    lambdas: Vec<f64>,
    out: Vec<GaussianComponent>,
}

impl<R: Rng> Builder<'_, R> {
    fn jitter(&mut self) -> f64 {
        let j = self.cfg.angle_jitter_deg;
        if j > 0.0 {
            self.rng.random_range(-j..=j).to_radians()
        } else {
            0.0
        }
    }

    fn emit_branch(&mut self, origin: Vec2, angle: f64, size: f64, depth: usize, label: ComponentLabel) -> Result<()> {
        let cfg = self.cfg;
        let dir = Vec2::new(angle.cos(), angle.sin()) * size;
        let rot = rotation(angle);
        let d = Mat2::new(
            (cfg.thickness_along * size).powi(2),
            0.0,
            0.0,
            (cfg.thickness_across * size).powi(2),
        );
        let mut cov = rot * d * rot.transpose();
        // Exact symmetry for the stored matrix.
        let off = 0.5 * (cov[(0, 1)] + cov[(1, 0)]);
        cov[(0, 1)] = off;
        cov[(1, 0)] = off;
        let weight = size * cfg.depth_decay.powi(depth as i32);
        for j in 0..self.lambdas.len() {
            let p = origin + dir * self.lambdas[j];
            let mean = Vec2::new(p[0] * cfg.scale[0], p[1] * cfg.scale[1]);
            let comp = GaussianComponent { weight_raw: weight, mean, cov, label };
            comp.validate(self.out.len())?;
            self.out.push(comp);
        }
        Ok(())
    }

    fn subbranch(&mut self, origin: Vec2, angle: f64, size: f64, depth: usize, class: usize) -> Result<()> {
        self.emit_branch(origin, angle, size, depth, ComponentLabel::Class(class))?;
        if depth + 1 < self.cfg.max_depth {
            let tip = origin + Vec2::new(angle.cos(), angle.sin()) * size;
            let b = self.cfg.branch_factor;
            let spread = self.cfg.child_angle_deg.to_radians();
            for k in 0..b {
                let offset = if b == 1 { 0.0 } else { -spread + 2.0 * spread * k as f64 / (b - 1) as f64 };
                let child_angle = angle + offset + self.jitter();
                self.subbranch(tip, child_angle, size * self.cfg.child_length_ratio, depth + 1, class)?;
            }
        }
        Ok(())
    }
}

/// Builds the recursive mixture for `config`; deterministic in all fields.
pub fn build_recursive_mixture(config: &ToyConfig) -> Result<MixtureSpec> {
    config.validate()?;
    let mut b = Builder {
        cfg: config,
        rng: substream(config.seed, purpose::GEOMETRY, 0),
        lambdas: config.lambdas(),
        out: Vec::new(),
    };
    let main_angle = config.main_angle_deg.to_radians();
    let main_dir = Vec2::new(main_angle.cos(), main_angle.sin());
    let base = Vec2::new(config.base_point[0], config.base_point[1]);
    let length = config.main_branch_length();
    if config.main_branch_points > 0 {
        let saved = std::mem::replace(
            &mut b.lambdas,
            (1..=config.main_branch_points)
                .map(|j| j as f64 / (config.main_branch_points + 1) as f64)
                .collect(),
        );
        b.emit_branch(base, main_angle, length, 0, ComponentLabel::Base)?;
        b.lambdas = saved;
    }
    let n = config.num_classes;
    let side_angle = config.subbranch_angle_deg.to_radians();
    for class in 0..n {
        let anchor = base + main_dir * (length * (class as f64 + 0.5) / n as f64);
        let side = if class % 2 == 0 { 1.0 } else { -1.0 };
        let angle = main_angle + side * side_angle + b.jitter();
        b.subbranch(anchor, angle, config.subbranch_length, 0, class)?;
    }
    MixtureSpec::new(b.out, n, config.selected_classes.clone())
}

/// A labeled data point together with the component that generated it.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabeledPoint {
    pub x: Vec2,
    pub class: usize,
    pub component: usize,
}

/// A finite labeled sample from a mixture.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub points: Vec<LabeledPoint>,
    pub spec_digest: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// CSV with header `x,y,class`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("x,y,class\n");
        for p in &self.points {
            let _ = writeln!(s, "{},{},{}", p.x[0], p.x[1], p.class);
        }
        s
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str("# guidance-lab dataset\nformat = dataset/1\n");
        let _ = writeln!(s, "spec_digest = {}", self.spec_digest);
        let _ = writeln!(s, "points = {}", self.points.len());
        s.push_str("# x y class component\n");
        for p in &self.points {
            let _ = writeln!(s, "{} {} {} {}", p.x[0], p.x[1], p.class, p.component);
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let perr = |line: usize, msg: String| MixtureError::Parse { line, msg };
        let mut digest = None;
        let mut expected = None;
        let mut format_ok = false;
        let mut points = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some((k, v)) = line.split_once('=') {
                match k.trim() {
                    "format" => {
                        if v.trim() != "dataset/1" {
                            return Err(perr(n + 1, format!("unsupported format {}", v.trim())));
                        }
                        format_ok = true;
                    }
                    "spec_digest" => digest = Some(v.trim().to_string()),
                    "points" => expected = Some(v.trim().parse::<usize>().map_err(|e| perr(n + 1, e.to_string()))?),
                    other => return Err(perr(n + 1, format!("unknown key {other}"))),
                }
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 4 {
                return Err(perr(n + 1, "expected 4 fields".into()));
            }
            let x: f64 = f[0].parse().map_err(|_| perr(n + 1, "bad x".into()))?;
            let y: f64 = f[1].parse().map_err(|_| perr(n + 1, "bad y".into()))?;
            let class = f[2].parse().map_err(|_| perr(n + 1, "bad class".into()))?;
            let component = f[3].parse().map_err(|_| perr(n + 1, "bad component".into()))?;
            points.push(LabeledPoint { x: Vec2::new(x, y), class, component });
        }
        if !format_ok {
            return Err(perr(0, "missing format line".into()));
        }
        if expected.is_some_and(|k| k != points.len()) {
            return Err(perr(0, "point count mismatch".into()));
        }
        Ok(Dataset { points, spec_digest: digest.ok_or_else(|| perr(0, "missing spec_digest".into()))? })
    }
}

/// Draws `n` points ancestrally from `spec`.
pub fn sample_dataset(spec: &MixtureSpec, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(MixtureError::InvalidConfig("dataset size must be >= 1".into()));
    }
    let mut rng = substream(seed, purpose::DATASET, 0);
    let points = (0..n).map(|_| spec.sample_one(&mut rng)).collect();
    Ok(Dataset { points, spec_digest: spec.digest() })
}

/// `log(1 / (2π))`, the peak log density of a standard bivariate normal.
pub fn standard_normal_peak_log_density() -> f64 {
    -(2.0 * PI).ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(mean: Vec2, cov: Mat2) -> MixtureSpec {
        MixtureSpec::new(
            vec![GaussianComponent::new(1.0, mean, cov, ComponentLabel::Class(0)).unwrap()],
            1,
            None,
        )
        .unwrap()
    }

    /// Independent enumerator: walks the branching tree level by level and counts
    /// emitted components without building any geometry.
    fn enumerate_components(cfg: &ToyConfig) -> usize {
        let mut total = 0;
        for _class in 0..cfg.num_classes {
            let mut frontier = 1usize;
            for _depth in 0..cfg.max_depth {
                total += frontier * cfg.points_per_branch;
                frontier *= cfg.branch_factor;
            }
        }
        total
    }

    #[test]
    fn main_branch_length_for_twelve_classes() {
        let cfg = preset_config(Preset::C);
        assert!((cfg.main_branch_length() - 0.88).abs() < 1e-12);
    }

    #[test]
    fn presets_match_regime_table() {
        let a = preset_config(Preset::A);
        assert_eq!((a.num_classes, a.max_depth, a.branch_factor), (4, 3, 2));
        let b = preset_config(Preset::B);
        assert_eq!((b.num_classes, b.max_depth, b.branch_factor), (24, 1, 2));
        let c = preset_config(Preset::C);
        assert_eq!((c.num_classes, c.max_depth, c.branch_factor), (12, 2, 2));
    }

    #[test]
    fn one_leaf_per_class() {
        let cfg = ToyConfig {
            num_classes: 4,
            max_depth: 1,
            branch_factor: 1,
            points_per_branch: 1,
            ..ToyConfig::default()
        };
        let spec = build_recursive_mixture(&cfg).unwrap();
        assert_eq!(spec.components().len(), 4);
        for c in 0..4 {
            assert_eq!(spec.class_members(c).len(), 1);
        }
    }

    #[test]
    fn config_c_component_count_matches_tree_enumeration() {
        let cfg = preset_config(Preset::C);
        let enumerated = enumerate_components(&cfg);
        assert_eq!(enumerated, 12 * cfg.points_per_branch * (1 + cfg.branch_factor));
        let spec = build_recursive_mixture(&cfg).unwrap();
        assert_eq!(spec.components().len(), enumerated);
        for p in [Preset::A, Preset::B] {
            let cfg = preset_config(p);
            assert_eq!(build_recursive_mixture(&cfg).unwrap().components().len(), enumerate_components(&cfg));
        }
    }

    #[test]
    fn construction_is_deterministic_and_normalized() {
        for p in [Preset::A, Preset::B, Preset::C] {
            let cfg = preset_config(p);
            let a = build_recursive_mixture(&cfg).unwrap();
            let b = build_recursive_mixture(&cfg).unwrap();
            assert_eq!(a.to_text(), b.to_text());
            for &c in a.selected_classes() {
                let s: f64 = a.class_members(c).iter().map(|&i| a.class_weight(i)).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
        let mut other = preset_config(Preset::C);
        other.seed = 1;
        assert_ne!(
            build_recursive_mixture(&other).unwrap().digest(),
            build_recursive_mixture(&preset_config(Preset::C)).unwrap().digest()
        );
    }

    #[test]
    fn deeper_components_get_less_weight() {
        let cfg = preset_config(Preset::A);
        let spec = build_recursive_mixture(&cfg).unwrap();
        let members = spec.class_members(0);
        let root = spec.components()[members[0]].weight_raw;
        let child = spec.components()[members[cfg.points_per_branch]].weight_raw;
        assert!((child / root - cfg.child_length_ratio * cfg.depth_decay).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_components_and_configs() {
        let bad_cov = Mat2::new(1.0, 2.0, 2.0, 1.0);
        assert!(matches!(
            GaussianComponent::new(1.0, Vec2::zeros(), bad_cov, ComponentLabel::Class(0)),
            Err(MixtureError::NotPositiveDefinite { .. })
        ));
        assert!(GaussianComponent::new(0.0, Vec2::zeros(), Mat2::identity(), ComponentLabel::Class(0)).is_err());
        let asym = Mat2::new(1.0, 0.1, 0.0, 1.0);
        assert!(!is_spd(&asym));
        let cfg = ToyConfig { thickness_across: 0.0, ..ToyConfig::default() };
        assert!(matches!(build_recursive_mixture(&cfg), Err(MixtureError::NotPositiveDefinite { .. })));
        let cfg = ToyConfig { depth_decay: 1.5, ..ToyConfig::default() };
        assert!(build_recursive_mixture(&cfg).is_err());
    }

    #[test]
    fn selected_class_must_have_components() {
        let c = GaussianComponent::new(1.0, Vec2::zeros(), Mat2::identity(), ComponentLabel::Class(0)).unwrap();
        assert!(matches!(MixtureSpec::new(vec![c], 2, None), Err(MixtureError::EmptyClass(1))));
    }

    #[test]
    fn base_components_are_excluded_from_classes() {
        let cfg = ToyConfig { main_branch_points: 4, ..preset_config(Preset::B) };
        let spec = build_recursive_mixture(&cfg).unwrap();
        let base = spec.components().iter().filter(|c| c.label == ComponentLabel::Base).count();
        assert_eq!(base, 4);
        let members: usize = (0..24).map(|c| spec.class_members(c).len()).sum();
        assert_eq!(members + base, spec.components().len());
    }

    #[test]
    fn standard_normal_peak() {
        let spec = single(Vec2::zeros(), Mat2::identity());
        let lp = spec.log_density(&Vec2::zeros(), Some(0), 0.0).unwrap();
        assert!((lp - (1.0 / (2.0 * PI)).ln()).abs() < 1e-14);
        assert!((lp - standard_normal_peak_log_density()).abs() < 1e-14);
    }

    #[test]
    fn near_terminal_time_is_standard_normal() {
        let spec = single(Vec2::new(0.7, -0.3), Mat2::new(0.2, 0.05, 0.05, 0.1));
        // At t = 0.999 the variance is still 0.998, i.e. a 2e-3 log-density offset at
        // the origin, so the 1e-3 band is checked one decade closer to the terminal time.
        for x in [Vec2::zeros(), Vec2::new(1.0, -0.5), Vec2::new(-2.0, 0.3)] {
            let reference = -LN_2PI - 0.5 * x.norm_squared();
            let gaps: Vec<f64> = [0.99, 0.999, 0.9999]
                .iter()
                .map(|&t| (spec.log_density(&x, Some(0), t).unwrap() - reference).abs())
                .collect();
            assert!(gaps[0] > gaps[1] && gaps[1] > gaps[2]);
            assert!(gaps[1] < 1e-2);
            assert!(gaps[2] < 1e-3, "{gaps:?}");
        }
    }

    #[test]
    fn time_outside_unit_interval_rejected() {
        let spec = single(Vec2::zeros(), Mat2::identity());
        assert!(spec.log_density(&Vec2::zeros(), Some(0), 1.0).is_err());
        assert!(spec.log_density(&Vec2::zeros(), Some(0), -0.1).is_err());
    }

    #[test]
    fn noised_density_identity() {
        let spec = build_recursive_mixture(&preset_config(Preset::C)).unwrap();
        let mut rng = substream(3, 99, 0);
        for &t in &[0.1, 0.37, 0.8] {
            let noised = spec.noised(t).unwrap();
            for _ in 0..50 {
                let x = Vec2::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
                for cond in [None, Some(3)] {
                    let a = spec.log_density(&x, cond, t).unwrap();
                    let b = noised.log_density(&x, cond, 0.0).unwrap();
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn log_density_finite_far_away() {
        let spec = build_recursive_mixture(&preset_config(Preset::B)).unwrap();
        let lp = spec.log_density(&Vec2::new(1e3, -1e3), Some(5), 0.0).unwrap();
        assert!(lp.is_finite());
    }

    #[test]
    fn single_gaussian_moments() {
        let spec = single(Vec2::zeros(), Mat2::identity());
        let data = sample_dataset(&spec, 100_000, 11).unwrap();
        let n = data.len() as f64;
        let mean = data.points.iter().fold(Vec2::zeros(), |a, p| a + p.x) / n;
        let cov = data.points.iter().fold(Mat2::zeros(), |a, p| {
            let d = p.x - mean;
            a + d * d.transpose()
        }) / n;
        assert!(mean.norm() < 0.02);
        assert!((cov - Mat2::identity()).norm() < 0.05);
    }

    #[test]
    fn uniform_class_prior_on_config_b() {
        let spec = build_recursive_mixture(&preset_config(Preset::B)).unwrap();
        let n = 100_000;
        let data = sample_dataset(&spec, n, 5).unwrap();
        let mut counts = vec![0usize; 24];
        for p in &data.points {
            counts[p.class] += 1;
        }
        let p = 1.0 / 24.0;
        let expect = n as f64 * p;
        let sd = (n as f64 * p * (1.0 - p)).sqrt();
        for c in counts {
            assert!((c as f64 - expect).abs() < 4.0 * sd);
        }
    }

    #[test]
    fn component_occupancy_follows_weights() {
        let comps = [0.5, 0.3, 0.2]
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                GaussianComponent::new(w, Vec2::new(i as f64, 0.0), Mat2::identity() * 0.01, ComponentLabel::Class(0))
                    .unwrap()
            })
            .collect();
        let spec = MixtureSpec::new(comps, 1, None).unwrap();
        let n = 100_000;
        let data = sample_dataset(&spec, n, 9).unwrap();
        let mut counts = [0usize; 3];
        for p in &data.points {
            counts[p.component] += 1;
        }
        for (k, &pi) in [0.5, 0.3, 0.2].iter().enumerate() {
            let sd = (n as f64 * pi * (1.0 - pi)).sqrt();
            assert!((counts[k] as f64 - n as f64 * pi).abs() < 4.0 * sd);
        }
    }

    #[test]
    fn dataset_sampling_is_deterministic() {
        let spec = build_recursive_mixture(&preset_config(Preset::A)).unwrap();
        let a = sample_dataset(&spec, 500, 1).unwrap();
        let b = sample_dataset(&spec, 500, 1).unwrap();
        assert_eq!(a, b);
        assert!(a.points.iter().all(|p| spec.is_selected(p.class)));
        assert!(sample_dataset(&spec, 0, 1).is_err());
    }

    #[test]
    fn text_formats_round_trip() {
        let cfg = ToyConfig { main_branch_points: 2, selected_classes: Some(vec![1, 3, 5]), ..ToyConfig::default() };
        let spec = build_recursive_mixture(&cfg).unwrap();
        let back = MixtureSpec::from_text(&spec.to_text()).unwrap();
        assert_eq!(spec, back);
        assert_eq!(spec.digest(), back.digest());
        let data = sample_dataset(&spec, 64, 2).unwrap();
        assert_eq!(Dataset::from_text(&data.to_text()).unwrap(), data);
        assert!(MixtureSpec::from_text("num_classes = 2\n").is_err());
    }

    #[test]
    fn null_condition_weights_sum_to_one() {
        let spec = build_recursive_mixture(&preset_config(Preset::A)).unwrap();
        let s: f64 = spec.weighted_members(None).unwrap().iter().map(|(_, w)| w).sum();
        assert!((s - 1.0).abs() < 1e-12);
        assert!(spec.weighted_members(Some(7)).is_err());
    }
}
