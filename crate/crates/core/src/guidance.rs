//! Guided velocity assembly.
//!
//! Every kind is an extrapolation `v_c + (w - 1)(v_c - v_weak)`; kinds differ only in
//! where `v_weak` comes from. Outside the active interval the conditional velocity is
//! returned unchanged.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::{Condition, Vec2, VelocityField};

#[derive(Debug, Error, PartialEq)]
pub enum GuidanceError {
    #[error("guidance kind `{0}` needs a weak velocity source")]
    MissingWeak(String),
    #[error("unknown guidance kind `{0}` (expected none, cfg, ag, skip or sgg)")]
    UnknownKind(String),
    #[error("invalid guidance spec: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GuidanceKind {
    None,
    CdgCfg,
    CagAg,
    CagSkip,
    Sgg,
}

impl GuidanceKind {
    pub fn as_str(self) -> &'static str {
        match self {
            GuidanceKind::None => "none",
            GuidanceKind::CdgCfg => "cfg",
            GuidanceKind::CagAg => "ag",
            GuidanceKind::CagSkip => "skip",
            GuidanceKind::Sgg => "sgg",
        }
    }
}

impl fmt::Display for GuidanceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GuidanceKind {
    type Err = GuidanceError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "none" | "unguided" => Ok(GuidanceKind::None),
            "cfg" | "cdg" | "cdg_cfg" => Ok(GuidanceKind::CdgCfg),
            "ag" | "cag" | "cag_ag" => Ok(GuidanceKind::CagAg),
            "skip" | "cag_skip" => Ok(GuidanceKind::CagSkip),
            "sgg" => Ok(GuidanceKind::Sgg),
            _ => Err(GuidanceError::UnknownKind(s.to_string())),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceSpec {
    pub kind: GuidanceKind,
    /// Scale for single-scale kinds.
    pub w: f64,
    pub w_cdg: f64,
    pub w_cag: f64,
    /// SGG switch: condition-dropping guidance for `t > tau`, model-degrading below.
    pub tau: f64,
    /// Guidance is active for `t_lo <= t <= t_hi`.
    pub interval: (f64, f64),
    pub skip_blocks: Vec<usize>,
    pub weak_checkpoint: Option<PathBuf>,
}

impl Default for GuidanceSpec {
    fn default() -> Self {
        Self {
            kind: GuidanceKind::None,
            w: 1.0,
            w_cdg: 1.0,
            w_cag: 1.0,
            tau: 0.5,
            interval: (0.0, 1.0),
            skip_blocks: Vec::new(),
            weak_checkpoint: None,
        }
    }
}

impl GuidanceSpec {
    pub fn unguided() -> Self {
        Self::default()
    }

    pub fn cfg(w: f64) -> Self {
        Self { kind: GuidanceKind::CdgCfg, w, ..Self::default() }
    }

    pub fn autoguidance(w: f64) -> Self {
        Self { kind: GuidanceKind::CagAg, w, ..Self::default() }
    }

    pub fn skip(w: f64, blocks: Vec<usize>) -> Self {
        Self { kind: GuidanceKind::CagSkip, w, skip_blocks: blocks, ..Self::default() }
    }

    pub fn segmented(w_cdg: f64, w_cag: f64, tau: f64) -> Self {
        Self { kind: GuidanceKind::Sgg, w_cdg, w_cag, tau, ..Self::default() }
    }

    pub fn with_interval(mut self, lo: f64, hi: f64) -> Self {
        self.interval = (lo, hi);
        self
    }

    pub fn label(&self) -> String {
        self.kind.as_str().to_string()
    }

    /// The scale reported alongside results: `w`, or `w_cdg` for SGG.
    pub fn primary_scale(&self) -> f64 {
        match self.kind {
            GuidanceKind::None => 1.0,
            GuidanceKind::Sgg => self.w_cdg,
            _ => self.w,
        }
    }

    pub fn needs_weak(&self) -> bool {
        matches!(self.kind, GuidanceKind::CagAg | GuidanceKind::CagSkip | GuidanceKind::Sgg)
    }

    pub fn validate(&self) -> Result<(), GuidanceError> {
        let (lo, hi) = self.interval;
        if !(lo <= hi) {
            return Err(GuidanceError::Invalid(format!("interval [{lo}, {hi}] is empty")));
        }
        for (name, v) in [("w", self.w), ("w_cdg", self.w_cdg), ("w_cag", self.w_cag), ("tau", self.tau)] {
            if !v.is_finite() {
                return Err(GuidanceError::Invalid(format!("{name} must be finite")));
            }
        }
        if self.kind == GuidanceKind::Sgg && !(self.tau > 0.0 && self.tau < 1.0) {
            return Err(GuidanceError::Invalid(format!("tau must lie in (0, 1), got {}", self.tau)));
        }
        if self.kind == GuidanceKind::CagSkip && self.skip_blocks.is_empty() {
            return Err(GuidanceError::Invalid("skip guidance needs at least one skipped block".into()));
        }
        Ok(())
    }

    fn active(&self, t: f64) -> bool {
        t >= self.interval.0 && t <= self.interval.1
    }
}

/// `v_c + (w - 1)(v_c - v_weak)`.
#[inline]
pub fn extrapolate(v_c: Vec2, v_weak: Vec2, w: f64) -> Vec2 {
    v_c + (v_c - v_weak) * (w - 1.0)
}

/// Which weak signal a kind uses at time `t`, with its scale.
#[derive(Clone, Copy, Debug, PartialEq)]
enum Branch {
    Plain,
    Uncond(f64),
    Weak(f64),
}

fn branch(spec: &GuidanceSpec, t: f64) -> Branch {
    if !spec.active(t) {
        return Branch::Plain;
    }
    let (b, w) = match spec.kind {
        GuidanceKind::None => return Branch::Plain,
        GuidanceKind::CdgCfg => (Branch::Uncond(spec.w), spec.w),
        GuidanceKind::CagAg | GuidanceKind::CagSkip => (Branch::Weak(spec.w), spec.w),
        GuidanceKind::Sgg if t > spec.tau => (Branch::Uncond(spec.w_cdg), spec.w_cdg),
        GuidanceKind::Sgg => (Branch::Weak(spec.w_cag), spec.w_cag),
    };
    if w == 1.0 {
        Branch::Plain
    } else {
        b
    }
}

/// A velocity field with guidance applied.
///
/// For `CagSkip` the caller supplies the skip-block forward of the strong net as `weak`;
/// SGG uses `weak` for its model-degrading segment.
pub struct GuidedField<'a> {
    strong: &'a dyn VelocityField,
    weak: Option<&'a dyn VelocityField>,
    spec: GuidanceSpec,
}

impl<'a> GuidedField<'a> {
    pub fn new(
        strong: &'a dyn VelocityField,
        weak: Option<&'a dyn VelocityField>,
        spec: &GuidanceSpec,
    ) -> Result<Self, GuidanceError> {
        spec.validate()?;
        if spec.needs_weak() && weak.is_none() {
            return Err(GuidanceError::MissingWeak(spec.label()));
        }
        Ok(Self { strong, weak, spec: spec.clone() })
    }

    pub fn spec(&self) -> &GuidanceSpec {
        &self.spec
    }
}

impl VelocityField for GuidedField<'_> {
    fn velocity_batch(&self, xs: &[Vec2], t: f64, conds: &[Condition]) -> Vec<Vec2> {
        let v_c = self.strong.velocity_batch(xs, t, conds);
        match branch(&self.spec, t) {
            Branch::Plain => v_c,
            Branch::Uncond(w) => {
                let nulls = vec![None; xs.len()];
                let v_u = self.strong.velocity_batch(xs, t, &nulls);
                v_c.iter().zip(&v_u).map(|(c, u)| extrapolate(*c, *u, w)).collect()
            }
            Branch::Weak(w) => {
                let weak = self.weak.expect("checked in GuidedField::new");
                let v_w = weak.velocity_batch(xs, t, conds);
                v_c.iter().zip(&v_w).map(|(c, u)| extrapolate(*c, *u, w)).collect()
            }
        }
    }
}

/// Single-point guided velocity.
pub fn guided_velocity(
    strong: &dyn VelocityField,
    weak: Option<&dyn VelocityField>,
    spec: &GuidanceSpec,
    x_t: Vec2,
    t: f64,
    c: Condition,
) -> Result<Vec2, GuidanceError> {
    Ok(GuidedField::new(strong, weak, spec)?.velocity(x_t, t, c))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn strong(x: Vec2, t: f64, c: Condition) -> Vec2 {
        match c {
            Some(k) => Vec2::new(x[0] * t + k as f64, x[1] - t),
            None => Vec2::new(0.5 * x[0], x[1] * t),
        }
    }

    fn weak(x: Vec2, t: f64, c: Condition) -> Vec2 {
        Vec2::new(x[1] + t, c.map_or(0.0, |k| 0.3 * k as f64) - x[0])
    }

    fn all_kinds_at_unit_scale() -> Vec<GuidanceSpec> {
        vec![
            GuidanceSpec::unguided(),
            GuidanceSpec::cfg(1.0),
            GuidanceSpec::autoguidance(1.0),
            GuidanceSpec::skip(1.0, vec![1]),
            GuidanceSpec::segmented(1.0, 1.0, 0.4),
        ]
    }

    #[test]
    fn cfg_substitution() {
        let s = |_: Vec2, _: f64, c: Condition| if c.is_some() { Vec2::new(2.0, 0.0) } else { Vec2::new(1.0, 0.0) };
        let v = guided_velocity(&s, None, &GuidanceSpec::cfg(2.0), Vec2::zeros(), 0.5, Some(0)).unwrap();
        assert_eq!(v, Vec2::new(3.0, 0.0));
    }

    #[test]
    fn unit_scale_is_identity() {
        let x = Vec2::new(0.3, -1.7);
        for spec in all_kinds_at_unit_scale() {
            for &t in &[0.01, 0.3, 0.4, 0.77, 1.0] {
                let v = guided_velocity(&strong, Some(&weak), &spec, x, t, Some(2)).unwrap();
                assert_eq!(v, strong(x, t, Some(2)), "{spec:?}");
            }
        }
    }

    #[test]
    fn sgg_matches_constituents() {
        let sgg = GuidanceSpec::segmented(2.0, 3.0, 0.5);
        let cfg = GuidanceSpec::cfg(2.0);
        let ag = GuidanceSpec::autoguidance(3.0);
        let x = Vec2::new(1.1, 0.2);
        let a = guided_velocity(&strong, Some(&weak), &sgg, x, 0.7, Some(1)).unwrap();
        assert_eq!(a, guided_velocity(&strong, Some(&weak), &cfg, x, 0.7, Some(1)).unwrap());
        let b = guided_velocity(&strong, Some(&weak), &sgg, x, 0.3, Some(1)).unwrap();
        assert_eq!(b, guided_velocity(&strong, Some(&weak), &ag, x, 0.3, Some(1)).unwrap());
        // t == tau belongs to the model-degrading segment.
        let c = guided_velocity(&strong, Some(&weak), &sgg, x, 0.5, Some(1)).unwrap();
        assert_eq!(c, guided_velocity(&strong, Some(&weak), &ag, x, 0.5, Some(1)).unwrap());
    }

    #[test]
    fn interval_gating() {
        let spec = GuidanceSpec::cfg(3.0).with_interval(0.2, 0.8);
        let x = Vec2::new(-0.4, 0.9);
        for &t in &[0.05, 0.19, 0.81, 1.0] {
            assert_eq!(guided_velocity(&strong, None, &spec, x, t, Some(0)).unwrap(), strong(x, t, Some(0)));
        }
        assert_ne!(guided_velocity(&strong, None, &spec, x, 0.5, Some(0)).unwrap(), strong(x, 0.5, Some(0)));
    }

    #[test]
    fn missing_weak_is_an_error() {
        for spec in [GuidanceSpec::autoguidance(2.0), GuidanceSpec::segmented(2.0, 2.0, 0.3)] {
            assert!(matches!(
                guided_velocity(&strong, None, &spec, Vec2::zeros(), 0.5, Some(0)),
                Err(GuidanceError::MissingWeak(_))
            ));
        }
    }

    #[test]
    fn batch_matches_pointwise() {
        let spec = GuidanceSpec::segmented(2.5, 1.5, 0.4);
        let field = GuidedField::new(&strong, Some(&weak), &spec).unwrap();
        let xs = [Vec2::new(0.1, 0.2), Vec2::new(-1.0, 3.0), Vec2::new(0.0, -0.5)];
        let cs = [Some(0), None, Some(3)];
        for &t in &[0.2, 0.9] {
            let b = field.velocity_batch(&xs, t, &cs);
            for i in 0..3 {
                assert_eq!(b[i], field.velocity(xs[i], t, cs[i]));
            }
        }
    }

    #[test]
    fn kind_parsing() {
        assert_eq!("SGG".parse::<GuidanceKind>().unwrap(), GuidanceKind::Sgg);
        assert_eq!("cdg_cfg".parse::<GuidanceKind>().unwrap(), GuidanceKind::CdgCfg);
        assert!("foo".parse::<GuidanceKind>().is_err());
    }
}
