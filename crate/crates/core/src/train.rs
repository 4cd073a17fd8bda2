//! Flow-matching training with weak-to-strong target variants.
//!
//! The strong net regresses onto `u + w·sg[g]` with `g = v(x_t, t, c) - v_weak`, where the
//! weak signal depends on the variant:
//!
//! | variant    | weak signal                                             |
//! |------------|---------------------------------------------------------|
//! | `baseline` | none (`w` ignored)                                      |
//! | `mg`       | the strong net with the null condition                  |
//! | `ag`       | a separate, smaller net updated every `weak_update_ratio` steps |
//! | `br`       | an auxiliary head tapping an intermediate block          |
//! | `sgg`      | `mg` for `t > tau`, `br` for `t <= tau`                 |
//! | `slg_warm` | plain regression for `warmup_iters`, then skip-block forward |
//!
//! Step `k` draws everything from `substream(seed, TRAIN, k)`, so variants that leave the
//! target unchanged replay the baseline bit for bit.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use ndarray::Array2;
use rand::Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::mixture::{Dataset, MixtureSpec};
use crate::net::adam::{adam_step, OptState};
use crate::net::{checkpoint, init_params, Arch, ForwardOpts, NetError, NetParams};
use crate::rng::{purpose, substream};
use crate::{Condition, Vec2};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("variant `{0}` needs a weak source that is not available")]
    MissingWeak(Variant),
    #[error("non-finite loss at iteration {iter}: {detail}")]
    NonFinite { iter: usize, detail: String },
    #[error("training data is empty")]
    EmptyData,
    #[error(transparent)]
    Net(#[from] NetError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Baseline,
    Mg,
    Ag,
    Br,
    Sgg,
    SlgWarm,
}

impl Variant {
    pub const ALL: [Variant; 6] =
        [Variant::Baseline, Variant::Mg, Variant::Ag, Variant::Br, Variant::Sgg, Variant::SlgWarm];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Mg => "mg",
            Variant::Ag => "ag",
            Variant::Br => "br",
            Variant::Sgg => "sgg",
            Variant::SlgWarm => "slg_warm",
        }
    }

    /// Variants whose weak signal drops the condition.
    pub fn needs_dropout(self) -> bool {
        matches!(self, Variant::Mg | Variant::Sgg)
    }

    pub fn needs_branch(self) -> bool {
        matches!(self, Variant::Br | Variant::Sgg)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "baseline" => Ok(Variant::Baseline),
            "mg" | "cfg" => Ok(Variant::Mg),
            "ag" => Ok(Variant::Ag),
            "br" => Ok(Variant::Br),
            "sgg" => Ok(Variant::Sgg),
            "slg_warm" | "slg-warm" => Ok(Variant::SlgWarm),
            _ => Err(TrainError::Config(format!(
                "unknown variant `{s}` (expected baseline, mg, ag, br, sgg or slg_warm)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub variant: Variant,
    /// Training guidance weight.
    pub w: f64,
    /// SGG switch time.
    pub tau: f64,
    /// The guidance term is added for `t_lo <= t <= t_hi`.
    pub interval: (f64, f64),
    pub cond_dropout: f64,
    pub iters: usize,
    pub batch: usize,
    pub lr: f64,
    pub lognormal_loc: f64,
    pub lognormal_scale: f64,
    pub arch: Arch,
    pub weak_arch: Option<Arch>,
    pub weak_update_ratio: usize,
    pub warmup_iters: usize,
    pub skip_blocks: Vec<usize>,
    /// Train without class input (all conditions are the null token).
    pub unconditional: bool,
    pub seed: u64,
    pub log_every: usize,
    /// Write `strong_<iter>.bin` every this many iterations (0 disables).
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::for_variant(Variant::Baseline)
    }
}

impl TrainConfig {
    /// Defaults for a variant.
    pub fn for_variant(variant: Variant) -> Self {
        let arch = Arch::default();
        let (w, interval) = match variant {
            Variant::Baseline => (0.0, (0.2, 0.8)),
            Variant::Mg => (0.5, (0.2, 0.8)),
            Variant::Ag | Variant::Br | Variant::SlgWarm => (0.3, (0.2, 0.8)),
            // With tau = 0.2 a lower gate of 0.2 would leave the branch segment empty.
            Variant::Sgg => (0.6, (0.0, 0.8)),
        };
        let iters = 1 << 15;
        Self {
            variant,
            w,
            tau: 0.2,
            interval,
            cond_dropout: 0.1,
            iters,
            batch: 256,
            lr: 1e-3,
            lognormal_loc: -1.0,
            lognormal_scale: 1.4,
            arch,
            weak_arch: (variant == Variant::Ag).then(|| Arch { d_h: arch.d_h / 2, ..arch }),
            weak_update_ratio: 4,
            warmup_iters: iters / 4,
            skip_blocks: vec![arch.n_blocks / 2],
            unconditional: false,
            seed: 0,
            log_every: 256,
            checkpoint_every: 0,
            checkpoint_dir: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(TrainError::Config(m));
        if !(self.w >= 0.0 && self.w.is_finite()) {
            return err(format!("w must be >= 0, got {}", self.w));
        }
        if !(self.interval.0 <= self.interval.1) {
            return err(format!("interval [{}, {}] is empty", self.interval.0, self.interval.1));
        }
        if !(0.0..1.0).contains(&self.cond_dropout) {
            return err(format!("cond_dropout must lie in [0, 1), got {}", self.cond_dropout));
        }
        if self.batch == 0 {
            return err("batch must be >= 1".into());
        }
        if !(self.lr > 0.0) || !(self.lognormal_scale > 0.0) {
            return err("lr and lognormal_scale must be positive".into());
        }
        self.arch.validate()?;
        match self.variant {
            Variant::Mg | Variant::Sgg if self.unconditional => {
                return err(format!("variant {} drops the condition and needs conditional training", self.variant));
            }
            Variant::Mg | Variant::Sgg if self.cond_dropout <= 0.0 => {
                return err(format!("variant {} needs cond_dropout > 0", self.variant));
            }
            _ => {}
        }
        if self.variant == Variant::Sgg && !(self.tau > 0.0 && self.tau < 1.0) {
            return err(format!("tau must lie in (0, 1), got {}", self.tau));
        }
        if self.variant.needs_branch() && self.arch.branch_index.is_none() {
            return err(format!("variant {} needs arch.branch_index", self.variant));
        }
        if self.variant == Variant::Ag {
            let Some(weak) = &self.weak_arch else {
                return err("variant ag needs weak_arch".into());
            };
            weak.validate()?;
            if self.weak_update_ratio == 0 {
                return err("weak_update_ratio must be >= 1".into());
            }
        }
        if self.variant == Variant::SlgWarm {
            if self.skip_blocks.is_empty() {
                return err("variant slg_warm needs skip_blocks".into());
            }
            if let Some(&b) = self.skip_blocks.iter().find(|&&b| b >= self.arch.n_blocks) {
                return err(format!("skip block {b} out of range for {} blocks", self.arch.n_blocks));
            }
        }
        Ok(())
    }
}

/// Source of clean training points.
#[derive(Clone, Copy, Debug)]
pub enum TrainData<'a> {
    /// Fresh draws from the mixture every step.
    Spec(&'a MixtureSpec),
    /// Uniform draws with replacement from a fixed dataset.
    Dataset(&'a Dataset),
}

impl TrainData<'_> {
    fn draw<R: Rng>(&self, rng: &mut R) -> (Vec2, usize) {
        match self {
            TrainData::Spec(spec) => {
                let p = spec.sample_one(rng);
                (p.x, p.class)
            }
            TrainData::Dataset(d) => {
                let p = &d.points[rng.random_range(0..d.points.len())];
                (p.x, p.class)
            }
        }
    }

    fn num_classes(&self) -> usize {
        match self {
            TrainData::Spec(spec) => spec.num_classes(),
            TrainData::Dataset(d) => d.points.iter().map(|p| p.class + 1).max().unwrap_or(0),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainingPair {
    pub x0: Vec2,
    pub eps: Vec2,
    pub t: f64,
    pub x_t: Vec2,
    pub u: Vec2,
    pub class_label: usize,
    /// The condition was replaced by the null token for this step.
    pub dropped: bool,
}

impl TrainingPair {
    pub fn new(x0: Vec2, eps: Vec2, t: f64, class_label: usize, dropped: bool) -> Self {
        Self { x0, eps, t, x_t: x0 * (1.0 - t) + eps * t, u: eps - x0, class_label, dropped }
    }

    pub fn cond(&self) -> Condition {
        (!self.dropped).then_some(self.class_label)
    }
}

/// Logit-normal time: `sigmoid(z)` with `z ~ N(loc, scale²)`, clamped to `[1e-5, 1 - 1e-5]`.
pub fn sample_timestep<R: Rng + ?Sized>(loc: f64, scale: f64, rng: &mut R) -> f64 {
    let z: f64 = loc + scale * rng.sample::<f64, _>(StandardNormal);
    (1.0 / (1.0 + (-z).exp())).clamp(1e-5, 1.0 - 1e-5)
}

/// Draws one training batch. Unconditional runs mark every pair as dropped.
pub fn draw_batch<R: Rng>(data: &TrainData, cfg: &TrainConfig, rng: &mut R) -> Vec<TrainingPair> {
    (0..cfg.batch)
        .map(|_| {
            let (x0, class) = data.draw(rng);
            let eps = Vec2::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
            let t = sample_timestep(cfg.lognormal_loc, cfg.lognormal_scale, rng);
            let drop = rng.random::<f64>() < cfg.cond_dropout;
            TrainingPair::new(x0, eps, t, class, drop || cfg.unconditional)
        })
        .collect()
}

/// `u + w·g` inside the interval, `u` outside.
pub fn w2s_target(u: Vec2, g: Vec2, w: f64, t: f64, interval: (f64, f64)) -> Vec2 {
    if w == 0.0 || t < interval.0 || t > interval.1 {
        u
    } else {
        u + g * w
    }
}

/// Which weak source applies to a sample at time `t`.
fn weak_kind(variant: Variant, t: f64, tau: f64) -> Variant {
    match variant {
        Variant::Sgg if t > tau => Variant::Mg,
        Variant::Sgg => Variant::Br,
        v => v,
    }
}

fn columns(pairs: &[TrainingPair]) -> (Array2<f64>, Vec<f64>, Vec<Condition>) {
    let xs = Array2::from_shape_fn((pairs.len(), 2), |(i, j)| pairs[i].x_t[j]);
    (xs, pairs.iter().map(|p| p.t).collect(), pairs.iter().map(TrainingPair::cond).collect())
}

fn row(m: &Array2<f64>, i: usize) -> Vec2 {
    Vec2::new(m[(i, 0)], m[(i, 1)])
}

/// Batched weak velocities for the pairs' own times and conditions. Evaluated without
/// recording a trace, so nothing downstream can differentiate through them.
pub fn weak_velocities(
    cfg: &TrainConfig,
    strong: &NetParams,
    weak: Option<&NetParams>,
    pairs: &[TrainingPair],
) -> Result<Vec<Vec2>> {
    let (xs, ts, conds) = columns(pairs);
    let kinds: Vec<Variant> = pairs.iter().map(|p| weak_kind(cfg.variant, p.t, cfg.tau)).collect();
    let want = |v: Variant| kinds.contains(&v);
    let uncond = if want(Variant::Mg) {
        Some(strong.predict(&xs.view(), &ts, &vec![None; pairs.len()], &[])?)
    } else {
        None
    };
    let branch = if want(Variant::Br) {
        let opts = ForwardOpts { want_branch: true, ..Default::default() };
        strong.forward(&xs.view(), &ts, &conds, &opts)?.branch_velocity
    } else {
        None
    };
    let ag = if want(Variant::Ag) {
        let weak = weak.ok_or(TrainError::MissingWeak(Variant::Ag))?;
        Some(weak.predict(&xs.view(), &ts, &conds, &[])?)
    } else {
        None
    };
    let skip = if want(Variant::SlgWarm) {
        Some(strong.predict(&xs.view(), &ts, &conds, &cfg.skip_blocks)?)
    } else {
        None
    };
    Ok(kinds
        .iter()
        .enumerate()
        .map(|(i, k)| match k {
            Variant::Mg => row(uncond.as_ref().unwrap(), i),
            Variant::Br => row(branch.as_ref().unwrap(), i),
            Variant::Ag => row(ag.as_ref().unwrap(), i),
            Variant::SlgWarm => row(skip.as_ref().unwrap(), i),
            _ => Vec2::zeros(),
        })
        .collect())
}

/// Single-pair form of [`weak_velocities`] with an explicit condition.
pub fn weak_velocity(
    cfg: &TrainConfig,
    strong: &NetParams,
    weak: Option<&NetParams>,
    pair: &TrainingPair,
    c: Condition,
) -> Result<Vec2> {
    let mut p = *pair;
    match c {
        Some(k) => {
            p.class_label = k;
            p.dropped = false;
        }
        None => p.dropped = true,
    }
    Ok(weak_velocities(cfg, strong, weak, &[p])?[0])
}

/// Mutable training state: networks, optimizers and counters.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub strong: NetParams,
    pub strong_opt: OptState,
    pub weak: Option<NetParams>,
    pub weak_opt: Option<OptState>,
    pub iter: usize,
    pub weak_steps: usize,
}

impl TrainState {
    pub fn new(cfg: &TrainConfig, num_classes: usize) -> Result<Self> {
        cfg.validate()?;
        let strong = init_params(cfg.arch, num_classes, cfg.seed)?;
        let strong_opt = OptState::new(&strong, cfg.lr);
        let (weak, weak_opt) = match (cfg.variant, cfg.weak_arch) {
            (Variant::Ag, Some(arch)) => {
                let w = init_params(arch, num_classes, crate::rng::mix64(cfg.seed ^ purpose::WEAK_INIT))?;
                let o = OptState::new(&w, cfg.lr);
                (Some(w), Some(o))
            }
            _ => (None, None),
        };
        Ok(Self { strong, strong_opt, weak, weak_opt, iter: 0, weak_steps: 0 })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StepRecord {
    pub iter: usize,
    /// Mean `|v - u|²` of the strong net.
    pub regression_loss: f64,
    /// Mean `|v - u_w2s|²`, the loss actually minimised.
    pub strong_loss: f64,
    /// Plain regression loss of the weak source (AG net or branch head); 0 if none.
    pub weak_loss: f64,
    pub g_norm_mean: f64,
    pub g_norm_max: f64,
}

/// Mean squared error and its gradient `2 (v - target) / B`.
fn mse_grad(v: &Array2<f64>, targets: &[Vec2]) -> (f64, Array2<f64>) {
    let b = targets.len() as f64;
    let mut loss = 0.0;
    let grad = Array2::from_shape_fn(v.raw_dim(), |(i, j)| {
        let d = v[(i, j)] - targets[i][j];
        loss += d * d;
        2.0 * d / b
    });
    (loss / b, grad)
}

/// Gradient of the strong loss for given constant guidance terms.
///
/// Returns `(grads, loss, regression_loss, branch_loss)`.
pub fn strong_gradients(
    cfg: &TrainConfig,
    strong: &NetParams,
    pairs: &[TrainingPair],
    g: &[Vec2],
) -> Result<(NetParams, f64, f64, f64)> {
    let (xs, ts, conds) = columns(pairs);
    let want_branch = cfg.variant.needs_branch();
    let opts = ForwardOpts { want_branch, want_trace: true, ..Default::default() };
    let out = strong.forward(&xs.view(), &ts, &conds, &opts)?;
    let targets: Vec<Vec2> =
        pairs.iter().zip(g).map(|(p, gi)| w2s_target(p.u, *gi, cfg.w, p.t, cfg.interval)).collect();
    let us: Vec<Vec2> = pairs.iter().map(|p| p.u).collect();
    let (loss, grad_v) = mse_grad(&out.velocity, &targets);
    let (reg, _) = mse_grad(&out.velocity, &us);
    let (br_loss, grad_br) = match &out.branch_velocity {
        Some(bv) => {
            let (l, gr) = mse_grad(bv, &us);
            (l, Some(gr))
        }
        None => (0.0, None),
    };
    let grads = strong.backward(out.trace.as_ref().expect("trace requested"), &grad_v, grad_br.as_ref())?;
    Ok((grads, loss, reg, br_loss))
}

fn guidance_active(cfg: &TrainConfig, iter: usize) -> bool {
    cfg.w != 0.0
        && cfg.variant != Variant::Baseline
        && !(cfg.variant == Variant::SlgWarm && iter < cfg.warmup_iters)
}

/// Constant guidance terms `g = v(x_t, t, c) - v_weak` for a batch (zeros when inactive).
pub fn guidance_terms(
    cfg: &TrainConfig,
    state: &TrainState,
    pairs: &[TrainingPair],
) -> Result<Vec<Vec2>> {
    let gated = |p: &TrainingPair| p.t >= cfg.interval.0 && p.t <= cfg.interval.1;
    if !guidance_active(cfg, state.iter) || !pairs.iter().any(gated) {
        return Ok(vec![Vec2::zeros(); pairs.len()]);
    }
    let (xs, ts, conds) = columns(pairs);
    let v = state.strong.predict(&xs.view(), &ts, &conds, &[])?;
    let weak = weak_velocities(cfg, &state.strong, state.weak.as_ref(), pairs)?;
    Ok((0..pairs.len()).map(|i| row(&v, i) - weak[i]).collect())
}

/// One optimizer step of the strong net (and the AG weak net on its cadence).
pub fn train_step(state: &mut TrainState, cfg: &TrainConfig, data: &TrainData) -> Result<StepRecord> {
    let iter = state.iter;
    let mut rng = substream(cfg.seed, purpose::TRAIN, iter as u64);
    let pairs = draw_batch(data, cfg, &mut rng);
    let g = guidance_terms(cfg, state, &pairs)?;
    let (grads, loss, reg, br_loss) = strong_gradients(cfg, &state.strong, &pairs, &g)?;
    if !loss.is_finite() || !br_loss.is_finite() {
        return Err(TrainError::NonFinite { iter, detail: format!("strong loss {loss}, branch loss {br_loss}") });
    }
    adam_step(&mut state.strong, &grads, &mut state.strong_opt)
        .map_err(|e| TrainError::NonFinite { iter, detail: e.to_string() })?;

    let mut weak_loss = br_loss;
    if cfg.variant == Variant::Ag && iter % cfg.weak_update_ratio == 0 {
        let weak = state.weak.as_mut().ok_or(TrainError::MissingWeak(Variant::Ag))?;
        let opt = state.weak_opt.as_mut().expect("weak optimizer");
        let plain = TrainConfig { variant: Variant::Baseline, w: 0.0, ..cfg.clone() };
        let zeros = vec![Vec2::zeros(); pairs.len()];
        let (wg, wl, _, _) = strong_gradients(&plain, weak, &pairs, &zeros)?;
        if !wl.is_finite() {
            return Err(TrainError::NonFinite { iter, detail: format!("weak loss {wl}") });
        }
        adam_step(weak, &wg, opt).map_err(|e| TrainError::NonFinite { iter, detail: format!("weak net: {e}") })?;
        state.weak_steps += 1;
        weak_loss = wl;
    }
    state.iter += 1;

    let norms: Vec<f64> = g.iter().map(Vec2::norm).collect();
    Ok(StepRecord {
        iter,
        regression_loss: reg,
        strong_loss: loss,
        weak_loss,
        g_norm_mean: norms.iter().sum::<f64>() / norms.len() as f64,
        g_norm_max: norms.iter().cloned().fold(0.0, f64::max),
    })
}

/// Interval-averaged training statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    /// Last iteration included in the interval.
    pub iter: usize,
    pub regression_loss: f64,
    pub strong_loss: f64,
    pub weak_loss: f64,
    pub g_norm_mean: f64,
    pub g_norm_max: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunLog {
    pub records: Vec<LogRecord>,
    pub strong_iters: usize,
    pub weak_iters: usize,
    pub final_checkpoint: Option<PathBuf>,
}

impl RunLog {
    /// Deterministic CSV (wall time is left out so reruns compare byte for byte).
    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,regression_loss,strong_loss,weak_loss,g_norm_mean,g_norm_max\n");
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.iter, r.regression_loss, r.strong_loss, r.weak_loss, r.g_norm_mean, r.g_norm_max
            ));
        }
        s
    }

    pub fn timing_csv(&self) -> String {
        let mut s = String::from("iter,wall_seconds\n");
        for r in &self.records {
            s.push_str(&format!("{},{:.3}\n", r.iter, r.wall_seconds));
        }
        s
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub strong: NetParams,
    pub weak: Option<NetParams>,
    pub log: RunLog,
}

/// Runs `cfg.iters` steps from a fresh initialisation.
pub fn train_loop(cfg: &TrainConfig, data: TrainData) -> Result<TrainOutput> {
    let num_classes = data.num_classes();
    if num_classes == 0 {
        return Err(TrainError::EmptyData);
    }
    let mut state = TrainState::new(cfg, num_classes)?;
    let start = Instant::now();
    let mut log = RunLog::default();
    let mut acc = Vec::new();
    let every = cfg.log_every.max(1);
    for k in 0..cfg.iters {
        acc.push(train_step(&mut state, cfg, &data)?);
        if acc.len() == every || k + 1 == cfg.iters {
            let n = acc.len() as f64;
            let mean = |f: fn(&StepRecord) -> f64| acc.iter().map(f).sum::<f64>() / n;
            log.records.push(LogRecord {
                iter: k,
                regression_loss: mean(|r| r.regression_loss),
                strong_loss: mean(|r| r.strong_loss),
                weak_loss: mean(|r| r.weak_loss),
                g_norm_mean: mean(|r| r.g_norm_mean),
                g_norm_max: acc.iter().map(|r| r.g_norm_max).fold(0.0, f64::max),
                wall_seconds: start.elapsed().as_secs_f64(),
            });
            acc.clear();
        }
        if cfg.checkpoint_every > 0 && (k + 1) % cfg.checkpoint_every == 0 {
            if let Some(dir) = &cfg.checkpoint_dir {
                let path = dir.join(format!("strong_{}.bin", k + 1));
                checkpoint::save(&state.strong, &path)?;
                log.final_checkpoint = Some(path);
            }
        }
    }
    log.strong_iters = state.iter;
    log.weak_iters = state.weak_steps;
    Ok(TrainOutput { strong: state.strong, weak: state.weak, log })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::{build_recursive_mixture, preset_config, Preset};

    fn small_arch() -> Arch {
        Arch { d_c: 4, d_h: 16, n_blocks: 3, branch_index: Some(1), n_freqs: 4 }
    }

    fn small(variant: Variant) -> TrainConfig {
        let arch = small_arch();
        TrainConfig {
            arch,
            weak_arch: (variant == Variant::Ag).then_some(Arch { d_h: 8, ..arch }),
            skip_blocks: vec![1],
            batch: 32,
            iters: 20,
            lr: 1e-3,
            seed: 5,
            log_every: 5,
            ..TrainConfig::for_variant(variant)
        }
    }

    fn spec() -> MixtureSpec {
        build_recursive_mixture(&preset_config(Preset::A)).unwrap()
    }

    #[test]
    fn target_substitution() {
        let u = Vec2::new(1.0, 0.0);
        let g = Vec2::new(0.0, 2.0);
        assert_eq!(w2s_target(u, g, 0.5, 0.5, (0.2, 0.8)), Vec2::new(1.0, 1.0));
        assert_eq!(w2s_target(u, g, 0.5, 0.9, (0.2, 0.8)), u);
        assert_eq!(w2s_target(u, g, 0.0, 0.5, (0.2, 0.8)), u);
    }

    #[test]
    fn pair_identities() {
        let p = TrainingPair::new(Vec2::new(0.3, -0.1), Vec2::new(1.2, 0.4), 0.37, 2, false);
        assert_eq!(p.x_t, p.x0 * (1.0 - 0.37) + p.eps * 0.37);
        assert_eq!(p.u, p.eps - p.x0);
        assert_eq!(p.cond(), Some(2));
    }

    #[test]
    fn timestep_distribution() {
        let mut rng = substream(1, purpose::TRAIN, 0);
        let n = 200_000;
        let mut ts: Vec<f64> = (0..n).map(|_| sample_timestep(0.0, 1.0, &mut rng)).collect();
        ts.sort_by(f64::total_cmp);
        assert!((ts[n / 2] - 0.5).abs() < 0.01);
        let cdf = ts.iter().filter(|&&t| t <= 1.0 / (1.0 + 1f64.exp())).count() as f64 / n as f64;
        assert!((cdf - 0.158_655_253_931_457).abs() < 0.005, "{cdf}");
        let t = sample_timestep(0.0, 1e-12, &mut rng);
        assert!((t - 0.5).abs() < 1e-9);
        assert!(ts.iter().all(|&t| (1e-5..=1.0 - 1e-5).contains(&t)));
    }

    #[test]
    fn untrained_mg_weak_is_zero_and_sgg_is_piecewise() {
        let s = spec();
        let mut cfg = small(Variant::Sgg);
        cfg.tau = 0.2;
        let state = TrainState::new(&cfg, s.num_classes()).unwrap();
        let p = TrainingPair::new(Vec2::new(0.1, 0.2), Vec2::new(-0.3, 0.5), 0.5, 1, false);
        let mg = TrainConfig { variant: Variant::Mg, ..cfg.clone() };
        assert_eq!(weak_velocity(&mg, &state.strong, None, &p, None).unwrap(), Vec2::zeros());

        // Perturb the net so the sources differ.
        let mut net = state.strong.clone();
        net.for_each_mut(|_, t| t.iter_mut().enumerate().for_each(|(i, v)| *v += 0.01 * ((i % 7) as f64 - 3.0)));
        let br = TrainConfig { variant: Variant::Br, ..cfg.clone() };
        let hi = TrainingPair { t: 0.5, ..p };
        let lo = TrainingPair { t: 0.1, ..p };
        assert_eq!(
            weak_velocity(&cfg, &net, None, &hi, Some(1)).unwrap(),
            weak_velocity(&mg, &net, None, &hi, None).unwrap()
        );
        assert_eq!(
            weak_velocity(&cfg, &net, None, &lo, Some(1)).unwrap(),
            weak_velocity(&br, &net, None, &lo, Some(1)).unwrap()
        );
        assert_ne!(
            weak_velocity(&mg, &net, None, &lo, None).unwrap(),
            weak_velocity(&br, &net, None, &lo, Some(1)).unwrap()
        );
    }

    #[test]
    fn ag_with_copied_weak_matches_strong() {
        let s = spec();
        let cfg = TrainConfig { weak_arch: Some(small_arch()), ..small(Variant::Ag) };
        let mut state = TrainState::new(&cfg, s.num_classes()).unwrap();
        state.strong.for_each_mut(|_, t| t.iter_mut().enumerate().for_each(|(i, v)| *v += 0.02 * ((i % 5) as f64)));
        let weak = state.strong.clone();
        let p = TrainingPair::new(Vec2::new(0.4, 0.2), Vec2::new(0.1, 0.9), 0.6, 3, false);
        let w = weak_velocity(&cfg, &state.strong, Some(&weak), &p, Some(3)).unwrap();
        let v = crate::VelocityField::velocity(&state.strong, p.x_t, p.t, Some(3));
        assert_eq!(w, v);
        assert!(matches!(weak_velocity(&cfg, &state.strong, None, &p, Some(3)), Err(TrainError::MissingWeak(_))));
    }

    #[test]
    fn zero_weight_replays_baseline() {
        let s = spec();
        let base = train_loop(&small(Variant::Baseline), TrainData::Spec(&s)).unwrap();
        // Branch variants add the head's own regression loss, which also shapes the trunk.
        for v in [Variant::Mg, Variant::Ag, Variant::SlgWarm] {
            let cfg = TrainConfig { w: 0.0, ..small(v) };
            let out = train_loop(&cfg, TrainData::Spec(&s)).unwrap();
            assert_eq!(out.strong, base.strong, "{v}");
        }
    }

    #[test]
    fn stop_gradient_two_pass_is_bit_identical() {
        let s = spec();
        for v in [Variant::Mg, Variant::Ag, Variant::Br, Variant::Sgg, Variant::SlgWarm] {
            let cfg = TrainConfig { warmup_iters: 0, w: 0.7, interval: (0.0, 1.0), ..small(v) };
            let mut state = TrainState::new(&cfg, s.num_classes()).unwrap();
            for _ in 0..3 {
                train_step(&mut state, &cfg, &TrainData::Spec(&s)).unwrap();
            }
            let mut rng = substream(99, purpose::TRAIN, 0);
            let pairs = draw_batch(&TrainData::Spec(&s), &cfg, &mut rng);
            let g = guidance_terms(&cfg, &state, &pairs).unwrap();
            assert!(g.iter().any(|x| x.norm() > 0.0), "{v}");
            let (grads, ..) = strong_gradients(&cfg, &state.strong, &pairs, &g).unwrap();

            // Second pass: g assembled independently from plain forwards and injected.
            let v_c: Vec<Vec2> = pairs
                .iter()
                .map(|p| crate::VelocityField::velocity(&state.strong, p.x_t, p.t, p.cond()))
                .collect();
            let weak = weak_velocities(&cfg, &state.strong, state.weak.as_ref(), &pairs).unwrap();
            let g2: Vec<Vec2> = v_c.iter().zip(&weak).map(|(a, b)| a - b).collect();
            let (grads2, ..) = strong_gradients(&cfg, &state.strong, &pairs, &g2).unwrap();
            assert_eq!(grads, grads2, "{v}");

            // Moving only the weak source changes g, never the strong parameters' gradient path.
            if let Some(weak_net) = &state.weak {
                let mut moved = weak_net.clone();
                moved.for_each_mut(|_, t| t.iter_mut().for_each(|x| *x *= 1.5));
                let st = TrainState { weak: Some(moved), ..state.clone() };
                assert_ne!(guidance_terms(&cfg, &st, &pairs).unwrap(), g);
            }
        }
    }

    #[test]
    fn ag_cadence() {
        let s = spec();
        let cfg = TrainConfig { iters: 400, weak_update_ratio: 4, batch: 4, ..small(Variant::Ag) };
        let out = train_loop(&cfg, TrainData::Spec(&s)).unwrap();
        assert_eq!(out.log.strong_iters, 400);
        assert_eq!(out.log.weak_iters, 100);
        assert_eq!(out.weak.unwrap().version, 100);
    }

    #[test]
    fn zero_iters_returns_init() {
        let s = spec();
        let cfg = TrainConfig { iters: 0, ..small(Variant::Baseline) };
        let out = train_loop(&cfg, TrainData::Spec(&s)).unwrap();
        assert_eq!(out.strong, init_params(cfg.arch, s.num_classes(), cfg.seed).unwrap());
        assert!(out.log.records.is_empty());
    }

    #[test]
    fn dropout_fraction() {
        let s = spec();
        let cfg = TrainConfig { batch: 1, ..small(Variant::Baseline) };
        let n = 100_000;
        let mut dropped = 0;
        for k in 0..n {
            let mut rng = substream(cfg.seed, purpose::TRAIN, k);
            dropped += draw_batch(&TrainData::Spec(&s), &cfg, &mut rng)[0].dropped as usize;
        }
        let p = cfg.cond_dropout;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((dropped as f64 - n as f64 * p).abs() < 4.0 * sigma, "{dropped}");
    }

    #[test]
    fn one_step_reduces_batch_loss() {
        let s = spec();
        let mut wins = 0;
        for seed in 0..3 {
            let cfg = TrainConfig { seed, lr: 1e-4, ..small(Variant::Baseline) };
            let mut state = TrainState::new(&cfg, s.num_classes()).unwrap();
            let mut rng = substream(cfg.seed, purpose::TRAIN, 0);
            let pairs = draw_batch(&TrainData::Spec(&s), &cfg, &mut rng);
            let zeros = vec![Vec2::zeros(); pairs.len()];
            let before = strong_gradients(&cfg, &state.strong, &pairs, &zeros).unwrap().1;
            train_step(&mut state, &cfg, &TrainData::Spec(&s)).unwrap();
            let after = strong_gradients(&cfg, &state.strong, &pairs, &zeros).unwrap().1;
            wins += (after < before) as usize;
        }
        assert!(wins >= 2);
    }

    #[test]
    fn invalid_configs() {
        let bad = [
            TrainConfig { w: -1.0, ..small(Variant::Mg) },
            TrainConfig { cond_dropout: 0.0, ..small(Variant::Mg) },
            TrainConfig { unconditional: true, ..small(Variant::Sgg) },
            TrainConfig { weak_arch: None, ..small(Variant::Ag) },
            TrainConfig { interval: (0.8, 0.2), ..small(Variant::Br) },
            TrainConfig { skip_blocks: vec![9], ..small(Variant::SlgWarm) },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
        assert!("nope".parse::<Variant>().is_err());
    }

    #[test]
    fn run_log_and_checkpoints() {
        let s = spec();
        let dir = tempfile::tempdir().unwrap();
        let cfg = TrainConfig { checkpoint_every: 10, checkpoint_dir: Some(dir.path().into()), ..small(Variant::Br) };
        let out = train_loop(&cfg, TrainData::Spec(&s)).unwrap();
        let iters: Vec<usize> = out.log.records.iter().map(|r| r.iter).collect();
        assert_eq!(iters, vec![4, 9, 14, 19]);
        assert!(out.log.records.iter().all(|r| r.weak_loss > 0.0));
        let last = out.log.final_checkpoint.clone().unwrap();
        assert!(last.ends_with("strong_20.bin"));
        assert_eq!(checkpoint::load(&last).unwrap(), out.strong);
        assert!(out.log.to_csv().starts_with("iter,regression_loss"));
        let again = train_loop(&cfg, TrainData::Spec(&s)).unwrap();
        assert_eq!(again.strong, out.strong);
        assert_eq!(again.log.to_csv(), out.log.to_csv());
    }
}
