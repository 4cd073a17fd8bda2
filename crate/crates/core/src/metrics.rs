//! Sample-quality metrics against a known mixture.
//!
//! * outlier rate: share of samples whose log density under their own class falls
//!   below a floor (default: the 0.1% quantile of ground-truth log densities);
//! * mode coverage: share of (class, component) pairs with at least one same-class
//!   sample within a Mahalanobis radius of the component;
//! * class accuracy: share of samples whose highest class density is their prompt;
//! * velocity-field MSE against an exact oracle.
//!
//! Unconditional samples (label `None`) are scored against the marginal density and
//! count toward every class for coverage; they carry no class-accuracy signal.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::{Mutex, OnceLock};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::mixture::{log_sum_exp, mahalanobis_sq, MixtureSpec};
use crate::rng::{purpose, substream};
use crate::sampler::SampleBatch;
use crate::{Condition, Mat2, Vec2, VelocityField};

/// Default coverage radius in standard deviations.
pub const DEFAULT_RADIUS_SIGMAS: f64 = 2.0;
/// Default floor quantile.
pub const DEFAULT_FLOOR_QUANTILE: f64 = 1e-3;
/// Ground-truth draws used to place the floor.
pub const FLOOR_SAMPLES: usize = 100_000;

#[derive(Clone, Debug)]
struct Term {
    log_w: f64,
    mean: Vec2,
    prec: Mat2,
    log_norm: f64,
}

/// Precomputed clean (t = 0) class-conditional densities.
#[derive(Clone, Debug)]
pub struct DensityTable {
    classes: Vec<usize>,
    terms: Vec<Vec<Term>>,
}

impl DensityTable {
    pub fn new(spec: &MixtureSpec) -> Self {
        let classes = spec.selected_classes().to_vec();
        let terms = classes
            .iter()
            .map(|&c| {
                spec.weighted_members(Some(c))
                    .expect("selected class")
                    .into_iter()
                    .map(|(i, w)| {
                        let comp = &spec.components()[i];
                        Term {
                            log_w: w.ln(),
                            mean: comp.mean,
                            prec: comp.cov.try_inverse().expect("SPD covariance"),
                            log_norm: -(2.0 * std::f64::consts::PI).ln() - 0.5 * comp.cov.determinant().ln(),
                        }
                    })
                    .collect()
            })
            .collect();
        Self { classes, terms }
    }

    pub fn classes(&self) -> &[usize] {
        &self.classes
    }

    fn class_slot(&self, class: usize) -> Option<usize> {
        self.classes.binary_search(&class).ok()
    }

    fn log_class(&self, slot: usize, x: &Vec2) -> f64 {
        let vals: Vec<f64> = self.terms[slot]
            .iter()
            .map(|t| {
                let d = x - t.mean;
                t.log_w + t.log_norm - 0.5 * (d.transpose() * t.prec * d)[0]
            })
            .collect();
        log_sum_exp(&vals)
    }

    /// `log p(x | c)`; the null condition gives the marginal over selected classes.
    /// Unknown classes score `-inf`.
    pub fn log_density(&self, x: &Vec2, cond: Condition) -> f64 {
        match cond {
            Some(c) => self.class_slot(c).map_or(f64::NEG_INFINITY, |s| self.log_class(s, x)),
            None => {
                let prior = -(self.classes.len() as f64).ln();
                let vals: Vec<f64> = (0..self.classes.len()).map(|s| prior + self.log_class(s, x)).collect();
                log_sum_exp(&vals)
            }
        }
    }

    /// Class with the highest density; ties go to the lower class index.
    pub fn argmax_class(&self, x: &Vec2) -> usize {
        let mut best = (f64::NEG_INFINITY, self.classes[0]);
        for (s, &c) in self.classes.iter().enumerate() {
            let l = self.log_class(s, x);
            if l > best.0 {
                best = (l, c);
            }
        }
        best.1
    }
}

/// `quantile` of ground-truth log densities over `n` fresh draws. Conditional floors
/// score each draw under its own class, unconditional ones under the marginal.
pub fn density_floor(spec: &MixtureSpec, conditional: bool, quantile: f64, n: usize, seed: u64) -> f64 {
    let table = DensityTable::new(spec);
    let mut rng = substream(seed, purpose::FLOOR, conditional as u64);
    let mut vals: Vec<f64> = (0..n)
        .map(|_| {
            let p = spec.sample_one(&mut rng);
            table.log_density(&p.x, conditional.then_some(p.class))
        })
        .collect();
    vals.sort_by(f64::total_cmp);
    let k = ((quantile * n as f64).floor() as usize).min(n - 1);
    vals[k]
}

/// The default floor, computed once per (spec digest, mode) and cached.
pub fn default_density_floor(spec: &MixtureSpec, conditional: bool) -> f64 {
    static CACHE: OnceLock<Mutex<HashMap<(String, bool), f64>>> = OnceLock::new();
    let key = (spec.digest(), conditional);
    let cache = CACHE.get_or_init(Default::default);
    if let Some(v) = cache.lock().expect("floor cache").get(&key) {
        return *v;
    }
    let v = density_floor(spec, conditional, DEFAULT_FLOOR_QUANTILE, FLOOR_SAMPLES, 0);
    cache.lock().expect("floor cache").insert(key, v);
    v
}

/// Whether a batch carries class prompts.
pub fn is_conditional(batch: &SampleBatch) -> bool {
    batch.class_labels.iter().any(Option::is_some)
}

fn outlier_flags(table: &DensityTable, batch: &SampleBatch, floor: f64) -> Vec<bool> {
    batch.finals.iter().zip(&batch.class_labels).map(|(x, c)| table.log_density(x, *c) < floor).collect()
}

pub fn outlier_rate(spec: &MixtureSpec, batch: &SampleBatch, log_density_floor: f64) -> f64 {
    if batch.is_empty() {
        return 0.0;
    }
    let flags = outlier_flags(&DensityTable::new(spec), batch, log_density_floor);
    flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64
}

fn covered_components(spec: &MixtureSpec, batch: &SampleBatch, radius_sigmas: f64) -> HashMap<usize, Vec<bool>> {
    let r2 = radius_sigmas * radius_sigmas;
    spec.selected_classes()
        .iter()
        .map(|&c| {
            let flags = spec
                .class_members(c)
                .iter()
                .map(|&i| {
                    let comp = &spec.components()[i];
                    batch.finals.iter().zip(&batch.class_labels).any(|(x, l)| {
                        (l.is_none() || *l == Some(c)) && mahalanobis_sq(x, &comp.mean, &comp.cov) <= r2
                    })
                })
                .collect();
            (c, flags)
        })
        .collect()
}

pub fn mode_coverage(spec: &MixtureSpec, batch: &SampleBatch, radius_sigmas: f64) -> f64 {
    let cov = covered_components(spec, batch, radius_sigmas);
    let total: usize = cov.values().map(Vec::len).sum();
    let hit: usize = cov.values().map(|v| v.iter().filter(|&&b| b).count()).sum();
    hit as f64 / total as f64
}

/// `None` when no sample carries a class prompt.
pub fn class_accuracy(spec: &MixtureSpec, batch: &SampleBatch) -> Option<f64> {
    let table = DensityTable::new(spec);
    let (mut n, mut ok) = (0usize, 0usize);
    for (x, l) in batch.finals.iter().zip(&batch.class_labels) {
        if let Some(c) = l {
            n += 1;
            ok += (table.argmax_class(x) == *c) as usize;
        }
    }
    (n > 0).then(|| ok as f64 / n as f64)
}

/// Monte Carlo mean of `|model - oracle|²` per `t` over forward-noised ground-truth
/// states. States at grid index `k` come from `substream(seed, EVAL, k)`.
pub fn velocity_field_mse(
    model: &dyn VelocityField,
    oracle: &dyn VelocityField,
    spec: &MixtureSpec,
    t_list: &[f64],
    n: usize,
    conditional: bool,
    seed: u64,
) -> Vec<f64> {
    t_list
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let mut rng = substream(seed, purpose::EVAL, k as u64);
            let mut xs = Vec::with_capacity(n);
            let mut cs = Vec::with_capacity(n);
            for _ in 0..n {
                let p = spec.sample_one(&mut rng);
                let eps = Vec2::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
                xs.push(p.x * (1.0 - t) + eps * t);
                cs.push(conditional.then_some(p.class));
            }
            let a = model.velocity_batch(&xs, t, &cs);
            let b = oracle.velocity_batch(&xs, t, &cs);
            a.iter().zip(&b).map(|(u, v)| (u - v).norm_squared()).sum::<f64>() / n as f64
        })
        .collect()
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassBreakdown {
    pub class: usize,
    pub n_samples: usize,
    pub outlier_rate: f64,
    pub mode_coverage: f64,
    pub n_components: usize,
    pub class_accuracy: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub outlier_rate: f64,
    pub mode_coverage: f64,
    pub class_accuracy: Option<f64>,
    pub mean_nll: f64,
    pub per_class: Vec<ClassBreakdown>,
    pub n_samples: usize,
    pub log_density_floor: f64,
    pub radius_sigmas: f64,
    pub guidance_label: String,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str =
        "guidance_label,n_samples,outlier_rate,mode_coverage,class_accuracy,mean_nll,log_density_floor,radius_sigmas";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.guidance_label,
            self.n_samples,
            self.outlier_rate,
            self.mode_coverage,
            self.class_accuracy.map_or("nan".to_string(), |a| a.to_string()),
            self.mean_nll,
            self.log_density_floor,
            self.radius_sigmas
        )
    }

    pub fn pretty(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "guidance        {}", self.guidance_label);
        let _ = writeln!(s, "samples         {}", self.n_samples);
        let _ = writeln!(s, "outlier rate    {:.4}  (log-density floor {:.4})", self.outlier_rate, self.log_density_floor);
        let _ = writeln!(s, "mode coverage   {:.4}  (radius {} sigma)", self.mode_coverage, self.radius_sigmas);
        match self.class_accuracy {
            Some(a) => writeln!(s, "class accuracy  {a:.4}"),
            None => writeln!(s, "class accuracy  n/a (unconditional)"),
        }
        .ok();
        let _ = writeln!(s, "mean NLL        {:.4}", self.mean_nll);
        let _ = writeln!(s, "class  n      outlier  coverage  accuracy");
        for c in &self.per_class {
            let _ = writeln!(
                s,
                "{:<6} {:<6} {:<8.4} {:<9.4} {}",
                c.class,
                c.n_samples,
                c.outlier_rate,
                c.mode_coverage,
                c.class_accuracy.map_or("-".to_string(), |a| format!("{a:.4}"))
            );
        }
        s
    }
}

/// All metrics for a batch with explicit thresholds.
pub fn evaluate(spec: &MixtureSpec, batch: &SampleBatch, log_density_floor: f64, radius_sigmas: f64) -> EvalReport {
    let table = DensityTable::new(spec);
    let flags = outlier_flags(&table, batch, log_density_floor);
    let coverage = covered_components(spec, batch, radius_sigmas);
    let n = batch.len();
    let mut per_class = Vec::new();
    for &c in spec.selected_classes() {
        let idx: Vec<usize> = (0..n).filter(|&i| batch.class_labels[i] == Some(c)).collect();
        let out = idx.iter().filter(|&&i| flags[i]).count();
        let correct = idx.iter().filter(|&&i| table.argmax_class(&batch.finals[i]) == c).count();
        let cov = &coverage[&c];
        per_class.push(ClassBreakdown {
            class: c,
            n_samples: idx.len(),
            outlier_rate: if idx.is_empty() { 0.0 } else { out as f64 / idx.len() as f64 },
            mode_coverage: cov.iter().filter(|&&b| b).count() as f64 / cov.len() as f64,
            n_components: cov.len(),
            class_accuracy: (!idx.is_empty()).then(|| correct as f64 / idx.len() as f64),
        });
    }
    let nll = batch.finals.iter().zip(&batch.class_labels).map(|(x, c)| -table.log_density(x, *c)).sum::<f64>();
    let total_comp: usize = per_class.iter().map(|c| c.n_components).sum();
    let labeled: usize = per_class.iter().map(|c| c.n_samples).sum();
    EvalReport {
        outlier_rate: if n == 0 { 0.0 } else { flags.iter().filter(|&&f| f).count() as f64 / n as f64 },
        mode_coverage: per_class.iter().map(|c| c.mode_coverage * c.n_components as f64).sum::<f64>()
            / total_comp as f64,
        class_accuracy: (labeled > 0).then(|| {
            per_class.iter().filter_map(|c| c.class_accuracy.map(|a| a * c.n_samples as f64)).sum::<f64>()
                / labeled as f64
        }),
        mean_nll: if n == 0 { f64::NAN } else { nll / n as f64 },
        per_class,
        n_samples: n,
        log_density_floor,
        radius_sigmas,
        guidance_label: batch.guidance_label.clone(),
    }
}

/// [`evaluate`] with the cached default floor and radius.
pub fn evaluate_default(spec: &MixtureSpec, batch: &SampleBatch) -> EvalReport {
    let floor = default_density_floor(spec, is_conditional(batch));
    evaluate(spec, batch, floor, DEFAULT_RADIUS_SIGMAS)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mixture::{build_recursive_mixture, gaussian_log_pdf, preset_config, Preset};
    use crate::oracle::MixtureOracle;
    use rand::seq::SliceRandom;

    fn batch(points: Vec<(Vec2, Condition)>) -> SampleBatch {
        let (finals, class_labels) = points.into_iter().unzip();
        SampleBatch { finals, class_labels, trajectories: None, guidance_label: "test".into() }
    }

    fn ground_truth(spec: &MixtureSpec, n: usize, seed: u64) -> SampleBatch {
        let mut rng = substream(seed, purpose::EVAL, 77);
        batch((0..n).map(|_| spec.sample_one(&mut rng)).map(|p| (p.x, Some(p.class))).collect())
    }

    fn means_batch(spec: &MixtureSpec) -> SampleBatch {
        batch(
            spec.selected_classes()
                .iter()
                .flat_map(|&c| spec.class_members(c).iter().map(move |&i| (i, c)))
                .map(|(i, c)| (spec.components()[i].mean, Some(c)))
                .collect(),
        )
    }

    #[test]
    fn table_matches_mixture_density() {
        let spec = build_recursive_mixture(&preset_config(Preset::C)).unwrap();
        let table = DensityTable::new(&spec);
        for (x, c) in [(Vec2::new(0.1, 0.2), Some(3)), (Vec2::new(-0.5, 0.4), None), (Vec2::new(2.0, 1.0), Some(0))] {
            let a = table.log_density(&x, c);
            let b = spec.log_density(&x, c, 0.0).unwrap();
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn component_means_are_inliers_and_far_points_outliers() {
        let spec = build_recursive_mixture(&preset_config(Preset::A)).unwrap();
        let floor = default_density_floor(&spec, true);
        assert_eq!(outlier_rate(&spec, &means_batch(&spec), floor), 0.0);
        let far = batch((0..20).map(|i| (Vec2::new(100.0 + i as f64, -100.0), Some(i % 4))).collect());
        assert_eq!(outlier_rate(&spec, &far, floor), 1.0);
    }

    #[test]
    fn floor_calibration() {
        let spec = build_recursive_mixture(&preset_config(Preset::B)).unwrap();
        let floor = default_density_floor(&spec, true);
        let n = 100_000;
        let rate = outlier_rate(&spec, &ground_truth(&spec, n, 3), floor);
        let sigma = (1e-3 * (1.0 - 1e-3) / n as f64).sqrt();
        assert!((rate - 1e-3).abs() < 4.0 * sigma, "{rate}");
    }

    #[test]
    fn coverage_of_means_and_empty_class() {
        let spec = build_recursive_mixture(&preset_config(Preset::A)).unwrap();
        assert_eq!(mode_coverage(&spec, &means_batch(&spec), 2.0), 1.0);
        let mut b = means_batch(&spec);
        let keep: Vec<bool> = b.class_labels.iter().map(|c| *c != Some(2)).collect();
        b.finals = b.finals.iter().zip(&keep).filter(|(_, k)| **k).map(|(x, _)| *x).collect();
        b.class_labels.retain(|c| *c != Some(2));
        let r = evaluate(&spec, &b, -10.0, 2.0);
        let c2 = r.per_class.iter().find(|c| c.class == 2).unwrap();
        assert_eq!(c2.mode_coverage, 0.0);
        assert_eq!(c2.n_samples, 0);
    }

    #[test]
    fn ground_truth_self_coverage() {
        let spec = build_recursive_mixture(&preset_config(Preset::B)).unwrap();
        assert!(mode_coverage(&spec, &ground_truth(&spec, 100_000, 1), 2.0) >= 0.999);
    }

    #[test]
    fn accuracy_on_means_and_chance_level() {
        let spec = build_recursive_mixture(&preset_config(Preset::B)).unwrap();
        let means = means_batch(&spec);
        let table = DensityTable::new(&spec);
        let dominated = means.finals.iter().zip(&means.class_labels).all(|(x, c)| table.argmax_class(x) == c.unwrap());
        if dominated {
            assert_eq!(class_accuracy(&spec, &means), Some(1.0));
        }
        let mut gt = ground_truth(&spec, 50_000, 2);
        let mut rng = substream(5, purpose::EVAL, 0);
        gt.class_labels.shuffle(&mut rng);
        let acc = class_accuracy(&spec, &gt).unwrap();
        let p: f64 = 1.0 / 24.0;
        let sigma = (p * (1.0 - p) / 50_000.0).sqrt();
        // Shuffling keeps the label histogram, so the expected accuracy is close to 1/24.
        assert!((acc - p).abs() < 4.0 * sigma + 0.002, "{acc}");
    }

    #[test]
    fn bayes_rate_matches_brute_force() {
        let spec = build_recursive_mixture(&preset_config(Preset::B)).unwrap();
        let gt = ground_truth(&spec, 100_000, 4);
        let acc = class_accuracy(&spec, &gt).unwrap();
        // Brute force: plain (non-log) density sums per class.
        let mut ok = 0usize;
        for (x, l) in gt.finals.iter().zip(&gt.class_labels) {
            let mut best = (-1.0, usize::MAX);
            for &c in spec.selected_classes() {
                let d: f64 = spec
                    .weighted_members(Some(c))
                    .unwrap()
                    .iter()
                    .map(|&(i, w)| w * gaussian_log_pdf(x, &spec.components()[i].mean, &spec.components()[i].cov).exp())
                    .sum();
                if d > best.0 {
                    best = (d, c);
                }
            }
            ok += (best.1 == l.unwrap()) as usize;
        }
        let bayes = ok as f64 / gt.len() as f64;
        assert!((acc - bayes).abs() < 0.005, "{acc} vs {bayes}");
    }

    #[test]
    fn per_class_consistency_and_permutation_invariance() {
        let spec = build_recursive_mixture(&preset_config(Preset::C)).unwrap();
        let gt = ground_truth(&spec, 5_000, 9);
        let floor = default_density_floor(&spec, true);
        let r = evaluate(&spec, &gt, floor, 2.0);
        let n: usize = r.per_class.iter().map(|c| c.n_samples).sum();
        let w_out = r.per_class.iter().map(|c| c.outlier_rate * c.n_samples as f64).sum::<f64>() / n as f64;
        assert!((w_out - r.outlier_rate).abs() < 1e-12);
        assert!((r.outlier_rate - outlier_rate(&spec, &gt, floor)).abs() < 1e-12);
        assert!((r.mode_coverage - mode_coverage(&spec, &gt, 2.0)).abs() < 1e-12);
        assert!((r.class_accuracy.unwrap() - class_accuracy(&spec, &gt).unwrap()).abs() < 1e-12);

        let mut idx: Vec<usize> = (0..gt.len()).collect();
        idx.shuffle(&mut substream(1, purpose::EVAL, 1));
        let perm = batch(idx.iter().map(|&i| (gt.finals[i], gt.class_labels[i])).collect());
        let r2 = evaluate(&spec, &perm, floor, 2.0);
        assert_eq!(r.mode_coverage, r2.mode_coverage);
        assert_eq!(r.per_class, r2.per_class);
        assert!((r.mean_nll - r2.mean_nll).abs() < 1e-12);
    }

    #[test]
    fn far_point_cannot_lower_outliers_or_coverage() {
        let spec = build_recursive_mixture(&preset_config(Preset::A)).unwrap();
        let gt = ground_truth(&spec, 500, 6);
        let floor = default_density_floor(&spec, true);
        let mut more = gt.clone();
        more.finals.push(Vec2::new(50.0, 50.0));
        more.class_labels.push(Some(0));
        assert!(outlier_rate(&spec, &more, floor) >= outlier_rate(&spec, &gt, floor));
        assert_eq!(mode_coverage(&spec, &more, 2.0), mode_coverage(&spec, &gt, 2.0));
    }

    #[test]
    fn velocity_mse_identities() {
        let spec = build_recursive_mixture(&preset_config(Preset::A)).unwrap();
        let oracle = MixtureOracle(&spec);
        let ts = [0.1, 0.5, 0.9];
        let same = velocity_field_mse(&oracle, &oracle, &spec, &ts, 500, true, 1);
        assert!(same.iter().all(|&v| v.abs() < 1e-12));
        let zero = |_: Vec2, _: f64, _: Condition| Vec2::zeros();
        let z = velocity_field_mse(&zero, &oracle, &spec, &ts, 500, true, 1);
        // Direct Monte Carlo of |v*|² on the same states.
        for (k, &t) in ts.iter().enumerate() {
            let mut rng = substream(1, purpose::EVAL, k as u64);
            let mut acc = 0.0;
            for _ in 0..500 {
                let p = spec.sample_one(&mut rng);
                let eps = Vec2::new(rng.sample(StandardNormal), rng.sample(StandardNormal));
                acc += oracle.velocity(p.x * (1.0 - t) + eps * t, t, Some(p.class)).norm_squared();
            }
            assert!((z[k] - acc / 500.0).abs() < 1e-12);
        }
    }

    #[test]
    fn unconditional_batches() {
        let spec = build_recursive_mixture(&preset_config(Preset::A)).unwrap();
        let mut gt = ground_truth(&spec, 2000, 8);
        gt.class_labels.iter_mut().for_each(|c| *c = None);
        let r = evaluate_default(&spec, &gt);
        assert_eq!(r.class_accuracy, None);
        assert!(r.mode_coverage > 0.9);
        assert!(r.outlier_rate < 0.01);
    }
}
