//! Subcommand implementations behind the `guidance-lab` binary.
//!
//! Every subcommand takes a resolved [`Config`] and explicit paths, writes its outputs
//! and a run manifest beside them, and returns the manifest path. Wall-clock figures go
//! to `*.timing.txt` files, which are the only outputs that differ between reruns.

pub mod config;
pub mod manifest;
pub mod svg;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use thiserror::Error;

pub use config::Config;
pub use manifest::RunManifest;

use crate::guidance::{GuidanceError, GuidanceKind, GuidanceSpec, GuidedField};
use crate::metrics::{
    default_density_floor, density_floor, evaluate, is_conditional, EvalReport, DEFAULT_FLOOR_QUANTILE,
    FLOOR_SAMPLES,
};
use crate::mixture::{build_recursive_mixture, sample_dataset, MixtureError, MixtureSpec, Preset};
use crate::net::checkpoint::{self, write_atomic};
use crate::net::{NetError, NetParams, SkipBlocks};
use crate::oracle::{guidance_error_curve, midpoint_grid, ErrorCurve, MixtureOracle, OracleError, OracleSource};
use crate::sampler::{round_robin_prompts, sample, SampleBatch, SamplerError};
use crate::train::{train_loop, TrainData, TrainError};
use crate::{Condition, Vec2, VelocityField};

#[derive(Debug, Error)]
pub enum RunnerError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("config: {0}")]
    Config(String),
    #[error("unknown config key `{key}` (nearest valid key: `{nearest}`)")]
    UnknownKey { key: String, nearest: String },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("digest mismatch for {what}: expected {expected}, found {found}")]
    DigestMismatch { what: String, expected: String, found: String },
    #[error("missing input: {0}")]
    MissingInput(String),
    #[error("{path}:{line}: {msg}")]
    Csv { path: PathBuf, line: usize, msg: String },
    #[error(transparent)]
    Mixture(#[from] MixtureError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Guidance(#[from] GuidanceError),
    #[error(transparent)]
    Sampler(#[from] SamplerError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

impl RunnerError {
    pub fn io(path: &Path, source: std::io::Error) -> Self {
        RunnerError::Io { path: path.to_path_buf(), source }
    }
}

pub type Result<T> = std::result::Result<T, RunnerError>;

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| RunnerError::io(dir, e))?;
    }
    write_atomic(path, text.as_bytes()).map_err(|e| RunnerError::io(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| RunnerError::io(path, e))
}

fn base_dir(path: &Path) -> PathBuf {
    path.parent().filter(|d| !d.as_os_str().is_empty()).map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

/// `dir/name.ext` → `dir/name<suffix>`.
fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    path.with_file_name(format!("{stem}{suffix}"))
}

/// The spec from `path`, or built from `data.preset` when absent.
pub fn load_spec(cfg: &Config, path: Option<&Path>) -> Result<MixtureSpec> {
    match path {
        Some(p) => Ok(MixtureSpec::from_text(&read_file(p)?)?),
        None => Ok(build_recursive_mixture(&cfg.toy_config()?)?),
    }
}

pub fn load_net(path: &Path) -> Result<NetParams> {
    if !path.exists() {
        return Err(RunnerError::MissingInput(path.display().to_string()));
    }
    Ok(checkpoint::load(path)?)
}

fn label_field(c: Condition) -> String {
    c.map_or(String::new(), |k| k.to_string())
}

/// Sample CSV: `x,y,class,guidance_label`; unconditional rows leave `class` empty.
pub fn samples_csv(batch: &SampleBatch) -> String {
    let mut s = String::from("x,y,class,guidance_label\n");
    for (x, c) in batch.finals.iter().zip(&batch.class_labels) {
        let _ = writeln!(s, "{},{},{},{}", x[0], x[1], label_field(*c), batch.guidance_label);
    }
    s
}

pub fn parse_samples_csv(text: &str, path: &Path) -> Result<SampleBatch> {
    let err = |line: usize, msg: &str| RunnerError::Csv { path: path.to_path_buf(), line, msg: msg.to_string() };
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("x,y,class,guidance_label") {
        return Err(err(1, "expected header x,y,class,guidance_label"));
    }
    let mut batch =
        SampleBatch { finals: Vec::new(), class_labels: Vec::new(), trajectories: None, guidance_label: String::new() };
    for (n, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(err(n + 2, "expected 4 fields"));
        }
        let x: f64 = f[0].parse().map_err(|_| err(n + 2, "bad x"))?;
        let y: f64 = f[1].parse().map_err(|_| err(n + 2, "bad y"))?;
        let c = if f[2].is_empty() { None } else { Some(f[2].parse().map_err(|_| err(n + 2, "bad class"))?) };
        batch.finals.push(Vec2::new(x, y));
        batch.class_labels.push(c);
        batch.guidance_label = f[3].to_string();
    }
    Ok(batch)
}

/// Trajectory CSV: `step,t,index,x,y,class`.
pub fn trajectory_csv(batch: &SampleBatch, grid: &[f64]) -> Option<String> {
    let tr = batch.trajectories.as_ref()?;
    let mut s = String::from("step,t,index,x,y,class\n");
    for (k, states) in tr.iter().enumerate() {
        for (i, (x, c)) in states.iter().zip(&batch.class_labels).enumerate() {
            let _ = writeln!(s, "{k},{},{i},{},{},{}", grid[k], x[0], x[1], label_field(*c));
        }
    }
    Some(s)
}

/// `sampler.n` prompts, round-robin over the selected classes or all null.
pub fn prompts(cfg: &Config, spec: &MixtureSpec, unconditional: bool) -> Result<Vec<Condition>> {
    let n: usize = cfg.parse("sampler.n")?;
    Ok(if unconditional { vec![None; n] } else { round_robin_prompts(spec.selected_classes(), n) })
}

/// Builds the guided field for `g` and hands it to `f`. Skip guidance degrades `strong`
/// itself; AG and SGG need `weak`.
fn with_guided<R>(
    strong: &dyn VelocityField,
    strong_net: Option<&NetParams>,
    weak: Option<&NetParams>,
    g: &GuidanceSpec,
    f: impl FnOnce(&GuidedField) -> Result<R>,
) -> Result<R> {
    match g.kind {
        GuidanceKind::CagSkip => {
            let net = strong_net.ok_or_else(|| RunnerError::MissingInput("skip guidance needs a checkpoint".into()))?;
            let skip = SkipBlocks { net, blocks: &g.skip_blocks };
            f(&GuidedField::new(strong, Some(&skip), g)?)
        }
        GuidanceKind::CagAg | GuidanceKind::Sgg if weak.is_none() => {
            Err(RunnerError::MissingInput(format!("guidance {} needs a weak checkpoint (--weak)", g.label())))
        }
        _ => f(&GuidedField::new(strong, weak.map(|w| w as &dyn VelocityField), g)?),
    }
}

fn scatter_svg(spec: &MixtureSpec, panels: &[(String, &SampleBatch)]) -> String {
    let pts: Vec<Vec2> = spec.components().iter().map(|c| c.mean).collect();
    let mut b = svg::Bounds::covering(&pts);
    let pad = |(lo, hi): (f64, f64)| {
        let s = 0.25 * (hi - lo);
        (lo - s, hi + s)
    };
    b.x = pad(b.x);
    b.y = pad(b.y);
    let panels: Vec<svg::Panel> = panels
        .iter()
        .map(|(t, batch)| svg::Panel { title: t.clone(), points: &batch.finals, labels: &batch.class_labels })
        .collect();
    svg::scatter_panels(&panels, b)
}

/// `dataset`: ground-truth points as CSV plus the spec text.
pub fn cmd_dataset(cfg: &Config, out: &Path, spec_out: Option<&Path>) -> Result<PathBuf> {
    let start = Instant::now();
    let spec = load_spec(cfg, None)?;
    let data = sample_dataset(&spec, cfg.parse("data.n")?, cfg.seed()?)?;
    write_file(out, &data.to_csv())?;
    let base = base_dir(out);
    let mut m = RunManifest::new("dataset", cfg)?;
    m.extra("spec_digest", spec.digest());
    if let Some(p) = spec_out {
        write_file(p, &spec.to_text())?;
        m.add_output(&base, p)?;
    }
    m.add_output(&base, out)?;
    let mpath = manifest::sidecar(out);
    m.write(&mpath, start.elapsed().as_secs_f64())?;
    Ok(mpath)
}

/// `train`: `strong.bin`, optional `weak.bin`, `train_log.csv` and `train.manifest` in `out_dir`.
pub fn cmd_train(cfg: &Config, spec_path: Option<&Path>, out_dir: &Path) -> Result<PathBuf> {
    let start = Instant::now();
    fs::create_dir_all(out_dir).map_err(|e| RunnerError::io(out_dir, e))?;
    let spec = load_spec(cfg, spec_path)?;
    let mut tc = cfg.train_config()?;
    if tc.checkpoint_every > 0 {
        tc.checkpoint_dir = Some(out_dir.to_path_buf());
    }
    let out = train_loop(&tc, TrainData::Spec(&spec))?;
    let mut m = RunManifest::new("train", cfg)?;
    m.extra("spec_digest", spec.digest());
    m.extra("strong_iters", out.log.strong_iters);
    m.extra("weak_iters", out.log.weak_iters);
    if let Some(p) = spec_path {
        m.add_input(out_dir, p)?;
    }
    let strong = out_dir.join("strong.bin");
    checkpoint::save(&out.strong, &strong)?;
    m.add_output(out_dir, &strong)?;
    if let Some(w) = &out.weak {
        let p = out_dir.join("weak.bin");
        checkpoint::save(w, &p)?;
        m.add_output(out_dir, &p)?;
    }
    let log = out_dir.join("train_log.csv");
    write_file(&log, &out.log.to_csv())?;
    m.add_output(out_dir, &log)?;
    write_file(&out_dir.join("train_log.timing.txt"), &out.log.timing_csv())?;
    let mpath = out_dir.join("train.manifest");
    m.write(&mpath, start.elapsed().as_secs_f64())?;
    Ok(mpath)
}

/// Loaded networks for sampling-type subcommands. `strong = None` samples the exact
/// mixture oracle.
pub struct Models {
    pub strong: Option<NetParams>,
    pub weak: Option<NetParams>,
}

impl Models {
    pub fn load(strong: Option<&Path>, weak: Option<&Path>) -> Result<Self> {
        Ok(Self { strong: strong.map(load_net).transpose()?, weak: weak.map(load_net).transpose()? })
    }

    fn record(&self, m: &mut RunManifest, base: &Path, strong: Option<&Path>, weak: Option<&Path>) -> Result<()> {
        for p in [strong, weak].into_iter().flatten() {
            m.add_input(base, p)?;
        }
        Ok(())
    }
}

/// Samples `g` with the configured sampler; a missing strong net samples the mixture oracle.
pub fn guided_sample(
    spec: &MixtureSpec,
    models: &Models,
    g: &GuidanceSpec,
    cfg: &Config,
    prompts: &[Condition],
) -> Result<SampleBatch> {
    let sspec = cfg.sampler_spec()?;
    let oracle = MixtureOracle(spec);
    let strong: &dyn VelocityField = match &models.strong {
        Some(n) => n,
        None => &oracle,
    };
    with_guided(strong, models.strong.as_ref(), models.weak.as_ref(), g, |field| {
        Ok(sample(field, &sspec, prompts, &g.label())?)
    })
}

/// `sample`: finals CSV, class-coloured SVG and an optional trajectory CSV.
pub fn cmd_sample(
    cfg: &Config,
    spec_path: Option<&Path>,
    strong: Option<&Path>,
    weak: Option<&Path>,
    unconditional: bool,
    out: &Path,
) -> Result<PathBuf> {
    let start = Instant::now();
    let spec = load_spec(cfg, spec_path)?;
    let models = Models::load(strong, weak)?;
    let g = cfg.guidance_spec()?;
    let batch = guided_sample(&spec, &models, &g, cfg, &prompts(cfg, &spec, unconditional)?)?;
    let base = base_dir(out);
    let mut m = RunManifest::new("sample", cfg)?;
    m.extra("spec_digest", spec.digest());
    m.extra("guidance_label", g.label());
    if let Some(p) = spec_path {
        m.add_input(&base, p)?;
    }
    models.record(&mut m, &base, strong, weak)?;
    write_file(out, &samples_csv(&batch))?;
    m.add_output(&base, out)?;
    let svg_path = with_suffix(out, ".svg");
    write_file(&svg_path, &scatter_svg(&spec, &[(g.label(), &batch)]))?;
    m.add_output(&base, &svg_path)?;
    if let Some(text) = trajectory_csv(&batch, &cfg.sampler_spec()?.grid()) {
        let p = with_suffix(out, ".trajectory.csv");
        write_file(&p, &text)?;
        m.add_output(&base, &p)?;
    }
    let mpath = manifest::sidecar(out);
    m.write(&mpath, start.elapsed().as_secs_f64())?;
    Ok(mpath)
}

fn floor_for(cfg: &Config, spec: &MixtureSpec, conditional: bool) -> Result<f64> {
    let q: f64 = cfg.parse("eval.floor_quantile")?;
    let n: usize = cfg.parse("eval.floor_samples")?;
    Ok(if q == DEFAULT_FLOOR_QUANTILE && n == FLOOR_SAMPLES {
        default_density_floor(spec, conditional)
    } else {
        density_floor(spec, conditional, q, n, 0)
    })
}

pub fn evaluate_batch(cfg: &Config, spec: &MixtureSpec, batch: &SampleBatch) -> Result<EvalReport> {
    let floor = floor_for(cfg, spec, is_conditional(batch))?;
    Ok(evaluate(spec, batch, floor, cfg.parse("eval.radius_sigmas")?))
}

/// `eval`: checks that the samples were drawn against this spec, then writes the report
/// as a CSV row and as text (`<out stem>.txt`).
pub fn cmd_eval(cfg: &Config, spec_path: Option<&Path>, samples: &Path, out: &Path) -> Result<(PathBuf, EvalReport)> {
    let start = Instant::now();
    let spec = load_spec(cfg, spec_path)?;
    let sidecar = manifest::sidecar(samples);
    if !sidecar.exists() {
        return Err(RunnerError::MissingInput(format!("{} (sample manifest)", sidecar.display())));
    }
    let sm = RunManifest::from_text(&read_file(&sidecar)?)?;
    let recorded = sm
        .get_extra("spec_digest")
        .ok_or_else(|| RunnerError::Manifest(format!("{}: no spec_digest", sidecar.display())))?;
    if recorded != spec.digest() {
        return Err(RunnerError::DigestMismatch {
            what: format!("spec of {}", samples.display()),
            expected: spec.digest(),
            found: recorded.to_string(),
        });
    }
    let batch = parse_samples_csv(&read_file(samples)?, samples)?;
    let report = evaluate_batch(cfg, &spec, &batch)?;
    let base = base_dir(out);
    let mut m = RunManifest::new("eval", cfg)?;
    m.extra("spec_digest", spec.digest());
    if let Some(p) = spec_path {
        m.add_input(&base, p)?;
    }
    m.add_input(&base, samples)?;
    write_file(out, &format!("{}\n{}\n", EvalReport::CSV_HEADER, report.csv_row()))?;
    m.add_output(&base, out)?;
    let txt = with_suffix(out, ".txt");
    write_file(&txt, &report.pretty())?;
    m.add_output(&base, &txt)?;
    let mpath = manifest::sidecar(out);
    m.write(&mpath, start.elapsed().as_secs_f64())?;
    Ok((mpath, report))
}

/// Unguided curve followed by one curve per (kind, w) in `error.kinds` × `error.ws`.
pub fn error_curves(cfg: &Config, spec: &MixtureSpec, models: &Models) -> Result<Vec<ErrorCurve>> {
    let strong = models
        .strong
        .as_ref()
        .ok_or_else(|| RunnerError::MissingInput("error curves need a strong checkpoint".into()))?;
    let grid = midpoint_grid(cfg.parse("error.t_points")?);
    let n: usize = cfg.parse("error.n_states")?;
    let seed = cfg.seed()?;
    let mut specs = vec![GuidanceSpec::unguided()];
    for kind in cfg.list::<GuidanceKind>("error.kinds")? {
        for w in cfg.list::<f64>("error.ws")? {
            specs.push(cfg.guidance_spec_for(kind, w)?);
        }
    }
    specs
        .iter()
        .map(|g| {
            with_guided(strong, Some(strong), models.weak.as_ref(), g, |field| {
                Ok(guidance_error_curve(field, None, &GuidanceSpec::unguided(), OracleSource::Mixture(spec), &grid, n, seed)
                    .map(|mut c| {
                        c.guidance_label = g.label();
                        c.w = g.primary_scale();
                        c
                    })?)
            })
        })
        .collect()
}

pub fn error_curve_csv(curves: &[ErrorCurve]) -> String {
    let mut s = String::from("guidance_label,w,t,delta_e,stderr\n");
    for c in curves {
        for ((t, v), se) in c.t_grid.iter().zip(&c.values).zip(&c.stderr) {
            let _ = writeln!(s, "{},{},{t},{v},{se}", c.guidance_label, c.w);
        }
    }
    s
}

pub fn error_curve_svg(curves: &[ErrorCurve]) -> String {
    let series: Vec<svg::Series> = curves
        .iter()
        .map(|c| svg::Series {
            label: if c.guidance_label == "none" { "none".into() } else { format!("{} w={}", c.guidance_label, c.w) },
            xs: c.t_grid.clone(),
            ys: c.values.clone(),
        })
        .collect();
    svg::line_plot("guided velocity error vs oracle", "t", "mean squared error", &series)
}

/// `error-curve`: CSV `(guidance_label, w, t, delta_e, stderr)` and an SVG line plot.
pub fn cmd_error_curve(
    cfg: &Config,
    spec_path: Option<&Path>,
    strong: &Path,
    weak: Option<&Path>,
    out: &Path,
) -> Result<PathBuf> {
    let start = Instant::now();
    let spec = load_spec(cfg, spec_path)?;
    let models = Models::load(Some(strong), weak)?;
    let curves = error_curves(cfg, &spec, &models)?;
    let base = base_dir(out);
    let mut m = RunManifest::new("error-curve", cfg)?;
    m.extra("spec_digest", spec.digest());
    if let Some(p) = spec_path {
        m.add_input(&base, p)?;
    }
    models.record(&mut m, &base, Some(strong), weak)?;
    write_file(out, &error_curve_csv(&curves))?;
    m.add_output(&base, out)?;
    let svg_path = with_suffix(out, ".svg");
    write_file(&svg_path, &error_curve_svg(&curves))?;
    m.add_output(&base, &svg_path)?;
    let mpath = manifest::sidecar(out);
    m.write(&mpath, start.elapsed().as_secs_f64())?;
    Ok(mpath)
}

/// `sweep`: evaluates `guidance.kind` at every scale in `sweep.ws` (SGG uses the scale
/// for both segments) and writes one combined CSV.
pub fn cmd_sweep(
    cfg: &Config,
    spec_path: Option<&Path>,
    strong: Option<&Path>,
    weak: Option<&Path>,
    unconditional: bool,
    out: &Path,
) -> Result<PathBuf> {
    let start = Instant::now();
    let spec = load_spec(cfg, spec_path)?;
    let models = Models::load(strong, weak)?;
    let kind: GuidanceKind = cfg.parse("guidance.kind")?;
    let prompts = prompts(cfg, &spec, unconditional)?;
    let mut csv = format!("w,{}\n", EvalReport::CSV_HEADER);
    for w in cfg.list::<f64>("sweep.ws")? {
        let mut g = cfg.guidance_spec_for(kind, w)?;
        g.w_cdg = w;
        g.w_cag = w;
        let batch = guided_sample(&spec, &models, &g, cfg, &prompts)?;
        let _ = writeln!(csv, "{w},{}", evaluate_batch(cfg, &spec, &batch)?.csv_row());
    }
    let base = base_dir(out);
    let mut m = RunManifest::new("sweep", cfg)?;
    m.extra("spec_digest", spec.digest());
    if let Some(p) = spec_path {
        m.add_input(&base, p)?;
    }
    models.record(&mut m, &base, strong, weak)?;
    write_file(out, &csv)?;
    m.add_output(&base, out)?;
    let mpath = manifest::sidecar(out);
    m.write(&mpath, start.elapsed().as_secs_f64())?;
    Ok(mpath)
}

/// Per-regime budgets and scales of the toy reproduction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReproBudget {
    pub t_main: usize,
    pub t_weak: usize,
    pub tau: f64,
    pub w_cfg: f64,
    pub w_ag: f64,
}

pub fn repro_budget(preset: Preset) -> ReproBudget {
    match preset {
        Preset::A => ReproBudget { t_main: 1 << 15, t_weak: 1 << 11, tau: 0.5, w_cfg: 2.0, w_ag: 2.0 },
        Preset::B => ReproBudget { t_main: 1 << 12, t_weak: 1 << 10, tau: 0.1, w_cfg: 2.0, w_ag: 2.0 },
        Preset::C => ReproBudget { t_main: 1 << 15, t_weak: 1 << 11, tau: 0.3, w_cfg: 2.0, w_ag: 2.0 },
    }
}

/// Config layer for `repro`: an autoguidance run at `w = 0` trains the strong model
/// exactly like the baseline while the weak net receives one update every
/// `t_main / t_weak` strong steps.
pub fn repro_layer(preset: Preset) -> Vec<(&'static str, String)> {
    let b = repro_budget(preset);
    vec![
        ("data.preset", preset.to_string()),
        ("train.variant", "ag".into()),
        ("train.w", "0".into()),
        ("train.iters", b.t_main.to_string()),
        ("train.weak_update_ratio", (b.t_main / b.t_weak).to_string()),
        ("guidance.tau", b.tau.to_string()),
        ("guidance.w", b.w_cfg.to_string()),
        ("guidance.w_cdg", b.w_cfg.to_string()),
        ("guidance.w_cag", b.w_ag.to_string()),
    ]
}

/// The guidance kinds of the four panels.
pub const REPRO_KINDS: [GuidanceKind; 4] =
    [GuidanceKind::None, GuidanceKind::CdgCfg, GuidanceKind::CagAg, GuidanceKind::Sgg];

fn panel_title(kind: GuidanceKind) -> &'static str {
    match kind {
        GuidanceKind::None => "unguided",
        GuidanceKind::CdgCfg => "CDG (CFG)",
        GuidanceKind::CagAg => "CAG (AG)",
        GuidanceKind::CagSkip => "CAG (skip)",
        GuidanceKind::Sgg => "SGG",
    }
}

/// `repro`: dataset, training, four guided sample sets, metrics, error curves and
/// figures in `out_dir`, all listed in `repro.manifest`.
pub fn cmd_repro(cfg: &Config, out_dir: &Path) -> Result<PathBuf> {
    let start = Instant::now();
    let preset = cfg.preset()?;
    let budget = repro_budget(preset);
    fs::create_dir_all(out_dir).map_err(|e| RunnerError::io(out_dir, e))?;
    let mut m = RunManifest::new("repro", cfg)?;
    m.extra("preset", preset);
    m.extra("t_main", budget.t_main);
    m.extra("t_weak", budget.t_weak);
    m.extra("tau", budget.tau);
    m.extra("w_cfg", budget.w_cfg);
    m.extra("w_ag", budget.w_ag);

    let spec_path = out_dir.join("spec.txt");
    let data_path = out_dir.join("dataset.csv");
    cmd_dataset(cfg, &data_path, Some(&spec_path))?;
    let spec = load_spec(cfg, Some(&spec_path))?;
    m.extra("spec_digest", spec.digest());

    let train_manifest = cmd_train(cfg, Some(&spec_path), out_dir)?;
    let tm = RunManifest::from_text(&read_file(&train_manifest)?)?;
    m.extra("weak_iters", tm.get_extra("weak_iters").unwrap_or("0"));
    let models = Models::load(Some(&out_dir.join("strong.bin")), Some(&out_dir.join("weak.bin")))?;

    let prompts = prompts(cfg, &spec, false)?;
    let mut batches = Vec::new();
    let mut metrics = format!("{}\n", EvalReport::CSV_HEADER);
    for kind in REPRO_KINDS {
        let w = if kind == GuidanceKind::CagAg { budget.w_ag } else { budget.w_cfg };
        let g = cfg.guidance_spec_for(kind, w)?;
        let batch = guided_sample(&spec, &models, &g, cfg, &prompts)?;
        write_file(&out_dir.join(format!("samples_{}.csv", g.label())), &samples_csv(&batch))?;
        let _ = writeln!(metrics, "{}", evaluate_batch(cfg, &spec, &batch)?.csv_row());
        batches.push((panel_title(kind).to_string(), batch));
    }
    write_file(&out_dir.join("metrics.csv"), &metrics)?;
    let refs: Vec<(String, &SampleBatch)> = batches.iter().map(|(t, b)| (t.clone(), b)).collect();
    write_file(&out_dir.join("panels.svg"), &scatter_svg(&spec, &refs))?;
    let data_batch = {
        let d = sample_dataset(&spec, cfg.parse("data.n")?, cfg.seed()?)?;
        SampleBatch {
            finals: d.points.iter().map(|p| p.x).collect(),
            class_labels: d.points.iter().map(|p| Some(p.class)).collect(),
            trajectories: None,
            guidance_label: "data".into(),
        }
    };
    write_file(&out_dir.join("dataset.svg"), &scatter_svg(&spec, &[("ground truth".into(), &data_batch)]))?;

    let curves = error_curves(cfg, &spec, &models)?;
    write_file(&out_dir.join("error_curve.csv"), &error_curve_csv(&curves))?;
    write_file(&out_dir.join("error_curve.svg"), &error_curve_svg(&curves))?;

    let mut names = vec!["spec.txt", "dataset.csv", "dataset.svg", "strong.bin", "weak.bin", "train_log.csv"];
    let sample_names: Vec<String> = REPRO_KINDS.iter().map(|k| format!("samples_{}.csv", k.as_str())).collect();
    names.extend(sample_names.iter().map(String::as_str));
    names.extend(["metrics.csv", "panels.svg", "error_curve.csv", "error_curve.svg"]);
    for name in names {
        m.add_output(out_dir, &out_dir.join(name))?;
    }
    let mpath = out_dir.join("repro.manifest");
    m.write(&mpath, start.elapsed().as_secs_f64())?;
    Ok(mpath)
}
