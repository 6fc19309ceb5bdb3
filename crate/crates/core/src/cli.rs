//! The `irlab` command line.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::color::{Rgb, GAMMA};
use crate::error::Error;
use crate::geometry::{normals_from_depth, select_pairs, PairReport, PairThresholds, PosedImage, ResolvedThresholds, Warp};
use crate::grid::PixelGrid;
use crate::io::{self, write_json};
use crate::losses::TermValues;
use crate::metrics::{albedo_scores, angular_error_stats, AlbedoScores, AngularStats};
use crate::prior::{build_prior, parse_coefficients, IlluminationPrior};
use crate::sh::{render_image, ShLighting};
use crate::solver::{solve_pair, solve_single, SolveConfig, ViewInput, ViewSolution};
use crate::{gradcheck, synth};

pub const THREADS_ENV: &str = "IRLAB_THREADS";
pub const ALBEDO_PNG: &str = "albedo.png";
pub const ALBEDO_PFM: &str = synth::TRUTH_ALBEDO;
pub const NORMALS_PFM: &str = synth::TRUTH_NORMALS;
pub const LIGHTING_JSON: &str = synth::TRUTH_LIGHTING;
pub const TRACE_CSV: &str = "trace.csv";
pub const META_JSON: &str = "meta.json";

#[derive(Debug, Parser)]
#[command(name = "irlab", version, about = "Inverse rendering of photographs into albedo, normals and lighting")]
pub struct Cli {
    /// Worker threads; 1 makes every result bit-reproducible.
    #[arg(long, global = true, env = THREADS_ENV)]
    pub threads: Option<usize>,
    /// Seed for all randomness; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Print the default solver configuration and exit.
    #[arg(long)]
    pub dump_config: bool,
    #[command(subcommand)]
    pub command: Option<Command>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Shade a directory holding albedo.pfm and normals.pfm.
    Render(RenderArgs),
    /// Decompose one view, or a pair of posed views.
    Solve(SolveArgs),
    /// Fit the illumination prior to lighting coefficients, one 27-value row per environment.
    BuildPrior(BuildPriorArgs),
    /// Normals of a view's depth map.
    NormalsFromDepth(NormalsArgs),
    /// Warp data of view B into the frame of view A.
    CrossProject(CrossProjectArgs),
    /// Choose view pairs for joint solving.
    SelectPairs(SelectPairsArgs),
    /// Score estimates against ground truth.
    Evaluate(EvaluateArgs),
    /// Render a solve output under new lighting.
    Relight(RelightArgs),
    /// Finite-difference check of every loss gradient.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    pub scene: PathBuf,
    #[arg(long)]
    pub lighting: PathBuf,
    #[arg(long, default_value_t = GAMMA)]
    pub gamma: f64,
    #[arg(short, long, default_value = "render.png")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SolveArgs {
    pub scene: PathBuf,
    #[arg(long)]
    pub pair: Option<PathBuf>,
    #[arg(long)]
    pub prior: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory. A pair writes one subdirectory per view.
    #[arg(short, long, default_value = "solve-out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BuildPriorArgs {
    pub coefficients: PathBuf,
    #[arg(long, default_value_t = 18)]
    pub dim: usize,
    #[arg(long)]
    pub no_augment: bool,
    #[arg(short, long, default_value = "prior.json")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct NormalsArgs {
    pub scene: PathBuf,
    #[arg(short, long, default_value = "normals.pfm")]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Projected {
    Albedo,
    Image,
}

#[derive(Debug, Args)]
pub struct CrossProjectArgs {
    pub scene_a: PathBuf,
    pub scene_b: PathBuf,
    #[arg(long, value_enum)]
    pub what: Projected,
    /// File to warp; defaults to B's image.png or albedo.pfm.
    #[arg(long)]
    pub source: Option<PathBuf>,
    #[arg(short, long, default_value = "cross-project")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SelectPairsArgs {
    pub dataset: PathBuf,
    /// Defaults to half the median scene depth.
    #[arg(long)]
    pub camera_distance: Option<f64>,
    /// Defaults to half the median scene depth.
    #[arg(long)]
    pub centroid_distance: Option<f64>,
    #[arg(long, default_value_t = PairThresholds::default().min_overlap)]
    pub min_overlap: f64,
    #[arg(long, default_value_t = PairThresholds::default().max_histogram_correlation)]
    pub max_correlation: f64,
    #[arg(short, long, default_value = "pairs.json")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    pub pred: PathBuf,
    pub truth: PathBuf,
    #[arg(short, long, default_value = "report.json")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RelightArgs {
    pub solve_output: PathBuf,
    #[arg(long)]
    pub lighting: PathBuf,
    #[arg(short, long, default_value = "relit.png")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Number of consecutive seeds, starting at --seed (default 1).
    #[arg(long, default_value_t = gradcheck::SEEDS)]
    pub seeds: u64,
    /// Also write every check as JSON.
    #[arg(short, long)]
    pub out: Option<PathBuf>,
}

/// Process exit status and the line printed for a failure.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub kind: String,
    pub message: String,
}

impl Failure {
    pub fn json_line(&self) -> String {
        serde_json::json!({ "error": self.kind, "message": self.message }).to_string()
    }
}

fn failure(e: anyhow::Error) -> Failure {
    let kind = e
        .chain()
        .find_map(|c| c.downcast_ref::<Error>())
        .map_or("failed", Error::kind)
        .to_string();
    Failure {
        code: 1,
        kind,
        message: format!("{e:#}"),
    }
}

/// Parses `args` and runs the command, printing results to stdout.
pub fn main_with<I, T>(args: I) -> Result<(), Failure>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return Ok(());
        }
        Err(e) => {
            return Err(Failure {
                code: 2,
                kind: "usage".into(),
                message: e.to_string().lines().next().unwrap_or_default().trim_start_matches("error: ").to_string(),
            })
        }
    };
    run(cli).map_err(failure)
}

pub fn run(cli: Cli) -> anyhow::Result<()> {
    if cli.dump_config {
        print!("{}", SolveConfig::default().to_toml());
        return Ok(());
    }
    let Some(command) = cli.command else {
        bail!("no subcommand given; see --help");
    };
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!(Error::Domain("--threads must be at least 1".into()));
        }
        // A pool that already exists (a second call in one process) is kept.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let threads = rayon::current_num_threads();
    match command {
        Command::Render(a) => render(a),
        Command::Solve(a) => solve(a, cli.seed, threads),
        Command::BuildPrior(a) => build(a),
        Command::NormalsFromDepth(a) => normals(a),
        Command::CrossProject(a) => cross(a),
        Command::SelectPairs(a) => pairs(a),
        Command::Evaluate(a) => evaluate(a),
        Command::Relight(a) => relight(a),
        Command::Gradcheck(a) => check(a, cli.seed.unwrap_or(1)),
    }
}

fn read_lighting(path: &Path) -> anyhow::Result<ShLighting> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let l: ShLighting = serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    if !l.is_finite() {
        bail!(Error::Domain(format!("{}: non-finite coefficients", path.display())));
    }
    Ok(l)
}

fn ensure_parent(path: &Path) -> anyhow::Result<()> {
    if let Some(p) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))?;
    }
    Ok(())
}

fn shade(dir: &Path, lighting: &Path, gamma: f64, out: &Path) -> anyhow::Result<()> {
    if !(gamma > 0.0 && gamma.is_finite()) {
        bail!(Error::Domain(format!("gamma must be positive, got {gamma}")));
    }
    let l = read_lighting(lighting)?;
    let albedo = io::read_rgb_pfm(&dir.join(ALBEDO_PFM)).with_context(|| format!("reading {}", dir.display()))?;
    let normals = io::read_normals(&dir.join(NORMALS_PFM)).with_context(|| format!("reading {}", dir.display()))?;
    let r = render_image(&normals, &albedo, &l, Some(gamma))?;
    ensure_parent(out)?;
    io::write_png(out, &r.image)?;
    println!("{}", serde_json::json!({ "written": out, "clamped_pixels": r.clamped_pixels }));
    Ok(())
}

fn render(a: RenderArgs) -> anyhow::Result<()> {
    shade(&a.scene, &a.lighting, a.gamma, &a.out)
}

fn relight(a: RelightArgs) -> anyhow::Result<()> {
    shade(&a.solve_output, &a.lighting, GAMMA, &a.out)
}

#[derive(Serialize)]
struct ViewMeta {
    id: String,
    input: PathBuf,
    final_terms: TermValues,
    final_total: Option<f64>,
    iterations: usize,
    lighting_params: Vec<f64>,
}

#[derive(Serialize)]
struct SolveMeta {
    version: &'static str,
    prior: PathBuf,
    prior_dim: usize,
    threads: usize,
    coupled: bool,
    warnings: Vec<String>,
    views: Vec<ViewMeta>,
    config: SolveConfig,
}

fn write_solution(dir: &Path, s: &ViewSolution) -> anyhow::Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let albedo = s.estimate.albedo();
    let display = albedo.map(|c| c.map(|v| v.max(0.0).powf(1.0 / GAMMA)));
    io::write_png(&dir.join(ALBEDO_PNG), &display)?;
    io::write_rgb_pfm(&dir.join(ALBEDO_PFM), &albedo)?;
    io::write_normals(&dir.join(NORMALS_PFM), &s.estimate.normals())?;
    write_json(&dir.join(LIGHTING_JSON), &s.lighting)?;
    io::write_atomic(&dir.join(TRACE_CSV), s.trace.to_csv().as_bytes())?;
    Ok(())
}

fn view_meta(id: String, input: &Path, s: &ViewSolution) -> ViewMeta {
    ViewMeta {
        id,
        input: input.to_path_buf(),
        final_terms: s.final_terms,
        final_total: s.trace.last().map(|r| r.total),
        iterations: s.trace.rows.len(),
        lighting_params: s.estimate.lighting.alpha.clone(),
    }
}

fn input(v: &io::View) -> ViewInput<'_> {
    ViewInput {
        image: &v.image,
        sky: None,
        guide: Some(&v.depth),
    }
}

fn solve(a: SolveArgs, seed: Option<u64>, threads: usize) -> anyhow::Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            SolveConfig::from_toml(&text)?
        }
        None => SolveConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let prior = IlluminationPrior::load(&a.prior).with_context(|| format!("reading {}", a.prior.display()))?;
    let first = io::read_view(&a.scene).with_context(|| format!("reading {}", a.scene.display()))?;
    let meta = match &a.pair {
        None => {
            let s = solve_single(&input(&first), &prior, &cfg)?;
            write_solution(&a.out, &s)?;
            SolveMeta {
                version: env!("CARGO_PKG_VERSION"),
                prior: a.prior.clone(),
                prior_dim: prior.dim(),
                threads,
                coupled: false,
                warnings: Vec::new(),
                views: vec![view_meta(first.id.clone(), &a.scene, &s)],
                config: cfg,
            }
        }
        Some(other) => {
            let second = io::read_view(other).with_context(|| format!("reading {}", other.display()))?;
            if first.id == second.id {
                bail!(Error::Domain(format!("both views are named {:?}", first.id)));
            }
            let s = solve_pair(&input(&first), &input(&second), &prior, &cfg)?;
            let [sa, sb] = &s.views;
            write_solution(&a.out.join(&first.id), sa)?;
            write_solution(&a.out.join(&second.id), sb)?;
            for w in &s.warnings {
                eprintln!("warning: {w}");
            }
            SolveMeta {
                version: env!("CARGO_PKG_VERSION"),
                prior: a.prior.clone(),
                prior_dim: prior.dim(),
                threads,
                coupled: s.coupled,
                warnings: s.warnings.clone(),
                views: vec![
                    view_meta(first.id.clone(), &a.scene, sa),
                    view_meta(second.id.clone(), other, sb),
                ],
                config: cfg,
            }
        }
    };
    write_json(&a.out.join(META_JSON), &meta)?;
    println!("{}", serde_json::json!({ "written": a.out, "coupled": meta.coupled }));
    Ok(())
}

fn build(a: BuildPriorArgs) -> anyhow::Result<()> {
    let text = fs::read_to_string(&a.coefficients).with_context(|| format!("reading {}", a.coefficients.display()))?;
    let set = parse_coefficients(&text)?;
    let prior = build_prior(&set, a.dim, !a.no_augment)?;
    ensure_parent(&a.out)?;
    prior.save(&a.out)?;
    println!(
        "{}",
        serde_json::json!({ "written": a.out, "environments": set.len(), "samples": prior.samples(), "dim": prior.dim() })
    );
    Ok(())
}

fn normals(a: NormalsArgs) -> anyhow::Result<()> {
    let v = io::read_view(&a.scene).with_context(|| format!("reading {}", a.scene.display()))?;
    let n = normals_from_depth(&v.depth);
    ensure_parent(&a.out)?;
    io::write_normals(&a.out, &n)?;
    println!("{}", serde_json::json!({ "written": a.out, "pixels": n.valid_count() }));
    Ok(())
}

fn mask_image(mask: &[bool], width: usize, height: usize) -> PixelGrid<Rgb> {
    PixelGrid::from_fn(width, height, |x, y| {
        Some(Rgb::splat(if mask[y * width + x] { 1.0 } else { 0.0 }))
    })
}

fn cross(a: CrossProjectArgs) -> anyhow::Result<()> {
    let va = io::read_view(&a.scene_a).with_context(|| format!("reading {}", a.scene_a.display()))?;
    let vb = io::read_view(&a.scene_b).with_context(|| format!("reading {}", a.scene_b.display()))?;
    let warp = Warp::new(&va.depth, vb.depth.camera(), vb.image.dims());
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let (w, h) = va.image.dims();
    let (written, warped) = match a.what {
        Projected::Image => {
            let src = match &a.source {
                Some(p) => io::read_png(p)?,
                None => vb.image.clone(),
            };
            let out = warp.apply(&src)?;
            let path = a.out.join("warped.png");
            io::write_png(&path, &out)?;
            (path, out)
        }
        Projected::Albedo => {
            let p = a.source.clone().unwrap_or_else(|| a.scene_b.join(ALBEDO_PFM));
            let src = io::read_rgb_pfm(&p).with_context(|| format!("reading {}", p.display()))?;
            let out = warp.apply(&src)?;
            let path = a.out.join("warped.pfm");
            io::write_rgb_pfm(&path, &out)?;
            (path, out)
        }
    };
    io::write_png(&a.out.join("mask.png"), &mask_image(warped.mask(), w, h))?;
    println!("{}", serde_json::json!({ "written": written, "pixels": warped.valid_count() }));
    Ok(())
}

#[derive(Serialize)]
struct PairsFile {
    pairs: Vec<[String; 2]>,
    thresholds: ResolvedThresholds,
    reports: Vec<NamedReport>,
    skipped: Vec<Skipped>,
}

#[derive(Serialize)]
struct NamedReport {
    a: String,
    b: String,
    #[serde(flatten)]
    report: PairReport,
}

#[derive(Serialize)]
struct Skipped {
    path: PathBuf,
    reason: String,
}

fn pairs(a: SelectPairsArgs) -> anyhow::Result<()> {
    let data = io::read_dataset(&a.dataset)?;
    let ids: Vec<String> = data.views.iter().map(|v| v.id.clone()).collect();
    let posed: Vec<PosedImage> = data
        .views
        .into_iter()
        .map(|v| PosedImage {
            image: v.image,
            depth: v.depth,
        })
        .collect();
    let thresholds = PairThresholds {
        camera_distance: a.camera_distance,
        centroid_distance: a.centroid_distance,
        min_overlap: a.min_overlap,
        max_histogram_correlation: a.max_correlation,
    };
    let sel = select_pairs(&posed, &thresholds)?;
    let file = PairsFile {
        pairs: sel.pairs.iter().map(|&(i, j)| [ids[i].clone(), ids[j].clone()]).collect(),
        thresholds: sel.thresholds,
        reports: sel
            .reports
            .into_iter()
            .map(|r| NamedReport {
                a: ids[r.i].clone(),
                b: ids[r.j].clone(),
                report: r,
            })
            .collect(),
        skipped: data
            .skipped
            .into_iter()
            .map(|(path, e)| Skipped {
                path,
                reason: e.to_string(),
            })
            .collect(),
    };
    ensure_parent(&a.out)?;
    write_json(&a.out, &file)?;
    println!("{}", serde_json::json!({ "written": a.out, "views": ids.len(), "pairs": file.pairs.len() }));
    Ok(())
}

#[derive(Debug, Serialize)]
struct ItemReport {
    id: String,
    albedo: AlbedoScores,
    normals: AngularStats,
}

#[derive(Debug, Serialize)]
struct Aggregate {
    items: usize,
    albedo_mse: f64,
    albedo_lmse: f64,
    albedo_dssim: f64,
    normal_mean_deg: f64,
    normal_median_deg: f64,
}

#[derive(Debug, Serialize)]
struct Report {
    items: Vec<ItemReport>,
    mean: Aggregate,
}

/// View id recorded by a single-view solve.
fn solved_view_id(dir: &Path) -> Option<String> {
    let meta: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join(META_JSON)).ok()?).ok()?;
    match meta["views"].as_array()?.as_slice() {
        [v] => v["id"].as_str().map(str::to_string),
        _ => None,
    }
}

/// Pairs of (estimate, truth) directories: either both hold the files
/// directly or `pred/<id>` matches `truth/<id>`.
fn evaluation_items(pred: &Path, truth: &Path) -> anyhow::Result<Vec<(String, PathBuf, PathBuf)>> {
    let name = |p: &Path| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    if pred.join(ALBEDO_PFM).exists() {
        let id = solved_view_id(pred).unwrap_or_else(|| name(pred));
        let t = if truth.join(ALBEDO_PFM).exists() {
            truth.to_path_buf()
        } else {
            truth.join(&id)
        };
        return Ok(vec![(id, pred.to_path_buf(), t)]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(pred)
        .with_context(|| format!("reading {}", pred.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(ALBEDO_PFM).exists())
        .collect();
    dirs.sort();
    Ok(dirs
        .into_iter()
        .map(|p| {
            let id = name(&p);
            let t = truth.join(&id);
            (id, p, t)
        })
        .collect())
}

fn evaluate(a: EvaluateArgs) -> anyhow::Result<()> {
    let items = evaluation_items(&a.pred, &a.truth)?;
    if items.is_empty() {
        bail!(Error::InsufficientData(format!("no estimates found in {}", a.pred.display())));
    }
    let mut reports = Vec::new();
    for (id, p, t) in items {
        let ctx = || format!("evaluating {id}");
        let albedo = albedo_scores(&io::read_rgb_pfm(&p.join(ALBEDO_PFM))?, &io::read_rgb_pfm(&t.join(ALBEDO_PFM))?)
            .with_context(ctx)?;
        let normals = angular_error_stats(&io::read_normals(&p.join(NORMALS_PFM))?, &io::read_normals(&t.join(NORMALS_PFM))?)
            .with_context(ctx)?;
        reports.push(ItemReport { id, albedo, normals });
    }
    let n = reports.len() as f64;
    let mean = |f: &dyn Fn(&ItemReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
    let report = Report {
        mean: Aggregate {
            items: reports.len(),
            albedo_mse: mean(&|r| r.albedo.mse),
            albedo_lmse: mean(&|r| r.albedo.lmse),
            albedo_dssim: mean(&|r| r.albedo.dssim),
            normal_mean_deg: mean(&|r| r.normals.mean_deg),
            normal_median_deg: mean(&|r| r.normals.median_deg),
        },
        items: reports,
    };
    ensure_parent(&a.out)?;
    write_json(&a.out, &report)?;
    println!("{}", serde_json::to_string(&report.mean)?);
    Ok(())
}

fn check(a: GradcheckArgs, first: u64) -> anyhow::Result<()> {
    if a.seeds == 0 {
        bail!(Error::Domain("--seeds must be at least 1".into()));
    }
    let checks = gradcheck::run(first, a.seeds)?;
    let summary = gradcheck::summarize(&checks);
    println!("{:<36} {:>12} {:>6}  result", "gradient", "worst error", "seed");
    for c in &summary {
        println!(
            "{:<36} {:>12.3e} {:>6}  {}",
            c.name,
            c.error,
            c.seed,
            if c.passed { "PASS" } else { "FAIL" }
        );
    }
    if let Some(out) = &a.out {
        ensure_parent(out)?;
        write_json(out, &checks)?;
    }
    let failed = summary.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        bail!(Error::Domain(format!(
            "{failed} of {} gradients exceed tolerance {:e}",
            summary.len(),
            gradcheck::TOLERANCE
        )));
    }
    Ok(())
}
