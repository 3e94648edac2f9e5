//! Pipeline driver: standardize intraoral scan meshes into aligned
//! multi-view renders, run schema-constrained inference against the dental
//! knowledge base, and score the resulting reports.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use archmap::arch_fit::{estimate_arch, radial_preclip};
use archmap::config::PipelineConfig;
use archmap::dkb::{DentalOntology, StructuredReport};
use archmap::eval::{
    ablation_csv, aggregate, metrics_from_record, run_ablation_grid, summary_csv, CaseMetrics,
    Grouping,
};
use archmap::flatten::{build_sampling, fitted_frame_x_bounds, flatten_mesh};
use archmap::mesh_io::parse_stl;
use archmap::render::RenderMode;
use archmap::vlm::{make_backend, read_report_file, run_batch, CaseSpec, InferenceMode};

#[derive(Parser)]
#[command(
    name = "archmap",
    about = "Arch flattening, multi-view rendering, and structured dental reporting for STL scans",
    version
)]
struct Cli {
    /// TOML configuration file; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the configured mock seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct VariantArgs {
    /// Render mode: ssp (shaded surface) or uvp (vertex scatter).
    #[arg(long, value_name = "MODE")]
    mode: Option<String>,
    /// Skip arch flattening and render the rotated-centered mesh.
    #[arg(long)]
    no_flatten: bool,
    /// Drop the knowledge tables and rules from the prompt and skip
    /// semantic validation.
    #[arg(long)]
    no_dkb: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the arch and write the flattened mesh as binary STL.
    Flatten {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Render the three canonical views of one mesh to PNG files.
    Render {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        outdir: PathBuf,
        /// Arch side when the filename carries no _upper/_lower suffix.
        #[arg(long)]
        arch: Option<String>,
        #[command(flatten)]
        variant: VariantArgs,
    },
    /// Run inference over a case directory and write report files.
    Infer {
        #[arg(long)]
        cases: PathBuf,
        #[arg(long)]
        outdir: PathBuf,
        #[arg(long)]
        arch: Option<String>,
        /// Optional manifest: one case stem per line.
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Inference mode: thinking or non-thinking.
        #[arg(long, value_name = "MODE")]
        infer_mode: Option<String>,
        #[command(flatten)]
        variant: VariantArgs,
    },
    /// Score report files against ground-truth annotations.
    Eval {
        #[arg(long)]
        reports: PathBuf,
        #[arg(long)]
        ground_truth: PathBuf,
        #[arg(long)]
        outdir: PathBuf,
    },
    /// Run the eight-variant ablation grid and write ablation_summary.csv.
    Ablate {
        #[arg(long)]
        cases: PathBuf,
        #[arg(long)]
        outdir: PathBuf,
        #[arg(long)]
        arch: Option<String>,
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// End-to-end run: infer every case, then evaluate when ground truth
    /// is available.
    Pipeline {
        #[arg(long)]
        cases: PathBuf,
        #[arg(long)]
        outdir: PathBuf,
        #[arg(long)]
        arch: Option<String>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Directory of *.gt.json files; defaults to the case directory.
        #[arg(long)]
        ground_truth: Option<PathBuf>,
        #[command(flatten)]
        variant: VariantArgs,
    },
    /// Generate synthetic arch fixtures with ground-truth annotations.
    Synth {
        #[arg(long)]
        outdir: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
    },
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn load_config(cli_config: &Option<PathBuf>, seed: Option<u64>) -> Result<PipelineConfig> {
    let mut cfg = match cli_config {
        Some(path) => PipelineConfig::load(path).context("loading config")?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn apply_variant(cfg: &mut PipelineConfig, variant: &VariantArgs) -> Result<()> {
    if let Some(mode) = &variant.mode {
        cfg.render_mode = parse_render_mode(mode)?;
    }
    if variant.no_flatten {
        cfg.flatten_enabled = false;
    }
    if variant.no_dkb {
        cfg.dkb_enabled = false;
    }
    Ok(())
}

fn parse_render_mode(text: &str) -> Result<RenderMode> {
    match text.to_ascii_lowercase().as_str() {
        "ssp" => Ok(RenderMode::Ssp),
        "uvp" => Ok(RenderMode::Uvp),
        other => bail!("unknown render mode `{other}` (expected ssp or uvp)"),
    }
}

fn parse_infer_mode(text: &str) -> Result<InferenceMode> {
    match text.to_ascii_lowercase().as_str() {
        "thinking" => Ok(InferenceMode::Thinking),
        "non-thinking" => Ok(InferenceMode::NonThinking),
        other => bail!("unknown inference mode `{other}` (expected thinking or non-thinking)"),
    }
}

/// Arch side from the filename suffix convention, with an override.
fn arch_for_stem(stem: &str, override_arch: &Option<String>) -> Option<String> {
    if let Some(arch) = override_arch {
        return Some(arch.clone());
    }
    if stem.ends_with("_upper") {
        Some("upper".into())
    } else if stem.ends_with("_lower") {
        Some("lower".into())
    } else {
        None
    }
}

/// Case stem without the arch suffix.
fn case_id_for_stem(stem: &str) -> String {
    stem.strip_suffix("_upper")
        .or_else(|| stem.strip_suffix("_lower"))
        .unwrap_or(stem)
        .to_string()
}

fn discover_cases(
    dir: &Path,
    manifest: &Option<PathBuf>,
    override_arch: &Option<String>,
) -> Result<Vec<CaseSpec>> {
    let stems: Vec<String> = match manifest {
        Some(path) => std::fs::read_to_string(path)
            .with_context(|| format!("reading manifest {}", path.display()))?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .map(String::from)
            .collect(),
        None => {
            let mut stems = Vec::new();
            for entry in std::fs::read_dir(dir)
                .with_context(|| format!("reading case directory {}", dir.display()))?
            {
                let path = entry?.path();
                if path.extension().and_then(|e| e.to_str()) == Some("stl") {
                    if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                        stems.push(stem.to_string());
                    }
                }
            }
            stems.sort();
            stems
        }
    };
    let mut specs = Vec::new();
    for stem in stems {
        let Some(arch) = arch_for_stem(&stem, override_arch) else {
            eprintln!("skipping `{stem}`: no _upper/_lower suffix and no --arch override");
            continue;
        };
        specs.push(CaseSpec {
            id: case_id_for_stem(&stem),
            arch,
            mesh_path: Some(dir.join(format!("{stem}.stl"))),
        });
    }
    Ok(specs)
}

fn fit_curve(
    mesh: &archmap::mesh_io::TriangleMesh,
    cfg: &PipelineConfig,
) -> Result<archmap::arch_fit::ArchCurve> {
    let projection = mesh.occlusal_projection();
    let preclipped = radial_preclip(&projection, cfg.arch_fit.clip_quantile);
    Ok(estimate_arch(&preclipped, &cfg.arch_fit)?)
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli.config, cli.seed)?;
    let ontology = DentalOntology::load_default().context("loading bundled ontology")?;

    match cli.command {
        Command::Flatten { input, output } => {
            let bytes = std::fs::read(&input)
                .with_context(|| format!("reading {}", input.display()))?;
            let mesh = parse_stl(&bytes).context("parsing STL")?;
            let curve = fit_curve(&mesh, &cfg)?;
            let (lo, hi) = fitted_frame_x_bounds(&mesh, &curve);
            let pad = (hi - lo).max(1e-9) * cfg.flatten.pad_fraction;
            let sampling = build_sampling(&curve, lo - pad, hi + pad, cfg.flatten.samples);
            let flat = flatten_mesh(&mesh, &curve, &sampling);
            if let Some(parent) = output.parent() {
                std::fs::create_dir_all(parent)?;
            }
            std::fs::write(&output, flat.to_binary_stl())
                .with_context(|| format!("writing {}", output.display()))?;
            println!(
                "theta_star = {:.4} deg, a = {:.6}, b = {:.6}, c = {:.6}, rms_residual = {:.6}, inliers = {:.1}%",
                curve.theta_star,
                curve.a,
                curve.b,
                curve.c,
                curve.rms_residual,
                100.0 * curve.inlier_fraction
            );
            println!("wrote {}", output.display());
        }

        Command::Render { input, outdir, arch, variant } => {
            apply_variant(&mut cfg, &variant)?;
            let stem = input
                .file_stem()
                .and_then(|s| s.to_str())
                .context("input filename is not valid utf-8")?
                .to_string();
            let arch_label = arch_for_stem(&stem, &arch)
                .context("cannot determine arch side; pass --arch upper|lower")?;
            let side = archmap::render::ArchSide::from_arch_label(&arch_label)
                .with_context(|| format!("unknown arch `{arch_label}`"))?;
            let bytes = std::fs::read(&input)
                .with_context(|| format!("reading {}", input.display()))?;
            let mesh = parse_stl(&bytes).context("parsing STL")?;
            let curve = fit_curve(&mesh, &cfg)?;
            let render_mesh = if cfg.flatten_enabled {
                let (lo, hi) = fitted_frame_x_bounds(&mesh, &curve);
                let pad = (hi - lo).max(1e-9) * cfg.flatten.pad_fraction;
                let sampling = build_sampling(&curve, lo - pad, hi + pad, cfg.flatten.samples);
                archmap::render::RenderMesh::from(&flatten_mesh(&mesh, &curve, &sampling))
            } else {
                archmap::render::RenderMesh::from_fitted_frame(&mesh, &curve)
            };
            let views = archmap::render::render_views(
                &render_mesh,
                side,
                cfg.render_mode,
                &cfg.render,
            )?;
            std::fs::create_dir_all(&outdir)?;
            let case_id = case_id_for_stem(&stem);
            for (png, view) in views.png_bytes()?.iter().zip(archmap::render::VIEW_NAMES) {
                let path = outdir.join(archmap::vlm::view_png_name(
                    &case_id,
                    &arch_label,
                    view,
                    cfg.render_mode,
                ));
                std::fs::write(&path, png)?;
                println!("wrote {}", path.display());
            }
        }

        Command::Infer { cases, outdir, arch, manifest, infer_mode, variant } => {
            apply_variant(&mut cfg, &variant)?;
            if let Some(mode) = infer_mode {
                cfg.backend.mode = parse_infer_mode(&mode)?;
            }
            let specs = discover_with_view_fallback(&cases, &outdir, &manifest, &arch, &cfg)?;
            if specs.is_empty() {
                bail!("no cases");
            }
            run_inference(&specs, &cfg, &ontology, &outdir)?;
        }

        Command::Eval { reports, ground_truth, outdir } => {
            let records = collect_reports(&reports)?;
            if records.is_empty() {
                bail!("no cases");
            }
            let gts = collect_ground_truth(&ground_truth)?;
            let mut matched: Vec<CaseMetrics> = Vec::new();
            let mut unmatched: Vec<String> = Vec::new();
            for record in &records {
                let key = format!("{}_{}", record.case_id, record.arch);
                match gts.get(&key) {
                    Some(gt) => matched.push(metrics_from_record(record, gt, &ontology, "run")),
                    None => unmatched.push(key),
                }
            }
            if !unmatched.is_empty() {
                eprintln!("unmatched cases (no ground truth): {}", unmatched.join(", "));
            }
            if matched.is_empty() {
                bail!("no cases");
            }
            std::fs::create_dir_all(&outdir)?;
            let mut rows = aggregate(&matched, Grouping::Arch);
            rows.extend(aggregate(&matched, Grouping::Variant));
            let csv_path = outdir.join("metrics.csv");
            std::fs::write(&csv_path, summary_csv(&rows, cfg.eval.decimals))?;
            let json_path = outdir.join("metrics_summary.json");
            let mut body = serde_json::to_vec_pretty(&serde_json::json!({
                "groups": rows,
                "per_case": matched,
                "aggregation": "per arch, then per variant over all matched cases",
            }))?;
            body.push(b'\n');
            std::fs::write(&json_path, body)?;
            println!("wrote {}", csv_path.display());
            println!("wrote {}", json_path.display());
        }

        Command::Ablate { cases, outdir, arch, manifest } => {
            let specs = discover_cases(&cases, &manifest, &arch)?;
            if specs.is_empty() {
                bail!("no cases");
            }
            let gts = load_ground_truth_for_specs(&cases, &specs)?;
            let grid = run_ablation_grid(&specs, &gts, &cfg, &ontology, Some(&outdir))?;
            std::fs::create_dir_all(&outdir)?;
            let csv_path = outdir.join("ablation_summary.csv");
            std::fs::write(&csv_path, ablation_csv(&grid, cfg.eval.decimals))?;
            for (variant, row) in &grid.rows {
                println!(
                    "{:<28} acc {:>7.3} ± {:>6.3}  json {:>7.3}  halluc {:>6.3}",
                    variant.label(),
                    row.acc_pct.0,
                    row.acc_pct.1,
                    row.json_valid_pct,
                    row.halluc_pct
                );
            }
            println!("wrote {}", csv_path.display());
        }

        Command::Pipeline { cases, outdir, arch, manifest, ground_truth, variant } => {
            apply_variant(&mut cfg, &variant)?;
            let specs = discover_cases(&cases, &manifest, &arch)?;
            if specs.is_empty() {
                bail!("no cases");
            }
            run_inference(&specs, &cfg, &ontology, &outdir)?;
            let gt_dir = ground_truth.unwrap_or_else(|| cases.clone());
            let gts = collect_ground_truth(&gt_dir).unwrap_or_default();
            if gts.is_empty() {
                println!("no ground truth found; skipping evaluation");
                return Ok(());
            }
            let records = collect_reports(&outdir)?;
            let mut matched = Vec::new();
            for record in &records {
                let key = format!("{}_{}", record.case_id, record.arch);
                if let Some(gt) = gts.get(&key) {
                    matched.push(metrics_from_record(record, gt, &ontology, "pipeline"));
                }
            }
            if !matched.is_empty() {
                let rows = aggregate(&matched, Grouping::Arch);
                let csv_path = outdir.join("metrics.csv");
                std::fs::write(&csv_path, summary_csv(&rows, cfg.eval.decimals))?;
                println!("wrote {}", csv_path.display());
            }
        }

        Command::Synth { outdir, count } => {
            std::fs::create_dir_all(&outdir)?;
            for i in 0..count {
                let arch_label = if i % 2 == 0 { "upper" } else { "lower" };
                let spec = archmap::synth::ArchSpec::for_case(i, cfg.seed);
                let mesh = archmap::synth::arch_mesh(&spec);
                let stem = format!("case{i:03}_{arch_label}");
                std::fs::write(
                    outdir.join(format!("{stem}.stl")),
                    archmap::mesh_io::write_binary_stl_mesh(&mesh),
                )?;
                let gt = archmap::synth::fixture_ground_truth(&ontology, arch_label);
                let mut body = serde_json::to_vec_pretty(&gt)?;
                body.push(b'\n');
                std::fs::write(outdir.join(format!("{stem}.gt.json")), body)?;
            }
            println!("wrote {count} cases to {}", outdir.display());
        }
    }
    Ok(())
}

/// Cases for `infer`: meshes when present, otherwise pre-rendered views in
/// the output directory.
fn discover_with_view_fallback(
    cases: &Path,
    outdir: &Path,
    manifest: &Option<PathBuf>,
    arch: &Option<String>,
    cfg: &PipelineConfig,
) -> Result<Vec<CaseSpec>> {
    let mut specs = discover_cases(cases, manifest, arch)?;
    if !specs.is_empty() {
        return Ok(specs);
    }
    // no meshes: look for rendered views named per convention
    let mut seen = BTreeMap::new();
    if let Ok(entries) = std::fs::read_dir(outdir) {
        for entry in entries.flatten() {
            let name = entry.file_name().to_string_lossy().into_owned();
            let suffix = format!("_front_{}.png", cfg.render_mode.as_str());
            if let Some(stem) = name.strip_suffix(&suffix) {
                if let Some(arch_label) = arch_for_stem(stem, arch) {
                    seen.insert(case_id_for_stem(stem), arch_label);
                }
            }
        }
    }
    for (id, arch_label) in seen {
        specs.push(CaseSpec { id, arch: arch_label, mesh_path: None });
    }
    Ok(specs)
}

fn run_inference(
    specs: &[CaseSpec],
    cfg: &PipelineConfig,
    ontology: &DentalOntology,
    outdir: &Path,
) -> Result<()> {
    std::fs::create_dir_all(outdir)?;
    let backend = make_backend(&cfg.backend, cfg.seed)?;
    let results = run_batch(specs, cfg, backend.as_ref(), ontology, Some(outdir));
    let mut failures = 0usize;
    for result in &results {
        match &result.result {
            Ok(success) => println!(
                "{}_{}: json_valid={} violations={} ({:.2}s)",
                result.case_id,
                result.arch,
                success.record.json_valid,
                success.record.validation.len(),
                success.outcome.latency_s
            ),
            Err(message) => {
                failures += 1;
                eprintln!("{}_{}: FAILED: {message}", result.case_id, result.arch);
            }
        }
    }
    if failures == results.len() {
        bail!("all {failures} cases failed");
    }
    Ok(())
}

fn collect_reports(dir: &Path) -> Result<Vec<archmap::vlm::CaseReportFile>> {
    let mut records = Vec::new();
    let entries = std::fs::read_dir(dir)
        .with_context(|| format!("reading report directory {}", dir.display()))?;
    let mut paths: Vec<PathBuf> = entries
        .flatten()
        .map(|e| e.path())
        .filter(|p| p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.ends_with(".report.json")))
        .collect();
    paths.sort();
    for path in paths {
        records.push(read_report_file(&path)?);
    }
    Ok(records)
}

fn collect_ground_truth(dir: &Path) -> Result<BTreeMap<String, StructuredReport>> {
    let mut gts = BTreeMap::new();
    let entries = std::fs::read_dir(dir)
        .with_context(|| format!("reading ground-truth directory {}", dir.display()))?;
    for entry in entries.flatten() {
        let path = entry.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
            continue;
        };
        let Some(stem) = name.strip_suffix(".gt.json") else {
            continue;
        };
        let bytes = std::fs::read(&path)?;
        let report: StructuredReport = serde_json::from_slice(&bytes)
            .with_context(|| format!("parsing ground truth {}", path.display()))?;
        gts.insert(stem.to_string(), report);
    }
    Ok(gts)
}

fn load_ground_truth_for_specs(
    dir: &Path,
    specs: &[CaseSpec],
) -> Result<BTreeMap<String, StructuredReport>> {
    let all = collect_ground_truth(dir)?;
    let mut out = BTreeMap::new();
    for spec in specs {
        let key = format!("{}_{}", spec.id, spec.arch);
        if let Some(gt) = all.get(&key) {
            out.insert(key, gt.clone());
        } else {
            eprintln!("no ground truth for {key}; its metrics will be skipped");
        }
    }
    Ok(out)
}
