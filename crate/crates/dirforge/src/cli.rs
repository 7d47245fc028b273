//! Command-line surface.
//!
//! Subcommands mirror the experiment lifecycle: render datasets, train
//! the two models, learn directions, then generate, edit, and evaluate.
//! Every command prints the files it wrote as one final JSON array on
//! stdout. Exit codes: 0 success, 1 usage error, 2 runtime failure.
//!
//! Standalone evaluation commands write under
//! `reports/<timestamp>-<hash>/`; the timestamp lives only in the
//! directory name, never inside a file, so reruns with the same seed
//! produce byte-identical contents.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Deserialize;

use crate::artifacts::{
    check_embedded_hash, pgm_embedded_hash, read_frame, read_pairs, write_frame,
    write_pairs, verify_manifest,
};
use crate::checkpoint::read_checkpoint;
use crate::config::RunConfig;
use crate::diffusion::{train_denoiser, Denoiser};
use crate::editing::{
    build_edits, edit_generate, edit_real, interpolate_edit, sweep_trace_csv, Edit, EditSpec,
};
use crate::encoder::{train_encoder, Encoder};
use crate::error::Error;
use crate::eval::{
    ablate, distance_report, emit_report, frame_seed, rescoring, sweep_line_svg, AblationAxis,
    NamedDistances, ReportSet, StrengthPolicy,
};
use crate::pipeline::{reproduce, SWEEP_GRID};
use crate::transfer::{learn_direction, load_direction, save_direction, DirectionEmbedding};
use crate::world::{lookup_direction, make_pairs, registry};

/// What went wrong, split by who has to fix it.
enum Failure {
    /// The invocation itself is wrong; fix the flags. Exit 1.
    Usage(String),
    /// The invocation was fine but the work failed. Exit 2.
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Runtime(e)
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

#[derive(Parser)]
#[command(name = "dirforge", version, about = "Learn and apply semantic edit directions")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

/// Flags shared by every command that needs a run configuration.
#[derive(Args)]
struct ConfigArgs {
    /// Run configuration JSON; omitted fields keep reference values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed, propagated to every stage.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> CliResult<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::reference(),
        };
        if let Some(seed) = self.seed {
            cfg = cfg.with_seed(seed);
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Synthetic-world datasets.
    World {
        #[command(subcommand)]
        cmd: WorldCmd,
    },
    /// Model training.
    Train {
        #[command(subcommand)]
        cmd: TrainCmd,
    },
    /// Direction optimization.
    Direction {
        #[command(subcommand)]
        cmd: DirectionCmd,
    },
    /// Generate unedited frames.
    Sample {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "models/denoiser.gtc")]
        denoiser: PathBuf,
        /// Frames to generate.
        #[arg(long, default_value_t = 1)]
        n: usize,
        #[arg(long, default_value = "frames")]
        out: PathBuf,
    },
    /// Generate frames with directions applied during sampling.
    Edit {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "models/denoiser.gtc")]
        denoiser: PathBuf,
        /// Direction file; repeat for multi-edit.
        #[arg(long, required_unless_present = "spec", conflicts_with = "spec")]
        direction: Vec<PathBuf>,
        /// Strength per direction, positional match; omit for stored
        /// recommendations.
        #[arg(long = "lambda-e", allow_hyphen_values = true, conflicts_with = "spec")]
        lambda_e: Vec<f64>,
        /// Timestep window override as fractions `lo,hi`.
        #[arg(long, value_parser = parse_window, conflicts_with = "spec")]
        window: Option<(f64, f64)>,
        /// Guidance scale (only meaningful with a condition).
        #[arg(long = "lambda-g", allow_hyphen_values = true)]
        lambda_g: Option<f64>,
        /// Edit document (JSON) instead of flags.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value_t = 1)]
        n: usize,
        #[arg(long, default_value = "frames")]
        out: PathBuf,
    },
    /// Invert a real frame and replay it with edits.
    EditReal {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "models/denoiser.gtc")]
        denoiser: PathBuf,
        /// Frame to edit (.pgm or .f64).
        #[arg(long)]
        input: PathBuf,
        #[arg(long, required_unless_present = "spec", conflicts_with = "spec")]
        direction: Vec<PathBuf>,
        #[arg(long = "lambda-e", allow_hyphen_values = true, conflicts_with = "spec")]
        lambda_e: Vec<f64>,
        #[arg(long, value_parser = parse_window, conflicts_with = "spec")]
        window: Option<(f64, f64)>,
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value = "frames")]
        out: PathBuf,
    },
    /// Sweep one direction over a strength grid.
    Interp {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "models/denoiser.gtc")]
        denoiser: PathBuf,
        #[arg(long)]
        direction: PathBuf,
        /// Comma-separated strengths, ascending; default -2,-1,0,1,2.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        grid: Option<Vec<f64>>,
        #[arg(long, default_value = "frames")]
        out: PathBuf,
    },
    /// Quantitative evaluation.
    Eval {
        #[command(subcommand)]
        cmd: EvalCmd,
    },
    /// One predefined ablation grid.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "models/denoiser.gtc")]
        denoiser: PathBuf,
        #[arg(long, default_value = "models/encoder.gtc")]
        encoder: PathBuf,
        /// timesteps, samples, or loss_terms.
        #[arg(long)]
        axis: String,
        /// Registered direction the grid varies around.
        #[arg(long, default_value = "radius")]
        name: String,
        /// Evaluation frames per cell.
        #[arg(long)]
        n: Option<usize>,
        /// Defaults to reports/<timestamp>-<hash>.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Verify a sealed run tree's hashes.
    Report {
        /// Root of the tree to verify.
        tree: PathBuf,
    },
    /// Run the full experiment end to end.
    Reproduce {
        /// Use the reference configuration exactly.
        #[arg(long, conflicts_with = "config")]
        paper_defaults: bool,
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Defaults to run-<hash>.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum WorldCmd {
    /// Render the four registered pair datasets.
    Gen {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Pairs per direction; defaults to the configured count.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long, default_value = "world")]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum TrainCmd {
    /// Train the attribute encoder.
    Encoder {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long, default_value = "models")]
        out: PathBuf,
    },
    /// Train the conditional noise predictor (needs the encoder).
    Diffusion {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "models/encoder.gtc")]
        encoder: PathBuf,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long, default_value = "models")]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum DirectionCmd {
    /// Optimize a direction from one pair dataset.
    Learn {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Pair dataset directory (meta.json + pairs.f32).
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long, default_value = "models/denoiser.gtc")]
        denoiser: PathBuf,
        #[arg(long, default_value = "models/encoder.gtc")]
        encoder: PathBuf,
        #[arg(long)]
        iters: Option<usize>,
        #[arg(long, default_value = "directions")]
        out: PathBuf,
    },
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Score directions against every registry attribute.
    Rescoring {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "models/denoiser.gtc")]
        denoiser: PathBuf,
        #[arg(long, required = true)]
        direction: Vec<PathBuf>,
        /// One shared strength; omit for stored recommendations.
        #[arg(long = "lambda-e", allow_hyphen_values = true)]
        lambda_e: Option<f64>,
        /// Evaluation frames.
        #[arg(long)]
        n: Option<usize>,
        /// Defaults to reports/<timestamp>-<hash>.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Pixel and embedding distances between two frame directories.
    Distance {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value = "models/encoder.gtc")]
        encoder: PathBuf,
        #[arg(long)]
        before: PathBuf,
        #[arg(long)]
        after: PathBuf,
        /// Label for the report row.
        #[arg(long, default_value = "edit")]
        name: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_window(s: &str) -> std::result::Result<(f64, f64), String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err(format!("expected lo,hi fractions, got {s:?}"));
    }
    let lo: f64 = parts[0].trim().parse().map_err(|e| format!("bad lo: {e}"))?;
    let hi: f64 = parts[1].trim().parse().map_err(|e| format!("bad hi: {e}"))?;
    Ok((lo, hi))
}

/// Parses argv and runs; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    0
                }
                _ => {
                    eprint!("{e}");
                    1
                }
            };
        }
    };
    match dispatch(cli.cmd) {
        Ok(files) => {
            let names: Vec<String> = files.iter().map(|p| p.display().to_string()).collect();
            println!("{}", serde_json::to_string(&names).expect("paths serialize"));
            0
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            2
        }
    }
}

/// A JSON stand-in for flag-built edit lists.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EditDocument {
    edits: Vec<EditDocEntry>,
    #[serde(default)]
    lambda_g: Option<f64>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct EditDocEntry {
    /// Path to a direction file.
    direction: PathBuf,
    #[serde(default)]
    strength: Option<f64>,
    #[serde(default)]
    window: Option<[f64; 2]>,
}

fn load_directions(paths: &[PathBuf], k: usize) -> CliResult<Vec<DirectionEmbedding>> {
    paths.iter().map(|p| Ok(load_direction(p, k)?)).collect()
}

/// Edits from flags or a document, validated either way.
fn edits_from_args(
    den: &Denoiser,
    direction: &[PathBuf],
    lambda_e: &[f64],
    window: Option<(f64, f64)>,
    spec: Option<&PathBuf>,
) -> CliResult<(Vec<Edit>, Option<f64>)> {
    if let Some(path) = spec {
        let bytes = std::fs::read(path)
            .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let doc: EditDocument = serde_json::from_slice(&bytes)
            .map_err(|e| Error::json(format!("parsing {}", path.display()), e))?;
        let mut edits = Vec::with_capacity(doc.edits.len());
        for entry in &doc.edits {
            let dir = load_direction(&entry.direction, den.cond_dim)?;
            let mut edit = Edit::recommended(&dir);
            if let Some(s) = entry.strength {
                edit.strength = s;
            }
            if let Some([lo, hi]) = entry.window {
                edit.window = (lo, hi);
            }
            edits.push(edit);
        }
        return Ok((edits, doc.lambda_g));
    }
    if !lambda_e.is_empty() && lambda_e.len() != direction.len() {
        return Err(Failure::Usage(format!(
            "--lambda-e given {} time(s) but --direction {} time(s); give one per direction or none",
            lambda_e.len(),
            direction.len()
        )));
    }
    let dirs = load_directions(direction, den.cond_dim)?;
    Ok((build_edits(&dirs, lambda_e, window)?, None))
}

/// Frame files in a directory: the lossless sidecars when present,
/// otherwise the PGMs, sorted by name.
fn frame_files(dir: &Path) -> CliResult<Vec<PathBuf>> {
    let mut f64s = Vec::new();
    let mut pgms = Vec::new();
    let entries = std::fs::read_dir(dir)
        .map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(format!("listing {}", dir.display()), e))?.path();
        match path.extension().and_then(|e| e.to_str()) {
            Some("f64") => f64s.push(path),
            Some("pgm") => pgms.push(path),
            _ => {}
        }
    }
    let mut chosen = if f64s.is_empty() { pgms } else { f64s };
    chosen.sort();
    if chosen.is_empty() {
        return Err(Failure::Runtime(Error::BadConfig {
            field: "frames".into(),
            reason: format!("{} holds no .f64 or .pgm frames", dir.display()),
        }));
    }
    Ok(chosen)
}

fn stamped_reports_dir(hash: &str) -> PathBuf {
    let ts = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    PathBuf::from("reports").join(format!("{ts}-{hash}"))
}

fn dispatch(cmd: Cmd) -> CliResult<Vec<PathBuf>> {
    match cmd {
        Cmd::World { cmd: WorldCmd::Gen { cfg, n, out } } => {
            let mut cfg = cfg.load()?;
            if let Some(n) = n {
                cfg.transfer.n_pairs = n;
            }
            let hash = cfg.hash();
            let mut files = Vec::new();
            for source in registry() {
                let dir = out.join(&source.name);
                std::fs::create_dir_all(&dir)
                    .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
                let pairs = make_pairs(&cfg.world, cfg.seed, cfg.transfer.n_pairs, &source);
                files.extend(write_pairs(&dir, &pairs, &cfg.world, &hash)?);
            }
            Ok(files)
        }

        Cmd::Train { cmd: TrainCmd::Encoder { cfg, iters, out } } => {
            let mut cfg = cfg.load()?;
            if let Some(iters) = iters {
                cfg.encoder.iterations = iters;
            }
            let hash = cfg.hash();
            std::fs::create_dir_all(&out)
                .map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
            let (enc, report) = train_encoder(&cfg.world, &cfg.encoder)?;
            let model = out.join("encoder.gtc");
            enc.save(&model, &hash)?;
            let report_path = out.join("encoder_report.json");
            write_json(&report_path, &report)?;
            Ok(vec![model, report_path])
        }

        Cmd::Train { cmd: TrainCmd::Diffusion { cfg, encoder, iters, out } } => {
            let mut cfg = cfg.load()?;
            if let Some(iters) = iters {
                cfg.diffusion.iterations = iters;
            }
            let hash = cfg.hash();
            std::fs::create_dir_all(&out)
                .map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
            let enc = Encoder::load(&encoder)?;
            let (den, report) = train_denoiser(&cfg.world, &enc, &cfg.diffusion)?;
            let model = out.join("denoiser.gtc");
            den.save(&model, &hash)?;
            let report_path = out.join("denoiser_report.json");
            write_json(&report_path, &report)?;
            Ok(vec![model, report_path])
        }

        Cmd::Direction { cmd: DirectionCmd::Learn { cfg, pairs, denoiser, encoder, iters, out } } => {
            let mut cfg = cfg.load()?;
            if let Some(iters) = iters {
                cfg.transfer.iterations = iters;
            }
            let (pair_set, _meta) = read_pairs(&pairs)?;
            cfg.transfer.n_pairs = pair_set.inputs.len();
            let hash = cfg.hash();
            let den = Denoiser::load(&denoiser)?;
            let enc = Encoder::load(&encoder)?;
            let (dir, report) = learn_direction(&pair_set, &den, &enc, &cfg.transfer, &hash)?;
            std::fs::create_dir_all(&out)
                .map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
            let path = out.join(format!("{}.gtd", dir.name));
            save_direction(&path, &dir)?;
            let report_path = out.join(format!("{}_training.json", dir.name));
            write_json(&report_path, &report)?;
            Ok(vec![path, report_path])
        }

        Cmd::Sample { cfg, denoiser, n, out } => {
            let cfg = cfg.load()?;
            let hash = cfg.hash();
            let den = Denoiser::load(&denoiser)?;
            let spec = EditSpec::unedited(None, cfg.edit.lambda_g);
            std::fs::create_dir_all(&out)
                .map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
            let mut files = Vec::new();
            for j in 0..n {
                let frame = edit_generate(&den, &spec, frame_seed(cfg.seed, j))?;
                let width = (frame.numel() as f64).sqrt() as usize;
                files.extend(write_frame(&out, &format!("sample_{j:04}"), &frame, width, &hash)?);
            }
            Ok(files)
        }

        Cmd::Edit { cfg, denoiser, direction, lambda_e, window, lambda_g, spec, n, out } => {
            let cfg = cfg.load()?;
            let hash = cfg.hash();
            let den = Denoiser::load(&denoiser)?;
            let (edits, doc_lambda_g) =
                edits_from_args(&den, &direction, &lambda_e, window, spec.as_ref())?;
            let guidance = lambda_g.or(doc_lambda_g).unwrap_or(cfg.edit.lambda_g);
            let spec = EditSpec::new(edits, None, guidance)?;
            std::fs::create_dir_all(&out)
                .map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
            let mut files = Vec::new();
            for j in 0..n {
                let frame = edit_generate(&den, &spec, frame_seed(cfg.seed, j))?;
                let width = (frame.numel() as f64).sqrt() as usize;
                files.extend(write_frame(&out, &format!("edit_{j:04}"), &frame, width, &hash)?);
            }
            Ok(files)
        }

        Cmd::EditReal { cfg, denoiser, input, direction, lambda_e, window, spec, out } => {
            let cfg = cfg.load()?;
            let hash = cfg.hash();
            let den = Denoiser::load(&denoiser)?;
            let (edits, _) = edits_from_args(&den, &direction, &lambda_e, window, spec.as_ref())?;
            let spec = EditSpec::new(edits, None, 1.0)?;
            let x0 = read_frame(&input)?;
            let edited = edit_real(&den, &x0, &spec, cfg.seed)?;
            std::fs::create_dir_all(&out)
                .map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
            let stem = input
                .file_stem()
                .and_then(|s| s.to_str())
                .map(|s| format!("{s}_edited"))
                .unwrap_or_else(|| "edited".into());
            let width = (edited.numel() as f64).sqrt() as usize;
            Ok(write_frame(&out, &stem, &edited, width, &hash)?.to_vec())
        }

        Cmd::Interp { cfg, denoiser, direction, grid, out } => {
            let cfg = cfg.load()?;
            let hash = cfg.hash();
            let den = Denoiser::load(&denoiser)?;
            let dir = load_direction(&direction, den.cond_dim)?;
            let grid = grid.unwrap_or_else(|| SWEEP_GRID.to_vec());
            let points =
                interpolate_edit(&cfg.world, &den, None, 1.0, &dir, &grid, cfg.seed)?;
            std::fs::create_dir_all(&out)
                .map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
            let mut files = Vec::new();
            for (i, point) in points.iter().enumerate() {
                let width = (point.image.numel() as f64).sqrt() as usize;
                files.extend(write_frame(
                    &out,
                    &format!("interp_{}_{i:02}", dir.name),
                    &point.image,
                    width,
                    &hash,
                )?);
            }
            let target = lookup_direction(&dir.name)?.target_attribute();
            let csv_path = out.join(format!("interp_{}.csv", dir.name));
            std::fs::write(&csv_path, sweep_trace_csv(&points))
                .map_err(|e| Error::io(format!("writing {}", csv_path.display()), e))?;
            files.push(csv_path);
            let svg_path = out.join(format!("interp_{}.svg", dir.name));
            std::fs::write(&svg_path, sweep_line_svg(&points, target, &hash))
                .map_err(|e| Error::io(format!("writing {}", svg_path.display()), e))?;
            files.push(svg_path);
            Ok(files)
        }

        Cmd::Eval { cmd: EvalCmd::Rescoring { cfg, denoiser, direction, lambda_e, n, out } } => {
            let cfg = cfg.load()?;
            let hash = cfg.hash();
            let den = Denoiser::load(&denoiser)?;
            let dirs = load_directions(&direction, den.cond_dim)?;
            let policy = match lambda_e {
                Some(v) => StrengthPolicy::Fixed(v),
                None => StrengthPolicy::Recommended,
            };
            let m = n.unwrap_or(cfg.eval_m);
            let mat = rescoring(&cfg.world, &den, &dirs, m, policy, cfg.seed, &hash)?;
            let outdir = out.unwrap_or_else(|| stamped_reports_dir(&hash));
            let set = ReportSet { rescoring: vec![mat], ..ReportSet::default() };
            Ok(emit_report(&set, &outdir)?)
        }

        Cmd::Eval { cmd: EvalCmd::Distance { cfg, encoder, before, after, name, out } } => {
            let cfg = cfg.load()?;
            let hash = cfg.hash();
            let enc = Encoder::load(&encoder)?;
            let load_all = |dir: &Path| -> CliResult<Vec<crate::autodiff::Tensor>> {
                frame_files(dir)?
                    .iter()
                    .map(|p| Ok(read_frame(p)?))
                    .collect()
            };
            let b = load_all(&before)?;
            let a = load_all(&after)?;
            let report = distance_report(&enc, &b, &a, &hash)?;
            let outdir = out.unwrap_or_else(|| stamped_reports_dir(&hash));
            let set = ReportSet {
                distances: vec![NamedDistances { name, report }],
                ..ReportSet::default()
            };
            Ok(emit_report(&set, &outdir)?)
        }

        Cmd::Ablate { cfg, denoiser, encoder, axis, name, n, out } => {
            let cfg = cfg.load()?;
            let hash = cfg.hash();
            let axis = AblationAxis::from_name(&axis)?;
            let den = Denoiser::load(&denoiser)?;
            let enc = Encoder::load(&encoder)?;
            let source = lookup_direction(&name)?;
            let m = n.unwrap_or(cfg.eval_m);
            let outdir = out.unwrap_or_else(|| stamped_reports_dir(&hash));
            let cell_dir = outdir.join("cells");
            std::fs::create_dir_all(&cell_dir)
                .map_err(|e| Error::io(format!("creating {}", cell_dir.display()), e))?;
            let mut files = Vec::new();
            let report = ablate(
                &cfg.world,
                &den,
                &enc,
                &source,
                &cfg.transfer,
                axis,
                m,
                cfg.seed,
                cfg.seed,
                &hash,
                |cell| {
                    let path = cell_dir.join(format!("{}.gtd", cell.label));
                    save_direction(&path, &cell.direction)?;
                    files.push(path);
                    Ok(())
                },
            )?;
            let set = ReportSet { ablations: vec![report], ..ReportSet::default() };
            files.extend(emit_report(&set, &outdir)?);
            Ok(files)
        }

        Cmd::Report { tree } => {
            let (manifest, listed) = verify_manifest(&tree)?;
            let mut embedded = 0usize;
            for rel in manifest.files.keys() {
                let path = tree.join(rel);
                if rel.ends_with(".pgm") {
                    if let Some(found) = pgm_embedded_hash(&path)? {
                        check_embedded_hash(rel, &manifest.config_hash, &found)?;
                        embedded += 1;
                    }
                } else if rel.ends_with(".gtc") || rel.ends_with(".gtd") {
                    let loaded = read_checkpoint(&path)?;
                    check_embedded_hash(rel, &manifest.config_hash, &loaded.header.config_hash)?;
                    embedded += 1;
                } else if rel == "config.json" {
                    let cfg = RunConfig::load(&path)?;
                    check_embedded_hash(rel, &manifest.config_hash, &cfg.hash())?;
                    embedded += 1;
                } else if rel.ends_with(".json") {
                    embedded += check_json_hashes(&path, rel, &manifest.config_hash)?;
                }
            }
            eprintln!(
                "ok: {} files match the manifest, {} embedded hashes match {}",
                listed, embedded, manifest.config_hash
            );
            Ok(vec![])
        }

        Cmd::Reproduce { paper_defaults, cfg, out } => {
            let run_cfg = if paper_defaults {
                let mut c = RunConfig::reference();
                if let Some(seed) = cfg.seed {
                    c = c.with_seed(seed);
                }
                c
            } else {
                cfg.load()?
            };
            let hash = run_cfg.hash();
            let root = out.unwrap_or_else(|| PathBuf::from(format!("run-{hash}")));
            let outcome = reproduce(&run_cfg, &root, true)?;
            Ok(outcome.files)
        }
    }
}

/// Checks every `config_hash` key in a JSON report (object or array of
/// objects); returns how many it checked.
fn check_json_hashes(path: &Path, rel: &str, tree_hash: &str) -> CliResult<usize> {
    let bytes =
        std::fs::read(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let value: serde_json::Value = serde_json::from_slice(&bytes)
        .map_err(|e| Error::json(format!("parsing {}", path.display()), e))?;
    let mut checked = 0usize;
    let mut check_one = |v: &serde_json::Value| -> CliResult<()> {
        if let Some(found) = v.get("config_hash").and_then(|h| h.as_str()) {
            check_embedded_hash(rel, tree_hash, found)?;
            checked += 1;
        }
        Ok(())
    };
    match &value {
        serde_json::Value::Array(items) => {
            for item in items {
                check_one(item)?;
            }
        }
        v => check_one(v)?,
    }
    Ok(checked)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let json = serde_json::to_string_pretty(value)
        .map_err(|e| Error::json(format!("serializing {}", path.display()), e))?;
    std::fs::write(path, json)
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(())
}
