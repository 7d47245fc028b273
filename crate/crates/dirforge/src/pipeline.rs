//! The one-command end-to-end run.
//!
//! [`reproduce`] takes a [`RunConfig`] and an output directory and
//! builds the whole tree: pair datasets, trained models, learned
//! directions, and every report, then seals it with a manifest. Two
//! runs with the same config produce byte-identical trees; nothing
//! inside the tree carries a timestamp or an absolute path.
//!
//! Datasets are written to disk and read back before any learning, so
//! the one-shot run goes through the same float32 quantization as a
//! staged CLI session and produces the same bytes.

use std::path::{Path, PathBuf};

use crate::artifacts::{read_pairs, write_manifest, write_pairs};
use crate::config::RunConfig;
use crate::diffusion::{train_denoiser, Denoiser};
use crate::editing::interpolate_edit;
use crate::encoder::{train_encoder, Encoder};
use crate::error::{Error, Result};
use crate::eval::{
    ablate, composition, emit_report, rescoring, AblationAxis, AblationReport,
    CompositionReport, NamedSweep, ReportSet, RescoringMatrix, StrengthPolicy,
};
use crate::transfer::{learn_direction, save_direction, DirectionEmbedding};
use crate::world::{lookup_direction, make_pairs, registry};

/// Everything a finished run hands back in memory, beyond the files.
#[derive(Debug)]
pub struct ReproduceOutcome {
    pub root: PathBuf,
    pub config_hash: String,
    /// Main matrix: every registry direction at its recommendation.
    pub rescoring: RescoringMatrix,
    /// Single-row matrix for the 10-pair variant of the first registry
    /// direction.
    pub rescoring_n10: RescoringMatrix,
    /// Timesteps, samples, and loss-terms grids, in that order.
    pub ablations: Vec<AblationReport>,
    /// First two registry directions applied separately and together.
    pub composition: CompositionReport,
    /// Every file written, manifest last.
    pub files: Vec<PathBuf>,
}

fn ensure_fresh_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path)
        .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut entries = std::fs::read_dir(path)
        .map_err(|e| Error::io(format!("listing {}", path.display()), e))?;
    if entries.next().is_some() {
        return Err(Error::BadConfig {
            field: "out".into(),
            reason: format!(
                "{} is not empty; a run tree must start from a fresh directory",
                path.display()
            ),
        });
    }
    Ok(())
}

fn subdir(root: &Path, name: &str) -> Result<PathBuf> {
    let dir = root.join(name);
    std::fs::create_dir_all(&dir)
        .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    Ok(dir)
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value)
        .map_err(|e| Error::json(format!("serializing {}", path.display()), e))?;
    std::fs::write(path, json)
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

/// Runs the full experiment under `out_root` and seals the tree.
///
/// Stages, in order: render and persist the pair datasets, read them
/// back, train the encoder, train the noise predictor, optimize one
/// direction per registered edit, score the main re-scoring matrix,
/// run the three ablation grids (persisting each cell's direction),
/// re-score the 10-pair variant, measure two-edit composition, sweep
/// the first direction over strengths, emit all reports, and write the
/// manifest last. With `verbose` each stage logs one line to stderr.
pub fn reproduce(cfg: &RunConfig, out_root: &Path, verbose: bool) -> Result<ReproduceOutcome> {
    cfg.validate()?;
    let hash = cfg.hash();
    let log = |msg: &str| {
        if verbose {
            eprintln!("[{hash}] {msg}");
        }
    };

    ensure_fresh_dir(out_root)?;
    let mut files: Vec<PathBuf> = Vec::new();

    let config_path = out_root.join("config.json");
    cfg.save(&config_path)?;
    files.push(config_path);

    // Pair datasets: write, then read back, so learning sees exactly
    // what a staged session would load (float32 on disk).
    log("rendering pair datasets");
    let world_dir = subdir(out_root, "world")?;
    let mut pair_sets = Vec::new();
    for source in registry() {
        let dir = world_dir.join(&source.name);
        std::fs::create_dir_all(&dir)
            .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        let pairs = make_pairs(&cfg.world, cfg.seed, cfg.transfer.n_pairs, &source);
        files.extend(write_pairs(&dir, &pairs, &cfg.world, &hash)?);
        let (back, _meta) = read_pairs(&dir)?;
        pair_sets.push(back);
    }

    log("training encoder");
    let models_dir = subdir(out_root, "models")?;
    let (enc, enc_report) = train_encoder(&cfg.world, &cfg.encoder)?;
    let enc_path = models_dir.join("encoder.gtc");
    enc.save(&enc_path, &hash)?;
    files.push(enc_path);
    let enc_report_path = models_dir.join("encoder_report.json");
    write_json(&enc_report_path, &enc_report)?;
    files.push(enc_report_path);

    log("training noise predictor");
    let (den, den_report) = train_denoiser(&cfg.world, &enc, &cfg.diffusion)?;
    let den_path = models_dir.join("denoiser.gtc");
    den.save(&den_path, &hash)?;
    files.push(den_path);
    let den_report_path = models_dir.join("denoiser_report.json");
    write_json(&den_report_path, &den_report)?;
    files.push(den_report_path);

    let dirs_dir = subdir(out_root, "directions")?;
    let mut directions: Vec<DirectionEmbedding> = Vec::new();
    for pairs in &pair_sets {
        log(&format!("learning direction {}", pairs.direction.name));
        let (dir, report) = learn_direction(pairs, &den, &enc, &cfg.transfer, &hash)?;
        let path = dirs_dir.join(format!("{}.gtd", dir.name));
        save_direction(&path, &dir)?;
        files.push(path);
        let report_path = dirs_dir.join(format!("{}_training.json", dir.name));
        write_json(&report_path, &report)?;
        files.push(report_path);
        directions.push(dir);
    }

    log("scoring the re-scoring matrix");
    let main_matrix = rescoring(
        &cfg.world,
        &den,
        &directions,
        cfg.eval_m,
        StrengthPolicy::Recommended,
        cfg.seed,
        &hash,
    )?;

    // Ablations vary around the first registered direction.
    let anchor = lookup_direction(&registry()[0].name)?;
    let cell_dir = subdir(out_root, "directions/ablation")?;
    let mut ablations = Vec::new();
    let mut n10_direction: Option<DirectionEmbedding> = None;
    for axis in [AblationAxis::Timesteps, AblationAxis::Samples, AblationAxis::LossTerms] {
        log(&format!("running {} ablation", axis.name()));
        let axis_dir = cell_dir.join(axis.name());
        std::fs::create_dir_all(&axis_dir)
            .map_err(|e| Error::io(format!("creating {}", axis_dir.display()), e))?;
        let mut cell_files = Vec::new();
        let report = ablate(
            &cfg.world,
            &den,
            &enc,
            &anchor,
            &cfg.transfer,
            axis,
            cfg.eval_m,
            cfg.seed,
            cfg.seed,
            &hash,
            |cell| {
                let path = axis_dir.join(format!("{}.gtd", cell.label));
                save_direction(&path, &cell.direction)?;
                cell_files.push(path);
                Ok(())
            },
        )?;
        if axis == AblationAxis::Samples {
            n10_direction = report.cell("n10").map(|c| c.direction.clone());
        }
        files.extend(cell_files);
        ablations.push(report);
    }
    let n10_direction = n10_direction.ok_or_else(|| Error::BadConfig {
        field: "ablations".into(),
        reason: "samples grid produced no n10 cell".into(),
    })?;

    log("re-scoring the 10-pair variant");
    let n10_matrix = rescoring(
        &cfg.world,
        &den,
        std::slice::from_ref(&n10_direction),
        cfg.eval_m,
        StrengthPolicy::Recommended,
        cfg.seed,
        &hash,
    )?;

    log("measuring two-edit composition");
    let comp = composition(
        &cfg.world,
        &den,
        &directions[0],
        &directions[1],
        cfg.eval_m,
        cfg.seed,
        &hash,
    )?;

    log("sweeping edit strength");
    let points =
        interpolate_edit(&cfg.world, &den, None, 1.0, &directions[0], &SWEEP_GRID, cfg.seed)?;
    let sweep = NamedSweep {
        name: format!("interp_{}", directions[0].name),
        attribute: anchor.target_attribute(),
        config_hash: hash.clone(),
        points,
    };

    log("emitting reports");
    let set = ReportSet {
        rescoring: vec![main_matrix.clone(), n10_matrix.clone()],
        distances: vec![],
        ablations: ablations.clone(),
        compositions: vec![comp.clone()],
        sweeps: vec![sweep],
    };
    files.extend(emit_report(&set, &out_root.join("reports"))?);

    log("sealing the manifest");
    files.push(write_manifest(out_root, &hash, cfg.seed)?);

    Ok(ReproduceOutcome {
        root: out_root.to_path_buf(),
        config_hash: hash,
        rescoring: main_matrix,
        rescoring_n10: n10_matrix,
        ablations,
        composition: comp,
        files,
    })
}

/// Loads the three artifacts a downstream command needs from a sealed
/// run tree: encoder, noise predictor, and the named directions.
pub fn load_run(
    root: &Path,
    names: &[&str],
) -> Result<(Encoder, Denoiser, Vec<DirectionEmbedding>)> {
    let enc = Encoder::load(&root.join("models/encoder.gtc"))?;
    let den = Denoiser::load(&root.join("models/denoiser.gtc"))?;
    let dirs = names
        .iter()
        .map(|name| {
            crate::transfer::load_direction(
                &root.join(format!("directions/{name}.gtd")),
                den.cond_dim,
            )
        })
        .collect::<Result<_>>()?;
    Ok((enc, den, dirs))
}

/// The strength grid [`reproduce`] sweeps: unit steps from -2 to 2,
/// with the exact zero in the middle.
pub const SWEEP_GRID: [f64; 5] = [-2.0, -1.0, 0.0, 1.0, 2.0];
