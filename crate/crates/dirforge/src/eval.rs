//! Quantitative evaluation of learned directions.
//!
//! Three instruments, all built on the world's analytic attribute
//! read-back instead of a learned classifier:
//!
//! - a re-scoring matrix: edit each direction on M generated frames and
//!   measure the mean span-normalized shift of every registered target
//!   attribute; a disentangled direction moves its own attribute (the
//!   diagonal) and little else,
//! - distance reports: mean pixel L2 and mean raw-embedding L2 between
//!   frames before and after an edit, a two-sided stand-in for a
//!   perceptual metric,
//! - ablation grids over the edit window, the pair count, and the loss
//!   terms, each cell scored with the same machinery.
//!
//! Per-frame work parallelizes (capped by `DIRFORGE_THREADS`); every
//! aggregate is summed in frame order, so results are bit-identical
//! regardless of thread count. All randomness is derived from one seed
//! plus the frame index. Reports serialize to CSV, JSON, and
//! deterministic SVG charts.

use std::path::{Path, PathBuf};

use rand::RngCore;
use rayon::prelude::*;
use serde::Serialize;

use crate::autodiff::Tensor;
use crate::diffusion::Denoiser;
use crate::editing::{edit_generate, sweep_trace_csv, Edit, EditSpec, SweepPoint};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::rng;
use crate::transfer::{learn_direction, DirectionEmbedding, TransferConfig};
use crate::world::{
    make_pairs, read_attributes, Attribute, AttributeEstimate, GroundTruthDirection,
    WorldConfig,
};

/// Builds the evaluation thread pool, honoring `DIRFORGE_THREADS`.
pub fn eval_pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("DIRFORGE_THREADS") {
        match v.parse::<usize>() {
            Ok(n) if n >= 1 => builder = builder.num_threads(n),
            _ => {
                return Err(Error::BadConfig {
                    field: "DIRFORGE_THREADS".into(),
                    reason: format!("expected a positive integer, got {v:?}"),
                })
            }
        }
    }
    builder.build().map_err(|e| Error::BadConfig {
        field: "DIRFORGE_THREADS".into(),
        reason: e.to_string(),
    })
}

/// How to pick the edit strength for each direction under test.
#[derive(Debug, Clone, Copy)]
pub enum StrengthPolicy {
    /// Each direction's stored recommended strength.
    Recommended,
    /// One shared strength for every direction (0.0 is a strict no-op).
    Fixed(f64),
    /// Each stored recommendation times this factor.
    Scaled(f64),
}

impl StrengthPolicy {
    fn strength_for(self, dir: &DirectionEmbedding) -> f64 {
        match self {
            StrengthPolicy::Recommended => dir.recommended_lambda_e,
            StrengthPolicy::Fixed(v) => v,
            StrengthPolicy::Scaled(f) => f * dir.recommended_lambda_e,
        }
    }
}

/// The seed for evaluation frame `j`; shared by the unedited baseline
/// and every edited variant so only the edit differs.
pub fn frame_seed(seed: u64, j: usize) -> u64 {
    rng::stream(seed, "eval/frames", j as u64).next_u64()
}

/// One generated frame with its oracle read-back.
type Frame = (Tensor, AttributeEstimate);

/// Frames 0..m under one edit spec, index-ordered regardless of the
/// thread count.
fn frames_for_spec(
    world: &WorldConfig,
    den: &Denoiser,
    spec: &EditSpec,
    m: usize,
    seed: u64,
) -> Result<Vec<Frame>> {
    eval_pool()?.install(|| {
        (0..m)
            .into_par_iter()
            .map(|j| {
                let img = edit_generate(den, spec, frame_seed(seed, j))?;
                let est = read_attributes(world, &img);
                Ok((img, est))
            })
            .collect()
    })
}

/// Unedited baseline frames, one per evaluation index.
fn base_frames(world: &WorldConfig, den: &Denoiser, m: usize, seed: u64) -> Result<Vec<Frame>> {
    frames_for_spec(world, den, &EditSpec::unedited(None, 1.0), m, seed)
}

/// The same frames re-generated with one direction applied.
fn edited_frames(
    world: &WorldConfig,
    den: &Denoiser,
    dir: &DirectionEmbedding,
    strength: f64,
    window: (f64, f64),
    m: usize,
    seed: u64,
) -> Result<Vec<Frame>> {
    let spec = EditSpec::new(vec![Edit::new(dir.clone(), strength, window)], None, 1.0)?;
    frames_for_spec(world, den, &spec, m, seed)
}

/// Edited-direction rows by measured-attribute columns, entries in
/// span-normalized units (shift divided by the attribute's world range).
/// Columns are always the full registry target set, so a single-row
/// matrix still exposes every cross-talk term.
#[derive(Debug, Clone, Serialize)]
pub struct RescoringMatrix {
    /// Row labels: the edited directions.
    pub directions: Vec<String>,
    /// Column labels: the registry target attributes, registry order.
    pub attributes: Vec<Attribute>,
    /// entries[row][col], mean over the frames both oracle reads trust.
    pub entries: Vec<Vec<f64>>,
    /// Per row: the column holding that direction's own target.
    pub targets: Vec<usize>,
    /// Per row: frames dropped because a blob was undetectable.
    pub skipped: Vec<usize>,
    pub m: usize,
    /// True when some row dropped more than 20% of its frames.
    pub flagged: bool,
    pub seed: u64,
    pub config_hash: String,
    pub crate_version: String,
}

impl RescoringMatrix {
    /// The row's shift on its own target attribute.
    pub fn diagonal(&self, row: usize) -> f64 {
        self.entries[row][self.targets[row]]
    }

    /// Mean absolute entry of one row over the non-target columns.
    pub fn off_target_mean(&self, row: usize) -> f64 {
        let t = self.targets[row];
        let others: Vec<f64> = self.entries[row]
            .iter()
            .enumerate()
            .filter(|(k, _)| *k != t)
            .map(|(_, v)| v.abs())
            .collect();
        others.iter().sum::<f64>() / others.len() as f64
    }

    /// Whether the row's target entry is positive and strictly the
    /// largest entry in absolute value.
    pub fn diagonally_dominant(&self, row: usize) -> bool {
        let t = self.targets[row];
        let diag = self.entries[row][t];
        diag > 0.0
            && self.entries[row]
                .iter()
                .enumerate()
                .all(|(k, v)| k == t || v.abs() < diag.abs())
    }

    /// CSV with one row per direction and a stable column order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("direction");
        for a in &self.attributes {
            out.push(',');
            out.push_str(a.name());
        }
        out.push_str(",skipped,m,config_hash\n");
        for (i, name) in self.directions.iter().enumerate() {
            out.push_str(name);
            for v in &self.entries[i] {
                out.push_str(&format!(",{v}"));
            }
            out.push_str(&format!(",{},{},{}\n", self.skipped[i], self.m, self.config_hash));
        }
        out
    }
}

/// Scores each direction on M generated frames: frame j is sampled
/// unedited, re-sampled with the direction applied over its stored
/// window at the policy strength, and both frames go through the oracle.
/// Entries average the span-normalized attribute shifts over the frames
/// where both reads detected a blob; rows that drop more than 20% of
/// frames set the `flagged` bit. Direction names must be registered so
/// each row knows its target attribute.
pub fn rescoring(
    world: &WorldConfig,
    den: &Denoiser,
    directions: &[DirectionEmbedding],
    m: usize,
    policy: StrengthPolicy,
    seed: u64,
    config_hash: &str,
) -> Result<RescoringMatrix> {
    if m == 0 || directions.is_empty() {
        return Err(Error::BadConfig {
            field: if m == 0 { "m" } else { "directions" }.into(),
            reason: "rescoring needs at least one frame and one direction".into(),
        });
    }
    let attributes: Vec<Attribute> = crate::world::registry()
        .iter()
        .map(|d| d.target_attribute())
        .collect();
    let targets: Vec<usize> = directions
        .iter()
        .map(|d| {
            let target = crate::world::lookup_direction(&d.name)?.target_attribute();
            Ok(attributes.iter().position(|a| *a == target).expect("registry target"))
        })
        .collect::<Result<_>>()?;

    let bases = base_frames(world, den, m, seed)?;
    let mut entries = Vec::with_capacity(directions.len());
    let mut skipped = Vec::with_capacity(directions.len());
    for dir in directions {
        let strength = policy.strength_for(dir);
        let window = (dir.recommended_window[0], dir.recommended_window[1]);
        let edits = edited_frames(world, den, dir, strength, window, m, seed)?;
        let mut row = vec![0.0; attributes.len()];
        let mut used = 0usize;
        for ((_, base), (_, edit)) in bases.iter().zip(&edits) {
            if base.confidence == 0.0 || edit.confidence == 0.0 {
                continue;
            }
            used += 1;
            for (k, attr) in attributes.iter().enumerate() {
                row[k] += (edit.style.get(*attr) - base.style.get(*attr)) / attr.span();
            }
        }
        if used > 0 {
            for v in &mut row {
                *v /= used as f64;
            }
        }
        entries.push(row);
        skipped.push(m - used);
    }
    let flagged = skipped.iter().any(|&s| s as f64 > 0.2 * m as f64);
    Ok(RescoringMatrix {
        directions: directions.iter().map(|d| d.name.clone()).collect(),
        attributes,
        entries,
        targets,
        skipped,
        m,
        flagged,
        seed,
        config_hash: config_hash.into(),
        crate_version: env!("CARGO_PKG_VERSION").into(),
    })
}

/// Mean distances between paired frame sets.
#[derive(Debug, Clone, Serialize)]
pub struct DistanceReport {
    /// Mean of per-pair pixel L2 norms.
    pub pixel_l2: f64,
    /// Mean of per-pair L2 norms between raw (pre-normalization)
    /// encoder embeddings, the scale-carrying perceptual stand-in.
    pub embedding_l2: f64,
    pub n: usize,
    pub config_hash: String,
    pub crate_version: String,
}

/// A distance report labeled with the edit it measures.
#[derive(Debug, Clone, Serialize)]
pub struct NamedDistances {
    pub name: String,
    #[serde(flatten)]
    pub report: DistanceReport,
}

fn l2_between(a: &Tensor, b: &Tensor) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt())
}

/// Mean pixel and embedding distances over paired before/after frames.
/// Identical sets score exactly zero on both.
pub fn distance_report(
    enc: &Encoder,
    before: &[Tensor],
    after: &[Tensor],
    config_hash: &str,
) -> Result<DistanceReport> {
    if before.len() != after.len() {
        return Err(Error::PairedSets { before: before.len(), after: after.len() });
    }
    if before.is_empty() {
        return Err(Error::BadConfig {
            field: "before".into(),
            reason: "distance report needs at least one pair".into(),
        });
    }
    let pairs: Vec<(f64, f64)> = eval_pool()?.install(|| {
        before
            .par_iter()
            .zip(after.par_iter())
            .map(|(b, a)| {
                let pixel = l2_between(b, a)?;
                let embed = l2_between(&enc.embed_raw(b)?, &enc.embed_raw(a)?)?;
                Ok((pixel, embed))
            })
            .collect::<Result<_>>()
    })?;
    let n = pairs.len();
    let (mut pixel, mut embed) = (0.0, 0.0);
    for (p, e) in &pairs {
        pixel += p;
        embed += e;
    }
    Ok(DistanceReport {
        pixel_l2: pixel / n as f64,
        embedding_l2: embed / n as f64,
        n,
        config_hash: config_hash.into(),
        crate_version: env!("CARGO_PKG_VERSION").into(),
    })
}

/// CSV for a set of labeled distance reports, stable column order.
pub fn distances_csv(reports: &[NamedDistances]) -> String {
    let mut out = String::from("name,n,pixel_l2,embedding_l2,config_hash\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            r.name, r.report.n, r.report.pixel_l2, r.report.embedding_l2, r.report.config_hash
        ));
    }
    out
}

/// Everything one edited-direction evaluation produces: oracle shifts
/// on and off the target plus both distances, over M shared frames.
#[derive(Debug, Clone, Serialize)]
pub struct EditEvaluation {
    /// Mean span-normalized shift of the direction's target attribute.
    pub on_target: f64,
    /// Mean absolute span-normalized shift over the five other oracle
    /// attributes.
    pub off_target_mean: f64,
    pub pixel_l2: f64,
    pub embedding_l2: f64,
    /// Frames dropped because a blob was undetectable on either side.
    pub skipped: usize,
    pub m: usize,
}

/// Scores one direction at an explicit strength and window. Unlike the
/// rescoring matrix, off-target here means all five non-target oracle
/// attributes, so a single direction can be scored in isolation.
pub fn evaluate_edit(
    world: &WorldConfig,
    den: &Denoiser,
    enc: &Encoder,
    dir: &DirectionEmbedding,
    strength: f64,
    window: (f64, f64),
    m: usize,
    seed: u64,
    config_hash: &str,
) -> Result<EditEvaluation> {
    let target = crate::world::lookup_direction(&dir.name)?.target_attribute();
    let bases = base_frames(world, den, m, seed)?;
    let edits = edited_frames(world, den, dir, strength, window, m, seed)?;

    let mut on = 0.0;
    let mut off = 0.0;
    let mut used = 0usize;
    for ((_, base), (_, edit)) in bases.iter().zip(&edits) {
        if base.confidence == 0.0 || edit.confidence == 0.0 {
            continue;
        }
        used += 1;
        for attr in Attribute::ALL {
            let shift = (edit.style.get(attr) - base.style.get(attr)) / attr.span();
            if attr == target {
                on += shift;
            } else {
                off += shift.abs();
            }
        }
    }
    if used > 0 {
        on /= used as f64;
        off /= (used * (Attribute::ALL.len() - 1)) as f64;
    }
    let before: Vec<Tensor> = bases.into_iter().map(|(img, _)| img).collect();
    let after: Vec<Tensor> = edits.into_iter().map(|(img, _)| img).collect();
    let dist = distance_report(enc, &before, &after, config_hash)?;
    Ok(EditEvaluation {
        on_target: on,
        off_target_mean: off,
        pixel_l2: dist.pixel_l2,
        embedding_l2: dist.embedding_l2,
        skipped: m - used,
        m,
    })
}

/// How two edits interact when applied in the same reverse pass.
#[derive(Debug, Clone, Serialize)]
pub struct CompositionReport {
    /// The two directions, in argument order.
    pub names: [String; 2],
    /// Signed span-normalized shift on each direction's own target when
    /// it runs alone at its recommended strength and window.
    pub single: [f64; 2],
    /// The same two target shifts when both edits run together.
    pub combined: [f64; 2],
    /// Frames dropped per condition: first alone, second alone, joint.
    pub skipped: [usize; 3],
    pub m: usize,
    pub seed: u64,
    pub config_hash: String,
    pub crate_version: String,
}

impl CompositionReport {
    /// Fraction of the single-edit shift the joint edit keeps, per
    /// direction. 1.0 means perfectly independent effects.
    pub fn retention(&self) -> [f64; 2] {
        let frac = |i: usize| {
            if self.single[i] == 0.0 {
                f64::NAN
            } else {
                self.combined[i] / self.single[i]
            }
        };
        [frac(0), frac(1)]
    }
}

/// Mean signed span-normalized shift of `attr` between paired frame
/// sets, with the count of frames some oracle read rejected.
fn target_shift(bases: &[Frame], edits: &[Frame], attr: Attribute) -> (f64, usize) {
    let mut sum = 0.0;
    let mut used = 0usize;
    for ((_, base), (_, edit)) in bases.iter().zip(edits) {
        if base.confidence == 0.0 || edit.confidence == 0.0 {
            continue;
        }
        used += 1;
        sum += (edit.style.get(attr) - base.style.get(attr)) / attr.span();
    }
    (if used > 0 { sum / used as f64 } else { 0.0 }, bases.len() - used)
}

/// Applies two registered directions separately and then together on
/// the same M frames and reports each one's target shift under both
/// regimes. Strengths and windows come from the stored recommendations.
pub fn composition(
    world: &WorldConfig,
    den: &Denoiser,
    a: &DirectionEmbedding,
    b: &DirectionEmbedding,
    m: usize,
    seed: u64,
    config_hash: &str,
) -> Result<CompositionReport> {
    let target_a = crate::world::lookup_direction(&a.name)?.target_attribute();
    let target_b = crate::world::lookup_direction(&b.name)?.target_attribute();

    let bases = base_frames(world, den, m, seed)?;
    let joint_spec =
        EditSpec::new(vec![Edit::recommended(a), Edit::recommended(b)], None, 1.0)?;

    let solo_a = frames_for_spec(
        world,
        den,
        &EditSpec::new(vec![Edit::recommended(a)], None, 1.0)?,
        m,
        seed,
    )?;
    let solo_b = frames_for_spec(
        world,
        den,
        &EditSpec::new(vec![Edit::recommended(b)], None, 1.0)?,
        m,
        seed,
    )?;
    let joint = frames_for_spec(world, den, &joint_spec, m, seed)?;

    let (single_a, skip_a) = target_shift(&bases, &solo_a, target_a);
    let (single_b, skip_b) = target_shift(&bases, &solo_b, target_b);
    let (joint_a, skip_j) = target_shift(&bases, &joint, target_a);
    let (joint_b, _) = target_shift(&bases, &joint, target_b);

    Ok(CompositionReport {
        names: [a.name.clone(), b.name.clone()],
        single: [single_a, single_b],
        combined: [joint_a, joint_b],
        skipped: [skip_a, skip_b, skip_j],
        m,
        seed,
        config_hash: config_hash.into(),
        crate_version: env!("CARGO_PKG_VERSION").into(),
    })
}

/// The three predefined ablation axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    /// Edit window: full range, low-noise 40%, high-noise 40%.
    Timesteps,
    /// Training pair count: 10 vs 100.
    Samples,
    /// Loss terms: both, without the latent term, without the semantic
    /// term.
    LossTerms,
}

impl AblationAxis {
    pub fn name(self) -> &'static str {
        match self {
            AblationAxis::Timesteps => "timesteps",
            AblationAxis::Samples => "samples",
            AblationAxis::LossTerms => "loss_terms",
        }
    }

    pub fn from_name(name: &str) -> Result<AblationAxis> {
        match name {
            "timesteps" => Ok(AblationAxis::Timesteps),
            "samples" => Ok(AblationAxis::Samples),
            "loss_terms" => Ok(AblationAxis::LossTerms),
            _ => Err(Error::BadConfig {
                field: "axis".into(),
                reason: format!(
                    "unknown axis {name:?}; expected timesteps, samples, or loss_terms"
                ),
            }),
        }
    }
}

/// One evaluated grid cell. The trained direction rides along (but
/// stays out of the serialized report) so callers can persist it.
#[derive(Debug, Clone, Serialize)]
pub struct AblationCell {
    pub label: String,
    /// Window the edit ran under.
    pub window: (f64, f64),
    pub strength: f64,
    /// Pairs the cell's direction was trained on.
    pub n_pairs: usize,
    pub w_sem: f64,
    pub w_latent: f64,
    #[serde(flatten)]
    pub eval: EditEvaluation,
    #[serde(skip)]
    pub direction: DirectionEmbedding,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub axis: String,
    /// The ground-truth direction the grid varies around.
    pub direction: String,
    pub cells: Vec<AblationCell>,
    pub m: usize,
    pub seed: u64,
    pub config_hash: String,
    pub crate_version: String,
}

impl AblationReport {
    pub fn cell(&self, label: &str) -> Option<&AblationCell> {
        self.cells.iter().find(|c| c.label == label)
    }

    /// CSV with one row per cell, stable column order.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "label,window_lo,window_hi,strength,n_pairs,w_sem,w_latent,on_target,off_target_mean,pixel_l2,embedding_l2,skipped,m,config_hash\n",
        );
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
                c.label,
                c.window.0,
                c.window.1,
                c.strength,
                c.n_pairs,
                c.w_sem,
                c.w_latent,
                c.eval.on_target,
                c.eval.off_target_mean,
                c.eval.pixel_l2,
                c.eval.embedding_l2,
                c.eval.skipped,
                c.eval.m,
                self.config_hash
            ));
        }
        out
    }
}

/// Runs one predefined ablation grid around a registered direction.
///
/// The timesteps axis trains a single direction and re-evaluates it
/// under three windows; the samples and loss-terms axes retrain the
/// direction per cell. `on_cell` fires after each cell so callers can
/// persist partial results before a later cell can fail.
#[allow(clippy::too_many_arguments)]
pub fn ablate(
    world: &WorldConfig,
    den: &Denoiser,
    enc: &Encoder,
    source: &GroundTruthDirection,
    base_cfg: &TransferConfig,
    axis: AblationAxis,
    m: usize,
    world_seed: u64,
    seed: u64,
    config_hash: &str,
    mut on_cell: impl FnMut(&AblationCell) -> Result<()>,
) -> Result<AblationReport> {
    let mut cells = Vec::new();
    let mut push = |cell: AblationCell, cells: &mut Vec<AblationCell>| -> Result<()> {
        on_cell(&cell)?;
        cells.push(cell);
        Ok(())
    };

    match axis {
        AblationAxis::Timesteps => {
            let pairs = make_pairs(world, world_seed, base_cfg.n_pairs, source);
            let (dir, _) = learn_direction(&pairs, den, enc, base_cfg, config_hash)?;
            let strength = dir.recommended_lambda_e;
            for (label, window) in [
                ("window_full", (0.0, 1.0)),
                ("window_low", (0.0, 0.4)),
                ("window_high", (0.6, 1.0)),
            ] {
                let eval =
                    evaluate_edit(world, den, enc, &dir, strength, window, m, seed, config_hash)?;
                push(
                    AblationCell {
                        label: label.into(),
                        window,
                        strength,
                        n_pairs: base_cfg.n_pairs,
                        w_sem: base_cfg.w_sem,
                        w_latent: base_cfg.w_latent,
                        eval,
                        direction: dir.clone(),
                    },
                    &mut cells,
                )?;
            }
        }
        AblationAxis::Samples => {
            for n in [10usize, 100] {
                let pairs = make_pairs(world, world_seed, n, source);
                let cfg = TransferConfig { n_pairs: n, ..base_cfg.clone() };
                let (dir, _) = learn_direction(&pairs, den, enc, &cfg, config_hash)?;
                let strength = dir.recommended_lambda_e;
                let window = (dir.recommended_window[0], dir.recommended_window[1]);
                let eval =
                    evaluate_edit(world, den, enc, &dir, strength, window, m, seed, config_hash)?;
                push(
                    AblationCell {
                        label: format!("n{n}"),
                        window,
                        strength,
                        n_pairs: n,
                        w_sem: cfg.w_sem,
                        w_latent: cfg.w_latent,
                        eval,
                        direction: dir,
                    },
                    &mut cells,
                )?;
            }
        }
        AblationAxis::LossTerms => {
            let pairs = make_pairs(world, world_seed, base_cfg.n_pairs, source);
            for (label, w_sem, w_latent) in [
                ("full", base_cfg.w_sem, base_cfg.w_latent),
                ("no_latent", base_cfg.w_sem, 0.0),
                ("no_sem", 0.0, base_cfg.w_latent),
            ] {
                let cfg = TransferConfig { w_sem, w_latent, ..base_cfg.clone() };
                let (dir, _) = learn_direction(&pairs, den, enc, &cfg, config_hash)?;
                let strength = dir.recommended_lambda_e;
                let window = (dir.recommended_window[0], dir.recommended_window[1]);
                let eval =
                    evaluate_edit(world, den, enc, &dir, strength, window, m, seed, config_hash)?;
                push(
                    AblationCell {
                        label: label.into(),
                        window,
                        strength,
                        n_pairs: base_cfg.n_pairs,
                        w_sem,
                        w_latent,
                        eval,
                        direction: dir,
                    },
                    &mut cells,
                )?;
            }
        }
    }

    Ok(AblationReport {
        axis: axis.name().into(),
        direction: source.name.clone(),
        cells,
        m,
        seed,
        config_hash: config_hash.into(),
        crate_version: env!("CARGO_PKG_VERSION").into(),
    })
}

// ---- charts ----------------------------------------------------------

/// Maps a value to a diverging fill: red for positive, blue for
/// negative, paler as the magnitude shrinks relative to `vmax`.
fn diverging_fill(v: f64, vmax: f64) -> String {
    let s = if vmax > 0.0 {
        (200.0 * (v.abs() / vmax).min(1.0)).round() as u8
    } else {
        0
    };
    if v >= 0.0 {
        format!("rgb(255,{},{})", 255 - s, 255 - s)
    } else {
        format!("rgb({},{},255)", 255 - s, 255 - s)
    }
}

fn svg_header(width: usize, height: usize, config_hash: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" \
         viewBox=\"0 0 {width} {height}\" font-family=\"monospace\" font-size=\"12\">\n\
         <!-- config {config_hash} v{} -->\n\
         <rect width=\"{width}\" height=\"{height}\" fill=\"white\"/>\n",
        env!("CARGO_PKG_VERSION")
    )
}

/// Renders the matrix as a labeled heatmap. Same matrix, same bytes.
pub fn rescoring_heatmap_svg(mat: &RescoringMatrix) -> String {
    const CELL_W: usize = 92;
    const CELL_H: usize = 40;
    const LEFT: usize = 110;
    const TOP: usize = 56;
    let width = LEFT + CELL_W * mat.attributes.len() + 10;
    let height = TOP + CELL_H * mat.directions.len() + 34;
    let vmax = mat
        .entries
        .iter()
        .flatten()
        .fold(0.0f64, |acc, v| acc.max(v.abs()));

    let mut out = svg_header(width, height, &mat.config_hash);
    out.push_str(&format!(
        "<text x=\"{LEFT}\" y=\"20\" font-size=\"13\">mean span-normalized shift, m={} seed={}</text>\n",
        mat.m, mat.seed
    ));
    for (k, attr) in mat.attributes.iter().enumerate() {
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
            LEFT + k * CELL_W + CELL_W / 2,
            TOP - 8,
            attr.name()
        ));
    }
    for (i, name) in mat.directions.iter().enumerate() {
        let y = TOP + i * CELL_H;
        out.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" text-anchor=\"end\">{}</text>\n",
            LEFT - 8,
            y + CELL_H / 2 + 4,
            name
        ));
        for (k, v) in mat.entries[i].iter().enumerate() {
            let x = LEFT + k * CELL_W;
            out.push_str(&format!(
                "<rect x=\"{x}\" y=\"{y}\" width=\"{CELL_W}\" height=\"{CELL_H}\" \
                 fill=\"{}\" stroke=\"#444\"/>\n",
                diverging_fill(*v, vmax)
            ));
            out.push_str(&format!(
                "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{:.4}</text>\n",
                x + CELL_W / 2,
                y + CELL_H / 2 + 4,
                v
            ));
        }
    }
    out.push_str(&format!(
        "<text x=\"{LEFT}\" y=\"{}\" font-size=\"11\">rows: edited direction; columns: measured attribute</text>\n",
        height - 12
    ));
    out.push_str("</svg>\n");
    out
}

/// Grouped bars per ablation cell: attribute shifts on one panel,
/// distances on another (they live on different scales).
pub fn ablation_bars_svg(rep: &AblationReport) -> String {
    const GROUP_W: usize = 150;
    const PANEL_H: usize = 170;
    const LEFT: usize = 30;
    let width = LEFT + GROUP_W * rep.cells.len() + 20;
    let height = 2 * PANEL_H + 90;
    let mut out = svg_header(width, height, &rep.config_hash);
    out.push_str(&format!(
        "<text x=\"{LEFT}\" y=\"20\" font-size=\"13\">ablation axis: {} (direction {})</text>\n",
        rep.axis, rep.direction
    ));

    let panels: [(&str, usize, Vec<(f64, f64)>); 2] = [
        (
            "on-target vs mean |off-target| shift",
            40,
            rep.cells.iter().map(|c| (c.eval.on_target, c.eval.off_target_mean)).collect(),
        ),
        (
            "pixel L2 vs embedding L2",
            40 + PANEL_H + 20,
            rep.cells.iter().map(|c| (c.eval.pixel_l2, c.eval.embedding_l2)).collect(),
        ),
    ];
    for (title, top, values) in panels {
        let vmax = values
            .iter()
            .flat_map(|(a, b)| [a.abs(), b.abs()])
            .fold(1e-12f64, f64::max);
        let base_y = top + PANEL_H - 30;
        out.push_str(&format!("<text x=\"{LEFT}\" y=\"{}\">{title}</text>\n", top + 12));
        for (i, (a, b)) in values.iter().enumerate() {
            let x0 = LEFT + i * GROUP_W;
            for (slot, (v, fill)) in [(*a, "#2a7"), (*b, "#d73")].iter().enumerate() {
                let h = ((v.abs() / vmax) * 100.0).round() as usize;
                let x = x0 + 18 + slot * 48;
                out.push_str(&format!(
                    "<rect x=\"{x}\" y=\"{}\" width=\"36\" height=\"{h}\" fill=\"{fill}\"/>\n",
                    base_y - h
                ));
                out.push_str(&format!(
                    "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-size=\"10\">{:.3}</text>\n",
                    x + 18,
                    base_y - h - 4,
                    v
                ));
            }
            out.push_str(&format!(
                "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{}</text>\n",
                x0 + GROUP_W / 2,
                base_y + 16,
                rep.cells[i].label
            ));
        }
    }
    out.push_str("</svg>\n");
    out
}

/// Strength-sweep line chart for one oracle attribute.
pub fn sweep_line_svg(points: &[SweepPoint], attr: Attribute, config_hash: &str) -> String {
    const W: usize = 480;
    const H: usize = 300;
    const PAD: usize = 50;
    let mut out = svg_header(W, H, config_hash);
    out.push_str(&format!(
        "<text x=\"{PAD}\" y=\"20\" font-size=\"13\">{} vs edit strength</text>\n",
        attr.name()
    ));
    if points.len() > 1 {
        let xs: Vec<f64> = points.iter().map(|p| p.lambda).collect();
        let ys: Vec<f64> = points.iter().map(|p| p.estimate.style.get(attr)).collect();
        let (x_lo, x_hi) = (xs.iter().cloned().fold(f64::MAX, f64::min), xs.iter().cloned().fold(f64::MIN, f64::max));
        let (y_lo, y_hi) = (ys.iter().cloned().fold(f64::MAX, f64::min), ys.iter().cloned().fold(f64::MIN, f64::max));
        let x_span = (x_hi - x_lo).max(1e-12);
        let y_span = (y_hi - y_lo).max(1e-12);
        let px = |x: f64| PAD as f64 + (x - x_lo) / x_span * (W - 2 * PAD) as f64;
        let py = |y: f64| (H - PAD) as f64 - (y - y_lo) / y_span * (H - 2 * PAD) as f64;
        let path: Vec<String> =
            xs.iter().zip(&ys).map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y))).collect();
        out.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"#27c\" stroke-width=\"2\"/>\n",
            path.join(" ")
        ));
        for (x, y) in xs.iter().zip(&ys) {
            out.push_str(&format!(
                "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"#27c\"/>\n",
                px(*x),
                py(*y)
            ));
            out.push_str(&format!(
                "<text x=\"{:.2}\" y=\"{}\" text-anchor=\"middle\" font-size=\"10\">{}</text>\n",
                px(*x),
                H - PAD + 16,
                x
            ));
        }
        out.push_str(&format!(
            "<text x=\"10\" y=\"{}\" font-size=\"10\">{:.4}</text>\n",
            py(y_lo) as usize,
            y_lo
        ));
        out.push_str(&format!(
            "<text x=\"10\" y=\"{}\" font-size=\"10\">{:.4}</text>\n",
            py(y_hi) as usize + 10,
            y_hi
        ));
    }
    out.push_str("</svg>\n");
    out
}

// ---- report emission -------------------------------------------------

/// A strength sweep ready to chart under a stable file stem.
#[derive(Debug, Clone)]
pub struct NamedSweep {
    /// File stem, e.g. `interp_radius`.
    pub name: String,
    /// The attribute the SVG traces over strength.
    pub attribute: Attribute,
    pub config_hash: String,
    pub points: Vec<SweepPoint>,
}

/// CSV over composition reports, one row per report.
pub fn compositions_csv(reps: &[CompositionReport]) -> String {
    let mut out = String::from(
        "first,second,single_first,single_second,combined_first,combined_second,m,config_hash\n",
    );
    for r in reps {
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.names[0],
            r.names[1],
            r.single[0],
            r.single[1],
            r.combined[0],
            r.combined[1],
            r.m,
            r.config_hash
        ));
    }
    out
}

/// Everything `emit_report` can lay out on disk.
#[derive(Debug, Clone, Default, Serialize)]
pub struct ReportSet {
    pub rescoring: Vec<RescoringMatrix>,
    pub distances: Vec<NamedDistances>,
    pub ablations: Vec<AblationReport>,
    pub compositions: Vec<CompositionReport>,
    /// Sweeps hold raw frames, so they chart to CSV + SVG but stay out
    /// of the JSON.
    #[serde(skip)]
    pub sweeps: Vec<NamedSweep>,
}

fn write_file(dir: &Path, name: &str, bytes: &[u8], files: &mut Vec<String>) -> Result<()> {
    std::fs::write(dir.join(name), bytes).map_err(|e| Error::io(format!("writing {name}"), e))?;
    files.push(name.to_string());
    Ok(())
}

/// Writes CSV + JSON (+ SVG where a chart exists) for every report,
/// plus an `index.json` naming them all. Returns the written paths.
/// Same inputs produce byte-identical files.
pub fn emit_report(set: &ReportSet, outdir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(outdir)
        .map_err(|e| Error::io(format!("creating {}", outdir.display()), e))?;
    let mut files = Vec::new();

    for (i, mat) in set.rescoring.iter().enumerate() {
        let stem = format!("rescoring_{i}");
        write_file(outdir, &format!("{stem}.csv"), mat.to_csv().as_bytes(), &mut files)?;
        let json = serde_json::to_string_pretty(mat)
            .map_err(|e| Error::json("serializing rescoring report", e))?;
        write_file(outdir, &format!("{stem}.json"), json.as_bytes(), &mut files)?;
        write_file(
            outdir,
            &format!("{stem}.svg"),
            rescoring_heatmap_svg(mat).as_bytes(),
            &mut files,
        )?;
    }
    if !set.distances.is_empty() {
        write_file(outdir, "distances.csv", distances_csv(&set.distances).as_bytes(), &mut files)?;
        let json = serde_json::to_string_pretty(&set.distances)
            .map_err(|e| Error::json("serializing distance reports", e))?;
        write_file(outdir, "distances.json", json.as_bytes(), &mut files)?;
    }
    for rep in &set.ablations {
        let stem = format!("ablation_{}", rep.axis);
        write_file(outdir, &format!("{stem}.csv"), rep.to_csv().as_bytes(), &mut files)?;
        let json = serde_json::to_string_pretty(rep)
            .map_err(|e| Error::json("serializing ablation report", e))?;
        write_file(outdir, &format!("{stem}.json"), json.as_bytes(), &mut files)?;
        write_file(outdir, &format!("{stem}.svg"), ablation_bars_svg(rep).as_bytes(), &mut files)?;
    }
    if !set.compositions.is_empty() {
        write_file(
            outdir,
            "composition.csv",
            compositions_csv(&set.compositions).as_bytes(),
            &mut files,
        )?;
        let json = if set.compositions.len() == 1 {
            serde_json::to_string_pretty(&set.compositions[0])
        } else {
            serde_json::to_string_pretty(&set.compositions)
        }
        .map_err(|e| Error::json("serializing composition reports", e))?;
        write_file(outdir, "composition.json", json.as_bytes(), &mut files)?;
    }
    for sweep in &set.sweeps {
        write_file(
            outdir,
            &format!("{}.csv", sweep.name),
            sweep_trace_csv(&sweep.points).as_bytes(),
            &mut files,
        )?;
        write_file(
            outdir,
            &format!("{}.svg", sweep.name),
            sweep_line_svg(&sweep.points, sweep.attribute, &sweep.config_hash).as_bytes(),
            &mut files,
        )?;
    }

    let index = serde_json::json!({ "files": files });
    let index_bytes = serde_json::to_string_pretty(&index)
        .map_err(|e| Error::json("serializing report index", e))?;
    std::fs::write(outdir.join("index.json"), index_bytes)
        .map_err(|e| Error::io("writing index.json", e))?;
    files.push("index.json".into());
    Ok(files.into_iter().map(|f| outdir.join(f)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::NoiseSchedule;
    use crate::encoder::EMBED_DIM;

    const PIXELS: usize = 16;

    fn tiny_world() -> WorldConfig {
        WorldConfig { img_size: 4, ..WorldConfig::default() }
    }

    /// A frozen five-step denoiser with nonzero outputs, conditioned on
    /// vectors of the real embedding width so registry directions fit.
    fn tiny_denoiser(seed: u64) -> Denoiser {
        let schedule = NoiseSchedule::linear(5, 0.1, 0.5).unwrap();
        let mut den = Denoiser::init(schedule, PIXELS, EMBED_DIM, &[8], seed);
        let mut r = rng::stream(seed, "test/unzero", 1);
        let n = den.net.param_names().len();
        for (i, p) in den.net.params_mut().into_iter().enumerate() {
            if i >= n - 2 {
                let fresh = rng::normal_vec(&mut r, p.numel());
                *p = Tensor::from_vec(p.shape(), fresh.iter().map(|v| 0.2 * v).collect())
                    .unwrap();
            }
        }
        den.skip_gain = Tensor::from_vec(&[1], vec![0.6]).unwrap();
        den.set_requires_grad(false);
        den
    }

    fn tiny_encoder(seed: u64) -> Encoder {
        let mut enc = Encoder::init(&tiny_world(), seed);
        enc.net.set_requires_grad(false);
        enc
    }

    fn test_direction(name: &str, seed: u64) -> DirectionEmbedding {
        let raw = rng::normal_vec(&mut rng::stream(seed, "test/dir", 0), EMBED_DIM);
        let norm = raw.iter().map(|v| v * v).sum::<f64>().sqrt();
        DirectionEmbedding {
            name: name.into(),
            d: Tensor::from_vec(&[EMBED_DIM], raw.iter().map(|v| v / norm).collect()).unwrap(),
            recommended_lambda_e: 1.0,
            recommended_window: [0.0, 0.4],
            provenance: crate::transfer::Provenance {
                world_seed: 0,
                seed,
                n_pairs: 0,
                iterations: 0,
                lr: 0.0,
                batch: 0,
                w_sem: 1.0,
                w_latent: 1.0,
                config_hash: "test".into(),
                raw_norm: norm,
                norm_ceiling_hit: false,
                completed_iterations: 0,
                crate_version: "test".into(),
            },
        }
    }

    #[test]
    fn zero_strength_rescoring_is_exactly_zero() {
        let world = tiny_world();
        let den = tiny_denoiser(3);
        let dirs = vec![test_direction("radius", 5), test_direction("intensity", 6)];
        let mat =
            rescoring(&world, &den, &dirs, 3, StrengthPolicy::Fixed(0.0), 0, "cafe").unwrap();
        assert_eq!(mat.entries.len(), 2);
        for row in &mat.entries {
            assert_eq!(row.len(), 4, "columns are the full registry target set");
            for v in row {
                assert_eq!(*v, 0.0);
            }
        }
        assert_eq!(
            mat.attributes,
            vec![
                Attribute::Radius,
                Attribute::Intensity,
                Attribute::Aspect,
                Attribute::CenterX
            ]
        );
        assert_eq!(mat.targets, vec![0, 1], "each row knows its own column");
        assert_eq!(mat.m, 3);
    }

    #[test]
    fn rescoring_requires_registered_names() {
        let world = tiny_world();
        let den = tiny_denoiser(3);
        let dirs = vec![test_direction("sideways", 5)];
        let err =
            rescoring(&world, &den, &dirs, 2, StrengthPolicy::Recommended, 0, "cafe").unwrap_err();
        assert!(matches!(err, Error::UnknownDirection { .. }));
    }

    #[test]
    fn dominance_reads_the_diagonal_strictly() {
        let base = rescoring(
            &tiny_world(),
            &tiny_denoiser(3),
            &[test_direction("radius", 5)],
            1,
            StrengthPolicy::Fixed(0.0),
            0,
            "cafe",
        )
        .unwrap();
        let mut mat = base;
        mat.directions = vec!["radius".into(), "intensity".into()];
        mat.attributes = vec![Attribute::Radius, Attribute::Intensity];
        mat.targets = vec![0, 1];
        mat.skipped = vec![0, 0];
        mat.entries = vec![vec![0.5, -0.2], vec![0.3, -0.4]];
        assert!(mat.diagonally_dominant(0));
        assert!(!mat.diagonally_dominant(1), "negative diagonal fails");
        assert!((mat.off_target_mean(0) - 0.2).abs() < 1e-15);
        mat.entries[0][1] = -0.5;
        assert!(!mat.diagonally_dominant(0), "tie is not strict dominance");

        // A single row still sees every cross-talk column; the target
        // need not sit at index == row.
        mat.directions = vec!["intensity".into()];
        mat.attributes =
            vec![Attribute::Radius, Attribute::Intensity, Attribute::Aspect, Attribute::CenterX];
        mat.targets = vec![1];
        mat.skipped = vec![0];
        mat.entries = vec![vec![0.1, 0.6, -0.2, 0.0]];
        assert!(mat.diagonally_dominant(0));
        assert_eq!(mat.diagonal(0), 0.6);
        assert!((mat.off_target_mean(0) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn composition_of_inert_edits_changes_nothing() {
        let world = tiny_world();
        let den = tiny_denoiser(3);
        let mut a = test_direction("radius", 5);
        let mut b = test_direction("intensity", 6);
        a.recommended_lambda_e = 0.0;
        b.recommended_lambda_e = 0.0;
        let rep = composition(&world, &den, &a, &b, 3, 0, "cafe").unwrap();
        assert_eq!(rep.names, ["radius".to_string(), "intensity".to_string()]);
        assert_eq!(rep.single, [0.0, 0.0]);
        assert_eq!(rep.combined, [0.0, 0.0]);
        assert_eq!(rep.m, 3);
        assert!(rep.retention()[0].is_nan(), "zero single shift has no retention ratio");
    }

    #[test]
    fn composition_is_deterministic_and_detects_real_edits() {
        let world = tiny_world();
        let den = tiny_denoiser(3);
        let a = test_direction("radius", 5);
        let b = test_direction("intensity", 6);
        let r1 = composition(&world, &den, &a, &b, 3, 9, "cafe").unwrap();
        let r2 = composition(&world, &den, &a, &b, 3, 9, "cafe").unwrap();
        assert_eq!(r1.single, r2.single);
        assert_eq!(r1.combined, r2.combined);
        // Untrained directions still perturb the frames somehow.
        assert!(r1.single.iter().any(|v| *v != 0.0) || r1.combined.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn identical_sets_have_zero_distance() {
        let world = tiny_world();
        let enc = tiny_encoder(1);
        let frames: Vec<Tensor> = crate::world::sample_styles(7, 3)
            .iter()
            .map(|s| crate::world::render(&world, s).image)
            .collect();
        let rep = distance_report(&enc, &frames, &frames, "cafe").unwrap();
        assert_eq!(rep.pixel_l2, 0.0);
        assert_eq!(rep.embedding_l2, 0.0);
        assert_eq!(rep.n, 3);
    }

    #[test]
    fn pixel_distance_matches_a_hand_computation() {
        let enc = tiny_encoder(1);
        let a = Tensor::zeros(&[PIXELS]);
        let b = Tensor::from_vec(&[PIXELS], vec![0.5; PIXELS]).unwrap();
        // sqrt(16 * 0.25) = 2 exactly.
        let rep = distance_report(&enc, &[a], &[b], "cafe").unwrap();
        assert_eq!(rep.pixel_l2, 2.0);
        assert!(rep.embedding_l2 > 0.0);
    }

    #[test]
    fn mismatched_set_lengths_are_rejected() {
        let enc = tiny_encoder(1);
        let a = Tensor::zeros(&[PIXELS]);
        let err = distance_report(&enc, &[a.clone(), a.clone()], &[a], "cafe").unwrap_err();
        assert!(matches!(err, Error::PairedSets { before: 2, after: 1 }));
    }

    #[test]
    fn distance_rows_serialize_with_stable_columns() {
        let rep = DistanceReport {
            pixel_l2: 1.25,
            embedding_l2: 0.5,
            n: 4,
            config_hash: "cafe".into(),
            crate_version: "test".into(),
        };
        let csv = distances_csv(&[NamedDistances { name: "radius".into(), report: rep }]);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "name,n,pixel_l2,embedding_l2,config_hash");
        assert_eq!(lines[1], "radius,4,1.25,0.5,cafe");
    }

    #[test]
    fn edit_evaluation_stays_finite_on_an_untrained_model() {
        let world = tiny_world();
        let den = tiny_denoiser(3);
        let enc = tiny_encoder(1);
        let dir = test_direction("radius", 5);
        let eval =
            evaluate_edit(&world, &den, &enc, &dir, 1.0, (0.0, 1.0), 2, 0, "cafe").unwrap();
        assert!(eval.on_target.is_finite());
        assert!(eval.off_target_mean.is_finite());
        assert!(eval.pixel_l2 >= 0.0 && eval.pixel_l2.is_finite());
        assert!(eval.embedding_l2 >= 0.0 && eval.embedding_l2.is_finite());
        assert!(eval.skipped <= 2);
        assert_eq!(eval.m, 2);
    }

    #[test]
    fn ablation_grids_have_the_documented_cells() {
        let world = tiny_world();
        let den = tiny_denoiser(3);
        let enc = tiny_encoder(1);
        let source = crate::world::lookup_direction("radius").unwrap();
        let cfg = TransferConfig { n_pairs: 4, batch: 2, iterations: 2, ..Default::default() };

        let mut seen = Vec::new();
        let rep = ablate(
            &world,
            &den,
            &enc,
            &source,
            &cfg,
            AblationAxis::Timesteps,
            2,
            0,
            0,
            "cafe",
            |cell| {
                seen.push(cell.label.clone());
                Ok(())
            },
        )
        .unwrap();
        assert_eq!(seen, vec!["window_full", "window_low", "window_high"]);
        assert_eq!(rep.cell("window_low").unwrap().window, (0.0, 0.4));
        assert_eq!(rep.axis, "timesteps");

        let rep = ablate(
            &world,
            &den,
            &enc,
            &source,
            &cfg,
            AblationAxis::Samples,
            2,
            0,
            0,
            "cafe",
            |_| Ok(()),
        )
        .unwrap();
        let labels: Vec<&str> = rep.cells.iter().map(|c| c.label.as_str()).collect();
        assert_eq!(labels, vec!["n10", "n100"]);
        assert_eq!(rep.cell("n10").unwrap().n_pairs, 10);

        let rep = ablate(
            &world,
            &den,
            &enc,
            &source,
            &cfg,
            AblationAxis::LossTerms,
            2,
            0,
            0,
            "cafe",
            |_| Ok(()),
        )
        .unwrap();
        let labels: Vec<&str> = rep.cells.iter().map(|c| c.label.as_str()).collect();
        assert_eq!(labels, vec!["full", "no_latent", "no_sem"]);
        assert_eq!(rep.cell("no_latent").unwrap().w_latent, 0.0);
        assert_eq!(rep.cell("no_sem").unwrap().w_sem, 0.0);
    }

    #[test]
    fn cell_failures_still_persist_earlier_cells() {
        let world = tiny_world();
        let den = tiny_denoiser(3);
        let enc = tiny_encoder(1);
        let source = crate::world::lookup_direction("radius").unwrap();
        let cfg = TransferConfig { n_pairs: 4, batch: 2, iterations: 2, ..Default::default() };
        let mut seen = 0usize;
        let err = ablate(
            &world,
            &den,
            &enc,
            &source,
            &cfg,
            AblationAxis::Timesteps,
            2,
            0,
            0,
            "cafe",
            |_| {
                seen += 1;
                if seen == 2 {
                    Err(Error::BadConfig { field: "disk".into(), reason: "full".into() })
                } else {
                    Ok(())
                }
            },
        )
        .unwrap_err();
        assert!(matches!(err, Error::BadConfig { .. }));
        assert_eq!(seen, 2, "first cell was delivered before the failure");
    }

    #[test]
    fn report_emission_is_deterministic_and_labeled() {
        let world = tiny_world();
        let den = tiny_denoiser(3);
        let enc = tiny_encoder(1);
        let dirs = vec![test_direction("radius", 5), test_direction("intensity", 6)];
        let mat =
            rescoring(&world, &den, &dirs, 2, StrengthPolicy::Fixed(0.5), 0, "cafe").unwrap();
        let frames: Vec<Tensor> = crate::world::sample_styles(7, 2)
            .iter()
            .map(|s| crate::world::render(&world, s).image)
            .collect();
        let dist = distance_report(&enc, &frames, &frames, "cafe").unwrap();
        let comp =
            composition(&world, &den, &dirs[0], &dirs[1], 2, 0, "cafe").unwrap();
        let points = crate::editing::interpolate_edit(
            &world,
            &den,
            None,
            1.0,
            &dirs[0],
            &[-1.0, 0.0, 1.0],
            11,
        )
        .unwrap();
        let set = ReportSet {
            rescoring: vec![mat.clone()],
            distances: vec![NamedDistances { name: "radius".into(), report: dist }],
            ablations: vec![],
            compositions: vec![comp],
            sweeps: vec![NamedSweep {
                name: "interp_radius".into(),
                attribute: Attribute::Radius,
                config_hash: "cafe".into(),
                points,
            }],
        };

        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let files1 = emit_report(&set, d1.path()).unwrap();
        let files2 = emit_report(&set, d2.path()).unwrap();
        assert_eq!(files1.len(), files2.len());
        for (a, b) in files1.iter().zip(&files2) {
            assert_eq!(a.file_name(), b.file_name());
            assert_eq!(
                std::fs::read(a).unwrap(),
                std::fs::read(b).unwrap(),
                "{:?} differs between runs",
                a.file_name()
            );
        }

        let svg = rescoring_heatmap_svg(&mat);
        for label in ["radius", "intensity", "aspect", "center_x"] {
            assert!(svg.contains(label), "heatmap must label {label}");
        }
        assert_eq!(
            svg.matches("<rect").count(),
            1 + 2 * 4,
            "backdrop plus one rect per cell (two rows, four registry columns)"
        );

        let index: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(d1.path().join("index.json")).unwrap())
                .unwrap();
        let listed: Vec<String> = index["files"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_str().unwrap().to_string())
            .collect();
        assert!(listed.contains(&"rescoring_0.svg".into()));
        assert!(listed.contains(&"distances.csv".into()));
        assert!(listed.contains(&"composition.json".into()));
        assert!(listed.contains(&"composition.csv".into()));
        assert!(listed.contains(&"interp_radius.csv".into()));
        assert!(listed.contains(&"interp_radius.svg".into()));
    }

    #[test]
    fn an_empty_report_set_still_yields_a_valid_index() {
        let dir = tempfile::tempdir().unwrap();
        let files = emit_report(&ReportSet::default(), dir.path()).unwrap();
        assert_eq!(files.len(), 1);
        let index: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&files[0]).unwrap()).unwrap();
        assert_eq!(index["files"].as_array().unwrap().len(), 0);
    }

    #[test]
    fn thread_cap_changes_the_pool_but_not_the_numbers() {
        let world = tiny_world();
        let den = tiny_denoiser(3);
        let dirs = vec![test_direction("radius", 5)];
        std::env::set_var("DIRFORGE_THREADS", "1");
        assert_eq!(eval_pool().unwrap().current_num_threads(), 1);
        let one =
            rescoring(&world, &den, &dirs, 3, StrengthPolicy::Fixed(0.7), 0, "cafe").unwrap();
        std::env::set_var("DIRFORGE_THREADS", "3");
        assert_eq!(eval_pool().unwrap().current_num_threads(), 3);
        let three =
            rescoring(&world, &den, &dirs, 3, StrengthPolicy::Fixed(0.7), 0, "cafe").unwrap();
        std::env::remove_var("DIRFORGE_THREADS");
        assert_eq!(one.entries, three.entries);
        assert_eq!(one.skipped, three.skipped);

        std::env::set_var("DIRFORGE_THREADS", "zero");
        let err = eval_pool().unwrap_err();
        std::env::remove_var("DIRFORGE_THREADS");
        assert!(matches!(err, Error::BadConfig { ref field, .. } if field == "DIRFORGE_THREADS"));
    }

    #[test]
    fn sweep_chart_is_deterministic_and_labeled() {
        let world = tiny_world();
        let style = crate::world::StyleVector::midpoint();
        let points: Vec<SweepPoint> = [-1.0, 0.0, 1.0]
            .iter()
            .map(|&lambda| SweepPoint {
                lambda,
                image: crate::world::render(&world, &style).image,
                estimate: AttributeEstimate { style, confidence: 1.0 },
            })
            .collect();
        let a = sweep_line_svg(&points, Attribute::Radius, "cafe");
        let b = sweep_line_svg(&points, Attribute::Radius, "cafe");
        assert_eq!(a, b);
        assert!(a.contains("radius vs edit strength"));
        assert!(a.contains("<polyline"));
    }
}
