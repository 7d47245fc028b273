//! Applying learned directions at sampling time.
//!
//! An edit perturbs the noise prediction inside a timestep window:
//! each active direction d contributes lambda_e * (eps(x_t, d) -
//! eps(x_t, null)) on top of the guided base prediction. Several
//! directions compose by summation, each with its own strength and
//! window. Real frames are edited by inverting them first and replaying
//! the reverse pass with the perturbed predictor.
//!
//! Windows are fractions of the schedule length and gate edits at the
//! LOW-noise end: the default [0, 0.4] applies a direction only for
//! t <= 0.4 T, where layout is already settled and the edit lands on
//! appearance instead of structure. Both endpoints are inclusive, and
//! the gate is exact: outside every window the output is the base
//! prediction, bit for bit.

use std::collections::HashSet;

use crate::diffusion::{cfg_predict, invert, reverse_from, Denoiser, NoiseSource};
use crate::error::{Error, Result};
use crate::autodiff::Tensor;
use crate::transfer::DirectionEmbedding;
use crate::world::{read_attributes, AttributeEstimate, WorldConfig};

/// One direction application: a signed strength over a timestep window.
#[derive(Debug, Clone)]
pub struct Edit {
    pub direction: DirectionEmbedding,
    /// Signed edit strength lambda_e. Zero is an exact no-op.
    pub strength: f64,
    /// Active timestep range as fractions of T, inclusive on both ends.
    pub window: (f64, f64),
}

impl Edit {
    pub fn new(direction: DirectionEmbedding, strength: f64, window: (f64, f64)) -> Edit {
        Edit { direction, strength, window }
    }

    /// An edit using the strength and window stored on the direction.
    pub fn recommended(direction: &DirectionEmbedding) -> Edit {
        Edit {
            strength: direction.recommended_lambda_e,
            window: (direction.recommended_window[0], direction.recommended_window[1]),
            direction: direction.clone(),
        }
    }

    /// Whether step `t` of a `t_max`-step schedule falls in the window.
    fn active_at(&self, t: usize, t_max: usize) -> bool {
        let step = t as f64;
        step >= self.window.0 * t_max as f64 && step <= self.window.1 * t_max as f64
    }
}

/// A full editing run: a set of edits over one base prediction.
///
/// `cond` selects the base: `Some(c)` means classifier-free guidance
/// toward `c` at scale `guidance`; `None` means the unconditional
/// prediction, the mode used when editing inverted real frames.
#[derive(Debug, Clone)]
pub struct EditSpec {
    pub edits: Vec<Edit>,
    pub cond: Option<Tensor>,
    /// Guidance scale lambda_g for the base prediction.
    pub guidance: f64,
}

impl EditSpec {
    /// Validated constructor.
    pub fn new(edits: Vec<Edit>, cond: Option<Tensor>, guidance: f64) -> Result<EditSpec> {
        let spec = EditSpec { edits, cond, guidance };
        spec.validate()?;
        Ok(spec)
    }

    /// A plain generation: no edits on top of the guided base.
    pub fn unedited(cond: Option<Tensor>, guidance: f64) -> EditSpec {
        EditSpec { edits: Vec::new(), cond, guidance }
    }

    /// Checks window bounds and name uniqueness.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for edit in &self.edits {
            let (lo, hi) = edit.window;
            if !(0.0 <= lo && lo < hi && hi <= 1.0) {
                return Err(Error::BadWindow { lo, hi });
            }
            if !seen.insert(edit.direction.name.as_str()) {
                return Err(Error::BadConfig {
                    field: "edits".into(),
                    reason: format!("direction {:?} appears twice", edit.direction.name),
                });
            }
        }
        Ok(())
    }
}

/// Pairs repeatable `--direction` values with repeatable `--lambda-e`
/// values. An empty strength list means "use each direction's stored
/// strength"; otherwise the lists must match position for position. A
/// shared window overrides every direction's stored window.
pub fn build_edits(
    directions: &[DirectionEmbedding],
    strengths: &[f64],
    window: Option<(f64, f64)>,
) -> Result<Vec<Edit>> {
    if !strengths.is_empty() && strengths.len() != directions.len() {
        return Err(Error::EditArity {
            directions: directions.len(),
            strengths: strengths.len(),
        });
    }
    Ok(directions
        .iter()
        .enumerate()
        .map(|(i, dir)| {
            let mut edit = Edit::recommended(dir);
            if let Some(&s) = strengths.get(i) {
                edit.strength = s;
            }
            if let Some(w) = window {
                edit.window = w;
            }
            edit
        })
        .collect())
}

/// The edited noise prediction at one reverse step.
///
/// Base is the guided prediction for `spec.cond`; every edit whose
/// window contains `t` adds `strength * (eps(x_t, d) - eps(x_t, null))`.
/// Inactive and zero-strength edits contribute nothing at all, so with
/// no active edit the base comes back bit for bit. The edit sum
/// accumulates separately from the base, which makes cancellation
/// between opposite strengths exact.
pub fn edited_noise(den: &Denoiser, x_t: &Tensor, t: usize, spec: &EditSpec) -> Result<Tensor> {
    spec.validate()?;
    let base = cfg_predict(den, x_t, t, spec.cond.as_ref(), spec.guidance)?;
    let t_max = den.schedule.t_max();
    let mut sum: Option<Vec<f64>> = None;
    let mut eps_null: Option<Tensor> = None;
    for edit in &spec.edits {
        if edit.strength == 0.0 || !edit.active_at(t, t_max) {
            continue;
        }
        if edit.direction.d.numel() != den.cond_dim {
            return Err(Error::KMismatch {
                expected: den.cond_dim,
                found: edit.direction.d.numel(),
            });
        }
        if eps_null.is_none() {
            // With no condition (or zero guidance) the base IS the null
            // prediction; skip the duplicate forward pass.
            eps_null = Some(if spec.cond.is_none() || spec.guidance == 0.0 {
                base.clone()
            } else {
                den.predict(x_t, t, &den.null_cond())?
            });
        }
        let null = eps_null.as_ref().unwrap();
        let eps_d = den.predict(x_t, t, &edit.direction.d)?;
        let acc = sum.get_or_insert_with(|| vec![0.0; den.pixels]);
        for ((a, d), u) in acc.iter_mut().zip(eps_d.data()).zip(null.data()) {
            *a += edit.strength * (d - u);
        }
    }
    match sum {
        None => Ok(base),
        Some(s) => {
            let data: Vec<f64> =
                base.data().iter().zip(s.iter()).map(|(b, e)| b + e).collect();
            Tensor::from_vec(base.shape(), data)
        }
    }
}

/// Generates one frame with the edits applied, deterministic in `seed`.
/// With an empty edit list this is exactly ancestral sampling from the
/// `"edit/gen"` noise stream.
pub fn edit_generate(den: &Denoiser, spec: &EditSpec, seed: u64) -> Result<Tensor> {
    spec.validate()?;
    let mut noise = sampling_noise(seed);
    let start = Tensor::from_vec(&[den.pixels], noise.draw(den.pixels)?)?;
    reverse_from(&den.schedule, &start, |x, t| edited_noise(den, x, t, spec), &mut noise)
}

/// The noise stream [`edit_generate`] consumes, exposed so unedited
/// baselines can be drawn from the identical randomness.
pub fn sampling_noise(seed: u64) -> NoiseSource {
    NoiseSource::seeded(seed, "edit/gen", 0)
}

/// Edits a real frame: inverts it unconditionally, then replays the
/// reverse pass with the edited predictor over the stored residuals.
/// With an empty edit list the replay reconstructs `x0` to float
/// round-off. `spec.cond` must be `None`; the inversion and the base
/// prediction are both unconditional.
pub fn edit_real(den: &Denoiser, x0: &Tensor, spec: &EditSpec, seed: u64) -> Result<Tensor> {
    spec.validate()?;
    if spec.cond.is_some() {
        return Err(Error::BadConfig {
            field: "cond".into(),
            reason: "real-frame editing uses an unconditional base; drop the condition".into(),
        });
    }
    let inv = invert(den, x0, None, spec.guidance, seed)?;
    let mut noise = inv.noise_source();
    reverse_from(&den.schedule, &inv.x_start, |x, t| edited_noise(den, x, t, spec), &mut noise)
}

/// One frame of a strength sweep plus its oracle read-back.
#[derive(Debug, Clone)]
pub struct SweepPoint {
    pub lambda: f64,
    pub image: Tensor,
    pub estimate: AttributeEstimate,
}

/// Generates one frame per strength in `grid` (shared seed, shared
/// randomness) with a single direction applied over its stored window,
/// and reads each frame back through the oracle. The grid must be
/// sorted ascending so downstream monotonicity checks read naturally.
pub fn interpolate_edit(
    world: &WorldConfig,
    den: &Denoiser,
    cond: Option<&Tensor>,
    guidance: f64,
    direction: &DirectionEmbedding,
    grid: &[f64],
    seed: u64,
) -> Result<Vec<SweepPoint>> {
    if grid.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::BadConfig {
            field: "grid".into(),
            reason: "strength grid must be sorted ascending".into(),
        });
    }
    grid.iter()
        .map(|&lambda| {
            let mut edit = Edit::recommended(direction);
            edit.strength = lambda;
            let spec = EditSpec::new(vec![edit], cond.cloned(), guidance)?;
            let image = edit_generate(den, &spec, seed)?;
            let estimate = read_attributes(world, &image);
            Ok(SweepPoint { lambda, image, estimate })
        })
        .collect()
}

/// Renders a sweep trace as CSV with one row per strength.
pub fn sweep_trace_csv(points: &[SweepPoint]) -> String {
    let mut out = String::from("lambda,cx,cy,radius,intensity,aspect,bg\n");
    for p in points {
        let s = &p.estimate.style;
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            p.lambda, s.center_x, s.center_y, s.radius, s.intensity, s.aspect, s.background
        ));
    }
    out
}
