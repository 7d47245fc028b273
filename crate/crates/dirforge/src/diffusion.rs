//! Denoising diffusion on flattened frames: the noise schedule, the
//! conditional noise predictor, guided prediction, ancestral sampling,
//! and the exact inversion that editing builds on.
//!
//! Everything here works on rank-1 tensors of `pixels` values. Time
//! runs 0..=t_max with t = 0 the clean frame, so schedule arrays have
//! t_max + 1 entries and index 0 describes "no noise yet"
//! (cumulative signal fraction exactly 1).
//!
//! The inversion is the edit-friendly kind: the noising pass draws
//! independent noise per step, and the per-step residuals are solved
//! so that replaying the reverse process reproduces the input exactly.
//! That property is pure algebra, so it holds for an untrained
//! predictor too; the tests exploit that.

use crate::autodiff::{Activation, AdamW, BoundMlp, Mlp, Tape, Tensor, Var};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::rng;
use crate::world::{render, sample_styles, WorldConfig};
use rand_chacha::ChaCha8Rng;

/// Width of the sinusoidal timestep embedding.
pub const T_EMBED_DIM: usize = 32;

/// Hidden widths of the noise predictor MLP. They exceed the pixel
/// count on purpose: at high noise the optimal prediction is close to
/// an identity map of the input, which a narrower trunk cannot carry.
pub const DENOISER_HIDDEN: [usize; 2] = [320, 320];

/// Reverse-step noise scales are floored at this value so that the
/// final step (whose posterior scale is exactly zero) still admits a
/// well-defined residual for inversion. The perturbation this injects
/// into plain sampling is orders of magnitude below every tolerance
/// used in this crate.
pub const SIGMA_FLOOR: f64 = 1e-12;

/// Variance schedule plus every derived coefficient the loops need.
#[derive(Debug, Clone)]
pub struct NoiseSchedule {
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// Linear beta ramp over t in 1..=t_max. Index 0 is the clean
    /// frame: beta[0] = 0, cumulative signal fraction 1.
    pub fn linear(t_max: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
        if t_max == 0 {
            return Err(Error::BadSchedule { reason: "t_max must be at least 1".into() });
        }
        if !(beta_start > 0.0) || !(beta_end < 1.0) || beta_end < beta_start {
            return Err(Error::BadSchedule {
                reason: format!(
                    "need 0 < beta_start <= beta_end < 1; got [{beta_start}, {beta_end}]"
                ),
            });
        }
        let mut beta = vec![0.0];
        for t in 1..=t_max {
            let frac = if t_max == 1 { 0.0 } else { (t - 1) as f64 / (t_max - 1) as f64 };
            beta.push(beta_start + frac * (beta_end - beta_start));
        }
        let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bar = vec![1.0];
        for t in 1..=t_max {
            alpha_bar.push(alpha_bar[t - 1] * alpha[t]);
        }
        Ok(NoiseSchedule { beta, alpha, alpha_bar })
    }

    pub fn t_max(&self) -> usize {
        self.beta.len() - 1
    }

    /// Checked timestep for public entry points (1..=t_max).
    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.t_max() {
            return Err(Error::TimestepOutOfRange { t, t_max: self.t_max() });
        }
        Ok(())
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t]
    }

    /// Cumulative signal fraction; valid for t in 0..=t_max.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    /// Posterior noise scale of the reverse step at t. Exactly zero at
    /// t = 1 (the final step is deterministic).
    pub fn sigma(&self, t: usize) -> f64 {
        (self.beta[t] * (1.0 - self.alpha_bar[t - 1]) / (1.0 - self.alpha_bar[t])).sqrt()
    }

    /// [`NoiseSchedule::sigma`] floored at [`SIGMA_FLOOR`].
    pub fn sigma_eff(&self, t: usize) -> f64 {
        self.sigma(t).max(SIGMA_FLOOR)
    }
}

/// Mixes clean signal and noise at step t:
/// sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) eps. Accepts t = 0
/// (returns x0 exactly).
pub fn forward_noise(
    schedule: &NoiseSchedule,
    x0: &Tensor,
    t: usize,
    eps: &Tensor,
) -> Result<Tensor> {
    if t > schedule.t_max() {
        return Err(Error::TimestepOutOfRange { t, t_max: schedule.t_max() });
    }
    if x0.shape() != eps.shape() {
        return Err(Error::ShapeMismatch { left: x0.shape().to_vec(), right: eps.shape().to_vec() });
    }
    let ab = schedule.alpha_bar(t);
    let (s, n) = (ab.sqrt(), (1.0 - ab).sqrt());
    let data: Vec<f64> =
        x0.data().iter().zip(eps.data().iter()).map(|(x, e)| s * x + n * e).collect();
    Tensor::from_vec(x0.shape(), data)
}

/// Sinusoidal embedding of an integer timestep: `dim/2` sines followed
/// by `dim/2` cosines at frequencies 10000^(-i / (dim/2)).
pub fn time_embedding(t: usize, dim: usize) -> Vec<f64> {
    assert!(dim % 2 == 0, "time embedding width must be even");
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let omega = 10000f64.powf(-(i as f64) / half as f64);
        out.push((omega * t as f64).sin());
    }
    for i in 0..half {
        let omega = 10000f64.powf(-(i as f64) / half as f64);
        out.push((omega * t as f64).cos());
    }
    out
}

/// Noise predictor: concat[noisy frame, time embedding, condition]
/// through an MLP back to frame shape, plus a schedule-scaled skip
/// path g sqrt(1 - alpha_bar_t) x_t with a single learnable gain g.
///
/// The skip exists because at high noise the optimal prediction is
/// dominated by a term proportional to the input itself; routing that
/// through softplus layers is possible but takes most of the training
/// budget, while one scalar learns it in a few hundred steps. The gain
/// starts at zero so an untrained predictor still outputs exactly zero.
///
/// The schedule is bundled in: predictions depend on it through the
/// skip scaling, so a predictor is only meaningful together with the
/// schedule it was trained against.
#[derive(Debug, Clone)]
pub struct Denoiser {
    pub net: Mlp,
    /// Scalar gain on the skip path, shape [1], zero at init.
    pub skip_gain: Tensor,
    pub schedule: NoiseSchedule,
    pub pixels: usize,
    pub cond_dim: usize,
}

impl Denoiser {
    pub fn init(
        schedule: NoiseSchedule,
        pixels: usize,
        cond_dim: usize,
        hidden: &[usize],
        seed: u64,
    ) -> Denoiser {
        let mut sizes = vec![pixels + T_EMBED_DIM + cond_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(pixels);
        let mut r = rng::stream(seed, "denoiser/init", 0);
        let mut net = Mlp::init(&mut r, &sizes, Activation::Softplus);
        // Start at the predict-nothing floor: the first batches then
        // measure E|eps|^2 (the data dimension), the honest baseline
        // every training criterion is phrased against.
        net.zero_last_layer();
        Denoiser {
            net,
            skip_gain: Tensor::zeros(&[1]).with_grad(),
            schedule,
            pixels,
            cond_dim,
        }
    }

    /// The "no condition" token: a zero vector in condition space.
    pub fn null_cond(&self) -> Tensor {
        Tensor::zeros(&[self.cond_dim])
    }

    /// Registers the parameters on a tape for differentiable use.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundDenoiser<'t> {
        BoundDenoiser {
            net: self.net.bind(tape),
            skip_gain: tape.leaf(&self.skip_gain),
            schedule: self.schedule.clone(),
            tape,
            pixels: self.pixels,
            cond_dim: self.cond_dim,
        }
    }

    /// Plain (no-gradient) prediction.
    pub fn predict(&self, x_t: &Tensor, t: usize, cond: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let bound = self.bind(&tape);
        let out = bound.forward(tape.constant(x_t), t, tape.constant(cond))?;
        Ok(out.value())
    }

    /// Flips gradient tracking on every parameter (trunk and gain).
    pub fn set_requires_grad(&mut self, on: bool) {
        self.net.set_requires_grad(on);
        self.skip_gain.requires_grad = on;
    }

    /// Serializes weights plus the schedule to the shared container.
    pub fn save(&self, path: &std::path::Path, config_hash: &str) -> Result<()> {
        let provenance = serde_json::json!({
            "kind": "denoiser",
            "pixels": self.pixels,
            "cond_dim": self.cond_dim,
            "hidden": self.hidden_sizes(),
            "activation": self.net.activation.to_string(),
            "schedule": {
                "t_max": self.schedule.t_max(),
                "beta_start": self.schedule.beta(1),
                "beta_end": self.schedule.beta(self.schedule.t_max()),
            },
        });
        let names = self.net.param_names();
        let params = self.net.params();
        let mut tensors: Vec<(&str, &Tensor)> =
            names.iter().map(String::as_str).zip(params.into_iter()).collect();
        tensors.push(("skip_gain", &self.skip_gain));
        crate::checkpoint::write_checkpoint(path, &tensors, provenance, config_hash)
    }

    /// Reads a file written by [`Denoiser::save`]. Values round through
    /// f32 (the container's dtype), the schedule is rebuilt exactly.
    pub fn load(path: &std::path::Path) -> Result<Denoiser> {
        let loaded = crate::checkpoint::read_checkpoint(path)?;
        let meta = &loaded.header.provenance;
        if meta["kind"] != "denoiser" {
            return Err(Error::BadConfig {
                field: "kind".into(),
                reason: format!("expected a denoiser file, found kind {}", meta["kind"]),
            });
        }
        let get = |field: &str| -> Result<u64> {
            meta[field].as_u64().ok_or_else(|| Error::BadConfig {
                field: field.into(),
                reason: "missing or not an integer".into(),
            })
        };
        let pixels = get("pixels")? as usize;
        let cond_dim = get("cond_dim")? as usize;
        let hidden: Vec<usize> = meta["hidden"]
            .as_array()
            .ok_or_else(|| Error::BadConfig {
                field: "hidden".into(),
                reason: "missing or not an array".into(),
            })?
            .iter()
            .filter_map(|v| v.as_u64())
            .map(|v| v as usize)
            .collect();
        let sched = &meta["schedule"];
        let t_max = sched["t_max"].as_u64().ok_or_else(|| Error::BadConfig {
            field: "schedule.t_max".into(),
            reason: "missing".into(),
        })? as usize;
        let beta_start = sched["beta_start"].as_f64().unwrap_or(f64::NAN);
        let beta_end = sched["beta_end"].as_f64().unwrap_or(f64::NAN);
        let schedule = NoiseSchedule::linear(t_max, beta_start, beta_end)?;

        let mut den = Denoiser::init(schedule, pixels, cond_dim, &hidden, 0);
        let mut expected: Vec<String> = den.net.param_names();
        expected.push("skip_gain".into());
        let expected_refs: Vec<&str> = expected.iter().map(String::as_str).collect();
        loaded.expect_exact(&expected_refs)?;
        for (name, param) in den.net.param_names().iter().zip(den.net.params_mut()) {
            let t = loaded.tensor(name)?;
            if t.shape() != param.shape() {
                return Err(Error::ShapeMismatch {
                    left: t.shape().to_vec(),
                    right: param.shape().to_vec(),
                });
            }
            *param = t.clone().with_grad();
        }
        den.skip_gain = loaded.tensor("skip_gain")?.clone().with_grad();
        Ok(den)
    }

    fn hidden_sizes(&self) -> Vec<usize> {
        let sizes = self.net.sizes();
        sizes[1..sizes.len() - 1].to_vec()
    }
}

/// Tape-bound view of a [`Denoiser`].
pub struct BoundDenoiser<'t> {
    net: BoundMlp<'t>,
    skip_gain: Var<'t>,
    schedule: NoiseSchedule,
    tape: &'t Tape,
    pixels: usize,
    cond_dim: usize,
}

impl<'t> BoundDenoiser<'t> {
    pub fn forward(&self, x_t: Var<'t>, t: usize, cond: Var<'t>) -> Result<Var<'t>> {
        self.schedule.check_step(t)?;
        if x_t.shape() != vec![self.pixels] {
            return Err(Error::ShapeMismatch { left: x_t.shape(), right: vec![self.pixels] });
        }
        if cond.shape() != vec![self.cond_dim] {
            return Err(Error::ShapeMismatch { left: cond.shape(), right: vec![self.cond_dim] });
        }
        let temb = self.tape.constant_vec(time_embedding(t, T_EMBED_DIM));
        let input = Var::concat(&[x_t, temb, cond])?;
        let trunk = self.net.forward(input)?;
        let coef = (1.0 - self.schedule.alpha_bar(t)).sqrt();
        let skip = x_t.scale(coef).mul(self.skip_gain.broadcast(self.pixels))?;
        trunk.add(skip)
    }
}

/// Guided noise prediction. The endpoints collapse exactly: guidance 0
/// (or no condition) returns the unconditional prediction bit for bit,
/// guidance 1 the conditional one; in between the two are mixed as
/// eps_u + g (eps_c - eps_u).
pub fn cfg_predict(
    den: &Denoiser,
    x_t: &Tensor,
    t: usize,
    cond: Option<&Tensor>,
    guidance: f64,
) -> Result<Tensor> {
    let eps_u = den.predict(x_t, t, &den.null_cond())?;
    let Some(c) = cond else { return Ok(eps_u) };
    if guidance == 0.0 {
        return Ok(eps_u);
    }
    let eps_c = den.predict(x_t, t, c)?;
    if guidance == 1.0 {
        return Ok(eps_c);
    }
    let data: Vec<f64> = eps_u
        .data()
        .iter()
        .zip(eps_c.data().iter())
        .map(|(u, c)| u + guidance * (c - u))
        .collect();
    Tensor::from_vec(eps_u.shape(), data)
}

/// Mean of the reverse step at t given the noise prediction:
/// (x_t - beta_t / sqrt(1 - alpha_bar_t) eps_hat) / sqrt(alpha_t).
pub fn reverse_mean(
    schedule: &NoiseSchedule,
    x_t: &Tensor,
    t: usize,
    eps_hat: &Tensor,
) -> Result<Tensor> {
    schedule.check_step(t)?;
    if x_t.shape() != eps_hat.shape() {
        return Err(Error::ShapeMismatch { left: x_t.shape().to_vec(), right: eps_hat.shape().to_vec() });
    }
    let coef = schedule.beta(t) / (1.0 - schedule.alpha_bar(t)).sqrt();
    let scale = 1.0 / schedule.alpha(t).sqrt();
    let data: Vec<f64> = x_t
        .data()
        .iter()
        .zip(eps_hat.data().iter())
        .map(|(x, e)| scale * (x - coef * e))
        .collect();
    Tensor::from_vec(x_t.shape(), data)
}

/// Where reverse-process noise comes from: fresh seeded draws for
/// generation, or a recorded list for exact replay.
pub enum NoiseSource {
    Seeded(ChaCha8Rng),
    Recorded { draws: Vec<Vec<f64>>, cursor: usize },
}

impl NoiseSource {
    pub fn seeded(seed: u64, label: &str, index: u64) -> NoiseSource {
        NoiseSource::Seeded(rng::stream(seed, label, index))
    }

    pub fn recorded(draws: Vec<Vec<f64>>) -> NoiseSource {
        NoiseSource::Recorded { draws, cursor: 0 }
    }

    /// Next noise vector of length n.
    pub fn draw(&mut self, n: usize) -> Result<Vec<f64>> {
        match self {
            NoiseSource::Seeded(r) => Ok(rng::normal_vec(r, n)),
            NoiseSource::Recorded { draws, cursor } => {
                let Some(v) = draws.get(*cursor) else {
                    return Err(Error::NoiseExhausted {
                        needed: *cursor + 1,
                        provided: draws.len(),
                    });
                };
                if v.len() != n {
                    return Err(Error::LengthMismatch {
                        shape: vec![n],
                        len: v.len(),
                        expected: n,
                    });
                }
                *cursor += 1;
                Ok(v.clone())
            }
        }
    }

    /// Recorded draws not yet consumed (0 for seeded sources).
    pub fn leftover(&self) -> usize {
        match self {
            NoiseSource::Seeded(_) => 0,
            NoiseSource::Recorded { draws, cursor } => draws.len() - cursor,
        }
    }
}

/// Runs the reverse process from `start` (the state at t_max) down to
/// the clean frame, asking `predict` for the noise estimate at each
/// step. Consumes exactly t_max draws from `noise`.
pub fn reverse_from(
    schedule: &NoiseSchedule,
    start: &Tensor,
    mut predict: impl FnMut(&Tensor, usize) -> Result<Tensor>,
    noise: &mut NoiseSource,
) -> Result<Tensor> {
    let mut x = start.clone();
    for t in (1..=schedule.t_max()).rev() {
        let eps_hat = predict(&x, t)?;
        let mu = reverse_mean(schedule, &x, t, &eps_hat)?;
        let z = noise.draw(x.numel())?;
        let sig = schedule.sigma_eff(t);
        let data: Vec<f64> =
            mu.data().iter().zip(z.iter()).map(|(m, z)| m + sig * z).collect();
        x = Tensor::from_vec(x.shape(), data)?;
    }
    Ok(x)
}

/// Ancestral sampling with guidance: draws the start state and t_max
/// step noises from `noise` (t_max + 1 draws in total).
pub fn sample(
    den: &Denoiser,
    cond: Option<&Tensor>,
    guidance: f64,
    noise: &mut NoiseSource,
) -> Result<Tensor> {
    let start = Tensor::from_vec(&[den.pixels], noise.draw(den.pixels)?)?;
    reverse_from(&den.schedule, &start, |x, t| cfg_predict(den, x, t, cond, guidance), noise)
}

/// Exact replay data for one frame: the state at t_max plus one solved
/// residual per reverse step (ordered t_max down to 1).
#[derive(Debug, Clone)]
pub struct Inversion {
    pub x_start: Tensor,
    pub xi: Vec<Tensor>,
}

impl Inversion {
    /// The residuals as a replayable noise source.
    pub fn noise_source(&self) -> NoiseSource {
        NoiseSource::recorded(self.xi.iter().map(|t| t.data().to_vec()).collect())
    }
}

/// Edit-friendly inversion of a clean frame. The noising trajectory
/// uses an independent draw per step (not one shared path), and each
/// reverse residual is solved so that replaying [`reverse_from`] with
/// the same predictions reconstructs `x0` exactly, whatever the model
/// predicts. Deterministic in `seed`.
pub fn invert(
    den: &Denoiser,
    x0: &Tensor,
    cond: Option<&Tensor>,
    guidance: f64,
    seed: u64,
) -> Result<Inversion> {
    if x0.shape() != [den.pixels] {
        return Err(Error::ShapeMismatch { left: x0.shape().to_vec(), right: vec![den.pixels] });
    }
    let schedule = &den.schedule;
    let t_max = schedule.t_max();
    let mut xs: Vec<Tensor> = Vec::with_capacity(t_max + 1);
    xs.push(x0.clone());
    for t in 1..=t_max {
        let eps = Tensor::from_vec(
            &[den.pixels],
            rng::normal_vec(&mut rng::stream(seed, "invert/noise", t as u64), den.pixels),
        )?;
        xs.push(forward_noise(schedule, x0, t, &eps)?);
    }
    let mut xi = Vec::with_capacity(t_max);
    for t in (1..=t_max).rev() {
        let eps_hat = cfg_predict(den, &xs[t], t, cond, guidance)?;
        let mu = reverse_mean(schedule, &xs[t], t, &eps_hat)?;
        let sig = schedule.sigma_eff(t);
        let data: Vec<f64> = xs[t - 1]
            .data()
            .iter()
            .zip(mu.data().iter())
            .map(|(prev, m)| (prev - m) / sig)
            .collect();
        xi.push(Tensor::from_vec(&[den.pixels], data)?);
    }
    Ok(Inversion { x_start: xs[t_max].clone(), xi })
}

/// Knobs for [`train_denoiser`].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiffusionTrainConfig {
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    /// Distinct rendered frames in the training pool.
    pub n_train: usize,
    pub iterations: usize,
    pub batch: usize,
    pub lr: f64,
    /// Probability of replacing the condition with the null token, so
    /// the same network learns both modes.
    pub p_uncond: f64,
    pub seed: u64,
}

impl Default for DiffusionTrainConfig {
    fn default() -> Self {
        DiffusionTrainConfig {
            t_max: 100,
            beta_start: 1e-2,
            beta_end: 0.2,
            n_train: 512,
            iterations: 3000,
            batch: 16,
            lr: 2e-3,
            p_uncond: 0.1,
            seed: 0,
        }
    }
}

/// Loss bookends: means of the first and last ten batch losses.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DiffusionTrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Trains the noise predictor on rendered frames conditioned on their
/// (frozen) encoder embeddings. The loss is the batch mean of the
/// per-sample squared error summed over pixels, so an untrained
/// predictor scores near the pixel count. Deterministic in the config.
pub fn train_denoiser(
    world: &WorldConfig,
    enc: &Encoder,
    cfg: &DiffusionTrainConfig,
) -> Result<(Denoiser, DiffusionTrainReport)> {
    let schedule = NoiseSchedule::linear(cfg.t_max, cfg.beta_start, cfg.beta_end)?;
    let mut den = Denoiser::init(
        schedule.clone(),
        world.pixels(),
        crate::encoder::EMBED_DIM,
        &DENOISER_HIDDEN,
        cfg.seed,
    );

    let styles = sample_styles(cfg.seed ^ 0x646966, cfg.n_train);
    let frames: Vec<Tensor> = styles.iter().map(|s| render(world, s).image).collect();
    let conds: Vec<Tensor> =
        frames.iter().map(|f| enc.embed(f)).collect::<Result<_>>()?;
    let null = den.null_cond();

    let mut opt = AdamW::new(cfg.lr, 0.0)?;
    let mut batch_rng = rng::stream(cfg.seed, "denoiser/batches", 0);
    let mut first: Vec<f64> = Vec::new();
    let mut last = std::collections::VecDeque::new();

    for iter in 0..cfg.iterations {
        let tape = Tape::new();
        let bound = den.bind(&tape);
        let mut total: Option<Var<'_>> = None;
        for _ in 0..cfg.batch {
            let i = rng::index(&mut batch_rng, cfg.n_train);
            let t = rng::uniform_step(&mut batch_rng, cfg.t_max);
            let eps = Tensor::from_vec(
                &[world.pixels()],
                rng::normal_vec(&mut batch_rng, world.pixels()),
            )?;
            let x_t = forward_noise(&den.schedule, &frames[i], t, &eps)?;
            let cond =
                if rng::uniform(&mut batch_rng, 0.0, 1.0) < cfg.p_uncond { &null } else { &conds[i] };
            let pred = bound.forward(tape.constant(&x_t), t, tape.constant(cond))?;
            let err = pred.sub(tape.constant(&eps))?.sq_l2();
            total = Some(match total {
                Some(acc) => acc.add(err)?,
                None => err,
            });
        }
        let loss = total.expect("batch is nonempty").scale(1.0 / cfg.batch as f64);
        let loss_val = loss.value().item();
        if first.len() < 10 {
            first.push(loss_val);
        }
        last.push_back(loss_val);
        if last.len() > 10 {
            last.pop_front();
        }
        if !loss_val.is_finite() {
            return Err(Error::BadConfig {
                field: "lr".into(),
                reason: format!("training diverged to a non-finite loss at iteration {iter}"),
            });
        }

        tape.backward(loss)?;
        let gain_var = bound.skip_gain;
        let grads: Vec<Tensor> = bound
            .net
            .grads(&tape)
            .into_iter()
            .chain(std::iter::once(tape.grad(gain_var)))
            .map(|g| g.expect("every parameter participates in the loss"))
            .collect();
        // Step decay: full rate for the first half, halved to three
        // quarters, then quartered. The late small steps settle the loss
        // instead of bouncing around the optimum.
        opt.lr = cfg.lr
            * if iter * 2 < cfg.iterations {
                1.0
            } else if iter * 4 < cfg.iterations * 3 {
                0.5
            } else {
                0.25
            };
        let mut params = den.net.params_mut();
        params.push(&mut den.skip_gain);
        let grad_refs: Vec<&Tensor> = grads.iter().collect();
        opt.step(&mut params, &grad_refs)?;
    }

    let report = DiffusionTrainReport {
        initial_loss: first.iter().sum::<f64>() / first.len() as f64,
        final_loss: last.iter().sum::<f64>() / last.len() as f64,
    };
    Ok((den, report))
}
