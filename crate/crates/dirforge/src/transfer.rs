//! Direction learning: distill a paired image change into a single
//! conditioning vector.
//!
//! Given N pairs (x, x') that differ by one attribute push, optimize a
//! vector d in the conditioning space of a frozen denoiser and frozen
//! encoder so that (a) d points where the image embeddings moved and
//! (b) conditioning the denoiser on d separates the pair's noise
//! predictions as much as possible. The result is saved unit-normalized
//! together with everything needed to reproduce it.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::{AdamW, Tape, Tensor, Var};
use crate::checkpoint;
use crate::diffusion::{forward_noise, Denoiser};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::rng;
use crate::world::PairSet;

/// A learned edit direction plus the record of how it was produced.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionEmbedding {
    pub name: String,
    /// Unit-norm direction in the shared conditioning/embedding space.
    pub d: Tensor,
    /// Edit strength that calibration (or the default) suggests.
    pub recommended_lambda_e: f64,
    /// Timestep window (fractions of T) to apply the edit in.
    pub recommended_window: [f64; 2],
    pub provenance: Provenance,
}

/// Everything needed to reproduce and sanely apply a learned direction.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Provenance {
    pub world_seed: u64,
    pub seed: u64,
    pub n_pairs: usize,
    pub iterations: usize,
    pub lr: f64,
    pub batch: usize,
    pub w_sem: f64,
    pub w_latent: f64,
    pub config_hash: String,
    /// Norm of the raw optimized vector before unit normalization.
    pub raw_norm: f64,
    /// True when the optimizer pushed |d| past the configured ceiling.
    pub norm_ceiling_hit: bool,
    /// Iterations actually completed (differs from `iterations` only
    /// when a non-finite loss truncated the run).
    pub completed_iterations: usize,
    pub crate_version: String,
}

/// Knobs for [`learn_direction`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransferConfig {
    /// Pair count the PairSet must hold.
    pub n_pairs: usize,
    pub batch: usize,
    pub iterations: usize,
    pub lr: f64,
    /// Inclusive timestep sampling range; None means 1..=T.
    pub t_range: Option<(usize, usize)>,
    pub w_sem: f64,
    pub w_latent: f64,
    pub seed: u64,
    /// |d| past this point flags `norm_ceiling_hit` (the latent term is
    /// a maximization and can inflate the norm without bound).
    pub norm_ceiling: f64,
    /// Optional global-norm gradient clip; off by default.
    pub grad_clip: Option<f64>,
}

impl Default for TransferConfig {
    fn default() -> Self {
        TransferConfig {
            n_pairs: 100,
            batch: 8,
            iterations: 1000,
            lr: 5e-3,
            t_range: None,
            w_sem: 1.0,
            w_latent: 1.0,
            seed: 0,
            norm_ceiling: 10.0,
            grad_clip: None,
        }
    }
}

impl TransferConfig {
    fn validate(&self) -> Result<()> {
        let positive: [(&str, usize); 3] = [
            ("n_pairs", self.n_pairs),
            ("batch", self.batch),
            ("iterations", self.iterations),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::BadConfig {
                    field: field.into(),
                    reason: "must be positive".into(),
                });
            }
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::BadConfig {
                field: "lr".into(),
                reason: format!("must be positive and finite, got {}", self.lr),
            });
        }
        for (field, w) in [("w_sem", self.w_sem), ("w_latent", self.w_latent)] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::BadConfig {
                    field: field.into(),
                    reason: format!("weights must be >= 0, got {w}"),
                });
            }
        }
        if let Some((lo, hi)) = self.t_range {
            if lo == 0 || hi < lo {
                return Err(Error::BadConfig {
                    field: "t_range".into(),
                    reason: format!("need 1 <= lo <= hi, got ({lo}, {hi})"),
                });
            }
        }
        Ok(())
    }
}

/// Loss trajectory and norm bookkeeping from one optimization run.
#[derive(Debug, Clone, Serialize)]
pub struct TransferReport {
    /// Batch loss per iteration.
    pub trajectory: Vec<f64>,
    /// |d| before unit normalization.
    pub raw_norm: f64,
    /// Largest |d| seen at any iteration.
    pub max_norm: f64,
}

/// One noised pair sharing the same draw of noise and the same step.
#[derive(Debug, Clone)]
pub struct NoisedPair {
    pub x_t: Tensor,
    pub xp_t: Tensor,
    pub t: usize,
}

fn count_unfrozen(den: &Denoiser) -> usize {
    den.net.params().iter().filter(|p| p.requires_grad).count()
        + usize::from(den.skip_gain.requires_grad)
}

fn norm(data: &[f64]) -> f64 {
    data.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Spread between the pair's noise predictions when both condition on
/// d, negated so that minimizing it pushes the predictions apart:
///
/// ```text
/// -mean_pairs |eps(x'_t, d) - eps(x_t, d)|^2
/// ```
///
/// Gradients are meant for d only; the denoiser must arrive frozen.
pub fn latent_loss<'t>(
    tape: &'t Tape,
    den: &Denoiser,
    pairs: &[NoisedPair],
    d: Var<'t>,
) -> Result<Var<'t>> {
    let unfrozen = count_unfrozen(den);
    if unfrozen > 0 {
        return Err(Error::NotFrozen { unfrozen });
    }
    if pairs.is_empty() {
        return Err(Error::BadConfig { field: "pairs".into(), reason: "empty batch".into() });
    }
    let bound = den.bind(tape);
    let mut total: Option<Var<'t>> = None;
    for pair in pairs {
        let a = bound.forward(tape.constant(&pair.x_t), pair.t, d)?;
        let b = bound.forward(tape.constant(&pair.xp_t), pair.t, d)?;
        let gap = b.sub(a)?.sq_l2();
        total = Some(match total {
            Some(acc) => acc.add(gap)?,
            None => gap,
        });
    }
    Ok(total.expect("batch is nonempty").scale(-1.0 / pairs.len() as f64))
}

/// Cosine pull toward the edited embeddings and away from the inputs,
/// from precomputed unit embeddings:
///
/// ```text
/// mean_pairs [ 1 + cos(e_x, d) - cos(e_x', d) ]
/// ```
///
/// Written as 1 + (difference) so an identical pair scores exactly 1.
pub fn semantic_loss_from_embeddings<'t>(
    tape: &'t Tape,
    embeddings: &[(Tensor, Tensor)],
    d: Var<'t>,
) -> Result<Var<'t>> {
    if embeddings.is_empty() {
        return Err(Error::BadConfig { field: "pairs".into(), reason: "empty batch".into() });
    }
    let d_norm_sq: f64 = d.value().data().iter().map(|v| v * v).sum();
    if d_norm_sq.sqrt() < 1e-12 {
        return Err(Error::ZeroNorm { left_norm: d_norm_sq.sqrt(), right_norm: 1.0 });
    }
    let d_norm = d.sq_l2().sqrt();
    let mut total: Option<Var<'t>> = None;
    for (e_x, e_xp) in embeddings {
        let nx = norm(e_x.data());
        let nxp = norm(e_xp.data());
        if nx < 1e-12 || nxp < 1e-12 {
            return Err(Error::ZeroNorm { left_norm: nx.min(nxp), right_norm: d_norm_sq.sqrt() });
        }
        let cos_x = tape.constant(e_x).mul(d)?.sum().div(d_norm.scale(nx))?;
        let cos_xp = tape.constant(e_xp).mul(d)?.sum().div(d_norm.scale(nxp))?;
        let term = cos_x.sub(cos_xp)?.add_scalar(1.0);
        total = Some(match total {
            Some(acc) => acc.add(term)?,
            None => term,
        });
    }
    Ok(total.expect("batch is nonempty").scale(1.0 / embeddings.len() as f64))
}

/// [`semantic_loss_from_embeddings`] on raw images: embeds each side
/// with the (frozen) encoder, then scores the cosine pull.
pub fn semantic_loss<'t>(
    tape: &'t Tape,
    enc: &Encoder,
    pairs: &[(Tensor, Tensor)],
    d: Var<'t>,
) -> Result<Var<'t>> {
    let embeddings: Vec<(Tensor, Tensor)> = pairs
        .iter()
        .map(|(x, xp)| Ok((enc.embed(x)?, enc.embed(xp)?)))
        .collect::<Result<_>>()?;
    semantic_loss_from_embeddings(tape, &embeddings, d)
}

fn build_embedding(
    name: &str,
    raw: &Tensor,
    pairs: &PairSet,
    cfg: &TransferConfig,
    config_hash: &str,
    completed_iterations: usize,
    norm_ceiling_hit: bool,
) -> Result<DirectionEmbedding> {
    let raw_norm = norm(raw.data());
    if !raw_norm.is_finite() || raw_norm < 1e-12 {
        return Err(Error::DegenerateDirection { norm: raw_norm });
    }
    let unit: Vec<f64> = raw.data().iter().map(|v| v / raw_norm).collect();
    Ok(DirectionEmbedding {
        name: name.to_string(),
        d: Tensor::from_vec(raw.shape(), unit)?,
        recommended_lambda_e: 1.0,
        recommended_window: [0.0, 0.4],
        provenance: Provenance {
            world_seed: pairs.seed,
            seed: cfg.seed,
            n_pairs: pairs.inputs.len(),
            iterations: cfg.iterations,
            lr: cfg.lr,
            batch: cfg.batch,
            w_sem: cfg.w_sem,
            w_latent: cfg.w_latent,
            config_hash: config_hash.to_string(),
            raw_norm,
            norm_ceiling_hit,
            completed_iterations,
            crate_version: env!("CARGO_PKG_VERSION").to_string(),
        },
    })
}

/// Optimizes a direction vector against a frozen denoiser and encoder.
///
/// Per iteration: draw a batch of pairs with replacement, draw one step
/// t and one noise vector per pair (shared inside the pair), score
/// `w_sem * semantic + w_latent * latent`, and step d alone with AdamW.
/// The models are cloned and frozen internally; a checksum over every
/// frozen parameter is compared before and after the loop.
///
/// A non-finite loss aborts with the previous iterate packaged inside
/// the error. The returned direction is unit-normalized; the raw norm
/// lands in provenance.
pub fn learn_direction(
    pairs: &PairSet,
    den: &Denoiser,
    enc: &Encoder,
    cfg: &TransferConfig,
    config_hash: &str,
) -> Result<(DirectionEmbedding, TransferReport)> {
    cfg.validate()?;
    if pairs.inputs.len() != cfg.n_pairs {
        return Err(Error::BadConfig {
            field: "n_pairs".into(),
            reason: format!("config says {}, pair set holds {}", cfg.n_pairs, pairs.inputs.len()),
        });
    }
    let t_max = den.schedule.t_max();
    let (t_lo, t_hi) = cfg.t_range.unwrap_or((1, t_max));
    if t_hi > t_max {
        return Err(Error::BadConfig {
            field: "t_range".into(),
            reason: format!("upper bound {t_hi} exceeds schedule T = {t_max}"),
        });
    }

    let mut den = den.clone();
    den.set_requires_grad(false);
    let mut enc = enc.clone();
    enc.net.set_requires_grad(false);
    let den_sum_before = den.net.l1_checksum() + den.skip_gain.data().iter().sum::<f64>();
    let enc_sum_before = enc.net.l1_checksum();

    // Embeddings never change while the encoder is frozen.
    let embeddings: Vec<(Tensor, Tensor)> = pairs
        .inputs
        .iter()
        .zip(pairs.edited.iter())
        .map(|(x, xp)| Ok((enc.embed(x)?, enc.embed(xp)?)))
        .collect::<Result<_>>()?;

    let k = den.cond_dim;
    let mut init_rng = rng::stream(cfg.seed, "transfer/init", 0);
    let mut d = Tensor::from_vec(
        &[k],
        rng::normal_vec(&mut init_rng, k).iter().map(|v| 0.01 * v).collect(),
    )?
    .with_grad();

    let name = &pairs.direction.name;
    let pixels = pairs.inputs[0].numel();
    let mut opt = AdamW::new(cfg.lr, 0.0)?;
    let mut batch_rng = rng::stream(cfg.seed, &format!("transfer/batches/{name}"), 0);
    let mut trajectory = Vec::with_capacity(cfg.iterations);
    let mut max_norm: f64 = 0.0;
    let mut ceiling_hit = false;
    let mut prev_d = d.clone();

    for iter in 0..cfg.iterations {
        let mut noised = Vec::with_capacity(cfg.batch);
        let mut batch_embeds = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let i = rng::index(&mut batch_rng, pairs.inputs.len());
            let t = t_lo + rng::index(&mut batch_rng, t_hi - t_lo + 1);
            let eps = Tensor::from_vec(&[pixels], rng::normal_vec(&mut batch_rng, pixels))?;
            noised.push(NoisedPair {
                x_t: forward_noise(&den.schedule, &pairs.inputs[i], t, &eps)?,
                xp_t: forward_noise(&den.schedule, &pairs.edited[i], t, &eps)?,
                t,
            });
            batch_embeds.push(embeddings[i].clone());
        }

        let tape = Tape::new();
        let d_var = tape.leaf(&d);
        let sem = semantic_loss_from_embeddings(&tape, &batch_embeds, d_var)?;
        let lat = latent_loss(&tape, &den, &noised, d_var)?;
        let loss = sem.scale(cfg.w_sem).add(lat.scale(cfg.w_latent))?;
        let loss_val = loss.value().item();

        if !loss_val.is_finite() {
            let last_good =
                build_embedding(name, &prev_d, pairs, cfg, config_hash, iter, ceiling_hit)?;
            return Err(Error::NonFiniteLoss { iteration: iter, last_good: Box::new(last_good) });
        }
        trajectory.push(loss_val);
        prev_d = d.clone();

        tape.backward(loss)?;
        let mut grad = tape.grad(d_var).expect("d participates in both loss terms");
        if let Some(clip) = cfg.grad_clip {
            let g_norm = norm(grad.data());
            if g_norm > clip {
                grad = Tensor::from_vec(
                    grad.shape(),
                    grad.data().iter().map(|v| v * clip / g_norm).collect(),
                )?;
            }
        }
        opt.step(&mut [&mut d], &[&grad])?;
        if d.data().iter().any(|v| !v.is_finite()) {
            let last_good =
                build_embedding(name, &prev_d, pairs, cfg, config_hash, iter, ceiling_hit)?;
            return Err(Error::NonFiniteLoss { iteration: iter, last_good: Box::new(last_good) });
        }

        let d_norm = norm(d.data());
        max_norm = max_norm.max(d_norm);
        if d_norm > cfg.norm_ceiling {
            ceiling_hit = true;
        }
    }

    let den_sum_after = den.net.l1_checksum() + den.skip_gain.data().iter().sum::<f64>();
    if den_sum_after != den_sum_before {
        return Err(Error::ChecksumChanged { which: "denoiser".into() });
    }
    if enc.net.l1_checksum() != enc_sum_before {
        return Err(Error::ChecksumChanged { which: "encoder".into() });
    }

    let embedding =
        build_embedding(name, &d, pairs, cfg, config_hash, cfg.iterations, ceiling_hit)?;
    let report = TransferReport {
        trajectory,
        raw_norm: embedding.provenance.raw_norm,
        max_norm,
    };
    Ok((embedding, report))
}

/// Serializes a direction to the shared checkpoint container.
pub fn save_direction(path: &Path, dir: &DirectionEmbedding) -> Result<()> {
    let provenance = serde_json::json!({
        "kind": "direction",
        "name": dir.name,
        "recommended_lambda_e": dir.recommended_lambda_e,
        "recommended_window": dir.recommended_window,
        "run": dir.provenance,
    });
    checkpoint::write_checkpoint(
        path,
        &[("d", &dir.d)],
        provenance,
        &dir.provenance.config_hash,
    )
}

/// Loads a direction, checking the conditioning width against the model
/// that will consume it.
pub fn load_direction(path: &Path, expected_k: usize) -> Result<DirectionEmbedding> {
    let loaded = checkpoint::read_checkpoint(path)?;
    loaded.expect_exact(&["d"])?;
    let d = loaded.tensor("d")?.clone();
    if d.shape() != [expected_k] {
        return Err(Error::KMismatch { expected: expected_k, found: d.numel() });
    }
    let header = &loaded.header.provenance;
    if header["kind"] != "direction" {
        return Err(Error::BadConfig {
            field: "kind".into(),
            reason: format!("expected a direction file, found kind {}", header["kind"]),
        });
    }
    let name = header["name"]
        .as_str()
        .ok_or_else(|| Error::BadConfig {
            field: "name".into(),
            reason: "missing or not a string".into(),
        })?
        .to_string();
    let recommended_lambda_e = header["recommended_lambda_e"].as_f64().unwrap_or(1.0);
    let recommended_window = match (
        header["recommended_window"][0].as_f64(),
        header["recommended_window"][1].as_f64(),
    ) {
        (Some(lo), Some(hi)) => [lo, hi],
        _ => [0.0, 0.4],
    };
    let provenance: Provenance = serde_json::from_value(header["run"].clone())
        .map_err(|e| Error::json("parsing direction provenance", e))?;
    Ok(DirectionEmbedding { name, d, recommended_lambda_e, recommended_window, provenance })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Activation;
    use crate::diffusion::NoiseSchedule;
    use crate::world::{lookup_direction, make_pairs, WorldConfig};
    use proptest::prelude::*;
    use tempfile::tempdir;

    /// 16-pixel world, T = 5 schedule, cond width 4: everything tiny.
    fn tiny_world() -> WorldConfig {
        WorldConfig { img_size: 4, ..WorldConfig::default() }
    }

    fn tiny_denoiser(seed: u64, frozen: bool) -> Denoiser {
        let s = NoiseSchedule::linear(5, 0.1, 0.5).unwrap();
        let mut den = Denoiser::init(s, 16, 4, &[8], seed);
        // Fill the zero-initialized output layer so predictions depend
        // on the condition.
        let mut r = rng::stream(seed, "test/unzero", 1);
        let mut params = den.net.params_mut();
        let n = params.len();
        for p in &mut params[n - 2..] {
            let shape = p.shape().to_vec();
            let count = p.data().len();
            let vals: Vec<f64> =
                rng::normal_vec(&mut r, count).iter().map(|v| 0.2 * v).collect();
            **p = Tensor::from_vec(&shape, vals).unwrap().with_grad();
        }
        den.set_requires_grad(!frozen);
        den
    }

    fn tiny_encoder(seed: u64) -> Encoder {
        // Hand-sized encoder: 16 pixels to 4 dims.
        let mut r = rng::stream(seed, "test/enc", 0);
        let net = crate::autodiff::Mlp::init(&mut r, &[16, 8, 4], Activation::Softplus);
        Encoder { net }
    }

    fn unit(v: Vec<f64>) -> Tensor {
        let n = norm(&v);
        Tensor::from_vec(&[v.len()], v.iter().map(|x| x / n).collect()).unwrap()
    }

    #[test]
    fn latent_loss_is_zero_for_identical_inputs_and_never_positive() {
        let den = tiny_denoiser(3, true);
        let x = Tensor::from_vec(&[16], (0..16).map(|i| 0.1 * i as f64).collect()).unwrap();
        let tape = Tape::new();
        let d = tape.leaf(&Tensor::from_vec(&[4], vec![0.1, -0.2, 0.3, 0.4]).unwrap());

        let same = NoisedPair { x_t: x.clone(), xp_t: x.clone(), t: 2 };
        let loss = latent_loss(&tape, &den, &[same], d).unwrap();
        assert_eq!(loss.value().item(), 0.0);

        let mut r = rng::stream(9, "test/latent", 0);
        for _ in 0..5 {
            let a = Tensor::from_vec(&[16], rng::normal_vec(&mut r, 16)).unwrap();
            let b = Tensor::from_vec(&[16], rng::normal_vec(&mut r, 16)).unwrap();
            let t = 1 + rng::index(&mut r, 5);
            let tape = Tape::new();
            let d = tape.leaf(&Tensor::from_vec(&[4], vec![0.1, -0.2, 0.3, 0.4]).unwrap());
            let pair = NoisedPair { x_t: a, xp_t: b, t };
            let loss = latent_loss(&tape, &den, &[pair], d).unwrap();
            assert!(loss.value().item() <= 0.0);
        }
    }

    #[test]
    fn latent_loss_rejects_trainable_models() {
        let den = tiny_denoiser(3, false);
        let x = Tensor::zeros(&[16]);
        let tape = Tape::new();
        let d = tape.leaf(&Tensor::zeros(&[4]));
        let pair = NoisedPair { x_t: x.clone(), xp_t: x, t: 1 };
        match latent_loss(&tape, &den, &[pair], d).unwrap_err() {
            Error::NotFrozen { unfrozen } => assert_eq!(unfrozen, 5),
            other => panic!("expected NotFrozen, got {other:?}"),
        }
    }

    #[test]
    fn latent_loss_matches_straight_line_recomputation() {
        // Oracle: the same value from the plain prediction API, no tape.
        let den = tiny_denoiser(5, true);
        let mut r = rng::stream(11, "test/oracle", 0);
        let x_t = Tensor::from_vec(&[16], rng::normal_vec(&mut r, 16)).unwrap();
        let xp_t = Tensor::from_vec(&[16], rng::normal_vec(&mut r, 16)).unwrap();
        let d_t = Tensor::from_vec(&[4], vec![0.4, -0.1, 0.25, -0.3]).unwrap();

        let a = den.predict(&x_t, 3, &d_t).unwrap();
        let b = den.predict(&xp_t, 3, &d_t).unwrap();
        let oracle: f64 = -a
            .data()
            .iter()
            .zip(b.data().iter())
            .map(|(p, q)| (q - p) * (q - p))
            .sum::<f64>();

        let tape = Tape::new();
        let d = tape.leaf(&d_t);
        let pair = NoisedPair { x_t, xp_t, t: 3 };
        let loss = latent_loss(&tape, &den, &[pair], d).unwrap();
        assert!((loss.value().item() - oracle).abs() < 1e-12);
    }

    #[test]
    fn semantic_loss_scores_exactly_one_on_identical_pairs() {
        let enc = tiny_encoder(2);
        let img = Tensor::from_vec(&[16], (0..16).map(|i| 0.05 * i as f64).collect()).unwrap();
        let tape = Tape::new();
        let d = tape.leaf(&Tensor::from_vec(&[4], vec![0.3, 0.1, -0.2, 0.5]).unwrap());
        let loss = semantic_loss(&tape, &enc, &[(img.clone(), img)], d).unwrap();
        assert_eq!(loss.value().item(), 1.0);
    }

    #[test]
    fn semantic_loss_best_case_is_zero() {
        // d parallel to the edited embedding, input embedding orthogonal
        // to d: 1 - 1 + 0.
        let e_x = unit(vec![0.0, 1.0, 0.0, 0.0]);
        let e_xp = unit(vec![1.0, 0.0, 0.0, 0.0]);
        let tape = Tape::new();
        let d = tape.leaf(&Tensor::from_vec(&[4], vec![2.0, 0.0, 0.0, 0.0]).unwrap());
        let loss = semantic_loss_from_embeddings(&tape, &[(e_x, e_xp)], d).unwrap();
        assert_eq!(loss.value().item(), 0.0);
    }

    #[test]
    fn semantic_loss_rejects_zero_direction() {
        let enc = tiny_encoder(2);
        let img = Tensor::full(&[16], 0.3);
        let tape = Tape::new();
        let d = tape.leaf(&Tensor::zeros(&[4]));
        assert!(matches!(
            semantic_loss(&tape, &enc, &[(img.clone(), img)], d).unwrap_err(),
            Error::ZeroNorm { .. }
        ));
    }

    #[test]
    fn semantic_loss_is_scale_invariant_in_d() {
        let e_x = unit(vec![0.3, -0.7, 0.2, 0.1]);
        let e_xp = unit(vec![-0.1, 0.4, 0.8, -0.2]);
        let base = vec![0.5, 0.25, -0.75, 1.0];
        let mut values = Vec::new();
        for alpha in [1.0, 0.01, 37.5] {
            let tape = Tape::new();
            let scaled: Vec<f64> = base.iter().map(|v| v * alpha).collect();
            let d = tape.leaf(&Tensor::from_vec(&[4], scaled).unwrap());
            let loss =
                semantic_loss_from_embeddings(&tape, &[(e_x.clone(), e_xp.clone())], d).unwrap();
            values.push(loss.value().item());
        }
        assert!((values[0] - values[1]).abs() < 1e-12);
        assert!((values[0] - values[2]).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn semantic_loss_stays_in_cosine_bounds(
            ex in proptest::collection::vec(-1.0f64..1.0, 4),
            exp in proptest::collection::vec(-1.0f64..1.0, 4),
            dv in proptest::collection::vec(-1.0f64..1.0, 4),
        ) {
            let nx = norm(&ex);
            let nxp = norm(&exp);
            let nd = norm(&dv);
            prop_assume!(nx > 1e-3 && nxp > 1e-3 && nd > 1e-3);
            let tape = Tape::new();
            let d = tape.leaf(&Tensor::from_vec(&[4], dv).unwrap());
            let e_x = Tensor::from_vec(&[4], ex).unwrap();
            let e_xp = Tensor::from_vec(&[4], exp).unwrap();
            let loss = semantic_loss_from_embeddings(&tape, &[(e_x, e_xp)], d).unwrap();
            let v = loss.value().item();
            prop_assert!((-1.0 - 1e-9..=3.0 + 1e-9).contains(&v));
        }
    }

    #[test]
    fn combined_gradient_matches_finite_differences() {
        let den = tiny_denoiser(7, true);
        let enc = tiny_encoder(7);
        let mut r = rng::stream(13, "test/fd", 0);
        let x = Tensor::from_vec(&[16], rng::normal_vec(&mut r, 16)).unwrap();
        let xp = Tensor::from_vec(&[16], rng::normal_vec(&mut r, 16)).unwrap();
        let noised = NoisedPair {
            x_t: Tensor::from_vec(&[16], rng::normal_vec(&mut r, 16)).unwrap(),
            xp_t: Tensor::from_vec(&[16], rng::normal_vec(&mut r, 16)).unwrap(),
            t: 4,
        };
        let d0 = vec![0.21, -0.4, 0.05, 0.33];

        let eval = |dv: &[f64]| -> f64 {
            let tape = Tape::new();
            let d = tape.leaf(&Tensor::from_vec(&[4], dv.to_vec()).unwrap());
            let sem =
                semantic_loss(&tape, &enc, &[(x.clone(), xp.clone())], d).unwrap();
            let lat = latent_loss(&tape, &den, &[noised.clone()], d).unwrap();
            sem.add(lat).unwrap().value().item()
        };

        let tape = Tape::new();
        let d_leaf = Tensor::from_vec(&[4], d0.clone()).unwrap().with_grad();
        let d = tape.leaf(&d_leaf);
        let sem = semantic_loss(&tape, &enc, &[(x.clone(), xp.clone())], d).unwrap();
        let lat = latent_loss(&tape, &den, &[noised.clone()], d).unwrap();
        let loss = sem.add(lat).unwrap();
        tape.backward(loss).unwrap();
        let grad = tape.grad(d).unwrap();

        let h = 1e-6;
        for j in 0..4 {
            let mut plus = d0.clone();
            plus[j] += h;
            let mut minus = d0.clone();
            minus[j] -= h;
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let g = grad.data()[j];
            let rel = (fd - g).abs() / g.abs().max(fd.abs()).max(1e-12);
            assert!(rel < 1e-5, "component {j}: analytic {g}, finite difference {fd}");
        }
    }

    fn tiny_pairs(n: usize) -> (WorldConfig, PairSet) {
        let world = tiny_world();
        let dir = lookup_direction("radius").unwrap();
        let pairs = make_pairs(&world, 42, n, &dir);
        (world, pairs)
    }

    fn tiny_cfg(n: usize) -> TransferConfig {
        TransferConfig {
            n_pairs: n,
            batch: 4,
            iterations: 40,
            lr: 5e-3,
            ..TransferConfig::default()
        }
    }

    #[test]
    fn learn_direction_is_deterministic_and_unit_normalized() {
        let (_world, pairs) = tiny_pairs(6);
        let den = tiny_denoiser(1, false);
        let enc = tiny_encoder(1);
        let cfg = tiny_cfg(6);

        let (da, ra) = learn_direction(&pairs, &den, &enc, &cfg, "00ff").unwrap();
        let (db, rb) = learn_direction(&pairs, &den, &enc, &cfg, "00ff").unwrap();
        assert_eq!(da.d, db.d);
        assert_eq!(ra.trajectory, rb.trajectory);
        assert_eq!(ra.trajectory.len(), 40);

        assert!((norm(da.d.data()) - 1.0).abs() < 1e-12);
        assert!(da.provenance.raw_norm > 0.0);
        assert_eq!(da.provenance.completed_iterations, 40);
        assert_eq!(da.provenance.n_pairs, 6);
        assert_eq!(da.provenance.config_hash, "00ff");
        assert_eq!(da.name, "radius");

        // The caller's models stay trainable and unchanged.
        assert!(den.net.params().iter().all(|p| p.requires_grad));
    }

    #[test]
    fn learn_direction_flags_norm_ceiling() {
        let (_world, pairs) = tiny_pairs(4);
        let den = tiny_denoiser(1, false);
        let enc = tiny_encoder(1);
        let cfg = TransferConfig { norm_ceiling: 1e-6, ..tiny_cfg(4) };
        let (d, report) = learn_direction(&pairs, &den, &enc, &cfg, "00").unwrap();
        assert!(d.provenance.norm_ceiling_hit);
        assert!(report.max_norm > 1e-6);
    }

    #[test]
    fn learn_direction_aborts_on_non_finite_loss_with_last_good() {
        // Poison one input image; the loss goes NaN on the first batch
        // that samples it, and the previous iterate comes back intact.
        let (_world, mut pairs) = tiny_pairs(4);
        pairs.inputs[0] = Tensor::full(&[16], f64::NAN);
        let den = tiny_denoiser(1, false);
        let enc = tiny_encoder(1);
        match learn_direction(&pairs, &den, &enc, &tiny_cfg(4), "00").unwrap_err() {
            Error::NonFiniteLoss { iteration, last_good } => {
                assert!(iteration < 40);
                assert!(last_good.d.data().iter().all(|v| v.is_finite()));
                assert!((norm(last_good.d.data()) - 1.0).abs() < 1e-12);
                assert_eq!(last_good.provenance.completed_iterations, iteration);
            }
            other => panic!("expected NonFiniteLoss, got {other:?}"),
        }
    }

    #[test]
    fn learn_direction_rejects_a_blown_up_direction() {
        // An absurd learning rate inflates |d| past f64 range in one
        // step; the norm overflow surfaces as a degenerate direction
        // rather than a silent all-zero unit vector.
        let (_world, pairs) = tiny_pairs(4);
        let den = tiny_denoiser(1, false);
        let enc = tiny_encoder(1);
        let cfg = TransferConfig { lr: 1e300, ..tiny_cfg(4) };
        match learn_direction(&pairs, &den, &enc, &cfg, "00").unwrap_err() {
            Error::DegenerateDirection { norm } => assert!(!norm.is_finite()),
            Error::NonFiniteLoss { .. } => {}
            other => panic!("expected a divergence error, got {other:?}"),
        }
    }

    #[test]
    fn learn_direction_validates_config() {
        let (_world, pairs) = tiny_pairs(4);
        let den = tiny_denoiser(1, false);
        let enc = tiny_encoder(1);
        for bad in [
            TransferConfig { n_pairs: 0, ..tiny_cfg(4) },
            TransferConfig { lr: -1.0, ..tiny_cfg(4) },
            TransferConfig { w_sem: -0.5, ..tiny_cfg(4) },
            TransferConfig { t_range: Some((0, 3)), ..tiny_cfg(4) },
            TransferConfig { t_range: Some((2, 99)), ..tiny_cfg(4) },
            TransferConfig { n_pairs: 5, ..tiny_cfg(4) },
        ] {
            assert!(matches!(
                learn_direction(&pairs, &den, &enc, &bad, "00").unwrap_err(),
                Error::BadConfig { .. }
            ));
        }
    }

    #[test]
    fn direction_files_round_trip() {
        let (_world, pairs) = tiny_pairs(4);
        let den = tiny_denoiser(1, false);
        let enc = tiny_encoder(1);
        let (dir, _) = learn_direction(&pairs, &den, &enc, &tiny_cfg(4), "abcd").unwrap();

        let tmp = tempdir().unwrap();
        let p1 = tmp.path().join("radius.gtd");
        let p2 = tmp.path().join("radius2.gtd");
        save_direction(&p1, &dir).unwrap();
        let loaded = load_direction(&p1, 4).unwrap();
        save_direction(&p2, &loaded).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());

        assert_eq!(loaded.name, dir.name);
        assert_eq!(loaded.provenance, dir.provenance);
        assert_eq!(loaded.recommended_lambda_e, dir.recommended_lambda_e);
        assert_eq!(loaded.recommended_window, dir.recommended_window);
        // Values only round through f32 once.
        for (a, b) in loaded.d.data().iter().zip(dir.d.data().iter()) {
            assert_eq!(*a, (*b as f32) as f64);
        }

        assert!(matches!(
            load_direction(&p1, 7).unwrap_err(),
            Error::KMismatch { expected: 7, found: 4 }
        ));
    }
}
