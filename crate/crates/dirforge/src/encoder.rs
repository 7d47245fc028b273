//! Style encoder: compresses a rendered frame into a short embedding
//! whose geometry tracks the world's style attributes.
//!
//! The network is a small MLP trained with a throwaway linear head that
//! regresses the span-normalized style vector of each frame. After
//! training the head is dropped; what the rest of the crate consumes is
//! the 16-dimensional embedding, unit-normalized so that cosine
//! geometry is well defined. The quality bar is behavioral, not a loss
//! value: a linear probe on held-out embeddings has to recover every
//! attribute (see [`probe_r2`]).

use crate::autodiff::{Activation, AdamW, Mlp, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::world::{render, sample_styles, Attribute, StyleVector, WorldConfig, ATTR_COUNT};

/// Width of the embedding space. Condition vectors fed to the noise
/// predictor live in this space too, so the constant is shared.
pub const EMBED_DIM: usize = 16;

/// Hidden width of the encoder MLP.
pub const HIDDEN: usize = 64;

/// Frame-to-embedding network.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub net: Mlp,
}

/// Knobs for [`train_encoder`].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderTrainConfig {
    /// Distinct rendered frames in the training pool.
    pub n_train: usize,
    /// Optimizer steps.
    pub iterations: usize,
    /// Frames per step, sampled from the pool with replacement.
    pub batch: usize,
    /// AdamW learning rate.
    pub lr: f64,
    /// Seeds init, data generation and batch order.
    pub seed: u64,
}

impl Default for EncoderTrainConfig {
    fn default() -> Self {
        EncoderTrainConfig { n_train: 512, iterations: 3000, batch: 16, lr: 3e-3, seed: 0 }
    }
}

/// Loss bookends from a training run.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EncoderTrainReport {
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Style vector rescaled so every attribute spans [0, 1]. Regression
/// targets and probe targets both use this scale so that R-squared is
/// comparable across attributes.
pub fn span_normalized(style: &StyleVector) -> [f64; ATTR_COUNT] {
    let mut out = [0.0; ATTR_COUNT];
    for (i, attr) in Attribute::ALL.iter().enumerate() {
        let (lo, _) = attr.range();
        out[i] = (style.as_array()[i] - lo) / attr.span();
    }
    out
}

impl Encoder {
    /// Fresh untrained encoder for frames of the given world.
    pub fn init(world: &WorldConfig, seed: u64) -> Encoder {
        let mut r = rng::stream(seed, "encoder/init", 0);
        Encoder { net: Mlp::init(&mut r, &[world.pixels(), HIDDEN, EMBED_DIM], Activation::Softplus) }
    }

    /// Embedding before normalization. This is the scale-carrying
    /// vector used by distance reports.
    pub fn embed_raw(&self, image: &Tensor) -> Result<Tensor> {
        let tape = Tape::new();
        let x = tape.constant(image);
        let e = self.net.bind(&tape).forward(x)?;
        Ok(e.value())
    }

    /// Unit-normalized embedding: the vector the editing machinery and
    /// the semantic loss consume. Errors if the raw embedding has no
    /// usable norm.
    pub fn embed(&self, image: &Tensor) -> Result<Tensor> {
        let raw = self.embed_raw(image)?;
        let norm = raw.l2_norm();
        if norm < 1e-12 {
            return Err(Error::ZeroNorm { left_norm: norm, right_norm: norm });
        }
        let data: Vec<f64> = raw.data().iter().map(|x| x / norm).collect();
        Tensor::from_vec(raw.shape(), data)
    }

    /// Serializes the trunk to the shared checkpoint container.
    pub fn save(&self, path: &std::path::Path, config_hash: &str) -> Result<()> {
        let provenance = serde_json::json!({
            "kind": "encoder",
            "sizes": self.net.sizes(),
            "activation": self.net.activation.to_string(),
        });
        let names = self.net.param_names();
        let params = self.net.params();
        let tensors: Vec<(&str, &Tensor)> =
            names.iter().map(String::as_str).zip(params.into_iter()).collect();
        crate::checkpoint::write_checkpoint(path, &tensors, provenance, config_hash)
    }

    /// Reads a file written by [`Encoder::save`] (values round through
    /// the container's f32 dtype).
    pub fn load(path: &std::path::Path) -> Result<Encoder> {
        let loaded = crate::checkpoint::read_checkpoint(path)?;
        let meta = &loaded.header.provenance;
        if meta["kind"] != "encoder" {
            return Err(Error::BadConfig {
                field: "kind".into(),
                reason: format!("expected an encoder file, found kind {}", meta["kind"]),
            });
        }
        let sizes: Vec<usize> = meta["sizes"]
            .as_array()
            .ok_or_else(|| Error::BadConfig {
                field: "sizes".into(),
                reason: "missing or not an array".into(),
            })?
            .iter()
            .filter_map(|v| v.as_u64())
            .map(|v| v as usize)
            .collect();
        if sizes.len() < 2 {
            return Err(Error::BadConfig {
                field: "sizes".into(),
                reason: format!("need at least input and output widths, got {sizes:?}"),
            });
        }
        let activation: Activation = meta["activation"].as_str().unwrap_or("softplus").parse()?;
        let mut r = rng::stream(0, "encoder/init", 0);
        let mut net = Mlp::init(&mut r, &sizes, activation);
        let names = net.param_names();
        loaded.expect_exact(&names.iter().map(String::as_str).collect::<Vec<_>>())?;
        for (name, param) in names.iter().zip(net.params_mut()) {
            let t = loaded.tensor(name)?;
            if t.shape() != param.shape() {
                return Err(Error::ShapeMismatch {
                    left: t.shape().to_vec(),
                    right: param.shape().to_vec(),
                });
            }
            *param = t.clone().with_grad();
        }
        Ok(Encoder { net })
    }
}

/// Trains an encoder on freshly rendered frames by regressing their
/// span-normalized styles through a linear head, then discards the
/// head. Deterministic given the config.
pub fn train_encoder(
    world: &WorldConfig,
    cfg: &EncoderTrainConfig,
) -> Result<(Encoder, EncoderTrainReport)> {
    let mut enc = Encoder::init(world, cfg.seed);
    let mut head = Mlp::init(
        &mut rng::stream(cfg.seed, "encoder/head", 0),
        &[EMBED_DIM, ATTR_COUNT],
        Activation::Softplus,
    );

    let styles = sample_styles(cfg.seed ^ 0x656e63, cfg.n_train);
    let frames: Vec<Tensor> = styles.iter().map(|s| render(world, s).image).collect();
    let targets: Vec<Vec<f64>> =
        styles.iter().map(|s| span_normalized(s).to_vec()).collect();

    let mut opt = AdamW::new(cfg.lr, 0.0)?;
    let mut batch_rng = rng::stream(cfg.seed, "encoder/batches", 0);
    let mut report = EncoderTrainReport { initial_loss: f64::NAN, final_loss: f64::NAN };

    for iter in 0..cfg.iterations {
        let tape = Tape::new();
        let bnet = enc.net.bind(&tape);
        let bhead = head.bind(&tape);
        let mut per_sample: Vec<Var<'_>> = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let i = rng::index(&mut batch_rng, cfg.n_train);
            let x = tape.constant(&frames[i]);
            let t = tape.constant_vec(targets[i].clone());
            let e = bnet.forward(x)?;
            // Regress from the unit-normalized embedding: inference
            // normalizes, so training must look through the same map or
            // scale-coded information (intensity, mostly) gets lost.
            let unit = e.div(e.sq_l2().sqrt().broadcast(EMBED_DIM))?;
            let yhat = bhead.forward(unit)?;
            per_sample.push(yhat.sub(t)?.sq_l2());
        }
        let mut total = per_sample[0];
        for l in &per_sample[1..] {
            total = total.add(*l)?;
        }
        let loss = total.scale(1.0 / (cfg.batch * ATTR_COUNT) as f64);
        let loss_val = loss.value().item();
        if iter == 0 {
            report.initial_loss = loss_val;
        }
        report.final_loss = loss_val;

        tape.backward(loss)?;
        let grads: Vec<Tensor> = bnet
            .grads(&tape)
            .into_iter()
            .chain(bhead.grads(&tape))
            .map(|g| g.expect("every parameter participates in the loss"))
            .collect();
        let mut params = enc.net.params_mut();
        params.extend(head.params_mut());
        let grad_refs: Vec<&Tensor> = grads.iter().collect();
        opt.step(&mut params, &grad_refs)?;
    }
    Ok((enc, report))
}

/// R-squared of a ridge-regularized linear probe (with bias) from
/// unit-normalized embeddings to each span-normalized attribute, on
/// `n` freshly sampled frames. Order follows [`Attribute::ALL`].
pub fn probe_r2(
    enc: &Encoder,
    world: &WorldConfig,
    n: usize,
    seed: u64,
) -> Result<[f64; ATTR_COUNT]> {
    let styles = sample_styles(seed, n);
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    let mut targets: Vec<[f64; ATTR_COUNT]> = Vec::with_capacity(n);
    for s in &styles {
        let e = enc.embed(&render(world, s).image)?;
        let mut row = e.data().to_vec();
        row.push(1.0);
        rows.push(row);
        targets.push(span_normalized(s));
    }

    let mut out = [0.0; ATTR_COUNT];
    for a in 0..ATTR_COUNT {
        let y: Vec<f64> = targets.iter().map(|t| t[a]).collect();
        let w = crate::linalg::lstsq(&rows, &y, 1e-9)
            .expect("ridge-regularized normal equations are nonsingular");
        let mean = y.iter().sum::<f64>() / n as f64;
        let (mut ss_res, mut ss_tot) = (0.0, 0.0);
        for (row, yi) in rows.iter().zip(y.iter()) {
            let pred: f64 = row.iter().zip(w.iter()).map(|(x, wi)| x * wi).sum();
            ss_res += (yi - pred) * (yi - pred);
            ss_tot += (yi - mean) * (yi - mean);
        }
        out[a] = 1.0 - ss_res / ss_tot;
    }
    Ok(out)
}
