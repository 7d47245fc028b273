//! Procedural world: anisotropic Gaussian blobs with known attributes.
//!
//! Every image is a pure function of a six-float [`StyleVector`], so
//! ground truth is always available: [`read_attributes`] inverts the
//! renderer well enough to score any image, rendered or generated, and
//! [`registry`] names the attribute edits the rest of the crate learns
//! to reproduce.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::rng;

/// Pixel values live in [0, PIXEL_MAX]; the renderer clips there.
pub const PIXEL_MAX: f64 = 1.2;

pub const ATTR_COUNT: usize = 6;

/// The six style attributes, in canonical order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    CenterX,
    CenterY,
    Radius,
    Intensity,
    Aspect,
    Background,
}

impl Attribute {
    pub const ALL: [Attribute; ATTR_COUNT] = [
        Attribute::CenterX,
        Attribute::CenterY,
        Attribute::Radius,
        Attribute::Intensity,
        Attribute::Aspect,
        Attribute::Background,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Attribute::CenterX => "center_x",
            Attribute::CenterY => "center_y",
            Attribute::Radius => "radius",
            Attribute::Intensity => "intensity",
            Attribute::Aspect => "aspect",
            Attribute::Background => "background",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Attribute::ALL
            .into_iter()
            .find(|a| a.name() == name)
            .ok_or_else(|| Error::UnknownAttribute { name: name.to_string() })
    }

    pub fn index(self) -> usize {
        Attribute::ALL.iter().position(|a| *a == self).expect("attribute in ALL")
    }

    /// Declared sampling range [lo, hi].
    pub fn range(self) -> (f64, f64) {
        match self {
            Attribute::CenterX | Attribute::CenterY => (0.2, 0.8),
            Attribute::Radius => (0.08, 0.3),
            Attribute::Intensity => (0.3, 1.0),
            Attribute::Aspect => (0.5, 2.0),
            Attribute::Background => (0.0, 0.25),
        }
    }

    pub fn span(self) -> f64 {
        let (lo, hi) = self.range();
        hi - lo
    }
}

/// Full description of one blob image, in image-fraction units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StyleVector {
    pub center_x: f64,
    pub center_y: f64,
    /// Gaussian sigma along x, as a fraction of image width.
    pub radius: f64,
    /// Peak height above background.
    pub intensity: f64,
    /// Sigma along y is `radius * aspect`.
    pub aspect: f64,
    pub background: f64,
}

impl StyleVector {
    pub fn as_array(&self) -> [f64; ATTR_COUNT] {
        [
            self.center_x,
            self.center_y,
            self.radius,
            self.intensity,
            self.aspect,
            self.background,
        ]
    }

    pub fn from_array(a: [f64; ATTR_COUNT]) -> Self {
        StyleVector {
            center_x: a[0],
            center_y: a[1],
            radius: a[2],
            intensity: a[3],
            aspect: a[4],
            background: a[5],
        }
    }

    pub fn get(&self, attr: Attribute) -> f64 {
        self.as_array()[attr.index()]
    }

    /// Midpoint of every declared range.
    pub fn midpoint() -> Self {
        let mut a = [0.0; ATTR_COUNT];
        for attr in Attribute::ALL {
            let (lo, hi) = attr.range();
            a[attr.index()] = 0.5 * (lo + hi);
        }
        StyleVector::from_array(a)
    }

    /// Clamps every component into its declared range; the flag reports
    /// whether anything moved.
    pub fn clamped(&self) -> (StyleVector, bool) {
        let mut a = self.as_array();
        let mut moved = false;
        for attr in Attribute::ALL {
            let (lo, hi) = attr.range();
            let v = a[attr.index()];
            let c = v.clamp(lo, hi);
            moved |= c != v;
            a[attr.index()] = c;
        }
        (StyleVector::from_array(a), moved)
    }

    /// self + scale * delta, componentwise (no clamping here; the
    /// renderer clamps and reports).
    pub fn shifted(&self, delta: &[f64; ATTR_COUNT], scale: f64) -> StyleVector {
        let mut a = self.as_array();
        for i in 0..ATTR_COUNT {
            a[i] += scale * delta[i];
        }
        StyleVector::from_array(a)
    }
}

/// A named attribute edit with a declared magnitude.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthDirection {
    pub name: String,
    /// Unit displacement in style space.
    pub delta: [f64; ATTR_COUNT],
    /// Magnitude applied when generating pairs.
    pub nominal_scale: f64,
}

impl GroundTruthDirection {
    fn axis(name: &str, attr: Attribute, nominal_scale: f64) -> Self {
        let mut delta = [0.0; ATTR_COUNT];
        delta[attr.index()] = 1.0;
        GroundTruthDirection { name: name.to_string(), delta, nominal_scale }
    }

    /// The attribute this direction mostly moves (largest |delta|).
    pub fn target_attribute(&self) -> Attribute {
        let mut best = 0;
        for i in 1..ATTR_COUNT {
            if self.delta[i].abs() > self.delta[best].abs() {
                best = i;
            }
        }
        Attribute::ALL[best]
    }
}

/// The four edits every end-to-end run learns and scores.
pub fn registry() -> Vec<GroundTruthDirection> {
    vec![
        GroundTruthDirection::axis("radius", Attribute::Radius, 0.05),
        GroundTruthDirection::axis("intensity", Attribute::Intensity, 0.18),
        GroundTruthDirection::axis("aspect", Attribute::Aspect, 0.35),
        GroundTruthDirection::axis("center_x", Attribute::CenterX, 0.12),
    ]
}

pub fn lookup_direction(name: &str) -> Result<GroundTruthDirection> {
    registry()
        .into_iter()
        .find(|d| d.name == name)
        .ok_or_else(|| Error::UnknownDirection { name: name.to_string() })
}

/// Rendering and read-back knobs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    /// Images are img_size x img_size, stored row-major, flattened.
    pub img_size: usize,
    /// Background = mean of this many smallest pixels.
    pub trim_k: usize,
    /// Peak-above-background needed to call a blob detected.
    pub detect_threshold: f64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig { img_size: 16, trim_k: 8, detect_threshold: 0.05 }
    }
}

impl WorldConfig {
    pub fn pixels(&self) -> usize {
        self.img_size * self.img_size
    }
}

/// A rendered image plus what was actually drawn.
#[derive(Debug, Clone)]
pub struct Rendered {
    /// Flattened row-major [img_size^2] tensor.
    pub image: Tensor,
    /// Style after clamping (what the pixels really show).
    pub style: StyleVector,
    /// True when clamping moved any component.
    pub clamped: bool,
}

/// Draws `pixel = background + intensity * exp(-q/2)` at pixel centers,
/// with `q = ((u-cx)/radius)^2 + ((v-cy)/(radius*aspect))^2`, clipped
/// into [0, PIXEL_MAX]. Out-of-range styles are clamped first.
pub fn render(cfg: &WorldConfig, style: &StyleVector) -> Rendered {
    let (s, clamped) = style.clamped();
    let w = cfg.img_size;
    let rx = s.radius;
    let ry = s.radius * s.aspect;
    let mut data = vec![0.0; w * w];
    for iy in 0..w {
        let v = (iy as f64 + 0.5) / w as f64;
        let dy = (v - s.center_y) / ry;
        for ix in 0..w {
            let u = (ix as f64 + 0.5) / w as f64;
            let dx = (u - s.center_x) / rx;
            let q = dx * dx + dy * dy;
            let val = s.background + s.intensity * (-q / 2.0).exp();
            data[iy * w + ix] = val.clamp(0.0, PIXEL_MAX);
        }
    }
    Rendered {
        image: Tensor::from_vec(&[w * w], data).expect("render shape consistent"),
        style: s,
        clamped,
    }
}

/// One style drawn uniformly from every declared range.
pub fn sample_style(rng: &mut ChaCha8Rng) -> StyleVector {
    let mut a = [0.0; ATTR_COUNT];
    for attr in Attribute::ALL {
        let (lo, hi) = attr.range();
        a[attr.index()] = rng::uniform(rng, lo, hi);
    }
    StyleVector::from_array(a)
}

/// Seeded batch of styles (stream key: seed, "world/styles", index 0).
pub fn sample_styles(seed: u64, n: usize) -> Vec<StyleVector> {
    let mut r = rng::stream(seed, "world/styles", 0);
    (0..n).map(|_| sample_style(&mut r)).collect()
}

/// Index-aligned (input, edited) image pairs for one direction.
#[derive(Debug, Clone)]
pub struct PairSet {
    pub direction: GroundTruthDirection,
    pub seed: u64,
    /// Input styles, pre-edit (all in range by construction).
    pub styles: Vec<StyleVector>,
    pub inputs: Vec<Tensor>,
    pub edited: Vec<Tensor>,
    /// How many edited styles the renderer had to clamp.
    pub clamped_edits: usize,
}

/// Renders n pairs (render(s), render(s + scale * delta)) with styles
/// drawn from (seed, "world/pairs/<name>").
pub fn make_pairs(cfg: &WorldConfig, seed: u64, n: usize, dir: &GroundTruthDirection) -> PairSet {
    let mut r = rng::stream(seed, &format!("world/pairs/{}", dir.name), 0);
    let mut styles = Vec::with_capacity(n);
    let mut inputs = Vec::with_capacity(n);
    let mut edited = Vec::with_capacity(n);
    let mut clamped_edits = 0;
    for _ in 0..n {
        let s = sample_style(&mut r);
        let e = s.shifted(&dir.delta, dir.nominal_scale);
        inputs.push(render(cfg, &s).image);
        let out = render(cfg, &e);
        clamped_edits += usize::from(out.clamped);
        edited.push(out.image);
        styles.push(s);
    }
    PairSet {
        direction: dir.clone(),
        seed,
        styles,
        inputs,
        edited,
        clamped_edits,
    }
}

/// Oracle read-back of [`read_attributes`].
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AttributeEstimate {
    pub style: StyleVector,
    /// 1.0 when a blob was detected, 0.0 otherwise (blob attributes are
    /// range midpoints in that case and must not be trusted).
    pub confidence: f64,
}

/// Blob parameters as fit internally (sigma per axis, not aspect form).
#[derive(Debug, Clone, Copy)]
struct BlobFit {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    intensity: f64,
}

impl BlobFit {
    /// Model value above background at pixel (u, v).
    fn eval(&self, u: f64, v: f64) -> f64 {
        let dx = (u - self.cx) / self.rx;
        let dy = (v - self.cy) / self.ry;
        self.intensity * (-(dx * dx + dy * dy) / 2.0).exp()
    }
}

fn pixel_coord(w: usize, idx: usize) -> (f64, f64) {
    let u = ((idx % w) as f64 + 0.5) / w as f64;
    let v = ((idx / w) as f64 + 0.5) / w as f64;
    (u, v)
}

/// Closed-form estimators inverting the renderer.
///
/// Background starts as a trimmed minimum (mean of the trim_k smallest
/// pixels). Center, radius and aspect start from the centroid and second
/// moments of the background-subtracted image, and intensity from the
/// peak. Border truncation biases those moments badly for large blobs,
/// so when enough unclipped pixels stand above background the estimate
/// is replaced by a weighted least-squares fit of the exactly-quadratic
/// log profile (two rounds, re-estimating background from the fit
/// residuals in between). The fit handles truncation by construction;
/// moments remain the fallback whenever the fit is degenerate.
///
/// Worst-case errors over the declared style space are recorded in the
/// oracle tolerance fixture.
pub fn read_attributes(cfg: &WorldConfig, image: &Tensor) -> AttributeEstimate {
    let w = cfg.img_size;
    let data = image.data();
    assert_eq!(data.len(), w * w, "image size does not match world config");

    // Background: mean of the trim_k smallest pixels.
    let mut sorted: Vec<f64> = data.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).expect("finite pixels"));
    let k = cfg.trim_k.clamp(1, sorted.len());
    let bg0: f64 = sorted[..k].iter().sum::<f64>() / k as f64;

    // Background-subtracted, floored at zero.
    let g: Vec<f64> = data.iter().map(|p| (p - bg0).max(0.0)).collect();

    let (mut peak, mut peak_idx) = (0.0, 0);
    for (i, v) in g.iter().enumerate() {
        if *v > peak {
            peak = *v;
            peak_idx = i;
        }
    }

    if peak < cfg.detect_threshold {
        let mid = StyleVector::midpoint();
        return AttributeEstimate {
            style: StyleVector { background: bg0.min(Attribute::Background.range().1), ..mid },
            confidence: 0.0,
        };
    }

    let mut best = moment_estimate(w, &g, peak, peak_idx);
    let mut bg = bg0;
    for _round in 0..2 {
        let Some(fit) = fit_log_quadratic(w, data, bg, peak) else { break };
        best = fit;
        if let Some(refined) = residual_background(w, data, &fit) {
            bg = refined;
        }
    }
    if let Some((fit, refined_bg)) = refine_joint(w, data, best, bg) {
        best = fit;
        bg = refined_bg;
    }

    AttributeEstimate {
        style: StyleVector {
            center_x: best.cx,
            center_y: best.cy,
            radius: best.rx,
            intensity: best.intensity,
            aspect: best.ry / best.rx,
            background: bg,
        },
        confidence: 1.0,
    }
}

/// Centroid / second-moment estimate of the background-subtracted image.
fn moment_estimate(w: usize, g: &[f64], peak: f64, peak_idx: usize) -> BlobFit {
    let mass: f64 = g.iter().sum();
    let (mut cx, mut cy) = (0.0, 0.0);
    for (i, gi) in g.iter().enumerate() {
        let (u, v) = pixel_coord(w, i);
        cx += u * gi;
        cy += v * gi;
    }
    cx /= mass;
    cy /= mass;
    let (mut var_x, mut var_y) = (0.0, 0.0);
    for (i, gi) in g.iter().enumerate() {
        let (u, v) = pixel_coord(w, i);
        var_x += (u - cx) * (u - cx) * gi;
        var_y += (v - cy) * (v - cy) * gi;
    }
    var_x /= mass;
    var_y /= mass;
    BlobFit {
        cx,
        cy,
        rx: var_x.sqrt().max(1e-4),
        ry: var_y.sqrt().max(1e-4),
        intensity: refine_peak(g, w, peak_idx).unwrap_or(peak),
    }
}

/// Weighted least squares on log(pixel - bg) over pixels that are both
/// unclipped and well above background:
///   log g = c0 + c1 u + c2 u^2 + c3 v + c4 v^2
/// which is exact for the renderer's blob, truncation included. Weights
/// g^2 account for log-domain noise amplification at small g.
fn fit_log_quadratic(w: usize, data: &[f64], bg: f64, peak: f64) -> Option<BlobFit> {
    let floor = (0.05 * peak).max(1e-4);
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut ys: Vec<f64> = Vec::new();
    let mut weights: Vec<f64> = Vec::new();
    for (i, p) in data.iter().enumerate() {
        let gi = p - bg;
        if gi < floor || *p >= PIXEL_MAX - 1e-9 {
            continue;
        }
        let (u, v) = pixel_coord(w, i);
        rows.push(vec![1.0, u, u * u, v, v * v]);
        ys.push(gi.ln());
        weights.push(gi * gi);
    }
    if rows.len() < 8 {
        return None;
    }
    // Fold weights into the rows/targets: minimize sum w (x.b - y)^2.
    for ((row, y), wt) in rows.iter_mut().zip(ys.iter_mut()).zip(weights.iter()) {
        let s = wt.sqrt();
        for x in row.iter_mut() {
            *x *= s;
        }
        *y *= s;
    }
    let c = crate::linalg::lstsq(&rows, &ys, 1e-9)?;
    if c[2] >= -1e-9 || c[4] >= -1e-9 {
        return None; // not concave: no Gaussian profile here
    }
    let rx2 = -1.0 / (2.0 * c[2]);
    let ry2 = -1.0 / (2.0 * c[4]);
    let cx = c[1] * rx2;
    let cy = c[3] * ry2;
    let log_i = c[0] + cx * cx / (2.0 * rx2) + cy * cy / (2.0 * ry2);
    let fit = BlobFit {
        cx,
        cy,
        rx: rx2.sqrt(),
        ry: ry2.sqrt(),
        intensity: log_i.exp(),
    };
    plausible(&fit).then_some(fit)
}

/// Sanity box for fitted blob parameters, comfortably wider than the
/// declared style ranges. Fits escaping it are degenerate (e.g. the
/// quadratic matched a clipped plateau) and get discarded.
fn plausible(fit: &BlobFit) -> bool {
    fit.rx > 0.01
        && fit.rx < 1.0
        && fit.ry > 0.01
        && fit.ry < 2.0
        && fit.cx > -0.5
        && fit.cx < 1.5
        && fit.cy > -0.5
        && fit.cy < 1.5
        && fit.intensity > 0.0
        && fit.intensity < 3.0
}

/// Joint Levenberg-Marquardt refinement of the full pixel model
///   p = bg + I exp(-(((u-cx)/rx)^2 + ((v-cy)/ry)^2) / 2)
/// over unclipped pixels. The renderer produces exactly this model, so
/// on clean frames the fit lands on the generating parameters up to
/// floating-point error. This is what breaks the tail/background
/// degeneracy: when a wide blob covers the whole frame every seed
/// estimator folds tail light into the background, but the joint fit
/// separates them because the tail curves and the background does not.
fn refine_joint(w: usize, data: &[f64], fit: BlobFit, bg: f64) -> Option<(BlobFit, f64)> {
    let unclipped: Vec<(f64, f64, f64)> = data
        .iter()
        .enumerate()
        .filter(|(_, p)| **p < PIXEL_MAX - 1e-9)
        .map(|(i, p)| {
            let (u, v) = pixel_coord(w, i);
            (u, v, *p)
        })
        .collect();
    if unclipped.len() < 8 {
        return None;
    }

    let sse = |th: &[f64; 6]| -> f64 {
        let f = BlobFit { cx: th[0], cy: th[1], rx: th[2], ry: th[3], intensity: th[4] };
        unclipped
            .iter()
            .map(|&(u, v, p)| {
                let r = th[5] + f.eval(u, v) - p;
                r * r
            })
            .sum()
    };

    let mut theta = [
        fit.cx,
        fit.cy,
        fit.rx.max(1e-3),
        fit.ry.max(1e-3),
        fit.intensity.max(1e-6),
        bg,
    ];
    let mut err = sse(&theta);
    let mut damp = 1e-4;
    'outer: for _ in 0..60 {
        if err < 1e-24 {
            break;
        }
        let [cx, cy, rx, ry, inten, b] = theta;
        // Normal equations J^T J and J^T r, accumulated without storing J.
        let mut jtj = [[0.0f64; 6]; 6];
        let mut jtr = [0.0f64; 6];
        for &(u, v, p) in &unclipped {
            let dx = (u - cx) / rx;
            let dy = (v - cy) / ry;
            let e = (-(dx * dx + dy * dy) / 2.0).exp();
            let r = b + inten * e - p;
            let j = [
                inten * e * dx / rx,
                inten * e * dy / ry,
                inten * e * dx * dx / rx,
                inten * e * dy * dy / ry,
                e,
                1.0,
            ];
            for a in 0..6 {
                jtr[a] += j[a] * r;
                for bi in a..6 {
                    jtj[a][bi] += j[a] * j[bi];
                }
            }
        }
        for a in 0..6 {
            for bi in 0..a {
                jtj[a][bi] = jtj[bi][a];
            }
        }
        // Retry the step with stronger damping until the error drops.
        for _ in 0..16 {
            let mut lhs = vec![0.0f64; 36];
            let mut rhs = vec![0.0f64; 6];
            for a in 0..6 {
                rhs[a] = -jtr[a];
                for bi in 0..6 {
                    lhs[a * 6 + bi] = jtj[a][bi];
                }
                lhs[a * 6 + a] += damp * jtj[a][a].max(1e-12);
            }
            let Some(step) = crate::linalg::solve(&mut lhs, &mut rhs, 6) else {
                damp *= 10.0;
                continue;
            };
            let mut trial = theta;
            for a in 0..6 {
                trial[a] += step[a];
            }
            trial[2] = trial[2].clamp(1e-3, 5.0);
            trial[3] = trial[3].clamp(1e-3, 5.0);
            trial[4] = trial[4].clamp(1e-6, 5.0);
            trial[5] = trial[5].clamp(-0.5, 1.0);
            let trial_err = sse(&trial);
            if trial_err < err {
                let rel = (err - trial_err) / err.max(1e-300);
                theta = trial;
                err = trial_err;
                damp = (damp / 3.0).max(1e-12);
                if rel < 1e-12 {
                    break 'outer;
                }
                continue 'outer;
            }
            damp *= 10.0;
        }
        break; // no step helped at any damping: converged
    }

    let refined = BlobFit {
        cx: theta[0],
        cy: theta[1],
        rx: theta[2],
        ry: theta[3],
        intensity: theta[4],
    };
    plausible(&refined).then_some((refined, theta[5]))
}

/// Background from fit residuals: the mean of the middle half of
/// (pixel - model), which ignores both clipped pixels and any region the
/// fit explains poorly.
fn residual_background(w: usize, data: &[f64], fit: &BlobFit) -> Option<f64> {
    let mut residuals: Vec<f64> = data
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let (u, v) = pixel_coord(w, i);
            p - fit.eval(u, v)
        })
        .collect();
    residuals.sort_by(|a, b| a.partial_cmp(b).expect("finite residuals"));
    let n = residuals.len();
    let mid = &residuals[n / 4..(3 * n) / 4];
    let bg = mid.iter().sum::<f64>() / mid.len() as f64;
    (-0.05..=0.5).contains(&bg).then_some(bg)
}

/// Sub-pixel peak height: fit a parabola to log g along each axis
/// through the maximum pixel. For a clean Gaussian the log profile is
/// exactly quadratic, so the vertex recovers the true peak even when it
/// falls between pixel centers. Returns None at borders or whenever the
/// profile is not locally concave (clipped or noisy peaks).
fn refine_peak(g: &[f64], w: usize, peak_idx: usize) -> Option<f64> {
    let (iy, ix) = (peak_idx / w, peak_idx % w);
    if ix == 0 || ix + 1 >= w || iy == 0 || iy + 1 >= w {
        return None;
    }
    let center = g[peak_idx];
    let xs = [g[peak_idx - 1], g[peak_idx + 1]];
    let ys = [g[peak_idx - w], g[peak_idx + w]];
    if center <= 0.0 || xs.iter().chain(ys.iter()).any(|v| *v <= 0.0) {
        return None;
    }
    let l0 = center.ln();
    let mut log_peak = l0;
    for [lo, hi] in [xs.map(f64::ln), ys.map(f64::ln)] {
        let a = 0.5 * (lo + hi) - l0;
        if a >= -1e-12 {
            return None; // not concave along this axis
        }
        let b = 0.5 * (hi - lo);
        log_peak += -b * b / (4.0 * a);
    }
    Some(log_peak.exp())
}
