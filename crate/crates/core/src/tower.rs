//! Layout tower: LoRA-adapted patch embeddings, positional scoring, softmax
//! pooling into one layout token, and its projection into the language
//! space. Gradients are derived by hand and checked against central finite
//! differences.

use ndarray::{Array1, Array2, Axis};
use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::codes::Code;
use crate::supervision::{GridMap, LossReport, SMOOTHING_EPS};

pub const DEFAULT_LR: f64 = 0.05;
pub const DEFAULT_HIDDEN: usize = 8;
pub const INIT_SCALE: f64 = 0.05;
pub const FD_STEP: f64 = 1e-5;
/// Relative errors are measured against `max(|analytic|, |numeric|, floor)`
/// so entries that are zero up to round-off do not blow up the ratio.
pub const GRAD_CHECK_FLOOR: f64 = 1e-6;
pub const GRAD_CHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TowerError {
    #[error("E_SHAPE_MISMATCH: {0}")]
    ShapeMismatch(String),
    #[error("E_NONFINITE: {0}")]
    NonFinite(String),
    #[error("invalid configuration: {0}")]
    Config(String),
}

impl TowerError {
    pub fn code(&self) -> Option<Code> {
        match self {
            TowerError::ShapeMismatch(_) => Some(Code::ShapeMismatch),
            TowerError::NonFinite(_) => Some(Code::NonFinite),
            TowerError::Config(_) => None,
        }
    }
}

/// `N×d` patch embeddings, row `i` is patch `i` in row-major grid order.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbeddings(pub Array2<f64>);

impl PatchEmbeddings {
    pub fn n(&self) -> usize {
        self.0.nrows()
    }

    pub fn d(&self) -> usize {
        self.0.ncols()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TowerShape {
    pub d: usize,
    pub rank: usize,
    pub hidden: usize,
    pub d_lm: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl TowerShape {
    pub fn n(&self) -> usize {
        self.grid_h * self.grid_w
    }

    fn check(&self) -> Result<(), TowerError> {
        if self.d == 0 || self.rank == 0 || self.hidden == 0 || self.d_lm == 0 || self.n() == 0 {
            return Err(TowerError::Config(format!("all dimensions must be at least 1: {self:?}")));
        }
        Ok(())
    }
}

/// Tower parameters. The same type carries gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct TowerParams {
    /// `r×d`.
    pub lora_a: Array2<f64>,
    /// `d×r`; the adapter is `ΔW = lora_b · lora_a`.
    pub lora_b: Array2<f64>,
    /// `N×d` positional table.
    pub pos_table: Array2<f64>,
    /// `m×d`.
    pub score_w1: Array2<f64>,
    pub score_b1: Array1<f64>,
    /// `m`, the single output row of the scoring network.
    pub score_w2: Array1<f64>,
    pub score_b2: f64,
    /// `d_lm×d`.
    pub proj: Array2<f64>,
    pub train_pos: bool,
}

/// 2-D sinusoidal table: the first half of the channels encodes the grid
/// row, the second half the column. An odd last channel stays zero.
pub fn sinusoidal_pos_table(grid_h: usize, grid_w: usize, d: usize) -> Array2<f64> {
    let half = d / 2;
    let mut t = Array2::zeros((grid_h * grid_w, d));
    let enc = |pos: f64, k: usize, width: usize| {
        let pair = (k / 2) as f64;
        let freq = 10000f64.powf(-2.0 * pair / width.max(1) as f64);
        if k.is_multiple_of(2) {
            (pos * freq).sin()
        } else {
            (pos * freq).cos()
        }
    };
    for i in 0..grid_h {
        for j in 0..grid_w {
            let row = i * grid_w + j;
            for k in 0..half {
                t[[row, k]] = enc(i as f64, k, half);
                t[[row, half + k]] = enc(j as f64, k, half);
            }
        }
    }
    t
}

fn uniform_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    let u = Uniform::new_inclusive(-scale, scale);
    Array2::from_shape_simple_fn((rows, cols), || u.sample(rng))
}

impl TowerParams {
    /// Seeded initialization: `lora_b = 0`, sinusoidal positions, everything
    /// else uniform in `[-0.05, 0.05]`, drawn in field order.
    pub fn init(shape: TowerShape, seed: u64) -> Result<Self, TowerError> {
        shape.check()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let lora_a = uniform_matrix(&mut rng, shape.rank, shape.d, INIT_SCALE);
        let score_w1 = uniform_matrix(&mut rng, shape.hidden, shape.d, INIT_SCALE);
        let score_b1 = uniform_matrix(&mut rng, 1, shape.hidden, INIT_SCALE).remove_axis(Axis(0));
        let score_w2 = uniform_matrix(&mut rng, 1, shape.hidden, INIT_SCALE).remove_axis(Axis(0));
        let score_b2 = uniform_matrix(&mut rng, 1, 1, INIT_SCALE)[[0, 0]];
        let proj = uniform_matrix(&mut rng, shape.d_lm, shape.d, INIT_SCALE);
        Ok(TowerParams {
            lora_a,
            lora_b: Array2::zeros((shape.d, shape.rank)),
            pos_table: sinusoidal_pos_table(shape.grid_h, shape.grid_w, shape.d),
            score_w1,
            score_b1,
            score_w2,
            score_b2,
            proj,
            train_pos: false,
        })
    }

    pub fn d(&self) -> usize {
        self.lora_a.ncols()
    }

    pub fn rank(&self) -> usize {
        self.lora_a.nrows()
    }

    pub fn hidden(&self) -> usize {
        self.score_w1.nrows()
    }

    pub fn d_lm(&self) -> usize {
        self.proj.nrows()
    }

    /// A zero tensor of every field, same shapes.
    pub fn zeros_like(&self) -> TowerParams {
        TowerParams {
            lora_a: Array2::zeros(self.lora_a.raw_dim()),
            lora_b: Array2::zeros(self.lora_b.raw_dim()),
            pos_table: Array2::zeros(self.pos_table.raw_dim()),
            score_w1: Array2::zeros(self.score_w1.raw_dim()),
            score_b1: Array1::zeros(self.score_b1.raw_dim()),
            score_w2: Array1::zeros(self.score_w2.raw_dim()),
            score_b2: 0.0,
            proj: Array2::zeros(self.proj.raw_dim()),
            train_pos: self.train_pos,
        }
    }

    fn check(&self) -> Result<(), TowerError> {
        let (d, r, m) = (self.d(), self.rank(), self.hidden());
        let ok = self.lora_b.dim() == (d, r)
            && self.pos_table.ncols() == d
            && self.score_w1.ncols() == d
            && self.score_b1.len() == m
            && self.score_w2.len() == m
            && self.proj.ncols() == d;
        if !ok || r == 0 || m == 0 {
            return Err(TowerError::ShapeMismatch("inconsistent parameter shapes".into()));
        }
        if self.tensors().iter().any(|(_, t)| t.iter().any(|x| !x.is_finite())) {
            return Err(TowerError::NonFinite("parameters contain non-finite values".into()));
        }
        Ok(())
    }

    /// Every field as a flat row-major slice, in a fixed order.
    pub fn tensors(&self) -> [(&'static str, &[f64]); 8] {
        [
            ("lora_a", self.lora_a.as_slice().expect("standard layout")),
            ("lora_b", self.lora_b.as_slice().expect("standard layout")),
            ("pos_table", self.pos_table.as_slice().expect("standard layout")),
            ("score_w1", self.score_w1.as_slice().expect("standard layout")),
            ("score_b1", self.score_b1.as_slice().expect("standard layout")),
            ("score_w2", self.score_w2.as_slice().expect("standard layout")),
            ("score_b2", std::slice::from_ref(&self.score_b2)),
            ("proj", self.proj.as_slice().expect("standard layout")),
        ]
    }

    pub fn tensors_mut(&mut self) -> [(&'static str, &mut [f64]); 8] {
        [
            ("lora_a", self.lora_a.as_slice_mut().expect("standard layout")),
            ("lora_b", self.lora_b.as_slice_mut().expect("standard layout")),
            ("pos_table", self.pos_table.as_slice_mut().expect("standard layout")),
            ("score_w1", self.score_w1.as_slice_mut().expect("standard layout")),
            ("score_b1", self.score_b1.as_slice_mut().expect("standard layout")),
            ("score_w2", self.score_w2.as_slice_mut().expect("standard layout")),
            ("score_b2", std::slice::from_mut(&mut self.score_b2)),
            ("proj", self.proj.as_slice_mut().expect("standard layout")),
        ]
    }

    fn is_trainable(&self, name: &str) -> bool {
        match name {
            "proj" => false,
            "pos_table" => self.train_pos,
            _ => true,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        let rows = |m: &Array2<f64>| m.outer_iter().map(|r| r.to_vec()).collect::<Vec<_>>();
        serde_json::json!({
            "lora_a": rows(&self.lora_a),
            "lora_b": rows(&self.lora_b),
            "pos_table": rows(&self.pos_table),
            "proj": rows(&self.proj),
            "score_b1": self.score_b1.to_vec(),
            "score_b2": self.score_b2,
            "score_w1": rows(&self.score_w1),
            "score_w2": self.score_w2.to_vec(),
            "train_pos": self.train_pos,
        })
    }

    pub fn from_json(v: &serde_json::Value) -> Result<Self, TowerError> {
        #[derive(Deserialize)]
        struct Wire {
            lora_a: Vec<Vec<f64>>,
            lora_b: Vec<Vec<f64>>,
            pos_table: Vec<Vec<f64>>,
            proj: Vec<Vec<f64>>,
            score_b1: Vec<f64>,
            score_b2: f64,
            score_w1: Vec<Vec<f64>>,
            score_w2: Vec<f64>,
            #[serde(default)]
            train_pos: bool,
        }
        fn mat(name: &str, rows: Vec<Vec<f64>>) -> Result<Array2<f64>, TowerError> {
            let cols = rows.first().map_or(0, Vec::len);
            let n = rows.len();
            if rows.iter().any(|r| r.len() != cols) {
                return Err(TowerError::ShapeMismatch(format!("`{name}` has ragged rows")));
            }
            Array2::from_shape_vec((n, cols), rows.into_iter().flatten().collect())
                .map_err(|e| TowerError::ShapeMismatch(format!("`{name}`: {e}")))
        }
        let w: Wire = serde_json::from_value(v.clone()).map_err(|e| TowerError::Config(e.to_string()))?;
        let p = TowerParams {
            lora_a: mat("lora_a", w.lora_a)?,
            lora_b: mat("lora_b", w.lora_b)?,
            pos_table: mat("pos_table", w.pos_table)?,
            score_w1: mat("score_w1", w.score_w1)?,
            score_b1: Array1::from(w.score_b1),
            score_w2: Array1::from(w.score_w2),
            score_b2: w.score_b2,
            proj: mat("proj", w.proj)?,
            train_pos: w.train_pos,
        };
        p.check()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TowerOutput {
    /// Attention over patches, sums to 1.
    pub alpha: Array1<f64>,
    /// `Σ α_i h_i`.
    pub layout_token: Array1<f64>,
    /// `proj · layout_token`.
    pub projected: Array1<f64>,
    /// `alpha` as an `H×W` map.
    pub p_grid: GridMap,
}

/// Intermediates kept for the backward pass.
struct Cache {
    /// `V Aᵀ`, `N×r`.
    u: Array2<f64>,
    /// `z = h + pos`, `N×d`.
    z: Array2<f64>,
    /// `tanh(z W1ᵀ + b1)`, `N×m`.
    t: Array2<f64>,
    out: TowerOutput,
}

/// Numerically stable softmax over all entries.
pub fn softmax(s: &Array1<f64>) -> Array1<f64> {
    let max = s.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e = s.mapv(|x| (x - max).exp());
    let z = e.sum();
    e / z
}

fn forward_cached(v: &PatchEmbeddings, p: &TowerParams, grid: (usize, usize)) -> Result<Cache, TowerError> {
    p.check()?;
    let (gh, gw) = grid;
    let n = gh * gw;
    if n == 0 || v.n() != n {
        return Err(TowerError::ShapeMismatch(format!("{} patches for a {gh}x{gw} grid", v.n())));
    }
    if v.d() != p.d() || p.pos_table.nrows() != n {
        return Err(TowerError::ShapeMismatch(format!(
            "embeddings are {}x{}, parameters expect d={} and {} positions",
            v.n(),
            v.d(),
            p.d(),
            p.pos_table.nrows()
        )));
    }
    if v.0.iter().any(|x| !x.is_finite()) {
        return Err(TowerError::NonFinite("patch embeddings contain non-finite values".into()));
    }

    let u = v.0.dot(&p.lora_a.t());
    let h = &v.0 + &u.dot(&p.lora_b.t());
    let z = &h + &p.pos_table;
    let t = (z.dot(&p.score_w1.t()) + &p.score_b1).mapv(f64::tanh);
    let s = t.dot(&p.score_w2) + p.score_b2;
    let alpha = softmax(&s);
    let layout_token = alpha.dot(&h);
    let projected = p.proj.dot(&layout_token);

    if alpha.iter().chain(layout_token.iter()).chain(projected.iter()).any(|x| !x.is_finite()) {
        return Err(TowerError::NonFinite("forward pass produced non-finite values".into()));
    }
    let p_grid = GridMap { h: gh, w: gw, values: alpha.to_vec() };
    Ok(Cache { u, z, t, out: TowerOutput { alpha, layout_token, projected, p_grid } })
}

pub fn tower_forward(v: &PatchEmbeddings, p: &TowerParams, grid: (usize, usize)) -> Result<TowerOutput, TowerError> {
    forward_cached(v, p, grid).map(|c| c.out)
}

/// `[proj·L, t_1, …, t_k]`. Empty text is rejected.
pub fn project_and_concat(
    out: &TowerOutput,
    p: &TowerParams,
    text: &[Array1<f64>],
) -> Result<Vec<Array1<f64>>, TowerError> {
    if text.is_empty() {
        return Err(TowerError::ShapeMismatch("text sequence is empty".into()));
    }
    if out.layout_token.len() != p.d() {
        return Err(TowerError::ShapeMismatch("layout token does not match the projection".into()));
    }
    if let Some(bad) = text.iter().position(|t| t.len() != p.d_lm()) {
        return Err(TowerError::ShapeMismatch(format!("text embedding {bad} is not {}-dimensional", p.d_lm())));
    }
    let mut seq = Vec::with_capacity(1 + text.len());
    seq.push(p.proj.dot(&out.layout_token));
    seq.extend(text.iter().cloned());
    Ok(seq)
}

/// Loss of one page and the gradient of `L_total` with respect to every
/// parameter. Fields that are not trained (`proj`, and `pos_table` unless
/// `train_pos`) get zero gradient.
pub fn tower_loss_and_grads(
    v: &PatchEmbeddings,
    p: &TowerParams,
    y: &GridMap,
    lambda_c: f64,
) -> Result<(LossReport, TowerParams), TowerError> {
    let cache = forward_cached(v, p, (y.h, y.w))?;
    let (n, w) = (y.h * y.w, y.w);
    let alpha = &cache.out.alpha;
    let denom = 1.0 + SMOOTHING_EPS * n as f64;
    let ps = cache.out.p_grid.smoothed(SMOOTHING_EPS);
    let report =
        crate::supervision::total_loss(y, &ps, lambda_c).map_err(|e| TowerError::ShapeMismatch(e.to_string()))?;
    if !report.total.is_finite() {
        return Err(TowerError::NonFinite(format!("loss is {}", report.total)));
    }

    // dL/dPs: -Y/Ps from the KL term, 2(c_pred - c_gt)·(cell centre) from
    // the centre term.
    let cp = crate::supervision::centroid(&ps);
    let cy = crate::supervision::centroid(y);
    let g_alpha = Array1::from_shape_fn(n, |k| {
        let (i, j) = ((k / w) as f64 + 0.5, (k % w) as f64 + 0.5);
        let kl = if y.values[k] > 0.0 { -y.values[k] / ps.values[k] } else { 0.0 };
        let center = 2.0 * lambda_c * ((cp.u - cy.u) * i + (cp.v - cy.v) * j);
        (kl + center) / denom
    });
    let g_s = alpha * &(&g_alpha - alpha.dot(&g_alpha));

    let mut g = p.zeros_like();
    g.score_b2 = g_s.sum();
    g.score_w2 = cache.t.t().dot(&g_s);
    let g_t = g_s.view().insert_axis(Axis(1)).dot(&p.score_w2.view().insert_axis(Axis(0)));
    let g_a = g_t * cache.t.mapv(|x| 1.0 - x * x);
    g.score_w1 = g_a.t().dot(&cache.z);
    g.score_b1 = g_a.sum_axis(Axis(0));
    let g_z = g_a.dot(&p.score_w1);
    g.lora_b = g_z.t().dot(&cache.u);
    g.lora_a = g_z.dot(&p.lora_b).t().dot(&v.0);
    if p.train_pos {
        g.pos_table = g_z;
    }
    Ok((report, g))
}

/// Loss only, as used by the finite-difference check.
pub fn tower_loss(v: &PatchEmbeddings, p: &TowerParams, y: &GridMap, lambda_c: f64) -> Result<LossReport, TowerError> {
    let out = tower_forward(v, p, (y.h, y.w))?;
    crate::supervision::total_loss(y, &out.p_grid.smoothed(SMOOTHING_EPS), lambda_c)
        .map_err(|e| TowerError::ShapeMismatch(e.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheck {
    pub max_rel_error: f64,
    /// Field and flat index of the worst entry.
    pub worst: (String, usize),
    pub entries: usize,
}

/// Compares every trainable gradient entry with a central difference of
/// step [`FD_STEP`].
pub fn grad_check(v: &PatchEmbeddings, p: &TowerParams, y: &GridMap, lambda_c: f64) -> Result<GradCheck, TowerError> {
    let (_, g) = tower_loss_and_grads(v, p, y, lambda_c)?;
    let mut worst = GradCheck { max_rel_error: 0.0, worst: (String::new(), 0), entries: 0 };
    let mut probe = p.clone();
    for (f, (name, analytic)) in g.tensors().iter().enumerate() {
        if !p.is_trainable(name) {
            continue;
        }
        for (k, a) in analytic.iter().enumerate() {
            let orig = p.tensors()[f].1[k];
            probe.tensors_mut()[f].1[k] = orig + FD_STEP;
            let plus = tower_loss(v, &probe, y, lambda_c)?.total;
            probe.tensors_mut()[f].1[k] = orig - FD_STEP;
            let minus = tower_loss(v, &probe, y, lambda_c)?.total;
            probe.tensors_mut()[f].1[k] = orig;
            let numeric = (plus - minus) / (2.0 * FD_STEP);
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
            worst.entries += 1;
            if rel > worst.max_rel_error {
                worst.max_rel_error = rel;
                worst.worst = (name.to_string(), k);
            }
        }
    }
    Ok(worst)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub steps: usize,
    pub lambda_c: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { lr: DEFAULT_LR, steps: 500, lambda_c: crate::supervision::DEFAULT_LAMBDA_C }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainResult {
    pub params: TowerParams,
    /// Mean `L_total` over pages before step 0, then after every step:
    /// `steps + 1` values.
    pub curve: Vec<f64>,
}

fn batch_loss_and_grads(
    pages: &[(PatchEmbeddings, GridMap)],
    p: &TowerParams,
    lambda_c: f64,
) -> Result<(f64, TowerParams), TowerError> {
    let mut total = 0.0;
    let mut acc = p.zeros_like();
    for (v, y) in pages {
        let (r, g) = tower_loss_and_grads(v, p, y, lambda_c)?;
        total += r.total;
        for ((_, a), (_, b)) in acc.tensors_mut().into_iter().zip(g.tensors()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }
    let scale = 1.0 / pages.len() as f64;
    for (_, a) in acc.tensors_mut() {
        a.iter_mut().for_each(|x| *x *= scale);
    }
    Ok((total * scale, acc))
}

/// Full-batch gradient descent on the mean page loss.
pub fn train_tower(
    pages: &[(PatchEmbeddings, GridMap)],
    p0: &TowerParams,
    cfg: TrainConfig,
) -> Result<TrainResult, TowerError> {
    if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
        return Err(TowerError::Config(format!("learning rate must be finite and non-negative, got {}", cfg.lr)));
    }
    if pages.is_empty() {
        return Err(TowerError::Config("no pages to train on".into()));
    }
    let mut p = p0.clone();
    let mut curve = Vec::with_capacity(cfg.steps + 1);
    for step in 0..=cfg.steps {
        let (loss, g) = batch_loss_and_grads(pages, &p, cfg.lambda_c).map_err(|e| match e {
            TowerError::NonFinite(m) => TowerError::NonFinite(format!("step {step}: {m}")),
            other => other,
        })?;
        curve.push(loss);
        if step == cfg.steps {
            break;
        }
        let trainable: Vec<bool> = p.tensors().iter().map(|(name, _)| p.is_trainable(name)).collect();
        for (((_, w), (_, gw)), train) in p.tensors_mut().into_iter().zip(g.tensors()).zip(trainable) {
            if train {
                w.iter_mut().zip(gw).for_each(|(x, d)| *x -= cfg.lr * d);
            }
        }
    }
    Ok(TrainResult { params: p, curve })
}

/// Deterministic patch embeddings for a page whose layout is `y`: channel 0
/// carries the cell's text coverage relative to the densest cell, channel 1
/// its square root, the rest is seeded noise in `[-0.5, 0.5]`.
pub fn synthetic_patch_embeddings(y: &GridMap, d: usize, seed: u64) -> PatchEmbeddings {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Uniform::new_inclusive(-0.5, 0.5);
    let max = y.values.iter().copied().fold(0.0, f64::max);
    let mut m = Array2::zeros((y.values.len(), d));
    for (i, &yv) in y.values.iter().enumerate() {
        let c = if max > 0.0 { yv / max } else { 0.0 };
        for k in 0..d {
            m[[i, k]] = match k {
                0 => 4.0 * c - 2.0,
                1 => 2.0 * c.sqrt(),
                _ => noise.sample(&mut rng),
            };
        }
    }
    PatchEmbeddings(m)
}
