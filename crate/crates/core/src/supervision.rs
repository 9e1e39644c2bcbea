//! Grid supervision maps built from OCR line boxes, and the layout
//! pretraining losses.
//!
//! Grid cell `(i, j)` covers rows `[i/H, (i+1)/H)` and columns
//! `[j/W, (j+1)/W)` of the unit page; its centre is `(i + 0.5, j + 0.5)` in
//! grid units.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::doc::BBox;
use crate::numeric::format_g17;

pub const DEFAULT_LAMBDA_C: f64 = 0.2;
pub const SMOOTHING_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SupervisionError {
    #[error("E_SHAPE_MISMATCH: {0}")]
    ShapeMismatch(String),
    #[error("invalid grid map: {0}")]
    Invalid(String),
}

/// `H×W` non-negative values, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridMap {
    pub h: usize,
    pub w: usize,
    pub values: Vec<f64>,
}

impl GridMap {
    pub fn new(h: usize, w: usize, values: Vec<f64>) -> Result<Self, SupervisionError> {
        if h == 0 || w == 0 {
            return Err(SupervisionError::Invalid("grid dimensions must be at least 1".into()));
        }
        if values.len() != h * w {
            return Err(SupervisionError::Invalid(format!("{} values for a {h}x{w} grid", values.len())));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(SupervisionError::Invalid("values must be finite and non-negative".into()));
        }
        Ok(GridMap { h, w, values })
    }

    pub fn uniform(h: usize, w: usize) -> Self {
        let n = h * w;
        GridMap { h, w, values: vec![1.0 / n as f64; n] }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.w + j]
    }

    pub fn sum(&self) -> f64 {
        self.values.iter().sum()
    }

    fn same_shape(&self, other: &GridMap) -> Result<(), SupervisionError> {
        if self.h != other.h || self.w != other.w {
            return Err(SupervisionError::ShapeMismatch(format!("{}x{} vs {}x{}", self.h, self.w, other.h, other.w)));
        }
        Ok(())
    }

    /// `(P + ε) / (1 + ε·H·W)`: strictly positive, still sums to 1.
    pub fn smoothed(&self, eps: f64) -> GridMap {
        let denom = 1.0 + eps * self.values.len() as f64;
        GridMap { h: self.h, w: self.w, values: self.values.iter().map(|p| (p + eps) / denom).collect() }
    }

    /// Sums 2×2 blocks; requires even dimensions.
    pub fn coarsen2(&self) -> GridMap {
        let (h, w) = (self.h / 2, self.w / 2);
        let mut values = vec![0.0; h * w];
        for i in 0..h {
            for j in 0..w {
                values[i * w + j] = self.get(2 * i, 2 * j)
                    + self.get(2 * i, 2 * j + 1)
                    + self.get(2 * i + 1, 2 * j)
                    + self.get(2 * i + 1, 2 * j + 1);
            }
        }
        GridMap { h, w, values }
    }

    /// `{"h":H,"w":W,"values":[...]}` with every float at 17 significant
    /// digits.
    pub fn to_json(&self) -> String {
        let mut s = format!("{{\"h\":{},\"w\":{},\"values\":[", self.h, self.w);
        for (k, v) in self.values.iter().enumerate() {
            if k > 0 {
                s.push(',');
            }
            let _ = write!(s, "{}", format_g17(*v));
        }
        s.push_str("]}");
        s
    }

    pub fn from_json(text: &str) -> Result<GridMap, SupervisionError> {
        let raw: GridMap = serde_json::from_str(text).map_err(|e| SupervisionError::Invalid(e.to_string()))?;
        GridMap::new(raw.h, raw.w, raw.values)
    }

    /// Nested rows, for hosts that want `values[i][j]`.
    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.values.chunks(self.w).map(<[f64]>::to_vec).collect()
    }
}

fn overlap_1d(a0: f64, a1: f64, b0: f64, b1: f64) -> f64 {
    (a1.min(b1) - a0.max(b0)).max(0.0)
}

/// Rasterizes boxes given in unit-square coordinates: each cell accumulates
/// the area of its intersection with every box, then the grid is normalized
/// to sum to 1. No boxes (or zero total area) yields the uniform map.
pub fn build_supervision_map_normalized(boxes: &[BBox], h: usize, w: usize) -> GridMap {
    assert!(h >= 1 && w >= 1, "grid dimensions must be at least 1");
    let mut values = vec![0.0; h * w];
    for b in boxes {
        // Only cells the box can touch.
        let i0 = ((b.y1 * h as f64).floor().max(0.0) as usize).min(h - 1);
        let i1 = ((b.y2 * h as f64).ceil().max(0.0) as usize).min(h);
        let j0 = ((b.x1 * w as f64).floor().max(0.0) as usize).min(w - 1);
        let j1 = ((b.x2 * w as f64).ceil().max(0.0) as usize).min(w);
        for i in i0..i1 {
            let dy = overlap_1d(b.y1, b.y2, i as f64 / h as f64, (i + 1) as f64 / h as f64);
            if dy == 0.0 {
                continue;
            }
            for j in j0..j1 {
                let dx = overlap_1d(b.x1, b.x2, j as f64 / w as f64, (j + 1) as f64 / w as f64);
                values[i * w + j] += dx * dy;
            }
        }
    }
    let total: f64 = values.iter().sum();
    if total.is_nan() || total <= 0.0 {
        return GridMap::uniform(h, w);
    }
    values.iter_mut().for_each(|v| *v /= total);
    GridMap { h, w, values }
}

/// Same as [`build_supervision_map_normalized`] for pixel boxes on a
/// `page_w × page_h` page.
pub fn build_supervision_map(boxes: &[BBox], page: (f64, f64), grid: (usize, usize)) -> GridMap {
    let norm: Vec<BBox> = boxes.iter().map(|b| b.normalized(page.0, page.1)).collect();
    build_supervision_map_normalized(&norm, grid.0, grid.1)
}

/// `Σ Y·ln(Y/P)` with `0·ln 0 = 0`. Infinite if `P` is zero where `Y` is not.
pub fn kl_loss(y: &GridMap, p: &GridMap) -> Result<f64, SupervisionError> {
    y.same_shape(p)?;
    Ok(y.values.iter().zip(&p.values).filter(|(yv, _)| **yv > 0.0).map(|(yv, pv)| yv * (yv / pv).ln()).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Centroid {
    /// Row coordinate in grid units.
    pub u: f64,
    /// Column coordinate in grid units.
    pub v: f64,
}

/// Expected cell centre under `m`.
pub fn centroid(m: &GridMap) -> Centroid {
    let (mut u, mut v) = (0.0, 0.0);
    for i in 0..m.h {
        for j in 0..m.w {
            let p = m.get(i, j);
            u += p * (i as f64 + 0.5);
            v += p * (j as f64 + 0.5);
        }
    }
    Centroid { u, v }
}

/// Squared distance between the centroids of `p` and `y`.
pub fn center_loss(p: &GridMap, y: &GridMap) -> Result<f64, SupervisionError> {
    p.same_shape(y)?;
    let (a, b) = (centroid(p), centroid(y));
    Ok((a.u - b.u).powi(2) + (a.v - b.v).powi(2))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossReport {
    pub kl: f64,
    pub center: f64,
    pub total: f64,
    pub lambda_c: f64,
}

/// `kl + lambda_c · center`. `p` is used as given; smooth it first if it may
/// contain zeros.
pub fn total_loss(y: &GridMap, p: &GridMap, lambda_c: f64) -> Result<LossReport, SupervisionError> {
    let kl = kl_loss(y, p)?;
    let center = center_loss(p, y)?;
    Ok(LossReport { kl, center, total: kl + lambda_c * center, lambda_c })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn unit(x1: f64, y1: f64, x2: f64, y2: f64) -> BBox {
        BBox::new(x1, y1, x2, y2)
    }

    #[test]
    fn one_box_on_one_cell() {
        let m = build_supervision_map_normalized(&[unit(0.0, 0.0, 0.5, 0.5)], 2, 2);
        assert_eq!(m.values, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn no_boxes_is_uniform() {
        let m = build_supervision_map_normalized(&[], 3, 5);
        assert!(m.values.iter().all(|v| *v == 1.0 / 15.0));
    }

    #[test]
    fn half_boxes_against_monte_carlo() {
        // Left box covers half of the left cell, right box the same area of
        // the right cell.
        let boxes = [unit(0.0, 0.0, 0.25, 1.0), unit(0.6, 0.0, 0.85, 1.0)];
        let m = build_supervision_map_normalized(&boxes, 1, 2);
        assert!((m.values[0] - 0.5).abs() < 1e-15 && (m.values[1] - 0.5).abs() < 1e-15);

        // Stratified point sampling of the same boxes.
        let n = 400;
        let mut hits = [0usize; 2];
        for a in 0..n {
            for b in 0..n {
                let (x, y) = ((a as f64 + 0.5) / n as f64, (b as f64 + 0.5) / n as f64);
                for bx in &boxes {
                    if x >= bx.x1 && x < bx.x2 && y >= bx.y1 && y < bx.y2 {
                        hits[usize::from(x >= 0.5)] += 1;
                    }
                }
            }
        }
        let total = (hits[0] + hits[1]) as f64;
        assert!((hits[0] as f64 / total - m.values[0]).abs() < 1e-2);
    }

    #[test]
    fn pixel_boxes_are_normalized_by_page() {
        let m = build_supervision_map(&[BBox::new(0.0, 0.0, 50.0, 40.0)], (100.0, 80.0), (2, 2));
        assert_eq!(m.values, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn kl_examples() {
        let y = GridMap::new(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let p = GridMap::uniform(2, 2);
        assert_eq!(kl_loss(&y, &y).unwrap(), 0.0);
        let direct: f64 =
            y.values.iter().zip(&p.values).filter(|(a, _)| **a > 0.0).map(|(a, b)| a * (a / b).ln()).sum();
        assert!((kl_loss(&y, &p).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert_eq!(kl_loss(&y, &p).unwrap(), direct);
        assert!(matches!(kl_loss(&y, &GridMap::uniform(2, 3)), Err(SupervisionError::ShapeMismatch(_))));
    }

    #[test]
    fn centroid_examples() {
        let one_hot = GridMap::new(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(centroid(&one_hot), Centroid { u: 0.5, v: 0.5 });
        assert_eq!(centroid(&GridMap::uniform(2, 2)), Centroid { u: 1.0, v: 1.0 });
        let m = GridMap::new(2, 2, vec![0.75, 0.0, 0.0, 0.25]).unwrap();
        assert_eq!(centroid(&m), Centroid { u: 0.75 * 0.5 + 0.25 * 1.5, v: 0.75 * 0.5 + 0.25 * 1.5 });
        assert_eq!(centroid(&m).u, 0.75);
    }

    #[test]
    fn center_loss_examples() {
        let one_hot = GridMap::new(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let uni = GridMap::uniform(2, 2);
        assert_eq!(center_loss(&uni, &uni).unwrap(), 0.0);
        assert_eq!(center_loss(&uni, &one_hot).unwrap(), 0.5);
        assert_eq!(center_loss(&one_hot, &uni).unwrap(), 0.5);
    }

    #[test]
    fn total_loss_examples() {
        let y = GridMap::new(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let p = GridMap::uniform(2, 2);
        let r = total_loss(&y, &p, DEFAULT_LAMBDA_C).unwrap();
        assert!((r.kl - 1.3862944).abs() < 1e-7);
        assert_eq!(r.center, 0.5);
        assert!((r.total - 1.4862944).abs() < 1e-7);
        assert_eq!(r.total, r.kl + 0.2 * r.center);
        assert_eq!(total_loss(&y, &p, 0.0).unwrap().total, r.kl);
        assert_eq!(total_loss(&p, &p, 0.2).unwrap().total, 0.0);
    }

    #[test]
    fn smoothing_keeps_a_distribution() {
        let y = GridMap::new(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let s = y.smoothed(SMOOTHING_EPS);
        assert!(s.values.iter().all(|v| *v > 0.0));
        assert!((s.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn json_round_trip_is_bit_exact() {
        let m = build_supervision_map_normalized(&[unit(0.1, 0.13, 0.77, 0.31), unit(0.2, 0.5, 0.3, 0.9)], 3, 4);
        let back = GridMap::from_json(&m.to_json()).unwrap();
        assert_eq!(back, m);
    }

    fn arb_box() -> impl Strategy<Value = BBox> {
        (0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0).prop_filter_map("degenerate", |(a, b, c, d)| {
            let (x1, x2) = (a.min(b), a.max(b));
            let (y1, y2) = (c.min(d), c.max(d));
            (x1 < x2 && y1 < y2).then(|| BBox::new(x1, y1, x2, y2))
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn maps_normalize(boxes in prop::collection::vec(arb_box(), 0..8), h in 1usize..9, w in 1usize..9) {
            let m = build_supervision_map_normalized(&boxes, h, w);
            prop_assert!((m.sum() - 1.0).abs() < 1e-9);
            prop_assert!(m.values.iter().all(|v| *v >= 0.0));
        }

        #[test]
        fn duplicating_boxes_changes_nothing(boxes in prop::collection::vec(arb_box(), 1..6)) {
            let once = build_supervision_map_normalized(&boxes, 4, 4);
            let mut twice = boxes.clone();
            twice.extend(boxes.iter().copied());
            let doubled = build_supervision_map_normalized(&twice, 4, 4);
            for (a, b) in once.values.iter().zip(&doubled.values) {
                prop_assert!((a - b).abs() < 1e-12);
            }
        }

        #[test]
        fn refinement_consistency(boxes in prop::collection::vec(arb_box(), 1..6), h in 1usize..5, w in 1usize..5) {
            let fine = build_supervision_map_normalized(&boxes, 2 * h, 2 * w).coarsen2();
            let coarse = build_supervision_map_normalized(&boxes, h, w);
            for (a, b) in fine.values.iter().zip(&coarse.values) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        #[test]
        fn kl_is_non_negative(a in prop::collection::vec(0.0f64..1.0, 9), b in prop::collection::vec(0.001f64..1.0, 9)) {
            let sa: f64 = a.iter().sum();
            prop_assume!(sa > 0.0);
            let sb: f64 = b.iter().sum();
            let y = GridMap::new(3, 3, a.iter().map(|v| v / sa).collect()).unwrap();
            let p = GridMap::new(3, 3, b.iter().map(|v| v / sb).collect()).unwrap();
            prop_assert!(kl_loss(&y, &p).unwrap() >= -1e-15);
        }
    }
}
