//! Small built-in documents and settings used by tests, the acceptance
//! suite and the demos.

use crate::doc::Document;

pub const TOY_TABLE_JSON: &str = include_str!("../fixtures/toy/docs/toy_table.json");
pub const INVOICE_JSON: &str = include_str!("../fixtures/toy/docs/invoice.json");

/// ACME annual report: header, a 3×3 Revenue/Cost/Profit by 2022 to 2024 table
/// (`t1`) and a footnote paragraph.
pub fn toy_table_doc() -> Document {
    Document::from_json(TOY_TABLE_JSON.as_bytes()).expect("toy table fixture is valid")
}

/// Invoice with three key/value regions.
pub fn invoice_doc() -> Document {
    Document::from_json(INVOICE_JSON.as_bytes()).expect("invoice fixture is valid")
}

use rand::distributions::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::supervision::{build_supervision_map, GridMap};
use crate::tower::{synthetic_patch_embeddings, PatchEmbeddings, TowerParams, TowerShape};

/// The tower demo setting: 4×4 grid, d = 8, rank 2, hidden width 8.
pub const TOWER_SHAPE: TowerShape = TowerShape { d: 8, rank: 2, hidden: 8, d_lm: 8, grid_h: 4, grid_w: 4 };

/// Supervision map of a document's OCR lines on an `h×w` grid.
pub fn page_supervision(doc: &Document, h: usize, w: usize) -> GridMap {
    let boxes: Vec<_> = doc.ocr_lines.iter().map(|l| l.bbox).collect();
    build_supervision_map(&boxes, (doc.page_width, doc.page_height), (h, w))
}

/// The synthetic pretraining page: the toy table's OCR layout with
/// embeddings from [`synthetic_patch_embeddings`] under `seed`.
pub fn synthetic_tower_page(seed: u64) -> (PatchEmbeddings, GridMap) {
    let y = page_supervision(&toy_table_doc(), TOWER_SHAPE.grid_h, TOWER_SHAPE.grid_w);
    (synthetic_patch_embeddings(&y, TOWER_SHAPE.d, seed), y)
}

/// Gradient-check setting: random embeddings in `[-1, 1]`, a random target
/// map with a few empty cells, a non-zero LoRA `B` and trainable positions,
/// so that every parameter receives gradient.
pub fn grad_check_fixture(seed: u64) -> (PatchEmbeddings, TowerParams, GridMap) {
    let shape = TOWER_SHAPE;
    let mut p = TowerParams::init(shape, seed).expect("fixture shape is valid");
    p.train_pos = true;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let small = Uniform::new_inclusive(-0.5, 0.5);
    p.lora_b.iter_mut().for_each(|x| *x = small.sample(&mut rng));
    p.score_w1.iter_mut().for_each(|x| *x = small.sample(&mut rng));
    p.score_w2.iter_mut().for_each(|x| *x = 2.0 * small.sample(&mut rng));
    let unit = Uniform::new_inclusive(-1.0, 1.0);
    let n = shape.n();
    let v = ndarray::Array2::from_shape_simple_fn((n, shape.d), || unit.sample(&mut rng));
    let mut y: Vec<f64> =
        (0..n).map(|k| if k % 5 == 3 { 0.0 } else { f64::abs(unit.sample(&mut rng)) + 0.05 }).collect();
    let s: f64 = y.iter().sum();
    y.iter_mut().for_each(|x| *x /= s);
    (PatchEmbeddings(v), p, GridMap { h: shape.grid_h, w: shape.grid_w, values: y })
}
