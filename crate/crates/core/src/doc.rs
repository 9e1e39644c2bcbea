//! Structured page model.
//!
//! A [`Document`] is an OCR-annotated page: typed regions (with optional table
//! cells) plus the raw text-line boxes used to build layout supervision maps.
//! Documents are validated once on ingestion and immutable afterwards.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Closed vocabulary of region labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionType {
    Header,
    Footer,
    Title,
    Paragraph,
    Table,
    Cell,
    List,
    Figure,
    Caption,
    KeyValue,
}

impl RegionType {
    pub const ALL: [RegionType; 10] = [
        RegionType::Header,
        RegionType::Footer,
        RegionType::Title,
        RegionType::Paragraph,
        RegionType::Table,
        RegionType::Cell,
        RegionType::List,
        RegionType::Figure,
        RegionType::Caption,
        RegionType::KeyValue,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RegionType::Header => "header",
            RegionType::Footer => "footer",
            RegionType::Title => "title",
            RegionType::Paragraph => "paragraph",
            RegionType::Table => "table",
            RegionType::Cell => "cell",
            RegionType::List => "list",
            RegionType::Figure => "figure",
            RegionType::Caption => "caption",
            RegionType::KeyValue => "key_value",
        }
    }
}

impl fmt::Display for RegionType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("unknown region type `{0}`")]
pub struct UnknownRegionType(pub String);

impl FromStr for RegionType {
    type Err = UnknownRegionType;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        RegionType::ALL.iter().copied().find(|t| t.as_str() == s).ok_or_else(|| UnknownRegionType(s.to_string()))
    }
}

/// Axis-aligned box `(x1, y1, x2, y2)`; serialized as a 4-element array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(a: [f64; 4]) -> Self {
        BBox { x1: a[0], y1: a[1], x2: a[2], y2: a[3] }
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BBox { x1, y1, x2, y2 }
    }

    /// `0 <= x1 < x2 <= width` and likewise for y.
    pub fn fits(&self, width: f64, height: f64) -> bool {
        let all_finite = [self.x1, self.y1, self.x2, self.y2].iter().all(|v| v.is_finite());
        all_finite
            && 0.0 <= self.x1
            && self.x1 < self.x2
            && self.x2 <= width
            && 0.0 <= self.y1
            && self.y1 < self.y2
            && self.y2 <= height
    }

    /// Maps pixel coordinates onto the unit square.
    pub fn normalized(&self, width: f64, height: f64) -> BBox {
        BBox { x1: self.x1 / width, y1: self.y1 / height, x2: self.x2 / width, y2: self.y2 / height }
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub row: usize,
    pub col: usize,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub row_key: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub col_key: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Region {
    pub id: String,
    pub region_type: RegionType,
    pub bbox: BBox,
    pub text: String,
    pub key: Option<String>,
    pub cells: Option<Vec<Cell>>,
}

impl Region {
    /// Cells in row-major order; empty for non-table regions.
    pub fn cells(&self) -> &[Cell] {
        self.cells.as_deref().unwrap_or(&[])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcrLine {
    pub bbox: BBox,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Document {
    pub id: String,
    pub page_width: f64,
    pub page_height: f64,
    pub regions: Vec<Region>,
    pub ocr_lines: Vec<OcrLine>,
}

/// One problem found while validating a document, addressed by field path.
#[derive(Debug, Clone, PartialEq)]
pub struct DocIssue {
    pub path: String,
    pub message: String,
}

impl fmt::Display for DocIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Debug, Error)]
pub enum DocError {
    #[error("parse error at `{path}`: {message}")]
    Parse { path: String, message: String },
    #[error("invalid document: {}", join_issues(.0))]
    Invalid(Vec<DocIssue>),
}

fn join_issues(issues: &[DocIssue]) -> String {
    issues.iter().map(|i| i.to_string()).collect::<Vec<_>>().join("; ")
}

// On-disk layout.

#[derive(Debug, Serialize, Deserialize)]
struct PageFile {
    w: f64,
    h: f64,
}

#[derive(Debug, Serialize, Deserialize)]
struct RegionFile {
    id: String,
    #[serde(rename = "type")]
    region_type: RegionType,
    bbox: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    key: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cells: Option<Vec<Cell>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct DocumentFile {
    id: String,
    page: PageFile,
    regions: Vec<RegionFile>,
    #[serde(default)]
    ocr_lines: Vec<OcrLine>,
}

impl Document {
    /// Parses and validates a page file. Unrecognised fields are ignored.
    pub fn from_json(bytes: &[u8]) -> Result<Document, DocError> {
        let de = &mut serde_json::Deserializer::from_slice(bytes);
        let file: DocumentFile = serde_path_to_error::deserialize(de)
            .map_err(|e| DocError::Parse { path: e.path().to_string(), message: e.inner().to_string() })?;
        Document::from_file(file)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.to_file()).expect("document serialization is infallible")
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("document serialization is infallible")
    }

    fn to_file(&self) -> DocumentFile {
        DocumentFile {
            id: self.id.clone(),
            page: PageFile { w: self.page_width, h: self.page_height },
            regions: self
                .regions
                .iter()
                .map(|r| RegionFile {
                    id: r.id.clone(),
                    region_type: r.region_type,
                    bbox: r.bbox,
                    text: Some(r.text.clone()),
                    key: r.key.clone(),
                    cells: r.cells.clone(),
                })
                .collect(),
            ocr_lines: self.ocr_lines.clone(),
        }
    }

    fn from_file(file: DocumentFile) -> Result<Document, DocError> {
        let mut issues = Vec::new();
        let (w, h) = (file.page.w, file.page.h);
        if !(w.is_finite() && w > 0.0) {
            issues.push(issue("page.w", "page width must be positive"));
        }
        if !(h.is_finite() && h > 0.0) {
            issues.push(issue("page.h", "page height must be positive"));
        }

        let mut seen = HashSet::new();
        let mut regions = Vec::with_capacity(file.regions.len());
        for (i, raw) in file.regions.into_iter().enumerate() {
            let at = |field: &str| format!("regions[{i}].{field}");
            if raw.id.is_empty() {
                issues.push(issue(&at("id"), "region id must be non-empty"));
            } else if !seen.insert(raw.id.clone()) {
                issues.push(issue(&at("id"), &format!("duplicate region id `{}`", raw.id)));
            }
            if !raw.bbox.fits(w, h) {
                issues
                    .push(issue(&at("bbox"), &format!("box of region `{}` is degenerate or outside the page", raw.id)));
            }
            let cells = match raw.cells {
                Some(mut cells) => {
                    if raw.region_type != RegionType::Table {
                        issues.push(issue(&at("cells"), &format!("cells on non-table region `{}`", raw.id)));
                    }
                    let mut coords = HashSet::new();
                    for (j, c) in cells.iter().enumerate() {
                        if !coords.insert((c.row, c.col)) {
                            issues.push(issue(
                                &format!("regions[{i}].cells[{j}]"),
                                &format!("duplicate cell ({}, {})", c.row, c.col),
                            ));
                        }
                        for (name, k) in [("row_key", &c.row_key), ("col_key", &c.col_key)] {
                            if matches!(k, Some(s) if s.is_empty()) {
                                issues.push(issue(
                                    &format!("regions[{i}].cells[{j}].{name}"),
                                    "key must be non-empty when present",
                                ));
                            }
                        }
                    }
                    cells.sort_by_key(|c| (c.row, c.col));
                    Some(cells)
                }
                None => None,
            };
            let text = match raw.text {
                Some(t) => t,
                None => cells
                    .as_deref()
                    .map(|cs| cs.iter().map(|c| c.text.as_str()).collect::<Vec<_>>().join(" "))
                    .unwrap_or_default(),
            };
            regions.push(Region {
                id: raw.id,
                region_type: raw.region_type,
                bbox: raw.bbox,
                text,
                key: raw.key,
                cells,
            });
        }

        for (i, line) in file.ocr_lines.iter().enumerate() {
            if !line.bbox.fits(w, h) {
                issues.push(issue(&format!("ocr_lines[{i}].bbox"), "line box is degenerate or outside the page"));
            }
        }

        if !issues.is_empty() {
            return Err(DocError::Invalid(issues));
        }
        Ok(Document { id: file.id, page_width: w, page_height: h, regions, ocr_lines: file.ocr_lines })
    }

    pub fn region(&self, id: &str) -> Option<&Region> {
        self.regions.iter().find(|r| r.id == id)
    }

    /// Regions of the given type in document order.
    pub fn regions_of_type(&self, t: RegionType) -> Vec<&Region> {
        self.regions.iter().filter(|r| r.region_type == t).collect()
    }

    /// OCR line boxes mapped onto the unit square.
    pub fn normalized_line_boxes(&self) -> Vec<BBox> {
        self.ocr_lines.iter().map(|l| l.bbox.normalized(self.page_width, self.page_height)).collect()
    }
}

fn issue(path: &str, message: &str) -> DocIssue {
    DocIssue { path: path.to_string(), message: message.to_string() }
}
