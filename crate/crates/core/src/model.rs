//! UI data model, validation and JSONL corpus files.

use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PATCH_SIDE: usize = 16;
pub const PATCH_LEN: usize = PATCH_SIDE * PATCH_SIDE;
pub const N_APP_TYPES: usize = 27;
/// 22 canonical classes plus the OTHER fallback.
pub const N_CLASSES: usize = 23;
pub const OTHER_CLASS: usize = 22;

pub const CORPUS_FORMAT: &str = "ui2vec-corpus";
pub const PAIRS_FORMAT: &str = "ui2vec-pairs";
pub const REFEXP_FORMAT: &str = "ui2vec-refexp";
pub const SYNC_FORMAT: &str = "ui2vec-sync";
pub const FORMAT_VERSION: u64 = 1;

/// Axis-aligned box in screen fractions, serialized as `[x0, y0, x1, y1]`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BoundingBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl From<[f64; 4]> for BoundingBox {
    fn from(b: [f64; 4]) -> Self {
        BoundingBox {
            x0: b[0],
            y0: b[1],
            x1: b[2],
            y1: b[3],
        }
    }
}

impl From<BoundingBox> for [f64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

impl BoundingBox {
    pub const FULL: BoundingBox = BoundingBox {
        x0: 0.0,
        y0: 0.0,
        x1: 1.0,
        y1: 1.0,
    };

    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        BoundingBox { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x0 + self.x1) / 2.0, (self.y0 + self.y1) / 2.0)
    }

    fn in_range(&self) -> bool {
        [self.x0, self.y0, self.x1, self.y1]
            .iter()
            .all(|v| (0.0..=1.0).contains(v))
    }

    fn ordered(&self) -> bool {
        self.x0 <= self.x1 && self.y0 <= self.y1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VhComponent {
    pub class_id: usize,
    pub class_raw: String,
    #[serde(rename = "text")]
    pub text_tokens: Vec<u32>,
    #[serde(rename = "desc")]
    pub desc_tokens: Vec<u32>,
    #[serde(rename = "resid")]
    pub resid_tokens: Vec<u32>,
    pub bounds: BoundingBox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImgComponent {
    /// Row-major 16x16 grayscale intensities.
    pub patch: Vec<f64>,
    pub bounds: BoundingBox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OcrComponent {
    #[serde(rename = "text")]
    pub tokens: Vec<u32>,
    pub bounds: BoundingBox,
}

/// One UI. `img[i]` is the crop of `vh[i]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UiExample {
    pub id: String,
    #[serde(rename = "app_type", default, skip_serializing_if = "Option::is_none")]
    pub app_type_label: Option<usize>,
    #[serde(default = "default_synced")]
    pub synced: bool,
    pub img: Vec<ImgComponent>,
    pub vh: Vec<VhComponent>,
    pub ocr: Vec<OcrComponent>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub icon_labels: Option<Vec<usize>>,
}

fn default_synced() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalPair {
    pub anchor_ui: String,
    pub anchor_index: usize,
    pub search_ui: String,
    pub candidate_indices: Vec<usize>,
    pub gold_index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReferringExample {
    pub ui: String,
    pub expression_tokens: Vec<u32>,
    pub candidate_indices: Vec<usize>,
    pub gold_index: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyncExample {
    pub ui: UiExample,
    /// 1 when the view hierarchy matches the screen.
    pub label: u8,
}

/// A broken invariant: the offending field and the rule it breaks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Violation {
    pub field: String,
    pub rule: &'static str,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({})", self.rule, self.field)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ValidationRules {
    pub max_field_tokens: usize,
    /// Web-style corpus without view hierarchies.
    pub no_vh: bool,
}

impl Default for ValidationRules {
    fn default() -> Self {
        ValidationRules {
            max_field_tokens: 8,
            no_vh: false,
        }
    }
}

fn check_bounds(field: String, b: &BoundingBox, out: &mut Vec<Violation>) {
    if !b.ordered() {
        out.push(Violation {
            field: field.clone(),
            rule: "bounds ordering",
        });
    }
    if !b.in_range() {
        out.push(Violation {
            field,
            rule: "bounds range",
        });
    }
}

/// Every invariant `e` breaks; empty when the example is well formed.
pub fn validate_example(e: &UiExample, rules: &ValidationRules) -> Vec<Violation> {
    let mut out = Vec::new();
    let push = |out: &mut Vec<Violation>, field: String, rule| out.push(Violation { field, rule });
    if e.id.is_empty() {
        push(&mut out, "id".into(), "empty id");
    }
    if e.img.is_empty() {
        push(&mut out, "img".into(), "no img components");
    }
    if e.ocr.is_empty() {
        push(&mut out, "ocr".into(), "no ocr components");
    }
    if !rules.no_vh && e.img.len() != e.vh.len() {
        push(&mut out, "img/vh".into(), "img/vh length mismatch");
    }
    if let Some(a) = e.app_type_label {
        if a >= N_APP_TYPES {
            push(&mut out, "app_type".into(), "app type range");
        }
    }
    if let Some(labels) = &e.icon_labels {
        if labels.len() != e.img.len() {
            push(&mut out, "icon_labels".into(), "icon label count");
        }
    }
    for (i, c) in e.img.iter().enumerate() {
        if c.patch.len() != PATCH_LEN {
            push(&mut out, format!("img[{i}].patch"), "patch shape");
        } else if !c.patch.iter().all(|v| (0.0..=1.0).contains(v)) {
            push(&mut out, format!("img[{i}].patch"), "patch range");
        }
        check_bounds(format!("img[{i}].bounds"), &c.bounds, &mut out);
        if e.synced && !rules.no_vh {
            if let Some(v) = e.vh.get(i) {
                if v.bounds != c.bounds {
                    push(&mut out, format!("img[{i}].bounds"), "img/vh bounds alignment");
                }
            }
        }
    }
    for (i, c) in e.vh.iter().enumerate() {
        if c.class_id >= N_CLASSES {
            push(&mut out, format!("vh[{i}].class_id"), "class range");
        }
        for (name, toks) in [
            ("text", &c.text_tokens),
            ("desc", &c.desc_tokens),
            ("resid", &c.resid_tokens),
        ] {
            if toks.len() > rules.max_field_tokens {
                push(&mut out, format!("vh[{i}].{name}"), "field too long");
            }
        }
        check_bounds(format!("vh[{i}].bounds"), &c.bounds, &mut out);
    }
    for (i, c) in e.ocr.iter().enumerate() {
        if c.tokens.is_empty() {
            push(&mut out, format!("ocr[{i}].text"), "empty ocr text");
        }
        if c.tokens.len() > rules.max_field_tokens {
            push(&mut out, format!("ocr[{i}].text"), "field too long");
        }
        check_bounds(format!("ocr[{i}].bounds"), &c.bounds, &mut out);
    }
    out
}

fn check_candidates(candidates: &[usize], gold: usize, out: &mut Vec<Violation>) {
    if candidates.len() < 2 {
        out.push(Violation {
            field: "candidate_indices".into(),
            rule: "fewer than 2 candidates",
        });
    }
    if !candidates.contains(&gold) {
        out.push(Violation {
            field: "gold_index".into(),
            rule: "gold not among candidates",
        });
    }
}

pub fn validate_retrieval_pair(p: &RetrievalPair) -> Vec<Violation> {
    let mut out = Vec::new();
    check_candidates(&p.candidate_indices, p.gold_index, &mut out);
    out
}

pub fn validate_referring(r: &ReferringExample) -> Vec<Violation> {
    let mut out = Vec::new();
    check_candidates(&r.candidate_indices, r.gold_index, &mut out);
    out
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format: String,
    version: u64,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    no_vh: bool,
}

/// A corpus file's contents.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Corpus {
    pub no_vh: bool,
    pub examples: Vec<UiExample>,
}

impl Corpus {
    pub fn new(examples: Vec<UiExample>) -> Self {
        Corpus { no_vh: false, examples }
    }

    pub fn get(&self, id: &str) -> Option<&UiExample> {
        self.examples.iter().find(|e| e.id == id)
    }

    /// Id to position lookup.
    pub fn index(&self) -> std::collections::HashMap<&str, usize> {
        self.examples
            .iter()
            .enumerate()
            .map(|(i, e)| (e.id.as_str(), i))
            .collect()
    }

    pub fn rules(&self, max_field_tokens: usize) -> ValidationRules {
        ValidationRules {
            max_field_tokens,
            no_vh: self.no_vh,
        }
    }
}

fn write_records<R: Serialize>(path: &Path, header: &Header, records: &[R]) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e: std::io::Error| Error::io(path, e);
    serde_json::to_writer(&mut w, header).map_err(|e| io(e.into()))?;
    w.write_all(b"\n").map_err(io)?;
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| io(e.into()))?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

fn read_records<R: DeserializeOwned>(path: &Path, format: &str) -> Result<(Header, Vec<R>)> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let loc = |n: usize| format!("{}:{}", path.display(), n);
    let first = lines
        .next()
        .ok_or_else(|| Error::parse(loc(1), "missing header line"))?
        .map_err(|e| Error::io(path, e))?;
    let header: Header = serde_json::from_str(&first).map_err(|e| Error::parse(loc(1), e))?;
    if header.format != format {
        return Err(Error::parse(
            loc(1),
            format!("expected format {format}, found {}", header.format),
        ));
    }
    if header.version != FORMAT_VERSION {
        return Err(Error::Version {
            found: header.version,
            expected: FORMAT_VERSION,
        });
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec = serde_json::from_str(&line).map_err(|e| Error::parse(loc(i + 2), e))?;
        out.push(rec);
    }
    Ok((header, out))
}

pub fn write_corpus(corpus: &Corpus, path: impl AsRef<Path>) -> Result<()> {
    let header = Header {
        format: CORPUS_FORMAT.into(),
        version: FORMAT_VERSION,
        no_vh: corpus.no_vh,
    };
    write_records(path.as_ref(), &header, &corpus.examples)
}

pub fn read_corpus(path: impl AsRef<Path>) -> Result<Corpus> {
    let (header, examples) = read_records(path.as_ref(), CORPUS_FORMAT)?;
    Ok(Corpus {
        no_vh: header.no_vh,
        examples,
    })
}

fn task_header(format: &str) -> Header {
    Header {
        format: format.into(),
        version: FORMAT_VERSION,
        no_vh: false,
    }
}

pub fn write_pairs(pairs: &[RetrievalPair], path: impl AsRef<Path>) -> Result<()> {
    write_records(path.as_ref(), &task_header(PAIRS_FORMAT), pairs)
}

pub fn read_pairs(path: impl AsRef<Path>) -> Result<Vec<RetrievalPair>> {
    Ok(read_records(path.as_ref(), PAIRS_FORMAT)?.1)
}

pub fn write_referring(examples: &[ReferringExample], path: impl AsRef<Path>) -> Result<()> {
    write_records(path.as_ref(), &task_header(REFEXP_FORMAT), examples)
}

pub fn read_referring(path: impl AsRef<Path>) -> Result<Vec<ReferringExample>> {
    Ok(read_records(path.as_ref(), REFEXP_FORMAT)?.1)
}

pub fn write_sync(examples: &[SyncExample], path: impl AsRef<Path>) -> Result<()> {
    write_records(path.as_ref(), &task_header(SYNC_FORMAT), examples)
}

pub fn read_sync(path: impl AsRef<Path>) -> Result<Vec<SyncExample>> {
    Ok(read_records(path.as_ref(), SYNC_FORMAT)?.1)
}
