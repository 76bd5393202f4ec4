//! Android-style view hierarchy parsing and leaf extraction.
//!
//! Input nodes are JSON objects with keys `class`, `text`, `content_desc`,
//! `resource_id`, `bounds` (`[x0, y0, x1, y1]` in pixels) and `children`.
//! Only leaves become components.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::features::Vocab;
use crate::model::{BoundingBox, VhComponent, OTHER_CLASS};

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RawVhNode {
    pub class_name: String,
    pub text: String,
    pub content_description: String,
    pub resource_id: String,
    pub bounds_px: [u32; 4],
    pub children: Vec<RawVhNode>,
}

impl RawVhNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    pub fn leaf_count(&self) -> usize {
        if self.is_leaf() {
            1
        } else {
            self.children.iter().map(RawVhNode::leaf_count).sum()
        }
    }

    pub fn depth(&self) -> usize {
        1 + self.children.iter().map(RawVhNode::depth).max().unwrap_or(0)
    }
}

fn node_error(path: &str, message: impl ToString) -> Error {
    Error::parse(if path.is_empty() { "/" } else { path }, message)
}

fn optional_string(obj: &serde_json::Map<String, Value>, key: &str, path: &str) -> Result<String> {
    match obj.get(key) {
        None | Some(Value::Null) => Ok(String::new()),
        Some(Value::String(s)) => Ok(s.clone()),
        Some(other) => Err(node_error(path, format!("`{key}` must be a string, got {other}"))),
    }
}

fn parse_node(v: &Value, path: &str) -> Result<RawVhNode> {
    let obj = v.as_object().ok_or_else(|| node_error(path, "node is not an object"))?;
    let class_name = match obj.get("class") {
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err(node_error(path, "`class` must be a string")),
        None => return Err(node_error(path, "missing `class`")),
    };
    let bounds = obj
        .get("bounds")
        .ok_or_else(|| node_error(path, "missing `bounds`"))?
        .as_array()
        .filter(|a| a.len() == 4)
        .ok_or_else(|| node_error(path, "`bounds` must be [x0, y0, x1, y1]"))?;
    let mut bounds_px = [0u32; 4];
    for (slot, b) in bounds_px.iter_mut().zip(bounds) {
        *slot = b
            .as_u64()
            .and_then(|x| u32::try_from(x).ok())
            .ok_or_else(|| node_error(path, format!("bound {b} is not a non-negative integer")))?;
    }
    let children = match obj.get("children") {
        None | Some(Value::Null) => Vec::new(),
        Some(Value::Array(items)) => items
            .iter()
            .enumerate()
            .map(|(i, c)| parse_node(c, &format!("{path}/children/{i}")))
            .collect::<Result<_>>()?,
        Some(_) => return Err(node_error(path, "`children` must be an array")),
    };
    Ok(RawVhNode {
        class_name,
        text: optional_string(obj, "text", path)?,
        content_description: optional_string(obj, "content_desc", path)?,
        resource_id: optional_string(obj, "resource_id", path)?,
        bounds_px,
        children,
    })
}

/// Parses one view hierarchy. Errors carry the JSON path of the bad node,
/// `/` for the root.
pub fn parse_view_hierarchy(json_text: &str) -> Result<RawVhNode> {
    let v: Value = serde_json::from_str(json_text).map_err(|e| Error::parse("/", e))?;
    parse_node(&v, "")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub name: String,
    /// Lowercase substrings matched against the last dotted segment.
    pub patterns: Vec<String>,
}

/// The canonical widget classes. Entry `i` has class id `i`; the OTHER
/// fallback is id 22 and has no patterns.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassTable {
    pub entries: Vec<ClassEntry>,
}

const DEFAULT_CLASSES: [(&str, &[&str]); 23] = [
    ("TEXT_VIEW", &["textview", "label"]),
    ("IMAGE_VIEW", &["imageview", "image"]),
    ("BUTTON", &["button"]),
    ("IMAGE_BUTTON", &["imagebutton", "floatingactionbutton"]),
    (
        "EDIT_TEXT",
        &["edittext", "autocompletetextview", "textinput", "textfield"],
    ),
    ("CHECK_BOX", &["checkbox"]),
    ("SWITCH", &["switch"]),
    ("RADIO_BUTTON", &["radiobutton"]),
    ("TOGGLE_BUTTON", &["togglebutton"]),
    ("SPINNER", &["spinner", "dropdown"]),
    ("PROGRESS_BAR", &["progressbar", "progress"]),
    ("SEEK_BAR", &["seekbar", "slider"]),
    ("LIST_VIEW", &["listview"]),
    ("RECYCLER_VIEW", &["recyclerview"]),
    ("GRID_VIEW", &["gridview"]),
    ("SCROLL_VIEW", &["scrollview"]),
    ("WEB_VIEW", &["webview"]),
    ("VIDEO_VIEW", &["videoview", "player"]),
    ("TAB", &["tabwidget", "tablayout", "tabview", "tabitem"]),
    ("TOOLBAR", &["toolbar", "actionbar"]),
    ("DRAWER", &["drawer", "navigationview"]),
    ("CARD", &["cardview", "card"]),
    ("OTHER", &[]),
];

impl Default for ClassTable {
    fn default() -> Self {
        ClassTable {
            entries: DEFAULT_CLASSES
                .iter()
                .map(|(name, pats)| ClassEntry {
                    name: name.to_string(),
                    patterns: pats.iter().map(|p| p.to_string()).collect(),
                })
                .collect(),
        }
    }
}

impl ClassTable {
    pub fn validate(&self) -> Result<()> {
        if self.entries.len() != OTHER_CLASS + 1 {
            return Err(Error::Invalid(format!(
                "class table needs {} entries, has {}",
                OTHER_CLASS + 1,
                self.entries.len()
            )));
        }
        let mut names: Vec<&str> = self.entries.iter().map(|e| e.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.entries.len() {
            return Err(Error::Invalid("class names must be unique".into()));
        }
        Ok(())
    }

    pub fn name(&self, id: usize) -> &str {
        &self.entries[id].name
    }

    pub fn id_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }
}

/// Maps a raw class name to a canonical class id. The entry with the
/// longest matching pattern wins, lower ids break ties; OTHER when nothing
/// matches.
pub fn normalize_class_name(raw: &str, table: &ClassTable) -> usize {
    let last = raw.rsplit('.').next().unwrap_or(raw).to_lowercase();
    let mut best: Option<(usize, usize)> = None;
    for (id, entry) in table.entries.iter().enumerate() {
        for p in &entry.patterns {
            if !p.is_empty() && last.contains(p.as_str()) && best.is_none_or(|(_, len)| p.len() > len) {
                best = Some((id, p.len()));
            }
        }
    }
    best.map_or(OTHER_CLASS, |(id, _)| id)
}

/// Splits at underscores (and other separators) and camel-case boundaries,
/// lowercasing every piece. An uppercase run followed by a lowercase letter
/// splits before its last capital: `URLField` gives `url`, `field`.
pub fn split_resource_id(raw: &str) -> Vec<String> {
    let mut out = Vec::new();
    for part in raw.split(|c: char| !c.is_alphanumeric()) {
        let chars: Vec<char> = part.chars().collect();
        let mut start = 0;
        for i in 1..chars.len() {
            let (prev, cur) = (chars[i - 1], chars[i]);
            let next_lower = chars.get(i + 1).is_some_and(|c| c.is_lowercase());
            let boundary = cur.is_uppercase()
                && (prev.is_lowercase() || prev.is_ascii_digit() || (prev.is_uppercase() && next_lower));
            if boundary {
                out.push(chars[start..i].iter().collect::<String>().to_lowercase());
                start = i;
            }
        }
        if start < chars.len() {
            out.push(chars[start..].iter().collect::<String>().to_lowercase());
        }
    }
    out
}

/// Everything leaf extraction needs besides the tree.
#[derive(Clone, Debug)]
pub struct LeafContext<'a> {
    pub table: &'a ClassTable,
    pub vocab: &'a Vocab,
    /// Longer token sequences are truncated.
    pub max_field_tokens: usize,
}

/// One component per leaf in depth-first pre-order, with bounds scaled by
/// the screen size and clamped to the unit square.
pub fn extract_leaf_components(
    root: &RawVhNode,
    screen_w: u32,
    screen_h: u32,
    ctx: &LeafContext<'_>,
) -> Result<Vec<VhComponent>> {
    if screen_w == 0 || screen_h == 0 {
        return Err(Error::Invalid(format!("screen size {screen_w}x{screen_h}")));
    }
    let mut out = Vec::new();
    let mut stack = vec![root];
    while let Some(node) = stack.pop() {
        if node.is_leaf() {
            out.push(leaf_component(node, screen_w, screen_h, ctx));
        } else {
            stack.extend(node.children.iter().rev());
        }
    }
    Ok(out)
}

fn leaf_component(node: &RawVhNode, w: u32, h: u32, ctx: &LeafContext<'_>) -> VhComponent {
    let norm = |v: u32, size: u32| (f64::from(v) / f64::from(size)).clamp(0.0, 1.0);
    let [x0, y0, x1, y1] = node.bounds_px;
    let (x0, x1) = (norm(x0, w), norm(x1, w));
    let (y0, y1) = (norm(y0, h), norm(y1, h));
    let truncate = |mut t: Vec<u32>| {
        t.truncate(ctx.max_field_tokens);
        t
    };
    // `pkg:id/name` resource ids keep only the name
    let resid = node.resource_id.rsplit('/').next().unwrap_or("");
    VhComponent {
        class_id: normalize_class_name(&node.class_name, ctx.table),
        class_raw: node.class_name.clone(),
        text_tokens: truncate(ctx.vocab.tokenize(&node.text)),
        desc_tokens: truncate(ctx.vocab.tokenize(&node.content_description)),
        resid_tokens: truncate(split_resource_id(resid).iter().map(|w| ctx.vocab.token_id(w)).collect()),
        bounds: BoundingBox::new(x0.min(x1), y0.min(y1), x0.max(x1), y0.max(y1)),
    }
}
