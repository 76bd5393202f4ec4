//! Synthetic UI corpus and downstream task generation.
//!
//! Every UI belongs to one of 27 app types. The app type fixes header words
//! and a distribution over icon types; `app_type % 3` picks the naming
//! dialect, i.e. which synonym names an icon in descriptions, labels and
//! resource ids. Icon patches carry a type-specific glyph under a large
//! per-component lighting nuisance (brightness offset plus linear ramps).

use rand::prelude::*;
use rand::seq::index;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Vocab;
use crate::model::{
    BoundingBox, Corpus, ImgComponent, OcrComponent, ReferringExample, RetrievalPair, SyncExample, UiExample,
    VhComponent, N_APP_TYPES, PATCH_LEN, PATCH_SIDE,
};

pub const N_DIALECTS: usize = 3;
pub const GRID_COLS: usize = 3;
pub const GRID_ROWS: usize = 5;
pub const HEADER_BOTTOM: f64 = 0.1;
const CONTENT_TOP: f64 = 0.12;
// templates do not depend on the corpus seed so that corpora generated with
// different seeds share icon semantics
const TEMPLATE_SEED: u64 = 0x005e_ed7e_3a11_a7e5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub seed: u64,
    pub n_uis: usize,
    pub n_app_types: usize,
    /// 32 or 77.
    pub n_icon_types: usize,
    /// Inclusive.
    pub components_per_ui: [usize; 2],
    pub ocr_per_ui: [usize; 2],
    pub desync_fraction: f64,
    pub no_vh: bool,
    /// Fraction of icons that also show a visible label.
    pub label_prob: f64,
    pub glyph_amp: f64,
    pub brightness: f64,
    pub ramp: f64,
    pub pixel_noise: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 0,
            n_uis: 1000,
            n_app_types: N_APP_TYPES,
            n_icon_types: 32,
            components_per_ui: [4, 12],
            ocr_per_ui: [2, 6],
            desync_fraction: 0.5,
            no_vh: false,
            label_prob: 0.3,
            glyph_amp: 0.08,
            brightness: 0.25,
            ramp: 0.12,
            pixel_noise: 0.02,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Invalid(m));
        if self.n_app_types != N_APP_TYPES {
            return bad(format!("n_app_types must be {N_APP_TYPES}, got {}", self.n_app_types));
        }
        if self.n_icon_types != 32 && self.n_icon_types != 77 {
            return bad(format!("n_icon_types must be 32 or 77, got {}", self.n_icon_types));
        }
        for (name, [lo, hi]) in [
            ("components_per_ui", self.components_per_ui),
            ("ocr_per_ui", self.ocr_per_ui),
        ] {
            if lo == 0 || lo > hi {
                return bad(format!("{name} range [{lo}, {hi}] is empty"));
            }
        }
        if self.components_per_ui[1] > ICONS_PER_APP {
            return bad(format!(
                "{} components exceed the {ICONS_PER_APP} icon slots of an app",
                self.components_per_ui[1]
            ));
        }
        if !(0.0..=1.0).contains(&self.desync_fraction) || !(0.0..=1.0).contains(&self.label_prob) {
            return bad("fractions must lie in [0, 1]".into());
        }
        // pixels are clipped, but lighting alone must stay inside [0, 1]
        let budget = self.brightness + self.ramp * 2.0;
        if [self.glyph_amp, self.brightness, self.ramp, self.pixel_noise]
            .iter()
            .any(|v| !v.is_finite() || *v < 0.0)
            || budget > 0.5
        {
            return bad("patch amplitudes must be non-negative and leave headroom in [0, 1]".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IconType {
    /// One synonym per dialect.
    pub words: [String; N_DIALECTS],
    pub class_id: usize,
    pub class_raw: &'static str,
}

const NAMED_ICONS: [[&str; N_DIALECTS]; 32] = [
    ["search", "find", "lookup"],
    ["home", "main", "start"],
    ["back", "previous", "return"],
    ["menu", "options", "more"],
    ["settings", "preferences", "config"],
    ["share", "send", "forward"],
    ["close", "dismiss", "exit"],
    ["add", "plus", "insert"],
    ["delete", "remove", "trash"],
    ["edit", "modify", "compose"],
    ["favorite", "like", "heart"],
    ["camera", "photo", "capture"],
    ["play", "resume", "watch"],
    ["pause", "hold", "stop"],
    ["refresh", "reload", "sync"],
    ["download", "save", "fetch"],
    ["upload", "attach", "import"],
    ["notifications", "notices", "bell"],
    ["profile", "account", "avatar"],
    ["cart", "basket", "bag"],
    ["location", "map", "pin"],
    ["ring", "phone", "dial"],
    ["message", "chat", "sms"],
    ["calendar", "date", "schedule"],
    ["info", "about", "details"],
    ["filter", "sort", "refine"],
    ["microphone", "voice", "record"],
    ["star", "rate", "rating"],
    ["agree", "accept", "consent"],
    ["enable", "activate", "toggle"],
    ["email", "username", "input"],
    ["title", "heading", "caption"],
];

// class ids into the canonical class table
const IMAGE_BUTTON: (usize, &str) = (3, "android.widget.ImageButton");
const WIDGET_CLASSES: [(usize, &str); 4] = [
    (5, "android.widget.CheckBox"),
    (6, "android.widget.Switch"),
    (4, "android.widget.EditText"),
    (0, "android.widget.TextView"),
];

/// Icon types 28..32 are checkbox, switch, text field and label widgets;
/// every other type is an image button.
pub fn icon_catalog(n_icon_types: usize) -> Vec<IconType> {
    (0..n_icon_types)
        .map(|t| {
            let words = match NAMED_ICONS.get(t) {
                Some(w) => w.map(str::to_string),
                None => ["shape", "symbol", "mark"].map(|p| format!("{p}{t}")),
            };
            let (class_id, class_raw) = if (28..32).contains(&t) {
                WIDGET_CLASSES[t - 28]
            } else {
                IMAGE_BUTTON
            };
            IconType {
                words,
                class_id,
                class_raw,
            }
        })
        .collect()
}

pub fn icon_has_text(icon_type: usize) -> bool {
    (28..32).contains(&icon_type)
}

pub fn dialect(app_type: usize) -> usize {
    app_type % N_DIALECTS
}

/// Resource id words in the dialect's naming convention.
pub fn resource_id(word: &str, dialect: usize) -> String {
    match dialect {
        0 => format!("ic_{word}"),
        1 => format!("{word}Btn"),
        _ => format!("{word}_view"),
    }
}

const THEMES: [&str; N_APP_TYPES] = [
    "shopping",
    "news",
    "banking",
    "travel",
    "fitness",
    "music",
    "video",
    "social",
    "food",
    "weather",
    "navigation",
    "mail",
    "photos",
    "books",
    "games",
    "health",
    "education",
    "finance",
    "dating",
    "sports",
    "podcasts",
    "recipes",
    "taxi",
    "hotel",
    "notes",
    "wallet",
    "radio",
];
const SECTIONS: [&str; 8] = [
    "today", "featured", "recent", "popular", "library", "explore", "latest", "saved",
];
const ICONS_PER_APP: usize = 12;

#[derive(Clone, Debug, PartialEq)]
pub struct AppTemplate {
    pub theme: &'static str,
    /// Probability of each icon type; zero outside the app's icon set.
    pub icon_probs: Vec<f64>,
    /// Grid cell of each icon type in the app's set.
    pub home_cells: Vec<Option<usize>>,
}

impl AppTemplate {
    /// `(cell, icon type)` slots in cell order.
    pub fn slots(&self) -> Vec<(usize, usize)> {
        let mut s: Vec<(usize, usize)> = self
            .home_cells
            .iter()
            .enumerate()
            .filter_map(|(t, c)| c.map(|c| (c, t)))
            .collect();
        s.sort_unstable();
        s
    }
}

/// Each dialect lays icon types out on the grid: types are dealt round-robin
/// onto the (dialect, cell) slots from successive random permutations, so
/// every type gets at least one slot. Apps then pick `ICONS_PER_APP`
/// distinct cells of their dialect's layout and one type from each. A UI
/// shows a uniform subset of its app's slots.
pub fn app_templates(n_icon_types: usize) -> Vec<AppTemplate> {
    let mut rng = ChaCha8Rng::seed_from_u64(TEMPLATE_SEED);
    let n_cells = GRID_COLS * GRID_ROWS;
    let n_slots = N_DIALECTS * n_cells;
    let mut slots: Vec<Vec<usize>> = vec![Vec::new(); n_slots];
    let mut dealt = 0;
    while dealt < n_slots.max(n_icon_types) {
        let mut perm: Vec<usize> = (0..n_icon_types).collect();
        perm.shuffle(&mut rng);
        for t in perm {
            if dealt >= n_slots.max(n_icon_types) {
                break;
            }
            let slot = &mut slots[dealt % n_slots];
            if !slot.contains(&t) {
                slot.push(t);
            }
            dealt += 1;
        }
    }
    THEMES
        .iter()
        .enumerate()
        .map(|(app, &theme)| {
            let layout = &slots[dialect(app) * n_cells..][..n_cells];
            let mut home_cells = vec![None; n_icon_types];
            let mut cells = index::sample(&mut rng, n_cells, n_cells).into_vec();
            cells.retain(|&c| layout[c].iter().any(|&t| home_cells[t].is_none()));
            for &cell in cells.iter().take(ICONS_PER_APP) {
                let free: Vec<usize> = layout[cell]
                    .iter()
                    .copied()
                    .filter(|&t| home_cells[t].is_none())
                    .collect();
                let t = free[rng.random_range(0..free.len())];
                home_cells[t] = Some(cell);
            }
            let size = home_cells.iter().flatten().count() as f64;
            AppTemplate {
                theme,
                icon_probs: home_cells
                    .iter()
                    .map(|c| if c.is_some() { 1.0 / size } else { 0.0 })
                    .collect(),
                home_cells,
            }
        })
        .collect()
}

/// Zero-mean, unit-RMS 4x4-block sign pattern, orthogonal to the constant
/// image and both linear ramps.
pub fn glyph(icon_type: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(TEMPLATE_SEED ^ (icon_type as u64 + 1).wrapping_mul(0x9e37_79b9));
    let blocks: Vec<f64> = (0..16).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect();
    let mut g: Vec<f64> = (0..PATCH_LEN)
        .map(|p| blocks[(p / PATCH_SIDE / 4) * 4 + (p % PATCH_SIDE) / 4])
        .collect();
    for basis in nuisance_basis() {
        let dot: f64 = g.iter().zip(&basis).map(|(a, b)| a * b).sum();
        g.iter_mut().zip(&basis).for_each(|(a, b)| *a -= dot * b);
    }
    let rms = (g.iter().map(|v| v * v).sum::<f64>() / PATCH_LEN as f64).sqrt();
    g.iter_mut().for_each(|v| *v /= rms);
    g
}

// orthonormal: constant, centered column ramp, centered row ramp
fn nuisance_basis() -> [Vec<f64>; 3] {
    let s = PATCH_SIDE as f64;
    let unit = |v: Vec<f64>| {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect::<Vec<_>>()
    };
    let centered = |i: usize| i as f64 - (s - 1.0) / 2.0;
    [
        unit(vec![1.0; PATCH_LEN]),
        unit((0..PATCH_LEN).map(|p| centered(p % PATCH_SIDE)).collect()),
        unit((0..PATCH_LEN).map(|p| centered(p / PATCH_SIDE)).collect()),
    ]
}

fn round_to(x: f64, decimals: i32) -> f64 {
    let m = 10f64.powi(decimals);
    (x * m).round() / m
}

fn render_patch(glyph: &[f64], cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let b = rng.random_range(-1.0..=1.0) * cfg.brightness;
    let rx = rng.random_range(-1.0..=1.0) * cfg.ramp;
    let ry = rng.random_range(-1.0..=1.0) * cfg.ramp;
    let half = (PATCH_SIDE as f64 - 1.0) / 2.0;
    (0..PATCH_LEN)
        .map(|p| {
            let x = (p % PATCH_SIDE) as f64 / half - 1.0;
            let y = (p / PATCH_SIDE) as f64 / half - 1.0;
            let noise: f64 = rng.sample(StandardNormal);
            let v = 0.5 + b + rx * x + ry * y + cfg.glyph_amp * glyph[p] + cfg.pixel_noise * noise;
            round_to(v.clamp(0.0, 1.0), 3)
        })
        .collect()
}

fn cell_bounds(cell: usize, rng: &mut ChaCha8Rng) -> BoundingBox {
    let (col, row) = (cell % GRID_COLS, cell / GRID_COLS);
    let w = 1.0 / GRID_COLS as f64;
    let h = (1.0 - CONTENT_TOP) / GRID_ROWS as f64;
    let (x, y) = (col as f64 * w, CONTENT_TOP + row as f64 * h);
    let mut m = || rng.random_range(0.01..0.04);
    BoundingBox::new(
        round_to(x + m(), 4),
        round_to(y + m(), 4),
        round_to(x + w - m(), 4),
        round_to(y + h - m(), 4),
    )
}

fn tokens(vocab: &Vocab, words: &[&str]) -> Vec<u32> {
    words.iter().flat_map(|w| vocab.tokenize(w)).collect()
}

fn resid_tokens(vocab: &Vocab, word: &str, dialect: usize) -> Vec<u32> {
    crate::vh_parser::split_resource_id(&resource_id(word, dialect))
        .iter()
        .map(|w| vocab.token_id(w))
        .collect()
}

/// Draws `cfg.n_uis` UIs. Identical `(cfg, vocab)` give identical corpora.
pub fn generate_corpus(cfg: &GenConfig, vocab: &Vocab) -> Result<Corpus> {
    cfg.validate()?;
    let catalog = icon_catalog(cfg.n_icon_types);
    let templates = app_templates(cfg.n_icon_types);
    let glyphs: Vec<Vec<f64>> = (0..cfg.n_icon_types).map(glyph).collect();
    let slots: Vec<Vec<(usize, usize)>> = templates.iter().map(AppTemplate::slots).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut examples = Vec::with_capacity(cfg.n_uis);
    for i in 0..cfg.n_uis {
        let app = rng.random_range(0..cfg.n_app_types);
        let d = dialect(app);
        let n = rng.random_range(cfg.components_per_ui[0]..=cfg.components_per_ui[1]);
        let mut picked = index::sample(&mut rng, slots[app].len(), n).into_vec();
        picked.sort_unstable();
        let placed: Vec<(usize, usize)> = picked.iter().map(|&k| slots[app][k]).collect();
        let mut img = Vec::with_capacity(n);
        let mut vh = Vec::with_capacity(n);
        let mut labels = Vec::with_capacity(n);
        for (cell, t) in placed {
            let icon = &catalog[t];
            let word = icon.words[d].as_str();
            let bounds = cell_bounds(cell, &mut rng);
            let labelled = icon_has_text(t) || rng.random_bool(cfg.label_prob);
            img.push(ImgComponent {
                patch: render_patch(&glyphs[t], cfg, &mut rng),
                bounds,
            });
            vh.push(VhComponent {
                class_id: icon.class_id,
                class_raw: icon.class_raw.to_string(),
                text_tokens: if labelled { tokens(vocab, &[word]) } else { Vec::new() },
                desc_tokens: tokens(vocab, &[word]),
                resid_tokens: resid_tokens(vocab, word, d),
                bounds,
            });
            labels.push(t);
        }
        let n_ocr = rng.random_range(cfg.ocr_per_ui[0]..=cfg.ocr_per_ui[1]);
        let texted: Vec<usize> = (0..n).filter(|&j| !vh[j].text_tokens.is_empty()).collect();
        let n_copies = texted.len().min(n_ocr - 1);
        let mut copies = index::sample(&mut rng, texted.len(), n_copies)
            .into_iter()
            .map(|k| texted[k])
            .collect::<Vec<_>>();
        copies.sort_unstable();
        let n_headers = n_ocr - n_copies;
        let mut ocr = Vec::with_capacity(n_ocr);
        for h in 0..n_headers {
            let w = 1.0 / n_headers as f64;
            let section = SECTIONS[rng.random_range(0..SECTIONS.len())];
            ocr.push(OcrComponent {
                tokens: tokens(vocab, &[templates[app].theme, section]),
                bounds: BoundingBox::new(
                    round_to(h as f64 * w + 0.01, 4),
                    0.02,
                    round_to((h + 1) as f64 * w - 0.01, 4),
                    round_to(HEADER_BOTTOM - 0.01, 4),
                ),
            });
        }
        for j in copies {
            ocr.push(OcrComponent {
                tokens: vh[j].text_tokens.clone(),
                bounds: vh[j].bounds,
            });
        }
        if cfg.no_vh {
            vh.clear();
        }
        examples.push(UiExample {
            id: format!("s{}-{i:05}", cfg.seed),
            app_type_label: Some(app),
            synced: true,
            img,
            vh,
            ocr,
            icon_labels: Some(labels),
        });
    }
    Ok(Corpus {
        no_vh: cfg.no_vh,
        examples,
    })
}

fn labels_of(e: &UiExample) -> Result<&[usize]> {
    e.icon_labels
        .as_deref()
        .ok_or_else(|| Error::Invalid(format!("{}: missing icon labels", e.id)))
}

fn app_of(e: &UiExample) -> Result<usize> {
    e.app_type_label
        .ok_or_else(|| Error::Invalid(format!("{}: missing app type", e.id)))
}

/// Pairs an anchor icon with a search UI from another dialect. The gold
/// candidate shares the anchor's icon type; distractors have other types of
/// the same class, so class alone never singles out the gold. Candidate
/// order is shuffled.
pub fn generate_retrieval_pairs(
    corpus: &Corpus,
    n_candidates: usize,
    n_pairs: usize,
    n_icon_types: usize,
    seed: u64,
) -> Result<Vec<RetrievalPair>> {
    if n_candidates < 2 {
        return Err(Error::Invalid("retrieval needs at least 2 candidates".into()));
    }
    let catalog = icon_catalog(n_icon_types);
    let class_of = |t: usize| catalog.get(t).map(|c| c.class_id).ok_or(t);
    let ex = &corpus.examples;
    let labels = ex.iter().map(labels_of).collect::<Result<Vec<_>>>()?;
    let apps = ex.iter().map(app_of).collect::<Result<Vec<_>>>()?;
    if let Some(t) = labels.iter().flat_map(|l| l.iter()).find(|&&t| t >= n_icon_types) {
        return Err(Error::Invalid(format!("icon label {t} outside {n_icon_types} types")));
    }
    let search_pool: Vec<usize> = (0..ex.len()).filter(|&u| labels[u].len() >= n_candidates).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n_pairs);
    let max_attempts = 50 * n_pairs.max(1) + 1000;
    for _ in 0..max_attempts {
        if out.len() == n_pairs {
            break;
        }
        let a = rng.random_range(0..ex.len());
        let ai = rng.random_range(0..labels[a].len());
        let t = labels[a][ai];
        let class = class_of(t).map_err(|t| Error::Invalid(format!("icon type {t}")))?;
        let eligible: Vec<usize> = search_pool
            .iter()
            .copied()
            .filter(|&s| {
                s != a
                    && dialect(apps[s]) != dialect(apps[a])
                    && labels[s].contains(&t)
                    && labels[s]
                        .iter()
                        .filter(|&&x| x != t && class_of(x) == Ok(class))
                        .count()
                        >= n_candidates - 1
            })
            .collect();
        let Some(&s) = eligible.choose(&mut rng) else {
            continue;
        };
        let golds: Vec<usize> = (0..labels[s].len()).filter(|&j| labels[s][j] == t).collect();
        let gold = *golds.choose(&mut rng).expect("search UI contains the type");
        let mut others: Vec<usize> = (0..labels[s].len())
            .filter(|&j| labels[s][j] != t && class_of(labels[s][j]) == Ok(class))
            .collect();
        others.shuffle(&mut rng);
        let mut candidates: Vec<usize> = others[..n_candidates - 1].to_vec();
        candidates.push(gold);
        candidates.shuffle(&mut rng);
        out.push(RetrievalPair {
            anchor_ui: ex[a].id.clone(),
            anchor_index: ai,
            search_ui: ex[s].id.clone(),
            candidate_indices: candidates,
            gold_index: gold,
        });
    }
    if out.len() < n_pairs {
        return Err(Error::Invalid(format!(
            "corpus supports only {} of {n_pairs} retrieval pairs",
            out.len()
        )));
    }
    Ok(out)
}

/// Coarse screen region of a point: `top left`, `top`, ..., `center`, ...
pub fn spatial_qualifier(b: &BoundingBox) -> &'static str {
    let (cx, cy) = b.center();
    let third = |v: f64| {
        if v < 1.0 / 3.0 {
            0
        } else if v > 2.0 / 3.0 {
            2
        } else {
            1
        }
    };
    const NAMES: [[&str; 3]; 3] = [
        ["top left", "top", "top right"],
        ["left", "center", "right"],
        ["bottom left", "bottom", "bottom right"],
    ];
    NAMES[third(cy)][third(cx)]
}

/// One expression per UI: "click the <icon word> at the <region>", with
/// every IMG component as a candidate.
pub fn generate_referring_expressions(
    corpus: &Corpus,
    n_icon_types: usize,
    vocab: &Vocab,
    seed: u64,
) -> Result<Vec<ReferringExample>> {
    let catalog = icon_catalog(n_icon_types);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for e in &corpus.examples {
        if e.img.len() < 2 {
            continue;
        }
        let labels = labels_of(e)?;
        let d = dialect(app_of(e)?);
        let gold = rng.random_range(0..e.img.len());
        let icon = catalog
            .get(labels[gold])
            .ok_or_else(|| Error::Invalid(format!("icon type {}", labels[gold])))?;
        let text = format!(
            "click the {} at the {}",
            icon.words[d],
            spatial_qualifier(&e.img[gold].bounds)
        );
        out.push(ReferringExample {
            ui: e.id.clone(),
            expression_tokens: vocab.tokenize(&text),
            candidate_indices: (0..e.img.len()).collect(),
            gold_index: gold,
        });
    }
    Ok(out)
}

/// Copies every UI; exactly `round(fraction * n)` of them get their VH
/// bounds and classes rotated by a random nonzero offset (label 0).
pub fn generate_sync_examples(corpus: &Corpus, desync_fraction: f64, seed: u64) -> Result<Vec<SyncExample>> {
    if !(0.0..=1.0).contains(&desync_fraction) {
        return Err(Error::Invalid(format!("desync fraction {desync_fraction}")));
    }
    if corpus.no_vh {
        return Err(Error::Invalid("sync examples need view hierarchies".into()));
    }
    let n = corpus.examples.len();
    let n_desync = (desync_fraction * n as f64).round() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut desync = vec![false; n];
    for i in index::sample(&mut rng, n, n_desync) {
        desync[i] = true;
    }
    corpus
        .examples
        .iter()
        .zip(desync)
        .map(|(e, flip)| {
            let mut ui = e.clone();
            if !flip {
                return Ok(SyncExample { ui, label: 1 });
            }
            let m = ui.vh.len();
            if m < 2 {
                return Err(Error::Invalid(format!(
                    "{}: cannot desync fewer than 2 components",
                    e.id
                )));
            }
            let shift = rng.random_range(1..m);
            for (j, c) in ui.vh.iter_mut().enumerate() {
                let src = &e.vh[(j + shift) % m];
                c.bounds = src.bounds;
                c.class_id = src.class_id;
                c.class_raw = src.class_raw.clone();
            }
            ui.synced = false;
            Ok(SyncExample { ui, label: 0 })
        })
        .collect()
}
