//! Task heads, finetuning, zero-shot evaluation and metrics for the five
//! downstream tasks.

use std::collections::HashMap;
use std::fmt::Write as _;

use rand::prelude::*;
use rand::seq::index;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{
    argmax, component_output_embedding, encode, gru_greedy, row, Dropout, EncoderOutput, MaskSpec, Modality, Model,
    Registrar,
};
use crate::error::{Error, Result};
use crate::features::stable_hash;
use crate::model::{
    BoundingBox, Corpus, OcrComponent, ReferringExample, RetrievalPair, SyncExample, UiExample, N_APP_TYPES,
};
use crate::numerics::{adam_step, AdamConfig, AdamState, Gradients, Graph, ParamId, ParamStore, Real, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Retrieval,
    Referring,
    Sync,
    AppType,
    Icon,
}

impl Task {
    pub const ALL: [Task; 5] = [Task::Retrieval, Task::Referring, Task::Sync, Task::AppType, Task::Icon];

    pub fn name(self) -> &'static str {
        match self {
            Task::Retrieval => "retrieval",
            Task::Referring => "referring",
            Task::Sync => "sync",
            Task::AppType => "app_type",
            Task::Icon => "icon",
        }
    }

    /// Retrieval and referring score candidates by dot product and need no
    /// head.
    pub fn needs_head(self) -> bool {
        !matches!(self, Task::Retrieval | Task::Referring)
    }
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown task {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    ZeroShot,
    Finetuned,
}

impl std::str::FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero_shot" => Ok(EvalMode::ZeroShot),
            "finetuned" => Ok(EvalMode::Finetuned),
            _ => Err(Error::Invalid(format!("unknown mode {s:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TaskHeads {
    pub sync_w: ParamId,
    pub sync_b: ParamId,
    pub app_w: ParamId,
    pub app_b: ParamId,
    pub icon_w: ParamId,
    pub icon_b: ParamId,
    pub n_icon_types: usize,
}

impl TaskHeads {
    pub fn init<T: Real>(model: &Model, store: &mut ParamStore<T>, n_icon_types: usize, seed: u64) -> Result<Self> {
        Self::attach(model, store, n_icon_types, seed, false)
    }

    /// Reattaches heads saved in `store`; the icon width is read back from
    /// the stored bias.
    pub fn from_store<T: Real>(model: &Model, store: &mut ParamStore<T>) -> Result<Self> {
        let n_icon_types = store
            .id("head.icon.b")
            .map(|id| store.get(id).len())
            .ok_or_else(|| Error::Invalid("checkpoint has no task heads".into()))?;
        Self::attach(model, store, n_icon_types, 0, true)
    }

    fn attach<T: Real>(
        model: &Model,
        store: &mut ParamStore<T>,
        n_icon_types: usize,
        seed: u64,
        existing: bool,
    ) -> Result<Self> {
        if n_icon_types == 0 {
            return Err(Error::Invalid("icon head needs at least one class".into()));
        }
        let d = model.config.d;
        let mut r = Registrar { store, seed, existing };
        Ok(TaskHeads {
            sync_w: r.weight("head.sync.w", &[d, 1])?,
            sync_b: r.zeros("head.sync.b", 1)?,
            app_w: r.weight("head.app.w", &[d, N_APP_TYPES])?,
            app_b: r.zeros("head.app.b", N_APP_TYPES)?,
            icon_w: r.weight("head.icon.w", &[2 * d, n_icon_types])?,
            icon_b: r.zeros("head.icon.b", n_icon_types)?,
            n_icon_types,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub mode: EvalMode,
    pub accuracy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub macro_f1: Option<f64>,
    pub n_examples: usize,
    pub per_class_f1: Vec<f64>,
}

impl EvalReport {
    pub fn per_class_csv(&self) -> String {
        let mut s = String::from("class,f1\n");
        for (k, f) in self.per_class_f1.iter().enumerate() {
            let _ = writeln!(s, "{k},{f}");
        }
        s
    }
}

/// `score_j = <anchor, candidate_j>`.
pub fn retrieval_scores(anchor: &[f64], candidates: &[Vec<f64>]) -> Result<Vec<f64>> {
    candidates
        .iter()
        .map(|c| {
            if c.len() != anchor.len() {
                return Err(Error::Dimension(format!(
                    "candidate width {} vs {}",
                    c.len(),
                    anchor.len()
                )));
            }
            Ok(anchor.iter().zip(c).map(|(a, b)| a * b).sum())
        })
        .collect()
}

/// `1 x m` dot products of a `1 x k` anchor with `m x k` candidates.
pub fn retrieval_scores_var<T: Real>(g: &mut Graph<'_, T>, anchor: Var, candidates: Var) -> Result<Var> {
    let ct = g.transpose(candidates)?;
    g.matmul(anchor, ct)
}

/// Softmax cross-entropy of the gold index over a `1 x m` score row.
pub fn retrieval_finetune_loss<T: Real>(g: &mut Graph<'_, T>, scores: Var, gold: usize) -> Result<Var> {
    let ls = g.log_softmax(scores);
    let picked = g.pick(ls, &[(0, gold)])?;
    let s = g.sum(picked);
    Ok(g.scale(s, -1.0))
}

pub fn sync_logit<T: Real>(g: &mut Graph<'_, T>, heads: &TaskHeads, out: &EncoderOutput) -> Result<Var> {
    let cls = row(g, out.u, 0)?;
    g.linear(cls, heads.sync_w, Some(heads.sync_b))
}

/// Label 1 (synced) when `sigmoid(z) >= 0.5`, i.e. `z >= 0`.
pub fn sync_label(logit: f64) -> u8 {
    u8::from(logit >= 0.0)
}

/// Head over the elementwise max of all component output rows.
pub fn app_logits<T: Real>(g: &mut Graph<'_, T>, heads: &TaskHeads, out: &EncoderOutput) -> Result<Var> {
    let rows: Vec<usize> = Modality::ALL.iter().flat_map(|&m| out.rows(m).to_vec()).collect();
    if rows.is_empty() {
        return Err(Error::Invalid("UI has no components".into()));
    }
    let comps = g.gather_rows(out.u, &rows)?;
    let pooled = g.max_rows(comps)?;
    g.linear(pooled, heads.app_w, Some(heads.app_b))
}

pub fn icon_logits<T: Real>(
    g: &mut Graph<'_, T>,
    heads: &TaskHeads,
    out: &EncoderOutput,
    img_idx: usize,
) -> Result<Var> {
    let emb = component_output_embedding(g, out, img_idx)?;
    g.linear(emb, heads.icon_w, Some(heads.icon_b))
}

/// Copy of `e` with the expression appended as a full-screen OCR component,
/// and that component's index.
pub fn with_expression(e: &UiExample, expression: &[u32]) -> (UiExample, usize) {
    let mut ui = e.clone();
    ui.ocr.push(OcrComponent {
        tokens: expression.to_vec(),
        bounds: BoundingBox::FULL,
    });
    let k = ui.ocr.len() - 1;
    (ui, k)
}

/// Rows are truth, columns prediction.
pub fn confusion(truth: &[usize], pred: &[usize], n_classes: usize) -> Result<Vec<Vec<usize>>> {
    if truth.len() != pred.len() {
        return Err(Error::Invalid("truth and prediction lengths differ".into()));
    }
    let mut c = vec![vec![0; n_classes]; n_classes];
    for (&t, &p) in truth.iter().zip(pred) {
        if t >= n_classes || p >= n_classes {
            return Err(Error::Invalid(format!("label out of range: {t}, {p} of {n_classes}")));
        }
        c[t][p] += 1;
    }
    Ok(c)
}

/// `2tp / (2tp + fp + fn)` per class; 0 when the class never occurs.
pub fn per_class_f1(conf: &[Vec<usize>]) -> Vec<f64> {
    (0..conf.len())
        .map(|k| {
            let tp = conf[k][k];
            let fp: usize = conf.iter().map(|r| r[k]).sum::<usize>() - tp;
            let fn_: usize = conf[k].iter().sum::<usize>() - tp;
            let denom = 2 * tp + fp + fn_;
            if denom == 0 {
                0.0
            } else {
                (2 * tp) as f64 / denom as f64
            }
        })
        .collect()
}

pub fn macro_f1(conf: &[Vec<usize>]) -> f64 {
    if conf.is_empty() {
        return 0.0;
    }
    per_class_f1(conf).iter().sum::<f64>() / conf.len() as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

/// 8:1:1 split: ids ordered by stable hash (then by id), first 80% train,
/// next 10% dev, rest test.
pub fn split_by_id<S: AsRef<str>>(ids: &[S]) -> Vec<Split> {
    let n = ids.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        let (a, b) = (ids[a].as_ref(), ids[b].as_ref());
        stable_hash(a.as_bytes())
            .cmp(&stable_hash(b.as_bytes()))
            .then_with(|| a.cmp(b))
    });
    let n_train = (0.8 * n as f64).round() as usize;
    let n_dev = (0.9 * n as f64).round() as usize - n_train;
    let mut out = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_dev {
            Split::Dev
        } else {
            Split::Test
        };
    }
    out
}

/// One labelled example of any task, resolved against the corpus.
#[derive(Clone, Debug)]
pub enum TaskItem {
    /// `gold` is a position in `candidates`.
    Retrieval {
        anchor: usize,
        anchor_index: usize,
        search: usize,
        candidates: Vec<usize>,
        gold: usize,
    },
    Referring {
        ui: UiExample,
        expression: usize,
        candidates: Vec<usize>,
        gold: usize,
    },
    Sync {
        ui: UiExample,
        label: u8,
    },
    AppType {
        ui: usize,
        label: usize,
    },
    Icon {
        ui: usize,
        img_index: usize,
        label: usize,
    },
}

#[derive(Clone, Debug)]
pub struct TaskData<'a> {
    pub task: Task,
    pub uis: &'a [UiExample],
    pub items: Vec<TaskItem>,
    pub ids: Vec<String>,
}

fn lookup(index: &HashMap<&str, usize>, id: &str) -> Result<usize> {
    index
        .get(id)
        .copied()
        .ok_or_else(|| Error::Invalid(format!("unknown UI {id:?}")))
}

/// Position of the gold component among the candidates.
fn gold_slot(candidates: &[usize], gold_index: usize) -> Result<usize> {
    candidates
        .iter()
        .position(|&c| c == gold_index)
        .ok_or_else(|| Error::Invalid(format!("gold component {gold_index} is not a candidate")))
}

impl<'a> TaskData<'a> {
    pub fn retrieval(corpus: &'a Corpus, pairs: &[RetrievalPair]) -> Result<Self> {
        let index = corpus.index();
        let mut items = Vec::with_capacity(pairs.len());
        let mut ids = Vec::with_capacity(pairs.len());
        for p in pairs {
            let anchor = lookup(&index, &p.anchor_ui)?;
            let search = lookup(&index, &p.search_ui)?;
            let (na, ns) = (corpus.examples[anchor].img.len(), corpus.examples[search].img.len());
            if p.anchor_index >= na || p.candidate_indices.iter().any(|&c| c >= ns) {
                return Err(Error::Invalid(format!(
                    "pair {}->{} indexes past the UI",
                    p.anchor_ui, p.search_ui
                )));
            }
            let gold = gold_slot(&p.candidate_indices, p.gold_index)?;
            items.push(TaskItem::Retrieval {
                anchor,
                anchor_index: p.anchor_index,
                search,
                candidates: p.candidate_indices.clone(),
                gold,
            });
            ids.push(format!("{}#{}>{}", p.anchor_ui, p.anchor_index, p.search_ui));
        }
        Ok(TaskData {
            task: Task::Retrieval,
            uis: &corpus.examples,
            items,
            ids,
        })
    }

    pub fn referring(corpus: &'a Corpus, examples: &[ReferringExample]) -> Result<Self> {
        let index = corpus.index();
        let mut items = Vec::with_capacity(examples.len());
        let mut ids = Vec::with_capacity(examples.len());
        for r in examples {
            let e = &corpus.examples[lookup(&index, &r.ui)?];
            if r.candidate_indices.iter().any(|&c| c >= e.img.len()) {
                return Err(Error::Invalid(format!(
                    "referring example on {} indexes past the UI",
                    r.ui
                )));
            }
            let gold = gold_slot(&r.candidate_indices, r.gold_index)?;
            let (ui, expression) = with_expression(e, &r.expression_tokens);
            items.push(TaskItem::Referring {
                ui,
                expression,
                candidates: r.candidate_indices.clone(),
                gold,
            });
            ids.push(r.ui.clone());
        }
        Ok(TaskData {
            task: Task::Referring,
            uis: &corpus.examples,
            items,
            ids,
        })
    }

    pub fn sync(examples: &[SyncExample]) -> Result<Self> {
        let items = examples
            .iter()
            .map(|s| {
                if s.label > 1 {
                    return Err(Error::Invalid(format!("sync label {} on {}", s.label, s.ui.id)));
                }
                Ok(TaskItem::Sync {
                    ui: s.ui.clone(),
                    label: s.label,
                })
            })
            .collect::<Result<_>>()?;
        Ok(TaskData {
            task: Task::Sync,
            uis: &[],
            items,
            ids: examples.iter().map(|s| s.ui.id.clone()).collect(),
        })
    }

    pub fn app_type(corpus: &'a Corpus) -> Result<Self> {
        let mut items = Vec::new();
        let mut ids = Vec::new();
        for (i, e) in corpus.examples.iter().enumerate() {
            let label = e
                .app_type_label
                .ok_or_else(|| Error::Invalid(format!("{} has no app type", e.id)))?;
            if label >= N_APP_TYPES {
                return Err(Error::Invalid(format!("{}: app type {label} out of range", e.id)));
            }
            items.push(TaskItem::AppType { ui: i, label });
            ids.push(e.id.clone());
        }
        Ok(TaskData {
            task: Task::AppType,
            uis: &corpus.examples,
            items,
            ids,
        })
    }

    pub fn icon(corpus: &'a Corpus) -> Result<Self> {
        let mut items = Vec::new();
        let mut ids = Vec::new();
        for (i, e) in corpus.examples.iter().enumerate() {
            let labels = e
                .icon_labels
                .as_ref()
                .ok_or_else(|| Error::Invalid(format!("{} has no icon labels", e.id)))?;
            for (k, &label) in labels.iter().enumerate() {
                items.push(TaskItem::Icon {
                    ui: i,
                    img_index: k,
                    label,
                });
                ids.push(format!("{}#{k}", e.id));
            }
        }
        Ok(TaskData {
            task: Task::Icon,
            uis: &corpus.examples,
            items,
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Items of one split, in their original order.
    pub fn subset(&self, split: Split) -> TaskData<'a> {
        let splits = split_by_id(&self.ids);
        let keep: Vec<usize> = (0..self.len()).filter(|&i| splits[i] == split).collect();
        TaskData {
            task: self.task,
            uis: self.uis,
            items: keep.iter().map(|&i| self.items[i].clone()).collect(),
            ids: keep.iter().map(|&i| self.ids[i].clone()).collect(),
        }
    }

    /// Number of classes for classification tasks.
    fn n_classes(&self, heads: Option<&TaskHeads>) -> Option<usize> {
        match self.task {
            Task::Sync => Some(2),
            Task::AppType => Some(N_APP_TYPES),
            Task::Icon => heads.map(|h| h.n_icon_types),
            Task::Retrieval | Task::Referring => None,
        }
    }
}

fn encode_ui<T: Real>(
    g: &mut Graph<'_, T>,
    model: &Model,
    e: &UiExample,
    dropout: Option<&mut Dropout<'_>>,
) -> Result<EncoderOutput> {
    let seq = model.sequence(e, None)?;
    encode(g, model, &seq, dropout)
}

/// Logits of one item and its gold label. Sync yields a single logit.
fn item_logits<T: Real>(
    g: &mut Graph<'_, T>,
    model: &Model,
    heads: Option<&TaskHeads>,
    data: &TaskData<'_>,
    item: &TaskItem,
    mut dropout: Option<&mut Dropout<'_>>,
) -> Result<(Var, usize)> {
    let need = || heads.ok_or_else(|| Error::Invalid(format!("{} needs task heads", data.task.name())));
    match item {
        TaskItem::Retrieval {
            anchor,
            anchor_index,
            search,
            candidates,
            gold,
        } => {
            let a_out = encode_ui(g, model, &data.uis[*anchor], dropout.as_deref_mut())?;
            let a = component_output_embedding(g, &a_out, *anchor_index)?;
            let s_out = encode_ui(g, model, &data.uis[*search], dropout)?;
            let rows = candidates
                .iter()
                .map(|&c| component_output_embedding(g, &s_out, c))
                .collect::<Result<Vec<_>>>()?;
            let c = g.concat_rows(&rows)?;
            Ok((retrieval_scores_var(g, a, c)?, *gold))
        }
        TaskItem::Referring {
            ui,
            expression,
            candidates,
            gold,
        } => {
            let out = encode_ui(g, model, ui, dropout)?;
            let a = row(g, out.u, out.ocr_rows[*expression])?;
            let rows: Vec<usize> = candidates.iter().map(|&c| out.img_rows[c]).collect();
            let c = g.gather_rows(out.u, &rows)?;
            Ok((retrieval_scores_var(g, a, c)?, *gold))
        }
        TaskItem::Sync { ui, label } => {
            let out = encode_ui(g, model, ui, dropout)?;
            Ok((sync_logit(g, need()?, &out)?, usize::from(*label)))
        }
        TaskItem::AppType { ui, label } => {
            let out = encode_ui(g, model, &data.uis[*ui], dropout)?;
            Ok((app_logits(g, need()?, &out)?, *label))
        }
        TaskItem::Icon { ui, img_index, label } => {
            let h = need()?;
            if *label >= h.n_icon_types {
                return Err(Error::Invalid(format!(
                    "icon label {label} beyond head width {}",
                    h.n_icon_types
                )));
            }
            let out = encode_ui(g, model, &data.uis[*ui], dropout)?;
            Ok((icon_logits(g, h, &out, *img_index)?, *label))
        }
    }
}

fn item_loss<T: Real>(g: &mut Graph<'_, T>, task: Task, logits: Var, gold: usize) -> Result<Var> {
    if task == Task::Sync {
        // softplus(z) - y z
        let sp = g.softplus(logits);
        let s = g.sum(sp);
        let z = g.sum(logits);
        let yz = g.scale(z, gold as f64);
        g.sub(s, yz)
    } else {
        retrieval_finetune_loss(g, logits, gold)
    }
}

fn predict(task: Task, logits: &[f64]) -> usize {
    if task == Task::Sync {
        usize::from(sync_label(logits[0]))
    } else {
        argmax(logits)
    }
}

/// Predictions and gold labels for every item.
pub fn predictions<T: Real>(
    store: &ParamStore<T>,
    model: &Model,
    heads: Option<&TaskHeads>,
    data: &TaskData<'_>,
) -> Result<(Vec<usize>, Vec<usize>)> {
    let mut pred = Vec::with_capacity(data.len());
    let mut gold = Vec::with_capacity(data.len());
    for item in &data.items {
        let mut g = Graph::with_params(store);
        let (z, y) = item_logits(&mut g, model, heads, data, item, None)?;
        let logits: Vec<f64> = g.data(z).iter().map(|v| v.as_f64()).collect();
        pred.push(predict(data.task, &logits));
        gold.push(y);
    }
    Ok((pred, gold))
}

/// Accuracy (argmax, lowest index on ties) and, for classification tasks,
/// macro F1. Zero-shot mode uses no head parameters.
pub fn evaluate<T: Real>(
    store: &ParamStore<T>,
    model: &Model,
    heads: Option<&TaskHeads>,
    data: &TaskData<'_>,
    mode: EvalMode,
) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Invalid(format!("no {} examples to evaluate", data.task.name())));
    }
    if mode == EvalMode::ZeroShot && data.task.needs_head() {
        return Err(Error::Invalid(format!("{} has no zero-shot mode", data.task.name())));
    }
    let heads = if mode == EvalMode::ZeroShot { None } else { heads };
    let (pred, gold) = predictions(store, model, heads, data)?;
    let hits = pred.iter().zip(&gold).filter(|(p, g)| p == g).count();
    let (macro_f1, per_class_f1) = match data.n_classes(heads) {
        Some(n) => {
            let conf = confusion(&gold, &pred, n)?;
            (Some(macro_f1(&conf)), per_class_f1(&conf))
        }
        None => (None, Vec::new()),
    };
    Ok(EvalReport {
        task: data.task,
        mode,
        accuracy: hits as f64 / data.len() as f64,
        macro_f1,
        n_examples: data.len(),
        per_class_f1,
    })
}

pub fn evaluate_retrieval<T: Real>(
    store: &ParamStore<T>,
    model: &Model,
    corpus: &Corpus,
    pairs: &[RetrievalPair],
    mode: EvalMode,
) -> Result<EvalReport> {
    evaluate(store, model, None, &TaskData::retrieval(corpus, pairs)?, mode)
}

pub fn evaluate_referring<T: Real>(
    store: &ParamStore<T>,
    model: &Model,
    corpus: &Corpus,
    examples: &[ReferringExample],
    mode: EvalMode,
) -> Result<EvalReport> {
    evaluate(store, model, None, &TaskData::referring(corpus, examples)?, mode)
}

pub fn sync_predict<T: Real>(store: &ParamStore<T>, model: &Model, heads: &TaskHeads, e: &UiExample) -> Result<u8> {
    let mut g = Graph::with_params(store);
    let out = encode_ui(&mut g, model, e, None)?;
    let z = sync_logit(&mut g, heads, &out)?;
    Ok(sync_label(g.scalar(z).as_f64()))
}

pub fn app_type_predict<T: Real>(
    store: &ParamStore<T>,
    model: &Model,
    heads: &TaskHeads,
    e: &UiExample,
) -> Result<usize> {
    let mut g = Graph::with_params(store);
    let out = encode_ui(&mut g, model, e, None)?;
    let z = app_logits(&mut g, heads, &out)?;
    Ok(argmax(g.data(z)))
}

pub fn icon_predict<T: Real>(
    store: &ParamStore<T>,
    model: &Model,
    heads: &TaskHeads,
    e: &UiExample,
    img_idx: usize,
) -> Result<usize> {
    let mut g = Graph::with_params(store);
    let out = encode_ui(&mut g, model, e, None)?;
    let z = icon_logits(&mut g, heads, &out, img_idx)?;
    Ok(argmax(g.data(z)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub dropout: f64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        FinetuneConfig {
            steps: 300,
            batch_size: 8,
            adam: AdamConfig::default(),
            dropout: 0.1,
        }
    }
}

impl FinetuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch_size must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Invalid(format!("dropout={} must lie in [0, 1)", self.dropout)));
        }
        if self.adam.lr.is_nan() || self.adam.lr <= 0.0 {
            return Err(Error::Invalid("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Trains encoder and heads end to end on `train`, with dropout on the
/// transformer sublayers. `on_step` receives each step's mean loss.
pub fn finetune<T: Real>(
    store: &mut ParamStore<T>,
    model: &Model,
    heads: Option<&TaskHeads>,
    train: &TaskData<'_>,
    cfg: &FinetuneConfig,
    seed: u64,
    mut on_step: impl FnMut(usize, f64) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Invalid(format!("no {} training examples", train.task.name())));
    }
    if train.task.needs_head() && heads.is_none() {
        return Err(Error::Invalid(format!("{} needs task heads", train.task.name())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = AdamState::new(store, cfg.adam);
    let bsz = cfg.batch_size.min(train.len());
    for step in 1..=cfg.steps {
        let batch = index::sample(&mut rng, train.len(), bsz).into_vec();
        let mut grads = Gradients::empty(store.len());
        let mut total = 0.0;
        for &i in &batch {
            let mut g = Graph::with_params(store);
            let mut drop = Dropout {
                rate: cfg.dropout,
                rng: &mut rng,
            };
            let (z, y) = item_logits(&mut g, model, heads, train, &train.items[i], Some(&mut drop))?;
            let loss = item_loss(&mut g, train.task, z, y)?;
            total += g.scalar(loss).as_f64();
            grads.add_assign(&g.backward(loss)?);
        }
        grads.scale(T::of(1.0 / bsz as f64));
        if !grads.is_finite() {
            return Err(Error::Invalid(format!("non-finite gradient at finetune step {step}")));
        }
        adam_step(store, &grads, &mut adam);
        on_step(step, total / bsz as f64)?;
    }
    Ok(())
}

/// CLS embedding and `2d`-wide component embeddings of every IMG.
pub fn ui_embeddings<T: Real>(
    store: &ParamStore<T>,
    model: &Model,
    e: &UiExample,
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    let mut g = Graph::with_params(store);
    let out = encode_ui(&mut g, model, e, None)?;
    let cls = row(&mut g, out.u, 0)?;
    let cls = g.value(cls).to_f64_vec();
    let comps = (0..e.img.len())
        .map(|i| component_output_embedding(&mut g, &out, i).map(|v| g.value(v).to_f64_vec()))
        .collect::<Result<_>>()?;
    Ok((cls, comps))
}

/// Masks every VH content description and greedily decodes each one.
pub fn generate_descriptions<T: Real>(store: &ParamStore<T>, model: &Model, e: &UiExample) -> Result<Vec<Vec<u32>>> {
    if e.vh.is_empty() {
        return Ok(Vec::new());
    }
    let mask = MaskSpec {
        modality: Modality::Vh,
        indices: (0..e.vh.len()).collect(),
        ocr_positions: Vec::new(),
        mask_desc: true,
        mask_class: false,
    };
    let seq = model.sequence(e, Some(&mask))?;
    let mut g = Graph::with_params(store);
    let out = encode(&mut g, model, &seq, None)?;
    let max_len = model.config.max_field_tokens + 1;
    (0..e.vh.len())
        .map(|i| {
            let u = row(&mut g, out.u, out.vh_rows[i])?;
            gru_greedy(&mut g, &model.params.gru, u, max_len)
        })
        .collect()
}

/// Fraction of non-empty descriptions decoded exactly.
pub fn description_exact_match<T: Real>(
    store: &ParamStore<T>,
    model: &Model,
    uis: &[UiExample],
) -> Result<(f64, usize)> {
    let (mut hits, mut total) = (0usize, 0usize);
    for e in uis {
        for (gen, c) in generate_descriptions(store, model, e)?.iter().zip(&e.vh) {
            if c.desc_tokens.is_empty() {
                continue;
            }
            total += 1;
            hits += usize::from(*gen == c.desc_tokens);
        }
    }
    if total == 0 {
        return Err(Error::Invalid("no descriptions to generate".into()));
    }
    Ok((hits as f64 / total as f64, total))
}
