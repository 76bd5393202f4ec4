//! Pretraining: fake UIs, masking, the five task losses and the training
//! loop.
//!
//! A real UI gets one modality masked and pays the RUI loss plus the masked
//! task loss of that modality; a fake UI pays RUI plus the per-component
//! real/fake loss. Nothing else is combined.

use rand::prelude::*;
use rand::seq::index;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{encode, gru_decode, row, EncoderOutput, MaskSpec, Modality, Model, Registrar};
use crate::error::{Error, Result};
use crate::features::EOS;
use crate::model::{UiExample, N_CLASSES};
use crate::numerics::{adam_step, AdamConfig, AdamState, Gradients, Graph, ParamId, ParamStore, Real, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub replace_rate: f64,
    pub mask_rate: f64,
    pub ocr_token_mask_rate: f64,
    pub p_fake: f64,
    pub lambda: f64,
    pub k_negatives: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub log_interval: usize,
    /// 0 writes only the final checkpoint.
    pub checkpoint_interval: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            replace_rate: 0.15,
            mask_rate: 0.15,
            ocr_token_mask_rate: 0.15,
            p_fake: 0.5,
            lambda: 2.0,
            k_negatives: 5,
            steps: 2000,
            batch_size: 16,
            adam: AdamConfig::default(),
            log_interval: 1,
            checkpoint_interval: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        let rate = |name: &str, v: f64| {
            if v > 0.0 && v <= 1.0 {
                Ok(())
            } else {
                Err(Error::Invalid(format!("{name}={v} must lie in (0, 1]")))
            }
        };
        rate("replace_rate", self.replace_rate)?;
        rate("mask_rate", self.mask_rate)?;
        rate("ocr_token_mask_rate", self.ocr_token_mask_rate)?;
        if !(0.0..=1.0).contains(&self.p_fake) {
            return Err(Error::Invalid(format!("p_fake={} must lie in [0, 1]", self.p_fake)));
        }
        if self.lambda.is_nan() || self.lambda <= 0.0 {
            return Err(Error::Invalid(format!("lambda={} must be positive", self.lambda)));
        }
        if self.batch_size == 0 || self.log_interval == 0 {
            return Err(Error::Invalid("batch_size and log_interval must be positive".into()));
        }
        if self.batch_size < 2 && self.p_fake > 0.0 {
            return Err(Error::Invalid("fake UIs need a batch of at least 2".into()));
        }
        if self.adam.lr.is_nan() || self.adam.lr <= 0.0 {
            return Err(Error::Invalid("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// `max(1, round(rate * n))`, capped at `n`.
pub fn replacement_count(rate: f64, n: usize) -> usize {
    ((rate * n as f64).round() as usize).max(1).min(n)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FakeSpec {
    pub modality: Modality,
    /// Sorted indices of replaced components in the fake UI.
    pub replaced: Vec<usize>,
    /// Where each replaced component came from in the source UI.
    pub source_indices: Vec<usize>,
    pub source_ui: String,
}

impl FakeSpec {
    /// `y_i`: 0 for replaced components, 1 otherwise.
    pub fn label(&self, m: Modality, i: usize) -> u8 {
        u8::from(!(m == self.modality && self.replaced.binary_search(&i).is_ok()))
    }
}

/// Replaces `max(1, round(rate * n))` components of one uniformly chosen
/// modality of `a` with random components of `b`. Replacements keep `a`'s
/// bounds; all other fields of `a` are untouched.
pub fn make_fake_ui(
    a: &UiExample,
    b: &UiExample,
    cfg: &PretrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(UiExample, FakeSpec)> {
    let feasible = |m: Modality| {
        let n = m.count(a);
        n > 0 && m.count(b) >= replacement_count(cfg.replace_rate, n)
    };
    let first = Modality::ALL[rng.random_range(0..3)];
    let modality = if feasible(first) {
        first
    } else {
        let others: Vec<Modality> = Modality::ALL.into_iter().filter(|&m| feasible(m)).collect();
        *others
            .choose(rng)
            .ok_or_else(|| Error::Invalid(format!("{} cannot donate components to {}", b.id, a.id)))?
    };
    let n = modality.count(a);
    let k = replacement_count(cfg.replace_rate, n);
    let mut replaced = index::sample(rng, n, k).into_vec();
    replaced.sort_unstable();
    let source_indices = index::sample(rng, modality.count(b), k).into_vec();
    let mut fake = a.clone();
    for (&i, &j) in replaced.iter().zip(&source_indices) {
        match modality {
            Modality::Img => {
                fake.img[i].patch = b.img[j].patch.clone();
                if let (Some(fl), Some(bl)) = (fake.icon_labels.as_mut(), b.icon_labels.as_ref()) {
                    fl[i] = bl[j];
                }
            }
            Modality::Ocr => fake.ocr[i].tokens = b.ocr[j].tokens.clone(),
            Modality::Vh => {
                let bounds = fake.vh[i].bounds;
                fake.vh[i] = b.vh[j].clone();
                fake.vh[i].bounds = bounds;
            }
        }
    }
    Ok((
        fake,
        FakeSpec {
            modality,
            replaced,
            source_indices,
            source_ui: b.id.clone(),
        },
    ))
}

/// Masks `max(1, round(rate * n))` components of one uniformly chosen
/// modality. Masked OCR components score each token with probability
/// `ocr_token_mask_rate`, at least one.
pub fn sample_mask(e: &UiExample, cfg: &PretrainConfig, rng: &mut ChaCha8Rng) -> Result<MaskSpec> {
    let present: Vec<Modality> = Modality::ALL.into_iter().filter(|m| m.count(e) > 0).collect();
    let modality = *present
        .choose(rng)
        .ok_or_else(|| Error::Invalid(format!("{} has no components", e.id)))?;
    sample_mask_of(e, modality, cfg, rng)
}

pub fn sample_mask_of(
    e: &UiExample,
    modality: Modality,
    cfg: &PretrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<MaskSpec> {
    let n = modality.count(e);
    if n == 0 {
        return Err(Error::Invalid(format!("{}: nothing to mask", e.id)));
    }
    let mut indices = index::sample(rng, n, replacement_count(cfg.mask_rate, n)).into_vec();
    indices.sort_unstable();
    let ocr_positions = if modality == Modality::Ocr {
        indices
            .iter()
            .map(|&i| {
                let len = e.ocr[i].tokens.len();
                let mut pos: Vec<usize> = (0..len).filter(|_| rng.random_bool(cfg.ocr_token_mask_rate)).collect();
                if pos.is_empty() {
                    pos.push(rng.random_range(0..len));
                }
                pos
            })
            .collect()
    } else {
        Vec::new()
    };
    let vh = modality == Modality::Vh;
    Ok(MaskSpec {
        modality,
        indices,
        ocr_positions,
        mask_desc: vh,
        mask_class: vh,
    })
}

/// The `k` IMG components nearest to IMG `i` by bounds-center distance,
/// ties to the lower index.
pub fn select_negatives(e: &UiExample, i: usize, k: usize) -> Vec<usize> {
    let (cx, cy) = e.img[i].bounds.center();
    let mut others: Vec<(f64, usize)> = e
        .img
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(j, c)| {
            let (x, y) = c.bounds.center();
            ((x - cx).hypot(y - cy), j)
        })
        .collect();
    others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    others.into_iter().take(k).map(|(_, j)| j).collect()
}

#[derive(Clone, Debug)]
pub struct PretrainHeads {
    pub rui_w: ParamId,
    pub rui_b: ParamId,
    pub rcp_w: ParamId,
    pub rcp_b: ParamId,
    pub class_w: ParamId,
    pub class_b: ParamId,
}

impl PretrainHeads {
    pub fn init<T: Real>(model: &Model, store: &mut ParamStore<T>, seed: u64) -> Result<Self> {
        Self::attach(model, store, seed, false)
    }

    pub fn from_store<T: Real>(model: &Model, store: &mut ParamStore<T>) -> Result<Self> {
        Self::attach(model, store, 0, true)
    }

    fn attach<T: Real>(model: &Model, store: &mut ParamStore<T>, seed: u64, existing: bool) -> Result<Self> {
        let d = model.config.d;
        let mut r = Registrar { store, seed, existing };
        Ok(PretrainHeads {
            rui_w: r.weight("head.rui.w", &[d, 1])?,
            rui_b: r.zeros("head.rui.b", 1)?,
            rcp_w: r.weight("head.rcp.w", &[d, 1])?,
            rcp_b: r.zeros("head.rcp.b", 1)?,
            class_w: r.weight("head.class.w", &[d, N_CLASSES])?,
            class_b: r.zeros("head.class.b", N_CLASSES)?,
        })
    }
}

fn constant_col<T: Real>(g: &mut Graph<'_, T>, values: &[f64]) -> Result<Var> {
    g.constant(Tensor::from_f64(vec![values.len(), 1], values)?).pipe(Ok)
}

trait Pipe: Sized {
    fn pipe<R>(self, f: impl FnOnce(Self) -> R) -> R {
        f(self)
    }
}

impl<T> Pipe for T {}

/// Weighted binary cross-entropy `sum_i w_i (softplus(z_i) - y_i z_i)` over
/// an `m x 1` logit column.
fn weighted_bce<T: Real>(g: &mut Graph<'_, T>, z: Var, y: &[f64], w: &[f64]) -> Result<Var> {
    let sp = g.softplus(z);
    let yc = constant_col(g, y)?;
    let yz = g.mul(z, yc)?;
    let per = g.sub(sp, yz)?;
    let wc = constant_col(g, w)?;
    let weighted = g.mul(per, wc)?;
    Ok(g.sum(weighted))
}

/// Logit of the real-UI probability from the CLS row.
pub fn rui_logit<T: Real>(g: &mut Graph<'_, T>, heads: &PretrainHeads, out: &EncoderOutput) -> Result<Var> {
    let cls = row(g, out.u, 0)?;
    g.linear(cls, heads.rui_w, Some(heads.rui_b))
}

/// Binary cross-entropy of `y` (1 = real) against `sigmoid(FC(U_CLS))`.
pub fn loss_rui<T: Real>(g: &mut Graph<'_, T>, heads: &PretrainHeads, out: &EncoderOutput, y: f64) -> Result<Var> {
    let z = rui_logit(g, heads, out)?;
    weighted_bce(g, z, &[y], &[1.0])
}

/// Per-component real/fake cross-entropy over every IMG, OCR and VH row with
/// a shared head; replaced components weigh `lambda`.
pub fn loss_rcp<T: Real>(
    g: &mut Graph<'_, T>,
    heads: &PretrainHeads,
    out: &EncoderOutput,
    fake: &FakeSpec,
    lambda: f64,
) -> Result<Var> {
    let mut rows = Vec::new();
    let mut y = Vec::new();
    for m in Modality::ALL {
        for (i, &r) in out.rows(m).iter().enumerate() {
            rows.push(r);
            y.push(f64::from(fake.label(m, i)));
        }
    }
    let w: Vec<f64> = y.iter().map(|&v| if v == 0.0 { lambda } else { 1.0 }).collect();
    let u = g.gather_rows(out.u, &rows)?;
    let z = g.linear(u, heads.rcp_w, Some(heads.rcp_b))?;
    weighted_bce(g, z, &y, &w)
}

/// Softmax contrastive loss of each masked IMG output row against the
/// content embedding of its original component and of its negatives.
pub fn loss_mip<T: Real>(
    g: &mut Graph<'_, T>,
    out: &EncoderOutput,
    mask: &MaskSpec,
    negatives: &[Vec<usize>],
) -> Result<Option<Var>> {
    if mask.modality != Modality::Img || mask.indices.is_empty() {
        return Ok(None);
    }
    if negatives.len() != mask.indices.len() {
        return Err(Error::Invalid("one negative set per masked IMG".into()));
    }
    let mut terms = Vec::with_capacity(mask.indices.len());
    for (&i, neg) in mask.indices.iter().zip(negatives) {
        let mut cand = vec![i];
        cand.extend(neg);
        let u = row(g, out.u, out.img_rows[i])?;
        let c = g.gather_rows(out.img_content, &cand)?;
        let ct = g.transpose(c)?;
        let s = g.matmul(u, ct)?;
        let ls = g.log_softmax(s);
        let own = g.pick(ls, &[(0, 0)])?;
        terms.push(g.sum(own));
    }
    let total = sum_terms(g, &terms)?;
    Ok(Some(g.scale(total, -1.0)))
}

fn token_ce<T: Real>(g: &mut Graph<'_, T>, logits: Var, at: &[(usize, usize)]) -> Result<Var> {
    let ls = g.log_softmax(logits);
    let picked = g.pick(ls, at)?;
    let s = g.sum(picked);
    Ok(g.scale(s, -1.0))
}

/// Teacher-forced decoding of each masked OCR component from its output
/// row, cross-entropy at the masked token positions only.
pub fn loss_mog<T: Real>(
    g: &mut Graph<'_, T>,
    model: &Model,
    out: &EncoderOutput,
    e: &UiExample,
    mask: &MaskSpec,
) -> Result<Option<Var>> {
    if mask.modality != Modality::Ocr || mask.indices.is_empty() {
        return Ok(None);
    }
    let mut terms = Vec::new();
    for (&i, pos) in mask.indices.iter().zip(&mask.ocr_positions) {
        let tokens = &e.ocr[i].tokens;
        let u = row(g, out.u, out.ocr_rows[i])?;
        let logits = gru_decode(g, &model.params.gru, u, tokens)?;
        let at: Vec<(usize, usize)> = pos.iter().map(|&p| (p, tokens[p] as usize)).collect();
        terms.push(token_ce(g, logits, &at)?);
    }
    sum_terms(g, &terms).map(Some)
}

/// Description target: the tokens followed by EOS, or nothing when empty.
pub fn desc_target(desc: &[u32]) -> Vec<u32> {
    if desc.is_empty() {
        return Vec::new();
    }
    let mut t = desc.to_vec();
    t.push(EOS);
    t
}

/// Class cross-entropy plus teacher-forced description cross-entropy for
/// each masked VH component.
pub fn loss_mvg<T: Real>(
    g: &mut Graph<'_, T>,
    model: &Model,
    heads: &PretrainHeads,
    out: &EncoderOutput,
    e: &UiExample,
    mask: &MaskSpec,
) -> Result<Option<Var>> {
    if mask.modality != Modality::Vh || mask.indices.is_empty() {
        return Ok(None);
    }
    let mut terms = Vec::new();
    for &i in &mask.indices {
        let u = row(g, out.u, out.vh_rows[i])?;
        let class_logits = g.linear(u, heads.class_w, Some(heads.class_b))?;
        terms.push(token_ce(g, class_logits, &[(0, e.vh[i].class_id)])?);
        let target = desc_target(&e.vh[i].desc_tokens);
        if !target.is_empty() {
            let logits = gru_decode(g, &model.params.gru, u, &target)?;
            let at: Vec<(usize, usize)> = target.iter().enumerate().map(|(p, &t)| (p, t as usize)).collect();
            terms.push(token_ce(g, logits, &at)?);
        }
    }
    sum_terms(g, &terms).map(Some)
}

fn sum_terms<T: Real>(g: &mut Graph<'_, T>, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = g.add(acc, t)?;
    }
    Ok(acc)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_rui: f64,
    pub l_rcp: f64,
    pub l_mip: f64,
    pub l_mog: f64,
    pub l_mvg: f64,
    pub total: f64,
    pub n_rcp: usize,
    pub n_mip: usize,
    pub n_mog: usize,
    pub n_mvg: usize,
}

impl LossBreakdown {
    /// Sum of the five parts, in the order the total is built.
    pub fn recombined(&self) -> f64 {
        self.l_rui + self.l_rcp + self.l_mip + self.l_mog + self.l_mvg
    }
}

pub enum Role<'a> {
    Real,
    /// Fake, with the donor UI.
    Fake(&'a UiExample),
}

/// A UI ready for the loss: masked real, or fake with its labels.
#[derive(Clone, Debug)]
pub enum Prepared {
    Real { ui: UiExample, mask: MaskSpec },
    Fake { ui: UiExample, spec: FakeSpec },
}

impl Prepared {
    pub fn ui(&self) -> &UiExample {
        match self {
            Prepared::Real { ui, .. } | Prepared::Fake { ui, .. } => ui,
        }
    }

    pub fn is_real(&self) -> bool {
        matches!(self, Prepared::Real { .. })
    }
}

pub fn prepare(e: &UiExample, role: Role<'_>, cfg: &PretrainConfig, rng: &mut ChaCha8Rng) -> Result<Prepared> {
    match role {
        Role::Real => Ok(Prepared::Real {
            ui: e.clone(),
            mask: sample_mask(e, cfg, rng)?,
        }),
        Role::Fake(b) => {
            let (ui, spec) = make_fake_ui(e, b, cfg, rng)?;
            Ok(Prepared::Fake { ui, spec })
        }
    }
}

/// The combined objective for one prepared UI as a scalar on `g`.
pub fn prepared_loss<T: Real>(
    g: &mut Graph<'_, T>,
    model: &Model,
    heads: &PretrainHeads,
    prepared: &Prepared,
    cfg: &PretrainConfig,
) -> Result<(Var, LossBreakdown)> {
    let mut b = LossBreakdown::default();
    let scalar = |g: &Graph<'_, T>, v: Var| g.scalar(v).as_f64();
    let total = match prepared {
        Prepared::Fake { ui, spec } => {
            let seq = model.sequence(ui, None)?;
            let out = encode(g, model, &seq, None)?;
            let rui = loss_rui(g, heads, &out, 0.0)?;
            let rcp = loss_rcp(g, heads, &out, spec, cfg.lambda)?;
            b.l_rui = scalar(g, rui);
            b.l_rcp = scalar(g, rcp);
            b.n_rcp = out.img_rows.len() + out.ocr_rows.len() + out.vh_rows.len();
            g.add(rui, rcp)?
        }
        Prepared::Real { ui, mask } => {
            let seq = model.sequence(ui, Some(mask))?;
            let out = encode(g, model, &seq, None)?;
            let rui = loss_rui(g, heads, &out, 1.0)?;
            b.l_rui = scalar(g, rui);
            let negatives: Vec<Vec<usize>> = match mask.modality {
                Modality::Img => mask
                    .indices
                    .iter()
                    .map(|&i| select_negatives(ui, i, cfg.k_negatives))
                    .collect(),
                _ => Vec::new(),
            };
            let masked = match mask.modality {
                Modality::Img => loss_mip(g, &out, mask, &negatives)?,
                Modality::Ocr => loss_mog(g, model, &out, ui, mask)?,
                Modality::Vh => loss_mvg(g, model, heads, &out, ui, mask)?,
            };
            match masked {
                Some(m) => {
                    let v = scalar(g, m);
                    match mask.modality {
                        Modality::Img => (b.l_mip, b.n_mip) = (v, mask.indices.len()),
                        Modality::Ocr => (b.l_mog, b.n_mog) = (v, mask.ocr_positions.iter().map(Vec::len).sum()),
                        Modality::Vh => (b.l_mvg, b.n_mvg) = (v, mask.indices.len()),
                    }
                    g.add(rui, m)?
                }
                None => rui,
            }
        }
    };
    b.total = g.scalar(total).as_f64();
    Ok((total, b))
}

pub fn total_loss<T: Real>(
    g: &mut Graph<'_, T>,
    model: &Model,
    heads: &PretrainHeads,
    e: &UiExample,
    role: Role<'_>,
    cfg: &PretrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(Var, LossBreakdown)> {
    let prepared = prepare(e, role, cfg, rng)?;
    prepared_loss(g, model, heads, &prepared, cfg)
}

/// One metrics log row: batch means of the loss parts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub l_rui: f64,
    pub l_rcp: f64,
    pub l_mip: f64,
    pub l_mog: f64,
    pub l_mvg: f64,
    pub total: f64,
}

/// Loss and gradients of one prepared UI on its own tape.
pub fn example_gradients<T: Real>(
    store: &ParamStore<T>,
    model: &Model,
    heads: &PretrainHeads,
    prepared: &Prepared,
    cfg: &PretrainConfig,
) -> Result<(Gradients<T>, LossBreakdown)> {
    let mut g = Graph::with_params(store);
    let (loss, b) = prepared_loss(&mut g, model, heads, prepared, cfg)?;
    Ok((g.backward(loss)?, b))
}

/// Runs `cfg.steps` Adam steps on batch-mean losses. `on_step` sees every
/// step's metrics and the updated parameters, in step order.
pub fn pretrain<T: Real>(
    corpus: &[UiExample],
    model: &Model,
    heads: &PretrainHeads,
    store: &mut ParamStore<T>,
    cfg: &PretrainConfig,
    seed: u64,
    mut on_step: impl FnMut(&MetricsRow, &ParamStore<T>) -> Result<()>,
) -> Result<()> {
    cfg.validate()?;
    if corpus.len() < cfg.batch_size {
        return Err(Error::Invalid(format!(
            "corpus of {} UIs is smaller than batch size {}",
            corpus.len(),
            cfg.batch_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = AdamState::new(store, cfg.adam);
    let bsz = cfg.batch_size;
    for step in 1..=cfg.steps {
        let batch = index::sample(&mut rng, corpus.len(), bsz).into_vec();
        let mut grads = Gradients::empty(store.len());
        let mut sums = [0.0; 6];
        for (pos, &i) in batch.iter().enumerate() {
            let role = if rng.random_bool(cfg.p_fake) {
                let mut other = rng.random_range(0..bsz - 1);
                if other >= pos {
                    other += 1;
                }
                Role::Fake(&corpus[batch[other]])
            } else {
                Role::Real
            };
            let prepared = prepare(&corpus[i], role, cfg, &mut rng)?;
            let (g, b) = example_gradients(store, model, heads, &prepared, cfg)?;
            grads.add_assign(&g);
            for (s, v) in sums
                .iter_mut()
                .zip([b.l_rui, b.l_rcp, b.l_mip, b.l_mog, b.l_mvg, b.total])
            {
                *s += v;
            }
        }
        grads.scale(T::of(1.0 / bsz as f64));
        if !grads.is_finite() {
            return Err(Error::Invalid(format!("non-finite gradient at step {step}")));
        }
        adam_step(store, &grads, &mut adam);
        let m = sums.map(|s| s / bsz as f64);
        let metrics = MetricsRow {
            step,
            l_rui: m[0],
            l_rcp: m[1],
            l_mip: m[2],
            l_mog: m[3],
            l_mvg: m[4],
            total: m[5],
        };
        if !metrics.total.is_finite() {
            return Err(Error::Invalid(format!("non-finite loss at step {step}")));
        }
        on_step(&metrics, store)?;
    }
    Ok(())
}

/// Trailing mean of `values[..=i]` over at most `window` entries.
pub fn moving_average(values: &[f64], window: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(values.len());
    let mut acc = 0.0;
    for i in 0..values.len() {
        acc += values[i];
        if i >= window {
            acc -= values[i - window];
        }
        out.push(acc / (i + 1).min(window) as f64);
    }
    out
}

/// Real/fake accuracy on held-out UIs: each UI is scored once masked as a
/// real UI and once corrupted by its successor.
pub fn evaluate_rui<T: Real>(
    store: &ParamStore<T>,
    model: &Model,
    heads: &PretrainHeads,
    uis: &[UiExample],
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<f64> {
    if uis.len() < 2 {
        return Err(Error::Invalid("need at least 2 UIs".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut correct = 0usize;
    for (i, e) in uis.iter().enumerate() {
        let donor = &uis[(i + 1) % uis.len()];
        for role in [Role::Real, Role::Fake(donor)] {
            let prepared = prepare(e, role, cfg, &mut rng)?;
            let mask = match &prepared {
                Prepared::Real { mask, .. } => Some(mask),
                Prepared::Fake { .. } => None,
            };
            let seq = model.sequence(prepared.ui(), mask)?;
            let mut g = Graph::with_params(store);
            let out = encode(&mut g, model, &seq, None)?;
            let z = rui_logit(&mut g, heads, &out)?;
            let says_real = g.scalar(z).as_f64() >= 0.0;
            correct += usize::from(says_real == prepared.is_real());
        }
    }
    Ok(correct as f64 / (2 * uis.len()) as f64)
}

/// How often a masked IMG row scores its own content above all `k`
/// negatives. Only items with a full set of `k` negatives count.
pub fn evaluate_mip<T: Real>(
    store: &ParamStore<T>,
    model: &Model,
    uis: &[UiExample],
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<(f64, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut hits, mut total) = (0usize, 0usize);
    for e in uis.iter().filter(|e| e.img.len() > cfg.k_negatives) {
        let mask = sample_mask_of(e, Modality::Img, cfg, &mut rng)?;
        let seq = model.sequence(e, Some(&mask))?;
        let mut g = Graph::with_params(store);
        let out = encode(&mut g, model, &seq, None)?;
        let d = model.config.d;
        let u = g.data(out.u).to_vec();
        let c = g.data(out.img_content).to_vec();
        for &i in &mask.indices {
            let ui = &u[out.img_rows[i] * d..][..d];
            let score = |j: usize| -> f64 {
                ui.iter()
                    .zip(&c[j * d..][..d])
                    .map(|(a, b)| a.as_f64() * b.as_f64())
                    .sum()
            };
            let pos = score(i);
            let negs = select_negatives(e, i, cfg.k_negatives);
            hits += usize::from(negs.iter().all(|&j| score(j) < pos));
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Invalid("no UI has enough IMG components".into()));
    }
    Ok((hits as f64 / total as f64, total))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{FeatureConfig, FeatureEncoder};
    use crate::model::tests::sample_ui;
    use crate::model::BoundingBox;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(5)
    }

    #[test]
    fn rounding_rule() {
        assert_eq!(replacement_count(0.15, 20), 3);
        assert_eq!(replacement_count(0.15, 2), 1);
        assert_eq!(replacement_count(0.15, 10), 2);
        assert_eq!(replacement_count(0.15, 1), 1);
    }

    #[test]
    fn fake_touches_one_modality() {
        let a = sample_ui(20, 4);
        let mut b = sample_ui(20, 4);
        b.id = "donor".into();
        for c in &mut b.img {
            c.patch.iter_mut().for_each(|v| *v = 1.0 - *v);
        }
        for c in &mut b.ocr {
            c.tokens = vec![99];
        }
        for c in &mut b.vh {
            c.desc_tokens = vec![98];
        }
        let cfg = PretrainConfig::default();
        let mut r = rng();
        let mut seen = std::collections::HashSet::new();
        for _ in 0..30 {
            let (fake, spec) = make_fake_ui(&a, &b, &cfg, &mut r).unwrap();
            seen.insert(spec.modality);
            let n = spec.modality.count(&a);
            assert_eq!(spec.replaced.len(), replacement_count(0.15, n));
            assert_eq!(spec.source_ui, "donor");
            if spec.modality == Modality::Img {
                assert_eq!(spec.replaced.len(), 3);
            }
            for m in Modality::ALL {
                for i in 0..m.count(&a) {
                    let changed = match m {
                        Modality::Img => fake.img[i] != a.img[i],
                        Modality::Ocr => fake.ocr[i] != a.ocr[i],
                        Modality::Vh => fake.vh[i] != a.vh[i],
                    };
                    assert_eq!(changed, fake_label_is_zero(&spec, m, i), "{m:?} {i}");
                }
            }
            for &i in &spec.replaced {
                match spec.modality {
                    Modality::Img => assert_eq!(fake.img[i].bounds, a.img[i].bounds),
                    Modality::Ocr => assert_eq!(fake.ocr[i].bounds, a.ocr[i].bounds),
                    Modality::Vh => assert_eq!(fake.vh[i].bounds, a.vh[i].bounds),
                }
            }
        }
        assert_eq!(seen.len(), 3);
    }

    fn fake_label_is_zero(spec: &FakeSpec, m: Modality, i: usize) -> bool {
        spec.label(m, i) == 0
    }

    #[test]
    fn fake_needs_a_big_enough_donor() {
        let a = sample_ui(20, 20);
        let mut b = sample_ui(1, 1);
        b.vh.clear();
        let cfg = PretrainConfig::default();
        assert!(make_fake_ui(&a, &b, &cfg, &mut rng()).is_err());
    }

    #[test]
    fn mask_counts_and_flags() {
        let cfg = PretrainConfig::default();
        let e = sample_ui(1, 10);
        let m = sample_mask_of(&e, Modality::Ocr, &cfg, &mut rng()).unwrap();
        assert_eq!(m.indices.len(), 2);
        assert!(m.ocr_positions.iter().all(|p| !p.is_empty()));
        let m = sample_mask_of(&e, Modality::Img, &cfg, &mut rng()).unwrap();
        assert_eq!(m.indices, vec![0]);
        let m = sample_mask_of(&e, Modality::Vh, &cfg, &mut rng()).unwrap();
        assert!(m.mask_desc && m.mask_class);
    }

    #[test]
    fn negatives_by_distance() {
        let mut e = sample_ui(3, 1);
        for (i, x) in [0.0, 0.375, 0.5].into_iter().enumerate() {
            e.img[i].bounds = BoundingBox::new(x, 0.0, x + 0.125, 0.125);
        }
        assert_eq!(select_negatives(&e, 1, 1), vec![2]);
        assert!(select_negatives(&e, 1, 0).is_empty());
        assert_eq!(select_negatives(&e, 1, 5), vec![2, 0]);
        // equidistant neighbours: lower index first
        e.img[2].bounds = BoundingBox::new(0.75, 0.0, 0.875, 0.125);
        assert_eq!(select_negatives(&e, 1, 1), vec![0]);
    }

    #[test]
    fn moving_average_window() {
        let ma = moving_average(&[1.0, 2.0, 3.0, 4.0], 2);
        assert_eq!(ma, vec![1.0, 1.5, 2.5, 3.5]);
    }

    #[test]
    fn tiny_training_run_is_deterministic_and_finite() {
        let fc = FeatureConfig {
            text_dim: 8,
            patch_dim: 8,
            vocab_size: 64,
        };
        let mc = crate::encoder::ModelConfig {
            d: 8,
            n_layers: 1,
            n_heads: 2,
            vocab_size: 64,
            ..Default::default()
        };
        let corpus: Vec<UiExample> = (0..4)
            .map(|i| {
                let mut e = sample_ui(3 + i, 2);
                e.id = format!("u{i}");
                e
            })
            .collect();
        let cfg = PretrainConfig {
            steps: 5,
            batch_size: 3,
            ..Default::default()
        };
        let run = || {
            let mut store = ParamStore::<f64>::new();
            let model = Model::init(mc.clone(), FeatureEncoder::new(fc, 1).unwrap(), &mut store, 2).unwrap();
            let heads = PretrainHeads::init(&model, &mut store, 2).unwrap();
            let mut rows = Vec::new();
            pretrain(&corpus, &model, &heads, &mut store, &cfg, 9, |m, _| {
                rows.push(*m);
                Ok(())
            })
            .unwrap();
            rows
        };
        let a = run();
        assert_eq!(a.len(), 5);
        assert!(a.iter().all(|r| r.total.is_finite()));
        assert_eq!(a, run());
    }
}
