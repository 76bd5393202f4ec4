//! Multimodal transformer encoder and the GRU token decoder.
//!
//! A UI becomes the sequence `CLS, IMG.., SEP, OCR.., SEP, VH.., SEP`. Each
//! row is the sum of a type embedding, a linear map of the 7-d positional
//! feature and a per-modality linear map of the content feature. Rows carry
//! no index encoding, so positions are known only through bounds.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{positional_feature, stable_hash, FeatureEncoder, BOS, EOS, POS_DIM};
use crate::model::{UiExample, N_CLASSES};
use crate::numerics::{init_params, Graph, InitKind, ParamId, ParamStore, Real, Tensor, Var};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: u32,
    pub n_classes: usize,
    pub max_seq_len: usize,
    pub max_field_tokens: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: 64,
            n_layers: 2,
            n_heads: 4,
            vocab_size: 2048,
            n_classes: N_CLASSES,
            max_seq_len: 64,
            max_field_tokens: 8,
        }
    }
}

impl ModelConfig {
    pub fn ffn_dim(&self) -> usize {
        4 * self.d
    }

    pub fn head_dim(&self) -> usize {
        self.d / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.n_heads == 0 || !self.d.is_multiple_of(self.n_heads) {
            return Err(Error::Invalid(format!(
                "d={} must be a positive multiple of n_heads={}",
                self.d, self.n_heads
            )));
        }
        if self.n_classes != N_CLASSES {
            return Err(Error::Invalid(format!("n_classes must be {N_CLASSES}")));
        }
        if self.vocab_size <= EOS + 1 || self.max_seq_len < 4 || self.max_field_tokens == 0 {
            return Err(Error::Invalid("vocab, sequence or field limits too small".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TypeTag {
    Img,
    Ocr,
    Vh,
    Cls,
    Sep,
    Mask,
}

impl TypeTag {
    pub const COUNT: usize = 6;

    pub fn index(self) -> usize {
        self as usize
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Modality {
    Img,
    Ocr,
    Vh,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Img, Modality::Ocr, Modality::Vh];

    pub fn tag(self) -> TypeTag {
        match self {
            Modality::Img => TypeTag::Img,
            Modality::Ocr => TypeTag::Ocr,
            Modality::Vh => TypeTag::Vh,
        }
    }

    pub fn count(self, e: &UiExample) -> usize {
        match self {
            Modality::Img => e.img.len(),
            Modality::Ocr => e.ocr.len(),
            Modality::Vh => e.vh.len(),
        }
    }
}

/// Components hidden from the encoder. IMG and OCR components lose their
/// whole content; VH components lose the class and description segments.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub modality: Modality,
    /// Sorted, unique component indices.
    pub indices: Vec<usize>,
    /// For OCR: scored token positions of each masked component, parallel
    /// to `indices`. Empty otherwise.
    pub ocr_positions: Vec<Vec<usize>>,
    pub mask_desc: bool,
    pub mask_class: bool,
}

impl MaskSpec {
    pub fn contains(&self, m: Modality, i: usize) -> bool {
        self.modality == m && self.indices.binary_search(&i).is_ok()
    }

    pub fn validate(&self, e: &UiExample) -> Result<()> {
        let n = self.modality.count(e);
        if self.indices.windows(2).any(|w| w[0] >= w[1]) || self.indices.iter().any(|&i| i >= n) {
            return Err(Error::Invalid(format!(
                "mask indices {:?} must be sorted, unique and below {n}",
                self.indices
            )));
        }
        if self.modality == Modality::Ocr {
            if self.ocr_positions.len() != self.indices.len() {
                return Err(Error::Invalid("one position list per masked OCR component".into()));
            }
            for (&i, pos) in self.indices.iter().zip(&self.ocr_positions) {
                let len = e.ocr[i].tokens.len();
                if pos.is_empty() || pos.iter().any(|&p| p >= len) {
                    return Err(Error::Invalid(format!("bad token positions {pos:?} for ocr[{i}]")));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeqToken {
    pub tag: TypeTag,
    /// Component this row stands for; `None` for CLS and SEP.
    pub origin: Option<(Modality, usize)>,
    /// Feature row feeding the content embedding; `None` means zeros.
    pub content: Option<(Modality, usize)>,
    pub position: [f64; POS_DIM],
}

#[derive(Clone, Debug, PartialEq)]
pub struct InputSequence {
    pub tokens: Vec<SeqToken>,
    /// Features of every IMG component, masked or not.
    pub img_features: Vec<Vec<f64>>,
    pub ocr_features: Vec<Vec<f64>>,
    pub vh_features: Vec<Vec<f64>>,
    pub img_rows: Vec<usize>,
    pub ocr_rows: Vec<usize>,
    pub vh_rows: Vec<usize>,
}

impl InputSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn rows(&self, m: Modality) -> &[usize] {
        match m {
            Modality::Img => &self.img_rows,
            Modality::Ocr => &self.ocr_rows,
            Modality::Vh => &self.vh_rows,
        }
    }
}

pub fn build_input_sequence(
    e: &UiExample,
    mask: Option<&MaskSpec>,
    features: &FeatureEncoder,
    max_seq_len: usize,
) -> Result<InputSequence> {
    let n = e.img.len() + e.ocr.len() + e.vh.len() + 4;
    if n > max_seq_len {
        return Err(Error::Invalid(format!(
            "{}: sequence length {n} exceeds {max_seq_len}",
            e.id
        )));
    }
    if let Some(m) = mask {
        m.validate(e)?;
    }
    let masked = |m: Modality, i: usize| mask.is_some_and(|s| s.contains(m, i));
    let text_dim = features.config().text_dim;
    let class_end = N_CLASSES;
    let desc = class_end + text_dim..class_end + 2 * text_dim;

    let img_features = e
        .img
        .iter()
        .map(|c| features.encode_image_patch(&c.patch))
        .collect::<Result<Vec<_>>>()?;
    let ocr_features = e
        .ocr
        .iter()
        .enumerate()
        .map(|(i, c)| {
            if masked(Modality::Ocr, i) {
                Ok(vec![0.0; text_dim])
            } else {
                features.encode_text(&c.tokens)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    let vh_features =
        e.vh.iter()
            .enumerate()
            .map(|(i, c)| {
                let mut f = features.vh_component_feature(c)?;
                if let Some(m) = mask.filter(|_| masked(Modality::Vh, i)) {
                    if m.mask_class {
                        f[..class_end].fill(0.0);
                    }
                    if m.mask_desc {
                        f[desc.clone()].fill(0.0);
                    }
                }
                Ok(f)
            })
            .collect::<Result<Vec<_>>>()?;

    let special = |tag| SeqToken {
        tag,
        origin: None,
        content: None,
        position: [0.0; POS_DIM],
    };
    let mut tokens = Vec::with_capacity(n);
    let mut rows: [Vec<usize>; 3] = Default::default();
    tokens.push(special(TypeTag::Cls));
    for (k, m) in Modality::ALL.into_iter().enumerate() {
        for i in 0..m.count(e) {
            let bounds = match m {
                Modality::Img => e.img[i].bounds,
                Modality::Ocr => e.ocr[i].bounds,
                Modality::Vh => e.vh[i].bounds,
            };
            let hidden = masked(m, i);
            rows[k].push(tokens.len());
            tokens.push(SeqToken {
                tag: if hidden { TypeTag::Mask } else { m.tag() },
                origin: Some((m, i)),
                content: if hidden && m != Modality::Vh {
                    None
                } else {
                    Some((m, i))
                },
                position: positional_feature(&bounds),
            });
        }
        tokens.push(special(TypeTag::Sep));
    }
    let [img_rows, ocr_rows, vh_rows] = rows;
    Ok(InputSequence {
        tokens,
        img_features,
        ocr_features,
        vh_features,
        img_rows,
        ocr_rows,
        vh_rows,
    })
}

#[derive(Clone, Debug)]
pub struct LayerParams {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub q_w: ParamId,
    pub q_b: ParamId,
    pub k_w: ParamId,
    pub k_b: ParamId,
    pub v_w: ParamId,
    pub v_b: ParamId,
    pub o_w: ParamId,
    pub o_b: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub ff1_w: ParamId,
    pub ff1_b: ParamId,
    pub ff2_w: ParamId,
    pub ff2_b: ParamId,
}

/// Gates are packed as `[z | r | n]` along the output axis.
#[derive(Clone, Debug)]
pub struct GruParams {
    pub init_w: ParamId,
    pub init_b: ParamId,
    pub embed: ParamId,
    pub x_w: ParamId,
    pub x_b: ParamId,
    pub h_w: ParamId,
    pub h_b: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub type_w: ParamId,
    pub pos_w: ParamId,
    pub img_w: ParamId,
    pub img_b: ParamId,
    pub ocr_w: ParamId,
    pub ocr_b: ParamId,
    pub vh_w: ParamId,
    pub vh_b: ParamId,
    pub layers: Vec<LayerParams>,
    pub gru: GruParams,
}

/// Registers (or looks up) named parameters. Initial values are seeded by
/// `seed` and the parameter name, so registration order does not matter.
pub(crate) struct Registrar<'a, T: Real> {
    pub store: &'a mut ParamStore<T>,
    pub seed: u64,
    /// Lookup only: missing parameters are an error.
    pub existing: bool,
}

impl<T: Real> Registrar<'_, T> {
    pub fn param(&mut self, name: &str, shape: &[usize], kind: InitKind) -> Result<ParamId> {
        if self.existing {
            return self.store.expect(name, shape);
        }
        let seed = self.seed ^ stable_hash(name.as_bytes());
        self.store.get_or_add(name, shape, || init_params(shape, seed, kind))
    }

    pub fn weight(&mut self, name: &str, shape: &[usize]) -> Result<ParamId> {
        self.param(name, shape, InitKind::UniformScaled)
    }

    pub fn zeros(&mut self, name: &str, len: usize) -> Result<ParamId> {
        self.param(name, &[len], InitKind::Zeros)
    }
}

impl EncoderParams {
    fn build<T: Real>(r: &mut Registrar<'_, T>, cfg: &ModelConfig, feat: &FeatureEncoder) -> Result<Self> {
        let d = cfg.d;
        let fc = feat.config();
        let v = cfg.vocab_size as usize;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for l in 0..cfg.n_layers {
            let p = |s: &str| format!("layer{l}.{s}");
            layers.push(LayerParams {
                ln1_g: r.param(&p("ln1.g"), &[d], InitKind::Ones)?,
                ln1_b: r.zeros(&p("ln1.b"), d)?,
                q_w: r.weight(&p("attn.q.w"), &[d, d])?,
                q_b: r.zeros(&p("attn.q.b"), d)?,
                k_w: r.weight(&p("attn.k.w"), &[d, d])?,
                k_b: r.zeros(&p("attn.k.b"), d)?,
                v_w: r.weight(&p("attn.v.w"), &[d, d])?,
                v_b: r.zeros(&p("attn.v.b"), d)?,
                o_w: r.weight(&p("attn.o.w"), &[d, d])?,
                o_b: r.zeros(&p("attn.o.b"), d)?,
                ln2_g: r.param(&p("ln2.g"), &[d], InitKind::Ones)?,
                ln2_b: r.zeros(&p("ln2.b"), d)?,
                ff1_w: r.weight(&p("ffn.1.w"), &[d, cfg.ffn_dim()])?,
                ff1_b: r.zeros(&p("ffn.1.b"), cfg.ffn_dim())?,
                ff2_w: r.weight(&p("ffn.2.w"), &[cfg.ffn_dim(), d])?,
                ff2_b: r.zeros(&p("ffn.2.b"), d)?,
            });
        }
        Ok(EncoderParams {
            type_w: r.weight("embed.type", &[TypeTag::COUNT, d])?,
            pos_w: r.weight("embed.pos", &[POS_DIM, d])?,
            img_w: r.weight("embed.img.w", &[fc.patch_dim, d])?,
            img_b: r.zeros("embed.img.b", d)?,
            ocr_w: r.weight("embed.ocr.w", &[fc.ocr_feature_dim(), d])?,
            ocr_b: r.zeros("embed.ocr.b", d)?,
            vh_w: r.weight("embed.vh.w", &[fc.vh_feature_dim(), d])?,
            vh_b: r.zeros("embed.vh.b", d)?,
            layers,
            gru: GruParams {
                init_w: r.weight("gru.init.w", &[d, d])?,
                init_b: r.zeros("gru.init.b", d)?,
                embed: r.weight("gru.embed", &[v, d])?,
                x_w: r.weight("gru.x.w", &[d, 3 * d])?,
                x_b: r.zeros("gru.x.b", 3 * d)?,
                h_w: r.weight("gru.h.w", &[d, 3 * d])?,
                h_b: r.zeros("gru.h.b", 3 * d)?,
                out_w: r.weight("gru.out.w", &[d, v])?,
                out_b: r.zeros("gru.out.b", v)?,
            },
        })
    }
}

/// Encoder configuration, the fixed feature encoders and the parameter ids.
/// Parameter values live in a separate [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub features: FeatureEncoder,
    pub params: EncoderParams,
}

impl Model {
    /// Registers freshly initialized encoder parameters in `store`.
    pub fn init<T: Real>(
        config: ModelConfig,
        features: FeatureEncoder,
        store: &mut ParamStore<T>,
        seed: u64,
    ) -> Result<Self> {
        Self::attach(config, features, store, seed, false)
    }

    /// Looks up the encoder parameters in a loaded store.
    pub fn from_store<T: Real>(
        config: ModelConfig,
        features: FeatureEncoder,
        store: &mut ParamStore<T>,
    ) -> Result<Self> {
        Self::attach(config, features, store, 0, true)
    }

    fn attach<T: Real>(
        config: ModelConfig,
        features: FeatureEncoder,
        store: &mut ParamStore<T>,
        seed: u64,
        existing: bool,
    ) -> Result<Self> {
        config.validate()?;
        if features.config().vocab_size != config.vocab_size {
            return Err(Error::Dimension(format!(
                "feature vocab {} differs from model vocab {}",
                features.config().vocab_size,
                config.vocab_size
            )));
        }
        let mut r = Registrar { store, seed, existing };
        let params = EncoderParams::build(&mut r, &config, &features)?;
        Ok(Model {
            config,
            features,
            params,
        })
    }

    pub fn sequence(&self, e: &UiExample, mask: Option<&MaskSpec>) -> Result<InputSequence> {
        build_input_sequence(e, mask, &self.features, self.config.max_seq_len)
    }
}

/// Inverted dropout on sublayer outputs; finetuning only.
pub struct Dropout<'a> {
    pub rate: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl Dropout<'_> {
    fn apply<T: Real>(&mut self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - self.rate;
        let shape = g.shape(x).to_vec();
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| {
                T::of(if self.rng.random::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                })
            })
            .collect();
        let m = g.constant(Tensor::new(shape, data)?);
        g.mul(x, m)
    }
}

#[derive(Clone, Debug)]
pub struct EncoderOutput {
    /// `n x d` output embeddings.
    pub u: Var,
    /// `n x d` input sum `T + P + C`.
    pub embedded: Var,
    /// Content embeddings of every original IMG component, masked ones
    /// included.
    pub img_content: Var,
    pub img_rows: Vec<usize>,
    pub ocr_rows: Vec<usize>,
    pub vh_rows: Vec<usize>,
}

impl EncoderOutput {
    pub fn rows(&self, m: Modality) -> &[usize] {
        match m {
            Modality::Img => &self.img_rows,
            Modality::Ocr => &self.ocr_rows,
            Modality::Vh => &self.vh_rows,
        }
    }
}

fn feature_matrix<T: Real>(g: &mut Graph<'_, T>, rows: &[Vec<f64>], width: usize) -> Result<Var> {
    if let Some(r) = rows.iter().find(|r| r.len() != width) {
        return Err(Error::Dimension(format!("feature width {} vs {width}", r.len())));
    }
    Ok(g.constant(Tensor::from_rows(rows, width)?))
}

/// `T + P + C` per row, plus the content embeddings of all IMG components.
pub fn embed_inputs<T: Real>(g: &mut Graph<'_, T>, model: &Model, seq: &InputSequence) -> Result<(Var, Var)> {
    let p = &model.params;
    let fc = model.features.config();
    let d = model.config.d;
    let n = seq.len();
    let tags: Vec<usize> = seq.tokens.iter().map(|t| t.tag.index()).collect();
    let type_w = g.param(p.type_w);
    let t = g.gather_rows(type_w, &tags)?;
    let pos_rows: Vec<Vec<f64>> = seq.tokens.iter().map(|t| t.position.to_vec()).collect();
    let pos = feature_matrix(g, &pos_rows, POS_DIM)?;
    let pos_w = g.param(p.pos_w);
    let pe = g.matmul(pos, pos_w)?;

    let mut parts = Vec::new();
    let mut part_of = [None; 3];
    let mut img_content = None;
    for (k, (m, feats, width, w, b)) in [
        (Modality::Img, &seq.img_features, fc.patch_dim, p.img_w, p.img_b),
        (Modality::Ocr, &seq.ocr_features, fc.ocr_feature_dim(), p.ocr_w, p.ocr_b),
        (Modality::Vh, &seq.vh_features, fc.vh_feature_dim(), p.vh_w, p.vh_b),
    ]
    .into_iter()
    .enumerate()
    {
        if feats.is_empty() {
            continue;
        }
        let x = feature_matrix(g, feats, width)?;
        let c = g.linear(x, w, Some(b))?;
        if m == Modality::Img {
            img_content = Some(c);
        }
        part_of[k] = Some(parts.len());
        parts.push(c);
    }
    let map: Vec<Option<(usize, usize)>> = seq
        .tokens
        .iter()
        .map(|tok| {
            tok.content.map(|(m, i)| {
                let k = Modality::ALL.iter().position(|&x| x == m).expect("known modality");
                (part_of[k].expect("content rows imply features"), i)
            })
        })
        .collect();
    let c = g.assemble_rows(&parts, &map, d)?;
    let tp = g.add(t, pe)?;
    let x = g.add(tp, c)?;
    debug_assert_eq!(g.shape(x), &[n, d]);
    let img_content = img_content.ok_or_else(|| Error::Invalid("UI has no IMG components".into()))?;
    Ok((x, img_content))
}

fn affine_norm<T: Real>(g: &mut Graph<'_, T>, x: Var, gain: ParamId, bias: ParamId) -> Result<Var> {
    let n = g.layer_norm(x, LN_EPS);
    let gain = g.param(gain);
    let bias = g.param(bias);
    let y = g.mul_row(n, gain)?;
    g.add_row(y, bias)
}

fn attention<T: Real>(g: &mut Graph<'_, T>, cfg: &ModelConfig, lp: &LayerParams, x: Var) -> Result<Var> {
    let q = g.linear(x, lp.q_w, Some(lp.q_b))?;
    let k = g.linear(x, lp.k_w, Some(lp.k_b))?;
    let v = g.linear(x, lp.v_w, Some(lp.v_b))?;
    let dh = cfg.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let qh = g.slice_cols(q, h * dh, dh)?;
        let kh = g.slice_cols(k, h * dh, dh)?;
        let vh = g.slice_cols(v, h * dh, dh)?;
        let kt = g.transpose(kh)?;
        let s = g.matmul(qh, kt)?;
        let s = g.scale(s, scale);
        let a = g.softmax(s);
        heads.push(g.matmul(a, vh)?);
    }
    let cat = if heads.len() == 1 {
        heads[0]
    } else {
        g.concat_cols(&heads)?
    };
    g.linear(cat, lp.o_w, Some(lp.o_b))
}

/// Pre-norm transformer over `T + P + C`; zero layers return the input sum.
pub fn encode<T: Real>(
    g: &mut Graph<'_, T>,
    model: &Model,
    seq: &InputSequence,
    mut dropout: Option<&mut Dropout<'_>>,
) -> Result<EncoderOutput> {
    let (embedded, img_content) = embed_inputs(g, model, seq)?;
    let mut x = embedded;
    for lp in &model.params.layers {
        let h = affine_norm(g, x, lp.ln1_g, lp.ln1_b)?;
        let mut a = attention(g, &model.config, lp, h)?;
        if let Some(dr) = dropout.as_deref_mut() {
            a = dr.apply(g, a)?;
        }
        x = g.add(x, a)?;
        let h = affine_norm(g, x, lp.ln2_g, lp.ln2_b)?;
        let f = g.linear(h, lp.ff1_w, Some(lp.ff1_b))?;
        let f = g.gelu(f);
        let mut f = g.linear(f, lp.ff2_w, Some(lp.ff2_b))?;
        if let Some(dr) = dropout.as_deref_mut() {
            f = dr.apply(g, f)?;
        }
        x = g.add(x, f)?;
    }
    Ok(EncoderOutput {
        u: x,
        embedded,
        img_content,
        img_rows: seq.img_rows.clone(),
        ocr_rows: seq.ocr_rows.clone(),
        vh_rows: seq.vh_rows.clone(),
    })
}

/// `1 x d` row `r` of `u`.
pub fn row<T: Real>(g: &mut Graph<'_, T>, u: Var, r: usize) -> Result<Var> {
    g.gather_rows(u, &[r])
}

/// One GRU update for `1 x d` input `x` and hidden state `h`:
/// `z = s(x Wz + h Uz)`, `r = s(x Wr + h Ur)`, `n = tanh(x Wn + r (h Un))`,
/// `h' = (1 - z) n + z h`, biases omitted.
pub fn gru_step<T: Real>(g: &mut Graph<'_, T>, p: &GruParams, x: Var, h: Var) -> Result<Var> {
    let xw = g.linear(x, p.x_w, Some(p.x_b))?;
    gru_step_projected(g, p, xw, h)
}

fn gru_step_projected<T: Real>(g: &mut Graph<'_, T>, p: &GruParams, xw: Var, h: Var) -> Result<Var> {
    let d = g.shape(h)[1];
    let hw = g.linear(h, p.h_w, Some(p.h_b))?;
    let xz = g.slice_cols(xw, 0, d)?;
    let xr = g.slice_cols(xw, d, d)?;
    let xn = g.slice_cols(xw, 2 * d, d)?;
    let hz = g.slice_cols(hw, 0, d)?;
    let hr = g.slice_cols(hw, d, d)?;
    let hn = g.slice_cols(hw, 2 * d, d)?;
    let z = g.add(xz, hz)?;
    let z = g.sigmoid(z);
    let r = g.add(xr, hr)?;
    let r = g.sigmoid(r);
    let rh = g.mul(r, hn)?;
    let n = g.add(xn, rh)?;
    let n = g.tanh(n);
    // h' = n + z (h - n)
    let diff = g.sub(h, n)?;
    let zd = g.mul(z, diff)?;
    g.add(n, zd)
}

fn initial_state<T: Real>(g: &mut Graph<'_, T>, p: &GruParams, u: Var) -> Result<Var> {
    g.linear(u, p.init_w, Some(p.init_b))
}

/// Teacher-forced decoding: step `t` reads target `t - 1` (BOS first).
/// Returns `len(target) x V` logits.
pub fn gru_decode<T: Real>(g: &mut Graph<'_, T>, p: &GruParams, u: Var, target: &[u32]) -> Result<Var> {
    if target.is_empty() {
        return Err(Error::Invalid("decoder target is empty".into()));
    }
    let mut inputs = Vec::with_capacity(target.len());
    inputs.push(BOS as usize);
    inputs.extend(target[..target.len() - 1].iter().map(|&t| t as usize));
    let emb = g.param(p.embed);
    let x = g.gather_rows(emb, &inputs)?;
    let xw = g.linear(x, p.x_w, Some(p.x_b))?;
    let mut h = initial_state(g, p, u)?;
    let mut states = Vec::with_capacity(target.len());
    for t in 0..target.len() {
        let xt = g.gather_rows(xw, &[t])?;
        h = gru_step_projected(g, p, xt, h)?;
        states.push(h);
    }
    let hs = if states.len() == 1 {
        states[0]
    } else {
        g.concat_rows(&states)?
    };
    g.linear(hs, p.out_w, Some(p.out_b))
}

/// Greedy decoding from `1 x d` embedding `u`; stops after EOS (not
/// emitted) or `max_len` tokens. Ties pick the lowest token id.
pub fn gru_greedy<T: Real>(g: &mut Graph<'_, T>, p: &GruParams, u: Var, max_len: usize) -> Result<Vec<u32>> {
    let emb = g.param(p.embed);
    let mut h = initial_state(g, p, u)?;
    let mut prev = BOS as usize;
    let mut out = Vec::new();
    while out.len() < max_len {
        let x = g.gather_rows(emb, &[prev])?;
        h = gru_step(g, p, x, h)?;
        let logits = g.linear(h, p.out_w, Some(p.out_b))?;
        let best = argmax(g.data(logits));
        if best == EOS as usize {
            break;
        }
        out.push(best as u32);
        prev = best;
    }
    Ok(out)
}

/// Index of the largest value, lowest index on ties.
pub fn argmax<T: Real>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// `1 x 2d` concatenation of the IMG row and its aligned VH row; the VH half
/// is zero when the UI has no view hierarchy.
pub fn component_output_embedding<T: Real>(g: &mut Graph<'_, T>, out: &EncoderOutput, img_idx: usize) -> Result<Var> {
    let img_row = *out
        .img_rows
        .get(img_idx)
        .ok_or_else(|| Error::Invalid(format!("no IMG component {img_idx}")))?;
    let a = row(g, out.u, img_row)?;
    let b = match out.vh_rows.get(img_idx) {
        Some(&r) => row(g, out.u, r)?,
        None => {
            let d = g.shape(out.u)[1];
            g.constant(Tensor::zeros(vec![1, d]))
        }
    };
    g.concat_cols(&[a, b])
}
