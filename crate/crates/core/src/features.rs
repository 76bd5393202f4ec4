//! Frozen stand-in encoders: hashed vocabulary, text and patch embeddings,
//! and the composite VH and positional features.

use std::hash::Hasher;

use fnv::FnvHasher;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BoundingBox, VhComponent, N_CLASSES, PATCH_LEN, PATCH_SIDE};

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
pub const N_RESERVED: u32 = 4;
pub const POS_DIM: usize = 7;
const N_PATCH_STATS: usize = 4;

/// Stable 64-bit FNV-1a hash.
pub fn stable_hash(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

/// Hashed word vocabulary: `id(w) = 4 + h(w) mod (V - 4)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub size: u32,
}

impl Vocab {
    pub fn new(size: u32) -> Result<Self> {
        if size <= N_RESERVED {
            return Err(Error::Invalid(format!("vocab size {size} must exceed {N_RESERVED}")));
        }
        Ok(Vocab { size })
    }

    pub fn token_id(&self, word: &str) -> u32 {
        if word.is_empty() {
            return UNK;
        }
        N_RESERVED + (stable_hash(word.as_bytes()) % u64::from(self.size - N_RESERVED)) as u32
    }

    /// Lowercases and splits on anything that is not alphanumeric.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        words(text).iter().map(|w| self.token_id(w)).collect()
    }
}

pub fn words(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub text_dim: usize,
    pub patch_dim: usize,
    pub vocab_size: u32,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            text_dim: 32,
            patch_dim: 32,
            vocab_size: 2048,
        }
    }
}

impl FeatureConfig {
    pub fn vh_feature_dim(&self) -> usize {
        N_CLASSES + 3 * self.text_dim
    }

    pub fn ocr_feature_dim(&self) -> usize {
        self.text_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.text_dim == 0 || self.patch_dim <= N_PATCH_STATS {
            return Err(Error::Invalid(format!(
                "feature dims must be positive and patch_dim > {N_PATCH_STATS}: {self:?}"
            )));
        }
        Vocab::new(self.vocab_size).map(|_| ())
    }
}

/// Seeded, frozen feature extractors shared by every model component.
#[derive(Clone, Debug)]
pub struct FeatureEncoder {
    config: FeatureConfig,
    vocab: Vocab,
    /// `vocab_size x text_dim` unit vectors.
    token_table: Vec<f64>,
    /// `patch_dim x 256`, row-major.
    projection: Vec<f64>,
}

fn mix(seed: u64, salt: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ salt.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl FeatureEncoder {
    pub fn new(config: FeatureConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let vocab = Vocab::new(config.vocab_size)?;
        let d = config.text_dim;
        let mut token_table = Vec::with_capacity(config.vocab_size as usize * d);
        for id in 0..u64::from(config.vocab_size) {
            let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, id + 1));
            let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
            token_table.extend(v.iter().map(|x| x / norm));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix(seed, u64::MAX));
        let scale = 1.0 / PATCH_SIDE as f64;
        let projection = (0..config.patch_dim * PATCH_LEN)
            .map(|_| {
                let x: f64 = StandardNormal.sample(&mut rng);
                scale * x
            })
            .collect();
        Ok(FeatureEncoder {
            config,
            vocab,
            token_table,
            projection,
        })
    }

    pub fn config(&self) -> &FeatureConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        self.vocab.tokenize(text)
    }

    /// The fixed unit vector of one token.
    pub fn token_vector(&self, id: u32) -> Result<&[f64]> {
        if id >= self.config.vocab_size {
            return Err(Error::Dimension(format!(
                "token {id} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        let d = self.config.text_dim;
        let i = id as usize;
        Ok(&self.token_table[i * d..(i + 1) * d])
    }

    /// `patch_dim x 256` projection matrix, row-major.
    pub fn projection(&self) -> &[f64] {
        &self.projection
    }

    /// Mean of the token vectors; zeros for no tokens.
    pub fn encode_text(&self, tokens: &[u32]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.config.text_dim];
        if tokens.is_empty() {
            return Ok(out);
        }
        for &t in tokens {
            for (o, x) in out.iter_mut().zip(self.token_vector(t)?) {
                *o += x;
            }
        }
        let n = tokens.len() as f64;
        out.iter_mut().for_each(|o| *o /= n);
        Ok(out)
    }

    /// Random projection of the flattened patch with the last four slots
    /// replaced by mean, std, row-gradient mean and column-gradient mean.
    pub fn encode_image_patch(&self, patch: &[f64]) -> Result<Vec<f64>> {
        if patch.len() != PATCH_LEN {
            return Err(Error::Dimension(format!(
                "patch has {} values, expected {PATCH_LEN}",
                patch.len()
            )));
        }
        let mut out: Vec<f64> = self
            .projection
            .chunks(PATCH_LEN)
            .map(|row| row.iter().zip(patch).map(|(w, x)| w * x).sum())
            .collect();
        let stats = patch_stats(patch);
        let k = self.config.patch_dim - N_PATCH_STATS;
        out[k..].copy_from_slice(&stats);
        Ok(out)
    }

    /// One-hot class followed by text, description and resource-id encodings.
    pub fn vh_component_feature(&self, c: &VhComponent) -> Result<Vec<f64>> {
        if c.class_id >= N_CLASSES {
            return Err(Error::Dimension(format!(
                "class id {} outside {N_CLASSES} classes",
                c.class_id
            )));
        }
        let mut out = vec![0.0; N_CLASSES];
        out[c.class_id] = 1.0;
        out.extend(self.encode_text(&c.text_tokens)?);
        out.extend(self.encode_text(&c.desc_tokens)?);
        out.extend(self.encode_text(&c.resid_tokens)?);
        Ok(out)
    }
}

/// `[x0, y0, x1, y1, width, height, area]`.
pub fn positional_feature(b: &BoundingBox) -> [f64; POS_DIM] {
    let (w, h) = (b.x1 - b.x0, b.y1 - b.y0);
    [b.x0, b.y0, b.x1, b.y1, w, h, w * h]
}

fn patch_stats(patch: &[f64]) -> [f64; N_PATCH_STATS] {
    let n = PATCH_LEN as f64;
    let mean = patch.iter().sum::<f64>() / n;
    let std = (patch.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt();
    let s = PATCH_SIDE;
    let mut row_grad = 0.0;
    let mut col_grad = 0.0;
    for r in 0..s {
        for c in 0..s {
            let v = patch[r * s + c];
            if r + 1 < s {
                row_grad += patch[(r + 1) * s + c] - v;
            }
            if c + 1 < s {
                col_grad += patch[r * s + c + 1] - v;
            }
        }
    }
    let pairs = (s * (s - 1)) as f64;
    [mean, std, row_grad / pairs, col_grad / pairs]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn enc() -> FeatureEncoder {
        FeatureEncoder::new(FeatureConfig::default(), 11).unwrap()
    }

    #[test]
    fn tokenize_caption_text() {
        let e = enc();
        let ids = e.tokenize("Restaurants for families");
        assert_eq!(ids.len(), 3);
        assert!(ids.iter().all(|&i| (N_RESERVED..2048).contains(&i)));
        assert_eq!(ids, e.tokenize("Restaurants for families"));
        assert!(e.tokenize("").is_empty());
        assert_eq!(e.tokenize("Hello, WORLD!"), e.tokenize("hello world"));
    }

    #[test]
    fn text_encoding_edge_cases() {
        let e = enc();
        assert_eq!(e.encode_text(&[]).unwrap(), vec![0.0; 32]);
        let v = e.encode_text(&[17]).unwrap();
        assert_eq!(v, e.token_vector(17).unwrap());
        let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn text_encoding_is_mean_of_two() {
        let e = enc();
        let (a, b) = (e.token_vector(5).unwrap(), e.token_vector(900).unwrap());
        let got = e.encode_text(&[5, 900]).unwrap();
        for i in 0..32 {
            assert!((got[i] - 0.5 * (a[i] + b[i])).abs() < 1e-15);
        }
        assert!(got.iter().map(|x| x * x).sum::<f64>() <= 1.0 + 1e-12);
    }

    #[test]
    fn out_of_vocab_token_is_error() {
        assert!(enc().encode_text(&[5000]).is_err());
    }

    #[test]
    fn zero_and_constant_patches() {
        let e = enc();
        let z = e.encode_image_patch(&[0.0; PATCH_LEN]).unwrap();
        assert!(z.iter().all(|&x| x == 0.0));
        let c = e.encode_image_patch(&[0.3; PATCH_LEN]).unwrap();
        assert!((c[28] - 0.3).abs() < 1e-12);
        assert!(c[29].abs() < 1e-12);
        assert!(c[30].abs() < 1e-12 && c[31].abs() < 1e-12);
    }

    #[test]
    fn patch_projection_matches_brute_force() {
        let e = enc();
        let patch: Vec<f64> = (0..PATCH_LEN).map(|k| ((k * 37) % 101) as f64 / 100.0).collect();
        let got = e.encode_image_patch(&patch).unwrap();
        let w = e.projection();
        for j in 0..28 {
            let mut s = 0.0;
            for k in 0..PATCH_LEN {
                s += w[j * PATCH_LEN + k] * patch[k];
            }
            assert!((got[j] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_patch_shape_is_error() {
        assert!(enc().encode_image_patch(&[0.0; 15]).is_err());
    }

    #[test]
    fn ramp_patch_gradients() {
        let e = enc();
        // intensity grows by 0.01 per row
        let patch: Vec<f64> = (0..PATCH_LEN).map(|k| (k / PATCH_SIDE) as f64 * 0.01).collect();
        let f = e.encode_image_patch(&patch).unwrap();
        assert!((f[30] - 0.01).abs() < 1e-12);
        assert!(f[31].abs() < 1e-12);
    }

    fn vh(class_id: usize, text: Vec<u32>, desc: Vec<u32>, resid: Vec<u32>) -> VhComponent {
        VhComponent {
            class_id,
            class_raw: String::new(),
            text_tokens: text,
            desc_tokens: desc,
            resid_tokens: resid,
            bounds: BoundingBox::FULL,
        }
    }

    #[test]
    fn vh_feature_segments() {
        let e = enc();
        let empty = e.vh_component_feature(&vh(4, vec![], vec![], vec![])).unwrap();
        assert_eq!(empty.len(), 23 + 3 * 32);
        assert_eq!(empty[4], 1.0);
        assert!(empty.iter().enumerate().all(|(i, &x)| i == 4 || x == 0.0));

        let other = e.vh_component_feature(&vh(22, vec![], vec![], vec![])).unwrap();
        assert_eq!(other[22], 1.0);

        let c = vh(1, vec![7, 8], vec![9], vec![10, 11, 12]);
        let f = e.vh_component_feature(&c).unwrap();
        assert_eq!(&f[23..55], e.encode_text(&c.text_tokens).unwrap().as_slice());
        assert_eq!(&f[55..87], e.encode_text(&c.desc_tokens).unwrap().as_slice());
        assert_eq!(&f[87..119], e.encode_text(&c.resid_tokens).unwrap().as_slice());
    }

    #[test]
    fn positional_features() {
        assert_eq!(
            positional_feature(&BoundingBox::FULL),
            [0.0, 0.0, 1.0, 1.0, 1.0, 1.0, 1.0]
        );
        assert_eq!(
            positional_feature(&BoundingBox::new(0.25, 0.5, 0.75, 1.0)),
            [0.25, 0.5, 0.75, 1.0, 0.5, 0.5, 0.25]
        );
        let p = positional_feature(&BoundingBox::new(0.3, 0.3, 0.3, 0.3));
        assert_eq!(&p[4..], &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn encoders_are_seed_deterministic() {
        let a = enc();
        let b = enc();
        let patch: Vec<f64> = (0..PATCH_LEN).map(|k| (k % 13) as f64 / 13.0).collect();
        let fa = a.encode_image_patch(&patch).unwrap();
        let fb = b.encode_image_patch(&patch).unwrap();
        assert!(fa.iter().zip(&fb).all(|(x, y)| x.to_bits() == y.to_bits()));
        let other = FeatureEncoder::new(FeatureConfig::default(), 12).unwrap();
        assert_ne!(fa, other.encode_image_patch(&patch).unwrap());
    }
}
