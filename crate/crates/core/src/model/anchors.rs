use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::seed;
use crate::synthgen::Lexicon;

/// Frozen semantic-anchor geometry.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnchorConfig {
    pub base_dim: usize,
    pub embed_dim: usize,
    /// Weight of the per-language offset added to the shared class direction.
    pub language_offset_scale: f64,
    pub anchor_seed: u64,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig {
            base_dim: 64,
            embed_dim: 32,
            language_offset_scale: 0.1,
            anchor_seed: 1234,
        }
    }
}

impl AnchorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.base_dim < self.embed_dim {
            return Err(Error::Config(format!(
                "anchor base_dim {} must be >= embed_dim {} > 0",
                self.base_dim, self.embed_dim
            )));
        }
        if !(0.0..=1.0).contains(&self.language_offset_scale) {
            return Err(Error::Config(format!(
                "language_offset_scale {} outside [0, 1]",
                self.language_offset_scale
            )));
        }
        Ok(())
    }
}

fn unit_vector(dim: usize, parts: &[u64]) -> Vec<f64> {
    let mut rng = seed::rng(parts);
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let n = crate::numcore::norm(&v);
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Frozen base vector `normalize(u_y + β·δ_{y,l})`.
///
/// `u_y` is shared by every language of class `y`; `δ_{y,l}` is a
/// language-specific unit offset. Both are pure functions of the anchor seed.
pub fn anchor_base(
    semantic_id: usize,
    language: &str,
    lexicon: &Lexicon,
    cfg: &AnchorConfig,
) -> Result<Vec<f64>> {
    lexicon.language_index(language)?;
    if semantic_id >= lexicon.num_classes() {
        return Err(Error::Validation(format!(
            "semantic id {semantic_id} outside 0..{}",
            lexicon.num_classes()
        )));
    }
    let y = semantic_id as u64;
    let u = unit_vector(cfg.base_dim, &[cfg.anchor_seed, y, 0xa11]);
    let d = unit_vector(
        cfg.base_dim,
        &[cfg.anchor_seed, y, seed::str_key(language), 0xa12],
    );
    let beta = cfg.language_offset_scale;
    let v: Vec<f64> = u.iter().zip(&d).map(|(a, b)| a + beta * b).collect();
    let n = crate::numcore::norm(&v);
    Ok(v.into_iter().map(|x| x / n).collect())
}

/// Stacks anchor bases for a list of `(semantic_id, language)` pairs.
pub fn anchor_matrix<'a>(
    items: impl IntoIterator<Item = (usize, &'a str)>,
    lexicon: &Lexicon,
    cfg: &AnchorConfig,
) -> Result<Tensor> {
    let rows = items
        .into_iter()
        .map(|(y, l)| anchor_base(y, l, lexicon, cfg))
        .collect::<Result<Vec<_>>>()?;
    Tensor::from_rows(&rows)
}
