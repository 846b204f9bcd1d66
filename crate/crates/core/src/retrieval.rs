//! Image-to-text retrieval against a gallery of projected text anchors.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{encode_images, encode_texts, ModelConfig, ModelParams};
use crate::numcore::{dot, Tensor};
use crate::objectives::UNIT_NORM_TOL;
use crate::seed;
use crate::synthgen::{Dataset, Lexicon};

#[derive(Clone, Debug, PartialEq)]
pub struct GalleryEntry {
    pub semantic_id: usize,
    pub language: String,
    pub text: String,
    pub embedding: Vec<f64>,
}

/// One entry per `(semantic_id, language)` in scope, ordered by that pair.
#[derive(Clone, Debug, PartialEq)]
pub struct Gallery {
    entries: Vec<GalleryEntry>,
    languages: Vec<String>,
}

impl Gallery {
    pub fn from_entries(mut entries: Vec<GalleryEntry>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::EmptyGallery);
        }
        for e in &entries {
            let n = crate::numcore::norm(&e.embedding);
            if (n - 1.0).abs() > UNIT_NORM_TOL {
                return Err(Error::Contract(format!(
                    "gallery entry ({}, {}) has norm {n}",
                    e.semantic_id, e.language
                )));
            }
        }
        entries.sort_by(|a, b| (a.semantic_id, &a.language).cmp(&(b.semantic_id, &b.language)));
        if entries
            .windows(2)
            .any(|w| (w[0].semantic_id, &w[0].language) == (w[1].semantic_id, &w[1].language))
        {
            return Err(Error::Validation("duplicate gallery entry".into()));
        }
        let mut languages: Vec<String> = entries.iter().map(|e| e.language.clone()).collect();
        languages.sort();
        languages.dedup();
        Ok(Gallery { entries, languages })
    }

    pub fn entries(&self) -> &[GalleryEntry] {
        &self.entries
    }

    pub fn languages(&self) -> &[String] {
        &self.languages
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Encodes the anchor of every `(y, l)` with `l` in `languages`.
pub fn build_gallery(
    lexicon: &Lexicon,
    languages: &[&str],
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<Gallery> {
    let mut items = Vec::new();
    for &l in languages {
        lexicon.language_index(l)?;
        for y in 0..lexicon.num_classes() {
            items.push((y, l));
        }
    }
    if items.is_empty() {
        return Err(Error::EmptyGallery);
    }
    let z = encode_texts(items.iter().copied(), params, cfg, lexicon)?;
    let entries = items
        .iter()
        .enumerate()
        .map(|(i, &(y, l))| {
            Ok(GalleryEntry {
                semantic_id: y,
                language: l.to_string(),
                text: lexicon.word(y, l)?.to_string(),
                embedding: z.row(i).to_vec(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Gallery::from_entries(entries)
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    pub query_id: usize,
    /// Gallery indices, best first.
    pub ranking: Vec<usize>,
    /// Similarity of each ranked entry, non-increasing.
    pub scores: Vec<f64>,
    /// 1-based rank of the best-placed ground-truth entry.
    pub rank: usize,
    pub top1_text: String,
    pub target_text: String,
}

/// Full ranking by descending `v·z`; ties go to the smaller
/// `(semantic_id, language)`, which is gallery order.
pub fn rank_gallery(query: &[f64], gallery: &Gallery) -> Result<Vec<(usize, f64)>> {
    if gallery.is_empty() {
        return Err(Error::EmptyGallery);
    }
    let mut scored: Vec<(usize, f64)> = gallery
        .entries
        .iter()
        .enumerate()
        .map(|(i, e)| {
            if e.embedding.len() != query.len() {
                return Err(Error::Dimension(format!(
                    "query of dim {} against gallery of dim {}",
                    query.len(),
                    e.embedding.len()
                )));
            }
            Ok((i, dot(query, &e.embedding)))
        })
        .collect::<Result<_>>()?;
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .unwrap_or(Ordering::Equal)
            .then(a.0.cmp(&b.0))
    });
    Ok(scored)
}

/// Ranks the gallery for one query embedding. `is_target` marks every
/// entry that counts as correct; the best-placed one sets the rank.
pub fn retrieve(
    query_id: usize,
    query: &[f64],
    gallery: &Gallery,
    is_target: impl Fn(&GalleryEntry) -> bool,
) -> Result<RetrievalResult> {
    let scored = rank_gallery(query, gallery)?;
    finish(query_id, scored, gallery, is_target)
}

fn finish(
    query_id: usize,
    scored: Vec<(usize, f64)>,
    gallery: &Gallery,
    is_target: impl Fn(&GalleryEntry) -> bool,
) -> Result<RetrievalResult> {
    let pos = scored
        .iter()
        .position(|&(i, _)| is_target(&gallery.entries[i]))
        .ok_or_else(|| {
            Error::Validation(format!("query {query_id} has no target in the gallery"))
        })?;
    let target = &gallery.entries[scored[pos].0];
    Ok(RetrievalResult {
        query_id,
        top1_text: gallery.entries[scored[0].0].text.clone(),
        target_text: target.text.clone(),
        rank: pos + 1,
        ranking: scored.iter().map(|&(i, _)| i).collect(),
        scores: scored.iter().map(|&(_, s)| s).collect(),
    })
}

/// Evaluation protocol: which queries, which gallery, what counts as a hit.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum Protocol {
    /// Queries and gallery share one language.
    Within(String),
    /// Gallery holds every language; any synonym of the query class is a hit.
    Mixed,
    /// Queries of one language against a gallery of another.
    Cross { query: String, target: String },
}

impl Protocol {
    pub fn within(l: &str) -> Self {
        Protocol::Within(l.to_string())
    }

    pub fn cross(query: &str, target: &str) -> Self {
        Protocol::Cross {
            query: query.to_string(),
            target: target.to_string(),
        }
    }
}

impl fmt::Display for Protocol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Protocol::Within(l) => write!(f, "within:{l}"),
            Protocol::Mixed => write!(f, "mixed"),
            Protocol::Cross { query, target } => write!(f, "cross:{query}->{target}"),
        }
    }
}

impl FromStr for Protocol {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "mixed" {
            return Ok(Protocol::Mixed);
        }
        if let Some(l) = s.strip_prefix("within:") {
            return Ok(Protocol::within(l));
        }
        if let Some((a, b)) = s.strip_prefix("cross:").and_then(|r| r.split_once("->")) {
            return Ok(Protocol::cross(a, b));
        }
        Err(Error::Validation(format!(
            "unknown protocol `{s}` (expected within:<l>, mixed or cross:<a>-><b>)"
        )))
    }
}

impl Serialize for Protocol {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Protocol {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// How the gallery is ordered for each query.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Ranker {
    Cosine,
    /// Uniformly random permutation per query; the chance baseline.
    Random {
        seed: u64,
    },
}

/// Languages of the split, in lexicon order.
pub fn split_languages(split: &Dataset) -> Vec<&str> {
    split
        .lexicon
        .languages()
        .iter()
        .map(String::as_str)
        .filter(|l| split.samples.iter().any(|s| s.language == *l))
        .collect()
}

/// Runs one protocol over an evaluation split. Query ids index the split's
/// samples.
pub fn eval_protocol(
    split: &Dataset,
    protocol: &Protocol,
    params: &ModelParams,
    cfg: &ModelConfig,
    ranker: Ranker,
) -> Result<Vec<RetrievalResult>> {
    let embeddings = split_embeddings(split, params, cfg)?;
    eval_protocol_embedded(split, protocol, &embeddings, params, cfg, ranker)
}

/// [`eval_protocol`] with precomputed image embeddings, one row per split
/// sample. The gallery is still built from `params`.
pub fn eval_protocol_embedded(
    split: &Dataset,
    protocol: &Protocol,
    image_embeddings: &Tensor,
    params: &ModelParams,
    cfg: &ModelConfig,
    ranker: Ranker,
) -> Result<Vec<RetrievalResult>> {
    if image_embeddings.rows() != split.samples.len() {
        return Err(Error::Dimension(format!(
            "{} embeddings for {} samples",
            image_embeddings.rows(),
            split.samples.len()
        )));
    }
    let present = split_languages(split);
    let require = |l: &str| -> Result<()> {
        split.lexicon.language_index(l)?;
        if present.contains(&l) {
            Ok(())
        } else {
            Err(Error::Validation(format!(
                "protocol {protocol} needs language `{l}`, absent from the split"
            )))
        }
    };
    let (query_lang, gallery_langs): (Option<&str>, Vec<&str>) = match protocol {
        Protocol::Within(l) => {
            require(l)?;
            (Some(l), vec![l.as_str()])
        }
        Protocol::Cross { query, target } => {
            require(query)?;
            require(target)?;
            if query == target {
                return Err(Error::Validation(format!(
                    "cross protocol needs two languages, got {query} twice"
                )));
            }
            (Some(query), vec![target.as_str()])
        }
        Protocol::Mixed => (None, present.clone()),
    };
    let gallery = build_gallery(&split.lexicon, &gallery_langs, params, cfg)?;
    split
        .samples
        .iter()
        .enumerate()
        .filter(|(_, s)| query_lang.is_none_or(|l| s.language == l))
        .map(|(qi, q)| {
            let is_target = |e: &GalleryEntry| match protocol {
                Protocol::Mixed => e.semantic_id == q.semantic_id,
                _ => e.semantic_id == q.semantic_id && e.language == gallery_langs[0],
            };
            let scored = match ranker {
                Ranker::Cosine => rank_gallery(image_embeddings.row(qi), &gallery)?,
                Ranker::Random { seed } => random_ranking(&gallery, seed, qi),
            };
            finish(qi, scored, &gallery, is_target)
        })
        .collect()
}

/// The gallery a protocol ranks against.
pub fn protocol_gallery(
    split: &Dataset,
    protocol: &Protocol,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<Gallery> {
    let langs: Vec<&str> = match protocol {
        Protocol::Within(l) => vec![l.as_str()],
        Protocol::Cross { target, .. } => vec![target.as_str()],
        Protocol::Mixed => split_languages(split),
    };
    build_gallery(&split.lexicon, &langs, params, cfg)
}

fn random_ranking(gallery: &Gallery, seed: u64, query_id: usize) -> Vec<(usize, f64)> {
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    order.shuffle(&mut seed::rng(&[seed, query_id as u64, 0x7a4d]));
    let n = order.len() as f64;
    order
        .into_iter()
        .enumerate()
        .map(|(pos, i)| (i, 1.0 - pos as f64 / n))
        .collect()
}

/// Serializable summary of one retrieval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRecord {
    pub query_id: usize,
    pub protocol: Protocol,
    pub rank: usize,
    /// `(semantic_id, language)` of the top entries.
    pub top_k: Vec<(usize, String)>,
    pub top1_text: String,
    pub target_text: String,
}

pub fn result_records(
    protocol: &Protocol,
    results: &[RetrievalResult],
    gallery: &Gallery,
    k: usize,
) -> Vec<ResultRecord> {
    results
        .iter()
        .map(|r| ResultRecord {
            query_id: r.query_id,
            protocol: protocol.clone(),
            rank: r.rank,
            top_k: r
                .ranking
                .iter()
                .take(k)
                .map(|&i| {
                    let e = &gallery.entries[i];
                    (e.semantic_id, e.language.clone())
                })
                .collect(),
            top1_text: r.top1_text.clone(),
            target_text: r.target_text.clone(),
        })
        .collect()
}

pub fn records_to_jsonl(records: &[ResultRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Embeddings of a split's images, one row per sample.
pub fn split_embeddings(
    split: &Dataset,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<Tensor> {
    encode_images(split.samples.iter().map(|s| &s.image), params, cfg)
}
