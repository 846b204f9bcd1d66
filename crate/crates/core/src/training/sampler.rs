use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthgen::Sample;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// `None` picks `min(2·C, |split|)`.
    pub batch_size: Option<usize>,
    pub min_instances_per_class: usize,
    pub language_balance: bool,
    pub seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            batch_size: None,
            min_instances_per_class: 2,
            language_balance: true,
            seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn resolve_batch_size(&self, num_classes: usize, split_len: usize) -> usize {
        self.batch_size
            .unwrap_or_else(|| (2 * num_classes).min(split_len))
    }
}

/// Sample indices of a split grouped by class, then language.
#[derive(Clone, Debug)]
pub struct ClassIndex {
    by_class: BTreeMap<usize, BTreeMap<String, Vec<usize>>>,
    len: usize,
}

impl ClassIndex {
    pub fn new(samples: &[Sample]) -> Self {
        let mut by_class: BTreeMap<usize, BTreeMap<String, Vec<usize>>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            by_class
                .entry(s.semantic_id)
                .or_default()
                .entry(s.language.clone())
                .or_default()
                .push(i);
        }
        ClassIndex {
            by_class,
            len: samples.len(),
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn num_classes(&self) -> usize {
        self.by_class.len()
    }

    fn class_size(&self, y: usize) -> usize {
        self.by_class[&y].values().map(Vec::len).sum()
    }
}

struct BatchState<'a> {
    index: &'a ClassIndex,
    taken: Vec<bool>,
    lang_counts: BTreeMap<&'a str, usize>,
    picked: Vec<usize>,
}

impl<'a> BatchState<'a> {
    fn remaining(&self, y: usize, lang: &str) -> Vec<usize> {
        self.index.by_class[&y][lang]
            .iter()
            .copied()
            .filter(|&i| !self.taken[i])
            .collect()
    }

    /// Languages of class `y` with unused samples, least represented in the
    /// batch first when `balance` is set, shuffled otherwise.
    fn candidate_languages(&self, y: usize, balance: bool, rng: &mut impl Rng) -> Vec<&'a str> {
        let mut langs: Vec<&'a str> = self.index.by_class[&y]
            .iter()
            .filter(|(l, _)| !self.remaining(y, l).is_empty())
            .map(|(l, _)| l.as_str())
            .collect();
        langs.shuffle(rng);
        if balance {
            langs.sort_by_key(|l| self.lang_counts.get(l).copied().unwrap_or(0));
        }
        langs
    }

    fn take(&mut self, y: usize, lang: &'a str, rng: &mut impl Rng) {
        let i = *self
            .remaining(y, lang)
            .choose(rng)
            .expect("language has unused samples");
        self.taken[i] = true;
        *self.lang_counts.entry(lang).or_default() += 1;
        self.picked.push(i);
    }
}

/// Draws one co-occurrence batch and returns sample indices into the split.
///
/// `⌊N/min⌋` distinct classes (at most every drawable class) each receive
/// `min` instances spread over as many languages as available. The remaining
/// slots go to further instances of the drawn classes, so every class present
/// keeps at least `min` instances.
pub fn make_batch(
    index: &ClassIndex,
    cfg: &SamplerConfig,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    let min = cfg.min_instances_per_class;
    let n = cfg.resolve_batch_size(index.num_classes(), index.len());
    if min < 1 {
        return Err(Error::Sampler(
            "min_instances_per_class must be >= 1".into(),
        ));
    }
    if n < min.max(2) || n > index.len() {
        return Err(Error::Sampler(format!(
            "batch size {n} infeasible for a split of {} with {min} instances per class",
            index.len()
        )));
    }
    let mut drawable: Vec<usize> = index
        .by_class
        .keys()
        .copied()
        .filter(|&y| index.class_size(y) >= min)
        .collect();
    let k = (n / min).min(drawable.len());
    if k == 0 {
        return Err(Error::Sampler(format!("no class has {min} instances")));
    }
    drawable.shuffle(rng);
    let mut classes = drawable[..k].to_vec();
    let capacity: usize = classes.iter().map(|&y| index.class_size(y)).sum();
    if capacity < n {
        return Err(Error::Sampler(format!(
            "{k} drawn classes hold {capacity} samples, batch needs {n}"
        )));
    }
    classes.sort_unstable();

    let mut st = BatchState {
        index,
        taken: vec![false; index.len()],
        lang_counts: BTreeMap::new(),
        picked: Vec::with_capacity(n),
    };
    for &y in &classes {
        let mut used: Vec<&str> = Vec::new();
        for _ in 0..min {
            let cands = st.candidate_languages(y, cfg.language_balance, rng);
            let lang = cands
                .iter()
                .copied()
                .find(|l| !used.contains(l))
                .unwrap_or(cands[0]);
            used.push(lang);
            st.take(y, lang, rng);
        }
    }
    while st.picked.len() < n {
        let lang = if cfg.language_balance {
            // least-represented language that still has room in a drawn class
            let mut langs: Vec<(&str, usize)> = classes
                .iter()
                .flat_map(|&y| {
                    index.by_class[&y]
                        .keys()
                        .filter(|l| !st.remaining(y, l).is_empty())
                        .map(|l| l.as_str())
                        .collect::<Vec<_>>()
                })
                .map(|l| (l, st.lang_counts.get(l).copied().unwrap_or(0)))
                .collect();
            langs.shuffle(rng);
            langs.sort_by_key(|&(_, c)| c);
            Some(langs[0].0)
        } else {
            None
        };
        let mut pool: Vec<(usize, &str)> = Vec::new();
        for &y in &classes {
            for l in index.by_class[&y].keys() {
                if lang.is_none_or(|want| want == l.as_str()) {
                    let free = st.remaining(y, l).len();
                    pool.extend(std::iter::repeat_n((y, l.as_str()), free));
                }
            }
        }
        let &(y, l) = pool.choose(rng).expect("capacity checked");
        st.take(y, l, rng);
    }
    Ok(st.picked)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{GrayImage, Split};
    use std::collections::HashSet;

    fn toy_split(classes: usize, per_lang: usize, langs: &[&str]) -> Vec<Sample> {
        let mut out = Vec::new();
        for y in 0..classes {
            for l in langs {
                for _ in 0..per_lang {
                    out.push(Sample {
                        image: GrayImage::new(1, 1, vec![0]).unwrap(),
                        text: String::new(),
                        semantic_id: y,
                        language: l.to_string(),
                        style_id: 0,
                        split: Split::Train,
                    });
                }
            }
        }
        out
    }

    fn class_counts(samples: &[Sample], batch: &[usize]) -> BTreeMap<usize, usize> {
        let mut m = BTreeMap::new();
        for &i in batch {
            *m.entry(samples[i].semantic_id).or_insert(0) += 1;
        }
        m
    }

    #[test]
    fn quota_arithmetic() {
        let samples = toy_split(20, 10, &["en", "zh", "es"]);
        let index = ClassIndex::new(&samples);
        let cfg = SamplerConfig {
            batch_size: Some(40),
            ..SamplerConfig::default()
        };
        let mut rng = crate::seed::rng(&[1]);
        for _ in 0..50 {
            let b = make_batch(&index, &cfg, &mut rng).unwrap();
            let counts = class_counts(&samples, &b);
            assert_eq!(counts.len(), 20);
            assert!(counts.values().all(|&c| c == 2));
        }
    }

    #[test]
    fn language_balance_over_many_batches() {
        let samples = toy_split(20, 10, &["en", "zh", "es"]);
        let index = ClassIndex::new(&samples);
        let mut rng = crate::seed::rng(&[2]);
        for n in [40, 31, 17] {
            let cfg = SamplerConfig {
                batch_size: Some(n),
                ..SamplerConfig::default()
            };
            for _ in 0..1000 {
                let b = make_batch(&index, &cfg, &mut rng).unwrap();
                let mut per_lang: BTreeMap<&str, usize> = BTreeMap::new();
                for &i in &b {
                    *per_lang.entry(samples[i].language.as_str()).or_insert(0) += 1;
                }
                let max = per_lang.values().max().unwrap();
                let min = if per_lang.len() < 3 {
                    &0
                } else {
                    per_lang.values().min().unwrap()
                };
                assert!(max - min <= 2, "{per_lang:?}");
            }
        }
    }

    #[test]
    fn synonyms_span_two_languages() {
        let samples = toy_split(10, 5, &["en", "zh", "es"]);
        let index = ClassIndex::new(&samples);
        let mut rng = crate::seed::rng(&[3]);
        for balance in [true, false] {
            let cfg = SamplerConfig {
                batch_size: Some(20),
                language_balance: balance,
                ..SamplerConfig::default()
            };
            let b = make_batch(&index, &cfg, &mut rng).unwrap();
            for y in 0..10 {
                let langs: HashSet<&str> = b
                    .iter()
                    .filter(|&&i| samples[i].semantic_id == y)
                    .map(|&i| samples[i].language.as_str())
                    .collect();
                assert!(langs.len() >= 2);
            }
        }
    }

    #[test]
    fn infeasible_quota_is_an_error() {
        let samples = toy_split(3, 1, &["en"]);
        let index = ClassIndex::new(&samples);
        let mut rng = crate::seed::rng(&[4]);
        let cfg = SamplerConfig {
            batch_size: Some(2),
            ..SamplerConfig::default()
        };
        assert!(matches!(
            make_batch(&index, &cfg, &mut rng),
            Err(Error::Sampler(_))
        ));
        let too_big = SamplerConfig {
            batch_size: Some(10),
            ..SamplerConfig::default()
        };
        assert!(make_batch(&index, &too_big, &mut rng).is_err());
    }

    #[test]
    fn default_batch_size_is_twice_the_class_count() {
        assert_eq!(SamplerConfig::default().resolve_batch_size(20, 600), 40);
        assert_eq!(SamplerConfig::default().resolve_batch_size(20, 30), 30);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn batches_have_no_duplicates_and_meet_quota(
                classes in 2usize..12,
                per_lang in 1usize..5,
                nlangs in 1usize..4,
                min in 2usize..4,
                extra in 0usize..10,
                balance: bool,
                seed: u64,
            ) {
                let langs = &["en", "zh", "es"][..nlangs];
                let samples = toy_split(classes, per_lang, langs);
                let index = ClassIndex::new(&samples);
                let n = (min * 2 + extra).min(samples.len());
                let cfg = SamplerConfig {
                    batch_size: Some(n),
                    min_instances_per_class: min,
                    language_balance: balance,
                    seed,
                };
                let mut rng = crate::seed::rng(&[seed]);
                match make_batch(&index, &cfg, &mut rng) {
                    Ok(b) => {
                        prop_assert_eq!(b.len(), n);
                        let set: HashSet<usize> = b.iter().copied().collect();
                        prop_assert_eq!(set.len(), b.len());
                        for (_, c) in class_counts(&samples, &b) {
                            prop_assert!(c >= min);
                        }
                    }
                    Err(e) => prop_assert!(matches!(e, Error::Sampler(_))),
                }
            }
        }
    }
}
