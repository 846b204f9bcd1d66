//! Ranking metrics, edit similarity and embedding-space geometry.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::retrieval::{Protocol, RetrievalResult};

fn check_ranks(ranks: &[usize]) -> Result<()> {
    if ranks.is_empty() {
        return Err(Error::Metric("no ranks".into()));
    }
    if ranks.contains(&0) {
        return Err(Error::Metric("ranks are 1-based".into()));
    }
    Ok(())
}

/// Fraction of ranks `<= k`.
pub fn acc_at_k(ranks: &[usize], k: usize) -> Result<f64> {
    check_ranks(ranks)?;
    if k == 0 {
        return Err(Error::Metric("k must be >= 1".into()));
    }
    Ok(ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len() as f64)
}

/// Mean reciprocal rank.
pub fn mrr(ranks: &[usize]) -> Result<f64> {
    check_ranks(ranks)?;
    Ok(ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / ranks.len() as f64)
}

/// Unit-cost edit distance over Unicode scalar values.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Normalized edit similarity `1 - D / max(|pred|, |gt|)`; two empty strings
/// score 1.
pub fn nes(pred: &str, gt: &str) -> f64 {
    let longest = pred.chars().count().max(gt.chars().count());
    if longest == 0 {
        return 1.0;
    }
    1.0 - levenshtein(pred, gt) as f64 / longest as f64
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Geometry {
    pub r_intra: f64,
    pub d_inter: f64,
    pub rd_ratio: f64,
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

/// Mean distance to the own-class centroid over mean pairwise centroid
/// distance. Centroids are plain means, not renormalized.
pub fn characterize(embeddings: &Tensor, labels: &[usize]) -> Result<Geometry> {
    if !embeddings.is_matrix() || embeddings.rows() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} labels for embeddings {:?}",
            labels.len(),
            embeddings.shape()
        )));
    }
    let d = embeddings.cols();
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for (i, &y) in labels.iter().enumerate() {
        let (s, n) = sums.entry(y).or_insert_with(|| (vec![0.0; d], 0));
        for (acc, v) in s.iter_mut().zip(embeddings.row(i)) {
            *acc += v;
        }
        *n += 1;
    }
    if sums.len() < 2 {
        return Err(Error::Geometry(format!(
            "need at least two classes, found {}",
            sums.len()
        )));
    }
    let centroids: BTreeMap<usize, Vec<f64>> = sums
        .into_iter()
        .map(|(y, (s, n))| (y, s.into_iter().map(|x| x / n as f64).collect()))
        .collect();
    let r_intra = labels
        .iter()
        .enumerate()
        .map(|(i, y)| euclidean(embeddings.row(i), &centroids[y]))
        .sum::<f64>()
        / labels.len() as f64;
    let cs: Vec<&Vec<f64>> = centroids.values().collect();
    let (mut total, mut pairs) = (0.0, 0usize);
    for i in 0..cs.len() {
        for j in (i + 1)..cs.len() {
            total += euclidean(cs[i], cs[j]);
            pairs += 1;
        }
    }
    let d_inter = total / pairs as f64;
    if d_inter < 1e-12 {
        return Err(Error::Geometry(format!(
            "class centroids coincide (mean distance {d_inter})"
        )));
    }
    Ok(Geometry {
        r_intra,
        d_inter,
        rd_ratio: r_intra / d_inter,
    })
}

/// Medians of cosine similarity over same-class and different-class pairs
/// of unit rows.
pub fn pair_cosine_medians(embeddings: &Tensor, labels: &[usize]) -> Result<(f64, f64)> {
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for i in 0..labels.len() {
        for j in (i + 1)..labels.len() {
            let c = crate::numcore::dot(embeddings.row(i), embeddings.row(j));
            if labels[i] == labels[j] {
                pos.push(c);
            } else {
                neg.push(c);
            }
        }
    }
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::Metric(
            "need both positive and negative pairs".into(),
        ));
    }
    Ok((median(&mut pos), median(&mut neg)))
}

fn median(xs: &mut [f64]) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProtocolMetrics {
    pub protocol: Protocol,
    pub queries: usize,
    pub acc1: f64,
    pub acc3: f64,
    pub acc5: f64,
    pub mrr: f64,
    pub nes: f64,
}

impl ProtocolMetrics {
    /// NES compares each query's top-1 text against its ground-truth text.
    pub fn from_results(protocol: Protocol, results: &[RetrievalResult]) -> Result<Self> {
        let ranks: Vec<usize> = results.iter().map(|r| r.rank).collect();
        let nes_mean = results
            .iter()
            .map(|r| nes(&r.top1_text, &r.target_text))
            .sum::<f64>()
            / results.len().max(1) as f64;
        Ok(ProtocolMetrics {
            protocol,
            queries: results.len(),
            acc1: acc_at_k(&ranks, 1)?,
            acc3: acc_at_k(&ranks, 3)?,
            acc5: acc_at_k(&ranks, 5)?,
            mrr: mrr(&ranks)?,
            nes: nes_mean,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub checkpoint: String,
    pub dataset_seed: u64,
    pub split: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub meta: ReportMeta,
    pub protocols: Vec<ProtocolMetrics>,
    pub geometry: Option<Geometry>,
}

impl MetricsReport {
    pub fn get(&self, protocol: &Protocol) -> Option<&ProtocolMetrics> {
        self.protocols.iter().find(|p| &p.protocol == protocol)
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// One row per protocol.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["protocol", "queries", "acc1", "acc3", "acc5", "mrr", "nes"])?;
        for p in &self.protocols {
            w.write_record([
                p.protocol.to_string(),
                p.queries.to_string(),
                format!("{:.6}", p.acc1),
                format!("{:.6}", p.acc3),
                format!("{:.6}", p.acc5),
                format!("{:.6}", p.mrr),
                format!("{:.6}", p.nes),
            ])?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Metric(format!("csv flush: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    /// Exponential-time edit distance straight from the recursive definition.
    fn brute_levenshtein(a: &[char], b: &[char]) -> usize {
        match (a.split_first(), b.split_first()) {
            (None, _) => b.len(),
            (_, None) => a.len(),
            (Some((ha, ta)), Some((hb, tb))) => {
                let sub = brute_levenshtein(ta, tb) + usize::from(ha != hb);
                let del = brute_levenshtein(ta, b) + 1;
                let ins = brute_levenshtein(a, tb) + 1;
                sub.min(del).min(ins)
            }
        }
    }

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-6
    }

    #[test]
    fn rank_metric_examples() {
        assert_eq!(acc_at_k(&[1, 1, 1], 1).unwrap(), 1.0);
        assert!(close(acc_at_k(&[1, 3, 7], 3).unwrap(), 0.666667));
        assert_eq!(acc_at_k(&[2], 1).unwrap(), 0.0);
        assert_eq!(mrr(&[1, 1]).unwrap(), 1.0);
        assert!(close(mrr(&[1, 2, 4]).unwrap(), 0.583333));
        assert!((mrr(&[1_000_000]).unwrap() - 1e-6).abs() < 1e-15);
        assert!(acc_at_k(&[], 1).is_err());
        assert!(mrr(&[0]).is_err());
    }

    #[test]
    fn edit_examples() {
        assert_eq!(levenshtein("abc", "abc"), 0);
        assert_eq!(levenshtein("", "abc"), 3);
        assert_eq!(levenshtein("Hom", "from"), 2);
        assert_eq!(levenshtein("日月", "月"), 1);
        assert_eq!(nes("abc", "abc"), 1.0);
        assert_eq!(nes("Hom", "from"), 0.5);
        assert_eq!(nes("", ""), 1.0);
    }

    #[test]
    fn geometry_examples() {
        let collapsed = Tensor::matrix(4, 2, vec![1., 0., 1., 0., 0., 1., 0., 1.]).unwrap();
        let g = characterize(&collapsed, &[0, 0, 1, 1]).unwrap();
        assert_eq!(g.r_intra, 0.0);
        assert!(close(g.d_inter, 1.414214));
        assert_eq!(g.rd_ratio, 0.0);

        let spread = Tensor::matrix(4, 2, vec![1., 0., 0., 1., -1., 0., 0., -1.]).unwrap();
        let g = characterize(&spread, &[0, 0, 1, 1]).unwrap();
        assert!(close(g.r_intra, 0.707107));
        assert!(close(g.d_inter, 1.414214));
        assert!(close(g.rd_ratio, 0.5));

        let swapped = Tensor::matrix(4, 2, vec![0., -1., 1., 0., -1., 0., 0., 1.]).unwrap();
        let h = characterize(&swapped, &[1, 0, 1, 0]).unwrap();
        assert_eq!(g, h);

        assert!(matches!(
            characterize(&spread, &[0, 0, 0, 0]),
            Err(Error::Geometry(_))
        ));
        let same = Tensor::matrix(2, 2, vec![1., 0., 1., 0.]).unwrap();
        assert!(matches!(
            characterize(&same, &[0, 1]),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn levenshtein_matches_brute_force_oracle() {
        let alphabet: Vec<char> = "abcé日".chars().collect();
        let mut rng = crate::seed::rng(&[0x1e7]);
        for _ in 0..500 {
            let mut word = || -> String {
                let n = rng.random_range(0..=6);
                (0..n)
                    .map(|_| alphabet[rng.random_range(0..alphabet.len())])
                    .collect()
            };
            let (a, b) = (word(), word());
            let ca: Vec<char> = a.chars().collect();
            let cb: Vec<char> = b.chars().collect();
            assert_eq!(
                levenshtein(&a, &b),
                brute_levenshtein(&ca, &cb),
                "{a:?} {b:?}"
            );
        }
    }

    #[test]
    fn csv_has_one_row_per_protocol() {
        let report = MetricsReport {
            meta: ReportMeta {
                checkpoint: "stage2.ckpt".into(),
                dataset_seed: 7,
                split: "ood_eval".into(),
            },
            protocols: vec![
                ProtocolMetrics {
                    protocol: Protocol::within("en"),
                    queries: 3,
                    acc1: 1.0,
                    acc3: 1.0,
                    acc5: 1.0,
                    mrr: 1.0,
                    nes: 1.0,
                },
                ProtocolMetrics {
                    protocol: Protocol::Mixed,
                    queries: 9,
                    acc1: 0.5,
                    acc3: 0.75,
                    acc5: 1.0,
                    mrr: 0.6,
                    nes: 0.8,
                },
            ],
            geometry: None,
        };
        let csv = report.to_csv().unwrap();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().nth(2).unwrap().starts_with("mixed,9,0.500000"));
        let back: MetricsReport = serde_json::from_str(&report.to_json().unwrap()).unwrap();
        assert_eq!(back, report);
    }

    fn short_word() -> impl Strategy<Value = String> {
        proptest::collection::vec(
            prop_oneof![Just('a'), Just('b'), Just('ñ'), Just('水')],
            0..6,
        )
        .prop_map(|v| v.into_iter().collect())
    }

    proptest! {
        #[test]
        fn levenshtein_is_a_metric(a in short_word(), b in short_word(), c in short_word()) {
            let ab = levenshtein(&a, &b);
            prop_assert_eq!(ab, levenshtein(&b, &a));
            prop_assert_eq!(ab == 0, a == b);
            prop_assert!(levenshtein(&a, &c) <= ab + levenshtein(&b, &c));
            let s = nes(&a, &b);
            prop_assert!((0.0..=1.0).contains(&s));
        }

        #[test]
        fn acc_is_monotone_and_bounded_by_mrr(ranks in proptest::collection::vec(1usize..30, 1..40)) {
            let mut prev = 0.0;
            for k in 1..35 {
                let a = acc_at_k(&ranks, k).unwrap();
                prop_assert!(a >= prev);
                prev = a;
            }
            prop_assert!(mrr(&ranks).unwrap() >= acc_at_k(&ranks, 1).unwrap());
        }

        #[test]
        fn rd_ratio_is_rotation_invariant(seed: u64) {
            let mut rng = crate::seed::rng(&[seed]);
            let (n, d) = (12, 4);
            let rows: Vec<Vec<f64>> = (0..n).map(|_| {
                let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                let nn = crate::numcore::norm(&v);
                v.into_iter().map(|x| x / nn).collect()
            }).collect();
            let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
            // random orthogonal matrix by Gram-Schmidt
            let mut q: Vec<Vec<f64>> = Vec::new();
            while q.len() < d {
                let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                for b in &q {
                    let p = crate::numcore::dot(&v, b);
                    for (x, y) in v.iter_mut().zip(b) {
                        *x -= p * y;
                    }
                }
                let nn = crate::numcore::norm(&v);
                if nn > 1e-3 {
                    q.push(v.into_iter().map(|x| x / nn).collect());
                }
            }
            let rotated: Vec<Vec<f64>> = rows.iter()
                .map(|r| q.iter().map(|b| crate::numcore::dot(r, b)).collect())
                .collect();
            let a = characterize(&Tensor::from_rows(&rows).unwrap(), &labels).unwrap();
            let b = characterize(&Tensor::from_rows(&rotated).unwrap(), &labels).unwrap();
            prop_assert!((a.rd_ratio - b.rd_ratio).abs() < 1e-9);
        }
    }
}
