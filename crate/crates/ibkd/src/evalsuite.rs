//! Evaluation metrics: Spearman rank correlation for similarity tasks,
//! MRR@k and Recall@k for retrieval, the alignment/uniformity pair and the
//! covariance diagnostic for embedding-space analysis, plus exhaustive
//! brute-force retrieval with deterministic tie-breaking.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufWriter, Write as _};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, sq_dist, Matrix};

/// One query's retrieval output: document ids with scores, descending.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedResult {
    pub query_id: String,
    pub ranking: Vec<(String, f64)>,
}

/// Named scalar metrics for one evaluation run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub eval_set: String,
    pub dim: usize,
    pub metrics: BTreeMap<String, f64>,
}

impl MetricReport {
    pub fn new(
        eval_set: impl Into<String>,
        dim: usize,
        metrics: BTreeMap<String, f64>,
    ) -> Result<Self> {
        for (k, v) in &metrics {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("metric {k}"),
                });
            }
        }
        Ok(MetricReport {
            eval_set: eval_set.into(),
            dim,
            metrics,
        })
    }
}

/// Similarity used by [`exact_retrieve`]: raw dot product (the retrieval
/// convention) or cosine (the similarity-task convention).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Score {
    Dot,
    Cosine,
}

fn check_finite_slice(name: &str, xs: &[f64]) -> Result<()> {
    if xs.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: name.to_string(),
        });
    }
    Ok(())
}

/// 1-based ranks with ties receiving the average of their positions.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| values[i].partial_cmp(&values[j]).expect("finite values"));
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let avg = (i + j + 2) as f64 / 2.0;
        for &p in &idx[i..=j] {
            ranks[p] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Pairing {
            left: a.len(),
            right: b.len(),
        });
    }
    if a.len() < 2 {
        return Err(Error::Degenerate {
            got: a.len(),
            need: 2,
        });
    }
    check_finite_slice("spearman left input", a)?;
    check_finite_slice("spearman right input", b)?;
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    let n = a.len() as f64;
    let ma = ra.iter().sum::<f64>() / n;
    let mb = rb.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for i in 0..a.len() {
        let da = ra[i] - ma;
        let db = rb[i] - mb;
        cov += da * db;
        va += da * da;
        vb += db * db;
    }
    if va == 0.0 || vb == 0.0 {
        return Err(Error::Data(
            "rank correlation undefined: an input has zero rank variance".into(),
        ));
    }
    Ok(cov / (va * vb).sqrt())
}

type Relevance = BTreeMap<String, BTreeSet<String>>;

fn relevant_for<'a>(relevant: &'a Relevance, query_id: &str) -> Result<&'a BTreeSet<String>> {
    relevant
        .get(query_id)
        .ok_or_else(|| Error::Data(format!("no relevance entry for query {query_id:?}")))
}

/// Mean reciprocal rank of the first relevant document within the top k.
pub fn mrr_at_k(results: &[RankedResult], relevant: &Relevance, k: usize) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Data("no ranked results to score".into()));
    }
    let mut sum = 0.0;
    for r in results {
        let rel = relevant_for(relevant, &r.query_id)?;
        let hit = r
            .ranking
            .iter()
            .take(k)
            .position(|(doc, _)| rel.contains(doc));
        if let Some(pos) = hit {
            sum += 1.0 / (pos + 1) as f64;
        }
    }
    Ok(sum / results.len() as f64)
}

/// Mean fraction of each query's relevant documents found in the top k.
pub fn recall_at_k(results: &[RankedResult], relevant: &Relevance, k: usize) -> Result<f64> {
    if results.is_empty() {
        return Err(Error::Data("no ranked results to score".into()));
    }
    let mut sum = 0.0;
    for r in results {
        let rel = relevant_for(relevant, &r.query_id)?;
        if rel.is_empty() {
            return Err(Error::Data(format!(
                "query {:?} has an empty relevant set",
                r.query_id
            )));
        }
        let found = r
            .ranking
            .iter()
            .take(k)
            .filter(|(doc, _)| rel.contains(doc))
            .count();
        sum += found as f64 / rel.len() as f64;
    }
    Ok(sum / results.len() as f64)
}

/// Mean squared Euclidean distance between paired embeddings (rows of `a`
/// against rows of `b`). Smaller is better-aligned.
pub fn alignment(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("alignment", a.shape(), b.shape()));
    }
    if a.rows() == 0 {
        return Err(Error::Data("alignment needs at least one pair".into()));
    }
    let sum: f64 = (0..a.rows()).map(|i| sq_dist(a.row(i), b.row(i))).sum();
    Ok(sum / a.rows() as f64)
}

/// Log of the mean Gaussian potential exp(-2 d^2) over all unordered
/// distinct row pairs; always <= 0, more negative = more uniform. The sum
/// is log-sum-exp stabilized so large spreads cannot underflow to -inf.
pub fn uniformity(embeddings: &Matrix) -> Result<f64> {
    let n = embeddings.rows();
    if n < 2 {
        return Err(Error::Degenerate { got: n, need: 2 });
    }
    let mut max = f64::NEG_INFINITY;
    for i in 0..n {
        for j in (i + 1)..n {
            max = max.max(-2.0 * sq_dist(embeddings.row(i), embeddings.row(j)));
        }
    }
    let mut sum = 0.0;
    for i in 0..n {
        for j in (i + 1)..n {
            sum += (-2.0 * sq_dist(embeddings.row(i), embeddings.row(j)) - max).exp();
        }
    }
    let pairs = (n * (n - 1) / 2) as f64;
    Ok(max + sum.ln() - pairs.ln())
}

/// Sample covariance of embedding dimensions (rows are samples), with the
/// unbiased n-1 divisor.
pub fn covariance_matrix(embeddings: &Matrix) -> Result<Matrix> {
    let n = embeddings.rows();
    if n < 2 {
        return Err(Error::Degenerate { got: n, need: 2 });
    }
    let d = embeddings.cols();
    let mut means = vec![0.0; d];
    for i in 0..n {
        for (m, &v) in means.iter_mut().zip(embeddings.row(i)) {
            *m += v;
        }
    }
    for m in &mut means {
        *m /= n as f64;
    }
    let centered = Matrix::from_fn(n, d, |i, j| embeddings.get(i, j) - means[j]);
    centered
        .transpose()
        .matmul(&centered)
        .map(|m| m.scale(1.0 / (n - 1) as f64))
}

/// Mean absolute off-diagonal correlation, a scalar disentanglement
/// diagnostic. Dimensions whose variance is indistinguishable from
/// floating-point noise are flagged and their correlations counted as 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OffdiagMass {
    pub value: f64,
    pub zero_variance_dims: Vec<usize>,
}

/// Reduces a covariance matrix to the mean |off-diagonal| of the implied
/// correlation matrix.
pub fn offdiag_mass(cov: &Matrix) -> Result<OffdiagMass> {
    if cov.rows() != cov.cols() {
        return Err(Error::shape(
            "offdiag_mass",
            cov.shape(),
            (cov.rows(), cov.rows()),
        ));
    }
    let d = cov.rows();
    // a dimension counts as constant when its variance is non-positive or
    // vanishes against the embedding's overall variance scale (constant
    // columns leave centering-rounding noise, never exact zero)
    let max_var = (0..d).map(|i| cov.get(i, i)).fold(0.0f64, f64::max);
    let zero_var: Vec<bool> = (0..d)
        .map(|i| {
            let var = cov.get(i, i);
            var <= 0.0 || var < 1e-18 * (1.0 + max_var)
        })
        .collect();
    if d < 2 {
        return Ok(OffdiagMass {
            value: 0.0,
            zero_variance_dims: (0..d).filter(|&i| zero_var[i]).collect(),
        });
    }
    let mut sum = 0.0;
    for i in 0..d {
        for j in 0..d {
            if i == j {
                continue;
            }
            if !(zero_var[i] || zero_var[j]) {
                sum += (cov.get(i, j) / (cov.get(i, i) * cov.get(j, j)).sqrt()).abs();
            }
        }
    }
    Ok(OffdiagMass {
        value: sum / (d * (d - 1)) as f64,
        zero_variance_dims: (0..d).filter(|&i| zero_var[i]).collect(),
    })
}

fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Exhaustive top-k retrieval: every query scored against every document,
/// ties broken by ascending document id so output is deterministic.
pub fn exact_retrieve(
    query_ids: &[String],
    queries: &Matrix,
    doc_ids: &[String],
    corpus: &Matrix,
    k: usize,
    score: Score,
) -> Result<Vec<RankedResult>> {
    if k < 1 {
        return Err(Error::Config("retrieval depth k must be at least 1".into()));
    }
    if queries.cols() != corpus.cols() {
        return Err(Error::shape(
            "exact_retrieve",
            queries.shape(),
            corpus.shape(),
        ));
    }
    if query_ids.len() != queries.rows() {
        return Err(Error::Pairing {
            left: query_ids.len(),
            right: queries.rows(),
        });
    }
    if doc_ids.len() != corpus.rows() {
        return Err(Error::Pairing {
            left: doc_ids.len(),
            right: corpus.rows(),
        });
    }
    let doc_norms: Vec<f64> = (0..corpus.rows()).map(|i| norm(corpus.row(i))).collect();
    (0..queries.rows())
        .into_par_iter()
        .map(|qi| {
            let q = queries.row(qi);
            let qn = norm(q);
            let mut scored: Vec<(usize, f64)> = (0..corpus.rows())
                .map(|di| {
                    let raw = dot(q, corpus.row(di));
                    let s = match score {
                        Score::Dot => raw,
                        Score::Cosine => {
                            let denom = qn * doc_norms[di];
                            if denom == 0.0 {
                                0.0
                            } else {
                                raw / denom
                            }
                        }
                    };
                    (di, s)
                })
                .collect();
            if scored.iter().any(|(_, s)| !s.is_finite()) {
                return Err(Error::NonFinite {
                    context: format!("retrieval scores for query {:?}", query_ids[qi]),
                });
            }
            scored.sort_by(|a, b| {
                b.1.partial_cmp(&a.1)
                    .expect("finite scores")
                    .then_with(|| doc_ids[a.0].cmp(&doc_ids[b.0]))
            });
            scored.truncate(k);
            Ok(RankedResult {
                query_id: query_ids[qi].clone(),
                ranking: scored
                    .into_iter()
                    .map(|(di, s)| (doc_ids[di].clone(), s))
                    .collect(),
            })
        })
        .collect()
}

/// Exports rankings as TSV rows of (query_id, doc_id, rank, score).
pub fn write_rankings_tsv(path: impl AsRef<Path>, results: &[RankedResult]) -> Result<()> {
    let path = path.as_ref();
    let mut w =
        BufWriter::new(File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?);
    writeln!(w, "query_id\tdoc_id\trank\tscore")
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    for r in results {
        for (rank, (doc, score)) in r.ranking.iter().enumerate() {
            writeln!(w, "{}\t{}\t{}\t{:.17e}", r.query_id, doc, rank + 1, score)
                .map_err(|e| Error::io(path.display().to_string(), e))?;
        }
    }
    w.flush()
        .map_err(|e| Error::io(path.display().to_string(), e))
}
