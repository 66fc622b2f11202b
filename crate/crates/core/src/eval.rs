//! Retrieval metrics over binary relevance, plus run and qrels file I/O.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::write_atomic;

/// query_id -> relevant doc_ids
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Qrels(pub BTreeMap<String, BTreeSet<String>>);

impl Qrels {
    pub fn relevant(&self, query_id: &str) -> Option<&BTreeSet<String>> {
        self.0.get(query_id)
    }

    /// Reads `query_id<TAB>doc_id<TAB>relevance`; rows with relevance 0 are
    /// kept only as known queries.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut out: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split_whitespace().collect();
            let bad = |message: &str| Error::MalformedLine {
                path: path.to_path_buf(),
                line: i + 1,
                message: message.to_string(),
            };
            let [q, d, rel] = cols[..] else {
                return Err(bad("expected 3 columns"));
            };
            let rel: i64 = rel.parse().map_err(|_| bad("relevance is not an integer"))?;
            let entry = out.entry(q.to_string()).or_default();
            if rel > 0 {
                entry.insert(d.to_string());
            }
        }
        Ok(Self(out))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, |w| {
            for (q, docs) in &self.0 {
                for d in docs {
                    writeln!(w, "{q}\t{d}\t1")?;
                }
            }
            Ok(())
        })
    }
}

/// query_id -> ranked (doc_id, score), best first.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Run(pub BTreeMap<String, Vec<(String, f64)>>);

impl Run {
    /// Writes `query_id doc_id rank score` lines, rank starting at 1.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, |w| {
            for (q, ranking) in &self.0 {
                for (i, (d, s)) in ranking.iter().enumerate() {
                    writeln!(w, "{q} {d} {} {s}", i + 1)?;
                }
            }
            Ok(())
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut rows: BTreeMap<String, Vec<(usize, String, f64)>> = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let bad = |message: &str| Error::MalformedLine {
                path: path.to_path_buf(),
                line: i + 1,
                message: message.to_string(),
            };
            let cols: Vec<&str> = line.split_whitespace().collect();
            let [q, d, rank, score] = cols[..] else {
                return Err(bad("expected 4 columns: query_id doc_id rank score"));
            };
            let rank: usize = rank.parse().map_err(|_| bad("rank is not an integer"))?;
            let score: f64 = score.parse().map_err(|_| bad("score is not a number"))?;
            rows.entry(q.to_string()).or_default().push((rank, d.to_string(), score));
        }
        Ok(Self(
            rows.into_iter()
                .map(|(q, mut r)| {
                    r.sort_by(|a, b| a.0.cmp(&b.0).then_with(|| a.1.cmp(&b.1)));
                    (q, r.into_iter().map(|(_, d, s)| (d, s)).collect())
                })
                .collect(),
        ))
    }
}

/// Binary-gain NDCG@k with a log2 discount; `None` without relevant docs.
pub fn ndcg_at_k<S: AsRef<str>>(ranking: &[S], relevant: &BTreeSet<String>, k: usize) -> Option<f64> {
    if relevant.is_empty() || k == 0 {
        return None;
    }
    let dcg: f64 = ranking
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, d)| relevant.contains(d.as_ref()))
        .map(|(i, _)| 1.0 / ((i + 2) as f64).log2())
        .sum();
    let idcg: f64 = (0..relevant.len().min(k)).map(|i| 1.0 / ((i + 2) as f64).log2()).sum();
    Some(dcg / idcg)
}

/// `|top-k ∩ relevant| / |relevant|`; `None` without relevant docs.
pub fn recall_at_k<S: AsRef<str>>(ranking: &[S], relevant: &BTreeSet<String>, k: usize) -> Option<f64> {
    if relevant.is_empty() {
        return None;
    }
    let hits = ranking.iter().take(k).filter(|d| relevant.contains(d.as_ref())).count();
    Some(hits as f64 / relevant.len() as f64)
}

/// `|top-k ∩ gold| / k`
pub fn precision_at_k<S: AsRef<str>>(ranking: &[S], gold: &BTreeSet<&str>, k: usize) -> f64 {
    if k == 0 {
        return 0.0;
    }
    ranking.iter().take(k).filter(|d| gold.contains(d.as_ref())).count() as f64 / k as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Metric {
    Ndcg(usize),
    Recall(usize),
    Precision(usize),
}

impl std::str::FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, k) = s
            .trim()
            .split_once('@')
            .ok_or_else(|| Error::invalid(format!("metric {s:?} must look like name@k")))?;
        let k: usize = k.parse().ok().filter(|&k| k > 0).ok_or_else(|| Error::invalid(format!("bad cutoff in {s:?}")))?;
        match name.to_ascii_lowercase().as_str() {
            "ndcg" | "n" => Ok(Metric::Ndcg(k)),
            "recall" | "r" => Ok(Metric::Recall(k)),
            "p" | "precision" => Ok(Metric::Precision(k)),
            _ => Err(Error::invalid(format!("unknown metric {name:?}"))),
        }
    }
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Metric::Ndcg(k) => write!(f, "ndcg@{k}"),
            Metric::Recall(k) => write!(f, "recall@{k}"),
            Metric::Precision(k) => write!(f, "p@{k}"),
        }
    }
}

pub fn parse_metrics(spec: &str) -> Result<Vec<Metric>> {
    let m: Vec<Metric> = spec.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect::<Result<_>>()?;
    if m.is_empty() {
        return Err(Error::invalid("no metrics requested"));
    }
    Ok(m)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Macro mean over evaluated queries.
    pub means: BTreeMap<String, f64>,
    pub evaluated: usize,
    /// Queries excluded because they have no relevant documents.
    pub skipped_no_relevant: usize,
    /// Judged queries missing from the run; they score 0.
    pub missing_from_run: usize,
    pub per_query: BTreeMap<String, BTreeMap<String, f64>>,
}

impl EvalReport {
    pub fn get(&self, metric: Metric) -> Option<f64> {
        self.means.get(&metric.to_string()).copied()
    }

    pub fn per_query_csv(&self) -> String {
        let cols: Vec<&String> = self.means.keys().collect();
        let mut out = String::from("query_id");
        for c in &cols {
            let _ = write!(out, ",{c}");
        }
        out.push('\n');
        for (q, vals) in &self.per_query {
            out.push_str(q);
            for c in &cols {
                let _ = write!(out, ",{}", vals.get(*c).copied().unwrap_or(0.0));
            }
            out.push('\n');
        }
        out
    }
}

pub fn evaluate(run: &Run, qrels: &Qrels, metrics: &[Metric]) -> EvalReport {
    let mut report = EvalReport::default();
    let empty = Vec::new();
    let mut sums: BTreeMap<String, f64> = metrics.iter().map(|m| (m.to_string(), 0.0)).collect();
    let queries: BTreeSet<&String> = qrels.0.keys().chain(run.0.keys()).collect();
    for q in queries {
        let Some(rel) = qrels.relevant(q).filter(|r| !r.is_empty()) else {
            report.skipped_no_relevant += 1;
            continue;
        };
        let ranking: Vec<&str> = match run.0.get(q) {
            Some(r) => r.iter().map(|(d, _)| d.as_str()).collect(),
            None => {
                report.missing_from_run += 1;
                empty.iter().map(String::as_str).collect()
            }
        };
        let mut vals = BTreeMap::new();
        for m in metrics {
            let v = match *m {
                Metric::Ndcg(k) => ndcg_at_k(&ranking, rel, k).unwrap_or(0.0),
                Metric::Recall(k) => recall_at_k(&ranking, rel, k).unwrap_or(0.0),
                Metric::Precision(k) => {
                    let gold: BTreeSet<&str> = rel.iter().map(String::as_str).collect();
                    precision_at_k(&ranking, &gold, k)
                }
            };
            *sums.get_mut(&m.to_string()).expect("seeded") += v;
            vals.insert(m.to_string(), v);
        }
        report.per_query.insert(q.clone(), vals);
        report.evaluated += 1;
    }
    if report.evaluated > 0 {
        report.means = sums.into_iter().map(|(k, v)| (k, v / report.evaluated as f64)).collect();
    } else {
        report.means = sums;
    }
    report
}
