//! Entity and aspect relevance predictors.
//!
//! Both are MLPs whose output is compared to a target embedding by inner
//! product and squashed by a sigmoid: `σ(e_e · f(e_d))` for entities and
//! `σ(e_a · g([e_d; e_e]))` for aspects. Training is mini-batch Adam over
//! a weighted binary cross-entropy with hand-written backprop.

mod mlp;

use std::collections::{BTreeMap, BTreeSet};

use ndarray::{Array1, Array2, ArrayView1};
use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Document, PairSet, RelevanceVector};
use crate::relevance::SoftLabelTable;

pub use mlp::{Layer, MlpModel, MODEL_FORMAT, MODEL_VERSION};

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Named target embeddings (entities or aspects), one row per name in
/// sorted order.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSpace {
    names: Vec<String>,
    index: BTreeMap<String, usize>,
    matrix: Array2<f64>,
}

impl TargetSpace {
    pub fn new(vectors: BTreeMap<String, Vec<f64>>) -> Result<Self> {
        let dim = vectors
            .values()
            .next()
            .map(Vec::len)
            .ok_or_else(|| Error::invalid("empty target space"))?;
        let mut flat = Vec::with_capacity(vectors.len() * dim);
        for v in vectors.values() {
            if v.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: v.len(),
                });
            }
            flat.extend_from_slice(v);
        }
        let names: Vec<String> = vectors.into_keys().collect();
        let matrix = Array2::from_shape_vec((names.len(), dim), flat).expect("shape checked");
        Ok(Self {
            index: names.iter().enumerate().map(|(i, n)| (n.clone(), i)).collect(),
            names,
            matrix,
        })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.matrix.ncols()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn vector(&self, name: &str) -> Option<ArrayView1<'_, f64>> {
        self.index_of(name).map(|i| self.matrix.row(i))
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.matrix
    }
}

fn check_dim(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch { expected, actual });
    }
    Ok(())
}

/// `σ(e_e · f(e_d))`
pub fn entity_score(model: &MlpModel, doc: &[f64], entity: &[f64]) -> Result<f64> {
    let u = model.forward(ArrayView1::from(doc))?;
    check_dim(u.len(), entity.len())?;
    Ok(sigmoid(u.dot(&ArrayView1::from(entity))))
}

/// `σ(e_a · g([e_d; e_e]))`
pub fn aspect_score(model: &MlpModel, doc: &[f64], entity: &[f64], aspect: &[f64]) -> Result<f64> {
    let u = model.forward(concat(doc, entity).view())?;
    check_dim(u.len(), aspect.len())?;
    Ok(sigmoid(u.dot(&ArrayView1::from(aspect))))
}

fn concat(a: &[f64], b: &[f64]) -> Array1<f64> {
    a.iter().chain(b).copied().collect()
}

/// Sigmoid scores of every target given the model input, as one
/// matrix-vector product.
pub fn score_all(model: &MlpModel, input: &[f64], targets: &TargetSpace) -> Result<Vec<f64>> {
    let u = model.forward(ArrayView1::from(input))?;
    check_dim(targets.dim(), u.len())?;
    Ok(targets.matrix().dot(&u).iter().map(|&z| sigmoid(z)).collect())
}

/// Scores of every aspect conditioned on (document, entity).
pub fn aspect_scores(model: &MlpModel, doc: &[f64], entity: &[f64], aspects: &TargetSpace) -> Result<Vec<f64>> {
    score_all(model, concat(doc, entity).as_slice().expect("contiguous"), aspects)
}

/// Relevance of every entity to one document or query.
pub fn relevance_vector(model: &MlpModel, owner_id: &str, embedding: &[f64], entities: &TargetSpace) -> Result<RelevanceVector> {
    let scores = score_all(model, embedding, entities)?;
    Ok(RelevanceVector::new(owner_id, entities.names().iter().cloned().zip(scores)))
}

/// Same as [`relevance_vector`] with one dot product per entity.
pub fn relevance_vector_looped(
    model: &MlpModel,
    owner_id: &str,
    embedding: &[f64],
    entities: &TargetSpace,
) -> Result<RelevanceVector> {
    let u = model.forward(ArrayView1::from(embedding))?;
    check_dim(entities.dim(), u.len())?;
    let mut values = Vec::with_capacity(entities.len());
    for name in entities.names() {
        let e = entities.vector(name).expect("own name");
        values.push((name.clone(), sigmoid(e.dot(&u))));
    }
    Ok(RelevanceVector::new(owner_id, values))
}

/// One training row: model input plus weighted positive targets. Every
/// other target is a negative.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: Vec<f64>,
    pub positives: Vec<(usize, f64)>,
}

#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub examples: Vec<Example>,
    pub targets: Array2<f64>,
}

/// Which negatives enter the loss for a batch.
#[derive(Debug, Clone)]
pub enum Negatives {
    All,
    /// Per-example sampled negative indices, each weighted to keep the sum
    /// unbiased.
    Sampled(Vec<(Vec<usize>, f64)>),
}

/// Summed loss over the given rows and its gradient (of the sum) with
/// respect to every parameter, flattened in [`MlpModel::params`] order.
pub fn loss_and_grad(model: &MlpModel, set: &TrainingSet, rows: &[usize], negatives: &Negatives) -> Result<(f64, Vec<f64>)> {
    let (loss, grads) = batch_loss_grad(model, set, rows, negatives, true)?;
    Ok((loss, mlp::flatten(&grads.expect("requested"))))
}

pub fn loss(model: &MlpModel, set: &TrainingSet, rows: &[usize], negatives: &Negatives) -> Result<f64> {
    Ok(batch_loss_grad(model, set, rows, negatives, false)?.0)
}

fn batch_loss_grad(
    model: &MlpModel,
    set: &TrainingSet,
    rows: &[usize],
    negatives: &Negatives,
    want_grad: bool,
) -> Result<(f64, Option<Vec<Layer>>)> {
    let in_dim = model.input_dim();
    check_dim(set.targets.ncols(), model.output_dim())?;
    let mut x = Array2::zeros((rows.len(), in_dim));
    for (r, &i) in rows.iter().enumerate() {
        let ex = &set.examples[i];
        check_dim(in_dim, ex.input.len())?;
        x.row_mut(r).assign(&ArrayView1::from(&ex.input));
    }
    let cache = model.forward_batch(x.view());
    let u = cache.output();
    let mut grad_u = Array2::<f64>::zeros(u.raw_dim());
    let mut total = 0.0;

    match negatives {
        Negatives::All => {
            let s = u.dot(&set.targets.t());
            let mut g = Array2::<f64>::zeros(s.raw_dim());
            for (r, &i) in rows.iter().enumerate() {
                let pos: BTreeMap<usize, f64> = set.examples[i].positives.iter().copied().collect();
                for (j, &z) in s.row(r).iter().enumerate() {
                    match pos.get(&j) {
                        Some(&y) => {
                            total += y * softplus(-z);
                            g[[r, j]] = -y * (1.0 - sigmoid(z));
                        }
                        None => {
                            total += softplus(z);
                            g[[r, j]] = sigmoid(z);
                        }
                    }
                }
            }
            if want_grad {
                grad_u = g.dot(&set.targets);
            }
        }
        Negatives::Sampled(per_row) => {
            if per_row.len() != rows.len() {
                return Err(Error::invalid("sampled negatives do not match the batch"));
            }
            for (r, &i) in rows.iter().enumerate() {
                let ur = u.row(r);
                let mut gr = grad_u.row_mut(r);
                for &(j, y) in &set.examples[i].positives {
                    let z = set.targets.row(j).dot(&ur);
                    total += y * softplus(-z);
                    gr.scaled_add(-y * (1.0 - sigmoid(z)), &set.targets.row(j));
                }
                let (idx, w) = &per_row[r];
                for &j in idx {
                    let z = set.targets.row(j).dot(&ur);
                    total += w * softplus(z);
                    gr.scaled_add(w * sigmoid(z), &set.targets.row(j));
                }
            }
        }
    }
    if !total.is_finite() {
        return Err(Error::Diverged(format!("non-finite loss over {} rows", rows.len())));
    }
    let grads = want_grad.then(|| model.backward(&cache, grad_u));
    Ok((total, grads))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub num_layers: usize,
    /// Sampled negatives per example; 0 means all negatives unless the
    /// target set is larger than `auto_sample_above`.
    pub negative_samples: usize,
    pub auto_sample_above: usize,
    pub auto_sample_count: usize,
    /// Epochs without improvement before stopping.
    pub patience: usize,
    pub min_improvement: f64,
    /// Undo any epoch that raises the full-set loss and halve the
    /// learning rate.
    pub rollback_on_increase: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 0.0,
            epochs: 30,
            batch_size: 16,
            seed: 17,
            num_layers: 2,
            negative_samples: 0,
            auto_sample_above: 5000,
            auto_sample_count: 200,
            patience: 5,
            min_improvement: 1e-6,
            rollback_on_increase: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.num_layers == 0 {
            return Err(Error::invalid("epochs, batch size, and layer count must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) || self.weight_decay < 0.0 {
            return Err(Error::invalid("learning rate must be positive and weight decay non-negative"));
        }
        Ok(())
    }

    fn sample_count(&self, num_targets: usize) -> Option<usize> {
        match self.negative_samples {
            0 if num_targets > self.auto_sample_above => Some(self.auto_sample_count),
            0 => None,
            n => Some(n),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    pub model: MlpModel,
    /// Mean per-example loss over the whole set after each epoch; entry 0
    /// is the loss at initialization.
    pub loss_history: Vec<f64>,
    pub epochs_run: usize,
}

#[derive(Clone)]
struct Adam {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * grad[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * grad[i] * grad[i];
            params[i] -= lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

fn sample_negatives(set: &TrainingSet, rows: &[usize], count: usize, rng: &mut ChaCha8Rng) -> Negatives {
    let n = set.targets.nrows();
    Negatives::Sampled(
        rows.iter()
            .map(|&i| {
                let pos: BTreeSet<usize> = set.examples[i].positives.iter().map(|p| p.0).collect();
                let pool = n - pos.len();
                let k = count.min(pool);
                if k == 0 {
                    return (Vec::new(), 0.0);
                }
                // Draw among negatives only by sampling ranks over the pool.
                let mut ranks = index::sample(rng, pool, k).into_vec();
                ranks.sort_unstable();
                let mut out = Vec::with_capacity(k);
                let (mut rank, mut ri) = (0, 0);
                for j in 0..n {
                    if pos.contains(&j) {
                        continue;
                    }
                    if ri < ranks.len() && ranks[ri] == rank {
                        out.push(j);
                        ri += 1;
                    }
                    rank += 1;
                }
                (out, pool as f64 / k as f64)
            })
            .collect(),
    )
}

/// Mini-batch Adam with per-epoch shuffling and early stopping. Returns
/// the best-loss parameters, rounded to `f32`.
pub fn train(set: &TrainingSet, input_dim: usize, cfg: &TrainConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    if set.examples.is_empty() {
        return Err(Error::invalid("no training examples"));
    }
    let out_dim = set.targets.ncols();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = MlpModel::new(input_dim, out_dim, cfg.num_layers, &mut rng)?;
    let sample = cfg.sample_count(set.targets.nrows());
    let all: Vec<usize> = (0..set.examples.len()).collect();

    // Monitoring loss uses a fixed negative draw when sampling.
    let monitor = match sample {
        Some(k) => sample_negatives(set, &all, k, &mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed)),
        None => Negatives::All,
    };
    let per_example = |m: &MlpModel| loss(m, set, &all, &monitor).map(|l| l / all.len() as f64);

    let mut history = vec![per_example(&model)?];
    let mut best = (history[0], model.clone());
    let mut stale = 0;
    let mut adam = Adam::new(model.num_params());
    let mut lr = cfg.learning_rate;
    let mut order = all.clone();
    let mut epochs_run = 0;

    for epoch in 0..cfg.epochs {
        let snapshot = (model.clone(), adam.clone());
        order.shuffle(&mut rng);
        for (b, rows) in order.chunks(cfg.batch_size).enumerate() {
            let negs = match sample {
                Some(k) => sample_negatives(set, rows, k, &mut rng),
                None => Negatives::All,
            };
            let (_, mut grad) = loss_and_grad(&model, set, rows, &negs).map_err(|e| match e {
                Error::Diverged(msg) => Error::Diverged(format!("{msg} (epoch {epoch}, batch {b}, lr {lr})")),
                other => other,
            })?;
            let mut params = model.params();
            let scale = 1.0 / rows.len() as f64;
            for (g, p) in grad.iter_mut().zip(&params) {
                *g = *g * scale + cfg.weight_decay * p;
            }
            adam.step(&mut params, &grad, lr);
            model.set_params(&params)?;
        }
        epochs_run += 1;
        let mut l = per_example(&model)?;
        let prev = *history.last().expect("non-empty");
        if cfg.rollback_on_increase && l > prev {
            // Undo the epoch and continue from the earlier state with a
            // smaller step.
            tracing::debug!(epoch, loss = l, lr, "loss rose; rolling back epoch");
            (model, adam) = snapshot;
            lr *= 0.5;
            l = prev;
        }
        tracing::debug!(epoch, loss = l, "epoch finished");
        history.push(l);
        if l < best.0 - cfg.min_improvement {
            best = (l, model.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                tracing::info!(epoch, "loss plateaued; stopping early");
                break;
            }
        }
    }
    let mut model = best.1;
    model.quantize();
    Ok(TrainedModel {
        model,
        loss_history: history,
        epochs_run,
    })
}

fn embedding(doc: &Document) -> Result<&[f64]> {
    doc.embedding
        .as_deref()
        .ok_or_else(|| Error::invalid(format!("document {} has no embedding", doc.doc_id)))
}

/// One example per document: positives are its final entities weighted by
/// their soft labels.
pub fn entity_training_set(
    docs: &[Document],
    pairs: &BTreeMap<String, PairSet>,
    labels: &SoftLabelTable,
    entities: &TargetSpace,
) -> Result<TrainingSet> {
    let mut examples = Vec::with_capacity(docs.len());
    for d in docs {
        let mut positives = Vec::new();
        if let Some(set) = pairs.get(&d.doc_id) {
            for e in set.entities() {
                let j = entities
                    .index_of(e)
                    .ok_or_else(|| Error::invalid(format!("{}: entity {e:?} has no embedding", d.doc_id)))?;
                let y = labels
                    .get(&d.doc_id, e)
                    .ok_or_else(|| Error::invalid(format!("{}: no soft label for {e:?}", d.doc_id)))?;
                positives.push((j, y));
            }
        }
        examples.push(Example {
            input: embedding(d)?.to_vec(),
            positives,
        });
    }
    Ok(TrainingSet {
        examples,
        targets: entities.matrix().clone(),
    })
}

/// One example per (document, entity in the document): positives are the
/// aspects paired with that entity, all with label 1.
pub fn aspect_training_set(
    docs: &[Document],
    pairs: &BTreeMap<String, PairSet>,
    entities: &TargetSpace,
    aspects: &TargetSpace,
) -> Result<TrainingSet> {
    let mut examples = Vec::new();
    for d in docs {
        let Some(set) = pairs.get(&d.doc_id) else {
            continue;
        };
        let ed = embedding(d)?;
        let mut by_entity: BTreeMap<&str, BTreeSet<usize>> = BTreeMap::new();
        for p in &set.pairs {
            let j = aspects
                .index_of(&p.aspect)
                .ok_or_else(|| Error::invalid(format!("{}: aspect {:?} has no embedding", d.doc_id, p.aspect)))?;
            by_entity.entry(p.entity.as_str()).or_default().insert(j);
        }
        for (e, asp) in by_entity {
            let ee = entities
                .vector(e)
                .ok_or_else(|| Error::invalid(format!("{}: entity {e:?} has no embedding", d.doc_id)))?;
            examples.push(Example {
                input: ed.iter().chain(ee.iter()).copied().collect(),
                positives: asp.into_iter().map(|j| (j, 1.0)).collect(),
            });
        }
    }
    Ok(TrainingSet {
        examples,
        targets: aspects.matrix().clone(),
    })
}

pub fn train_entity_predictor(
    docs: &[Document],
    pairs: &BTreeMap<String, PairSet>,
    labels: &SoftLabelTable,
    entities: &TargetSpace,
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    let set = entity_training_set(docs, pairs, labels, entities)?;
    train(&set, entities.dim(), cfg)
}

pub fn train_aspect_predictor(
    docs: &[Document],
    pairs: &BTreeMap<String, PairSet>,
    entities: &TargetSpace,
    aspects: &TargetSpace,
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    let set = aspect_training_set(docs, pairs, entities, aspects)?;
    train(&set, 2 * entities.dim(), cfg)
}

/// Indices of the `k` highest scores, ties by name.
pub fn top_k(scores: &[f64], names: &[String], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then_with(|| names[a].cmp(&names[b])));
    idx.truncate(k);
    idx
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PredictorReport {
    pub k: usize,
    pub entity_precision: f64,
    /// Document-level: aspects ranked by their best score over the
    /// document's own entities.
    pub aspect_precision: f64,
    pub documents: usize,
}

fn scored_documents<'a>(
    docs: &'a [Document],
    pairs: &'a BTreeMap<String, PairSet>,
) -> impl Iterator<Item = Result<(&'a [f64], &'a PairSet)>> {
    docs.iter().filter_map(|d| {
        let set = pairs.get(&d.doc_id).filter(|s| !s.is_empty())?;
        Some(embedding(d).map(|e| (e, set)))
    })
}

fn mean_or_err(total: f64, n: usize) -> Result<(f64, usize)> {
    if n == 0 {
        return Err(Error::invalid("no documents with pairs to evaluate"));
    }
    Ok((total / n as f64, n))
}

/// Mean entity P@k against the documents' final pairs.
pub fn entity_precision_at_k(
    docs: &[Document],
    pairs: &BTreeMap<String, PairSet>,
    model: &MlpModel,
    entities: &TargetSpace,
    k: usize,
) -> Result<(f64, usize)> {
    let (mut total, mut n) = (0.0, 0);
    for item in scored_documents(docs, pairs) {
        let (ed, set) = item?;
        let gold: BTreeSet<&str> = set.entities().into_iter().collect();
        let scores = score_all(model, ed, entities)?;
        let top: Vec<&str> = top_k(&scores, entities.names(), k).into_iter().map(|i| entities.names()[i].as_str()).collect();
        total += crate::eval::precision_at_k(&top, &gold, k);
        n += 1;
    }
    mean_or_err(total, n)
}

/// Document-level aspect P@k: aspects ranked by their best score over the
/// document's own entities.
pub fn aspect_precision_at_k(
    docs: &[Document],
    pairs: &BTreeMap<String, PairSet>,
    model: &MlpModel,
    entities: &TargetSpace,
    aspects: &TargetSpace,
    k: usize,
) -> Result<(f64, usize)> {
    let (mut total, mut n) = (0.0, 0);
    for item in scored_documents(docs, pairs) {
        let (ed, set) = item?;
        let gold: BTreeSet<&str> = set.aspects().into_iter().collect();
        let mut best = vec![f64::NEG_INFINITY; aspects.len()];
        for e in set.entities() {
            let ee = entities.vector(e).ok_or_else(|| Error::invalid(format!("entity {e:?} has no embedding")))?;
            let s = aspect_scores(model, ed, ee.as_slice().expect("row is contiguous"), aspects)?;
            best.iter_mut().zip(s).for_each(|(b, v)| *b = b.max(v));
        }
        let top: Vec<&str> = top_k(&best, aspects.names(), k).into_iter().map(|i| aspects.names()[i].as_str()).collect();
        total += crate::eval::precision_at_k(&top, &gold, k);
        n += 1;
    }
    mean_or_err(total, n)
}

/// Mean P@k of both predictors against the documents' final pairs.
pub fn evaluate_predictors(
    docs: &[Document],
    pairs: &BTreeMap<String, PairSet>,
    entity_model: &MlpModel,
    aspect_model: &MlpModel,
    entities: &TargetSpace,
    aspects: &TargetSpace,
    k: usize,
) -> Result<PredictorReport> {
    let (entity_precision, documents) = entity_precision_at_k(docs, pairs, entity_model, entities, k)?;
    let (aspect_precision, _) = aspect_precision_at_k(docs, pairs, aspect_model, entities, aspects, k)?;
    Ok(PredictorReport {
        k,
        entity_precision,
        aspect_precision,
        documents,
    })
}

/// The learning-rate and weight-decay grid searched by default.
pub fn default_grid() -> Vec<(f64, f64)> {
    let mut grid = Vec::new();
    for lr in [1e-5, 3e-5, 1e-4] {
        for wd in [0.0, 1e-6] {
            grid.push((lr, wd));
        }
    }
    grid
}

/// Trains once per (lr, weight decay) and keeps the configuration whose
/// `score` is highest; ties keep the earlier grid point.
pub fn grid_search(
    base: &TrainConfig,
    grid: &[(f64, f64)],
    mut score: impl FnMut(&TrainConfig) -> Result<f64>,
) -> Result<(TrainConfig, f64)> {
    let mut best: Option<(TrainConfig, f64)> = None;
    for &(lr, wd) in grid {
        let cfg = TrainConfig {
            learning_rate: lr,
            weight_decay: wd,
            ..base.clone()
        };
        let s = score(&cfg)?;
        tracing::info!(lr, wd, score = s, "grid point");
        if best.as_ref().is_none_or(|b| s > b.1) {
            best = Some((cfg, s));
        }
    }
    best.ok_or_else(|| Error::invalid("empty hyperparameter grid"))
}
