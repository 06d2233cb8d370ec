//! Softmax averaging over the instances of one (subject, side).

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::dataset::{Label, Side};
use crate::error::{Error, Result};
use crate::model::{softmax2, InstanceSource, ResNet3d};
use crate::sampling::Instance;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleResult {
    pub subject_id: String,
    pub side: Side,
    /// `[normal, anomaly]`.
    pub probabilities: [f64; 2],
    pub prediction: Label,
    pub n: usize,
}

/// Anything that maps a batch of 64³ instances to class probabilities.
pub trait Scorer {
    fn probabilities(&self, batch: &[&[f32]]) -> Result<Vec<[f64; 2]>>;
}

impl Scorer for ResNet3d<f32> {
    fn probabilities(&self, batch: &[&[f32]]) -> Result<Vec<[f64; 2]>> {
        let x = self.batch_from(batch)?;
        Ok(self.forward(&x)?.into_iter().map(softmax2).collect())
    }
}

/// Arithmetic mean of probability vectors, accumulated as a running mean so
/// that one vector, or several equal ones, come back unchanged.
pub fn mean_probabilities(probs: &[[f64; 2]]) -> [f64; 2] {
    let mut m = probs[0];
    for (k, p) in probs.iter().enumerate().skip(1) {
        let k = (k + 1) as f64;
        m[0] += (p[0] - m[0]) / k;
        m[1] += (p[1] - m[1]) / k;
    }
    m
}

pub fn hard_label(probabilities: [f64; 2], threshold: f64) -> Label {
    Label::from_positive(probabilities[1] >= threshold)
}

pub fn ensemble_probabilities(
    subject_id: &str,
    side: Side,
    probs: &[[f64; 2]],
    threshold: f64,
) -> Result<EnsembleResult> {
    if probs.is_empty() {
        return Err(Error::InvalidArgument("ensemble needs at least one instance".into()));
    }
    let p = mean_probabilities(probs);
    Ok(EnsembleResult {
        subject_id: subject_id.to_string(),
        side,
        probabilities: p,
        prediction: hard_label(p, threshold),
        n: probs.len(),
    })
}

pub fn ensemble_predict(scorer: &dyn Scorer, instances: &[Instance], threshold: f64) -> Result<EnsembleResult> {
    let first = instances
        .first()
        .ok_or_else(|| Error::InvalidArgument("ensemble needs at least one instance".into()))?;
    if let Some(odd) = instances
        .iter()
        .find(|i| i.subject_id != first.subject_id || i.side != first.side)
    {
        return Err(Error::MixedEnsembleGroup(format!(
            "{}/{} and {}/{}",
            first.subject_id, first.side, odd.subject_id, odd.side
        )));
    }
    let refs: Vec<&[f32]> = instances.iter().map(|i| i.data.data()).collect();
    let probs = scorer.probabilities(&refs)?;
    ensemble_probabilities(&first.subject_id, first.side, &probs, threshold)
}

/// Per-instance probabilities for every item of `source`, in order.
pub fn score_source(scorer: &dyn Scorer, source: &dyn InstanceSource, batch_size: usize) -> Result<Vec<[f64; 2]>> {
    let mut out = Vec::with_capacity(source.len());
    let idx: Vec<usize> = (0..source.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let data = chunk.iter().map(|&i| source.load(i)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&[f32]> = data.iter().map(|d| d.as_ref()).collect();
        out.extend(scorer.probabilities(&refs)?);
    }
    Ok(out)
}

/// One scored instance with its ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredInstance {
    pub subject_id: String,
    pub side: Side,
    pub label: Label,
    pub probabilities: [f64; 2],
}

/// Groups scored instances by (subject, side), in order of first
/// appearance, and ensembles each group.
pub fn group_ensembles(scored: &[ScoredInstance], threshold: f64) -> Result<Vec<(EnsembleResult, Label)>> {
    let mut order: Vec<(String, Side)> = Vec::new();
    let mut groups: HashMap<(String, Side), (Vec<[f64; 2]>, Label)> = HashMap::new();
    for s in scored {
        let key = (s.subject_id.clone(), s.side);
        let entry = groups.entry(key.clone()).or_insert_with(|| {
            order.push(key);
            (Vec::new(), s.label)
        });
        if entry.1 != s.label {
            return Err(Error::InvalidArgument(format!(
                "instances of {}/{} carry different labels",
                s.subject_id, s.side
            )));
        }
        entry.0.push(s.probabilities);
    }
    order
        .into_iter()
        .map(|key| {
            let (probs, label) = &groups[&key];
            Ok((ensemble_probabilities(&key.0, key.1, probs, threshold)?, *label))
        })
        .collect()
}
