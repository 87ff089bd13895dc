//! Triple ranking, Recall@K, mean Recall@K, zero-shot filtering and
//! frequency groups.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::datagen::{RelTarget, Scene};
use crate::error::{Error, Result};
use crate::geometry::{box_iou, BBox};
use crate::relnet::RelTuple;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Constraint {
    /// One predicate per query.
    #[default]
    Constrained,
    /// Every predicate of every query.
    Unconstrained,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TripleMatchRule {
    pub iou_threshold: f64,
    pub constraint: Constraint,
}

impl Default for TripleMatchRule {
    fn default() -> Self {
        Self { iou_threshold: 0.5, constraint: Constraint::Constrained }
    }
}

impl TripleMatchRule {
    pub fn new(iou_threshold: f64, constraint: Constraint) -> Result<Self> {
        if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
            return Err(Error::Config(format!("iou threshold {iou_threshold} outside (0, 1]")));
        }
        Ok(Self { iou_threshold, constraint })
    }
}

/// One ranked `(subject, predicate, object)` hypothesis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Candidate {
    pub query: usize,
    pub subj_box: BBox,
    pub subj_label: usize,
    pub subj_score: f64,
    pub predicate: usize,
    pub rel_score: f64,
    pub obj_box: BBox,
    pub obj_label: usize,
    pub obj_score: f64,
    /// `subj_score * rel_score * obj_score`.
    pub score: f64,
}

/// Index and value of the largest entry among the first `n`; lowest index
/// wins ties.
pub(crate) fn argmax(scores: &[f64], n: usize) -> (usize, f64) {
    let mut best = (0, scores[0]);
    for (i, &s) in scores.iter().enumerate().take(n).skip(1) {
        if s > best.1 {
            best = (i, s);
        }
    }
    best
}

/// Sorts by score descending, then query and predicate ascending.
pub fn sort_candidates(c: &mut [Candidate]) {
    c.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.query.cmp(&b.query)).then(a.predicate.cmp(&b.predicate)));
}

/// Ranked candidate triples. Labels are the best foreground class; the last
/// entry of each score vector is the background class and never proposed.
pub fn rank_triples(preds: &[RelTuple], mode: Constraint) -> Vec<Candidate> {
    let mut out = Vec::new();
    for (query, p) in preds.iter().enumerate() {
        let (subj_label, subj_score) = argmax(&p.subj_scores, p.subj_scores.len() - 1);
        let (obj_label, obj_score) = argmax(&p.obj_scores, p.obj_scores.len() - 1);
        let relations = p.rel_scores.len() - 1;
        let predicates: Vec<usize> = match mode {
            Constraint::Constrained => vec![argmax(&p.rel_scores, relations).0],
            Constraint::Unconstrained => (0..relations).collect(),
        };
        for predicate in predicates {
            let rel_score = p.rel_scores[predicate];
            out.push(Candidate {
                query,
                subj_box: p.subj_box,
                subj_label,
                subj_score,
                predicate,
                rel_score,
                obj_box: p.obj_box,
                obj_label,
                obj_score,
                score: subj_score * rel_score * obj_score,
            });
        }
    }
    sort_candidates(&mut out);
    out
}

fn triple_matches(c: &Candidate, g: &RelTarget, threshold: f64) -> bool {
    c.subj_label == g.subj_label
        && c.obj_label == g.obj_label
        && c.predicate == g.predicate
        && box_iou(&c.subj_box, &g.subj_box) >= threshold
        && box_iou(&c.obj_box, &g.obj_box) >= threshold
}

/// Hit flag per ground truth. Candidates are visited in rank order and each
/// consumes the first unmatched ground truth it satisfies.
pub fn recall_hits(ranked: &[Candidate], gts: &[RelTarget], k: usize, rule: &TripleMatchRule) -> Result<Vec<bool>> {
    if k == 0 {
        return Err(Error::InvalidK);
    }
    let mut hit = vec![false; gts.len()];
    for c in ranked.iter().take(k) {
        if let Some(g) = (0..gts.len()).find(|&g| !hit[g] && triple_matches(c, &gts[g], rule.iou_threshold)) {
            hit[g] = true;
        }
    }
    Ok(hit)
}

/// Fraction of ground truths recovered in the top `k`; `None` without ground
/// truth.
pub fn recall_at_k(ranked: &[Candidate], gts: &[RelTarget], k: usize, rule: &TripleMatchRule) -> Result<Option<f64>> {
    let hit = recall_hits(ranked, gts, k, rule)?;
    if gts.is_empty() {
        return Ok(None);
    }
    Ok(Some(hit.iter().filter(|&&h| h).count() as f64 / gts.len() as f64))
}

/// Ranked candidates and ground truth for one image.
#[derive(Clone, Debug, PartialEq)]
pub struct RelImage {
    pub image: u64,
    pub candidates: Vec<Candidate>,
    pub gts: Vec<RelTarget>,
}

/// Recall averaged over images that have ground truth; 0 when none do.
pub fn dataset_recall(images: &[RelImage], k: usize, rule: &TripleMatchRule) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for im in images {
        if let Some(r) = recall_at_k(&im.candidates, &im.gts, k, rule)? {
            sum += r;
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { sum / n as f64 })
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MeanRecall {
    pub value: f64,
    /// Recall of each predicate class present in the ground truth.
    pub per_class: BTreeMap<usize, f64>,
}

impl MeanRecall {
    /// Mean over the given classes that have ground truth.
    pub fn over(&self, classes: &BTreeSet<usize>) -> Option<f64> {
        let v: Vec<f64> = classes.iter().filter_map(|c| self.per_class.get(c).copied()).collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }
}

/// Per-predicate recall (averaged over images containing that predicate),
/// then averaged over predicates with at least one ground truth.
pub fn mean_recall_at_k(images: &[RelImage], k: usize, rule: &TripleMatchRule) -> Result<MeanRecall> {
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for im in images {
        let hit = recall_hits(&im.candidates, &im.gts, k, rule)?;
        let mut per: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
        for (g, h) in im.gts.iter().zip(&hit) {
            let e = per.entry(g.predicate).or_default();
            e.0 += usize::from(*h);
            e.1 += 1;
        }
        for (class, (hits, total)) in per {
            let e = acc.entry(class).or_default();
            e.0 += hits as f64 / total as f64;
            e.1 += 1;
        }
    }
    let per_class: BTreeMap<usize, f64> = acc.into_iter().map(|(c, (s, n))| (c, s / n as f64)).collect();
    let value = if per_class.is_empty() { 0.0 } else { per_class.values().sum::<f64>() / per_class.len() as f64 };
    Ok(MeanRecall { value, per_class })
}

pub type TripleKey = (usize, usize, usize);

/// Label combinations `(subject class, predicate, object class)` in scenes.
pub fn train_triple_set(scenes: &[Scene]) -> HashSet<TripleKey> {
    scenes
        .iter()
        .flat_map(|s| s.rel_targets())
        .map(|t| (t.subj_label, t.predicate, t.obj_label))
        .collect()
}

/// Ground truths whose label combination never occurs in training.
pub fn zero_shot_filter(gts: &[RelTarget], seen: &HashSet<TripleKey>) -> Vec<RelTarget> {
    gts.iter().filter(|t| !seen.contains(&(t.subj_label, t.predicate, t.obj_label))).copied().collect()
}

/// Count thresholds: above `head_above` is head, below `tail_below` is tail,
/// everything in between (both ends included) is body.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GroupThresholds {
    pub head_above: usize,
    pub tail_below: usize,
}

impl Default for GroupThresholds {
    fn default() -> Self {
        Self { head_above: 10_000, tail_below: 500 }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize)]
pub struct PredicateGroups {
    pub head: BTreeSet<usize>,
    pub body: BTreeSet<usize>,
    pub tail: BTreeSet<usize>,
}

pub fn longtail_groups(train_counts: &BTreeMap<usize, usize>) -> PredicateGroups {
    longtail_groups_with(train_counts, GroupThresholds::default())
}

pub fn longtail_groups_with(train_counts: &BTreeMap<usize, usize>, t: GroupThresholds) -> PredicateGroups {
    let mut g = PredicateGroups::default();
    for (&class, &count) in train_counts {
        if count > t.head_above {
            g.head.insert(class);
        } else if count < t.tail_below {
            g.tail.insert(class);
        } else {
            g.body.insert(class);
        }
    }
    g
}
