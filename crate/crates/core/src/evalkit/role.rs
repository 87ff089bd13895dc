//! Role mean average precision for interaction detection.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::recall::argmax;
use crate::datagen::{HoiTarget, Scene};
use crate::geometry::{box_iou, BBox};
use crate::hoinet::HoiTuple;

/// `(action, object class)`; the object class is `None` for actions declared
/// object-free.
pub type RoleKey = (usize, Option<usize>);

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Interpolation {
    #[default]
    AllPoint,
    ElevenPoint,
}

/// Handling of object-free actions.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    /// The predicted object box must be empty (zero area).
    #[default]
    One,
    /// The predicted object box is ignored.
    Two,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoleRule {
    pub iou_threshold: f64,
    pub interpolation: Interpolation,
    /// Actions without an object; empty for datasets where every action has one.
    pub no_object_actions: BTreeSet<usize>,
    pub scenario: Scenario,
    /// Roles with fewer training instances than this are rare.
    pub rare_below: usize,
}

impl Default for RoleRule {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            interpolation: Interpolation::AllPoint,
            no_object_actions: BTreeSet::new(),
            scenario: Scenario::One,
            rare_below: 10,
        }
    }
}

impl RoleRule {
    pub fn role(&self, action: usize, obj_label: usize) -> RoleKey {
        if self.no_object_actions.contains(&action) {
            (action, None)
        } else {
            (action, Some(obj_label))
        }
    }
}

/// One scored interaction hypothesis.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HoiDetection {
    pub image: u64,
    pub query: usize,
    pub human_box: BBox,
    pub human_score: f64,
    pub action: usize,
    pub act_score: f64,
    pub obj_box: BBox,
    pub obj_label: usize,
    pub obj_score: f64,
    /// `human_score * act_score * obj_score`.
    pub score: f64,
}

/// Every non-background action of every query, with the best foreground
/// object class.
pub fn hoi_detections(image: u64, preds: &[HoiTuple]) -> Vec<HoiDetection> {
    let mut out = Vec::new();
    for (query, p) in preds.iter().enumerate() {
        let (obj_label, obj_score) = argmax(&p.obj_scores, p.obj_scores.len() - 1);
        for action in 0..p.act_scores.len() - 1 {
            let act_score = p.act_scores[action];
            out.push(HoiDetection {
                image,
                query,
                human_box: p.human_box,
                human_score: p.human_score,
                action,
                act_score,
                obj_box: p.obj_box,
                obj_label,
                obj_score,
                score: p.human_score * act_score * obj_score,
            });
        }
    }
    out
}

/// Sorts by score descending, then image, query and action ascending.
pub fn sort_detections(d: &mut [HoiDetection]) {
    d.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.image.cmp(&b.image))
            .then(a.query.cmp(&b.query))
            .then(a.action.cmp(&b.action))
    });
}

/// Average precision from per-detection true-positive flags in rank order.
pub fn average_precision(tp: &[bool], positives: usize, interpolation: Interpolation) -> f64 {
    if positives == 0 {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(tp.len());
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (i, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        recall.push(hits as f64 / positives as f64);
        precision.push(hits as f64 / (i + 1) as f64);
    }
    match interpolation {
        Interpolation::AllPoint => {
            let mut envelope = precision.clone();
            for i in (0..envelope.len().saturating_sub(1)).rev() {
                envelope[i] = envelope[i].max(envelope[i + 1]);
            }
            let mut ap = 0.0;
            let mut prev = 0.0;
            for i in 0..recall.len() {
                if recall[i] > prev {
                    ap += (recall[i] - prev) * envelope[i];
                    prev = recall[i];
                }
            }
            ap
        }
        Interpolation::ElevenPoint => {
            (0..=10)
                .map(|t| {
                    let t = t as f64 / 10.0;
                    recall
                        .iter()
                        .zip(&precision)
                        .filter(|(r, _)| **r >= t)
                        .map(|(_, p)| *p)
                        .fold(0.0, f64::max)
                })
                .sum::<f64>()
                / 11.0
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct RoleMap {
    /// Mean AP over roles with ground truth (Full).
    pub map: f64,
    pub rare: Option<f64>,
    pub non_rare: Option<f64>,
    pub per_role: BTreeMap<String, f64>,
}

pub fn role_name(role: &RoleKey) -> String {
    match role.1 {
        Some(o) => format!("{}:{o}", role.0),
        None => format!("{}:-", role.0),
    }
}

/// Training instance count of every role.
pub fn role_counts(scenes: &[Scene], rule: &RoleRule) -> BTreeMap<RoleKey, usize> {
    let mut counts = BTreeMap::new();
    for t in scenes.iter().flat_map(|s| s.hoi_targets()) {
        *counts.entry(rule.role(t.action, t.obj_label)).or_default() += 1;
    }
    counts
}

fn is_match(d: &HoiDetection, g: &HoiTarget, rule: &RoleRule) -> Option<f64> {
    let h = box_iou(&d.human_box, &g.human_box);
    let o = if rule.no_object_actions.contains(&g.action) {
        match rule.scenario {
            Scenario::One if d.obj_box.w * d.obj_box.h > 0.0 => return None,
            _ => 1.0,
        }
    } else {
        box_iou(&d.obj_box, &g.obj_box)
    };
    let q = h.min(o);
    (q >= rule.iou_threshold).then_some(q)
}

/// Per-role AP over all images, each detection matched greedily in rank
/// order to the unused ground truth of its role and image with the highest
/// `min(human IoU, object IoU)` (lowest index on ties).
pub fn map_role(
    detections: &[HoiDetection],
    gts: &BTreeMap<u64, Vec<HoiTarget>>,
    rule: &RoleRule,
    train_counts: &BTreeMap<RoleKey, usize>,
) -> RoleMap {
    let mut positives: BTreeMap<RoleKey, usize> = BTreeMap::new();
    for t in gts.values().flatten() {
        *positives.entry(rule.role(t.action, t.obj_label)).or_default() += 1;
    }
    let mut by_role: BTreeMap<RoleKey, Vec<HoiDetection>> = BTreeMap::new();
    for d in detections {
        let role = rule.role(d.action, d.obj_label);
        if positives.contains_key(&role) {
            by_role.entry(role).or_default().push(*d);
        }
    }
    let mut per_role = BTreeMap::new();
    let (mut full, mut rare, mut non_rare) = (Vec::new(), Vec::new(), Vec::new());
    for (&role, &count) in &positives {
        let mut dets = by_role.remove(&role).unwrap_or_default();
        sort_detections(&mut dets);
        let mut used: BTreeMap<u64, Vec<bool>> = BTreeMap::new();
        let tp: Vec<bool> = dets
            .iter()
            .map(|d| {
                let Some(image_gts) = gts.get(&d.image) else { return false };
                let used = used.entry(d.image).or_insert_with(|| vec![false; image_gts.len()]);
                let mut best: Option<(usize, f64)> = None;
                for (i, g) in image_gts.iter().enumerate() {
                    if used[i] || rule.role(g.action, g.obj_label) != role || g.action != d.action {
                        continue;
                    }
                    if let Some(q) = is_match(d, g, rule) {
                        if best.map_or(true, |(_, b)| q > b) {
                            best = Some((i, q));
                        }
                    }
                }
                match best {
                    Some((i, _)) => {
                        used[i] = true;
                        true
                    }
                    None => false,
                }
            })
            .collect();
        let ap = average_precision(&tp, count, rule.interpolation);
        per_role.insert(role_name(&role), ap);
        full.push(ap);
        if train_counts.get(&role).copied().unwrap_or(0) < rule.rare_below {
            rare.push(ap);
        } else {
            non_rare.push(ap);
        }
    }
    let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
    RoleMap { map: mean(&full).unwrap_or(0.0), rare: mean(&rare), non_rare: mean(&non_rare), per_role }
}
