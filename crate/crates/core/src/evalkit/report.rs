//! The full metric suite over a test split.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::records::Records;
use super::recall::{
    dataset_recall, longtail_groups_with, mean_recall_at_k, sort_candidates, train_triple_set, zero_shot_filter,
    Candidate, Constraint, GroupThresholds, PredicateGroups, RelImage, TripleMatchRule,
};
use super::role::{map_role, role_counts, RoleMap, RoleRule};
use crate::datagen::{HoiTarget, Scene};
use crate::error::Result;

pub const RECALL_KS: [usize; 3] = [20, 50, 100];
pub const ZERO_SHOT_KS: [usize; 2] = [50, 100];

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalSettings {
    pub iou_threshold: f64,
    pub groups: GroupThresholds,
    pub role: RoleRule,
}

impl EvalSettings {
    pub fn standard() -> Self {
        Self { iou_threshold: 0.5, groups: GroupThresholds::default(), role: RoleRule::default() }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ModeMetrics {
    pub recall: BTreeMap<usize, f64>,
    pub mean_recall: BTreeMap<usize, f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricsReport {
    pub images: usize,
    pub constrained: ModeMetrics,
    pub unconstrained: ModeMetrics,
    pub zero_shot_recall: BTreeMap<usize, f64>,
    pub groups: PredicateGroups,
    /// Group name to K to mean recall; `None` when the group has no test ground truth.
    pub group_mean_recall: BTreeMap<String, BTreeMap<usize, Option<f64>>>,
    pub map_role: RoleMap,
}

/// Best predicate per query from an unconstrained candidate list, in rank
/// order. Ties keep the lowest predicate.
pub fn constrain(candidates: &[Candidate]) -> Vec<Candidate> {
    let mut best: BTreeMap<usize, Candidate> = BTreeMap::new();
    for c in candidates {
        match best.get(&c.query) {
            Some(b) if b.rel_score > c.rel_score || (b.rel_score == c.rel_score && b.predicate < c.predicate) => {}
            _ => {
                best.insert(c.query, *c);
            }
        }
    }
    let mut out: Vec<Candidate> = best.into_values().collect();
    sort_candidates(&mut out);
    out
}

/// Scores predictions against `test`. Relation records must be the
/// unconstrained candidate lists; the constrained lists are derived from
/// them. Frequency groups, zero-shot triples and rare roles come from
/// `train`.
pub fn evaluate(records: &Records, test: &[Scene], train: &[Scene], settings: &EvalSettings) -> Result<MetricsReport> {
    let empty = Vec::new();
    let images = |constrained: bool| -> Vec<RelImage> {
        test.iter()
            .map(|s| {
                let cands = records.rel.get(&s.index).unwrap_or(&empty);
                RelImage {
                    image: s.index,
                    candidates: if constrained { constrain(cands) } else { cands.clone() },
                    gts: s.rel_targets(),
                }
            })
            .collect()
    };
    let constrained_images = images(true);
    let unconstrained_images = images(false);
    let mut report = MetricsReport { images: test.len(), ..Default::default() };
    for (mode, imgs, out) in [
        (Constraint::Constrained, &constrained_images, &mut report.constrained),
        (Constraint::Unconstrained, &unconstrained_images, &mut report.unconstrained),
    ] {
        let rule = TripleMatchRule::new(settings.iou_threshold, mode)?;
        for k in RECALL_KS {
            out.recall.insert(k, dataset_recall(imgs, k, &rule)?);
            out.mean_recall.insert(k, mean_recall_at_k(imgs, k, &rule)?.value);
        }
    }

    let rule = TripleMatchRule::new(settings.iou_threshold, Constraint::Constrained)?;
    let seen = train_triple_set(train);
    let zero_shot: Vec<RelImage> = constrained_images
        .iter()
        .map(|im| RelImage { gts: zero_shot_filter(&im.gts, &seen), ..im.clone() })
        .collect();
    for k in ZERO_SHOT_KS {
        report.zero_shot_recall.insert(k, dataset_recall(&zero_shot, k, &rule)?);
    }

    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for s in train.iter().chain(test) {
        for r in &s.relations {
            counts.entry(r.predicate).or_default();
        }
    }
    for s in train {
        for r in &s.relations {
            *counts.entry(r.predicate).or_default() += 1;
        }
    }
    report.groups = longtail_groups_with(&counts, settings.groups);
    let mut per_k = BTreeMap::new();
    for k in ZERO_SHOT_KS {
        per_k.insert(k, mean_recall_at_k(&constrained_images, k, &rule)?);
    }
    for (name, set) in
        [("head", &report.groups.head), ("body", &report.groups.body), ("tail", &report.groups.tail)]
    {
        let entry: BTreeMap<usize, Option<f64>> = per_k.iter().map(|(&k, mr)| (k, mr.over(set))).collect();
        report.group_mean_recall.insert(name.to_string(), entry);
    }

    let gts: BTreeMap<u64, Vec<HoiTarget>> = test.iter().map(|s| (s.index, s.hoi_targets())).collect();
    let test_ids: BTreeSet<u64> = gts.keys().copied().collect();
    let dets: Vec<_> = records.hoi.iter().filter(|d| test_ids.contains(&d.image)).copied().collect();
    report.map_role = map_role(&dets, &gts, &settings.role, &role_counts(train, &settings.role));
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_split, GenConfig};
    use crate::evalkit::role::HoiDetection;

    /// Records that reproduce every ground truth exactly with confidence 1.
    fn oracle(scenes: &[Scene]) -> Records {
        let mut r = Records::default();
        for s in scenes {
            let cands = s
                .rel_targets()
                .iter()
                .enumerate()
                .map(|(q, t)| Candidate {
                    query: q,
                    subj_box: t.subj_box,
                    subj_label: t.subj_label,
                    subj_score: 1.0,
                    predicate: t.predicate,
                    rel_score: 1.0,
                    obj_box: t.obj_box,
                    obj_label: t.obj_label,
                    obj_score: 1.0,
                    score: 1.0,
                })
                .collect();
            r.rel.insert(s.index, cands);
            for (q, t) in s.hoi_targets().iter().enumerate() {
                r.hoi.push(HoiDetection {
                    image: s.index,
                    query: q,
                    human_box: t.human_box,
                    human_score: 1.0,
                    action: t.action,
                    act_score: 1.0,
                    obj_box: t.obj_box,
                    obj_label: t.obj_label,
                    obj_score: 1.0,
                    score: 1.0,
                });
            }
        }
        r
    }

    fn data() -> (Vec<Scene>, Vec<Scene>) {
        let g = GenConfig { seed: 11, ..GenConfig::default() };
        (generate_split(&g, 0, 30, "train").unwrap(), generate_split(&g, 30, 15, "test").unwrap())
    }

    #[test]
    fn oracle_predictions_score_perfectly() {
        let (train, test) = data();
        let m = evaluate(&oracle(&test), &test, &train, &EvalSettings::standard()).unwrap();
        for k in RECALL_KS {
            assert_eq!(m.constrained.recall[&k], 1.0);
            assert_eq!(m.unconstrained.recall[&k], 1.0);
            assert_eq!(m.constrained.mean_recall[&k], 1.0);
        }
        assert_eq!(m.map_role.map, 1.0);
    }

    #[test]
    fn empty_predictions_score_zero() {
        let (train, test) = data();
        let m = evaluate(&Records::default(), &test, &train, &EvalSettings::standard()).unwrap();
        for k in RECALL_KS {
            assert_eq!(m.constrained.recall[&k], 0.0);
            assert_eq!(m.unconstrained.mean_recall[&k], 0.0);
        }
        assert!(m.zero_shot_recall.values().all(|&v| v == 0.0));
        assert_eq!(m.map_role.map, 0.0);
    }

    #[test]
    fn constrain_keeps_best_predicate_per_query() {
        let base = oracle(&data().1).rel.into_values().find(|c| !c.is_empty()).unwrap()[0];
        let c = vec![
            Candidate { predicate: 0, rel_score: 0.2, score: 0.2, ..base },
            Candidate { predicate: 1, rel_score: 0.5, score: 0.5, ..base },
            Candidate { predicate: 2, rel_score: 0.5, score: 0.5, ..base },
        ];
        let k = constrain(&c);
        assert_eq!(k.len(), 1);
        assert_eq!(k[0].predicate, 1);
    }
}
