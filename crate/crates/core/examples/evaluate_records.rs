//! Scores prediction records: a perfect set, a degraded copy and the
//! round trip through the text format.

use scenehoi::datagen::{generate_split, GenConfig};
use scenehoi::evalkit::{evaluate, parse_records, records_to_string, Candidate, EvalSettings, HoiDetection, Records};

fn main() -> scenehoi::Result<()> {
    let cfg = GenConfig { seed: 5, human_fraction: 0.6, ..GenConfig::default() };
    let train = generate_split(&cfg, 0, 100, "train")?;
    let test = generate_split(&cfg, 100, 30, "test")?;

    let mut perfect = Records::default();
    for s in &test {
        let rel = s
            .rel_targets()
            .iter()
            .enumerate()
            .map(|(query, t)| Candidate {
                query,
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
        perfect.rel.insert(s.index, rel);
        perfect.hoi.extend(s.hoi_targets().iter().enumerate().map(|(query, t)| HoiDetection {
            image: s.index,
            query,
            human_box: t.human_box,
            human_score: 1.0,
            action: t.action,
            act_score: 1.0,
            obj_box: t.obj_box,
            obj_label: t.obj_label,
            obj_score: 1.0,
            score: 1.0,
        }));
    }

    // wrong predicate on every other relation, every third interaction dropped
    let mut degraded = perfect.clone();
    for cands in degraded.rel.values_mut() {
        for c in cands.iter_mut().step_by(2) {
            c.predicate = (c.predicate + 1) % cfg.relation_classes;
        }
    }
    degraded.hoi = degraded.hoi.into_iter().enumerate().filter(|(i, _)| i % 3 != 0).map(|(_, d)| d).collect();

    let settings = EvalSettings::standard();
    for (name, recs) in [("perfect", &perfect), ("degraded", &degraded)] {
        let m = evaluate(recs, &test, &train, &settings)?;
        println!(
            "{name:>8}: R@20 {:.3}  mR@20 {:.3}  mAP_role {:.3}  groups head/body/tail {}/{}/{}",
            m.constrained.recall[&20],
            m.constrained.mean_recall[&20],
            m.map_role.map,
            m.groups.head.len(),
            m.groups.body.len(),
            m.groups.tail.len()
        );
    }

    let text = records_to_string(&degraded);
    assert_eq!(parse_records(&text)?, degraded);
    println!("{} record lines, first: {}", text.lines().count(), text.lines().nth(1).unwrap_or(""));
    Ok(())
}
