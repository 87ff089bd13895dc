//! Generates a small synthetic split, prints its statistics and writes the
//! annotation file plus one rendered image to a temporary directory.

use scenehoi::datagen::{generate_split, load_annotations, statistics, write_annotations, GenConfig, ImageStorage};

fn main() -> scenehoi::Result<()> {
    let cfg = GenConfig { seed: 7, human_fraction: 0.6, ..GenConfig::default() };
    let scenes = generate_split(&cfg, 0, 200, "train")?;
    let stats = statistics(&scenes);
    let total = |m: &std::collections::BTreeMap<usize, usize>| m.values().sum::<usize>();
    println!(
        "{} scenes, {} objects, {} relations, {} interactions",
        stats.scenes,
        total(&stats.objects),
        total(&stats.predicates),
        total(&stats.actions)
    );
    println!("predicate counts: {:?}", stats.predicates);

    let first = &scenes[0];
    println!("scene 0: {} objects", first.objects.len());
    for r in &first.relations {
        let (s, o) = (&first.objects[r.subject], &first.objects[r.object]);
        println!("  class {} --{}--> class {} (subject box {:?})", s.label, r.predicate, o.label, s.bbox.to_array());
    }

    let dir = std::env::temp_dir().join("scenehoi-example");
    std::fs::create_dir_all(&dir).map_err(|e| scenehoi::Error::io(&dir, e))?;
    let path = dir.join("train.jsonl");
    write_annotations(&path, &scenes, &cfg.header(), ImageStorage::Render)?;
    let (_, back) = load_annotations(&path)?;
    assert_eq!(back, scenes);
    first.image.save(&dir.join("scene0.png"))?;
    println!("wrote {} and scene0.png", path.display());
    Ok(())
}
