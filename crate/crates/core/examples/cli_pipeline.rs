//! The gen, train, eval and predict commands driven from a run
//! configuration, all inside a temporary directory.

use scenehoi::cli::{cmd_eval, cmd_gen, cmd_predict, cmd_train, RunConfig};
use scenehoi::datagen::load_annotations;

fn main() -> scenehoi::Result<()> {
    let dir = std::env::temp_dir().join("scenehoi-cli-example");
    let text = format!(
        r#"
seed = 3
output_dir = "{out}"

[data]
train = "{out}/data/train.jsonl"
val = "{out}/data/val.jsonl"
test = "{out}/data/test.jsonl"
splits = [8, 4, 6]

[gen]
human_fraction = 0.6

[model]
stem_channels = 8
embed_width = 8
relation_queries = 6
hoi_queries = 6
encoder_layers = 1
relation_decoder_layers = 1
hoi_decoder_layers = 1

[train]
stage1_epochs = 2
stage2_epochs = 1
learning_rate = 0.002
"#,
        out = dir.display()
    );
    let mut cfg = RunConfig::from_toml(&text)?;
    cfg.resolve()?;

    let gen = cmd_gen(&cfg)?;
    for (path, digest) in &gen.files {
        println!("wrote {} ({})", path.display(), &digest[..12]);
    }
    let train = cmd_train(&cfg, false)?;
    println!("trained {} steps, reports {:?}", train.steps, train.reports);

    let report = cmd_eval(&cfg, Some(&train.checkpoint), None)?;
    println!("test R@50 {:.3}, mAP_role {:.3}", report.metrics.constrained.recall[&50], report.metrics.map_role.map);

    let (_, test) = load_annotations(&cfg.data.test)?;
    let png = dir.join("query.png");
    test[0].image.save(&png)?;
    print!("{}", cmd_predict(&cfg, &train.checkpoint, &png, test[0].index, 3)?);
    Ok(())
}
