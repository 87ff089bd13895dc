//! Minimum-cost bipartite matching between ground truths and predictions.

use scenehoi::matchloss::{hungarian, CostMatrix};

fn main() -> scenehoi::Result<()> {
    // three ground truths (rows) against five predictions (columns)
    let costs = CostMatrix::new(
        3,
        5,
        vec![
            4.0, 1.0, 3.0, 9.0, 2.0, //
            2.0, 0.5, 5.0, 1.0, 7.0, //
            3.0, 2.0, 2.0, 8.0, 0.2,
        ],
    )?;
    let a = hungarian(&costs)?;
    let total: f64 = a.pairs.iter().enumerate().map(|(g, &p)| costs.get(g, p)).sum();
    for (g, p) in a.pairs.iter().enumerate() {
        println!("ground truth {g} -> prediction {p} (cost {})", costs.get(g, *p));
    }
    println!("total cost {total}");
    println!("per prediction: {:?}", a.matched_gt(costs.cols()));
    Ok(())
}
