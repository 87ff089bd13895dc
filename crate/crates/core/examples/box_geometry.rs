//! Box overlap measures and box rasterization into segmentation targets.

use scenehoi::geometry::{box_giou, box_iou, box_l1, rasterize_boxes, BBox};

fn main() -> scenehoi::Result<()> {
    let a = BBox::new(0.4, 0.4, 0.4, 0.4)?;
    let b = BBox::new(0.5, 0.5, 0.4, 0.4)?;
    let far = BBox::from_corners(0.8, 0.8, 1.0, 1.0)?;
    for (name, other) in [("shifted", b), ("disjoint", far)] {
        println!(
            "{name}: iou {:.4}  giou {:.4}  l1 {:.4}",
            box_iou(&a, &other),
            box_giou(&a, &other),
            box_l1(&a, &other)
        );
    }

    let target = rasterize_boxes(&[a, far], &[1, 2], 8, 8, 3)?;
    for row in 0..target.height() {
        let line: String = (0..target.width())
            .map(|col| match (0..target.channels()).find(|&c| target.get(row, col, c)) {
                Some(c) if c == target.background() => '.',
                Some(c) => char::from_digit(c as u32, 10).unwrap_or('?'),
                None => ' ',
            })
            .collect();
        println!("{line}");
    }
    Ok(())
}
