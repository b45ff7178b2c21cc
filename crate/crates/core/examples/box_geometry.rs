//! Overlap measures, pyramid level assignment and greedy NMS.
//!
//! ```text
//! cargo run --release --example box_geometry
//! ```

use cdiffdet::geometry::{assign_fpn_level, giou, iou, nms, BoxXyxy, BASE_SIZE};

fn main() {
    let a = BoxXyxy::new(0.0, 0.0, 2.0, 2.0);
    let b = BoxXyxy::new(1.0, 1.0, 3.0, 3.0);
    println!(
        "iou = {:.6} (1/7), giou = {:.6} (-5/63)",
        iou(&a, &b),
        giou(&a, &b)
    );

    for side in [16.0, 56.0, 112.0, 224.0, 448.0, 896.0] {
        let level = assign_fpn_level(&BoxXyxy::new(0.0, 0.0, side, side), BASE_SIZE);
        println!("{side:5} px box -> P{level}");
    }

    let boxes = [
        BoxXyxy::new(10.0, 10.0, 50.0, 50.0),
        BoxXyxy::new(12.0, 12.0, 52.0, 52.0),
        BoxXyxy::new(60.0, 60.0, 90.0, 90.0),
        BoxXyxy::new(11.0, 9.0, 49.0, 51.0),
    ];
    let scores = [0.9, 0.8, 0.7, 0.95];
    println!("kept after NMS at 0.5: {:?}", nms(&boxes, &scores, 0.5));
}
