//! COCO-style evaluation of a handful of detections.
//!
//! ```text
//! cargo run --release --example evaluate
//! ```

use cdiffdet::eval::{coco_summary, Detection, GroundTruth};
use cdiffdet::geometry::BoxXyxy;

fn main() {
    let gts = vec![
        GroundTruth {
            image_id: 1,
            category: 0,
            bbox: BoxXyxy::new(10.0, 10.0, 40.0, 40.0),
        },
        GroundTruth {
            image_id: 1,
            category: 1,
            bbox: BoxXyxy::new(50.0, 5.0, 60.0, 20.0),
        },
        GroundTruth {
            image_id: 2,
            category: 0,
            bbox: BoxXyxy::new(0.0, 0.0, 120.0, 100.0),
        },
    ];
    let dets = vec![
        Detection {
            image_id: 1,
            category: 0,
            bbox: BoxXyxy::new(12.0, 11.0, 41.0, 40.0),
            score: 0.9,
        },
        Detection {
            image_id: 1,
            category: 0,
            bbox: BoxXyxy::new(30.0, 30.0, 60.0, 60.0),
            score: 0.6,
        },
        Detection {
            image_id: 1,
            category: 1,
            bbox: BoxXyxy::new(50.0, 8.0, 61.0, 22.0),
            score: 0.7,
        },
        Detection {
            image_id: 2,
            category: 0,
            bbox: BoxXyxy::new(5.0, 0.0, 118.0, 95.0),
            score: 0.8,
        },
    ];
    let report = coco_summary(&dets, &gts);
    print!("{}", report.to_csv());
}
