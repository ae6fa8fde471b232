//! Average precision of a hand-built ranking under both interpolation rules.

use voxgraph::boxes::Box7;
use voxgraph::eval::{evaluate_ap, EvalQuery, Interpolation};
use voxgraph::kitti::{Detection, LabeledBox, ObjectClass};

fn car(x: f64) -> Box7 {
    Box7::new(x, 0.0, -0.8, 3.9, 1.6, 1.56, 0.0)
}

fn main() {
    let gts = vec![vec![LabeledBox::new(car(0.0), ObjectClass::Car), LabeledBox::new(car(10.0), ObjectClass::Car)]];
    let det = |x: f64, score: f64| Detection { bbox: car(x), class: ObjectClass::Car, score };
    // hit, false positive, slightly shifted hit
    let dets = vec![vec![det(0.0, 0.9), det(25.0, 0.8), det(10.3, 0.7)]];
    for interpolation in [Interpolation::Eleven, Interpolation::Forty] {
        let query = EvalQuery { class: ObjectClass::Car, iou_threshold: 0.7, difficulty: None, interpolation };
        let r = evaluate_ap(&dets, &gts, &query).expect("ground truth present");
        println!("{interpolation:?}: AP {:.2}, curve {:.3?}", r.ap, r.curve);
    }
}
