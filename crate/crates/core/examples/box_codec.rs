//! Anchor residual encoding, rotated IoU and NMS on a few hand-placed boxes.

use voxgraph::boxes::{decode, encode, iou_3d, iou_bev, nms, AnchorSpec, Box7};

fn main() {
    let car = AnchorSpec::car();
    let anchor = Box7::new(10.0, 2.0, car.z, car.l, car.w, car.h, 0.0);
    let gt = Box7::new(10.4, 1.7, -0.9, 4.1, 1.7, 1.5, 0.3);
    let res = encode(&gt, &anchor);
    println!("residual: {:?}", res.to_array().map(|v| (v * 1e4).round() / 1e4));
    println!("decoded:  {:?}", decode(&res, &anchor));

    let boxes = [
        gt,
        Box7::new(10.6, 1.8, -0.9, 4.0, 1.6, 1.5, 0.25),
        Box7::new(10.4, 1.7, -0.9, 4.1, 1.7, 1.5, 0.3 + std::f64::consts::FRAC_PI_2),
        Box7::new(30.0, -5.0, -0.9, 3.9, 1.6, 1.5, 1.0),
    ];
    for (i, b) in boxes.iter().enumerate().skip(1) {
        println!("box 0 vs {i}: BEV IoU {:.4}, 3D IoU {:.4}", iou_bev(&boxes[0], b), iou_3d(&boxes[0], b));
    }
    let scores = [0.9, 0.95, 0.6, 0.3];
    println!("NMS@0.5 keeps {:?}", nms(&boxes, &scores, 0.5));
}
