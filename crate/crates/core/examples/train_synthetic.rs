//! Trains the desk preset on synthetic scenes and reports AP on them.
//!
//! cargo run --release --example train_synthetic [steps]

use std::time::Instant;

use voxgraph::config::TrainConfig;
use voxgraph::eval::{evaluate_detector, EvalQuery, Interpolation};
use voxgraph::kitti::ObjectClass;
use voxgraph::train::Trainer;

fn main() -> voxgraph::Result<()> {
    env_logger::init();
    let mut config = TrainConfig::desk();
    if let Some(steps) = std::env::args().nth(1).and_then(|s| s.parse().ok()) {
        config.max_steps = Some(steps);
    }
    let scenes = config.synthetic_dataset()?;

    let mut trainer = Trainer::new(config.clone())?;
    println!("parameters: {}", trainer.detector.trainable_count(&trainer.store));
    let start = Instant::now();
    let history = trainer.fit(&scenes, None)?;
    for r in history.iter().step_by(10).chain(history.last()) {
        println!("{}", r.tsv());
    }
    let first = history[0].loss.total;
    let last = history.last().unwrap().loss.total;
    println!("loss {first:.4} -> {last:.4} ({:.1}%) in {:.1?}", 100.0 * last / first, start.elapsed());

    let query = EvalQuery {
        class: ObjectClass::Car,
        iou_threshold: config.eval_iou,
        difficulty: None,
        interpolation: Interpolation::Eleven,
    };
    let (ap, dets) = evaluate_detector(&trainer.detector, &trainer.store, &scenes, &config.postprocess(), &query)?;
    let n: usize = dets.iter().map(Vec::len).sum();
    println!("detections: {n}, AP@{}: {:.2}", config.eval_iou, ap.map_or(f64::NAN, |a| a.ap));
    Ok(())
}
