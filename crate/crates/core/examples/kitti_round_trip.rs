//! Writes a synthetic scene in KITTI layout, reads it back and compares.

use voxgraph::config::TrainConfig;
use voxgraph::kitti::{format_labels, KittiDataset};
use voxgraph::synthetic::generate_synthetic;
use voxgraph::Error;

fn main() -> voxgraph::Result<()> {
    let dir = std::env::temp_dir().join(format!("voxgraph-kitti-{}", std::process::id()));
    let data = KittiDataset::new(&dir);
    let scene = generate_synthetic(&TrainConfig::desk().synthetic(), 3)?;
    data.write_scene(&scene)?;
    let back = data.load_scene(&scene.id)?;

    let worst_point = scene
        .points
        .iter()
        .zip(&back.points)
        .map(|(a, b)| (a.x - b.x).abs().max((a.y - b.y).abs()).max((a.z - b.z).abs()))
        .fold(0.0, f64::max);
    let worst_box = scene
        .labels
        .iter()
        .zip(&back.labels)
        .flat_map(|(a, b)| a.bbox.to_array().into_iter().zip(b.bbox.to_array()).map(|(x, y)| (x - y).abs()))
        .fold(0.0, f64::max);
    println!("{}: {} points, {} labels", back.id, back.points.len(), back.labels.len());
    println!("max point error {worst_point:.2e} (f32 storage), max box error {worst_box:.2e}");
    print!("{}", format_labels(&back.labels, &back.calib));
    std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))
}
