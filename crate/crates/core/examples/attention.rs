//! Local self-attention inside one voxel and the neighbor-normalized global gate.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxgraph::autograd::neighbor_weights;
use voxgraph::geometry::build_knn_graph;
use voxgraph::voxelnet::local_attention_scores;
use voxgraph::Tensor;

fn main() -> voxgraph::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let features = Tensor::new(vec![5, 4], (0..20).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let scores = local_attention_scores(&features)?;
    println!("local weights (each point ignores itself):");
    for row in scores.data().chunks(5) {
        let line: Vec<String> = row.iter().map(|w| format!("{w:.3}")).collect();
        println!("  [{}]  sum {:.6}", line.join(" "), row.iter().sum::<f64>());
    }

    let centroids: Vec<[f64; 3]> = (0..12).map(|_| [rng.random_range(0.0..10.0), rng.random_range(0.0..10.0), 0.0]).collect();
    let graph = build_knn_graph(&centroids, 3)?;
    let mut voxel_features: Vec<f64> = (0..12 * 4).map(|_| rng.random_range(0.0..1.0)).collect();
    // A dead voxel: all dot products vanish, so uniform weights take over.
    voxel_features[..4].fill(0.0);
    let w = neighbor_weights(&Tensor::new(vec![12, 4], voxel_features)?, &graph.neighbors, 1e-8);
    for i in 0..3 {
        println!(
            "voxel {i}: neighbors {:?} weights {:.3?} fallback {}",
            graph.neighbors[i], w.weights[i], w.fallback[i]
        );
    }
    Ok(())
}
