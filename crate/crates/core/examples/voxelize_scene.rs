//! Groups a synthetic scene into spherical voxels and links them with a KNN graph.

use voxgraph::config::TrainConfig;
use voxgraph::geometry::{build_knn_graph, build_voxels, VoxelConfig};
use voxgraph::synthetic::generate_synthetic;

fn main() -> voxgraph::Result<()> {
    let config = TrainConfig::desk();
    let scene = generate_synthetic(&config.synthetic(), 7)?;
    let xyz: Vec<[f64; 3]> = scene.points.iter().map(|p| p.xyz()).collect();
    let voxel_config = VoxelConfig {
        n_voxels: 128,
        radius: 1.0,
        point_cap: 32,
        seed_index: 0,
    };
    let voxels = build_voxels(&xyz, &voxel_config)?;
    let sizes: Vec<usize> = voxels.iter().map(|v| v.member_indices.len()).collect();
    let full = sizes.iter().filter(|&&s| s == voxel_config.point_cap).count();
    println!("{} points -> {} voxels", xyz.len(), voxels.len());
    println!(
        "members per voxel: min {} max {} mean {:.1}, {full} at the cap",
        sizes.iter().min().unwrap(),
        sizes.iter().max().unwrap(),
        sizes.iter().sum::<usize>() as f64 / sizes.len() as f64
    );

    let centroids: Vec<[f64; 3]> = voxels.iter().map(|v| v.centroid).collect();
    let graph = build_knn_graph(&centroids, 8)?;
    let v = &voxels[0];
    println!(
        "voxel 0: seed point {}, centroid ({:.2}, {:.2}, {:.2}), neighbors {:?}",
        v.center_point_index, v.centroid[0], v.centroid[1], v.centroid[2], graph.neighbors[0]
    );
    Ok(())
}
