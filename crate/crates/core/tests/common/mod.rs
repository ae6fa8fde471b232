//! Shared oracles for the integration tests.
#![allow(dead_code)]

pub mod criteria;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use voxgraph::{Graph, ParamStore, Result, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut impl Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `|a - n| / max(|a|, |n|, floor)`; the floor keeps exact zeros from
/// dividing round-off by round-off.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// Central differences of a scalar function of several input tensors
/// against the tape's gradients. Returns the worst relative error.
pub fn gradcheck<F>(inputs: &[Tensor], h: f64, floor: f64, build: F) -> f64
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = vals.iter().map(|t| g.input(t.clone(), true)).collect();
        let out = build(&mut g, &vars).unwrap();
        g.value(out).data()[0]
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone(), true)).collect();
    let out = build(&mut g, &vars).unwrap();
    let grads = g.backward(out).unwrap();
    let mut worst = 0.0f64;
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v).unwrap_or_else(|| Tensor::zeros(inputs[k].shape().to_vec()));
        for i in 0..inputs[k].numel() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            worst = worst.max(rel_err(analytic.data()[i], numeric, floor));
        }
    }
    worst
}

/// Same check over every trainable entry of a parameter store.
pub fn param_gradcheck<F>(store: &ParamStore, h: f64, floor: f64, loss: F) -> f64
where
    F: Fn(&mut Graph, &ParamStore) -> Result<Var>,
{
    let mut g = Graph::new();
    let out = loss(&mut g, store).unwrap();
    let grads = g.backward(out).unwrap();
    let mut worst = 0.0f64;
    let mut probe = store.clone();
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.requires_grad).map(|(id, _)| id).collect();
    for id in ids {
        let analytic = grads.param(id).unwrap_or_else(|| Tensor::zeros(store.value(id).shape().to_vec()));
        for i in 0..store.value(id).numel() {
            let base = store.value(id).data()[i];
            let mut at = |x: f64| {
                probe.get_mut(id).value.data_mut()[i] = x;
                let mut g = Graph::new();
                let out = loss(&mut g, &probe).unwrap();
                g.value(out).data()[0]
            };
            let numeric = (at(base + h) - at(base - h)) / (2.0 * h);
            at(base);
            let e = rel_err(analytic.data()[i], numeric, floor);
            worst = worst.max(e);
        }
    }
    worst
}

/// Contracts any tensor to a scalar with fixed random weights so every
/// output element carries a distinct gradient.
pub fn probe_sum(g: &mut Graph, x: Var, seed: u64) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    let w = random_tensor(&mut rng(seed), &shape, 1.0);
    let w = g.constant(w);
    let p = g.mul(x, w)?;
    g.sum(p)
}

type Build = Box<dyn Fn(&mut Graph, &[Var]) -> Result<Var>>;

/// One differentiable operation on micro shapes.
pub struct OpCase {
    pub name: &'static str,
    pub inputs: Vec<Tensor>,
    pub build: Build,
}

fn case(name: &'static str, inputs: Vec<Tensor>, build: impl Fn(&mut Graph, &[Var]) -> Result<Var> + 'static) -> OpCase {
    OpCase {
        name,
        inputs,
        build: Box::new(build),
    }
}

/// Every taped operation, each reduced to a scalar through [`probe_sum`].
pub fn op_cases(seed: u64) -> Vec<OpCase> {
    let mut r = rng(seed);
    let mut t = |shape: &[usize]| random_tensor(&mut r, shape, 1.0);
    let positive = |x: Tensor| Tensor::new(x.shape().to_vec(), x.data().iter().map(|v| v.abs() + 0.5).collect()).unwrap();
    vec![
        case("linear", vec![t(&[3, 4]), t(&[2, 4]), t(&[2])], |g, v| {
            let y = g.linear(v[0], v[1], v[2])?;
            probe_sum(g, y, 1)
        }),
        case("matmul", vec![t(&[3, 4]), t(&[4, 2])], |g, v| {
            let y = g.matmul(v[0], v[1])?;
            probe_sum(g, y, 2)
        }),
        case("transpose", vec![t(&[3, 2])], |g, v| {
            let y = g.transpose(v[0])?;
            probe_sum(g, y, 3)
        }),
        case("add", vec![t(&[2, 3]), t(&[2, 3])], |g, v| {
            let y = g.add(v[0], v[1])?;
            probe_sum(g, y, 4)
        }),
        case("sub", vec![t(&[2, 3]), t(&[2, 3])], |g, v| {
            let y = g.sub(v[0], v[1])?;
            probe_sum(g, y, 5)
        }),
        case("mul", vec![t(&[2, 3]), t(&[2, 3])], |g, v| {
            let y = g.mul(v[0], v[1])?;
            probe_sum(g, y, 6)
        }),
        case("scale", vec![t(&[4])], |g, v| {
            let y = g.scale(v[0], -1.7)?;
            probe_sum(g, y, 7)
        }),
        case("relu", vec![t(&[3, 3])], |g, v| {
            let y = g.relu(v[0])?;
            probe_sum(g, y, 8)
        }),
        case("sigmoid", vec![t(&[3, 3])], |g, v| {
            let y = g.sigmoid(v[0])?;
            probe_sum(g, y, 9)
        }),
        case("sum", vec![t(&[2, 3])], |g, v| {
            let sq = g.mul(v[0], v[0])?;
            g.sum(sq)
        }),
        case("mean", vec![t(&[2, 3])], |g, v| {
            let sq = g.mul(v[0], v[0])?;
            g.mean(sq)
        }),
        case("reshape", vec![t(&[2, 3])], |g, v| {
            let y = g.reshape(v[0], vec![3, 2])?;
            probe_sum(g, y, 10)
        }),
        case("softmax", vec![t(&[3, 4])], |g, v| {
            let a = g.softmax(v[0], 0)?;
            let b = g.softmax(v[0], 1)?;
            let a = probe_sum(g, a, 11)?;
            let b = probe_sum(g, b, 12)?;
            g.add(a, b)
        }),
        case("concat", vec![t(&[2, 3]), t(&[2, 2])], |g, v| {
            let y = g.concat(&[v[0], v[1]], 1)?;
            let z = g.concat(&[v[0], v[0]], 0)?;
            let a = probe_sum(g, y, 13)?;
            let b = probe_sum(g, z, 14)?;
            g.add(a, b)
        }),
        case("gather", vec![t(&[2, 3])], |g, v| {
            let y = g.gather(v[0], &[5, 0, 0, 3])?;
            probe_sum(g, y, 15)
        }),
        case("broadcast", vec![t(&[1])], |g, v| {
            let y = g.broadcast(v[0], vec![2, 3])?;
            probe_sum(g, y, 16)
        }),
        case("voxel_attention", vec![t(&[7, 3]), t(&[3])], |g, v| {
            let y = g.voxel_attention(v[0], v[1], &[0, 1, 4, 7])?;
            probe_sum(g, y, 17)
        }),
        case("segment_max", vec![t(&[7, 3])], |g, v| {
            let y = g.segment_max(v[0], &[0, 2, 3, 7])?;
            probe_sum(g, y, 18)
        }),
        case("knn_aggregate", vec![positive(t(&[5, 3]))], |g, v| {
            let nbrs = vec![vec![1, 2], vec![0, 2], vec![1, 3], vec![4, 2], vec![3, 0]];
            let y = g.knn_aggregate(v[0], &nbrs, 1e-8)?;
            probe_sum(g, y, 19)
        }),
        case("scatter_max", vec![t(&[4, 3])], |g, v| {
            let y = g.scatter_max(v[0], &[Some(0), Some(0), None, Some(3)], 2, 2)?;
            probe_sum(g, y, 20)
        }),
        case("conv2d", vec![t(&[2, 5, 5]), t(&[3, 2, 3, 3]), t(&[3])], |g, v| {
            let a = g.conv2d(v[0], v[1], v[2], 1, 1)?;
            let b = g.conv2d(v[0], v[1], v[2], 2, 1)?;
            let a = probe_sum(g, a, 21)?;
            let b = probe_sum(g, b, 22)?;
            g.add(a, b)
        }),
        case("conv2d_1x1", vec![t(&[2, 3, 3]), t(&[3, 2, 1, 1]), t(&[3])], |g, v| {
            let y = g.conv2d(v[0], v[1], v[2], 1, 0)?;
            probe_sum(g, y, 23)
        }),
        case("batch_norm_train", vec![t(&[2, 3, 3]), t(&[2]), t(&[2])], |g, v| {
            let (y, _, _) = g.batch_norm_train(v[0], v[1], v[2], 1e-5)?;
            probe_sum(g, y, 24)
        }),
        case("batch_norm_eval", vec![t(&[2, 3, 3]), t(&[2]), t(&[2])], |g, v| {
            let y = g.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2], &[0.7, 1.3], 1e-5)?;
            probe_sum(g, y, 25)
        }),
        case("upsample2x", vec![t(&[2, 2, 3])], |g, v| {
            let y = g.upsample2x(v[0])?;
            probe_sum(g, y, 26)
        }),
        case("bce_with_logits_mean", vec![t(&[5])], |g, v| {
            let s = g.scale(v[0], 3.0)?;
            let a = g.bce_with_logits_mean(s, 1.0)?;
            let b = g.bce_with_logits_mean(s, 0.0)?;
            let b = g.scale(b, 0.5)?;
            g.add(a, b)
        }),
        case("smooth_l1_sum", vec![t(&[6])], |g, v| {
            let s = g.scale(v[0], 2.5)?;
            g.smooth_l1_sum(s, &[0.1, -0.4, 0.3, 0.9, -0.8, 0.0])
        }),
    ]
}

/// Smallest end-to-end model: 5 voxels of at most 4 points, width-4
/// features and an 8x8 grid.
pub fn micro_config() -> voxgraph::config::TrainConfig {
    voxgraph::config::TrainConfig {
        n_voxels: 5,
        radius: 2.0,
        point_cap: 4,
        point_mlp: vec![4, 4],
        center_mlp: vec![4, 4],
        attention_mlp: vec![(4, 4), (4, 4)],
        knn_k: 2,
        bev_channels: 4,
        x_min: 0.0,
        x_max: 8.0,
        y_min: -4.0,
        y_max: 4.0,
        resolution: 1.0,
        block_channels: [4, 4, 4],
        convs_per_block: 1,
        branch_channels: 4,
        branch_convs: 1,
        merged_channels: 4,
        synthetic_boxes: 1,
        synthetic_points_per_box: 24,
        synthetic_clutter: 8,
        synthetic_ground: 8,
        ..voxgraph::config::TrainConfig::desk()
    }
}

/// Moves a freshly initialized store off the exact ties a default init
/// creates (zero BN shifts, all-dead ReLU layers) so finite differences
/// probe a generic point.
pub fn jitter_store(store: &mut ParamStore, seed: u64, scale: f64) {
    let mut r = rng(seed);
    let ids: Vec<_> = store.iter().filter(|(_, p)| p.requires_grad).map(|(id, _)| id).collect();
    for id in ids {
        let name = store.get(id).name.clone();
        for v in store.get_mut(id).value.data_mut() {
            *v += r.random_range(-scale..scale);
            if name.ends_with("bev.bias") {
                *v = v.abs() + 0.5;
            }
        }
    }
}

/// BEV grid of a scene under the micro detector, for precondition checks.
pub fn bev_nonzero(detector: &voxgraph::detector::Detector, store: &ParamStore, points: &[voxgraph::kitti::Point]) -> usize {
    let mut g = Graph::new();
    let pts = detector.crop(points);
    let xyz: Vec<[f64; 3]> = pts.iter().map(|p| p.xyz()).collect();
    let voxels = voxgraph::geometry::build_voxels(&xyz, &detector.config.voxels).unwrap();
    let out = detector.net.forward(&mut g, store, &pts, &voxels, &detector.config.bev).unwrap();
    g.value(out.bev).data().iter().filter(|v| **v != 0.0).count()
}
