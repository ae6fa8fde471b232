//! Feature-map shapes and parameter counts of the three head variants.

use voxgraph::config::TrainConfig;
use voxgraph::layers::Mode;
use voxgraph::sdr::{SdrHead, SdrVariant};
use voxgraph::{Graph, ParamStore, Tensor};

fn main() -> voxgraph::Result<()> {
    let base = TrainConfig::desk();
    for variant in [SdrVariant::Sr, SdrVariant::Dr, SdrVariant::Sdr] {
        let config = TrainConfig { head_variant: variant, ..base.clone() };
        let det = config.detector()?;
        let mut store = ParamStore::new();
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let head = SdrHead::new(&mut store, "sdr", det.sdr.clone(), &mut rng)?;
        let (h, w) = (det.bev.height(), det.bev.width());
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(vec![det.sdr.in_channels, h, w], 0.1));
        let blocks = head.blocks_forward(&mut g, &store, x, Mode::Eval)?;
        let out = head.forward(&mut g, &store, x, Mode::Eval)?;
        println!("{variant:?}: {} parameters", head.trainable_count(&store));
        for (i, b) in blocks.iter().enumerate() {
            println!("  block {}: {:?}", i + 1, g.shape(*b));
        }
        println!("  cls {:?} reg {:?}", g.shape(out.cls), g.shape(out.reg));
    }
    Ok(())
}
