//! Turns one slide thumbnail and its tile embeddings into bags: tissue mask,
//! tile selection, spatial k-means, cluster ordering, per-cluster sampling,
//! then a round trip through the bag file format.
//!
//! cargo run --release --example bag_slide

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use trnasformer::bagging::{
    bag_slide, decode_bag, encode_bag, select_tiles, tissue_mask, BagShape, BaggingParams,
    EmbeddingTable, SlideMeta,
};
use trnasformer::synth::synthetic_thumbnail;

fn main() -> trnasformer::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let thumbnail = synthetic_thumbnail(24, &mut rng);
    let mask = tissue_mask(&thumbnail)?;
    let tiles = select_tiles(&mask)?;
    println!(
        "thumbnail {}x{}: {} tissue pixels, {} tiles kept",
        thumbnail.width(),
        thumbnail.height(),
        mask.count(),
        tiles.len()
    );

    let d = 16;
    let mut embeddings = EmbeddingTable::new(d);
    for t in &tiles {
        let row: Vec<f32> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        embeddings.insert(t.row, t.col, &row)?;
    }

    let params = BaggingParams {
        bags_per_slide: 10,
        ..BaggingParams::default()
    };
    let meta = SlideMeta {
        slide_id: "demo-slide".into(),
        case_id: "demo-case".into(),
        label: 1,
        gene_target: vec![0.5, 1.5],
    };
    let (clusters, sampled) = bag_slide(&tiles, &embeddings, &params, &meta)?;
    let sizes: Vec<usize> = clusters.sorted_order.iter().map(|&c| clusters.members[c].len()).collect();
    println!(
        "{} clusters after {} assignment steps, sizes in sorted order {:?}",
        clusters.k(),
        clusters.cost_trace.len(),
        &sizes[..8]
    );
    println!("bag 0 tiles (first 5): {:?}", &sampled.tiles[0][..5].iter().map(|t| (t.row, t.col)).collect::<Vec<_>>());

    let shape = BagShape { k: params.k, d, genes: 2, classes: 3 };
    for bag in &sampled.bags {
        let bytes = encode_bag(bag)?;
        let back = decode_bag(&bytes)?;
        back.validate(Some(&shape))?;
        assert_eq!(&back, bag);
    }
    println!("{} bags encoded, decoded and validated", sampled.bags.len());
    Ok(())
}
