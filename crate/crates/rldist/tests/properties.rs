use proptest::prelude::*;
use rldist::algorithms::WeightCheckpoint;
use rldist::evaluation::{compress_batch, decompress_batch, CompressedBatch};
use rldist::framing::{read_frames, Codec};
use rldist::optimizers::shard_bounds;
use rldist_core::batch::{SampleBatch, Transition};

/// Batch with `rows` transitions drawn from `vals`, cycling through them.
fn batch(obs_dim: usize, vals: &[f64], rows: usize, extra: bool) -> SampleBatch {
    let mut b = SampleBatch::new(obs_dim, 1);
    let at = |i: usize| vals[i % vals.len()];
    for r in 0..rows {
        let obs: Vec<f64> = (0..obs_dim).map(|k| at(r * obs_dim + k)).collect();
        let next: Vec<f64> = (0..obs_dim).map(|k| at(r * obs_dim + k + 1)).collect();
        b.push(Transition {
            obs: &obs,
            action: &[(r % 3) as f64],
            reward: at(r),
            done: r % 5 == 4,
            new_obs: &next,
            eps_id: (r / 5) as u64,
            agent_id: 0,
            t_index: (r % 5) as u32,
        });
    }
    if extra {
        b.set_column("advantages", (0..rows).map(at).collect()).unwrap();
    }
    b
}

proptest! {
    #[test]
    fn compression_is_lossless(
        vals in prop::collection::vec(-1e6f64..1e6, 1..40),
        obs_dim in 1usize..6,
        rows in 0usize..50,
        extra in any::<bool>(),
    ) {
        let b = batch(obs_dim, &vals, rows, extra);
        let c = compress_batch(&b);
        prop_assert_eq!(decompress_batch(&c).unwrap(), b.clone());
        let wire = CompressedBatch::from_frame(&c.to_frame()).unwrap();
        prop_assert_eq!(decompress_batch(&wire).unwrap(), b.clone());
        prop_assert_eq!(SampleBatch::from_frame(&b.to_frame()).unwrap(), b);
    }

    #[test]
    fn truncated_frames_are_errors_not_panics(
        vals in prop::collection::vec(-10.0f64..10.0, 1..10),
        cut in 0usize..200,
    ) {
        let bytes = batch(2, &vals, 6, false).to_frame();
        let cut = cut.min(bytes.len() - 1);
        prop_assert!(SampleBatch::from_frame(&bytes[..cut]).is_err());
        let _ = read_frames(&bytes[..cut]);
    }

    #[test]
    fn shards_partition_the_weights(len in 1usize..500, shards in 1usize..20) {
        prop_assume!(shards <= len);
        let b = shard_bounds(len, shards);
        prop_assert_eq!(b.len(), shards);
        prop_assert_eq!(b[0].start, 0);
        prop_assert_eq!(b[shards - 1].end, len);
        for w in b.windows(2) {
            prop_assert_eq!(w[0].end, w[1].start);
        }
        prop_assert!(b.iter().all(|r| !r.is_empty()));
    }

    #[test]
    fn weight_checkpoints_round_trip(shapes in prop::collection::vec((1usize..5, 1usize..5), 1..5), seed in any::<u32>()) {
        let n: usize = shapes.iter().map(|(r, c)| r * c).sum();
        let data: Vec<f64> = (0..n).map(|i| (i as f64 + seed as f64).sin()).collect();
        let ckpt = WeightCheckpoint::new(shapes.clone(), data.clone()).unwrap();
        prop_assert_eq!(WeightCheckpoint::from_frame(&ckpt.to_frame()).unwrap(), ckpt);
        prop_assert!(WeightCheckpoint::new(shapes, data[..n - 1].to_vec()).is_err());
    }
}
