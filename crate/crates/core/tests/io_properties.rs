use lava_core::checkpoint::{decode, decode_expecting, encode, load, save, CheckpointError};
use lava_core::config::RunConfig;
use lava_core::tasks::Series;
use lava_core::{AdaptMode, Architecture, MetaParams, SeedTree};
use proptest::prelude::*;
use rand::SeedableRng;

fn arch_strategy() -> impl Strategy<Value = (Architecture, AdaptMode, u64)> {
    (
        1usize..4,
        1usize..4,
        prop::collection::vec(1usize..9, 1..4),
        prop::bool::ANY,
        1usize..4,
        any::<u64>(),
    )
        .prop_map(|(i, o, hidden, context, c, seed)| {
            let arch = Architecture::new(i, o).with_hidden(&hidden);
            if context {
                (arch.with_context(c), AdaptMode::Context, seed)
            } else {
                (arch, AdaptMode::LastLayer, seed)
            }
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn checkpoints_round_trip_bitwise((arch, mode, seed) in arch_strategy()) {
        let params = MetaParams::init(SeedTree::new(seed), &arch, mode).unwrap();
        let bytes = encode(&params);
        let back = decode(&bytes).unwrap();
        prop_assert_eq!(&back, &params);
        prop_assert_eq!(encode(&back), bytes.clone());
        let expected = decode_expecting(&bytes, &arch, mode).unwrap();
        prop_assert_eq!(expected, params);
    }

    #[test]
    fn every_truncation_is_rejected((arch, mode, seed) in arch_strategy(), cut in any::<prop::sample::Index>()) {
        let bytes = encode(&MetaParams::init(SeedTree::new(seed), &arch, mode).unwrap());
        let at = cut.index(bytes.len());
        prop_assert!(decode(&bytes[..at]).is_err());
    }

    #[test]
    fn corrupted_bytes_never_panic((arch, mode, seed) in arch_strategy(), pos in any::<prop::sample::Index>(), byte in any::<u8>()) {
        let mut bytes = encode(&MetaParams::init(SeedTree::new(seed), &arch, mode).unwrap());
        let at = pos.index(bytes.len());
        bytes[at] = byte;
        let _ = decode(&bytes);
    }

    #[test]
    fn config_overrides_survive_serialisation(
        alpha in 1e-4f64..1.0,
        eps in 1e-4f64..10.0,
        support in 1usize..50,
        hidden in prop::collection::vec(1usize..128, 1..4),
        seed in any::<u32>(),
    ) {
        let overrides = vec![
            format!("training.alpha={alpha:?}"),
            format!("training.eps={eps:?}"),
            format!("training.support={support}"),
            format!("model.hidden={hidden:?}"),
            format!("run.seed={seed}"),
        ];
        let cfg = RunConfig::with_overrides("", &overrides).unwrap();
        prop_assert_eq!(cfg.training.alpha, alpha);
        prop_assert_eq!(cfg.training.support, support);
        prop_assert_eq!(&cfg.model.hidden, &hidden);
        let back = RunConfig::from_toml_str(&cfg.to_toml()).unwrap();
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn csv_series_round_trip_and_windows_are_contiguous(
        rows in prop::collection::vec((-1e6f64..1e6, -1e6f64..1e6), 3..40),
        split in 1usize..3,
        seed in any::<u64>(),
    ) {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["t", "a", "b"]).unwrap();
        for (i, (a, b)) in rows.iter().enumerate() {
            w.write_record([format!("{i}"), format!("{a:?}"), format!("{b:?}")]).unwrap();
        }
        let text = w.into_inner().unwrap();
        let series = Series::from_reader(text.as_slice(), "t", &["a", "b"]).unwrap();
        prop_assert_eq!(series.len(), rows.len());
        for (i, (a, b)) in rows.iter().enumerate() {
            prop_assert_eq!(series.values[(i, 0)], *a);
            prop_assert_eq!(series.values[(i, 1)], *b);
        }

        let (support, query) = (split, 1);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let batch = series.sample_window(support, query, &mut rng).unwrap();
        let mut found: Vec<usize> = batch
            .support_y
            .data()
            .chunks(2)
            .chain(batch.query_y.data().chunks(2))
            .map(|r| rows.iter().position(|(a, b)| *a == r[0] && *b == r[1]).unwrap())
            .collect();
        found.sort_unstable();
        found.dedup();
        prop_assert_eq!(found.len(), support + query);
        prop_assert_eq!(found[found.len() - 1] - found[0], support + query - 1);
    }
}

#[test]
fn file_round_trip_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let arch = Architecture::new(1, 1).with_hidden(&[4, 4]);
    let params = MetaParams::init(SeedTree::new(1), &arch, AdaptMode::LastLayer).unwrap();
    let path = dir.path().join("p.ckpt");
    save(&path, &params).unwrap();
    assert_eq!(load(&path).unwrap(), params);
    assert!(matches!(load(&dir.path().join("missing.ckpt")), Err(CheckpointError::Io { .. })));
    let other = Architecture::new(1, 1).with_hidden(&[4, 5]);
    match decode_expecting(&encode(&params), &other, AdaptMode::LastLayer) {
        Err(CheckpointError::ArchMismatch { tensor, .. }) => assert_eq!(tensor, "hidden.1.weight"),
        other => panic!("expected a mismatch, got {other:?}"),
    }
}
