mod common;

use deoe_core::encode::*;
use deoe_core::events::{EventPoint, EventStream};
use deoe_core::dataset::encode_frame_at;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[test]
fn bin_index_edges() {
    assert_eq!(bin_index(0, 0, 1000, 10).unwrap(), 0);
    assert_eq!(bin_index(1000, 0, 1000, 10).unwrap(), 9);
    assert_eq!(bin_index(500, 0, 1000, 10).unwrap(), 5);
    assert_eq!(bin_index(u64::MAX, u64::MAX - 3, u64::MAX, 16).unwrap(), 15);
}

#[test]
fn empty_window_is_zero() {
    let t = encode_window(&[], 0, 100, 4, 3, 5).unwrap();
    assert_eq!(t.shape(), [8, 3, 5]);
    assert!(t.data().iter().all(|&v| v == 0.0));
}

#[test]
fn single_event_lands_in_one_cell() {
    let t = encode_window(&[EventPoint::new(0, 3, 2, 1)], 0, 1000, 10, 4, 5).unwrap();
    assert_eq!(t.get(10, 2, 3), 1.0);
    assert_eq!(t.sum(), 1.0);
}

#[test]
fn ten_thousand_events_match_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let ev = common::random_events(&mut rng, 64, 48, 10_000, 1_000, 51_000);
    let t = encode_window(&ev, 1_000, 51_000, 10, 48, 64).unwrap();
    assert_eq!(t.data(), &common::accumulate_oracle(&ev, 1_000, 51_000, 10, 48, 64)[..]);
    assert_eq!(t.sum(), 10_000.0);
}

#[test]
fn rejects_events_outside_window_or_sensor() {
    assert!(encode_window(&[EventPoint::new(5, 0, 0, 0)], 10, 20, 2, 2, 2).is_err());
    assert!(encode_window(&[EventPoint::new(15, 2, 0, 0)], 10, 20, 2, 2, 2).is_err());
    assert!(encode_window(&[], 20, 20, 2, 2, 2).is_err());
    assert!(encode_window(&[], 0, 20, 0, 2, 2).is_err());
}

#[test]
fn downsample_cases() {
    let z = EventTensor::zeros(1, 4, 4, 0, 1);
    assert!(downsample2x(&z).unwrap().data().iter().all(|&v| v == 0.0));
    let mut data = vec![0f32; 2 * 4 * 4];
    for (y, x) in [(2, 2), (2, 3), (3, 2), (3, 3)] {
        data[y * 4 + x] = 1.0;
    }
    let d = downsample2x(&EventTensor::from_data(1, 4, 4, 0, 1, data).unwrap()).unwrap();
    assert_eq!(d.shape(), [2, 2, 2]);
    assert_eq!(d.get(0, 1, 1), 4.0);
    assert_eq!(d.sum(), 4.0);
    assert!(downsample2x(&EventTensor::zeros(1, 3, 4, 0, 1)).is_err());
}

#[test]
fn frame_window_is_half_open_and_ends_at_t() {
    let ev = vec![EventPoint::new(0, 0, 0, 0), EventPoint::new(9_999, 1, 0, 1), EventPoint::new(10_000, 1, 1, 0)];
    let s = EventStream::new(2, 2, ev).unwrap();
    let f = encode_frame_at(&s, 10_000, 10_000, 2).unwrap();
    assert_eq!(f.sum(), 2.0);
    assert_eq!((f.t_a, f.t_b), (0, 10_000));
    assert_eq!(f.get(3, 0, 1), 1.0);
}

#[test]
fn dump_round_trip_and_errors() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let ev = common::random_events(&mut rng, 6, 5, 200, 0, 99);
    let t = encode_window(&ev, 0, 100, 3, 5, 6).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.bin");
    write_dump(&t, &path).unwrap();
    let back = parse_dump(&std::fs::read(&path).unwrap()).unwrap();
    assert_eq!(back.shape(), t.shape());
    assert_eq!(back.data(), t.data());
    assert!(parse_dump(&dump_bytes(&t)[..20]).is_err());
}

#[test]
fn single_thread_throughput() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let ev = common::random_events(&mut rng, 128, 128, 2_000_000, 0, 50_000);
    let start = std::time::Instant::now();
    let t = encode_window(&ev, 0, 50_000, 5, 128, 128).unwrap();
    let rate = ev.len() as f64 / start.elapsed().as_secs_f64();
    assert_eq!(t.sum(), 2_000_000.0);
    assert!(rate >= 1e6, "{rate:.0} events/s");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn parallel_equals_serial(seed in any::<u64>(), n in 0usize..3000, workers in 1usize..9, t_bins in 1usize..17) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ev = common::random_events(&mut rng, 16, 12, n, 0, 5_000);
        let a = encode_window(&ev, 0, 5_000, t_bins, 12, 16).unwrap();
        let b = encode_window_parallel(&ev, 0, 5_000, t_bins, 12, 16, workers).unwrap();
        prop_assert_eq!(a.data(), b.data());
    }

    #[test]
    fn encoding_ignores_event_order(seed in any::<u64>(), n in 0usize..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ev = common::random_events(&mut rng, 8, 8, n, 10, 110);
        let mut shuffled = ev.clone();
        for i in (1..shuffled.len()).rev() {
            shuffled.swap(i, rng.random_range(0..=i));
        }
        let a = encode_window(&ev, 10, 110, 4, 8, 8).unwrap();
        let b = encode_window(&shuffled, 10, 110, 4, 8, 8).unwrap();
        prop_assert_eq!(a.data(), b.data());
    }

    #[test]
    fn encoding_is_additive_over_splits(seed in any::<u64>(), n in 0usize..1000, cut in 0usize..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ev = common::random_events(&mut rng, 8, 8, n, 0, 99);
        let cut = cut.min(ev.len());
        let mut a = encode_window(&ev[..cut], 0, 100, 3, 8, 8).unwrap();
        let b = encode_window(&ev[cut..], 0, 100, 3, 8, 8).unwrap();
        a.add_assign(&b).unwrap();
        let whole = encode_window(&ev, 0, 100, 3, 8, 8).unwrap();
        prop_assert_eq!(a.data(), whole.data());
    }

    #[test]
    fn bin_index_matches_boundary_scan(t_a in 0u64..1_000_000, span in 1u64..1_000_000, frac in 0.0f64..=1.0, t_bins in 1usize..33) {
        let t = t_a + ((span as f64 * frac) as u64).min(span);
        prop_assert_eq!(bin_index(t, t_a, t_a + span, t_bins).unwrap(), common::scan_bin(t, t_a, t_a + span, t_bins));
    }

    #[test]
    fn downsample_preserves_sum(seed in any::<u64>(), n in 0usize..500) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ev = common::random_events(&mut rng, 10, 6, n, 0, 9);
        let t = encode_window(&ev, 0, 10, 2, 6, 10).unwrap();
        prop_assert_eq!(downsample2x(&t).unwrap().sum(), t.sum());
    }
}
