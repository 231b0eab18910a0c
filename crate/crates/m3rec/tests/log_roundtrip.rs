use m3rec::logs::{read_logs_from, write_logs_to, LogHeader};
use m3rec_core::data::{StepRecord, Trajectory};
use proptest::prelude::*;

fn step(n_items: usize, k: usize) -> impl Strategy<Value = StepRecord> {
    let items: Vec<usize> = (0..n_items).collect();
    (proptest::sample::subsequence(items, 1..=k), any::<prop::sample::Index>(), -1e6f64..1e6).prop_flat_map(
        |(slate, idx, reward)| {
            let click = slate[idx.index(slate.len())];
            Just(slate).prop_shuffle().prop_map(move |slate| StepRecord { slate, click, reward })
        },
    )
}

fn trajectories() -> impl Strategy<Value = (usize, usize, Vec<Trajectory>)> {
    (1usize..40, 1usize..6).prop_flat_map(|(n_items, k)| {
        let k = k.min(n_items);
        let traj = (any::<u64>(), proptest::collection::vec(step(n_items, k), 0..8))
            .prop_map(|(user_id, steps)| Trajectory { user_id, steps });
        (Just(n_items), Just(k), proptest::collection::vec(traj, 0..6))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn logs_round_trip((n_items, k, trajs) in trajectories()) {
        let header = LogHeader::new(n_items, k);
        let mut buf = Vec::new();
        write_logs_to(&mut buf, &header, &trajs).unwrap();
        let back = read_logs_from(buf.as_slice(), "memory").unwrap();
        prop_assert_eq!(back.header, header);
        prop_assert_eq!(back.trajectories, trajs);
    }
}
