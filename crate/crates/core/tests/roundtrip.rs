use proptest::prelude::*;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use equiagg::aggregation::AggregatorKind;
use equiagg::checkpoint::Checkpoint;
use equiagg::config::RunConfig;
use equiagg::params::{ParamEntry, ParamStore};
use equiagg::report::parse_metrics;
use equiagg::run::{run_training, METRICS_FILE};
use equiagg::tasks::{MedianTaskConfig, Task};
use equiagg::tensor::Tensor;
use equiagg::training::RunState;

fn tensor(shape: Vec<usize>, bits: &mut impl Iterator<Item = u64>) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| f64::from_bits(bits.next().unwrap()))
        .collect();
    Tensor::new(&shape, data)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// Arbitrary bit patterns, NaN payloads included, survive save/load/save.
    #[test]
    fn checkpoint_save_load_save_is_bitwise(
        shapes in prop::collection::vec(prop::collection::vec(0usize..4, 0..3), 0..5),
        seed in any::<u64>(),
        stream in any::<u64>(),
        draws in 0usize..50,
        step in any::<u64>(),
    ) {
        let mut bits_rng = ChaCha8Rng::seed_from_u64(seed);
        let mut bits = std::iter::from_fn(|| Some(bits_rng.next_u64()));
        let mut store = ParamStore::new();
        for (i, shape) in shapes.into_iter().enumerate() {
            let entry = ParamEntry {
                value: tensor(shape.clone(), &mut bits),
                m: tensor(shape.clone(), &mut bits),
                v: tensor(shape, &mut bits),
            };
            store.insert_entry(format!("p{i}"), entry);
        }
        store.step = step / 2;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        rng.set_stream(stream);
        for _ in 0..draws {
            rng.next_u32();
        }
        let ck = Checkpoint {
            config: RunConfig::new(Task::Median(MedianTaskConfig::default()), AggregatorKind::Sum),
            state: RunState { store, rng, step },
        };
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(back.to_bytes().unwrap(), bytes);
        let (mut a, mut b) = (ck.state.rng.clone(), back.state.rng.clone());
        prop_assert_eq!(a.next_u64(), b.next_u64());
    }
}

#[test]
fn metrics_lines_parse_independently() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::parse(
        "task = median\nmodel.aggregator = ea\nmedian.set_size = 5\ntrain.batch_size = 2\n\
         train.steps = 6\ntrain.eval_period = 2\ntrain.eval_samples = 3\n",
    )
    .unwrap();
    cfg.wall_clock = false;
    run_training(&cfg, dir.path(), false).unwrap();
    let text = std::fs::read_to_string(dir.path().join(METRICS_FILE)).unwrap();
    let all = parse_metrics(&text).unwrap();
    assert_eq!(all.iter().map(|r| r.step).collect::<Vec<_>>(), [2, 4, 6]);
    for (line, rec) in text.lines().zip(&all) {
        assert_eq!(&parse_metrics(line).unwrap()[0], rec);
    }
    // A torn final line leaves the earlier lines readable.
    let torn = &text[..text.len() - 10];
    let kept: Vec<_> = torn.lines().take(2).collect();
    assert_eq!(parse_metrics(&kept.join("\n")).unwrap(), all[..2]);
}

#[test]
fn config_file_round_trip() {
    let text =
        "task = classcount\nmodel.aggregator = pna\nclasscount.noise = 0.1\ntrain.clip = none\n";
    let a = RunConfig::parse(text).unwrap();
    let b = RunConfig::parse(&a.to_text()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.to_text(), b.to_text());
}
