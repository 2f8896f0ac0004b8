//! Trains the copy task and prints dev accuracy as it goes.
//!
//! cargo run --release -p nmt-core --example toy_copy -- [embed] [hidden] [iters] [lr]

use nmt_core::data::{encode_pairs, Vocabulary};
use nmt_core::synthetic::{toy_pairs, ToySpec};
use nmt_core::train::{sequence_accuracy, DevSet, TrainConfig, Trainer};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, d: f64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let spec = ToySpec::default();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let train = toy_pairs(&spec, 2000, &mut rng);
    let dev = toy_pairs(&spec, 200, &mut rng);
    let sv = Vocabulary::build(train.iter().map(|p| p.0.join(" ")), 100).unwrap();
    let tv = Vocabulary::build(train.iter().map(|p| p.1.join(" ")), 100).unwrap();
    let train_ids = encode_pairs(&train, &sv, &tv, 50);
    let dev_set = DevSet::from_pairs(&encode_pairs(&dev, &sv, &tv, 50));
    let config = TrainConfig {
        embed: arg(0, 16.0) as usize,
        hidden: arg(1, 32.0) as usize,
        max_iterations: arg(2, 3000.0) as usize,
        learning_rate: Some(arg(3, 0.001)),
        batch_size: arg(4, 80.0) as usize,
        validate_every: 250,
        ..TrainConfig::default()
    };
    let dims = config.dims(sv.len(), tv.len());
    let mut t = Trainer::new(config, dims, None, train_ids, Some(dev_set.clone())).unwrap();
    let start = std::time::Instant::now();
    while t.iteration < t.config.max_iterations {
        t.step().unwrap();
        if t.iteration % t.config.validate_every == 0 {
            let rec = t.validate().unwrap();
            let acc = sequence_accuracy(&t.model, &dev_set).unwrap();
            println!("{rec}\tacc={acc:.3}\t{:.1}s", start.elapsed().as_secs_f64());
        }
    }
}
