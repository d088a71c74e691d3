//! Runs the ablation ladder on the toy benchmark.
//!
//! Usage: `cargo run --release --example ablation -- [seed] [epochs]`

use physprior::toy::{run_ablation, AblationConfig};

fn main() {
    let mut args = std::env::args().skip(1);
    let mut cfg = AblationConfig::default();
    if let Some(seed) = args.next() {
        cfg.seed = seed.parse().expect("seed must be an integer");
    }
    if let Some(epochs) = args.next() {
        cfg.train.epochs = epochs.parse().expect("epochs must be an integer");
    }
    match run_ablation(&cfg) {
        Ok(table) => print!("{}", table.to_text()),
        Err(e) => {
            eprintln!("{e}");
            std::process::exit(2);
        }
    }
}
