//! Paired filter on/off runs of the toy trainer under void-turn noise.
//!
//! `cargo run --release --example train_toy -- [noise] [seeds]`

use tir_sql::grpo::{train_toy, TrainConfig};

fn main() {
    let mut args = std::env::args().skip(1);
    let noise: f64 = args.next().map(|s| s.parse().expect("noise")).unwrap_or(0.3);
    let seeds: u64 = args.next().map(|s| s.parse().expect("seeds")).unwrap_or(5);

    println!("seed  filter_on  filter_off  off_declining_tail");
    let (mut on_sum, mut off_sum) = (0.0, 0.0);
    for seed in 0..seeds {
        let mut cfg = TrainConfig { seed, ..Default::default() };
        cfg.env.noise = noise;
        let on = train_toy(&TrainConfig { filter: true, ..cfg.clone() });
        let off = train_toy(&TrainConfig { filter: false, ..cfg });
        let (a, b) = (on.final_reward(50), off.final_reward(50));
        on_sum += a;
        off_sum += b;
        println!("{seed:>4}  {a:>9.4}  {b:>10.4}  {}", off.has_declining_tail(50, 0.05));
    }
    println!("mean  {:>9.4}  {:>10.4}", on_sum / seeds as f64, off_sum / seeds as f64);
}
