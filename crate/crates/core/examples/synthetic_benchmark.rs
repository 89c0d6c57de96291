//! Trains on generated scenes and compares against constant velocity.
//!
//! `cargo run --release --example synthetic_benchmark -- [epochs] [scenes]`

use demo_core::data::Config;
use demo_core::train::synthetic_benchmark;

fn main() {
    let mut args = std::env::args().skip(1);
    let mut c = Config::default();
    if let Some(e) = args.next().and_then(|s| s.parse().ok()) {
        c.train.epochs = e;
    }
    if let Some(n) = args.next().and_then(|s| s.parse().ok()) {
        c.synth.count = n;
    }
    let t = std::time::Instant::now();
    let (_, o) = synthetic_benchmark(&c).expect("benchmark runs");
    for l in &o.logs {
        println!("epoch {:>3}  total {:>9.3}  val {:>9.3}", l.epoch, l.total, l.val_total.unwrap_or(f64::NAN));
    }
    print!("{}", o.model.to_table("model"));
    print!("{}", o.const_velocity.to_table("constant velocity"));
    println!(
        "improvement at 2 s: {:.1}%, at 5 s: {:.1}% ({:.0} s)",
        100.0 * o.improvement_at(2).unwrap_or(f64::NAN),
        100.0 * o.improvement_at(5).unwrap_or(f64::NAN),
        t.elapsed().as_secs_f64()
    );
}
