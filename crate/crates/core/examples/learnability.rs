//! Synthetic learnability run with overridable knobs:
//!
//! ```text
//! cargo run --release -p helioprop --example learnability -- epochs=300 batch=32 horizon=5 seed=0
//! ```

use std::time::Instant;

use helioprop::benchmark::{run_learnability, LearnabilityConfig};

fn main() -> helioprop::Result<()> {
    let mut cfg = LearnabilityConfig::default();
    for arg in std::env::args().skip(1) {
        let (k, v) = arg.split_once('=').expect("arguments are key=value");
        match k {
            "epochs" => cfg.train.epochs = v.parse().unwrap(),
            "batch" => cfg.train.batch_size = v.parse().unwrap(),
            "horizon" => cfg.train.horizon = v.parse().unwrap(),
            "lr" => cfg.train.learning_rate = v.parse().unwrap(),
            "seed" => cfg.train.seed = v.parse().unwrap(),
            "data_seed" => cfg.synth.seed = v.parse().unwrap(),
            "sharpness" => cfg.synth.interface_sharpness = v.parse().unwrap(),
            "stream_lmax" => cfg.synth.stream_lmax = v.parse().unwrap(),
            "channels" => cfg.hidden_channels = v.parse().unwrap(),
            _ => panic!("unknown knob {k}"),
        }
    }
    let t = Instant::now();
    let res = run_learnability(&cfg)?;
    let h = &res.outcome.history;
    println!(
        "loss {:.5} -> {:.5} (best epoch {})",
        res.outcome.initial_train_loss,
        h.last().map_or(f64::NAN, |r| r.train_loss),
        res.outcome.best_epoch
    );
    println!(
        "model mse {:.2}  baseline mse {:.2}  ratio {:.4}  ({:.1}s)",
        res.model_mse,
        res.baseline_mse,
        res.ratio(),
        t.elapsed().as_secs_f64()
    );
    Ok(())
}
