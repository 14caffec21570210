// Overfitting the detector on generated shape scenes, then measuring
// AP@0.5. `STEPS` sets the run length (the full toy run uses 5000).

use efh::training::trainer::{evaluate, synthetic_examples, Trainer};
use efh::{Detector, ModelConfig};

fn steps() -> usize {
    std::env::var("STEPS").ok().and_then(|v| v.parse().ok()).unwrap_or(40)
}

pub fn run_example() -> efh::Result<()> {
    let cfg = ModelConfig::toy();
    let seeds: Vec<u64> = (0..20).collect();
    let data = synthetic_examples::<f32>(&seeds, 64, cfg.max_text_len - 1, 1)?;
    let mut trainer = Trainer::new(Detector::new(cfg)?, steps());
    let mut first = None;
    let mut last = 0.0;
    trainer.run(&data, |r| {
        first.get_or_insert(r.loss);
        last = r.loss;
        if (r.step + 1) % 20 == 0 {
            println!("step {:>5} loss {:.3} lr {:.0e}", r.step + 1, r.loss, r.lr);
        }
    })?;
    println!("loss {:.3} -> {last:.3}", first.unwrap_or(0.0));
    println!("AP@0.5 on training scenes: {:.3}", evaluate(&trainer.model, &data, 0.5)?.mean);
    Ok(())
}

fn main() -> efh::Result<()> {
    run_example()
}
