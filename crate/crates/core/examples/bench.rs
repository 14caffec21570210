// Module-wise inference latency with and without the language cache.

use efh::bench::{run_bench, BenchInput, TABLE_HEADER};
use efh::training::synth::{generate_synthetic_scene, label_names};
use efh::{Detector, ModelConfig};

pub fn run_example() -> efh::Result<()> {
    let model = Detector::<f32>::new(ModelConfig::default())?;
    let scene = generate_synthetic_scene::<f32>(0, 64)?;
    let input = BenchInput {
        images: vec![("scene-0".into(), scene.image)],
        labels: label_names(),
        prompt: "Detect all objects in the image".into(),
    };
    println!("{TABLE_HEADER}");
    for cache in [false, true] {
        let t = run_bench(&model, &input, cache, 2, 10)?;
        let name = if cache { "cache on" } else { "cache off" };
        println!("{}", t.table_row(name));
    }
    Ok(())
}

fn main() -> efh::Result<()> {
    run_example()
}
