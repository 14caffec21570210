// Open-vocabulary detection on a generated scene: labels and a free-form
// prompt go in, scored boxes come out as JSON.

use efh::training::synth::{generate_synthetic_scene, label_names};
use efh::{Detector, LanguageCache, ModelConfig};

pub fn run_example() -> efh::Result<()> {
    let model = Detector::<f32>::new(ModelConfig::default())?;
    let scene = generate_synthetic_scene::<f32>(3, 64)?;
    let labels = label_names();
    let prompt = "Find the circles and triangles";

    let plain = model.detect(&scene.image, "scene-3", &labels, prompt, None)?;
    let cache = LanguageCache::new(16)?;
    let cached = model.detect(&scene.image, "scene-3", &labels, prompt, Some(&cache))?;
    assert_eq!(plain.to_json(), cached.to_json());

    println!("{} detections above {}", plain.detections.len(), model.cfg.score_threshold);
    for d in plain.detections.iter().take(3) {
        println!("  {:>16} {:.3} {:?}", labels[d.label], d.score, d.bbox);
    }
    Ok(())
}

fn main() -> efh::Result<()> {
    run_example()
}
