// Saving and restoring every parameter bit-exactly.

use efh::{Detector, ModelConfig};

pub fn run_example() -> efh::Result<()> {
    let dir = std::env::temp_dir().join(format!("efh-checkpoint-{}", std::process::id()));
    std::fs::create_dir_all(&dir).map_err(|e| efh::Error::io(&dir, e))?;
    let path = dir.join("model.otck");

    let trained = Detector::<f32>::new(ModelConfig { seed: 1, ..ModelConfig::default() })?;
    trained.save_checkpoint(&path)?;
    let mut restored = Detector::<f32>::new(ModelConfig::default())?;
    restored.load_checkpoint(&path)?;
    assert_eq!(restored.store, trained.store);
    println!("{} tensors, {} values restored from {}", trained.store.len(), trained.store.numel(), path.display());
    std::fs::remove_dir_all(&dir).map_err(|e| efh::Error::io(&dir, e))
}

fn main() -> efh::Result<()> {
    run_example()
}
