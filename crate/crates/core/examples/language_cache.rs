// Label and prompt embeddings are computed once and then served from an
// LRU cache keyed by (role, text).

use efh::{Detector, LanguageCache, ModelConfig};

pub fn run_example() -> efh::Result<()> {
    let model = Detector::<f32>::new(ModelConfig::default())?;
    let cache = LanguageCache::new(4)?;
    let labels: Vec<String> = ["cat", "dog", "bird"].map(String::from).to_vec();

    model.text.encode_labels(&model.store, &labels, Some(&cache))?;
    model.text.encode_prompt(&model.store, "Detect all animals", Some(&cache))?;
    let cold = cache.stats();
    model.text.encode_labels(&model.store, &labels, Some(&cache))?;
    let warm = cache.stats();
    println!("cold: {cold:?}");
    println!("warm: {warm:?}");
    assert_eq!(warm.hits - cold.hits, 3);

    // A fifth distinct text evicts the least recently used entry.
    model.text.encode_prompt(&model.store, "Find a fish", Some(&cache))?;
    println!("after overflow: {:?}", cache.stats());
    Ok(())
}

fn main() -> efh::Result<()> {
    run_example()
}
