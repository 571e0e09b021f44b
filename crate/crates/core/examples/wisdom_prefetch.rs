//! Filling a wisdom store and prefetching entries for a new task by cosine
//! similarity of their descriptors.
//!
//! cargo run --example wisdom_prefetch

use hcc::gateway::{embed, HashingEmbedder};
use hcc::wisdom::{OverwritePolicy, PrefetchConfig, WisdomStore};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let embedder = HashingEmbedder::new(64, 7);
    let mut store = WisdomStore::new(64);
    let past = [
        ("digits", "Image classification of handwritten digits scored by accuracy.", "CNNs with light augmentation."),
        ("sales", "Forecasting weekly retail sales for many stores scored by RMSE.", "Lag features and GBDT."),
        ("reviews", "Sentiment classification of movie review text scored by F1.", "Fine-tuned small transformer."),
    ];
    for (id, descriptor, wisdom) in past {
        store.insert(id, descriptor, &embed(&embedder, descriptor)?, wisdom, OverwritePolicy::Reject)?;
    }

    let query = embed(&embedder, "Forecasting daily sales for retail stores scored by RMSE.")?;
    println!("all similarities:");
    for p in store.similarities(&query)? {
        println!("  {:.3}  {}", p.similarity, p.entry.task_id);
    }
    let cfg = PrefetchConfig { delta: 0.6, max_prefetch: 3 };
    for p in store.prefetch(&query, cfg)? {
        println!("prefetched {} ({:.3}): {}", p.entry.task_id, p.similarity, p.entry.wisdom);
    }

    let dir = tempfile::tempdir()?;
    store.save(dir.path())?;
    let loaded = WisdomStore::load(dir.path())?;
    println!("reloaded {} entries, version {}", loaded.len(), loaded.version());
    Ok(())
}
