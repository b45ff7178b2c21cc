//! Generate a synthetic detection dataset, write it as COCO annotations
//! plus binary pixmaps, and read it back.
//!
//! ```text
//! cargo run --release --example synthetic_dataset -- /tmp/shapes
//! ```

use std::path::PathBuf;

use cdiffdet::data::{generate_synthetic, load_coco_subset, SynthConfig};

fn main() -> cdiffdet::Result<()> {
    let dir: PathBuf = std::env::args().nth(1).map_or_else(
        || std::env::temp_dir().join("cdiffdet-shapes"),
        PathBuf::from,
    );
    let ds = generate_synthetic(&SynthConfig::default(), 12)?;
    ds.save(&dir)?;
    let back = load_coco_subset(&dir)?;
    assert_eq!(back, ds);
    println!("wrote {} images to {}", ds.samples.len(), dir.display());
    println!(
        "categories: {:?}",
        ds.categories.iter().map(|c| &c.name).collect::<Vec<_>>()
    );
    for s in ds.samples.iter().take(3) {
        println!("{}: {:?} classes {:?}", s.file_name, s.boxes, s.classes);
    }
    Ok(())
}
