use std::fs;
use std::path::Path;

use serde::Serialize;

use super::{render::render, Combination, DatasetRegime, GeneratorConfig, RenderParams};
use crate::rng::indexed_stream;
use crate::scene::{canonical_params, enumerate_combinations};
use crate::Error;

#[derive(Clone, Debug, Serialize)]
pub struct DumpEntry {
    pub file: String,
    pub combination: Combination,
    pub label: String,
    pub seed: u64,
    pub params: RenderParams,
}

#[derive(Serialize)]
struct Manifest<'a> {
    regime: DatasetRegime,
    generator: GeneratorConfig,
    master_seed: u64,
    images: &'a [DumpEntry],
}

/// Writes `count` images per combination as
/// `{shapeA}_{shapeB}_{relation}_{index}.png` plus `manifest.json`.
/// For the fixed regime only index 0 exists per combination.
pub fn dump_dataset(
    regime: DatasetRegime,
    cfg: GeneratorConfig,
    count: usize,
    seed: u64,
    out: &Path,
) -> Result<Vec<DumpEntry>, Error> {
    fs::create_dir_all(out)?;
    let source = regime.build(cfg, seed)?;
    let per_combo = if regime == DatasetRegime::Fixed { 1 } else { count };
    let mut entries = Vec::new();
    for combo in enumerate_combinations() {
        for i in 0..per_combo {
            let item_seed = crate::rng::derive_seed(seed, &format!("dump/{}/{i}", combo.index()));
            let (image, params) = if regime == DatasetRegime::Fixed {
                let mut rng = indexed_stream(seed, "dump", item_seed);
                (source.view(combo, &mut rng)?.as_ref().clone(), canonical_params(combo, &cfg))
            } else {
                let mut rng = indexed_stream(seed, "dump", item_seed);
                render(combo, &mut rng, &cfg)?
            };
            let file = format!("{}_{i}.png", combo.label());
            image::save_buffer(
                out.join(&file),
                &image.to_rgb8(),
                image.size() as u32,
                image.size() as u32,
                image::ColorType::Rgb8,
            )
            .map_err(|e| Error::Io(std::io::Error::other(e)))?;
            entries.push(DumpEntry { file, combination: combo, label: combo.label(), seed: item_seed, params });
        }
    }
    let manifest = Manifest { regime, generator: cfg, master_seed: seed, images: &entries };
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(entries)
}
