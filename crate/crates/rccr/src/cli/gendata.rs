//! Writes the configured synthetic dataset to disk as 8-bit PNGs plus TOML
//! manifests, producing exactly the layout the manifest adapter loads.

use std::path::Path;

use super::{load_config, CliError, CommonArgs};
use crate::data::{generate_scene, Domain, SyntheticSceneSpec};
use crate::core::RngHandle;
use crate::mixing::Sample;

fn write_sample(sample: &Sample, dir: &Path, index: usize) -> Result<(String, String), CliError> {
    let (h, w) = sample.image.dims();
    let mut rgb = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (sample.image.data[[y, x, 0]] * 255.0).round() as u8,
                (sample.image.data[[y, x, 1]] * 255.0).round() as u8,
                (sample.image.data[[y, x, 2]] * 255.0).round() as u8,
            ];
            rgb.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    let mut gray = image::GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            gray.put_pixel(
                x as u32,
                y as u32,
                image::Luma([sample.label.data[[y, x]]]),
            );
        }
    }
    let image_name = format!("img_{index:04}.png");
    let label_name = format!("lab_{index:04}.png");
    rgb.save(dir.join(&image_name))
        .map_err(|e| CliError::Runtime(format!("write {image_name}: {e}")))?;
    gray.save(dir.join(&label_name))
        .map_err(|e| CliError::Runtime(format!("write {label_name}: {e}")))?;
    Ok((image_name, label_name))
}

fn write_split(
    spec: &SyntheticSceneSpec,
    domain: Domain,
    seed: u64,
    base_index: u64,
    len: usize,
    dir: &Path,
    manifest_name: &str,
) -> Result<(), CliError> {
    let split_dir = dir.join(manifest_name.trim_end_matches(".toml"));
    std::fs::create_dir_all(&split_dir)
        .map_err(|e| CliError::Runtime(format!("create {}: {e}", split_dir.display())))?;
    let mut manifest = format!("num_classes = {}\n\n", spec.num_classes);
    for index in 0..len {
        let scene_id = base_index + index as u64;
        let handle = RngHandle::new(seed ^ scene_id.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let sample = generate_scene(spec, &handle, domain)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        let (image_name, label_name) = write_sample(&sample, &split_dir, index)?;
        manifest.push_str(&format!(
            "[[pairs]]\nimage = \"{split}/{image_name}\"\nlabel = \"{split}/{label_name}\"\n\n",
            split = split_dir.file_name().unwrap().to_string_lossy(),
        ));
    }
    std::fs::write(dir.join(manifest_name), manifest)
        .map_err(|e| CliError::Runtime(format!("write {manifest_name}: {e}")))?;
    Ok(())
}

/// `rccr gen-data`: materializes source/target/val splits and manifests.
pub fn cmd_gen_data(common: &CommonArgs) -> Result<(), CliError> {
    let (cfg, _) = load_config(common)?;
    let out = common
        .out
        .clone()
        .unwrap_or_else(|| cfg.output.dir.join("dataset"));
    std::fs::create_dir_all(&out)
        .map_err(|e| CliError::Runtime(format!("create {}: {e}", out.display())))?;
    let spec = &cfg.data.scene;
    let seed = cfg.data.seed;
    // offsets mirror the in-memory synthetic splits
    write_split(spec, Domain::Source, seed, 0, cfg.data.n_source, &out, "source.toml")?;
    write_split(
        spec,
        Domain::Target,
        seed,
        1 << 24,
        cfg.data.n_target,
        &out,
        "target.toml",
    )?;
    write_split(spec, Domain::Target, seed, 1 << 25, cfg.data.n_val, &out, "val.toml")?;
    println!(
        "wrote {} source, {} target, {} val pairs under {}",
        cfg.data.n_source,
        cfg.data.n_target,
        cfg.data.n_val,
        out.display()
    );
    Ok(())
}
