//! PNG and on-disk stack format.
//!
//! A stack directory holds `source.png`, `lineart.png`, `flat.png`,
//! `highlight.png`, `shadow.png` and a `manifest.json` with the keys
//! `width`, `height`, `modes` (role tag -> blend mode tag) and `order`
//! (role tags, bottom to top).

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{BlendMode, LayerRole, LayerStack, RasterImage};
use crate::error::{Error, Result};

pub fn write_png(path: &Path, img: &RasterImage) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), img.width() as u32, img.height() as u32);
    enc.set_color(png::ColorType::Rgba);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::load(path, e))?;
    writer
        .write_image_data(&img.to_rgba8())
        .map_err(|e| Error::load(path, e))?;
    writer.finish().map_err(|e| Error::load(path, e))
}

/// Reads an 8-bit RGBA (or RGB / gray, expanded) PNG.
pub fn read_png(path: &Path) -> Result<RasterImage> {
    let file = File::open(path).map_err(|e| Error::load(path, e))?;
    let mut dec = png::Decoder::new(BufReader::new(file));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info().map_err(|e| Error::load(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::load(path, "image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::load(path, e))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let bytes = &buf[..info.buffer_size()];
    let rgba: Vec<u8> = match info.color_type {
        png::ColorType::Rgba => bytes.to_vec(),
        png::ColorType::Rgb => bytes
            .chunks_exact(3)
            .flat_map(|p| [p[0], p[1], p[2], 255])
            .collect(),
        png::ColorType::GrayscaleAlpha => bytes
            .chunks_exact(2)
            .flat_map(|p| [p[0], p[0], p[0], p[1]])
            .collect(),
        png::ColorType::Grayscale => bytes.iter().flat_map(|&g| [g, g, g, 255]).collect(),
        other => return Err(Error::load(path, format!("unsupported color type {other:?}"))),
    };
    RasterImage::from_rgba8(h, w, &rgba).map_err(|e| Error::load(path, e))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackManifest {
    pub width: usize,
    pub height: usize,
    pub modes: BTreeMap<LayerRole, BlendMode>,
    pub order: Vec<LayerRole>,
}

impl StackManifest {
    pub fn of(stack: &LayerStack) -> Self {
        let (height, width) = stack.dims();
        Self {
            width,
            height,
            modes: LayerRole::ALL.iter().map(|&r| (r, stack.mode(r))).collect(),
            order: stack.order().to_vec(),
        }
    }
}

pub(crate) fn layer_file(role: LayerRole) -> String {
    format!("{}.png", role.tag())
}

pub fn write_stack_dir(dir: &Path, source: &RasterImage, stack: &LayerStack) -> Result<()> {
    if source.dims() != stack.dims() {
        return Err(Error::shape("source and stack sizes differ"));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_png(&dir.join("source.png"), source)?;
    for role in LayerRole::ALL {
        write_png(&dir.join(layer_file(role)), stack.layer(role))?;
    }
    let manifest = serde_json::to_string_pretty(&StackManifest::of(stack))
        .map_err(|e| Error::Parse(e.to_string()))?;
    let path = dir.join("manifest.json");
    std::fs::write(&path, manifest + "\n").map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<StackManifest> {
    let path = dir.join("manifest.json");
    let text = std::fs::read_to_string(&path).map_err(|e| Error::load(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::load(&path, e))
}

/// Loads `(source, stack)` from a stack directory.
pub fn read_stack_dir(dir: &Path) -> Result<(RasterImage, LayerStack)> {
    let manifest = read_manifest(dir)?;
    let source = read_png(&dir.join("source.png"))?;
    let load = |role: LayerRole| read_png(&dir.join(layer_file(role)));
    let layers = [
        load(LayerRole::Lineart)?,
        load(LayerRole::FlatColor)?,
        load(LayerRole::Highlight)?,
        load(LayerRole::Shadow)?,
    ];
    let mpath = dir.join("manifest.json");
    if source.dims() != (manifest.height, manifest.width) {
        return Err(Error::load(
            &mpath,
            format!(
                "manifest says {}x{}, source is {:?}",
                manifest.height,
                manifest.width,
                source.dims()
            ),
        ));
    }
    let order: [LayerRole; 4] = manifest
        .order
        .clone()
        .try_into()
        .map_err(|_| Error::load(&mpath, "order must list four roles"))?;
    let mut stack = LayerStack::from_layers(layers)
        .map_err(|e| Error::load(dir, e))?
        .with_order(order)
        .map_err(|e| Error::load(&mpath, e))?;
    for (role, mode) in &manifest.modes {
        stack.set_mode(*role, *mode);
    }
    Ok((source, stack))
}
