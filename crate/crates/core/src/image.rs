//! PNG encode/decode helpers. The store only needs a decodability check
//! and the mock backend needs small deterministic rasters that carry their
//! generation parameters as text chunks.

use std::collections::BTreeMap;
use std::io::Cursor;

use rand::Rng;

use crate::seed::rng_from_bytes;

/// Text chunk holding the prompt an image was generated from.
pub const PROMPT_KEY: &str = "dtgen:prompt";
/// Text chunk holding the generation seed.
pub const SEED_KEY: &str = "dtgen:seed";

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("not a decodable PNG: {0}")]
    Decode(#[from] png::DecodingError),
    #[error("PNG encoding failed: {0}")]
    Encode(#[from] png::EncodingError),
    #[error("raster of {got} bytes does not match {width}x{height} RGB")]
    Size { width: u32, height: u32, got: usize },
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DecodedPng {
    pub width: u32,
    pub height: u32,
    pub text: BTreeMap<String, String>,
}

/// Encode 8-bit RGB pixels, attaching `text` as iTXt chunks.
pub fn encode_rgb(width: u32, height: u32, rgb: &[u8], text: &[(&str, &str)]) -> Result<Vec<u8>, ImageError> {
    if width == 0 || height == 0 || rgb.len() != (width as usize) * (height as usize) * 3 {
        return Err(ImageError::Size {
            width,
            height,
            got: rgb.len(),
        });
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, width, height);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        for (k, v) in text {
            enc.add_itxt_chunk((*k).to_owned(), (*v).to_owned())?;
        }
        let mut w = enc.write_header()?;
        w.write_image_data(rgb)?;
        w.finish()?;
    }
    Ok(out)
}

/// Fully decode `bytes` and return dimensions and text chunks.
pub fn decode(bytes: &[u8]) -> Result<DecodedPng, ImageError> {
    let mut reader = png::Decoder::new(Cursor::new(bytes)).read_info()?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    reader.next_frame(&mut buf)?;
    reader.finish()?;
    let info = reader.info();
    let mut text = BTreeMap::new();
    for c in &info.uncompressed_latin1_text {
        text.insert(c.keyword.clone(), c.text.clone());
    }
    for c in &info.utf8_text {
        text.insert(c.keyword.clone(), c.get_text()?);
    }
    Ok(DecodedPng {
        width: info.width,
        height: info.height,
        text,
    })
}

/// A blocky image whose colours are a pure function of `key`: an 8x8 grid
/// of flat cells scaled to `width`x`height`.
pub fn blocky_rgb(key: &[u8], width: u32, height: u32) -> Vec<u8> {
    const GRID: usize = 8;
    let mut rng = rng_from_bytes(key);
    let cells: Vec<[u8; 3]> = (0..GRID * GRID).map(|_| rng.random()).collect();
    let (w, h) = (width as usize, height as usize);
    let mut rgb = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        let cy = y * GRID / h;
        for x in 0..w {
            let cx = x * GRID / w;
            rgb.extend_from_slice(&cells[cy * GRID + cx]);
        }
    }
    rgb
}
