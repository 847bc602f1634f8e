//! PNG reading and writing for images and label maps.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use ndarray::{Array2, Array3};

use crate::error::{Error, Result};

/// Colours for label indices 0..; index 0 is black, 1 white.
pub const LABEL_PALETTE: [[u8; 3]; 8] = [
    [0, 0, 0],
    [255, 255, 255],
    [220, 60, 50],
    [50, 190, 80],
    [60, 90, 220],
    [230, 200, 40],
    [170, 80, 200],
    [40, 200, 210],
];

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

struct Decoded {
    width: usize,
    height: usize,
    color: png::ColorType,
    data: Vec<u8>,
}

fn decode(path: &Path, expand_palette: bool) -> Result<Decoded> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    let mut t = png::Transformations::STRIP_16;
    if expand_palette {
        t |= png::Transformations::EXPAND;
    }
    decoder.set_transformations(t);
    let mut reader = decoder.read_info().map_err(|e| image_err(path, e))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| image_err(path, e))?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(image_err(path, format!("unsupported bit depth {:?}", info.bit_depth)));
    }
    buf.truncate(info.buffer_size());
    Ok(Decoded {
        width: info.width as usize,
        height: info.height as usize,
        color: info.color_type,
        data: buf,
    })
}

/// 8-bit RGB(A)/grey/paletted PNG as an H×W×3 byte array.
pub fn read_rgb_u8(path: &Path) -> Result<Array3<u8>> {
    let d = decode(path, true)?;
    let (h, w) = (d.height, d.width);
    let ch = match d.color {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(image_err(path, "palette was not expanded")),
    };
    Ok(Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
        let px = &d.data[(y * w + x) * ch..(y * w + x + 1) * ch];
        if ch < 3 {
            px[0]
        } else {
            px[c]
        }
    }))
}

/// RGB image normalised to [0, 1].
pub fn read_rgb(path: &Path) -> Result<Array3<f32>> {
    Ok(read_rgb_u8(path)?.mapv(|v| v as f32 / 255.0))
}

/// Writes an H×W×C image in [0, 1] as 8-bit RGB (C = 1 is replicated).
pub fn write_rgb(path: &Path, img: &Array3<f32>) -> Result<()> {
    let (h, w, c) = img.dim();
    if c != 1 && c != 3 {
        return Err(image_err(path, format!("cannot write {c}-channel image")));
    }
    let mut data = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            for k in 0..3 {
                let v = img[[y, x, if c == 1 { 0 } else { k }]];
                data.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    encode(path, w, h, png::ColorType::Rgb, None, &data)
}

fn encode(path: &Path, w: usize, h: usize, color: png::ColorType, palette: Option<Vec<u8>>, data: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    if let Some(p) = palette {
        enc.set_palette(p);
    }
    let mut writer = enc.write_header().map_err(|e| image_err(path, e))?;
    writer.write_image_data(data).map_err(|e| image_err(path, e))?;
    writer.finish().map_err(|e| image_err(path, e))
}

/// Writes a label map as a paletted PNG; values index [`LABEL_PALETTE`].
pub fn write_label(path: &Path, labels: &Array2<u8>) -> Result<()> {
    let (h, w) = labels.dim();
    if let Some(&v) = labels.iter().find(|&&v| v as usize >= LABEL_PALETTE.len()) {
        return Err(image_err(path, format!("label {v} has no palette entry")));
    }
    let palette: Vec<u8> = LABEL_PALETTE.iter().flatten().copied().collect();
    let data: Vec<u8> = labels.iter().copied().collect();
    encode(path, w, h, png::ColorType::Indexed, Some(palette), &data)
}

/// Label map from a paletted (raw indices) or greyscale (raw values) PNG.
pub fn read_label(path: &Path) -> Result<Array2<u8>> {
    let d = decode(path, false)?;
    let step = match d.color {
        png::ColorType::Indexed | png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        other => return Err(image_err(path, format!("label map must be paletted or greyscale, got {other:?}"))),
    };
    let (h, w) = (d.height, d.width);
    Ok(Array2::from_shape_fn((h, w), |(y, x)| d.data[(y * w + x) * step]))
}
