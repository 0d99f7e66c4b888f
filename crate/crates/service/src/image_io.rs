//! Grayscale image files. Pixels map linearly between `0..=255` and
//! `[-1, 1]`; tensors are `[1, 1, H, W]`.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use dragnoise_core::tensor::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum ImageError {
    #[error("image io: {0}")]
    Io(#[from] std::io::Error),
    #[error("unsupported PGM variant `{0}` (only binary P5 is read)")]
    UnsupportedPgm(String),
    #[error("malformed PGM header: {0}")]
    MalformedPgm(String),
    #[error("png: {0}")]
    Png(String),
    #[error("unsupported image extension for `{0}` (use .pgm or .png)")]
    UnknownFormat(String),
    #[error("image must be [1, 1, H, W] or [H, W], got {0:?}")]
    BadShape(Vec<usize>),
}

pub type Result<T, E = ImageError> = std::result::Result<T, E>;

fn to_unit(v: u8, maxval: u16) -> f32 {
    v as f32 / maxval as f32 * 2.0 - 1.0
}

fn to_byte(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 0.5 * 255.0).round() as u8
}

fn plane(t: &Tensor<f32>) -> Result<(usize, usize)> {
    match *t.shape() {
        [1, 1, h, w] | [h, w] => Ok((h, w)),
        ref s => Err(ImageError::BadShape(s.to_vec())),
    }
}

/// 8-bit pixel bytes, row-major.
pub fn to_bytes(t: &Tensor<f32>) -> Result<(usize, usize, Vec<u8>)> {
    let (h, w) = plane(t)?;
    Ok((h, w, t.data().iter().map(|&v| to_byte(v)).collect()))
}

fn from_bytes(h: usize, w: usize, bytes: &[u8], maxval: u16) -> Tensor<f32> {
    Tensor::new(
        [1, 1, h, w],
        bytes.iter().map(|&b| to_unit(b, maxval)).collect(),
    )
    .expect("h*w bytes")
}

pub fn decode_pgm(bytes: &[u8]) -> Result<Tensor<f32>> {
    let magic = bytes
        .get(..2)
        .ok_or_else(|| ImageError::MalformedPgm("empty file".into()))?;
    match magic {
        b"P5" => {}
        [b'P', d] if d.is_ascii_digit() => {
            return Err(ImageError::UnsupportedPgm(
                String::from_utf8_lossy(magic).into(),
            ));
        }
        _ => return Err(ImageError::MalformedPgm("missing P5 magic".into())),
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, name) in ["width", "height", "maxval"].into_iter().enumerate() {
        // Whitespace and `#` comments may precede each field.
        loop {
            match bytes.get(pos) {
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        fields[i] = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| ImageError::MalformedPgm(format!("bad {name}")))?;
    }
    let [w, h, maxval] = fields;
    if w == 0 || h == 0 {
        return Err(ImageError::MalformedPgm(format!("empty image {w}x{h}")));
    }
    if maxval == 0 || maxval > 255 {
        return Err(ImageError::UnsupportedPgm(format!("P5 maxval {maxval}")));
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(ImageError::MalformedPgm("no separator after maxval".into()));
    }
    pos += 1;
    let n = w
        .checked_mul(h)
        .ok_or_else(|| ImageError::MalformedPgm("dimensions overflow".into()))?;
    let raster = bytes
        .get(pos..)
        .filter(|r| r.len() >= n)
        .ok_or_else(|| ImageError::MalformedPgm(format!("raster shorter than {n} bytes")))?;
    Ok(from_bytes(h, w, &raster[..n], maxval as u16))
}

pub fn encode_pgm(t: &Tensor<f32>) -> Result<Vec<u8>> {
    let (h, w, px) = to_bytes(t)?;
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(&px);
    Ok(out)
}

/// Any PNG; colour images are reduced to luma, alpha is dropped.
pub fn decode_png(bytes: &[u8]) -> Result<Tensor<f32>> {
    let png_err = |e: png::DecodingError| ImageError::Png(e.to_string());
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::normalize_to_color8());
    let mut reader = decoder.read_info().map_err(png_err)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| ImageError::Png("image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = info.color_type.samples();
    let stride = info.line_size;
    let mut gray = Vec::with_capacity(w * h);
    for row in buf.chunks(stride).take(h) {
        for px in row.chunks(channels).take(w) {
            gray.push(match channels {
                1 | 2 => px[0],
                _ => {
                    let l = 0.299 * px[0] as f32 + 0.587 * px[1] as f32 + 0.114 * px[2] as f32;
                    l.round().clamp(0.0, 255.0) as u8
                }
            });
        }
    }
    Ok(from_bytes(h, w, &gray, 255))
}

/// 8-bit grayscale PNG.
pub fn encode_png(t: &Tensor<f32>) -> Result<Vec<u8>> {
    let (h, w, px) = to_bytes(t)?;
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let enc_err = |e: png::EncodingError| ImageError::Png(e.to_string());
        let mut writer = enc.write_header().map_err(enc_err)?;
        writer.write_image_data(&px).map_err(enc_err)?;
        writer.finish().map_err(enc_err)?;
    }
    Ok(out)
}

fn extension(path: &Path) -> String {
    path.extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default()
}

/// Read a `.pgm` or `.png` file.
pub fn load_image(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path)?;
    match extension(path).as_str() {
        "pgm" => decode_pgm(&bytes),
        "png" => decode_png(&bytes),
        _ => Err(ImageError::UnknownFormat(path.display().to_string())),
    }
}

pub fn save_image(t: &Tensor<f32>, path: &Path) -> Result<()> {
    let bytes = match extension(path).as_str() {
        "pgm" => encode_pgm(t)?,
        "png" => encode_png(t)?,
        _ => return Err(ImageError::UnknownFormat(path.display().to_string())),
    };
    fs::write(path, bytes)?;
    Ok(())
}

/// Binary `[H, W]` mask: any nonzero source pixel (value above -1) is
/// editable.
pub fn to_mask(t: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (h, w) = plane(t)?;
    Ok(Tensor::new(
        [h, w],
        t.data()
            .iter()
            .map(|&v| if v > -1.0 { 1.0 } else { 0.0 })
            .collect(),
    )
    .expect("h*w"))
}
