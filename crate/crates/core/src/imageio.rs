//! RGB image container, PPM/PNG loading, and the patch/augmentation helpers
//! used by the trainer.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use crate::error::{Error, Result};

/// An 8-bit RGB image, channel-interleaved in raster order.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument(format!(
                "image dimensions must be positive, got {width}x{height}"
            )));
        }
        if data.len() != width * height * Self::CHANNELS {
            return Err(Error::DimensionMismatch(format!(
                "{}x{}x3 image needs {} samples, got {}",
                width,
                height,
                width * height * Self::CHANNELS,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Builds an image by evaluating `f(x, y, channel)` for every sample.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize, usize) -> u8) -> Self {
        assert!(width > 0 && height > 0, "image dimensions must be positive");
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    data.push(f(x, y, c));
                }
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        Self::from_fn(width, height, |_, _, c| rgb[c])
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    /// Number of subpixels (`3 * width * height`).
    pub fn subpixel_count(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn into_data(self) -> Vec<u8> {
        self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> u8 {
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: u8) {
        self.data[(y * self.width + x) * 3 + c] = v;
    }
}

/// A square patch anchored at `(row, col)`.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub struct PatchSpec {
    pub row: usize,
    pub col: usize,
    pub size: usize,
}

impl PatchSpec {
    pub fn new(row: usize, col: usize, size: usize) -> Self {
        Self { row, col, size }
    }
}

/// Reads a binary PPM (P6) or 8-bit RGB PNG file.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes)
}

/// Decodes an in-memory PPM or PNG, chosen by signature.
pub fn decode_image(bytes: &[u8]) -> Result<Image> {
    const PNG_SIGNATURE: &[u8] = &[0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a];
    if bytes.starts_with(PNG_SIGNATURE) {
        decode_png(bytes)
    } else {
        decode_ppm(bytes)
    }
}

/// Writes `img` as a binary PPM.
pub fn save_image(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}

/// Canonical P6 serialization: `P6\n<w> <h>\n255\n` followed by the samples.
pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let header = format!("P6\n{} {}\n255\n", img.width, img.height);
    let mut out = Vec::with_capacity(header.len() + img.data.len());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&img.data);
    out
}

pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let mut pos = 0;
    let magic = next_token(bytes, &mut pos)?;
    match magic {
        b"P6" => {}
        b"P5" | b"P2" => return Err(Error::NotRgb("grayscale PGM input".into())),
        b"P1" | b"P4" => return Err(Error::NotRgb("bitmap PBM input".into())),
        b"P3" => return Err(Error::MalformedHeader("ASCII PPM (P3) is not supported".into())),
        _ => return Err(Error::MalformedHeader("missing P6 magic".into())),
    }
    let width = parse_header_number(bytes, &mut pos, "width")?;
    let height = parse_header_number(bytes, &mut pos, "height")?;
    let maxval = parse_header_number(bytes, &mut pos, "maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::MalformedHeader(format!("zero dimension {width}x{height}")));
    }
    if maxval != 255 {
        let bits = usize::BITS - maxval.leading_zeros();
        return Err(Error::UnsupportedBitDepth(if maxval > 255 { 16 } else { bits }));
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::MalformedHeader("missing separator after maxval".into())),
    }
    let len = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| Error::MalformedHeader("dimensions overflow".into()))?;
    let raster = &bytes[pos..];
    if raster.len() < len {
        return Err(Error::CorruptPayload(format!(
            "PPM raster truncated: expected {len} bytes, found {}",
            raster.len()
        )));
    }
    Image::new(width, height, raster[..len].to_vec())
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while let Some(&b) = bytes.get(*pos) {
                    *pos += 1;
                    if b == b'\n' || b == b'\r' {
                        break;
                    }
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(Error::MalformedHeader("unexpected end of header".into())),
        }
    }
    let start = *pos;
    while let Some(b) = bytes.get(*pos) {
        if b.is_ascii_whitespace() || *b == b'#' {
            break;
        }
        *pos += 1;
    }
    Ok(&bytes[start..*pos])
}

fn parse_header_number(bytes: &[u8], pos: &mut usize, what: &str) -> Result<usize> {
    let tok = next_token(bytes, pos)?;
    if tok.is_empty() || !tok.iter().all(u8::is_ascii_digit) || tok.len() > 9 {
        return Err(Error::MalformedHeader(format!(
            "bad {what} field {:?}",
            String::from_utf8_lossy(tok)
        )));
    }
    Ok(std::str::from_utf8(tok).unwrap().parse().unwrap())
}

fn decode_png(bytes: &[u8]) -> Result<Image> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::MalformedHeader(format!("png: {e}")))?;
    let (color, depth) = reader.output_color_type();
    if depth != png::BitDepth::Eight {
        return Err(Error::UnsupportedBitDepth(depth as u32));
    }
    if color != png::ColorType::Rgb {
        return Err(Error::NotRgb(format!("png color type {color:?}")));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::MalformedHeader("png: image too large".into()))?;
    let mut buf = vec![0; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::CorruptPayload(format!("png: {e}")))?;
    buf.truncate(info.buffer_size());
    Image::new(info.width as usize, info.height as usize, buf)
}

/// Loads every `.ppm`/`.png` file in `dir`, sorted by file name.
pub fn load_dir(dir: impl AsRef<Path>) -> Result<Vec<(String, Image)>> {
    let dir = dir.as_ref();
    let mut names = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if matches!(ext.as_deref(), Some("ppm") | Some("png")) {
            names.push(path);
        }
    }
    names.sort();
    names
        .into_iter()
        .map(|p| {
            let id = p.file_stem().and_then(|s| s.to_str()).unwrap_or_default().to_string();
            load_image(&p).map(|img| (id, img))
        })
        .collect()
}

pub fn crop(img: &Image, spec: PatchSpec) -> Result<Image> {
    let fits = spec.size > 0
        && spec.row.checked_add(spec.size).is_some_and(|end| end <= img.height)
        && spec.col.checked_add(spec.size).is_some_and(|end| end <= img.width);
    if !fits {
        return Err(Error::OutOfBounds(format!(
            "patch {}x{} at ({}, {}) does not fit a {}x{} image",
            spec.size, spec.size, spec.row, spec.col, img.width, img.height
        )));
    }
    let mut data = Vec::with_capacity(spec.size * spec.size * 3);
    for y in spec.row..spec.row + spec.size {
        let start = (y * img.width + spec.col) * 3;
        data.extend_from_slice(&img.data[start..start + spec.size * 3]);
    }
    Image::new(spec.size, spec.size, data)
}

/// Catmull-Rom cubic convolution kernel (a = -0.5).
pub fn catmull_rom(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// Downscales by `factor` in `[0.6, 1.0]` with separable Catmull-Rom
/// interpolation; source coordinates outside the image are clamped.
pub fn downscale_bicubic(img: &Image, factor: f64) -> Result<Image> {
    if !(0.6..=1.0).contains(&factor) {
        return Err(Error::InvalidArgument(format!(
            "downscale factor {factor} outside [0.6, 1.0]"
        )));
    }
    let out_w = ((img.width as f64 * factor).round() as usize).max(1);
    let out_h = ((img.height as f64 * factor).round() as usize).max(1);
    let taps_x = resample_taps(img.width, out_w);
    let taps_y = resample_taps(img.height, out_h);

    // horizontal pass: height x out_w x 3
    let mut tmp = vec![0.0f64; img.height * out_w * 3];
    for y in 0..img.height {
        for (ox, taps) in taps_x.iter().enumerate() {
            for c in 0..3 {
                let mut acc = 0.0;
                for &(sx, wt) in taps {
                    acc += wt * f64::from(img.get(sx, y, c));
                }
                tmp[(y * out_w + ox) * 3 + c] = acc;
            }
        }
    }
    let mut data = Vec::with_capacity(out_w * out_h * 3);
    for taps in &taps_y {
        for ox in 0..out_w {
            for c in 0..3 {
                let mut acc = 0.0;
                for &(sy, wt) in taps {
                    acc += wt * tmp[(sy * out_w + ox) * 3 + c];
                }
                data.push(acc.round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    Image::new(out_w, out_h, data)
}

fn resample_taps(in_len: usize, out_len: usize) -> Vec<[(usize, f64); 4]> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let base = src.floor() as isize;
            let mut taps = [(0usize, 0.0f64); 4];
            for (j, tap) in taps.iter_mut().enumerate() {
                let s = base - 1 + j as isize;
                let idx = s.clamp(0, in_len as isize - 1) as usize;
                *tap = (idx, catmull_rom(src - s as f64));
            }
            taps
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_pixel_white() {
        let img = decode_ppm(b"P6\n1 1\n255\n\xff\xff\xff").unwrap();
        assert_eq!(img, Image::new(1, 1, vec![255, 255, 255]).unwrap());
    }

    #[test]
    fn hand_built_two_by_two() {
        let mut file = b"P6 2 2 255\n".to_vec();
        file.extend_from_slice(&[0, 0, 0, 255, 0, 0, 0, 255, 0, 0, 0, 255]);
        let img = decode_ppm(&file).unwrap();
        assert_eq!(img.width(), 2);
        assert_eq!(img.height(), 2);
        assert_eq!(&img.data()[3..6], &[255, 0, 0]);
        assert_eq!(&img.data()[6..9], &[0, 255, 0]);
        assert_eq!(&img.data()[9..12], &[0, 0, 255]);
    }

    #[test]
    fn header_comments_are_skipped() {
        let img = decode_ppm(b"P6\n# made by hand\n1 # width\n1\n255\n\x01\x02\x03").unwrap();
        assert_eq!(img.data(), &[1, 2, 3]);
    }

    #[test]
    fn text_file_is_malformed() {
        assert!(matches!(decode_ppm(b"hello"), Err(Error::MalformedHeader(_))));
    }

    #[test]
    fn sixteen_bit_and_gray_rejected() {
        assert!(matches!(
            decode_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0"),
            Err(Error::UnsupportedBitDepth(16))
        ));
        assert!(matches!(decode_ppm(b"P5\n1 1\n255\n\0"), Err(Error::NotRgb(_))));
    }

    #[test]
    fn truncated_raster() {
        assert!(matches!(
            decode_ppm(b"P6\n2 1\n255\n\0\0\0"),
            Err(Error::CorruptPayload(_))
        ));
    }

    #[test]
    fn black_pixel_serialization() {
        let img = Image::filled(1, 1, [0, 0, 0]);
        assert_eq!(encode_ppm(&img), b"P6\n1 1\n255\n\0\0\0");
    }

    #[test]
    fn crop_index_arithmetic() {
        let img = Image::from_fn(2, 2, |x, y, c| (10 * y + 3 * x + c) as u8);
        let br = crop(&img, PatchSpec::new(1, 1, 1)).unwrap();
        assert_eq!(br.data(), &[13, 14, 15]);
        assert_eq!(crop(&img, PatchSpec::new(0, 0, 2)).unwrap(), img);
        assert!(matches!(
            crop(&img, PatchSpec::new(1, 0, 2)),
            Err(Error::OutOfBounds(_))
        ));
    }

    #[test]
    fn downscale_identity_and_constant() {
        let img = Image::from_fn(9, 7, |x, y, c| (x * 20 + y * 7 + c * 40) as u8);
        assert_eq!(downscale_bicubic(&img, 1.0).unwrap(), img);
        let gray = Image::filled(20, 13, [77, 77, 77]);
        for f in [0.6, 0.73, 0.9] {
            let out = downscale_bicubic(&gray, f).unwrap();
            assert!(out.data().iter().all(|&v| v == 77));
        }
        assert!(downscale_bicubic(&img, 0.5).is_err());
        assert!(downscale_bicubic(&img, 1.01).is_err());
    }

    #[test]
    fn kernel_partition_of_unity() {
        for i in 0..100 {
            let t = i as f64 / 100.0;
            let s: f64 = (-1..=2).map(|k| catmull_rom(t - k as f64)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
