//! Image rasters, PGM/PPM/PNG codecs and dataset enumeration.
//!
//! Intensities live on the 0–255 scale in real numbers. Byte value `v`
//! loads as exactly `v`; noise may push values outside `[0, 255]`.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// ITU-R BT.601 luma weights.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// Dense row-major, channel-interleaved raster.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<T> {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<T>,
    tag: String,
}

impl<T: Scalar> Image<T> {
    pub fn new(
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<T>,
        tag: impl Into<String>,
    ) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Shape(format!("channels must be 1 or 3, got {channels}")));
        }
        if data.len() != width * height * channels {
            return Err(Error::Shape(format!(
                "data length {} != {width}x{height}x{channels}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite intensity at index {i}")));
        }
        Ok(Image {
            width,
            height,
            channels,
            data,
            tag: tag.into(),
        })
    }

    /// Image filled with a single value.
    pub fn constant(width: usize, height: usize, channels: usize, value: T) -> Result<Self> {
        Self::new(width, height, channels, vec![value; width * height * channels], "constant")
    }

    /// Build from a per-pixel closure `f(x, y, c)`.
    pub fn from_fn(
        width: usize,
        height: usize,
        channels: usize,
        tag: impl Into<String>,
        mut f: impl FnMut(usize, usize, usize) -> T,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self::new(width, height, channels, data, tag)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn with_tag(mut self, tag: impl Into<String>) -> Self {
        self.tag = tag.into();
        self
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> T {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// One channel as a contiguous plane.
    pub fn plane(&self, c: usize) -> Vec<T> {
        self.data.iter().skip(c).step_by(self.channels).copied().collect()
    }

    /// Single-channel copy of channel `c`.
    pub fn channel_image(&self, c: usize) -> Image<T> {
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data: self.plane(c),
            tag: format!("{}#c{c}", self.tag),
        }
    }

    /// Luma conversion; gray images are returned unchanged.
    pub fn to_gray(&self) -> Image<T> {
        if self.channels == 1 {
            return self.clone();
        }
        let w = LUMA_WEIGHTS.map(T::from_f64_lossy);
        let data = self
            .data
            .chunks_exact(3)
            .map(|px| w[0] * px[0] + w[1] * px[1] + w[2] * px[2])
            .collect();
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
            tag: self.tag.clone(),
        }
    }

    /// Rectangular crop with top-left corner `(x0, y0)`.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Image<T>> {
        if x0 + w > self.width || y0 + h > self.height {
            return Err(Error::Shape(format!(
                "crop {w}x{h}+{x0}+{y0} exceeds {}x{}",
                self.width, self.height
            )));
        }
        let c = self.channels;
        let mut data = Vec::with_capacity(w * h * c);
        for y in y0..y0 + h {
            let row = (y * self.width + x0) * c;
            data.extend_from_slice(&self.data[row..row + w * c]);
        }
        Ok(Image {
            width: w,
            height: h,
            channels: c,
            data,
            tag: self.tag.clone(),
        })
    }

    pub fn cast<U: Scalar>(&self) -> Image<U> {
        Image {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|v| U::from_f64_lossy(v.to_f64_lossy())).collect(),
            tag: self.tag.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Format {
    Pgm,
    Ppm,
    Png,
}

fn format_for_path(path: &Path) -> Option<Format> {
    let ext = path.extension()?.to_str()?.to_ascii_lowercase();
    match ext.as_str() {
        "pgm" => Some(Format::Pgm),
        "ppm" => Some(Format::Ppm),
        "png" => Some(Format::Png),
        _ => None,
    }
}

const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a];

/// Decode a PGM (P5), PPM (P6) or 8-bit gray/RGB PNG file.
pub fn load_image<T: Scalar>(path: impl AsRef<Path>) -> Result<Image<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let tag = path.display().to_string();
    let (w, h, c, raw) = decode_bytes(&bytes)?;
    let data = raw.into_iter().map(|b| T::from_u8(b).unwrap()).collect();
    Image::new(w, h, c, data, tag)
}

/// Decode an in-memory image file into `(width, height, channels, bytes)`.
pub fn decode_bytes(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    if bytes.starts_with(&PNG_SIGNATURE) {
        return decode_png(bytes);
    }
    match bytes.get(..2) {
        Some(b"P5") => decode_pnm(bytes, 1),
        Some(b"P6") => decode_pnm(bytes, 3),
        Some(m) => Err(Error::UnsupportedFormat(format!(
            "magic {:?}",
            String::from_utf8_lossy(m)
        ))),
        None => Err(Error::Malformed("file shorter than a format signature".into())),
    }
}

struct PnmCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl PnmCursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&b) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if b == b'\n' || b == b'\r' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Malformed("expected a decimal header field".into()));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .unwrap()
            .parse()
            .map_err(|_| Error::Malformed("header field overflows".into()))
    }
}

fn decode_pnm(bytes: &[u8], channels: usize) -> Result<(usize, usize, usize, Vec<u8>)> {
    let mut cur = PnmCursor { bytes, pos: 2 };
    let width = cur.number()?;
    let height = cur.number()?;
    let maxval = cur.number()?;
    if maxval != 255 {
        return Err(Error::UnsupportedFormat(format!("PNM maxval {maxval} (only 255)")));
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => cur.pos += 1,
        _ => return Err(Error::Malformed("missing whitespace after maxval".into())),
    }
    let need = width * height * channels;
    let payload = &bytes[cur.pos..];
    if payload.len() < need {
        return Err(Error::Malformed(format!(
            "raster has {} bytes, header promises {need}",
            payload.len()
        )));
    }
    Ok((width, height, channels, payload[..need].to_vec()))
}

fn decode_png(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<u8>)> {
    let malformed = |e: png::DecodingError| Error::Malformed(format!("png: {e}"));
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(malformed)?;
    let (color, depth) = reader.output_color_type();
    if depth != png::BitDepth::Eight {
        return Err(Error::UnsupportedFormat(format!("png bit depth {depth:?}")));
    }
    let channels = match color {
        png::ColorType::Grayscale => 1,
        png::ColorType::Rgb => 3,
        other => {
            return Err(Error::UnsupportedFormat(format!("png color type {other:?}")));
        }
    };
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Malformed("png too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(malformed)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let line = info.line_size;
    let mut out = Vec::with_capacity(w * h * channels);
    for row in buf.chunks(line).take(h) {
        out.extend_from_slice(&row[..w * channels]);
    }
    Ok((w, h, channels, out))
}

/// Quantize to bytes. With `clamp` values are clipped to `[0, 255]`;
/// otherwise an out-of-range value is an error. Rounding is half-to-even.
pub fn to_bytes<T: Scalar>(img: &Image<T>, clamp: bool) -> Result<Vec<u8>> {
    img.data
        .iter()
        .enumerate()
        .map(|(index, v)| {
            let v = v.to_f64_lossy();
            let v = if clamp {
                v.clamp(0.0, 255.0)
            } else if !(0.0..=255.0).contains(&v) {
                return Err(Error::OutOfRange { index, value: v });
            } else {
                v
            };
            Ok(v.round_ties_even() as u8)
        })
        .collect()
}

/// Encode according to the file extension (`.pgm`, `.ppm`, `.png`).
pub fn save_image<T: Scalar>(img: &Image<T>, path: impl AsRef<Path>, clamp: bool) -> Result<()> {
    let path = path.as_ref();
    let format = format_for_path(path).ok_or_else(|| {
        Error::UnsupportedFormat(format!("cannot infer format from {}", path.display()))
    })?;
    let bytes = encode_bytes(img, format, clamp)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn encode_bytes<T: Scalar>(img: &Image<T>, format: Format, clamp: bool) -> Result<Vec<u8>> {
    let raster = to_bytes(img, clamp)?;
    match (format, img.channels) {
        (Format::Pgm, 1) | (Format::Ppm, 3) => {
            let magic = if img.channels == 1 { "P5" } else { "P6" };
            let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
            out.extend_from_slice(&raster);
            Ok(out)
        }
        (Format::Png, c) => {
            let mut out = Vec::new();
            {
                let mut enc = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
                enc.set_color(if c == 1 {
                    png::ColorType::Grayscale
                } else {
                    png::ColorType::Rgb
                });
                enc.set_depth(png::BitDepth::Eight);
                let enc_err = |e: png::EncodingError| Error::Malformed(format!("png encode: {e}"));
                let mut writer = enc.write_header().map_err(enc_err)?;
                writer.write_image_data(&raster).map_err(enc_err)?;
            }
            Ok(out)
        }
        (f, c) => Err(Error::UnsupportedFormat(format!(
            "{f:?} cannot hold {c}-channel images"
        ))),
    }
}

/// Header entry of a [`DatasetManifest`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub width: usize,
    pub height: usize,
    pub channels: usize,
}

/// Sorted, duplicate-free list of the images in one dataset directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub name: String,
    entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(name: impl Into<String>, mut entries: Vec<ManifestEntry>) -> Result<Self> {
        entries.sort_by(|a, b| a.path.cmp(&b.path));
        if let Some(w) = entries.windows(2).find(|w| w[0].path == w[1].path) {
            return Err(Error::InvalidArgument(format!(
                "duplicate manifest path {}",
                w[0].path.display()
            )));
        }
        Ok(DatasetManifest {
            name: name.into(),
            entries,
        })
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// JSON array of `{path, width, height, channels}`.
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.entries)?)
    }

    /// Decode every entry, in manifest order.
    pub fn load_all<T: Scalar>(&self) -> Result<Vec<Image<T>>> {
        self.entries.iter().map(|e| load_image(&e.path)).collect()
    }
}

/// Read just enough of the file to learn its dimensions.
fn probe(path: &Path) -> Result<(usize, usize, usize)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (w, h, c, _) = decode_bytes(&bytes)?;
    Ok((w, h, c))
}

/// Enumerate every supported image (by extension) directly inside `dir`.
pub fn scan_dataset(dir: impl AsRef<Path>, name: impl Into<String>) -> Result<DatasetManifest> {
    let dir = dir.as_ref();
    let mut entries = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if !path.is_file() || format_for_path(&path).is_none() {
            continue;
        }
        let (width, height, channels) = probe(&path)?;
        entries.push(ManifestEntry {
            path,
            width,
            height,
            channels,
        });
    }
    DatasetManifest::new(name, entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_encoded_pgm() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        let mut bytes = b"P5\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 255]);
        fs::write(&p, bytes).unwrap();
        let img: Image<f64> = load_image(&p).unwrap();
        assert_eq!((img.width(), img.height(), img.channels()), (2, 1, 1));
        assert_eq!(img.data(), &[0.0, 255.0]);
    }

    #[test]
    fn hand_encoded_ppm_with_comment() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ppm");
        let mut bytes = b"P6\n# one pixel\n1 1\n255\n".to_vec();
        bytes.extend_from_slice(&[10, 20, 30]);
        fs::write(&p, bytes).unwrap();
        let img: Image<f64> = load_image(&p).unwrap();
        assert_eq!(img.channels(), 3);
        assert_eq!(img.data(), &[10.0, 20.0, 30.0]);
    }

    #[test]
    fn rejects_p7_and_truncation_and_maxval() {
        assert!(matches!(
            decode_bytes(b"P7\n1 1\n255\n\0"),
            Err(Error::UnsupportedFormat(_))
        ));
        assert!(matches!(
            decode_bytes(b"P5\n2 2\n255\n\0\0"),
            Err(Error::Malformed(_))
        ));
        assert!(matches!(
            decode_bytes(b"P5\n1 1\n65535\n\0\0"),
            Err(Error::UnsupportedFormat(_))
        ));
    }

    #[test]
    fn png_alpha_and_sixteen_bit_rejected() {
        for (color, depth, bpp) in [
            (png::ColorType::Rgba, png::BitDepth::Eight, 4),
            (png::ColorType::Grayscale, png::BitDepth::Sixteen, 2),
        ] {
            let mut out = Vec::new();
            {
                let mut enc = png::Encoder::new(&mut out, 1, 1);
                enc.set_color(color);
                enc.set_depth(depth);
                let mut w = enc.write_header().unwrap();
                w.write_image_data(&vec![7u8; bpp]).unwrap();
            }
            assert!(matches!(decode_bytes(&out), Err(Error::UnsupportedFormat(_))));
        }
    }

    #[test]
    fn save_clamps_and_rounds_half_even() {
        let img = Image::new(4, 1, 1, vec![255.6, -3.0, 2.5, 3.5], "t").unwrap();
        assert_eq!(to_bytes(&img, true).unwrap(), vec![255, 0, 2, 4]);
        assert!(matches!(to_bytes(&img, false), Err(Error::OutOfRange { index: 0, .. })));
        let neg = Image::new(1, 1, 1, vec![-3.0], "t").unwrap();
        assert!(matches!(to_bytes(&neg, false), Err(Error::OutOfRange { index: 0, .. })));
    }

    #[test]
    fn pgm_cannot_hold_color() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::constant(1, 1, 3, 1.0f64).unwrap();
        assert!(save_image(&img, dir.path().join("x.pgm"), false).is_err());
    }

    #[test]
    fn image_invariants_enforced() {
        assert!(Image::new(2, 2, 2, vec![0.0f64; 8], "t").is_err());
        assert!(Image::new(2, 2, 1, vec![0.0f64; 3], "t").is_err());
        assert!(Image::new(1, 1, 1, vec![f64::NAN], "t").is_err());
    }

    #[test]
    fn gray_conversion_keeps_geometry() {
        let img = Image::from_fn(3, 2, 3, "rgb", |x, y, c| (x + y * 3 + c * 50) as f64).unwrap();
        let g = img.to_gray();
        assert_eq!((g.width(), g.height(), g.channels()), (3, 2, 1));
        let expect = 0.299 * img.get(1, 1, 0) + 0.587 * img.get(1, 1, 1) + 0.114 * img.get(1, 1, 2);
        assert!((g.get(1, 1, 0) - expect).abs() < 1e-12);
    }

    #[test]
    fn empty_directory_scans_to_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let m = scan_dataset(dir.path(), "empty").unwrap();
        assert!(m.is_empty());
        assert_eq!(m.to_json().unwrap().trim(), "[]");
    }

    #[test]
    fn duplicate_manifest_paths_rejected() {
        let e = ManifestEntry {
            path: "a.pgm".into(),
            width: 1,
            height: 1,
            channels: 1,
        };
        assert!(DatasetManifest::new("d", vec![e.clone(), e]).is_err());
    }
}
