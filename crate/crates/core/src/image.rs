//! Raster decoding and the canonical tensor form used by every other module.
//!
//! Images are held as row-major, channel-interleaved RGB with every sample in
//! `[0, 1]`. Only 8-bit PNG and binary PPM (`P6`, maxval 255) are accepted.

use std::cell::Cell;
use std::io::{BufRead, Read, Seek, SeekFrom};
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest side accepted by [`preprocess`].
pub const MIN_SIDE: usize = 8;

/// A decoded RGB raster, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageTensor {
    /// Wraps interleaved RGB samples, validating length and range.
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != height * width * 3 {
            return Err(Error::InvalidArgument(format!(
                "expected {} samples for {}x{} RGB, got {}",
                height * width * 3,
                width,
                height,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!(
                "sample {v} outside [0, 1]"
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Builds an image by evaluating `f(row, col)` for every pixel; values are clamped to `[0, 1]`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(height * width * 3);
        for r in 0..height {
            for c in 0..width {
                data.extend(f(r, c).iter().map(|v| v.clamp(0.0, 1.0)));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    pub fn constant(height: usize, width: usize, value: f32) -> Self {
        Self::from_fn(height, width, |_, _| [value; 3])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    /// Samples quantized back to 8 bits, rounding to nearest.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Self {
        Self {
            height,
            width,
            data: bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        }
    }
}

/// Square working resolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "usize", into = "usize")]
pub struct CanonicalSize(usize);

impl CanonicalSize {
    pub const ALLOWED: [usize; 3] = [64, 128, 256];

    pub fn new(side: usize) -> Result<Self> {
        if Self::ALLOWED.contains(&side) {
            Ok(Self(side))
        } else {
            Err(Error::Config(format!(
                "canonical size must be one of {:?}, got {side}",
                Self::ALLOWED
            )))
        }
    }

    pub fn side(self) -> usize {
        self.0
    }
}

impl Default for CanonicalSize {
    fn default() -> Self {
        Self(64)
    }
}

impl TryFrom<usize> for CanonicalSize {
    type Error = Error;

    fn try_from(side: usize) -> Result<Self> {
        Self::new(side)
    }
}

impl From<CanonicalSize> for usize {
    fn from(size: CanonicalSize) -> usize {
        size.0
    }
}

const PNG_SIGNATURE: [u8; 8] = [0x89, b'P', b'N', b'G', 0x0d, 0x0a, 0x1a, 0x0a];

/// Decodes a PNG or binary PPM payload, sniffing the format from its magic bytes.
pub fn decode_image(bytes: &[u8]) -> Result<ImageTensor> {
    if bytes.starts_with(&PNG_SIGNATURE) {
        decode_png(bytes)
    } else if bytes.starts_with(b"P6") {
        decode_ppm(bytes)
    } else if bytes.len() >= 2 && bytes[0] == b'P' && bytes[1].is_ascii_digit() {
        Err(Error::UnsupportedFormat(format!(
            "netpbm variant P{} (only binary P6 is accepted)",
            bytes[1] as char
        )))
    } else {
        Err(Error::Decode {
            offset: 0,
            reason: "neither a PNG signature nor a P6 header".into(),
        })
    }
}

fn decode_ppm(bytes: &[u8]) -> Result<ImageTensor> {
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, field) in fields.iter_mut().enumerate() {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
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
        if start == pos {
            return Err(Error::Decode {
                offset: pos as u64,
                reason: format!("expected {} in PPM header", ["width", "height", "maxval"][i]),
            });
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Decode {
                offset: start as u64,
                reason: "header number out of range".into(),
            })?;
    }
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Decode {
            offset: pos as u64,
            reason: "expected a single whitespace byte after maxval".into(),
        });
    }
    pos += 1;
    let [width, height, maxval] = fields;
    if maxval > 255 {
        return Err(Error::UnsupportedFormat(format!(
            "PPM maxval {maxval} implies more than 8 bits per sample"
        )));
    }
    if maxval != 255 {
        return Err(Error::UnsupportedFormat(format!(
            "PPM maxval {maxval} (only 255 is accepted)"
        )));
    }
    if width == 0 || height == 0 {
        return Err(Error::Decode {
            offset: pos as u64,
            reason: "zero image dimension".into(),
        });
    }
    let need = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| Error::Decode {
            offset: pos as u64,
            reason: "image dimensions overflow".into(),
        })?;
    let body = &bytes[pos..];
    if body.len() < need {
        return Err(Error::Decode {
            offset: bytes.len() as u64,
            reason: format!("truncated pixel data: need {need} bytes, have {}", body.len()),
        });
    }
    Ok(ImageTensor::from_rgb8(height, width, &body[..need]))
}

/// Reader that remembers the furthest byte the PNG decoder consumed, so a
/// failure can be reported with a position.
struct TrackedCursor<'a> {
    inner: std::io::Cursor<&'a [u8]>,
    high_water: Rc<Cell<u64>>,
}

impl TrackedCursor<'_> {
    fn note(&self) {
        let p = self.inner.position();
        if p > self.high_water.get() {
            self.high_water.set(p);
        }
    }
}

impl Read for TrackedCursor<'_> {
    fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
        let n = self.inner.read(buf)?;
        self.note();
        Ok(n)
    }
}

impl BufRead for TrackedCursor<'_> {
    fn fill_buf(&mut self) -> std::io::Result<&[u8]> {
        self.inner.fill_buf()
    }

    fn consume(&mut self, amt: usize) {
        self.inner.consume(amt);
        self.note();
    }
}

impl Seek for TrackedCursor<'_> {
    fn seek(&mut self, pos: SeekFrom) -> std::io::Result<u64> {
        let p = self.inner.seek(pos)?;
        self.note();
        Ok(p)
    }
}

fn decode_png(bytes: &[u8]) -> Result<ImageTensor> {
    let high_water = Rc::new(Cell::new(0));
    let cursor = TrackedCursor {
        inner: std::io::Cursor::new(bytes),
        high_water: Rc::clone(&high_water),
    };
    let png_err = |e: png::DecodingError| Error::Decode {
        offset: high_water.get(),
        reason: e.to_string(),
    };

    let mut decoder = png::Decoder::new(cursor);
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(png_err)?;
    if reader.info().bit_depth == png::BitDepth::Sixteen {
        return Err(Error::UnsupportedFormat("16-bit PNG".into()));
    }
    let size = reader.output_buffer_size().ok_or_else(|| Error::Decode {
        offset: high_water.get(),
        reason: "image too large".into(),
    })?;
    let mut buf = vec![0u8; size];
    let frame = reader.next_frame(&mut buf).map_err(png_err)?;
    if frame.bit_depth != png::BitDepth::Eight {
        return Err(Error::UnsupportedFormat(format!(
            "PNG output bit depth {:?}",
            frame.bit_depth
        )));
    }
    let (width, height) = (frame.width as usize, frame.height as usize);
    let channels = frame.color_type.samples();
    let mut rgb = Vec::with_capacity(width * height * 3);
    for row in buf.chunks(frame.line_size).take(height) {
        for px in row[..width * channels].chunks_exact(channels) {
            match channels {
                1 | 2 => rgb.extend_from_slice(&[px[0]; 3]),
                _ => rgb.extend_from_slice(&px[..3]),
            }
        }
    }
    Ok(ImageTensor::from_rgb8(height, width, &rgb))
}

/// Encodes as binary PPM. Samples are quantized to 8 bits.
pub fn encode_ppm(img: &ImageTensor) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.to_rgb8());
    out
}

/// Encodes as an 8-bit RGB PNG.
pub fn encode_png(img: &ImageTensor) -> Vec<u8> {
    let mut out = Vec::new();
    let mut encoder = png::Encoder::new(&mut out, img.width as u32, img.height as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .expect("writing a PNG header to memory cannot fail");
    writer
        .write_image_data(&img.to_rgb8())
        .expect("dimensions match the header");
    writer.finish().expect("in-memory PNG finish");
    out
}

/// Center-crops to the largest centered square, then bilinearly resamples to `size`.
pub fn preprocess(img: &ImageTensor, size: CanonicalSize) -> Result<ImageTensor> {
    if img.height < MIN_SIDE || img.width < MIN_SIDE {
        return Err(Error::TooSmall {
            width: img.width,
            height: img.height,
        });
    }
    let crop = img.height.min(img.width);
    let top = (img.height - crop) / 2;
    let left = (img.width - crop) / 2;
    let side = size.side();
    if crop == side {
        if top == 0 && left == 0 {
            return Ok(img.clone());
        }
        return Ok(ImageTensor::from_fn(side, side, |r, c| img.pixel(top + r, left + c)));
    }

    // Half-pixel-centred sampling, edges clamped.
    let scale = crop as f64 / side as f64;
    let axis = |i: usize| {
        let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (crop - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(crop - 1);
        (lo, hi, (src - lo as f64) as f32)
    };
    let rows: Vec<_> = (0..side).map(axis).collect();
    let cols = rows.clone();
    Ok(ImageTensor::from_fn(side, side, |r, c| {
        let (r0, r1, fy) = rows[r];
        let (c0, c1, fx) = cols[c];
        let p00 = img.pixel(top + r0, left + c0);
        let p01 = img.pixel(top + r0, left + c1);
        let p10 = img.pixel(top + r1, left + c0);
        let p11 = img.pixel(top + r1, left + c1);
        std::array::from_fn(|ch| {
            let upper = p00[ch] + (p01[ch] - p00[ch]) * fx;
            let lower = p10[ch] + (p11[ch] - p10[ch]) * fx;
            upper + (lower - upper) * fy
        })
    }))
}

/// Circular shift: output pixel `(r, c)` is input pixel `((r - dy) mod h, (c - dx) mod w)`.
pub fn shift_image(img: &ImageTensor, dx: isize, dy: isize) -> Result<ImageTensor> {
    let (h, w) = (img.height as isize, img.width as isize);
    if dx.abs() >= w || dy.abs() >= h {
        return Err(Error::InvalidArgument(format!(
            "shift ({dx}, {dy}) not smaller than image {w}x{h}"
        )));
    }
    Ok(ImageTensor::from_fn(img.height, img.width, |r, c| {
        let sr = (r as isize - dy).rem_euclid(h) as usize;
        let sc = (c as isize - dx).rem_euclid(w) as usize;
        img.pixel(sr, sc)
    }))
}

/// Box blur with a `(2·radius+1)²` uniform kernel and circular padding.
pub fn blur_image(img: &ImageTensor, radius: usize) -> Result<ImageTensor> {
    if radius == 0 {
        return Err(Error::InvalidArgument("blur radius must be at least 1".into()));
    }
    let (h, w) = (img.height as isize, img.width as isize);
    let r = radius as isize;
    let norm = 1.0 / ((2 * r + 1) * (2 * r + 1)) as f64;
    Ok(ImageTensor::from_fn(img.height, img.width, |row, col| {
        let mut acc = [0.0f64; 3];
        for dy in -r..=r {
            let sr = (row as isize + dy).rem_euclid(h) as usize;
            for dx in -r..=r {
                let sc = (col as isize + dx).rem_euclid(w) as usize;
                let p = img.pixel(sr, sc);
                for ch in 0..3 {
                    acc[ch] += p[ch] as f64;
                }
            }
        }
        acc.map(|v| (v * norm) as f32)
    }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize) -> ImageTensor {
        ImageTensor::from_fn(h, w, |r, c| {
            [
                r as f32 / h as f32,
                c as f32 / w as f32,
                ((r * 7 + c * 3) % 11) as f32 / 10.0,
            ]
        })
    }

    #[test]
    fn ppm_extreme_samples() {
        let white = decode_image(b"P6\n1 1\n255\n\xff\xff\xff").unwrap();
        assert_eq!(white.data(), &[1.0, 1.0, 1.0]);
        let black = decode_image(b"P6 1 1 255 \x00\x00\x00").unwrap();
        assert_eq!(black.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn ppm_comment_in_header() {
        let img = decode_image(b"P6\n# made by hand\n2 1\n255\n\x01\x02\x03\x04\x05\x06").unwrap();
        assert_eq!((img.width(), img.height()), (2, 1));
        assert_eq!(img.pixel(0, 1), [4.0 / 255.0, 5.0 / 255.0, 6.0 / 255.0]);
    }

    #[test]
    fn ppm_errors_name_offsets() {
        match decode_image(b"P6\n2 x\n255\n") {
            Err(Error::Decode { offset, .. }) => assert_eq!(offset, 5),
            other => panic!("{other:?}"),
        }
        match decode_image(b"P6\n2 2\n255\n\x00\x00") {
            Err(Error::Decode { offset, .. }) => assert_eq!(offset, 13),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            decode_image(b"P6\n1 1\n65535\n\x00\x00\x00\x00\x00\x00"),
            Err(Error::UnsupportedFormat(_))
        ));
        assert!(matches!(decode_image(b"P3\n1 1\n255\n0 0 0"), Err(Error::UnsupportedFormat(_))));
        assert!(matches!(decode_image(b"GIF89a"), Err(Error::Decode { offset: 0, .. })));
    }

    #[test]
    fn png_truncated_reports_offset() {
        let bytes = encode_png(&ramp(9, 9));
        let cut = &bytes[..40];
        match decode_image(cut) {
            Err(Error::Decode { offset, .. }) => assert!(offset > 0 && offset <= 40),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn ppm_round_trip_is_exact() {
        let bytes: Vec<u8> = (0..=255u8).cycle().take(12 * 9 * 3).collect();
        let mut ppm = b"P6\n12 9\n255\n".to_vec();
        ppm.extend(&bytes);
        let img = decode_image(&ppm).unwrap();
        assert_eq!(encode_ppm(&img), ppm);
    }

    #[test]
    fn preprocess_identity_at_canonical_size() {
        let img = ramp(64, 64);
        let out = preprocess(&img, CanonicalSize::default()).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn preprocess_constant_downscale() {
        let img = ImageTensor::constant(128, 128, 0.5);
        let out = preprocess(&img, CanonicalSize::default()).unwrap();
        assert_eq!((out.height(), out.width()), (64, 64));
        assert!(out.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn preprocess_rejects_tiny() {
        let img = ImageTensor::constant(7, 20, 0.1);
        assert!(matches!(
            preprocess(&img, CanonicalSize::default()),
            Err(Error::TooSmall { width: 20, height: 7 })
        ));
    }

    // Independent scalar bilinear: per-channel 2D arrays, explicit
    // half-pixel mapping, no shared helpers.
    #[test]
    fn preprocess_crops_then_resamples() {
        let (h, w) = (60, 100);
        let img = ramp(h, w);
        let out = preprocess(&img, CanonicalSize::default()).unwrap();
        let left = 20;
        for ch in 0..3 {
            let plane: Vec<Vec<f64>> = (0..60)
                .map(|r| (0..60).map(|c| img.pixel(r, left + c)[ch] as f64).collect())
                .collect();
            for y in 0..64 {
                for x in 0..64 {
                    let sy = ((y as f64 + 0.5) * 60.0 / 64.0 - 0.5).clamp(0.0, 59.0);
                    let sx = ((x as f64 + 0.5) * 60.0 / 64.0 - 0.5).clamp(0.0, 59.0);
                    let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
                    let (y1, x1) = ((y0 + 1).min(59), (x0 + 1).min(59));
                    let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
                    let expect = plane[y0][x0] * (1.0 - fy) * (1.0 - fx)
                        + plane[y0][x1] * (1.0 - fy) * fx
                        + plane[y1][x0] * fy * (1.0 - fx)
                        + plane[y1][x1] * fy * fx;
                    let got = out.pixel(y, x)[ch] as f64;
                    assert!((got - expect).abs() < 1e-5, "({y},{x},{ch}) {got} vs {expect}");
                }
            }
        }
    }

    #[test]
    fn shift_identity_and_inverse() {
        let img = ramp(10, 12);
        assert_eq!(shift_image(&img, 0, 0).unwrap(), img);
        let there = shift_image(&img, 1, 0).unwrap();
        assert_eq!(shift_image(&there, -1, 0).unwrap(), img);
        assert!(shift_image(&img, 12, 0).is_err());
    }

    #[test]
    fn shift_two_by_two_swaps_columns() {
        let img = ImageTensor::new(
            2,
            2,
            vec![
                0.0, 0.0, 0.0, 0.25, 0.25, 0.25, //
                0.5, 0.5, 0.5, 1.0, 1.0, 1.0,
            ],
        )
        .unwrap();
        let s = shift_image(&img, 1, 0).unwrap();
        assert_eq!(s.pixel(0, 0), img.pixel(0, 1));
        assert_eq!(s.pixel(0, 1), img.pixel(0, 0));
        assert_eq!(s.pixel(1, 0), img.pixel(1, 1));
        assert_eq!(s.pixel(1, 1), img.pixel(1, 0));
    }

    #[test]
    fn blur_fixed_point_and_impulse() {
        let c = ImageTensor::constant(9, 9, 0.3);
        let b = blur_image(&c, 2).unwrap();
        assert!(b.data().iter().all(|v| (v - 0.3).abs() < 1e-6));

        let impulse = ImageTensor::from_fn(8, 8, |r, c| if (r, c) == (4, 4) { [1.0; 3] } else { [0.0; 3] });
        let b = blur_image(&impulse, 1).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                let inside = (3..=5).contains(&r) && (3..=5).contains(&c);
                let want = if inside { 1.0 / 9.0 } else { 0.0 };
                assert!((b.pixel(r, c)[0] - want).abs() < 1e-7);
            }
        }
        assert!(blur_image(&c, 0).is_err());
    }

    #[test]
    fn blur_checkerboard_matches_direct_convolution() {
        let img = ImageTensor::from_fn(4, 4, |r, c| [((r + c) % 2) as f32, 0.25, (r % 2) as f32]);
        let b = blur_image(&img, 1).unwrap();
        for r in 0..4i32 {
            for c in 0..4i32 {
                for ch in 0..3 {
                    let mut sum = 0.0f64;
                    let (mut lo, mut hi) = (f32::MAX, f32::MIN);
                    for dr in -1..=1 {
                        for dc in -1..=1 {
                            let v = img.pixel(((r + dr + 4) % 4) as usize, ((c + dc + 4) % 4) as usize)[ch];
                            sum += v as f64;
                            lo = lo.min(v);
                            hi = hi.max(v);
                        }
                    }
                    let got = b.pixel(r as usize, c as usize)[ch];
                    assert!((got as f64 - sum / 9.0).abs() < 1e-6);
                    assert!(got >= lo - 1e-6 && got <= hi + 1e-6);
                }
            }
        }
    }

    #[test]
    fn canonical_size_bounds() {
        assert!(CanonicalSize::new(64).is_ok());
        assert!(CanonicalSize::new(256).is_ok());
        assert!(CanonicalSize::new(100).is_err());
    }
}
