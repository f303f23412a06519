//! Byte-plot images: every byte becomes one grayscale pixel, row-major, at a
//! width chosen from the file size.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// (inclusive upper bound in bytes, width)
const WIDTH_TABLE: [(usize, usize); 7] = [
    (10 * 1024, 32),
    (30 * 1024, 64),
    (60 * 1024, 128),
    (100 * 1024, 256),
    (200 * 1024, 384),
    (500 * 1024, 512),
    (1000 * 1024, 768),
];
const MAX_WIDTH: usize = 1024;

pub const DEFAULT_INPUT_SIDE: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ByteImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl ByteImage {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if pixels.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "{} pixels for {width}x{height}",
                pixels.len()
            )));
        }
        Ok(ByteImage {
            width,
            height,
            pixels,
        })
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.pixels[row * self.width + col]
    }
}

/// Square model input, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct InputTensor {
    pub side: usize,
    pub values: Vec<f32>,
}

impl InputTensor {
    pub fn new(side: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != side * side {
            return Err(Error::ShapeMismatch(format!(
                "{} values for side {side}",
                values.len()
            )));
        }
        Ok(InputTensor { side, values })
    }

    pub fn filled(side: usize, v: f32) -> Self {
        InputTensor {
            side,
            values: vec![v; side * side],
        }
    }
}

pub fn width_for_size(n_bytes: usize) -> Result<usize> {
    if n_bytes == 0 {
        return Err(Error::EmptyInput);
    }
    Ok(WIDTH_TABLE
        .iter()
        .find(|(limit, _)| n_bytes <= *limit)
        .map(|&(_, w)| w)
        .unwrap_or(MAX_WIDTH))
}

pub fn bytes_to_image(bytes: &[u8], width_override: Option<usize>) -> Result<ByteImage> {
    if bytes.is_empty() {
        return Err(Error::EmptyInput);
    }
    let width = match width_override {
        Some(0) => return Err(Error::ShapeMismatch("width override of 0".into())),
        Some(w) => w,
        None => width_for_size(bytes.len())?,
    };
    let height = bytes.len().div_ceil(width);
    let mut pixels = bytes.to_vec();
    pixels.resize(width * height, 0);
    Ok(ByteImage {
        width,
        height,
        pixels,
    })
}

fn nearest(dst: usize, dst_len: usize, src_len: usize) -> usize {
    // centre-aligned nearest neighbour in integer arithmetic
    (((2 * dst + 1) * src_len) / (2 * dst_len)).min(src_len - 1)
}

/// Nearest-neighbour resample to `side`×`side`, scaled to [0, 1].
pub fn resize_to_input(img: &ByteImage, side: usize) -> InputTensor {
    to_input(img, side, true)
}

/// Like [`resize_to_input`]; with `lambda_norm` off the raw 0..255 scale is kept.
pub fn to_input(img: &ByteImage, side: usize, lambda_norm: bool) -> InputTensor {
    assert!(side >= 1, "input side must be positive");
    let scale = if lambda_norm { 255.0 } else { 1.0 };
    let cols: Vec<usize> = (0..side).map(|c| nearest(c, side, img.width)).collect();
    let mut values = Vec::with_capacity(side * side);
    for r in 0..side {
        let sr = nearest(r, side, img.height);
        let row = &img.pixels[sr * img.width..(sr + 1) * img.width];
        values.extend(cols.iter().map(|&sc| row[sc] as f32 / scale));
    }
    InputTensor { side, values }
}

/// For each input pixel, the byte offset it was sampled from (or `None` for
/// row padding). Lets callers map byte ranges onto input coordinates.
pub fn source_offsets(n_bytes: usize, width: usize, side: usize) -> Vec<Option<usize>> {
    let height = n_bytes.div_ceil(width);
    let mut out = Vec::with_capacity(side * side);
    for r in 0..side {
        let sr = nearest(r, side, height);
        for c in 0..side {
            let off = sr * width + nearest(c, side, width);
            out.push((off < n_bytes).then_some(off));
        }
    }
    out
}

/// Real-valued square map, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RealMap {
    pub side: usize,
    pub values: Vec<f64>,
}

/// Per-class "average sample image": elementwise mean of resized images.
pub fn average_image(images: &[ByteImage], side: usize) -> Result<RealMap> {
    if images.is_empty() {
        return Err(Error::EmptyList);
    }
    let mut acc = vec![0.0f64; side * side];
    for img in images {
        for (a, v) in acc.iter_mut().zip(resize_to_input(img, side).values) {
            *a += v as f64;
        }
    }
    let n = images.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Ok(RealMap { side, values: acc })
}

/// Binary PGM (P5, maxval 255).
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}

pub fn write_pgm(path: &Path, img: &ByteImage) -> Result<()> {
    fs::write(path, encode_pgm(img.width, img.height, &img.pixels)).map_err(|e| Error::io(path, e))
}

pub fn decode_pgm(bytes: &[u8]) -> Result<ByteImage> {
    let bad = || Error::InvalidSpec("not a P5 PGM with maxval 255".into());
    let mut fields = Vec::new();
    let mut i = 0;
    while fields.len() < 4 {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return Err(bad());
        }
        fields.push(std::str::from_utf8(&bytes[start..i]).map_err(|_| bad())?);
    }
    i += 1; // single whitespace before raster
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad());
    }
    let w: usize = fields[1].parse().map_err(|_| bad())?;
    let h: usize = fields[2].parse().map_err(|_| bad())?;
    let raster = bytes.get(i..i + w * h).ok_or_else(bad)?;
    ByteImage::new(w, h, raster.to_vec())
}

/// Range record written next to a rescaled real-valued PGM.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeSidecar {
    pub min: f64,
    pub max: f64,
}

/// Affine rescale of real values to 0..=255; returns pixels and the range used.
pub fn quantize(values: &[f64]) -> (Vec<u8>, RangeSidecar) {
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let px = values
        .iter()
        .map(|&v| {
            if span > 0.0 {
                ((v - min) / span * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect();
    (px, RangeSidecar { min, max })
}

/// Writes `<stem>.pgm` and `<stem>.json` for a real-valued map.
pub fn write_real_map(dir: &Path, stem: &str, map: &RealMap) -> Result<()> {
    let (px, range) = quantize(&map.values);
    let pgm = dir.join(format!("{stem}.pgm"));
    fs::write(&pgm, encode_pgm(map.side, map.side, &px)).map_err(|e| Error::io(&pgm, e))?;
    let js = dir.join(format!("{stem}.json"));
    fs::write(&js, serde_json::to_vec_pretty(&range)?).map_err(|e| Error::io(&js, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn width_table_points() {
        assert_eq!(width_for_size(4096).unwrap(), 32);
        assert_eq!(width_for_size(10 * 1024).unwrap(), 32);
        assert_eq!(width_for_size(10 * 1024 + 1).unwrap(), 64);
        assert_eq!(width_for_size(1_048_577).unwrap(), 1024);
        assert!(matches!(width_for_size(0), Err(Error::EmptyInput)));
    }

    #[test]
    fn zero_bytes_make_black_image() {
        let img = bytes_to_image(&[0u8; 4096], None).unwrap();
        assert_eq!((img.width, img.height), (32, 128));
        assert!(img.pixels.iter().all(|&p| p == 0));
    }

    #[test]
    fn bytes_map_to_pixels_verbatim() {
        let img = bytes_to_image(&[0x00, 0x7F, 0xFF], Some(3)).unwrap();
        assert_eq!((img.width, img.height), (3, 1));
        assert_eq!(img.pixels, vec![0, 127, 255]);
        assert!(matches!(bytes_to_image(&[], None), Err(Error::EmptyInput)));
    }

    #[test]
    fn seeded_buffer_matches_line_reader() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let buf: Vec<u8> = (0..1000).map(|_| r.random()).collect();
        let img = bytes_to_image(&buf, None).unwrap();
        // reference: read the buffer one image row at a time
        let mut reference = Vec::new();
        for line in buf.chunks(img.width) {
            reference.extend_from_slice(line);
        }
        assert_eq!(&img.pixels[..buf.len()], &reference[..]);
        assert!(img.pixels[buf.len()..].iter().all(|&p| p == 0));
        assert_eq!(img.height, 1000usize.div_ceil(32));
    }

    #[test]
    fn constant_image_stays_constant() {
        let img = ByteImage::new(7, 13, vec![128; 91]).unwrap();
        for side in [8, 16, 64] {
            let t = resize_to_input(&img, side);
            assert!(t.values.iter().all(|&v| v == 128.0 / 255.0));
        }
    }

    #[test]
    fn upscale_replicates_blocks() {
        let img = ByteImage::new(2, 2, vec![10, 20, 30, 40]).unwrap();
        let t = resize_to_input(&img, 4);
        let expect = [10, 10, 20, 20, 10, 10, 20, 20, 30, 30, 40, 40, 30, 30, 40, 40];
        let got: Vec<u8> = t.values.iter().map(|v| (v * 255.0).round() as u8).collect();
        assert_eq!(got, expect);
    }

    #[test]
    fn identity_resize() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let px: Vec<u8> = (0..64 * 64).map(|_| r.random()).collect();
        let img = ByteImage::new(64, 64, px.clone()).unwrap();
        let t = resize_to_input(&img, 64);
        for (v, p) in t.values.iter().zip(&px) {
            assert_eq!(*v, *p as f32 / 255.0);
        }
    }

    #[test]
    fn extremes_normalize_exactly() {
        let img = ByteImage::new(2, 1, vec![0, 255]).unwrap();
        let t = resize_to_input(&img, 8);
        assert!(t.values.contains(&0.0));
        assert!(t.values.contains(&1.0));
    }

    #[test]
    fn raw_scale_when_lambda_off() {
        let img = ByteImage::new(1, 1, vec![200]).unwrap();
        assert_eq!(to_input(&img, 8, false).values[0], 200.0);
    }

    #[test]
    fn source_offsets_agree_with_resize() {
        let bytes: Vec<u8> = (0..777u32).map(|i| (i * 7 % 251) as u8).collect();
        let img = bytes_to_image(&bytes, None).unwrap();
        let t = resize_to_input(&img, 16);
        for (v, off) in t.values.iter().zip(source_offsets(bytes.len(), img.width, 16)) {
            let expect = off.map(|o| bytes[o]).unwrap_or(0);
            assert_eq!(*v, expect as f32 / 255.0);
        }
    }

    #[test]
    fn average_of_black_and_white_is_half() {
        let a = ByteImage::new(4, 4, vec![0; 16]).unwrap();
        let b = ByteImage::new(4, 4, vec![255; 16]).unwrap();
        let m = average_image(&[a.clone(), b], 8).unwrap();
        assert!(m.values.iter().all(|&v| (v - 0.5).abs() < 1e-12));
        let one = average_image(&[a], 8).unwrap();
        assert!(one.values.iter().all(|&v| v == 0.0));
        assert!(matches!(average_image(&[], 8), Err(Error::EmptyList)));
    }

    #[test]
    fn average_matches_two_pass_mean() {
        let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let imgs: Vec<ByteImage> = (0..10)
            .map(|_| {
                let n = r.random_range(100..3000);
                let bytes: Vec<u8> = (0..n).map(|_| r.random()).collect();
                bytes_to_image(&bytes, None).unwrap()
            })
            .collect();
        let m = average_image(&imgs, 16).unwrap();
        // reference: materialize every resized image first, then average per pixel
        let resized: Vec<Vec<f32>> = imgs.iter().map(|i| resize_to_input(i, 16).values).collect();
        for p in 0..256 {
            let mean = resized.iter().map(|v| v[p] as f64).sum::<f64>() / 10.0;
            assert!((m.values[p] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn pgm_round_trip() {
        let img = ByteImage::new(3, 2, vec![0, 1, 2, 253, 254, 255]).unwrap();
        let enc = encode_pgm(img.width, img.height, &img.pixels);
        assert!(enc.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(decode_pgm(&enc).unwrap(), img);
    }

    #[test]
    fn quantize_records_range() {
        let (px, r) = quantize(&[-1.0, 0.0, 1.0]);
        assert_eq!(px, vec![0, 128, 255]);
        assert_eq!((r.min, r.max), (-1.0, 1.0));
    }

    proptest! {
        #[test]
        fn widths_are_monotone(a in 1usize..2_000_000, b in 1usize..2_000_000) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(width_for_size(lo).unwrap() <= width_for_size(hi).unwrap());
        }

        #[test]
        fn image_keeps_every_byte(bytes in proptest::collection::vec(any::<u8>(), 1..3000)) {
            let img = bytes_to_image(&bytes, None).unwrap();
            prop_assert_eq!(img.pixels.len(), img.width * img.height);
            prop_assert_eq!(&img.pixels[..bytes.len()], &bytes[..]);
            let t = resize_to_input(&img, 8);
            prop_assert!(t.values.iter().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn average_is_order_free(seed in 0u64..1000) {
            let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut imgs: Vec<ByteImage> = (0..4)
                .map(|_| {
                    let bytes: Vec<u8> = (0..r.random_range(10..400)).map(|_| r.random()).collect();
                    bytes_to_image(&bytes, None).unwrap()
                })
                .collect();
            let a = average_image(&imgs, 8).unwrap();
            imgs.reverse();
            let b = average_image(&imgs, 8).unwrap();
            for (x, y) in a.values.iter().zip(&b.values) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }
    }
}
