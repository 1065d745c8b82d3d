//! Rasters, binary pixel masks and boxes.
//!
//! Coordinates have their origin at the top-left corner with `x` growing to the
//! right and `y` growing downwards. Boxes cover the half-open ranges
//! `[x, x + w) × [y, y + h)`.

use std::path::Path;

use image::{DynamicImage, GrayImage, ImageFormat, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// An owned 8-bit raster with one or three interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    id: String,
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<u8>,
}

impl Image {
    pub fn new(
        id: impl Into<String>,
        width: usize,
        height: usize,
        channels: usize,
        data: Vec<u8>,
    ) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage(format!(
                "dimensions must be positive, got {width}x{height}"
            )));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidImage(format!(
                "expected 1 or 3 channels, got {channels}"
            )));
        }
        let expected = width * height * channels;
        if data.len() != expected {
            return Err(Error::InvalidImage(format!(
                "expected {expected} samples, got {}",
                data.len()
            )));
        }
        Ok(Self {
            id: id.into(),
            width,
            height,
            channels,
            data,
        })
    }

    /// A uniform image where every pixel holds `pixel` (whose length sets the channel count).
    pub fn filled(id: impl Into<String>, width: usize, height: usize, pixel: &[u8]) -> Result<Self> {
        let data = pixel
            .iter()
            .copied()
            .cycle()
            .take(width * height * pixel.len())
            .collect();
        Self::new(id, width, height, pixel.len(), data)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.id = id.into();
        self
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

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let start = (y * self.width + x) * self.channels;
        &self.data[start..start + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [u8] {
        let start = (y * self.width + x) * self.channels;
        &mut self.data[start..start + self.channels]
    }

    /// Mean of the channel samples at a pixel.
    pub fn luminance(&self, x: usize, y: usize) -> u8 {
        let px = self.pixel(x, y);
        (px.iter().map(|&v| v as u32).sum::<u32>() / px.len() as u32) as u8
    }

    /// Paints the clipped area of `rect` with `color`. Colors with fewer samples than
    /// the image has channels are repeated.
    pub fn fill_rect(&mut self, rect: BBox, color: &[u8]) {
        let Some((x0, y0, x1, y1)) = rect.clipped(self.width, self.height) else {
            return;
        };
        let channels = self.channels;
        for y in y0..y1 {
            for x in x0..x1 {
                let px = self.pixel_mut(x, y);
                for c in 0..channels {
                    px[c] = color[c % color.len()];
                }
            }
        }
    }

    /// Decodes a PNG or binary PPM (P6) file. Grayscale inputs stay single-channel,
    /// everything else is converted to RGB.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let id = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::decode(id, &bytes)
    }

    pub fn decode(id: impl Into<String>, bytes: &[u8]) -> Result<Self> {
        let format = match bytes {
            [0x89, b'P', b'N', b'G', ..] => ImageFormat::Png,
            [b'P', b'6', ..] | [b'P', b'5', ..] => ImageFormat::Pnm,
            _ => return Err(Error::InvalidImage("not a PNG or binary PPM stream".into())),
        };
        let decoded = image::load_from_memory_with_format(bytes, format)?;
        Ok(Self::from_dynamic(id, decoded))
    }

    fn from_dynamic(id: impl Into<String>, img: DynamicImage) -> Self {
        let (width, height) = (img.width() as usize, img.height() as usize);
        let (channels, data) = match img {
            DynamicImage::ImageLuma8(g) => (1, g.into_raw()),
            other => (3, other.to_rgb8().into_raw()),
        };
        Self {
            id: id.into(),
            width,
            height,
            channels,
            data,
        }
    }

    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let (w, h) = (self.width as u32, self.height as u32);
        let result = if self.channels == 1 {
            GrayImage::from_raw(w, h, self.data.clone()).map(|g| g.save_with_format(path, ImageFormat::Png))
        } else {
            RgbImage::from_raw(w, h, self.data.clone()).map(|g| g.save_with_format(path, ImageFormat::Png))
        };
        match result {
            Some(r) => r.map_err(Error::from),
            None => Err(Error::InvalidImage("raster does not match dimensions".into())),
        }
    }
}

/// Binary per-pixel set, stored row-major as packed 64-bit words.
///
/// A set bit means the pixel is included (unmasked).
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PixelMask {
    width: usize,
    height: usize,
    words: Vec<u64>,
}

impl PixelMask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            words: vec![0; (width * height).div_ceil(64)],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        let mut mask = Self::empty(width, height);
        mask.words.iter_mut().for_each(|w| *w = u64::MAX);
        mask.clear_tail();
        mask
    }

    pub fn from_bits(width: usize, height: usize, bits: &[bool]) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::InvalidImage(format!(
                "expected {} mask bits, got {}",
                width * height,
                bits.len()
            )));
        }
        let mut mask = Self::empty(width, height);
        for (k, _) in bits.iter().enumerate().filter(|(_, &b)| b) {
            mask.set_index(k, true);
        }
        Ok(mask)
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut mask = Self::empty(width, height);
        for y in 0..height {
            for x in 0..width {
                if f(x, y) {
                    mask.set(x, y, true);
                }
            }
        }
        mask
    }

    fn clear_tail(&mut self) {
        let rem = (self.width * self.height) % 64;
        if rem != 0 {
            if let Some(last) = self.words.last_mut() {
                *last &= (1u64 << rem) - 1;
            }
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.width * self.height
    }

    pub fn is_empty(&self) -> bool {
        self.words.iter().all(|&w| w == 0)
    }

    pub fn same_dims(&self, other: &PixelMask) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn check_dims(&self, width: usize, height: usize) -> Result<()> {
        if self.width == width && self.height == height {
            Ok(())
        } else {
            Err(Error::DimensionMismatch {
                left_w: self.width,
                left_h: self.height,
                right_w: width,
                right_h: height,
            })
        }
    }

    pub fn get_index(&self, k: usize) -> bool {
        (self.words[k / 64] >> (k % 64)) & 1 == 1
    }

    pub fn set_index(&mut self, k: usize, value: bool) {
        let bit = 1u64 << (k % 64);
        if value {
            self.words[k / 64] |= bit;
        } else {
            self.words[k / 64] &= !bit;
        }
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.get_index(y * self.width + x)
    }

    pub fn set(&mut self, x: usize, y: usize, value: bool) {
        self.set_index(y * self.width + x, value)
    }

    /// Number of set (unmasked) pixels.
    pub fn count(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    /// Row-major indices of the set pixels.
    pub fn iter_set(&self) -> impl Iterator<Item = usize> + '_ {
        self.words.iter().enumerate().flat_map(|(i, &word)| {
            let mut w = word;
            std::iter::from_fn(move || {
                if w == 0 {
                    return None;
                }
                let tz = w.trailing_zeros() as usize;
                w &= w - 1;
                Some(i * 64 + tz)
            })
        })
    }

    pub fn intersection(&self, other: &PixelMask) -> Result<PixelMask> {
        other.check_dims(self.width, self.height)?;
        Ok(PixelMask {
            width: self.width,
            height: self.height,
            words: self.words.iter().zip(&other.words).map(|(a, b)| a & b).collect(),
        })
    }

    pub fn union(&self, other: &PixelMask) -> Result<PixelMask> {
        other.check_dims(self.width, self.height)?;
        Ok(PixelMask {
            width: self.width,
            height: self.height,
            words: self.words.iter().zip(&other.words).map(|(a, b)| a | b).collect(),
        })
    }

    /// Size of the intersection without materializing it.
    pub fn intersection_count(&self, other: &PixelMask) -> Result<usize> {
        other.check_dims(self.width, self.height)?;
        Ok(self
            .words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a & b).count_ones() as usize)
            .sum())
    }

    pub fn is_subset_of(&self, other: &PixelMask) -> Result<bool> {
        other.check_dims(self.width, self.height)?;
        Ok(self.words.iter().zip(&other.words).all(|(a, b)| a & !b == 0))
    }

    /// Tight bounding box of the set pixels, if any.
    pub fn bounding_box(&self) -> Option<BBox> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0, 0);
        for k in self.iter_set() {
            let (x, y) = (k % self.width, k / self.width);
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        (x0 != usize::MAX).then(|| {
            BBox::new(x0 as i64, y0 as i64, (x1 - x0 + 1) as i64, (y1 - y0 + 1) as i64)
                .expect("non-empty extent")
        })
    }

    /// Renders the mask as a bilevel PNG (set pixels white).
    pub fn save_png(&self, path: impl AsRef<Path>) -> Result<()> {
        let raw = (0..self.len())
            .map(|k| if self.get_index(k) { 255 } else { 0 })
            .collect();
        let gray = GrayImage::from_raw(self.width as u32, self.height as u32, raw)
            .ok_or_else(|| Error::InvalidImage("mask raster does not match dimensions".into()))?;
        gray.save_with_format(path, ImageFormat::Png)?;
        Ok(())
    }

    /// Reads a PNG mask; any non-zero sample marks the pixel as set.
    pub fn open_png(path: impl AsRef<Path>) -> Result<Self> {
        let img = Image::open(path)?;
        Ok(Self::from_fn(img.width(), img.height(), |x, y| {
            img.pixel(x, y).iter().any(|&v| v != 0)
        }))
    }
}

/// `a ∩ b` for masks of identical dimensions.
pub fn mask_intersection(a: &PixelMask, b: &PixelMask) -> Result<PixelMask> {
    a.intersection(b)
}

/// Number of unmasked pixels.
pub fn pixel_count(m: &PixelMask) -> usize {
    m.count()
}

/// Axis-aligned box in pixel units.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[i64; 4]", into = "[i64; 4]")]
pub struct BBox {
    pub x: i64,
    pub y: i64,
    pub w: i64,
    pub h: i64,
}

impl BBox {
    pub fn new(x: i64, y: i64, w: i64, h: i64) -> Result<Self> {
        if w < 1 || h < 1 {
            return Err(Error::OutOfBounds(format!(
                "box extent must be at least 1x1, got {w}x{h}"
            )));
        }
        Ok(Self { x, y, w, h })
    }

    pub fn area(&self) -> i64 {
        self.w * self.h
    }

    pub fn right(&self) -> i64 {
        self.x + self.w
    }

    pub fn bottom(&self) -> i64 {
        self.y + self.h
    }

    /// Pixel ranges `(x0, y0, x1, y1)` (exclusive ends) of the box after clipping
    /// to a `width × height` raster, or `None` if nothing remains.
    pub fn clipped(&self, width: usize, height: usize) -> Option<(usize, usize, usize, usize)> {
        let x0 = self.x.max(0);
        let y0 = self.y.max(0);
        let x1 = self.right().min(width as i64);
        let y1 = self.bottom().min(height as i64);
        (x0 < x1 && y0 < y1).then_some((x0 as usize, y0 as usize, x1 as usize, y1 as usize))
    }

    pub fn clip(&self, width: usize, height: usize) -> Option<BBox> {
        self.clipped(width, height).map(|(x0, y0, x1, y1)| BBox {
            x: x0 as i64,
            y: y0 as i64,
            w: (x1 - x0) as i64,
            h: (y1 - y0) as i64,
        })
    }

    pub fn intersection_area(&self, other: &BBox) -> i64 {
        let w = self.right().min(other.right()) - self.x.max(other.x);
        let h = self.bottom().min(other.bottom()) - self.y.max(other.y);
        if w <= 0 || h <= 0 {
            0
        } else {
            w * h
        }
    }

    /// Smallest gap (Chebyshev) between the two boxes; 0 when they touch or overlap.
    pub fn gap(&self, other: &BBox) -> i64 {
        let dx = (other.x - self.right()).max(self.x - other.right()).max(0);
        let dy = (other.y - self.bottom()).max(self.y - other.bottom()).max(0);
        dx.max(dy)
    }

    pub fn to_mask(&self, width: usize, height: usize) -> Result<PixelMask> {
        box_to_mask(*self, width, height)
    }
}

impl TryFrom<[i64; 4]> for BBox {
    type Error = Error;

    fn try_from([x, y, w, h]: [i64; 4]) -> Result<Self> {
        BBox::new(x, y, w, h)
    }
}

impl From<BBox> for [i64; 4] {
    fn from(b: BBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

/// Mask with exactly the pixels of the clipped box set.
pub fn box_to_mask(b: BBox, width: usize, height: usize) -> Result<PixelMask> {
    let (x0, y0, x1, y1) = b.clipped(width, height).ok_or_else(|| {
        Error::OutOfBounds(format!("box {b:?} lies outside the {width}x{height} raster"))
    })?;
    Ok(PixelMask::from_fn(width, height, |x, y| {
        (x0..x1).contains(&x) && (y0..y1).contains(&y)
    }))
}

/// Intersection over union by pixel area; 0 for disjoint boxes.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0 {
        return 0.0;
    }
    inter as f64 / (a.area() + b.area() - inter) as f64
}

/// Keeps samples where the mask is set and writes `fill` everywhere else.
pub fn apply_mask(img: &Image, m: &PixelMask, fill: u8) -> Result<Image> {
    m.check_dims(img.width(), img.height())?;
    let channels = img.channels();
    let mut data = img.data().to_vec();
    for (k, px) in data.chunks_exact_mut(channels).enumerate() {
        if !m.get_index(k) {
            px.fill(fill);
        }
    }
    Ok(Image {
        id: img.id.clone(),
        width: img.width,
        height: img.height,
        channels,
        data,
    })
}

/// 4-connected components of the pixels satisfying `inside`, in row-major order of
/// their first pixel.
pub fn connected_components(
    width: usize,
    height: usize,
    inside: impl Fn(usize, usize) -> bool,
) -> Vec<PixelMask> {
    let mut seen = vec![false; width * height];
    let mut components = Vec::new();
    let mut stack = Vec::new();
    for start in 0..width * height {
        if seen[start] || !inside(start % width, start / width) {
            continue;
        }
        let mut mask = PixelMask::empty(width, height);
        seen[start] = true;
        stack.push(start);
        while let Some(k) = stack.pop() {
            mask.set_index(k, true);
            let (x, y) = (k % width, k / width);
            let mut visit = |nx: usize, ny: usize| {
                let n = ny * width + nx;
                if !seen[n] && inside(nx, ny) {
                    seen[n] = true;
                    stack.push(n);
                }
            };
            if x > 0 {
                visit(x - 1, y);
            }
            if x + 1 < width {
                visit(x + 1, y);
            }
            if y > 0 {
                visit(x, y - 1);
            }
            if y + 1 < height {
                visit(x, y + 1);
            }
        }
        components.push(mask);
    }
    components
}

#[cfg(test)]
mod tests {
    use super::*;

    fn enumerate(m: &PixelMask) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..m.height() {
            for x in 0..m.width() {
                if m.get(x, y) {
                    out.push((x, y));
                }
            }
        }
        out
    }

    #[test]
    fn intersection_identity_and_annihilator() {
        let full = PixelMask::full(5, 3);
        let empty = PixelMask::empty(5, 3);
        assert_eq!(mask_intersection(&full, &full).unwrap(), full);
        assert_eq!(mask_intersection(&full, &empty).unwrap(), empty);
    }

    #[test]
    fn rows_intersect_columns() {
        let rows = PixelMask::from_fn(4, 4, |_, y| y < 2);
        let cols = PixelMask::from_fn(4, 4, |x, _| x < 2);
        let both = mask_intersection(&rows, &cols).unwrap();
        assert_eq!(pixel_count(&both), 4);
        assert_eq!(enumerate(&both), vec![(0, 0), (1, 0), (0, 1), (1, 1)]);
    }

    #[test]
    fn intersection_rejects_mismatched_sizes() {
        let err = mask_intersection(&PixelMask::full(4, 4), &PixelMask::full(4, 5)).unwrap_err();
        assert!(matches!(err, Error::DimensionMismatch { .. }));
    }

    #[test]
    fn counts() {
        assert_eq!(pixel_count(&PixelMask::empty(8, 8)), 0);
        assert_eq!(pixel_count(&PixelMask::full(8, 8)), 64);
        let m = box_to_mask(BBox::new(1, 1, 3, 2).unwrap(), 8, 8).unwrap();
        assert_eq!(pixel_count(&m), 6);
        // tail bits beyond w*h stay clear
        assert_eq!(PixelMask::full(3, 3).count(), 9);
    }

    #[test]
    fn box_masks() {
        assert_eq!(
            box_to_mask(BBox::new(0, 0, 10, 7).unwrap(), 10, 7).unwrap(),
            PixelMask::full(10, 7)
        );
        let m = box_to_mask(BBox::new(2, 3, 2, 2).unwrap(), 10, 10).unwrap();
        assert_eq!(enumerate(&m), vec![(2, 3), (3, 3), (2, 4), (3, 4)]);
        let clipped = box_to_mask(BBox::new(9, 9, 5, 5).unwrap(), 10, 10).unwrap();
        assert_eq!(enumerate(&clipped), vec![(9, 9)]);
        assert!(matches!(
            box_to_mask(BBox::new(10, 0, 2, 2).unwrap(), 10, 10),
            Err(Error::OutOfBounds(_))
        ));
        assert!(BBox::new(0, 0, 0, 3).is_err());
    }

    #[test]
    fn iou_cases() {
        let a = BBox::new(0, 0, 2, 2).unwrap();
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&a, &BBox::new(5, 5, 2, 2).unwrap()), 0.0);
        let b = BBox::new(1, 0, 2, 2).unwrap();
        assert!((iou(&a, &b) - 2.0 / 6.0).abs() < 1e-12);
        // touching edges share no pixels
        assert_eq!(iou(&a, &BBox::new(2, 0, 2, 2).unwrap()), 0.0);
    }

    #[test]
    fn apply_mask_cases() {
        let img = Image::new("t", 2, 2, 3, (1..=12).collect()).unwrap();
        assert_eq!(apply_mask(&img, &PixelMask::full(2, 2), 0).unwrap(), img);
        let blank = apply_mask(&img, &PixelMask::empty(2, 2), 7).unwrap();
        assert!(blank.data().iter().all(|&v| v == 7));
        let one = PixelMask::from_fn(2, 2, |x, y| x == 0 && y == 0);
        let out = apply_mask(&img, &one, 0).unwrap();
        assert_eq!(out.pixel(0, 0), &[1, 2, 3]);
        assert_eq!(out.pixel(1, 0), &[0, 0, 0]);
        assert_eq!(out.pixel(0, 1), &[0, 0, 0]);
        assert_eq!(out.pixel(1, 1), &[0, 0, 0]);
        assert!(apply_mask(&img, &PixelMask::full(3, 2), 0).is_err());
    }

    #[test]
    fn image_validation() {
        assert!(Image::new("a", 0, 2, 1, vec![]).is_err());
        assert!(Image::new("a", 2, 2, 2, vec![0; 8]).is_err());
        assert!(Image::new("a", 2, 2, 3, vec![0; 11]).is_err());
    }

    #[test]
    fn components_split_on_gaps() {
        // two blobs separated by a column, plus a diagonal neighbour that stays separate
        let on = [(0, 0), (1, 0), (0, 1), (3, 0), (3, 1), (4, 2)];
        let comps = connected_components(5, 3, |x, y| on.contains(&(x, y)));
        let counts: Vec<_> = comps.iter().map(|c| c.count()).collect();
        assert_eq!(counts, vec![3, 2, 1]);
        assert_eq!(comps[1].bounding_box(), Some(BBox::new(3, 0, 1, 2).unwrap()));
    }

    #[test]
    fn gap_between_boxes() {
        let a = BBox::new(0, 0, 4, 4).unwrap();
        assert_eq!(a.gap(&BBox::new(2, 2, 4, 4).unwrap()), 0);
        assert_eq!(a.gap(&BBox::new(4, 0, 1, 1).unwrap()), 0);
        assert_eq!(a.gap(&BBox::new(7, 1, 1, 1).unwrap()), 3);
        assert_eq!(a.gap(&BBox::new(6, 10, 1, 1).unwrap()), 6);
    }

    #[test]
    fn png_and_ppm_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let img = Image::new("x", 3, 2, 3, (0..18).map(|v| v * 10).collect()).unwrap();
        let path = dir.path().join("x.png");
        img.save_png(&path).unwrap();
        assert_eq!(Image::open(&path).unwrap(), img);

        let mut ppm = b"P6\n3 2\n255\n".to_vec();
        ppm.extend_from_slice(img.data());
        assert_eq!(Image::decode("x", &ppm).unwrap(), img);

        let mask = PixelMask::from_fn(5, 4, |x, y| (x + y) % 2 == 0);
        let mpath = dir.path().join("m.png");
        mask.save_png(&mpath).unwrap();
        assert_eq!(PixelMask::open_png(&mpath).unwrap(), mask);
    }
}
