use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::DataError;

/// Grayscale raster, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<f32>) -> Result<Self, DataError> {
        if width == 0 || height == 0 || pixels.len() != width * height {
            return Err(DataError::ImageShape(format!("{} pixels for {width}x{height}", pixels.len())));
        }
        Ok(Image { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, value: f32) -> Self {
        Image {
            width,
            height,
            pixels: vec![value; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [f32] {
        &mut self.pixels
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    /// Bilinear sample at continuous pixel-centre coordinates; `fill` outside.
    fn sample(&self, x: f64, y: f64, fill: f32) -> f32 {
        let (w, h) = (self.width as f64, self.height as f64);
        if x < -0.5 || y < -0.5 || x > w - 0.5 || y > h - 0.5 {
            return fill;
        }
        let x = x.clamp(0.0, w - 1.0);
        let y = y.clamp(0.0, h - 1.0);
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(self.width - 1), (y0 + 1).min(self.height - 1));
        let (fx, fy) = ((x - x0 as f64) as f32, (y - y0 as f64) as f32);
        let top = self.get(x0, y0) * (1.0 - fx) + self.get(x1, y0) * fx;
        let bottom = self.get(x0, y1) * (1.0 - fx) + self.get(x1, y1) * fx;
        top * (1.0 - fy) + bottom * fy
    }

    fn map(&self, width: usize, height: usize, f: impl Fn(usize, usize) -> f32) -> Image {
        let mut pixels = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Image { width, height, pixels }
    }

    fn crop(&self, x0: usize, y0: usize, width: usize, height: usize) -> Image {
        self.map(width, height, |x, y| self.get(x0 + x, y0 + y))
    }

    fn resize(&self, width: usize, height: usize) -> Image {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let sx = self.width as f64 / width as f64;
        let sy = self.height as f64 / height as f64;
        self.map(width, height, |x, y| {
            self.sample((x as f64 + 0.5) * sx - 0.5, (y as f64 + 0.5) * sy - 0.5, 0.0)
        })
    }

    /// Rotation about the centre by `degrees` (counter-clockwise), bilinear, `fill` outside.
    fn rotate(&self, degrees: f64, fill: f32) -> Image {
        let (s, c) = degrees.to_radians().sin_cos();
        let cx = (self.width as f64 - 1.0) / 2.0;
        let cy = (self.height as f64 - 1.0) / 2.0;
        self.map(self.width, self.height, |x, y| {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            self.sample(c * dx - s * dy + cx, s * dx + c * dy + cy, fill)
        })
    }

    /// Exact counter-clockwise rotation by `quarter_turns` × 90°.
    fn rotate_quarter(&self, quarter_turns: u32) -> Image {
        let (w, h) = (self.width, self.height);
        match quarter_turns % 4 {
            0 => self.clone(),
            1 => self.map(h, w, |x, y| self.get(w - 1 - y, x)),
            2 => self.map(w, h, |x, y| self.get(w - 1 - x, h - 1 - y)),
            _ => self.map(h, w, |x, y| self.get(y, h - 1 - x)),
        }
    }
}

/// Parses a binary (P5) PGM with maxval < 256 into values in `[0, 1]`.
pub fn parse_pgm(bytes: &[u8]) -> Result<Image, DataError> {
    let bad = |m: &str| DataError::Pgm(m.to_string());
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii header"))?);
    }
    if fields[0] != "P5" {
        return Err(bad("not a binary PGM (P5)"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("malformed header number"));
    let (width, height, maxval) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(bad("only 8-bit PGM is supported"));
    }
    pos += 1;
    let n = width * height;
    if bytes.len() < pos + n {
        return Err(bad("truncated pixel data"));
    }
    let pixels = bytes[pos..pos + n].iter().map(|&b| b as f32 / maxval as f32).collect();
    Image::new(width, height, pixels)
}

/// Encodes values clamped to `[0, 1]` as 8-bit P5.
pub fn encode_pgm(image: &Image) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend(image.pixels.iter().map(|&v| quantize(v)));
    out
}

pub(crate) fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn read_pgm(path: &Path) -> Result<Image, DataError> {
    let bytes = std::fs::read(path).map_err(|e| DataError::io(path, e))?;
    parse_pgm(&bytes)
}

pub fn write_pgm(path: &Path, image: &Image) -> Result<(), DataError> {
    std::fs::write(path, encode_pgm(image)).map_err(|e| DataError::io(path, e))
}

pub fn normalize_image(image: &Image, mean: f64, std: f64) -> Result<Image, DataError> {
    if !(std > 0.0) || !std.is_finite() || !mean.is_finite() {
        return Err(DataError::Policy(format!("normalization std {std} must be positive")));
    }
    let (m, s) = (mean as f32, std as f32);
    Ok(Image {
        width: image.width,
        height: image.height,
        pixels: image.pixels.iter().map(|v| (v - m) / s).collect(),
    })
}

/// Augmentation pipeline settings; stages run as normalize, small rotation,
/// square crop, resize, right-angle rotation, clamp.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentPolicy {
    /// Small rotations are drawn uniformly from `±rotation_deg`.
    pub rotation_deg: f64,
    pub crop: bool,
    pub side: usize,
    /// Allowed right-angle rotations in degrees (multiples of 90).
    pub right_angles: Vec<u32>,
    pub mean: f64,
    pub std: f64,
}

pub const CLAMP: f32 = 3.0;

impl AugmentPolicy {
    pub fn training(side: usize, mean: f64, std: f64) -> Self {
        AugmentPolicy {
            rotation_deg: 20.0,
            crop: true,
            side,
            right_angles: vec![0, 90, 180, 270],
            mean,
            std,
        }
    }

    /// Normalization and resizing only.
    pub fn evaluation(side: usize, mean: f64, std: f64) -> Self {
        AugmentPolicy {
            rotation_deg: 0.0,
            crop: false,
            side,
            right_angles: vec![0],
            mean,
            std,
        }
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if !(self.rotation_deg >= 0.0) || !self.rotation_deg.is_finite() {
            return Err(DataError::Policy(format!("rotation range {} must be non-negative", self.rotation_deg)));
        }
        if self.side == 0 {
            return Err(DataError::Policy("output side must be positive".into()));
        }
        if self.right_angles.is_empty() || self.right_angles.iter().any(|a| a % 90 != 0) {
            return Err(DataError::Policy(format!("right angles {:?} must be non-empty multiples of 90", self.right_angles)));
        }
        if !(self.std > 0.0) {
            return Err(DataError::Policy(format!("normalization std {} must be positive", self.std)));
        }
        Ok(())
    }
}

pub fn augment_image(image: &Image, policy: &AugmentPolicy, rng: &mut ChaCha8Rng) -> Result<Image, DataError> {
    policy.validate()?;
    let short = image.width.min(image.height);
    if short < policy.side {
        return Err(DataError::ImageTooSmall {
            width: image.width,
            height: image.height,
            side: policy.side,
        });
    }
    let mut img = normalize_image(image, policy.mean, policy.std)?;
    if policy.rotation_deg > 0.0 {
        let angle = rng.random_range(-policy.rotation_deg..=policy.rotation_deg);
        img = img.rotate(angle, 0.0);
    }
    if policy.crop && img.width != img.height {
        let slack = img.width.max(img.height) - short;
        let offset = rng.random_range(0..=slack);
        img = if img.width > img.height {
            img.crop(offset, 0, short, short)
        } else {
            img.crop(0, offset, short, short)
        };
    }
    img = img.resize(policy.side, policy.side);
    let turn = policy.right_angles[rng.random_range(0..policy.right_angles.len())];
    img = img.rotate_quarter(turn / 90);
    for v in &mut img.pixels {
        *v = if v.is_nan() { 0.0 } else { v.clamp(-CLAMP, CLAMP) };
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::SeedTree;

    fn ramp(w: usize, h: usize) -> Image {
        Image::new(w, h, (0..w * h).map(|i| i as f32 / (w * h) as f32).collect()).unwrap()
    }

    #[test]
    fn pgm_round_trip() {
        let img = Image::new(3, 2, vec![0.0, 1.0, 0.5, 0.25, 1.0, 0.0]).unwrap();
        let bytes = encode_pgm(&img);
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        let back = parse_pgm(&bytes).unwrap();
        for (a, b) in img.pixels().iter().zip(back.pixels()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
        assert_eq!(encode_pgm(&back), bytes);
    }

    #[test]
    fn pgm_header_comments_and_errors() {
        let mut bytes = b"P5 # comment\n2 1\n255\n".to_vec();
        bytes.extend([0u8, 255]);
        assert_eq!(parse_pgm(&bytes).unwrap().pixels(), &[0.0, 1.0]);
        assert!(parse_pgm(b"P2\n1 1\n255\n0").is_err());
        assert!(parse_pgm(b"P5\n4 4\n255\n\x00").is_err());
        assert!(parse_pgm(b"P5\n4").is_err());
    }

    #[test]
    fn normalize_examples() {
        let img = ramp(4, 4);
        assert_eq!(normalize_image(&img, 0.0, 1.0).unwrap(), img);
        let flat = Image::filled(3, 3, 0.4);
        assert!(normalize_image(&flat, 0.4, 0.2).unwrap().pixels().iter().all(|v| *v == 0.0));
        assert!(normalize_image(&flat, 0.0, 0.0).is_err());
    }

    #[test]
    fn identity_policy() {
        let img = ramp(8, 8);
        let policy = AugmentPolicy::evaluation(8, 0.0, 1.0);
        let out = augment_image(&img, &policy, &mut SeedTree::new(0).rng()).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn quarter_turns_compose() {
        let img = ramp(5, 3);
        let once = img.rotate_quarter(1);
        assert_eq!((once.width(), once.height()), (3, 5));
        assert_eq!(once.rotate_quarter(3), img);
        assert_eq!(img.rotate_quarter(2).rotate_quarter(2), img);
        assert_eq!(img.rotate(0.0, 0.0), img);
    }

    #[test]
    fn crop_and_resize_reach_target_side() {
        let img = ramp(40, 30);
        let policy = AugmentPolicy::training(16, 0.5, 0.25);
        let mut rng = SeedTree::new(3).rng();
        for _ in 0..50 {
            let out = augment_image(&img, &policy, &mut rng).unwrap();
            assert_eq!((out.width(), out.height()), (16, 16));
            assert!(out.pixels().iter().all(|v| v.abs() <= CLAMP));
        }
        assert!(matches!(
            augment_image(&ramp(10, 10), &policy, &mut rng),
            Err(DataError::ImageTooSmall { .. })
        ));
    }
}
