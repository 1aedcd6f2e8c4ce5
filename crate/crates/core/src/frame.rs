use crate::error::{Error, Result};
use crate::ppm::RgbImage;

pub const CHANNELS: usize = 3;
pub const HEIGHT: usize = 64;
pub const WIDTH: usize = 32;
pub const FRAME_LEN: usize = CHANNELS * HEIGHT * WIDTH;

/// A soft-masked RGB frame, channel-major `[3, 64, 32]`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame {
    pixels: Vec<f32>,
}

impl Frame {
    pub fn new(pixels: Vec<f32>) -> Result<Self> {
        if pixels.len() != FRAME_LEN {
            return Err(Error::contract(format!(
                "frame needs {FRAME_LEN} values, got {}",
                pixels.len()
            )));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::contract(format!("frame value {bad} outside [0, 1]")));
        }
        Ok(Self { pixels })
    }

    pub fn black() -> Self {
        Self {
            pixels: vec![0.0; FRAME_LEN],
        }
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.pixels[(c * HEIGHT + y) * WIDTH + x]
    }

    /// True where any channel is non-zero.
    pub fn support(&self) -> Vec<bool> {
        (0..HEIGHT * WIDTH)
            .map(|p| (0..CHANNELS).any(|c| self.pixels[c * HEIGHT * WIDTH + p] != 0.0))
            .collect()
    }

    /// 8-bit quantisation used on disk: `round(v * 255)`.
    pub fn to_rgb(&self) -> RgbImage {
        let mut img = RgbImage::new(WIDTH, HEIGHT);
        for y in 0..HEIGHT {
            for x in 0..WIDTH {
                let q = |c| (self.get(c, y, x) * 255.0).round() as u8;
                img.put(x, y, [q(0), q(1), q(2)]);
            }
        }
        img
    }

    pub fn from_rgb(img: &RgbImage) -> Result<Self> {
        if img.width != WIDTH || img.height != HEIGHT {
            return Err(Error::contract(format!(
                "frame must be {WIDTH}x{HEIGHT}, got {}x{}",
                img.width, img.height
            )));
        }
        let mut pixels = vec![0.0; FRAME_LEN];
        for y in 0..HEIGHT {
            for x in 0..WIDTH {
                let rgb = img.get(x, y);
                for c in 0..CHANNELS {
                    pixels[(c * HEIGHT + y) * WIDTH + x] = rgb[c] as f32 / 255.0;
                }
            }
        }
        Ok(Self { pixels })
    }

    /// Snap to the 8-bit grid, i.e. what a disk round trip produces.
    pub fn quantized(&self) -> Self {
        Self::from_rgb(&self.to_rgb()).expect("same geometry")
    }

    /// Mean squared difference per value.
    pub fn mse(&self, other: &Frame) -> f64 {
        self.pixels
            .iter()
            .zip(&other.pixels)
            .map(|(&a, &b)| {
                let d = (a - b) as f64;
                d * d
            })
            .sum::<f64>()
            / FRAME_LEN as f64
    }
}

/// Intersection over union of two boolean masks.
pub fn support_iou(a: &[bool], b: &[bool]) -> f64 {
    let inter = a.iter().zip(b).filter(|(x, y)| **x && **y).count();
    let union = a.iter().zip(b).filter(|(x, y)| **x || **y).count();
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}
