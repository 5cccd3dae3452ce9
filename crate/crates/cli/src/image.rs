//! 8-bit grayscale PNG rendering of volume slices and reslices.

use anyhow::{bail, Result};
use xsect_core::volume::IntensityWindow;
use xsect_core::{Image2D, Volume};

/// Maps intensities through `window` onto 0..=255.
fn to_gray(values: impl Iterator<Item = f32>, window: &IntensityWindow) -> Vec<u8> {
    values
        .map(|v| ((window.map(v) + 1.0) * 127.5).round() as u8)
        .collect()
}

pub fn encode_png(width: usize, height: usize, gray: &[u8]) -> Result<Vec<u8>> {
    if gray.len() != width * height {
        bail!("pixel count {} does not match {width}x{height}", gray.len());
    }
    let mut out = Vec::new();
    let mut enc = png::Encoder::new(&mut out, width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc.write_header()?;
    w.write_image_data(gray)?;
    w.finish()?;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl std::str::FromStr for Axis {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x" | "X" => Ok(Axis::X),
            "y" | "Y" => Ok(Axis::Y),
            "z" | "Z" => Ok(Axis::Z),
            _ => bail!("axis must be x, y or z, got {s:?}"),
        }
    }
}

impl Axis {
    fn index(self) -> usize {
        self as usize
    }
}

/// Orthogonal slice `index` across `axis`. Rows run along the higher of
/// the two remaining axes, columns along the lower.
pub fn slice_png(
    v: &Volume,
    axis: Axis,
    index: usize,
    window: &IntensityWindow,
) -> Result<Vec<u8>> {
    let [nx, ny, nz] = v.dims();
    let a = axis.index();
    if index >= v.dims()[a] {
        bail!(
            "slice index {index} out of range for axis of length {}",
            v.dims()[a]
        );
    }
    let (w, h) = match axis {
        Axis::X => (ny, nz),
        Axis::Y => (nx, nz),
        Axis::Z => (nx, ny),
    };
    let at = |c: usize, r: usize| match axis {
        Axis::X => v.get(index, c, r),
        Axis::Y => v.get(c, index, r),
        Axis::Z => v.get(c, r, index),
    };
    let gray = to_gray(
        (0..h)
            .flat_map(|r| (0..w).map(move |c| (c, r)))
            .map(|(c, r)| at(c, r)),
        window,
    );
    encode_png(w, h, &gray)
}

pub fn image_png(img: &Image2D, window: &IntensityWindow) -> Result<Vec<u8>> {
    encode_png(
        img.size,
        img.size,
        &to_gray(img.data.iter().copied(), window),
    )
}
