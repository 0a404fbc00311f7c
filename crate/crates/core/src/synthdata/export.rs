use std::io::BufWriter;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Maps a value in [0, 1] to an RGB colour.
pub trait Colormap {
    fn rgb(&self, t: f64) -> [u8; 3];
}

#[derive(Clone, Copy, Debug, Default)]
pub struct Grayscale;

impl Colormap for Grayscale {
    fn rgb(&self, t: f64) -> [u8; 3] {
        let g = to_u8(t);
        [g, g, g]
    }
}

/// Piecewise-linear lookup table over evenly spaced stops.
#[derive(Clone, Debug)]
pub struct Lut {
    stops: Vec<[u8; 3]>,
}

impl Lut {
    pub fn new(stops: Vec<[u8; 3]>) -> Result<Self> {
        if stops.len() < 2 {
            return Err(Error::invalid("lut", "need at least two colour stops"));
        }
        Ok(Lut { stops })
    }

    /// Dark blue through teal and sand to pale yellow, for T1 maps.
    pub fn t1_map() -> Self {
        Lut {
            stops: vec![
                [5, 4, 40],
                [20, 60, 110],
                [40, 120, 120],
                [170, 150, 90],
                [230, 190, 120],
                [253, 245, 200],
            ],
        }
    }
}

impl Colormap for Lut {
    fn rgb(&self, t: f64) -> [u8; 3] {
        let t = if t.is_nan() { 0.0 } else { t.clamp(0.0, 1.0) };
        let pos = t * (self.stops.len() - 1) as f64;
        let i = (pos.floor() as usize).min(self.stops.len() - 2);
        let f = pos - i as f64;
        let (a, b) = (self.stops[i], self.stops[i + 1]);
        std::array::from_fn(|k| (a[k] as f64 + f * (b[k] as f64 - a[k] as f64)).round() as u8)
    }
}

fn to_u8(t: f64) -> u8 {
    if t.is_nan() {
        0
    } else {
        (t.clamp(0.0, 1.0) * 255.0).round() as u8
    }
}

/// RGB8 pixels of an `[H, W]` slice. Values are clipped to [-1, 1] and mapped
/// linearly so -1 is colormap position 0 and +1 is position 1.
pub fn slice_to_rgb(slice: &Tensor, cmap: &dyn Colormap) -> Result<(usize, usize, Vec<u8>)> {
    let [h, w] = slice.dims() else {
        return Err(Error::invalid(
            "png",
            format!("expected an [H, W] slice, got {:?}", slice.dims()),
        ));
    };
    let rgb = slice
        .data()
        .iter()
        .flat_map(|v| cmap.rgb((v + 1.0) / 2.0))
        .collect();
    Ok((*h, *w, rgb))
}

pub fn write_png(path: &Path, slice: &Tensor, cmap: &dyn Colormap) -> Result<()> {
    let (h, w, rgb) = slice_to_rgb(slice, cmap)?;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header()?;
    writer.write_image_data(&rgb)?;
    writer.finish()?;
    Ok(())
}
