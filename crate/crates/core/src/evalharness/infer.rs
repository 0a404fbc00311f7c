use std::path::Path;
use std::time::Instant;

use crate::error::{Error, Result};
use crate::model::Model;
use crate::synthdata::preprocess::resize_window;
use crate::synthdata::uvol::write_volume;
use crate::synthdata::{normalize_unit_range, write_png, Dims3, Grayscale, Volume};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct InferOutcome {
    pub volume: Volume,
    /// Wall seconds per slice, in slice order.
    pub latencies: Vec<f64>,
    /// Padded plane the network actually saw.
    pub padded: (usize, usize),
}

impl InferOutcome {
    pub fn median_latency(&self) -> f64 {
        super::bench::median(&self.latencies)
    }
}

fn up4(n: usize) -> usize {
    n.div_ceil(4) * 4
}

/// Runs the model slice by slice over a volume.
///
/// Planes whose sides are not multiples of 4 are zero-padded around the
/// center to the next multiple and the prediction is cropped back, so the
/// output always has the input dims. With `normalize` the input is first
/// mapped to [-1, 1] the same way the corpus is.
pub fn infer_volume(model: &Model, input: &Volume, normalize: bool) -> Result<InferOutcome> {
    if model.config.in_channels != 1 || model.config.out_channels != 1 {
        return Err(Error::invalid(
            "infer",
            format!(
                "volumes are single-channel but the model maps {} to {} channels",
                model.config.in_channels, model.config.out_channels
            ),
        ));
    }
    let d = input.dims();
    let mut x = input.clone();
    if normalize {
        normalize_unit_range(x.data_mut());
    }
    let (ph, pw) = (up4(d.h), up4(d.w));
    let mut out = Vec::with_capacity(d.numel());
    let mut latencies = Vec::with_capacity(d.d);
    for k in 0..d.d {
        let t0 = Instant::now();
        let padded = resize_window(x.slice(k), d.h, d.w, ph, pw).reshaped(vec![1, 1, ph, pw])?;
        let pred = model.predict(&padded)?;
        let back = resize_window(pred.data(), ph, pw, d.h, d.w);
        latencies.push(t0.elapsed().as_secs_f64());
        out.extend_from_slice(back.data());
    }
    let mut volume = Volume::new(Dims3::new(d.d, d.h, d.w), out)?;
    volume.spacing = input.spacing;
    Ok(InferOutcome {
        volume,
        latencies,
        padded: (ph, pw),
    })
}

/// Writes the predicted volume and, if asked, a PNG of one slice.
pub fn write_outputs(
    outcome: &InferOutcome,
    uvol: &Path,
    png: Option<(&Path, usize)>,
) -> Result<()> {
    write_volume(&outcome.volume, uvol)?;
    if let Some((path, k)) = png {
        let d = outcome.volume.dims();
        if k >= d.d {
            return Err(Error::invalid(
                "infer",
                format!("slice {k} out of range for depth {}", d.d),
            ));
        }
        let slice = Tensor::new(vec![d.h, d.w], outcome.volume.slice(k).to_vec())?;
        write_png(path, &slice, &Grayscale)?;
    }
    Ok(())
}
