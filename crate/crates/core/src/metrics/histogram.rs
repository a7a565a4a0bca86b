use crate::error::{Error, Result};
use crate::nnet::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct ChannelHistogram {
    /// Normalised so that `Σ density · (1 / bins) = 1`.
    pub density: Vec<f64>,
    pub mean: f64,
    pub median: f64,
}

/// Maps the model domain `[-1, 1]` to `[0, 1]`.
pub fn to_unit_range(images: &Tensor) -> Tensor {
    let data = images.data().iter().map(|v| (v + 1.0) / 2.0).collect();
    Tensor::new(images.shape(), data).expect("same shape")
}

/// Per-channel densities over `bins` equal bins of `[0, 1]` for images in
/// `[..., C]` layout. The value 1 falls in the last bin.
pub fn channel_histograms(images: &Tensor, bins: usize) -> Result<Vec<ChannelHistogram>> {
    let c = *images
        .shape()
        .last()
        .ok_or_else(|| Error::shape("channel_histograms", "scalar input"))?;
    if bins == 0 || c == 0 || images.is_empty() {
        return Err(Error::invalid("histograms need at least one bin, channel and pixel"));
    }
    if let Some(v) = images.data().iter().find(|v| !(-1e-9..=1.0 + 1e-9).contains(*v)) {
        return Err(Error::invalid(format!("pixel value {v} is outside [0, 1]")));
    }
    let per = images.len() / c;
    let width = 1.0 / bins as f64;
    Ok((0..c)
        .map(|ch| {
            let mut vals: Vec<f64> = images.data().iter().skip(ch).step_by(c).map(|v| v.clamp(0.0, 1.0)).collect();
            let mut counts = vec![0usize; bins];
            for &v in &vals {
                counts[((v * bins as f64) as usize).min(bins - 1)] += 1;
            }
            let density = counts.iter().map(|&k| k as f64 / (per as f64 * width)).collect();
            let mean = vals.iter().sum::<f64>() / per as f64;
            vals.sort_by(f64::total_cmp);
            let median = if per % 2 == 1 {
                vals[per / 2]
            } else {
                (vals[per / 2 - 1] + vals[per / 2]) / 2.0
            };
            ChannelHistogram { density, mean, median }
        })
        .collect())
}

/// Tab-separated table with a header, one row per bin:
/// `bin_center` then one density column per channel.
pub fn histogram_tsv(hists: &[ChannelHistogram], channel_names: &[&str]) -> String {
    let bins = hists.first().map_or(0, |h| h.density.len());
    let mut out = String::from("bin_center");
    for (i, _) in hists.iter().enumerate() {
        out.push('\t');
        out.push_str(channel_names.get(i).copied().unwrap_or("channel"));
    }
    out.push('\n');
    for b in 0..bins {
        out.push_str(&format!("{:.6}", (b as f64 + 0.5) / bins as f64));
        for h in hists {
            out.push_str(&format!("\t{:.9}", h.density[b]));
        }
        out.push('\n');
    }
    out
}
