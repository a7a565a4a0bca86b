use crate::error::{Error, Result};

/// Interleaved `[sin(t·f₀), cos(t·f₀), sin(t·f₁), …]` with frequencies
/// `f_i = 10000^(−i/(dim/2))`. Accepts any real `t`.
pub fn sinusoidal(t: f64, dim: usize) -> Vec<f64> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(dim);
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        let (s, c) = (t * freq).sin_cos();
        out.push(s);
        out.push(c);
    }
    out
}

/// Sinusoidal embedding of diffusion step `t ∈ [1, t_max]`.
pub fn time_embedding(t: usize, t_max: usize, dim: usize) -> Result<Vec<f64>> {
    if t == 0 || t > t_max {
        return Err(Error::OutOfRange {
            what: "diffusion step",
            index: t,
            size: t_max + 1,
        });
    }
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::invalid(format!("time embedding dim must be even and positive, got {dim}")));
    }
    Ok(sinusoidal(t as f64, dim))
}
