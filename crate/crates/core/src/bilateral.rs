//! Edge-preserving bilateral smoothing of depth frames.
//!
//! Valid pixels are replaced by a spatial × range Gaussian-weighted mean
//! of their neighborhood; range weights are taken against the center
//! pixel's depth, so depth discontinuities are preserved. Invalid pixels
//! with at least three valid neighbors in the window are filled with the
//! spatially weighted mean (there is no center depth to range against),
//! which closes isolated holes.

use crate::geometry::DepthFrame;
use crate::{Error, Result};

/// Minimum count of valid neighbors required to fill an invalid pixel.
const FILL_MIN_NEIGHBORS: usize = 3;

pub fn bilateral_filter(
    frame: &DepthFrame,
    sigma_space: f64,
    sigma_range: f64,
) -> Result<DepthFrame> {
    if !(sigma_space > 0.0) || !(sigma_range > 0.0) {
        return Err(Error::InvalidInput(format!(
            "bilateral sigmas must be positive (got space={sigma_space}, range={sigma_range})"
        )));
    }
    let radius = (2.0 * sigma_space).ceil() as i64;
    let inv_2ss = 1.0 / (2.0 * sigma_space * sigma_space);
    let inv_2sr = 1.0 / (2.0 * sigma_range * sigma_range);
    let (w, h) = (frame.width() as i64, frame.height() as i64);

    let mut out = DepthFrame::all_invalid(frame.width(), frame.height());
    for v in 0..h {
        for u in 0..w {
            let center = frame.depth(u as usize, v as usize);
            let mut weight_sum = 0.0;
            let mut value_sum = 0.0;
            let mut neighbors = 0usize;
            for dv in -radius..=radius {
                for du in -radius..=radius {
                    let (nu, nv) = (u + du, v + dv);
                    if nu < 0 || nv < 0 || nu >= w || nv >= h {
                        continue;
                    }
                    let Some(d) = frame.depth(nu as usize, nv as usize) else {
                        continue;
                    };
                    if du != 0 || dv != 0 {
                        neighbors += 1;
                    }
                    let spatial = (-((du * du + dv * dv) as f64) * inv_2ss).exp();
                    let weight = match center {
                        Some(c) => {
                            let delta = d - c;
                            spatial * (-delta * delta * inv_2sr).exp()
                        }
                        None => spatial,
                    };
                    weight_sum += weight;
                    value_sum += weight * d;
                }
            }
            let filtered = match center {
                Some(_) => Some(value_sum / weight_sum),
                None if neighbors >= FILL_MIN_NEIGHBORS => Some(value_sum / weight_sum),
                None => None,
            };
            if let Some(d) = filtered {
                if d.is_finite() && d > 0.0 {
                    out.set(u as usize, v as usize, Some(d))?;
                }
            }
        }
    }
    Ok(out)
}
