//! Expansion-network channels: color-coded mask-pair optical flow plus a
//! four-level growth map.

mod color;
mod flow;

pub use color::{flow_to_rgb, rgb_to_flow, wheel_len};
pub use flow::{estimate_flow, FlowField2D, FlowParams};

use crate::volumes::{TumorMask, Volume3D};
use crate::{CoreError, Result};

pub const GROWTH_OVERLAP: f32 = 255.0;
pub const GROWTH_NEW: f32 = 170.0;
pub const GROWTH_SHRINK: f32 = 85.0;

/// RGB flow coding then the growth map, in that channel order.
#[derive(Debug, Clone, PartialEq)]
pub struct ExpansionImage {
    pub r: Volume3D,
    pub g: Volume3D,
    pub b: Volume3D,
    pub growth: Volume3D,
    /// Magnitude at which the color coding saturates.
    pub max_magnitude: f64,
}

impl ExpansionImage {
    pub fn channels(&self) -> [&Volume3D; 4] {
        [&self.r, &self.g, &self.b, &self.growth]
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.growth.dims();
        if self.channels().iter().any(|c| c.dims() != d) {
            return Err(CoreError::DimsMismatch("expansion channels differ in dims".into()));
        }
        if !self
            .growth
            .data()
            .iter()
            .all(|&v| v == 0.0 || v == GROWTH_SHRINK || v == GROWTH_NEW || v == GROWTH_OVERLAP)
        {
            return Err(CoreError::InvalidInput("growth map holds an unexpected level".into()));
        }
        Ok(())
    }
}

/// Overlap 255, t2-only 170, t1-only 85, background 0.
pub fn build_growth_map(mask_t1: &TumorMask, mask_t2: &TumorMask) -> Result<Volume3D> {
    if mask_t1.dims() != mask_t2.dims() {
        return Err(CoreError::DimsMismatch("growth map masks differ in dims".into()));
    }
    let mut out = mask_t1.volume().map(|_| 0.0);
    for (i, o) in out.data_mut().iter_mut().enumerate() {
        *o = match (mask_t1.is_on_index(i), mask_t2.is_on_index(i)) {
            (true, true) => GROWTH_OVERLAP,
            (false, true) => GROWTH_NEW,
            (true, false) => GROWTH_SHRINK,
            (false, false) => 0.0,
        };
    }
    Ok(out)
}

/// Three 8-bit color channels stored as floats in [0, 255].
pub fn encode_flow_color(flow: &FlowField2D, max_magnitude: f64, like: &Volume3D) -> Result<[Volume3D; 3]> {
    if !(max_magnitude > 0.0 && max_magnitude.is_finite()) {
        return Err(CoreError::InvalidInput(format!("max_magnitude {max_magnitude} must be positive")));
    }
    if flow.dims != like.dims() {
        return Err(CoreError::DimsMismatch("flow and reference volume differ in dims".into()));
    }
    if flow.u.iter().chain(&flow.v).any(|x| !x.is_finite()) {
        return Err(CoreError::InvalidInput("non-finite flow".into()));
    }
    let mut chans = [like.map(|_| 0.0), like.map(|_| 0.0), like.map(|_| 0.0)];
    for i in 0..flow.u.len() {
        let rgb = flow_to_rgb(flow.u[i] as f64, flow.v[i] as f64, max_magnitude);
        for c in 0..3 {
            chans[c].data_mut()[i] = rgb[c] as f32;
        }
    }
    Ok(chans)
}

pub fn assemble_expansion_channels(
    mask_t1: &TumorMask,
    mask_t2: &TumorMask,
    params: &FlowParams,
) -> Result<(ExpansionImage, FlowField2D)> {
    let growth = build_growth_map(mask_t1, mask_t2)?;
    let flow = estimate_flow(mask_t1, mask_t2, params)?;
    let max_magnitude = params.max_magnitude.unwrap_or_else(|| flow.robust_max_magnitude());
    let [r, g, b] = encode_flow_color(&flow, max_magnitude, &growth)?;
    let img = ExpansionImage {
        r,
        g,
        b,
        growth,
        max_magnitude,
    };
    img.validate()?;
    Ok((img, flow))
}
