//! Per-band min-max normalization.

use ndarray::Axis;

use super::RasterStack;

/// Rescales every band independently to [0, 1]. A constant band has no
/// usable range and maps to all zeros.
///
/// The band minimum and maximum are attained exactly after rescaling, so
/// applying this twice gives bit-identical output to applying it once.
pub fn band_normalize(stack: &RasterStack) -> RasterStack {
    let mut data = stack.data.clone();
    for mut band in data.axis_iter_mut(Axis(0)) {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &v in band.iter() {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if hi > lo {
            let range = hi - lo;
            band.mapv_inplace(|v| (v - lo) / range);
        } else {
            band.fill(0.0);
        }
    }
    RasterStack {
        modality_id: stack.modality_id.clone(),
        data,
    }
}
