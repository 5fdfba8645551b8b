//! Middlebury color-wheel flow coding: hue from direction, saturation from
//! magnitude. The 55-entry wheel is traversed seamlessly around the full
//! circle, and magnitudes at or beyond the saturation point map to the pure
//! wheel color.

use std::f64::consts::PI;
use std::sync::OnceLock;

const SEGMENTS: [usize; 6] = [15, 6, 4, 11, 13, 6]; // RY YG GC CB BM MR

fn wheel() -> &'static [[f64; 3]] {
    static WHEEL: OnceLock<Vec<[f64; 3]>> = OnceLock::new();
    WHEEL.get_or_init(|| {
        let [ry, yg, gc, cb, bm, mr] = SEGMENTS;
        let ramp = |i: usize, n: usize| (255 * i / n) as f64;
        let mut w = Vec::with_capacity(SEGMENTS.iter().sum());
        w.extend((0..ry).map(|i| [255.0, ramp(i, ry), 0.0]));
        w.extend((0..yg).map(|i| [255.0 - ramp(i, yg), 255.0, 0.0]));
        w.extend((0..gc).map(|i| [0.0, 255.0, ramp(i, gc)]));
        w.extend((0..cb).map(|i| [0.0, 255.0 - ramp(i, cb), 255.0]));
        w.extend((0..bm).map(|i| [ramp(i, bm), 0.0, 255.0]));
        w.extend((0..mr).map(|i| [255.0, 0.0, 255.0 - ramp(i, mr)]));
        w
    })
}

pub fn wheel_len() -> usize {
    wheel().len()
}

/// Continuous wheel position in [0, ncols) for a flow direction.
fn wheel_position(u: f64, v: f64) -> f64 {
    let n = wheel().len() as f64;
    let a = (-v).atan2(-u) / PI;
    ((a + 1.0) / 2.0 * n).rem_euclid(n)
}

/// Encodes one vector as 8-bit RGB. `max_magnitude` must be positive.
pub fn flow_to_rgb(u: f64, v: f64, max_magnitude: f64) -> [u8; 3] {
    let w = wheel();
    let rad = (u.hypot(v) / max_magnitude).min(1.0);
    if rad == 0.0 {
        return [255; 3];
    }
    let fk = wheel_position(u, v);
    let k0 = fk.floor() as usize % w.len();
    let k1 = (k0 + 1) % w.len();
    let f = fk - fk.floor();
    let mut out = [0u8; 3];
    for c in 0..3 {
        let col = ((1.0 - f) * w[k0][c] + f * w[k1][c]) / 255.0;
        out[c] = (255.0 * (1.0 - rad * (1.0 - col))).round() as u8;
    }
    out
}

/// Inverts [`flow_to_rgb`] up to quantization; saturated colors decode to
/// magnitude `max_magnitude`.
pub fn rgb_to_flow(rgb: [f64; 3], max_magnitude: f64) -> (f64, f64) {
    let w = wheel();
    let min = rgb.iter().cloned().fold(f64::INFINITY, f64::min);
    let rad = 1.0 - min / 255.0;
    if rad <= 1e-9 {
        return (0.0, 0.0);
    }
    let col = rgb.map(|c| 1.0 - (1.0 - c / 255.0) / rad);
    let mut best = (f64::INFINITY, 0.0);
    for k in 0..w.len() {
        let c0 = w[k].map(|c| c / 255.0);
        let c1 = w[(k + 1) % w.len()].map(|c| c / 255.0);
        let d = [c1[0] - c0[0], c1[1] - c0[1], c1[2] - c0[2]];
        let dd = d[0] * d[0] + d[1] * d[1] + d[2] * d[2];
        let proj = (0..3).map(|c| (col[c] - c0[c]) * d[c]).sum::<f64>();
        let f = if dd > 0.0 { (proj / dd).clamp(0.0, 1.0) } else { 0.0 };
        let res = (0..3).map(|c| (col[c] - c0[c] - f * d[c]).powi(2)).sum::<f64>();
        if res < best.0 {
            best = (res, k as f64 + f);
        }
    }
    let theta = (best.1 / w.len() as f64 * 2.0 - 1.0) * PI;
    let mag = rad * max_magnitude;
    (-theta.cos() * mag, -theta.sin() * mag)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wheel_has_55_colors_each_with_a_zero_and_a_full_channel() {
        assert_eq!(wheel_len(), 55);
        for c in wheel() {
            assert!(c.contains(&0.0) && c.contains(&255.0), "{c:?}");
        }
    }

    #[test]
    fn zero_flow_is_white() {
        assert_eq!(flow_to_rgb(0.0, 0.0, 3.0), [255, 255, 255]);
    }

    #[test]
    fn saturated_positive_x_is_wheel_origin() {
        assert_eq!(flow_to_rgb(3.0, 0.0, 3.0), [255, 0, 0]);
        assert_eq!(flow_to_rgb(30.0, 0.0, 3.0), [255, 0, 0]);
    }

    #[test]
    fn opposite_vectors_sit_half_a_wheel_apart() {
        let n = wheel_len() as f64;
        let d = (wheel_position(1.0, 0.0) - wheel_position(-1.0, 0.0)).abs();
        assert!((d - n / 2.0).abs() < 1e-9);
        let (a, b) = (rgb_to_flow(flow_to_rgb(2.0, 0.0, 2.0).map(f64::from), 2.0), rgb_to_flow(flow_to_rgb(-2.0, 0.0, 2.0).map(f64::from), 2.0));
        let ang = |p: (f64, f64)| p.1.atan2(p.0).to_degrees();
        let diff = (ang(a) - ang(b)).rem_euclid(360.0);
        assert!((diff - 180.0).abs() < 3.0, "{diff}");
    }

    #[test]
    fn decode_inverts_encode() {
        for k in 0..72 {
            let th = k as f64 * 5.0_f64.to_radians();
            let (u, v) = (0.7 * th.cos(), 0.7 * th.sin());
            let (du, dv) = rgb_to_flow(flow_to_rgb(u, v, 1.0).map(f64::from), 1.0);
            let err = (dv.atan2(du) - th).rem_euclid(2.0 * PI);
            let err = err.min(2.0 * PI - err).to_degrees();
            assert!(err < 3.0, "angle {k}: {err}");
            assert!((du.hypot(dv) - 0.7).abs() <= 2.0 / 255.0);
        }
    }
}
