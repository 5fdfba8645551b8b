//! Per-slice coarse-to-fine warping optical flow with Charbonnier data and
//! smoothness penalties, solved by lagged-weight fixed point iterations and
//! SOR on the linearised increment system.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::volumes::TumorMask;
use crate::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowParams {
    /// Downsampling ratio between pyramid levels, in (0, 1).
    pub pyramid_factor: f64,
    /// Levels stop once the shorter side would fall below this.
    pub min_level_size: usize,
    pub warps: usize,
    /// Smoothness weight for intensities in [0, 255].
    pub alpha: f64,
    pub fixed_point_iters: usize,
    pub sor_iters: usize,
    pub sor_omega: f64,
    pub charbonnier_eps: f64,
    /// Gaussian sigma applied to the binary masks before estimation.
    pub presmooth_sigma: f64,
    /// Color-coding saturation magnitude; `None` uses the case's 99th
    /// percentile of nonzero flow magnitudes.
    pub max_magnitude: Option<f64>,
}

impl Default for FlowParams {
    fn default() -> Self {
        Self {
            pyramid_factor: 0.5,
            min_level_size: 8,
            warps: 5,
            alpha: 10.0,
            fixed_point_iters: 20,
            sor_iters: 5,
            sor_omega: 1.8,
            charbonnier_eps: 1e-3,
            presmooth_sigma: 1.0,
            max_magnitude: None,
        }
    }
}

impl FlowParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(CoreError::InvalidConfig(format!("flow: {m}")));
        if !(self.pyramid_factor > 0.0 && self.pyramid_factor < 1.0) {
            return bad("pyramid_factor must lie in (0, 1)");
        }
        if self.min_level_size < 2 {
            return bad("min_level_size must be >= 2");
        }
        if self.warps == 0 || self.fixed_point_iters == 0 || self.sor_iters == 0 {
            return bad("warps, fixed_point_iters and sor_iters must be > 0");
        }
        if !(self.alpha > 0.0) || !(self.charbonnier_eps > 0.0) || self.presmooth_sigma < 0.0 {
            return bad("alpha and charbonnier_eps must be > 0, presmooth_sigma >= 0");
        }
        if !(self.sor_omega > 0.0 && self.sor_omega < 2.0) {
            return bad("sor_omega must lie in (0, 2)");
        }
        if let Some(m) = self.max_magnitude {
            if !(m > 0.0 && m.is_finite()) {
                return bad("max_magnitude must be positive");
            }
        }
        Ok(())
    }
}

/// Stack of per-axial-slice displacement fields, x-fastest like the volumes.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField2D {
    pub dims: [usize; 3],
    pub u: Vec<f32>,
    pub v: Vec<f32>,
}

impl FlowField2D {
    pub fn zeros(dims: [usize; 3]) -> Self {
        let n = dims.iter().product();
        Self {
            dims,
            u: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> (f32, f32) {
        let i = (z * self.dims[1] + y) * self.dims[0] + x;
        (self.u[i], self.v[i])
    }

    pub fn magnitudes(&self) -> impl Iterator<Item = f64> + '_ {
        self.u.iter().zip(&self.v).map(|(&u, &v)| (u as f64).hypot(v as f64))
    }

    /// 99th percentile of magnitudes above 1e-3, or 1.0 when none are.
    pub fn robust_max_magnitude(&self) -> f64 {
        let mut m: Vec<f64> = self.magnitudes().filter(|&m| m > 1e-3).collect();
        if m.is_empty() {
            return 1.0;
        }
        m.sort_by(f64::total_cmp);
        let rank = ((m.len() as f64) * 0.99).ceil() as usize;
        m[rank.clamp(1, m.len()) - 1]
    }
}

/// Dense t1 -> t2 flow, slice by slice. Slices empty in both masks get zero
/// flow without running the solver.
pub fn estimate_flow(mask_t1: &TumorMask, mask_t2: &TumorMask, params: &FlowParams) -> Result<FlowField2D> {
    if mask_t1.dims() != mask_t2.dims() {
        return Err(CoreError::DimsMismatch(format!(
            "flow masks {:?} vs {:?}",
            mask_t1.dims(),
            mask_t2.dims()
        )));
    }
    params.validate()?;
    let [nx, ny, nz] = mask_t1.dims();
    let plane = nx * ny;
    let a = mask_t1.volume().data();
    let b = mask_t2.volume().data();
    let slices: Vec<(Vec<f32>, Vec<f32>)> = (0..nz)
        .into_par_iter()
        .map(|z| {
            let s1 = &a[z * plane..(z + 1) * plane];
            let s2 = &b[z * plane..(z + 1) * plane];
            if s1.iter().chain(s2).all(|&v| v == 0.0) {
                return (vec![0.0; plane], vec![0.0; plane]);
            }
            let img1 = Image::from_f32(nx, ny, s1);
            let img2 = Image::from_f32(nx, ny, s2);
            let (u, v) = flow_slice(&img1, &img2, params);
            (
                u.data.iter().map(|&x| x as f32).collect(),
                v.data.iter().map(|&x| x as f32).collect(),
            )
        })
        .collect();
    let mut out = FlowField2D::zeros(mask_t1.dims());
    for (z, (u, v)) in slices.into_iter().enumerate() {
        out.u[z * plane..(z + 1) * plane].copy_from_slice(&u);
        out.v[z * plane..(z + 1) * plane].copy_from_slice(&v);
    }
    Ok(out)
}

/// Row-major 2-D scratch image.
#[derive(Debug, Clone)]
pub(crate) struct Image {
    pub w: usize,
    pub h: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(w: usize, h: usize) -> Self {
        Self {
            w,
            h,
            data: vec![0.0; w * h],
        }
    }

    pub fn from_f32(w: usize, h: usize, d: &[f32]) -> Self {
        Self {
            w,
            h,
            data: d.iter().map(|&v| v as f64).collect(),
        }
    }

    #[inline]
    fn at(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.w + x]
    }

    /// Bilinear sample with replicated borders.
    fn sample(&self, x: f64, y: f64) -> f64 {
        let x = x.clamp(0.0, (self.w - 1) as f64);
        let y = y.clamp(0.0, (self.h - 1) as f64);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.w - 1);
        let y1 = (y0 + 1).min(self.h - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let top = self.at(x0, y0) * (1.0 - fx) + self.at(x1, y0) * fx;
        let bot = self.at(x0, y1) * (1.0 - fx) + self.at(x1, y1) * fx;
        top * (1.0 - fy) + bot * fy
    }

    /// Resamples to `w x h` with pixel-center alignment.
    fn resized(&self, w: usize, h: usize) -> Image {
        let sx = self.w as f64 / w as f64;
        let sy = self.h as f64 / h as f64;
        let mut out = Image::new(w, h);
        for y in 0..h {
            let fy = (y as f64 + 0.5) * sy - 0.5;
            for x in 0..w {
                let fx = (x as f64 + 0.5) * sx - 0.5;
                out.data[y * w + x] = self.sample(fx, fy);
            }
        }
        out
    }

    /// Separable Gaussian blur, radius ceil(3 sigma), replicated borders.
    pub fn blurred(&self, sigma: f64) -> Image {
        if sigma <= 0.0 {
            return self.clone();
        }
        let r = (3.0 * sigma).ceil() as isize;
        let kernel: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
        let norm: f64 = kernel.iter().sum();
        let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
        let (w, h) = (self.w as isize, self.h as isize);
        let mut tmp = Image::new(self.w, self.h);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, i) in (-r..=r).enumerate() {
                    let xx = (x + i).clamp(0, w - 1);
                    acc += kernel[k] * self.data[(y * w + xx) as usize];
                }
                tmp.data[(y * w + x) as usize] = acc;
            }
        }
        let mut out = Image::new(self.w, self.h);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, i) in (-r..=r).enumerate() {
                    let yy = (y + i).clamp(0, h - 1);
                    acc += kernel[k] * tmp.data[(yy * w + x) as usize];
                }
                out.data[(y * w + x) as usize] = acc;
            }
        }
        out
    }

    /// Central differences, one-sided at the borders.
    fn gradients(&self) -> (Image, Image) {
        let (w, h) = (self.w, self.h);
        let mut gx = Image::new(w, h);
        let mut gy = Image::new(w, h);
        for y in 0..h {
            for x in 0..w {
                let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
                let (yu, yd) = (y.saturating_sub(1), (y + 1).min(h - 1));
                let i = y * w + x;
                if xr > xl {
                    gx.data[i] = (self.at(xr, y) - self.at(xl, y)) / (xr - xl) as f64;
                }
                if yd > yu {
                    gy.data[i] = (self.at(x, yd) - self.at(x, yu)) / (yd - yu) as f64;
                }
            }
        }
        (gx, gy)
    }
}

fn pyramid(img: &Image, p: &FlowParams) -> Vec<Image> {
    let mut levels = vec![img.clone()];
    // anti-alias blur matched to the decimation ratio
    let sigma = 0.5 * (1.0 / (p.pyramid_factor * p.pyramid_factor) - 1.0).sqrt();
    loop {
        let last = levels.last().expect("nonempty pyramid");
        let w = (last.w as f64 * p.pyramid_factor).round() as usize;
        let h = (last.h as f64 * p.pyramid_factor).round() as usize;
        if w.min(h) < p.min_level_size || w == last.w && h == last.h {
            break;
        }
        let next = last.blurred(sigma).resized(w, h);
        levels.push(next);
    }
    levels
}

pub(crate) fn flow_slice(i1: &Image, i2: &Image, p: &FlowParams) -> (Image, Image) {
    let p1 = pyramid(&i1.blurred(p.presmooth_sigma), p);
    let p2 = pyramid(&i2.blurred(p.presmooth_sigma), p);
    let coarsest = p1.last().expect("nonempty pyramid");
    let mut u = Image::new(coarsest.w, coarsest.h);
    let mut v = Image::new(coarsest.w, coarsest.h);
    for level in (0..p1.len()).rev() {
        let (a, b) = (&p1[level], &p2[level]);
        if u.w != a.w || u.h != a.h {
            let (sx, sy) = (a.w as f64 / u.w as f64, a.h as f64 / u.h as f64);
            u = u.resized(a.w, a.h);
            v = v.resized(a.w, a.h);
            u.data.iter_mut().for_each(|x| *x *= sx);
            v.data.iter_mut().for_each(|x| *x *= sy);
        }
        for _ in 0..p.warps {
            refine(a, b, &mut u, &mut v, p);
        }
    }
    (u, v)
}

/// One warping step: solves for the increment (du, dv) around the current
/// flow and adds it in place.
fn refine(i1: &Image, i2: &Image, u: &mut Image, v: &mut Image, p: &FlowParams) {
    let (w, h) = (i1.w, i1.h);
    let n = w * h;
    let mut warped = Image::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            warped.data[i] = i2.sample(x as f64 + u.data[i], y as f64 + v.data[i]);
        }
    }
    let (gx1, gy1) = i1.gradients();
    let (gx2, gy2) = warped.gradients();
    let ix: Vec<f64> = (0..n).map(|i| 0.5 * (gx1.data[i] + gx2.data[i])).collect();
    let iy: Vec<f64> = (0..n).map(|i| 0.5 * (gy1.data[i] + gy2.data[i])).collect();
    let it: Vec<f64> = (0..n).map(|i| warped.data[i] - i1.data[i]).collect();

    let eps2 = p.charbonnier_eps * p.charbonnier_eps;
    let mut du = vec![0.0f64; n];
    let mut dv = vec![0.0f64; n];
    let mut psi_d = vec![0.0f64; n];
    let mut psi_s = vec![0.0f64; n];
    for _ in 0..p.fixed_point_iters {
        for i in 0..n {
            let r = it[i] + ix[i] * du[i] + iy[i] * dv[i];
            psi_d[i] = 0.5 / (r * r + eps2).sqrt();
        }
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                let (uc, vc) = (u.data[i] + du[i], v.data[i] + dv[i]);
                let (mut ux, mut vx, mut uy, mut vy) = (0.0, 0.0, 0.0, 0.0);
                if x + 1 < w {
                    ux = u.data[i + 1] + du[i + 1] - uc;
                    vx = v.data[i + 1] + dv[i + 1] - vc;
                }
                if y + 1 < h {
                    uy = u.data[i + w] + du[i + w] - uc;
                    vy = v.data[i + w] + dv[i + w] - vc;
                }
                psi_s[i] = 0.5 / (ux * ux + uy * uy + vx * vx + vy * vy + eps2).sqrt();
            }
        }
        for _ in 0..p.sor_iters {
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    let mut wsum = 0.0;
                    let mut bu = 0.0;
                    let mut bv = 0.0;
                    let mut visit = |j: usize| {
                        let wq = p.alpha * 0.5 * (psi_s[i] + psi_s[j]);
                        wsum += wq;
                        bu += wq * (u.data[j] + du[j] - u.data[i]);
                        bv += wq * (v.data[j] + dv[j] - v.data[i]);
                    };
                    if x > 0 {
                        visit(i - 1);
                    }
                    if x + 1 < w {
                        visit(i + 1);
                    }
                    if y > 0 {
                        visit(i - w);
                    }
                    if y + 1 < h {
                        visit(i + w);
                    }
                    let pd = psi_d[i];
                    let a11 = pd * ix[i] * ix[i] + wsum;
                    let a12 = pd * ix[i] * iy[i];
                    let a22 = pd * iy[i] * iy[i] + wsum;
                    let b1 = bu - pd * ix[i] * it[i];
                    let b2 = bv - pd * iy[i] * it[i];
                    if a11 > 0.0 {
                        let nu = (b1 - a12 * dv[i]) / a11;
                        du[i] += p.sor_omega * (nu - du[i]);
                    }
                    if a22 > 0.0 {
                        let nv = (b2 - a12 * du[i]) / a22;
                        dv[i] += p.sor_omega * (nv - dv[i]);
                    }
                }
            }
        }
    }
    for i in 0..n {
        u.data[i] += du[i];
        v.data[i] += dv[i];
    }
}
