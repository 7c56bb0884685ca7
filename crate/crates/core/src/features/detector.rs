use std::f32::consts::PI;

use nalgebra::{Matrix3, Vector3};

use super::{Descriptor, DetectorConfig, FeatureError, Features, Keypoint};
use crate::image::GrayImage;

const SIGMA0: f32 = 1.6;
const INPUT_BLUR: f32 = 0.5;
const BORDER: usize = 5;
const MIN_OCTAVE_SIDE: usize = 16;
const MAX_REFINE_STEPS: usize = 5;
const CONVERGED_OFFSET: f32 = 0.6;

const ORI_BINS: usize = 36;
const ORI_PEAK_RATIO: f32 = 0.8;
const ORI_SIGMA_FACTOR: f32 = 1.5;
const ORI_RADIUS_FACTOR: f32 = 3.0 * ORI_SIGMA_FACTOR;

const DESCR_ORI_BINS: usize = 8;
const DESCR_SCALE_FACTOR: f32 = 3.0;
const DESCR_MAG_CLAMP: f32 = 0.2;

/// Detect DoG extrema and describe them.
///
/// Output is sorted by decreasing response and is a pure function of the
/// input pixels and configuration.
pub fn detect_and_describe(image: &GrayImage, cfg: &DetectorConfig) -> Result<Features, FeatureError> {
    cfg.validate()?;
    let (w, h) = (image.width(), image.height());
    if w < 32 || h < 32 {
        return Err(FeatureError::ImageTooSmall { width: w, height: h });
    }
    let grid = cfg.grid_size().expect("validated");
    let pyramid = Pyramid::build(image, cfg);

    // Each octave searches one layer past its nominal range so that
    // structure sitting on an octave boundary is found by at least one of the
    // two octaves; the duplicates are merged below.
    let mut candidates: Vec<(usize, Extremum)> = Vec::new();
    for (o, octave) in pyramid.octaves.iter().enumerate() {
        candidates.extend(octave.extrema(cfg).into_iter().map(|e| (o, e)));
    }
    candidates.sort_by(|a, b| {
        b.1.response
            .total_cmp(&a.1.response)
            .then(a.0.cmp(&b.0))
            .then(a.1.y.total_cmp(&b.1.y))
            .then(a.1.x.total_cmp(&b.1.x))
    });
    let s = cfg.layers_per_octave as f32;
    let mut kept: Vec<(f64, f64, f32)> = Vec::new();
    let mut out: Vec<(Keypoint, Descriptor)> = Vec::new();
    for (o, ext) in candidates {
        let octave = &pyramid.octaves[o];
        let pixel = octave.pixel as f64;
        let (u, v) = (ext.x as f64 * pixel, ext.y as f64 * pixel);
        // Absolute scale in octaves.
        let log_scale = o as f32 + ext.layer_pos / s;
        let radius = 0.5 * (octave.pixel * octave.step) as f64;
        let duplicate = kept
            .iter()
            .any(|&(ku, kv, ks)| (ku - u).hypot(kv - v) < radius && (ks - log_scale).abs() < 0.5 / s);
        if duplicate {
            continue;
        }
        kept.push((u, v, log_scale));
        let sigma_oct = SIGMA0 * 2f32.powf(ext.layer_pos / s);
        let grid_img = Sampling {
            img: &octave.gauss[ext.layer],
            step: octave.step as isize,
        };
        for angle in orientations(&grid_img, ext.x, ext.y, sigma_oct) {
            let Some(desc) = describe(&grid_img, ext.x, ext.y, sigma_oct, angle, grid) else {
                continue;
            };
            let kp = Keypoint {
                u,
                v,
                octave: o,
                scale: sigma_oct as f64 * (1u32 << o) as f64,
                orientation: angle as f64,
                response: ext.response as f64,
            };
            out.push((kp, desc));
        }
    }

    out.sort_by(|(a, _), (b, _)| {
        b.response
            .total_cmp(&a.response)
            .then(a.v.total_cmp(&b.v))
            .then(a.u.total_cmp(&b.u))
            .then(a.scale.total_cmp(&b.scale))
            .then(a.orientation.total_cmp(&b.orientation))
    });
    let (keypoints, descriptors) = out.into_iter().unzip();
    Ok(Features {
        keypoints,
        descriptors,
    })
}

/// One octave of the scale space.
///
/// The first `FULL_RES_OCTAVES` octaves are kept at input resolution and
/// blurred with dilated kernels (`step` = 2^o), which is the decimated
/// pyramid evaluated at every sampling phase. Without this the second octave
/// depends on the image's alignment with the decimation grid and its
/// keypoints are not stable under one-pixel shifts.
struct Octave {
    gauss: Vec<GrayImage>,
    dog: Vec<GrayImage>,
    /// Octave-pixel spacing in grid pixels.
    step: usize,
    /// Grid pixel size in input pixels.
    pixel: usize,
}

const FULL_RES_OCTAVES: usize = 2;

struct Pyramid {
    octaves: Vec<Octave>,
}

impl Pyramid {
    fn build(image: &GrayImage, cfg: &DetectorConfig) -> Pyramid {
        let s = cfg.layers_per_octave;
        let k = 2f32.powf(1.0 / s as f32);
        // Incremental blur taking layer i-1 to layer i.
        let mut increments = vec![0f32; s + 4];
        increments[0] = (SIGMA0 * SIGMA0 - INPUT_BLUR * INPUT_BLUR).sqrt();
        for (i, inc) in increments.iter_mut().enumerate().skip(1) {
            let prev = SIGMA0 * k.powi(i as i32 - 1);
            let total = prev * k;
            *inc = (total * total - prev * prev).sqrt();
        }

        let min_side = image.width().min(image.height());
        let max_octaves = ((min_side as f32 / MIN_OCTAVE_SIDE as f32).log2().floor() as usize + 1).max(1);
        let n_octaves = cfg.octaves.min(max_octaves);

        let mut octaves: Vec<Octave> = Vec::with_capacity(n_octaves);
        let mut base = gaussian_blur(image, increments[0]);
        for o in 0..n_octaves {
            let (step, pixel) = if o < FULL_RES_OCTAVES { (1 << o, 1) } else { (1, 1 << o) };
            let mut gauss = Vec::with_capacity(s + 4);
            gauss.push(base);
            for inc in &increments[1..] {
                let next = gaussian_blur_dilated(gauss.last().expect("nonempty"), *inc, step);
                gauss.push(next);
            }
            let dog = gauss
                .windows(2)
                .map(|pair| {
                    let data = pair[1]
                        .data()
                        .iter()
                        .zip(pair[0].data())
                        .map(|(a, b)| a - b)
                        .collect();
                    GrayImage::from_vec(pair[0].width(), pair[0].height(), data)
                })
                .collect();
            base = if o + 1 == n_octaves {
                GrayImage::new(0, 0)
            } else if o + 1 < FULL_RES_OCTAVES {
                gauss[s].clone()
            } else {
                downsample(&gauss[s], 2 * step)
            };
            octaves.push(Octave {
                gauss,
                dog,
                step,
                pixel,
            });
        }
        Pyramid { octaves }
    }
}

/// A grid image read at octave-pixel spacing.
struct Sampling<'a> {
    img: &'a GrayImage,
    step: isize,
}

impl Sampling<'_> {
    #[inline]
    fn get(&self, x: isize, y: isize) -> f32 {
        self.img.get(x as usize, y as usize)
    }

    /// True if (x, y) and its octave-pixel neighbours lie inside the grid.
    #[inline]
    fn interior(&self, x: isize, y: isize) -> bool {
        let (w, h) = (self.img.width() as isize, self.img.height() as isize);
        x >= self.step && y >= self.step && x < w - self.step && y < h - self.step
    }

    /// Gradient magnitude and angle (radians, y pointing down) per octave pixel.
    #[inline]
    fn gradient(&self, x: isize, y: isize) -> (f32, f32) {
        let st = self.step;
        let dx = self.get(x + st, y) - self.get(x - st, y);
        let dy = self.get(x, y + st) - self.get(x, y - st);
        ((dx * dx + dy * dy).sqrt(), dy.atan2(dx))
    }
}

struct Extremum {
    /// Refined position in octave pixels.
    x: f32,
    y: f32,
    /// Integer DoG layer the extremum was found in; also indexes the
    /// Gaussian image used for orientation and description.
    layer: usize,
    /// Refined (fractional) layer.
    layer_pos: f32,
    response: f32,
}

impl Octave {
    fn extrema(&self, cfg: &DetectorConfig) -> Vec<Extremum> {
        let s = cfg.layers_per_octave;
        let w = self.dog[0].width();
        let h = self.dog[0].height();
        let border = BORDER * self.step;
        let mut found = Vec::new();
        if w <= 2 * border || h <= 2 * border {
            return found;
        }
        let threshold = 0.5 * cfg.contrast_threshold / s as f32;
        for layer in 1..=s + 1 {
            let (prev, cur, next) = (&self.dog[layer - 1], &self.dog[layer], &self.dog[layer + 1]);
            for y in border..h - border {
                for x in border..w - border {
                    let v = cur.get(x, y);
                    if v.abs() <= threshold {
                        continue;
                    }
                    if !is_local_extremum(v, x, y, prev, cur, next) {
                        continue;
                    }
                    if let Some(e) = self.refine(x, y, layer, cfg) {
                        found.push(e);
                    }
                }
            }
        }
        found
    }

    /// Quadratic refinement. Derivatives are taken at octave-pixel spacing,
    /// positions move on the grid.
    fn refine(&self, x0: usize, y0: usize, layer0: usize, cfg: &DetectorConfig) -> Option<Extremum> {
        let s = cfg.layers_per_octave;
        let st = self.step as f32;
        let border = (BORDER * self.step) as isize;
        let w = self.dog[0].width() as isize;
        let h = self.dog[0].height() as isize;
        let (mut x, mut y, mut l) = (x0 as isize, y0 as isize, layer0 as isize);
        let mut offset = Vector3::zeros();
        let mut converged = false;
        for _ in 0..MAX_REFINE_STEPS {
            let (grad, hess) = self.derivatives(x, y, l as usize);
            offset = -(hess.lu().solve(&grad)?);
            // Offset in grid pixels and layers.
            offset.x *= st;
            offset.y *= st;
            // Slightly above one half so extrema centred between two pixels
            // do not oscillate; duplicates are merged later.
            if offset.iter().all(|v: &f32| v.abs() < CONVERGED_OFFSET) {
                converged = true;
                break;
            }
            if offset.iter().any(|v| v.abs() > 1e6) {
                return None;
            }
            x += offset.x.round() as isize;
            y += offset.y.round() as isize;
            l += offset.z.round() as isize;
            if l < 1 || l > s as isize + 1 || x < border || x >= w - border || y < border || y >= h - border {
                return None;
            }
        }
        if !converged {
            return None;
        }
        let lu = l as usize;
        let (grad, hess) = self.derivatives(x, y, lu);
        let step_offset = Vector3::new(offset.x / st, offset.y / st, offset.z);
        let value = self.dog[lu].get(x as usize, y as usize) + 0.5 * grad.dot(&step_offset);
        if value.abs() * (s as f32) < cfg.contrast_threshold {
            return None;
        }

        // Reject edge responses by the principal curvature ratio.
        let (dxx, dyy, dxy) = (hess[(0, 0)], hess[(1, 1)], hess[(0, 1)]);
        let tr = dxx + dyy;
        let det = dxx * dyy - dxy * dxy;
        let r = cfg.edge_threshold;
        if det <= 0.0 || tr * tr * r >= (r + 1.0) * (r + 1.0) * det {
            return None;
        }

        Some(Extremum {
            x: x as f32 + offset.x,
            y: y as f32 + offset.y,
            layer: lu,
            layer_pos: l as f32 + offset.z,
            response: value.abs(),
        })
    }

    fn derivatives(&self, x: isize, y: isize, l: usize) -> (Vector3<f32>, Matrix3<f32>) {
        let st = self.step as isize;
        let at = |img: &GrayImage, dx: isize, dy: isize| img.get((x + dx * st) as usize, (y + dy * st) as usize);
        let (p, c, n) = (&self.dog[l - 1], &self.dog[l], &self.dog[l + 1]);
        let v = at(c, 0, 0);
        let dx = (at(c, 1, 0) - at(c, -1, 0)) * 0.5;
        let dy = (at(c, 0, 1) - at(c, 0, -1)) * 0.5;
        let ds = (at(n, 0, 0) - at(p, 0, 0)) * 0.5;
        let dxx = at(c, 1, 0) + at(c, -1, 0) - 2.0 * v;
        let dyy = at(c, 0, 1) + at(c, 0, -1) - 2.0 * v;
        let dss = at(n, 0, 0) + at(p, 0, 0) - 2.0 * v;
        let dxy = (at(c, 1, 1) - at(c, -1, 1) - at(c, 1, -1) + at(c, -1, -1)) * 0.25;
        let dxs = (at(n, 1, 0) - at(n, -1, 0) - at(p, 1, 0) + at(p, -1, 0)) * 0.25;
        let dys = (at(n, 0, 1) - at(n, 0, -1) - at(p, 0, 1) + at(p, 0, -1)) * 0.25;
        (
            Vector3::new(dx, dy, ds),
            Matrix3::new(dxx, dxy, dxs, dxy, dyy, dys, dxs, dys, dss),
        )
    }
}

fn is_local_extremum(v: f32, x: usize, y: usize, prev: &GrayImage, cur: &GrayImage, next: &GrayImage) -> bool {
    let is_max = v > 0.0;
    for img in [prev, cur, next] {
        for yy in y - 1..=y + 1 {
            for xx in x - 1..=x + 1 {
                if std::ptr::eq(img, cur) && xx == x && yy == y {
                    continue;
                }
                let n = img.get(xx, yy);
                if (is_max && n > v) || (!is_max && n < v) {
                    return false;
                }
            }
        }
    }
    true
}

fn orientations(img: &Sampling, x: f32, y: f32, sigma_oct: f32) -> Vec<f32> {
    let st = img.step;
    let px = x.round() as isize;
    let py = y.round() as isize;
    let radius = (ORI_RADIUS_FACTOR * sigma_oct).round() as isize;
    let sigma_w = ORI_SIGMA_FACTOR * sigma_oct;
    let expf = -1.0 / (2.0 * sigma_w * sigma_w);
    let mut raw = [0f32; ORI_BINS];
    for i in -radius..=radius {
        for j in -radius..=radius {
            let (xx, yy) = (px + j * st, py + i * st);
            if !img.interior(xx, yy) {
                continue;
            }
            let (mag, ang) = img.gradient(xx, yy);
            let weight = ((i * i + j * j) as f32 * expf).exp();
            let mut bin = (ORI_BINS as f32 * ang / (2.0 * PI)).round() as isize;
            bin = bin.rem_euclid(ORI_BINS as isize);
            raw[bin as usize] += weight * mag;
        }
    }
    let n = ORI_BINS as isize;
    let at = |h: &[f32; ORI_BINS], i: isize| h[i.rem_euclid(n) as usize];
    let mut hist = [0f32; ORI_BINS];
    for i in 0..n {
        hist[i as usize] = (at(&raw, i - 2) + at(&raw, i + 2)) * (1.0 / 16.0)
            + (at(&raw, i - 1) + at(&raw, i + 1)) * (4.0 / 16.0)
            + at(&raw, i) * (6.0 / 16.0);
    }
    let max = hist.iter().cloned().fold(0.0f32, f32::max);
    if max <= 0.0 {
        return Vec::new();
    }
    let threshold = max * ORI_PEAK_RATIO;
    let mut angles = Vec::new();
    for i in 0..n {
        let c = at(&hist, i);
        let l = at(&hist, i - 1);
        let r = at(&hist, i + 1);
        if c > l && c > r && c >= threshold {
            let denom = l - 2.0 * c + r;
            let offset = if denom != 0.0 { 0.5 * (l - r) / denom } else { 0.0 };
            let bin = (i as f32 + offset).rem_euclid(ORI_BINS as f32);
            let mut angle = 2.0 * PI * bin / ORI_BINS as f32;
            if angle >= 2.0 * PI {
                angle -= 2.0 * PI;
            }
            angles.push(angle);
        }
    }
    angles
}

fn describe(img: &Sampling, x: f32, y: f32, sigma_oct: f32, angle: f32, d: usize) -> Option<Descriptor> {
    let n = DESCR_ORI_BINS;
    let st = img.step;
    let (w, h) = (img.img.width() as isize / st, img.img.height() as isize / st);
    let px = x.round() as isize;
    let py = y.round() as isize;
    let hist_width = DESCR_SCALE_FACTOR * sigma_oct;
    let diag = ((w * w + h * h) as f32).sqrt();
    let radius = (hist_width * std::f32::consts::SQRT_2 * (d as f32 + 1.0) * 0.5)
        .round()
        .min(diag) as isize;
    let (sin_t, cos_t) = angle.sin_cos();
    let (sin_t, cos_t) = (sin_t / hist_width, cos_t / hist_width);
    let bins_per_rad = n as f32 / (2.0 * PI);
    let exp_scale = -1.0 / (d as f32 * d as f32 * 0.5);
    let half = d as f32 / 2.0 - 0.5;

    // Histogram with one cell of padding on each spatial side and one extra
    // orientation bin for wrap-around.
    let stride_r = (d + 2) * (n + 2);
    let stride_c = n + 2;
    let mut hist = vec![0f32; (d + 2) * stride_r];

    for i in -radius..=radius {
        for j in -radius..=radius {
            // Offset (j, i) expressed in the keypoint frame.
            let c_rot = j as f32 * cos_t + i as f32 * sin_t;
            let r_rot = -(j as f32) * sin_t + i as f32 * cos_t;
            let rbin = r_rot + half;
            let cbin = c_rot + half;
            let (xx, yy) = (px + j * st, py + i * st);
            if !(rbin > -1.0 && rbin < d as f32 && cbin > -1.0 && cbin < d as f32) {
                continue;
            }
            if !img.interior(xx, yy) {
                continue;
            }
            let (mag, ang) = img.gradient(xx, yy);
            let weight = ((c_rot * c_rot + r_rot * r_rot) * exp_scale).exp();
            let mut obin = (ang - angle) * bins_per_rad;
            let mag = mag * weight;

            let r0 = rbin.floor();
            let c0 = cbin.floor();
            let o0 = obin.floor();
            let (rf, cf) = (rbin - r0, cbin - c0);
            obin -= o0;
            let of = obin;
            let o0 = (o0 as isize).rem_euclid(n as isize) as usize;
            let (r0, c0) = (r0 as isize, c0 as isize);

            let v_r1 = mag * rf;
            let v_r0 = mag - v_r1;
            let v_rc11 = v_r1 * cf;
            let v_rc10 = v_r1 - v_rc11;
            let v_rc01 = v_r0 * cf;
            let v_rc00 = v_r0 - v_rc01;
            let v_rco111 = v_rc11 * of;
            let v_rco110 = v_rc11 - v_rco111;
            let v_rco101 = v_rc10 * of;
            let v_rco100 = v_rc10 - v_rco101;
            let v_rco011 = v_rc01 * of;
            let v_rco010 = v_rc01 - v_rco011;
            let v_rco001 = v_rc00 * of;
            let v_rco000 = v_rc00 - v_rco001;

            let idx = ((r0 + 1) as usize) * stride_r + ((c0 + 1) as usize) * stride_c + o0;
            hist[idx] += v_rco000;
            hist[idx + 1] += v_rco001;
            hist[idx + stride_c] += v_rco010;
            hist[idx + stride_c + 1] += v_rco011;
            hist[idx + stride_r] += v_rco100;
            hist[idx + stride_r + 1] += v_rco101;
            hist[idx + stride_r + stride_c] += v_rco110;
            hist[idx + stride_r + stride_c + 1] += v_rco111;
        }
    }

    let mut values = Vec::with_capacity(d * d * n);
    for r in 0..d {
        for c in 0..d {
            let idx = (r + 1) * stride_r + (c + 1) * stride_c;
            hist[idx] += hist[idx + n];
            hist[idx + 1] += hist[idx + n + 1];
            values.extend_from_slice(&hist[idx..idx + n]);
        }
    }

    let norm = values.iter().map(|v| v * v).sum::<f32>().sqrt();
    if norm <= f32::EPSILON {
        return None;
    }
    let clamp = DESCR_MAG_CLAMP * norm;
    for v in values.iter_mut() {
        *v = v.min(clamp);
    }
    let norm = values.iter().map(|v| v * v).sum::<f32>().sqrt();
    if norm <= f32::EPSILON {
        return None;
    }
    values.iter_mut().for_each(|v| *v /= norm);
    Some(Descriptor(values))
}

fn gaussian_kernel(sigma: f32) -> Vec<f32> {
    let radius = (4.0 * sigma).ceil().max(1.0) as usize;
    let mut k: Vec<f32> = (0..=2 * radius)
        .map(|i| {
            let x = i as f32 - radius as f32;
            (-x * x / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let sum: f32 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable Gaussian blur with clamp-to-edge borders.
pub(crate) fn gaussian_blur(img: &GrayImage, sigma: f32) -> GrayImage {
    gaussian_blur_dilated(img, sigma, 1)
}

/// Gaussian blur whose taps are `step` pixels apart; `sigma` is in units of
/// `step` pixels.
fn gaussian_blur_dilated(img: &GrayImage, sigma: f32, step: usize) -> GrayImage {
    let (w, h) = (img.width(), img.height());
    if sigma <= 0.0 {
        return img.clone();
    }
    let k = gaussian_kernel(sigma);
    let st = step as isize;
    let r = (k.len() / 2) as isize;
    let src = img.data();
    let mut tmp = vec![0f32; w * h];
    for y in 0..h {
        let row = &src[y * w..(y + 1) * w];
        let out = &mut tmp[y * w..(y + 1) * w];
        for (x, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (t, kv) in k.iter().enumerate() {
                let xx = (x as isize + (t as isize - r) * st).clamp(0, w as isize - 1) as usize;
                acc += kv * row[xx];
            }
            *o = acc;
        }
    }
    let mut out = vec![0f32; w * h];
    for y in 0..h {
        for (t, kv) in k.iter().enumerate() {
            let yy = (y as isize + (t as isize - r) * st).clamp(0, h as isize - 1) as usize;
            let src_row = &tmp[yy * w..(yy + 1) * w];
            let dst = &mut out[y * w..(y + 1) * w];
            for (d, s) in dst.iter_mut().zip(src_row) {
                *d += kv * s;
            }
        }
    }
    GrayImage::from_vec(w, h, out)
}

fn downsample(img: &GrayImage, factor: usize) -> GrayImage {
    let w = img.width() / factor;
    let h = img.height() / factor;
    let mut out = GrayImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            out.set(x, y, img.get(factor * x, factor * y));
        }
    }
    out
}
