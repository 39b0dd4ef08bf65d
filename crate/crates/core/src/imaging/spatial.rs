use super::{Image, LabelMap};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

/// Geometry of one random crop, in source-image pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropSpec {
    pub scale: f64,
    pub flip: bool,
    pub offset_x: usize,
    pub offset_y: usize,
    pub crop_w: usize,
    pub crop_h: usize,
}

impl CropSpec {
    /// The crop covering the whole `height×width` image, unflipped.
    pub fn full(height: usize, width: usize) -> Self {
        Self {
            scale: 1.0,
            flip: false,
            offset_x: 0,
            offset_y: 0,
            crop_w: width,
            crop_h: height,
        }
    }

    pub fn check_within(&self, height: usize, width: usize) -> Result<()> {
        if self.crop_w == 0
            || self.crop_h == 0
            || self.offset_x + self.crop_w > width
            || self.offset_y + self.crop_h > height
        {
            return Err(Error::InvalidArgument(format!(
                "crop {}x{} at ({}, {}) does not fit a {height}x{width} image",
                self.crop_h, self.crop_w, self.offset_y, self.offset_x
            )));
        }
        Ok(())
    }
}

fn scaled_side(scale: f64, side: usize) -> usize {
    ((scale * side as f64).round() as usize).clamp(1, side)
}

/// Draws scale uniformly from `[min_scale, 1]`, a fair flip, and a uniform
/// placement. Draw order is fixed so the stream stays aligned across callers.
pub fn sample_crop_spec(
    img_h: usize,
    img_w: usize,
    min_scale: f64,
    stream: &mut RngStream,
) -> CropSpec {
    assert!(min_scale > 0.0 && min_scale <= 1.0, "min_scale {min_scale}");
    let scale = if min_scale >= 1.0 {
        // keep the stream aligned with the non-degenerate case
        stream.uniform(0.0, 1.0);
        1.0
    } else {
        stream.uniform(min_scale, 1.0)
    };
    let flip = stream.bernoulli(0.5);
    let crop_w = scaled_side(scale, img_w);
    let crop_h = scaled_side(scale, img_h);
    let offset_y = stream.int_inclusive(0, (img_h - crop_h) as i64) as usize;
    let offset_x = stream.int_inclusive(0, (img_w - crop_w) as i64) as usize;
    CropSpec {
        scale,
        flip,
        offset_x,
        offset_y,
        crop_w,
        crop_h,
    }
}

/// Corner-aligned source coordinate of destination index `i`.
#[inline]
fn src_coord(i: usize, dst_n: usize, src_n: usize) -> f64 {
    if dst_n == 1 {
        (src_n - 1) as f64 / 2.0
    } else {
        i as f64 * (src_n - 1) as f64 / (dst_n - 1) as f64
    }
}

#[inline]
fn lerp(a: f64, b: f64, t: f64) -> f64 {
    // exact for a == b
    a + t * (b - a)
}

#[inline]
fn bilinear(plane: &[f64], h: usize, w: usize, fy: f64, fx: f64) -> f64 {
    let y0 = (fy.floor() as usize).min(h - 1);
    let x0 = (fx.floor() as usize).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let ty = fy - y0 as f64;
    let tx = fx - x0 as f64;
    let top = lerp(plane[y0 * w + x0], plane[y0 * w + x1], tx);
    let bottom = lerp(plane[y1 * w + x0], plane[y1 * w + x1], tx);
    lerp(top, bottom, ty)
}

/// Samples the crop rectangle of one `h×w` plane into `out` (`out_h×out_w`),
/// mirroring horizontally when `spec.flip` is set.
pub fn resample_plane(
    plane: &[f64],
    h: usize,
    w: usize,
    spec: &CropSpec,
    out_h: usize,
    out_w: usize,
    out: &mut [f64],
) {
    debug_assert_eq!(plane.len(), h * w);
    debug_assert_eq!(out.len(), out_h * out_w);
    let xs: Vec<f64> = (0..out_w)
        .map(|x| {
            let local = src_coord(x, out_w, spec.crop_w);
            let local = if spec.flip {
                (spec.crop_w - 1) as f64 - local
            } else {
                local
            };
            spec.offset_x as f64 + local
        })
        .collect();
    for y in 0..out_h {
        let fy = spec.offset_y as f64 + src_coord(y, out_h, spec.crop_h);
        let row = &mut out[y * out_w..(y + 1) * out_w];
        for (o, &fx) in row.iter_mut().zip(&xs) {
            *o = bilinear(plane, h, w, fy, fx);
        }
    }
}

/// Crops, optionally flips, and bilinearly resizes an image.
pub fn apply_crop(img: &Image, spec: &CropSpec, out_h: usize, out_w: usize) -> Result<Image> {
    spec.check_within(img.height(), img.width())?;
    let n = out_h * out_w;
    let mut data = vec![0.0; 3 * n];
    for c in 0..3 {
        resample_plane(
            img.channel(c),
            img.height(),
            img.width(),
            spec,
            out_h,
            out_w,
            &mut data[c * n..(c + 1) * n],
        );
    }
    // bilinear blends stay inside the convex hull of [0, 1] inputs
    Ok(Image::from_clamped(out_h, out_w, data))
}

/// Nearest-neighbour counterpart of [`apply_crop`] for label maps.
pub fn apply_crop_labels(
    labels: &LabelMap,
    spec: &CropSpec,
    out_h: usize,
    out_w: usize,
) -> Result<LabelMap> {
    spec.check_within(labels.height(), labels.width())?;
    let w = labels.width();
    let xs: Vec<usize> = (0..out_w)
        .map(|x| {
            let local = src_coord(x, out_w, spec.crop_w);
            let local = if spec.flip {
                (spec.crop_w - 1) as f64 - local
            } else {
                local
            };
            spec.offset_x + local.round() as usize
        })
        .collect();
    let mut data = Vec::with_capacity(out_h * out_w);
    for y in 0..out_h {
        let sy = spec.offset_y + src_coord(y, out_h, spec.crop_h).round() as usize;
        data.extend(xs.iter().map(|&sx| labels.data()[sy * w + sx]));
    }
    Ok(LabelMap::from_raw(out_h, out_w, data))
}

/// Canvas pixels covered by a re-projected map.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Coverage {
    pub height: usize,
    pub width: usize,
    pub mask: Vec<bool>,
}

/// Re-projects a `K×h×w` map predicted on a crop back onto a
/// `canvas_h×canvas_w` canvas. Values outside the crop rectangle are zero and
/// the coverage mask is set exactly on the rectangle.
pub fn inverse_project(
    map: &Tensor,
    spec: &CropSpec,
    canvas_h: usize,
    canvas_w: usize,
) -> Result<(Tensor, Coverage)> {
    let dims = map.dims();
    if dims.len() != 3 {
        return Err(Error::Shape(format!("expected K×h×w map, got {dims:?}")));
    }
    spec.check_within(canvas_h, canvas_w)?;
    let (k, h, w) = (dims[0], dims[1], dims[2]);
    let mut out = Tensor::zeros(vec![k, canvas_h, canvas_w]);
    let mut mask = vec![false; canvas_h * canvas_w];

    let xs: Vec<f64> = (0..spec.crop_w)
        .map(|u| {
            let u = if spec.flip { spec.crop_w - 1 - u } else { u };
            src_coord(u, spec.crop_w, w)
        })
        .collect();
    let ys: Vec<f64> = (0..spec.crop_h).map(|v| src_coord(v, spec.crop_h, h)).collect();

    for c in 0..k {
        let src = map.plane(c);
        let dst = out.plane_mut(c);
        for (v, &fy) in ys.iter().enumerate() {
            let row = (spec.offset_y + v) * canvas_w + spec.offset_x;
            for (u, &fx) in xs.iter().enumerate() {
                dst[row + u] = bilinear(src, h, w, fy, fx);
            }
        }
    }
    for v in 0..spec.crop_h {
        let row = (spec.offset_y + v) * canvas_w + spec.offset_x;
        mask[row..row + spec.crop_w].fill(true);
    }
    Ok((
        out,
        Coverage {
            height: canvas_h,
            width: canvas_w,
            mask,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn gradient_image(h: usize, w: usize) -> Image {
        let mut data = Vec::new();
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    data.push(((c + 1) * (y * w + x) % 97) as f64 / 96.0);
                }
            }
        }
        Image::new(h, w, data).unwrap()
    }

    /// Smooth K=2 map on an h×w grid.
    fn smooth_map(h: usize, w: usize, phase: f64) -> Tensor {
        let mut data = Vec::with_capacity(2 * h * w);
        for c in 0..2 {
            for y in 0..h {
                for x in 0..w {
                    let v = 0.5
                        + 0.4
                            * ((x as f64 / w as f64 * 2.0 + phase).sin()
                                * (y as f64 / h as f64 * 1.5).cos());
                    data.push(if c == 0 { v } else { 1.0 - v });
                }
            }
        }
        Tensor::new(vec![2, h, w], data).unwrap()
    }

    #[test]
    fn min_scale_one_covers_the_image() {
        let mut s = RngStream::root(1);
        for _ in 0..50 {
            let spec = sample_crop_spec(40, 60, 1.0, &mut s);
            assert_eq!(spec.scale, 1.0);
            assert_eq!((spec.offset_x, spec.offset_y), (0, 0));
            assert_eq!((spec.crop_w, spec.crop_h), (60, 40));
        }
    }

    #[test]
    fn flip_rate_is_fair() {
        let mut s = RngStream::root(2).derive("flips");
        let n = 100_000;
        let flips = (0..n)
            .filter(|_| sample_crop_spec(64, 64, 0.5, &mut s).flip)
            .count();
        let rate = flips as f64 / n as f64;
        assert!((rate - 0.5).abs() < 0.01, "flip rate {rate}");
    }

    #[test]
    fn crops_stay_inside_random_images() {
        let mut s = RngStream::root(3);
        for _ in 0..100_000 {
            let h = 1 + s.below(200);
            let w = 1 + s.below(200);
            let spec = sample_crop_spec(h, w, 0.5, &mut s);
            spec.check_within(h, w).unwrap();
            assert!(spec.scale >= 0.5 && spec.scale <= 1.0);
            // aspect ratio preserved up to one pixel of rounding
            let expect_w = spec.crop_h as f64 * w as f64 / h as f64;
            assert!(
                (spec.crop_w as f64 - expect_w).abs() <= 1.0 + w as f64 / h as f64,
                "{spec:?} for {h}x{w}"
            );
        }
    }

    #[test]
    fn identity_crop_is_bit_identical() {
        let img = gradient_image(16, 20);
        let out = apply_crop(&img, &CropSpec::full(16, 20), 16, 20).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn double_flip_restores_image() {
        let img = gradient_image(12, 9);
        let spec = CropSpec {
            flip: true,
            ..CropSpec::full(12, 9)
        };
        let once = apply_crop(&img, &spec, 12, 9).unwrap();
        assert_eq!(once, img.flipped());
        let twice = apply_crop(&once, &spec, 12, 9).unwrap();
        assert_eq!(twice, img);
    }

    #[test]
    fn out_of_bounds_spec_is_rejected() {
        let img = gradient_image(10, 10);
        let spec = CropSpec {
            offset_x: 5,
            crop_w: 6,
            ..CropSpec::full(10, 10)
        };
        assert!(apply_crop(&img, &spec, 8, 8).is_err());
        let map = Tensor::zeros(vec![2, 8, 8]);
        assert!(inverse_project(&map, &spec, 10, 10).is_err());
    }

    #[test]
    fn identity_inverse_projection() {
        let map = smooth_map(16, 16, 0.3);
        let (out, cov) = inverse_project(&map, &CropSpec::full(16, 16), 16, 16).unwrap();
        assert_eq!(out, map);
        assert!(cov.mask.iter().all(|&m| m));
    }

    #[test]
    fn constant_map_stays_constant_inside_mask() {
        let map = Tensor::filled(vec![3, 8, 8], 0.37);
        let spec = CropSpec {
            scale: 0.5,
            flip: true,
            offset_x: 3,
            offset_y: 10,
            crop_w: 16,
            crop_h: 16,
        };
        let (out, cov) = inverse_project(&map, &spec, 32, 32).unwrap();
        for c in 0..3 {
            for (i, &v) in out.plane(c).iter().enumerate() {
                if cov.mask[i] {
                    assert_eq!(v, 0.37);
                } else {
                    assert_eq!(v, 0.0);
                }
            }
        }
        assert_eq!(cov.mask.iter().filter(|&&m| m).count(), 256);
    }

    #[test]
    fn round_trip_of_smooth_maps_at_half_scale() {
        let mut s = RngStream::root(9).derive("roundtrip");
        let mut worst: f64 = 0.0;
        for i in 0..20 {
            let canvas = smooth_map(64, 64, i as f64 * 0.37);
            let mut spec = sample_crop_spec(64, 64, 0.5, &mut s);
            // force scale 0.5
            spec.crop_w = 32;
            spec.crop_h = 32;
            spec.scale = 0.5;
            spec.offset_x = spec.offset_x.min(32);
            spec.offset_y = spec.offset_y.min(32);
            let mut cropped = Tensor::zeros(vec![2, 64, 64]);
            for c in 0..2 {
                resample_plane(canvas.plane(c), 64, 64, &spec, 64, 64, cropped.plane_mut(c));
            }
            let (back, cov) = inverse_project(&cropped, &spec, 64, 64).unwrap();
            for c in 0..2 {
                for (j, (&a, &b)) in back.plane(c).iter().zip(canvas.plane(c)).enumerate() {
                    if cov.mask[j] {
                        worst = worst.max((a - b).abs());
                    }
                }
            }
        }
        assert!(worst < 0.05, "max deviation {worst}");
    }

    #[test]
    fn label_crop_uses_only_source_values() {
        let mut data = vec![0u8; 100];
        for (i, v) in data.iter_mut().enumerate() {
            *v = [0, 3, super::super::IGNORE][i % 3];
        }
        let labels = LabelMap::new(10, 10, data, 6).unwrap();
        let spec = CropSpec {
            scale: 0.7,
            flip: true,
            offset_x: 2,
            offset_y: 1,
            crop_w: 7,
            crop_h: 7,
        };
        let out = apply_crop_labels(&labels, &spec, 16, 16).unwrap();
        assert!(out.data().iter().all(|v| [0, 3, 255].contains(v)));
    }

    proptest! {
        #[test]
        fn constants_survive_any_crop(
            value in 0.0f64..=1.0,
            scale in 0.3f64..=1.0,
            flip: bool,
            seed: u64,
        ) {
            let img = Image::filled(30, 40, [value, value, value]);
            let mut s = RngStream::root(seed);
            let mut spec = sample_crop_spec(30, 40, scale, &mut s);
            spec.flip = flip;
            let out = apply_crop(&img, &spec, 17, 23).unwrap();
            prop_assert!(out.data().iter().all(|&v| v == value));
        }
    }
}
