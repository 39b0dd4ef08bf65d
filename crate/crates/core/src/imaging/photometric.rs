use super::Image;
use crate::rng::RngStream;

/// Parameters of one photometric perturbation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PhotoNoiseSpec {
    pub jitter_applied: bool,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    /// Hue rotation of `(hue - 1)` full turns.
    pub hue: f64,
    pub blur_applied: bool,
    pub blur_radius: f64,
    pub greyscale: bool,
}

impl PhotoNoiseSpec {
    pub const IDENTITY: Self = Self {
        jitter_applied: false,
        brightness: 1.0,
        contrast: 1.0,
        saturation: 1.0,
        hue: 1.0,
        blur_applied: false,
        blur_radius: 0.1,
        greyscale: false,
    };
}

/// Jitter with p = 0.5, blur with p = 0.5, greyscale with p = 0.2. Every
/// parameter is drawn on every call so the stream advances identically.
pub fn sample_photo_noise(stream: &mut RngStream) -> PhotoNoiseSpec {
    let jitter_applied = stream.bernoulli(0.5);
    let brightness = stream.uniform(0.6, 1.4);
    let contrast = stream.uniform(0.6, 1.4);
    let saturation = stream.uniform(0.6, 1.4);
    let hue = stream.uniform(0.9, 1.1);
    let blur_applied = stream.bernoulli(0.5);
    let blur_radius = stream.uniform(0.1, 2.0);
    let greyscale = stream.bernoulli(0.2);
    PhotoNoiseSpec {
        jitter_applied,
        brightness,
        contrast,
        saturation,
        hue,
        blur_applied,
        blur_radius,
        greyscale,
    }
}

/// Box side for a blur radius: `sqrt(3r² + 1)`, rounded to the nearest odd
/// integer with ties going up.
pub fn box_length(radius: f64) -> usize {
    let l = (3.0 * radius * radius + 1.0).sqrt();
    2 * (l / 2.0).floor() as usize + 1
}

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

fn clamp_all(data: &mut [f64]) {
    for v in data {
        *v = v.clamp(0.0, 1.0);
    }
}

fn luma(data: &[f64], n: usize, i: usize) -> f64 {
    LUMA[0] * data[i] + LUMA[1] * data[n + i] + LUMA[2] * data[2 * n + i]
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let delta = max - min;
    let h = if delta == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / delta).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / delta + 2.0) / 6.0
    } else {
        ((r - g) / delta + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { delta / max };
    (h, s, max)
}

pub(crate) fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let sector = (h6.floor() as usize).min(5);
    let f = h6 - sector as f64;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Rotates the hue of every pixel by `turns` full turns.
pub(crate) fn rotate_hue(data: &mut [f64], n: usize, turns: f64) {
    for i in 0..n {
        let (h, s, v) = rgb_to_hsv(data[i], data[n + i], data[2 * n + i]);
        let (r, g, b) = hsv_to_rgb(h + turns, s, v);
        data[i] = r;
        data[n + i] = g;
        data[2 * n + i] = b;
    }
}

fn colour_jitter(data: &mut [f64], n: usize, spec: &PhotoNoiseSpec) {
    for v in data.iter_mut() {
        *v *= spec.brightness;
    }
    clamp_all(data);

    let mean = (0..n).map(|i| luma(data, n, i)).sum::<f64>() / n as f64;
    for v in data.iter_mut() {
        *v = spec.contrast * *v + (1.0 - spec.contrast) * mean;
    }
    clamp_all(data);

    for i in 0..n {
        let grey = luma(data, n, i);
        for c in 0..3 {
            let v = &mut data[c * n + i];
            *v = spec.saturation * *v + (1.0 - spec.saturation) * grey;
        }
    }
    clamp_all(data);

    if spec.hue != 1.0 {
        rotate_hue(data, n, spec.hue - 1.0);
    }
}

fn box_blur_1d(src: &[f64], dst: &mut [f64], len: usize, stride: usize, count: usize, radius: usize) {
    let norm = 1.0 / (2 * radius + 1) as f64;
    for k in 0..count {
        let base = k * if stride == 1 { len } else { 1 };
        for i in 0..len {
            let mut acc = 0.0;
            for d in 0..=2 * radius {
                let j = (i + d).saturating_sub(radius).min(len - 1);
                acc += src[base + j * stride];
            }
            dst[base + i * stride] = acc * norm;
        }
    }
}

fn box_blur(data: &mut [f64], h: usize, w: usize, side: usize) {
    let radius = side / 2;
    if radius == 0 {
        return;
    }
    let n = h * w;
    let mut tmp = vec![0.0; n];
    for c in 0..3 {
        let plane = &mut data[c * n..(c + 1) * n];
        // rows: stride 1, one run per row
        box_blur_1d(plane, &mut tmp, w, 1, h, radius);
        // columns: stride w, one run per column
        box_blur_1d(&tmp, plane, h, w, w, radius);
    }
}

/// Colour jitter, then greyscale, then box blur, each only when enabled.
pub fn apply_photometric(img: &Image, spec: &PhotoNoiseSpec) -> Image {
    let (h, w) = (img.height(), img.width());
    let n = h * w;
    let mut data = img.data().to_vec();
    if spec.jitter_applied {
        colour_jitter(&mut data, n, spec);
    }
    if spec.greyscale {
        for i in 0..n {
            let grey = luma(&data, n, i);
            data[i] = grey;
            data[n + i] = grey;
            data[2 * n + i] = grey;
        }
    }
    if spec.blur_applied {
        box_blur(&mut data, h, w, box_length(spec.blur_radius));
    }
    Image::from_clamped(h, w, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_image() -> Image {
        let (h, w) = (9, 11);
        let mut data = Vec::new();
        for c in 0..3 {
            for i in 0..h * w {
                data.push(((i * (c + 3)) % 17) as f64 / 16.0);
            }
        }
        Image::new(h, w, data).unwrap()
    }

    #[test]
    fn identity_spec_is_a_no_op() {
        let img = test_image();
        assert_eq!(apply_photometric(&img, &PhotoNoiseSpec::IDENTITY), img);
    }

    #[test]
    fn box_length_rounding() {
        // sqrt(3·1 + 1) = 2, tie between 1 and 3 goes up
        assert_eq!(box_length(1.0), 3);
        assert_eq!(box_length(0.1), 1);
        assert_eq!(box_length(2.0), 3);
        assert_eq!(box_length(3.0), 5);
    }

    #[test]
    fn greyscale_channels_agree() {
        let spec = PhotoNoiseSpec {
            greyscale: true,
            ..PhotoNoiseSpec::IDENTITY
        };
        let out = apply_photometric(&test_image(), &spec);
        for i in 0..out.height() * out.width() {
            assert_eq!(out.channel(0)[i], out.channel(1)[i]);
            assert_eq!(out.channel(1)[i], out.channel(2)[i]);
        }
    }

    #[test]
    fn outputs_stay_in_unit_range() {
        let mut s = RngStream::root(4).derive("photo");
        let img = test_image();
        for _ in 0..500 {
            let spec = sample_photo_noise(&mut s);
            let out = apply_photometric(&img, &spec);
            assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn blur_preserves_constants() {
        let img = Image::filled(7, 7, [0.25, 0.5, 0.75]);
        let spec = PhotoNoiseSpec {
            blur_applied: true,
            blur_radius: 2.0,
            ..PhotoNoiseSpec::IDENTITY
        };
        let out = apply_photometric(&img, &spec);
        assert!(out.max_abs_diff_image(&img) < 1e-15);
    }

    #[test]
    fn hue_round_trip() {
        let img = test_image();
        let mut data = img.data().to_vec();
        let n = img.height() * img.width();
        rotate_hue(&mut data, n, 0.08);
        rotate_hue(&mut data, n, -0.08);
        let back = Image::from_clamped(img.height(), img.width(), data);
        assert!(back.max_abs_diff_image(&img) < 1e-12);
    }

    #[test]
    fn sampling_rates_and_ranges() {
        let mut s = RngStream::root(5).derive("rates");
        let n = 100_000;
        let (mut jitter, mut grey, mut blur) = (0usize, 0usize, 0usize);
        for _ in 0..n {
            let spec = sample_photo_noise(&mut s);
            jitter += spec.jitter_applied as usize;
            grey += spec.greyscale as usize;
            blur += spec.blur_applied as usize;
            assert!((0.1..=2.0).contains(&spec.blur_radius));
            for f in [spec.brightness, spec.contrast, spec.saturation] {
                assert!((0.6..=1.4).contains(&f));
            }
            assert!((0.9..=1.1).contains(&spec.hue));
        }
        let rate = |k: usize| k as f64 / n as f64;
        assert!((rate(jitter) - 0.5).abs() < 0.01, "{}", rate(jitter));
        assert!((rate(grey) - 0.2).abs() < 0.005, "{}", rate(grey));
        assert!((rate(blur) - 0.5).abs() < 0.01, "{}", rate(blur));
    }
}
