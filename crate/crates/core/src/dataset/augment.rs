use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DatasetError, DatasetResult, ImageDims, ImageTensor};
use crate::rng;

/// Training-time augmentation: random left-right mirror plus random integer
/// translation on both axes, exposed borders filled with a constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentationConfig {
    pub horizontal_mirror_prob: f64,
    pub max_translate_px: usize,
    pub fill_value: f32,
    pub seed: u64,
}

impl Default for AugmentationConfig {
    fn default() -> Self {
        Self {
            horizontal_mirror_prob: 0.5,
            max_translate_px: 30,
            fill_value: 0.0,
            seed: 0,
        }
    }
}

/// One realization of the random transform.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AugmentDraw {
    pub mirror: bool,
    /// Horizontal shift; positive moves content right.
    pub dx: i64,
    /// Vertical shift; positive moves content down.
    pub dy: i64,
}

impl AugmentationConfig {
    pub fn disabled() -> Self {
        Self {
            horizontal_mirror_prob: 0.0,
            max_translate_px: 0,
            ..Self::default()
        }
    }

    /// Reject configs that cannot apply to images of `dims`.
    pub fn validate(&self, dims: ImageDims) -> DatasetResult<()> {
        if !(0.0..=1.0).contains(&self.horizontal_mirror_prob) {
            return Err(DatasetError::InvalidAugmentation(format!(
                "mirror probability {} outside [0, 1]",
                self.horizontal_mirror_prob
            )));
        }
        if !self.fill_value.is_finite() {
            return Err(DatasetError::InvalidAugmentation("non-finite fill value".into()));
        }
        let need = 2 * self.max_translate_px;
        if dims.height < need || dims.width < need {
            return Err(DatasetError::InvalidAugmentation(format!(
                "images of {dims} are smaller than twice the maximum translation of {} px",
                self.max_translate_px
            )));
        }
        Ok(())
    }

    /// Generator for one image in one epoch, independent of visiting order.
    pub fn rng_for(&self, epoch: usize, id: &str) -> ChaCha8Rng {
        rng::stream(self.seed, &["augment".into(), epoch.into(), id.into()])
    }

    /// Draw mirror flag then dx then dy, always consuming the same number of
    /// values so streams stay aligned regardless of the config.
    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> AugmentDraw {
        let mirror = rng.random::<f64>() < self.horizontal_mirror_prob;
        let m = self.max_translate_px as i64;
        let dx = rng.random_range(-m..=m);
        let dy = rng.random_range(-m..=m);
        AugmentDraw { mirror, dx, dy }
    }
}

/// Apply one random draw of `config` to `image`.
pub fn augment<R: Rng + ?Sized>(image: &ImageTensor, config: &AugmentationConfig, rng: &mut R) -> ImageTensor {
    let d = config.draw(rng);
    apply(image, d, config.fill_value)
}

pub fn apply(image: &ImageTensor, d: AugmentDraw, fill: f32) -> ImageTensor {
    let mirrored;
    let src = if d.mirror {
        mirrored = mirror_horizontal(image);
        &mirrored
    } else {
        image
    };
    if d.dx == 0 && d.dy == 0 {
        return src.clone();
    }
    translate(src, d.dx, d.dy, fill)
}

/// Mirror across the vertical axis (left and right swap).
pub fn mirror_horizontal(image: &ImageTensor) -> ImageTensor {
    let (h, w) = (image.height(), image.width());
    let mut out = image.clone();
    for c in 0..ImageTensor::CHANNELS {
        for y in 0..h {
            let row = &mut out.data_mut()[(c * h + y) * w..(c * h + y + 1) * w];
            row.reverse();
        }
    }
    out
}

/// Shift content by `(dx, dy)`: output(y, x) = input(y - dy, x - dx), `fill`
/// where that source pixel lies outside the image.
pub fn translate(image: &ImageTensor, dx: i64, dy: i64, fill: f32) -> ImageTensor {
    let (h, w) = (image.height() as i64, image.width() as i64);
    let mut out = ImageTensor::filled(image.dims(), fill);
    let src = image.data();
    let dst = out.data_mut();
    let x_lo = dx.max(0);
    let x_hi = (w + dx).min(w);
    if x_lo >= x_hi {
        return out;
    }
    for c in 0..ImageTensor::CHANNELS as i64 {
        for y in 0..h {
            let sy = y - dy;
            if sy < 0 || sy >= h {
                continue;
            }
            let d0 = ((c * h + y) * w + x_lo) as usize;
            let s0 = ((c * h + sy) * w + x_lo - dx) as usize;
            let len = (x_hi - x_lo) as usize;
            dst[d0..d0 + len].copy_from_slice(&src[s0..s0 + len]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ramp(h: usize, w: usize) -> ImageTensor {
        let data = (0..3 * h * w).map(|i| (i % 251) as f32 / 251.0).collect();
        ImageTensor::new(h, w, data).unwrap()
    }

    fn argmax(t: &ImageTensor) -> (usize, usize) {
        let p = t.plane(0);
        let i = p
            .iter()
            .enumerate()
            .fold(0, |best, (i, &v)| if v > p[best] { i } else { best });
        (i / t.width(), i % t.width())
    }

    #[test]
    fn double_mirror_is_identity() {
        let img = ramp(17, 23);
        assert_eq!(mirror_horizontal(&mirror_horizontal(&img)), img);
    }

    #[test]
    fn mirror_swaps_columns() {
        let img = ramp(3, 4);
        let m = mirror_horizontal(&img);
        assert_eq!(m.at(1, 2, 0), img.at(1, 2, 3));
    }

    #[test]
    fn impulse_moves_by_exact_offset() {
        let dims = ImageDims::square(227);
        let mut img = ImageTensor::filled(dims, 0.0);
        for c in 0..3 {
            img.data_mut()[(c * 227 + 100) * 227 + 100] = 1.0;
        }
        let out = translate(&img, 30, 0, 0.0);
        assert_eq!(argmax(&out), (100, 130));
        assert_eq!(out.data().iter().filter(|&&v| v == 1.0).count(), 3);
        let out = translate(&img, -7, 12, 0.0);
        assert_eq!(argmax(&out), (112, 93));
    }

    #[test]
    fn exposed_border_takes_fill_value() {
        let img = ImageTensor::filled(ImageDims::square(10), 0.5);
        let out = translate(&img, 3, -2, 0.0);
        assert_eq!(out.at(0, 5, 2), 0.0);
        assert_eq!(out.at(0, 5, 3), 0.5);
        assert_eq!(out.at(0, 7, 5), 0.5);
        assert_eq!(out.at(0, 8, 5), 0.0);
    }

    #[test]
    fn noop_config_is_identity() {
        let img = ramp(64, 64);
        let cfg = AugmentationConfig::disabled();
        let mut rng = cfg.rng_for(0, "x");
        assert_eq!(augment(&img, &cfg, &mut rng), img);
    }

    #[test]
    fn validation_rejects_small_images_and_bad_probability() {
        let cfg = AugmentationConfig::default();
        assert!(cfg.validate(ImageDims::square(59)).is_err());
        assert!(cfg.validate(ImageDims::square(60)).is_ok());
        let bad = AugmentationConfig {
            horizontal_mirror_prob: 1.5,
            ..cfg
        };
        assert!(bad.validate(ImageDims::square(224)).is_err());
    }

    #[test]
    fn draws_stay_in_range() {
        let cfg = AugmentationConfig::default();
        let mut rng = cfg.rng_for(0, "range");
        let mut seen_extremes = (false, false);
        for _ in 0..20_000 {
            let d = cfg.draw(&mut rng);
            assert!(d.dx.abs() <= 30 && d.dy.abs() <= 30);
            seen_extremes.0 |= d.dx == -30;
            seen_extremes.1 |= d.dx == 30;
        }
        assert!(seen_extremes.0 && seen_extremes.1);
    }

    proptest! {
        #[test]
        fn augmentation_preserves_shape(seed in any::<u64>(), id in "[a-z]{1,8}", epoch in 0usize..50) {
            let img = ramp(64, 72);
            let cfg = AugmentationConfig { seed, ..AugmentationConfig::default() };
            let out = augment(&img, &cfg, &mut cfg.rng_for(epoch, &id));
            prop_assert_eq!(out.dims(), img.dims());
            prop_assert_eq!(out.data().len(), img.data().len());
            let again = augment(&img, &cfg, &mut cfg.rng_for(epoch, &id));
            prop_assert_eq!(out, again);
        }

        #[test]
        fn pure_mirror_preserves_pixel_multiset(h in 1usize..20, w in 1usize..20) {
            let img = ramp(h, w);
            let mut a: Vec<u32> = img.data().iter().map(|v| v.to_bits()).collect();
            let mut b: Vec<u32> = mirror_horizontal(&img).data().iter().map(|v| v.to_bits()).collect();
            a.sort_unstable();
            b.sort_unstable();
            prop_assert_eq!(a, b);
        }
    }
}
