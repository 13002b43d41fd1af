//! Resize, crop, mirror and mean subtraction on `(C, H, W)` images.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    /// Resize so the shorter edge has this length before cropping.
    #[serde(default)]
    pub resize_shorter_edge: Option<usize>,
    pub crop: usize,
    #[serde(default)]
    pub mirror: bool,
    /// Per-channel mean to subtract; empty means no normalization.
    #[serde(default)]
    pub mean: Vec<f64>,
}

impl AugmentSpec {
    pub fn new(crop: usize) -> Self {
        Self {
            resize_shorter_edge: None,
            crop,
            mirror: false,
            mean: Vec::new(),
        }
    }

    fn resized(&self, image: &Tensor) -> Result<Tensor> {
        dims(image)?;
        match self.resize_shorter_edge {
            Some(s) => resize_shorter_edge(image, s),
            None => Ok(image.clone()),
        }
    }

    fn normalize(&self, mut image: Tensor) -> Result<Tensor> {
        if self.mean.is_empty() {
            return Ok(image);
        }
        let (c, h, w) = dims(&image)?;
        if self.mean.len() != c {
            return Err(Error::config(format!(
                "normalization has {} channel means for a {c}-channel image",
                self.mean.len()
            )));
        }
        for (plane, m) in image.data_mut().chunks_mut(h * w).zip(&self.mean) {
            plane.iter_mut().for_each(|v| *v -= m);
        }
        Ok(image)
    }
}

fn dims(image: &Tensor) -> Result<(usize, usize, usize)> {
    match *image.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::shape(format!(
            "expected a (C, H, W) image, got {:?}",
            image.shape()
        ))),
    }
}

/// Bilinear resize with half-pixel centers: output pixel `i` samples the
/// input at `(i + 0.5) * in / out - 0.5`, clamped to the valid range.
pub fn bilinear_resize(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (c, h, w) = dims(image)?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::config("resize target must be positive"));
    }
    let axis = |n_in: usize, n_out: usize| -> Vec<(usize, usize, f64)> {
        let scale = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|i| {
                let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
                let lo = src.floor() as usize;
                let hi = (lo + 1).min(n_in - 1);
                (lo, hi, src - lo as f64)
            })
            .collect()
    };
    let (ys, xs) = (axis(h, out_h), axis(w, out_w));
    let src = image.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bottom * fy);
            }
        }
    }
    Ok(Tensor::from_parts(vec![c, out_h, out_w], out))
}

/// Resizes so that the shorter edge equals `edge`, keeping the aspect ratio.
pub fn resize_shorter_edge(image: &Tensor, edge: usize) -> Result<Tensor> {
    let (_, h, w) = dims(image)?;
    let (out_h, out_w) = if h <= w {
        (edge, ((w as f64 * edge as f64 / h as f64).round() as usize).max(1))
    } else {
        (((h as f64 * edge as f64 / w as f64).round() as usize).max(1), edge)
    };
    bilinear_resize(image, out_h, out_w)
}

/// The `size x size` window whose top-left corner is `(top, left)`.
pub fn crop(image: &Tensor, top: usize, left: usize, size: usize) -> Result<Tensor> {
    let (c, h, w) = dims(image)?;
    if size == 0 || top + size > h || left + size > w {
        return Err(Error::config(format!(
            "crop {size} at ({top}, {left}) does not fit a {h}x{w} image"
        )));
    }
    let src = image.data();
    let mut out = Vec::with_capacity(c * size * size);
    for ch in 0..c {
        for y in top..top + size {
            let row = (ch * h + y) * w;
            out.extend_from_slice(&src[row + left..row + left + size]);
        }
    }
    Ok(Tensor::from_parts(vec![c, size, size], out))
}

/// Window at `((H - size) / 2, (W - size) / 2)`, rounding down.
pub fn center_crop(image: &Tensor, size: usize) -> Result<Tensor> {
    let (_, h, w) = dims(image)?;
    if size > h || size > w {
        return Err(Error::config(format!("crop {size} exceeds a {h}x{w} image")));
    }
    crop(image, (h - size) / 2, (w - size) / 2, size)
}

/// Horizontal mirror.
pub fn hflip(image: &Tensor) -> Result<Tensor> {
    let (c, h, w) = dims(image)?;
    let mut out = image.data().to_vec();
    for row in out.chunks_mut(w) {
        row.reverse();
    }
    Ok(Tensor::from_parts(vec![c, h, w], out))
}

/// Training view: optional resize, uniform random crop, mirror with
/// probability ½ when enabled, mean subtraction.
pub fn augment<R: Rng + ?Sized>(image: &Tensor, spec: &AugmentSpec, rng: &mut R) -> Result<Tensor> {
    let resized = spec.resized(image)?;
    let (_, h, w) = dims(&resized)?;
    if spec.crop == 0 || spec.crop > h || spec.crop > w {
        return Err(Error::config(format!("crop {} exceeds a {h}x{w} image", spec.crop)));
    }
    let top = rng.random_range(0..=h - spec.crop);
    let left = rng.random_range(0..=w - spec.crop);
    let mut out = crop(&resized, top, left, spec.crop)?;
    if spec.mirror && rng.random_bool(0.5) {
        out = hflip(&out)?;
    }
    spec.normalize(out)
}

/// Deterministic evaluation view: optional resize, center crop, mean
/// subtraction.
pub fn eval_view(image: &Tensor, spec: &AugmentSpec) -> Result<Tensor> {
    let resized = spec.resized(image)?;
    spec.normalize(center_crop(&resized, spec.crop)?)
}

/// Optional resize, the ten crops of [`ten_crop`], then mean subtraction.
pub fn ten_crop_views(image: &Tensor, spec: &AugmentSpec) -> Result<Vec<Tensor>> {
    let resized = spec.resized(image)?;
    ten_crop(&resized, spec.crop)?
        .into_iter()
        .map(|c| spec.normalize(c))
        .collect()
}

/// Top-left, top-right, bottom-left, bottom-right and center crops,
/// followed by the horizontal mirrors of those five in the same order.
pub fn ten_crop(image: &Tensor, size: usize) -> Result<Vec<Tensor>> {
    let (_, h, w) = dims(image)?;
    if size == 0 || size > h || size > w {
        return Err(Error::config(format!("crop {size} exceeds a {h}x{w} image")));
    }
    let (b, r) = (h - size, w - size);
    let mut crops = vec![
        crop(image, 0, 0, size)?,
        crop(image, 0, r, size)?,
        crop(image, b, 0, size)?,
        crop(image, b, r, size)?,
        center_crop(image, size)?,
    ];
    for i in 0..5 {
        let m = hflip(&crops[i])?;
        crops.push(m);
    }
    Ok(crops)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ramp(c: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_fn(&[c, h, w], |i| (i as f64).sin() + i as f64 * 1e-3)
    }

    #[test]
    fn identity_resize_is_exact() {
        let im = ramp(2, 5, 7);
        let out = bilinear_resize(&im, 5, 7).unwrap();
        assert_eq!(out.data(), im.data());
    }

    #[test]
    fn upsample_matches_half_pixel_oracle() {
        // 1x2 -> 1x4: sources at -0.25, 0.25, 0.75, 1.25 clamp to 0, 0.25, 0.75, 1.
        let im = Tensor::new(vec![1, 1, 2], vec![0.0, 1.0]).unwrap();
        let out = bilinear_resize(&im, 1, 4).unwrap();
        for (a, b) in out.data().iter().zip([0.0, 0.25, 0.75, 1.0]) {
            assert!((a - b).abs() < 1e-12);
        }
        let down = bilinear_resize(&Tensor::new(vec![1, 1, 4], vec![0.0, 1.0, 2.0, 3.0]).unwrap(), 1, 2).unwrap();
        assert_eq!(down.data(), &[0.5, 2.5]);
    }

    #[test]
    fn shorter_edge_keeps_aspect() {
        let out = resize_shorter_edge(&ramp(1, 8, 12), 4).unwrap();
        assert_eq!(out.shape(), &[1, 4, 6]);
    }

    #[test]
    fn full_crop_without_mirror_only_normalizes() {
        let im = ramp(2, 4, 4);
        let mut spec = AugmentSpec::new(4);
        spec.mean = vec![0.5, -0.25];
        let out = augment(&im, &spec, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        for (i, (a, b)) in out.data().iter().zip(im.data()).enumerate() {
            let m = if i < 16 { 0.5 } else { -0.25 };
            assert_eq!(*a, b - m);
        }
    }

    #[test]
    fn oversized_crop_is_config_error() {
        let spec = AugmentSpec::new(5);
        let err = augment(&ramp(1, 4, 4), &spec, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn mirror_is_involution() {
        let c = crop(&ramp(3, 6, 6), 1, 2, 3).unwrap();
        assert_eq!(hflip(&hflip(&c).unwrap()).unwrap(), c);
    }

    #[test]
    fn center_window_indexing() {
        let im = ramp(1, 7, 6);
        let c = center_crop(&im, 3).unwrap();
        // top = (7-3)/2 = 2, left = (6-3)/2 = 1
        for y in 0..3 {
            for x in 0..3 {
                assert_eq!(c.data()[y * 3 + x], im.data()[(y + 2) * 6 + x + 1]);
            }
        }
    }

    #[test]
    fn ten_crops_are_distinct_on_asymmetric_image() {
        let crops = ten_crop(&ramp(1, 6, 6), 4).unwrap();
        assert_eq!(crops.len(), 10);
        for i in 0..10 {
            for j in i + 1..10 {
                assert_ne!(crops[i].data(), crops[j].data(), "{i} vs {j}");
            }
        }
    }

    #[test]
    fn degenerate_ten_crop() {
        let im = ramp(2, 3, 3);
        let crops = ten_crop(&im, 3).unwrap();
        let flipped = hflip(&im).unwrap();
        for (i, c) in crops.iter().enumerate() {
            assert_eq!(c, if i < 5 { &im } else { &flipped });
        }
    }

    #[test]
    fn seeded_augmentation_is_reproducible() {
        let im = ramp(3, 9, 9);
        let mut spec = AugmentSpec::new(6);
        spec.mirror = true;
        let run = |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..8)
                .map(|_| augment(&im, &spec, &mut rng).unwrap())
                .collect::<Vec<_>>()
        };
        let (a, b) = (run(3), run(3));
        assert!(a.iter().zip(&b).all(|(x, y)| x.bitwise_eq(y)));
    }
}
