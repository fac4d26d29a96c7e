//! Losses for monocular depth training.
//!
//! Covers SSIM-weighted photometric error, inverse warping of a source frame
//! into the target view, edge-aware smoothness, sparse ground-truth and
//! normalized pseudo-label supervision, and the two objective compositions.
//! Every reduction skips masked pixels; an empty reduction yields zero where
//! the contract allows it and a validation error otherwise.

use nalgebra::{Matrix3, Vector3};

use crate::error::{ensure, Error, Result};
use crate::tensorio::MatrixBundle;
use crate::Matrix;

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Coordinates within this distance of the image border count as in bounds.
const BORDER_TOL: f64 = 1e-9;

/// `H × W × C` image with values in `[0, 1]`, stored row-major with interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Image {
    /// Values are clamped to `[0, 1]`; non-finite values are rejected.
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        ensure!(
            height > 0 && width > 0 && channels > 0,
            "image dimensions must be positive, got {height}x{width}x{channels}"
        );
        ensure!(
            data.len() == height * width * channels,
            "image data has {} values, expected {}",
            data.len(),
            height * width * channels
        );
        ensure!(
            data.iter().all(|v| v.is_finite()),
            "image contains non-finite values"
        );
        let data = data.into_iter().map(|v| v.clamp(0.0, 1.0)).collect();
        Ok(Self {
            height,
            width,
            channels,
            data,
        })
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    fn same_shape(&self, other: &Image) -> Result<()> {
        ensure!(
            (self.height, self.width, self.channels)
                == (other.height, other.width, other.channels),
            "image shapes differ: {}x{}x{} vs {}x{}x{}",
            self.height,
            self.width,
            self.channels,
            other.height,
            other.width,
            other.channels
        );
        Ok(())
    }

    /// Channel `c` as an `H × W` matrix.
    pub fn channel(&self, c: usize) -> Matrix {
        Matrix::from_fn(self.height, self.width, |y, x| self.get(y, x, c))
    }

    /// One bundle entry per channel, named `<prefix>.c<index>`.
    pub fn to_bundle(&self, prefix: &str, bundle: &mut MatrixBundle) -> Result<()> {
        for c in 0..self.channels {
            bundle.insert(format!("{prefix}.c{c}"), self.channel(c))?;
        }
        Ok(())
    }

    pub fn from_bundle(bundle: &MatrixBundle, prefix: &str) -> Result<Self> {
        let planes: Vec<&Matrix> = (0..)
            .map_while(|c| bundle.get(&format!("{prefix}.c{c}")))
            .collect();
        ensure!(!planes.is_empty(), "bundle has no channels for image {prefix:?}");
        let (h, w) = planes[0].shape();
        ensure!(
            planes.iter().all(|p| p.shape() == (h, w)),
            "channels of image {prefix:?} differ in shape"
        );
        Self::from_fn(h, w, planes.len(), |y, x, c| planes[c][(y, x)])
    }
}

/// Per-pixel scalar map, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl PixelMap {
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

/// Metric depth with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    height: usize,
    width: usize,
    depth: Vec<f64>,
    valid: Vec<bool>,
}

impl DepthMap {
    /// Depth must be finite and positive wherever `valid` is set.
    pub fn new(height: usize, width: usize, depth: Vec<f64>, valid: Vec<bool>) -> Result<Self> {
        ensure!(height > 0 && width > 0, "depth map dimensions must be positive");
        ensure!(
            depth.len() == height * width && valid.len() == height * width,
            "depth map buffers do not match {height}x{width}"
        );
        ensure!(
            depth
                .iter()
                .zip(&valid)
                .all(|(d, &ok)| !ok || (d.is_finite() && *d > 0.0)),
            "depth must be positive and finite on valid pixels"
        );
        Ok(Self {
            height,
            width,
            depth,
            valid,
        })
    }

    /// Every pixel valid.
    pub fn dense(height: usize, width: usize, depth: Vec<f64>) -> Result<Self> {
        Self::new(height, width, depth, vec![true; height * width])
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let mut depth = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                depth.push(f(y, x));
            }
        }
        Self::dense(height, width, depth)
    }

    /// Replaces the validity mask.
    pub fn with_mask(self, valid: Vec<bool>) -> Result<Self> {
        Self::new(self.height, self.width, self.depth, valid)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self, y: usize, x: usize) -> f64 {
        self.depth[y * self.width + x]
    }

    pub fn is_valid(&self, y: usize, x: usize) -> bool {
        self.valid[y * self.width + x]
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    fn same_shape(&self, other: &DepthMap) -> Result<()> {
        ensure!(
            (self.height, self.width) == (other.height, other.width),
            "depth map shapes differ: {}x{} vs {}x{}",
            self.height,
            self.width,
            other.height,
            other.width
        );
        Ok(())
    }

    /// Entries `<prefix>.depth` and `<prefix>.mask` (1 valid, 0 invalid).
    pub fn to_bundle(&self, prefix: &str, bundle: &mut MatrixBundle) -> Result<()> {
        let depth = Matrix::from_row_slice(self.height, self.width, &self.depth);
        let mask = Matrix::from_fn(self.height, self.width, |y, x| {
            if self.is_valid(y, x) {
                1.0
            } else {
                0.0
            }
        });
        bundle.insert(format!("{prefix}.depth"), depth)?;
        bundle.insert(format!("{prefix}.mask"), mask)
    }

    pub fn from_bundle(bundle: &MatrixBundle, prefix: &str) -> Result<Self> {
        let depth = bundle
            .get(&format!("{prefix}.depth"))
            .ok_or_else(|| Error::Validation(format!("bundle lacks {prefix}.depth")))?;
        let (h, w) = depth.shape();
        let valid: Vec<bool> = match bundle.get(&format!("{prefix}.mask")) {
            Some(mask) => {
                ensure!(mask.shape() == (h, w), "mask shape differs from depth");
                (0..h * w).map(|i| mask[(i / w, i % w)] != 0.0).collect()
            }
            None => vec![true; h * w],
        };
        let values = (0..h * w).map(|i| depth[(i / w, i % w)]).collect();
        Self::new(h, w, values, valid)
    }
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Camera {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        ensure!(
            fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite(),
            "focal lengths must be positive, got fx = {fx}, fy = {fy}"
        );
        ensure!(cx.is_finite() && cy.is_finite(), "principal point must be finite");
        Ok(Self { fx, fy, cx, cy })
    }

    pub fn back_project(&self, u: f64, v: f64, depth: f64) -> Vector3<f64> {
        Vector3::new(
            (u - self.cx) / self.fx * depth,
            (v - self.cy) / self.fy * depth,
            depth,
        )
    }

    /// `None` for points on or behind the image plane.
    pub fn project(&self, p: &Vector3<f64>) -> Option<(f64, f64)> {
        (p.z > 0.0).then(|| (self.fx * p.x / p.z + self.cx, self.fy * p.y / p.z + self.cy))
    }
}

/// Rigid transform taking target-camera coordinates to source-camera coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let gram = rotation.transpose() * rotation - Matrix3::identity();
        ensure!(
            gram.amax() <= 1e-9,
            "rotation is not orthonormal (max deviation {:e})",
            gram.amax()
        );
        ensure!(
            rotation.determinant() > 0.0,
            "rotation must have determinant +1"
        );
        ensure!(
            translation.iter().all(|t| t.is_finite()),
            "translation must be finite"
        );
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_axis_angle(axis: Vector3<f64>, angle: f64, translation: Vector3<f64>) -> Result<Self> {
        let axis = nalgebra::Unit::try_new(axis, 1e-12)
            .ok_or_else(|| Error::Validation("rotation axis is zero".into()))?;
        let r = nalgebra::Rotation3::from_axis_angle(&axis, angle);
        Self::new(*r.matrix(), translation)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    pub fn transform(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }
}

/// Loss weights. `ssim_weight` balances SSIM against L1 inside the photometric error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub ssim_weight: f64,
    pub smooth_weight: f64,
    /// Weight of the sparse ground-truth term.
    pub gt_weight: f64,
    /// Weight of the dense pseudo-label term.
    pub pseudo_weight: f64,
    pub reg_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ssim_weight: 0.85,
            smooth_weight: 1e-3,
            gt_weight: 2.0,
            pseudo_weight: 1.0,
            reg_weight: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            (0.0..=1.0).contains(&self.ssim_weight),
            "ssim_weight must lie in [0, 1], got {}",
            self.ssim_weight
        );
        for (name, v) in [
            ("smooth_weight", self.smooth_weight),
            ("gt_weight", self.gt_weight),
            ("pseudo_weight", self.pseudo_weight),
            ("reg_weight", self.reg_weight),
        ] {
            ensure!(v.is_finite() && v >= 0.0, "{name} must be non-negative, got {v}");
        }
        Ok(())
    }
}

/// Reflect-101 indexing for a one-pixel border.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let r = if i < 0 {
        -i
    } else if i >= n {
        2 * n - 2 - i
    } else {
        i
    };
    r as usize
}

/// Per-pixel SSIM over 3×3 block-mean windows with reflected borders, averaged over channels.
pub fn ssim(a: &Image, b: &Image) -> Result<PixelMap> {
    a.same_shape(b)?;
    let (h, w, ch) = (a.height, a.width, a.channels);
    let mut values = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for c in 0..ch {
                let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                for dy in -1isize..=1 {
                    for dx in -1isize..=1 {
                        let yy = reflect(y as isize + dy, h);
                        let xx = reflect(x as isize + dx, w);
                        let (pa, pb) = (a.get(yy, xx, c), b.get(yy, xx, c));
                        sa += pa;
                        sb += pb;
                        saa += pa * pa;
                        sbb += pb * pb;
                        sab += pa * pb;
                    }
                }
                let (mu_a, mu_b) = (sa / 9.0, sb / 9.0);
                let var_a = saa / 9.0 - mu_a * mu_a;
                let var_b = sbb / 9.0 - mu_b * mu_b;
                let cov = sab / 9.0 - mu_a * mu_b;
                let num = (2.0 * mu_a * mu_b + SSIM_C1) * (2.0 * cov + SSIM_C2);
                let den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2);
                acc += (num / den).clamp(-1.0, 1.0);
            }
            values[y * w + x] = acc / ch as f64;
        }
    }
    Ok(PixelMap {
        height: h,
        width: w,
        values,
    })
}

/// Scalar loss plus the per-pixel map it reduces.
#[derive(Debug, Clone, PartialEq)]
pub struct PhotometricError {
    /// Mean over the pixels that were included.
    pub value: f64,
    pub map: PixelMap,
    pub included: usize,
}

/// `(α/2)(1 − SSIM) + (1 − α)·L1` per pixel, averaged over the image.
pub fn photometric_error(target: &Image, warped: &Image, w: &LossWeights) -> Result<PhotometricError> {
    let mask = vec![true; target.height * target.width];
    photometric_error_masked(target, warped, &mask, w)
}

/// As [`photometric_error`], averaging only over pixels where `mask` is set.
pub fn photometric_error_masked(
    target: &Image,
    warped: &Image,
    mask: &[bool],
    w: &LossWeights,
) -> Result<PhotometricError> {
    w.validate()?;
    target.same_shape(warped)?;
    ensure!(
        mask.len() == target.height * target.width,
        "mask has {} entries for a {}x{} image",
        mask.len(),
        target.height,
        target.width
    );
    let alpha = w.ssim_weight;
    let s = ssim(target, warped)?;
    let ch = target.channels as f64;
    let mut values = Vec::with_capacity(mask.len());
    let (mut sum, mut included) = (0.0, 0usize);
    for y in 0..target.height {
        for x in 0..target.width {
            let l1: f64 = (0..target.channels)
                .map(|c| (target.get(y, x, c) - warped.get(y, x, c)).abs())
                .sum::<f64>()
                / ch;
            let pe = alpha / 2.0 * (1.0 - s.get(y, x)) + (1.0 - alpha) * l1;
            values.push(pe);
            if mask[y * target.width + x] {
                sum += pe;
                included += 1;
            }
        }
    }
    let value = if included == 0 { 0.0 } else { sum / included as f64 };
    Ok(PhotometricError {
        value,
        map: PixelMap {
            height: target.height,
            width: target.width,
            values,
        },
        included,
    })
}

/// Source-view pixel that target pixel `(u, v)` at `depth` lands on.
pub fn reproject(u: f64, v: f64, depth: f64, pose: &Pose, cam: &Camera) -> Option<(f64, f64)> {
    if !(depth > 0.0 && depth.is_finite()) {
        return None;
    }
    let p = pose.transform(&cam.back_project(u, v, depth));
    cam.project(&p)
}

/// Source image resampled into the target view.
#[derive(Debug, Clone, PartialEq)]
pub struct Warped {
    pub image: Image,
    /// False where the sample fell outside the source or the depth was unusable.
    pub in_bounds: Vec<bool>,
}

/// Inverse-warps `source` into the target frame using target depth, relative pose and intrinsics.
///
/// Samples are bilinear; pixels whose projection leaves the source image are zero
/// and flagged out of bounds.
pub fn warp(source: &Image, depth: &DepthMap, pose: &Pose, cam: &Camera) -> Result<Warped> {
    ensure!(
        (source.height, source.width) == (depth.height, depth.width),
        "depth map {}x{} does not match image {}x{}",
        depth.height,
        depth.width,
        source.height,
        source.width
    );
    let (h, w, ch) = (source.height, source.width, source.channels);
    let mut data = vec![0.0; h * w * ch];
    let mut in_bounds = vec![false; h * w];
    let (max_x, max_y) = ((w - 1) as f64, (h - 1) as f64);

    for y in 0..h {
        for x in 0..w {
            if !depth.is_valid(y, x) {
                continue;
            }
            let Some((su, sv)) = reproject(x as f64, y as f64, depth.depth(y, x), pose, cam) else {
                continue;
            };
            let inside = su >= -BORDER_TOL
                && su <= max_x + BORDER_TOL
                && sv >= -BORDER_TOL
                && sv <= max_y + BORDER_TOL;
            if !inside {
                continue;
            }
            let (su, sv) = (su.clamp(0.0, max_x), sv.clamp(0.0, max_y));
            let (x0, y0) = (su.floor() as usize, sv.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
            let (fx, fy) = (su - x0 as f64, sv - y0 as f64);
            for c in 0..ch {
                let top = source.get(y0, x0, c) * (1.0 - fx) + source.get(y0, x1, c) * fx;
                let bottom = source.get(y1, x0, c) * (1.0 - fx) + source.get(y1, x1, c) * fx;
                data[(y * w + x) * ch + c] = top * (1.0 - fy) + bottom * fy;
            }
            in_bounds[y * w + x] = true;
        }
    }
    Ok(Warped {
        image: Image::new(h, w, ch, data)?,
        in_bounds,
    })
}

/// Edge-aware smoothness of mean-normalized disparity.
///
/// `mean_x(|∂x d*| e^{−|∂x I|}) + mean_y(|∂y d*| e^{−|∂y I|})`, where `d* = (1/D) / mean(1/D)`
/// over valid pixels, image gradients are channel-averaged, and each mean runs over
/// neighbour pairs whose pixels are both valid.
pub fn smooth_loss(depth: &DepthMap, image: &Image) -> Result<f64> {
    ensure!(
        (depth.height, depth.width) == (image.height, image.width),
        "depth map and image sizes differ"
    );
    let valid = depth.valid_count();
    ensure!(valid > 0, "smoothness needs at least one valid depth pixel");
    let (h, w) = (depth.height, depth.width);

    let disparity: Vec<f64> = depth.depth.iter().map(|d| 1.0 / d).collect();
    let mean = disparity
        .iter()
        .zip(&depth.valid)
        .filter(|(_, &ok)| ok)
        .map(|(d, _)| d)
        .sum::<f64>()
        / valid as f64;
    let norm = |y: usize, x: usize| disparity[y * w + x] / mean;
    let image_grad = |(y0, x0): (usize, usize), (y1, x1): (usize, usize)| {
        (0..image.channels)
            .map(|c| (image.get(y0, x0, c) - image.get(y1, x1, c)).abs())
            .sum::<f64>()
            / image.channels as f64
    };

    let term = |pairs: &mut dyn Iterator<Item = ((usize, usize), (usize, usize))>| {
        let (mut sum, mut count) = (0.0, 0usize);
        for (p, q) in pairs {
            if depth.is_valid(p.0, p.1) && depth.is_valid(q.0, q.1) {
                sum += (norm(q.0, q.1) - norm(p.0, p.1)).abs() * (-image_grad(p, q)).exp();
                count += 1;
            }
        }
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    };
    let gx = term(&mut (0..h).flat_map(|y| (0..w.saturating_sub(1)).map(move |x| ((y, x), (y, x + 1)))));
    let gy = term(&mut (0..h.saturating_sub(1)).flat_map(|y| (0..w).map(move |x| ((y, x), (y + 1, x)))));
    Ok(gx + gy)
}

fn shared_mask(a: &DepthMap, b: &DepthMap) -> Vec<usize> {
    (0..a.depth.len())
        .filter(|&i| a.valid[i] && b.valid[i])
        .collect()
}

/// Mean absolute relative error `|pred − gt| / gt` over pixels valid in both maps.
pub fn gt_loss(pred: &DepthMap, gt: &DepthMap) -> Result<f64> {
    pred.same_shape(gt)?;
    let idx = shared_mask(pred, gt);
    ensure!(!idx.is_empty(), "ground truth has no valid pixels");
    let sum: f64 = idx
        .iter()
        .map(|&i| (pred.depth[i] - gt.depth[i]).abs() / gt.depth[i])
        .sum();
    Ok(sum / idx.len() as f64)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// `(x − median) / mean|x − median|`
fn normalize(values: &[f64], what: &str) -> Result<Vec<f64>> {
    let med = median(&mut values.to_vec());
    let mad = values.iter().map(|v| (v - med).abs()).sum::<f64>() / values.len() as f64;
    ensure!(
        mad > 0.0,
        "{what} has zero mean absolute deviation; it cannot be normalized"
    );
    Ok(values.iter().map(|v| (v - med) / mad).collect())
}

/// L1 distance between independently median/MAD-normalized maps.
pub fn pseudo_loss(pred: &DepthMap, pseudo: &DepthMap) -> Result<f64> {
    pred.same_shape(pseudo)?;
    let idx = shared_mask(pred, pseudo);
    ensure!(!idx.is_empty(), "prediction and pseudo labels share no valid pixels");
    let p: Vec<f64> = idx.iter().map(|&i| pred.depth[i]).collect();
    let q: Vec<f64> = idx.iter().map(|&i| pseudo.depth[i]).collect();
    let p = normalize(&p, "prediction")?;
    let q = normalize(&q, "pseudo label")?;
    Ok(p.iter().zip(&q).map(|(a, b)| (a - b).abs()).sum::<f64>() / p.len() as f64)
}

/// Self-supervised objective: `pe + smooth_weight·smooth + reg_weight·reg`.
pub fn compose_ssl(pe: f64, smooth: f64, reg: f64, w: &LossWeights) -> f64 {
    pe + w.smooth_weight * smooth + w.reg_weight * reg
}

/// Supervised objective: `gt_weight·gt + pseudo_weight·pseudo + smooth_weight·smooth + reg_weight·reg`.
pub fn compose_sl(gt: f64, pseudo: f64, smooth: f64, reg: f64, w: &LossWeights) -> f64 {
    w.gt_weight * gt + w.pseudo_weight * pseudo + w.smooth_weight * smooth + w.reg_weight * reg
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::from_fn(h, w, c, |_, _, _| rng.random::<f64>()).unwrap()
    }

    fn constant(h: usize, w: usize, v: f64) -> Image {
        Image::from_fn(h, w, 1, |_, _, _| v).unwrap()
    }

    /// SSIM of two constant patches: the variance terms cancel to `C2 / C2`.
    fn constant_ssim(a: f64, b: f64) -> f64 {
        (2.0 * a * b + SSIM_C1) / (a * a + b * b + SSIM_C1)
    }

    #[test]
    fn self_similarity_is_one() {
        let a = random_image(7, 9, 3, 1);
        let s = ssim(&a, &a).unwrap();
        assert!(s.values.iter().all(|&v| v == 1.0));
    }

    #[test]
    fn constant_patches_match_closed_form() {
        let s = ssim(&constant(5, 6, 0.2), &constant(5, 6, 0.8)).unwrap();
        let expected = constant_ssim(0.2, 0.8);
        assert!(expected < 1.0);
        for v in s.values {
            assert!((v - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn inverted_image_is_dissimilar() {
        let a = random_image(6, 6, 1, 2);
        let b = Image::from_fn(6, 6, 1, |y, x, c| 1.0 - a.get(y, x, c)).unwrap();
        let s = ssim(&a, &b).unwrap();
        assert!(s.values.iter().all(|&v| (-1.0..1.0).contains(&v)));
    }

    #[test]
    fn ssim_shape_mismatch() {
        assert!(ssim(&constant(2, 2, 0.1), &constant(2, 3, 0.1)).is_err());
    }

    #[test]
    fn photometric_error_cases() {
        let w = LossWeights::default();
        let a = random_image(8, 8, 3, 3);
        assert_eq!(photometric_error(&a, &a, &w).unwrap().value, 0.0);

        let b = random_image(8, 8, 3, 4);
        let l1 = LossWeights { ssim_weight: 0.0, ..w };
        let mean_abs: f64 = (0..8)
            .flat_map(|y| (0..8).flat_map(move |x| (0..3).map(move |c| (y, x, c))))
            .map(|(y, x, c)| (a.get(y, x, c) - b.get(y, x, c)).abs())
            .sum::<f64>()
            / 192.0;
        assert!((photometric_error(&a, &b, &l1).unwrap().value - mean_abs).abs() < 1e-12);

        let s = LossWeights { ssim_weight: 1.0, ..w };
        let pe = photometric_error(&constant(4, 4, 0.2), &constant(4, 4, 0.8), &s).unwrap();
        assert!((pe.value - (1.0 - constant_ssim(0.2, 0.8)) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn fully_masked_error_is_zero_not_nan() {
        let a = random_image(4, 4, 1, 5);
        let b = random_image(4, 4, 1, 6);
        let pe = photometric_error_masked(&a, &b, &[false; 16], &LossWeights::default()).unwrap();
        assert_eq!(pe.value, 0.0);
        assert_eq!(pe.included, 0);
    }

    fn camera(h: usize, w: usize) -> Camera {
        Camera::new(20.0, 22.0, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0).unwrap()
    }

    #[test]
    fn identity_warp_reproduces_source() {
        let src = random_image(9, 11, 2, 7);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let depth = DepthMap::from_fn(9, 11, |_, _| rng.random_range(0.5..30.0)).unwrap();
        let out = warp(&src, &depth, &Pose::identity(), &camera(9, 11)).unwrap();
        assert!(out.in_bounds.iter().all(|&b| b));
        for y in 0..9 {
            for x in 0..11 {
                for c in 0..2 {
                    assert!((out.image.get(y, x, c) - src.get(y, x, c)).abs() <= 1e-6);
                }
            }
        }
    }

    #[test]
    fn horizontal_translation_shifts_by_disparity() {
        let (h, w) = (6, 40);
        let cam = camera(h, w);
        let (d, tx) = (4.0, 0.3);
        let shift = cam.fx * tx / d;
        // A horizontal ramp makes bilinear sampling exact, so the shift is readable from values.
        let src = Image::from_fn(h, w, 1, |_, x, _| x as f64 / (w - 1) as f64).unwrap();
        let depth = DepthMap::from_fn(h, w, |_, _| d).unwrap();
        let pose = Pose::new(Matrix3::identity(), Vector3::new(tx, 0.0, 0.0)).unwrap();
        let out = warp(&src, &depth, &pose, &cam).unwrap();
        for y in 0..h {
            for x in 0..w {
                let expect_in = (x as f64 + shift) <= (w - 1) as f64;
                assert_eq!(out.in_bounds[y * w + x], expect_in, "({y},{x})");
                if expect_in {
                    let sampled = out.image.get(y, x, 0) * (w - 1) as f64;
                    assert!((sampled - x as f64 - shift).abs() <= 1e-6);
                } else {
                    assert_eq!(out.image.get(y, x, 0), 0.0);
                }
            }
        }
    }

    #[test]
    fn rotation_about_optical_axis_flips_image() {
        let (h, w) = (7, 10);
        let src = random_image(h, w, 1, 9);
        let depth = DepthMap::from_fn(h, w, |y, x| 1.0 + (y * w + x) as f64 * 0.1).unwrap();
        let pose = Pose::new(
            Matrix3::from_diagonal(&Vector3::new(-1.0, -1.0, 1.0)),
            Vector3::zeros(),
        )
        .unwrap();
        let out = warp(&src, &depth, &pose, &camera(h, w)).unwrap();
        for y in 0..h {
            for x in 0..w {
                assert!(out.in_bounds[y * w + x]);
                assert!((out.image.get(y, x, 0) - src.get(h - 1 - y, w - 1 - x, 0)).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn invalid_depth_and_points_behind_camera_are_masked() {
        let src = random_image(4, 4, 1, 10);
        let mut valid = vec![true; 16];
        valid[5] = false;
        let depth = DepthMap::new(4, 4, vec![2.0; 16], valid).unwrap();
        let back = Pose::new(Matrix3::identity(), Vector3::new(0.0, 0.0, -3.0)).unwrap();
        let out = warp(&src, &depth, &back, &camera(4, 4)).unwrap();
        assert!(out.in_bounds.iter().all(|&b| !b));
        let out = warp(&src, &depth, &Pose::identity(), &camera(4, 4)).unwrap();
        assert!(!out.in_bounds[5]);
        assert_eq!(out.in_bounds.iter().filter(|&&b| b).count(), 15);
    }

    #[test]
    fn geometry_validation() {
        assert!(Camera::new(0.0, 1.0, 0.0, 0.0).is_err());
        assert!(Pose::new(Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, -1.0)), Vector3::zeros()).is_err());
        assert!(Pose::new(Matrix3::identity() * 2.0, Vector3::zeros()).is_err());
        let p = Pose::from_axis_angle(Vector3::new(0.0, 1.0, 0.0), 0.3, Vector3::new(0.1, 0.0, 0.0)).unwrap();
        assert!((p.rotation().determinant() - 1.0).abs() < 1e-12);
        assert!(DepthMap::dense(1, 2, vec![1.0, 0.0]).is_err());
        assert!(DepthMap::new(1, 2, vec![1.0, 0.0], vec![true, false]).is_ok());
    }

    #[test]
    fn smoothness_cases() {
        let flat = constant(5, 6, 0.5);
        let d = DepthMap::from_fn(5, 6, |_, _| 3.0).unwrap();
        assert_eq!(smooth_loss(&d, &flat).unwrap(), 0.0);

        // Oracle: normalized disparity computed directly, mean |slope| along x.
        let ramp = DepthMap::from_fn(5, 6, |_, x| 1.0 + x as f64).unwrap();
        let disp: Vec<f64> = (0..6).map(|x| 1.0 / (1.0 + x as f64)).collect();
        let mean = disp.iter().sum::<f64>() / 6.0;
        let slope = disp.windows(2).map(|p| (p[1] - p[0]).abs() / mean).sum::<f64>() / 5.0;
        let got = smooth_loss(&ramp, &flat).unwrap();
        assert!(got > 0.0);
        assert!((got - slope).abs() < 1e-12);
    }

    #[test]
    fn edges_discount_depth_steps() {
        let step = DepthMap::from_fn(6, 8, |_, x| if x < 4 { 2.0 } else { 8.0 }).unwrap();
        let edge = Image::from_fn(6, 8, 1, |_, x, _| if x < 4 { 0.0 } else { 1.0 }).unwrap();
        let flat = constant(6, 8, 0.5);
        assert!(smooth_loss(&step, &edge).unwrap() < smooth_loss(&step, &flat).unwrap());
    }

    #[test]
    fn smoothness_requires_valid_pixels() {
        let d = DepthMap::new(2, 2, vec![1.0; 4], vec![false; 4]).unwrap();
        assert!(smooth_loss(&d, &constant(2, 2, 0.0)).is_err());
    }

    #[test]
    fn gt_loss_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let gt = DepthMap::from_fn(4, 4, |_, _| rng.random_range(1.0..50.0)).unwrap();
        assert_eq!(gt_loss(&gt, &gt).unwrap(), 0.0);
        let scaled = DepthMap::from_fn(4, 4, |y, x| 1.5 * gt.depth(y, x)).unwrap();
        assert!((gt_loss(&scaled, &gt).unwrap() - 0.5).abs() < 1e-12);
        let mixed = DepthMap::from_fn(4, 4, |y, x| gt.depth(y, x) * if y < 2 { 1.2 } else { 0.8 }).unwrap();
        assert!((gt_loss(&mixed, &gt).unwrap() - 0.2).abs() < 1e-12);

        // Sparse ground truth: only valid pixels count.
        let mut mask = vec![false; 16];
        mask[3] = true;
        let sparse = gt.clone().with_mask(mask).unwrap();
        assert!((gt_loss(&mixed, &sparse).unwrap() - 0.2).abs() < 1e-12);
        let empty = gt.clone().with_mask(vec![false; 16]).unwrap();
        assert!(gt_loss(&gt, &empty).is_err());
    }

    #[test]
    fn pseudo_loss_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let pseudo = DepthMap::from_fn(6, 6, |_, _| rng.random_range(1.0..20.0)).unwrap();
        assert_eq!(pseudo_loss(&pseudo, &pseudo).unwrap(), 0.0);
        let affine = DepthMap::from_fn(6, 6, |y, x| 3.5 * pseudo.depth(y, x) + 2.0).unwrap();
        assert!(pseudo_loss(&affine, &pseudo).unwrap() < 1e-9);

        // Reverse the depth ordering inside one quadrant.
        let (lo, hi) = (1.0, 20.0);
        let flipped = DepthMap::from_fn(6, 6, |y, x| {
            let d = pseudo.depth(y, x);
            if y < 3 && x < 3 {
                lo + hi - d
            } else {
                d
            }
        })
        .unwrap();
        assert!(pseudo_loss(&flipped, &pseudo).unwrap() > 0.0);

        let flat = DepthMap::from_fn(6, 6, |_, _| 5.0).unwrap();
        assert!(pseudo_loss(&flat, &pseudo).is_err());
    }

    #[test]
    fn compositions() {
        let w = LossWeights::default();
        assert_eq!(compose_ssl(0.0, 0.0, 0.0, &w), 0.0);
        let unit = LossWeights {
            smooth_weight: 1.0,
            reg_weight: 1.0,
            ..w
        };
        assert_eq!(compose_ssl(1.0, 2.0, 3.0, &unit), 6.0);
        let no_reg = LossWeights { reg_weight: 0.0, ..w };
        assert_eq!(compose_ssl(1.0, 2.0, 3.0, &no_reg), 1.0 + w.smooth_weight * 2.0);

        assert_eq!(compose_sl(0.1, 0.2, 0.0, 0.0, &w), 0.4);
        assert_eq!(compose_sl(0.0, 0.0, 0.0, 0.0, &w), 0.0);
        let gt_only = LossWeights { pseudo_weight: 0.0, ..w };
        assert_eq!(compose_sl(0.1, 0.7, 0.0, 0.0, &gt_only), 0.2);
    }

    #[test]
    fn weight_validation() {
        assert!(LossWeights::default().validate().is_ok());
        assert!(LossWeights { ssim_weight: 1.5, ..Default::default() }.validate().is_err());
        assert!(LossWeights { gt_weight: -1.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn images_and_depth_round_trip_through_bundles() {
        let img = random_image(3, 4, 2, 13);
        let mut valid = vec![true; 12];
        valid[0] = false;
        let depth = DepthMap::new(3, 4, vec![1.5; 12], valid).unwrap();
        let mut bundle = MatrixBundle::new();
        img.to_bundle("frame", &mut bundle).unwrap();
        depth.to_bundle("frame", &mut bundle).unwrap();
        assert_eq!(Image::from_bundle(&bundle, "frame").unwrap(), img);
        assert_eq!(DepthMap::from_bundle(&bundle, "frame").unwrap(), depth);
    }

    fn random_depth(h: usize, w: usize, seed: u64) -> DepthMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DepthMap::from_fn(h, w, |_, _| rng.random_range(0.5..40.0)).unwrap()
    }

    proptest! {
        #[test]
        fn photometric_error_is_non_negative(seed in any::<u64>(), alpha in 0.0f64..=1.0) {
            let a = random_image(5, 6, 3, seed);
            let b = random_image(5, 6, 3, seed.wrapping_add(1));
            let w = LossWeights { ssim_weight: alpha, ..LossWeights::default() };
            let pe = photometric_error(&a, &b, &w).unwrap();
            prop_assert!(pe.value >= 0.0);
            prop_assert!(pe.map.values.iter().all(|&v| v >= 0.0));
            prop_assert_eq!(photometric_error(&a, &a, &w).unwrap().value, 0.0);
        }

        #[test]
        fn gt_loss_is_scale_equivariant(seed in any::<u64>(), c in 0.01f64..5.0) {
            let gt = random_depth(4, 5, seed);
            let pred = DepthMap::from_fn(4, 5, |y, x| c * gt.depth(y, x)).unwrap();
            prop_assert!((gt_loss(&pred, &gt).unwrap() - (c - 1.0).abs()).abs() <= 1e-12);
        }

        #[test]
        fn pseudo_loss_ignores_positive_affine_maps(seed in any::<u64>(), a in 0.1f64..10.0, b in 0.0f64..5.0) {
            let pred = random_depth(5, 5, seed);
            let pseudo = random_depth(5, 5, seed.wrapping_add(7));
            let base = pseudo_loss(&pred, &pseudo).unwrap();
            let moved = DepthMap::from_fn(5, 5, |y, x| a * pred.depth(y, x) + b).unwrap();
            let moved_pseudo = DepthMap::from_fn(5, 5, |y, x| a * pseudo.depth(y, x) + b).unwrap();
            prop_assert!((pseudo_loss(&moved, &pseudo).unwrap() - base).abs() <= 1e-9);
            prop_assert!((pseudo_loss(&pred, &moved_pseudo).unwrap() - base).abs() <= 1e-9);
        }
    }
}
