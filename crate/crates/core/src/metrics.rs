//! Reconstruction quality metrics: masked RMSE, SSIM and artifact suppression.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::phantom::Grid;

/// Default dilation of the phantom support for the RMSE mask, in voxels.
pub const MASK_DILATION: usize = 5;

fn check_len(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::ShapeMismatch {
            expected: format!("{a} values"),
            actual: format!("{b} values"),
        });
    }
    Ok(())
}

/// Dilates a boolean volume with a cube of half-width `radius` voxels.
pub fn dilate(mask: &[bool], grid: &Grid, radius: usize) -> Result<Vec<bool>> {
    check_len(grid.len(), mask.len())?;
    let dims = [grid.nx, grid.ny, grid.nz];
    let strides = [1, grid.nx, grid.nx * grid.ny];
    let mut cur = mask.to_vec();
    for axis in 0..3 {
        let n = dims[axis];
        let s = strides[axis];
        let mut next = vec![false; cur.len()];
        for (idx, out) in next.iter_mut().enumerate() {
            let pos = (idx / s) % n;
            let lo = pos.saturating_sub(radius);
            let hi = (pos + radius).min(n - 1);
            let base = idx - pos * s;
            *out = (lo..=hi).any(|p| cur[base + p * s]);
        }
        cur = next;
    }
    Ok(cur)
}

/// Root mean squared difference over the voxels where `mask` is set, or
/// over every voxel when no mask is given.
pub fn rmse(a: &[f32], b: &[f32], mask: Option<&[bool]>) -> Result<f64> {
    check_len(a.len(), b.len())?;
    if let Some(m) = mask {
        check_len(a.len(), m.len())?;
    }
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for (i, (&x, &y)) in a.iter().zip(b).enumerate() {
        if mask.map_or(true, |m| m[i]) {
            let d = x as f64 - y as f64;
            sum += d * d;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::validation("mask", "evaluation mask is empty"));
    }
    Ok((sum / count as f64).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SsimParams {
    pub window: usize,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            window: 8,
            k1: 0.01,
            k2: 0.03,
        }
    }
}

impl SsimParams {
    pub fn validate(&self) -> Result<()> {
        if self.window < 2 {
            return Err(Error::validation("ssim.window", "must be at least 2"));
        }
        for (name, k) in [("ssim.k1", self.k1), ("ssim.k2", self.k2)] {
            if !(k > 0.0 && k.is_finite()) {
                return Err(Error::validation(name, "must be positive"));
            }
        }
        Ok(())
    }
}

/// Dynamic range of a reference image, `max - min`.
pub fn data_range(reference: &[f32]) -> f64 {
    let (lo, hi) = reference
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v as f64), hi.max(v as f64)));
    if lo.is_finite() { hi - lo } else { 0.0 }
}

struct Integral {
    w: usize,
    data: Vec<f64>,
}

impl Integral {
    fn new(img: impl Fn(usize, usize) -> f64, nx: usize, ny: usize) -> Self {
        let w = nx + 1;
        let mut data = vec![0.0; w * (ny + 1)];
        for y in 0..ny {
            let mut row = 0.0;
            for x in 0..nx {
                row += img(x, y);
                data[(y + 1) * w + x + 1] = data[y * w + x + 1] + row;
            }
        }
        Integral { w, data }
    }

    fn window(&self, x: usize, y: usize, n: usize) -> f64 {
        let w = self.w;
        self.data[(y + n) * w + x + n] - self.data[y * w + x + n] - self.data[(y + n) * w + x] + self.data[y * w + x]
    }
}

/// Mean SSIM over every fully contained `window × window` patch of two
/// `nx`-wide images, with uniform weights and population (co)variances.
/// `range` is the dynamic range `L` of the reference.
pub fn ssim(a: &[f32], b: &[f32], nx: usize, range: f64, params: &SsimParams) -> Result<f64> {
    params.validate()?;
    check_len(a.len(), b.len())?;
    if nx == 0 || a.len() % nx != 0 {
        return Err(Error::ShapeMismatch {
            expected: format!("rows of {nx}"),
            actual: format!("{} values", a.len()),
        });
    }
    let ny = a.len() / nx;
    let n = params.window;
    if nx < n || ny < n {
        return Err(Error::validation("ssim.window", format!("larger than the {nx}x{ny} image")));
    }
    if !(range > 0.0 && range.is_finite()) {
        return Err(Error::validation("ssim.range", "dynamic range must be positive"));
    }
    let at = |img: &[f32], x: usize, y: usize| img[y * nx + x] as f64;
    let sa = Integral::new(|x, y| at(a, x, y), nx, ny);
    let sb = Integral::new(|x, y| at(b, x, y), nx, ny);
    let saa = Integral::new(|x, y| at(a, x, y).powi(2), nx, ny);
    let sbb = Integral::new(|x, y| at(b, x, y).powi(2), nx, ny);
    let sab = Integral::new(|x, y| at(a, x, y) * at(b, x, y), nx, ny);
    let c1 = (params.k1 * range).powi(2);
    let c2 = (params.k2 * range).powi(2);
    let inv = 1.0 / (n * n) as f64;
    let mut total = 0.0;
    for y in 0..=ny - n {
        for x in 0..=nx - n {
            let ma = sa.window(x, y, n) * inv;
            let mb = sb.window(x, y, n) * inv;
            let va = (saa.window(x, y, n) * inv - ma * ma).max(0.0);
            let vb = (sbb.window(x, y, n) * inv - mb * mb).max(0.0);
            let cov = sab.window(x, y, n) * inv - ma * mb;
            total += ssim_value(ma, mb, va, vb, cov, c1, c2);
        }
    }
    Ok(total / ((nx - n + 1) * (ny - n + 1)) as f64)
}

fn ssim_value(ma: f64, mb: f64, va: f64, vb: f64, cov: f64, c1: f64, c2: f64) -> f64 {
    ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
}

/// Percentage of the uncompensated RMSE removed by compensation. Negative
/// when compensation makes the image worse.
pub fn artifact_suppression(rmse_uncomp: f64, rmse_comp: f64) -> Result<f64> {
    if !(rmse_uncomp > 0.0 && rmse_uncomp.is_finite()) {
        return Err(Error::validation(
            "rmse_uncomp",
            "baseline RMSE must be positive; artifact suppression is undefined without motion artifacts",
        ));
    }
    if !rmse_comp.is_finite() || rmse_comp < 0.0 {
        return Err(Error::validation("rmse_comp", "must be finite and non-negative"));
    }
    Ok(100.0 * (rmse_uncomp - rmse_comp) / rmse_uncomp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
        (0..n).map(|_| rng.gen_range(0.0..1.0f32)).collect()
    }

    fn naive_ssim(a: &[f32], b: &[f32], nx: usize, range: f64, p: &SsimParams) -> f64 {
        let ny = a.len() / nx;
        let n = p.window;
        let c1 = (p.k1 * range).powi(2);
        let c2 = (p.k2 * range).powi(2);
        let mut total = 0.0;
        let mut count = 0;
        for y0 in 0..=ny - n {
            for x0 in 0..=nx - n {
                let pix: Vec<(f64, f64)> = (0..n)
                    .flat_map(|dy| (0..n).map(move |dx| (dx, dy)))
                    .map(|(dx, dy)| {
                        let i = (y0 + dy) * nx + x0 + dx;
                        (a[i] as f64, b[i] as f64)
                    })
                    .collect();
                let m = pix.len() as f64;
                let ma = pix.iter().map(|p| p.0).sum::<f64>() / m;
                let mb = pix.iter().map(|p| p.1).sum::<f64>() / m;
                let va = pix.iter().map(|p| (p.0 - ma).powi(2)).sum::<f64>() / m;
                let vb = pix.iter().map(|p| (p.1 - mb).powi(2)).sum::<f64>() / m;
                let cov = pix.iter().map(|p| (p.0 - ma) * (p.1 - mb)).sum::<f64>() / m;
                total += ssim_value(ma, mb, va, vb, cov, c1, c2);
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn rmse_examples() {
        let a: Vec<f32> = (0..50).map(|i| (i as f32 * 0.37).sin()).collect();
        assert_eq!(rmse(&a, &a, None).unwrap(), 0.0);
        let b: Vec<f32> = a.iter().map(|v| v + 0.25).collect();
        assert!((rmse(&a, &b, None).unwrap() - 0.25).abs() < 1e-6);
        assert!(matches!(rmse(&a, &b[..49], None), Err(Error::ShapeMismatch { .. })));
        assert!(rmse(&a, &b, Some(&vec![false; 50])).is_err());
    }

    #[test]
    fn rmse_matches_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_image(&mut rng, 1000);
        let b = random_image(&mut rng, 1000);
        let mask: Vec<bool> = (0..1000).map(|_| rng.gen_bool(0.4)).collect();
        let diffs: Vec<f64> = (0..1000).filter(|&i| mask[i]).map(|i| a[i] as f64 - b[i] as f64).collect();
        let mean_sq = diffs.iter().map(|d| d * d).sum::<f64>() / diffs.len() as f64;
        let got = rmse(&a, &b, Some(&mask)).unwrap();
        assert!((got - mean_sq.sqrt()).abs() < 1e-10);
    }

    #[test]
    fn dilation_grows_a_single_voxel_into_a_cube() {
        let grid = Grid::centered(11, 11, 5, [1.0; 3]);
        let mut mask = vec![false; grid.len()];
        mask[2 * 121 + 5 * 11 + 5] = true;
        let d = dilate(&mask, &grid, 2).unwrap();
        assert_eq!(d.iter().filter(|&&v| v).count(), 5 * 5 * 5);
        let d = dilate(&mask, &grid, 5).unwrap();
        assert_eq!(d.iter().filter(|&&v| v).count(), 11 * 11 * 5);
        assert_eq!(dilate(&mask, &grid, 0).unwrap(), mask);
    }

    #[test]
    fn ssim_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = random_image(&mut rng, 32 * 32);
        let b = random_image(&mut rng, 32 * 32);
        let p = SsimParams::default();
        assert!((ssim(&a, &a, 32, 1.0, &p).unwrap() - 1.0).abs() < 1e-12);
        let ab = ssim(&a, &b, 32, 1.0, &p).unwrap();
        let ba = ssim(&b, &a, 32, 1.0, &p).unwrap();
        assert!((ab - ba).abs() < 1e-12);
        assert!(ab < 0.5);
        assert!(ssim(&a, &b[..1000], 32, 1.0, &p).is_err());
        assert!(ssim(&a, &b, 32, 0.0, &p).is_err());
    }

    #[test]
    fn ssim_matches_per_window_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = SsimParams::default();
        for _ in 0..5 {
            let a = random_image(&mut rng, 32 * 32);
            let b: Vec<f32> = a.iter().map(|v| 0.7 * v + rng.gen_range(-0.2..0.2f32)).collect();
            let range = data_range(&a);
            let fast = ssim(&a, &b, 32, range, &p).unwrap();
            let slow = naive_ssim(&a, &b, 32, range, &p);
            assert!((fast - slow).abs() < 1e-9, "{fast} vs {slow}");
        }
    }

    #[test]
    fn artifact_suppression_examples() {
        assert_eq!(artifact_suppression(3.0, 3.0).unwrap(), 0.0);
        assert_eq!(artifact_suppression(3.0, 0.0).unwrap(), 100.0);
        assert!((artifact_suppression(10.0, 1.0).unwrap() - 90.0).abs() < 1e-12);
        assert!(artifact_suppression(1.0, 2.0).unwrap() < 0.0);
        assert!(artifact_suppression(0.0, 1.0).is_err());
    }

    proptest! {
        #[test]
        fn ssim_is_bounded_and_symmetric(seed in 0u64..1000, scale in 0.1f32..3.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_image(&mut rng, 16 * 12);
            let b: Vec<f32> = random_image(&mut rng, 16 * 12).iter().map(|v| v * scale - 0.5).collect();
            let p = SsimParams::default();
            let ab = ssim(&a, &b, 16, 1.0, &p).unwrap();
            let ba = ssim(&b, &a, 16, 1.0, &p).unwrap();
            prop_assert!((-1.0..=1.0).contains(&ab));
            prop_assert!((ab - ba).abs() < 1e-12);
        }

        #[test]
        fn rmse_of_constant_offset_is_the_offset(c in -5.0f32..5.0) {
            let a: Vec<f32> = (0..64).map(|i| i as f32 * 0.1).collect();
            let b: Vec<f32> = a.iter().map(|v| v + c).collect();
            prop_assert!((rmse(&a, &b, None).unwrap() - c.abs() as f64).abs() < 1e-5);
        }
    }
}
