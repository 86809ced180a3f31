//! Non-local means denoising with a windowed search region.

use rayon::prelude::*;

use crate::types::{clip_quantize_value, Image};

use super::DefenseError;

/// Degree-of-filtering selection: an explicit value or the 2.15 * sigma rule
/// driven by the noise estimate of the input.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FilteringH {
    Fixed(f64),
    Auto,
}

#[derive(Clone, Copy, Debug)]
pub struct NlmConfig {
    pub patch_size: usize,
    pub window_size: usize,
    /// Std of the Gaussian kernel weighting the patch distance.
    pub gaussian_a: f64,
    pub filtering_h: FilteringH,
}

impl Default for NlmConfig {
    fn default() -> Self {
        NlmConfig { patch_size: 7, window_size: 9, gaussian_a: 1.0, filtering_h: FilteringH::Auto }
    }
}

impl NlmConfig {
    pub fn validate(&self) -> Result<(), DefenseError> {
        if self.patch_size % 2 == 0 || self.window_size % 2 == 0 {
            return Err(DefenseError::Config("patch and window sizes must be odd".into()));
        }
        if self.patch_size >= self.window_size {
            return Err(DefenseError::Config("patch size must be smaller than the window".into()));
        }
        if self.gaussian_a <= 0.0 {
            return Err(DefenseError::Config("gaussian std a must be positive".into()));
        }
        if let FilteringH::Fixed(h) = self.filtering_h {
            if h < 0.0 || !h.is_finite() {
                return Err(DefenseError::Config("filtering h must be non-negative".into()));
            }
        }
        Ok(())
    }
}

/// Mirror-reflected index into [0, len): ... 2 1 | 0 1 2 ... n-1 | n-2 n-3 ...
fn mirror(i: isize, len: usize) -> usize {
    let n = len as isize;
    let mut v = i;
    loop {
        if v < 0 {
            v = -v;
        } else if v >= n {
            v = 2 * n - 2 - v;
        } else {
            return v as usize;
        }
    }
}

/// Robust Gaussian-noise std estimate: per channel, the median absolute
/// deviation of the 3x3 Laplacian response, rescaled by the Laplacian's
/// noise gain sqrt(20) and the normal-MAD constant 0.6745; channels averaged.
pub fn estimate_sigma(image: &Image) -> Result<f64, DefenseError> {
    if image.height < 3 || image.width < 3 {
        return Err(DefenseError::Data("image must be at least 3x3".into()));
    }
    let (h, w, c) = (image.height, image.width, image.channels);
    let px = |y: usize, x: usize, ch: usize| image.data()[(y * w + x) * c + ch] as f64;
    let mut total = 0.0;
    for ch in 0..c {
        let mut responses = Vec::with_capacity((h - 2) * (w - 2));
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                responses.push(
                    px(y - 1, x, ch) + px(y + 1, x, ch) + px(y, x - 1, ch) + px(y, x + 1, ch)
                        - 4.0 * px(y, x, ch),
                );
            }
        }
        let med = median(&mut responses.clone());
        let mut devs: Vec<f64> = responses.iter().map(|r| (r - med).abs()).collect();
        let mad = median(&mut devs);
        total += mad / (0.6745 * 20f64.sqrt());
    }
    Ok(total / c as f64)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

pub fn nlm_denoise(image: &Image, cfg: &NlmConfig) -> Result<Image, DefenseError> {
    Ok(nlm_denoise_instrumented(image, cfg)?.0)
}

/// Like [`nlm_denoise`] but also returns the per-pixel sum of the applied
/// (normalized) weights, which must be 1 for every pixel.
pub fn nlm_denoise_instrumented(
    image: &Image,
    cfg: &NlmConfig,
) -> Result<(Image, Vec<f64>), DefenseError> {
    cfg.validate()?;
    let (h, w, c) = (image.height, image.width, image.channels);
    if h <= cfg.window_size || w <= cfg.window_size {
        return Err(DefenseError::Data("image must be larger than the search window".into()));
    }
    let filtering_h = match cfg.filtering_h {
        FilteringH::Fixed(v) => v,
        FilteringH::Auto => 2.15 * estimate_sigma(image)?,
    };
    if filtering_h == 0.0 {
        // zero degree of filtering: documented identity passthrough
        return Ok((image.clone(), vec![1.0; h * w]));
    }

    let p = cfg.patch_size as isize / 2;
    let r = cfg.window_size as isize / 2;
    // Gaussian spatial kernel over patch offsets, normalized to sum 1
    let mut kernel = Vec::with_capacity((cfg.patch_size * cfg.patch_size) as usize);
    for dy in -p..=p {
        let dy = dy as f64;
        for dx in -p..=p {
            let dx = dx as f64;
            kernel.push((-(dy * dy + dx * dx) / (2.0 * cfg.gaussian_a * cfg.gaussian_a)).exp());
        }
    }
    let ksum: f64 = kernel.iter().sum();
    for k in &mut kernel {
        *k /= ksum;
    }

    let data = image.data();
    let px = move |y: isize, x: isize, ch: usize| -> f64 {
        data[(mirror(y, h) * w + mirror(x, w)) * c + ch] as f64
    };
    let h2 = filtering_h * filtering_h;

    let rows: Vec<(Vec<u8>, Vec<f64>)> = (0..h)
        .into_par_iter()
        .map(|y| {
            let y = y as isize;
            let mut out_row = vec![0u8; w * c];
            let mut sums_row = vec![0.0; w];
            for x in 0..w as isize {
                let mut weights = Vec::with_capacity((cfg.window_size * cfg.window_size) as usize);
                let mut alpha = 0.0;
                for wy in y - r..=y + r {
                    for wx in x - r..=x + r {
                        let mut dist = 0.0;
                        let mut ki = 0;
                        for dy in -p..=p {
                            for dx in -p..=p {
                                let g = kernel[ki];
                                ki += 1;
                                for ch in 0..c {
                                    let d = px(y + dy, x + dx, ch) - px(wy + dy, wx + dx, ch);
                                    dist += g * d * d;
                                }
                            }
                        }
                        let wgt = (-dist / h2).exp();
                        alpha += wgt;
                        weights.push((wy, wx, wgt));
                    }
                }
                let mut applied = 0.0;
                let mut acc = vec![0.0; c];
                for (wy, wx, wgt) in weights {
                    let nw = wgt / alpha;
                    applied += nw;
                    for (ch, a) in acc.iter_mut().enumerate() {
                        *a += nw * px(wy, wx, ch);
                    }
                }
                for (ch, a) in acc.iter().enumerate() {
                    out_row[x as usize * c + ch] = clip_quantize_value(*a);
                }
                sums_row[x as usize] = applied;
            }
            (out_row, sums_row)
        })
        .collect();

    let mut out = Vec::with_capacity(h * w * c);
    let mut sums = Vec::with_capacity(h * w);
    for (row, srow) in rows {
        out.extend(row);
        sums.extend(srow);
    }
    Ok((Image::new(h, w, c, out), sums))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn smooth_image(h: usize, w: usize) -> Image {
        // horizontal ramp plus broad vertical bands: smooth, denoisable content
        let data: Vec<u8> = (0..h)
            .flat_map(|y| {
                (0..w).flat_map(move |x| {
                    let base = 40 + (x * 160 / w) as i32 + if y < h / 2 { 20 } else { 0 };
                    [base as u8, (base + 10) as u8, (base + 20) as u8]
                })
            })
            .collect();
        Image::new(h, w, 3, data)
    }

    fn add_noise(img: &Image, sigma: f64, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<u8> = img
            .data()
            .iter()
            .map(|&v| {
                // Box-Muller
                let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
                let u2: f64 = rng.gen();
                let n = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
                clip_quantize_value(v as f64 + sigma * n)
            })
            .collect();
        Image::new(img.height, img.width, 3, data)
    }

    fn psnr(a: &Image, b: &Image) -> f64 {
        let mse: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| {
                let d = x as f64 - y as f64;
                d * d
            })
            .sum::<f64>()
            / a.data().len() as f64;
        10.0 * (255.0 * 255.0 / mse).log10()
    }

    #[test]
    fn sigma_of_constant_image_is_zero() {
        let img = Image::new(8, 8, 3, vec![77; 8 * 8 * 3]);
        assert_eq!(estimate_sigma(&img).unwrap(), 0.0);
    }

    #[test]
    fn sigma_recovers_synthetic_noise_level() {
        let clean = smooth_image(32, 48);
        let mut mean = 0.0;
        for seed in 0..20 {
            mean += estimate_sigma(&add_noise(&clean, 10.0, seed)).unwrap();
        }
        mean /= 20.0;
        assert!((8.0..=12.0).contains(&mean), "mean estimate {mean}");
    }

    #[test]
    fn sigma_invariant_to_constant_offset() {
        let clean = smooth_image(16, 16);
        let shifted = Image::new(
            16,
            16,
            3,
            clean.data().iter().map(|&v| v + 20).collect(), // stays below 255
        );
        let a = estimate_sigma(&clean).unwrap();
        let b = estimate_sigma(&shifted).unwrap();
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn constant_image_is_fixed_point() {
        let img = Image::new(12, 14, 3, vec![90; 12 * 14 * 3]);
        let cfg = NlmConfig { filtering_h: FilteringH::Fixed(5.0), ..NlmConfig::default() };
        assert_eq!(nlm_denoise(&img, &cfg).unwrap(), img);
    }

    #[test]
    fn weights_sum_to_one() {
        let img = add_noise(&smooth_image(12, 16), 10.0, 3);
        let cfg = NlmConfig { filtering_h: FilteringH::Fixed(20.0), ..NlmConfig::default() };
        let (_, sums) = nlm_denoise_instrumented(&img, &cfg).unwrap();
        assert!(sums.iter().all(|s| (s - 1.0).abs() <= 1e-9));
    }

    #[test]
    fn zero_h_is_identity() {
        let img = add_noise(&smooth_image(12, 16), 10.0, 4);
        let cfg = NlmConfig { filtering_h: FilteringH::Fixed(0.0), ..NlmConfig::default() };
        assert_eq!(nlm_denoise(&img, &cfg).unwrap(), img);
        // auto rule on a constant image resolves h = 0
        let flat = Image::new(12, 16, 3, vec![50; 12 * 16 * 3]);
        let auto = NlmConfig::default();
        assert_eq!(nlm_denoise(&flat, &auto).unwrap(), flat);
    }

    #[test]
    fn denoising_improves_psnr_by_2db() {
        let clean = smooth_image(24, 32);
        let noisy = add_noise(&clean, 10.0, 7);
        let denoised = nlm_denoise(&noisy, &NlmConfig::default()).unwrap();
        let before = psnr(&noisy, &clean);
        let after = psnr(&denoised, &clean);
        assert!(after >= before + 2.0, "psnr {before:.2} -> {after:.2}");
    }

    #[test]
    fn output_is_windowed_convex_combination() {
        let img = add_noise(&smooth_image(16, 20), 25.0, 9);
        let cfg = NlmConfig { filtering_h: FilteringH::Fixed(15.0), ..NlmConfig::default() };
        let out = nlm_denoise(&img, &cfg).unwrap();
        let (h, w, c) = (img.height, img.width, img.channels);
        let r = cfg.window_size as isize / 2;
        for y in 0..h as isize {
            for x in 0..w as isize {
                for ch in 0..c {
                    let mut lo = u8::MAX;
                    let mut hi = u8::MIN;
                    for wy in y - r..=y + r {
                        for wx in x - r..=x + r {
                            let v = img.data()[(mirror(wy, h) * w + mirror(wx, w)) * c + ch];
                            lo = lo.min(v);
                            hi = hi.max(v);
                        }
                    }
                    let o = out.data()[(y as usize * w + x as usize) * c + ch] as f64;
                    assert!(o >= lo as f64 - 0.5 && o <= hi as f64 + 0.5);
                }
            }
        }
    }

    #[test]
    fn config_validation() {
        let bad = NlmConfig { patch_size: 6, ..NlmConfig::default() };
        assert!(bad.validate().is_err());
        let bad = NlmConfig { patch_size: 9, window_size: 9, ..NlmConfig::default() };
        assert!(bad.validate().is_err());
        let bad = NlmConfig { gaussian_a: 0.0, ..NlmConfig::default() };
        assert!(bad.validate().is_err());
        let bad = NlmConfig { filtering_h: FilteringH::Fixed(-1.0), ..NlmConfig::default() };
        assert!(bad.validate().is_err());
        let img = Image::new(8, 8, 3, vec![0; 8 * 8 * 3]);
        assert!(nlm_denoise(&img, &NlmConfig::default()).is_err()); // not larger than window
    }

    #[test]
    fn mirror_indexing() {
        assert_eq!(mirror(-1, 5), 1);
        assert_eq!(mirror(-2, 5), 2);
        assert_eq!(mirror(5, 5), 3);
        assert_eq!(mirror(6, 5), 2);
        assert_eq!(mirror(3, 5), 3);
    }
}
