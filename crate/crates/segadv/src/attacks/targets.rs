//! Target-mask construction for targeted attacks.

use crate::segnet::ScoreVolume;
use crate::types::LabelMask;

use super::AttackError;

/// Per-pixel argmin of the class probabilities; ties go to the smallest
/// class index.
pub fn least_likely_targets(scores: &ScoreVolume) -> LabelMask {
    let shape = scores.probs.shape();
    let (h, w, n) = (shape[0], shape[1], shape[2]);
    let mut classes = vec![0u8; h * w];
    for p in 0..h * w {
        let row = &scores.probs.data()[p * n..(p + 1) * n];
        let mut best = 0usize;
        for (s, &v) in row.iter().enumerate().skip(1) {
            if v < row[best] {
                best = s;
            }
        }
        classes[p] = best as u8;
    }
    LabelMask::new(h, w, classes)
}

/// Replace every pixel of `objective_class` by the class of its
/// Euclidean-nearest donor pixel (a pixel of any other class). Equidistant
/// donors resolve to the smallest row-major linear index.
pub fn build_dnnm_target(mask: &LabelMask, objective_class: u8) -> Result<LabelMask, AttackError> {
    let (h, w) = (mask.height, mask.width);
    let has_donor = mask.classes().iter().any(|&c| c != objective_class);
    let has_objective = mask.classes().iter().any(|&c| c == objective_class);
    if !has_objective {
        return Ok(mask.clone());
    }
    if !has_donor {
        return Err(AttackError::NoDonorClass(objective_class));
    }
    let mut out = mask.clone();
    for y in 0..h {
        for x in 0..w {
            if mask.get(y, x) != objective_class {
                continue;
            }
            out.set(y, x, nearest_donor(mask, objective_class, y, x));
        }
    }
    Ok(out)
}

/// Exact nearest-donor search by expanding Chebyshev rings. Once any donor
/// is found at ring radius rho, only rings up to ceil(best Euclidean
/// distance) can still improve, so the scan terminates early.
fn nearest_donor(mask: &LabelMask, objective: u8, y: usize, x: usize) -> u8 {
    let (h, w) = (mask.height as isize, mask.width as isize);
    let (yi, xi) = (y as isize, x as isize);
    let max_rho = (h.max(w)) as usize;
    let mut best_d2 = u64::MAX;
    let mut best_idx = usize::MAX;
    let mut best_class = 0u8;
    let consider = |yy: isize, xx: isize, best_d2: &mut u64, best_idx: &mut usize, best_class: &mut u8| {
        if yy < 0 || yy >= h || xx < 0 || xx >= w {
            return;
        }
        let c = mask.get(yy as usize, xx as usize);
        if c == objective {
            return;
        }
        let dy = (yy - yi) as i64;
        let dx = (xx - xi) as i64;
        let d2 = (dy * dy + dx * dx) as u64;
        let idx = yy as usize * mask.width + xx as usize;
        if d2 < *best_d2 || (d2 == *best_d2 && idx < *best_idx) {
            *best_d2 = d2;
            *best_idx = idx;
            *best_class = c;
        }
    };
    for rho in 1..=max_rho {
        if best_d2 != u64::MAX {
            // a ring at Chebyshev radius rho cannot beat best_d2 if rho^2 > best_d2
            let rho2 = (rho as u64) * (rho as u64);
            if rho2 > best_d2 {
                break;
            }
        }
        let r = rho as isize;
        for xx in (xi - r)..=(xi + r) {
            consider(yi - r, xx, &mut best_d2, &mut best_idx, &mut best_class);
            consider(yi + r, xx, &mut best_d2, &mut best_idx, &mut best_class);
        }
        for yy in (yi - r + 1)..(yi + r) {
            consider(yy, xi - r, &mut best_d2, &mut best_idx, &mut best_class);
            consider(yy, xi + r, &mut best_d2, &mut best_idx, &mut best_class);
        }
    }
    debug_assert_ne!(best_idx, usize::MAX);
    best_class
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::segnet::ScoreVolume;
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn volume(h: usize, w: usize, n: usize, logits: Vec<f64>) -> ScoreVolume {
        let logits = Tensor::new(vec![h, w, n], logits);
        // softmax preserves order; reuse the public constructor path
        let mut probs = vec![0.0; h * w * n];
        for p in 0..h * w {
            let row = &logits.data()[p * n..(p + 1) * n];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            for s in 0..n {
                probs[p * n + s] = (row[s] - m).exp() / z;
            }
        }
        ScoreVolume { probs: Tensor::new(vec![h, w, n], probs), logits }
    }

    #[test]
    fn least_likely_is_argmin_with_tie_rule() {
        let v = volume(1, 2, 3, vec![2.0, 0.5, 0.1, 0.0, 0.0, 0.0]);
        let m = least_likely_targets(&v);
        assert_eq!(m.get(0, 0), 2);
        assert_eq!(m.get(0, 1), 0); // uniform -> class 0
    }

    #[test]
    fn least_likely_matches_brute_force_argmin() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (h, w, n) = (4, 5, 6);
        let logits: Vec<f64> = (0..h * w * n).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let v = volume(h, w, n, logits);
        let m = least_likely_targets(&v);
        for p in 0..h * w {
            let row = &v.probs.data()[p * n..(p + 1) * n];
            let mut best = 0;
            for s in 1..n {
                if row[s] < row[best] {
                    best = s;
                }
            }
            assert_eq!(m.classes()[p] as usize, best);
        }
    }

    #[test]
    fn mask_without_objective_is_unchanged() {
        let m = LabelMask::new(2, 2, vec![1, 2, 1, 2]);
        assert_eq!(build_dnnm_target(&m, 0).unwrap(), m);
    }

    #[test]
    fn single_objective_pixel_takes_unique_neighbor() {
        let m = LabelMask::new(2, 2, vec![1, 1, 1, 0]);
        let t = build_dnnm_target(&m, 0).unwrap();
        assert_eq!(t.classes(), &[1, 1, 1, 1]);
    }

    #[test]
    fn all_objective_rejected() {
        let m = LabelMask::filled(3, 3, 5);
        assert!(matches!(build_dnnm_target(&m, 5), Err(AttackError::NoDonorClass(5))));
    }

    /// Brute-force oracle: scan every donor pixel in row-major order,
    /// keeping the strictly closer one (ties keep the earlier index).
    pub(crate) fn dnnm_oracle(mask: &LabelMask, objective: u8) -> Option<LabelMask> {
        if mask.classes().iter().all(|&c| c == objective) {
            return None;
        }
        let (h, w) = (mask.height, mask.width);
        let mut out = mask.clone();
        for y in 0..h {
            for x in 0..w {
                if mask.get(y, x) != objective {
                    continue;
                }
                let mut best_d2 = u64::MAX;
                let mut best_class = 0u8;
                for yy in 0..h {
                    for xx in 0..w {
                        let c = mask.get(yy, xx);
                        if c == objective {
                            continue;
                        }
                        let dy = yy as i64 - y as i64;
                        let dx = xx as i64 - x as i64;
                        let d2 = (dy * dy + dx * dx) as u64;
                        if d2 < best_d2 {
                            best_d2 = d2;
                            best_class = c;
                        }
                    }
                }
                out.set(y, x, best_class);
            }
        }
        Some(out)
    }

    #[test]
    fn ring_search_matches_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for trial in 0..300 {
            let h = rng.gen_range(1..=8);
            let w = rng.gen_range(1..=8);
            let n_classes = rng.gen_range(2..=4u8);
            let classes: Vec<u8> = (0..h * w).map(|_| rng.gen_range(0..n_classes)).collect();
            let mask = LabelMask::new(h, w, classes);
            let objective = rng.gen_range(0..n_classes);
            match dnnm_oracle(&mask, objective) {
                Some(expected) => {
                    let got = build_dnnm_target(&mask, objective).unwrap();
                    assert_eq!(got, expected, "trial {trial}");
                    assert!(got.classes().iter().all(|&c| c != objective));
                }
                None => assert!(build_dnnm_target(&mask, objective).is_err()),
            }
        }
    }

    #[test]
    fn equidistant_donors_pick_smallest_linear_index() {
        // pixel (1,1) is objective 0; donors at (0,1) class 2 and (1,0) class 3
        // are both at distance 1; (0,1) has the smaller row-major index.
        let m = LabelMask::new(3, 3, vec![0, 2, 0, 3, 0, 0, 0, 0, 0]);
        let t = build_dnnm_target(&m, 0).unwrap();
        assert_eq!(t.get(1, 1), 2);
    }
}
