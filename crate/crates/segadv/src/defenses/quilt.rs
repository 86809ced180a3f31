//! Image quilting: every tile replaced by its nearest neighbor from a
//! database of clean-image patches.

use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::types::Image;

use super::DefenseError;

const MAGIC: &[u8; 8] = b"SEGADVPD";

/// Immutable set of integer-gray patches sampled from clean images.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchDatabase {
    pub patch_h: usize,
    pub patch_w: usize,
    pub channels: usize,
    patches: Vec<u8>, // concatenated row-major patch pixels
}

impl PatchDatabase {
    fn patch_len(&self) -> usize {
        self.patch_h * self.patch_w * self.channels
    }

    pub fn count(&self) -> usize {
        self.patches.len() / self.patch_len()
    }

    pub fn patch(&self, i: usize) -> &[u8] {
        let len = self.patch_len();
        &self.patches[i * len..(i + 1) * len]
    }

    pub fn save(&self, path: &Path) -> Result<(), DefenseError> {
        let mut f = File::create(path)?;
        f.write_all(MAGIC)?;
        for d in [self.patch_h, self.patch_w, self.channels, self.count()] {
            f.write_all(&(d as u32).to_le_bytes())?;
        }
        f.write_all(&self.patches)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<PatchDatabase, DefenseError> {
        let mut f = File::open(path)?;
        let mut magic = [0u8; 8];
        f.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(DefenseError::Format("bad patch database magic".into()));
        }
        let mut dims = [0usize; 4];
        for d in &mut dims {
            let mut b = [0u8; 4];
            f.read_exact(&mut b)?;
            *d = u32::from_le_bytes(b) as usize;
        }
        let [patch_h, patch_w, channels, count] = dims;
        if patch_h == 0 || patch_w == 0 || channels == 0 || count == 0 {
            return Err(DefenseError::Format("degenerate patch database header".into()));
        }
        let mut patches = vec![0u8; patch_h * patch_w * channels * count];
        f.read_exact(&mut patches)?;
        Ok(PatchDatabase { patch_h, patch_w, channels, patches })
    }
}

/// Sample `target_count` patches at uniform-random positions of the given
/// clean images; deterministic per seed.
pub fn build_patch_db(
    images: &[Image],
    patch_h: usize,
    patch_w: usize,
    target_count: usize,
    seed: u64,
) -> Result<PatchDatabase, DefenseError> {
    if images.is_empty() {
        return Err(DefenseError::Data("no source images for the patch database".into()));
    }
    if target_count == 0 || patch_h == 0 || patch_w == 0 {
        return Err(DefenseError::Config("patch dims and count must be positive".into()));
    }
    let channels = images[0].channels;
    for img in images {
        if img.height < patch_h || img.width < patch_w {
            return Err(DefenseError::Data("source image smaller than the patch size".into()));
        }
        if img.channels != channels {
            return Err(DefenseError::Data("source images have mixed channel counts".into()));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut patches = Vec::with_capacity(target_count * patch_h * patch_w * channels);
    for _ in 0..target_count {
        let img = &images[rng.gen_range(0..images.len())];
        let y0 = rng.gen_range(0..=img.height - patch_h);
        let x0 = rng.gen_range(0..=img.width - patch_w);
        for y in y0..y0 + patch_h {
            let start = (y * img.width + x0) * channels;
            patches.extend_from_slice(&img.data()[start..start + patch_w * channels]);
        }
    }
    Ok(PatchDatabase { patch_h, patch_w, channels, patches })
}

/// Summed squared distance between a tile region and the top-left region of
/// a db patch, with early abort once `bound` is exceeded.
fn tile_distance(
    image: &Image,
    y0: usize,
    x0: usize,
    th: usize,
    tw: usize,
    db: &PatchDatabase,
    patch: &[u8],
    bound: u64,
) -> u64 {
    let c = db.channels;
    let mut d = 0u64;
    for y in 0..th {
        let img_row = (y0 + y) * image.width + x0;
        let pat_row = y * db.patch_w;
        for x in 0..tw {
            for ch in 0..c {
                let a = image.data()[(img_row + x) * c + ch] as i64;
                let b = patch[(pat_row + x) * c + ch] as i64;
                d += ((a - b) * (a - b)) as u64;
            }
        }
        if d >= bound {
            return d;
        }
    }
    d
}

/// Replace every non-overlapping patch-size tile by its nearest database
/// patch under summed squared RGB distance; ties go to the lowest db index.
/// Right/bottom remainder tiles are matched on their valid region only.
pub fn quilt(image: &Image, db: &PatchDatabase) -> Result<Image, DefenseError> {
    if db.count() == 0 {
        return Err(DefenseError::Data("empty patch database".into()));
    }
    if db.channels != image.channels {
        return Err(DefenseError::Data("database channel count mismatch".into()));
    }
    let (h, w, c) = (image.height, image.width, image.channels);
    let tiles_y = h.div_ceil(db.patch_h);
    let tiles_x = w.div_ceil(db.patch_w);

    let best: Vec<usize> = (0..tiles_y * tiles_x)
        .into_par_iter()
        .map(|t| {
            let (ty, tx) = (t / tiles_x, t % tiles_x);
            let y0 = ty * db.patch_h;
            let x0 = tx * db.patch_w;
            let th = db.patch_h.min(h - y0);
            let tw = db.patch_w.min(w - x0);
            let mut best_i = 0usize;
            let mut best_d = u64::MAX;
            for i in 0..db.count() {
                let d = tile_distance(image, y0, x0, th, tw, db, db.patch(i), best_d);
                if d < best_d {
                    best_d = d;
                    best_i = i;
                }
            }
            best_i
        })
        .collect();

    let mut out = vec![0u8; h * w * c];
    for (t, &i) in best.iter().enumerate() {
        let (ty, tx) = (t / tiles_x, t % tiles_x);
        let y0 = ty * db.patch_h;
        let x0 = tx * db.patch_w;
        let th = db.patch_h.min(h - y0);
        let tw = db.patch_w.min(w - x0);
        let patch = db.patch(i);
        for y in 0..th {
            let dst = ((y0 + y) * w + x0) * c;
            let src = y * db.patch_w * c;
            out[dst..dst + tw * c].copy_from_slice(&patch[src..src + tw * c]);
        }
    }
    Ok(Image::new(h, w, c, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(h, w, 3, (0..h * w * 3).map(|_| rng.gen()).collect())
    }

    #[test]
    fn db_has_requested_count_and_shape() {
        let img = random_image(16, 16, 1);
        let db = build_patch_db(&[img], 5, 5, 10, 0).unwrap();
        assert_eq!(db.count(), 10);
        assert_eq!(db.patch(9).len(), 5 * 5 * 3);
    }

    #[test]
    fn db_build_is_seed_deterministic() {
        let imgs = [random_image(20, 24, 2), random_image(20, 24, 3)];
        let a = build_patch_db(&imgs, 5, 5, 50, 7).unwrap();
        let b = build_patch_db(&imgs, 5, 5, 50, 7).unwrap();
        assert_eq!(a, b);
        let c = build_patch_db(&imgs, 5, 5, 50, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn db_rejects_bad_input() {
        assert!(build_patch_db(&[], 5, 5, 10, 0).is_err());
        let tiny = random_image(3, 3, 0);
        assert!(build_patch_db(&[tiny], 5, 5, 10, 0).is_err());
        let img = random_image(16, 16, 0);
        assert!(build_patch_db(&[img], 5, 5, 0, 0).is_err());
    }

    #[test]
    fn db_histogram_tracks_source_histogram() {
        // patches sampled uniformly should reproduce the source pixel
        // distribution; compare 8-bin histograms with a chi-squared statistic
        let img = random_image(32, 32, 5);
        let db = build_patch_db(&[img.clone()], 5, 5, 2000, 1).unwrap();
        let hist = |bytes: &[u8]| -> Vec<f64> {
            let mut h = vec![0.0; 8];
            for &b in bytes {
                h[b as usize / 32] += 1.0;
            }
            let total: f64 = h.iter().sum();
            h.into_iter().map(|v| v / total).collect()
        };
        let src = hist(img.data());
        let mut db_bytes = Vec::new();
        for i in 0..db.count() {
            db_bytes.extend_from_slice(db.patch(i));
        }
        let got = hist(&db_bytes);
        let chi2: f64 = src.iter().zip(&got).map(|(e, o)| (o - e) * (o - e) / e).sum();
        assert!(chi2 < 0.01, "chi2 {chi2}");
    }

    #[test]
    fn db_file_round_trip_is_bit_exact() {
        let img = random_image(16, 16, 9);
        let db = build_patch_db(&[img], 5, 5, 25, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.db");
        db.save(&path).unwrap();
        assert_eq!(PatchDatabase::load(&path).unwrap(), db);
    }

    #[test]
    fn db_load_rejects_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.db");
        std::fs::write(&path, b"NOTADB!!rest").unwrap();
        assert!(matches!(PatchDatabase::load(&path), Err(DefenseError::Format(_))));
    }

    #[test]
    fn own_tiles_reconstruct_the_image() {
        // 15x20 divides evenly into 5x5 tiles; a db of exactly those tiles
        // must reproduce the image through zero-distance self-matches
        let img = random_image(15, 20, 11);
        let mut patches = Vec::new();
        for ty in 0..3 {
            for tx in 0..4 {
                for y in 0..5 {
                    let start = ((ty * 5 + y) * 20 + tx * 5) * 3;
                    patches.extend_from_slice(&img.data()[start..start + 5 * 3]);
                }
            }
        }
        let db = PatchDatabase { patch_h: 5, patch_w: 5, channels: 3, patches };
        assert_eq!(quilt(&img, &db).unwrap(), img);
    }

    #[test]
    fn single_gray_patch_flattens_everything() {
        let img = random_image(17, 23, 12); // exercises remainder tiles too
        let db = PatchDatabase { patch_h: 5, patch_w: 5, channels: 3, patches: vec![99; 75] };
        let out = quilt(&img, &db).unwrap();
        assert!(out.data().iter().all(|&v| v == 99));
    }

    #[test]
    fn matches_exhaustive_oracle() {
        let img = random_image(16, 16, 13);
        let src = random_image(40, 40, 14);
        let db = build_patch_db(&[src], 5, 5, 100, 2).unwrap();
        let got = quilt(&img, &db).unwrap();
        // oracle: full scan without early abort, explicit tie rule
        let mut expect = vec![0u8; 16 * 16 * 3];
        let tiles_x = 16usize.div_ceil(5);
        for ty in 0..16usize.div_ceil(5) {
            for tx in 0..tiles_x {
                let (y0, x0) = (ty * 5, tx * 5);
                let (th, tw) = (5.min(16 - y0), 5.min(16 - x0));
                let mut best_i = 0;
                let mut best_d = u64::MAX;
                for i in 0..db.count() {
                    let mut d = 0u64;
                    for y in 0..th {
                        for x in 0..tw {
                            for ch in 0..3 {
                                let a = img.data()[((y0 + y) * 16 + x0 + x) * 3 + ch] as i64;
                                let b = db.patch(i)[(y * 5 + x) * 3 + ch] as i64;
                                d += ((a - b) * (a - b)) as u64;
                            }
                        }
                    }
                    if d < best_d {
                        best_d = d;
                        best_i = i;
                    }
                }
                for y in 0..th {
                    for x in 0..tw {
                        for ch in 0..3 {
                            expect[((y0 + y) * 16 + x0 + x) * 3 + ch] =
                                db.patch(best_i)[(y * 5 + x) * 3 + ch];
                        }
                    }
                }
            }
        }
        assert_eq!(got.data(), &expect[..]);
    }

    #[test]
    fn every_output_tile_comes_from_the_db() {
        let img = random_image(15, 15, 15);
        let src = random_image(30, 30, 16);
        let db = build_patch_db(&[src], 5, 5, 40, 4).unwrap();
        let out = quilt(&img, &db).unwrap();
        for ty in 0..3 {
            for tx in 0..3 {
                let mut tile = Vec::new();
                for y in 0..5 {
                    let start = ((ty * 5 + y) * 15 + tx * 5) * 3;
                    tile.extend_from_slice(&out.data()[start..start + 15]);
                }
                let found = (0..db.count()).any(|i| db.patch(i) == &tile[..]);
                assert!(found, "tile ({ty},{tx}) not in db");
            }
        }
    }
}
