//! Paired low-light / normal-light datasets.
//!
//! Canonical layout: `<root>/<split>/low/*` and `<root>/<split>/high/*`, paired
//! by filename stem. PNG is the primary format; JPEG is accepted.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageReader};
use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{IamlError, Result};
use crate::tensor::Tensor;

const EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PairRecord {
    pub low_path: PathBuf,
    pub clean_path: PathBuf,
    pub pair_id: String,
}

/// Result of scanning one split, including files that found no partner.
#[derive(Clone, Debug, Default)]
pub struct SplitScan {
    pub pairs: Vec<PairRecord>,
    pub unmatched: Vec<PathBuf>,
}

fn list_images(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    if !dir.is_dir() {
        return Err(IamlError::MissingDirectory(dir.to_path_buf()));
    }
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir)? {
        let path = entry?.path();
        let ext_ok = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
            .unwrap_or(false);
        if !path.is_file() || !ext_ok {
            continue;
        }
        if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
            out.insert(stem.to_string(), path);
        }
    }
    Ok(out)
}

pub fn scan_split(root: &Path, split: &str) -> Result<SplitScan> {
    let base = root.join(split);
    let low = list_images(&base.join("low"))?;
    let high = list_images(&base.join("high"))?;
    let mut scan = SplitScan::default();
    for (stem, low_path) in &low {
        match high.get(stem) {
            Some(clean_path) => {
                let ld = dimensions(low_path)?;
                let cd = dimensions(clean_path)?;
                if ld != cd {
                    return Err(IamlError::DimensionMismatch {
                        pair_id: stem.clone(),
                        low: ld,
                        clean: cd,
                    });
                }
                scan.pairs.push(PairRecord {
                    low_path: low_path.clone(),
                    clean_path: clean_path.clone(),
                    pair_id: stem.clone(),
                });
            }
            None => scan.unmatched.push(low_path.clone()),
        }
    }
    scan.unmatched.extend(
        high.iter()
            .filter(|(stem, _)| !low.contains_key(*stem))
            .map(|(_, p)| p.clone()),
    );
    Ok(scan)
}

/// Pairs of a split, sorted by `pair_id`. Unmatched files are logged and skipped.
pub fn discover_pairs(root: &Path, split: &str) -> Result<Vec<PairRecord>> {
    let scan = scan_split(root, split)?;
    for p in &scan.unmatched {
        warn!("unpaired image ignored: {}", p.display());
    }
    if scan.pairs.is_empty() {
        return Err(IamlError::EmptySplit {
            root: root.to_path_buf(),
            split: split.to_string(),
        });
    }
    Ok(scan.pairs)
}

fn dimensions(path: &Path) -> Result<(u32, u32)> {
    image::image_dimensions(path).map_err(|e| IamlError::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

/// Decodes an 8- or 16-bit RGB raster into a `1 × 3 × H × W` tensor in `[0, 1]`.
/// Alpha is dropped with a warning; grayscale is rejected.
pub fn load_image(path: &Path) -> Result<Tensor> {
    let decode_err = |e: image::ImageError| IamlError::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let img = ImageReader::open(path)?
        .with_guessed_format()?
        .decode()
        .map_err(decode_err)?;
    match &img {
        DynamicImage::ImageRgb8(_) | DynamicImage::ImageRgb16(_) => {}
        DynamicImage::ImageRgba8(_) | DynamicImage::ImageRgba16(_) => {
            warn!("dropping alpha channel of {}", path.display());
        }
        DynamicImage::ImageLuma8(_)
        | DynamicImage::ImageLuma16(_)
        | DynamicImage::ImageLumaA8(_)
        | DynamicImage::ImageLumaA16(_) => return Err(IamlError::NonRgb(path.to_path_buf())),
        other => {
            return Err(IamlError::Decode {
                path: path.to_path_buf(),
                reason: format!("unsupported pixel format {:?}", other.color()),
            })
        }
    }
    let sixteen = matches!(
        img,
        DynamicImage::ImageRgb16(_) | DynamicImage::ImageRgba16(_)
    );
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    if sixteen {
        let rgb = img.to_rgb16();
        for (i, px) in rgb.pixels().enumerate() {
            for c in 0..3 {
                data[c * h * w + i] = f64::from(px[c]) / 65535.0;
            }
        }
    } else {
        let rgb = img.to_rgb8();
        for (i, px) in rgb.pixels().enumerate() {
            for c in 0..3 {
                data[c * h * w + i] = f64::from(px[c]) / 255.0;
            }
        }
    }
    Tensor::new(vec![1, 3, h, w], data)
}

/// Writes the first image of a batch as an 8-bit RGB PNG (or JPEG, by extension).
pub fn save_image(path: &Path, image: &Tensor) -> Result<()> {
    let (_, c, h, w) = image.dims4();
    if c != 3 {
        return Err(IamlError::ChannelCount(c));
    }
    let d = image.data();
    let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([0, 1, 2].map(|ch| (d[ch * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8))
    });
    buf.save(path).map_err(|e| IamlError::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn check_same(low: &Tensor, clean: &Tensor) -> Result<()> {
    low.ensure_same_shape(clean)
}

/// Same `size × size` window cut from both images.
pub fn random_crop_pair(
    low: &Tensor,
    clean: &Tensor,
    size: usize,
    rng: &mut impl Rng,
) -> Result<(Tensor, Tensor)> {
    check_same(low, clean)?;
    let (_, _, h, w) = low.dims4();
    if size > h || size > w || size == 0 {
        return Err(IamlError::CropTooLarge {
            size,
            height: h,
            width: w,
        });
    }
    let y0 = rng.gen_range(0..=h - size);
    let x0 = rng.gen_range(0..=w - size);
    Ok((low.crop(y0, x0, size, size), clean.crop(y0, x0, size, size)))
}

/// Independent 50% horizontal and vertical flips, applied identically to both images.
pub fn flip_augment(low: &Tensor, clean: &Tensor, rng: &mut impl Rng) -> Result<(Tensor, Tensor)> {
    check_same(low, clean)?;
    let horizontal = rng.gen_bool(0.5);
    let vertical = rng.gen_bool(0.5);
    let mut out = (low.clone(), clean.clone());
    if horizontal {
        out = (out.0.flip_horizontal(), out.1.flip_horizontal());
    }
    if vertical {
        out = (out.0.flip_vertical(), out.1.flip_vertical());
    }
    Ok(out)
}

/// Deterministic RNG stream for a tuple of indices (seed, epoch, sample, ...).
pub fn derived_rng(seed: u64, path: &[u64]) -> ChaCha8Rng {
    let mut h = seed ^ 0x9E37_79B9_7F4A_7C15;
    for &p in path {
        h = splitmix(h ^ splitmix(p.wrapping_add(0xA076_1D64_78BD_642F)));
    }
    ChaCha8Rng::seed_from_u64(h)
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Clone, Debug)]
pub struct LoadedPair {
    pub pair_id: String,
    pub low: Tensor,
    pub clean: Tensor,
}

/// Training pairs held in memory. Pairs smaller than `min_size` are skipped with a warning.
#[derive(Clone, Debug, Default)]
pub struct PairedDataset {
    pub pairs: Vec<LoadedPair>,
}

impl PairedDataset {
    pub fn load(records: &[PairRecord], min_size: usize) -> Result<Self> {
        let mut pairs = Vec::with_capacity(records.len());
        for r in records {
            let low = load_image(&r.low_path)?;
            let clean = load_image(&r.clean_path)?;
            let (_, _, h, w) = low.dims4();
            if h < min_size || w < min_size {
                warn!(
                    "skipping `{}`: {h}x{w} is smaller than crop {min_size}",
                    r.pair_id
                );
                continue;
            }
            pairs.push(LoadedPair {
                pair_id: r.pair_id.clone(),
                low,
                clean,
            });
        }
        Ok(Self { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Shuffled sample order for one epoch.
    pub fn epoch_order(&self, seed: u64, epoch: u64) -> Vec<usize> {
        use rand::seq::SliceRandom;
        let mut idx: Vec<usize> = (0..self.pairs.len()).collect();
        idx.shuffle(&mut derived_rng(seed, &[0, epoch]));
        idx
    }

    /// Cropped and flipped training sample. The RNG depends only on
    /// `(seed, epoch, position)`, so any sample can be regenerated in isolation.
    pub fn augmented(
        &self,
        index: usize,
        crop: usize,
        seed: u64,
        epoch: u64,
        position: u64,
    ) -> Result<(Tensor, Tensor)> {
        let p = &self.pairs[index];
        let mut rng = derived_rng(seed, &[1, epoch, position]);
        let (l, c) = random_crop_pair(&p.low, &p.clean, crop, &mut rng)?;
        flip_augment(&l, &c, &mut rng)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    fn ramp(h: usize, w: usize) -> Tensor {
        Tensor::from_fn(&[1, 3, h, w], |i| i as f64)
    }

    #[test]
    fn crop_identity_when_size_matches() {
        let t = ramp(8, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (a, b) = random_crop_pair(&t, &t, 8, &mut rng).unwrap();
        assert_eq!(a, t);
        assert_eq!(b, t);
    }

    #[test]
    fn crop_too_large() {
        let t = ramp(8, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            random_crop_pair(&t, &t, 9, &mut rng),
            Err(IamlError::CropTooLarge { .. })
        ));
    }

    #[test]
    fn crop_offsets_within_bounds() {
        let t = Tensor::from_fn(&[1, 1, 400, 600], |i| i as f64);
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (c, _) = random_crop_pair(&t, &t, 256, &mut rng).unwrap();
            assert_eq!(c.shape(), &[1, 1, 256, 256]);
            let first = c.data()[0] as usize;
            let (y0, x0) = (first / 600, first % 600);
            assert!(y0 <= 144 && x0 <= 344);
        }
    }

    #[test]
    fn crop_is_seeded() {
        let t = ramp(20, 30);
        let a = random_crop_pair(&t, &t, 7, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        let b = random_crop_pair(&t, &t, 7, &mut ChaCha8Rng::seed_from_u64(42)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn flips_are_seeded_and_cover_identity() {
        let t = ramp(4, 6);
        let mut saw_identity = false;
        for seed in 0..16 {
            let a = flip_augment(&t, &t, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let b = flip_augment(&t, &t, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            assert_eq!(a, b);
            saw_identity |= a.0 == t;
        }
        assert!(saw_identity);
    }

    #[test]
    fn derived_streams_differ() {
        let a: u64 = derived_rng(1, &[0, 3]).gen();
        let b: u64 = derived_rng(1, &[0, 4]).gen();
        let c: u64 = derived_rng(1, &[0, 3]).gen();
        assert_ne!(a, b);
        assert_eq!(a, c);
    }

    proptest! {
        #[test]
        fn augmentation_keeps_pairs_aligned(seed in 0u64..10_000, h in 4usize..12, w in 4usize..12, size in 1usize..4) {
            let low = Tensor::from_fn(&[1, 3, h, w], |i| (i * 7 % 13) as f64 / 13.0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (l, c) = random_crop_pair(&low, &low, size, &mut rng).unwrap();
            let (l, c) = flip_augment(&l, &c, &mut rng).unwrap();
            prop_assert_eq!(&l, &c);
            let mut before: Vec<_> = low.data().to_vec();
            before.sort_by(f64::total_cmp);
            before.dedup();
            prop_assert!(l.data().iter().all(|v| before.binary_search_by(|p| p.total_cmp(v)).is_ok()));
        }
    }
}
