//! Image corpora: synthetic generation with controllable detail, PPM
//! directories, the compressed-size complexity proxy and deterministic batching.

mod ppm;
mod synthetic;

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use flate2::write::DeflateEncoder;
use flate2::Compression;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::Tensor;
use crate::error::{Result, StatError};
use crate::io::write_csv_atomic;

pub use ppm::{decode_ppm, encode_ppm, read_ppm, write_ppm, RgbImage};
pub use synthetic::{SyntheticGenerator, NUM_DETAIL_LEVELS};

/// Deflate level used by [`complexity_proxy`].
pub const PROXY_DEFLATE_LEVEL: u32 = 9;

/// One image in CHW layout with values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub label: usize,
    pub detail_level: Option<u8>,
    pub pixels: Vec<f32>,
}

/// A set of equally sized RGB images.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub height: usize,
    pub width: usize,
    pub samples: Vec<Sample>,
}

/// `B x 3 x H x W` pixels in `[-1, 1]` with per-sample ids and labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    pub pixels: Tensor,
    pub ids: Vec<u64>,
    pub labels: Vec<usize>,
}

impl ImageBatch {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Byte count of the deflate-compressed interleaved RGB bytes of an image.
#[derive(Clone, Copy, Debug, PartialEq, PartialOrd)]
pub struct ComplexityScore(pub f64);

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> ImageBatch {
        let per = 3 * self.height * self.width;
        let mut data = Vec::with_capacity(indices.len() * per);
        let mut ids = Vec::with_capacity(indices.len());
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let s = &self.samples[i];
            data.extend_from_slice(&s.pixels);
            ids.push(s.id);
            labels.push(s.label);
        }
        ImageBatch {
            pixels: Tensor::new(vec![indices.len(), 3, self.height, self.width], data)
                .expect("batch shape"),
            ids,
            labels,
        }
    }

    /// Consecutive batches covering every sample once, in order.
    pub fn sequential_batches(&self, batch_size: usize) -> impl Iterator<Item = ImageBatch> + '_ {
        let idx: Vec<usize> = (0..self.len()).collect();
        let chunks: Vec<Vec<usize>> = idx
            .chunks(batch_size.max(1))
            .map(<[usize]>::to_vec)
            .collect();
        chunks.into_iter().map(move |c| self.batch(&c))
    }

    pub fn proxies(&self) -> Vec<ComplexityScore> {
        let (h, w) = (self.height, self.width);
        self.samples
            .par_iter()
            .map(|s| complexity_proxy(&s.pixels, h, w))
            .collect()
    }

    /// Keeps samples whose label is in `classes`.
    pub fn filter_classes(&self, classes: &[usize]) -> Dataset {
        Dataset {
            height: self.height,
            width: self.width,
            samples: self
                .samples
                .iter()
                .filter(|s| classes.contains(&s.label))
                .cloned()
                .collect(),
        }
    }

    /// Writes `<id>.ppm` per sample plus `manifest.csv`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| StatError::io(dir, e))?;
        self.samples.par_iter().try_for_each(|s| {
            write_ppm(
                &dir.join(format!("{:06}.ppm", s.id)),
                &to_rgb(&s.pixels, self.height, self.width),
            )
        })?;
        self.write_manifest(&dir.join("manifest.csv"))
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        let proxies = self.proxies();
        write_csv_atomic(path, |w| {
            w.write_record(["id", "label", "detail_level", "proxy_bytes"])?;
            for (s, p) in self.samples.iter().zip(&proxies) {
                let level = s.detail_level.map(|d| d.to_string()).unwrap_or_default();
                w.write_record([
                    s.id.to_string(),
                    s.label.to_string(),
                    level,
                    format!("{}", p.0),
                ])?;
            }
            Ok(())
        })
    }
}

/// Synthetic corpus of `n` images, samples `0..n` of the generator.
pub fn generate_synthetic(
    seed: u64,
    n: usize,
    size: usize,
    num_classes: usize,
    patch_size: usize,
) -> Result<Dataset> {
    generate_synthetic_range(seed, 0, n, size, num_classes, patch_size)
}

/// Samples `first..first + n` of the generator for `seed`.
pub fn generate_synthetic_range(
    seed: u64,
    first: u64,
    n: usize,
    size: usize,
    num_classes: usize,
    patch_size: usize,
) -> Result<Dataset> {
    if patch_size == 0 || size == 0 || size % patch_size != 0 {
        return Err(StatError::Geometry(format!(
            "image size {size} is not divisible by patch size {patch_size}"
        )));
    }
    if num_classes == 0 || n < num_classes {
        return Err(StatError::InvalidArgument(format!(
            "need n >= num_classes > 0, got n={n}, num_classes={num_classes}"
        )));
    }
    let generator = SyntheticGenerator::new(seed, size, num_classes);
    let samples = (first..first + n as u64)
        .into_par_iter()
        .map(|i| generator.sample(i))
        .collect();
    Ok(Dataset {
        height: size,
        width: size,
        samples,
    })
}

/// Maps `[-1, 1]` CHW floats to interleaved RGB bytes via `round((x + 1) * 127.5)`.
pub fn to_rgb(pixels: &[f32], height: usize, width: usize) -> RgbImage {
    let plane = height * width;
    let mut bytes = Vec::with_capacity(3 * plane);
    for i in 0..plane {
        for c in 0..3 {
            let x = pixels[c * plane + i];
            bytes.push(((x + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8);
        }
    }
    RgbImage {
        width,
        height,
        bytes,
    }
}

/// Inverse of [`to_rgb`] up to quantisation: `x / 127.5 - 1`.
pub fn from_rgb(img: &RgbImage) -> Vec<f32> {
    let plane = img.height * img.width;
    let mut out = vec![0.0; 3 * plane];
    for (i, px) in img.bytes.chunks(3).enumerate() {
        for c in 0..3 {
            out[c * plane + i] = px[c] as f32 / 127.5 - 1.0;
        }
    }
    out
}

/// Compressed size in bytes of the re-quantised image.
pub fn complexity_proxy(pixels: &[f32], height: usize, width: usize) -> ComplexityScore {
    let rgb = to_rgb(pixels, height, width);
    let mut enc = DeflateEncoder::new(Vec::new(), Compression::new(PROXY_DEFLATE_LEVEL));
    enc.write_all(&rgb.bytes).expect("in-memory write");
    ComplexityScore(enc.finish().expect("in-memory deflate").len() as f64)
}

/// Loads every `*.ppm` in `dir`, sorted by filename. Labels come from a
/// `manifest.csv` beside the images when present, otherwise 0.
pub fn load_ppm_dir(dir: &Path) -> Result<Dataset> {
    let entries = std::fs::read_dir(dir).map_err(|e| StatError::io(dir, e))?;
    let mut files = Vec::new();
    for e in entries {
        let e = e.map_err(|e| StatError::io(dir, e))?;
        let p = e.path();
        if p.extension().is_some_and(|x| x.eq_ignore_ascii_case("ppm")) {
            files.push(p);
        }
    }
    files.sort();
    if files.is_empty() {
        return Err(StatError::NoSamples(dir.to_path_buf()));
    }
    let manifest = read_manifest(&dir.join("manifest.csv"))?;
    let mut samples = Vec::with_capacity(files.len());
    let mut geometry = None;
    for (i, f) in files.iter().enumerate() {
        let img = read_ppm(f)?;
        match geometry {
            None => geometry = Some((img.height, img.width)),
            Some(g) if g != (img.height, img.width) => {
                return Err(StatError::Image {
                    path: f.clone(),
                    reason: format!(
                        "size {}x{} differs from {}x{}",
                        img.width, img.height, g.1, g.0
                    ),
                })
            }
            _ => {}
        }
        let stem_id = f
            .file_stem()
            .and_then(|s| s.to_str())
            .and_then(|s| s.parse::<u64>().ok());
        let id = stem_id.unwrap_or(i as u64);
        let (label, detail_level) = manifest.get(&id).copied().unwrap_or((0, None));
        samples.push(Sample {
            id,
            label,
            detail_level,
            pixels: from_rgb(&img),
        });
    }
    let (height, width) = geometry.expect("non-empty");
    Ok(Dataset {
        height,
        width,
        samples,
    })
}

fn read_manifest(path: &Path) -> Result<HashMap<u64, (usize, Option<u8>)>> {
    let mut out = HashMap::new();
    if !path.exists() {
        return Ok(out);
    }
    let mut r = csv::Reader::from_path(path)?;
    for rec in r.records() {
        let rec = rec?;
        let parse = |i: usize| rec.get(i).unwrap_or("").trim().to_string();
        let (Ok(id), Ok(label)) = (parse(0).parse::<u64>(), parse(1).parse::<usize>()) else {
            return Err(StatError::Config(format!(
                "malformed manifest row in {}",
                path.display()
            )));
        };
        out.insert(id, (label, parse(2).parse::<u8>().ok()));
    }
    Ok(out)
}

/// Shuffled batch order: batches are consecutive windows over the
/// concatenation of per-epoch permutations, so each epoch visits every
/// sample exactly once and the order depends only on the seed.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    n: usize,
    batch_size: usize,
    seed: u64,
    cache: HashMap<u64, Vec<usize>>,
}

impl BatchSampler {
    pub fn new(n: usize, batch_size: usize, seed: u64) -> Self {
        assert!(n > 0 && batch_size > 0, "empty sampler");
        BatchSampler {
            n,
            batch_size,
            seed,
            cache: HashMap::new(),
        }
    }

    pub fn epoch_order(&mut self, epoch: u64) -> &[usize] {
        let (n, seed) = (self.n, self.seed);
        self.cache.retain(|&e, _| e + 1 >= epoch);
        self.cache.entry(epoch).or_insert_with(|| {
            let mut order: Vec<usize> = (0..n).collect();
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
            order.shuffle(&mut rng);
            order
        })
    }

    pub fn batch_indices(&mut self, step: u64) -> Vec<usize> {
        let start = step * self.batch_size as u64;
        (start..start + self.batch_size as u64)
            .map(|pos| {
                let epoch = pos / self.n as u64;
                let within = (pos % self.n as u64) as usize;
                self.epoch_order(epoch)[within]
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_endpoints_map_to_unit_interval() {
        let img = RgbImage {
            width: 1,
            height: 1,
            bytes: vec![255, 0, 128],
        };
        let px = from_rgb(&img);
        assert_eq!(px[0], 1.0);
        assert_eq!(px[1], -1.0);
        assert_eq!(to_rgb(&px, 1, 1), img);
    }

    #[test]
    fn constant_images_have_near_equal_proxy() {
        // Fixed-Huffman literals cost 8 bits below 0x90 and 9 bits above, so
        // constant 32x32 buffers compress to 19 or 20 bytes depending on value.
        let sizes: Vec<f64> = (0..=255u32)
            .map(|b| {
                let v = b as f32 / 127.5 - 1.0;
                complexity_proxy(&vec![v; 3 * 32 * 32], 32, 32).0
            })
            .collect();
        let lo = sizes.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = sizes.iter().copied().fold(0.0, f64::max);
        assert_eq!((lo, hi), (19.0, 20.0));
    }

    #[test]
    fn noise_is_far_less_compressible_than_constant() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noise: Vec<f32> = (0..3 * 32 * 32)
            .map(|_| rng.gen_range(-1.0..=1.0))
            .collect();
        let flat = complexity_proxy(&vec![0.2; 3 * 32 * 32], 32, 32).0;
        let noisy = complexity_proxy(&noise, 32, 32).0;
        assert!(noisy > 5.0 * flat, "{noisy} vs {flat}");
        assert_eq!(
            complexity_proxy(&noise, 32, 32),
            complexity_proxy(&noise, 32, 32)
        );
    }

    #[test]
    fn sampler_covers_each_epoch_once() {
        let mut s = BatchSampler::new(10, 3, 42);
        let mut seen: Vec<usize> = (0..10).flat_map(|step| s.batch_indices(step)).collect();
        // 30 positions = 3 full epochs
        for epoch in seen.chunks_mut(10) {
            epoch.sort();
            assert_eq!(epoch, (0..10).collect::<Vec<_>>().as_slice());
        }
        let mut again = BatchSampler::new(10, 3, 42);
        assert_eq!(
            again.batch_indices(7),
            BatchSampler::new(10, 3, 42).batch_indices(7)
        );
        assert_ne!(
            BatchSampler::new(10, 10, 1).batch_indices(0),
            BatchSampler::new(10, 10, 2).batch_indices(0)
        );
    }

    #[test]
    fn geometry_errors() {
        assert!(matches!(
            generate_synthetic(0, 10, 30, 10, 4),
            Err(StatError::Geometry(_))
        ));
        assert!(generate_synthetic(0, 5, 32, 10, 4).is_err());
    }
}
