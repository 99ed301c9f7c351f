//! Patch-level vector quantization of RGB images.
//!
//! Every non-overlapping 8x8x3 patch maps to its nearest codebook centroid
//! (squared Euclidean distance in raw pixel space, ties to the lowest index),
//! so an `H x W` image becomes an `(H/8) x (W/8)` token grid.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{ensure, Error, Result};
use crate::vocab::{TokenId, Vocabulary};

pub const PATCH: usize = 8;
pub const PATCH_DIM: usize = PATCH * PATCH * 3;
pub const KMEANS_ITERS: usize = 25;
pub const DEFAULT_CODEBOOK_SIZE: usize = 256;

const MAGIC: &[u8; 4] = b"VQCB";
const VERSION: u32 = 1;

/// RGB image, row-major `(y, x, channel)`, channel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, pixels: Vec<f32>) -> Result<Self> {
        ensure!(
            pixels.len() == height * width * 3,
            "expected {} channel values for {height}x{width}, got {}",
            height * width * 3,
            pixels.len()
        );
        Ok(Self { height, width, pixels })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let pixels = (0..height * width).flat_map(|_| rgb).collect();
        Self { height, width, pixels }
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(height, width, bytes.iter().map(|&b| b as f32 / 255.0).collect())
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.pixels.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn pixels(&self) -> &[f32] {
        &self.pixels
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    fn check_divisible(&self) -> Result<()> {
        ensure!(
            self.height.is_multiple_of(PATCH) && self.width.is_multiple_of(PATCH) && self.height > 0 && self.width > 0,
            "image {}x{} is not divisible into {PATCH}x{PATCH} patches",
            self.height,
            self.width
        );
        Ok(())
    }

    /// Patch `(py, px)` flattened as `(dy, dx, channel)`.
    pub fn patch(&self, py: usize, px: usize) -> [f32; PATCH_DIM] {
        let mut out = [0.0; PATCH_DIM];
        for dy in 0..PATCH {
            let row = (py * PATCH + dy) * self.width + px * PATCH;
            let src = &self.pixels[row * 3..(row + PATCH) * 3];
            out[dy * PATCH * 3..(dy + 1) * PATCH * 3].copy_from_slice(src);
        }
        out
    }

    fn put_patch(&mut self, py: usize, px: usize, patch: &[f32]) {
        for dy in 0..PATCH {
            let row = (py * PATCH + dy) * self.width + px * PATCH;
            for (dst, &v) in
                self.pixels[row * 3..(row + PATCH) * 3].iter_mut().zip(&patch[dy * PATCH * 3..(dy + 1) * PATCH * 3])
            {
                *dst = v.clamp(0.0, 1.0);
            }
        }
    }

    pub fn patches(&self) -> impl Iterator<Item = [f32; PATCH_DIM]> + '_ {
        let (rows, cols) = (self.height / PATCH, self.width / PATCH);
        (0..rows).flat_map(move |py| (0..cols).map(move |px| self.patch(py, px)))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenGrid {
    pub rows: usize,
    pub cols: usize,
    pub ids: Vec<TokenId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VqCodebook {
    centroids: Vec<f32>,
    k: usize,
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| {
            let d = x as f64 - y as f64;
            d * d
        })
        .sum()
}

/// Unique patches with multiplicities, in a platform-independent order.
fn unique_patches<'a>(images: impl IntoIterator<Item = &'a Image>) -> Result<(Vec<[f32; PATCH_DIM]>, Vec<f64>)> {
    let mut uniq: BTreeMap<Vec<u32>, (usize, [f32; PATCH_DIM])> = BTreeMap::new();
    for img in images {
        img.check_divisible()?;
        for p in img.patches() {
            let key: Vec<u32> = p.iter().map(|v| v.to_bits()).collect();
            uniq.entry(key).or_insert((0, p)).0 += 1;
        }
    }
    let mut pts = Vec::with_capacity(uniq.len());
    let mut weights = Vec::with_capacity(uniq.len());
    for (_, (count, p)) in uniq {
        pts.push(p);
        weights.push(count as f64);
    }
    Ok((pts, weights))
}

impl VqCodebook {
    pub fn from_centroids(centroids: Vec<f32>) -> Result<Self> {
        ensure!(
            !centroids.is_empty() && centroids.len().is_multiple_of(PATCH_DIM),
            "centroid buffer must hold a positive multiple of {PATCH_DIM} values"
        );
        ensure!(centroids.iter().all(|v| v.is_finite()), "non-finite centroid entry");
        let k = centroids.len() / PATCH_DIM;
        Ok(Self { centroids, k })
    }

    pub fn len(&self) -> usize {
        self.k
    }

    pub fn is_empty(&self) -> bool {
        self.k == 0
    }

    pub fn centroid(&self, i: usize) -> &[f32] {
        &self.centroids[i * PATCH_DIM..(i + 1) * PATCH_DIM]
    }

    /// Weighted k-means++ seeding over the distinct patches of `images`.
    pub fn init_plus_plus(images: &[Image], k: usize, seed: u64) -> Result<Self> {
        let (pts, weights) = unique_patches(images)?;
        Self::init_from_points(&pts, &weights, k, seed)
    }

    fn init_from_points(pts: &[[f32; PATCH_DIM]], weights: &[f64], k: usize, seed: u64) -> Result<Self> {
        ensure!(k >= 1, "codebook size must be at least 1");
        ensure!(pts.len() >= k, "corpus has {} distinct patches, fewer than K = {k}", pts.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut chosen = Vec::with_capacity(k);
        chosen.push(sample_weighted(&mut rng, weights));
        let mut d2: Vec<f64> = pts.iter().map(|p| sq_dist(p, &pts[chosen[0]])).collect();
        while chosen.len() < k {
            let w: Vec<f64> = d2.iter().zip(weights).map(|(d, w)| d * w).collect();
            let next = if w.iter().sum::<f64>() > 0.0 {
                sample_weighted(&mut rng, &w)
            } else {
                // Remaining mass is zero only if every point coincides with a
                // chosen centroid; take the first unchosen point.
                (0..pts.len()).find(|i| !chosen.contains(i)).expect("pts.len() >= k")
            };
            chosen.push(next);
            for (d, p) in d2.iter_mut().zip(pts) {
                *d = d.min(sq_dist(p, &pts[next]));
            }
        }
        let centroids = chosen.iter().flat_map(|&i| pts[i]).collect();
        Self::from_centroids(centroids)
    }

    /// k-means++ seeding followed by a fixed number of Lloyd iterations.
    pub fn fit(images: &[Image], k: usize, seed: u64) -> Result<Self> {
        let (pts, weights) = unique_patches(images)?;
        let mut cb = Self::init_from_points(&pts, &weights, k, seed)?;
        for _ in 0..KMEANS_ITERS {
            cb.lloyd_step(&pts, &weights);
        }
        Ok(cb)
    }

    fn lloyd_step(&mut self, pts: &[[f32; PATCH_DIM]], weights: &[f64]) {
        let mut sums = vec![0.0f64; self.k * PATCH_DIM];
        let mut mass = vec![0.0f64; self.k];
        for (p, &w) in pts.iter().zip(weights) {
            let c = self.nearest(p);
            mass[c] += w;
            for (s, &v) in sums[c * PATCH_DIM..(c + 1) * PATCH_DIM].iter_mut().zip(p) {
                *s += w * v as f64;
            }
        }
        for c in 0..self.k {
            if mass[c] > 0.0 {
                for (dst, s) in self.centroids[c * PATCH_DIM..(c + 1) * PATCH_DIM]
                    .iter_mut()
                    .zip(&sums[c * PATCH_DIM..(c + 1) * PATCH_DIM])
                {
                    *dst = (s / mass[c]) as f32;
                }
            }
        }
    }

    /// Index of the nearest centroid; ties go to the lowest index.
    pub fn nearest(&self, patch: &[f32]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for c in 0..self.k {
            let d = sq_dist(patch, self.centroid(c));
            if d < best.0 {
                best = (d, c);
            }
        }
        best.1
    }

    pub fn encode_image(&self, img: &Image, vocab: &Vocabulary) -> Result<TokenGrid> {
        img.check_divisible()?;
        ensure!(
            self.k <= vocab.vision_range().len(),
            "codebook of {} entries exceeds vision range {}",
            self.k,
            vocab.vision_range().len()
        );
        let ids = img.patches().map(|p| vocab.vision_id(self.nearest(&p))).collect::<Result<_>>()?;
        Ok(TokenGrid { rows: img.height / PATCH, cols: img.width / PATCH, ids })
    }

    /// Encodes many images, scanning each distinct patch once.
    pub fn encode_many(&self, images: &[Image], vocab: &Vocabulary) -> Result<Vec<TokenGrid>> {
        let mut cache: std::collections::HashMap<Vec<u32>, TokenId> = Default::default();
        images
            .iter()
            .map(|img| {
                img.check_divisible()?;
                let mut ids = Vec::with_capacity((img.height / PATCH) * (img.width / PATCH));
                for p in img.patches() {
                    let key: Vec<u32> = p.iter().map(|v| v.to_bits()).collect();
                    let id = match cache.get(&key) {
                        Some(&id) => id,
                        None => {
                            let id = vocab.vision_id(self.nearest(&p))?;
                            cache.insert(key, id);
                            id
                        }
                    };
                    ids.push(id);
                }
                Ok(TokenGrid { rows: img.height / PATCH, cols: img.width / PATCH, ids })
            })
            .collect()
    }

    pub fn decode_image(&self, grid: &TokenGrid, vocab: &Vocabulary) -> Result<Image> {
        ensure!(grid.ids.len() == grid.rows * grid.cols, "grid shape does not match id count");
        let mut img = Image::filled(grid.rows * PATCH, grid.cols * PATCH, [0.0; 3]);
        for (i, &id) in grid.ids.iter().enumerate() {
            let c = vocab.vision_index(id)?;
            ensure!(c < self.k, "vision token {id} refers to centroid {c} >= K = {}", self.k);
            img.put_patch(i / grid.cols, i % grid.cols, self.centroid(c));
        }
        Ok(img)
    }

    /// Header `(magic, version, K, patch_dim)` as little-endian u32, then
    /// `K * patch_dim` little-endian f32 values.
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(self.k as u32).to_le_bytes())?;
        w.write_all(&(PATCH_DIM as u32).to_le_bytes())?;
        for v in &self.centroids {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(16 + self.centroids.len() * 4);
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut head = [0u8; 16];
        r.read_exact(&mut head).map_err(|e| Error::corrupt(format!("codebook header: {e}")))?;
        if &head[..4] != MAGIC {
            return Err(Error::corrupt("codebook magic mismatch"));
        }
        let word = |i: usize| u32::from_le_bytes(head[i..i + 4].try_into().unwrap());
        if word(4) != VERSION {
            return Err(Error::corrupt(format!("unsupported codebook version {}", word(4))));
        }
        let (k, dim) = (word(8) as usize, word(12) as usize);
        if dim != PATCH_DIM || k == 0 {
            return Err(Error::corrupt(format!("bad codebook shape K={k} dim={dim}")));
        }
        let mut body = vec![0u8; k * dim * 4];
        r.read_exact(&mut body).map_err(|e| Error::corrupt(format!("codebook body: {e}")))?;
        let centroids = body.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        Self::from_centroids(centroids).map_err(|e| Error::corrupt(e.to_string()))
    }
}

fn sample_weighted(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    let mut r = rng.random::<f64>() * total;
    for (i, &w) in weights.iter().enumerate() {
        if r < w {
            return i;
        }
        r -= w;
    }
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}
