//! Seeded bilateral phantom with an optional lesion.
//!
//! Subject A is a head-shaped ellipse carrying blob clusters that mirror each
//! other about the vertical mid-line, each blob jittered independently so the
//! two halves are only approximately symmetric. Subject B is built from the
//! same layout, stretched horizontally away from the mid-line and jittered
//! with a different stream, so the deformation between the two is roughly
//! mirror symmetric. The lesion is a zeroed disk centred on a left-half blob.

use diffeo_core::{Grid2D, Image, Mask, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Horizontal stretch of subject B about the mid-line.
pub const STRETCH: f64 = 0.12;
/// Dilation steps of the lesion mask (3x3 structuring element).
pub const DILATIONS: usize = 8;

const BLOBS: usize = 5;
const HEAD_LEVEL: f64 = 0.25;

#[derive(Clone, Copy, Debug)]
struct Blob {
    x: f64,
    y: f64,
    radius: f64,
    amp: f64,
}

#[derive(Clone, Debug)]
pub struct Phantom {
    /// Subject A, with the lesion when requested.
    pub source: Image,
    /// Subject A without the lesion.
    pub source_clean: Image,
    pub target: Image,
    pub lesion: Mask,
    pub lesion_dilated: Mask,
}

impl Phantom {
    /// SSD mask for masked registration: everything outside the dilated lesion.
    pub fn ssd_mask(&self) -> Mask {
        self.lesion_dilated.complement()
    }
}

fn layout(size: f64, rng: &mut ChaCha8Rng) -> Vec<Blob> {
    let c = 0.5 * (size - 1.0);
    (0..BLOBS)
        .map(|_| Blob {
            x: c - rng.gen_range(0.10..0.33) * size,
            y: c + rng.gen_range(-0.32..0.32) * size,
            radius: rng.gen_range(0.04..0.07) * size,
            amp: rng.gen_range(0.35..0.65),
        })
        .collect()
}

fn jitter(b: Blob, size: f64, rng: &mut ChaCha8Rng) -> Blob {
    let d = 0.01 * size;
    Blob {
        x: b.x + rng.gen_range(-d..d),
        y: b.y + rng.gen_range(-d..d),
        radius: b.radius,
        amp: b.amp + rng.gen_range(-0.05..0.05),
    }
}

/// Both hemispheres, each blob jittered; `stretch` pushes blobs away from the
/// mid-line.
fn subject(base: &[Blob], grid: Grid2D, stretch: f64, rng: &mut ChaCha8Rng) -> Image {
    let size = grid.width() as f64;
    let c = 0.5 * (size - 1.0);
    let mut blobs = Vec::with_capacity(2 * base.len());
    for b in base {
        let mirrored = Blob {
            x: 2.0 * c - b.x,
            ..*b
        };
        for m in [*b, mirrored] {
            let m = Blob {
                x: c + (m.x - c) * (1.0 + stretch),
                ..m
            };
            blobs.push(jitter(m, size, rng));
        }
    }
    let (ax, ay) = (0.40 * size * (1.0 + stretch), 0.46 * size);
    Image::from_fn(grid, |x, y| {
        let r = (((x - c) / ax).powi(2) + ((y - c) / ay).powi(2)).sqrt();
        let head = HEAD_LEVEL / (1.0 + ((r - 1.0) * 0.5 * size / 1.5).exp());
        let bumps: f64 = blobs
            .iter()
            .map(|b| {
                let d2 = (x - b.x).powi(2) + (y - b.y).powi(2);
                b.amp * (-d2 / (2.0 * b.radius * b.radius)).exp()
            })
            .sum();
        (head + bumps).clamp(0.0, 1.0)
    })
}

/// Deterministic phantom pair on a `size x size` grid with unit spacing.
pub fn generate(size: usize, lesion: bool, seed: u64) -> Result<Phantom> {
    let grid = Grid2D::square(size)?;
    let s = size as f64;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = layout(s, &mut rng);
    let mut rng_a = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(2).wrapping_add(1));
    let mut rng_b = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(2).wrapping_add(2));
    let source_clean = subject(&base, grid, 0.0, &mut rng_a);
    let target = subject(&base, grid, STRETCH, &mut rng_b);

    let lesion_mask = if lesion {
        // the blob closest to the middle of the left half
        let c = 0.5 * (s - 1.0);
        let anchor = base
            .iter()
            .min_by(|a, b| {
                let da = (a.x - 0.5 * c).abs() + (a.y - c).abs();
                let db = (b.x - 0.5 * c).abs() + (b.y - c).abs();
                da.total_cmp(&db)
            })
            .expect("layout has blobs");
        let (cx, cy) = (anchor.x.round() as i64, anchor.y.round() as i64);
        let r = (0.08 * s).round() as i64;
        Mask::from_fn(grid, |i, j| {
            let (di, dj) = (i as i64 - cx, j as i64 - cy);
            di * di + dj * dj <= r * r
        })
    } else {
        Mask::filled(grid, false)
    };
    let mut dilated = lesion_mask.clone();
    for _ in 0..DILATIONS {
        dilated = dilated.dilate3x3();
    }
    let source = if lesion {
        let keep = lesion_mask.complement().to_image();
        let data = source_clean
            .data()
            .iter()
            .zip(keep.data())
            .map(|(v, k)| v * k)
            .collect();
        Image::new(grid, data)?
    } else {
        source_clean.clone()
    };
    Ok(Phantom {
        source,
        source_clean,
        target,
        lesion: lesion_mask,
        lesion_dilated: dilated,
    })
}
