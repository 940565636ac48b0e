//! Synthetic four-channel phantoms with nested tumor compartments.
//!
//! Each patient is a brain-shaped ellipsoid on a zero background with a pair
//! of fluid-filled ventricles and one tumor made of three nested, irregular
//! ellipsoids: edema (class 2) around a core whose interior is necrotic
//! (class 1) and whose remaining shell enhances (class 3). Channel contrasts
//! loosely follow T1, contrast-enhanced T1, T2 and FLAIR: edema is bright in
//! FLAIR, the enhancing shell in contrast-T1 and fluid in T2. Every channel
//! carries a smooth texture, Gaussian noise and a random global gain; a
//! smooth bias field, per-patient noise level and per-patient contrast jitter
//! make patients differ from one another.
//!
//! Patient `i` depends only on `(seed, i)`, so prefixes of a cohort agree.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::volume::{class, voxel_index, Dims, LabelVolume, VolumeSet};

pub const MODALITIES: usize = 4;
pub const MIN_SIZE: usize = 32;

/// Mean intensity per tissue (rows: background tissue, necrotic, edema,
/// enhancing, fluid) and channel.
const CONTRAST: [[f64; MODALITIES]; 5] = [
    [1.00, 1.00, 1.00, 1.00],
    [0.55, 0.60, 1.90, 1.20],
    [0.80, 0.85, 1.60, 1.70],
    [0.85, 1.80, 1.40, 1.40],
    [0.40, 0.40, 2.00, 0.30],
];
const FLUID: usize = 4;
/// Per-patient noise standard deviation range, relative to tissue means.
const NOISE_SD: (f64, f64) = (0.2, 0.45);
/// Per-patient, per-tissue, per-channel contrast jitter is `1 ± CONTRAST_JITTER`.
const CONTRAST_JITTER: f64 = 0.2;
/// Peak amplitude of the smooth multiplicative bias field.
const BIAS_AMPLITUDE: f64 = 0.25;
/// Minimum voxels of each tumor class, as a fraction of the volume.
const MIN_CLASS_FRACTION: f64 = 1e-3;

/// Low-frequency random field: a sum of a few plane waves.
struct Waves {
    waves: Vec<([f64; 3], f64, f64)>,
}

impl Waves {
    fn new(rng: &mut ChaCha8Rng, count: usize, max_freq: f64, amplitude: f64) -> Self {
        let waves = (0..count)
            .map(|_| {
                let k = std::array::from_fn(|_| rng.random_range(-max_freq..max_freq));
                (
                    k,
                    rng.random_range(0.0..std::f64::consts::TAU),
                    amplitude / count as f64,
                )
            })
            .collect();
        Waves { waves }
    }

    fn at(&self, p: [f64; 3]) -> f64 {
        self.waves
            .iter()
            .map(|(k, phase, a)| a * (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + phase).sin())
            .sum()
    }
}

/// Axis-aligned ellipsoid with a wavy boundary; `level < 1` is inside.
struct Blob {
    center: [f64; 3],
    radii: [f64; 3],
    wobble: Waves,
}

impl Blob {
    fn level(&self, p: [f64; 3]) -> f64 {
        let r2: f64 = (0..3).map(|a| ((p[a] - self.center[a]) / self.radii[a]).powi(2)).sum();
        r2.sqrt() - self.wobble.at(p)
    }
}

fn uniform3(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 3] {
    std::array::from_fn(|_| rng.random_range(lo..hi))
}

struct Anatomy {
    brain: Blob,
    ventricles: [Blob; 2],
    whole: Blob,
    core: Blob,
    necrosis: Blob,
}

fn draw_anatomy(rng: &mut ChaCha8Rng, size: usize) -> Anatomy {
    let s = size as f64;
    let mid = (s - 1.0) / 2.0;
    let flat = Waves { waves: Vec::new() };
    let brain = Blob {
        center: [mid; 3],
        radii: uniform3(rng, 0.40 * s, 0.46 * s),
        wobble: Waves::new(rng, 3, 0.15, 0.05),
    };
    let vr = uniform3(rng, 0.04 * s, 0.07 * s);
    let dx = rng.random_range(0.06 * s..0.09 * s);
    let ventricles = [-1.0, 1.0].map(|side| Blob {
        center: [mid + side * dx, mid + 0.05 * s, mid],
        radii: vr,
        wobble: Waves { waves: Vec::new() },
    });
    let wr = uniform3(rng, 0.17 * s, 0.23 * s);
    // keep the tumor inside the brain, off the midline ventricles
    let side = if rng.random_bool(0.5) { -1.0 } else { 1.0 };
    let center = [
        mid + side * rng.random_range(0.1 * s..0.16 * s),
        mid + rng.random_range(-0.1 * s..0.1 * s),
        mid + rng.random_range(-0.1 * s..0.1 * s),
    ];
    let whole = Blob {
        center,
        radii: wr,
        wobble: Waves::new(rng, 4, 0.4, 0.25),
    };
    let cr: [f64; 3] = std::array::from_fn(|a| wr[a] * rng.random_range(0.55..0.7));
    let core = Blob {
        center: std::array::from_fn(|a| center[a] + wr[a] * rng.random_range(-0.2..0.2)),
        radii: cr,
        wobble: Waves::new(rng, 4, 0.6, 0.2),
    };
    let necrosis = Blob {
        center: std::array::from_fn(|a| core.center[a] + cr[a] * rng.random_range(-0.15..0.15)),
        radii: std::array::from_fn(|a| cr[a] * rng.random_range(0.6..0.8)),
        wobble: flat,
    };
    Anatomy {
        brain,
        ventricles,
        whole,
        core,
        necrosis,
    }
}

/// Labels implied by the anatomy; nesting is enforced by intersecting each
/// compartment with its parent.
fn label_volume(a: &Anatomy, size: usize) -> LabelVolume {
    let dims = [size; 3];
    let mut labels = LabelVolume::zeros(dims);
    for x in 0..size {
        for y in 0..size {
            for z in 0..size {
                let p = [x as f64, y as f64, z as f64];
                if a.brain.level(p) >= 1.0 || a.whole.level(p) >= 1.0 {
                    continue;
                }
                let in_core = a.core.level(p) < 1.0 && a.whole.level(p) < 0.85;
                let l = if !in_core {
                    class::EDEMA
                } else if a.necrosis.level(p) < 1.0 && a.core.level(p) < 0.85 {
                    class::NECROTIC
                } else {
                    class::ENHANCING
                };
                labels.set(x, y, z, l);
            }
        }
    }
    labels
}

/// One labelled patient.
pub fn generate_patient(seed: u64, index: u64, size: usize) -> Result<VolumeSet> {
    if size < MIN_SIZE {
        return Err(Error::InvalidArgument(format!(
            "synthetic volumes need at least {MIN_SIZE} voxels per axis, got {size}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let vol = size * size * size;
    let min_count = ((vol as f64 * MIN_CLASS_FRACTION).ceil() as usize).max(8);
    let (anatomy, labels) = loop {
        let a = draw_anatomy(&mut rng, size);
        let l = label_volume(&a, size);
        let mut counts = [0usize; class::COUNT];
        for &v in l.data() {
            counts[v as usize] += 1;
        }
        if counts.iter().all(|&c| c >= min_count) {
            break (a, l);
        }
    };
    let dims: Dims = [size; 3];
    let noise = Normal::new(0.0, rng.random_range(NOISE_SD.0..NOISE_SD.1)).expect("positive sd");
    let bias = Waves::new(&mut rng, 3, 0.08, BIAS_AMPLITUDE);
    let mut image = vec![0.0f32; MODALITIES * vol];
    for m in 0..MODALITIES {
        let gain = rng.random_range(50.0..400.0);
        let jitter: [f64; 5] = std::array::from_fn(|_| rng.random_range(1.0 - CONTRAST_JITTER..1.0 + CONTRAST_JITTER));
        let texture = Waves::new(&mut rng, 6, 0.35, 0.3);
        let chan = &mut image[m * vol..(m + 1) * vol];
        for x in 0..size {
            for y in 0..size {
                for z in 0..size {
                    let p = [x as f64, y as f64, z as f64];
                    if anatomy.brain.level(p) >= 1.0 {
                        continue;
                    }
                    let tissue = match labels.get(x, y, z) {
                        class::BACKGROUND if anatomy.ventricles.iter().any(|v| v.level(p) < 1.0) => FLUID,
                        class::BACKGROUND => 0,
                        l => l as usize,
                    };
                    let mean = CONTRAST[tissue][m] * jitter[tissue] * (1.0 + texture.at(p)) * (1.0 + bias.at(p));
                    // strictly positive so the brain mask survives normalization
                    let v = (mean + noise.sample(&mut rng)).max(0.05);
                    chan[voxel_index(dims, x, y, z)] = (v * gain) as f32;
                }
            }
        }
    }
    VolumeSet::new(
        format!("p{index:03}"),
        Tensor::new(vec![MODALITIES, size, size, size], image)?,
        Some(labels),
    )
}

/// `patients` labelled phantoms of extent `size³`.
pub fn generate_synthetic(seed: u64, size: usize, patients: usize) -> Result<Vec<VolumeSet>> {
    (0..patients as u64).map(|i| generate_patient(seed, i, size)).collect()
}
