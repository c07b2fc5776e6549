//! Synthetic benchmark data: phantom volumes with known sharp structure,
//! the blur-plus-noise degradation pipeline, aligned patch sampling, and
//! on-disk dataset assembly.
//!
//! Phantoms come in three kinds — single-voxel dots, filled spheres and
//! one-voxel-thick ellipsoidal shells — rendered onto a zero background
//! with intensities on a 0-255 scale. Degradation circularly blurs with a
//! Gaussian point-spread function and adds seeded Gaussian read noise.

use crate::classic::{fft_convolve, gaussian_psf, gaussian_psf_aniso};
use crate::error::{Error, Result};
use crate::io::{read_json, read_lvol, write_json, write_lvol};
use crate::volgrid::{Real, Volume};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Attempts allowed per object before generation gives up.
const PLACEMENT_RETRY_BUDGET: usize = 100;

/// Lower / upper bound of object peak intensities.
const INTENSITY_RANGE: (f64, f64) = (128.0, 255.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhantomKind {
    Dots,
    Spheres,
    Shells,
}

impl PhantomKind {
    /// Default object count for a 128-cubed volume; scaled by voxel
    /// ratio for other sizes.
    pub fn default_count(self) -> usize {
        match self {
            PhantomKind::Dots => 200,
            PhantomKind::Spheres => 20,
            PhantomKind::Shells => 10,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dots" => Ok(PhantomKind::Dots),
            "spheres" => Ok(PhantomKind::Spheres),
            "shells" => Ok(PhantomKind::Shells),
            other => Err(Error::invalid(format!("unknown phantom kind '{other}' (expected dots|spheres|shells)"))),
        }
    }
}

impl std::fmt::Display for PhantomKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PhantomKind::Dots => "dots",
            PhantomKind::Spheres => "spheres",
            PhantomKind::Shells => "shells",
        })
    }
}

/// Recipe for one synthetic ground-truth volume.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub kind: PhantomKind,
    pub shape: (usize, usize, usize),
    pub count: usize,
    /// Sphere radius range in voxels (inclusive bounds; equal bounds pin
    /// the radius).
    pub sphere_radius: (f64, f64),
    /// Shell semi-axis range in voxels, drawn independently per axis.
    pub shell_semi_axes: (f64, f64),
    /// Render dots as 3-voxel-wide Gaussian profiles instead of single
    /// voxels.
    pub soft_dots: bool,
    pub seed: u64,
}

impl PhantomSpec {
    pub fn new(kind: PhantomKind, shape: (usize, usize, usize), count: usize, seed: u64) -> Self {
        PhantomSpec {
            kind,
            shape,
            count,
            sphere_radius: (2.0, 6.0),
            shell_semi_axes: (6.0, 20.0),
            soft_dots: false,
            seed,
        }
    }
}

/// Blur and noise parameters applied to a ground-truth volume. Noise is
/// additive Gaussian on the 0-255 intensity scale; the optional axial
/// sigma makes the blur anisotropic (wider along depth).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub sigma_b: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma_b_axial: Option<f64>,
    pub sigma_n: f64,
    pub seed: u64,
}

impl DegradationSpec {
    pub fn isotropic(sigma_b: f64, sigma_n: f64, seed: u64) -> Self {
        DegradationSpec { sigma_b, sigma_b_axial: None, sigma_n, seed }
    }

    pub fn anisotropic(sigma_b_axial: f64, sigma_b_lateral: f64, sigma_n: f64, seed: u64) -> Self {
        DegradationSpec { sigma_b: sigma_b_lateral, sigma_b_axial: Some(sigma_b_axial), sigma_n, seed }
    }
}

fn range_sample(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

fn place_max<T: Real>(v: &mut Volume<T>, z: usize, y: usize, x: usize, value: T) {
    if value > v.at(0, z, y, x) {
        v.set(0, z, y, x, value);
    }
}

/// Renders a phantom volume. Deterministic in the spec's seed; objects
/// never cross the volume boundary; overlapping objects combine by
/// maximum.
pub fn generate_phantom<T: Real>(spec: &PhantomSpec) -> Result<Volume<T>> {
    let (d, h, w) = spec.shape;
    if d < 16 || h < 16 || w < 16 {
        return Err(Error::invalid(format!("phantom extents must be at least 16, got ({d},{h},{w})")));
    }
    if spec.count == 0 {
        return Err(Error::invalid("phantom object count must be positive".to_string()));
    }
    let (rlo, rhi) = spec.sphere_radius;
    let (alo, ahi) = spec.shell_semi_axes;
    if !(rlo.is_finite() && rhi.is_finite() && rlo > 0.0 && rhi >= rlo) {
        return Err(Error::invalid(format!("sphere radius range ({rlo}, {rhi}) must be positive and ordered")));
    }
    if !(alo.is_finite() && ahi.is_finite() && alo > 1.0 && ahi >= alo) {
        return Err(Error::invalid(format!("shell semi-axis range ({alo}, {ahi}) must exceed 1 and be ordered")));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut vol = Volume::zeros(1, d, h, w);
    for placed in 0..spec.count {
        let mut ok = false;
        for _ in 0..PLACEMENT_RETRY_BUDGET {
            if try_place(&mut vol, spec, &mut rng) {
                ok = true;
                break;
            }
        }
        if !ok {
            return Err(Error::invalid(format!(
                "placed {placed} of {} {} objects within the retry budget; enlarge the volume or shrink the size ranges",
                spec.count, spec.kind
            )));
        }
    }
    Ok(vol)
}

/// One placement attempt: draws size, center and intensity (in that
/// order, so the random stream is stable) and renders if the object fits.
fn try_place<T: Real>(vol: &mut Volume<T>, spec: &PhantomSpec, rng: &mut ChaCha8Rng) -> bool {
    let (d, h, w) = spec.shape;
    match spec.kind {
        PhantomKind::Dots => {
            let margin = if spec.soft_dots { 1 } else { 0 };
            if d < 2 * margin + 1 || h < 2 * margin + 1 || w < 2 * margin + 1 {
                return false;
            }
            let cz = rng.random_range(margin..d - margin);
            let cy = rng.random_range(margin..h - margin);
            let cx = rng.random_range(margin..w - margin);
            let intensity = rng.random_range(INTENSITY_RANGE.0..INTENSITY_RANGE.1);
            if spec.soft_dots {
                // 3-voxel-wide Gaussian profile, peak at the center voxel.
                let sigma2 = 2.0 * 0.5 * 0.5;
                for dz in -1i64..=1 {
                    for dy in -1i64..=1 {
                        for dx in -1i64..=1 {
                            let r2 = (dz * dz + dy * dy + dx * dx) as f64;
                            let v = intensity * (-r2 / sigma2).exp();
                            place_max(
                                vol,
                                (cz as i64 + dz) as usize,
                                (cy as i64 + dy) as usize,
                                (cx as i64 + dx) as usize,
                                T::of(v),
                            );
                        }
                    }
                }
            } else {
                place_max(vol, cz, cy, cx, T::of(intensity));
            }
            true
        }
        PhantomKind::Spheres => {
            let r = range_sample(rng, spec.sphere_radius);
            let m = r.ceil() as usize;
            if d < 2 * m + 1 || h < 2 * m + 1 || w < 2 * m + 1 {
                return false;
            }
            let cz = rng.random_range(m..d - m) as i64;
            let cy = rng.random_range(m..h - m) as i64;
            let cx = rng.random_range(m..w - m) as i64;
            let intensity = T::of(rng.random_range(INTENSITY_RANGE.0..INTENSITY_RANGE.1));
            let r2 = r * r;
            let mi = m as i64;
            for z in cz - mi..=cz + mi {
                for y in cy - mi..=cy + mi {
                    for x in cx - mi..=cx + mi {
                        let dist2 = ((z - cz).pow(2) + (y - cy).pow(2) + (x - cx).pow(2)) as f64;
                        if dist2 <= r2 {
                            place_max(vol, z as usize, y as usize, x as usize, intensity);
                        }
                    }
                }
            }
            true
        }
        PhantomKind::Shells => {
            let az = range_sample(rng, spec.shell_semi_axes);
            let ay = range_sample(rng, spec.shell_semi_axes);
            let ax = range_sample(rng, spec.shell_semi_axes);
            let (mz, my, mx) = (az.ceil() as usize, ay.ceil() as usize, ax.ceil() as usize);
            if d < 2 * mz + 1 || h < 2 * my + 1 || w < 2 * mx + 1 {
                return false;
            }
            let cz = rng.random_range(mz..d - mz) as i64;
            let cy = rng.random_range(my..h - my) as i64;
            let cx = rng.random_range(mx..w - mx) as i64;
            let intensity = T::of(rng.random_range(INTENSITY_RANGE.0..INTENSITY_RANGE.1));
            let ellipse = |dz: f64, dy: f64, dx: f64, sz: f64, sy: f64, sx: f64| {
                (dz / sz).powi(2) + (dy / sy).powi(2) + (dx / sx).powi(2)
            };
            for z in cz - mz as i64..=cz + mz as i64 {
                for y in cy - my as i64..=cy + my as i64 {
                    for x in cx - mx as i64..=cx + mx as i64 {
                        let (dz, dy, dx) = ((z - cz) as f64, (y - cy) as f64, (x - cx) as f64);
                        let outer = ellipse(dz, dy, dx, az, ay, ax);
                        let inner = ellipse(dz, dy, dx, az - 1.0, ay - 1.0, ax - 1.0);
                        if outer <= 1.0 && inner > 1.0 {
                            place_max(vol, z as usize, y as usize, x as usize, intensity);
                        }
                    }
                }
            }
            true
        }
    }
}

/// Blurs with the spec's Gaussian point-spread function, adds seeded
/// Gaussian noise and clamps at zero. With both sigmas zero the input
/// passes through bit-exactly.
pub fn degrade<T: Real>(x: &Volume<T>, spec: &DegradationSpec) -> Result<Volume<T>> {
    if x.channels() != 1 {
        return Err(Error::shape(format!("degradation expects a single-channel volume, got {}", x.channels())));
    }
    if !spec.sigma_n.is_finite() || spec.sigma_n < 0.0 {
        return Err(Error::invalid(format!("noise sigma must be finite and non-negative, got {}", spec.sigma_n)));
    }
    let axial = spec.sigma_b_axial.unwrap_or(spec.sigma_b);
    let mut out = if spec.sigma_b == 0.0 && axial == 0.0 {
        // Skip the frequency domain entirely so the no-op case is exact.
        x.clone()
    } else {
        let psf = if spec.sigma_b_axial.is_some() {
            gaussian_psf_aniso(axial, spec.sigma_b)?
        } else {
            gaussian_psf(spec.sigma_b)?
        };
        fft_convolve(x, &psf)?
    };
    if spec.sigma_n > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        // Sample in f64 so f32 and f64 runs see the same noise stream.
        let normal = Normal::new(0.0f64, spec.sigma_n)
            .map_err(|e| Error::invalid(format!("invalid noise distribution: {e}")))?;
        for v in out.data_mut() {
            *v += T::of(normal.sample(&mut rng));
        }
    }
    if spec.sigma_n > 0.0 || spec.sigma_b > 0.0 || axial > 0.0 {
        for v in out.data_mut() {
            if *v < T::zero() {
                *v = T::zero();
            }
        }
    }
    Ok(out)
}

/// Draws `n` aligned random crops from (degraded, ground-truth) volume
/// pairs: each crop picks a pair uniformly, then one offset used in both
/// volumes.
pub fn sample_patches<T: Real>(
    pairs: &[(Volume<T>, Volume<T>)],
    patch: (usize, usize, usize),
    n: usize,
    seed: u64,
) -> Result<Vec<(Volume<T>, Volume<T>)>> {
    if pairs.is_empty() {
        return Err(Error::invalid("patch sampling needs at least one volume pair".to_string()));
    }
    let (pd, ph, pw) = patch;
    if pd == 0 || ph == 0 || pw == 0 {
        return Err(Error::invalid(format!("patch extents must be positive, got ({pd},{ph},{pw})")));
    }
    for (a, b) in pairs {
        if a.shape() != b.shape() {
            return Err(Error::shape(format!(
                "paired volumes differ in shape: {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let (d, h, w) = a.spatial();
        if pd > d || ph > h || pw > w {
            return Err(Error::shape(format!(
                "patch ({pd},{ph},{pw}) does not fit volume extents ({d},{h},{w})"
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let (deg, gt) = &pairs[rng.random_range(0..pairs.len())];
        let (d, h, w) = deg.spatial();
        let z0 = rng.random_range(0..d - pd + 1);
        let y0 = rng.random_range(0..h - ph + 1);
        let x0 = rng.random_range(0..w - pw + 1);
        out.push((deg.crop(z0, y0, x0, pd, ph, pw)?, gt.crop(z0, y0, x0, pd, ph, pw)?));
    }
    Ok(out)
}

/// Degradation regimes the dataset builder knows how to lay out.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    /// All nine blur/noise permutations seen during training.
    TrainMixed,
    /// The held-out evaluation grid of unseen degradation levels.
    TestGrid,
    /// Isotropic reference domain (blur 1.2, noise 15).
    RegimeA,
    /// Anisotropic transfer domain (axial blur 2.0, lateral 0.8, noise 25).
    RegimeB,
}

impl Regime {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "train-mixed" => Ok(Regime::TrainMixed),
            "test-grid" => Ok(Regime::TestGrid),
            "regime-a" => Ok(Regime::RegimeA),
            "regime-b" => Ok(Regime::RegimeB),
            other => Err(Error::invalid(format!(
                "unknown regime '{other}' (expected train-mixed|test-grid|regime-a|regime-b)"
            ))),
        }
    }

    /// Degradation cells of this regime, before seeding.
    pub fn cells(self) -> Vec<DegradationSpec> {
        match self {
            Regime::TrainMixed => {
                let mut cells = Vec::new();
                for sigma_b in [1.0, 1.2, 1.5] {
                    for sigma_n in [0.0, 15.0, 30.0] {
                        cells.push(DegradationSpec::isotropic(sigma_b, sigma_n, 0));
                    }
                }
                cells
            }
            Regime::TestGrid => {
                let mut cells = Vec::new();
                for sigma_b in [0.5, 2.0] {
                    for sigma_n in [20.0, 50.0, 70.0, 100.0] {
                        cells.push(DegradationSpec::isotropic(sigma_b, sigma_n, 0));
                    }
                }
                cells
            }
            Regime::RegimeA => vec![DegradationSpec::isotropic(1.2, 15.0, 0)],
            Regime::RegimeB => vec![DegradationSpec::anisotropic(2.0, 0.8, 25.0, 0)],
        }
    }

    /// Whether volumes in this regime are intended for fitting (and thus
    /// carry train/val splits) or held out entirely.
    fn is_training(self) -> bool {
        matches!(self, Regime::TrainMixed | Regime::RegimeA)
    }
}

impl std::fmt::Display for Regime {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Regime::TrainMixed => "train-mixed",
            Regime::TestGrid => "test-grid",
            Regime::RegimeA => "regime-a",
            Regime::RegimeB => "regime-b",
        })
    }
}

/// Stable seed derivation (splitmix64 finalizer) so distinct volumes and
/// cells get decorrelated, reproducible random streams.
pub fn mix_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_mul(0x9E37_79B9_7F4A_7C15)).wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One degraded/ground-truth pair in a dataset manifest. Paths are
/// relative to the manifest's directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub gt: String,
    pub degraded: String,
    pub degradation: DegradationSpec,
    pub split: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub regime: Regime,
    pub seed: u64,
    pub shape: (usize, usize, usize),
    pub entries: Vec<DatasetEntry>,
}

/// A manifest entry with both volumes loaded.
pub struct LoadedPair {
    pub gt: Volume<f32>,
    pub degraded: Volume<f32>,
    pub degradation: DegradationSpec,
    pub split: String,
}

/// Ground truth for dataset volumes: all three phantom kinds overlaid,
/// with per-kind counts scaled from the 128-cubed defaults by voxel
/// ratio (minimum one object each). Object size ranges shrink to what the
/// volume can hold, so desk-scale test volumes stay buildable; at 64³ and
/// larger every default range fits unchanged.
pub fn generate_mixed_phantom<T: Real>(shape: (usize, usize, usize), seed: u64) -> Result<Volume<T>> {
    let scale = (shape.0 * shape.1 * shape.2) as f64 / (128.0 * 128.0 * 128.0);
    // Largest semi-axis whose ceil-margin placement fits the smallest extent.
    let cap = ((shape.0.min(shape.1).min(shape.2) - 1) / 2) as f64;
    let mut vol = Volume::zeros(1, shape.0, shape.1, shape.2);
    for (i, kind) in [PhantomKind::Dots, PhantomKind::Spheres, PhantomKind::Shells].into_iter().enumerate() {
        let count = ((kind.default_count() as f64 * scale).round() as usize).max(1);
        let mut spec = PhantomSpec::new(kind, shape, count, mix_seed(seed, i as u64));
        spec.sphere_radius.1 = spec.sphere_radius.1.min(cap);
        spec.sphere_radius.0 = spec.sphere_radius.0.min(spec.sphere_radius.1);
        spec.shell_semi_axes.1 = spec.shell_semi_axes.1.min(cap);
        spec.shell_semi_axes.0 = spec.shell_semi_axes.0.min(spec.shell_semi_axes.1);
        let layer = generate_phantom::<T>(&spec)?;
        for (v, l) in vol.data_mut().iter_mut().zip(layer.data()) {
            if *l > *v {
                *v = *l;
            }
        }
    }
    Ok(vol)
}

/// Generates `n_volumes` mixed phantoms, degrades each through every
/// cell of the regime, writes all volumes under `out_dir` and returns
/// the manifest (also written as `manifest.json`).
///
/// In training regimes the last base volume is labeled `val` when there
/// are at least two; held-out regimes label everything `test`.
pub fn build_dataset(
    regime: Regime,
    n_volumes: usize,
    shape: (usize, usize, usize),
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if n_volumes == 0 {
        return Err(Error::invalid("dataset needs at least one base volume".to_string()));
    }
    std::fs::create_dir_all(out_dir)?;
    let cells = regime.cells();
    let mut entries = Vec::with_capacity(n_volumes * cells.len());
    for i in 0..n_volumes {
        let gt: Volume<f32> = generate_mixed_phantom(shape, mix_seed(seed, 2 * i as u64))?;
        let gt_name = format!("gt_{i:03}.lvol");
        write_lvol(&out_dir.join(&gt_name), &gt)?;
        let split = if regime.is_training() {
            if n_volumes >= 2 && i == n_volumes - 1 {
                "val"
            } else {
                "train"
            }
        } else {
            "test"
        };
        for (j, cell) in cells.iter().enumerate() {
            let mut spec = *cell;
            spec.seed = mix_seed(seed, (2 * (i * cells.len() + j) + 1) as u64);
            let degraded = degrade(&gt, &spec)?;
            let deg_name = format!("deg_{i:03}_c{j}.lvol");
            write_lvol(&out_dir.join(&deg_name), &degraded)?;
            entries.push(DatasetEntry {
                gt: gt_name.clone(),
                degraded: deg_name,
                degradation: spec,
                split: split.to_string(),
            });
        }
    }
    let manifest = DatasetManifest { regime, seed, shape, entries };
    write_json(&out_dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

/// Reads a manifest and loads every referenced volume.
pub fn load_dataset(manifest_path: &Path) -> Result<(DatasetManifest, Vec<LoadedPair>)> {
    let manifest: DatasetManifest = read_json(manifest_path)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut pairs = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        pairs.push(LoadedPair {
            gt: read_lvol(&base.join(&e.gt))?,
            degraded: read_lvol(&base.join(&e.degraded))?,
            degradation: e.degradation,
            split: e.split.clone(),
        });
    }
    Ok((manifest, pairs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::tempdir;

    #[test]
    fn phantoms_are_deterministic_in_seed() {
        for kind in [PhantomKind::Dots, PhantomKind::Spheres, PhantomKind::Shells] {
            let mut spec = PhantomSpec::new(kind, (48, 48, 48), 5, 42);
            spec.shell_semi_axes = (6.0, 12.0);
            let a = generate_phantom::<f32>(&spec).unwrap();
            let b = generate_phantom::<f32>(&spec).unwrap();
            assert_eq!(a, b);
            spec.seed = 43;
            let c = generate_phantom::<f32>(&spec).unwrap();
            assert_ne!(a, c, "different seeds should move objects");
        }
    }

    /// A radius-3 ball around an integer center covers exactly the 123
    /// lattice points within distance 3 (brute-force count).
    #[test]
    fn single_sphere_matches_discrete_ball_oracle() {
        let mut spec = PhantomSpec::new(PhantomKind::Spheres, (24, 24, 24), 1, 7);
        spec.sphere_radius = (3.0, 3.0);
        let v = generate_phantom::<f32>(&spec).unwrap();
        let nonzero = v.data().iter().filter(|&&x| x > 0.0).count();
        let oracle = {
            let mut n = 0;
            for z in -3i32..=3 {
                for y in -3i32..=3 {
                    for x in -3i32..=3 {
                        if z * z + y * y + x * x <= 9 {
                            n += 1;
                        }
                    }
                }
            }
            n
        };
        assert_eq!(oracle, 123);
        assert_eq!(nonzero, oracle);
    }

    #[test]
    fn phantom_values_stay_on_intensity_scale() {
        for kind in [PhantomKind::Dots, PhantomKind::Spheres, PhantomKind::Shells] {
            let mut spec = PhantomSpec::new(kind, (48, 48, 48), 6, 9);
            spec.shell_semi_axes = (6.0, 12.0);
            let v = generate_phantom::<f64>(&spec).unwrap();
            assert_eq!(v.min_value(), 0.0, "background must stay zero");
            assert!(v.max_value() <= 255.0);
            for &x in v.data() {
                assert!(x == 0.0 || (128.0..=255.0).contains(&x), "hard object voxel {x} off scale");
            }
        }
        let mut soft = PhantomSpec::new(PhantomKind::Dots, (32, 32, 32), 10, 11);
        soft.soft_dots = true;
        let v = generate_phantom::<f64>(&soft).unwrap();
        assert!(v.max_value() >= 128.0, "profile peaks keep full intensity");
        assert!(v.max_value() <= 255.0);
        let faint = v.data().iter().filter(|&&x| x > 0.0 && x < 128.0).count();
        assert!(faint > 0, "soft profiles must produce sub-peak voxels");
    }

    #[test]
    fn impossible_placement_reports_progress() {
        // Semi-axes near 10 can never fit a 16-voxel extent.
        let mut spec = PhantomSpec::new(PhantomKind::Shells, (16, 16, 16), 3, 1);
        spec.shell_semi_axes = (9.9, 10.0);
        let err = generate_phantom::<f32>(&spec).unwrap_err().to_string();
        assert!(err.contains("placed 0 of 3"), "unexpected message: {err}");
    }

    #[test]
    fn phantom_rejects_tiny_volumes() {
        let spec = PhantomSpec::new(PhantomKind::Dots, (15, 32, 32), 1, 0);
        assert!(generate_phantom::<f32>(&spec).is_err());
    }

    #[test]
    fn nonzero_fraction_separates_kinds_at_default_counts() {
        let shape = (64, 64, 64);
        let scale = (64f64 / 128.0).powi(3);
        let fraction = |kind: PhantomKind| {
            let count = ((kind.default_count() as f64 * scale).round() as usize).max(1);
            let mut spec = PhantomSpec::new(kind, shape, count, 99);
            spec.shell_semi_axes = (6.0, 20.0);
            let v = generate_phantom::<f32>(&spec).unwrap();
            v.data().iter().filter(|&&x| x > 0.0).count() as f64 / v.len() as f64
        };
        let dots = fraction(PhantomKind::Dots);
        let spheres = fraction(PhantomKind::Spheres);
        let shells = fraction(PhantomKind::Shells);
        // Dots are sparsest; sphere interiors stay below shell surfaces
        // at the default counts and size ranges.
        assert!(dots < spheres, "dots {dots} vs spheres {spheres}");
        assert!(spheres < shells, "spheres {spheres} vs shells {shells}");
    }

    #[test]
    fn degrade_is_identity_without_blur_or_noise() {
        let spec = PhantomSpec::new(PhantomKind::Spheres, (24, 24, 24), 3, 5);
        let x = generate_phantom::<f32>(&spec).unwrap();
        let y = degrade(&x, &DegradationSpec::isotropic(0.0, 0.0, 9)).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn degrade_noise_standard_deviation_matches_spec() {
        let x = Volume::<f32>::filled(1, 64, 64, 64, 128.0);
        let y = degrade(&x, &DegradationSpec::isotropic(0.0, 15.0, 123)).unwrap();
        let n = x.len() as f64;
        let mean: f64 = y.data().iter().zip(x.data()).map(|(&a, &b)| (a - b) as f64).sum::<f64>() / n;
        let var: f64 =
            y.data().iter().zip(x.data()).map(|(&a, &b)| ((a - b) as f64 - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let std = var.sqrt();
        assert!((std - 15.0).abs() < 0.5, "sample noise std {std} strayed from 15");
    }

    #[test]
    fn degrade_blur_alone_preserves_mean() {
        let spec = PhantomSpec::new(PhantomKind::Spheres, (32, 32, 32), 4, 2);
        let x = generate_phantom::<f64>(&spec).unwrap();
        let y = degrade(&x, &DegradationSpec::isotropic(1.2, 0.0, 0)).unwrap();
        let rel = (y.mean_f64() - x.mean_f64()).abs() / x.mean_f64();
        assert!(rel < 1e-3, "mean drifted by relative {rel}");
    }

    #[test]
    fn degrade_is_deterministic_and_non_negative() {
        let spec = PhantomSpec::new(PhantomKind::Dots, (32, 32, 32), 30, 4);
        let x = generate_phantom::<f32>(&spec).unwrap();
        let d = DegradationSpec::isotropic(1.0, 30.0, 77);
        let a = degrade(&x, &d).unwrap();
        let b = degrade(&x, &d).unwrap();
        assert_eq!(a, b);
        assert!(a.min_value() >= 0.0, "noise must be clamped at zero");
        let c = degrade(&x, &DegradationSpec::isotropic(1.0, 30.0, 78)).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn patches_use_one_offset_per_pair() {
        let spec = PhantomSpec::new(PhantomKind::Spheres, (24, 24, 24), 3, 8);
        let deg = generate_phantom::<f32>(&spec).unwrap();
        // Ground truth = degraded + 1 makes offset alignment observable.
        let gt = deg.map(|v| v + 1.0);
        let pairs = vec![(deg, gt)];
        let crops = sample_patches(&pairs, (8, 10, 12), 50, 3).unwrap();
        assert_eq!(crops.len(), 50);
        for (d, g) in &crops {
            assert_eq!(d.shape(), (1, 8, 10, 12));
            for (a, b) in d.data().iter().zip(g.data()) {
                assert_eq!(a + 1.0, *b, "crops came from different offsets");
            }
        }
        let again = sample_patches(&pairs, (8, 10, 12), 50, 3).unwrap();
        for (x, y) in crops.iter().zip(&again) {
            assert_eq!(x.0, y.0);
            assert_eq!(x.1, y.1);
        }
    }

    #[test]
    fn full_volume_patch_returns_the_pair_itself() {
        let spec = PhantomSpec::new(PhantomKind::Dots, (16, 16, 16), 5, 1);
        let deg = generate_phantom::<f32>(&spec).unwrap();
        let gt = deg.map(|v| v * 0.5);
        let pairs = vec![(deg.clone(), gt.clone())];
        let crops = sample_patches(&pairs, (16, 16, 16), 3, 0).unwrap();
        for (d, g) in crops {
            assert_eq!(d, deg);
            assert_eq!(g, gt);
        }
    }

    #[test]
    fn oversized_patch_is_rejected() {
        let deg = Volume::<f32>::zeros(1, 16, 16, 16);
        let pairs = vec![(deg.clone(), deg)];
        assert!(sample_patches(&pairs, (17, 16, 16), 1, 0).is_err());
        assert!(sample_patches::<f32>(&[], (8, 8, 8), 1, 0).is_err());
    }

    #[test]
    fn train_mixed_dataset_has_nine_cells_per_volume() {
        let dir = tempdir().unwrap();
        let manifest = build_dataset(Regime::TrainMixed, 5, (48, 48, 48), 21, dir.path()).unwrap();
        assert_eq!(manifest.entries.len(), 45);
        let val = manifest.entries.iter().filter(|e| e.split == "val").count();
        let train = manifest.entries.iter().filter(|e| e.split == "train").count();
        assert_eq!(val, 9, "exactly the last base volume is validation");
        assert_eq!(train, 36);
        let sigmas: std::collections::BTreeSet<String> = manifest
            .entries
            .iter()
            .map(|e| format!("{:.1}/{:.0}", e.degradation.sigma_b, e.degradation.sigma_n))
            .collect();
        assert_eq!(sigmas.len(), 9);
    }

    #[test]
    fn test_grid_dataset_covers_eight_cells() {
        let dir = tempdir().unwrap();
        let manifest = build_dataset(Regime::TestGrid, 1, (48, 48, 48), 5, dir.path()).unwrap();
        assert_eq!(manifest.entries.len(), 8);
        assert!(manifest.entries.iter().all(|e| e.split == "test"));
        let blurs: std::collections::BTreeSet<String> =
            manifest.entries.iter().map(|e| format!("{}", e.degradation.sigma_b)).collect();
        assert_eq!(blurs.len(), 2);
    }

    #[test]
    fn regime_b_is_anisotropic() {
        let cells = Regime::RegimeB.cells();
        assert_eq!(cells.len(), 1);
        assert_eq!(cells[0].sigma_b_axial, Some(2.0));
        assert_eq!(cells[0].sigma_b, 0.8);
        assert_eq!(cells[0].sigma_n, 25.0);
        assert_eq!(Regime::RegimeA.cells()[0].sigma_b_axial, None);
    }

    #[test]
    fn dataset_round_trips_and_reproduces_degradation() {
        let dir = tempdir().unwrap();
        build_dataset(Regime::RegimeA, 2, (48, 48, 48), 31, dir.path()).unwrap();
        let (manifest, pairs) = load_dataset(&dir.path().join("manifest.json")).unwrap();
        assert_eq!(manifest.entries.len(), 2);
        for p in &pairs {
            let recomputed = degrade(&p.gt, &p.degradation).unwrap();
            assert_eq!(recomputed, p.degraded, "stored spec must reproduce the degraded volume bit-exactly");
        }
    }

    #[test]
    fn dataset_build_is_byte_identical_across_runs() {
        let da = tempdir().unwrap();
        let db = tempdir().unwrap();
        build_dataset(Regime::TestGrid, 1, (48, 48, 48), 77, da.path()).unwrap();
        build_dataset(Regime::TestGrid, 1, (48, 48, 48), 77, db.path()).unwrap();
        for name in ["manifest.json", "gt_000.lvol", "deg_000_c3.lvol"] {
            let a = std::fs::read(da.path().join(name)).unwrap();
            let b = std::fs::read(db.path().join(name)).unwrap();
            assert_eq!(a, b, "{name} differed between identical runs");
        }
    }

    #[test]
    fn mixed_phantom_contains_structure() {
        let v = generate_mixed_phantom::<f32>((48, 48, 48), 3).unwrap();
        let nonzero = v.data().iter().filter(|&&x| x > 0.0).count();
        assert!(nonzero > 500, "mixed phantom looks empty: {nonzero} voxels");
        assert_eq!(v, generate_mixed_phantom::<f32>((48, 48, 48), 3).unwrap());
    }

    #[test]
    fn seed_mixing_decorrelates_indices() {
        let a = mix_seed(1, 0);
        let b = mix_seed(1, 1);
        let c = mix_seed(2, 0);
        assert_ne!(a, b);
        assert_ne!(a, c);
        assert_eq!(a, mix_seed(1, 0));
    }
}
