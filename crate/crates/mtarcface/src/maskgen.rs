//! Synthetic mask rendering and masked-twin dataset generation.
//!
//! Masks are rendered as a flat-color polygon fill (per-type base colors,
//! optional random color, optional procedural texture) over the nose-mouth
//! region of a canonically aligned face. Geometry comes from a fixed
//! five-landmark template instead of a landmark detector: inputs are already
//! aligned, so the mask region is known up to a small per-image jitter.
//!
//! Everything here is a pure function of its arguments; the only randomness
//! is in [`sample_mask_spec`], which consumes a caller-provided stream keyed
//! by `(master_seed, global image index)`.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::datamodel::{load_face, save_face, AlignedFace, DatasetManifest};
use crate::rng::{self, Domain};
use crate::{Error, Result};

/// Jitter amplitude as a fraction of the image side.
pub const JITTER_FRACTION: f64 = 0.02;

/// Minimum polygon area after clamping, as a fraction of the image area.
const MIN_AREA_FRACTION: f64 = 0.05;

/// The six supported mask types.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum MaskType {
    Surgical,
    SurgicalGreen,
    SurgicalBlue,
    N95,
    Cloth,
    Kn95,
}

impl MaskType {
    pub const ALL: [MaskType; 6] = [
        MaskType::Surgical,
        MaskType::SurgicalGreen,
        MaskType::SurgicalBlue,
        MaskType::N95,
        MaskType::Cloth,
        MaskType::Kn95,
    ];

    /// Flat base fill color.
    pub fn base_color(self) -> [u8; 3] {
        match self {
            MaskType::Surgical => [120, 170, 185],
            MaskType::SurgicalGreen => [88, 158, 120],
            MaskType::SurgicalBlue => [70, 118, 200],
            MaskType::N95 => [228, 224, 214],
            MaskType::Cloth => [84, 84, 94],
            MaskType::Kn95 => [242, 242, 238],
        }
    }
}

/// A fully sampled per-image mask description.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSpec {
    pub mask_type: MaskType,
    /// Random color override, present iff drawn (probability 0.5).
    pub color_rgb: Option<[u8; 3]>,
    /// Procedural texture id in [0, 16), present iff drawn (probability 0.5).
    pub texture_id: Option<u8>,
    /// Offset applied to the polygon, as fractions of the image side,
    /// each component in [-JITTER_FRACTION, +JITTER_FRACTION].
    pub jitter: [f64; 2],
}

/// Mask polygon and the canonical landmark template, in fractions of the
/// image side.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskGeometry {
    /// Ordered boundary: nose bridge across the cheeks down to the chin.
    pub polygon: Vec<[f64; 2]>,
    /// Canonical 5-landmark template: left eye, right eye, nose tip,
    /// left mouth corner, right mouth corner.
    pub anchor_points: [[f64; 2]; 5],
}

/// The standard 112x112 alignment landmark positions, as fractions.
pub const CANONICAL_LANDMARKS: [[f64; 2]; 5] = [
    [38.2946 / 112.0, 51.6963 / 112.0],
    [73.5318 / 112.0, 51.5014 / 112.0],
    [56.0252 / 112.0, 71.7366 / 112.0],
    [41.5493 / 112.0, 92.3655 / 112.0],
    [70.7299 / 112.0, 92.2041 / 112.0],
];

impl Default for MaskGeometry {
    fn default() -> Self {
        // Upper edge sits below the eye line (y >= 0.47; the top 35% of the
        // image stays clear even at maximum jitter), sides hug the cheeks,
        // bottom wraps the chin.
        MaskGeometry {
            polygon: vec![
                [0.17, 0.70],
                [0.19, 0.52],
                [0.36, 0.47],
                [0.64, 0.47],
                [0.81, 0.52],
                [0.83, 0.70],
                [0.69, 0.93],
                [0.50, 0.985],
                [0.31, 0.93],
            ],
            anchor_points: CANONICAL_LANDMARKS,
        }
    }
}

impl MaskGeometry {
    /// Validate that the polygon covers the nose tip and both mouth corners.
    pub fn validate(&self) -> Result<()> {
        if self.polygon.len() < 3 {
            return Err(Error::MaskGeometryInvalid(format!(
                "polygon has {} vertices",
                self.polygon.len()
            )));
        }
        for (label, anchor) in [
            ("nose tip", self.anchor_points[2]),
            ("left mouth corner", self.anchor_points[3]),
            ("right mouth corner", self.anchor_points[4]),
        ] {
            if !point_in_polygon(anchor[0], anchor[1], &self.polygon) {
                return Err(Error::MaskGeometryInvalid(format!(
                    "polygon does not cover the {label}"
                )));
            }
        }
        Ok(())
    }

    /// Polygon in pixel coordinates after jitter and clamping to the image.
    fn pixel_polygon(&self, jitter: [f64; 2], side: usize) -> Vec<[f64; 2]> {
        let s = side as f64;
        self.polygon
            .iter()
            .map(|p| {
                [
                    ((p[0] + jitter[0]) * s).clamp(0.0, s - 1.0),
                    ((p[1] + jitter[1]) * s).clamp(0.0, s - 1.0),
                ]
            })
            .collect()
    }
}

/// Draw a [`MaskSpec`] from a keyed stream.
///
/// Draw order is fixed: type, color flag (then color), texture flag (then
/// texture id), jitter x, jitter y.
pub fn sample_mask_spec(rng_state: &mut ChaCha8Rng) -> MaskSpec {
    sample_mask_spec_with(rng_state, JITTER_FRACTION)
}

/// [`sample_mask_spec`] with a custom jitter amplitude (fraction of side).
pub fn sample_mask_spec_with(rng_state: &mut ChaCha8Rng, jitter_fraction: f64) -> MaskSpec {
    let mask_type = MaskType::ALL[rng_state.random_range(0..6)];
    let color_rgb = if rng_state.random_bool(0.5) {
        Some([
            rng_state.random::<u8>(),
            rng_state.random::<u8>(),
            rng_state.random::<u8>(),
        ])
    } else {
        None
    };
    let texture_id = if rng_state.random_bool(0.5) {
        Some(rng_state.random_range(0..16u8))
    } else {
        None
    };
    let jitter = if jitter_fraction > 0.0 {
        [
            rng_state.random_range(-jitter_fraction..=jitter_fraction),
            rng_state.random_range(-jitter_fraction..=jitter_fraction),
        ]
    } else {
        [0.0, 0.0]
    };
    MaskSpec {
        mask_type,
        color_rgb,
        texture_id,
        jitter,
    }
}

/// The stream a given image's spec is drawn from.
pub fn spec_stream(master_seed: u64, image_index: u64) -> ChaCha8Rng {
    rng::stream(master_seed, Domain::MaskSpec, &[image_index])
}

/// Even-odd crossing test against polygon edges. `x`/`y` and the polygon
/// must be in the same coordinate space.
fn point_in_polygon(x: f64, y: f64, polygon: &[[f64; 2]]) -> bool {
    let mut inside = false;
    let n = polygon.len();
    let mut j = n - 1;
    for i in 0..n {
        let (xi, yi) = (polygon[i][0], polygon[i][1]);
        let (xj, yj) = (polygon[j][0], polygon[j][1]);
        if (yi > y) != (yj > y) {
            let x_cross = xi + (y - yi) / (yj - yi) * (xj - xi);
            if x < x_cross {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

fn polygon_area(polygon: &[[f64; 2]]) -> f64 {
    let n = polygon.len();
    let mut acc = 0.0;
    for i in 0..n {
        let j = (i + 1) % n;
        acc += polygon[i][0] * polygon[j][1] - polygon[j][0] * polygon[i][1];
    }
    acc.abs() / 2.0
}

/// Pixel membership raster for a jittered geometry at a given image side.
pub fn rasterize_mask(geometry: &MaskGeometry, jitter: [f64; 2], side: usize) -> Vec<bool> {
    let poly = geometry.pixel_polygon(jitter, side);
    let mut out = vec![false; side * side];
    for y in 0..side {
        for x in 0..side {
            out[y * side + x] = point_in_polygon(x as f64 + 0.5, y as f64 + 0.5, &poly);
        }
    }
    out
}

/// Integer hash for the speckle texture.
fn pixel_hash(x: u64, y: u64, id: u64) -> u64 {
    let mut h = x.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ y.wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    h ^= id.wrapping_mul(0x1656_67b1_9e37_79f9);
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    h
}

/// Signed texture modulation in [-1, 1] for a pixel.
///
/// Even ids are stripe fields (angle and period keyed by id), odd ids are
/// 2x2-block speckle.
fn texture_value(id: u8, x: usize, y: usize, side: usize) -> f64 {
    let s = side as f64;
    if id.is_multiple_of(2) {
        let k = (id / 2) as f64;
        let angle = k * std::f64::consts::PI / 8.0;
        let period = 0.04 + 0.015 * k; // fraction of side
        let u = (x as f64 / s) * angle.cos() + (y as f64 / s) * angle.sin();
        (2.0 * std::f64::consts::PI * u / period).sin()
    } else {
        let h = pixel_hash((x / 2) as u64, (y / 2) as u64, id as u64);
        (h >> 11) as f64 / ((1u64 << 53) as f64) * 2.0 - 1.0
    }
}

/// Fill color for a masked pixel.
fn fill_color(spec: &MaskSpec, x: usize, y: usize, side: usize) -> [u8; 3] {
    let base = spec
        .color_rgb
        .unwrap_or_else(|| spec.mask_type.base_color());
    match spec.texture_id {
        None => base,
        Some(id) => {
            let t = texture_value(id, x, y, side);
            let delta = (t * 26.0).round() as i32;
            [
                (base[0] as i32 + delta).clamp(0, 255) as u8,
                (base[1] as i32 + delta).clamp(0, 255) as u8,
                (base[2] as i32 + delta).clamp(0, 255) as u8,
            ]
        }
    }
}

/// Render a mask onto a face. Pixels outside the polygon are untouched.
pub fn apply_mask(
    face: &AlignedFace,
    spec: &MaskSpec,
    geometry: &MaskGeometry,
) -> Result<AlignedFace> {
    geometry.validate()?;
    let side = face.side;
    let poly = geometry.pixel_polygon(spec.jitter, side);
    let area = polygon_area(&poly);
    if area < MIN_AREA_FRACTION * (side * side) as f64 {
        return Err(Error::MaskGeometryInvalid(format!(
            "polygon area {:.1} px^2 is below {}% of the image",
            area,
            MIN_AREA_FRACTION * 100.0
        )));
    }

    let mut out = face.clone();
    for y in 0..side {
        for x in 0..side {
            if point_in_polygon(x as f64 + 0.5, y as f64 + 0.5, &poly) {
                out.set_rgb(x, y, fill_color(spec, x, y, side));
            }
        }
    }
    Ok(out)
}

/// Generate the masked twin of a dataset in `out_root`, preserving identity
/// directories and file names.
///
/// Each image's spec comes from the stream keyed by `(master_seed, global
/// image index)`, so the output is independent of processing order and of
/// `workers`. Any geometry failure is fatal: a twin with holes would break
/// the mirroring invariant.
pub fn build_masked_twin(
    manifest: &DatasetManifest,
    master_seed: u64,
    out_root: &Path,
    workers: usize,
) -> Result<DatasetManifest> {
    build_masked_twin_with(manifest, master_seed, out_root, workers, JITTER_FRACTION)
}

/// [`build_masked_twin`] with a custom jitter amplitude.
pub fn build_masked_twin_with(
    manifest: &DatasetManifest,
    master_seed: u64,
    out_root: &Path,
    workers: usize,
    jitter_fraction: f64,
) -> Result<DatasetManifest> {
    let geometry = MaskGeometry::default();
    geometry.validate()?;
    fs::create_dir_all(out_root).map_err(|e| Error::io(out_root, e))?;

    // (global index, source path, destination path)
    let mut jobs = Vec::with_capacity(manifest.num_images);
    for (label, entry) in manifest.identities.iter().enumerate() {
        let out_dir = out_root.join(&entry.name);
        fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
        for (file_index, file) in entry.files.iter().enumerate() {
            jobs.push((
                manifest.global_index(label, file_index) as u64,
                manifest.root_path.join(&entry.name).join(file),
                out_dir.join(file),
            ));
        }
    }

    let mask_one =
        |(gidx, src, dst): &(u64, std::path::PathBuf, std::path::PathBuf)| -> Result<()> {
            let face = load_face(src, None)?;
            let mut stream = spec_stream(master_seed, *gidx);
            let spec = sample_mask_spec_with(&mut stream, jitter_fraction);
            let masked = apply_mask(&face, &spec, &geometry)?;
            save_face(&masked, dst)
        };

    if workers > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::Dataset(format!("thread pool: {e}")))?;
        pool.install(|| jobs.par_iter().try_for_each(mask_one))?;
    } else {
        jobs.iter().try_for_each(mask_one)?;
    }

    Ok(DatasetManifest {
        root_path: out_root.to_path_buf(),
        identities: manifest.identities.clone(),
        num_images: manifest.num_images,
        masked_twin: true,
    })
}
