//! Synthetic "face-like" dataset generation.
//!
//! No real face dataset ships with the repository, so the toy experiments
//! run on procedurally generated identities: each identity is a smooth
//! color field plus eye/nose/mouth glyphs with identity-keyed parameters at
//! the canonical landmark positions; each image adds a small shift,
//! brightness jitter, and pixel noise.
//!
//! The lower face (the region a mask covers) deliberately carries the
//! strongest identity signal: the mouth glyph and the high-contrast lower
//! color field. The upper face varies less between identities. A model
//! trained only on unmasked images therefore leans on features that a mask
//! destroys, while the upper region still carries enough signal to
//! discriminate identities when the lower half is covered.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::datamodel::{save_face, AlignedFace, DatasetManifest, IdentityEntry};
use crate::maskgen::CANONICAL_LANDMARKS;
use crate::rng::{self, Domain};
use crate::{Error, Result};

/// Fixture shape parameters.
#[derive(Debug, Clone)]
pub struct FixtureConfig {
    pub num_identities: usize,
    pub images_per_identity: usize,
    pub size: usize,
    /// Images per identity reserved (by convention, the lexicographic tail)
    /// for held-out evaluation; the generated pairs file references only
    /// these.
    pub holdout_per_identity: usize,
    /// Verification pairs per fold in the generated pairs file (half
    /// positive, half negative).
    pub pairs_per_fold: usize,
    pub folds: usize,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        FixtureConfig {
            num_identities: 20,
            images_per_identity: 50,
            size: 32,
            holdout_per_identity: 10,
            pairs_per_fold: 60,
            folds: 10,
        }
    }
}

impl FixtureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_identities < 2 {
            return Err(Error::Config("fixture needs >= 2 identities".into()));
        }
        if self.holdout_per_identity >= self.images_per_identity {
            return Err(Error::Config(format!(
                "holdout {} must be below images per identity {}",
                self.holdout_per_identity, self.images_per_identity
            )));
        }
        if self.holdout_per_identity < 2 {
            return Err(Error::Config("fixture needs >= 2 held-out images".into()));
        }
        if !self.pairs_per_fold.is_multiple_of(2) {
            return Err(Error::Config("pairs_per_fold must be even".into()));
        }
        Ok(())
    }
}

/// Identity-keyed appearance parameters.
struct IdentityStyle {
    /// 4x4 RGB control grid, bilinearly upsampled over the whole image.
    grid: [[[f64; 3]; 4]; 4],
    eye_radius: f64,
    eye_color: [f64; 3],
    mouth_half_width: f64,
    mouth_thickness: f64,
    mouth_curve: f64,
    mouth_color: [f64; 3],
    nose_color: [f64; 3],
    nose_dx: f64,
}

fn sample_style(stream: &mut ChaCha8Rng) -> IdentityStyle {
    let mut grid = [[[0.0f64; 3]; 4]; 4];
    for (gy, row) in grid.iter_mut().enumerate() {
        for cell in row.iter_mut() {
            for ch in cell.iter_mut() {
                // Upper rows: muted palette around mid-gray. Lower rows:
                // full-contrast palette (identity is easiest to read off
                // the region a mask would cover).
                *ch = if gy < 2 {
                    128.0 + stream.random_range(-38.0..38.0)
                } else {
                    stream.random_range(30.0..226.0)
                };
            }
        }
    }
    IdentityStyle {
        grid,
        eye_radius: stream.random_range(0.045..0.085),
        eye_color: [
            stream.random_range(15.0..95.0),
            stream.random_range(15.0..95.0),
            stream.random_range(15.0..95.0),
        ],
        mouth_half_width: stream.random_range(0.09..0.16),
        mouth_thickness: stream.random_range(0.025..0.055),
        mouth_curve: stream.random_range(-0.04..0.04),
        mouth_color: [
            stream.random_range(110.0..210.0),
            stream.random_range(15.0..75.0),
            stream.random_range(35.0..105.0),
        ],
        nose_color: [
            stream.random_range(40.0..120.0),
            stream.random_range(40.0..120.0),
            stream.random_range(40.0..120.0),
        ],
        nose_dx: stream.random_range(-0.02..0.02),
    }
}

/// Bilinear sample of the 4x4 control grid at pixel (x, y).
fn field_color(style: &IdentityStyle, x: f64, y: f64, size: f64) -> [f64; 3] {
    let u = (x / (size - 1.0)) * 3.0;
    let v = (y / (size - 1.0)) * 3.0;
    let (u0, v0) = (u.floor().min(2.0) as usize, v.floor().min(2.0) as usize);
    let (fu, fv) = (u - u0 as f64, v - v0 as f64);
    let mut out = [0.0f64; 3];
    for (ch, v) in out.iter_mut().enumerate() {
        let c00 = style.grid[v0][u0][ch];
        let c10 = style.grid[v0][u0 + 1][ch];
        let c01 = style.grid[v0 + 1][u0][ch];
        let c11 = style.grid[v0 + 1][u0 + 1][ch];
        *v = c00 * (1.0 - fu) * (1.0 - fv)
            + c10 * fu * (1.0 - fv)
            + c01 * (1.0 - fu) * fv
            + c11 * fu * fv;
    }
    out
}

/// The identity's base canvas: color field plus face glyphs at the
/// canonical landmarks.
fn render_base(style: &IdentityStyle, size: usize) -> Vec<[f64; 3]> {
    let s = size as f64;
    let mut canvas = vec![[0.0f64; 3]; size * size];
    for y in 0..size {
        for x in 0..size {
            canvas[y * size + x] = field_color(style, x as f64, y as f64, s);
        }
    }

    let mut blend = |cx: f64, cy: f64, rx: f64, ry: f64, color: [f64; 3], weight: f64| {
        let x0 = ((cx - rx).floor().max(0.0)) as usize;
        let x1 = ((cx + rx).ceil().min(s - 1.0)) as usize;
        let y0 = ((cy - ry).floor().max(0.0)) as usize;
        let y1 = ((cy + ry).ceil().min(s - 1.0)) as usize;
        for y in y0..=y1 {
            for x in x0..=x1 {
                let dx = (x as f64 - cx) / rx;
                let dy = (y as f64 - cy) / ry;
                if dx * dx + dy * dy <= 1.0 {
                    let px = &mut canvas[y * size + x];
                    for ch in 0..3 {
                        px[ch] = px[ch] * (1.0 - weight) + color[ch] * weight;
                    }
                }
            }
        }
    };

    let [left_eye, right_eye, nose, mouth_l, mouth_r] = CANONICAL_LANDMARKS;
    let er = style.eye_radius * s;
    blend(
        left_eye[0] * s,
        left_eye[1] * s,
        er,
        er,
        style.eye_color,
        0.9,
    );
    blend(
        right_eye[0] * s,
        right_eye[1] * s,
        er,
        er,
        style.eye_color,
        0.9,
    );
    blend(
        (nose[0] + style.nose_dx) * s,
        nose[1] * s,
        0.035 * s,
        0.06 * s,
        style.nose_color,
        0.8,
    );

    // Mouth: a curved bar through the two mouth-corner landmarks.
    let mouth_y = (mouth_l[1] + mouth_r[1]) / 2.0;
    let cx = 0.5 * s;
    let cy = (mouth_y + style.mouth_curve) * s;
    blend(
        cx,
        cy,
        style.mouth_half_width * s,
        style.mouth_thickness * s,
        style.mouth_color,
        0.95,
    );

    canvas
}

/// One image: base canvas, integer shift, brightness jitter, pixel noise.
fn render_image(
    base: &[[f64; 3]],
    size: usize,
    stream: &mut ChaCha8Rng,
    source_id: String,
) -> AlignedFace {
    let shift_x = stream.random_range(-2i64..=2) as isize;
    let shift_y = stream.random_range(-2i64..=2) as isize;
    let brightness = stream.random_range(-12.0..12.0);
    let mut pixels = Vec::with_capacity(size * size * 3);
    for y in 0..size as isize {
        for x in 0..size as isize {
            let sx = (x - shift_x).clamp(0, size as isize - 1) as usize;
            let sy = (y - shift_y).clamp(0, size as isize - 1) as usize;
            let px = base[sy * size + sx];
            for ch in px {
                let noise = stream.random_range(-16.0..16.0);
                pixels.push((ch + brightness + noise).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    AlignedFace::new(size, pixels, source_id).expect("valid fixture face")
}

fn identity_name(i: usize) -> String {
    format!("id_{i:03}")
}

fn image_name(j: usize) -> String {
    format!("img_{j:03}.png")
}

/// Generate the fixture tree plus a verification pairs file over the
/// held-out tail of every identity. Returns the manifest and the pairs
/// file path.
pub fn make_fixture(
    out_root: &Path,
    seed: u64,
    cfg: &FixtureConfig,
) -> Result<(DatasetManifest, PathBuf)> {
    cfg.validate()?;
    fs::create_dir_all(out_root).map_err(|e| Error::io(out_root, e))?;

    let mut identities = Vec::with_capacity(cfg.num_identities);
    for i in 0..cfg.num_identities {
        let name = identity_name(i);
        let dir = out_root.join(&name);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;

        let mut id_stream = rng::stream(seed, Domain::Fixture, &[1, i as u64]);
        let style = sample_style(&mut id_stream);
        let base = render_base(&style, cfg.size);

        let mut files = Vec::with_capacity(cfg.images_per_identity);
        for j in 0..cfg.images_per_identity {
            let file = image_name(j);
            let mut img_stream = rng::stream(seed, Domain::Fixture, &[2, i as u64, j as u64]);
            let face = render_image(&base, cfg.size, &mut img_stream, format!("{name}/{file}"));
            save_face(&face, &dir.join(&file))?;
            files.push(file);
        }
        identities.push(IdentityEntry { name, files });
    }

    let manifest = DatasetManifest {
        root_path: out_root.to_path_buf(),
        identities,
        num_images: cfg.num_identities * cfg.images_per_identity,
        masked_twin: false,
    };

    let pairs_path = out_root.join("pairs.txt");
    let pairs_text = generate_pairs(seed, cfg);
    fs::write(&pairs_path, pairs_text).map_err(|e| Error::io(&pairs_path, e))?;

    Ok((manifest, pairs_path))
}

/// Pairs file over held-out image indices: per fold, half positive then
/// half negative lines, so contiguous folds stay class-balanced.
fn generate_pairs(seed: u64, cfg: &FixtureConfig) -> String {
    let mut stream = rng::stream(seed, Domain::Pairs, &[]);
    let first_holdout = cfg.images_per_identity - cfg.holdout_per_identity;
    let mut out = String::new();
    for _fold in 0..cfg.folds {
        for _ in 0..cfg.pairs_per_fold / 2 {
            let id = stream.random_range(0..cfg.num_identities);
            let a = first_holdout + stream.random_range(0..cfg.holdout_per_identity);
            let b = loop {
                let b = first_holdout + stream.random_range(0..cfg.holdout_per_identity);
                if b != a {
                    break b;
                }
            };
            out.push_str(&format!("{} {a} {b}\n", identity_name(id)));
        }
        for _ in 0..cfg.pairs_per_fold / 2 {
            let id_a = stream.random_range(0..cfg.num_identities);
            let id_b = loop {
                let id_b = stream.random_range(0..cfg.num_identities);
                if id_b != id_a {
                    break id_b;
                }
            };
            let a = first_holdout + stream.random_range(0..cfg.holdout_per_identity);
            let b = first_holdout + stream.random_range(0..cfg.holdout_per_identity);
            out.push_str(&format!(
                "{} {a} {} {b}\n",
                identity_name(id_a),
                identity_name(id_b)
            ));
        }
    }
    out
}
