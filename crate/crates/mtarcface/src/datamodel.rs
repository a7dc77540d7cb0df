//! Core types, dataset on-disk layout, and protocol-file parsing.
//!
//! A dataset is a directory tree `<root>/<identity>/<image>.png`. Identity
//! labels are assigned by lexicographic directory order, so two loads of the
//! same tree always agree. A "masked twin" is a second tree with identical
//! identity names and file names where every image carries a rendered mask.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Image sizes accepted for a run.
pub const VALID_SIZES: [usize; 3] = [32, 64, 112];

/// Fixed-size RGB face crop in canonical alignment.
///
/// Pixels are stored row-major as `[r, g, b]` triples; `side * side * 3`
/// bytes in total.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignedFace {
    pub side: usize,
    pub pixels: Vec<u8>,
    /// Opaque provenance string (usually `<identity>/<file>`).
    pub source_id: String,
}

impl AlignedFace {
    pub fn new(side: usize, pixels: Vec<u8>, source_id: impl Into<String>) -> Result<Self> {
        if !VALID_SIZES.contains(&side) {
            return Err(Error::Dataset(format!(
                "unsupported face size {side} (expected one of {VALID_SIZES:?})"
            )));
        }
        if pixels.len() != side * side * 3 {
            return Err(Error::Dataset(format!(
                "pixel buffer has {} bytes, expected {}",
                pixels.len(),
                side * side * 3
            )));
        }
        Ok(AlignedFace {
            side,
            pixels,
            source_id: source_id.into(),
        })
    }

    pub fn rgb(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.side + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set_rgb(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.side + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }
}

/// The training atom: a face, its identity label, and whether it is masked.
#[derive(Debug, Clone)]
pub struct SampleRecord {
    pub face: AlignedFace,
    pub identity_label: usize,
    /// 0 = unmasked, 1 = masked.
    pub mask_flag: u8,
}

/// One identity directory: its name and the sorted image file names.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdentityEntry {
    pub name: String,
    pub files: Vec<String>,
}

/// Validated view of a dataset tree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetManifest {
    pub root_path: PathBuf,
    /// Sorted by name; the index in this vector is the identity label.
    pub identities: Vec<IdentityEntry>,
    pub num_images: usize,
    /// Whether this tree is the masked twin of another dataset.
    pub masked_twin: bool,
}

impl DatasetManifest {
    /// Number of identities C.
    pub fn num_identities(&self) -> usize {
        self.identities.len()
    }

    /// Path of the image at `(identity_label, file_index)`.
    pub fn image_path(&self, identity: usize, file_index: usize) -> PathBuf {
        let entry = &self.identities[identity];
        self.root_path
            .join(&entry.name)
            .join(&entry.files[file_index])
    }

    /// Global image index of `(identity_label, file_index)`: identities in
    /// label order, files in sorted order within each identity.
    pub fn global_index(&self, identity: usize, file_index: usize) -> usize {
        let before: usize = self.identities[..identity]
            .iter()
            .map(|e| e.files.len())
            .sum();
        before + file_index
    }

    /// Inverse of [`global_index`](Self::global_index).
    pub fn locate(&self, global_index: usize) -> (usize, usize) {
        let mut remaining = global_index;
        for (label, entry) in self.identities.iter().enumerate() {
            if remaining < entry.files.len() {
                return (label, remaining);
            }
            remaining -= entry.files.len();
        }
        panic!(
            "global index {global_index} out of range (N = {})",
            self.num_images
        );
    }

    /// Restrict the manifest to a sub-range of each identity's files.
    ///
    /// `keep` receives `(file_index, file_count)` and decides membership.
    /// Used to carve held-out images off the back of every identity.
    pub fn filter_files<F: Fn(usize, usize) -> bool>(&self, keep: F) -> DatasetManifest {
        let identities: Vec<IdentityEntry> = self
            .identities
            .iter()
            .map(|e| IdentityEntry {
                name: e.name.clone(),
                files: e
                    .files
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| keep(*i, e.files.len()))
                    .map(|(_, f)| f.clone())
                    .collect(),
            })
            .collect();
        let num_images = identities.iter().map(|e| e.files.len()).sum();
        DatasetManifest {
            root_path: self.root_path.clone(),
            identities,
            num_images,
            masked_twin: self.masked_twin,
        }
    }

    /// Split into (training view, held-out view): the last
    /// `holdout_per_identity` files of every identity are held out.
    pub fn split_holdout(
        &self,
        holdout_per_identity: usize,
    ) -> Result<(DatasetManifest, DatasetManifest)> {
        for e in &self.identities {
            if e.files.len() <= holdout_per_identity {
                return Err(Error::Dataset(format!(
                    "identity '{}' has {} images, cannot hold out {}",
                    e.name,
                    e.files.len(),
                    holdout_per_identity
                )));
            }
        }
        let train = self.filter_files(|i, n| i < n - holdout_per_identity);
        let held = self.filter_files(|i, n| i >= n - holdout_per_identity);
        Ok((train, held))
    }
}

/// Scan a dataset tree and build its manifest.
///
/// Identity labels follow lexicographic directory order. Fails if the root is
/// missing, an identity directory is empty, or a listed image is not a
/// readable file.
pub fn load_manifest(root_path: &Path) -> Result<DatasetManifest> {
    let entries = fs::read_dir(root_path).map_err(|e| Error::io(root_path, e))?;
    let mut dirs: Vec<String> = Vec::new();
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(root_path, e))?;
        let ty = entry.file_type().map_err(|e| Error::io(entry.path(), e))?;
        if ty.is_dir() {
            dirs.push(entry.file_name().to_string_lossy().into_owned());
        }
    }
    if dirs.is_empty() {
        return Err(Error::Dataset(format!(
            "{}: no identity directories found",
            root_path.display()
        )));
    }
    dirs.sort();

    let mut identities = Vec::with_capacity(dirs.len());
    let mut num_images = 0usize;
    for name in dirs {
        let dir = root_path.join(&name);
        let mut files: Vec<String> = Vec::new();
        for entry in fs::read_dir(&dir).map_err(|e| Error::io(&dir, e))? {
            let entry = entry.map_err(|e| Error::io(&dir, e))?;
            let path = entry.path();
            let is_file = entry
                .file_type()
                .map_err(|e| Error::io(&path, e))?
                .is_file();
            if !is_file {
                continue;
            }
            if path.extension().and_then(|s| s.to_str()) != Some("png") {
                continue;
            }
            // Catch unreadable files now rather than mid-training.
            fs::metadata(&path).map_err(|e| Error::io(&path, e))?;
            files.push(entry.file_name().to_string_lossy().into_owned());
        }
        if files.is_empty() {
            return Err(Error::Dataset(format!(
                "identity directory {} contains no images",
                dir.display()
            )));
        }
        files.sort();
        num_images += files.len();
        identities.push(IdentityEntry { name, files });
    }

    Ok(DatasetManifest {
        root_path: root_path.to_path_buf(),
        identities,
        num_images,
        masked_twin: false,
    })
}

/// Check that `masked` mirrors `original` exactly: same identity set, same
/// per-identity file names.
pub fn validate_twins(original: &DatasetManifest, masked: &DatasetManifest) -> Result<()> {
    if original.identities.len() != masked.identities.len() {
        return Err(Error::TwinMismatch(format!(
            "identity counts differ: {} vs {}",
            original.identities.len(),
            masked.identities.len()
        )));
    }
    for (a, b) in original.identities.iter().zip(&masked.identities) {
        if a.name != b.name {
            return Err(Error::TwinMismatch(format!(
                "identity name mismatch: '{}' vs '{}'",
                a.name, b.name
            )));
        }
        if a.files != b.files {
            return Err(Error::TwinMismatch(format!(
                "file lists differ for identity '{}'",
                a.name
            )));
        }
    }
    Ok(())
}

/// Decode one image into an [`AlignedFace`], validating size constraints.
pub fn load_face(path: &Path, expect_side: Option<usize>) -> Result<AlignedFace> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    if w != h {
        return Err(Error::Image {
            path: path.to_path_buf(),
            msg: format!("not square: {w}x{h}"),
        });
    }
    if let Some(s) = expect_side {
        if w != s {
            return Err(Error::Image {
                path: path.to_path_buf(),
                msg: format!("size {w} does not match run size {s}"),
            });
        }
    }
    AlignedFace::new(w, rgb.into_raw(), path.to_string_lossy().into_owned()).map_err(|e| match e {
        Error::Dataset(msg) => Error::Image {
            path: path.to_path_buf(),
            msg,
        },
        other => other,
    })
}

/// Write an [`AlignedFace`] as a PNG.
pub fn save_face(face: &AlignedFace, path: &Path) -> Result<()> {
    let img = image::RgbImage::from_raw(face.side as u32, face.side as u32, face.pixels.clone())
        .expect("pixel buffer length checked at construction");
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// All images of a manifest decoded into memory, in global-index order.
#[derive(Debug, Clone)]
pub struct FaceStore {
    pub manifest: DatasetManifest,
    pub faces: Vec<AlignedFace>,
    /// identity label per global index.
    pub labels: Vec<usize>,
    pub side: usize,
}

impl FaceStore {
    pub fn load(manifest: &DatasetManifest) -> Result<FaceStore> {
        let mut faces = Vec::with_capacity(manifest.num_images);
        let mut labels = Vec::with_capacity(manifest.num_images);
        let mut side: Option<usize> = None;
        for (label, entry) in manifest.identities.iter().enumerate() {
            for file in &entry.files {
                let path = manifest.root_path.join(&entry.name).join(file);
                let face = load_face(&path, side)?;
                side = Some(face.side);
                faces.push(face);
                labels.push(label);
            }
        }
        Ok(FaceStore {
            manifest: manifest.clone(),
            side: side.expect("manifest has at least one image"),
            faces,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.faces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }
}

/// The evaluation atom: two faces and whether they share an identity.
#[derive(Debug, Clone)]
pub struct VerificationPair {
    pub face_a: AlignedFace,
    pub face_b: AlignedFace,
    pub same_identity: bool,
}

/// Parse a pairs protocol file against a manifest, decoding the referenced
/// images.
///
/// Line formats (whitespace-separated, blank lines ignored):
/// - `<identity> <img_idx_a> <img_idx_b>` — positive pair
/// - `<identity_a> <img_idx_a> <identity_b> <img_idx_b>` — negative pair
///
/// Image indices are 0-based positions in the identity's sorted file list.
pub fn parse_pairs_file(path: &Path, manifest: &DatasetManifest) -> Result<Vec<VerificationPair>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let by_name: BTreeMap<&str, usize> = manifest
        .identities
        .iter()
        .enumerate()
        .map(|(i, e)| (e.name.as_str(), i))
        .collect();

    let mut cache: BTreeMap<(usize, usize), AlignedFace> = BTreeMap::new();
    let mut fetch = |identity: usize, file_index: usize| -> Result<AlignedFace> {
        if let Some(face) = cache.get(&(identity, file_index)) {
            return Ok(face.clone());
        }
        let face = load_face(&manifest.image_path(identity, file_index), None)?;
        cache.insert((identity, file_index), face.clone());
        Ok(face)
    };

    let mut pairs = Vec::new();
    for (line_no, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let bad = |msg: String| Error::PairsFormat {
            path: path.to_path_buf(),
            line: line_no + 1,
            msg,
        };

        let lookup = |name: &str| -> Result<usize> {
            by_name
                .get(name)
                .copied()
                .ok_or_else(|| bad(format!("unknown identity '{name}'")))
        };
        let index = |s: &str| -> Result<usize> {
            s.parse::<usize>()
                .map_err(|_| bad(format!("invalid image index '{s}'")))
        };
        let check_range = |identity: usize, ix: usize| -> Result<()> {
            let entry = &manifest.identities[identity];
            if ix >= entry.files.len() {
                return Err(bad(format!(
                    "image index {ix} out of range for identity '{}' ({} images)",
                    entry.name,
                    entry.files.len()
                )));
            }
            Ok(())
        };

        match fields.len() {
            3 => {
                let id = lookup(fields[0])?;
                let a = index(fields[1])?;
                let b = index(fields[2])?;
                check_range(id, a)?;
                check_range(id, b)?;
                pairs.push(VerificationPair {
                    face_a: fetch(id, a)?,
                    face_b: fetch(id, b)?,
                    same_identity: true,
                });
            }
            4 => {
                let id_a = lookup(fields[0])?;
                let a = index(fields[1])?;
                let id_b = lookup(fields[2])?;
                let b = index(fields[3])?;
                check_range(id_a, a)?;
                check_range(id_b, b)?;
                pairs.push(VerificationPair {
                    face_a: fetch(id_a, a)?,
                    face_b: fetch(id_b, b)?,
                    same_identity: false,
                });
            }
            n => {
                return Err(bad(format!("expected 3 or 4 fields, found {n}")));
            }
        }
    }
    Ok(pairs)
}

/// JSON sidecar mirroring the manifest's counting fields.
#[derive(Debug, Serialize, Deserialize)]
pub struct ManifestCache {
    pub num_identities: usize,
    pub num_images: usize,
    pub identity_labels: BTreeMap<String, usize>,
}

/// Write the optional `manifest.json` sidecar into the dataset root.
pub fn write_manifest_cache(manifest: &DatasetManifest) -> Result<PathBuf> {
    let cache = ManifestCache {
        num_identities: manifest.num_identities(),
        num_images: manifest.num_images,
        identity_labels: manifest
            .identities
            .iter()
            .enumerate()
            .map(|(i, e)| (e.name.clone(), i))
            .collect(),
    };
    let path = manifest.root_path.join("manifest.json");
    let json = serde_json::to_string_pretty(&cache)
        .map_err(|e| Error::Dataset(format!("manifest cache: {e}")))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}
