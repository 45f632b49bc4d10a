use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::{GrayImage, ImageFormat};
use rayon::prelude::*;

use super::{class_of_level, from_display, quantize, DataError, Dataset, GuidedSample, CLASS_GRAY_LEVELS, NUM_CLASSES};

pub const MANIFEST_FILE: &str = "manifest.txt";
const IMAGE_DIR: &str = "images";
const MASK_DIR: &str = "masks";
const PROVENANCE_PREFIX: &str = "# provenance: ";

/// One manifest record.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub id: String,
    pub image: String,
    pub mask: String,
    pub domain: String,
    pub line: usize,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn valid_field(s: &str) -> bool {
    !s.is_empty() && !s.contains([',', '\n', '\r']) && s.trim() == s
}

/// Parses manifest text. Returns the entries and the provenance note.
pub fn read_manifest(text: &str) -> Result<(Vec<ManifestEntry>, String), DataError> {
    let mut entries: Vec<ManifestEntry> = Vec::new();
    let mut provenance = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if let Some(p) = raw.strip_prefix(PROVENANCE_PREFIX) {
            provenance = p.to_string();
            continue;
        }
        if raw.starts_with('#') || raw.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = raw.split(',').collect();
        if fields.len() != 4 {
            return Err(DataError::ManifestSyntax {
                line,
                msg: format!("expected 4 comma-separated fields, found {}", fields.len()),
            });
        }
        if let Some(bad) = fields.iter().find(|f| !valid_field(f)) {
            return Err(DataError::ManifestSyntax {
                line,
                msg: format!("empty or padded field `{bad}`"),
            });
        }
        let entry = ManifestEntry {
            id: fields[0].into(),
            image: fields[1].into(),
            mask: fields[2].into(),
            domain: fields[3].into(),
            line,
        };
        if let Some(first) = entries.first() {
            if first.domain != entry.domain {
                return Err(DataError::DomainMismatch {
                    line,
                    expected: first.domain.clone(),
                    found: entry.domain,
                });
            }
        }
        for rel in [&entry.image, &entry.mask] {
            if Path::new(rel).is_absolute() || rel.split('/').any(|c| c == "..") {
                return Err(DataError::ManifestSyntax {
                    line,
                    msg: format!("path `{rel}` must be relative to the dataset root"),
                });
            }
        }
        entries.push(entry);
    }
    Ok((entries, provenance))
}

fn stems(dir: &Path) -> Result<BTreeSet<String>, DataError> {
    let mut out = BTreeSet::new();
    if !dir.is_dir() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.extension().is_some_and(|e| e == "png") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string());
            }
        }
    }
    Ok(out)
}

fn read_gray(path: &Path) -> Result<GrayImage, DataError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let img = image::load_from_memory_with_format(&bytes, ImageFormat::Png).map_err(|e| DataError::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    match img {
        image::DynamicImage::ImageLuma8(g) => Ok(g),
        other => Err(DataError::Image {
            path: path.to_path_buf(),
            msg: format!("expected 8-bit grayscale, found {:?}", other.color()),
        }),
    }
}

/// Mask pixels may hold raw class codes (0-3) or their gray levels.
fn mask_code(id: &str, v: u8) -> Result<u8, DataError> {
    if (v as usize) < NUM_CLASSES {
        return Ok(v);
    }
    let code = class_of_level(v as f64);
    if CLASS_GRAY_LEVELS[code as usize] == v {
        Ok(code)
    } else {
        Err(DataError::InvalidMask { id: id.into(), value: v })
    }
}

fn load_sample(root: &Path, e: &ManifestEntry) -> Result<GuidedSample, DataError> {
    let img = read_gray(&root.join(&e.image))?;
    let mask = read_gray(&root.join(&e.mask))?;
    if img.dimensions() != mask.dimensions() {
        let d = |g: &GrayImage| (g.width() as usize, g.height() as usize);
        return Err(DataError::ShapeMismatch {
            id: e.id.clone(),
            image: d(&img),
            mask: d(&mask),
        });
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    let image = img.as_raw().iter().map(|&v| from_display(v as f64)).collect();
    let mask = mask.as_raw().iter().map(|&v| mask_code(&e.id, v)).collect::<Result<_, _>>()?;
    GuidedSample::new(e.id.clone(), w, h, image, mask, e.domain.clone())
}

/// Reads a dataset directory: `manifest.txt`, `images/`, `masks/`.
pub fn load_dataset(root: impl AsRef<Path>) -> Result<Dataset, DataError> {
    let root = root.as_ref();
    let image_stems = stems(&root.join(IMAGE_DIR))?;
    let mask_stems = stems(&root.join(MASK_DIR))?;
    let manifest_path = root.join(MANIFEST_FILE);
    if !manifest_path.is_file() {
        if image_stems.is_empty() && mask_stems.is_empty() {
            return Err(DataError::EmptyDataset(root.to_path_buf()));
        }
        return Err(DataError::MissingManifest(manifest_path));
    }
    let unpaired: Vec<String> = image_stems
        .symmetric_difference(&mask_stems)
        .map(|s| {
            if image_stems.contains(s) {
                format!("images/{s}.png")
            } else {
                format!("masks/{s}.png")
            }
        })
        .collect();
    if !unpaired.is_empty() {
        return Err(DataError::UnpairedFiles(unpaired));
    }
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let (entries, provenance) = read_manifest(&text)?;
    if entries.is_empty() {
        return Err(DataError::EmptyDataset(root.to_path_buf()));
    }
    let samples = entries.par_iter().map(|e| load_sample(root, e)).collect::<Result<Vec<_>, _>>()?;
    let domain = entries[0].domain.clone();
    Dataset::new(samples, domain, provenance)
}

fn write_png(path: &Path, w: usize, h: usize, pixels: Vec<u8>) -> Result<(), DataError> {
    let img = GrayImage::from_raw(w as u32, h as u32, pixels).expect("pixel count matches size");
    img.save_with_format(path, ImageFormat::Png).map_err(|e| DataError::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// Writes `ds` under `root`, creating directories as needed. Images are
/// quantized to 8 bits; masks are stored as gray levels.
pub fn write_dataset(ds: &Dataset, root: impl AsRef<Path>) -> Result<PathBuf, DataError> {
    let root = root.as_ref();
    ds.validate()?;
    for tag in [&ds.domain_tag].into_iter().chain(ds.samples.iter().map(|s| &s.domain_tag)) {
        if !valid_field(tag) {
            return Err(DataError::Invalid(format!("domain tag `{tag}` cannot be stored in a manifest")));
        }
        if tag != &ds.domain_tag {
            return Err(DataError::Invalid(format!(
                "sample domain `{tag}` differs from dataset domain `{}`",
                ds.domain_tag
            )));
        }
    }
    for s in &ds.samples {
        if !valid_field(&s.id) || s.id.contains(['/', '\\']) || s.id.starts_with('.') {
            return Err(DataError::Invalid(format!("sample id `{}` cannot be used as a file stem", s.id)));
        }
    }
    for dir in [IMAGE_DIR, MASK_DIR] {
        let d = root.join(dir);
        fs::create_dir_all(&d).map_err(io_err(&d))?;
    }
    ds.samples.par_iter().try_for_each(|s| {
        let pixels = s.image.iter().map(|&v| quantize(v)).collect();
        write_png(&root.join(IMAGE_DIR).join(format!("{}.png", s.id)), s.width, s.height, pixels)?;
        let levels = s.mask.iter().map(|&c| CLASS_GRAY_LEVELS[c as usize]).collect();
        write_png(&root.join(MASK_DIR).join(format!("{}.png", s.id)), s.width, s.height, levels)
    })?;
    let mut text = String::from("# echodiff dataset manifest: id,image,mask,domain\n");
    if !ds.provenance.is_empty() {
        text.push_str(PROVENANCE_PREFIX);
        text.push_str(&ds.provenance.replace(['\n', '\r'], " "));
        text.push('\n');
    }
    for s in &ds.samples {
        text.push_str(&format!("{id},{IMAGE_DIR}/{id}.png,{MASK_DIR}/{id}.png,{}\n", ds.domain_tag, id = s.id));
    }
    let path = root.join(MANIFEST_FILE);
    fs::write(&path, text).map_err(io_err(&path))?;
    Ok(path)
}
