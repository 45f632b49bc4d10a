//! Guided samples, mask encoding, preprocessing, and dataset storage.

mod io;
mod phantom;
mod resize;

use std::collections::HashSet;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::models::GuideMode;
use crate::tensor::{Scalar, Tensor};

pub use io::{load_dataset, read_manifest, write_dataset, ManifestEntry, MANIFEST_FILE};
pub use phantom::{generate_phantoms, PhantomStyle, StyleParams};
pub use resize::{resize_image, resize_mask};

pub const BACKGROUND: u8 = 0;
pub const LV: u8 = 1;
pub const MYO: u8 = 2;
pub const LA: u8 = 3;
pub const NUM_CLASSES: usize = 4;

/// Display level (0-255) of each class code, indexed by code.
pub const CLASS_GRAY_LEVELS: [u8; NUM_CLASSES] = [0, 255, 170, 85];

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("dataset at {0} is empty")]
    EmptyDataset(PathBuf),
    #[error("no manifest found at {0}")]
    MissingManifest(PathBuf),
    #[error("manifest line {line}: {msg}")]
    ManifestSyntax { line: usize, msg: String },
    #[error("manifest line {line}: domain `{found}` differs from `{expected}`")]
    DomainMismatch { line: usize, expected: String, found: String },
    #[error("unpaired files (image without mask or mask without image): {}", .0.join(", "))]
    UnpairedFiles(Vec<String>),
    #[error("{path}: {msg}")]
    Image { path: PathBuf, msg: String },
    #[error("sample `{id}`: invalid mask value {value}")]
    InvalidMask { id: String, value: u8 },
    #[error("unknown class code {0}")]
    UnknownClass(u8),
    #[error("sample `{id}`: image is {image:?} but mask is {mask:?}")]
    ShapeMismatch { id: String, image: (usize, usize), mask: (usize, usize) },
    #[error("sample `{id}` has size {got:?}, dataset uses {expected:?}")]
    MixedSizes {
        id: String,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("duplicate sample id `{0}`")]
    DuplicateId(String),
    #[error("unknown phantom style `{given}` (valid: {valid})")]
    InvalidStyle { given: String, valid: String },
    #[error("invalid split: {0}")]
    Split(String),
    #[error("invalid argument: {0}")]
    Invalid(String),
}

/// Intensity image paired with its anatomical class map.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidedSample {
    pub id: String,
    pub width: usize,
    pub height: usize,
    /// Row-major intensities in `[-1, 1]`.
    pub image: Vec<f32>,
    /// Row-major class codes.
    pub mask: Vec<u8>,
    pub domain_tag: String,
}

impl GuidedSample {
    pub fn new(id: impl Into<String>, width: usize, height: usize, image: Vec<f32>, mask: Vec<u8>, domain_tag: impl Into<String>) -> Result<Self, DataError> {
        let id = id.into();
        if image.len() != width * height || mask.len() != width * height {
            return Err(DataError::ShapeMismatch {
                id,
                image: (width, image.len() / width.max(1)),
                mask: (width, mask.len() / width.max(1)),
            });
        }
        if let Some(&bad) = mask.iter().find(|&&c| c as usize >= NUM_CLASSES) {
            return Err(DataError::InvalidMask { id, value: bad });
        }
        Ok(Self {
            id,
            width,
            height,
            image,
            mask,
            domain_tag: domain_tag.into(),
        })
    }

    /// `[1, 1, h, w]` intensity tensor.
    pub fn image_tensor<F: Scalar>(&self) -> Tensor<F> {
        let data = self.image.iter().map(|&v| F::from_f64_lossy(v as f64)).collect();
        Tensor::from_vec(&[1, 1, self.height, self.width], data).expect("validated shape")
    }

    /// `[1, c, h, w]` guide tensor for the given encoding.
    pub fn guide_tensor<F: Scalar>(&self, mode: GuideMode) -> Tensor<F> {
        let (c, data): (usize, Vec<F>) = match mode {
            GuideMode::Gray => (
                1,
                encode_mask_gray(&self.mask)
                    .expect("validated mask")
                    .into_iter()
                    .map(|v| F::from_f64_lossy(v as f64))
                    .collect(),
            ),
            GuideMode::OneHot => (
                NUM_CLASSES,
                encode_mask_one_hot(&self.mask).into_iter().map(|v| F::from_f64_lossy(v as f64)).collect(),
            ),
        };
        Tensor::from_vec(&[1, c, self.height, self.width], data).expect("validated shape")
    }
}

/// Ordered samples sharing one domain and one spatial size.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub samples: Vec<GuidedSample>,
    pub domain_tag: String,
    pub provenance: String,
}

impl Dataset {
    pub fn new(samples: Vec<GuidedSample>, domain_tag: impl Into<String>, provenance: impl Into<String>) -> Result<Self, DataError> {
        let ds = Self {
            samples,
            domain_tag: domain_tag.into(),
            provenance: provenance.into(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let mut seen = HashSet::new();
        let size = self.samples.first().map(|s| (s.width, s.height));
        for s in &self.samples {
            if !seen.insert(s.id.as_str()) {
                return Err(DataError::DuplicateId(s.id.clone()));
            }
            if Some((s.width, s.height)) != size {
                return Err(DataError::MixedSizes {
                    id: s.id.clone(),
                    expected: size.unwrap_or_default(),
                    got: (s.width, s.height),
                });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `(width, height)` shared by all samples.
    pub fn size(&self) -> Option<(usize, usize)> {
        self.samples.first().map(|s| (s.width, s.height))
    }

    pub fn ids(&self) -> Vec<&str> {
        self.samples.iter().map(|s| s.id.as_str()).collect()
    }
}

/// `[-1, 1]` to the 0-255 display scale.
pub fn to_display(v: f32) -> f64 {
    (v as f64 + 1.0) * 127.5
}

/// 0-255 display scale to `[-1, 1]`.
pub fn from_display(v: f64) -> f32 {
    (v / 127.5 - 1.0) as f32
}

/// Rounds to the nearest 8-bit display level, as stored on disk.
pub fn quantize(v: f32) -> u8 {
    to_display(v).round().clamp(0.0, 255.0) as u8
}

/// Snaps every value to an 8-bit display level so in-memory images equal
/// what a write/load round trip produces.
pub fn quantize_image(image: &mut [f32]) {
    for v in image {
        *v = from_display(quantize(*v) as f64);
    }
}

/// Gray-level guide: background 0, LA 85, MYO 170, LV 255 on the display
/// scale, mapped to `[-1, 1]`.
pub fn encode_mask_gray(mask: &[u8]) -> Result<Vec<f32>, DataError> {
    mask.iter()
        .map(|&c| {
            CLASS_GRAY_LEVELS
                .get(c as usize)
                .map(|&level| from_display(level as f64))
                .ok_or(DataError::UnknownClass(c))
        })
        .collect()
}

/// Inverts [`encode_mask_gray`] by snapping to the nearest gray level.
pub fn decode_mask_gray(guide: &[f32]) -> Vec<u8> {
    guide.iter().map(|&v| class_of_level(to_display(v))).collect()
}

/// Class code of the gray level nearest to a display value.
pub fn class_of_level(display: f64) -> u8 {
    let mut best = (f64::INFINITY, 0u8);
    for (code, &level) in CLASS_GRAY_LEVELS.iter().enumerate() {
        let d = (display - level as f64).abs();
        if d < best.0 {
            best = (d, code as u8);
        }
    }
    best.1
}

/// One plane per class code holding 1 inside the class and 0 elsewhere.
pub fn encode_mask_one_hot(mask: &[u8]) -> Vec<f32> {
    let mut out = vec![0.0; NUM_CLASSES * mask.len()];
    for (i, &c) in mask.iter().enumerate() {
        out[(c as usize).min(NUM_CLASSES - 1) * mask.len() + i] = 1.0;
    }
    out
}

/// Seeded shuffle, then the first `round(n * fraction)` samples train.
pub fn split(dataset: &Dataset, fraction: f64, seed: u64) -> Result<(Dataset, Dataset), DataError> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(DataError::Split(format!("fraction {fraction} must lie in (0, 1)")));
    }
    let n = dataset.len();
    let n_train = (n as f64 * fraction).round() as usize;
    if n_train == 0 || n_train == n {
        return Err(DataError::Split(format!("{n} samples at fraction {fraction} leave one side empty")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let pick = |idx: &[usize]| Dataset {
        samples: idx.iter().map(|&i| dataset.samples[i].clone()).collect(),
        domain_tag: dataset.domain_tag.clone(),
        provenance: dataset.provenance.clone(),
    };
    Ok((pick(&order[..n_train]), pick(&order[n_train..])))
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn tiny(n: usize) -> Dataset {
        let samples = (0..n)
            .map(|i| GuidedSample::new(format!("s{i}"), 2, 2, vec![0.0; 4], vec![0, 1, 2, 3], "d").unwrap())
            .collect();
        Dataset::new(samples, "d", "test").unwrap()
    }

    #[test]
    fn gray_levels() {
        let g = encode_mask_gray(&[BACKGROUND; 5]).unwrap();
        assert!(g.iter().all(|&v| v == -1.0));
        let g = encode_mask_gray(&[LV, MYO, LA]).unwrap();
        assert_eq!(quantize(g[0]), 255);
        assert_eq!(quantize(g[1]), 170);
        assert_eq!(quantize(g[2]), 85);
        assert!(matches!(encode_mask_gray(&[4]), Err(DataError::UnknownClass(4))));
    }

    #[test]
    fn split_counts() {
        let (a, b) = split(&tiny(450), 0.9, 1).unwrap();
        assert_eq!((a.len(), b.len()), (405, 45));
        let (a, b) = split(&tiny(200), 0.9, 1).unwrap();
        assert_eq!((a.len(), b.len()), (180, 20));
        let (c, _) = split(&tiny(200), 0.9, 1).unwrap();
        assert_eq!(a, c);
        assert!(split(&tiny(3), 0.9, 1).is_err());
        assert!(split(&tiny(10), 1.0, 1).is_err());
    }

    #[test]
    fn sample_validation() {
        assert!(matches!(
            GuidedSample::new("x", 2, 2, vec![0.0; 4], vec![0, 1, 2, 7], "d"),
            Err(DataError::InvalidMask { value: 7, .. })
        ));
        assert!(GuidedSample::new("x", 2, 2, vec![0.0; 3], vec![0; 4], "d").is_err());
        let mut s = tiny(2).samples;
        s[1].id = "s0".into();
        assert!(matches!(Dataset::new(s, "d", ""), Err(DataError::DuplicateId(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]

        #[test]
        fn gray_encoding_round_trips(mask in proptest::collection::vec(0u8..4, 1..300)) {
            let g = encode_mask_gray(&mask).unwrap();
            prop_assert_eq!(decode_mask_gray(&g), mask);
        }

        #[test]
        fn split_is_disjoint_and_exhaustive(n in 2usize..400, seed in any::<u64>(), frac in 0.05f64..0.95) {
            let ds = tiny(n);
            match split(&ds, frac, seed) {
                Ok((a, b)) => {
                    let mut ids: Vec<String> = a.samples.iter().chain(&b.samples).map(|s| s.id.clone()).collect();
                    prop_assert_eq!(ids.len(), n);
                    ids.sort();
                    ids.dedup();
                    prop_assert_eq!(ids.len(), n);
                }
                Err(_) => {
                    let k = (n as f64 * frac).round() as usize;
                    prop_assert!(k == 0 || k == n);
                }
            }
        }
    }
}
