use super::DisplayImage;

pub const HANDCRAFTED_ID: &str = "handcrafted-v1";
const GRID: usize = 8;
const BINS: usize = 16;
pub const HANDCRAFTED_DIM: usize = GRID * GRID + BINS + 3;

/// Maps an image to a fixed-length feature vector for distribution
/// comparison. The identifier is stamped into every report.
pub trait FeatureExtractor: Sync {
    fn id(&self) -> &str;
    fn dim(&self) -> usize;
    fn extract(&self, image: &DisplayImage) -> Vec<f64>;
}

/// 8x8 block means, a 16-bin intensity histogram, and the mean, standard
/// deviation and maximum of the gradient magnitude. Intensities are
/// divided by 255 and histogram bins hold pixel fractions.
#[derive(Debug, Clone, Copy, Default)]
pub struct HandcraftedExtractor;

impl FeatureExtractor for HandcraftedExtractor {
    fn id(&self) -> &str {
        HANDCRAFTED_ID
    }

    fn dim(&self) -> usize {
        HANDCRAFTED_DIM
    }

    fn extract(&self, img: &DisplayImage) -> Vec<f64> {
        let (w, h) = (img.width, img.height);
        let px = |x: usize, y: usize| img.pixels[y * w + x];
        let mut out = Vec::with_capacity(HANDCRAFTED_DIM);

        for by in 0..GRID {
            let (y0, y1) = (by * h / GRID, ((by + 1) * h / GRID).max(by * h / GRID + 1).min(h));
            for bx in 0..GRID {
                let (x0, x1) = (bx * w / GRID, ((bx + 1) * w / GRID).max(bx * w / GRID + 1).min(w));
                let mut s = 0.0;
                for y in y0..y1 {
                    for x in x0..x1 {
                        s += px(x, y);
                    }
                }
                out.push(s / ((y1 - y0) * (x1 - x0)) as f64 / 255.0);
            }
        }

        let mut hist = [0.0; BINS];
        for &v in &img.pixels {
            let bin = ((v / (256.0 / BINS as f64)).floor().max(0.0) as usize).min(BINS - 1);
            hist[bin] += 1.0;
        }
        out.extend(hist.iter().map(|c| c / img.pixels.len() as f64));

        let mut mags = Vec::with_capacity(w.saturating_sub(1) * h.saturating_sub(1));
        for y in 0..h.saturating_sub(1) {
            for x in 0..w.saturating_sub(1) {
                let gx = px(x + 1, y) - px(x, y);
                let gy = px(x, y + 1) - px(x, y);
                mags.push(gx.hypot(gy) / 255.0);
            }
        }
        let (mean, std, max) = if mags.is_empty() {
            (0.0, 0.0, 0.0)
        } else {
            let n = mags.len() as f64;
            let mean = mags.iter().sum::<f64>() / n;
            let var = mags.iter().map(|m| (m - mean).powi(2)).sum::<f64>() / n;
            (mean, var.sqrt(), mags.iter().copied().fold(0.0, f64::max))
        };
        out.extend([mean, std, max]);
        out
    }
}

/// Features from the default extractor.
pub fn extract_features(image: &DisplayImage) -> Vec<f64> {
    HandcraftedExtractor.extract(image)
}
