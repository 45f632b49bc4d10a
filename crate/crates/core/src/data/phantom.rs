use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use super::{from_display, DataError, Dataset, GuidedSample, BACKGROUND, LA, LV, MYO, NUM_CLASSES};

/// Rendering constants of one simulated scanner.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StyleParams {
    /// Half opening angle of the sector, degrees.
    pub half_aperture_deg: f64,
    /// Mean display levels before speckle.
    pub tissue: f64,
    pub myocardium: f64,
    pub chamber: f64,
    /// Speckle cell size in pixels at side 64; scales with the side.
    pub grain: f64,
    /// Fractional intensity loss from apex to the bottom of the sector.
    pub attenuation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PhantomStyle {
    A,
    B,
}

impl PhantomStyle {
    pub const ALL: [PhantomStyle; 2] = [PhantomStyle::A, PhantomStyle::B];

    pub fn params(self) -> StyleParams {
        match self {
            PhantomStyle::A => StyleParams {
                half_aperture_deg: 38.0,
                tissue: 90.0,
                myocardium: 190.0,
                chamber: 25.0,
                grain: 1.0,
                attenuation: 0.35,
            },
            PhantomStyle::B => StyleParams {
                half_aperture_deg: 28.0,
                tissue: 130.0,
                myocardium: 220.0,
                chamber: 60.0,
                grain: 2.0,
                attenuation: 0.1,
            },
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            PhantomStyle::A => "a",
            PhantomStyle::B => "b",
        }
    }

    pub fn domain_tag(self) -> String {
        format!("phantom-{}", self.name())
    }
}

impl fmt::Display for PhantomStyle {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PhantomStyle {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|st| st.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| DataError::InvalidStyle {
                given: s.into(),
                valid: Self::ALL.map(PhantomStyle::name).join(", "),
            })
    }
}

/// Jittered cardiac geometry in unit coordinates (x right, y down).
#[derive(Debug, Clone, Copy)]
struct Geometry {
    lv: Ellipse,
    myo: Ellipse,
    la: Ellipse,
}

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn new(cx: f64, cy: f64, a: f64, b: f64, angle: f64) -> Self {
        Self {
            cx,
            cy,
            a,
            b,
            cos: angle.cos(),
            sin: angle.sin(),
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }
}

const APEX_Y: f64 = 0.02;
const SECTOR_RADIUS: f64 = 0.96;

impl Geometry {
    fn sample<R: Rng>(rng: &mut R) -> Self {
        let mut u = |lo: f64, hi: f64| rng.random_range(lo..hi);
        let angle = u(-0.15, 0.15);
        let (cx, cy) = (0.5 + u(-0.03, 0.03), 0.40 + u(-0.03, 0.03));
        let (a, b) = (u(0.085, 0.11), u(0.16, 0.2));
        let wall = u(0.045, 0.06);
        let lv = Ellipse::new(cx, cy, a, b, angle);
        let myo = Ellipse::new(cx, cy, a + wall, b + wall, angle);
        // atrium sits below the ventricle base, roughly along its long axis
        let base = b + wall;
        let la_b = u(0.07, 0.09);
        let gap = u(0.0, 0.02);
        let d = base + la_b + gap;
        let la = Ellipse::new(cx - d * angle.sin(), cy + d * angle.cos(), u(0.08, 0.11), la_b, angle);
        Self { lv, myo, la }
    }

    fn class_at(&self, x: f64, y: f64, in_sector: bool) -> u8 {
        if !in_sector {
            BACKGROUND
        } else if self.lv.contains(x, y) {
            LV
        } else if self.myo.contains(x, y) {
            MYO
        } else if self.la.contains(x, y) {
            LA
        } else {
            BACKGROUND
        }
    }
}

fn in_sector(x: f64, y: f64, half_aperture: f64) -> bool {
    let (dx, dy) = (x - 0.5, y - APEX_Y);
    dy > 0.0 && dx.hypot(dy) <= SECTOR_RADIUS && dx.abs().atan2(dy) <= half_aperture
}

/// Rayleigh amplitude with unit second moment, on a grid of `cells x cells`.
fn speckle_field<R: Rng>(rng: &mut R, cells: usize) -> Vec<f64> {
    (0..cells * cells)
        .map(|_| {
            let n1: f64 = rng.sample(StandardNormal);
            let n2: f64 = rng.sample(StandardNormal);
            ((n1 * n1 + n2 * n2) / 2.0).sqrt()
        })
        .collect()
}

const MAX_ATTEMPTS: usize = 64;

fn render(index: usize, side: usize, style: PhantomStyle, seed: u64) -> Result<GuidedSample, DataError> {
    let p = style.params();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    let half = p.half_aperture_deg.to_radians();
    let centers: Vec<f64> = (0..side).map(|i| (i as f64 + 0.5) / side as f64).collect();

    let mut mask = vec![BACKGROUND; side * side];
    let mut sector = vec![false; side * side];
    for attempt in 0.. {
        if attempt == MAX_ATTEMPTS {
            return Err(DataError::Invalid(format!("side {side} is too small to draw every structure")));
        }
        let geo = Geometry::sample(&mut rng);
        let mut present = [false; NUM_CLASSES];
        for (r, &y) in centers.iter().enumerate() {
            for (c, &x) in centers.iter().enumerate() {
                let inside = in_sector(x, y, half);
                sector[r * side + c] = inside;
                let code = geo.class_at(x, y, inside);
                mask[r * side + c] = code;
                present[code as usize] = true;
            }
        }
        if present.iter().all(|&p| p) {
            break;
        }
    }

    let cell_px = (p.grain * side as f64 / 64.0).max(1.0);
    let cells = (side as f64 / cell_px).ceil() as usize;
    let field = speckle_field(&mut rng, cells);
    let gain = 1.0 + 0.08 * rng.sample::<f64, _>(StandardNormal);

    let mut image = vec![0.0f32; side * side];
    for (r, &y) in centers.iter().enumerate() {
        for (c, _) in centers.iter().enumerate() {
            let i = r * side + c;
            if !sector[i] {
                image[i] = from_display(0.0);
                continue;
            }
            let base = match mask[i] {
                MYO => p.myocardium,
                LV | LA => p.chamber,
                _ => p.tissue,
            };
            let depth = (y - APEX_Y) / SECTOR_RADIUS;
            let cell = ((r as f64 / cell_px) as usize).min(cells - 1) * cells + ((c as f64 / cell_px) as usize).min(cells - 1);
            let level = base * gain * (1.0 - p.attenuation * depth) * field[cell];
            image[i] = from_display(level.round().clamp(0.0, 255.0));
        }
    }
    GuidedSample::new(format!("{}{index:04}", style.name()), side, side, image, mask, style.domain_tag())
}

/// Seeded synthetic echo-like samples: a sector field of view, a dark
/// ventricle wrapped in a bright myocardial band, and a dark atrium below,
/// with multiplicative speckle. Samples are independent per index.
pub fn generate_phantoms(n: usize, side: usize, style: PhantomStyle, seed: u64) -> Result<Dataset, DataError> {
    if n == 0 {
        return Err(DataError::Invalid("phantom count must be at least 1".into()));
    }
    if side < 16 {
        return Err(DataError::Invalid(format!("phantom side {side} is below the minimum of 16")));
    }
    let samples = (0..n).into_par_iter().map(|i| render(i, side, style, seed)).collect::<Result<Vec<_>, _>>()?;
    Dataset::new(samples, style.domain_tag(), format!("phantom style={style} seed={seed} side={side} n={n}"))
}
