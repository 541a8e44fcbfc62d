//! Synthetic scenes with nested and adjacent structures.
//!
//! Two layouts are available. `Thigh` draws a bright disk ("bone") inside a
//! ring ("fat") inside an outer ring that is split into two half-rings
//! ("muscle_a", "muscle_b") along a random diameter; the two half-rings are the
//! adjacent pair a super label merges. `Cardiac` draws a blood pool disk, a
//! myocardium ring around it and a crescent-shaped second chamber touching the
//! ring; every foreground structure forms the super label.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{derive_seed, DataError};
use crate::labelspace::{LabelId, LabelMap, LabelScheme, SuperLabel};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Thigh,
    Cardiac,
}

impl Preset {
    pub fn scheme(self) -> LabelScheme {
        let (names, members, super_name): (&[&str], &[LabelId], &str) = match self {
            Preset::Thigh => (&["background", "bone", "fat", "muscle_a", "muscle_b"], &[3, 4], "muscle"),
            Preset::Cardiac => (&["background", "cavity", "myocardium", "chamber"], &[1, 2, 3], "heart"),
        };
        let sup = SuperLabel { id: names.len() as LabelId, members: members.iter().copied().collect(), name: Some(super_name.into()) };
        LabelScheme::with_names(names.len(), vec![sup], names.iter().map(|s| s.to_string()).collect()).expect("preset scheme is valid")
    }

    pub fn super_id(self) -> LabelId {
        self.scheme().super_labels()[0].id
    }

    /// Mean intensity per base label.
    pub fn intensities(self) -> &'static [f64] {
        match self {
            Preset::Thigh => &[0.10, 0.95, 0.40, 0.25, 0.55],
            Preset::Cardiac => &[0.10, 0.85, 0.35, 0.60],
        }
    }

    /// Expected pixel share band per base label on a 64×64 canvas.
    pub fn share_bands(self) -> &'static [(f64, f64)] {
        match self {
            Preset::Thigh => &[(0.40, 0.70), (0.02, 0.10), (0.10, 0.32), (0.02, 0.14), (0.02, 0.14)],
            Preset::Cardiac => &[(0.60, 0.95), (0.02, 0.10), (0.02, 0.12), (0.02, 0.20)],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeometryConfig {
    pub preset: Preset,
    pub height: usize,
    pub width: usize,
    /// Standard deviation of the additive Gaussian noise.
    pub noise_sigma: f64,
    /// Peak magnitude of a random linear intensity ramp across the image.
    pub bias_amplitude: f64,
}

impl Default for GeometryConfig {
    fn default() -> Self {
        Self { preset: Preset::Thigh, height: 64, width: 64, noise_sigma: 0.05, bias_amplitude: 0.0 }
    }
}

/// Parameters a scene was drawn with.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneProvenance {
    pub seed: u64,
    /// Generator attempts before every label was present.
    pub attempts: u32,
    pub center: (f64, f64),
    /// Radii of the nested boundaries, innermost first.
    pub radii: Vec<f64>,
    /// Orientation of the splitting diameter or of the second chamber.
    pub angle: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// H×W×1, values in [0, 1].
    pub image: Tensor,
    pub labels: LabelMap,
    pub provenance: SceneProvenance,
}

const MAX_ATTEMPTS: u32 = 32;

/// Draws a deterministic scene for `seed`.
pub fn generate_scene(seed: u64, geometry: &GeometryConfig) -> Result<Scene, DataError> {
    let scheme = geometry.preset.scheme();
    let n = scheme.num_base_labels();
    if !(4..=8).contains(&n) {
        return Err(DataError::Geometry(format!("scenes need 4 to 8 base labels, scheme has {n}")));
    }
    if geometry.height < 32 || geometry.width < 32 {
        return Err(DataError::Geometry(format!("{}x{} is below the 32x32 minimum", geometry.height, geometry.width)));
    }
    if geometry.height > usize::from(u16::MAX) || geometry.width > usize::from(u16::MAX) {
        return Err(DataError::Geometry("image too large".into()));
    }
    if !(geometry.noise_sigma >= 0.0 && geometry.noise_sigma.is_finite()) || !(geometry.bias_amplitude >= 0.0 && geometry.bias_amplitude.is_finite()) {
        return Err(DataError::Geometry("noise_sigma and bias_amplitude must be finite and non-negative".into()));
    }
    for attempt in 0..MAX_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, u64::from(attempt)));
        let (labels, mut provenance) = match geometry.preset {
            Preset::Thigh => thigh_layout(&mut rng, geometry.height, geometry.width),
            Preset::Cardiac => cardiac_layout(&mut rng, geometry.height, geometry.width),
        };
        if (0..n).any(|id| labels.count(id as LabelId) == 0) {
            continue;
        }
        provenance.seed = seed;
        provenance.attempts = attempt + 1;
        let image = render(&mut rng, &labels, geometry);
        return Ok(Scene { image, labels, provenance });
    }
    Err(DataError::Geometry(format!("no scene with every label after {MAX_ATTEMPTS} attempts")))
}

fn render(rng: &mut ChaCha8Rng, labels: &LabelMap, geometry: &GeometryConfig) -> Tensor {
    let means = geometry.preset.intensities();
    let (h, w) = (labels.height, labels.width);
    let (gx, gy) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
    let norm = f64::max(f64::abs(gx) + f64::abs(gy), 1e-12);
    let noise = Normal::new(0.0, geometry.noise_sigma.max(0.0)).expect("sigma checked");
    let mut data = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let mut v = means[usize::from(labels.get(r, c))];
            if geometry.bias_amplitude > 0.0 {
                let (u, t) = (2.0 * c as f64 / (w - 1) as f64 - 1.0, 2.0 * r as f64 / (h - 1) as f64 - 1.0);
                v += geometry.bias_amplitude * (gx * u + gy * t) / norm;
            }
            if geometry.noise_sigma > 0.0 {
                v += noise.sample(rng);
            }
            // Stored as f32 on disk; keep memory and disk identical.
            data.push(f64::from(v.clamp(0.0, 1.0) as f32));
        }
    }
    Tensor::new(vec![h, w, 1], data).expect("shape")
}

/// Elliptic radius of pixel (r, c) around `center` with semi-axes scaled by
/// (1 ± ecc), plus the polar angle.
fn polar(r: usize, c: usize, center: (f64, f64), ecc: f64) -> (f64, f64) {
    let dy = r as f64 + 0.5 - center.0;
    let dx = c as f64 + 0.5 - center.1;
    let rho = ((dx / (1.0 + ecc)).powi(2) + (dy / (1.0 - ecc)).powi(2)).sqrt();
    (rho, dy.atan2(dx))
}

fn thigh_layout(rng: &mut ChaCha8Rng, h: usize, w: usize) -> (LabelMap, SceneProvenance) {
    let scale = h.min(w) as f64 / 64.0;
    let center = (h as f64 / 2.0 + rng.random_range(-3.0..3.0) * scale, w as f64 / 2.0 + rng.random_range(-3.0..3.0) * scale);
    let outer = rng.random_range(20.0..25.0) * scale;
    let bone = outer * rng.random_range(0.30..0.38);
    let fat = outer * rng.random_range(0.76..0.84);
    let ecc = rng.random_range(-0.08..0.08);
    let angle = rng.random_range(-PI..PI);
    // Muscle A covers half the ring give or take a random margin.
    let span = PI + rng.random_range(-0.5..0.5);
    let mut values = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let (rho, theta) = polar(r, c, center, ecc);
            let id = if rho < bone {
                1
            } else if rho < fat {
                2
            } else if rho < outer {
                let rel = (theta - angle).rem_euclid(2.0 * PI);
                if rel < span {
                    3
                } else {
                    4
                }
            } else {
                0
            };
            values.push(id);
        }
    }
    let provenance = SceneProvenance { seed: 0, attempts: 0, center, radii: vec![bone, fat, outer], angle };
    (LabelMap { height: h, width: w, values }, provenance)
}

fn cardiac_layout(rng: &mut ChaCha8Rng, h: usize, w: usize) -> (LabelMap, SceneProvenance) {
    let scale = h.min(w) as f64 / 64.0;
    let center = (h as f64 / 2.0 + rng.random_range(-4.0..4.0) * scale, w as f64 / 2.0 + rng.random_range(-4.0..4.0) * scale);
    let cavity = rng.random_range(6.0..9.0) * scale;
    let wall = cavity + rng.random_range(3.0..5.0) * scale;
    let ecc = rng.random_range(-0.1..0.1);
    let angle = rng.random_range(-PI..PI);
    let chamber_r = wall * rng.random_range(0.9..1.2);
    let offset = wall + chamber_r * 0.45;
    let chamber_center = (center.0 + offset * angle.sin(), center.1 + offset * angle.cos());
    let mut values = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let (rho, _) = polar(r, c, center, ecc);
            let (rho2, _) = polar(r, c, chamber_center, 0.0);
            let id = if rho < cavity {
                1
            } else if rho < wall {
                2
            } else if rho2 < chamber_r {
                3
            } else {
                0
            };
            values.push(id);
        }
    }
    let provenance = SceneProvenance { seed: 0, attempts: 0, center, radii: vec![cavity, wall, chamber_r], angle };
    (LabelMap { height: h, width: w, values }, provenance)
}
