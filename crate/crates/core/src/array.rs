//! Array geometry, directions and far-field steering responses.
//!
//! A plane wave arriving from direction `Ω` produces, on an open array, the
//! entry `exp(i k û(Ω)·r_q)` where `û` points from the array center toward the
//! source. The rigid-sphere model expands the same wave in spherical harmonics
//! and replaces the free-field radial terms with the rigid-sphere ones:
//! `h_q = Σ_n i^n (2n+1) b_n(ka) P_n(û·r̂_q)`, truncated at `sh_order`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::DirectionGrid;
use crate::special::{legendre_into, rigid_sphere_radial};

pub const SPEED_OF_SOUND: f64 = 343.0;

pub type Vec3 = [f64; 3];

pub(crate) fn dot(a: &Vec3, b: &Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn norm(a: &Vec3) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
pub(crate) fn sub(a: &Vec3, b: &Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

/// Wrap an angle to (-π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    w
}

/// A direction on the unit sphere. Elevation is the polar angle from +z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Direction {
    pub elevation: f64,
    pub azimuth: f64,
}

impl Direction {
    /// Builds a direction, clamping elevation to [0, π] and wrapping azimuth.
    pub fn new(elevation: f64, azimuth: f64) -> Self {
        Direction {
            elevation: elevation.clamp(0.0, PI),
            azimuth: wrap_angle(azimuth),
        }
    }

    pub fn from_degrees(elevation_deg: f64, azimuth_deg: f64) -> Self {
        Self::new(elevation_deg.to_radians(), azimuth_deg.to_radians())
    }

    /// Direction of a (not necessarily normalized) nonzero vector.
    pub fn from_vector(v: &Vec3) -> Self {
        let r = norm(v);
        let z = (v[2] / r).clamp(-1.0, 1.0);
        Self::new(z.acos(), v[1].atan2(v[0]))
    }

    pub fn unit_vector(&self) -> Vec3 {
        let (st, ct) = self.elevation.sin_cos();
        let (sp, cp) = self.azimuth.sin_cos();
        [st * cp, st * sp, ct]
    }

    /// Great-circle angle in [0, π].
    pub fn angle_to(&self, other: &Direction) -> f64 {
        let a = self.unit_vector();
        let b = other.unit_vector();
        // atan2 form stays accurate for nearly identical directions
        let cross = [
            a[1] * b[2] - a[2] * b[1],
            a[2] * b[0] - a[0] * b[2],
            a[0] * b[1] - a[1] * b[0],
        ];
        norm(&cross).atan2(dot(&a, &b))
    }

    /// Absolute azimuth difference wrapped to [0, π].
    pub fn azimuth_distance(&self, other: &Direction) -> f64 {
        wrap_angle(self.azimuth - other.azimuth).abs()
    }

    /// Mirror image through the horizontal plane.
    pub fn mirrored(&self) -> Direction {
        Direction::new(PI - self.elevation, self.azimuth)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ArrayModel {
    RigidSphere { radius: f64 },
    Open,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayGeometry {
    pub label: String,
    pub mic_positions: Vec<Vec3>,
    pub model: ArrayModel,
    pub sh_order: usize,
    #[serde(default = "default_c")]
    pub speed_of_sound: f64,
}

fn default_c() -> f64 {
    SPEED_OF_SOUND
}

const EM32_RADIUS: f64 = 0.042;

impl ArrayGeometry {
    pub fn new(
        label: impl Into<String>,
        mic_positions: Vec<Vec3>,
        model: ArrayModel,
        sh_order: usize,
    ) -> Result<Self> {
        let geometry = ArrayGeometry {
            label: label.into(),
            mic_positions,
            model,
            sh_order,
            speed_of_sound: SPEED_OF_SOUND,
        };
        geometry.validate()?;
        Ok(geometry)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mic_positions.is_empty() {
            return Err(Error::InvalidGeometry("array needs at least one microphone".into()));
        }
        if self.mic_positions.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidGeometry("non-finite microphone position".into()));
        }
        if !(self.speed_of_sound > 0.0) {
            return Err(Error::invalid("array.speed_of_sound", "must be positive"));
        }
        if let ArrayModel::RigidSphere { radius } = self.model {
            if !(radius > 0.0) {
                return Err(Error::invalid("array.radius", "must be positive"));
            }
            for (q, p) in self.mic_positions.iter().enumerate() {
                if (norm(p) - radius).abs() > 1e-9 {
                    return Err(Error::InvalidGeometry(format!(
                        "microphone {q} is not on the rigid sphere of radius {radius}"
                    )));
                }
            }
        }
        Ok(())
    }

    /// 32 capsules on the face centers of a truncated icosahedron, rigid
    /// sphere of radius 4.2 cm.
    pub fn em32_like() -> Self {
        let phi = (1.0 + 5f64.sqrt()) / 2.0;
        let mut dirs: Vec<Vec3> = Vec::with_capacity(32);
        for &a in &[-1.0, 1.0] {
            for &b in &[-1.0, 1.0] {
                dirs.push([0.0, a, b * phi]);
                dirs.push([a, b * phi, 0.0]);
                dirs.push([a * phi, 0.0, b]);
            }
        }
        for &a in &[-1.0, 1.0] {
            for &b in &[-1.0, 1.0] {
                for &c in &[-1.0, 1.0] {
                    dirs.push([a, b, c]);
                }
                dirs.push([0.0, a / phi, b * phi]);
                dirs.push([a / phi, b * phi, 0.0]);
                dirs.push([a * phi, 0.0, b / phi]);
            }
        }
        let mic_positions = dirs
            .iter()
            .map(|d| {
                let n = norm(d);
                [d[0] / n * EM32_RADIUS, d[1] / n * EM32_RADIUS, d[2] / n * EM32_RADIUS]
            })
            .collect();
        ArrayGeometry {
            label: "em32-like".into(),
            mic_positions,
            model: ArrayModel::RigidSphere { radius: EM32_RADIUS },
            sh_order: 8,
            speed_of_sound: SPEED_OF_SOUND,
        }
    }

    /// `n` microphones evenly spanning azimuth [0, π] on the equator of an
    /// open sphere.
    pub fn semicircular(n: usize, radius: f64) -> Self {
        let mic_positions = (0..n)
            .map(|q| {
                let az = if n > 1 { PI * q as f64 / (n - 1) as f64 } else { 0.0 };
                [radius * az.cos(), radius * az.sin(), 0.0]
            })
            .collect();
        ArrayGeometry {
            label: format!("semicircular-{n}"),
            mic_positions,
            model: ArrayModel::Open,
            sh_order: 8,
            speed_of_sound: SPEED_OF_SOUND,
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "em32" | "em32-like" => Ok(Self::em32_like()),
            "semi" | "semicircular" | "semicircular-6" => Ok(Self::semicircular(6, 0.1)),
            other => Err(Error::Config(format!("unknown array preset `{other}`"))),
        }
    }

    pub fn num_mics(&self) -> usize {
        self.mic_positions.len()
    }

    pub fn wavenumber(&self, f: f64) -> f64 {
        2.0 * PI * f / self.speed_of_sound
    }

    /// Frequency-dependent part of the response, shared by every direction.
    pub fn response_at(&self, f: f64) -> FrequencyResponse<'_> {
        FrequencyResponse::new(self, self.wavenumber(f))
    }
}

/// Array response evaluated at one (signed) wavenumber.
pub struct FrequencyResponse<'a> {
    array: &'a ArrayGeometry,
    k: f64,
    /// i^n (2n+1) b_n(ka) for the rigid model
    modes: Vec<Complex64>,
    mic_dirs: Vec<Vec3>,
}

impl<'a> FrequencyResponse<'a> {
    pub fn new(array: &'a ArrayGeometry, k: f64) -> Self {
        let (modes, mic_dirs) = match array.model {
            ArrayModel::Open => (Vec::new(), Vec::new()),
            ArrayModel::RigidSphere { radius } => {
                let x = (k * radius).abs();
                let mut b = rigid_sphere_radial(array.sh_order, x);
                if k < 0.0 {
                    for v in b.iter_mut() {
                        *v = v.conj();
                    }
                }
                let modes = b
                    .iter()
                    .enumerate()
                    .map(|(n, bn)| {
                        let i_n = if k < 0.0 {
                            Complex64::i().conj().powu(n as u32)
                        } else {
                            Complex64::i().powu(n as u32)
                        };
                        i_n * bn * (2 * n + 1) as f64
                    })
                    .collect();
                let dirs = array
                    .mic_positions
                    .iter()
                    .map(|p| {
                        let r = norm(p);
                        [p[0] / r, p[1] / r, p[2] / r]
                    })
                    .collect();
                (modes, dirs)
            }
        };
        FrequencyResponse {
            array,
            k,
            modes,
            mic_dirs,
        }
    }

    /// i^n (2n+1) b_n for n = 0..=sh_order; empty for the open model.
    pub fn mode_coefficients(&self) -> &[Complex64] {
        &self.modes
    }

    /// Writes the steering vector for unit source direction `u` into `out`.
    pub fn write_steering(&self, u: &Vec3, out: &mut [Complex64]) {
        match self.array.model {
            ArrayModel::Open => {
                for (o, r) in out.iter_mut().zip(&self.array.mic_positions) {
                    let phase = self.k * dot(u, r);
                    *o = Complex64::from_polar(1.0, phase);
                }
            }
            ArrayModel::RigidSphere { .. } => {
                let mut p = vec![0.0; self.modes.len()];
                for (o, d) in out.iter_mut().zip(&self.mic_dirs) {
                    legendre_into(dot(u, d).clamp(-1.0, 1.0), &mut p);
                    *o = self
                        .modes
                        .iter()
                        .zip(&p)
                        .fold(Complex64::new(0.0, 0.0), |acc, (m, pn)| acc + m * pn);
                }
            }
        }
    }

    pub fn steering(&self, doa: &Direction) -> DVector<Complex64> {
        let mut out = DVector::zeros(self.array.num_mics());
        self.write_steering(&doa.unit_vector(), out.as_mut_slice());
        out
    }
}

pub fn steering_vector(array: &ArrayGeometry, f: f64, doa: &Direction) -> DVector<Complex64> {
    array.response_at(f).steering(doa)
}

/// Steering vector at a signed wavenumber; negative `k` evaluates the model
/// with reversed propagation.
pub fn steering_vector_wavenumber(
    array: &ArrayGeometry,
    k: f64,
    doa: &Direction,
) -> DVector<Complex64> {
    FrequencyResponse::new(array, k).steering(doa)
}

/// Steering responses for every direction of a grid at one frequency.
#[derive(Debug, Clone)]
pub struct SteeringMatrix {
    pub frequency: f64,
    /// Q × G; column g is the steering vector of grid direction g.
    pub entries: DMatrix<Complex64>,
}

impl SteeringMatrix {
    pub fn num_mics(&self) -> usize {
        self.entries.nrows()
    }

    pub fn num_directions(&self) -> usize {
        self.entries.ncols()
    }
}

pub fn steering_matrix(array: &ArrayGeometry, f: f64, grid: &DirectionGrid) -> SteeringMatrix {
    let q = array.num_mics();
    let resp = array.response_at(f);
    let mut entries = DMatrix::zeros(q, grid.len());
    for (g, d) in grid.directions.iter().enumerate() {
        let mut col = entries.column_mut(g);
        resp.write_steering(&d.unit_vector(), col.as_mut_slice());
    }
    SteeringMatrix { frequency: f, entries }
}
