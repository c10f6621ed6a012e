//! Shoebox rooms and the image-source construction of early reflections.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::array::{dot, norm, Direction, Vec3, SPEED_OF_SOUND};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomSpec {
    pub dims: Vec3,
    /// Pressure reflection coefficients of the walls x=0, x=Lx, y=0, y=Ly,
    /// z=0, z=Lz.
    pub wall_coeffs: [f64; 6],
    #[serde(default = "default_c")]
    pub speed_of_sound: f64,
}

fn default_c() -> f64 {
    SPEED_OF_SOUND
}

impl RoomSpec {
    pub fn new(dims: Vec3, coeff: f64) -> Result<Self> {
        let room = RoomSpec {
            dims,
            wall_coeffs: [coeff; 6],
            speed_of_sound: SPEED_OF_SOUND,
        };
        room.validate()?;
        Ok(room)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|d| !(*d > 0.0) || !d.is_finite()) {
            return Err(Error::invalid("room.dims", "dimensions must be positive"));
        }
        if self.wall_coeffs.iter().any(|b| !(0.0..1.0).contains(b)) {
            return Err(Error::invalid("room.wall_coeffs", "coefficients must lie in [0, 1)"));
        }
        if !(self.speed_of_sound > 0.0) {
            return Err(Error::invalid("room.speed_of_sound", "must be positive"));
        }
        Ok(())
    }

    pub fn volume(&self) -> f64 {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn surface(&self) -> f64 {
        let [x, y, z] = self.dims;
        2.0 * (x * y + x * z + y * z)
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        p.iter().zip(&self.dims).all(|(v, d)| *v > 0.0 && *v < *d)
    }

    /// Smallest distance from `p` to any wall.
    pub fn clearance(&self, p: &Vec3) -> f64 {
        p.iter()
            .zip(&self.dims)
            .map(|(v, d)| v.min(d - v))
            .fold(f64::INFINITY, f64::min)
    }
}

/// One arrival: the direct sound or a wall reflection.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reflection {
    /// Seconds after the direct sound.
    pub delay: f64,
    /// Linear amplitude relative to the direct sound.
    pub amplitude: f64,
    pub doa: Direction,
    pub order: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReflectionSet {
    pub direct: Reflection,
    /// Sorted ascending by delay.
    pub reflections: Vec<Reflection>,
}

impl ReflectionSet {
    pub fn direct_only(doa: Direction) -> Self {
        ReflectionSet {
            direct: Reflection {
                delay: 0.0,
                amplitude: 1.0,
                doa,
                order: 0,
            },
            reflections: Vec::new(),
        }
    }

    /// Keeps only reflections with delay ≤ `max_delay`.
    pub fn truncated(&self, max_delay: f64) -> ReflectionSet {
        ReflectionSet {
            direct: self.direct,
            reflections: self
                .reflections
                .iter()
                .copied()
                .filter(|r| r.delay <= max_delay)
                .collect(),
        }
    }

    /// Direct sound followed by the reflections.
    pub fn arrivals(&self) -> impl Iterator<Item = &Reflection> {
        std::iter::once(&self.direct).chain(self.reflections.iter())
    }

    pub fn sort(&mut self) {
        self.reflections.sort_by(|a, b| {
            a.delay
                .total_cmp(&b.delay)
                .then(a.order.cmp(&b.order))
                .then(a.doa.elevation.total_cmp(&b.doa.elevation))
                .then(a.doa.azimuth.total_cmp(&b.doa.azimuth))
        });
    }
}

/// Image sources of a shoebox room (Allen–Berkley lattice), delays relative to
/// the direct path and amplitudes normalized to the direct sound.
pub fn image_sources(
    room: &RoomSpec,
    source: &Vec3,
    receiver: &Vec3,
    max_delay: f64,
) -> Result<ReflectionSet> {
    room.validate()?;
    if !room.contains(source) || !room.contains(receiver) {
        return Err(Error::InvalidGeometry("source and receiver must lie inside the room".into()));
    }
    let to_src = [source[0] - receiver[0], source[1] - receiver[1], source[2] - receiver[2]];
    let d0 = norm(&to_src);
    if d0 < 1e-9 {
        return Err(Error::InvalidGeometry("source and receiver coincide".into()));
    }
    let c = room.speed_of_sound;
    let d_max = d0 + c * max_delay.max(0.0);

    // per axis: (image coordinate, reflection gain, wall hits) for every lattice index
    let axis_images = |axis: usize| -> Vec<(f64, f64, u32)> {
        let len = room.dims[axis];
        let s = source[axis];
        let r = receiver[axis];
        let (b_lo, b_hi) = (room.wall_coeffs[2 * axis], room.wall_coeffs[2 * axis + 1]);
        let mut out = Vec::new();
        for u in 0..2i64 {
            let base = (1 - 2 * u) as f64 * s;
            let n_lo = ((r - d_max - base) / (2.0 * len)).floor() as i64;
            let n_hi = ((r + d_max - base) / (2.0 * len)).ceil() as i64;
            for n in n_lo..=n_hi {
                let x = base + 2.0 * n as f64 * len;
                if (x - r).abs() > d_max {
                    continue;
                }
                let hits_lo = (n - u).unsigned_abs() as u32;
                let hits_hi = n.unsigned_abs() as u32;
                let gain = b_lo.powi(hits_lo as i32) * b_hi.powi(hits_hi as i32);
                out.push((x, gain, hits_lo + hits_hi));
            }
        }
        out
    };
    let xs = axis_images(0);
    let ys = axis_images(1);
    let zs = axis_images(2);

    let mut reflections = Vec::new();
    let d_max2 = d_max * d_max;
    for &(x, gx, ox) in &xs {
        let dx = x - receiver[0];
        for &(y, gy, oy) in &ys {
            let dy = y - receiver[1];
            let dxy2 = dx * dx + dy * dy;
            if dxy2 > d_max2 {
                continue;
            }
            for &(z, gz, oz) in &zs {
                let order = ox + oy + oz;
                if order == 0 {
                    continue;
                }
                let dz = z - receiver[2];
                let d2 = dxy2 + dz * dz;
                if d2 > d_max2 {
                    continue;
                }
                let d = d2.sqrt();
                let delay = (d - d0) / c;
                reflections.push(Reflection {
                    delay: delay.max(0.0),
                    amplitude: gx * gy * gz * d0 / d,
                    doa: Direction::from_vector(&[dx, dy, dz]),
                    order,
                });
            }
        }
    }
    let mut set = ReflectionSet {
        direct: Reflection {
            delay: 0.0,
            amplitude: 1.0,
            doa: Direction::from_vector(&to_src),
            order: 0,
        },
        reflections,
    };
    set.sort();
    Ok(set)
}

/// Uniform wall reflection coefficient that gives `target_t60` under Sabine's
/// formula.
pub fn calibrate_reflection_coeff(room: &RoomSpec, target_t60: f64) -> Result<f64> {
    if !(target_t60 > 0.0) {
        return Err(Error::invalid("t60", "target reverberation time must be positive"));
    }
    let absorption = 0.161 * room.volume() / (room.surface() * target_t60);
    if absorption > 1.0 {
        return Err(Error::InfeasibleTarget(format!(
            "T60 = {target_t60} s needs mean absorption {absorption:.3} > 1"
        )));
    }
    let r = (1.0 - absorption).sqrt();
    Ok(r.clamp(0.0, 1.0 - f64::EPSILON))
}

/// The four simulated rooms of the Monte Carlo study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RoomPreset {
    pub id: u8,
    pub dims: Vec3,
    pub t60: f64,
    /// Reported mean reflection count within the first 20 ms.
    pub mean_reflections_20ms: f64,
}

pub const ROOM_PRESETS: [RoomPreset; 4] = [
    RoomPreset { id: 1, dims: [12.0, 9.0, 5.0], t60: 1.22, mean_reflections_20ms: 7.9 },
    RoomPreset { id: 2, dims: [10.0, 7.0, 4.0], t60: 0.99, mean_reflections_20ms: 12.0 },
    RoomPreset { id: 3, dims: [9.0, 5.0, 3.0], t60: 0.89, mean_reflections_20ms: 18.9 },
    RoomPreset { id: 4, dims: [6.0, 4.0, 3.0], t60: 0.62, mean_reflections_20ms: 25.6 },
];

impl RoomPreset {
    pub fn by_id(id: u8) -> Result<RoomPreset> {
        ROOM_PRESETS
            .iter()
            .find(|p| p.id == id)
            .copied()
            .ok_or_else(|| Error::Config(format!("unknown room preset {id}")))
    }

    /// Room with the uniform coefficient calibrated to the preset T60.
    pub fn room(&self) -> Result<RoomSpec> {
        let mut room = RoomSpec::new(self.dims, 0.0)?;
        let coeff = calibrate_reflection_coeff(&room, self.t60)?;
        room.wall_coeffs = [coeff; 6];
        Ok(room)
    }
}

/// Source/array placement rules of the Monte Carlo study.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlacementRules {
    pub wall_clearance: f64,
    pub min_distance: f64,
    pub max_distance: f64,
    /// Each coordinate of both positions is perturbed by U[-p, p].
    pub perturbation: f64,
    /// Lower bound on the perturbed source–array distance.
    pub min_final_distance: f64,
}

impl Default for PlacementRules {
    fn default() -> Self {
        PlacementRules {
            wall_clearance: 1.2,
            min_distance: 0.7,
            max_distance: 1.7,
            perturbation: 0.5,
            min_final_distance: 0.3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    pub source: Vec3,
    pub array: Vec3,
    /// Source–array distance before perturbation.
    pub nominal_distance: f64,
}

fn uniform_unit_vector<R: Rng + ?Sized>(rng: &mut R) -> Vec3 {
    let z: f64 = rng.random_range(-1.0..=1.0);
    let phi: f64 = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
    let s = (1.0 - z * z).max(0.0).sqrt();
    [s * phi.cos(), s * phi.sin(), z]
}

/// Samples an array position with the required wall clearance, a source at a
/// distance in the nominal band, then perturbs both; perturbations that break
/// the clearance are redrawn.
pub fn sample_placement<R: Rng + ?Sized>(
    room: &RoomSpec,
    rules: &PlacementRules,
    rng: &mut R,
) -> Result<Placement> {
    let clear = rules.wall_clearance;
    if room.dims.iter().any(|d| *d <= 2.0 * clear) {
        return Err(Error::InvalidGeometry("room too small for the wall clearance".into()));
    }
    let inside = |p: &Vec3| room.clearance(p) >= clear;
    for _ in 0..10_000 {
        let array: Vec3 = std::array::from_fn(|i| rng.random_range(clear..=room.dims[i] - clear));
        let distance = rng.random_range(rules.min_distance..=rules.max_distance);
        let u = uniform_unit_vector(rng);
        let source: Vec3 = std::array::from_fn(|i| array[i] + distance * u[i]);
        if !inside(&source) {
            continue;
        }
        for _ in 0..100 {
            let p = rules.perturbation;
            let a: Vec3 = std::array::from_fn(|i| array[i] + rng.random_range(-p..=p));
            let s: Vec3 = std::array::from_fn(|i| source[i] + rng.random_range(-p..=p));
            let d = [s[0] - a[0], s[1] - a[1], s[2] - a[2]];
            if inside(&a) && inside(&s) && dot(&d, &d).sqrt() >= rules.min_final_distance {
                return Ok(Placement {
                    source: s,
                    array: a,
                    nominal_distance: distance,
                });
            }
        }
    }
    Err(Error::SceneGeneration("could not place source and array".into()))
}
