//! Near-uniform direction grids used as steering dictionaries.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::array::Direction;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GridScheme {
    /// Deterministic spherical Fibonacci lattice.
    Fibonacci,
}

impl GridScheme {
    pub fn parse(label: &str) -> Result<Self> {
        match label {
            "fibonacci" | "near-uniform" => Ok(GridScheme::Fibonacci),
            other => Err(Error::Config(format!("unsupported grid scheme `{other}`"))),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            GridScheme::Fibonacci => "fibonacci",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DirectionGrid {
    pub directions: Vec<Direction>,
    pub scheme: GridScheme,
}

impl DirectionGrid {
    pub fn len(&self) -> usize {
        self.directions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.directions.is_empty()
    }

    /// Index of the grid direction closest to `d`.
    pub fn nearest(&self, d: &Direction) -> usize {
        let u = d.unit_vector();
        let mut best = (0, f64::NEG_INFINITY);
        for (i, g) in self.directions.iter().enumerate() {
            let v = g.unit_vector();
            let c = u[0] * v[0] + u[1] * v[1] + u[2] * v[2];
            if c > best.1 {
                best = (i, c);
            }
        }
        best.0
    }
}

pub fn make_direction_grid(n: usize, scheme: GridScheme) -> Result<DirectionGrid> {
    if n == 0 {
        return Err(Error::invalid("grid.size", "must be at least 1"));
    }
    let directions = match scheme {
        GridScheme::Fibonacci => {
            let golden = PI * (3.0 - 5f64.sqrt());
            (0..n)
                .map(|i| {
                    let z = 1.0 - (2 * i + 1) as f64 / n as f64;
                    Direction::new(z.clamp(-1.0, 1.0).acos(), golden * i as f64)
                })
                .collect()
        }
    };
    Ok(DirectionGrid { directions, scheme })
}
