use std::ops::{Add, Mul, Sub};

use serde::{Deserialize, Serialize};

/// Speed of light in vacuum (m/s).
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3 {
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Vec3 {
    pub const ZERO: Vec3 = Vec3 {
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Self { x, y, z }
    }

    pub fn dot(self, o: Vec3) -> f64 {
        self.x * o.x + self.y * o.y + self.z * o.z
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn distance(self, o: Vec3) -> f64 {
        (self - o).norm()
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, k: f64) -> Vec3 {
        Vec3::new(self.x * k, self.y * k, self.z * k)
    }
}

/// Axis-aligned box, used for room bounds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min: Vec3,
    pub max: Vec3,
}

impl Bounds {
    pub fn new(min: Vec3, max: Vec3) -> Self {
        Self { min, max }
    }

    pub fn contains(&self, p: Vec3, slack: f64) -> bool {
        p.x >= self.min.x - slack
            && p.y >= self.min.y - slack
            && p.z >= self.min.z - slack
            && p.x <= self.max.x + slack
            && p.y <= self.max.y + slack
            && p.z <= self.max.z + slack
    }

    /// Euclidean distance from `p` to the box; zero inside.
    pub fn outside_distance(&self, p: Vec3) -> f64 {
        let gap = |v: f64, lo: f64, hi: f64| (lo - v).max(0.0) + (v - hi).max(0.0);
        let d = Vec3::new(
            gap(p.x, self.min.x, self.max.x),
            gap(p.y, self.min.y, self.max.y),
            gap(p.z, self.min.z, self.max.z),
        );
        d.norm()
    }

    /// Point at fractional coordinates `(u, v, w)` in `[0, 1]^3`.
    pub fn lerp(&self, u: f64, v: f64, w: f64) -> Vec3 {
        Vec3::new(
            self.min.x + u * (self.max.x - self.min.x),
            self.min.y + v * (self.max.y - self.min.y),
            self.min.z + w * (self.max.z - self.min.z),
        )
    }
}

/// Propagation delay along `a -> b`, or along `a -> b -> c` when `via` is given.
pub fn path_delay(a: Vec3, b: Vec3, via: Option<Vec3>) -> f64 {
    let len = match via {
        None => a.distance(b),
        Some(c) => a.distance(b) + b.distance(c),
    };
    len / SPEED_OF_LIGHT
}
