use serde::{Deserialize, Serialize};

/// Axis-aligned box in meters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aabb {
    pub min: [f64; 3],
    pub max: [f64; 3],
}

impl Aabb {
    pub fn new(min: [f64; 3], max: [f64; 3]) -> Self {
        Self { min, max }
    }

    /// Tight box around a non-empty point set.
    pub fn from_points<I: IntoIterator<Item = [f64; 3]>>(points: I) -> Option<Self> {
        let mut it = points.into_iter();
        let first = it.next()?;
        let mut b = Aabb { min: first, max: first };
        for p in it {
            b.expand_to(p);
        }
        Some(b)
    }

    pub fn expand_to(&mut self, p: [f64; 3]) {
        for k in 0..3 {
            self.min[k] = self.min[k].min(p[k]);
            self.max[k] = self.max[k].max(p[k]);
        }
    }

    pub fn is_valid(&self) -> bool {
        (0..3).all(|k| self.min[k] <= self.max[k])
    }

    pub fn extent(&self) -> [f64; 3] {
        [self.max[0] - self.min[0], self.max[1] - self.min[1], self.max[2] - self.min[2]]
    }

    pub fn center(&self) -> [f64; 3] {
        [
            0.5 * (self.min[0] + self.max[0]),
            0.5 * (self.min[1] + self.max[1]),
            0.5 * (self.min[2] + self.max[2]),
        ]
    }

    pub fn volume(&self) -> f64 {
        let e = self.extent();
        e[0].max(0.0) * e[1].max(0.0) * e[2].max(0.0)
    }

    pub fn contains_point(&self, p: [f64; 3]) -> bool {
        (0..3).all(|k| self.min[k] <= p[k] && p[k] <= self.max[k])
    }

    pub fn contains(&self, other: &Aabb) -> bool {
        (0..3).all(|k| self.min[k] <= other.min[k] && other.max[k] <= self.max[k])
    }

    pub fn union(&self, other: &Aabb) -> Aabb {
        let mut b = *self;
        b.expand_to(other.min);
        b.expand_to(other.max);
        b
    }

    pub fn intersection_volume(&self, other: &Aabb) -> f64 {
        (0..3)
            .map(|k| (self.max[k].min(other.max[k]) - self.min[k].max(other.min[k])).max(0.0))
            .product()
    }
}
