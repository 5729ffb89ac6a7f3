//! Planar convex polygons and penetration queries in the (x, z) plane.

pub type Vec2 = [f64; 2];

pub fn add(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] + b[0], a[1] + b[1]]
}

pub fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

pub fn dot(a: Vec2, b: Vec2) -> f64 {
    a[0] * b[0] + a[1] * b[1]
}

pub fn scale(a: Vec2, s: f64) -> Vec2 {
    [a[0] * s, a[1] * s]
}

/// Counter-clockwise rotation by `theta`.
pub fn rotate(a: Vec2, theta: f64) -> Vec2 {
    let (s, c) = theta.sin_cos();
    [c * a[0] - s * a[1], s * a[0] + c * a[1]]
}

/// Rigid planar transform `world = R(theta) * local + origin`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose2 {
    pub origin: Vec2,
    pub theta: f64,
}

impl Pose2 {
    pub fn to_world(&self, p: Vec2) -> Vec2 {
        add(rotate(p, self.theta), self.origin)
    }

    pub fn to_local(&self, p: Vec2) -> Vec2 {
        rotate(sub(p, self.origin), -self.theta)
    }

    pub fn dir_to_world(&self, d: Vec2) -> Vec2 {
        rotate(d, self.theta)
    }
}

/// Convex polygon with vertices in counter-clockwise order.
#[derive(Clone, Debug, PartialEq)]
pub struct Polygon {
    pub verts: Vec<Vec2>,
}

impl Polygon {
    pub fn new(verts: Vec<Vec2>) -> Self {
        debug_assert!(verts.len() >= 3);
        Polygon { verts }
    }

    pub fn transformed(&self, pose: &Pose2) -> Polygon {
        Polygon {
            verts: self.verts.iter().map(|&v| pose.to_world(v)).collect(),
        }
    }

    /// Signed area; positive for counter-clockwise order.
    pub fn area(&self) -> f64 {
        let n = self.verts.len();
        (0..n)
            .map(|i| {
                let (a, b) = (self.verts[i], self.verts[(i + 1) % n]);
                a[0] * b[1] - b[0] * a[1]
            })
            .sum::<f64>()
            * 0.5
    }

    /// Depth and outward normal of the closest edge when `p` lies strictly
    /// inside, `None` otherwise.
    pub fn penetration(&self, p: Vec2) -> Option<(f64, Vec2)> {
        let n = self.verts.len();
        let mut best: Option<(f64, Vec2)> = None;
        for i in 0..n {
            let (a, b) = (self.verts[i], self.verts[(i + 1) % n]);
            let e = sub(b, a);
            let len = dot(e, e).sqrt();
            let normal = [e[1] / len, -e[0] / len];
            let d = dot(sub(p, a), normal);
            if d >= 0.0 {
                return None;
            }
            if best.map_or(true, |(depth, _)| -d < depth) {
                best = Some((-d, normal));
            }
        }
        best
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_square() -> Polygon {
        Polygon::new(vec![[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])
    }

    #[test]
    fn square_is_counter_clockwise() {
        assert!((unit_square().area() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn penetration_picks_nearest_edge() {
        let (d, n) = unit_square().penetration([0.5, 0.9]).unwrap();
        assert!((d - 0.1).abs() < 1e-12);
        assert_eq!(n, [0.0, 1.0]);
        assert!(unit_square().penetration([1.5, 0.5]).is_none());
    }

    #[test]
    fn pose_round_trip() {
        let pose = Pose2 {
            origin: [0.3, -0.2],
            theta: 0.4,
        };
        let p = [0.11, 0.07];
        let q = pose.to_local(pose.to_world(p));
        assert!((q[0] - p[0]).abs() < 1e-15 && (q[1] - p[1]).abs() < 1e-15);
    }
}
