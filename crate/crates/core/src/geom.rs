//! Minimal 3-vector helpers and the rigid pose type.

use serde::{Deserialize, Serialize};

pub type Vec3 = [f64; 3];

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

/// Unit vector, or `None` for (near) zero input.
pub fn normalize(a: Vec3) -> Option<Vec3> {
    let n = norm(a);
    (n > 1e-12).then(|| scale(a, 1.0 / n))
}

/// Rigid camera-to-world transform, row-major 4x4.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose(pub [[f64; 4]; 4]);

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl Pose {
    pub fn identity() -> Self {
        let mut m = [[0.0; 4]; 4];
        for (i, row) in m.iter_mut().enumerate() {
            row[i] = 1.0;
        }
        Pose(m)
    }

    pub fn from_rotation_translation(r: [[f64; 3]; 3], t: Vec3) -> Self {
        let mut m = [[0.0; 4]; 4];
        for i in 0..3 {
            m[i][..3].copy_from_slice(&r[i]);
            m[i][3] = t[i];
        }
        m[3][3] = 1.0;
        Pose(m)
    }

    /// Camera at `eye` looking at `target`; `up` is the world up direction.
    /// Camera axes follow the pinhole convention: x right, y down, z forward.
    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3) -> Option<Self> {
        let z = normalize(sub(target, eye))?;
        let x = normalize(cross(z, up))?;
        let y = cross(z, x);
        // columns of R are the camera axes in world coordinates
        let r = [[x[0], y[0], z[0]], [x[1], y[1], z[1]], [x[2], y[2], z[2]]];
        Some(Self::from_rotation_translation(r, eye))
    }

    pub fn rotation(&self) -> [[f64; 3]; 3] {
        let m = &self.0;
        [
            [m[0][0], m[0][1], m[0][2]],
            [m[1][0], m[1][1], m[1][2]],
            [m[2][0], m[2][1], m[2][2]],
        ]
    }

    pub fn translation(&self) -> Vec3 {
        [self.0[0][3], self.0[1][3], self.0[2][3]]
    }

    /// Max deviation of RᵀR from identity plus the last-row check.
    pub fn rigidity_error(&self) -> f64 {
        let r = self.rotation();
        let mut err: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let v: f64 = (0..3).map(|k| r[k][i] * r[k][j]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                err = err.max((v - expect).abs());
            }
        }
        let last = self.0[3];
        err.max(last[0].abs())
            .max(last[1].abs())
            .max(last[2].abs())
            .max((last[3] - 1.0).abs())
    }

    pub fn is_rigid(&self, tol: f64) -> bool {
        self.rigidity_error() <= tol
    }

    pub fn transform_point(&self, p: Vec3) -> Vec3 {
        let m = &self.0;
        [
            m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2] + m[0][3],
            m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2] + m[1][3],
            m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2] + m[2][3],
        ]
    }

    pub fn rotate(&self, d: Vec3) -> Vec3 {
        let m = &self.0;
        [
            m[0][0] * d[0] + m[0][1] * d[1] + m[0][2] * d[2],
            m[1][0] * d[0] + m[1][1] * d[1] + m[1][2] * d[2],
            m[2][0] * d[0] + m[2][1] * d[1] + m[2][2] * d[2],
        ]
    }

    /// Inverse of a rigid transform: [Rᵀ | −Rᵀt].
    pub fn inverse(&self) -> Self {
        let r = self.rotation();
        let t = self.translation();
        let rt = [
            [r[0][0], r[1][0], r[2][0]],
            [r[0][1], r[1][1], r[2][1]],
            [r[0][2], r[1][2], r[2][2]],
        ];
        let ti = [
            -(rt[0][0] * t[0] + rt[0][1] * t[1] + rt[0][2] * t[2]),
            -(rt[1][0] * t[0] + rt[1][1] * t[1] + rt[1][2] * t[2]),
            -(rt[2][0] * t[0] + rt[2][1] * t[1] + rt[2][2] * t[2]),
        ];
        Self::from_rotation_translation(rt, ti)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn look_at_is_rigid_and_faces_target() {
        let pose = Pose::look_at([1.0, 2.0, 1.5], [3.0, 2.0, 0.5], [0.0, 0.0, 1.0]).unwrap();
        assert!(pose.is_rigid(1e-12));
        let cam = pose.inverse().transform_point([3.0, 2.0, 0.5]);
        assert!(cam[0].abs() < 1e-12 && cam[1].abs() < 1e-12 && cam[2] > 0.0);
    }

    #[test]
    fn inverse_round_trip() {
        let pose = Pose::look_at([0.3, -1.0, 2.0], [0.0, 0.0, 0.0], [0.0, 0.0, 1.0]).unwrap();
        let p = [0.7, 0.1, -0.4];
        let q = pose.transform_point(pose.inverse().transform_point(p));
        for i in 0..3 {
            assert!((p[i] - q[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn look_at_degenerate_up() {
        assert!(Pose::look_at([0.0; 3], [0.0, 0.0, 1.0], [0.0, 0.0, 1.0]).is_none());
    }
}
