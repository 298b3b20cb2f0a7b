//! Unit quaternions, `(w, x, y, z)` storage, Hamilton product.

/// Euler rotation order (intrinsic, applied first-to-last).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EulerOrder {
    Xyz,
    Xzy,
    Yxz,
    Yzx,
    Zxy,
    Zyx,
}

impl EulerOrder {
    pub fn axes(self) -> [usize; 3] {
        match self {
            EulerOrder::Xyz => [0, 1, 2],
            EulerOrder::Xzy => [0, 2, 1],
            EulerOrder::Yxz => [1, 0, 2],
            EulerOrder::Yzx => [1, 2, 0],
            EulerOrder::Zxy => [2, 0, 1],
            EulerOrder::Zyx => [2, 1, 0],
        }
    }

    /// +1 for cyclic axis triples (x,y,z / y,z,x / z,x,y), −1 otherwise.
    fn parity(self) -> f64 {
        match self {
            EulerOrder::Xyz | EulerOrder::Yzx | EulerOrder::Zxy => 1.0,
            EulerOrder::Xzy | EulerOrder::Yxz | EulerOrder::Zyx => -1.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            EulerOrder::Xyz => "XYZ",
            EulerOrder::Xzy => "XZY",
            EulerOrder::Yxz => "YXZ",
            EulerOrder::Yzx => "YZX",
            EulerOrder::Zxy => "ZXY",
            EulerOrder::Zyx => "ZYX",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quat {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quat {
    pub const IDENTITY: Quat = Quat { w: 1.0, x: 0.0, y: 0.0, z: 0.0 };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub fn from_axis_angle(axis: [f64; 3], angle: f64) -> Self {
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        if n < 1e-12 {
            return Self::IDENTITY;
        }
        let (s, c) = (angle * 0.5).sin_cos();
        Self { w: c, x: s * axis[0] / n, y: s * axis[1] / n, z: s * axis[2] / n }
    }

    /// Rotation about one of the world axes (0 = X, 1 = Y, 2 = Z).
    pub fn about_axis(axis: usize, angle: f64) -> Self {
        let mut v = [0.0; 3];
        v[axis] = 1.0;
        Self::from_axis_angle(v, angle)
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(&self) -> Quat {
        let n = self.norm();
        if n < 1e-12 {
            return Self::IDENTITY;
        }
        Quat { w: self.w / n, x: self.x / n, y: self.y / n, z: self.z / n }
    }

    /// Flip sign so `w ≥ 0`, resolving the double cover.
    pub fn canonical(&self) -> Quat {
        if self.w < 0.0 {
            Quat { w: -self.w, x: -self.x, y: -self.y, z: -self.z }
        } else {
            *self
        }
    }

    pub fn conjugate(&self) -> Quat {
        Quat { w: self.w, x: -self.x, y: -self.y, z: -self.z }
    }

    /// Hamilton product `self ⊗ rhs`.
    pub fn mul(&self, rhs: &Quat) -> Quat {
        Quat {
            w: self.w * rhs.w - self.x * rhs.x - self.y * rhs.y - self.z * rhs.z,
            x: self.w * rhs.x + self.x * rhs.w + self.y * rhs.z - self.z * rhs.y,
            y: self.w * rhs.y - self.x * rhs.z + self.y * rhs.w + self.z * rhs.x,
            z: self.w * rhs.z + self.x * rhs.y - self.y * rhs.x + self.z * rhs.w,
        }
    }

    pub fn rotate(&self, v: [f64; 3]) -> [f64; 3] {
        // v' = v + 2 q_w (q_v × v) + 2 q_v × (q_v × v)
        let qv = [self.x, self.y, self.z];
        let c1 = cross(qv, v);
        let c2 = cross(qv, c1);
        [
            v[0] + 2.0 * (self.w * c1[0] + c2[0]),
            v[1] + 2.0 * (self.w * c1[1] + c2[1]),
            v[2] + 2.0 * (self.w * c1[2] + c2[2]),
        ]
    }

    pub fn dot(&self, rhs: &Quat) -> f64 {
        self.w * rhs.w + self.x * rhs.x + self.y * rhs.y + self.z * rhs.z
    }

    /// Spherical interpolation, shortest arc, `t ∈ [0,1]`.
    pub fn slerp(&self, rhs: &Quat, t: f64) -> Quat {
        let mut b = *rhs;
        let mut d = self.dot(rhs);
        if d < 0.0 {
            b = Quat { w: -b.w, x: -b.x, y: -b.y, z: -b.z };
            d = -d;
        }
        if d > 0.9995 {
            return Quat {
                w: self.w + t * (b.w - self.w),
                x: self.x + t * (b.x - self.x),
                y: self.y + t * (b.y - self.y),
                z: self.z + t * (b.z - self.z),
            }
            .normalized();
        }
        let theta = d.clamp(-1.0, 1.0).acos();
        let (s0, s1) = (((1.0 - t) * theta).sin(), (t * theta).sin());
        let inv = 1.0 / theta.sin();
        Quat {
            w: (self.w * s0 + b.w * s1) * inv,
            x: (self.x * s0 + b.x * s1) * inv,
            y: (self.y * s0 + b.y * s1) * inv,
            z: (self.z * s0 + b.z * s1) * inv,
        }
    }

    /// Shortest rotation carrying direction `from` onto direction `to`.
    pub fn between(from: [f64; 3], to: [f64; 3]) -> Quat {
        let (f, t) = (normalize3(from), normalize3(to));
        let d = f[0] * t[0] + f[1] * t[1] + f[2] * t[2];
        if d > 1.0 - 1e-12 {
            return Quat::IDENTITY;
        }
        if d < -1.0 + 1e-12 {
            // Opposite directions: rotate π about any perpendicular axis.
            let axis = if f[0].abs() < 0.9 { cross([1.0, 0.0, 0.0], f) } else { cross([0.0, 1.0, 0.0], f) };
            return Quat::from_axis_angle(axis, std::f64::consts::PI);
        }
        let axis = cross(f, t);
        let w = 1.0 + d;
        Quat { w, x: axis[0], y: axis[1], z: axis[2] }.normalized()
    }

    pub fn to_matrix(&self) -> [[f64; 3]; 3] {
        let q = self.normalized();
        let (w, x, y, z) = (q.w, q.x, q.y, q.z);
        [
            [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
            [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
            [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
        ]
    }

    /// Intrinsic Euler angles (radians, in the order's axis sequence).
    /// Returns the angles and a gimbal-proximity flag.
    pub fn to_euler(&self, order: EulerOrder) -> ([f64; 3], bool) {
        let m = self.to_matrix();
        let [i, j, k] = order.axes();
        let sigma = order.parity();
        let s = (sigma * m[i][k]).clamp(-1.0, 1.0);
        let gimbal = s.abs() > 1.0 - 1e-6;
        let beta = s.asin();
        let (alpha, gamma) = if gimbal {
            // Middle angle at ±90°: only α ± γ is determined; put it all in α.
            (f64::atan2(sigma * m[j][i], m[j][j]), 0.0)
        } else {
            (f64::atan2(-sigma * m[j][k], m[k][k]), f64::atan2(-sigma * m[i][j], m[i][i]))
        };
        ([alpha, beta, gamma], gimbal)
    }

    /// Quaternion from intrinsic Euler angles (radians) in the order's axis
    /// sequence.
    pub fn from_euler(angles: [f64; 3], order: EulerOrder) -> Quat {
        let [i, j, k] = order.axes();
        let qa = Quat::about_axis(i, angles[0]);
        let qb = Quat::about_axis(j, angles[1]);
        let qc = Quat::about_axis(k, angles[2]);
        qa.mul(&qb).mul(&qc)
    }
}

pub fn cross(a: [f64; 3], b: [f64; 3]) -> [f64; 3] {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub fn normalize3(v: [f64; 3]) -> [f64; 3] {
    let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    if n < 1e-12 {
        [0.0, 0.0, 0.0]
    } else {
        [v[0] / n, v[1] / n, v[2] / n]
    }
}
