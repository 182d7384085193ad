//! Coordinate conventions shared by the generator, the CIR synthesis and the
//! analysis toolkit.
//!
//! Angles follow the global coordinate system used by 3GPP-style models:
//! azimuth φ is measured in the horizontal plane from +x towards +y and
//! stored wrapped to `[0, 2π)`, zenith θ is measured from +z and lies in
//! `[0, π]`.

use std::f64::consts::{PI, TAU};
use std::ops::{Add, Mul, Neg, Sub};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Speed of light in vacuum, m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

const ORTHO_TOL: f64 = 1e-9;

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

    pub fn dot(self, other: Vec3) -> f64 {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn cross(self, other: Vec3) -> Vec3 {
        Vec3::new(
            self.y * other.z - self.z * other.y,
            self.z * other.x - self.x * other.z,
            self.x * other.y - self.y * other.x,
        )
    }

    pub fn norm(self) -> f64 {
        self.dot(self).sqrt()
    }

    /// Unit vector in the same direction; `None` for the zero vector.
    pub fn normalized(self) -> Option<Vec3> {
        let n = self.norm();
        (n > 0.0 && n.is_finite()).then(|| self * (1.0 / n))
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
    fn mul(self, s: f64) -> Vec3 {
        Vec3::new(self.x * s, self.y * s, self.z * s)
    }
}

impl Neg for Vec3 {
    type Output = Vec3;
    fn neg(self) -> Vec3 {
        Vec3::new(-self.x, -self.y, -self.z)
    }
}

/// Wraps an azimuth to `[0, 2π)`.
pub fn wrap_azimuth(phi: f64) -> f64 {
    let w = phi.rem_euclid(TAU);
    // rem_euclid can round up to exactly 2π for tiny negative inputs
    if w >= TAU {
        0.0
    } else {
        w
    }
}

/// Wraps an angle difference to `(-π, π]`.
pub fn wrap_to_pi(delta: f64) -> f64 {
    let w = wrap_azimuth(delta);
    if w > PI {
        w - TAU
    } else {
        w
    }
}

/// A direction on the unit sphere.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SphericalAngles {
    zenith: f64,
    azimuth: f64,
}

impl SphericalAngles {
    /// Builds a direction from zenith θ ∈ [0, π] and any finite azimuth φ,
    /// which is stored wrapped.
    pub fn from_zenith_azimuth(zenith: f64, azimuth: f64) -> Result<Self> {
        if !zenith.is_finite() || !(0.0..=PI).contains(&zenith) {
            return Err(Error::param("zenith", format!("{zenith} outside [0, π]")));
        }
        if !azimuth.is_finite() {
            return Err(Error::param("azimuth", "not finite"));
        }
        Ok(Self {
            zenith,
            azimuth: wrap_azimuth(azimuth),
        })
    }

    /// Same as [`from_zenith_azimuth`](Self::from_zenith_azimuth) but clamps
    /// the zenith into range instead of failing. Used on evolved angles.
    pub fn clamped(zenith: f64, azimuth: f64) -> Self {
        Self {
            zenith: zenith.clamp(0.0, PI),
            azimuth: wrap_azimuth(azimuth),
        }
    }

    pub fn from_degrees(zenith_deg: f64, azimuth_deg: f64) -> Result<Self> {
        Self::from_zenith_azimuth(zenith_deg.to_radians(), azimuth_deg.to_radians())
    }

    /// Direction of a non-zero vector.
    pub fn from_vector(v: Vec3) -> Result<Self> {
        let u = v
            .normalized()
            .ok_or_else(|| Error::Domain("direction of a zero vector".into()))?;
        Ok(Self::clamped(u.z.clamp(-1.0, 1.0).acos(), u.y.atan2(u.x)))
    }

    pub fn zenith(&self) -> f64 {
        self.zenith
    }

    pub fn azimuth(&self) -> f64 {
        self.azimuth
    }
}

/// Spherical unit vectors θ̂ and φ̂ at the given direction.
pub fn spherical_unit_vectors(a: SphericalAngles) -> (Vec3, Vec3) {
    let (st, ct) = a.zenith.sin_cos();
    let (sp, cp) = a.azimuth.sin_cos();
    (Vec3::new(ct * cp, ct * sp, -st), Vec3::new(-sp, cp, 0.0))
}

/// Radial unit vector r̂ pointing along the direction.
pub fn direction_unit_vector(a: SphericalAngles) -> Vec3 {
    let (st, ct) = a.zenith.sin_cos();
    let (sp, cp) = a.azimuth.sin_cos();
    Vec3::new(st * cp, st * sp, ct)
}

/// How elevation values read from tables and files are to be interpreted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ElevationConvention {
    /// Angle measured from the vertical (+z) axis.
    #[default]
    Zenith,
    /// Angle measured up from the horizontal plane.
    Horizon,
}

impl ElevationConvention {
    /// Converts a value in this convention to a zenith angle (radians).
    pub fn to_zenith(self, value: f64) -> f64 {
        match self {
            ElevationConvention::Zenith => value,
            ElevationConvention::Horizon => PI / 2.0 - value,
        }
    }

    pub fn from_zenith(self, zenith: f64) -> f64 {
        match self {
            ElevationConvention::Zenith => zenith,
            ElevationConvention::Horizon => PI / 2.0 - zenith,
        }
    }
}

/// A proper rotation of 3-space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RotationMatrix {
    rows: [[f64; 3]; 3],
}

impl Default for RotationMatrix {
    fn default() -> Self {
        Self::identity()
    }
}

impl RotationMatrix {
    pub const fn identity() -> Self {
        Self {
            rows: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
        }
    }

    /// Validates orthonormality and a positive determinant.
    pub fn new(rows: [[f64; 3]; 3]) -> Result<Self> {
        if rows.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::param("rotation", "non-finite entry"));
        }
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| rows[k][i] * rows[k][j]).sum();
                let expect = if i == j { 1.0 } else { 0.0 };
                if (dot - expect).abs() > ORTHO_TOL {
                    return Err(Error::param("rotation", "matrix is not orthonormal"));
                }
            }
        }
        let m = Self { rows };
        if (m.determinant() - 1.0).abs() > ORTHO_TOL {
            return Err(Error::param("rotation", "determinant is not +1"));
        }
        Ok(m)
    }

    /// Rodrigues rotation by `angle` radians about `axis`.
    pub fn from_axis_angle(axis: Vec3, angle: f64) -> Result<Self> {
        let k = axis
            .normalized()
            .ok_or_else(|| Error::param("rotation", "zero rotation axis"))?;
        let (s, c) = angle.sin_cos();
        let t = 1.0 - c;
        let rows = [
            [t * k.x * k.x + c, t * k.x * k.y - s * k.z, t * k.x * k.z + s * k.y],
            [t * k.x * k.y + s * k.z, t * k.y * k.y + c, t * k.y * k.z - s * k.x],
            [t * k.x * k.z - s * k.y, t * k.y * k.z + s * k.x, t * k.z * k.z + c],
        ];
        Self::new(rows)
    }

    pub fn rows(&self) -> [[f64; 3]; 3] {
        self.rows
    }

    pub fn determinant(&self) -> f64 {
        let r = &self.rows;
        r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
    }

    pub fn apply(&self, v: Vec3) -> Vec3 {
        let r = &self.rows;
        Vec3::new(
            r[0][0] * v.x + r[0][1] * v.y + r[0][2] * v.z,
            r[1][0] * v.x + r[1][1] * v.y + r[1][2] * v.z,
            r[2][0] * v.x + r[2][1] * v.y + r[2][2] * v.z,
        )
    }
}

/// Maps the UT velocity into the frame used by a cluster's angle update.
pub fn rotate_velocity(r: &RotationMatrix, v: Vec3) -> Vec3 {
    r.apply(v)
}

/// Antenna field pattern in the θ̂/φ̂ polarization basis.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum AntennaPattern {
    /// Unit θ-polarized field in every direction.
    Isotropic,
    /// Vertically polarized, omnidirectional in azimuth and flat in
    /// elevation.
    OmniVertical { gain_dbi: f64 },
    /// Raised-cosine main lobe around `boresight`, floored at the
    /// front-to-back ratio. `slant_deg` tilts the polarization
    /// (±45° for a cross-polarized panel).
    DirectionalPanel {
        gain_dbi: f64,
        beamwidth_deg: f64,
        front_to_back_db: f64,
        boresight: SphericalAngles,
        slant_deg: f64,
    },
}

impl AntennaPattern {
    /// Field components `(F_θ, F_φ)` in direction `(θ, φ)`.
    pub fn field(&self, dir: SphericalAngles) -> (Complex64, Complex64) {
        match self {
            AntennaPattern::Isotropic => (Complex64::new(1.0, 0.0), Complex64::new(0.0, 0.0)),
            AntennaPattern::OmniVertical { gain_dbi } => {
                let amp = 10f64.powf(gain_dbi / 20.0);
                (Complex64::new(amp, 0.0), Complex64::new(0.0, 0.0))
            }
            AntennaPattern::DirectionalPanel {
                gain_dbi,
                beamwidth_deg,
                front_to_back_db,
                boresight,
                slant_deg,
            } => {
                let cos_off = direction_unit_vector(dir)
                    .dot(direction_unit_vector(*boresight))
                    .clamp(-1.0, 1.0);
                let half = (beamwidth_deg.to_radians() / 2.0).clamp(1e-6, PI - 1e-6);
                // exponent that puts the half-power point at beamwidth / 2
                let q = 0.5f64.ln() / ((1.0 + half.cos()) / 2.0).ln();
                let lobe = ((1.0 + cos_off) / 2.0).powf(q);
                let floor = 10f64.powf(-front_to_back_db / 10.0);
                let power = 10f64.powf(gain_dbi / 10.0) * lobe.max(floor);
                let amp = power.sqrt();
                let (s, c) = slant_deg.to_radians().sin_cos();
                (Complex64::new(amp * c, 0.0), Complex64::new(amp * s, 0.0))
            }
        }
    }

    /// Peak gain in dBi.
    pub fn gain_dbi(&self) -> f64 {
        match self {
            AntennaPattern::Isotropic => 0.0,
            AntennaPattern::OmniVertical { gain_dbi } => *gain_dbi,
            AntennaPattern::DirectionalPanel { gain_dbi, .. } => *gain_dbi,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: Vec3, b: Vec3, tol: f64) -> bool {
        (a - b).norm() <= tol
    }

    #[test]
    fn unit_vectors_at_horizon() {
        let a = SphericalAngles::from_zenith_azimuth(PI / 2.0, 0.0).unwrap();
        let (th, ph) = spherical_unit_vectors(a);
        assert!(close(th, Vec3::new(0.0, 0.0, -1.0), 1e-15));
        assert!(close(ph, Vec3::new(0.0, 1.0, 0.0), 1e-15));
        assert!(close(direction_unit_vector(a), Vec3::new(1.0, 0.0, 0.0), 1e-15));
    }

    #[test]
    fn unit_vectors_at_zenith() {
        let a = SphericalAngles::from_zenith_azimuth(0.0, 0.0).unwrap();
        let (th, ph) = spherical_unit_vectors(a);
        assert!(close(th, Vec3::new(1.0, 0.0, 0.0), 1e-15));
        assert!(close(ph, Vec3::new(0.0, 1.0, 0.0), 1e-15));
        let up = SphericalAngles::from_zenith_azimuth(0.0, 1.234).unwrap();
        assert!(close(direction_unit_vector(up), Vec3::new(0.0, 0.0, 1.0), 1e-15));
    }

    #[test]
    fn zenith_out_of_range_rejected() {
        assert!(SphericalAngles::from_zenith_azimuth(-0.1, 0.0).is_err());
        assert!(SphericalAngles::from_zenith_azimuth(PI + 1e-9, 0.0).is_err());
        assert!(SphericalAngles::from_zenith_azimuth(1.0, f64::NAN).is_err());
    }

    #[test]
    fn rotation_examples() {
        let v = Vec3::new(1.0, 2.0, 3.0);
        assert_eq!(rotate_velocity(&RotationMatrix::identity(), v), v);
        let rz = RotationMatrix::from_axis_angle(Vec3::new(0.0, 0.0, 1.0), PI).unwrap();
        assert!(close(rz.apply(Vec3::new(1.0, 0.0, 0.0)), Vec3::new(-1.0, 0.0, 0.0), 1e-15));
    }

    #[test]
    fn rejects_improper_matrices() {
        let reflect = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, -1.0]];
        assert!(RotationMatrix::new(reflect).is_err());
        let skew = [[1.0, 0.1, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(RotationMatrix::new(skew).is_err());
    }

    #[test]
    fn isotropic_pattern_is_unit_theta() {
        let (ft, fp) = AntennaPattern::Isotropic
            .field(SphericalAngles::from_zenith_azimuth(0.3, 4.0).unwrap());
        assert_eq!(ft, Complex64::new(1.0, 0.0));
        assert_eq!(fp, Complex64::new(0.0, 0.0));
    }

    #[test]
    fn panel_pattern_half_power_at_half_beamwidth() {
        let boresight = SphericalAngles::from_degrees(90.0, 0.0).unwrap();
        let p = AntennaPattern::DirectionalPanel {
            gain_dbi: 17.5,
            beamwidth_deg: 65.0,
            front_to_back_db: 25.0,
            boresight,
            slant_deg: 0.0,
        };
        let peak = p.field(boresight).0.norm_sqr();
        let edge = p.field(SphericalAngles::from_degrees(90.0, 32.5).unwrap()).0.norm_sqr();
        assert!((10.0 * peak.log10() - 17.5).abs() < 1e-9);
        assert!((edge / peak - 0.5).abs() < 1e-9);
        let back = p.field(SphericalAngles::from_degrees(90.0, 180.0).unwrap()).0.norm_sqr();
        assert!((10.0 * (peak / back).log10() - 25.0).abs() < 1e-9);
    }

    #[test]
    fn elevation_conventions_round_trip() {
        let z = ElevationConvention::Horizon.to_zenith(0.2);
        assert!((z - (PI / 2.0 - 0.2)).abs() < 1e-15);
        assert!((ElevationConvention::Horizon.from_zenith(z) - 0.2).abs() < 1e-15);
    }

    fn angles() -> impl Strategy<Value = SphericalAngles> {
        (0.0..=PI, -10.0..10.0f64)
            .prop_map(|(t, p)| SphericalAngles::from_zenith_azimuth(t, p).unwrap())
    }

    fn rotation() -> impl Strategy<Value = RotationMatrix> {
        (angles(), -PI..PI).prop_map(|(a, ang)| {
            RotationMatrix::from_axis_angle(direction_unit_vector(a), ang).unwrap()
        })
    }

    proptest! {
        #[test]
        fn triad_is_right_handed_orthonormal(a in angles()) {
            let (th, ph) = spherical_unit_vectors(a);
            let r = direction_unit_vector(a);
            for v in [th, ph, r] {
                prop_assert!((v.norm() - 1.0).abs() <= 1e-9);
            }
            prop_assert!(th.dot(ph).abs() <= 1e-9);
            prop_assert!(r.dot(th).abs() <= 1e-9);
            prop_assert!(r.dot(ph).abs() <= 1e-9);
            // r̂ × θ̂ = φ̂
            prop_assert!(close(r.cross(th), ph, 1e-9));
        }

        #[test]
        fn rotation_is_isometry(
            r in rotation(),
            v in (-50.0..50.0f64, -50.0..50.0f64, -50.0..50.0f64),
            w in (-50.0..50.0f64, -50.0..50.0f64, -50.0..50.0f64),
        ) {
            let v = Vec3::new(v.0, v.1, v.2);
            let w = Vec3::new(w.0, w.1, w.2);
            prop_assert!(RotationMatrix::new(r.rows()).is_ok());
            prop_assert!((rotate_velocity(&r, v).norm() - v.norm()).abs() <= 1e-9);
            prop_assert!((r.apply(v).dot(r.apply(w)) - v.dot(w)).abs() <= 1e-9 * (1.0 + v.norm() * w.norm()));
        }

        // φ + 2π must be exact in f64: dyadic φ with φ + 2π < 8.
        #[test]
        fn azimuth_wrap_is_bit_exact(t in 0.0..=PI, k in 0u32..1740) {
            let phi = k as f64 / 1024.0;
            let a = SphericalAngles::from_zenith_azimuth(t, phi).unwrap();
            let b = SphericalAngles::from_zenith_azimuth(t, phi + TAU).unwrap();
            prop_assert_eq!(direction_unit_vector(a), direction_unit_vector(b));
            prop_assert_eq!(spherical_unit_vectors(a), spherical_unit_vectors(b));
        }
    }
}
