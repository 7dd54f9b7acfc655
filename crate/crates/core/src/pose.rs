//! Rigid transforms.
//!
//! A [`Pose`] maps points from a local frame (sensor or camera) into the
//! world frame: `p_world = R * p_local + t`.

use nalgebra::{Matrix3, Vector3};

use crate::error::{Error, Result};

/// Per-entry tolerance on `RᵀR = I` and on `det(R) = 1`.
pub const ORTHONORMAL_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        check_rotation(&rotation)?;
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::Invalid("non-finite translation".into()));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Row-major `[R | t]`, the layout of one line of a pose file.
    pub fn from_row_major_3x4(values: &[f64; 12]) -> Result<Self> {
        let rotation = Matrix3::new(
            values[0], values[1], values[2], values[4], values[5], values[6], values[8], values[9],
            values[10],
        );
        let translation = Vector3::new(values[3], values[7], values[11]);
        Self::new(rotation, translation)
    }

    pub fn to_row_major_3x4(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            r[(0, 0)],
            r[(0, 1)],
            r[(0, 2)],
            t.x,
            r[(1, 0)],
            r[(1, 1)],
            r[(1, 2)],
            t.y,
            r[(2, 0)],
            r[(2, 1)],
            r[(2, 2)],
            t.z,
        ]
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Local frame to world frame.
    #[inline]
    pub fn apply(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p + self.translation
    }

    /// World frame to local frame.
    #[inline]
    pub fn apply_inverse(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.tr_mul(&(p - self.translation))
    }

    /// `self ∘ other`: first `other`, then `self`.
    pub fn compose(&self, other: &Pose) -> Pose {
        Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> Pose {
        let rt = self.rotation.transpose();
        Pose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Column `axis` of the rotation: the local axis expressed in world coordinates.
    pub fn axis(&self, axis: usize) -> Vector3<f64> {
        self.rotation.column(axis).into_owned()
    }

    /// Right-multiplies the rotation, keeping the translation.
    pub(crate) fn rotated_locally(&self, local: &Matrix3<f64>) -> Pose {
        Pose {
            rotation: self.rotation * local,
            translation: self.translation,
        }
    }

    pub(crate) fn translated(&self, offset: &Vector3<f64>) -> Pose {
        Pose {
            rotation: self.rotation,
            translation: self.translation + offset,
        }
    }
}

impl Default for Pose {
    fn default() -> Self {
        Self::identity()
    }
}

/// Rotation about the local Y axis by `angle` radians.
pub fn rotation_y(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

/// Rotation about the local Z axis by `angle` radians.
pub fn rotation_z(angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Lidar frames are x-forward, y-left, z-up; camera frames are x-right,
/// y-down, z-forward. Composing a sensor pose with this transform yields a
/// camera looking along the sensor heading.
pub fn lidar_to_camera() -> Pose {
    Pose {
        rotation: Matrix3::new(0.0, 0.0, 1.0, -1.0, 0.0, 0.0, 0.0, -1.0, 0.0),
        translation: Vector3::zeros(),
    }
}

fn check_rotation(r: &Matrix3<f64>) -> Result<()> {
    if !r.iter().all(|v| v.is_finite()) {
        return Err(Error::Invalid("non-finite rotation".into()));
    }
    let gram = r.tr_mul(r);
    let deviation = (gram - Matrix3::identity()).amax();
    let det = r.determinant();
    if deviation > ORTHONORMAL_TOLERANCE || (det - 1.0).abs() > ORTHONORMAL_TOLERANCE {
        return Err(Error::NotOrthonormal { deviation, det });
    }
    Ok(())
}
