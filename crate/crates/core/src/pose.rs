//! Camera extrinsics from COLMAP text reconstructions and rotation-angle
//! geometry between frames.
//!
//! COLMAP writes one `images.txt` per sparse model. Each registered image
//! contributes two lines:
//!
//! ```text
//! IMAGE_ID QW QX QY QZ TX TY TZ CAMERA_ID NAME
//! POINTS2D[] as (X, Y, POINT3D_ID)
//! ```
//!
//! The quaternion and translation describe the world-to-camera transform.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::io::BufRead;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum PoseError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("duplicate IMAGE_ID {image_id} (line {line})")]
    DuplicateImage { image_id: u32, line: usize },
    #[error("zero-norm quaternion")]
    ZeroQuaternion,
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// Hamilton quaternion `(w, x, y, z)`, the order COLMAP writes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Quaternion {
    pub w: f64,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion {
        w: 1.0,
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    pub fn new(w: f64, x: f64, y: f64, z: f64) -> Self {
        Self { w, x, y, z }
    }

    pub fn norm(&self) -> f64 {
        (self.w * self.w + self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn normalized(&self) -> Result<Quaternion, PoseError> {
        let n = self.norm();
        if n == 0.0 || !n.is_finite() {
            return Err(PoseError::ZeroQuaternion);
        }
        Ok(Quaternion::new(self.w / n, self.x / n, self.y / n, self.z / n))
    }
}

/// Row-major 3×3 rotation matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rotation(pub [[f64; 3]; 3]);

impl Rotation {
    pub const IDENTITY: Rotation = Rotation([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);

    /// Rodrigues' formula. `axis` need not be unit length but must be nonzero.
    pub fn from_axis_angle(axis: [f64; 3], theta_rad: f64) -> Rotation {
        let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
        let [x, y, z] = [axis[0] / n, axis[1] / n, axis[2] / n];
        let (s, c) = theta_rad.sin_cos();
        let t = 1.0 - c;
        Rotation([
            [c + x * x * t, x * y * t - z * s, x * z * t + y * s],
            [y * x * t + z * s, c + y * y * t, y * z * t - x * s],
            [z * x * t - y * s, z * y * t + x * s, c + z * z * t],
        ])
    }

    /// Rotation about +z by `deg` degrees.
    pub fn about_z(deg: f64) -> Rotation {
        Rotation::from_axis_angle([0.0, 0.0, 1.0], deg.to_radians())
    }

    pub fn transpose(&self) -> Rotation {
        let m = &self.0;
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = m[j][i];
            }
        }
        Rotation(out)
    }

    pub fn mul(&self, rhs: &Rotation) -> Rotation {
        let (a, b) = (&self.0, &rhs.0);
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
            }
        }
        Rotation(out)
    }

    pub fn trace(&self) -> f64 {
        self.0[0][0] + self.0[1][1] + self.0[2][2]
    }

    pub fn determinant(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    /// Checks RᵀR = I and det R = 1 entrywise within `tol`.
    pub fn is_orthonormal(&self, tol: f64) -> bool {
        let rtr = self.transpose().mul(self);
        for (i, row) in rtr.0.iter().enumerate() {
            for (j, v) in row.iter().enumerate() {
                let expect = if i == j { 1.0 } else { 0.0 };
                if (v - expect).abs() > tol {
                    return false;
                }
            }
        }
        (self.determinant() - 1.0).abs() <= tol
    }
}

/// World-to-camera extrinsics of one registered image.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraPose {
    pub image_id: u32,
    pub camera_id: u32,
    pub image_name: String,
    /// Normalized quaternion the rotation was built from.
    pub quaternion: Quaternion,
    pub rotation: Rotation,
    pub translation: [f64; 3],
}

/// Angle of one frame relative to the instance's reference frame.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RelativeAngle {
    pub frame: u32,
    pub theta_deg: f64,
}

pub fn quat_to_rotation(q: Quaternion) -> Result<Rotation, PoseError> {
    let Quaternion { w, x, y, z } = q.normalized()?;
    Ok(Rotation([
        [
            1.0 - 2.0 * (y * y + z * z),
            2.0 * (x * y - w * z),
            2.0 * (x * z + w * y),
        ],
        [
            2.0 * (x * y + w * z),
            1.0 - 2.0 * (x * x + z * z),
            2.0 * (y * z - w * x),
        ],
        [
            2.0 * (x * z - w * y),
            2.0 * (y * z + w * x),
            1.0 - 2.0 * (x * x + y * y),
        ],
    ]))
}

/// Camera-to-camera rotation `R_i · R_refᵀ`.
pub fn relative_rotation(pose: &CameraPose, reference: &CameraPose) -> Rotation {
    pose.rotation.mul(&reference.rotation.transpose())
}

/// Rotation angle of `r` in degrees, in `[0, 180]`.
///
/// Evaluates `θ = arccos((tr R − 1) / 2)` through the equivalent
/// `atan2(‖vee(R − Rᵀ)‖, tr R − 1)`, which stays accurate near 0° and 180°
/// and returns exactly zero for symmetric inputs such as `R · Rᵀ`.
pub fn angular_deviation(r: &Rotation) -> f64 {
    let m = &r.0;
    let sx = m[2][1] - m[1][2];
    let sy = m[0][2] - m[2][0];
    let sz = m[1][0] - m[0][1];
    let two_sin = (sx * sx + sy * sy + sz * sz).sqrt();
    let two_cos = r.trace() - 1.0;
    two_sin.atan2(two_cos).to_degrees().clamp(0.0, 180.0)
}

/// Literal arccos form with the cosine clamped to `[-1, 1]`.
pub fn angular_deviation_acos(r: &Rotation) -> f64 {
    let c = ((r.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    c.acos().to_degrees()
}

pub fn parse_colmap_images<R: BufRead>(reader: R) -> Result<Vec<CameraPose>, PoseError> {
    let mut poses = Vec::new();
    let mut seen = HashSet::new();
    let mut expect_points = false;

    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = idx + 1;
        let trimmed = line.trim();
        if trimmed.starts_with('#') {
            continue;
        }
        if expect_points {
            // POINTS2D line, possibly empty.
            expect_points = false;
            continue;
        }
        if trimmed.is_empty() {
            continue;
        }
        let pose = parse_image_line(trimmed, lineno)?;
        if !seen.insert(pose.image_id) {
            return Err(PoseError::DuplicateImage {
                image_id: pose.image_id,
                line: lineno,
            });
        }
        poses.push(pose);
        expect_points = true;
    }
    Ok(poses)
}

fn parse_image_line(line: &str, lineno: usize) -> Result<CameraPose, PoseError> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 10 {
        return Err(PoseError::Parse {
            line: lineno,
            msg: format!("expected 10 fields, found {}", fields.len()),
        });
    }
    let num = |i: usize| -> Result<f64, PoseError> {
        let v: f64 = fields[i].parse().map_err(|_| PoseError::Parse {
            line: lineno,
            msg: format!("field {} is not a number: {:?}", i + 1, fields[i]),
        })?;
        if !v.is_finite() {
            return Err(PoseError::Parse {
                line: lineno,
                msg: format!("field {} is not finite", i + 1),
            });
        }
        Ok(v)
    };
    let int = |i: usize| -> Result<u32, PoseError> {
        fields[i].parse().map_err(|_| PoseError::Parse {
            line: lineno,
            msg: format!("field {} is not an integer id: {:?}", i + 1, fields[i]),
        })
    };

    let image_id = int(0)?;
    let raw = Quaternion::new(num(1)?, num(2)?, num(3)?, num(4)?);
    let quaternion = raw.normalized().map_err(|_| PoseError::Parse {
        line: lineno,
        msg: "zero-norm quaternion".into(),
    })?;
    let rotation = quat_to_rotation(quaternion)?;
    let translation = [num(5)?, num(6)?, num(7)?];
    let camera_id = int(8)?;

    Ok(CameraPose {
        image_id,
        camera_id,
        image_name: fields[9].to_string(),
        quaternion,
        rotation,
        translation,
    })
}

/// Writes poses back in `images.txt` form with empty POINTS2D lines.
pub fn write_colmap_images(poses: &[CameraPose]) -> String {
    let mut out = String::from(
        "# Image list with two lines of data per image:\n\
         #   IMAGE_ID, QW, QX, QY, QZ, TX, TY, TZ, CAMERA_ID, NAME\n\
         #   POINTS2D[] as (X, Y, POINT3D_ID)\n",
    );
    for p in poses {
        let q = &p.quaternion;
        let t = &p.translation;
        let _ = writeln!(
            out,
            "{} {:?} {:?} {:?} {:?} {:?} {:?} {:?} {} {}\n",
            p.image_id, q.w, q.x, q.y, q.z, t[0], t[1], t[2], p.camera_id, p.image_name
        );
    }
    out
}

/// Pose with the smallest IMAGE_ID, optionally restricted to names in `present`.
pub fn reference_pose<'a>(
    poses: &'a [CameraPose],
    present: Option<&HashSet<String>>,
) -> Option<&'a CameraPose> {
    poses
        .iter()
        .filter(|p| present.is_none_or(|s| s.contains(&p.image_name)))
        .min_by_key(|p| p.image_id)
}

pub fn relative_angles(poses: &[CameraPose], reference: &CameraPose) -> Vec<RelativeAngle> {
    poses
        .iter()
        .map(|p| RelativeAngle {
            frame: p.image_id,
            theta_deg: angular_deviation(&relative_rotation(p, reference)),
        })
        .collect()
}
