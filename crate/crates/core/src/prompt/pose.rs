//! Camera pose to text: Z-Y-X Euler decomposition and fixed-decimal formatting.

use nalgebra::{Matrix3, Rotation3, Vector3};

use crate::scene::CameraPose;

/// Below this |cos(pitch)| the decomposition is treated as gimbal-locked.
pub const GIMBAL_LOCK_COS: f64 = 1e-7;

/// Intrinsic Z-Y-X angles in degrees, each in (−180, 180]:
/// `R = Rz(yaw) · Ry(pitch) · Rx(roll)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EulerAngles {
    pub roll_deg: f64,
    pub pitch_deg: f64,
    pub yaw_deg: f64,
}

impl EulerAngles {
    pub fn to_rotation(&self) -> Matrix3<f64> {
        let rz = Rotation3::from_axis_angle(&Vector3::z_axis(), self.yaw_deg.to_radians());
        let ry = Rotation3::from_axis_angle(&Vector3::y_axis(), self.pitch_deg.to_radians());
        let rx = Rotation3::from_axis_angle(&Vector3::x_axis(), self.roll_deg.to_radians());
        (rz * ry * rx).into_inner()
    }
}

fn canonical_degrees(rad: f64) -> f64 {
    let mut deg = rad.to_degrees();
    while deg <= -180.0 {
        deg += 360.0;
    }
    while deg > 180.0 {
        deg -= 360.0;
    }
    deg
}

pub fn is_gimbal_locked(r: &Matrix3<f64>) -> bool {
    r[(0, 0)].hypot(r[(1, 0)]) < GIMBAL_LOCK_COS
}

/// Decomposes a rotation matrix. At gimbal lock roll is pinned to 0 and yaw
/// absorbs the free angle.
pub fn matrix_to_euler(r: &Matrix3<f64>) -> EulerAngles {
    let cos_pitch = r[(0, 0)].hypot(r[(1, 0)]);
    let pitch = (-r[(2, 0)]).atan2(cos_pitch);
    let (roll, yaw) = if cos_pitch < GIMBAL_LOCK_COS {
        (0.0, (-r[(0, 1)]).atan2(r[(1, 1)]))
    } else {
        (r[(2, 1)].atan2(r[(2, 2)]), r[(1, 0)].atan2(r[(0, 0)]))
    };
    EulerAngles {
        roll_deg: canonical_degrees(roll),
        pitch_deg: canonical_degrees(pitch),
        yaw_deg: canonical_degrees(yaw),
    }
}

pub fn rotation_to_euler(pose: &CameraPose) -> EulerAngles {
    matrix_to_euler(&pose.rotation())
}

/// Fixed-point text with `decimals` digits, rounding half away from zero on
/// the value's shortest round-trip decimal form (so 1.005 gives "1.01").
/// Negative zero prints without a sign.
pub fn format_fixed(value: f64, decimals: usize) -> String {
    assert!(value.is_finite(), "cannot format non-finite value {value}");
    let text = format!("{}", value.abs());
    let (int_part, frac_part) = text.split_once('.').unwrap_or((&text, ""));
    let mut digits: Vec<u8> = int_part
        .bytes()
        .chain(frac_part.bytes().chain(std::iter::repeat(b'0')).take(decimals))
        .map(|b| b - b'0')
        .collect();
    let next = frac_part.as_bytes().get(decimals).map_or(0, |b| b - b'0');
    let mut int_len = int_part.len();
    if next >= 5 {
        let mut i = digits.len();
        loop {
            if i == 0 {
                digits.insert(0, 1);
                int_len += 1;
                break;
            }
            i -= 1;
            if digits[i] == 9 {
                digits[i] = 0;
            } else {
                digits[i] += 1;
                break;
            }
        }
    }
    let negative = value.is_sign_negative() && digits.iter().any(|&d| d != 0);
    let mut out = String::with_capacity(digits.len() + 2);
    if negative {
        out.push('-');
    }
    for (k, d) in digits.iter().enumerate() {
        if k == int_len {
            out.push('.');
        }
        out.push((b'0' + d) as char);
    }
    out
}

fn format_angle(deg: f64) -> String {
    let s = format_fixed(deg, 1);
    // keep the printed value inside (−180, 180]
    if s == "-180.0" {
        "180.0".to_string()
    } else {
        s
    }
}

pub fn format_position(pose: &CameraPose) -> String {
    let t = pose.translation();
    format!(
        "Camera position: [x={}m, y={}m, z={}m]",
        format_fixed(t.x, 2),
        format_fixed(t.y, 2),
        format_fixed(t.z, 2)
    )
}

pub fn format_rotation(pose: &CameraPose) -> String {
    let e = rotation_to_euler(pose);
    format!(
        "Camera rotation: [x={}°, y={}°, z={}°]",
        format_angle(e.roll_deg),
        format_angle(e.pitch_deg),
        format_angle(e.yaw_deg)
    )
}

/// `(position_text, rotation_text)` for a pose.
pub fn format_pose_block(pose: &CameraPose) -> (String, String) {
    (format_position(pose), format_rotation(pose))
}
