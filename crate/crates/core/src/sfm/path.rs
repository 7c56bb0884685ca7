//! Camera-path text files: one line per camera, `index qw qx qy qz cx cy cz`.

use crate::geometry::{CameraPose, Point3};

/// Format `(index, pose)` pairs, rotation as a unit quaternion (w >= 0) and the
/// camera center in world coordinates.
pub fn format_camera_path(entries: &[(usize, CameraPose)]) -> String {
    let mut out = String::new();
    for (index, pose) in entries {
        let q = pose.quaternion_wxyz();
        let c = pose.center();
        // Adding zero turns -0.0 into 0.0 so equal poses print identically.
        let v = [q[0], q[1], q[2], q[3], c.x, c.y, c.z].map(|x| x + 0.0);
        out.push_str(&format!(
            "{index} {} {} {} {} {} {} {}\n",
            v[0], v[1], v[2], v[3], v[4], v[5], v[6]
        ));
    }
    out
}

/// Parse the output of [`format_camera_path`]. Blank lines and lines starting
/// with `#` are ignored.
pub fn parse_camera_path(text: &str) -> Result<Vec<(usize, CameraPose)>, String> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(format!("line {}: expected 8 fields, got {}", lineno + 1, fields.len()));
        }
        let index: usize = fields[0]
            .parse()
            .map_err(|e| format!("line {}: bad index: {e}", lineno + 1))?;
        let mut v = [0f64; 7];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f
                .parse()
                .map_err(|e| format!("line {}: bad number '{f}': {e}", lineno + 1))?;
        }
        let pose = CameraPose::from_quaternion_center([v[0], v[1], v[2], v[3]], &Point3::new(v[4], v[5], v[6]));
        out.push((index, pose));
    }
    Ok(out)
}
