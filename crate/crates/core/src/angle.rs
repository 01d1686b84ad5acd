//! Heading arithmetic on the circle. Headings are degrees clockwise from north.

/// Wraps any finite angle into `[0, 360)`.
pub fn wrap_degrees(deg: f64) -> f64 {
    let w = deg.rem_euclid(360.0);
    // rem_euclid can return exactly 360.0 for tiny negative inputs
    if w >= 360.0 {
        0.0
    } else {
        w
    }
}

/// Signed difference `to - from` wrapped into `(-180, 180]`.
pub fn wrapped_difference(to: f64, from: f64) -> f64 {
    let d = wrap_degrees(to - from);
    if d > 180.0 {
        d - 360.0
    } else {
        d
    }
}

/// Absolute angular error on the circle, in `[0, 180]`.
pub fn angular_error(a: f64, b: f64) -> f64 {
    wrapped_difference(a, b).abs()
}

/// Circular distance between two bins of a `len`-bin circle.
pub fn bin_distance(a: usize, b: usize, len: usize) -> usize {
    let d = a.abs_diff(b) % len;
    d.min(len - d)
}

/// Rotates an `[east, north]` vector clockwise by `deg`, so a vector along
/// bearing `b` ends up along bearing `b + deg`.
pub fn rotate_bearing(v: [f64; 2], deg: f64) -> [f64; 2] {
    let (s, c) = deg.to_radians().sin_cos();
    [v[0] * c + v[1] * s, -v[0] * s + v[1] * c]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rotation_moves_bearing() {
        let v = rotate_bearing([0.0, 1.0], 90.0);
        assert!((v[0] - 1.0).abs() < 1e-12 && v[1].abs() < 1e-12);
        let v = rotate_bearing([1.0, 0.0], 90.0);
        assert!(v[0].abs() < 1e-12 && (v[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn wraps_into_range() {
        assert_eq!(wrap_degrees(370.0), 10.0);
        assert_eq!(wrap_degrees(-10.0), 350.0);
        assert_eq!(wrap_degrees(360.0), 0.0);
        assert_eq!(wrap_degrees(-1e-18), 0.0);
    }

    #[test]
    fn difference_takes_short_way() {
        assert_eq!(wrapped_difference(359.0, 1.0), -2.0);
        assert_eq!(wrapped_difference(1.0, 359.0), 2.0);
        assert_eq!(wrapped_difference(180.0, 0.0), 180.0);
        assert_eq!(wrapped_difference(0.0, 180.0), 180.0);
        assert_eq!(angular_error(10.0, 350.0), 20.0);
    }

    #[test]
    fn bin_distance_wraps() {
        assert_eq!(bin_distance(0, 63, 64), 1);
        assert_eq!(bin_distance(10, 12, 64), 2);
        assert_eq!(bin_distance(0, 32, 64), 32);
    }
}
