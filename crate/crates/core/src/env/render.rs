use std::f64::consts::FRAC_PI_2;

use super::{FactorState, Observation, Pose, IMAGE_SIDE};

/// Binary union of the heart and square masks.
pub fn render(factors: &FactorState) -> Observation {
    let mut obs = Observation::blank();
    paint(&mut obs, &factors.heart, 1.6, inside_heart);
    // The square has 4-fold symmetry; reducing the angle makes rotations by
    // quarter turns render identically.
    let square = Pose {
        rot: factors.square.rot.rem_euclid(FRAC_PI_2),
        ..factors.square
    };
    paint(&mut obs, &square, 1.5, inside_square);
    obs
}

pub fn render_heart(pose: &Pose) -> Observation {
    let mut obs = Observation::blank();
    paint(&mut obs, pose, 1.6, inside_heart);
    obs
}

pub fn render_square(pose: &Pose) -> Observation {
    let mut obs = Observation::blank();
    let pose = Pose {
        rot: pose.rot.rem_euclid(FRAC_PI_2),
        ..*pose
    };
    paint(&mut obs, &pose, 1.5, inside_square);
    obs
}

/// `(x^2 + y^2 - 1)^3 - x^2 y^3 <= 0` with `y` pointing up.
fn inside_heart(u: f64, v: f64) -> bool {
    let y = -v;
    let a = u * u + y * y - 1.0;
    a * a * a - u * u * y * y * y <= 0.0
}

fn inside_square(u: f64, v: f64) -> bool {
    u.abs() <= 1.0 && v.abs() <= 1.0
}

/// Sets every pixel whose centre maps inside the shape's object frame.
///
/// Pixel centres sit at `(col + 0.5, row + 0.5)` in pixel units; object
/// coordinates are the centre offset rotated by `-rot` and divided by the
/// half-extent in pixels. Only a bounding box of `reach` half-extents is
/// scanned.
fn paint(obs: &mut Observation, pose: &Pose, reach: f64, inside: fn(f64, f64) -> bool) {
    let side = IMAGE_SIDE as f64;
    let (cx, cy) = (pose.x * side, pose.y * side);
    let s = pose.scale * side;
    let (sin, cos) = pose.rot.sin_cos();
    let r = reach * s;
    let lo = |c: f64| ((c - r - 0.5).floor().max(0.0)) as usize;
    let hi = |c: f64| ((c + r + 0.5).ceil().min(side)) as usize;
    for row in lo(cy)..hi(cy) {
        let dy = row as f64 + 0.5 - cy;
        for col in lo(cx)..hi(cx) {
            let dx = col as f64 + 0.5 - cx;
            let u = (dx * cos + dy * sin) / s;
            let v = (-dx * sin + dy * cos) / s;
            if inside(u, v) {
                obs.set(row, col);
            }
        }
    }
}
