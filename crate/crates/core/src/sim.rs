//! Kinematic bicycle and pure-pursuit steering shared by both generators.

use crate::geom::{wrap_angle, Point2, State};

pub const WHEELBASE: f64 = 2.7;
/// Steering limit, radians.
pub const MAX_STEER: f64 = 0.6;
/// Acceleration (m/s^2) corresponding to a full positive or negative command.
pub const ACCEL_SCALE: f64 = 8.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Bicycle {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub v: f64,
}

impl Bicycle {
    pub fn new(x: f64, y: f64, yaw: f64, v: f64) -> Self {
        Bicycle { x, y, yaw, v }
    }

    pub fn pos(&self) -> Point2 {
        [self.x, self.y]
    }

    pub fn state(&self, t: f64, steer: f64, accel_cmd: f64) -> State {
        State {
            t,
            x: self.x,
            y: self.y,
            yaw: self.yaw,
            v: self.v,
            steer,
            accel: accel_cmd.clamp(-1.0, 1.0),
        }
    }

    /// Steering angle that puts the rear axle on an arc through `target`.
    pub fn pure_pursuit(&self, target: Point2, lookahead: f64) -> f64 {
        let dx = target[0] - self.x;
        let dy = target[1] - self.y;
        let alpha = wrap_angle(dy.atan2(dx) - self.yaw);
        let ld = lookahead.max(1e-3);
        (2.0 * WHEELBASE * alpha.sin() / ld).atan().clamp(-MAX_STEER, MAX_STEER)
    }

    /// Semi-implicit Euler step; speed never goes negative.
    pub fn step(&mut self, steer: f64, accel: f64, dt: f64) {
        let steer = steer.clamp(-MAX_STEER, MAX_STEER);
        self.x += self.v * self.yaw.cos() * dt;
        self.y += self.v * self.yaw.sin() * dt;
        self.yaw = wrap_angle(self.yaw + self.v / WHEELBASE * steer.tan() * dt);
        self.v = (self.v + accel * dt).max(0.0);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn straight_line_motion() {
        let mut b = Bicycle::new(0.0, 0.0, 0.0, 10.0);
        for _ in 0..10 {
            b.step(0.0, 0.0, 0.1);
        }
        assert!((b.x - 10.0).abs() < 1e-12);
        assert_eq!(b.y, 0.0);
    }

    #[test]
    fn constant_steer_turns_on_expected_radius() {
        let steer: f64 = 0.1;
        let r = WHEELBASE / steer.tan();
        let mut b = Bicycle::new(0.0, 0.0, 0.0, 5.0);
        let dt = 0.001;
        let n = (std::f64::consts::PI * r / 5.0 / dt) as usize;
        for _ in 0..n {
            b.step(steer, 0.0, dt);
        }
        // half circle: ends near (0, 2r)
        assert!((b.y - 2.0 * r).abs() < 0.1, "{} vs {}", b.y, 2.0 * r);
        assert!(b.x.abs() < 0.1);
    }

    #[test]
    fn pure_pursuit_sign() {
        let b = Bicycle::new(0.0, 0.0, 0.0, 5.0);
        assert!(b.pure_pursuit([5.0, 1.0], 5.0) > 0.0);
        assert!(b.pure_pursuit([5.0, -1.0], 5.0) < 0.0);
        assert_eq!(b.pure_pursuit([5.0, 0.0], 5.0), 0.0);
    }

    #[test]
    fn speed_never_negative() {
        let mut b = Bicycle::new(0.0, 0.0, 0.0, 0.5);
        b.step(0.0, -8.0, 0.1);
        assert_eq!(b.v, 0.0);
    }
}
