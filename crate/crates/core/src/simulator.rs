//! One-dimensional two-vehicle world under piecewise-constant bounded
//! acceleration.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{Side, StepSnapshot, TrackGeometry, VehicleState};

#[derive(Debug, Error, Clone, PartialEq)]
#[error("plan corruption: non-finite normalized acceleration {0}")]
pub struct PlanCorruption(pub f64);

/// Maps a normalized plan element onto a physical acceleration.
pub fn clamp_and_scale(normalized: f64, a_max: f64) -> Result<f64, PlanCorruption> {
    if !normalized.is_finite() {
        return Err(PlanCorruption(normalized));
    }
    Ok(a_max * normalized.clamp(-1.0, 1.0))
}

/// Exact constant-acceleration update over one step. A vehicle that would
/// reverse instead halts at the point where its speed reaches zero.
pub fn step(state: VehicleState, accel: f64, dt: f64) -> VehicleState {
    let v = state.velocity;
    let v_next = v + accel * dt;
    let (position, velocity) = if v_next >= 0.0 {
        (state.position + v * dt + 0.5 * accel * dt * dt, v_next)
    } else {
        // accel < 0 here; stop after v / |a| seconds.
        (state.position + v * v / (-2.0 * accel), 0.0)
    };
    VehicleState {
        position,
        velocity,
        acceleration: accel,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldState {
    pub time: f64,
    pub left: VehicleState,
    pub right: VehicleState,
    /// Per-vehicle flag (left, right): has passed the merge point.
    pub merged: [bool; 2],
}

impl WorldState {
    pub fn new(left: VehicleState, right: VehicleState, track: &TrackGeometry) -> Self {
        let mut world = Self {
            time: 0.0,
            left,
            right,
            merged: [false; 2],
        };
        world.update_merged(track);
        world
    }

    pub fn vehicle(&self, side: Side) -> &VehicleState {
        match side {
            Side::Left => &self.left,
            Side::Right => &self.right,
        }
    }

    pub fn has_merged(&self, side: Side) -> bool {
        match side {
            Side::Left => self.merged[0],
            Side::Right => self.merged[1],
        }
    }

    fn update_merged(&mut self, track: &TrackGeometry) {
        self.merged[0] |= self.left.position >= track.approach_length;
        self.merged[1] |= self.right.position >= track.approach_length;
    }

    pub fn snapshot(&self) -> StepSnapshot {
        StepSnapshot {
            time: self.time,
            left: self.left,
            right: self.right,
        }
    }
}

/// Trial-local simulation: a world plus its step counter, so that time is
/// always an exact multiple of `dt`.
#[derive(Debug, Clone)]
pub struct Simulation {
    world: WorldState,
    track: TrackGeometry,
    dt: f64,
    steps: usize,
}

impl Simulation {
    pub fn new(world: WorldState, track: TrackGeometry, dt: f64) -> Self {
        Self {
            world,
            track,
            dt,
            steps: 0,
        }
    }

    pub fn world(&self) -> &WorldState {
        &self.world
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn advance(&mut self, accel_left: f64, accel_right: f64) -> &WorldState {
        self.world.left = step(self.world.left, accel_left, self.dt);
        self.world.right = step(self.world.right, accel_right, self.dt);
        self.steps += 1;
        self.world.time = self.steps as f64 * self.dt;
        self.world.update_merged(&self.track);
        &self.world
    }

    pub fn termination(&self, vehicle_length: f64, max_steps: usize) -> Termination {
        check_termination(&self.world, &self.track, vehicle_length, self.steps, max_steps)
    }
}

/// Collision check; only active once both vehicles are on the merged
/// section, where arc positions share a common reference.
pub fn check_collision(world: &WorldState, vehicle_length: f64) -> bool {
    world.merged[0]
        && world.merged[1]
        && (world.left.position - world.right.position).abs() < vehicle_length
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Termination {
    Continue,
    Collision,
    Finished,
    NonFinished,
}

/// Collision wins over finishing in the same step; the step budget applies
/// only when neither happened.
pub fn check_termination(
    world: &WorldState,
    track: &TrackGeometry,
    vehicle_length: f64,
    steps_elapsed: usize,
    max_steps: usize,
) -> Termination {
    if check_collision(world, vehicle_length) {
        Termination::Collision
    } else if world.left.position.max(world.right.position) >= track.total_length() {
        Termination::Finished
    } else if steps_elapsed >= max_steps {
        Termination::NonFinished
    } else {
        Termination::Continue
    }
}

/// The first arrival at the merge point, located by linear interpolation
/// between the bracketing snapshots.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MergeEvent {
    pub first: Side,
    pub time: f64,
    /// Separation between the vehicles at `time` (m).
    pub gap: f64,
}

fn crossing(steps: &[StepSnapshot], side: Side, line: f64) -> Option<(usize, f64)> {
    let pos = |s: &StepSnapshot| match side {
        Side::Left => s.left.position,
        Side::Right => s.right.position,
    };
    let first = steps.first()?;
    if pos(first) >= line {
        return Some((0, 0.0));
    }
    steps.windows(2).enumerate().find_map(|(k, w)| {
        let (x0, x1) = (pos(&w[0]), pos(&w[1]));
        (x1 >= line).then(|| (k + 1, (line - x0) / (x1 - x0)))
    })
}

pub fn merge_event(steps: &[StepSnapshot], approach_length: f64) -> Option<MergeEvent> {
    let left = crossing(steps, Side::Left, approach_length);
    let right = crossing(steps, Side::Right, approach_length);
    let key = |(k, frac): (usize, f64)| k as f64 - 1.0 + frac;
    let (first, (k, frac)) = match (left, right) {
        (None, None) => return None,
        (Some(l), None) => (Side::Left, l),
        (None, Some(r)) => (Side::Right, r),
        (Some(l), Some(r)) => {
            if key(r) < key(l) {
                (Side::Right, r)
            } else {
                (Side::Left, l)
            }
        }
    };
    let lerp = |a: f64, b: f64| a + (b - a) * frac;
    let (time, xl, xr) = if k == 0 {
        let s = &steps[0];
        (s.time, s.left.position, s.right.position)
    } else {
        let (s0, s1) = (&steps[k - 1], &steps[k]);
        (
            lerp(s0.time, s1.time),
            lerp(s0.left.position, s1.left.position),
            lerp(s0.right.position, s1.right.position),
        )
    };
    Some(MergeEvent {
        first,
        time,
        gap: (xl - xr).abs(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx_eq::close;

    mod approx_eq {
        pub fn close(a: f64, b: f64, tol: f64) -> bool {
            (a - b).abs() <= tol
        }
    }

    /// Tiny-step explicit integrator used as an independent reference.
    fn brute_force(x: f64, v: f64, a: f64, dt: f64) -> (f64, f64) {
        let h = 1e-6;
        let n = (dt / h).round() as usize;
        let (mut x, mut v) = (x, v);
        for _ in 0..n {
            let v_next = (v + a * h).max(0.0);
            x += 0.5 * (v + v_next) * h;
            v = v_next;
        }
        (x, v)
    }

    #[test]
    fn clamp_and_scale_examples() {
        assert_eq!(clamp_and_scale(1.0, 2.5).unwrap(), 2.5);
        assert_eq!(clamp_and_scale(0.0, 2.5).unwrap(), 0.0);
        assert_eq!(clamp_and_scale(-1.4, 2.5).unwrap(), -2.5);
        assert!(clamp_and_scale(f64::NAN, 2.5).is_err());
        assert!(clamp_and_scale(f64::INFINITY, 2.5).is_err());
    }

    #[test]
    fn step_examples() {
        let s = step(VehicleState::new(0.0, 10.0), 2.5, 0.2);
        assert!(close(s.position, 2.05, 1e-12) && close(s.velocity, 10.5, 1e-12));
        assert_eq!(s.acceleration, 2.5);

        let s = step(VehicleState::new(5.0, 0.0), -2.5, 0.2);
        assert_eq!((s.position, s.velocity), (5.0, 0.0));

        let s = step(VehicleState::new(0.0, 0.25), -2.5, 0.2);
        let (bx, bv) = brute_force(0.0, 0.25, -2.5, 0.2);
        assert!(close(s.position, 0.0125, 1e-12));
        assert!(close(s.position, bx, 1e-6) && close(bv, 0.0, 1e-12));
        assert_eq!(s.velocity, 0.0);
    }

    fn world(xl: f64, xr: f64) -> WorldState {
        WorldState::new(
            VehicleState::new(xl, 10.0),
            VehicleState::new(xr, 10.0),
            &TrackGeometry::default(),
        )
    }

    #[test]
    fn collision_examples() {
        assert!(check_collision(&world(60.0, 55.6), 4.5));
        assert!(!check_collision(&world(60.0, 55.5), 4.5));
        assert!(!check_collision(&world(50.5, 49.5), 4.5));
    }

    #[test]
    fn termination_precedence() {
        let track = TrackGeometry::default();
        assert_eq!(check_termination(&world(100.0, 96.0), &track, 4.5, 10, 600), Termination::Collision);
        assert_eq!(check_termination(&world(100.0, 80.0), &track, 4.5, 10, 600), Termination::Finished);
        assert_eq!(check_termination(&world(10.0, 8.0), &track, 4.5, 600, 600), Termination::NonFinished);
        assert_eq!(check_termination(&world(10.0, 8.0), &track, 4.5, 599, 600), Termination::Continue);
    }

    #[test]
    fn merge_event_constant_speed() {
        let track = TrackGeometry::default();
        let mut sim = Simulation::new(world(4.0, 0.0), track, 0.2);
        let mut steps = vec![sim.world().snapshot()];
        while sim.world().left.position < 60.0 {
            steps.push(sim.advance(0.0, 0.0).snapshot());
        }
        let ev = merge_event(&steps, 50.0).unwrap();
        assert_eq!(ev.first, Side::Left);
        assert!(close(ev.time, 4.6, 1e-9));
        assert!(close(ev.gap, 4.0, 1e-9));
    }
}
