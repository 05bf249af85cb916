use rand::Rng as _;

use super::{EnvKind, EnvSpec, EnvState};
use crate::rng::Rng;

/// Noisy waypoint follower that routes through doors. Produces normalized
/// actions.
#[derive(Clone, Debug)]
pub struct GoalSeeker {
    waypoint: [f64; 2],
    pub noise: f64,
}

const REACHED: f64 = 0.05;
const DOOR_STANDOFF: f64 = 0.06;

impl GoalSeeker {
    pub fn new(spec: &EnvSpec, rng: &mut Rng, noise: f64) -> Self {
        GoalSeeker {
            waypoint: sample_free(spec, rng),
            noise,
        }
    }

    pub fn waypoint(&self) -> [f64; 2] {
        self.waypoint
    }

    pub fn act(&mut self, spec: &EnvSpec, s: &EnvState, rng: &mut Rng) -> Vec<f64> {
        if dist(s.pos, self.waypoint) < REACHED {
            self.waypoint = sample_free(spec, rng);
        }
        let target = route(spec, s.pos, self.waypoint);
        let mut u = match spec.kind {
            EnvKind::Wall2d => [
                (target[0] - s.pos[0]) / spec.a_max,
                (target[1] - s.pos[1]) / spec.a_max,
            ],
            EnvKind::PointMassMaze => {
                // PD law on position error with velocity damping.
                let (kp, kd) = (4.0, 20.0);
                [
                    kp * (target[0] - s.pos[0]) - kd * s.vel[0],
                    kp * (target[1] - s.pos[1]) - kd * s.vel[1],
                ]
            }
        };
        for c in &mut u {
            let n = if self.noise > 0.0 {
                rng.random_range(-self.noise..=self.noise)
            } else {
                0.0
            };
            *c = (c.clamp(-1.0, 1.0) + n).clamp(-1.0, 1.0);
        }
        u.to_vec()
    }
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
}

/// Uniform sample from the free space of the box.
pub(crate) fn sample_free(spec: &EnvSpec, rng: &mut Rng) -> [f64; 2] {
    let margin = 2.0 * spec.contact_eps;
    loop {
        let p = [
            rng.random_range(margin..spec.size - margin),
            rng.random_range(margin..spec.size - margin),
        ];
        if spec.is_free(p) {
            return p;
        }
    }
}

/// Next intermediate target on the way from `p` to `goal`: the goal itself in
/// the same room, otherwise a point just before or just past the first door on
/// the shortest room path.
fn route(spec: &EnvSpec, p: [f64; 2], goal: [f64; 2]) -> [f64; 2] {
    let here = spec.room_of(p);
    let there = spec.room_of(goal);
    if here == there {
        return goal;
    }
    let Some(door_idx) = first_door(spec, here, there) else {
        return goal;
    };
    let door = spec.doors[door_idx];
    let dir = if door.rooms[0] == here { 1.0 } else { -1.0 };
    let other = 1 - door.axis;
    let half = 0.5 * (door.gap[1] - door.gap[0]);
    let center = door.center();
    let aligned = (p[other] - center[other]).abs() < 0.5 * half;
    let mut t = center;
    t[door.axis] += if aligned { dir * DOOR_STANDOFF } else { -dir * DOOR_STANDOFF };
    t
}

/// Breadth-first search over the room graph; returns the first door to cross.
fn first_door(spec: &EnvSpec, from: usize, to: usize) -> Option<usize> {
    let n = spec.rooms.len();
    let mut via: Vec<Option<usize>> = vec![None; n];
    let mut seen = vec![false; n];
    let mut queue = std::collections::VecDeque::from([from]);
    seen[from] = true;
    while let Some(r) = queue.pop_front() {
        if r == to {
            break;
        }
        for (i, d) in spec.doors.iter().enumerate() {
            let next = if d.rooms[0] == r {
                d.rooms[1]
            } else if d.rooms[1] == r {
                d.rooms[0]
            } else {
                continue;
            };
            if !seen[next] {
                seen[next] = true;
                via[next] = Some(if r == from { i } else { via[r]? });
                queue.push_back(next);
            }
        }
    }
    via[to]
}
