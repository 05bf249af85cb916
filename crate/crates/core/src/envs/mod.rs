//! Deterministic 2D navigation environments: a two-room wall world with a door
//! (position-controlled) and a four-room point-mass maze (force-controlled).
//!
//! Actions handed to [`step`] are in world units. Datasets, world models and
//! planners work in normalized units `u = a / a_max`, so `u ∈ [-1, 1]`; see
//! [`EnvSpec::to_world`].

mod dataset;
mod policy;

pub use dataset::{
    generate_dataset, load_dataset, sample_task, save_dataset, success, DatasetManifest, Policy,
    Provenance, RawDataset, RawTrajectory, TaskInstance, DATASET_SCHEMA,
};
pub use policy::GoalSeeker;

use serde::{Deserialize, Serialize};

pub const ACTION_DIM: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EnvKind {
    Wall2d,
    PointMassMaze,
}

/// Axis-aligned solid box. Points on the boundary are outside.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub min: [f64; 2],
    pub max: [f64; 2],
}

impl Rect {
    pub fn contains_open(&self, p: [f64; 2]) -> bool {
        p[0] > self.min[0] && p[0] < self.max[0] && p[1] > self.min[1] && p[1] < self.max[1]
    }

    pub fn contains_closed(&self, p: [f64; 2]) -> bool {
        p[0] >= self.min[0] && p[0] <= self.max[0] && p[1] >= self.min[1] && p[1] <= self.max[1]
    }
}

/// A wall: zero-thickness axis-aligned segment.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Segment {
    pub from: [f64; 2],
    pub to: [f64; 2],
}

impl Segment {
    fn is_vertical(&self) -> bool {
        self.from[0] == self.to[0]
    }

    /// Collision box: the segment inflated by `eps` on every side.
    fn solid(&self, eps: f64) -> Rect {
        Rect {
            min: [
                self.from[0].min(self.to[0]) - eps,
                self.from[1].min(self.to[1]) - eps,
            ],
            max: [
                self.from[0].max(self.to[0]) + eps,
                self.from[1].max(self.to[1]) + eps,
            ],
        }
    }
}

/// Opening in a wall line connecting two rooms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Door {
    /// Axis the door is crossed along (0: x, 1: y).
    pub axis: usize,
    /// Coordinate of the wall line along `axis`.
    pub line: f64,
    /// Gap interval on the other axis.
    pub gap: [f64; 2],
    /// Rooms on the low and high side of the line.
    pub rooms: [usize; 2],
}

impl Door {
    pub fn center(&self) -> [f64; 2] {
        let mid = 0.5 * (self.gap[0] + self.gap[1]);
        if self.axis == 0 {
            [self.line, mid]
        } else {
            [mid, self.line]
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvSpec {
    pub kind: EnvKind,
    /// Side length of the square box `[0, L]^2`.
    pub size: f64,
    pub walls: Vec<Segment>,
    pub doors: Vec<Door>,
    pub rooms: Vec<Rect>,
    pub a_max: f64,
    /// Per-substep velocity damping (point mass only).
    pub damping: f64,
    /// Velocity gained per step under unit normalized force (point mass only).
    pub force_scale: f64,
    pub frameskip: usize,
    pub contact_eps: f64,
    pub success_radius: f64,
}

/// Ground-truth simulator state.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvState {
    pub pos: [f64; 2],
    pub vel: [f64; 2],
}

impl EnvState {
    pub fn at(x: f64, y: f64) -> Self {
        EnvState {
            pos: [x, y],
            vel: [0.0, 0.0],
        }
    }
}

impl EnvSpec {
    /// Unit box, vertical wall at x = 0.5 with a door for y in [0.4, 0.6].
    pub fn wall2d() -> Self {
        EnvSpec {
            kind: EnvKind::Wall2d,
            size: 1.0,
            walls: vec![
                Segment { from: [0.5, 0.0], to: [0.5, 0.4] },
                Segment { from: [0.5, 0.6], to: [0.5, 1.0] },
            ],
            doors: vec![Door {
                axis: 0,
                line: 0.5,
                gap: [0.4, 0.6],
                rooms: [0, 1],
            }],
            rooms: vec![
                Rect { min: [0.0, 0.0], max: [0.5, 1.0] },
                Rect { min: [0.5, 0.0], max: [1.0, 1.0] },
            ],
            a_max: 0.05,
            damping: 0.0,
            force_scale: 0.0,
            frameskip: 5,
            contact_eps: 1e-3,
            success_radius: 0.05,
        }
    }

    /// 2x2 grid of rooms in the unit box with three doors; the wall between the
    /// two right-hand rooms is solid.
    pub fn point_mass_maze() -> Self {
        // rooms: 0 bottom-left, 1 bottom-right, 2 top-left, 3 top-right
        EnvSpec {
            kind: EnvKind::PointMassMaze,
            size: 1.0,
            walls: vec![
                Segment { from: [0.5, 0.0], to: [0.5, 0.2] },
                Segment { from: [0.5, 0.3], to: [0.5, 0.7] },
                Segment { from: [0.5, 0.8], to: [0.5, 1.0] },
                Segment { from: [0.0, 0.5], to: [0.2, 0.5] },
                Segment { from: [0.3, 0.5], to: [1.0, 0.5] },
            ],
            doors: vec![
                Door { axis: 0, line: 0.5, gap: [0.2, 0.3], rooms: [0, 1] },
                Door { axis: 0, line: 0.5, gap: [0.7, 0.8], rooms: [2, 3] },
                Door { axis: 1, line: 0.5, gap: [0.2, 0.3], rooms: [0, 2] },
            ],
            rooms: vec![
                Rect { min: [0.0, 0.0], max: [0.5, 0.5] },
                Rect { min: [0.5, 0.0], max: [1.0, 0.5] },
                Rect { min: [0.0, 0.5], max: [0.5, 1.0] },
                Rect { min: [0.5, 0.5], max: [1.0, 1.0] },
            ],
            a_max: 1.0,
            damping: 0.1,
            force_scale: 0.02,
            frameskip: 5,
            contact_eps: 1e-3,
            success_radius: 0.05,
        }
    }

    pub fn from_kind(kind: EnvKind) -> Self {
        match kind {
            EnvKind::Wall2d => EnvSpec::wall2d(),
            EnvKind::PointMassMaze => EnvSpec::point_mass_maze(),
        }
    }

    /// Checks the structural invariants (frameskip, doors on wall lines).
    pub fn validate(&self) -> crate::Result<()> {
        let fail = |m: String| Err(crate::Error::Config(m));
        if self.frameskip < 1 {
            return fail("frameskip must be >= 1".into());
        }
        if !(self.size > 0.0 && self.a_max > 0.0) {
            return fail("box size and a_max must be positive".into());
        }
        for (i, d) in self.doors.iter().enumerate() {
            let on_line = self.walls.iter().any(|w| {
                let coord = if d.axis == 0 { w.from[0] } else { w.from[1] };
                (d.axis == 0) == w.is_vertical() && coord == d.line
            });
            if !on_line || d.gap[0] >= d.gap[1] || d.rooms.iter().any(|&r| r >= self.rooms.len()) {
                return fail(format!("door {i} does not lie on a wall line"));
            }
        }
        Ok(())
    }

    pub fn obs_dim(&self) -> usize {
        match self.kind {
            EnvKind::Wall2d => 2,
            EnvKind::PointMassMaze => 4,
        }
    }

    pub fn action_dim(&self) -> usize {
        ACTION_DIM
    }

    /// Collision boxes of all walls.
    pub fn solids(&self) -> Vec<Rect> {
        self.walls.iter().map(|w| w.solid(self.contact_eps)).collect()
    }

    /// True when `p` is inside the box and outside every wall's collision box.
    pub fn is_free(&self, p: [f64; 2]) -> bool {
        p.iter().all(|&c| (0.0..=self.size).contains(&c))
            && self.solids().iter().all(|r| !r.contains_open(p))
    }

    /// Room index containing `p` (ties on a dividing line go to the lower index).
    pub fn room_of(&self, p: [f64; 2]) -> usize {
        self.rooms
            .iter()
            .position(|r| r.contains_closed(p))
            .unwrap_or(0)
    }

    /// Normalized action to world units.
    pub fn to_world(&self, u: &[f64]) -> [f64; 2] {
        [u[0] * self.a_max, u[1] * self.a_max]
    }

    pub fn observe(&self, s: &EnvState) -> Vec<f64> {
        match self.kind {
            EnvKind::Wall2d => s.pos.to_vec(),
            EnvKind::PointMassMaze => vec![s.pos[0], s.pos[1], s.vel[0], s.vel[1]],
        }
    }

    /// Inverse of [`EnvSpec::observe`]; observations carry the full state.
    pub fn state_from_obs(&self, o: &[f64]) -> EnvState {
        match self.kind {
            EnvKind::Wall2d => EnvState::at(o[0], o[1]),
            EnvKind::PointMassMaze => EnvState {
                pos: [o[0], o[1]],
                vel: [o[2], o[3]],
            },
        }
    }

    /// Moves `p` by `d`, x first then y, stopping at the first collision box
    /// face on each axis. Returns which axes were blocked.
    fn slide(&self, solids: &[Rect], p: &mut [f64; 2], d: [f64; 2]) -> [bool; 2] {
        let mut blocked = [false, false];
        for axis in 0..2 {
            let other = 1 - axis;
            let from = p[axis];
            let mut to = from + d[axis];
            for r in solids {
                if !(p[other] > r.min[other] && p[other] < r.max[other]) {
                    continue;
                }
                if from <= r.min[axis] && to > r.min[axis] {
                    to = r.min[axis];
                    blocked[axis] = true;
                } else if from >= r.max[axis] && to < r.max[axis] {
                    to = r.max[axis];
                    blocked[axis] = true;
                }
            }
            if to < 0.0 {
                to = 0.0;
                blocked[axis] = true;
            } else if to > self.size {
                to = self.size;
                blocked[axis] = true;
            }
            p[axis] = to;
        }
        blocked
    }
}

/// One logical environment step: `frameskip` substeps with the same clamped
/// action.
pub fn step(spec: &EnvSpec, s: &EnvState, a: [f64; 2]) -> EnvState {
    let a = [a[0].clamp(-spec.a_max, spec.a_max), a[1].clamp(-spec.a_max, spec.a_max)];
    let solids = spec.solids();
    let f = spec.frameskip as f64;
    let mut next = *s;
    match spec.kind {
        EnvKind::Wall2d => {
            let d = [a[0] / f, a[1] / f];
            for _ in 0..spec.frameskip {
                spec.slide(&solids, &mut next.pos, d);
            }
            next.vel = [0.0, 0.0];
        }
        EnvKind::PointMassMaze => {
            let gain = spec.force_scale / (spec.a_max * f);
            for _ in 0..spec.frameskip {
                for k in 0..2 {
                    next.vel[k] = (1.0 - spec.damping) * next.vel[k] + gain * a[k];
                }
                let d = [next.vel[0] / f, next.vel[1] / f];
                let blocked = spec.slide(&solids, &mut next.pos, d);
                for k in 0..2 {
                    if blocked[k] {
                        next.vel[k] = 0.0;
                    }
                }
            }
        }
    }
    next
}

/// States `s_2 .. s_{H+1}` reached by applying `actions` (world units) from `s1`.
pub fn rollout_env(spec: &EnvSpec, s1: &EnvState, actions: &[[f64; 2]]) -> Vec<EnvState> {
    let mut out = Vec::with_capacity(actions.len());
    let mut s = *s1;
    for &a in actions {
        s = step(spec, &s, a);
        out.push(s);
    }
    out
}

/// Same as [`rollout_env`] for actions in normalized units, as stored in
/// datasets and produced by planners.
pub fn rollout_normalized(spec: &EnvSpec, s1: &EnvState, actions: &[Vec<f64>]) -> Vec<EnvState> {
    let world: Vec<[f64; 2]> = actions.iter().map(|u| spec.to_world(u)).collect();
    rollout_env(spec, s1, &world)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn specs_validate() {
        EnvSpec::wall2d().validate().unwrap();
        EnvSpec::point_mass_maze().validate().unwrap();
        let mut bad = EnvSpec::wall2d();
        bad.frameskip = 0;
        assert!(bad.validate().is_err());
        let mut bad = EnvSpec::wall2d();
        bad.doors[0].line = 0.3;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn wall_zero_action_is_fixed_point() {
        let spec = EnvSpec::wall2d();
        let s = EnvState::at(0.21, 0.77);
        assert_eq!(step(&spec, &s, [0.0, 0.0]), s);
    }

    #[test]
    fn wall_blocks_and_slides() {
        // Just left of the solid lower wall piece, pushing right and up.
        let spec = EnvSpec::wall2d();
        let s = EnvState::at(0.48, 0.2);
        let next = step(&spec, &s, [0.05, 0.03]);
        // Geometry oracle: wall face at x = 0.5, collision box inflated by eps.
        let face = 0.5 - spec.contact_eps;
        assert_eq!(next.pos[0], face);
        assert!((next.pos[1] - 0.23).abs() < 1e-12);
    }

    #[test]
    fn wall_door_lets_agent_through() {
        let spec = EnvSpec::wall2d();
        let s = EnvState::at(0.48, 0.5);
        let next = step(&spec, &s, [0.05, 0.0]);
        assert!((next.pos[0] - 0.53).abs() < 1e-12);
    }

    #[test]
    fn actions_are_clamped() {
        let spec = EnvSpec::wall2d();
        let s = EnvState::at(0.2, 0.2);
        assert_eq!(step(&spec, &s, [10.0, -10.0]), step(&spec, &s, [0.05, -0.05]));
    }

    #[test]
    fn point_mass_coasting_matches_closed_form() {
        let spec = EnvSpec::point_mass_maze();
        let v = [0.03, -0.02];
        let s = EnvState { pos: [0.2, 0.3], vel: v };
        let next = step(&spec, &s, [0.0, 0.0]);
        // Each substep: v <- (1 - g) v, p <- p + v / F.
        let (g, f) = (spec.damping, spec.frameskip as f64);
        let r = 1.0 - g;
        let factor = r * (1.0 - r.powi(spec.frameskip as i32)) / g / f;
        for k in 0..2 {
            assert!((next.pos[k] - (s.pos[k] + v[k] * factor)).abs() < 1e-15);
            assert!((next.vel[k] - v[k] * r.powi(spec.frameskip as i32)).abs() < 1e-15);
        }
    }

    #[test]
    fn rollout_composes_steps() {
        let spec = EnvSpec::point_mass_maze();
        let s1 = EnvState::at(0.1, 0.1);
        let acts: Vec<[f64; 2]> = (0..25)
            .map(|i| [((i * 7) as f64).sin(), ((i * 3) as f64).cos()])
            .collect();
        let traj = rollout_env(&spec, &s1, &acts);
        let folded = acts.iter().fold(s1, |s, &a| step(&spec, &s, a));
        assert_eq!(*traj.last().unwrap(), folded);
        assert_eq!(rollout_env(&spec, &s1, &acts[..1])[0], step(&spec, &s1, acts[0]));
    }
}
