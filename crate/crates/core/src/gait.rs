//! Gait phases, the node grid derived from them and the receding horizon.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::LEG_COUNT;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PhaseConfig {
    LF,
    RF,
    LH,
    RH,
    /// All four feet in stance.
    F,
}

impl PhaseConfig {
    pub fn swing_leg(self) -> Option<usize> {
        match self {
            PhaseConfig::LF => Some(0),
            PhaseConfig::RF => Some(1),
            PhaseConfig::LH => Some(2),
            PhaseConfig::RH => Some(3),
            PhaseConfig::F => None,
        }
    }

    pub fn contact_flags(self) -> [bool; LEG_COUNT] {
        let mut flags = [true; LEG_COUNT];
        if let Some(leg) = self.swing_leg() {
            flags[leg] = false;
        }
        flags
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GaitPhase {
    pub config: PhaseConfig,
    pub duration: f64,
}

impl GaitPhase {
    pub fn new(config: PhaseConfig, duration: f64) -> Self {
        Self { config, duration }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GaitError {
    #[error("phase {index} lasts {duration} s, shorter than the sampling time {dt} s")]
    PhaseTooShort { index: usize, duration: f64, dt: f64 },
    #[error("invalid gait: {0}")]
    Invalid(String),
}

/// Repeating phase pattern with a cursor to the next phase to append.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CyclicPattern {
    pub phases: Vec<GaitPhase>,
    #[serde(default)]
    pub cursor: usize,
}

impl CyclicPattern {
    pub fn new(phases: Vec<GaitPhase>) -> Result<Self, GaitError> {
        if phases.is_empty() {
            return Err(GaitError::Invalid("cyclic pattern is empty".into()));
        }
        if phases.iter().any(|p| !(p.duration > 0.0)) {
            return Err(GaitError::Invalid("phase durations must be positive".into()));
        }
        Ok(Self { phases, cursor: 0 })
    }

    /// Lateral walk: RH, RF, LH, LF swings separated by four-feet stance.
    pub fn lateral_walk(swing: f64, short_stance: f64, long_stance: f64) -> Self {
        use PhaseConfig::*;
        let p = GaitPhase::new;
        Self {
            phases: vec![
                p(RH, swing),
                p(F, short_stance),
                p(RF, swing),
                p(F, long_stance),
                p(LH, swing),
                p(F, short_stance),
                p(LF, swing),
                p(F, long_stance),
            ],
            cursor: 0,
        }
    }

    pub fn next_phase(&mut self) -> GaitPhase {
        let phase = self.phases[self.cursor % self.phases.len()];
        self.cursor = (self.cursor + 1) % self.phases.len();
        phase
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaitSchedule {
    pub phases: Vec<GaitPhase>,
    pub dt: f64,
}

/// One node of the sampling grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridNode {
    pub time: f64,
    /// Contact flags of the phase enclosing this node.
    pub contact: [bool; LEG_COUNT],
    pub phase: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeGrid {
    pub dt: f64,
    pub nodes: Vec<GridNode>,
    /// Last node of every phase.
    pub phase_end: Vec<usize>,
}

impl NodeGrid {
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Contact flags of the interval from node `n` to `n + 1`, which belongs
    /// to the phase of node `n + 1`.
    pub fn stage_contact(&self, n: usize) -> [bool; LEG_COUNT] {
        self.nodes[(n + 1).min(self.nodes.len() - 1)].contact
    }

    /// Whether leg `leg` is on the ground at node `n`: in stance on the
    /// interval before or after the node.
    pub fn grounded(&self, n: usize, leg: usize) -> bool {
        let after = n + 1 < self.nodes.len() && self.stage_contact(n)[leg];
        let before = n > 0 && self.stage_contact(n - 1)[leg];
        after || before || (n == 0 && self.nodes[0].contact[leg])
    }

    /// Node `n` closes a swing interval of `leg` and opens a stance interval.
    pub fn is_touchdown(&self, n: usize, leg: usize) -> bool {
        n > 0 && !self.stage_contact(n - 1)[leg] && (n + 1 == self.nodes.len() || self.stage_contact(n)[leg])
    }

    /// The interval ending at node `n` is a swing interval of `leg`.
    pub fn after_swing(&self, n: usize, leg: usize) -> bool {
        n > 0 && !self.stage_contact(n - 1)[leg]
    }

    /// Index of the first node of phase `k`.
    pub fn phase_start(&self, k: usize) -> usize {
        if k == 0 {
            0
        } else {
            self.phase_end[k - 1]
        }
    }
}

/// Rounds to the nearest integer with exact halves going down.
fn snap(x: f64) -> usize {
    let nearest = x.round();
    if (x - nearest).abs() < 1e-9 {
        return nearest.max(0.0) as usize;
    }
    let floor = x.floor();
    if (x - floor - 0.5).abs() < 1e-9 {
        floor.max(0.0) as usize
    } else {
        nearest.max(0.0) as usize
    }
}

impl GaitSchedule {
    pub fn new(phases: Vec<GaitPhase>, dt: f64) -> Result<Self, GaitError> {
        let s = Self { phases, dt };
        s.validate()?;
        Ok(s)
    }

    /// Leading four-feet stance followed by the first `phases` phases of the
    /// pattern.
    pub fn initial(pattern: &mut CyclicPattern, stance: f64, phases: usize, dt: f64) -> Result<Self, GaitError> {
        let mut all = vec![GaitPhase::new(PhaseConfig::F, stance)];
        all.extend((0..phases).map(|_| pattern.next_phase()));
        Self::new(all, dt)
    }

    pub fn validate(&self) -> Result<(), GaitError> {
        if !(self.dt > 0.0) {
            return Err(GaitError::Invalid("sampling time must be positive".into()));
        }
        if self.phases.is_empty() {
            return Err(GaitError::Invalid("schedule has no phases".into()));
        }
        for (index, p) in self.phases.iter().enumerate() {
            if p.duration < self.dt - 1e-12 {
                return Err(GaitError::PhaseTooShort {
                    index,
                    duration: p.duration,
                    dt: self.dt,
                });
            }
        }
        Ok(())
    }

    pub fn horizon(&self) -> f64 {
        self.phases.iter().map(|p| p.duration).sum()
    }

    /// Swing phases in the horizon.
    pub fn swing_count(&self) -> usize {
        self.phases.iter().filter(|p| p.config.swing_leg().is_some()).count()
    }

    /// Start and end time of every phase.
    pub fn phase_times(&self) -> Vec<(f64, f64)> {
        let mut t = 0.0;
        self.phases
            .iter()
            .map(|p| {
                let start = t;
                t += p.duration;
                (start, t)
            })
            .collect()
    }

    pub fn build_node_grid(&self) -> Result<NodeGrid, GaitError> {
        self.validate()?;
        let mut phase_end = Vec::with_capacity(self.phases.len());
        let mut cumulative = 0.0;
        let mut previous = 0;
        for (index, p) in self.phases.iter().enumerate() {
            cumulative += p.duration;
            let end = snap(cumulative / self.dt);
            if end <= previous {
                return Err(GaitError::PhaseTooShort {
                    index,
                    duration: p.duration,
                    dt: self.dt,
                });
            }
            phase_end.push(end);
            previous = end;
        }
        // Node n belongs to the first phase whose end is at or after it.
        let nodes = (0..=previous)
            .map(|n| {
                let phase = phase_end.iter().position(|&e| n <= e).unwrap_or(phase_end.len() - 1);
                GridNode {
                    time: n as f64 * self.dt,
                    contact: self.phases[phase].config.contact_flags(),
                    phase,
                }
            })
            .collect();
        Ok(NodeGrid {
            dt: self.dt,
            nodes,
            phase_end,
        })
    }

    /// Drops the completed stance and swing phases and appends the next two
    /// phases of the pattern.
    pub fn advance_horizon(&self, pattern: &mut CyclicPattern) -> GaitSchedule {
        let mut phases: Vec<GaitPhase> = self.phases.iter().skip(2).copied().collect();
        phases.push(pattern.next_phase());
        phases.push(pattern.next_phase());
        GaitSchedule { phases, dt: self.dt }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use PhaseConfig::*;

    fn two_step_schedule() -> GaitSchedule {
        let d = [0.3, 0.3, 0.25, 0.3, 0.3];
        let e = [F, RH, F, RF, F];
        GaitSchedule::new(e.iter().zip(d).map(|(c, d)| GaitPhase::new(*c, d)).collect(), 0.02).unwrap()
    }

    #[test]
    fn two_step_grid_has_73_nodes() {
        let grid = two_step_schedule().build_node_grid().unwrap();
        assert_eq!(grid.len(), 73);
        for node in &grid.nodes {
            let in_swing = node.time > 0.30 + 1e-9 && node.time <= 0.60 + 1e-9;
            assert_eq!(!node.contact[3], in_swing, "t = {}", node.time);
        }
    }

    #[test]
    fn single_stance_phase() {
        let s = GaitSchedule::new(vec![GaitPhase::new(F, 0.1)], 0.02).unwrap();
        let grid = s.build_node_grid().unwrap();
        assert_eq!(grid.len(), 6);
        assert!(grid.nodes.iter().all(|n| n.contact == [true; 4]));
    }

    #[test]
    fn short_phase_is_rejected() {
        let s = GaitSchedule {
            phases: vec![GaitPhase::new(F, 0.3), GaitPhase::new(RH, 0.01)],
            dt: 0.02,
        };
        assert!(matches!(s.build_node_grid(), Err(GaitError::PhaseTooShort { index: 1, .. })));
    }

    #[test]
    fn advancing_walks_the_cycle() {
        let mut pattern = CyclicPattern::lateral_walk(0.3, 0.25, 0.3);
        let s = GaitSchedule::initial(&mut pattern, 0.3, 4, 0.02).unwrap();
        assert_eq!(s, two_step_schedule());
        let next = s.advance_horizon(&mut pattern);
        let configs: Vec<_> = next.phases.iter().map(|p| p.config).collect();
        assert_eq!(configs, vec![F, RF, F, LH, F]);
        assert_eq!(next.phases.len(), s.phases.len());
    }

    #[test]
    fn touchdown_and_grounding() {
        let grid = two_step_schedule().build_node_grid().unwrap();
        assert!(grid.grounded(15, 3));
        assert!(!grid.grounded(16, 3));
        assert!(grid.is_touchdown(30, 3));
        assert!(!grid.is_touchdown(29, 3));
        assert!(grid.after_swing(30, 3) && grid.after_swing(16, 3) && !grid.after_swing(15, 3));
    }
}
