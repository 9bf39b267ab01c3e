//! Factor graph assembly over a sequence window: detection factors per track
//! per frame, constant-velocity chains, and repelling factors between nearby
//! track pairs.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use nalgebra::{Matrix6, Vector3};

use crate::error::{Error, Result};
use crate::factors::{CvFactor, DetectionFactor, RepellingFactor};
use crate::scalar::Real;
use crate::types::{GaussianMixture, TrackerParams};

/// Variable kind within one track frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum VarKind {
    Position,
    Velocity,
}

/// Identifier of one state variable.
///
/// The ordering (frame, then track, then kind) is the elimination order used
/// by the solver; it keeps the normal equations banded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct VariableId {
    pub frame: usize,
    pub track_id: u64,
    pub kind: VarKind,
}

impl VariableId {
    pub fn position(track_id: u64, frame: usize) -> Self {
        Self {
            frame,
            track_id,
            kind: VarKind::Position,
        }
    }

    pub fn velocity(track_id: u64, frame: usize) -> Self {
        Self {
            frame,
            track_id,
            kind: VarKind::Velocity,
        }
    }
}

impl std::fmt::Display for VariableId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let k = match self.kind {
            VarKind::Position => 'p',
            VarKind::Velocity => 'v',
        };
        write!(f, "{k}({},{})", self.track_id, self.frame)
    }
}

/// Borrowed view of any factor in the graph, for solver iteration.
#[derive(Debug, Clone, Copy)]
pub enum FactorView<'a, T: Real> {
    Detection(&'a DetectionFactor<T>),
    Cv(&'a CvFactor<T>),
    Repelling(&'a RepellingFactor<T>),
}

impl<'a, T: Real> FactorView<'a, T> {
    pub fn vars(&self) -> &[VariableId] {
        match self {
            FactorView::Detection(f) => std::slice::from_ref(&f.var),
            FactorView::Cv(f) => &f.vars,
            FactorView::Repelling(f) => &f.vars,
        }
    }
}

/// Factor graph over per-track, per-frame position and velocity variables.
#[derive(Debug, Clone)]
pub struct FactorGraph<T: Real> {
    values: BTreeMap<VariableId, Vector3<T>>,
    detection: BTreeMap<(u64, usize), DetectionFactor<T>>,
    /// Keyed by (track, earlier frame of the linked pair).
    cv: BTreeMap<(u64, usize), CvFactor<T>>,
    repelling: BTreeMap<usize, Vec<RepellingFactor<T>>>,
    /// Frames strictly below this bound are frozen (constants in the solve).
    frozen_below: Option<usize>,
    dt: T,
    cv_sqrt_info: Matrix6<T>,
    rep_sqrt_info: T,
}

impl<T: Real> FactorGraph<T> {
    pub fn new(params: &TrackerParams<T>) -> Self {
        Self {
            values: BTreeMap::new(),
            detection: BTreeMap::new(),
            cv: BTreeMap::new(),
            repelling: BTreeMap::new(),
            frozen_below: None,
            dt: params.dt,
            cv_sqrt_info: params.cv_sqrt_info(),
            rep_sqrt_info: params.rep_sqrt_info(),
        }
    }

    pub fn dt(&self) -> T {
        self.dt
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn variable_count(&self) -> usize {
        self.values.len()
    }

    pub fn factor_count(&self) -> usize {
        self.detection.len() + self.cv.len() + self.repelling.values().map(Vec::len).sum::<usize>()
    }

    pub fn detection_factor_count(&self) -> usize {
        self.detection.len()
    }

    pub fn cv_factor_count(&self) -> usize {
        self.cv.len()
    }

    pub fn repelling_factor_count(&self) -> usize {
        self.repelling.values().map(Vec::len).sum()
    }

    pub fn value(&self, id: &VariableId) -> Option<&Vector3<T>> {
        self.values.get(id)
    }

    pub fn set_value(&mut self, id: VariableId, value: Vector3<T>) -> Result<()> {
        match self.values.get_mut(&id) {
            Some(slot) => {
                *slot = value;
                Ok(())
            }
            None => Err(Error::Structure(format!("unknown variable {id}"))),
        }
    }

    pub fn first_frame(&self) -> Option<usize> {
        self.values.keys().next().map(|id| id.frame)
    }

    pub fn last_frame(&self) -> Option<usize> {
        self.values.keys().next_back().map(|id| id.frame)
    }

    /// Frames that currently hold at least one variable, ascending.
    pub fn frames(&self) -> Vec<usize> {
        let mut frames: Vec<usize> = self.values.keys().map(|id| id.frame).collect();
        frames.dedup();
        frames
    }

    pub fn detection_factor(&self, track_id: u64, frame: usize) -> Option<&DetectionFactor<T>> {
        self.detection.get(&(track_id, frame))
    }

    pub fn is_frozen(&self, id: &VariableId) -> bool {
        self.frozen_below.is_some_and(|bound| id.frame < bound)
    }

    pub fn has_free_variables(&self) -> bool {
        self.values.keys().any(|id| !self.is_frozen(id))
    }

    pub(crate) fn values_map(&self) -> &BTreeMap<VariableId, Vector3<T>> {
        &self.values
    }

    /// Iterates every factor: detections and cv chains in key order, then
    /// repelling factors by frame. The order is deterministic.
    pub fn factors(&self) -> impl Iterator<Item = FactorView<'_, T>> {
        let det = self.detection.values().map(FactorView::Detection);
        let cv = self.cv.values().map(FactorView::Cv);
        let rep = self
            .repelling
            .values()
            .flat_map(|v| v.iter())
            .map(FactorView::Repelling);
        det.chain(cv).chain(rep)
    }

    /// Creates the position/velocity variables of `(track_id, frame)`,
    /// attaches a detection factor with `mixture`, and links a
    /// constant-velocity factor to the previous frame when it exists.
    pub fn add_track_frame(
        &mut self,
        track_id: u64,
        frame: usize,
        init_pos: Vector3<T>,
        init_vel: Vector3<T>,
        mixture: GaussianMixture<T>,
    ) -> Result<(VariableId, VariableId)> {
        let pos_id = VariableId::position(track_id, frame);
        let vel_id = VariableId::velocity(track_id, frame);
        if self.values.contains_key(&pos_id) {
            return Err(Error::Structure(format!(
                "track {track_id} already has variables at frame {frame}"
            )));
        }
        self.values.insert(pos_id, init_pos);
        self.values.insert(vel_id, init_vel);
        self.detection.insert(
            (track_id, frame),
            DetectionFactor {
                mixture,
                frame,
                var: pos_id,
            },
        );
        if frame > 0 {
            let prev = VariableId::position(track_id, frame - 1);
            if self.values.contains_key(&prev) {
                self.cv.insert(
                    (track_id, frame - 1),
                    CvFactor {
                        sqrt_info: self.cv_sqrt_info,
                        dt: self.dt,
                        vars: [
                            VariableId::position(track_id, frame - 1),
                            VariableId::velocity(track_id, frame - 1),
                            pos_id,
                            vel_id,
                        ],
                    },
                );
            }
        }
        Ok((pos_id, vel_id))
    }

    /// Rebuilds the repelling set of `frame` from the current position
    /// estimates: one factor per unordered track pair closer than `d_min`.
    /// Returns the number of factors installed.
    pub fn add_repelling_pairs(&mut self, frame: usize, d_min: T) -> usize {
        let positions: Vec<(u64, Vector3<T>)> = self
            .values
            .range(
                VariableId::position(0, frame)..=VariableId::velocity(u64::MAX, frame),
            )
            .filter(|(id, _)| id.kind == VarKind::Position)
            .map(|(id, v)| (id.track_id, *v))
            .collect();

        let mut factors = Vec::new();
        for i in 0..positions.len() {
            for j in (i + 1)..positions.len() {
                let (ta, pa) = positions[i];
                let (tb, pb) = positions[j];
                if (pa - pb).norm() < d_min {
                    factors.push(RepellingFactor {
                        sqrt_info: self.rep_sqrt_info,
                        vars: [
                            VariableId::position(ta, frame),
                            VariableId::position(tb, frame),
                        ],
                    });
                }
            }
        }
        let count = factors.len();
        if count == 0 {
            self.repelling.remove(&frame);
        } else {
            self.repelling.insert(frame, factors);
        }
        count
    }

    /// Recomputes repelling pairs for every frame in the graph.
    pub fn refresh_repelling(&mut self, d_min: T) {
        for frame in self.frames() {
            self.add_repelling_pairs(frame, d_min);
        }
    }

    /// Euler-propagates the track state at `from_frame` by one step:
    /// `(pos + vel * dt, vel)`, the initialization for `from_frame + 1`.
    pub fn propagate(&self, track_id: u64, from_frame: usize) -> Result<(Vector3<T>, Vector3<T>)> {
        let pos = self
            .value(&VariableId::position(track_id, from_frame))
            .ok_or_else(|| {
                Error::Structure(format!(
                    "track {track_id} has no position at frame {from_frame}"
                ))
            })?;
        let vel = self
            .value(&VariableId::velocity(track_id, from_frame))
            .ok_or_else(|| {
                Error::Structure(format!(
                    "track {track_id} has no velocity at frame {from_frame}"
                ))
            })?;
        Ok((pos + vel * self.dt, *vel))
    }

    /// Freezes every variable older than `last_frame - keep_last`; `None`
    /// leaves all variables free.
    pub fn set_window(&mut self, keep_last: Option<usize>) -> Result<()> {
        match keep_last {
            None => {
                self.frozen_below = None;
                Ok(())
            }
            Some(k) if k < 2 => Err(Error::Config("window must keep at least 2 frames".into())),
            Some(k) => {
                self.frozen_below = self
                    .last_frame()
                    .map(|last| (last + 1).saturating_sub(k));
                Ok(())
            }
        }
    }

    /// Copy of the graph with the marginalization window applied.
    pub fn marginal_window(&self, keep_last: Option<usize>) -> Result<Self> {
        let mut clone = self.clone();
        clone.set_window(keep_last)?;
        Ok(clone)
    }

    /// Removes a track and every factor that references it.
    pub fn remove_track(&mut self, track_id: u64) {
        self.values.retain(|id, _| id.track_id != track_id);
        self.detection.retain(|(t, _), _| *t != track_id);
        self.cv.retain(|(t, _), _| *t != track_id);
        for factors in self.repelling.values_mut() {
            factors.retain(|f| f.vars.iter().all(|v| v.track_id != track_id));
        }
        self.repelling.retain(|_, v| !v.is_empty());
    }

    /// Removes a track's variables and factors for frames after `keep_up_to`.
    pub fn truncate_track(&mut self, track_id: u64, keep_up_to: usize) {
        self.values
            .retain(|id, _| id.track_id != track_id || id.frame <= keep_up_to);
        self.detection
            .retain(|(t, f), _| *t != track_id || *f <= keep_up_to);
        // A cv factor keyed at `keep_up_to` links to the removed frame.
        self.cv
            .retain(|(t, f), _| *t != track_id || *f < keep_up_to);
        for factors in self.repelling.values_mut() {
            factors.retain(|f| {
                f.vars
                    .iter()
                    .all(|v| v.track_id != track_id || v.frame <= keep_up_to)
            });
        }
        self.repelling.retain(|_, v| !v.is_empty());
    }

    /// Text adjacency listing: one factor per line, sorted by frame, then
    /// kind, then connected variable ids. Stable for golden-file tests.
    pub fn dump(&self) -> String {
        let mut lines: Vec<(usize, u8, String)> = Vec::new();
        for f in self.detection.values() {
            lines.push((f.frame, 0, format!("det f={} [{}]", f.frame, f.var)));
        }
        for ((_, frame), f) in &self.cv {
            let vars = f
                .vars
                .iter()
                .map(|v| v.to_string())
                .collect::<Vec<_>>()
                .join(" ");
            lines.push((*frame, 1, format!("cv f={frame} [{vars}]")));
        }
        for (frame, factors) in &self.repelling {
            for f in factors {
                let vars = f
                    .vars
                    .iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join(" ");
                lines.push((*frame, 2, format!("rep f={frame} [{vars}]")));
            }
        }
        lines.sort();
        let mut out = String::new();
        for (_, _, line) in lines {
            let _ = writeln!(out, "{line}");
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{default_params, GaussianComponent};
    use approx::assert_relative_eq;

    fn single_mixture(mean: Vector3<f64>) -> GaussianMixture<f64> {
        let params = default_params::<f64>();
        GaussianMixture::new(vec![GaussianComponent::new(
            mean,
            params.det_sqrt_info(),
            1.0,
        )])
        .unwrap()
    }

    fn graph() -> FactorGraph<f64> {
        FactorGraph::new(&default_params())
    }

    #[test]
    fn new_track_initializes_variables() {
        let mut g = graph();
        let det = Vector3::new(1.0, 2.0, 0.5);
        let (p, v) = g
            .add_track_frame(7, 0, det, Vector3::zeros(), single_mixture(det))
            .unwrap();
        assert_eq!(g.value(&p), Some(&det));
        assert_eq!(g.value(&v), Some(&Vector3::zeros()));
    }

    #[test]
    fn chain_structure_counts() {
        let mut g = graph();
        let det = Vector3::zeros();
        g.add_track_frame(1, 0, det, Vector3::zeros(), single_mixture(det))
            .unwrap();
        assert_eq!(g.cv_factor_count(), 0);
        g.add_track_frame(1, 1, det, Vector3::zeros(), single_mixture(det))
            .unwrap();
        assert_eq!(g.variable_count(), 4);
        assert_eq!(g.factor_count(), 3);
        assert_eq!(g.detection_factor_count(), 2);
        assert_eq!(g.cv_factor_count(), 1);

        // A ten-frame track with no neighbors: T det, T-1 cv, 0 repelling.
        for f in 2..10 {
            g.add_track_frame(1, f, det, Vector3::zeros(), single_mixture(det))
                .unwrap();
        }
        assert_eq!(g.detection_factor_count(), 10);
        assert_eq!(g.cv_factor_count(), 9);
        assert_eq!(g.repelling_factor_count(), 0);
    }

    #[test]
    fn duplicate_track_frame_is_an_error() {
        let mut g = graph();
        let det = Vector3::zeros();
        g.add_track_frame(1, 0, det, Vector3::zeros(), single_mixture(det))
            .unwrap();
        assert!(g
            .add_track_frame(1, 0, det, Vector3::zeros(), single_mixture(det))
            .is_err());
    }

    #[test]
    fn repelling_pairs_by_distance() {
        let mut g = graph();
        let mut add = |track: u64, pos: Vector3<f64>| {
            g.add_track_frame(track, 0, pos, Vector3::zeros(), single_mixture(pos))
                .unwrap();
        };
        add(1, Vector3::new(0.0, 0.0, 0.0));
        add(2, Vector3::new(2.0, 0.0, 0.0));
        assert_eq!(g.add_repelling_pairs(0, 4.0), 1);

        // Re-invocation replaces the set rather than duplicating it.
        assert_eq!(g.add_repelling_pairs(0, 4.0), 1);
        assert_eq!(g.repelling_factor_count(), 1);
    }

    #[test]
    fn repelling_above_threshold_empty() {
        let mut g = graph();
        for (track, x) in [(1u64, 0.0), (2, 10.0)] {
            let p = Vector3::new(x, 0.0, 0.0);
            g.add_track_frame(track, 0, p, Vector3::zeros(), single_mixture(p))
                .unwrap();
        }
        assert_eq!(g.add_repelling_pairs(0, 4.0), 0);
    }

    #[test]
    fn three_close_tracks_give_three_pairs() {
        let mut g = graph();
        for (track, x) in [(1u64, 0.0), (2, 1.0), (3, 2.0)] {
            let p = Vector3::new(x, 0.0, 0.0);
            g.add_track_frame(track, 0, p, Vector3::zeros(), single_mixture(p))
                .unwrap();
        }
        assert_eq!(g.add_repelling_pairs(0, 4.0), 3);
    }

    #[test]
    fn propagate_euler_step() {
        let mut g = graph();
        let p0 = Vector3::zeros();
        g.add_track_frame(1, 0, p0, Vector3::new(10.0, 0.0, 0.0), single_mixture(p0))
            .unwrap();
        let (p, v) = g.propagate(1, 0).unwrap();
        assert_relative_eq!(p, Vector3::new(1.0, 0.0, 0.0));
        assert_eq!(v, Vector3::new(10.0, 0.0, 0.0));

        // Stationary object stays put.
        let mut g2 = graph();
        g2.add_track_frame(2, 0, p0, Vector3::zeros(), single_mixture(p0))
            .unwrap();
        let (p, _) = g2.propagate(2, 0).unwrap();
        assert_eq!(p, p0);

        assert!(g.propagate(1, 5).is_err());
    }

    #[test]
    fn propagate_chained_twice() {
        let mut g = graph();
        let vel = Vector3::new(1.0, 1.0, 0.0);
        let p0 = Vector3::zeros();
        g.add_track_frame(1, 0, p0, vel, single_mixture(p0)).unwrap();
        let (p1, v1) = g.propagate(1, 0).unwrap();
        g.add_track_frame(1, 1, p1, v1, single_mixture(p1)).unwrap();
        let (p2, v2) = g.propagate(1, 1).unwrap();
        assert_relative_eq!(p2, Vector3::new(0.2, 0.2, 0.0), epsilon = 1e-15);
        assert_eq!(v2, vel);
    }

    #[test]
    fn propagate_then_add_keeps_cv_residual_zero() {
        use crate::factors::eval_cv;
        let mut g = graph();
        let p0 = Vector3::new(2.0, -1.0, 0.3);
        let vel = Vector3::new(6.0, -2.0, 0.0);
        g.add_track_frame(1, 0, p0, vel, single_mixture(p0)).unwrap();
        let (p1, v1) = g.propagate(1, 0).unwrap();
        // Detection coincides with the propagated position.
        g.add_track_frame(1, 1, p1, v1, single_mixture(p1)).unwrap();
        let factor = g.cv.get(&(1, 0)).unwrap();
        let res = eval_cv(factor, &p0, &vel, &p1, &v1);
        assert!(res.squared_norm() < 1e-28);
    }

    #[test]
    fn window_freezes_old_frames() {
        let mut g = graph();
        let det = Vector3::zeros();
        for f in 0..10 {
            g.add_track_frame(1, f, det, Vector3::zeros(), single_mixture(det))
                .unwrap();
        }
        let w = g.marginal_window(Some(2)).unwrap();
        let free: Vec<_> = w
            .values_map()
            .keys()
            .filter(|id| !w.is_frozen(id))
            .collect();
        assert_eq!(free.len(), 4);
        assert!(free.iter().all(|id| id.frame >= 8));

        let unlimited = g.marginal_window(None).unwrap();
        assert!(unlimited
            .values_map()
            .keys()
            .all(|id| !unlimited.is_frozen(id)));

        assert!(g.marginal_window(Some(1)).is_err());
    }

    #[test]
    fn remove_and_truncate_track() {
        let mut g = graph();
        let det = Vector3::zeros();
        for f in 0..5 {
            g.add_track_frame(1, f, det, Vector3::zeros(), single_mixture(det))
                .unwrap();
            g.add_track_frame(2, f, det, Vector3::zeros(), single_mixture(det))
                .unwrap();
            g.add_repelling_pairs(f, 4.0);
        }
        g.truncate_track(1, 2);
        assert_eq!(g.detection.keys().filter(|(t, _)| *t == 1).count(), 3);
        assert_eq!(g.cv.keys().filter(|(t, _)| *t == 1).count(), 2);
        assert!(g.value(&VariableId::position(1, 3)).is_none());
        assert!(g.value(&VariableId::position(1, 2)).is_some());

        g.remove_track(2);
        assert_eq!(g.repelling_factor_count(), 0);
        assert!(g.values_map().keys().all(|id| id.track_id == 1));
    }

    #[test]
    fn dump_golden() {
        let mut g = graph();
        for (track, x) in [(1u64, 0.0), (2, 1.0)] {
            for f in 0..2 {
                let p = Vector3::new(x, 0.0, 0.0);
                g.add_track_frame(track, f, p, Vector3::zeros(), single_mixture(p))
                    .unwrap();
            }
        }
        g.add_repelling_pairs(0, 4.0);
        g.add_repelling_pairs(1, 4.0);
        let expected = "\
det f=0 [p(1,0)]
det f=0 [p(2,0)]
cv f=0 [p(1,0) v(1,0) p(1,1) v(1,1)]
cv f=0 [p(2,0) v(2,0) p(2,1) v(2,1)]
rep f=0 [p(1,0) p(2,0)]
det f=1 [p(1,1)]
det f=1 [p(2,1)]
rep f=1 [p(1,1) p(2,1)]
";
        assert_eq!(g.dump(), expected);
    }

    #[test]
    fn repelling_set_is_pair_symmetric() {
        // The factor set does not depend on track insertion order.
        let build = |order: &[(u64, f64)]| {
            let mut g = graph();
            for (track, x) in order {
                let p = Vector3::new(*x, 0.0, 0.0);
                g.add_track_frame(*track, 0, p, Vector3::zeros(), single_mixture(p))
                    .unwrap();
            }
            g.add_repelling_pairs(0, 4.0);
            g.dump()
        };
        let a = build(&[(1, 0.0), (2, 2.0), (3, 3.0)]);
        let b = build(&[(3, 3.0), (1, 0.0), (2, 2.0)]);
        assert_eq!(a, b);
    }
}
