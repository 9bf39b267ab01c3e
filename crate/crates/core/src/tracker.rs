//! Track management around the factor graph: per-frame mixture construction,
//! greedy correspondence for lifecycle decisions, track creation, loss and
//! termination, graph growth, and solver invocation. Output associations come
//! from the optimized graph's component selection.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, Vector3};

use crate::error::{Error, Result};
use crate::graph::{FactorGraph, VariableId};
use crate::postprocess::{attach_boxes, mean_confidence_filter, OutputBox, TrackSet};
use crate::scalar::Real;
use crate::solver::{optimize, SolveReport, SolverOptions};
use crate::types::{
    Association, Detection, GaussianComponent, GaussianMixture, Mode, ObjectState, Track,
    TrackStatus, TrackerParams,
};

/// Negative log-likelihood entries between mixture components (rows; row 0 is
/// the null hypothesis) and predicted track positions (columns).
#[derive(Debug, Clone)]
pub struct SimilarityMatrix<T: Real> {
    pub entries: DMatrix<T>,
    pub track_ids: Vec<u64>,
}

/// Outcome of the greedy correspondence pass.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct AssignmentResult {
    /// `(track_id, detection_index)` pairs.
    pub matched: Vec<(u64, usize)>,
    /// Tracks whose best surviving entry was the null hypothesis.
    pub lost_tracks: Vec<u64>,
    /// Detections left without a track.
    pub unmatched_detections: Vec<usize>,
}

impl AssignmentResult {
    fn all_unmatched(n_detections: usize) -> Self {
        Self {
            unmatched_detections: (0..n_detections).collect(),
            ..Self::default()
        }
    }
}

/// Builds the frame's detection mixture: one component per detection with the
/// detection covariance, plus the broad null hypothesis at index 0 whose mean
/// is the arithmetic mean of the frame's detection positions (or, on an empty
/// frame, the carried mean of the previous frame).
pub fn build_mixture<T: Real>(
    detections: &[Detection<T>],
    params: &TrackerParams<T>,
    carry_mean: Option<Vector3<T>>,
) -> GaussianMixture<T> {
    let n = detections.len();
    let weight = T::one() / T::from_count(n + 1);
    let null_mean = if n > 0 {
        detections
            .iter()
            .fold(Vector3::zeros(), |acc, d| acc + d.position)
            / T::from_count(n)
    } else {
        carry_mean.unwrap_or_else(Vector3::zeros)
    };

    let mut components = Vec::with_capacity(n + 1);
    components.push(GaussianComponent::new(
        null_mean,
        params.null_sqrt_info(),
        weight,
    ));
    let det_info = params.det_sqrt_info();
    for d in detections {
        components.push(GaussianComponent::new(d.position, det_info, weight));
    }
    GaussianMixture::new(components).expect("frame mixture is well formed")
}

/// Fills the similarity matrix from the frame mixture and the predicted
/// track positions: entry `(j, i) = 0.5 * |S_j (x_i - mu_j)|^2 - ln c_j`.
pub fn build_similarity<T: Real>(
    mixture: &GaussianMixture<T>,
    predicted: &[(u64, Vector3<T>)],
) -> SimilarityMatrix<T> {
    let half = T::of(0.5);
    let rows = mixture.len();
    let cols = predicted.len();
    let mut entries = DMatrix::zeros(rows, cols);
    for (col, (_, pos)) in predicted.iter().enumerate() {
        for (row, comp) in mixture.components().iter().enumerate() {
            let maha = (comp.sqrt_info * (pos - comp.mean)).norm_squared();
            entries[(row, col)] = half * maha - comp.scaled_weight.ln();
        }
    }
    SimilarityMatrix {
        entries,
        track_ids: predicted.iter().map(|(id, _)| *id).collect(),
    }
}

/// Greedy correspondence: repeatedly take the globally best surviving entry
/// and delete its track column; a null-hypothesis hit marks the track lost
/// (the null row itself is never deleted), otherwise the detection row is
/// consumed too. Detections never taken end up unmatched.
pub fn greedy_assign<T: Real>(matrix: &SimilarityMatrix<T>) -> AssignmentResult {
    greedy_assign_sticky(matrix, &[])
}

/// The greedy rule with a persistence pre-pass: incumbent columns (tracks
/// that held a real detection on the previous frame) claim their best
/// detection first, in column order, when it beats their null entry. The
/// remaining rows and columns go through the plain greedy loop. Persistence
/// keeps duplicate hypotheses of one object from trading its detection back
/// and forth, so the loser starves and terminates.
pub(crate) fn greedy_assign_sticky<T: Real>(
    matrix: &SimilarityMatrix<T>,
    incumbents: &[usize],
) -> AssignmentResult {
    let rows = matrix.entries.nrows();
    let cols = matrix.entries.ncols();
    let mut row_alive = vec![true; rows];
    let mut col_alive = vec![true; cols];
    let mut result = AssignmentResult::default();

    for &c in incumbents {
        let mut best: Option<(usize, T)> = None;
        for r in 1..rows {
            if !row_alive[r] {
                continue;
            }
            let v = matrix.entries[(r, c)];
            if v < matrix.entries[(0, c)] && best.map_or(true, |(_, bv)| v < bv) {
                best = Some((r, v));
            }
        }
        if let Some((r, _)) = best {
            row_alive[r] = false;
            col_alive[c] = false;
            result.matched.push((matrix.track_ids[c], r - 1));
        }
    }

    let remaining = col_alive.iter().filter(|a| **a).count();
    for _ in 0..remaining {
        let mut best: Option<(usize, usize, T)> = None;
        for r in 0..rows {
            if !row_alive[r] {
                continue;
            }
            for c in 0..cols {
                if !col_alive[c] {
                    continue;
                }
                let v = matrix.entries[(r, c)];
                if best.map_or(true, |(_, _, bv)| v < bv) {
                    best = Some((r, c, v));
                }
            }
        }
        let (r, c, _) = best.expect("one live column per iteration");
        col_alive[c] = false;
        if r == 0 {
            result.lost_tracks.push(matrix.track_ids[c]);
        } else {
            row_alive[r] = false;
            result.matched.push((matrix.track_ids[c], r - 1));
        }
    }
    result.unmatched_detections = (1..rows).filter(|r| row_alive[*r]).map(|r| r - 1).collect();
    result
}

/// Aggregate counters for one tracking run.
#[derive(Debug, Clone, Copy, Default)]
pub struct RunStats {
    pub frames_processed: usize,
    pub tracks_created: usize,
    pub candidates_deleted: usize,
    pub tracks_terminated: usize,
    pub tracks_filtered: usize,
    pub boxes_emitted: usize,
    pub solver_iterations: usize,
    pub component_switches: usize,
    pub repelling_clamps: usize,
}

/// Boxes emitted for one processed frame (online mode may backfill frames
/// that were buffered before track confirmation).
#[derive(Debug, Clone)]
pub struct FrameOutput<T: Real> {
    pub frame: usize,
    pub boxes: Vec<OutputBox<T>>,
    pub solve: Option<SolveReport<T>>,
}

/// The tracker state machine over one sequence.
pub struct Tracker<T: Real> {
    params: TrackerParams<T>,
    solver: SolverOptions<T>,
    graph: FactorGraph<T>,
    tracks: Vec<Track<T>>,
    detections: BTreeMap<usize, Vec<Detection<T>>>,
    /// History indices not yet emitted, per live track (online mode).
    pending_emit: BTreeMap<u64, Vec<usize>>,
    next_id: u64,
    last_frame: Option<usize>,
    last_null_mean: Option<Vector3<T>>,
    window: Option<usize>,
    stats: RunStats,
}

impl<T: Real> Tracker<T> {
    pub fn new(params: TrackerParams<T>, solver: SolverOptions<T>) -> Result<Self> {
        params.validate()?;
        Ok(Self {
            graph: FactorGraph::new(&params),
            params,
            solver,
            tracks: Vec::new(),
            detections: BTreeMap::new(),
            pending_emit: BTreeMap::new(),
            next_id: 1,
            last_frame: None,
            last_null_mean: None,
            window: None,
            stats: RunStats::default(),
        })
    }

    /// Limits optimization to the trailing `keep_last` frames (online cost
    /// bound); default is the full history.
    pub fn set_window(&mut self, keep_last: Option<usize>) -> Result<()> {
        if let Some(k) = keep_last {
            if k < 2 {
                return Err(Error::Config("window must keep at least 2 frames".into()));
            }
        }
        self.window = keep_last;
        Ok(())
    }

    pub fn params(&self) -> &TrackerParams<T> {
        &self.params
    }

    pub fn tracks(&self) -> &[Track<T>] {
        &self.tracks
    }

    pub fn graph(&self) -> &FactorGraph<T> {
        &self.graph
    }

    pub fn stats(&self) -> RunStats {
        self.stats
    }

    fn live_indices(&self) -> Vec<usize> {
        self.tracks
            .iter()
            .enumerate()
            .filter(|(_, t)| {
                matches!(
                    t.status,
                    TrackStatus::Candidate | TrackStatus::Active | TrackStatus::Lost(_)
                )
            })
            .map(|(i, _)| i)
            .collect()
    }

    /// Copies optimized variable values back into the track state histories.
    fn sync_states(&mut self) {
        for track in &mut self.tracks {
            for i in 0..track.len() {
                let frame = track.frame_at(i);
                if let (Some(p), Some(v)) = (
                    self.graph.value(&VariableId::position(track.id, frame)),
                    self.graph.value(&VariableId::velocity(track.id, frame)),
                ) {
                    track.states[i] = ObjectState::new(*p, *v);
                }
            }
        }
    }

    /// Applies a finalized association to the track's stored histories
    /// (dims/confidence resolution per the attachment rule). Counters are
    /// refreshed separately, since terminated tracks keep their status.
    fn apply_association(
        track: &mut Track<T>,
        detections: &BTreeMap<usize, Vec<Detection<T>>>,
        index: usize,
        assoc: Association,
    ) -> Result<()> {
        let frame = track.frame_at(index);
        match assoc {
            Association::Detection(j) => {
                let det = detections
                    .get(&frame)
                    .and_then(|v| v.get(j))
                    .ok_or_else(|| {
                        Error::Structure(format!("no detection {j} at frame {frame}"))
                    })?;
                track.associations[index] = assoc;
                track.dims_history[index] = det.dims_yaw();
                track.confidence_history[index] = det.confidence;
            }
            Association::Null => {
                if index == 0 {
                    // Tracks spawn at detections; keep the spawning record.
                    return Ok(());
                }
                track.associations[index] = assoc;
                track.dims_history[index] = track.dims_history[index - 1];
                track.confidence_history[index] = T::zero();
            }
        }
        Ok(())
    }

    /// Post-solve association of `frame`: one exclusive pass of the greedy
    /// rule over the optimized state positions. This is the association the
    /// output carries, and it decides candidate survival: an unconfirmed
    /// track whose optimized state wins no detection is deleted from the
    /// factor graph.
    fn finalize_frame(&mut self, frame: usize, mixture: &GaussianMixture<T>) -> Result<()> {
        let present: Vec<usize> = self
            .live_indices()
            .into_iter()
            .filter(|&i| self.tracks[i].index_of(frame).is_some())
            .collect();
        if present.is_empty() {
            return Ok(());
        }
        let positions: Vec<(u64, Vector3<T>)> = present
            .iter()
            .map(|&i| {
                let id = self.tracks[i].id;
                let pos = self
                    .graph
                    .value(&VariableId::position(id, frame))
                    .copied()
                    .ok_or_else(|| {
                        Error::Structure(format!("track {id} missing position at {frame}"))
                    })?;
                Ok((id, pos))
            })
            .collect::<Result<_>>()?;
        let incumbents: Vec<usize> = present
            .iter()
            .enumerate()
            .filter(|(_, &i)| {
                let t = &self.tracks[i];
                t.index_of(frame)
                    .and_then(|idx| idx.checked_sub(1))
                    .map(|prev| !t.associations[prev].is_null())
                    .unwrap_or(false)
            })
            .map(|(col, _)| col)
            .collect();
        let assignment =
            greedy_assign_sticky(&build_similarity(mixture, &positions), &incumbents);
        let matched: BTreeMap<u64, usize> = assignment.matched.iter().copied().collect();

        let mut removed: Vec<u64> = Vec::new();
        for &i in &present {
            let id = self.tracks[i].id;
            let index = self.tracks[i].index_of(frame).expect("present at frame");
            match matched.get(&id) {
                Some(&j) => {
                    Self::apply_association(
                        &mut self.tracks[i],
                        &self.detections,
                        index,
                        Association::Detection(j),
                    )?;
                    self.tracks[i].refresh_counters(self.params.n_det);
                }
                None if self.tracks[i].confirmed => {
                    Self::apply_association(
                        &mut self.tracks[i],
                        &self.detections,
                        index,
                        Association::Null,
                    )?;
                    self.tracks[i].refresh_counters(self.params.n_det);
                }
                None => {
                    // Unconfirmed track without detection support.
                    self.graph.remove_track(id);
                    removed.push(id);
                    self.stats.candidates_deleted += 1;
                }
            }
        }
        self.tracks.retain(|t| !removed.contains(&t.id));
        for id in &removed {
            self.pending_emit.remove(id);
        }
        Ok(())
    }

    /// Runs one time step: mixture construction, propagation, greedy
    /// correspondence, lifecycle updates, graph growth, optimization, and
    /// (online) per-frame postprocessing and emission.
    pub fn step(&mut self, frame: usize, detections: Vec<Detection<T>>) -> Result<FrameOutput<T>> {
        if let Some(last) = self.last_frame {
            if frame <= last {
                return Err(Error::Sequencing(format!(
                    "frame {frame} after frame {last}: frames must strictly increase"
                )));
            }
        }
        for d in &detections {
            d.validate()?;
        }

        let live = self.live_indices();
        if detections.is_empty() && live.is_empty() && self.graph.is_empty() {
            self.last_frame = Some(frame);
            self.stats.frames_processed += 1;
            return Ok(FrameOutput {
                frame,
                boxes: Vec::new(),
                solve: None,
            });
        }

        let mixture = build_mixture(&detections, &self.params, self.last_null_mean);
        if !detections.is_empty() {
            self.last_null_mean = Some(mixture.components()[0].mean);
        }

        // Greedy correspondence on the propagated states.
        let assignment = if live.is_empty() {
            AssignmentResult::all_unmatched(detections.len())
        } else {
            let mut predicted = Vec::with_capacity(live.len());
            for &i in &live {
                let track = &self.tracks[i];
                let from = track.last_frame().expect("live track has states");
                let (pos, _) = self.graph.propagate(track.id, from)?;
                predicted.push((track.id, pos));
            }
            greedy_assign(&build_similarity(&mixture, &predicted))
        };
        let matched: BTreeMap<u64, usize> = assignment.matched.iter().copied().collect();

        // Provisional lifecycle updates and graph growth for surviving
        // tracks; the post-solve association pass may revise the new frame.
        let mut grew = false;
        for &i in &live {
            let track_id = self.tracks[i].id;
            let from = self.tracks[i].last_frame().expect("live track has states");
            if let Some(&j) = matched.get(&track_id) {
                let (pos, vel) = self.graph.propagate(track_id, from)?;
                let det = &detections[j];
                let track = &mut self.tracks[i];
                track.states.push(ObjectState::new(pos, vel));
                track.associations.push(Association::Detection(j));
                track.dims_history.push(det.dims_yaw());
                track.confidence_history.push(det.confidence);
                track.refresh_counters(self.params.n_det);
                self.graph
                    .add_track_frame(track_id, frame, pos, vel, mixture.clone())?;
                grew = true;
            } else if self.tracks[i].confirmed
                && self.tracks[i].trailing_nulls() >= self.params.n_lost
            {
                // Lost beyond n_lost: terminate and truncate the trailing
                // null states, which correspond to no real measurement.
                let nulls = self.tracks[i].trailing_nulls();
                let track = &mut self.tracks[i];
                track.truncate_tail(nulls);
                track.status = TrackStatus::Terminated;
                let keep = track.last_frame().expect("detection frames remain");
                self.graph.truncate_track(track_id, keep);
                self.pending_emit.remove(&track_id);
                self.stats.tracks_terminated += 1;
            } else {
                let (pos, vel) = self.graph.propagate(track_id, from)?;
                let prev_dims = *self.tracks[i]
                    .dims_history
                    .last()
                    .expect("live track has history");
                let track = &mut self.tracks[i];
                track.states.push(ObjectState::new(pos, vel));
                track.associations.push(Association::Null);
                track.dims_history.push(prev_dims);
                track.confidence_history.push(T::zero());
                track.refresh_counters(self.params.n_det);
                self.graph
                    .add_track_frame(track_id, frame, pos, vel, mixture.clone())?;
                grew = true;
            }
        }

        // Spawn a track per unmatched detection, zero initial velocity.
        for &j in &assignment.unmatched_detections {
            let det = &detections[j];
            let id = self.next_id;
            self.next_id += 1;
            let mut track = Track {
                id,
                birth_frame: frame,
                states: vec![ObjectState::new(det.position, Vector3::zeros())],
                associations: vec![Association::Detection(j)],
                dims_history: vec![det.dims_yaw()],
                confidence_history: vec![det.confidence],
                status: TrackStatus::Candidate,
                class_id: det.class_id,
                confirmed: false,
                consecutive_detections: 1,
            };
            track.refresh_counters(self.params.n_det);
            self.graph
                .add_track_frame(id, frame, det.position, Vector3::zeros(), mixture.clone())?;
            grew = true;
            self.tracks.push(track);
            self.pending_emit.insert(id, Vec::new());
            self.stats.tracks_created += 1;
        }

        self.detections.insert(frame, detections);

        // Repelling pairs are recomputed from the current estimates before
        // every solve.
        self.graph.refresh_repelling(self.params.d_min);
        self.graph.set_window(self.window)?;

        let solve = if grew && self.graph.has_free_variables() {
            let report = optimize(&mut self.graph, &self.solver)?;
            self.stats.solver_iterations += report.iterations;
            self.stats.component_switches += report.component_switches;
            self.stats.repelling_clamps += report.repelling_clamps;
            Some(report)
        } else {
            None
        };
        self.sync_states();
        self.finalize_frame(frame, &mixture)?;

        let boxes = if self.params.mode == Mode::Online {
            self.emit_online(frame)?
        } else {
            Vec::new()
        };
        self.stats.boxes_emitted += boxes.len();
        self.stats.frames_processed += 1;
        self.last_frame = Some(frame);
        Ok(FrameOutput {
            frame,
            boxes,
            solve,
        })
    }

    /// Online per-frame emission, after the frame's association has been
    /// finalized. Frames buffered before confirmation are emitted together
    /// once the track confirms; frames withheld by the permanence or
    /// confidence gates are dropped for good.
    fn emit_online(&mut self, frame: usize) -> Result<Vec<OutputBox<T>>> {
        let mut boxes = Vec::new();
        let live = self.live_indices();
        for &ti in &live {
            let track_id = self.tracks[ti].id;
            let Some(index) = self.tracks[ti].index_of(frame) else {
                continue;
            };
            let pending = self.pending_emit.entry(track_id).or_default();
            pending.push(index);
            let track = &self.tracks[ti];
            if !track.confirmed {
                continue;
            }
            let eligible = track.trailing_nulls() <= self.params.n_perm
                && track.mean_confidence() >= self.params.c_min_online;
            let pending = std::mem::take(self.pending_emit.entry(track_id).or_default());
            if !eligible {
                continue;
            }
            for i in pending {
                boxes.push(OutputBox {
                    frame: track.frame_at(i),
                    track_id,
                    class_id: track.class_id,
                    position: track.states[i].position,
                    dims: track.dims_history[i].dims,
                    yaw: track.dims_history[i].yaw,
                    confidence: track.confidence_history[i],
                    bbox2d: None,
                });
            }
        }
        boxes.sort_by_key(|b| (b.frame, b.track_id));
        Ok(boxes)
    }

    /// Offline finalization: delete never-confirmed tracks, re-extract the
    /// final per-frame associations from the fully optimized graph (one
    /// exclusive greedy pass per frame over all remaining tracks), attach
    /// boxes, and apply the mean-confidence filter.
    pub fn finish_offline(mut self) -> Result<(TrackSet<T>, RunStats)> {
        let mut survivors: Vec<Track<T>> = Vec::new();
        let tracks = std::mem::take(&mut self.tracks);
        for track in tracks {
            if !track.confirmed {
                self.graph.remove_track(track.id);
                self.stats.candidates_deleted += 1;
                continue;
            }
            survivors.push(track);
        }

        let frames: Vec<usize> = self.detections.keys().copied().collect();
        for frame in frames {
            let present: Vec<usize> = survivors
                .iter()
                .enumerate()
                .filter(|(_, t)| t.index_of(frame).is_some())
                .map(|(i, _)| i)
                .collect();
            if present.is_empty() {
                continue;
            }
            let mixture = self
                .graph
                .detection_factor(survivors[present[0]].id, frame)
                .map(|f| f.mixture.clone())
                .ok_or_else(|| {
                    Error::Structure(format!("missing detection factor at frame {frame}"))
                })?;
            let positions: Vec<(u64, Vector3<T>)> = present
                .iter()
                .map(|&i| {
                    let t = &survivors[i];
                    let idx = t.index_of(frame).expect("present at frame");
                    (t.id, t.states[idx].position)
                })
                .collect();
            let incumbents: Vec<usize> = present
                .iter()
                .enumerate()
                .filter(|(_, &i)| {
                    let t = &survivors[i];
                    t.index_of(frame)
                        .and_then(|idx| idx.checked_sub(1))
                        .map(|prev| !t.associations[prev].is_null())
                        .unwrap_or(false)
                })
                .map(|(col, _)| col)
                .collect();
            let assignment =
                greedy_assign_sticky(&build_similarity(&mixture, &positions), &incumbents);
            let matched: BTreeMap<u64, usize> = assignment.matched.iter().copied().collect();
            for &i in &present {
                let track = &mut survivors[i];
                let index = track.index_of(frame).expect("present at frame");
                let assoc = match matched.get(&track.id) {
                    Some(&j) => Association::Detection(j),
                    None => Association::Null,
                };
                Self::apply_association(track, &self.detections, index, assoc)?;
            }
        }

        for track in &mut survivors {
            if track.status == TrackStatus::Terminated {
                // Terminated tracks never end in null states.
                let nulls = track.trailing_nulls();
                track.truncate_tail(nulls);
            }
        }

        let mut out = Vec::new();
        for track in &survivors {
            let boxes = attach_boxes(track, &self.detections)?;
            out.extend(boxes);
        }
        let set = TrackSet::from_boxes(out);
        let before = set.tracks.len();
        let set = mean_confidence_filter(set, self.params.c_min_offline);
        self.stats.tracks_filtered += before - set.tracks.len();
        self.stats.boxes_emitted += set.box_count();
        Ok((set, self.stats))
    }

    /// Online finalization: the emitted boxes are already the output.
    pub fn finish_online(self, emitted: Vec<OutputBox<T>>) -> (TrackSet<T>, RunStats) {
        (TrackSet::from_boxes(emitted), self.stats)
    }
}

/// Runs the offline algorithm over a dense per-frame detection sequence.
pub fn run_offline<T: Real>(
    frames: &[Vec<Detection<T>>],
    params: &TrackerParams<T>,
    solver: &SolverOptions<T>,
) -> Result<(TrackSet<T>, RunStats)> {
    let mut params = params.clone();
    params.mode = Mode::Offline;
    let mut tracker = Tracker::new(params, solver.clone())?;
    for (frame, dets) in frames.iter().enumerate() {
        tracker.step(frame, dets.clone())?;
    }
    tracker.finish_offline()
}

/// Runs the online algorithm over a dense per-frame detection sequence,
/// collecting the per-frame emissions.
pub fn run_online<T: Real>(
    frames: &[Vec<Detection<T>>],
    params: &TrackerParams<T>,
    solver: &SolverOptions<T>,
) -> Result<(TrackSet<T>, RunStats)> {
    let mut params = params.clone();
    params.mode = Mode::Online;
    let mut tracker = Tracker::new(params, solver.clone())?;
    let mut emitted = Vec::new();
    for (frame, dets) in frames.iter().enumerate() {
        let out = tracker.step(frame, dets.clone())?;
        emitted.extend(out.boxes);
    }
    Ok(tracker.finish_online(emitted))
}
