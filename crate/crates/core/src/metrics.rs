//! CLEAR-MOT evaluation: MOTA, MOTP, mostly tracked/lost, id switches, and
//! fragmentations over ground-truth and hypothesis track sets, with 3D center
//! distance or 2D bbox IoU matching.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::postprocess::{OutputBox, TrackSet};
use crate::scalar::Real;

/// Matching rule for per-frame correspondence.
#[derive(Debug, Clone, Copy)]
pub enum MatchMode<T: Real> {
    /// Euclidean center distance, matched below the threshold (meters).
    Center3D(T),
    /// 2D bbox intersection-over-union, matched at or above the threshold.
    Iou2D(T),
}

/// CLEAR-MOT summary.
#[derive(Debug, Clone)]
pub struct MotReport<T: Real> {
    pub mota: T,
    /// Mean match distance (Center3D) or mean match IoU (Iou2D).
    pub motp: T,
    /// Fraction of GT tracks covered on at least 80% of their frames.
    pub mostly_tracked: T,
    /// Fraction of GT tracks covered on at most 20% of their frames.
    pub mostly_lost: T,
    pub id_switches: usize,
    pub fragmentations: usize,
    pub false_positives: usize,
    pub misses: usize,
    pub matches: usize,
    pub gt_boxes: usize,
}

impl<T: Real> MotReport<T> {
    /// Human-readable summary table.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "metric            value");
        let _ = writeln!(out, "-----------------------");
        let _ = writeln!(out, "MOTA          {:>9.4}", self.mota.to_f64_lossy());
        let _ = writeln!(out, "MOTP          {:>9.4}", self.motp.to_f64_lossy());
        let _ = writeln!(out, "MT            {:>9.4}", self.mostly_tracked.to_f64_lossy());
        let _ = writeln!(out, "ML            {:>9.4}", self.mostly_lost.to_f64_lossy());
        let _ = writeln!(out, "IDS           {:>9}", self.id_switches);
        let _ = writeln!(out, "FRAG          {:>9}", self.fragmentations);
        let _ = writeln!(out, "FP            {:>9}", self.false_positives);
        let _ = writeln!(out, "misses        {:>9}", self.misses);
        let _ = writeln!(out, "matches       {:>9}", self.matches);
        let _ = writeln!(out, "gt_boxes      {:>9}", self.gt_boxes);
        out
    }

    /// Machine-readable `key = value` lines.
    pub fn to_kv(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "mota = {}", self.mota);
        let _ = writeln!(out, "motp = {}", self.motp);
        let _ = writeln!(out, "mostly_tracked = {}", self.mostly_tracked);
        let _ = writeln!(out, "mostly_lost = {}", self.mostly_lost);
        let _ = writeln!(out, "id_switches = {}", self.id_switches);
        let _ = writeln!(out, "fragmentations = {}", self.fragmentations);
        let _ = writeln!(out, "false_positives = {}", self.false_positives);
        let _ = writeln!(out, "misses = {}", self.misses);
        let _ = writeln!(out, "matches = {}", self.matches);
        let _ = writeln!(out, "gt_boxes = {}", self.gt_boxes);
        out
    }
}

fn iou2d<T: Real>(a: &[T; 4], b: &[T; 4]) -> T {
    let ix = a[2].min(b[2]) - a[0].max(b[0]);
    let iy = a[3].min(b[3]) - a[1].max(b[1]);
    if ix <= T::zero() || iy <= T::zero() {
        return T::zero();
    }
    let inter = ix * iy;
    let area_a = (a[2] - a[0]) * (a[3] - a[1]);
    let area_b = (b[2] - b[0]) * (b[3] - b[1]);
    inter / (area_a + area_b - inter)
}

/// Similarity between two boxes under the mode: `Some(score)` when they are
/// allowed to match; lower is better.
fn match_cost<T: Real>(mode: &MatchMode<T>, gt: &OutputBox<T>, hyp: &OutputBox<T>) -> Option<T> {
    match mode {
        MatchMode::Center3D(threshold) => {
            let d = (gt.position - hyp.position).norm();
            (d < *threshold).then_some(d)
        }
        MatchMode::Iou2D(threshold) => {
            let (a, b) = (gt.bbox2d?, hyp.bbox2d?);
            let iou = iou2d(&a, &b);
            (iou >= *threshold).then_some(T::one() - iou)
        }
    }
}

/// MOTP contribution of one match: distance (Center3D) or IoU (Iou2D).
fn match_quality<T: Real>(mode: &MatchMode<T>, cost: T) -> T {
    match mode {
        MatchMode::Center3D(_) => cost,
        MatchMode::Iou2D(_) => T::one() - cost,
    }
}

struct GtState {
    last_hyp: Option<u64>,
    covered: usize,
    appearances: usize,
    ever_matched: bool,
    prev_appearance_matched: bool,
}

/// Runs the CLEAR protocol: per-frame correspondence by greedy matching with
/// persistence of the previous frame's pairing, then the standard counts.
pub fn evaluate<T: Real>(
    gt: &TrackSet<T>,
    hyp: &TrackSet<T>,
    mode: MatchMode<T>,
) -> Result<MotReport<T>> {
    let gt_frames = gt.by_frame();
    let hyp_frames = hyp.by_frame();

    for (frame, boxes) in &gt_frames {
        let mut ids: Vec<u64> = boxes.iter().map(|b| b.track_id).collect();
        ids.sort_unstable();
        if ids.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::Input(format!(
                "duplicate ground-truth track id at frame {frame}"
            )));
        }
    }
    let total_gt: usize = gt_frames.values().map(Vec::len).sum();
    if total_gt == 0 {
        return Err(Error::Input("empty ground truth".into()));
    }

    let mut frames: Vec<usize> = gt_frames.keys().chain(hyp_frames.keys()).copied().collect();
    frames.sort_unstable();
    frames.dedup();

    let mut states: BTreeMap<u64, GtState> = BTreeMap::new();
    let mut misses = 0usize;
    let mut false_positives = 0usize;
    let mut matches = 0usize;
    let mut id_switches = 0usize;
    let mut fragmentations = 0usize;
    let mut quality_sum = T::zero();

    let empty: Vec<&OutputBox<T>> = Vec::new();
    for frame in frames {
        let gts = gt_frames.get(&frame).unwrap_or(&empty);
        let hyps = hyp_frames.get(&frame).unwrap_or(&empty);

        let mut gt_matched: BTreeMap<u64, u64> = BTreeMap::new();
        let mut hyp_used: Vec<u64> = Vec::new();

        // Persist last frame's pairing when still valid.
        for g in gts {
            if let Some(state) = states.get(&g.track_id) {
                if let Some(h_id) = state.last_hyp {
                    if let Some(h) = hyps.iter().find(|h| h.track_id == h_id) {
                        if let Some(cost) = match_cost(&mode, g, h) {
                            gt_matched.insert(g.track_id, h_id);
                            hyp_used.push(h_id);
                            quality_sum += match_quality(&mode, cost);
                        }
                    }
                }
            }
        }

        // Greedy matching over the remaining pairs, deterministic tie order.
        let mut candidates: Vec<(T, u64, u64)> = Vec::new();
        for g in gts {
            if gt_matched.contains_key(&g.track_id) {
                continue;
            }
            for h in hyps {
                if hyp_used.contains(&h.track_id) {
                    continue;
                }
                if let Some(cost) = match_cost(&mode, g, h) {
                    candidates.push((cost, g.track_id, h.track_id));
                }
            }
        }
        candidates.sort_by(|a, b| {
            a.0.partial_cmp(&b.0)
                .expect("finite costs")
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });
        for (cost, g_id, h_id) in candidates {
            if gt_matched.contains_key(&g_id) || hyp_used.contains(&h_id) {
                continue;
            }
            gt_matched.insert(g_id, h_id);
            hyp_used.push(h_id);
            quality_sum += match_quality(&mode, cost);
        }

        matches += gt_matched.len();
        misses += gts.len() - gt_matched.len();
        false_positives += hyps.len() - hyp_used.len();

        // Per-GT bookkeeping: switches, fragmentations, coverage.
        for g in gts {
            let state = states.entry(g.track_id).or_insert(GtState {
                last_hyp: None,
                covered: 0,
                appearances: 0,
                ever_matched: false,
                prev_appearance_matched: false,
            });
            state.appearances += 1;
            match gt_matched.get(&g.track_id) {
                Some(&h_id) => {
                    if let Some(prev) = state.last_hyp {
                        if prev != h_id {
                            id_switches += 1;
                        }
                    }
                    if state.ever_matched && !state.prev_appearance_matched {
                        fragmentations += 1;
                    }
                    state.last_hyp = Some(h_id);
                    state.ever_matched = true;
                    state.covered += 1;
                    state.prev_appearance_matched = true;
                }
                None => {
                    state.prev_appearance_matched = false;
                }
            }
        }
    }

    let gt_tracks = states.len();
    let mut mostly_tracked = 0usize;
    let mut mostly_lost = 0usize;
    for state in states.values() {
        let ratio = state.covered as f64 / state.appearances as f64;
        if ratio >= 0.8 {
            mostly_tracked += 1;
        } else if ratio <= 0.2 {
            mostly_lost += 1;
        }
    }

    let total = T::from_count(total_gt);
    let mota = T::one() - T::from_count(misses + false_positives + id_switches) / total;
    let motp = if matches > 0 {
        quality_sum / T::from_count(matches)
    } else {
        T::zero()
    };

    Ok(MotReport {
        mota,
        motp,
        mostly_tracked: T::from_count(mostly_tracked) / T::from_count(gt_tracks),
        mostly_lost: T::from_count(mostly_lost) / T::from_count(gt_tracks),
        id_switches,
        fragmentations,
        false_positives,
        misses,
        matches,
        gt_boxes: total_gt,
    })
}
