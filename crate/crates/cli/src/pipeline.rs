//! Sequence pipeline wiring: ingestion, tracking, output conversion, and
//! manifest fan-out.

use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use fg3dmot::error::{Error, Result};
use fg3dmot::kitti::{
    apply_ego_motion, normalize_detections, parse_calib, parse_detections, parse_poses,
    to_camera_frame, write_labels, EgoPose, SequenceBundle,
};
use fg3dmot::postprocess::apply_projection;
use fg3dmot::solver::SolverOptions;
use fg3dmot::tracker::Tracker;
use fg3dmot::types::{Mode, TrackerParams};

#[derive(Debug, Clone)]
pub struct TrackOptions {
    pub class_filter: Option<i32>,
    pub window: Option<usize>,
    pub dump_traj: Option<PathBuf>,
    pub dump_config: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct SequenceJob {
    pub detections: PathBuf,
    pub poses: Option<PathBuf>,
    pub calib: Option<PathBuf>,
    pub out: PathBuf,
}

/// Run summary printed to stderr.
pub struct Summary {
    pub sequence: String,
    pub frames: usize,
    pub tracks_created: usize,
    pub candidates_deleted: usize,
    pub tracks_terminated: usize,
    pub tracks_filtered: usize,
    pub output_tracks: usize,
    pub output_boxes: usize,
    pub solver_iterations: usize,
    pub component_switches: usize,
    pub confidence_offset: f64,
}

impl fmt::Display for Summary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: frames {} | tracks created {} / candidates deleted {} / terminated {} / filtered {} | output {} tracks, {} boxes | solver iterations {} (component switches {}) | confidence offset {}",
            self.sequence,
            self.frames,
            self.tracks_created,
            self.candidates_deleted,
            self.tracks_terminated,
            self.tracks_filtered,
            self.output_tracks,
            self.output_boxes,
            self.solver_iterations,
            self.component_switches,
            self.confidence_offset,
        )
    }
}

/// Runs the full pipeline for one sequence and writes its label file.
pub fn run_sequence(
    job: &SequenceJob,
    params: &TrackerParams<f64>,
    opts: &TrackOptions,
) -> Result<Summary> {
    let mut detections = parse_detections::<f64>(&job.detections)?;
    if let Some(class) = opts.class_filter {
        for dets in detections.values_mut() {
            dets.retain(|d| d.class_id == class);
        }
        detections.retain(|_, dets| !dets.is_empty());
    }
    let poses: Vec<EgoPose<f64>> = match &job.poses {
        Some(path) => parse_poses(path)?,
        None => Vec::new(),
    };
    let calib = job.calib.as_ref().map(|p| parse_calib::<f64>(p)).transpose()?;

    let mut detections = if poses.is_empty() {
        detections
    } else {
        apply_ego_motion(detections, &poses)?
    };
    let offset = normalize_detections(&mut detections, params.confidence_offset)?;
    let mut effective = params.clone();
    effective.confidence_offset = Some(offset);
    if let Some(path) = &opts.dump_config {
        effective.write_config(path)?;
    }

    let bundle = SequenceBundle::new(detections, poses.clone(), calib.clone())?;
    let frames = bundle.dense_frames();

    let mut tracker = Tracker::new(effective.clone(), SolverOptions::default())?;
    tracker.set_window(opts.window)?;
    let mut emitted = Vec::new();
    for (frame, dets) in frames.iter().enumerate() {
        let out = tracker.step(frame, dets.clone())?;
        emitted.extend(out.boxes);
    }
    if let Some(path) = &opts.dump_traj {
        dump_trajectories(&tracker, path)?;
    }
    let (set, stats) = match effective.mode {
        Mode::Offline => tracker.finish_offline()?,
        Mode::Online => tracker.finish_online(emitted),
    };

    let set = to_camera_frame(set, &poses)?;
    let set = match &calib {
        Some(calib) => apply_projection(set, calib),
        None => set,
    };
    write_labels(&set, &job.out)?;

    Ok(Summary {
        sequence: job.detections.display().to_string(),
        frames: stats.frames_processed,
        tracks_created: stats.tracks_created,
        candidates_deleted: stats.candidates_deleted,
        tracks_terminated: stats.tracks_terminated,
        tracks_filtered: stats.tracks_filtered,
        output_tracks: set.tracks.len(),
        output_boxes: set.box_count(),
        solver_iterations: stats.solver_iterations,
        component_switches: stats.component_switches,
        confidence_offset: offset,
    })
}

/// Per-frame optimized states as CSV for external plotting.
fn dump_trajectories(tracker: &Tracker<f64>, path: &Path) -> Result<()> {
    let mut out = String::from("frame,track_id,px,py,pz,vx,vy,vz\n");
    for track in tracker.tracks() {
        for i in 0..track.len() {
            let frame = track.frame_at(i);
            let s = &track.states[i];
            let _ = writeln!(
                out,
                "{frame},{},{},{},{},{},{},{}",
                track.id,
                s.position.x,
                s.position.y,
                s.position.z,
                s.velocity.x,
                s.velocity.y,
                s.velocity.z
            );
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

fn parse_manifest(path: &Path) -> Result<Vec<SequenceJob>> {
    let text = std::fs::read_to_string(path)?;
    let mut jobs = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 2 {
            return Err(Error::Parse {
                line: lineno + 1,
                message: "manifest lines need `detections out [poses [calib]]`".into(),
            });
        }
        let opt = |s: &str| (s != "-").then(|| PathBuf::from(s));
        jobs.push(SequenceJob {
            detections: PathBuf::from(fields[0]),
            out: PathBuf::from(fields[1]),
            poses: fields.get(2).and_then(|s| opt(s)),
            calib: fields.get(3).and_then(|s| opt(s)),
        });
    }
    Ok(jobs)
}

/// Processes every sequence in the manifest with `jobs` worker slots.
/// Per-sequence outputs are independent files; summaries go to stderr.
pub fn run_manifest(
    manifest: &Path,
    params: &TrackerParams<f64>,
    opts: &TrackOptions,
    jobs: usize,
) -> Result<()> {
    let sequences = parse_manifest(manifest)?;
    if sequences.is_empty() {
        return Err(Error::Input("manifest lists no sequences".into()));
    }
    // Per-sequence dump paths would clobber one another.
    let opts = TrackOptions {
        dump_traj: None,
        dump_config: None,
        ..opts.clone()
    };
    let workers = jobs.max(1).min(sequences.len());
    let next = AtomicUsize::new(0);
    let failures: Mutex<Vec<Error>> = Mutex::new(Vec::new());

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let index = next.fetch_add(1, Ordering::SeqCst);
                let Some(job) = sequences.get(index) else {
                    break;
                };
                match run_sequence(job, params, &opts) {
                    Ok(summary) => eprintln!("{summary}"),
                    Err(e) => {
                        eprintln!("error in {}: {e}", job.detections.display());
                        failures.lock().expect("worker panic").push(e);
                    }
                }
            });
        }
    });

    match failures.into_inner().expect("worker panic").into_iter().next() {
        Some(e) => Err(e),
        None => Ok(()),
    }
}
