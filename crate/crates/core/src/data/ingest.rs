//! Trajectory tables: `scene_id,vehicle_id,frame,x,y,vx,vy,is_target`.
//!
//! Each scene's target track is cut into windows of `t_p + t_f` consecutive
//! frames, starting every `stride_frames` frames. Velocity cells may be
//! empty; they are then filled from central differences of positions.

use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;

use super::{DataError, HorizonSpec, Scene, Track};
use crate::dynamics::{KinematicState, VehicleAttributes};

pub const COLUMNS: [&str; 8] = [
    "scene_id",
    "vehicle_id",
    "frame",
    "x",
    "y",
    "vx",
    "vy",
    "is_target",
];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IngestOptions {
    pub horizon: HorizonSpec,
    pub n_max: usize,
    pub stride_frames: usize,
    pub attrs: VehicleAttributes,
}

impl IngestOptions {
    pub fn new(horizon: HorizonSpec) -> Self {
        Self {
            horizon,
            n_max: 8,
            stride_frames: 5,
            attrs: VehicleAttributes::default(),
        }
    }
}

#[derive(Clone, Debug)]
struct Sample {
    frame: i64,
    x: f64,
    y: f64,
    v: Option<(f64, f64)>,
}

#[derive(Debug, Default)]
struct Vehicle {
    is_target: Option<bool>,
    samples: Vec<Sample>,
}

fn malformed(line: usize, msg: impl Into<String>) -> DataError {
    DataError::MalformedRow {
        line,
        msg: msg.into(),
    }
}

fn parse_bool(s: &str) -> Option<bool> {
    match s {
        "1" | "true" | "True" | "TRUE" => Some(true),
        "0" | "false" | "False" | "FALSE" => Some(false),
        _ => None,
    }
}

pub fn load_trajectory_csv(path: &Path, opts: &IngestOptions) -> Result<Vec<Scene>, DataError> {
    read_trajectory_csv(std::fs::File::open(path)?, opts)
}

pub fn read_trajectory_csv(input: impl Read, opts: &IngestOptions) -> Result<Vec<Scene>, DataError> {
    opts.horizon.validate()?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let headers = rdr.headers()?.clone();
    if headers.is_empty() {
        return Ok(Vec::new());
    }
    let mut col = [0usize; 8];
    for (slot, name) in col.iter_mut().zip(COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or_else(|| malformed(1, format!("missing column `{name}`")))?;
    }

    let mut scenes: IndexMap<String, IndexMap<String, Vehicle>> = IndexMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let field = |i: usize| rec.get(col[i]).map(str::trim).unwrap_or("");
        let num = |i: usize| -> Result<f64, DataError> {
            field(i)
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| malformed(line, format!("bad {} `{}`", COLUMNS[i], field(i))))
        };
        let frame: i64 = field(2)
            .parse()
            .map_err(|_| malformed(line, format!("bad frame `{}`", field(2))))?;
        let v = match (field(5), field(6)) {
            ("", "") => None,
            _ => Some((num(5)?, num(6)?)),
        };
        let is_target = parse_bool(field(7))
            .ok_or_else(|| malformed(line, format!("bad is_target `{}`", field(7))))?;
        let scene_id = field(0);
        if scene_id.is_empty() || field(1).is_empty() {
            return Err(malformed(line, "empty id"));
        }
        let veh = scenes
            .entry(scene_id.to_string())
            .or_default()
            .entry(field(1).to_string())
            .or_default();
        match veh.is_target {
            Some(t) if t != is_target => {
                return Err(malformed(line, "is_target changes within a vehicle"))
            }
            _ => veh.is_target = Some(is_target),
        }
        veh.samples.push(Sample {
            frame,
            x: num(3)?,
            y: num(4)?,
            v,
        });
    }

    let mut out = Vec::new();
    for (scene_id, vehicles) in scenes {
        out.extend(window_scene(&scene_id, vehicles, opts)?);
    }
    Ok(out)
}

/// Sorted, consecutive states per vehicle with velocities filled in.
fn to_states(scene: &str, id: &str, mut samples: Vec<Sample>, dt: f64) -> Result<(i64, Vec<KinematicState>), DataError> {
    samples.sort_by_key(|s| s.frame);
    if samples.windows(2).any(|w| w[1].frame != w[0].frame + 1) {
        return Err(DataError::IrregularTimestep {
            scene: scene.to_string(),
            vehicle: id.to_string(),
        });
    }
    let n = samples.len();
    let states = (0..n)
        .map(|i| {
            let s = &samples[i];
            let (vx, vy) = s.v.unwrap_or_else(|| {
                if n < 2 {
                    return (0.0, 0.0);
                }
                let (a, b) = (i.saturating_sub(1), (i + 1).min(n - 1));
                let span = (b - a) as f64 * dt;
                let wx = (samples[b].x - samples[a].x) / span;
                let wy = (samples[b].y - samples[a].y) / span;
                (wx.hypot(wy), 0.0)
            });
            KinematicState::new(s.x, s.y, vx, vy)
        })
        .collect();
    Ok((samples[0].frame, states))
}

fn window_scene(
    scene_id: &str,
    vehicles: IndexMap<String, Vehicle>,
    opts: &IngestOptions,
) -> Result<Vec<Scene>, DataError> {
    let h = &opts.horizon;
    let (t_p, t_f) = (h.t_p_steps(), h.t_f_steps());
    let targets: Vec<&String> = vehicles
        .iter()
        .filter(|(_, v)| v.is_target == Some(true))
        .map(|(k, _)| k)
        .collect();
    let target_id = match targets.as_slice() {
        [] => return Err(DataError::MissingTarget(scene_id.to_string())),
        [one] => (*one).clone(),
        _ => return Err(DataError::MultipleTargets(scene_id.to_string())),
    };

    let mut tracks: IndexMap<String, (i64, Vec<KinematicState>)> = IndexMap::new();
    for (id, v) in vehicles {
        let t = to_states(scene_id, &id, v.samples, h.dt_s)?;
        tracks.insert(id, t);
    }
    let (t0, target) = tracks.shift_remove(&target_id).expect("target present");
    let at = |start: i64, states: &[KinematicState], frame: i64| -> Option<KinematicState> {
        usize::try_from(frame - start)
            .ok()
            .and_then(|i| states.get(i).copied())
    };

    let mut scenes = Vec::new();
    let mut offset = 0usize;
    while offset + t_p + t_f <= target.len() {
        let first = t0 + offset as i64;
        let last_hist = first + t_p as i64 - 1;
        let history = target[offset..offset + t_p].to_vec();
        let future = target[offset + t_p..offset + t_p + t_f].to_vec();
        let anchor = history[t_p - 1];

        let mut near: Vec<(f64, Track)> = Vec::new();
        for (id, (s0, states)) in &tracks {
            let hist: Option<Vec<_>> = (first..=last_hist).map(|f| at(*s0, states, f)).collect();
            let Some(hist) = hist else { continue };
            let end = hist[t_p - 1];
            let dist = (end.x_m - anchor.x_m).hypot(end.y_m - anchor.y_m);
            let mut fut = Vec::with_capacity(t_f);
            let mut mask = Vec::with_capacity(t_f);
            let mut prev = end;
            for k in 1..=t_f as i64 {
                match at(*s0, states, last_hist + k) {
                    Some(s) => {
                        fut.push(s);
                        mask.push(true);
                        prev = s;
                    }
                    None => {
                        fut.push(prev);
                        mask.push(false);
                    }
                }
            }
            near.push((
                dist,
                Track {
                    vehicle_id: id.clone(),
                    history: hist,
                    future: fut,
                    future_mask: mask,
                },
            ));
        }
        // stable sort keeps file order among equal distances
        near.sort_by(|a, b| a.0.total_cmp(&b.0));
        near.truncate(opts.n_max);

        scenes.push(Scene {
            scene_id: format!("{scene_id}/{first}"),
            dt_s: h.dt_s,
            target: Track::new(target_id.clone(), history, future),
            surroundings: near.into_iter().map(|(_, t)| t).collect(),
            map_polylines: None,
            attrs: opts.attrs,
        });
        offset += opts.stride_frames;
    }
    Ok(scenes)
}

/// Writes every observed sample of each scene, frames numbered from 0 at
/// the first history step.
pub fn write_trajectory_csv(scenes: &[Scene], out: impl Write) -> Result<(), DataError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(COLUMNS)?;
    for scene in scenes {
        for (i, track) in scene.tracks().enumerate() {
            let observed = track
                .history
                .iter()
                .map(|s| (s, true))
                .chain(track.future.iter().zip(track.future_mask.iter().copied()));
            for (frame, (s, present)) in observed.enumerate() {
                if !present {
                    continue;
                }
                w.write_record([
                    scene.scene_id.clone(),
                    track.vehicle_id.clone(),
                    frame.to_string(),
                    s.x_m.to_string(),
                    s.y_m.to_string(),
                    s.vx_mps.to_string(),
                    s.vy_mps.to_string(),
                    u8::from(i == 0).to_string(),
                ])?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_horizon() -> HorizonSpec {
        HorizonSpec {
            t_p_s: 0.4,
            t_f_s: 0.6,
            t_s_s: 0.2,
            dt_s: 0.2,
        }
    }

    fn opts(stride: usize) -> IngestOptions {
        IngestOptions {
            stride_frames: stride,
            ..IngestOptions::new(small_horizon())
        }
    }

    #[test]
    fn empty_input_gives_no_scenes() {
        assert!(read_trajectory_csv("".as_bytes(), &opts(1)).unwrap().is_empty());
        let header = "scene_id,vehicle_id,frame,x,y,vx,vy,is_target\n";
        assert!(read_trajectory_csv(header.as_bytes(), &opts(1)).unwrap().is_empty());
    }

    #[test]
    fn single_vehicle_has_no_surroundings() {
        let mut s = String::from("scene_id,vehicle_id,frame,x,y,vx,vy,is_target\n");
        for f in 0..5 {
            s += &format!("a,1,{f},{},0,10,0,1\n", 2 * f);
        }
        let scenes = read_trajectory_csv(s.as_bytes(), &opts(1)).unwrap();
        assert_eq!(scenes.len(), 1);
        assert!(scenes[0].surroundings.is_empty());
        assert_eq!(scenes[0].target.history.len(), 2);
        assert_eq!(scenes[0].target.future.len(), 3);
    }

    #[test]
    fn two_vehicle_fixture_hand_walk() {
        // target frames 10..=16 (7 frames), window = 2 + 3 = 5, stride 2:
        // windows start at 10 and 12 (14 would need frame 18).
        // Vehicle 2 exists at frames 11..=14: history of window 10 needs
        // frames 10,11 -> absent; window 12 history 12,13 -> present,
        // future 14 present, 15 and 16 absent.
        let mut s = String::from("scene_id,vehicle_id,frame,x,y,vx,vy,is_target\n");
        for f in 10..=16 {
            s += &format!("s,1,{f},{},0,5,0,1\n", f as f64);
        }
        for f in 11..=14 {
            s += &format!("s,2,{f},{},3.5,6,0,0\n", f as f64 + 4.0);
        }
        let scenes = read_trajectory_csv(s.as_bytes(), &opts(2)).unwrap();
        assert_eq!(scenes.len(), 2);
        assert_eq!(scenes[0].scene_id, "s/10");
        assert!(scenes[0].surroundings.is_empty());
        assert_eq!(scenes[1].scene_id, "s/12");
        assert_eq!(scenes[1].target.history[0].x_m, 12.0);
        assert_eq!(scenes[1].target.future[2].x_m, 16.0);
        let sur = &scenes[1].surroundings[0];
        assert_eq!(sur.vehicle_id, "2");
        assert_eq!(sur.history[1].x_m, 17.0);
        assert_eq!(sur.future_mask, vec![true, false, false]);
        assert_eq!(sur.future[2].x_m, 18.0);
    }

    #[test]
    fn nearest_vehicles_kept() {
        let mut s = String::from("scene_id,vehicle_id,frame,x,y,vx,vy,is_target\n");
        for f in 0..5 {
            s += &format!("s,t,{f},0,0,5,0,1\n");
            for (id, d) in [("far", 40.0), ("near", 5.0), ("mid", 20.0)] {
                s += &format!("s,{id},{f},{d},0,5,0,0\n");
            }
        }
        let o = IngestOptions {
            n_max: 2,
            ..opts(1)
        };
        let scenes = read_trajectory_csv(s.as_bytes(), &o).unwrap();
        let ids: Vec<_> = scenes[0]
            .surroundings
            .iter()
            .map(|t| t.vehicle_id.as_str())
            .collect();
        assert_eq!(ids, ["near", "mid"]);
    }

    #[test]
    fn missing_velocity_from_central_differences() {
        let mut s = String::from("scene_id,vehicle_id,frame,x,y,vx,vy,is_target\n");
        for f in 0..5 {
            s += &format!("s,t,{f},{},0,,,1\n", f as f64 * 2.0 + (f * f) as f64 * 0.1);
        }
        let scenes = read_trajectory_csv(s.as_bytes(), &opts(1)).unwrap();
        // frame 1: (x2 - x0) / 0.4 = (4.4 - 0) / 0.4 = 11
        assert!((scenes[0].target.history[1].vx_mps - 11.0).abs() < 1e-12);
        // frame 0: forward difference (2.1 - 0) / 0.2
        assert!((scenes[0].target.history[0].vx_mps - 10.5).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        let h = "scene_id,vehicle_id,frame,x,y,vx,vy,is_target\n";
        let bad = format!("{h}s,1,0,abc,0,1,0,1\n");
        assert!(matches!(
            read_trajectory_csv(bad.as_bytes(), &opts(1)),
            Err(DataError::MalformedRow { line: 2, .. })
        ));
        let no_target = format!("{h}s,1,0,0,0,1,0,0\n");
        assert!(matches!(
            read_trajectory_csv(no_target.as_bytes(), &opts(1)),
            Err(DataError::MissingTarget(_))
        ));
        let gap = format!("{h}s,1,0,0,0,1,0,1\ns,1,2,0,0,1,0,1\n");
        assert!(matches!(
            read_trajectory_csv(gap.as_bytes(), &opts(1)),
            Err(DataError::IrregularTimestep { .. })
        ));
        let missing_col = "scene_id,vehicle_id,frame,x,y\n";
        assert!(read_trajectory_csv(missing_col.as_bytes(), &opts(1)).is_err());
    }

    #[test]
    fn write_then_read_recovers_window() {
        let mut s = String::from("scene_id,vehicle_id,frame,x,y,vx,vy,is_target\n");
        for f in 0..5 {
            s += &format!("s,1,{f},{},0.25,10,0.5,1\n", f as f64 * 2.0);
            s += &format!("s,2,{f},{},3.5,9,0,0\n", f as f64 * 1.8 + 3.0);
        }
        let scenes = read_trajectory_csv(s.as_bytes(), &opts(1)).unwrap();
        let mut buf = Vec::new();
        write_trajectory_csv(&scenes, &mut buf).unwrap();
        let back = read_trajectory_csv(buf.as_slice(), &opts(1)).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].target, scenes[0].target);
        assert_eq!(back[0].surroundings, scenes[0].surroundings);
    }
}
