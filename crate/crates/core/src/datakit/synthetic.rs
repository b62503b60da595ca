//! Procedurally rendered vehicles for desk-scale experiments.
//!
//! Each identity is a frontal vehicle silhouette: a rounded body in an
//! identity colour, a windscreen split into panes, an optional accent
//! stripe, head lights, a grille and two wheels. A trajectory sweeps the box
//! size log-uniformly between `min_side` and `base_side` as the vehicle
//! approaches or recedes, and each frame gets its own nuisances: brightness
//! shift, directional motion blur, additive noise and occluding bars.
//!
//! Every random draw is keyed on `(seed, identity[, frame])`, so the output
//! does not depend on thread count or on how many identities are generated.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{write_manifest, BBox, TrackRecord, Trajectory};
use crate::error::{Error, Result};
use crate::pyramid::{write_ppm, Image};

const FRAME_WIDTH: u32 = 960;
const FRAME_HEIGHT: u32 = 540;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub n_ids: usize,
    pub frames_per_id: usize,
    /// Largest box side (box height) along a trajectory, in pixels.
    pub base_side: u32,
    /// Smallest box side along a trajectory, in pixels.
    pub min_side: u32,
    pub seed: u64,
    /// Identities are assigned to videos in blocks of this size.
    pub ids_per_video: usize,
    /// Extra identities whose trajectories are too short or whose boxes are
    /// too small to survive filtering.
    pub distractors: usize,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            n_ids: 50,
            frames_per_id: 40,
            base_side: 280,
            min_side: 32,
            seed: 2024,
            ids_per_video: 94,
            distractors: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_ids < 2 {
            return Err(Error::Config(format!("n_ids must be at least 2, got {}", self.n_ids)));
        }
        if self.frames_per_id == 0 {
            return Err(Error::Config("frames_per_id must be positive".into()));
        }
        if self.min_side < 8 || self.base_side < self.min_side {
            return Err(Error::Config(format!(
                "need 8 <= min_side <= base_side, got min_side {} and base_side {}",
                self.min_side, self.base_side
            )));
        }
        if self.base_side > FRAME_HEIGHT {
            return Err(Error::Config(format!("base_side must not exceed {FRAME_HEIGHT}")));
        }
        if self.ids_per_video == 0 {
            return Err(Error::Config("ids_per_video must be positive".into()));
        }
        Ok(())
    }
}

/// Appearance parameters of one synthetic vehicle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleIdentity {
    pub identity: u64,
    /// Hue, saturation and value of the body colour, each in [0, 1].
    pub hue: f64,
    pub saturation: f64,
    pub value: f64,
    /// Box width over box height, in [0.75, 1].
    pub aspect: f64,
    pub corner_radius: f64,
    /// Bottom edge of the windscreen as a fraction of body height.
    pub roof_line: f64,
    pub window_panes: u32,
    pub window_rows: u32,
    pub stripe: Option<Stripe>,
    pub light_rgb: [f32; 3],
    pub grille_width: f64,
    /// Horizontal centre of the left wheel as a fraction of body width; the
    /// right wheel mirrors it.
    pub wheel_inset: f64,
    pub wheel_width: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stripe {
    pub top: f64,
    pub height: f64,
    pub rgb: [f32; 3],
}

impl VehicleIdentity {
    pub fn sample(seed: u64, identity: u64) -> Self {
        let mut rng = keyed_rng(seed, identity, u64::MAX);
        let hue = rng.random::<f64>();
        let saturation = rng.random_range(0.45..0.95);
        let value = rng.random_range(0.45..0.95);
        let stripe = if rng.random_bool(0.5) {
            let (h, s, v) = (rng.random::<f64>(), rng.random_range(0.2..1.0), rng.random_range(0.2..1.0));
            Some(Stripe { top: rng.random_range(0.5..0.72), height: rng.random_range(0.04..0.1), rgb: hsv_to_rgb(h, s, v) })
        } else {
            None
        };
        let lights = [[1.0, 0.95, 0.7], [0.95, 0.95, 1.0], [1.0, 0.6, 0.15], [0.9, 0.1, 0.1]];
        VehicleIdentity {
            identity,
            hue,
            saturation,
            value,
            aspect: rng.random_range(0.75..=1.0),
            corner_radius: rng.random_range(0.04..0.2),
            roof_line: rng.random_range(0.3..0.5),
            window_panes: rng.random_range(1..=3),
            window_rows: rng.random_range(1..=2),
            stripe,
            light_rgb: lights[rng.random_range(0..lights.len())],
            grille_width: rng.random_range(0.15..0.5),
            wheel_inset: rng.random_range(0.12..0.28),
            wheel_width: rng.random_range(0.1..0.2),
        }
    }

    pub fn body_rgb(&self) -> [f32; 3] {
        hsv_to_rgb(self.hue, self.saturation, self.value)
    }
}

/// Generated manifest together with the appearance of every identity.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub config: SyntheticConfig,
    pub identities: Vec<VehicleIdentity>,
    pub trajectories: Vec<Trajectory>,
}

impl SyntheticDataset {
    pub fn records(&self) -> Vec<TrackRecord> {
        self.trajectories.iter().flat_map(|t| t.records.iter().cloned()).collect()
    }
}

/// Samples identities and trajectories without touching the file system.
///
/// Identities `0..n_ids` are regular; any distractors follow them.
pub fn generate_synthetic(config: &SyntheticConfig) -> Result<SyntheticDataset> {
    config.validate()?;
    let total = config.n_ids + config.distractors;
    let mut identities = Vec::with_capacity(total);
    let mut trajectories = Vec::with_capacity(total);
    for id in 0..total as u64 {
        let ident = VehicleIdentity::sample(config.seed, id);
        let mut rng = keyed_rng(config.seed, id, u64::MAX - 1);
        let (frames, lo, hi) = if (id as usize) < config.n_ids {
            (config.frames_per_id, config.min_side, config.base_side)
        } else if id % 2 == 0 {
            // too short
            (rng.random_range(1..20usize), config.min_side, config.base_side)
        } else {
            // boxes too small
            (config.frames_per_id.max(20), 10, 23)
        };
        let sides = stratified_log_uniform(&mut rng, frames, lo as f64, hi as f64);
        trajectories.push(trajectory(config, &ident, &sides, &mut rng));
        identities.push(ident);
    }
    Ok(SyntheticDataset { config: config.clone(), identities, trajectories })
}

fn stratified_log_uniform(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<u32> {
    let (a, b) = (lo.ln(), hi.ln());
    let mut sides: Vec<u32> = (0..n)
        .map(|i| {
            let u = (i as f64 + rng.random::<f64>()) / n as f64;
            ((a + u * (b - a)).exp().round() as u32).clamp(lo as u32, hi as u32)
        })
        .collect();
    if rng.random_bool(0.5) {
        sides.reverse(); // receding rather than approaching
    }
    sides
}

fn trajectory(config: &SyntheticConfig, ident: &VehicleIdentity, sides: &[u32], rng: &mut ChaCha8Rng) -> Trajectory {
    let id = ident.identity;
    let video_id = format!("vid{:04}", id as usize / config.ids_per_video);
    let start: u64 = rng.random_range(1..2000);
    let lane: f64 = rng.random_range(0.1..0.9);
    let records = sides
        .iter()
        .enumerate()
        .map(|(i, &h)| {
            let w = ((h as f64 * ident.aspect).round() as u32).max(1);
            // Larger (closer) vehicles sit lower in the frame.
            let y = ((FRAME_HEIGHT - h) as f64 * (h as f64 / config.base_side as f64).min(1.0)) as u32;
            let x = ((FRAME_WIDTH - w) as f64 * lane) as u32;
            let frame_index = start + i as u64;
            TrackRecord {
                video_id: video_id.clone(),
                track_id: id,
                frame_index,
                bbox: BBox { x, y, w, h },
                image_path: image_path(id, frame_index),
                identity: id,
            }
        })
        .collect();
    Trajectory { identity: id, video_id, records }
}

pub fn image_path(identity: u64, frame_index: u64) -> String {
    format!("images/{identity:05}/{frame_index:05}.ppm")
}

/// Renders one box crop of `identity` with the nuisances of its frame.
pub fn render_record(seed: u64, identity: &VehicleIdentity, record: &TrackRecord) -> Image {
    let mut rng = keyed_rng(seed, identity.identity, record.frame_index);
    let (w, h) = (record.bbox.w as usize, record.bbox.h as usize);
    let mut img = draw_vehicle(identity, w, h, &mut rng);
    if rng.random_bool(0.5) {
        let max_len = (w.min(h) / 16).max(1);
        let len = rng.random_range(1..=max_len);
        let dir = [(1i64, 0i64), (0, 1), (1, 1), (1, -1)][rng.random_range(0..4)];
        img = motion_blur(&img, w, h, len, dir);
    }
    let brightness: f32 = rng.random_range(0.7..1.25);
    let sigma: f64 = rng.random_range(0.0..0.05);
    let noise = Normal::new(0.0, sigma).expect("finite sigma");
    for p in img.iter_mut() {
        *p = *p * brightness + noise.sample(&mut rng) as f32;
    }
    if rng.random_bool(0.25) {
        occlude(&mut img, w, h, &mut rng);
    }
    Image::new(w, h, img).expect("rendered buffer matches its size")
}

fn draw_vehicle(v: &VehicleIdentity, w: usize, h: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let road = rng.random_range(0.3..0.5f32);
    let body = v.body_rgb();
    let glass = [0.08f32, 0.1, 0.14];
    let dark = [0.05f32, 0.05, 0.06];
    // Body placement inside the crop, with a little detector jitter.
    let jx: f64 = rng.random_range(-0.03..0.03);
    let jy: f64 = rng.random_range(-0.03..0.03);
    let (bx0, bx1) = (0.05 + jx, 0.95 + jx);
    let (by0, by1) = (0.04 + jy, 0.97 + jy);

    let mut out = vec![0f32; w * h * 3];
    for y in 0..h {
        for x in 0..w {
            let px = (x as f64 + 0.5) / w as f64;
            let py = (y as f64 + 0.5) / h as f64;
            let shade = road + 0.06 * py as f32;
            let mut c = [shade, shade, shade * 1.02];
            let u = (px - bx0) / (bx1 - bx0);
            let t = (py - by0) / (by1 - by0);
            if inside_rounded(u, t, v.corner_radius, v.aspect) && t < 0.88 {
                c = body;
                if (0.1..0.9).contains(&u) && (0.07..v.roof_line).contains(&t) {
                    c = glass;
                    let pane_u = (u - 0.1) / 0.8 * v.window_panes as f64;
                    let pane_t = (t - 0.07) / (v.roof_line - 0.07) * v.window_rows as f64;
                    if (pane_u.fract() < 0.05 && pane_u > 0.5) || (pane_t.fract() < 0.08 && pane_t > 0.5) {
                        c = body;
                    }
                }
                if let Some(s) = &v.stripe {
                    if t >= s.top && t < s.top + s.height {
                        c = s.rgb;
                    }
                }
                if (0.6..0.7).contains(&t) && ((0.06..0.22).contains(&u) || (0.78..0.94).contains(&u)) {
                    c = v.light_rgb;
                }
                let half = v.grille_width / 2.0;
                if (0.6..0.76).contains(&t) && (0.5 - half..0.5 + half).contains(&u) {
                    c = dark;
                }
            }
            // Wheels peek out below the body.
            let wheel = |cx: f64| {
                let du = (u - cx) / (v.wheel_width / 2.0);
                let dt = (t - 0.9) / 0.1;
                du * du + dt * dt <= 1.0
            };
            if (0.8..=1.0).contains(&t) && (wheel(v.wheel_inset) || wheel(1.0 - v.wheel_inset)) {
                c = dark;
            }
            out[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&c);
        }
    }
    out
}

/// Rounded rectangle on the unit square, with the corner radius measured
/// in units of the shorter side.
fn inside_rounded(u: f64, t: f64, radius: f64, aspect: f64) -> bool {
    if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&t) {
        return false;
    }
    let ru = radius / aspect.max(1e-6) * aspect.min(1.0);
    let rt = radius * aspect.min(1.0);
    let cu = u.clamp(ru, 1.0 - ru);
    let ct = t.clamp(rt, 1.0 - rt);
    let du = (u - cu) / ru.max(1e-9);
    let dt = (t - ct) / rt.max(1e-9);
    du * du + dt * dt <= 1.0
}

/// Averages `len` samples along `dir`, clamping at the border.
fn motion_blur(img: &[f32], w: usize, h: usize, len: usize, dir: (i64, i64)) -> Vec<f32> {
    if len <= 1 {
        return img.to_vec();
    }
    let mut out = vec![0f32; img.len()];
    let back = (len as i64 - 1) / 2;
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut acc = [0f32; 3];
            for s in 0..len as i64 {
                let k = s - back;
                let sx = (x + k * dir.0).clamp(0, w as i64 - 1) as usize;
                let sy = (y + k * dir.1).clamp(0, h as i64 - 1) as usize;
                let i = (sy * w + sx) * 3;
                for ch in 0..3 {
                    acc[ch] += img[i + ch];
                }
            }
            let o = (y as usize * w + x as usize) * 3;
            for ch in 0..3 {
                out[o + ch] = acc[ch] / len as f32;
            }
        }
    }
    out
}

fn occlude(img: &mut [f32], w: usize, h: usize, rng: &mut ChaCha8Rng) {
    let gray: f32 = rng.random_range(0.1..0.8);
    let frac: f64 = rng.random_range(0.1..0.25);
    if rng.random_bool(0.5) {
        let bw = ((w as f64 * frac).ceil() as usize).max(1);
        let x0 = rng.random_range(0..=w - bw.min(w));
        for y in 0..h {
            for x in x0..(x0 + bw).min(w) {
                img[(y * w + x) * 3..(y * w + x) * 3 + 3].fill(gray);
            }
        }
    } else {
        let bh = ((h as f64 * frac).ceil() as usize).max(1);
        let y0 = rng.random_range(0..=h - bh.min(h));
        for y in y0..(y0 + bh).min(h) {
            img[y * w * 3..(y + 1) * w * 3].fill(gray);
        }
    }
}

/// Writes every frame of `dataset` under `out_dir` plus `manifest.tsv`.
///
/// Identities are rendered on up to `available_parallelism` threads; the
/// files do not depend on the thread count.
pub fn render_dataset(dataset: &SyntheticDataset, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(dataset.trajectories.len().max(1));
    let jobs: Vec<(&VehicleIdentity, &Trajectory)> = dataset.identities.iter().zip(&dataset.trajectories).collect();
    let chunk = jobs.len().div_ceil(threads).max(1);
    let seed = dataset.config.seed;
    std::thread::scope(|scope| {
        let handles: Vec<_> = jobs
            .chunks(chunk)
            .map(|part| {
                scope.spawn(move || -> Result<()> {
                    for (ident, traj) in part {
                        for rec in &traj.records {
                            let path = out_dir.join(&rec.image_path);
                            if let Some(parent) = path.parent() {
                                fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                            }
                            write_ppm(&path, &render_record(seed, ident, rec))?;
                        }
                    }
                    Ok(())
                })
            })
            .collect();
        handles.into_iter().try_for_each(|h| h.join().expect("render thread panicked"))
    })?;
    write_manifest(&out_dir.join("manifest.tsv"), &dataset.records())
}

fn keyed_rng(seed: u64, identity: u64, frame: u64) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&identity.to_le_bytes());
    key[16..24].copy_from_slice(&frame.to_le_bytes());
    key[24..].copy_from_slice(b"vehicle\0");
    ChaCha8Rng::from_seed(key)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f32; 3] {
    let h6 = (h.rem_euclid(1.0)) * 6.0;
    let c = v * s;
    let x = c * (1.0 - ((h6 % 2.0) - 1.0).abs());
    let (r, g, b) = match h6 as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [(r + m) as f32, (g + m) as f32, (b + m) as f32]
}
