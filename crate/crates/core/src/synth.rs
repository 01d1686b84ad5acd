//! Deterministic synthetic worlds, ground views and trajectories.
//!
//! Ground views are cut from the polar transform of the local aerial tile, so
//! the pipeline's geometric model holds exactly and every heading is known.

use crate::angle::{rotate_bearing, wrap_degrees, wrapped_difference};
use crate::geometry::{fov_to_width, GeoPoint, GeoPose, GeoRaster, PolarConfig, ReferenceSource};
use crate::image::Image;
use crate::sequencer::FrameObservation;
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct WorldSpec {
    pub seed: u64,
    /// Side of the square world.
    pub extent_meters: f64,
    pub meters_per_pixel: f64,
    pub center: GeoPoint,
    /// Landmarks (buildings and trees) per hectare. Zero gives a uniform world.
    pub density: f64,
    /// Peak amplitude of the smooth background texture.
    pub texture_amplitude: f64,
    /// Lattice spacing of the background texture; larger is smoother.
    pub texture_scale_meters: f64,
    /// Adds a road through the centre and mirrors the world through its
    /// centre point, so views from the centre are ambiguous by 180 deg.
    pub symmetric: bool,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            extent_meters: 400.0,
            meters_per_pixel: 1.0,
            center: GeoPoint {
                latitude: 47.37,
                longitude: 8.54,
            },
            density: 4.0,
            texture_amplitude: 0.08,
            texture_scale_meters: 12.0,
            symmetric: false,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.extent_meters > 0.0 && self.meters_per_pixel > 0.0) {
            return Err(Error::InvalidConfig("world extent and resolution must be positive".into()));
        }
        if !(self.density >= 0.0 && self.texture_amplitude >= 0.0 && self.texture_scale_meters > 0.0) {
            return Err(Error::InvalidConfig("world density/texture out of range".into()));
        }
        GeoPoint::new(self.center.latitude, self.center.longitude)?;
        Ok(())
    }

    fn side_pixels(&self) -> usize {
        ((self.extent_meters / self.meters_per_pixel).round() as usize).max(2)
    }
}

/// Signed-distance shapes painted onto the world, in pixel units.
enum Shape {
    Rect { cx: f64, cy: f64, hw: f64, hh: f64, sin: f64, cos: f64 },
    Disc { cx: f64, cy: f64, r: f64 },
    Road { px: f64, py: f64, nx: f64, ny: f64, half_width: f64 },
}

impl Shape {
    fn distance(&self, x: f64, y: f64) -> f64 {
        match *self {
            Shape::Rect { cx, cy, hw, hh, sin, cos } => {
                let (dx, dy) = (x - cx, y - cy);
                let u = (dx * cos + dy * sin).abs() - hw;
                let v = (-dx * sin + dy * cos).abs() - hh;
                let outside = (u.max(0.0).powi(2) + v.max(0.0).powi(2)).sqrt();
                outside + u.max(v).min(0.0)
            }
            Shape::Disc { cx, cy, r } => ((x - cx).powi(2) + (y - cy).powi(2)).sqrt() - r,
            Shape::Road { px, py, nx, ny, half_width } => ((x - px) * nx + (y - py) * ny).abs() - half_width,
        }
    }

    /// Pixel-space bounding box, or `None` for unbounded shapes.
    fn bounds(&self) -> Option<(f64, f64, f64, f64)> {
        match *self {
            Shape::Rect { cx, cy, hw, hh, .. } => {
                let r = (hw * hw + hh * hh).sqrt() + 1.0;
                Some((cx - r, cy - r, cx + r, cy + r))
            }
            Shape::Disc { cx, cy, r } => Some((cx - r - 1.0, cy - r - 1.0, cx + r + 1.0, cy + r + 1.0)),
            Shape::Road { .. } => None,
        }
    }
}

fn paint(img: &mut Image, shape: &Shape, value: f32) {
    let (w, h) = (img.width(), img.height());
    let (x0, y0, x1, y1) = shape
        .bounds()
        .unwrap_or((0.0, 0.0, w as f64 - 1.0, h as f64 - 1.0));
    let xs = x0.floor().max(0.0) as usize..=(x1.ceil().min(w as f64 - 1.0).max(0.0) as usize);
    let ys = y0.floor().max(0.0) as usize..=(y1.ceil().min(h as f64 - 1.0).max(0.0) as usize);
    for y in ys {
        for x in xs.clone() {
            // one-pixel antialiased edge
            let cover = (0.5 - shape.distance(x as f64, y as f64)).clamp(0.0, 1.0) as f32;
            if cover > 0.0 {
                let old = img.get(x, y);
                img.set(x, y, old + (value - old) * cover);
            }
        }
    }
}

fn value_noise(w: usize, h: usize, spacing_px: f64, amplitude: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let gw = (w as f64 / spacing_px).ceil() as usize + 2;
    let gh = (h as f64 / spacing_px).ceil() as usize + 2;
    let lattice: Vec<f64> = (0..gw * gh)
        .map(|_| rng.random_range(-amplitude..=amplitude))
        .collect();
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        let fy = y as f64 / spacing_px;
        let (iy, ty) = (fy.floor() as usize, smooth(fy.fract()));
        for x in 0..w {
            let fx = x as f64 / spacing_px;
            let (ix, tx) = (fx.floor() as usize, smooth(fx.fract()));
            let at = |i: usize, j: usize| lattice[j * gw + i];
            let top = at(ix, iy) * (1.0 - tx) + at(ix + 1, iy) * tx;
            let bottom = at(ix, iy + 1) * (1.0 - tx) + at(ix + 1, iy + 1) * tx;
            out.push(top * (1.0 - ty) + bottom * ty);
        }
    }
    out
}

/// Renders the aerial world described by `spec`.
pub fn generate_world(spec: &WorldSpec) -> Result<GeoRaster> {
    spec.validate()?;
    let n = spec.side_pixels();
    let mpp = spec.meters_per_pixel;
    let mut img = Image::filled(n, n, 0.5);
    if spec.density > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let noise = value_noise(n, n, spec.texture_scale_meters / mpp, spec.texture_amplitude, &mut rng);
        for (p, v) in img.data_mut().iter_mut().zip(&noise) {
            *p = (0.5 + v) as f32;
        }
        let hectares = spec.extent_meters * spec.extent_meters / 10_000.0;
        let landmarks = (spec.density * hectares).round() as usize;
        let roads = (landmarks / 16).max(1);
        let side = n as f64;
        for _ in 0..roads {
            let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let shape = Shape::Road {
                px: rng.random_range(0.0..side),
                py: rng.random_range(0.0..side),
                nx: angle.cos(),
                ny: angle.sin(),
                half_width: rng.random_range(2.0..4.0) / mpp,
            };
            let value = if rng.random_bool(0.5) { 0.25 } else { 0.75 };
            paint(&mut img, &shape, value);
        }
        for _ in 0..landmarks {
            let (cx, cy) = (rng.random_range(0.0..side), rng.random_range(0.0..side));
            let shape = if rng.random_bool(0.6) {
                let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
                Shape::Rect {
                    cx,
                    cy,
                    hw: rng.random_range(3.0..12.0) / mpp,
                    hh: rng.random_range(3.0..12.0) / mpp,
                    sin: theta.sin(),
                    cos: theta.cos(),
                }
            } else {
                Shape::Disc {
                    cx,
                    cy,
                    r: rng.random_range(2.0..6.0) / mpp,
                }
            };
            let value = rng.random_range(0.05..0.95);
            paint(&mut img, &shape, value);
        }
        if spec.symmetric {
            let c = (side - 1.0) / 2.0;
            let shape = Shape::Road {
                px: c,
                py: c,
                nx: 1.0,
                ny: 0.0,
                half_width: 3.0 / mpp,
            };
            paint(&mut img, &shape, 0.2);
        }
        for p in img.data_mut() {
            *p = p.clamp(0.0, 1.0);
        }
    }
    if spec.symmetric {
        // point reflection through the centre: keep the first half, mirror it
        let data = img.data_mut();
        let len = data.len();
        for i in len / 2..len {
            data[i] = data[len - 1 - i];
        }
    }
    Ok(GeoRaster::new(img, spec.center, mpp))
}

/// The `fov`-wide window of the polar reference at `pose.position`, starting
/// at the column of `pose.heading_degrees`.
pub fn render_ground_view(world: &GeoRaster, pose: &GeoPose, fov_degrees: f64, polar: &PolarConfig) -> Result<Image> {
    let width = fov_to_width(fov_degrees, polar.width)?;
    let pano = ReferenceSource::new(world, *polar).polar_at(pose.position)?;
    let start = heading_column(pose.heading_degrees, polar.width);
    pano.pixels.column_window(start, width)
}

/// First column of a view whose left edge looks along `heading`.
pub fn heading_column(heading: f64, width: usize) -> usize {
    ((wrap_degrees(heading) * width as f64 / 360.0).round() as usize) % width
}

/// Adds independent Gaussian noise to every pixel, clamped to `[0, 1]`.
pub fn add_pixel_noise(img: &mut Image, sigma: f64, rng: &mut impl Rng) {
    if sigma <= 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    for p in img.data_mut() {
        *p = (*p as f64 + normal.sample(rng)).clamp(0.0, 1.0) as f32;
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Motion {
    /// Stand still and turn from `start_heading` through `sweep_degrees`.
    Sweep {
        start_heading: f64,
        sweep_degrees: f64,
        duration_seconds: f64,
    },
    /// Walk a polyline of `[east, north]` offsets (meters from the world
    /// centre) at constant speed, camera centred on the direction of travel.
    Waypoints { points: Vec<[f64; 2]>, speed_mps: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrajectorySpec {
    pub seed: u64,
    /// `[east, north]` meters from the world centre; ignored by waypoint motion.
    pub start: [f64; 2],
    pub motion: Motion,
    pub frame_rate: f64,
    /// Per-frame std of the odometry heading delta, degrees.
    pub heading_noise_deg: f64,
    /// Per-frame std of the odometry translation, meters.
    pub translation_noise_m: f64,
    /// Std of the global position estimate, meters.
    pub gps_noise_m: f64,
    pub camera_fov: f64,
    pub pixel_noise: f64,
    /// Whether to render images; otherwise frames carry an empty 1x1 image.
    pub render: bool,
    pub polar: PolarConfig,
}

impl Default for TrajectorySpec {
    fn default() -> Self {
        Self {
            seed: 0,
            start: [0.0, 0.0],
            motion: Motion::Sweep {
                start_heading: 0.0,
                sweep_degrees: 180.0,
                duration_seconds: 10.0,
            },
            frame_rate: 15.0,
            heading_noise_deg: 0.0,
            translation_noise_m: 0.0,
            gps_noise_m: 0.0,
            camera_fov: 69.0,
            pixel_noise: 0.0,
            render: true,
            polar: PolarConfig::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrajectoryFrame {
    pub observation: FrameObservation,
    pub truth: GeoPose,
}

/// Ground-truth `(east, north, heading)` samples of the motion.
fn truth_path(spec: &TrajectorySpec) -> Result<Vec<([f64; 2], f64)>> {
    let rate = spec.frame_rate;
    match &spec.motion {
        Motion::Sweep {
            start_heading,
            sweep_degrees,
            duration_seconds,
        } => {
            let n = (duration_seconds * rate).round() as usize;
            if n == 0 {
                return Err(Error::InvalidConfig("sweep shorter than one frame".into()));
            }
            Ok((0..n)
                .map(|i| {
                    let h = start_heading + sweep_degrees * i as f64 / n as f64;
                    (spec.start, wrap_degrees(h))
                })
                .collect())
        }
        Motion::Waypoints { points, speed_mps } => {
            if points.len() < 2 || !(*speed_mps > 0.0) {
                return Err(Error::InvalidConfig("waypoints need two points and positive speed".into()));
            }
            let step = speed_mps / rate;
            let mut out = vec![];
            let mut carried = 0.0;
            for seg in points.windows(2) {
                let (a, b) = (seg[0], seg[1]);
                let d = [b[0] - a[0], b[1] - a[1]];
                let len = (d[0] * d[0] + d[1] * d[1]).sqrt();
                if len == 0.0 {
                    continue;
                }
                let bearing = d[0].atan2(d[1]).to_degrees();
                let heading = wrap_degrees(bearing - spec.camera_fov / 2.0);
                let mut s = carried;
                while s < len {
                    let t = s / len;
                    out.push(([a[0] + d[0] * t, a[1] + d[1] * t], heading));
                    s += step;
                }
                carried = s - len;
            }
            Ok(out)
        }
    }
}

/// Samples a trajectory with noisy odometry over `world`.
pub fn generate_trajectory(world: &GeoRaster, spec: &TrajectorySpec) -> Result<Vec<TrajectoryFrame>> {
    if !(spec.frame_rate > 0.0)
        || spec.heading_noise_deg < 0.0
        || spec.translation_noise_m < 0.0
        || spec.gps_noise_m < 0.0
        || spec.pixel_noise < 0.0
    {
        return Err(Error::InvalidConfig("trajectory rates and noise levels".into()));
    }
    let path = truth_path(spec)?;
    let origin = world.center()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let heading_noise = Normal::new(0.0, spec.heading_noise_deg).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let translation_noise =
        Normal::new(0.0, spec.translation_noise_m).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let gps_noise = Normal::new(0.0, spec.gps_noise_m).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let h0 = path[0].1;
    let mut frames = Vec::with_capacity(path.len());
    for (i, &(pos, heading)) in path.iter().enumerate() {
        let position = origin.offset_by(pos[0], pos[1]);
        let truth = GeoPose {
            position,
            heading_degrees: heading,
        };
        let (heading_delta, translation) = if i == 0 {
            (0.0, [0.0, 0.0])
        } else {
            let (prev, prev_h) = path[i - 1];
            let delta = wrapped_difference(heading, prev_h) + heading_noise.sample(&mut rng);
            let world_step = [pos[0] - prev[0], pos[1] - prev[1]];
            let odo = rotate_bearing(world_step, -h0);
            (
                delta,
                [
                    odo[0] + translation_noise.sample(&mut rng),
                    odo[1] + translation_noise.sample(&mut rng),
                ],
            )
        };
        let global_position =
            position.offset_by(gps_noise.sample(&mut rng), gps_noise.sample(&mut rng));
        let image = if spec.render {
            let mut img = render_ground_view(world, &truth, spec.camera_fov, &spec.polar)?;
            add_pixel_noise(&mut img, spec.pixel_noise, &mut rng);
            img
        } else {
            Image::filled(1, 1, 0.0)
        };
        frames.push(TrajectoryFrame {
            observation: FrameObservation {
                image,
                global_position,
                heading_delta,
                translation,
                timestamp: i as f64 / spec.frame_rate,
            },
            truth,
        });
    }
    Ok(frames)
}
