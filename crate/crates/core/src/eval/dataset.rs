//! Paired ground/reference datasets and frame stream records.

use crate::geometry::{GeoPoint, GeoPose, PolarConfig, ReferenceSource, TileConfig};
use crate::image::Image;
use crate::synth::{add_pixel_noise, generate_world, heading_column, render_ground_view, WorldSpec};
use crate::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// One manifest row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairRecord {
    pub ground_path: String,
    pub ref_path: String,
    pub lat: f64,
    pub lon: f64,
    /// Heading of the ground image's first column.
    pub heading: f64,
    pub split: Split,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PairedDataset {
    pub records: Vec<PairRecord>,
}

impl PairedDataset {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &PairRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn validate(&self) -> Result<()> {
        for r in &self.records {
            GeoPoint::new(r.lat, r.lon)?;
            if !(0.0..360.0).contains(&r.heading) {
                return Err(Error::InvalidConfig(format!(
                    "heading {} of {} is outside [0, 360)",
                    r.heading, r.ground_path
                )));
            }
        }
        Ok(())
    }
}

#[cfg(feature = "io")]
impl PairedDataset {
    /// Reads a CSV manifest (`ground_path,ref_path,lat,lon,heading,split`).
    /// Relative paths are resolved against the manifest's directory and must exist.
    pub fn load_manifest(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let base = path.parent().unwrap_or(std::path::Path::new("."));
        let mut reader = csv::Reader::from_path(path)?;
        let mut records = vec![];
        for row in reader.deserialize() {
            let mut r: PairRecord = row?;
            for p in [&mut r.ground_path, &mut r.ref_path] {
                let resolved = base.join(&*p);
                if !resolved.exists() {
                    return Err(Error::Io(std::io::Error::new(
                        std::io::ErrorKind::NotFound,
                        format!("{} listed in {} does not exist", resolved.display(), path.display()),
                    )));
                }
                *p = resolved.to_string_lossy().into_owned();
            }
            records.push(r);
        }
        let ds = Self { records };
        ds.validate()?;
        Ok(ds)
    }

    pub fn write_manifest(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Recipe for in-memory synthetic training/test pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticPairSpec {
    pub seed: u64,
    pub world: WorldSpec,
    pub train_count: usize,
    pub test_count: usize,
    pub polar: PolarConfig,
    /// Side of the square, centred on the world, that pair locations are drawn from.
    pub spread_meters: f64,
    /// Ground field of view; 360 gives panoramas.
    pub ground_fov: f64,
    /// Ground headings are multiples of this many polar columns.
    pub heading_step_columns: usize,
    pub pixel_noise: f64,
}

impl Default for SyntheticPairSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            world: WorldSpec::default(),
            train_count: 500,
            test_count: 100,
            polar: PolarConfig {
                tile: TileConfig::default(),
                width: 256,
                height: 64,
            },
            spread_meters: 200.0,
            ground_fov: 360.0,
            heading_step_columns: 8,
            pixel_noise: 0.02,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticPair {
    pub ground: Image,
    /// Polar reference image at `location`.
    pub reference: Image,
    pub location: GeoPoint,
    pub heading_degrees: f64,
    /// Polar column of the ground image's first column.
    pub heading_column: usize,
    pub split: Split,
}

impl SyntheticPair {
    /// Ground-truth bin for features downsampled by `factor`.
    pub fn gt_bin(&self, factor: usize) -> usize {
        (self.heading_column as f64 / factor as f64).round() as usize
    }
}

/// Renders `train_count + test_count` pairs at random locations and headings.
pub fn synthetic_pairs(spec: &SyntheticPairSpec) -> Result<Vec<SyntheticPair>> {
    if spec.heading_step_columns == 0 || spec.polar.width % spec.heading_step_columns != 0 {
        return Err(Error::InvalidConfig("heading_step_columns must divide the polar width".into()));
    }
    let world = generate_world(&spec.world)?;
    let center = world.center()?;
    let refs = ReferenceSource::new(&world, spec.polar);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let steps = spec.polar.width / spec.heading_step_columns;
    let half = spec.spread_meters / 2.0;
    let mut out = Vec::with_capacity(spec.train_count + spec.test_count);
    for i in 0..spec.train_count + spec.test_count {
        let (e, n) = if half > 0.0 {
            (rng.random_range(-half..half), rng.random_range(-half..half))
        } else {
            (0.0, 0.0)
        };
        let location = center.offset_by(e, n);
        let column = rng.random_range(0..steps) * spec.heading_step_columns;
        let heading = 360.0 * column as f64 / spec.polar.width as f64;
        let pose = GeoPose {
            position: location,
            heading_degrees: heading,
        };
        let mut ground = render_ground_view(&world, &pose, spec.ground_fov, &spec.polar)?;
        add_pixel_noise(&mut ground, spec.pixel_noise, &mut rng);
        debug_assert_eq!(heading_column(heading, spec.polar.width), column);
        out.push(SyntheticPair {
            ground,
            reference: refs.polar_at(location)?.pixels,
            location,
            heading_degrees: heading,
            heading_column: column,
            split: if i < spec.train_count { Split::Train } else { Split::Test },
        });
    }
    Ok(out)
}

/// Writes pairs as PNGs plus `manifest.csv` under `dir`.
#[cfg(feature = "io")]
pub fn write_pairs(dir: impl AsRef<std::path::Path>, pairs: &[SyntheticPair]) -> Result<PairedDataset> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir.join("ground"))?;
    std::fs::create_dir_all(dir.join("reference"))?;
    let mut records = vec![];
    for (i, p) in pairs.iter().enumerate() {
        let g = format!("ground/{i:05}.png");
        let r = format!("reference/{i:05}.png");
        p.ground.save_png(dir.join(&g))?;
        p.reference.save_png(dir.join(&r))?;
        records.push(PairRecord {
            ground_path: g,
            ref_path: r,
            lat: p.location.latitude,
            lon: p.location.longitude,
            heading: p.heading_degrees,
            split: p.split,
        });
    }
    let ds = PairedDataset { records };
    ds.write_manifest(dir.join("manifest.csv"))?;
    Ok(ds)
}

/// Loads manifest pairs back into memory. Reference images must already be polar.
#[cfg(feature = "io")]
pub fn load_pairs(ds: &PairedDataset) -> Result<Vec<SyntheticPair>> {
    ds.records
        .iter()
        .map(|r| {
            let reference = Image::load(&r.ref_path)?;
            let width = reference.width();
            Ok(SyntheticPair {
                ground: Image::load(&r.ground_path)?,
                reference,
                location: GeoPoint::new(r.lat, r.lon)?,
                heading_degrees: r.heading,
                heading_column: heading_column(r.heading, width),
                split: r.split,
            })
        })
        .collect()
}

/// One line of the frame stream consumed by `coldstart` and `stream`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub image: String,
    pub latitude: f64,
    pub longitude: f64,
    pub heading_delta: f64,
    #[serde(default)]
    pub translation: [f64; 2],
    pub timestamp: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_heading: Option<f64>,
}

#[cfg(feature = "io")]
impl FrameRecord {
    /// Loads the image (relative paths against `base`) into an observation.
    pub fn to_observation(&self, base: &std::path::Path) -> Result<crate::sequencer::FrameObservation> {
        Ok(crate::sequencer::FrameObservation {
            image: Image::load(base.join(&self.image))?,
            global_position: GeoPoint::new(self.latitude, self.longitude)?,
            heading_delta: self.heading_delta,
            translation: self.translation,
            timestamp: self.timestamp,
        })
    }
}
