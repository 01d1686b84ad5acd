//! Geo-referenced rasters, reference tile cropping and the polar transform.
//!
//! Conventions shared by every module:
//!
//! - Bearings are degrees clockwise from north. Polar column 0 looks north.
//! - Raster pixel centres sit on integer coordinates; `x` grows east, `y` grows south.
//! - Positions inside a tile use a local flat-earth approximation.

use crate::image::Image;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};

/// Meters per degree of latitude on the local flat-earth approximation.
pub const METERS_PER_DEGREE: f64 = 111_320.0;

/// Default reference coverage, matching the aerial crops of the CVACT benchmark.
pub const DEFAULT_COVERAGE_METERS: f64 = 144.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub latitude: f64,
    pub longitude: f64,
}

impl GeoPoint {
    pub fn new(latitude: f64, longitude: f64) -> Result<Self> {
        if !(-90.0..=90.0).contains(&latitude) || !(-180.0..=180.0).contains(&longitude) {
            return Err(Error::InvalidGeoPoint {
                lat: latitude,
                lon: longitude,
            });
        }
        Ok(Self {
            latitude,
            longitude,
        })
    }

    /// East/north offset in meters from `origin` to `self`.
    pub fn offset_from(&self, origin: &GeoPoint) -> (f64, f64) {
        let north = (self.latitude - origin.latitude) * METERS_PER_DEGREE;
        let east = (self.longitude - origin.longitude)
            * METERS_PER_DEGREE
            * origin.latitude.to_radians().cos();
        (east, north)
    }

    /// The point `east`/`north` meters away from `self`.
    pub fn offset_by(&self, east: f64, north: f64) -> GeoPoint {
        GeoPoint {
            latitude: self.latitude + north / METERS_PER_DEGREE,
            longitude: self.longitude
                + east / (METERS_PER_DEGREE * self.latitude.to_radians().cos()),
        }
    }
}

/// A heading and position pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPose {
    pub position: GeoPoint,
    /// Bearing of the first image column, degrees clockwise from north.
    pub heading_degrees: f64,
}

/// Sidecar metadata written next to a raster image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Georeference {
    pub center_lat: f64,
    pub center_lon: f64,
    pub meters_per_pixel: f64,
    pub width_px: usize,
    pub height_px: usize,
}

/// An aerial raster, optionally carrying its georeference.
#[derive(Debug, Clone)]
pub struct GeoRaster {
    pub image: Image,
    pub georef: Option<Georeference>,
}

impl GeoRaster {
    pub fn new(image: Image, center: GeoPoint, meters_per_pixel: f64) -> Self {
        let georef = Georeference {
            center_lat: center.latitude,
            center_lon: center.longitude,
            meters_per_pixel,
            width_px: image.width(),
            height_px: image.height(),
        };
        Self {
            image,
            georef: Some(georef),
        }
    }

    fn valid_georef(&self) -> Result<&Georeference> {
        match &self.georef {
            Some(g)
                if g.meters_per_pixel > 0.0
                    && g.meters_per_pixel.is_finite()
                    && g.width_px == self.image.width()
                    && g.height_px == self.image.height() =>
            {
                Ok(g)
            }
            _ => Err(Error::MissingGeoreference),
        }
    }

    pub fn center(&self) -> Result<GeoPoint> {
        let g = self.valid_georef()?;
        Ok(GeoPoint {
            latitude: g.center_lat,
            longitude: g.center_lon,
        })
    }

    pub fn meters_per_pixel(&self) -> Result<f64> {
        Ok(self.valid_georef()?.meters_per_pixel)
    }

    /// Continuous pixel coordinate of a geographic point.
    pub fn pixel_of(&self, p: &GeoPoint) -> Result<(f64, f64)> {
        let g = self.valid_georef()?;
        let center = GeoPoint {
            latitude: g.center_lat,
            longitude: g.center_lon,
        };
        let (east, north) = p.offset_from(&center);
        let cx = (g.width_px as f64 - 1.0) / 2.0;
        let cy = (g.height_px as f64 - 1.0) / 2.0;
        Ok((cx + east / g.meters_per_pixel, cy - north / g.meters_per_pixel))
    }

    /// Geographic point at a continuous pixel coordinate.
    pub fn point_at(&self, x: f64, y: f64) -> Result<GeoPoint> {
        let g = self.valid_georef()?;
        let center = GeoPoint {
            latitude: g.center_lat,
            longitude: g.center_lon,
        };
        let cx = (g.width_px as f64 - 1.0) / 2.0;
        let cy = (g.height_px as f64 - 1.0) / 2.0;
        Ok(center.offset_by(
            (x - cx) * g.meters_per_pixel,
            (cy - y) * g.meters_per_pixel,
        ))
    }

    /// Whether a square of half-side `margin_m` centred on `p` lies inside the raster.
    pub fn contains_with_margin(&self, p: &GeoPoint, margin_m: f64) -> Result<bool> {
        let mpp = self.meters_per_pixel()?;
        let (x, y) = self.pixel_of(p)?;
        let half = margin_m / mpp;
        let eps = 1e-6;
        let w = self.image.width() as f64;
        let h = self.image.height() as f64;
        Ok(x - half >= -0.5 - eps
            && y - half >= -0.5 - eps
            && x + half <= w - 0.5 + eps
            && y + half <= h - 0.5 + eps)
    }
}

#[cfg(feature = "io")]
impl GeoRaster {
    /// Loads `image_path` plus its `<image_path>.json` sidecar. A missing
    /// sidecar yields a raster without georeference.
    pub fn load(image_path: impl AsRef<std::path::Path>) -> Result<Self> {
        let image_path = image_path.as_ref();
        let image = Image::load(image_path)?;
        let sidecar = sidecar_path(image_path);
        let georef = if sidecar.exists() {
            let text = std::fs::read_to_string(&sidecar)?;
            Some(serde_json::from_str(&text)?)
        } else {
            None
        };
        Ok(Self { image, georef })
    }

    pub fn save(&self, image_path: impl AsRef<std::path::Path>) -> Result<()> {
        let image_path = image_path.as_ref();
        self.image.save_png(image_path)?;
        if let Some(g) = &self.georef {
            std::fs::write(sidecar_path(image_path), serde_json::to_string_pretty(g)?)?;
        }
        Ok(())
    }
}

#[cfg(feature = "io")]
pub fn sidecar_path(image_path: &std::path::Path) -> std::path::PathBuf {
    let mut s = image_path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

/// Reference tile sizing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TileConfig {
    pub coverage_meters: f64,
    /// Output side length. `None` keeps the native resolution.
    pub tile_pixels: Option<usize>,
}

impl Default for TileConfig {
    fn default() -> Self {
        Self {
            coverage_meters: DEFAULT_COVERAGE_METERS,
            tile_pixels: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AerialTile {
    pub pixels: Image,
    pub center: GeoPoint,
    pub meters_per_pixel: f64,
    pub side_meters: f64,
}

/// Crops a square tile of `cfg.coverage_meters` centred on `center`.
pub fn crop_reference_tile(
    world: &GeoRaster,
    center: GeoPoint,
    cfg: &TileConfig,
) -> Result<AerialTile> {
    let mpp = world.meters_per_pixel()?;
    if !(cfg.coverage_meters > 0.0) {
        return Err(Error::InvalidConfig("coverage must be positive".into()));
    }
    if !world.contains_with_margin(&center, cfg.coverage_meters / 2.0)? {
        return Err(Error::OutOfBounds {
            needed_m: cfg.coverage_meters / 2.0,
        });
    }
    let native = ((cfg.coverage_meters / mpp).round() as usize).max(1);
    let n = cfg.tile_pixels.unwrap_or(native);
    if n == 0 {
        return Err(Error::InvalidConfig("tile_pixels must be positive".into()));
    }
    let tile_mpp = cfg.coverage_meters / n as f64;
    let (px, py) = world.pixel_of(&center)?;
    let step = tile_mpp / mpp;
    let half = (n as f64 - 1.0) / 2.0;
    // separable bilinear weights, shared by every row and column
    let taps = |origin: f64, len: usize| -> Vec<(usize, usize, f64)> {
        let max = (len - 1) as f64;
        (0..n)
            .map(|i| {
                let v = (origin + (i as f64 - half) * step).clamp(0.0, max);
                let v0 = v.floor() as usize;
                (v0, (v0 + 1).min(len - 1), v - v0 as f64)
            })
            .collect()
    };
    let src = &world.image;
    let xs = taps(px, src.width());
    let ys = taps(py, src.height());
    let mut data = Vec::with_capacity(n * n);
    for &(y0, y1, fy) in &ys {
        for &(x0, x1, fx) in &xs {
            let top = src.get(x0, y0) as f64 * (1.0 - fx) + src.get(x1, y0) as f64 * fx;
            let bottom = src.get(x0, y1) as f64 * (1.0 - fx) + src.get(x1, y1) as f64 * fx;
            data.push((top * (1.0 - fy) + bottom * fy) as f32);
        }
    }
    let pixels = Image::new(n, n, data)?;
    Ok(AerialTile {
        pixels,
        center,
        meters_per_pixel: tile_mpp,
        side_meters: n as f64 * tile_mpp,
    })
}

/// Polar-resampled aerial tile: columns are bearings, rows are radii.
#[derive(Debug, Clone)]
pub struct PolarImage {
    pub pixels: Image,
    /// Column whose bearing is 0 deg (always 0 here).
    pub north_column: usize,
}

impl PolarImage {
    pub fn width(&self) -> usize {
        self.pixels.width()
    }

    pub fn height(&self) -> usize {
        self.pixels.height()
    }

    pub fn bearing_of_column(&self, c: usize) -> f64 {
        360.0 * c as f64 / self.width() as f64
    }
}

/// Ground distance from the tile centre sampled by polar row `row`.
pub fn polar_row_radius(row: usize, out_height: usize, side_meters: f64) -> f64 {
    (row as f64 + 0.5) / out_height as f64 * side_meters / 2.0
}

/// Resamples `tile` so column `c` looks along bearing `360 c / out_width` and
/// row `r` samples radius `(r + 1/2) / out_height` of the half side, centre first.
pub fn polar_transform(tile: &AerialTile, out_width: usize, out_height: usize) -> Result<PolarImage> {
    let n = tile.pixels.width();
    if n < 2 || tile.pixels.height() < 2 {
        return Err(Error::DegenerateTile {
            width: n,
            height: tile.pixels.height(),
        });
    }
    if n != tile.pixels.height() {
        return Err(Error::BadDimensions("aerial tile must be square".into()));
    }
    if out_width < 4 || out_height < 1 {
        return Err(Error::BadDimensions(format!(
            "polar output {out_width}x{out_height} (needs width >= 4, height >= 1)"
        )));
    }
    let center = (n as f64 - 1.0) / 2.0;
    let trig: Vec<(f64, f64)> = (0..out_width)
        .map(|c| (360.0 * c as f64 / out_width as f64).to_radians().sin_cos())
        .collect();
    let src = tile.pixels.data();
    let max = (n - 1) as f64;
    let mut data = Vec::with_capacity(out_width * out_height);
    for r in 0..out_height {
        let rho_px = polar_row_radius(r, out_height, tile.side_meters) / tile.meters_per_pixel;
        for &(sin, cos) in &trig {
            // same as Image::sample_bilinear, unrolled for the square tile
            let x = (center + rho_px * sin).clamp(0.0, max);
            let y = (center - rho_px * cos).clamp(0.0, max);
            let (x0, y0) = (x as usize, y as usize);
            let (fx, fy) = (x - x0 as f64, y - y0 as f64);
            let x1 = (x0 + 1).min(n - 1);
            let (row0, row1) = (y0 * n, (y0 + 1).min(n - 1) * n);
            let top = src[row0 + x0] as f64 * (1.0 - fx) + src[row0 + x1] as f64 * fx;
            let bottom = src[row1 + x0] as f64 * (1.0 - fx) + src[row1 + x1] as f64 * fx;
            data.push((top * (1.0 - fy) + bottom * fy) as f32);
        }
    }
    Ok(PolarImage {
        pixels: Image::new(out_width, out_height, data)?,
        north_column: 0,
    })
}

/// Width in columns of a view with `fov_degrees` out of a `panorama_width` panorama.
pub fn fov_to_width(fov_degrees: f64, panorama_width: usize) -> Result<usize> {
    if !(fov_degrees > 0.0 && fov_degrees <= 360.0) {
        return Err(Error::InvalidFov(fov_degrees));
    }
    Ok(((panorama_width as f64 * fov_degrees / 360.0).round() as usize).max(1))
}

/// Everything needed to turn a geographic point into a polar reference.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PolarConfig {
    pub tile: TileConfig,
    pub width: usize,
    pub height: usize,
}

impl Default for PolarConfig {
    fn default() -> Self {
        Self {
            tile: TileConfig::default(),
            width: 512,
            height: 128,
        }
    }
}

/// An aerial world plus the sizing of the polar references cut from it.
#[derive(Debug, Clone, Copy)]
pub struct ReferenceSource<'a> {
    pub world: &'a GeoRaster,
    pub polar: PolarConfig,
}

impl<'a> ReferenceSource<'a> {
    pub fn new(world: &'a GeoRaster, polar: PolarConfig) -> Self {
        Self { world, polar }
    }

    /// Crop and polar transform centred on `p`.
    pub fn polar_at(&self, p: GeoPoint) -> Result<PolarImage> {
        let tile = crop_reference_tile(self.world, p, &self.polar.tile)?;
        polar_transform(&tile, self.polar.width, self.polar.height)
    }
}
