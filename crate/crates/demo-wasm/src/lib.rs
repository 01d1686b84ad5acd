//! Browser bindings for the demo page: polar reference view, single-frame
//! similarity curve and a cold-start sweep on a synthetic world.

use georeg::alignment::sliding_similarity_auto;
use georeg::features::{FeatureExtractor, HandcraftedExtractor};
use georeg::geometry::{GeoPose, GeoRaster, PolarConfig, ReferenceSource, TileConfig};
use georeg::image::Image;
use georeg::sequencer::{Sequencer, SequencerConfig, StepMode};
use georeg::synth::{generate_trajectory, generate_world, render_ground_view, Motion, TrajectorySpec, WorldSpec};
use wasm_bindgen::prelude::*;

fn js_err(e: georeg::Error) -> JsError {
    JsError::new(&e.to_string())
}

fn rgba(img: &Image) -> Vec<u8> {
    img.data()
        .iter()
        .flat_map(|&v| {
            let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            [g, g, g, 255]
        })
        .collect()
}

#[wasm_bindgen]
pub struct Demo {
    world: GeoRaster,
    polar: PolarConfig,
    extractor: HandcraftedExtractor,
}

#[wasm_bindgen]
impl Demo {
    /// Builds a world; `symmetric` reflects it through its centre.
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, symmetric: bool, polar_width: usize) -> Result<Demo, JsError> {
        let world = generate_world(&WorldSpec {
            seed: seed as u64,
            symmetric,
            ..Default::default()
        })
        .map_err(js_err)?;
        Ok(Demo {
            world,
            polar: PolarConfig {
                tile: TileConfig::default(),
                width: polar_width,
                height: 32,
            },
            extractor: HandcraftedExtractor::default(),
        })
    }

    pub fn world_size(&self) -> usize {
        self.world.image.width()
    }

    pub fn world_rgba(&self) -> Vec<u8> {
        rgba(&self.world.image)
    }

    pub fn polar_width(&self) -> usize {
        self.polar.width
    }

    pub fn polar_height(&self) -> usize {
        self.polar.height
    }

    /// Polar reference at `[east, north]` meters from the centre, as RGBA.
    pub fn polar_rgba(&self, east: f64, north: f64) -> Result<Vec<u8>, JsError> {
        let p = self.world.center().map_err(js_err)?.offset_by(east, north);
        let polar = ReferenceSource::new(&self.world, self.polar).polar_at(p).map_err(js_err)?;
        Ok(rgba(&polar.pixels))
    }

    /// Similarity over all heading bins for a view rendered at `heading`.
    pub fn similarity(&self, east: f64, north: f64, heading: f64, fov: f64) -> Result<Vec<f64>, JsError> {
        let p = self.world.center().map_err(js_err)?.offset_by(east, north);
        let pose = GeoPose {
            position: p,
            heading_degrees: heading,
        };
        let view = render_ground_view(&self.world, &pose, fov, &self.polar).map_err(js_err)?;
        let polar = ReferenceSource::new(&self.world, self.polar).polar_at(p).map_err(js_err)?;
        let fg = self.extractor.ground_features(&view).map_err(js_err)?;
        let fs = self.extractor.reference_features(&polar).map_err(js_err)?;
        Ok(sliding_similarity_auto(&fg, &fs).map_err(js_err)?.scores)
    }

    /// Runs a stationary cold-start sweep. Returns six numbers per frame:
    /// estimate, truth, ratio, coverage, accepted (0/1), frames in buffer.
    #[allow(clippy::too_many_arguments)]
    pub fn cold_start_sweep(
        &self,
        east: f64,
        north: f64,
        start_heading: f64,
        sweep_degrees: f64,
        seconds: f64,
        heading_noise: f64,
        fov_threshold: f64,
        ratio_threshold: f64,
    ) -> Result<Vec<f64>, JsError> {
        let spec = TrajectorySpec {
            start: [east, north],
            motion: Motion::Sweep {
                start_heading,
                sweep_degrees,
                duration_seconds: seconds,
            },
            heading_noise_deg: heading_noise,
            polar: self.polar,
            ..Default::default()
        };
        let frames = generate_trajectory(&self.world, &spec).map_err(js_err)?;
        let refs = ReferenceSource::new(&self.world, self.polar);
        let mut seq = Sequencer::new(SequencerConfig {
            fov_threshold,
            ratio_threshold,
            camera_fov: spec.camera_fov,
            ..Default::default()
        })
        .map_err(js_err)?;
        let mut out = Vec::with_capacity(frames.len() * 6);
        for f in &frames {
            let e = seq
                .step(&f.observation, &refs, &self.extractor, StepMode::ColdStart)
                .map_err(js_err)?;
            out.extend([
                e.heading_degrees,
                f.truth.heading_degrees,
                e.ratio_confidence,
                e.fov_coverage_degrees,
                f64::from(u8::from(e.accepted)),
                e.frames_in_buffer as f64,
            ]);
        }
        Ok(out)
    }
}
