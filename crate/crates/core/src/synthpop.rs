//! Seeded synthetic animal populations with ground-truth identities.
//!
//! Each individual carries a unique blob-spot texture painted on a shared
//! elliptical body template. A sighting re-renders that texture through a
//! seeded similarity transform, a smooth non-rigid warp, a photometric gain
//! and bias, and additive noise; landmarks are mapped through the same
//! transform to give the sighting's fiducials. Pixels are quantized to 8 bits
//! before anything is written.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::imageio;
use crate::matchers::features::Point;
use crate::rng::derived_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PatternSpec {
    pub blob_count: usize,
    pub blob_sigma_min: f64,
    pub blob_sigma_max: f64,
    pub blob_amplitude: f64,
    /// Spots common to every individual (the species pattern).
    pub shared_blob_count: usize,
}

impl Default for PatternSpec {
    fn default() -> Self {
        Self {
            blob_count: 80,
            blob_sigma_min: 1.5,
            blob_sigma_max: 3.0,
            blob_amplitude: 0.3,
            shared_blob_count: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Perturbations {
    pub rotation_deg: f64,
    pub scale_min: f64,
    pub scale_max: f64,
    pub translation_px: f64,
    pub warp_amplitude_px: f64,
    pub gain_min: f64,
    pub gain_max: f64,
    pub bias_min: f64,
    pub bias_max: f64,
    pub noise_sigma: f64,
    /// Gaussian error on the reported fiducials, as from hand placement.
    pub fiducial_jitter_px: f64,
    /// Expected number of specular glare spots per sighting.
    pub glare_spots: f64,
    /// Amplitude of a smooth additive illumination wave (haze, reflections).
    pub shading_amplitude: f64,
}

impl Perturbations {
    pub fn none() -> Self {
        Self {
            rotation_deg: 0.0,
            scale_min: 1.0,
            scale_max: 1.0,
            translation_px: 0.0,
            warp_amplitude_px: 0.0,
            gain_min: 1.0,
            gain_max: 1.0,
            bias_min: 0.0,
            bias_max: 0.0,
            noise_sigma: 0.0,
            fiducial_jitter_px: 0.0,
            glare_spots: 0.0,
            shading_amplitude: 0.0,
        }
    }
}

impl Default for Perturbations {
    fn default() -> Self {
        Self {
            rotation_deg: 8.0,
            scale_min: 0.9,
            scale_max: 1.1,
            translation_px: 3.0,
            warp_amplitude_px: 1.5,
            gain_min: 0.8,
            gain_max: 1.2,
            bias_min: -0.1,
            bias_max: 0.1,
            noise_sigma: 0.05,
            fiducial_jitter_px: 1.5,
            glare_spots: 4.0,
            shading_amplitude: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_individuals: usize,
    pub sightings_per_individual: usize,
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    pub pattern: PatternSpec,
    pub perturbations: Perturbations,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_individuals: 64,
            sightings_per_individual: 4,
            seed: 7,
            width: 144,
            height: 112,
            pattern: PatternSpec::default(),
            perturbations: Perturbations::default(),
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let p = &self.perturbations;
        let checks = [
            (self.n_individuals > 0, "n_individuals must be positive"),
            (self.sightings_per_individual > 0, "sightings_per_individual must be positive"),
            (self.width >= 96 && self.height >= 80, "canvas must be at least 96x80"),
            (self.pattern.blob_sigma_min > 0.0, "blob sigma must be positive"),
            (self.pattern.blob_sigma_min <= self.pattern.blob_sigma_max, "blob sigma range inverted"),
            (p.rotation_deg >= 0.0 && p.rotation_deg <= 30.0, "rotation must be in [0, 30] degrees"),
            (p.scale_min > 0.0 && p.scale_min <= p.scale_max, "scale range invalid"),
            (p.translation_px >= 0.0, "translation must be nonnegative"),
            (p.warp_amplitude_px >= 0.0, "warp amplitude must be nonnegative"),
            (p.gain_min > 0.0 && p.gain_min <= p.gain_max, "gain range invalid"),
            (p.bias_min <= p.bias_max, "bias range inverted"),
            (p.noise_sigma >= 0.0, "noise sigma must be nonnegative"),
            (p.glare_spots >= 0.0, "glare spot rate must be nonnegative"),
            (p.shading_amplitude >= 0.0 && p.shading_amplitude < 1.0, "shading amplitude must be in [0, 1)"),
            (p.fiducial_jitter_px >= 0.0 && p.fiducial_jitter_px <= 4.0, "fiducial jitter must be in [0, 4] px"),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::validation(msg));
            }
        }
        Ok(())
    }

    fn centre(&self) -> Point {
        Point::new(self.width as f64 / 2.0, self.height as f64 / 2.0)
    }

    fn semi_axes(&self) -> (f64, f64) {
        (self.width as f64 * 0.39, self.height as f64 * 0.32)
    }

    /// Body landmarks in template coordinates: a 4 x 2 grid along the body.
    pub fn landmarks(&self) -> Vec<Point> {
        let c = self.centre();
        let (ax, ay) = self.semi_axes();
        let mut out = Vec::new();
        for fy in [-0.28, 0.28] {
            for fx in [-0.54, -0.18, 0.18, 0.54] {
                out.push(Point::new(c.x + fx * ax, c.y + fy * ay * 2.0));
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticImage {
    pub id: String,
    pub individual: usize,
    pub sighting: usize,
    pub fiducials: Vec<Point>,
    #[serde(skip)]
    pub width: usize,
    #[serde(skip)]
    pub height: usize,
    #[serde(skip)]
    pub pixels: Vec<u8>,
}

impl SyntheticImage {
    pub fn grid(&self) -> Grid {
        imageio::from_bytes(self.height, self.width, &self.pixels).expect("consistent raster")
    }

    pub fn pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Population {
    pub spec: SyntheticSpec,
    pub images: Vec<SyntheticImage>,
}

impl Population {
    /// Image id to individual index.
    pub fn truth(&self) -> BTreeMap<String, usize> {
        self.images
            .iter()
            .map(|im| (im.id.clone(), im.individual))
            .collect()
    }

    pub fn get(&self, id: &str) -> Option<&SyntheticImage> {
        self.images.iter().find(|im| im.id == id)
    }
}

pub fn image_id(individual: usize, sighting: usize) -> String {
    format!("ind{individual:04}-s{sighting:02}")
}

struct Blob {
    x: f64,
    y: f64,
    sigma: f64,
    amplitude: f64,
}

/// Individual texture on the template canvas, with values in roughly `[0, 1]`.
fn random_blobs(spec: &SyntheticSpec, r: &mut impl Rng, count: usize) -> Vec<Blob> {
    let c = spec.centre();
    let (ax, ay) = spec.semi_axes();
    let pat = &spec.pattern;
    (0..count)
        .map(|_| {
            // uniform in the ellipse by rejection
            let (u, v) = loop {
                let u: f64 = r.gen_range(-1.0..1.0);
                let v: f64 = r.gen_range(-1.0..1.0);
                if u * u + v * v <= 1.0 {
                    break (u, v);
                }
            };
            let sign = if r.gen_bool(0.5) { 1.0 } else { -1.0 };
            Blob {
                x: c.x + u * ax,
                y: c.y + v * ay,
                sigma: r.gen_range(pat.blob_sigma_min..=pat.blob_sigma_max),
                amplitude: sign * pat.blob_amplitude * r.gen_range(0.6..1.0),
            }
        })
        .collect()
}

fn render_template(spec: &SyntheticSpec, individual: usize) -> Grid {
    let mut shared = derived_rng(spec.seed, &[0x7370_6563]);
    let mut blobs = random_blobs(spec, &mut shared, spec.pattern.shared_blob_count);
    let mut r = derived_rng(spec.seed, &[0x7061_7474, individual as u64]);
    blobs.extend(random_blobs(spec, &mut r, spec.pattern.blob_count));
    let c = spec.centre();
    let (ax, ay) = spec.semi_axes();
    let mut g = Grid::from_fn(spec.height, spec.width, |y, x| {
        let dx = (x as f64 - c.x) / ax;
        let dy = (y as f64 - c.y) / ay;
        let d = (dx * dx + dy * dy).sqrt();
        // soft body edge
        let body = 1.0 / (1.0 + ((d - 1.0) * 12.0).exp());
        0.15 + 0.35 * body
    });
    for b in &blobs {
        let rad = (3.5 * b.sigma).ceil() as isize;
        let (bx, by) = (b.x.round() as isize, b.y.round() as isize);
        for y in (by - rad).max(0)..=(by + rad).min(spec.height as isize - 1) {
            for x in (bx - rad).max(0)..=(bx + rad).min(spec.width as isize - 1) {
                let d2 = (x as f64 - b.x).powi(2) + (y as f64 - b.y).powi(2);
                let v = g.get(y as usize, x as usize)
                    + b.amplitude * (-d2 / (2.0 * b.sigma * b.sigma)).exp();
                g.set(y as usize, x as usize, v);
            }
        }
    }
    g
}

struct SightingTransform {
    centre: Point,
    cos: f64,
    sin: f64,
    scale: f64,
    tx: f64,
    ty: f64,
    amp: f64,
    freq: (f64, f64),
    phase: [f64; 4],
}

impl SightingTransform {
    fn warp(&self, q: Point) -> (f64, f64) {
        if self.amp == 0.0 {
            return (0.0, 0.0);
        }
        (
            self.amp * (self.freq.0 * q.y + self.phase[0]).sin() * (self.freq.1 * q.x + self.phase[1]).cos(),
            self.amp * (self.freq.0 * q.x + self.phase[2]).sin() * (self.freq.1 * q.y + self.phase[3]).cos(),
        )
    }

    /// Template point to image point.
    fn forward(&self, q: Point) -> Point {
        let (wx, wy) = self.warp(q);
        let dx = q.x - self.centre.x;
        let dy = q.y - self.centre.y;
        Point::new(
            self.centre.x + self.tx + self.scale * (self.cos * dx - self.sin * dy) + wx,
            self.centre.y + self.ty + self.scale * (self.sin * dx + self.cos * dy) + wy,
        )
    }

    /// Image point to template point by fixed-point iteration on the warp.
    fn inverse(&self, p: Point) -> Point {
        let mut q = p;
        for _ in 0..4 {
            let (wx, wy) = self.warp(q);
            let dx = p.x - self.centre.x - self.tx - wx;
            let dy = p.y - self.centre.y - self.ty - wy;
            q = Point::new(
                self.centre.x + (self.cos * dx + self.sin * dy) / self.scale,
                self.centre.y + (-self.sin * dx + self.cos * dy) / self.scale,
            );
        }
        q
    }
}

fn uniform(r: &mut impl Rng, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        r.gen_range(lo..hi)
    } else {
        lo
    }
}

/// Bright spots in image coordinates; they do not move with the animal.
fn glare_spots(spec: &SyntheticSpec, r: &mut impl Rng) -> Vec<Blob> {
    let rate = spec.perturbations.glare_spots;
    if rate <= 0.0 {
        return Vec::new();
    }
    let count = rand_distr::Poisson::new(rate).expect("positive rate").sample(r) as usize;
    let c = spec.centre();
    let (ax, ay) = spec.semi_axes();
    (0..count)
        .map(|_| Blob {
            x: c.x + r.gen_range(-0.8..0.8) * ax,
            y: c.y + r.gen_range(-0.8..0.8) * ay,
            sigma: r.gen_range(1.5..3.0),
            amplitude: r.gen_range(0.6..1.0),
        })
        .collect()
}

fn render_sighting(spec: &SyntheticSpec, template: &Grid, individual: usize, sighting: usize) -> SyntheticImage {
    let p = &spec.perturbations;
    let mut r = derived_rng(spec.seed, &[0x7369_6768, individual as u64, sighting as u64]);
    let theta = uniform(&mut r, -p.rotation_deg, p.rotation_deg) * PI / 180.0;
    let t = SightingTransform {
        centre: spec.centre(),
        cos: theta.cos(),
        sin: theta.sin(),
        scale: uniform(&mut r, p.scale_min, p.scale_max),
        tx: uniform(&mut r, -p.translation_px, p.translation_px),
        ty: uniform(&mut r, -p.translation_px, p.translation_px),
        amp: p.warp_amplitude_px,
        freq: (
            2.0 * PI / uniform(&mut r, 40.0, 70.0),
            2.0 * PI / uniform(&mut r, 40.0, 70.0),
        ),
        phase: [
            uniform(&mut r, 0.0, 2.0 * PI),
            uniform(&mut r, 0.0, 2.0 * PI),
            uniform(&mut r, 0.0, 2.0 * PI),
            uniform(&mut r, 0.0, 2.0 * PI),
        ],
    };
    let gain = uniform(&mut r, p.gain_min, p.gain_max);
    let bias = uniform(&mut r, p.bias_min, p.bias_max);
    let glare = glare_spots(spec, &mut r);
    let shade_dir = uniform(&mut r, 0.0, PI);
    let shade_k = 2.0 * PI / uniform(&mut r, 40.0, 70.0);
    let shade_phase = uniform(&mut r, 0.0, 2.0 * PI);
    let (sk_x, sk_y) = (shade_k * shade_dir.cos(), shade_k * shade_dir.sin());
    let noise = (p.noise_sigma > 0.0).then(|| Normal::new(0.0, p.noise_sigma).expect("valid sigma"));
    let grid = Grid::from_fn(spec.height, spec.width, |y, x| {
        let q = t.inverse(Point::new(x as f64, y as f64));
        let shade = p.shading_amplitude * (sk_x * x as f64 + sk_y * y as f64 + shade_phase).sin();
        let mut v = gain * template.sample(q.y, q.x) + bias + shade;
        for b in &glare {
            let d2 = (x as f64 - b.x).powi(2) + (y as f64 - b.y).powi(2);
            v += b.amplitude * (-d2 / (2.0 * b.sigma * b.sigma)).exp();
        }
        if let Some(n) = &noise {
            v += n.sample(&mut r);
        }
        v
    });
    let jitter = (p.fiducial_jitter_px > 0.0).then(|| Normal::new(0.0, p.fiducial_jitter_px).expect("valid sigma"));
    let fiducials = spec
        .landmarks()
        .into_iter()
        .map(|l| {
            let f = t.forward(l);
            match &jitter {
                Some(j) => Point::new(f.x + j.sample(&mut r), f.y + j.sample(&mut r)),
                None => f,
            }
        })
        .collect();
    SyntheticImage {
        id: image_id(individual, sighting),
        individual,
        sighting,
        fiducials,
        width: spec.width,
        height: spec.height,
        pixels: imageio::quantize(&grid),
    }
}

/// Generates the population. Output depends only on the spec.
pub fn generate_population(spec: &SyntheticSpec) -> Result<Population> {
    spec.validate()?;
    let images: Vec<SyntheticImage> = (0..spec.n_individuals)
        .into_par_iter()
        .flat_map_iter(|i| {
            let template = render_template(spec, i);
            (0..spec.sightings_per_individual)
                .map(|s| render_sighting(spec, &template, i, s))
                .collect::<Vec<_>>()
        })
        .collect();
    Ok(Population {
        spec: spec.clone(),
        images,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub spec: SyntheticSpec,
    pub images: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub individual: usize,
    pub sighting: usize,
    pub path: String,
    pub fiducials: Vec<Point>,
}

/// Writes `individual_{i}/sighting_{j}.pgm` files plus `manifest.json`.
pub fn write_population(pop: &Population, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut entries = Vec::with_capacity(pop.images.len());
    for im in &pop.images {
        let rel = format!("individual_{}/sighting_{}.pgm", im.individual, im.sighting);
        let path = dir.join(&rel);
        fs::create_dir_all(path.parent().expect("has parent"))?;
        fs::write(&path, im.pgm())?;
        entries.push(ManifestEntry {
            id: im.id.clone(),
            individual: im.individual,
            sighting: im.sighting,
            path: rel,
            fiducials: im.fiducials.clone(),
        });
    }
    let manifest = Manifest {
        spec: pop.spec.clone(),
        images: entries,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

/// Loads a population written by [`write_population`].
pub fn read_population(dir: &Path) -> Result<Population> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    let mut images = Vec::with_capacity(manifest.images.len());
    for e in manifest.images {
        let bytes = fs::read(dir.join(&e.path))?;
        let grid = imageio::decode(&bytes)?;
        images.push(SyntheticImage {
            id: e.id,
            individual: e.individual,
            sighting: e.sighting,
            fiducials: e.fiducials,
            width: grid.width(),
            height: grid.height(),
            pixels: imageio::quantize(&grid),
        });
    }
    Ok(Population {
        spec: manifest.spec,
        images,
    })
}
