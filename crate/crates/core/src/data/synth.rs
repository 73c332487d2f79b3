use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use super::{BiTemporalSample, Image, Mask};
use crate::error::{Error, Result};
use crate::rng::{rng_for, standard_normal};

/// Knobs of the synthetic change generator.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub size: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub max_added: usize,
    pub max_removed: usize,
    /// Lower bound on `added + removed`. Zero allows unchanged pairs.
    pub min_edits: usize,
    /// Global brightness offset of the post image is uniform in `±brightness_shift`.
    pub brightness_shift: f64,
    pub noise_std: f64,
}

impl SynthConfig {
    pub fn new(size: usize) -> Self {
        SynthConfig {
            size,
            min_shapes: 2,
            max_shapes: 5,
            max_added: 2,
            max_removed: 2,
            min_edits: 1,
            brightness_shift: 0.05,
            noise_std: 0.02,
        }
    }

    /// No brightness shift and no noise: every pixel difference is a real change.
    pub fn noise_free(size: usize) -> Self {
        SynthConfig { brightness_shift: 0.0, noise_std: 0.0, ..Self::new(size) }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Rect,
    Ellipse,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SynthShape {
    pub kind: ShapeKind,
    pub center: (f64, f64),
    /// Half extents `(ry, rx)`.
    pub radii: (f64, f64),
    pub color: [f32; 3],
}

impl SynthShape {
    /// Coverage test at the centre of pixel `(y, x)`.
    pub fn contains(&self, y: usize, x: usize) -> bool {
        let dy = (y as f64 + 0.5 - self.center.0) / self.radii.0;
        let dx = (x as f64 + 0.5 - self.center.1) / self.radii.1;
        match self.kind {
            ShapeKind::Rect => dy.abs() <= 1.0 && dx.abs() <= 1.0,
            ShapeKind::Ellipse => dy * dy + dx * dx <= 1.0,
        }
    }

    fn overlaps(&self, other: &SynthShape, margin: f64) -> bool {
        (self.center.0 - other.center.0).abs() < self.radii.0 + other.radii.0 + margin
            && (self.center.1 - other.center.1).abs() < self.radii.1 + other.radii.1 + margin
    }
}

/// Everything needed to render one pair. Shapes in `pre_shapes` but not in
/// `post_shapes` were removed; the reverse were added.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthScene {
    pub size: usize,
    pub background: [f32; 3],
    /// Low-frequency texture: amplitude and wave numbers.
    pub texture: (f32, f64, f64),
    pub texture_phase: f64,
    pub pre_shapes: Vec<SynthShape>,
    pub post_shapes: Vec<SynthShape>,
    pub brightness: f32,
    pub noise_std: f32,
    pub noise_seed: u64,
}

fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

fn random_shape<R: Rng + ?Sized>(rng: &mut R, size: usize) -> SynthShape {
    let s = size as f64;
    let radii = (uniform(rng, s / 16.0, s / 6.0), uniform(rng, s / 16.0, s / 6.0));
    let center = (uniform(rng, radii.0 + 1.0, s - radii.0 - 1.0), uniform(rng, radii.1 + 1.0, s - radii.1 - 1.0));
    let kind = if rng.random::<bool>() { ShapeKind::Rect } else { ShapeKind::Ellipse };
    let bright = rng.random::<bool>();
    let color = core::array::from_fn(|_| if bright { uniform(rng, 0.8, 0.95) } else { uniform(rng, 0.05, 0.15) } as f32);
    SynthShape { kind, center, radii, color }
}

/// Places a shape that keeps clear of `existing`; gives up after a fixed
/// number of attempts.
fn place<R: Rng + ?Sized>(rng: &mut R, size: usize, existing: &[SynthShape]) -> Option<SynthShape> {
    (0..200).map(|_| random_shape(rng, size)).find(|c| existing.iter().all(|e| !c.overlaps(e, 2.0)))
}

/// Draws one scene. Shapes never overlap, so the label is well defined.
pub fn synth_scene<R: Rng + ?Sized>(cfg: &SynthConfig, rng: &mut R) -> SynthScene {
    let background = core::array::from_fn(|_| uniform(rng, 0.35, 0.55) as f32);
    let texture = (uniform(rng, 0.02, 0.06) as f32, uniform(rng, 1.0, 3.0), uniform(rng, 1.0, 3.0));
    let texture_phase = uniform(rng, 0.0, core::f64::consts::TAU);

    let n_shapes = rng.random_range(cfg.min_shapes..=cfg.max_shapes.max(cfg.min_shapes));
    let mut pre_shapes: Vec<SynthShape> = Vec::new();
    for _ in 0..n_shapes {
        if let Some(s) = place(rng, cfg.size, &pre_shapes) {
            pre_shapes.push(s);
        }
    }

    let mut removed = rng.random_range(0..=cfg.max_removed.min(pre_shapes.len()));
    let mut added = rng.random_range(0..=cfg.max_added);
    while removed + added < cfg.min_edits {
        if added < cfg.max_added || removed >= pre_shapes.len() {
            added += 1;
        } else {
            removed += 1;
        }
    }

    let mut post_shapes = pre_shapes.clone();
    for _ in 0..removed {
        let i = rng.random_range(0..post_shapes.len());
        post_shapes.remove(i);
    }
    // New shapes avoid every shape of either epoch.
    let mut occupied = pre_shapes.clone();
    for _ in 0..added {
        if let Some(s) = place(rng, cfg.size, &occupied) {
            occupied.push(s);
            post_shapes.push(s);
        }
    }

    SynthScene {
        size: cfg.size,
        background,
        texture,
        texture_phase,
        pre_shapes,
        post_shapes,
        brightness: uniform(rng, -cfg.brightness_shift, cfg.brightness_shift) as f32,
        noise_std: cfg.noise_std as f32,
        noise_seed: rng.random(),
    }
}

impl SynthScene {
    pub fn removed(&self) -> impl Iterator<Item = &SynthShape> {
        self.pre_shapes.iter().filter(|s| !self.post_shapes.contains(s))
    }

    pub fn added(&self) -> impl Iterator<Item = &SynthShape> {
        self.post_shapes.iter().filter(|s| !self.pre_shapes.contains(s))
    }
}

fn paint(scene: &SynthScene, shapes: &[SynthShape]) -> Vec<f32> {
    let n = scene.size;
    let (amp, ky, kx) = scene.texture;
    let mut data = Vec::with_capacity(n * n * 3);
    for y in 0..n {
        for x in 0..n {
            let shape = shapes.iter().find(|s| s.contains(y, x));
            match shape {
                Some(s) => data.extend_from_slice(&s.color),
                None => {
                    let u = core::f64::consts::TAU * (ky * y as f64 + kx * x as f64) / n as f64 + scene.texture_phase;
                    let t = amp * libm::sin(u) as f32;
                    data.extend(scene.background.iter().map(|b| b + t));
                }
            }
        }
    }
    data
}

/// Renders a scene. The post image carries the brightness shift and noise;
/// the label is the union of added and removed shape pixels.
pub fn render_scene(scene: &SynthScene) -> BiTemporalSample {
    let n = scene.size;
    let pre = paint(scene, &scene.pre_shapes);
    let mut post = paint(scene, &scene.post_shapes);
    let mut noise = rng_for(scene.noise_seed, &[]);
    for v in &mut post {
        let eps = if scene.noise_std > 0.0 { scene.noise_std * standard_normal(&mut noise) as f32 } else { 0.0 };
        *v = (*v + scene.brightness + eps).clamp(0.0, 1.0);
    }
    let changed: Vec<&SynthShape> = scene.removed().chain(scene.added()).collect();
    let label = (0..n * n).map(|i| changed.iter().any(|s| s.contains(i / n, i % n)) as u8).collect();
    BiTemporalSample {
        pre: Image { height: n, width: n, data: pre },
        post: Image { height: n, width: n, data: post },
        label: Mask { height: n, width: n, data: label },
    }
}

/// `n` reproducible pairs with default settings.
pub fn synth_generate(n: usize, size: usize, seed: u64) -> Result<Vec<BiTemporalSample>> {
    Ok(synth_generate_with(n, &SynthConfig::new(size), seed)?.into_iter().map(|(_, s)| s).collect())
}

/// Sample `i` draws from its own stream, so prefixes agree across `n`.
pub fn synth_generate_with(n: usize, cfg: &SynthConfig, seed: u64) -> Result<Vec<(SynthScene, BiTemporalSample)>> {
    if n == 0 {
        return Err(Error::invalid("synth_generate", "count must be at least 1"));
    }
    if cfg.size == 0 || !cfg.size.is_multiple_of(32) {
        return Err(Error::invalid("synth_generate", format!("size {} is not a positive multiple of 32", cfg.size)));
    }
    Ok((0..n as u64)
        .map(|i| {
            let scene = synth_scene(cfg, &mut rng_for(seed, &[0x5e7, i]));
            let sample = render_scene(&scene);
            (scene, sample)
        })
        .collect())
}
