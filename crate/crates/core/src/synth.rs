//! Deterministic synthetic scenes of rectangles and ellipses drawn
//! back-to-front, with optional occlusion and Gaussian colour noise.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::grid::{LabelMap, Rgb8Image};

pub const CLASS_SMALL: u32 = 1;
pub const CLASS_LARGE: u32 = 2;
/// Class names indexed by class id; 0 is background.
pub const CLASS_NAMES: [&str; 3] = ["background", "small", "large"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Rectangle,
    Ellipse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneConfig {
    pub width: usize,
    pub height: usize,
    pub min_instances: usize,
    pub max_instances: usize,
    /// Bounding-box side range in pixels.
    pub min_size: usize,
    pub max_size: usize,
    pub shapes: Vec<ShapeKind>,
    /// Shapes with a full area below this are class "small".
    pub small_area: usize,
    /// Probability that a shape may be placed over earlier shapes.
    pub occlusion: f64,
    pub noise_sigma: f64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            min_instances: 2,
            max_instances: 5,
            min_size: 10,
            max_size: 28,
            shapes: vec![ShapeKind::Rectangle, ShapeKind::Ellipse],
            small_area: 250,
            occlusion: 0.3,
            noise_sigma: 10.0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::Input("scene size must be positive".into()));
        }
        if self.min_instances > self.max_instances {
            return Err(Error::Input("min_instances exceeds max_instances".into()));
        }
        if self.min_size == 0 || self.min_size > self.max_size {
            return Err(Error::Input("shape size range is empty".into()));
        }
        if self.max_size > self.width.min(self.height) {
            return Err(Error::Input("max_size exceeds the image".into()));
        }
        if self.shapes.is_empty() {
            return Err(Error::Input("no shape kinds enabled".into()));
        }
        if !(0.0..=1.0).contains(&self.occlusion) {
            return Err(Error::Input(format!(
                "occlusion probability {} outside [0, 1]",
                self.occlusion
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Input("noise sigma must be non-negative".into()));
        }
        Ok(())
    }
}

/// One generated scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub rgb: Rgb8Image,
    /// Class id per pixel (0 background).
    pub semseg: LabelMap,
    /// Visible-instance id per pixel, 1..=n in drawing order.
    pub instances: LabelMap,
}

#[derive(Debug, Clone)]
struct Shape {
    kind: ShapeKind,
    r0: usize,
    c0: usize,
    h: usize,
    w: usize,
}

impl Shape {
    fn contains(&self, r: usize, c: usize) -> bool {
        if r < self.r0 || c < self.c0 || r >= self.r0 + self.h || c >= self.c0 + self.w {
            return false;
        }
        match self.kind {
            ShapeKind::Rectangle => true,
            ShapeKind::Ellipse => {
                let ay = self.h as f64 / 2.0;
                let ax = self.w as f64 / 2.0;
                let dy = (r - self.r0) as f64 + 0.5 - ay;
                let dx = (c - self.c0) as f64 + 0.5 - ax;
                (dy / ay).powi(2) + (dx / ax).powi(2) <= 1.0
            }
        }
    }

    fn pixels(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.r0..self.r0 + self.h)
            .flat_map(move |r| (self.c0..self.c0 + self.w).map(move |c| (r, c)))
            .filter(|&(r, c)| self.contains(r, c))
    }
}

fn random_color(rng: &mut ChaCha8Rng, lo: u8, hi: u8) -> [f64; 3] {
    [0, 1, 2].map(|_| rng.random_range(lo..=hi) as f64)
}

fn render(
    config: &SceneConfig,
    rng: &mut ChaCha8Rng,
    shapes: &[Shape],
    owners: &[u32],
) -> Result<Sample> {
    let (w, h) = (config.width, config.height);
    let colors: Vec<[f64; 3]> = shapes.iter().map(|_| random_color(rng, 60, 255)).collect();
    let background = random_color(rng, 0, 50);
    let classes: Vec<u32> = shapes
        .iter()
        .map(|s| {
            if s.pixels().count() < config.small_area {
                CLASS_SMALL
            } else {
                CLASS_LARGE
            }
        })
        .collect();

    // Renumber visible shapes 1..=n in drawing order.
    let mut visible = vec![0u32; shapes.len() + 1];
    for &o in owners {
        if o != 0 {
            visible[o as usize] = 1;
        }
    }
    let mut next = 0;
    for v in visible.iter_mut().skip(1) {
        if *v != 0 {
            next += 1;
            *v = next;
        }
    }

    let noise = Normal::new(0.0, config.noise_sigma.max(0.0))
        .map_err(|e| Error::Input(format!("noise sigma: {e}")))?;
    let mut rgb = Rgb8Image::new(w, h);
    let mut semseg = LabelMap::new(w, h);
    let mut instances = LabelMap::new(w, h);
    for r in 0..h {
        for c in 0..w {
            let o = owners[r * w + c];
            let base = if o == 0 {
                background
            } else {
                semseg.set(r, c, classes[o as usize - 1]);
                instances.set(r, c, visible[o as usize]);
                colors[o as usize - 1]
            };
            let px = base.map(|b| {
                let v = if config.noise_sigma > 0.0 {
                    b + noise.sample(rng)
                } else {
                    b
                };
                v.round().clamp(0.0, 255.0) as u8
            });
            rgb.set(r, c, px);
        }
    }
    Ok(Sample {
        rgb,
        semseg,
        instances,
    })
}

/// Draws one scene. Shapes are painted in order, later ones covering earlier
/// ones; a shape that loses every pixel is dropped from the labels.
/// Non-occluding shapes are placed by rejection sampling so they overlap
/// nothing drawn before (touching is allowed).
pub fn generate_scene(config: &SceneConfig, seed: u64) -> Result<Sample> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (config.width, config.height);
    let count = rng.random_range(config.min_instances..=config.max_instances);
    let mut owners = vec![0u32; w * h];
    let mut shapes: Vec<Shape> = Vec::new();

    for _ in 0..count {
        let occluding = rng.random_bool(config.occlusion);
        let mut placed = None;
        for _attempt in 0..64 {
            let kind = config.shapes[rng.random_range(0..config.shapes.len())];
            let sh = rng.random_range(config.min_size..=config.max_size);
            let sw = rng.random_range(config.min_size..=config.max_size);
            let shape = Shape {
                kind,
                r0: rng.random_range(0..=h - sh),
                c0: rng.random_range(0..=w - sw),
                h: sh,
                w: sw,
            };
            if occluding || shape.pixels().all(|(r, c)| owners[r * w + c] == 0) {
                placed = Some(shape);
                break;
            }
        }
        let Some(shape) = placed else { continue };
        let id = shapes.len() as u32 + 1;
        for (r, c) in shape.pixels() {
            owners[r * w + c] = id;
        }
        shapes.push(shape);
    }
    render(config, &mut rng, &shapes, &owners)
}

/// A large rectangle split in two by a thin bar drawn over it, for exercising
/// the occlusion-fragment failure mode.
pub fn generate_bisected_scene(config: &SceneConfig, seed: u64) -> Result<Sample> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (config.width, config.height);
    let big = Shape {
        kind: ShapeKind::Rectangle,
        r0: h / 4,
        c0: w / 8,
        h: h / 2,
        w: 3 * w / 4,
    };
    let bar_w = 3.min(w);
    let bar = Shape {
        kind: ShapeKind::Rectangle,
        r0: 0,
        c0: rng.random_range(w / 3..=2 * w / 3 - bar_w),
        h,
        w: bar_w,
    };
    let mut owners = vec![0u32; w * h];
    for (i, s) in [&big, &bar].into_iter().enumerate() {
        for (r, c) in s.pixels() {
            owners[r * w + c] = i as u32 + 1;
        }
    }
    render(config, &mut rng, &[big, bar], &owners)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
        }
    }
}

/// Seeds and split of every sample in a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetPlan {
    pub entries: Vec<(u64, Split)>,
}

impl DatasetPlan {
    /// Seeds `seed..seed+n`, the first 80% (rounded down) for training.
    pub fn new(n: usize, seed: u64) -> Result<Self> {
        if n < 2 {
            return Err(Error::Input(format!("a dataset needs at least 2 samples, got {n}")));
        }
        let train = (n * 8 / 10).clamp(1, n - 1);
        Ok(Self {
            entries: (0..n)
                .map(|i| {
                    let split = if i < train { Split::Train } else { Split::Val };
                    (seed + i as u64, split)
                })
                .collect(),
        })
    }

    pub fn count(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.1 == split).count()
    }

    pub fn manifest(&self) -> String {
        let mut s = String::from("# index seed split\n");
        for (i, (seed, split)) in self.entries.iter().enumerate() {
            writeln!(s, "{i} {seed} {}", split.name()).unwrap();
        }
        s
    }

    pub fn parse_manifest(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let f: Vec<&str> = line.split_whitespace().collect();
            let bad = || Error::Input(format!("dataset manifest line {}: `{line}`", n + 1));
            if f.len() != 3 || f[0].parse::<usize>().ok() != Some(entries.len()) {
                return Err(bad());
            }
            let seed = f[1].parse().map_err(|_| bad())?;
            let split = match f[2] {
                "train" => Split::Train,
                "val" => Split::Val,
                _ => return Err(bad()),
            };
            entries.push((seed, split));
        }
        Ok(Self { entries })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub plan: DatasetPlan,
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
}

pub fn generate_dataset(config: &SceneConfig, n: usize, seed: u64) -> Result<Dataset> {
    let plan = DatasetPlan::new(n, seed)?;
    let mut train = Vec::new();
    let mut val = Vec::new();
    for &(s, split) in &plan.entries {
        let sample = generate_scene(config, s)?;
        match split {
            Split::Train => train.push(sample),
            Split::Val => val.push(sample),
        }
    }
    Ok(Dataset { plan, train, val })
}

/// Instance and pixel counts per class.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClassHistogram {
    pub instances: [usize; 3],
    pub pixels: [usize; 3],
}

impl ClassHistogram {
    pub fn add(&mut self, sample: &Sample) {
        for &s in sample.semseg.data() {
            if (s as usize) < 3 {
                self.pixels[s as usize] += 1;
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for (&i, &s) in sample.instances.data().iter().zip(sample.semseg.data()) {
            if i != 0 && seen.insert(i) && (s as usize) < 3 {
                self.instances[s as usize] += 1;
            }
        }
    }

    pub fn report(&self, title: &str) -> String {
        let mut s = format!("{title}\n{:<12}{:>10}{:>10}\n", "class", "instances", "pixels");
        for (id, name) in CLASS_NAMES.iter().enumerate() {
            writeln!(s, "{name:<12}{:>10}{:>10}", self.instances[id], self.pixels[id]).unwrap();
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_scene() {
        let cfg = SceneConfig::default();
        assert_eq!(generate_scene(&cfg, 11).unwrap(), generate_scene(&cfg, 11).unwrap());
        assert_ne!(generate_scene(&cfg, 11).unwrap(), generate_scene(&cfg, 12).unwrap());
    }

    #[test]
    fn no_occlusion_gives_disjoint_whole_shapes() {
        let cfg = SceneConfig {
            min_instances: 2,
            max_instances: 2,
            occlusion: 0.0,
            ..SceneConfig::default()
        };
        for seed in 0..20 {
            let s = generate_scene(&cfg, seed).unwrap();
            assert_eq!(s.instances.max_id(), 2, "seed {seed}");
        }
    }

    #[test]
    fn semseg_matches_instances() {
        let cfg = SceneConfig::default();
        for seed in 0..20 {
            let s = generate_scene(&cfg, seed).unwrap();
            for (&i, &c) in s.instances.data().iter().zip(s.semseg.data()) {
                assert_eq!(i == 0, c == 0);
            }
        }
    }

    #[test]
    fn bisected_scene_splits_the_big_shape() {
        let s = generate_bisected_scene(&SceneConfig::default(), 3).unwrap();
        let pieces = crate::grid::connected_components(
            &s.instances.mask_of(1),
            crate::grid::Connectivity::Four,
        );
        assert_eq!(pieces.max_id(), 2);
    }

    #[test]
    fn split_rule() {
        let p = DatasetPlan::new(10, 100).unwrap();
        assert_eq!(p.count(Split::Train), 8);
        assert_eq!(p.count(Split::Val), 2);
        assert_eq!(p.entries[0].0, 100);
        assert_eq!(DatasetPlan::parse_manifest(&p.manifest()).unwrap(), p);
        assert!(DatasetPlan::new(1, 0).is_err());
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = SceneConfig {
            occlusion: 1.5,
            ..SceneConfig::default()
        };
        assert!(generate_scene(&cfg, 0).is_err());
    }
}
