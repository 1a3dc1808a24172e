//! Instance extraction from an energy-bin map: single-level cut, circular
//! dilation back to full extent, hole filling and small-instance removal.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{
    connected_components, ensure_same_dims, for_each_neighbor, Connectivity, LabelMap, Mask,
    ScalarField,
};
use crate::io;
use crate::metrics::{iou, GtInstance};

/// Default confidence when no confidence field is supplied.
pub const DEFAULT_CONFIDENCE: f64 = 0.5;

/// Reference image area for the default minimum instance area.
const REFERENCE_AREA: f64 = 64.0 * 64.0;

/// How each semantic class is cut and cleaned up.
#[derive(Debug, Clone, PartialEq)]
pub struct CutPolicy {
    /// Cut level per semantic class id; classes not listed use `default_level`.
    pub levels: BTreeMap<u32, u32>,
    pub default_level: u32,
    /// Dilation radius in pixels for each cut level (index = level).
    pub radius_by_level: Vec<u32>,
    pub min_area: usize,
}

impl CutPolicy {
    /// Class 1 ("small") cut at level 1, class 2 ("large") at level 2, with
    /// the minimum area scaled from 16 px at 64×64.
    pub fn for_image(width: usize, height: usize) -> Self {
        Self {
            levels: BTreeMap::from([(1, 1), (2, 2)]),
            default_level: 1,
            radius_by_level: vec![0, 2, 4],
            min_area: scaled_min_area(width, height),
        }
    }

    /// Every class cut at the same level.
    pub fn uniform(level: u32, width: usize, height: usize) -> Self {
        Self {
            levels: BTreeMap::new(),
            default_level: level,
            ..Self::for_image(width, height)
        }
    }

    pub fn level_for(&self, class_id: u32) -> u32 {
        self.levels.get(&class_id).copied().unwrap_or(self.default_level)
    }

    pub fn radius_for(&self, level: u32) -> Result<u32> {
        self.radius_by_level
            .get(level as usize)
            .copied()
            .ok_or_else(|| Error::Input(format!("no dilation radius configured for level {level}")))
    }
}

pub fn scaled_min_area(width: usize, height: usize) -> usize {
    (16.0 * (width * height) as f64 / REFERENCE_AREA).round() as usize
}

/// One proposed instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Instance {
    pub mask: Mask,
    pub class_id: u32,
    pub confidence: f64,
    /// Ranking key; sorted descending when scoring. Starts equal to
    /// `confidence`.
    pub score: f64,
}

impl Instance {
    pub fn area(&self) -> usize {
        self.mask.count()
    }
}

/// Disjoint instances for one image, in ranking order.
pub type InstanceSet = Vec<Instance>;

/// `bin >= level`.
pub fn energy_cut(energy: &LabelMap, level: u32, k: u32) -> Result<Mask> {
    if level == 0 || level >= k {
        return Err(Error::Input(format!("cut level {level} outside 1..{}", k - 1)));
    }
    Mask::from_vec(
        energy.width(),
        energy.height(),
        energy.data().iter().map(|&b| b >= level).collect(),
    )
}

/// Integer offsets within `radius`, ordered by squared length.
fn disk_offsets(radius: u32) -> Vec<(i64, i64, i64)> {
    let r = radius as i64;
    let mut offsets = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            let d2 = dy * dy + dx * dx;
            if d2 <= r * r {
                offsets.push((d2, dy, dx));
            }
        }
    }
    offsets.sort();
    offsets
}

/// Grows every label by a disk of `radius`. A pixel goes to the nearest
/// labelled pixel within the radius, ties to the smaller id, so distinct
/// labels never merge.
pub fn dilate_labels(labels: &LabelMap, radius: u32) -> LabelMap {
    if radius == 0 {
        return labels.clone();
    }
    let (w, h) = (labels.width() as i64, labels.height() as i64);
    let offsets = disk_offsets(radius);
    let mut out = LabelMap::new(labels.width(), labels.height());
    for r in 0..h {
        for c in 0..w {
            let mut best: Option<(i64, u32)> = None;
            for &(d2, dy, dx) in &offsets {
                if let Some((bd, _)) = best {
                    if d2 > bd {
                        break;
                    }
                }
                let (qr, qc) = (r + dy, c + dx);
                if qr < 0 || qc < 0 || qr >= h || qc >= w {
                    continue;
                }
                let l = labels.get(qr as usize, qc as usize);
                if l != 0 && best.is_none_or(|(_, bl)| l < bl) {
                    best = Some((d2, l));
                }
            }
            if let Some((_, l)) = best {
                out.set(r as usize, c as usize, l);
            }
        }
    }
    out
}

/// Sets background regions that are not 4-connected to the image border.
pub fn fill_holes(mask: &Mask) -> Mask {
    let (w, h) = (mask.width(), mask.height());
    let mut reached = vec![false; w * h];
    let mut queue = VecDeque::new();
    for r in 0..h {
        for c in 0..w {
            let border = r == 0 || c == 0 || r == h - 1 || c == w - 1;
            if border && !mask.get(r, c) && !reached[r * w + c] {
                reached[r * w + c] = true;
                queue.push_back(r * w + c);
            }
        }
    }
    while let Some(p) = queue.pop_front() {
        for_each_neighbor(w, h, p / w, p % w, Connectivity::Four, |r, c| {
            let q = r * w + c;
            if !mask.get(r, c) && !reached[q] {
                reached[q] = true;
                queue.push_back(q);
            }
        });
    }
    let data = reached.iter().map(|&outside| !outside).collect();
    Mask::from_vec(w, h, data).expect("same dimensions")
}

/// Runs cut, labelling, dilation, hole filling and area filtering for each
/// semantic class present in `semseg`.
///
/// Instances come out grouped by ascending class id, each group in raster
/// order of its component's first pixel. Confidence is the mean of
/// `confidence` over the final mask when given, else [`DEFAULT_CONFIDENCE`].
pub fn extract_instances(
    energy: &LabelMap,
    semseg: &LabelMap,
    k: u32,
    policy: &CutPolicy,
    confidence: Option<&ScalarField>,
) -> Result<InstanceSet> {
    ensure_same_dims(energy, semseg, "extract_instances energy vs semseg")?;
    if let Some(conf) = confidence {
        ensure_same_dims(energy, conf, "extract_instances energy vs confidence")?;
    }
    let (w, h) = (energy.width(), energy.height());
    let mut claimed = vec![false; w * h];
    let mut instances = Vec::new();

    for class_id in semseg.ids() {
        let level = policy.level_for(class_id);
        let radius = policy.radius_for(level)?;
        let cut = energy_cut(energy, level, k)?;
        let in_class: Vec<bool> = semseg.data().iter().map(|&s| s == class_id).collect();
        let seeds = Mask::from_vec(
            w,
            h,
            cut.data().iter().zip(&in_class).map(|(&a, &b)| a && b).collect(),
        )?;
        let components = connected_components(&seeds, Connectivity::Four);
        let mut grown = dilate_labels(&components, radius);
        for (g, &inside) in grown.data_mut().iter_mut().zip(&in_class) {
            if !inside {
                *g = 0;
            }
        }
        for id in 1..=components.max_id() {
            let filled = fill_holes(&grown.mask_of(id));
            let data: Vec<bool> = filled
                .data()
                .iter()
                .zip(grown.data())
                .zip(&in_class)
                .zip(&claimed)
                .map(|(((&f, &g), &inside), &taken)| {
                    f && inside && !taken && (g == id || g == 0)
                })
                .collect();
            let mask = Mask::from_vec(w, h, data)?;
            let area = mask.count();
            if area == 0 || area < policy.min_area {
                continue;
            }
            for (t, &m) in claimed.iter_mut().zip(mask.data()) {
                *t |= m;
            }
            let conf = match confidence {
                Some(field) => {
                    let sum: f64 = field
                        .data()
                        .iter()
                        .zip(mask.data())
                        .filter(|(_, &m)| m)
                        .map(|(&v, _)| v)
                        .sum();
                    sum / area as f64
                }
                None => DEFAULT_CONFIDENCE,
            };
            instances.push(Instance {
                mask,
                class_id,
                confidence: conf,
                score: conf,
            });
        }
    }
    Ok(instances)
}

/// Ordering used before scoring.
#[derive(Debug, Clone, Copy)]
pub enum RankMode<'a> {
    Random { seed: u64 },
    Confidence,
    /// Best IoU against any same-class ground-truth instance.
    Oracle { gt: &'a [GtInstance] },
}

/// Assigns each instance its ranking key and sorts descending (stable).
pub fn rank_instances(instances: &[Instance], mode: RankMode<'_>) -> InstanceSet {
    let mut out = instances.to_vec();
    match mode {
        RankMode::Random { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for inst in &mut out {
                inst.score = rng.random::<f64>();
            }
        }
        RankMode::Confidence => {
            for inst in &mut out {
                inst.score = inst.confidence;
            }
        }
        RankMode::Oracle { gt } => {
            for inst in &mut out {
                inst.score = gt
                    .iter()
                    .filter(|g| g.class_id == inst.class_id)
                    .map(|g| iou(&inst.mask, &g.mask).unwrap_or(0.0))
                    .fold(0.0, f64::max);
            }
        }
    }
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out
}

/// Writes the instance id map (ids 1.. in set order) and a sidecar with one
/// `id class confidence area` line per instance.
pub fn write_instances(
    instances: &[Instance],
    width: usize,
    height: usize,
    png_path: impl AsRef<Path>,
    sidecar_path: impl AsRef<Path>,
) -> Result<()> {
    let mut ids = LabelMap::new(width, height);
    let mut text = String::from("# id class confidence area\n");
    for (i, inst) in instances.iter().enumerate() {
        let id = i as u32 + 1;
        for (o, &m) in ids.data_mut().iter_mut().zip(inst.mask.data()) {
            if m {
                *o = id;
            }
        }
        writeln!(text, "{id} {} {:.9} {}", inst.class_id, inst.confidence, inst.area()).unwrap();
    }
    io::write_label_png(&ids, png_path)?;
    let sidecar = sidecar_path.as_ref();
    std::fs::write(sidecar, text).map_err(|e| Error::io(sidecar, e))
}

pub fn read_instances(
    png_path: impl AsRef<Path>,
    sidecar_path: impl AsRef<Path>,
) -> Result<InstanceSet> {
    let ids = io::read_label_png(png_path)?;
    let sidecar = sidecar_path.as_ref();
    let text = std::fs::read_to_string(sidecar).map_err(|e| Error::io(sidecar, e))?;
    let bad = |line: usize, msg: &str| Error::Format {
        path: sidecar.to_path_buf(),
        message: format!("line {line}: {msg}"),
    };
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(bad(n + 1, "expected `id class confidence area`"));
        }
        let id: u32 = fields[0].parse().map_err(|_| bad(n + 1, "bad id"))?;
        let class_id: u32 = fields[1].parse().map_err(|_| bad(n + 1, "bad class"))?;
        let confidence: f64 = fields[2].parse().map_err(|_| bad(n + 1, "bad confidence"))?;
        let area: usize = fields[3].parse().map_err(|_| bad(n + 1, "bad area"))?;
        let mask = ids.mask_of(id);
        if mask.count() != area {
            return Err(bad(n + 1, "area does not match the id map"));
        }
        out.push(Instance {
            mask,
            class_id,
            confidence,
            score: confidence,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cut_thresholds() {
        let e = LabelMap::from_vec(3, 1, vec![0, 1, 2]).unwrap();
        assert_eq!(energy_cut(&e, 1, 16).unwrap().data(), &[false, true, true]);
        assert_eq!(energy_cut(&e, 2, 16).unwrap().data(), &[false, false, true]);
        assert_eq!(energy_cut(&LabelMap::new(3, 1), 1, 16).unwrap().count(), 0);
        assert!(energy_cut(&e, 16, 16).is_err());
        assert!(energy_cut(&e, 0, 16).is_err());
    }

    #[test]
    fn dilation_disk_has_13_pixels() {
        let mut l = LabelMap::new(9, 9);
        l.set(4, 4, 1);
        assert_eq!(dilate_labels(&l, 2).foreground().count(), 13);
        assert_eq!(dilate_labels(&l, 0), l);
    }

    #[test]
    fn contested_pixel_goes_to_smaller_id() {
        let mut l = LabelMap::new(7, 1);
        l.set(0, 1, 5);
        l.set(0, 4, 3);
        let d = dilate_labels(&l, 2);
        // Column 2 is nearer to 5; column 3 is nearer to 3.
        assert_eq!(d.data(), &[5, 5, 5, 3, 3, 3, 3]);
        let mut l = LabelMap::new(5, 1);
        l.set(0, 0, 5);
        l.set(0, 4, 3);
        assert_eq!(dilate_labels(&l, 2).get(0, 2), 3);
    }

    #[test]
    fn ring_is_filled() {
        let mut m = Mask::new(7, 7);
        for r in 1..6 {
            for c in 1..6 {
                if r == 1 || r == 5 || c == 1 || c == 5 {
                    m.set(r, c, true);
                }
            }
        }
        let f = fill_holes(&m);
        assert_eq!(f.count(), 25);
        assert_eq!(fill_holes(&f), f);
    }

    #[test]
    fn open_bay_not_filled() {
        let mut m = Mask::new(5, 5);
        for r in 0..5 {
            m.set(r, 0, true);
            m.set(r, 2, true);
        }
        m.set(4, 1, true);
        // Column 1 rows 0..4 open to the top border.
        assert_eq!(fill_holes(&m), m);
    }

    #[test]
    fn all_background_energy_gives_nothing() {
        let e = LabelMap::new(16, 16);
        let s = LabelMap::from_vec(16, 16, vec![1; 256]).unwrap();
        let set = extract_instances(&e, &s, 16, &CutPolicy::for_image(16, 16), None).unwrap();
        assert!(set.is_empty());
    }

    #[test]
    fn confidence_mode_is_stable() {
        let mk = |c: f64| Instance {
            mask: Mask::new(2, 2),
            class_id: 1,
            confidence: c,
            score: 0.0,
        };
        let set = vec![mk(0.5), mk(0.5), mk(0.7)];
        let ranked = rank_instances(&set, RankMode::Confidence);
        assert_eq!(ranked[0].confidence, 0.7);
        assert_eq!(ranked[1], Instance { score: 0.5, ..set[0].clone() });
    }

    #[test]
    fn random_mode_reproducible() {
        let set: Vec<Instance> = (0..6)
            .map(|i| Instance {
                mask: Mask::new(2, 2),
                class_id: i,
                confidence: 0.5,
                score: 0.5,
            })
            .collect();
        let a = rank_instances(&set, RankMode::Random { seed: 9 });
        let b = rank_instances(&set, RankMode::Random { seed: 9 });
        assert_eq!(a, b);
    }
}
