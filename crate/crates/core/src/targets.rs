//! Supervision targets derived from an instance label map: the
//! instance-aware Euclidean distance transform, the unit direction field
//! pointing away from the nearest boundary, the discretized energy bins and
//! the per-pixel loss weights.
//!
//! Every pixel outside the image is treated as lying outside every instance,
//! so instances touching the border still get finite distances.

use crate::error::{Error, Result};
use crate::grid::{ensure_same_dims, LabelMap, ScalarField, VectorField};

/// Static edge table used when a dataset has no interior pixel deeper than
/// the second edge.
pub const FALLBACK_EDGES: [f64; 15] = [
    2.0, 4.0, 6.0, 8.0, 10.0, 13.0, 16.0, 20.0, 24.0, 29.0, 35.0, 42.0, 50.0, 60.0, 72.0,
];

pub const DEFAULT_BINS: usize = 16;

/// Distance thresholds defining the energy bins.
///
/// Bin 0 holds `d <= edges[0]`, bin `i` holds `edges[i-1] < d <= edges[i]`,
/// and the last bin holds `d > edges[k-2]`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinSpec {
    edges: Vec<f64>,
}

impl BinSpec {
    pub fn new(edges: Vec<f64>) -> Result<Self> {
        if edges.is_empty() {
            return Err(Error::Input("a bin spec needs at least one edge (K >= 2)".into()));
        }
        if edges[0] != 2.0 {
            return Err(Error::Input(format!(
                "first bin edge must be 2 pixels, got {}",
                edges[0]
            )));
        }
        if let Some(w) = edges.windows(2).find(|w| !(w[0] < w[1])) {
            return Err(Error::Input(format!(
                "bin edges must be strictly increasing ({} then {})",
                w[0], w[1]
            )));
        }
        if edges.iter().any(|e| !e.is_finite()) {
            return Err(Error::Input("bin edges must be finite".into()));
        }
        Ok(Self { edges })
    }

    pub fn fallback() -> Self {
        Self {
            edges: FALLBACK_EDGES.to_vec(),
        }
    }

    pub fn k(&self) -> usize {
        self.edges.len() + 1
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    #[inline]
    pub fn bin_of(&self, distance: f64) -> u32 {
        self.edges.partition_point(|&t| distance > t) as u32
    }
}

/// All supervision signals for one image.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetBundle {
    pub distance: ScalarField,
    pub direction: VectorField,
    pub energy: LabelMap,
    pub weights: ScalarField,
}

impl TargetBundle {
    pub fn compute(instances: &LabelMap, bins: &BinSpec) -> Self {
        let sq = squared_distances(instances);
        let distance = to_distance(instances, &sq);
        let direction = directions_from(instances, &sq);
        let energy = discretize_energy(&distance, instances, bins).expect("same dimensions");
        let weights = instance_weights(instances);
        Self {
            distance,
            direction,
            energy,
            weights,
        }
    }
}

/// Exact squared distance (integer) from each foreground pixel to the nearest
/// pixel outside its instance; 0 on background.
pub fn squared_distances(labels: &LabelMap) -> Vec<u64> {
    let (w, h) = (labels.width(), labels.height());
    let mut out = vec![0u64; w * h];
    let boxes = bounding_boxes(labels);
    for (id, bbox) in boxes.iter().enumerate() {
        if let Some(b) = bbox {
            instance_edt(labels, id as u32, *b, &mut out);
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
struct BBox {
    r0: usize,
    r1: usize,
    c0: usize,
    c1: usize,
}

fn bounding_boxes(labels: &LabelMap) -> Vec<Option<BBox>> {
    let mut boxes: Vec<Option<BBox>> = vec![None; labels.max_id() as usize + 1];
    for r in 0..labels.height() {
        for c in 0..labels.width() {
            let id = labels.get(r, c) as usize;
            if id == 0 {
                continue;
            }
            let b = boxes[id].get_or_insert(BBox {
                r0: r,
                r1: r,
                c0: c,
                c1: c,
            });
            b.r0 = b.r0.min(r);
            b.r1 = b.r1.max(r);
            b.c0 = b.c0.min(c);
            b.c1 = b.c1.max(c);
        }
    }
    boxes
}

/// Two-pass exact EDT restricted to the instance's bounding box grown by one
/// pixel. The grown ring lies entirely outside the instance, so the nearest
/// outside pixel of any instance pixel is always inside this window.
fn instance_edt(labels: &LabelMap, id: u32, b: BBox, out: &mut [u64]) {
    let (w, h) = (labels.width() as isize, labels.height() as isize);
    let wr0 = b.r0 as isize - 1;
    let wc0 = b.c0 as isize - 1;
    let wh = (b.r1 - b.r0 + 3) as usize;
    let ww = (b.c1 - b.c0 + 3) as usize;

    let inside = |wr: usize, wc: usize| -> bool {
        let r = wr0 + wr as isize;
        let c = wc0 + wc as isize;
        r >= 0 && c >= 0 && r < h && c < w && labels.get(r as usize, c as usize) == id
    };

    // Column pass: squared distance to the nearest outside pixel in the column.
    let mut col_sq = vec![0u64; wh * ww];
    let mut dist = vec![0u64; wh];
    for wc in 0..ww {
        let mut last: Option<usize> = None;
        for wr in 0..wh {
            if !inside(wr, wc) {
                last = Some(wr);
            }
            dist[wr] = last.map_or(u64::MAX, |l| (wr - l) as u64);
        }
        let mut next: Option<usize> = None;
        for wr in (0..wh).rev() {
            if !inside(wr, wc) {
                next = Some(wr);
            }
            if let Some(n) = next {
                dist[wr] = dist[wr].min((n - wr) as u64);
            }
            col_sq[wr * ww + wc] = dist[wr] * dist[wr];
        }
    }

    // Row pass: lower envelope of parabolas.
    let mut f = vec![0u64; ww];
    let mut row_out = vec![0u64; ww];
    let mut v = vec![0usize; ww];
    let mut z = vec![0f64; ww + 1];
    for wr in 1..wh - 1 {
        f.copy_from_slice(&col_sq[wr * ww..(wr + 1) * ww]);
        lower_envelope(&f, &mut row_out, &mut v, &mut z);
        let r = (wr0 + wr as isize) as usize;
        for wc in 1..ww - 1 {
            if inside(wr, wc) {
                let c = (wc0 + wc as isize) as usize;
                out[r * labels.width() + c] = row_out[wc];
            }
        }
    }
}

fn lower_envelope(f: &[u64], d: &mut [u64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let val = |q: usize| f[q] as f64 + (q * q) as f64;
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let intersect = |q: usize, p: usize| (val(q) - val(p)) / (2.0 * (q as f64 - p as f64));
    for q in 1..n {
        // z[0] is -inf, so this stops at k == 0 at the latest.
        let mut s = intersect(q, v[k]);
        while s <= z[k] {
            k -= 1;
            s = intersect(q, v[k]);
        }
        k += 1;
        v[k] = q;
        z[k] = s;
        z[k + 1] = f64::INFINITY;
    }
    k = 0;
    for q in 0..n {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let dq = q.abs_diff(p) as u64;
        d[q] = dq * dq + f[p];
    }
}

fn to_distance(labels: &LabelMap, sq: &[u64]) -> ScalarField {
    let data = sq.iter().map(|&s| (s as f64).sqrt()).collect();
    ScalarField::from_vec(labels.width(), labels.height(), data).expect("same dimensions")
}

/// Euclidean distance from each instance pixel to the nearest pixel outside
/// its instance (including the virtual ring around the image); 0 on
/// background.
pub fn distance_transform(labels: &LabelMap) -> ScalarField {
    to_distance(labels, &squared_distances(labels))
}

/// Unit vectors `(dy, dx)` pointing from the nearest outside pixel toward each
/// instance pixel; `(0, 0)` on background.
///
/// Among equally near outside pixels, pixels of another instance are
/// preferred, then in-image background, then the virtual border ring; the
/// remaining ties go to the smallest `(row, col)`.
pub fn direction_targets(labels: &LabelMap) -> VectorField {
    directions_from(labels, &squared_distances(labels))
}

fn isqrt(n: u64) -> u64 {
    let mut r = (n as f64).sqrt() as u64;
    while r * r > n {
        r -= 1;
    }
    while (r + 1) * (r + 1) <= n {
        r += 1;
    }
    r
}

fn directions_from(labels: &LabelMap, sq: &[u64]) -> VectorField {
    let (w, h) = (labels.width() as i64, labels.height() as i64);
    let mut out = VectorField::new(labels.width(), labels.height());
    for r in 0..h {
        for c in 0..w {
            let id = labels.get(r as usize, c as usize);
            if id == 0 {
                continue;
            }
            let s = sq[(r * w + c) as usize];
            let radius = isqrt(s) as i64;
            let mut best: Option<(u8, i64, i64)> = None;
            for dy in -radius..=radius {
                let rem = s - (dy * dy) as u64;
                let dx = isqrt(rem) as i64;
                if (dx * dx) as u64 != rem {
                    continue;
                }
                for dx in [-dx, dx] {
                    let (qr, qc) = (r + dy, c + dx);
                    let class = if qr < 0 || qc < 0 || qr >= h || qc >= w {
                        if qr < -1 || qc < -1 || qr > h || qc > w {
                            continue;
                        }
                        2
                    } else {
                        match labels.get(qr as usize, qc as usize) {
                            v if v == id => continue,
                            0 => 1,
                            _ => 0,
                        }
                    };
                    let key = (class, qr, qc);
                    if best.is_none_or(|b| key < b) {
                        best = Some(key);
                    }
                }
            }
            let (_, qr, qc) = best.expect("an outside pixel exists at the exact distance");
            let norm = (s as f64).sqrt();
            out.set(
                r as usize,
                c as usize,
                ((r - qr) as f64 / norm, (c - qc) as f64 / norm),
            );
        }
    }
    out
}

/// Maps distances to energy bins; background is bin 0.
pub fn discretize_energy(
    distance: &ScalarField,
    labels: &LabelMap,
    bins: &BinSpec,
) -> Result<LabelMap> {
    ensure_same_dims(distance, labels, "discretize_energy")?;
    let data = distance
        .data()
        .iter()
        .zip(labels.data())
        .map(|(&d, &l)| if l == 0 { 0 } else { bins.bin_of(d) })
        .collect();
    LabelMap::from_vec(labels.width(), labels.height(), data)
}

/// Bin edges with the first two fixed at 2 and 4 and the rest at quantiles of
/// the foreground distances above 4, so the interior bins hold roughly equal
/// pixel counts.
pub fn default_bin_edges(dataset: &[LabelMap], k: usize) -> Result<BinSpec> {
    if dataset.is_empty() {
        return Err(Error::Input("bin edges need a non-empty dataset".into()));
    }
    let mut deep = Vec::new();
    for labels in dataset {
        let d = distance_transform(labels);
        deep.extend(d.data().iter().copied().filter(|&v| v > 4.0));
    }
    bin_edges_from_distances(&deep, k)
}

/// Quantile edges from a sample of foreground distances (values `<= 4` are
/// ignored). Falls back to [`FALLBACK_EDGES`] when nothing exceeds 4.
pub fn bin_edges_from_distances(distances: &[f64], k: usize) -> Result<BinSpec> {
    if k < 4 {
        return Err(Error::Input(format!("quantile binning needs K >= 4, got {k}")));
    }
    let mut deep: Vec<f64> = distances.iter().copied().filter(|&v| v > 4.0).collect();
    if deep.is_empty() {
        if k == DEFAULT_BINS {
            return Ok(BinSpec::fallback());
        }
        let mut edges: Vec<f64> = FALLBACK_EDGES.iter().copied().take(k - 1).collect();
        while edges.len() < k - 1 {
            let last = *edges.last().unwrap();
            edges.push(last + 12.0);
        }
        return BinSpec::new(edges);
    }
    deep.sort_by(f64::total_cmp);
    let n = deep.len();
    let interior_bins = k - 2;
    let mut edges = vec![2.0, 4.0];
    for j in 1..interior_bins {
        let rank = (j * n).div_ceil(interior_bins).max(1);
        let mut edge = deep[rank - 1];
        let prev = *edges.last().unwrap();
        if edge <= prev {
            let next = deep.partition_point(|&v| v <= prev);
            edge = if next < n { deep[next] } else { prev + 1.0 };
        }
        edges.push(edge);
    }
    BinSpec::new(edges)
}

/// `w_p = Z / sqrt(area(instance(p)))`, normalized so the mean over
/// foreground pixels is 1; background is 0.
pub fn instance_weights(labels: &LabelMap) -> ScalarField {
    let areas = labels.areas();
    let fg: usize = areas.iter().skip(1).sum();
    let mut out = ScalarField::new(labels.width(), labels.height());
    if fg == 0 {
        return out;
    }
    let present: Vec<usize> = areas.iter().skip(1).copied().filter(|&a| a > 0).collect();
    // w = fg / (sqrt(a) * sum_j sqrt(a_j)), written so a lone instance gets exactly 1.
    let per_id: Vec<f64> = areas
        .iter()
        .map(|&a| {
            if a == 0 {
                return 0.0;
            }
            let denom: f64 = present.iter().map(|&b| ((a * b) as f64).sqrt()).sum();
            fg as f64 / denom
        })
        .collect();
    for (o, &l) in out.data_mut().iter_mut().zip(labels.data()) {
        if l != 0 {
            *o = per_id[l as usize];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(w: usize, h: usize, rows: &[&[u32]]) -> LabelMap {
        LabelMap::from_vec(w, h, rows.iter().flat_map(|r| r.iter().copied()).collect()).unwrap()
    }

    #[test]
    fn background_is_zero() {
        let d = distance_transform(&LabelMap::new(5, 5));
        assert!(d.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_pixel_instance() {
        let mut l = LabelMap::new(5, 5);
        l.set(2, 2, 1);
        assert_eq!(distance_transform(&l).get(2, 2), 1.0);
    }

    #[test]
    fn square_ring_and_center() {
        let mut l = LabelMap::new(5, 5);
        for r in 1..4 {
            for c in 1..4 {
                l.set(r, c, 1);
            }
        }
        let d = distance_transform(&l);
        assert_eq!(d.get(2, 2), 2.0);
        assert_eq!(d.get(1, 1), 1.0);
        assert_eq!(d.get(1, 2), 1.0);
    }

    #[test]
    fn border_counts_as_outside() {
        let l = LabelMap::from_vec(3, 3, vec![1; 9]).unwrap();
        let d = distance_transform(&l);
        assert_eq!(d.get(1, 1), 2.0);
        assert_eq!(d.get(0, 0), 1.0);
    }

    #[test]
    fn row_directions_point_inward() {
        let l = labels(5, 1, &[&[0, 1, 1, 1, 0]]);
        let u = direction_targets(&l);
        assert_eq!(u.get(0, 1), (0.0, 1.0));
        assert_eq!(u.get(0, 3), (0.0, -1.0));
        assert_eq!(u.get(0, 0), (0.0, 0.0));
    }

    #[test]
    fn abutting_instances_point_apart() {
        let l = labels(
            6,
            3,
            &[&[1, 1, 1, 2, 2, 2], &[1, 1, 1, 2, 2, 2], &[1, 1, 1, 2, 2, 2]],
        );
        let u = direction_targets(&l);
        for r in 0..3 {
            let a = u.get(r, 2);
            let b = u.get(r, 3);
            assert_eq!(a.0 * b.0 + a.1 * b.1, -1.0, "row {r}");
        }
    }

    #[test]
    fn bins_match_thresholds() {
        let bins = BinSpec::fallback();
        assert_eq!(bins.k(), 16);
        assert_eq!(bins.bin_of(2.0), 0);
        assert_eq!(bins.bin_of(3.0), 1);
        assert_eq!(bins.bin_of(4.0), 1);
        assert_eq!(bins.bin_of(5.0), 2);
        assert_eq!(bins.bin_of(1000.0), 15);
    }

    #[test]
    fn bin_spec_validation() {
        assert!(BinSpec::new(vec![]).is_err());
        assert!(BinSpec::new(vec![3.0, 4.0]).is_err());
        assert!(BinSpec::new(vec![2.0, 2.0]).is_err());
        assert!(BinSpec::new(vec![2.0]).is_ok());
    }

    #[test]
    fn shallow_dataset_uses_fallback() {
        let mut l = LabelMap::new(8, 8);
        for r in 2..5 {
            for c in 2..5 {
                l.set(r, c, 1);
            }
        }
        assert_eq!(default_bin_edges(&[l], 16).unwrap(), BinSpec::fallback());
        assert!(default_bin_edges(&[], 16).is_err());
    }

    #[test]
    fn weights_single_instance_are_one() {
        let mut l = LabelMap::new(4, 4);
        l.set(0, 0, 3);
        l.set(0, 1, 3);
        let w = instance_weights(&l);
        assert_eq!(w.get(0, 0), 1.0);
        assert_eq!(w.get(0, 1), 1.0);
        assert_eq!(w.get(3, 3), 0.0);
    }

    #[test]
    fn weights_scale_with_inverse_sqrt_area() {
        let mut l = LabelMap::new(30, 20);
        for r in 0..10 {
            for c in 0..10 {
                l.set(r, c, 1);
            }
        }
        for r in 0..20 {
            for c in 10..30 {
                l.set(r, c, 2);
            }
        }
        let w = instance_weights(&l);
        let ratio = w.get(0, 0) / w.get(0, 10);
        assert!((ratio - 2.0).abs() < 1e-12);
        let fg_mean: f64 = w.data().iter().sum::<f64>() / 500.0;
        assert!((fg_mean - 1.0).abs() < 1e-12);
    }

    #[test]
    fn discretize_rejects_mismatched_dims() {
        let d = ScalarField::new(3, 3);
        let l = LabelMap::new(3, 4);
        assert!(discretize_energy(&d, &l, &BinSpec::fallback()).is_err());
    }
}
