//! Row-major 2-D grids and connectivity primitives.
//!
//! Coordinates are `(row, col)` with row 0 at the top. Vector fields store
//! `(dy, dx)` pairs.

use crate::error::{Error, Result};

/// Pixel connectivity for region labelling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Connectivity {
    #[default]
    Four,
    Eight,
}

impl Connectivity {
    pub fn offsets(self) -> &'static [(isize, isize)] {
        match self {
            Connectivity::Four => &[(-1, 0), (0, -1), (0, 1), (1, 0)],
            Connectivity::Eight => &[
                (-1, -1),
                (-1, 0),
                (-1, 1),
                (0, -1),
                (0, 1),
                (1, -1),
                (1, 0),
                (1, 1),
            ],
        }
    }
}

fn check_len(width: usize, height: usize, len: usize, per_pixel: usize) -> Result<()> {
    if width.checked_mul(height).and_then(|n| n.checked_mul(per_pixel)) != Some(len) {
        return Err(Error::Dimension(format!(
            "{width}x{height} grid with {per_pixel} value(s) per pixel needs {} values, got {len}",
            width * height * per_pixel
        )));
    }
    Ok(())
}

/// Calls `f(r, c)` for every in-bounds neighbour of `(row, col)`.
#[inline]
pub fn for_each_neighbor(
    width: usize,
    height: usize,
    row: usize,
    col: usize,
    conn: Connectivity,
    mut f: impl FnMut(usize, usize),
) {
    for &(dr, dc) in conn.offsets() {
        let r = row as isize + dr;
        let c = col as isize + dc;
        if r >= 0 && c >= 0 && (r as usize) < height && (c as usize) < width {
            f(r as usize, c as usize);
        }
    }
}

/// Per-pixel non-negative ids; 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    width: usize,
    height: usize,
    data: Vec<u32>,
}

impl LabelMap {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<u32>) -> Result<Self> {
        check_len(width, height, data.len(), 1)?;
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[u32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<u32> {
        self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> u32 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: u32) {
        self.data[row * self.width + col] = value;
    }

    pub fn max_id(&self) -> u32 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    /// Sorted distinct nonzero ids.
    pub fn ids(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.data.iter().copied().filter(|&v| v != 0).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Pixel count per id, indexed by id (index 0 counts background).
    pub fn areas(&self) -> Vec<usize> {
        let mut areas = vec![0usize; self.max_id() as usize + 1];
        for &v in &self.data {
            areas[v as usize] += 1;
        }
        areas
    }

    pub fn mask_of(&self, id: u32) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| v == id).collect(),
        }
    }

    pub fn foreground(&self) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| v != 0).collect(),
        }
    }

    pub fn same_dims<T: Dims>(&self, other: &T) -> bool {
        self.width == other.dims().0 && self.height == other.dims().1
    }
}

/// Binary per-pixel mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![false; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        check_len(width, height, data.len(), 1)?;
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Builds a mask from 0/1 values, rejecting anything else.
    pub fn from_binary(width: usize, height: usize, values: &[u32]) -> Result<Self> {
        check_len(width, height, values.len(), 1)?;
        let data = values
            .iter()
            .map(|&v| match v {
                0 => Ok(false),
                1 => Ok(true),
                other => Err(Error::Input(format!("mask value {other} is not 0 or 1"))),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [bool] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> bool {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: bool) {
        self.data[row * self.width + col] = value;
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn intersection_count(&self, other: &Mask) -> usize {
        self.data
            .iter()
            .zip(&other.data)
            .filter(|(&a, &b)| a && b)
            .count()
    }

    pub fn to_label_map(&self) -> LabelMap {
        LabelMap {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&b| b as u32).collect(),
        }
    }
}

/// Per-pixel real values.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarField {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ScalarField {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        check_len(width, height, data.len(), 1)?;
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Input(format!("non-finite value {v} in scalar field")));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.width + col] = value;
    }
}

/// Per-pixel `(dy, dx)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorField {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl VectorField {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; 2 * width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        check_len(width, height, data.len(), 2)?;
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> (f64, f64) {
        let i = 2 * (row * self.width + col);
        (self.data[i], self.data[i + 1])
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, v: (f64, f64)) {
        let i = 2 * (row * self.width + col);
        self.data[i] = v.0;
        self.data[i + 1] = v.1;
    }
}

/// 8-bit RGB image, row-major interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rgb8Image {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl Rgb8Image {
    pub fn new(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; 3 * width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        check_len(width, height, data.len(), 3)?;
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> [u8; 3] {
        let i = 3 * (row * self.width + col);
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, rgb: [u8; 3]) {
        let i = 3 * (row * self.width + col);
        self.data[i..i + 3].copy_from_slice(&rgb);
    }
}

/// Anything with `(width, height)`.
pub trait Dims {
    fn dims(&self) -> (usize, usize);
}

macro_rules! impl_dims {
    ($($t:ty),*) => {
        $(impl Dims for $t {
            fn dims(&self) -> (usize, usize) {
                (self.width, self.height)
            }
        })*
    };
}

impl_dims!(LabelMap, Mask, ScalarField, VectorField, Rgb8Image);

pub fn ensure_same_dims(a: &impl Dims, b: &impl Dims, what: &str) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::Dimension(format!(
            "{what}: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    Ok(())
}

struct DisjointSet {
    parent: Vec<u32>,
}

impl DisjointSet {
    fn with_capacity(n: usize) -> Self {
        Self {
            parent: Vec::with_capacity(n),
        }
    }

    fn make(&mut self) -> u32 {
        let id = self.parent.len() as u32;
        self.parent.push(id);
        id
    }

    fn find(&mut self, mut x: u32) -> u32 {
        while self.parent[x as usize] != x {
            let grand = self.parent[self.parent[x as usize] as usize];
            self.parent[x as usize] = grand;
            x = grand;
        }
        x
    }

    fn union(&mut self, a: u32, b: u32) {
        let ra = self.find(a);
        let rb = self.find(b);
        if ra != rb {
            // Keep the older provisional label as root.
            let (lo, hi) = if ra < rb { (ra, rb) } else { (rb, ra) };
            self.parent[hi as usize] = lo;
        }
    }
}

/// Labels maximal connected foreground regions.
///
/// Two-pass union-find labelling. Final ids start at 1 and follow the raster
/// order of each component's first pixel.
pub fn connected_components(mask: &Mask, conn: Connectivity) -> LabelMap {
    let (w, h) = (mask.width, mask.height);
    let mut provisional = vec![u32::MAX; w * h];
    let mut sets = DisjointSet::with_capacity(64);

    // Already-visited neighbours in raster order.
    let back: &[(isize, isize)] = match conn {
        Connectivity::Four => &[(-1, 0), (0, -1)],
        Connectivity::Eight => &[(-1, -1), (-1, 0), (-1, 1), (0, -1)],
    };

    for r in 0..h {
        for c in 0..w {
            if !mask.data[r * w + c] {
                continue;
            }
            let mut label = u32::MAX;
            for &(dr, dc) in back {
                let nr = r as isize + dr;
                let nc = c as isize + dc;
                if nr < 0 || nc < 0 || nc as usize >= w {
                    continue;
                }
                let n = provisional[nr as usize * w + nc as usize];
                if n == u32::MAX {
                    continue;
                }
                if label == u32::MAX {
                    label = n;
                } else if label != n {
                    sets.union(label, n);
                }
            }
            if label == u32::MAX {
                label = sets.make();
            }
            provisional[r * w + c] = label;
        }
    }

    let mut final_ids = vec![0u32; sets.parent.len()];
    let mut next = 0u32;
    let mut out = vec![0u32; w * h];
    for (i, &p) in provisional.iter().enumerate() {
        if p == u32::MAX {
            continue;
        }
        let root = sets.find(p) as usize;
        if final_ids[root] == 0 {
            next += 1;
            final_ids[root] = next;
        }
        out[i] = final_ids[root];
    }
    LabelMap {
        width: w,
        height: h,
        data: out,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_mask_has_no_components() {
        let m = Mask::new(4, 4);
        let cc = connected_components(&m, Connectivity::Four);
        assert_eq!(cc.max_id(), 0);
    }

    #[test]
    fn diagonal_pixels_depend_on_connectivity() {
        let m = Mask::from_binary(2, 2, &[1, 0, 0, 1]).unwrap();
        assert_eq!(connected_components(&m, Connectivity::Four).max_id(), 2);
        assert_eq!(connected_components(&m, Connectivity::Eight).max_id(), 1);
    }

    #[test]
    fn ids_follow_raster_order() {
        // U shape: the right arm is seen first in row 0 but merges below.
        #[rustfmt::skip]
        let m = Mask::from_binary(5, 3, &[
            1, 0, 1, 0, 1,
            1, 0, 1, 0, 0,
            1, 1, 1, 0, 1,
        ]).unwrap();
        let cc = connected_components(&m, Connectivity::Four);
        assert_eq!(cc.get(0, 0), 1);
        assert_eq!(cc.get(0, 2), 1);
        assert_eq!(cc.get(0, 4), 2);
        assert_eq!(cc.get(2, 4), 3);
    }

    #[test]
    fn non_binary_mask_rejected() {
        assert!(Mask::from_binary(2, 1, &[0, 2]).is_err());
    }

    #[test]
    fn length_checked() {
        assert!(LabelMap::from_vec(3, 3, vec![0; 8]).is_err());
        assert!(VectorField::from_vec(2, 2, vec![0.0; 4]).is_err());
        assert!(ScalarField::from_vec(1, 1, vec![f64::NAN]).is_err());
    }
}
