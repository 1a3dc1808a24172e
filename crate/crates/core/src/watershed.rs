//! Classical flooding watershed (Vincent–Soille style ordered flooding).
//!
//! Used as the baseline that over-segments noisy gradient images.

use std::collections::VecDeque;

use crate::error::{Error, Result};
use crate::grid::{for_each_neighbor, Connectivity, LabelMap, Mask, Rgb8Image, ScalarField};

const UNSET: u32 = u32::MAX;
const RIDGE: u32 = u32::MAX - 1;

#[derive(Debug, Clone, PartialEq)]
pub struct WatershedResult {
    /// Basin id per pixel, starting at 1; 0 marks ridge pixels.
    pub basins: LabelMap,
    pub ridge_mask: Mask,
    pub basin_count: usize,
}

/// Floods `energy` from its regional minima in ascending order.
///
/// Within one energy level, pixels are reached in order of their geodesic
/// distance (inside the level) from already-flooded pixels. A pixel touching
/// exactly one basin joins it; a pixel touching two or more basins, or only
/// ridge pixels, becomes a ridge. Level pixels not reachable from any flooded
/// pixel form new basins, one per 4-connected plateau, numbered in raster
/// order of their first pixel.
pub fn watershed_flood(energy: &ScalarField) -> Result<WatershedResult> {
    if let Some(v) = energy.data().iter().find(|v| !v.is_finite()) {
        return Err(Error::Input(format!("energy contains non-finite value {v}")));
    }
    let (w, h) = (energy.width(), energy.height());
    let n = w * h;
    let values = energy.data();

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));

    let mut label = vec![UNSET; n];
    // Level index each pixel belongs to, used for membership tests.
    let mut level_of = vec![usize::MAX; n];
    let mut queued = vec![false; n];
    let mut next_basin = 0u32;

    let mut start = 0;
    let mut level = 0usize;
    while start < n {
        let v = values[order[start]];
        let mut end = start;
        while end < n && values[order[end]] == v {
            level_of[order[end]] = level;
            end += 1;
        }
        let members = &order[start..end];

        let mut frontier: Vec<usize> = Vec::new();
        for &p in members {
            let mut touches = false;
            for_each_neighbor(w, h, p / w, p % w, Connectivity::Four, |r, c| {
                touches |= label[r * w + c] != UNSET;
            });
            if touches {
                queued[p] = true;
                frontier.push(p);
            }
        }

        let mut decided = Vec::new();
        while !frontier.is_empty() {
            decided.clear();
            for &p in &frontier {
                let mut first = UNSET;
                let mut multiple = false;
                for_each_neighbor(w, h, p / w, p % w, Connectivity::Four, |r, c| {
                    let l = label[r * w + c];
                    if l == UNSET || l == RIDGE {
                        return;
                    }
                    if first == UNSET {
                        first = l;
                    } else if first != l {
                        multiple = true;
                    }
                });
                let l = if first == UNSET || multiple { RIDGE } else { first };
                decided.push(l);
            }
            for (&p, &l) in frontier.iter().zip(&decided) {
                label[p] = l;
            }
            let mut next = Vec::new();
            for &p in &frontier {
                for_each_neighbor(w, h, p / w, p % w, Connectivity::Four, |r, c| {
                    let q = r * w + c;
                    if level_of[q] == level && label[q] == UNSET && !queued[q] {
                        queued[q] = true;
                        next.push(q);
                    }
                });
            }
            next.sort_unstable();
            frontier = next;
        }

        // Unreached plateau pixels are new minima.
        let mut queue = VecDeque::new();
        for &p in members {
            if label[p] != UNSET {
                continue;
            }
            next_basin += 1;
            label[p] = next_basin;
            queue.push_back(p);
            while let Some(q) = queue.pop_front() {
                for_each_neighbor(w, h, q / w, q % w, Connectivity::Four, |r, c| {
                    let s = r * w + c;
                    if level_of[s] == level && label[s] == UNSET {
                        label[s] = next_basin;
                        queue.push_back(s);
                    }
                });
            }
        }

        start = end;
        level += 1;
    }

    let ridge: Vec<bool> = label.iter().map(|&l| l == RIDGE).collect();
    let basins: Vec<u32> = label.iter().map(|&l| if l == RIDGE { 0 } else { l }).collect();
    Ok(WatershedResult {
        basins: LabelMap::from_vec(w, h, basins)?,
        ridge_mask: Mask::from_vec(w, h, ridge)?,
        basin_count: next_basin as usize,
    })
}

fn luminance(image: &Rgb8Image) -> Vec<f64> {
    image
        .data()
        .chunks_exact(3)
        .map(|p| 0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64)
        .collect()
}

/// Central-difference gradient magnitude of the luminance, with replicated
/// borders.
pub fn gradient_magnitude(image: &Rgb8Image) -> ScalarField {
    let (w, h) = (image.width(), image.height());
    let lum = luminance(image);
    let at = |r: usize, c: usize| lum[r * w + c];
    let mut out = ScalarField::new(w, h);
    for r in 0..h {
        for c in 0..w {
            let gx = (at(r, (c + 1).min(w - 1)) - at(r, c.saturating_sub(1))) / 2.0;
            let gy = (at((r + 1).min(h - 1), c) - at(r.saturating_sub(1), c)) / 2.0;
            out.set(r, c, (gx * gx + gy * gy).sqrt());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(values: &[f64]) -> ScalarField {
        ScalarField::from_vec(values.len(), 1, values.to_vec()).unwrap()
    }

    #[test]
    fn two_basins_with_dam() {
        let res = watershed_flood(&row(&[2.0, 0.0, 3.0, 0.0, 2.0])).unwrap();
        assert_eq!(res.basin_count, 2);
        assert_eq!(res.basins.data(), &[1, 1, 0, 2, 2]);
        assert!(res.ridge_mask.get(0, 2));
    }

    #[test]
    fn constant_field_is_one_basin() {
        let f = ScalarField::from_vec(4, 3, vec![1.5; 12]).unwrap();
        let res = watershed_flood(&f).unwrap();
        assert_eq!(res.basin_count, 1);
        assert_eq!(res.ridge_mask.count(), 0);
    }

    #[test]
    fn tiny_ridge_still_splits() {
        let res = watershed_flood(&row(&[5.0, 1.0, 2.0, 1.0, 5.0])).unwrap();
        assert_eq!(res.basin_count, 2);
    }

    #[test]
    fn descending_plateau_joins_lower_basin() {
        let res = watershed_flood(&row(&[1.0, 1.0, 1.0, 0.0])).unwrap();
        assert_eq!(res.basin_count, 1);
        assert_eq!(res.basins.data(), &[1, 1, 1, 1]);
    }

    #[test]
    fn non_finite_rejected() {
        assert!(watershed_flood(&row_unchecked(&[0.0, f64::INFINITY])).is_err());
    }

    fn row_unchecked(values: &[f64]) -> ScalarField {
        let mut f = ScalarField::new(values.len(), 1);
        f.data_mut().copy_from_slice(values);
        f
    }

    #[test]
    fn gradient_of_constant_is_zero() {
        let mut img = Rgb8Image::new(5, 4);
        for r in 0..4 {
            for c in 0..5 {
                img.set(r, c, [40, 90, 10]);
            }
        }
        assert!(gradient_magnitude(&img).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gradient_of_step_edge() {
        let mut img = Rgb8Image::new(6, 3);
        for r in 0..3 {
            for c in 3..6 {
                img.set(r, c, [100, 100, 100]);
            }
        }
        let g = gradient_magnitude(&img);
        let step = 0.299 * 100.0 + 0.587 * 100.0 + 0.114 * 100.0;
        for r in 0..3 {
            assert!((g.get(r, 2) - step / 2.0).abs() < 1e-12);
            assert!((g.get(r, 3) - step / 2.0).abs() < 1e-12);
            assert_eq!(g.get(r, 0), 0.0);
            assert_eq!(g.get(r, 5), 0.0);
        }
    }

    #[test]
    fn gradient_of_single_pixel_is_a_cross() {
        let mut img = Rgb8Image::new(5, 5);
        img.set(2, 2, [255, 255, 255]);
        let g = gradient_magnitude(&img);
        for r in 0..5 {
            for c in 0..5 {
                let cross = (r == 2 && (c == 1 || c == 3)) || (c == 2 && (r == 1 || r == 3));
                assert_eq!(g.get(r, c) != 0.0, cross, "({r}, {c})");
            }
        }
    }
}
