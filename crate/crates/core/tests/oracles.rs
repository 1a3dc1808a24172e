//! Brute-force oracles for the grid, target, watershed and morphology code.

use std::collections::VecDeque;

use dwt_core::extract::{dilate_labels, fill_holes};
use dwt_core::targets::{direction_targets, distance_transform, squared_distances};
use dwt_core::watershed::watershed_flood;
use dwt_core::{connected_components, Connectivity, LabelMap, Mask, ScalarField};
use proptest::prelude::*;

/// Random label maps built from overlapping rectangles; later rectangles
/// overwrite earlier ones, so instances touch, nest and reach the border.
fn label_map(max_side: usize, max_rects: usize) -> impl Strategy<Value = LabelMap> {
    (1..=max_side, 1..=max_side).prop_flat_map(move |(w, h)| {
        prop::collection::vec((0..h, 0..w, 1..=h, 1..=w, 0u32..6), 0..=max_rects).prop_map(move |rects| {
            let mut m = LabelMap::new(w, h);
            for (r0, c0, rh, rw, id) in rects {
                for r in r0..(r0 + rh).min(h) {
                    for c in c0..(c0 + rw).min(w) {
                        m.set(r, c, id);
                    }
                }
            }
            m
        })
    })
}

fn binary_mask(max_side: usize) -> impl Strategy<Value = Mask> {
    (1..=max_side, 1..=max_side).prop_flat_map(|(w, h)| {
        prop::collection::vec(prop::bool::weighted(0.55), w * h).prop_map(move |d| Mask::from_vec(w, h, d).unwrap())
    })
}

/// Squared distance from every pixel to the nearest pixel outside its
/// instance, including the ring one pixel outside the image.
fn brute_squared(labels: &LabelMap) -> Vec<u64> {
    let (w, h) = (labels.width() as i64, labels.height() as i64);
    let mut out = vec![0u64; (w * h) as usize];
    for r in 0..h {
        for c in 0..w {
            let id = labels.get(r as usize, c as usize);
            if id == 0 {
                continue;
            }
            let mut best = u64::MAX;
            for qr in -1..=h {
                for qc in -1..=w {
                    let inside = qr >= 0 && qc >= 0 && qr < h && qc < w;
                    if inside && labels.get(qr as usize, qc as usize) == id {
                        continue;
                    }
                    best = best.min(((qr - r).pow(2) + (qc - c).pow(2)) as u64);
                }
            }
            out[(r * w + c) as usize] = best;
        }
    }
    out
}

fn flood_fill_components(mask: &Mask, conn: Connectivity) -> Vec<Vec<usize>> {
    let (w, h) = (mask.width(), mask.height());
    let mut seen = vec![false; w * h];
    let mut comps = Vec::new();
    for start in 0..w * h {
        if !mask.data()[start] || seen[start] {
            continue;
        }
        let mut comp = vec![];
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(i) = queue.pop_front() {
            comp.push(i);
            let (r, c) = ((i / w) as isize, (i % w) as isize);
            for &(dr, dc) in conn.offsets() {
                let (nr, nc) = (r + dr, c + dc);
                if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                    continue;
                }
                let j = nr as usize * w + nc as usize;
                if mask.data()[j] && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        comps.push(comp);
    }
    comps
}

/// Number of 4-connected equal-energy plateaus with no strictly lower neighbour.
fn count_minimum_plateaus(e: &ScalarField) -> usize {
    let (w, h) = (e.width(), e.height());
    let mut seen = vec![false; w * h];
    let mut count = 0;
    for start in 0..w * h {
        if seen[start] {
            continue;
        }
        let v = e.data()[start];
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        let mut is_min = true;
        while let Some(i) = queue.pop_front() {
            let (r, c) = (i / w, i % w);
            for (nr, nc) in [(r.wrapping_sub(1), c), (r + 1, c), (r, c.wrapping_sub(1)), (r, c + 1)] {
                if nr >= h || nc >= w {
                    continue;
                }
                let j = nr * w + nc;
                let nv = e.data()[j];
                if nv < v {
                    is_min = false;
                } else if nv == v && !seen[j] {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        if is_min {
            count += 1;
        }
    }
    count
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn distance_transform_matches_brute_force(labels in label_map(24, 6)) {
        let want = brute_squared(&labels);
        prop_assert_eq!(squared_distances(&labels), want.clone());
        let d = distance_transform(&labels);
        for (got, sq) in d.data().iter().zip(&want) {
            prop_assert_eq!(got.to_bits(), (*sq as f64).sqrt().to_bits());
        }
    }

    #[test]
    fn directions_point_away_from_a_nearest_outside_pixel(labels in label_map(20, 6)) {
        let sq = brute_squared(&labels);
        let u = direction_targets(&labels);
        let (w, h) = (labels.width() as i64, labels.height() as i64);
        for r in 0..h {
            for c in 0..w {
                let (dy, dx) = u.get(r as usize, c as usize);
                let id = labels.get(r as usize, c as usize);
                if id == 0 {
                    prop_assert_eq!((dy, dx), (0.0, 0.0));
                    continue;
                }
                prop_assert!(((dy * dy + dx * dx).sqrt() - 1.0).abs() < 1e-6);
                // The pixel the vector points away from lies at the nearest distance and outside.
                let d = (sq[(r * w + c) as usize] as f64).sqrt();
                let (qr, qc) = ((r as f64 - dy * d).round() as i64, (c as f64 - dx * d).round() as i64);
                prop_assert_eq!(((qr - r).pow(2) + (qc - c).pow(2)) as u64, sq[(r * w + c) as usize]);
                let inside = qr >= 0 && qc >= 0 && qr < h && qc < w;
                prop_assert!(qr >= -1 && qc >= -1 && qr <= h && qc <= w);
                prop_assert!(!inside || labels.get(qr as usize, qc as usize) != id);
            }
        }
    }

    #[test]
    fn components_match_flood_fill(mask in binary_mask(24), eight in any::<bool>()) {
        let conn = if eight { Connectivity::Eight } else { Connectivity::Four };
        let labels = connected_components(&mask, conn);
        let comps = flood_fill_components(&mask, conn);
        prop_assert_eq!(labels.max_id() as usize, comps.len());
        // Flood fill starts components in raster order, so ids must follow it.
        for (k, comp) in comps.iter().enumerate() {
            for &i in comp {
                prop_assert_eq!(labels.data()[i], k as u32 + 1);
            }
        }
        for (i, &m) in mask.data().iter().enumerate() {
            prop_assert_eq!(m, labels.data()[i] != 0);
        }
    }

    #[test]
    fn watershed_basins_equal_minimum_plateaus(
        (w, h, values) in (1usize..=16, 1usize..=16).prop_flat_map(|(w, h)| (Just(w), Just(h), prop::collection::vec(0u8..5, w * h)))
    ) {
        let e = ScalarField::from_vec(w, h, values.iter().map(|&v| v as f64).collect()).unwrap();
        let res = watershed_flood(&e).unwrap();
        prop_assert_eq!(res.basin_count, count_minimum_plateaus(&e));
        for (i, &b) in res.basins.data().iter().enumerate() {
            prop_assert_eq!(b == 0, res.ridge_mask.data()[i]);
            prop_assert!(b as usize <= res.basin_count);
        }
    }

    #[test]
    fn dilation_matches_brute_force(labels in label_map(20, 4), radius in 0u32..4) {
        let got = dilate_labels(&labels, radius);
        let (w, h) = (labels.width() as i64, labels.height() as i64);
        let r2 = (radius * radius) as i64;
        for r in 0..h {
            for c in 0..w {
                let mut best: Option<(i64, u32)> = None;
                for qr in 0..h {
                    for qc in 0..w {
                        let id = labels.get(qr as usize, qc as usize);
                        let d = (qr - r).pow(2) + (qc - c).pow(2);
                        if id != 0 && d <= r2 && best.is_none_or(|b| (d, id) < b) {
                            best = Some((d, id));
                        }
                    }
                }
                prop_assert_eq!(got.get(r as usize, c as usize), best.map_or(0, |b| b.1));
            }
        }
    }

    #[test]
    fn dilation_commutes_with_translation(labels in label_map(12, 4), radius in 0u32..4, dr in 0usize..4, dc in 0usize..4) {
        let pad = 4;
        let (w, h) = (labels.width() + 2 * pad + 4, labels.height() + 2 * pad + 4);
        let place = |off_r: usize, off_c: usize| {
            let mut m = LabelMap::new(w, h);
            for r in 0..labels.height() {
                for c in 0..labels.width() {
                    m.set(r + off_r, c + off_c, labels.get(r, c));
                }
            }
            m
        };
        let a = dilate_labels(&place(pad, pad), radius);
        let b = dilate_labels(&place(pad + dr, pad + dc), radius);
        for r in 0..h - 4 {
            for c in 0..w - 4 {
                prop_assert_eq!(a.get(r, c), b.get(r + dr, c + dc));
            }
        }
        for (i, &id) in place(pad, pad).data().iter().enumerate() {
            if id != 0 {
                prop_assert_eq!(a.data()[i], id);
            }
        }
    }

    #[test]
    fn fill_holes_matches_border_reachability(mask in binary_mask(20)) {
        let got = fill_holes(&mask);
        let (w, h) = (mask.width(), mask.height());
        let mut reached = vec![false; w * h];
        let mut queue: VecDeque<usize> = (0..w * h)
            .filter(|&i| {
                let (r, c) = (i / w, i % w);
                !mask.data()[i] && (r == 0 || c == 0 || r == h - 1 || c == w - 1)
            })
            .collect();
        for &i in &queue {
            reached[i] = true;
        }
        while let Some(i) = queue.pop_front() {
            let (r, c) = (i / w, i % w);
            for (nr, nc) in [(r.wrapping_sub(1), c), (r + 1, c), (r, c.wrapping_sub(1)), (r, c + 1)] {
                if nr < h && nc < w {
                    let j = nr * w + nc;
                    if !mask.data()[j] && !reached[j] {
                        reached[j] = true;
                        queue.push_back(j);
                    }
                }
            }
        }
        for i in 0..w * h {
            prop_assert_eq!(got.data()[i], !reached[i]);
        }
    }
}

#[test]
fn eight_connectivity_joins_diagonals() {
    let mut m = Mask::new(4, 4);
    m.set(0, 0, true);
    m.set(1, 1, true);
    assert_eq!(connected_components(&m, Connectivity::Four).max_id(), 2);
    assert_eq!(connected_components(&m, Connectivity::Eight).max_id(), 1);
    assert_eq!(flood_fill_components(&m, Connectivity::Eight).len(), 1);
}

#[test]
fn centred_square_distances() {
    let mut labels = LabelMap::new(5, 5);
    for r in 1..4 {
        for c in 1..4 {
            labels.set(r, c, 1);
        }
    }
    let d = distance_transform(&labels);
    assert_eq!(d.get(2, 2), 2.0);
    assert_eq!(d.get(1, 1), 1.0);
    assert_eq!(brute_squared(&labels)[2 * 5 + 2], 4);
}
