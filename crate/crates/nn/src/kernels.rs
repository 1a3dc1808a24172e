//! Inner loops for the convolution layers. All routines work on one sample.

use crate::tensor::Real;

/// Unrolls `k x k` zero-padded neighbourhoods of a `(cin, h, w)` plane stack
/// into `cin * k * k` rows of length `h * w`.
pub(crate) fn im2col<T: Real>(x: &[T], cin: usize, h: usize, w: usize, k: usize, cols: &mut [T]) {
    let hw = h * w;
    let pad = (k / 2) as isize;
    for ci in 0..cin {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let r = (ci * k + ky) * k + kx;
                let row = &mut cols[r * hw..(r + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let (x0, x1) = valid_range(w, dx);
                for y in 0..h {
                    let dst = &mut row[y * w..(y + 1) * w];
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize || x0 >= x1 {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src_row = &plane[sy as usize * w..(sy as usize + 1) * w];
                    dst[..x0].fill(T::zero());
                    dst[x1..].fill(T::zero());
                    let s0 = (x0 as isize + dx) as usize;
                    dst[x0..x1].copy_from_slice(&src_row[s0..s0 + (x1 - x0)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates rows back into the plane stack.
pub(crate) fn col2im<T: Real>(cols: &[T], cin: usize, h: usize, w: usize, k: usize, dx_out: &mut [T]) {
    let hw = h * w;
    let pad = (k / 2) as isize;
    for ci in 0..cin {
        let plane = &mut dx_out[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let r = (ci * k + ky) * k + kx;
                let row = &cols[r * hw..(r + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                let (x0, x1) = valid_range(w, dx);
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let s0 = sy as usize * w + (x0 as isize + dx) as usize;
                    let dst = &mut plane[s0..s0 + (x1 - x0)];
                    let src = &row[y * w + x0..y * w + x1];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
    }
}

// Output columns x whose source column x + dx lies inside [0, w).
fn valid_range(w: usize, dx: isize) -> (usize, usize) {
    let x0 = (-dx).clamp(0, w as isize) as usize;
    let x1 = (w as isize - dx).clamp(0, w as isize) as usize;
    (x0, x1)
}

/// `out[o] = bias[o] + sum_r weight[o, r] * cols[r]` for each output row.
pub(crate) fn matmul_forward<T: Real>(
    weight: &[T],
    bias: &[T],
    cols: &[T],
    rows: usize,
    hw: usize,
    out: &mut [T],
) {
    let cout = bias.len();
    for (o, b) in bias.iter().enumerate() {
        out[o * hw..(o + 1) * hw].fill(*b);
    }
    let mut o = 0;
    while o + 4 <= cout {
        let block = &mut out[o * hw..(o + 4) * hw];
        let (o0, rest) = block.split_at_mut(hw);
        let (o1, rest) = rest.split_at_mut(hw);
        let (o2, o3) = rest.split_at_mut(hw);
        for r in 0..rows {
            let c = &cols[r * hw..(r + 1) * hw];
            let w0 = weight[o * rows + r];
            let w1 = weight[(o + 1) * rows + r];
            let w2 = weight[(o + 2) * rows + r];
            let w3 = weight[(o + 3) * rows + r];
            for ((((a, b), d), e), &v) in o0
                .iter_mut()
                .zip(o1.iter_mut())
                .zip(o2.iter_mut())
                .zip(o3.iter_mut())
                .zip(c)
            {
                *a += w0 * v;
                *b += w1 * v;
                *d += w2 * v;
                *e += w3 * v;
            }
        }
        o += 4;
    }
    while o < cout {
        let dst = &mut out[o * hw..(o + 1) * hw];
        for r in 0..rows {
            let wv = weight[o * rows + r];
            let c = &cols[r * hw..(r + 1) * hw];
            for (a, &v) in dst.iter_mut().zip(c) {
                *a += wv * v;
            }
        }
        o += 1;
    }
}

/// Accumulates weight and bias gradients, and writes column gradients when
/// `dcols` is given.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul_backward<T: Real>(
    weight: &[T],
    cols: &[T],
    dout: &[T],
    rows: usize,
    hw: usize,
    dweight: &mut [T],
    dbias: &mut [T],
    dcols: Option<&mut [T]>,
) {
    let cout = dbias.len();
    for o in 0..cout {
        let g = &dout[o * hw..(o + 1) * hw];
        dbias[o] += sum(g);
        for r in 0..rows {
            dweight[o * rows + r] += dot(g, &cols[r * hw..(r + 1) * hw]);
        }
    }
    if let Some(dcols) = dcols {
        for r in 0..rows {
            let dst = &mut dcols[r * hw..(r + 1) * hw];
            dst.fill(T::zero());
            for o in 0..cout {
                let wv = weight[o * rows + r];
                let g = &dout[o * hw..(o + 1) * hw];
                for (a, &v) in dst.iter_mut().zip(g) {
                    *a += wv * v;
                }
            }
        }
    }
}

/// Dot product with eight independent partial sums so the loop vectorizes.
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let ca = a.chunks_exact(8);
    let cb = b.chunks_exact(8);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = T::zero();
    for (&x, &y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

pub(crate) fn sum<T: Real>(a: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let c = a.chunks_exact(8);
    let r = c.remainder();
    for x in c {
        for i in 0..8 {
            acc[i] += x[i];
        }
    }
    let mut tail = T::zero();
    for &x in r {
        tail += x;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}
