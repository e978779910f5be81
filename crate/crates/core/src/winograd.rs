//! Single-precision 3×3/pad-1 convolution with Winograd F(4×4, 3×3)
//! minimal filtering. Used on the inference path only.
//!
//! Each 4×4 output tile is `Aᵀ[(G g Gᵀ) ⊙ (Bᵀ d B)]A` for the 6×6 input
//! tile `d`. The element-wise products over all channel pairs become 36
//! independent `cout × cin × tiles` matrix products.

const ALPHA: usize = 6;
const TILE: usize = 4;
const XI: usize = ALPHA * ALPHA;
/// Tile rows transformed and multiplied together, sized to stay in cache.
const BLOCK_ROWS: usize = 8;

/// Buffers reused across calls.
#[derive(Debug, Default)]
pub(crate) struct WinogradScratch {
    u: Vec<f32>,
    /// Kernels and `(cout, cin)` that `u` was computed from.
    u_src: Vec<f64>,
    u_shape: (usize, usize),
    v: Vec<f32>,
    m: Vec<f32>,
    d: Vec<f32>,
    t: Vec<f32>,
}

/// `G g Gᵀ` for one 3×3 kernel.
fn transform_kernel(g: &[f64]) -> [f64; XI] {
    const G: [[f64; 3]; ALPHA] = [
        [1.0 / 4.0, 0.0, 0.0],
        [-1.0 / 6.0, -1.0 / 6.0, -1.0 / 6.0],
        [-1.0 / 6.0, 1.0 / 6.0, -1.0 / 6.0],
        [1.0 / 24.0, 1.0 / 12.0, 1.0 / 6.0],
        [1.0 / 24.0, -1.0 / 12.0, 1.0 / 6.0],
        [0.0, 0.0, 1.0],
    ];
    let mut tmp = [[0.0; 3]; ALPHA];
    for i in 0..ALPHA {
        for j in 0..3 {
            tmp[i][j] = (0..3).map(|k| G[i][k] * g[k * 3 + j]).sum();
        }
    }
    let mut out = [0.0; XI];
    for i in 0..ALPHA {
        for j in 0..ALPHA {
            out[i * ALPHA + j] = (0..3).map(|k| tmp[i][k] * G[j][k]).sum();
        }
    }
    out
}

/// `K` output rows of `n` lanes, `stride` apart, starting at the front of `y`.
fn out_rows<const K: usize>(y: &mut [f32], n: usize, stride: usize) -> [&mut [f32]; K] {
    let mut it = y.chunks_mut(stride);
    std::array::from_fn(|_| &mut it.next().expect("output rows")[..n])
}

fn in_rows(buf: &[f32], n: usize, base: usize, stride: usize) -> [&[f32]; ALPHA] {
    std::array::from_fn(|k| &buf[base + k * stride..base + k * stride + n])
}

/// `Bᵀ x` along one axis: six input rows of `n` lanes to six output rows.
#[inline]
fn bt_rows(x: [&[f32]; ALPHA], y: [&mut [f32]; ALPHA], n: usize) {
    let [y0, y1, y2, y3, y4, y5] = y.map(|r| &mut r[..n]);
    let [x0, x1, x2, x3, x4, x5] = x.map(|r| &r[..n]);
    for i in 0..n {
        let (a0, a1, a2, a3, a4, a5) = (x0[i], x1[i], x2[i], x3[i], x4[i], x5[i]);
        y0[i] = 4.0 * a0 - 5.0 * a2 + a4;
        y1[i] = -4.0 * a1 - 4.0 * a2 + a3 + a4;
        y2[i] = 4.0 * a1 - 4.0 * a2 - a3 + a4;
        y3[i] = -2.0 * a1 - a2 + 2.0 * a3 + a4;
        y4[i] = 2.0 * a1 - a2 - 2.0 * a3 + a4;
        y5[i] = 4.0 * a1 - 5.0 * a3 + a5;
    }
}

/// `Aᵀ x` along one axis: six input rows to four output rows.
#[inline]
fn at_rows(x: [&[f32]; ALPHA], y: [&mut [f32]; TILE], n: usize) {
    let [y0, y1, y2, y3] = y.map(|r| &mut r[..n]);
    let [x0, x1, x2, x3, x4, x5] = x.map(|r| &r[..n]);
    for i in 0..n {
        let (a0, a1, a2, a3, a4, a5) = (x0[i], x1[i], x2[i], x3[i], x4[i], x5[i]);
        let (s12, d12) = (a1 + a2, a1 - a2);
        let (s34, d34) = (a3 + a4, a3 - a4);
        y0[i] = a0 + s12 + s34;
        y1[i] = d12 + 2.0 * d34;
        y2[i] = s12 + 4.0 * s34;
        y3[i] = d12 + 8.0 * d34 + a5;
    }
}

/// Correlates `input` (`cin × h × w`, channel-major) with `weight`
/// (`[cout][cin][3][3]`), zero padding 1, and adds `bias`.
/// `out` is resized to `cout × h × w`.
pub(crate) fn conv3x3(
    input: &[f32],
    (cin, h, w): (usize, usize, usize),
    weight: &[f64],
    bias: &[f64],
    out: &mut Vec<f32>,
    s: &mut WinogradScratch,
) {
    let cout = bias.len();
    debug_assert_eq!(weight.len(), cout * cin * 9);
    debug_assert_eq!(input.len(), cin * h * w);
    let (th, tw) = (h.div_ceil(TILE), w.div_ceil(TILE));

    // U[xi][co][ci]
    if s.u_shape != (cout, cin) || s.u_src != weight {
        s.u_shape = (cout, cin);
        s.u_src.clear();
        s.u_src.extend_from_slice(weight);
        s.u.resize(XI * cout * cin, 0.0);
        for co in 0..cout {
            for ci in 0..cin {
                let k = transform_kernel(&weight[(co * cin + ci) * 9..(co * cin + ci + 1) * 9]);
                for (xi, &v) in k.iter().enumerate() {
                    s.u[(xi * cout + co) * cin + ci] = v as f32;
                }
            }
        }
    }

    let pw = tw * TILE + TILE;
    let hrows = BLOCK_ROWS * TILE + 2;
    s.d.resize(ALPHA * hrows * tw, 0.0);
    s.t.resize((pw + TILE * (tw + 1)).max((ALPHA + TILE) * TILE * tw), 0.0);
    out.resize(cout * h * w, 0.0);
    for ty0 in (0..th).step_by(BLOCK_ROWS) {
        let rows_here = BLOCK_ROWS.min(th - ty0);
        let nb = rows_here * tw;
        input_transform(s, input, (cin, h, w), (ty0, rows_here), (tw, pw));
        // M[xi] = U[xi]·V[xi]
        s.m.resize(XI * cout * nb, 0.0);
        for xi in 0..XI {
            let a = &s.u[xi * cout * cin..(xi + 1) * cout * cin];
            let b = &s.v[xi * cin * nb..(xi + 1) * cin * nb];
            let c = &mut s.m[xi * cout * nb..(xi + 1) * cout * nb];
            // SAFETY: the three slices hold exactly the row-major matrices
            // described by the dimensions and strides passed here.
            unsafe {
                matrixmultiply::sgemm(
                    cout,
                    cin,
                    nb,
                    1.0,
                    a.as_ptr(),
                    cin as isize,
                    1,
                    b.as_ptr(),
                    nb as isize,
                    1,
                    0.0,
                    c.as_mut_ptr(),
                    nb as isize,
                    1,
                );
            }
        }
        output_transform(s, bias, (ty0, rows_here), (h, w, tw), out);
    }
}

/// Fills `s.v` with `V[xi][ci][tile]` for a block of tile rows.
fn input_transform(
    s: &mut WinogradScratch,
    input: &[f32],
    (cin, h, w): (usize, usize, usize),
    (ty0, rows): (usize, usize),
    (tw, pw): (usize, usize),
) {
    let nb = rows * tw;
    let hrows = rows * TILE + 2;
    s.v.resize(XI * cin * nb, 0.0);
    let (padded, phase) = s.t.split_at_mut(pw);
    let hplane = hrows * tw;
    for ci in 0..cin {
        let plane = &input[ci * h * w..(ci + 1) * h * w];
        // Horizontal pass: hb[j][yp][tx] = Σ_c B[c][j] row(yp)[4tx + c].
        for yp in 0..hrows {
            let y = (ty0 * TILE + yp) as isize - 1;
            padded.fill(0.0);
            if y >= 0 && (y as usize) < h {
                padded[1..=w].copy_from_slice(&plane[y as usize * w..(y as usize + 1) * w]);
            }
            for q in 0..TILE {
                let ph_q = &mut phase[q * (tw + 1)..(q + 1) * (tw + 1)];
                for (tx, v) in ph_q.iter_mut().enumerate() {
                    *v = padded[tx * TILE + q];
                }
            }
            // Column c of tile tx sits in phase c % 4 at index tx + c / 4.
            let cols: [&[f32]; ALPHA] = std::array::from_fn(|c| {
                let start = (c % TILE) * (tw + 1) + c / TILE;
                &phase[start..start + tw]
            });
            bt_rows(cols, out_rows(&mut s.d[yp * tw..], tw, hplane), tw);
        }
        // Vertical pass over six consecutive rows per tile row.
        for r in 0..rows {
            for j in 0..ALPHA {
                let src = in_rows(&s.d, tw, j * hplane + r * TILE * tw, tw);
                let base = (j * cin + ci) * nb + r * tw;
                bt_rows(src, out_rows(&mut s.v[base..], tw, ALPHA * cin * nb), tw);
            }
        }
    }
}

/// Applies `Aᵀ M A` to a block of tile rows held in `s.m` and writes the
/// biased result into `out`.
fn output_transform(
    s: &mut WinogradScratch,
    bias: &[f64],
    (ty0, rows): (usize, usize),
    (h, w, tw): (usize, usize, usize),
    out: &mut [f32],
) {
    let cout = bias.len();
    let nb = rows * tw;
    let (d, rest) = s.t.split_at_mut(TILE * ALPHA * tw);
    let y = &mut rest[..TILE * TILE * tw];
    for co in 0..cout {
        let b = bias[co] as f32;
        let plane = &mut out[co * h * w..(co + 1) * h * w];
        for r in 0..rows {
            let ty = ty0 + r;
            // d[j][i] = Σ_r Aᵀ[i][r] M[r][j]
            for j in 0..ALPHA {
                let src = in_rows(&s.m, tw, (j * cout + co) * nb + r * tw, ALPHA * cout * nb);
                at_rows(src, out_rows(&mut d[j * TILE * tw..], tw, tw), tw);
            }
            // y[i][k] = Σ_j d[j][i] A[j][k]
            for i in 0..TILE {
                at_rows(in_rows(d, tw, i * tw, TILE * tw), out_rows(&mut y[i * TILE * tw..], tw, tw), tw);
            }
            for i in 0..TILE.min(h - ty * TILE) {
                let row = &mut plane[(ty * TILE + i) * w..(ty * TILE + i + 1) * w];
                for k in 0..TILE {
                    let src = &y[(i * TILE + k) * tw..(i * TILE + k + 1) * tw];
                    for (dst, &v) in row[k..].iter_mut().step_by(TILE).zip(src) {
                        *dst = v + b;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn direct(input: &[f32], (cin, h, w): (usize, usize, usize), weight: &[f64], bias: &[f64]) -> Vec<f64> {
        let cout = bias.len();
        let mut out = vec![0.0; cout * h * w];
        for co in 0..cout {
            for y in 0..h {
                for x in 0..w {
                    let mut acc = bias[co];
                    for ci in 0..cin {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let (sy, sx) = (y as isize + ky as isize - 1, x as isize + kx as isize - 1);
                                if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                                    acc += weight[((co * cin + ci) * 3 + ky) * 3 + kx]
                                        * input[(ci * h + sy as usize) * w + sx as usize] as f64;
                                }
                            }
                        }
                    }
                    out[(co * h + y) * w + x] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn matches_direct_correlation() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut s = WinogradScratch::default();
        for &(cin, cout, h, w) in &[(1, 1, 4, 4), (2, 3, 5, 7), (4, 2, 9, 13), (3, 5, 17, 16), (8, 8, 25, 25)] {
            let input: Vec<f32> = (0..cin * h * w).map(|_| rng.random_range(0.0..1.0)).collect();
            let weight: Vec<f64> = (0..cout * cin * 9).map(|_| rng.random_range(-0.5..0.5)).collect();
            let bias: Vec<f64> = (0..cout).map(|_| rng.random_range(-0.1..0.1)).collect();
            let mut out = Vec::new();
            conv3x3(&input, (cin, h, w), &weight, &bias, &mut out, &mut s);
            let want = direct(&input, (cin, h, w), &weight, &bias);
            let err = out
                .iter()
                .zip(&want)
                .map(|(a, b)| (*a as f64 - b).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-4, "{cin}x{cout}x{h}x{w}: {err}");
        }
    }

    #[test]
    fn cached_kernels_follow_weight_changes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut s = WinogradScratch::default();
        let (cin, cout, h, w) = (3, 2, 11, 10);
        let input: Vec<f32> = (0..cin * h * w).map(|_| rng.random_range(0.0..1.0)).collect();
        let bias = vec![0.0; cout];
        for _ in 0..3 {
            let weight: Vec<f64> = (0..cout * cin * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mut out = Vec::new();
            conv3x3(&input, (cin, h, w), &weight, &bias, &mut out, &mut s);
            let want = direct(&input, (cin, h, w), &weight, &bias);
            assert!(out.iter().zip(&want).all(|(a, b)| (*a as f64 - b).abs() < 1e-4));
        }
        // Same weights viewed with swapped channel counts.
        let weight: Vec<f64> = (0..cout * cin * 9).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut out = Vec::new();
        conv3x3(&input, (cin, h, w), &weight, &bias, &mut out, &mut s);
        let input2: Vec<f32> = (0..cout * h * w).map(|_| rng.random_range(0.0..1.0)).collect();
        let bias2 = vec![0.0; cin];
        conv3x3(&input2, (cout, h, w), &weight, &bias2, &mut out, &mut s);
        let want = direct(&input2, (cout, h, w), &weight, &bias2);
        assert!(out.iter().zip(&want).all(|(a, b)| (*a as f64 - b).abs() < 1e-4));
    }
}
