//! Dense f32 kernels shared by every forward path.
//!
//! All matrix products go through [`matmul`] so that a given output row is
//! computed with the same summation order no matter how many other rows are in
//! the batch. Prefix reuse and selective prefill rely on that to reproduce the
//! full prefill bit for bit.

/// Strided view of a row-major-ish matrix.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f32],
    pub offset: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> View<'a> {
    pub fn rows(data: &'a [f32], cols: usize) -> Self {
        Self {
            data,
            offset: 0,
            row_stride: cols,
            col_stride: 1,
        }
    }
}

/// `c[m×n] = alpha * a[m×k] · b[k×n] + beta * c`.
///
/// `c` is addressed as `c_data[c_offset + i*c_row_stride + j]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: View<'_>,
    b: View<'_>,
    beta: f32,
    c_data: &mut [f32],
    c_offset: usize,
    c_row_stride: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |v: &View<'_>, rows: usize, cols: usize| {
        v.offset + rows.saturating_sub(1) * v.row_stride + cols.saturating_sub(1) * v.col_stride
    };
    assert!(k == 0 || last(&a, m, k) < a.data.len(), "lhs view out of bounds");
    assert!(k == 0 || last(&b, k, n) < b.data.len(), "rhs view out of bounds");
    assert!(
        c_offset + (m - 1) * c_row_stride + n - 1 < c_data.len(),
        "output view out of bounds"
    );
    // SAFETY: the asserts above bound every element the kernel reads or
    // writes; `c` is borrowed mutably and cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.offset),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr().add(b.offset),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c_data.as_mut_ptr().add(c_offset),
            c_row_stride as isize,
            1,
        );
    }
}

/// `rows[m×k] · w[k×n]` into a fresh buffer.
pub(crate) fn project(rows: &[f32], m: usize, k: usize, w: &[f32], n: usize) -> Vec<f32> {
    let mut out = vec![0.0; m * n];
    matmul(
        m,
        k,
        n,
        1.0,
        View::rows(rows, k),
        View::rows(w, n),
        0.0,
        &mut out,
        0,
        n,
    );
    out
}

pub(crate) const RMS_EPS: f32 = 1e-6;

/// Parameter-free RMS normalisation of each `width`-sized row.
pub(crate) fn rms_norm(rows: &[f32], width: usize) -> Vec<f32> {
    let mut out = Vec::with_capacity(rows.len());
    for row in rows.chunks_exact(width) {
        let ms = row.iter().map(|x| x * x).sum::<f32>() / width as f32;
        let inv = 1.0 / (ms + RMS_EPS).sqrt();
        out.extend(row.iter().map(|x| x * inv));
    }
    out
}

/// `e^x` to about one ulp, written without branches or libm calls so that
/// loops over slices vectorise. Inputs are clamped to the finite f32 range.
#[inline(always)]
pub(crate) fn exp(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    // adding 1.5 * 2^23 rounds to the nearest integer, left in the low bits
    const ROUND: f32 = 12_582_912.0;
    let x = x.clamp(-87.336_55, 88.376_26);
    let t = x * LOG2E + ROUND;
    let n = t - ROUND;
    let r = x - n * LN2_HI - n * LN2_LO;
    let mut p = 1.987_569_2e-4;
    p = p * r + 1.398_199_9e-3;
    p = p * r + 8.333_452e-3;
    p = p * r + 4.166_579_6e-2;
    p = p * r + 1.666_666_5e-1;
    p = p * r + 5.000_000_1e-1;
    let e = p * r * r + r + 1.0;
    let k = t.to_bits() as i32 - ROUND.to_bits() as i32;
    e * f32::from_bits(((k + 127) << 23) as u32)
}

/// tanh approximation of GELU.
#[inline(always)]
pub(crate) fn gelu(x: f32) -> f32 {
    const C: f32 = 0.797_884_6; // sqrt(2/pi)
    let u = C * (x + 0.044_715 * x * x * x);
    let tanh = 1.0 - 2.0 / (exp(2.0 * u) + 1.0);
    0.5 * x * (1.0 + tanh)
}

/// In-place softmax over `row[..=last]`; entries after `last` become zero.
pub(crate) fn masked_softmax(row: &mut [f32], last: usize) {
    let (live, dead) = row.split_at_mut(last + 1);
    let max = live.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    for x in live.iter_mut() {
        *x = exp(*x - max);
    }
    let sum = lane_sum(live);
    for x in live.iter_mut() {
        *x /= sum;
    }
    dead.fill(0.0);
}

/// Sum in eight interleaved lanes, combined pairwise. The order depends only
/// on the slice length.
fn lane_sum(xs: &[f32]) -> f32 {
    let mut acc = [0.0f32; 8];
    let chunks = xs.chunks_exact(8);
    let tail = chunks.remainder();
    for c in chunks {
        for (a, x) in acc.iter_mut().zip(c) {
            *a += x;
        }
    }
    for (a, x) in acc.iter_mut().zip(tail) {
        *a += x;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]))
}

/// Rotates consecutive pairs of every head in `row` by `position * theta_i`.
///
/// Position 0 leaves the row unchanged (cos 0 = 1, sin 0 = 0 exactly).
pub(crate) fn rope_row(row: &mut [f32], head_dim: usize, position: f64, base: f64) {
    let half = head_dim / 2;
    for i in 0..half {
        let theta = base.powf(-2.0 * i as f64 / head_dim as f64);
        let (sin, cos) = (position * theta).sin_cos();
        let (sin, cos) = (sin as f32, cos as f32);
        for head in row.chunks_exact_mut(head_dim) {
            let (x, y) = (head[2 * i], head[2 * i + 1]);
            head[2 * i] = x * cos - y * sin;
            head[2 * i + 1] = x * sin + y * cos;
        }
    }
}

pub(crate) fn argmax(xs: &[f32]) -> usize {
    let mut best = 0;
    for (i, x) in xs.iter().enumerate() {
        if *x > xs[best] {
            best = i;
        }
    }
    best
}
