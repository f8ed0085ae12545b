//! Deterministic dense kernels. Summation order is fixed (interleaved
//! lanes, then a fixed reduction) so single and batched evaluations of the
//! same point produce identical bits.

const LANES: usize = 8;
/// Four independent accumulator vectors hide the fused multiply-add latency.
const WIDE: usize = 4 * LANES;

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; WIDE];
    let wide = a.len() / WIDE * WIDE;
    for (ca, cb) in a[..wide].chunks_exact(WIDE).zip(b[..wide].chunks_exact(WIDE)) {
        for k in 0..WIDE {
            acc[k] = ca[k].mul_add(cb[k], acc[k]);
        }
    }
    let chunks = a.len() / LANES * LANES;
    for (ca, cb) in a[wide..chunks]
        .chunks_exact(LANES)
        .zip(b[wide..chunks].chunks_exact(LANES))
    {
        for k in 0..LANES {
            acc[k] = ca[k].mul_add(cb[k], acc[k]);
        }
    }
    let mut tail = 0.0;
    for (x, y) in a[chunks..].iter().zip(&b[chunks..]) {
        tail = x.mul_add(*y, tail);
    }
    reduce(&acc) + tail
}

#[inline]
fn reduce(acc: &[f64; WIDE]) -> f64 {
    let mut lanes = [0.0f64; LANES];
    for k in 0..LANES {
        lanes[k] = (acc[k] + acc[k + 2 * LANES]) + (acc[k + LANES] + acc[k + 3 * LANES]);
    }
    ((lanes[0] + lanes[4]) + (lanes[1] + lanes[5])) + ((lanes[2] + lanes[6]) + (lanes[3] + lanes[7]))
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yv, xv) in y.iter_mut().zip(x) {
        *yv = alpha.mul_add(*xv, *yv);
    }
}

#[inline]
pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

#[inline]
pub fn dist_sq(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; LANES];
    let chunks = a.len() / LANES * LANES;
    for (ca, cb) in a[..chunks]
        .chunks_exact(LANES)
        .zip(b[..chunks].chunks_exact(LANES))
    {
        for k in 0..LANES {
            let d = ca[k] - cb[k];
            acc[k] = d.mul_add(d, acc[k]);
        }
    }
    let mut tail = 0.0;
    for (x, y) in a[chunks..].iter().zip(&b[chunks..]) {
        let d = x - y;
        tail = d.mul_add(d, tail);
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Squared distance between two `f32` rows, accumulated in `f64`.
#[inline]
pub fn dist_sq_f32(a: &[f32], b: &[f32]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; WIDE];
    let wide = a.len() / WIDE * WIDE;
    for (ca, cb) in a[..wide].chunks_exact(WIDE).zip(b[..wide].chunks_exact(WIDE)) {
        for k in 0..WIDE {
            let d = f64::from(ca[k]) - f64::from(cb[k]);
            acc[k] = d.mul_add(d, acc[k]);
        }
    }
    let chunks = a.len() / LANES * LANES;
    for (ca, cb) in a[wide..chunks]
        .chunks_exact(LANES)
        .zip(b[wide..chunks].chunks_exact(LANES))
    {
        for k in 0..LANES {
            let d = f64::from(ca[k]) - f64::from(cb[k]);
            acc[k] = d.mul_add(d, acc[k]);
        }
    }
    let mut tail = 0.0;
    for (x, y) in a[chunks..].iter().zip(&b[chunks..]) {
        let d = f64::from(*x) - f64::from(*y);
        tail = d.mul_add(d, tail);
    }
    reduce(&acc) + tail
}
