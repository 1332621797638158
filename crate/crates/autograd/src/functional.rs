//! Scalar functions shared by the graph ops and by callers that evaluate
//! without a tape.

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const FOCAL_EPS: f64 = 1e-6;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let inner = SQRT_2_OVER_PI * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let d_inner = SQRT_2_OVER_PI * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * d_inner
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Binary focal loss. `y` is a 0/1 label; fractional labels mix the two
/// branches linearly.
pub fn focal_bce(p: f64, y: f64, alpha: f64, gamma: f64) -> f64 {
    let p = p.clamp(FOCAL_EPS, 1.0 - FOCAL_EPS);
    let pos = -alpha * (1.0 - p).powf(gamma) * p.ln();
    let neg = -(1.0 - alpha) * p.powf(gamma) * (1.0 - p).ln();
    y * pos + (1.0 - y) * neg
}

/// d focal_bce / dp. Zero where the clamp is active.
pub fn focal_bce_grad(p: f64, y: f64, alpha: f64, gamma: f64) -> f64 {
    if !(FOCAL_EPS..=1.0 - FOCAL_EPS).contains(&p) {
        return 0.0;
    }
    let q = 1.0 - p;
    let mut pos = q.powf(gamma) / p;
    let mut neg = -p.powf(gamma) / q;
    if gamma != 0.0 {
        pos -= gamma * q.powf(gamma - 1.0) * p.ln();
        neg += gamma * p.powf(gamma - 1.0) * q.ln();
    }
    y * (-alpha * pos) + (1.0 - y) * (-(1.0 - alpha) * neg)
}

/// In-place softmax; a row that is entirely `-inf` becomes uniform.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        let n = row.len() as f64;
        row.iter_mut().for_each(|v| *v = 1.0 / n);
        return;
    }
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}
