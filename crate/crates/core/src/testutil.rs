//! Independent oracles shared by unit tests.

/// `∫ q log(q/p)` for 1-D normals by composite Simpson over ±14 sd of `q`.
pub fn kl_quadrature_1d(mq: f64, sq: f64, mp: f64, sp: f64) -> f64 {
    let log_pdf = |x: f64, m: f64, s: f64| {
        -0.5 * ((x - m) / s).powi(2) - s.ln() - 0.5 * (2.0 * std::f64::consts::PI).ln()
    };
    let f = |x: f64| {
        let lq = log_pdf(x, mq, sq);
        lq.exp() * (lq - log_pdf(x, mp, sp))
    };
    let (a, b) = (mq - 14.0 * sq, mq + 14.0 * sq);
    let n = 20_000;
    let h = (b - a) / n as f64;
    let mut acc = f(a) + f(b);
    for i in 1..n {
        let w = if i % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(a + i as f64 * h);
    }
    acc * h / 3.0
}

/// Central difference of `f` along coordinate `k` of `x`.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], k: usize, h: f64) -> f64 {
    let mut xp = x.to_vec();
    let mut xm = x.to_vec();
    xp[k] += h;
    xm[k] -= h;
    (f(&xp) - f(&xm)) / (2.0 * h)
}
