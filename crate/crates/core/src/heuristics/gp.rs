//! Length-scale estimation for an isotropic RBF Gaussian process.
//!
//! The kernel is `k(x, x') = s * exp(-|x - x'|^2 / (2 l^2)) + noise * [x == x']`
//! with fixed signal variance `s` and noise variance; only `l` is learned.
//! The optimizer works on `t = ln l`.

use serde::{Deserialize, Serialize};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Diagonal jitter ladder tried when the Gram matrix will not factor.
const JITTER: [f64; 7] = [1e-10, 1e-9, 1e-8, 1e-7, 1e-6, 1e-5, 1e-4];

/// Number of log-spaced probes used to locate the basin of the maximum.
const COARSE_POINTS: usize = 24;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GpError {
    #[error("invalid GP input: {0}")]
    InvalidInput(String),
    #[error("ill-conditioned kernel")]
    IllConditioned,
    #[error("non-finite log marginal likelihood")]
    NonFinite,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GpFitConfig {
    pub l_bounds: (f64, f64),
    pub noise_variance: f64,
    pub signal_variance: f64,
    pub max_points: usize,
}

impl Default for GpFitConfig {
    fn default() -> Self {
        Self { l_bounds: (1e-3, 1e3), noise_variance: 1e-4, signal_variance: 1.0, max_points: 100 }
    }
}

impl GpFitConfig {
    pub fn validate(&self) -> Result<(), GpError> {
        let (lo, hi) = self.l_bounds;
        if !(lo > 0.0 && lo < hi && hi.is_finite()) {
            return Err(GpError::InvalidInput(format!("bad length-scale bounds ({lo}, {hi})")));
        }
        if !(self.noise_variance > 0.0 && self.signal_variance > 0.0) {
            return Err(GpError::InvalidInput("variances must be positive".into()));
        }
        if self.max_points < 2 {
            return Err(GpError::InvalidInput("max_points must be at least 2".into()));
        }
        Ok(())
    }
}

/// Log marginal likelihood of a fixed data set as a function of `ln l`.
#[derive(Debug, Clone)]
pub struct LengthScaleObjective {
    n: usize,
    sqdist: Vec<f64>,
    y: Vec<f64>,
    signal: f64,
    noise: f64,
}

struct Factored {
    chol: Vec<f64>,
    alpha: Vec<f64>,
    value: f64,
}

impl LengthScaleObjective {
    pub fn new(x: &[Vec<f64>], y: &[f64], cfg: &GpFitConfig) -> Result<Self, GpError> {
        let n = x.len();
        if n < 2 || y.len() != n {
            return Err(GpError::InvalidInput(format!(
                "need at least 2 rows with matching targets, got {} rows and {} targets",
                n,
                y.len()
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(GpError::InvalidInput("targets must be finite".into()));
        }
        let d = x[0].len();
        if x.iter().any(|r| r.len() != d) {
            return Err(GpError::InvalidInput("ragged input rows".into()));
        }
        let mut sqdist = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..i {
                let s: f64 = x[i].iter().zip(&x[j]).map(|(a, b)| (a - b) * (a - b)).sum();
                sqdist[i * n + j] = s;
                sqdist[j * n + i] = s;
            }
        }
        Ok(Self {
            n,
            sqdist,
            y: y.to_vec(),
            signal: cfg.signal_variance,
            noise: cfg.noise_variance,
        })
    }

    fn gram(&self, log_l: f64) -> Vec<f64> {
        let inv = 0.5 * (-2.0 * log_l).exp();
        let n = self.n;
        let mut k = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                let v = self.signal * (-self.sqdist[i * n + j] * inv).exp();
                k[i * n + j] = v;
                k[j * n + i] = v;
            }
            k[i * n + i] += self.noise;
        }
        k
    }

    fn factor(&self, log_l: f64) -> Result<Factored, GpError> {
        let n = self.n;
        let k = self.gram(log_l);
        let chol = match cholesky(&k, n) {
            Some(c) => c,
            None => JITTER
                .iter()
                .find_map(|&j| {
                    let mut kj = k.clone();
                    for i in 0..n {
                        kj[i * n + i] += j;
                    }
                    cholesky(&kj, n)
                })
                .ok_or(GpError::IllConditioned)?,
        };
        let z = forward(&chol, n, &self.y);
        let alpha = backward(&chol, n, &z);
        let fit: f64 = z.iter().map(|v| v * v).sum();
        let logdet: f64 = (0..n).map(|i| chol[i * n + i].ln()).sum::<f64>();
        let value = -0.5 * fit - logdet - 0.5 * n as f64 * LN_2PI;
        if !value.is_finite() {
            return Err(GpError::NonFinite);
        }
        Ok(Factored { chol, alpha, value })
    }

    pub fn value(&self, log_l: f64) -> Result<f64, GpError> {
        self.factor(log_l).map(|f| f.value)
    }

    /// Log marginal likelihood and its derivative with respect to `ln l`.
    pub fn value_and_gradient(&self, log_l: f64) -> Result<(f64, f64), GpError> {
        let n = self.n;
        let f = self.factor(log_l)?;
        let u = inverse_factor_rows(&f.chol, n);
        let inv = (-2.0 * log_l).exp();
        let mut grad = 0.0;
        for i in 0..n {
            let ui = &u[i * n + i..(i + 1) * n];
            for j in 0..i {
                // K^-1_ij = sum_{k >= i} (L^-1)_ki (L^-1)_kj
                let uj = &u[j * n + i..(j + 1) * n];
                let kinv_ij = dot(ui, uj);
                let r2 = self.sqdist[i * n + j] * inv;
                let dk = self.signal * (-0.5 * r2).exp() * r2;
                // off-diagonal pairs appear twice in the trace
                grad += (f.alpha[i] * f.alpha[j] - kinv_ij) * dk;
            }
        }
        if !grad.is_finite() {
            return Err(GpError::NonFinite);
        }
        Ok((f.value, grad))
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    // four partial sums let the loop pipeline
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(p, q)| p * q).sum();
    for (p, q) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += p[k] * q[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn cholesky(a: &[f64], n: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        let (done, rest) = l.split_at_mut(i * n);
        let row = &mut rest[..n];
        for j in 0..i {
            let s = a[i * n + j] - dot(&done[j * n..j * n + j], &row[..j]);
            row[j] = s / done[j * n + j];
        }
        let d = a[i * n + i] - dot(&row[..i], &row[..i]);
        if !(d > 0.0) || !d.is_finite() {
            return None;
        }
        row[i] = d.sqrt();
    }
    Some(l)
}

fn forward(l: &[f64], n: usize, b: &[f64]) -> Vec<f64> {
    let mut z = vec![0.0; n];
    for i in 0..n {
        z[i] = (b[i] - dot(&l[i * n..i * n + i], &z[..i])) / l[i * n + i];
    }
    z
}

fn backward(l: &[f64], n: usize, z: &[f64]) -> Vec<f64> {
    let mut x = vec![0.0; n];
    for i in (0..n).rev() {
        let mut s = z[i];
        for k in i + 1..n {
            s -= l[k * n + i] * x[k];
        }
        x[i] = s / l[i * n + i];
    }
    x
}

/// Rows of `L^-T`: row `c` holds column `c` of `L^-1`, zero before index `c`.
fn inverse_factor_rows(l: &[f64], n: usize) -> Vec<f64> {
    let mut u = vec![0.0; n * n];
    for c in 0..n {
        let row = &mut u[c * n..(c + 1) * n];
        for i in c..n {
            let s = if i == c { 1.0 } else { 0.0 } - dot(&l[i * n + c..i * n + i], &row[c..i]);
            row[i] = s / l[i * n + i];
        }
    }
    u
}

/// Finds the length scale maximizing the log marginal likelihood within `cfg.l_bounds`.
///
/// The search starts from `init_l` together with a coarse log-spaced scan of
/// the bounds, then refines the best basin by locating the sign change of the
/// analytic gradient (falling back to golden-section search when the bracket
/// does not straddle one).
pub fn fit_length_scale(
    x: &[Vec<f64>],
    y: &[f64],
    init_l: f64,
    cfg: &GpFitConfig,
) -> Result<f64, GpError> {
    cfg.validate()?;
    if x.iter().flatten().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(GpError::InvalidInput("inputs must be normalized to [0, 1]".into()));
    }
    let (l_min, l_max) = cfg.l_bounds;
    if !(init_l >= l_min && init_l <= l_max) {
        return Err(GpError::InvalidInput(format!("initial length scale {init_l} outside bounds")));
    }
    let obj = LengthScaleObjective::new(x, y, cfg)?;
    let (t_min, t_max) = (l_min.ln(), l_max.ln());
    let t_init = init_l.ln().clamp(t_min, t_max);

    let mut probes: Vec<f64> = (0..COARSE_POINTS)
        .map(|i| t_min + (t_max - t_min) * i as f64 / (COARSE_POINTS - 1) as f64)
        .collect();
    probes.push(t_init);
    probes.sort_by(f64::total_cmp);
    probes.dedup();

    let mut values = Vec::with_capacity(probes.len());
    let mut last_err = None;
    for &t in &probes {
        match obj.value(t) {
            Ok(v) => values.push(v),
            Err(e) => {
                values.push(f64::NEG_INFINITY);
                last_err = Some(e);
            }
        }
    }
    let best = values
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1).then(b.0.cmp(&a.0)))
        .map(|(i, _)| i)
        .expect("at least one probe");
    if values[best] == f64::NEG_INFINITY {
        return Err(last_err.unwrap_or(GpError::IllConditioned));
    }

    let lo = probes[best.saturating_sub(1)];
    let hi = probes[(best + 1).min(probes.len() - 1)];
    let t_best = probes[best];
    let refined = refine(&obj, lo, t_best, hi).unwrap_or(t_best);
    let t_star = match obj.value(refined) {
        Ok(v) if v >= values[best] => refined,
        _ => t_best,
    };
    Ok(if t_star >= t_max {
        l_max
    } else if t_star <= t_min {
        l_min
    } else {
        t_star.exp().clamp(l_min, l_max)
    })
}

fn refine(obj: &LengthScaleObjective, lo: f64, mid: f64, hi: f64) -> Result<f64, GpError> {
    let (_, g_mid) = obj.value_and_gradient(mid)?;
    if g_mid == 0.0 {
        return Ok(mid);
    }
    let (a, b) = if g_mid > 0.0 { (mid, hi) } else { (lo, mid) };
    if a == b {
        // maximum sits on a bound
        return Ok(mid);
    }
    let ga = if a == mid { g_mid } else { obj.value_and_gradient(a)?.1 };
    let gb = if b == mid { g_mid } else { obj.value_and_gradient(b)?.1 };
    if ga > 0.0 && gb < 0.0 {
        gradient_root(obj, a, ga, b, gb)
    } else {
        golden_section(obj, lo, hi)
    }
}

/// Illinois false-position on the gradient, keeping the `+ / -` bracket.
fn gradient_root(
    obj: &LengthScaleObjective,
    mut a: f64,
    mut ga: f64,
    mut b: f64,
    mut gb: f64,
) -> Result<f64, GpError> {
    let mut side = 0i8;
    for _ in 0..60 {
        if b - a < 1e-7 {
            break;
        }
        let mut t = (a * gb - b * ga) / (gb - ga);
        if !(t > a && t < b) {
            t = 0.5 * (a + b);
        }
        let (_, gt) = obj.value_and_gradient(t)?;
        if gt == 0.0 {
            return Ok(t);
        }
        if gt > 0.0 {
            a = t;
            ga = gt;
            if side == 1 {
                gb *= 0.5;
            }
            side = 1;
        } else {
            b = t;
            gb = gt;
            if side == -1 {
                ga *= 0.5;
            }
            side = -1;
        }
    }
    Ok(0.5 * (a + b))
}

fn golden_section(obj: &LengthScaleObjective, mut a: f64, mut b: f64) -> Result<f64, GpError> {
    let r = 0.5 * (5f64.sqrt() - 1.0);
    let mut c = b - r * (b - a);
    let mut d = a + r * (b - a);
    let mut fc = obj.value(c)?;
    let mut fd = obj.value(d)?;
    while b - a > 1e-7 {
        if fc >= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - r * (b - a);
            fc = obj.value(c)?;
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + r * (b - a);
            fd = obj.value(d)?;
        }
    }
    Ok(0.5 * (a + b))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Independent LML via Gaussian elimination with partial pivoting.
    fn lml_by_elimination(x: &[Vec<f64>], y: &[f64], l: f64, cfg: &GpFitConfig) -> f64 {
        let n = x.len();
        let mut a = vec![vec![0.0; n + 1]; n];
        for i in 0..n {
            for j in 0..n {
                let r2: f64 = x[i].iter().zip(&x[j]).map(|(p, q)| (p - q).powi(2)).sum();
                a[i][j] = cfg.signal_variance * (-r2 / (2.0 * l * l)).exp();
            }
            a[i][i] += cfg.noise_variance;
            a[i][n] = y[i];
        }
        let mut logdet = 0.0;
        for c in 0..n {
            let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
            a.swap(c, p);
            logdet += a[c][c].abs().ln();
            for r in c + 1..n {
                let f = a[r][c] / a[c][c];
                for k in c..=n {
                    a[r][k] -= f * a[c][k];
                }
            }
        }
        let mut sol = vec![0.0; n];
        for i in (0..n).rev() {
            let s: f64 = (i + 1..n).map(|k| a[i][k] * sol[k]).sum();
            sol[i] = (a[i][n] - s) / a[i][i];
        }
        let fit: f64 = y.iter().zip(&sol).map(|(p, q)| p * q).sum();
        -0.5 * fit - 0.5 * logdet - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()
    }

    fn grid_argmax(x: &[Vec<f64>], y: &[f64], cfg: &GpFitConfig) -> (f64, f64) {
        let (lo, hi) = (cfg.l_bounds.0.ln(), cfg.l_bounds.1.ln());
        let step = (hi - lo) / 199.0;
        let mut best = (f64::NEG_INFINITY, lo);
        for i in 0..200 {
            let t = lo + step * i as f64;
            let v = lml_by_elimination(x, y, t.exp(), cfg);
            if v > best.0 {
                best = (v, t);
            }
        }
        (best.1, step)
    }

    #[test]
    fn duplicate_rows_do_not_crash() {
        let cfg = GpFitConfig::default();
        let x = vec![vec![0.3], vec![0.3]];
        let l = fit_length_scale(&x, &[1.0, -1.0], 1.0, &cfg).unwrap();
        assert!(l >= cfg.l_bounds.0 && l <= cfg.l_bounds.1);
    }

    #[test]
    fn constant_targets_push_to_upper_bound() {
        let cfg = GpFitConfig::default();
        let x: Vec<Vec<f64>> = (0..12).map(|i| vec![i as f64 / 11.0]).collect();
        let y = vec![0.7; 12];
        let (t_grid, _) = grid_argmax(&x, &y, &cfg);
        assert!((t_grid - cfg.l_bounds.1.ln()).abs() < 1e-9);
        let l = fit_length_scale(&x, &y, 0.01, &cfg).unwrap();
        assert_eq!(l, cfg.l_bounds.1);
    }

    #[test]
    fn sine_fit_matches_grid_oracle() {
        let cfg = GpFitConfig::default();
        let x: Vec<Vec<f64>> = (0..30).map(|i| vec![i as f64 / 29.0]).collect();
        let y: Vec<f64> = x.iter().map(|r| (6.0 * std::f64::consts::PI * r[0]).sin()).collect();
        let (t_grid, _) = grid_argmax(&x, &y, &cfg);
        for init in [1e-3, 0.1, 1.0, 500.0] {
            let l = fit_length_scale(&x, &y, init, &cfg).unwrap();
            let rel = (l - t_grid.exp()).abs() / t_grid.exp();
            assert!(rel < 0.1, "init {init}: l {l} vs grid {}", t_grid.exp());
        }
    }

    #[test]
    fn objective_agrees_with_elimination() {
        let cfg = GpFitConfig::default();
        let x = vec![vec![0.1, 0.2], vec![0.5, 0.9], vec![0.8, 0.4], vec![0.3, 0.3]];
        let y = [0.5, -1.0, 0.2, 1.1];
        let obj = LengthScaleObjective::new(&x, &y, &cfg).unwrap();
        for l in [0.05, 0.3, 2.0] {
            let a = obj.value(f64::ln(l)).unwrap();
            let b = lml_by_elimination(&x, &y, l, &cfg);
            assert!((a - b).abs() < 1e-8 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }

    #[test]
    fn rejects_bad_inputs() {
        let cfg = GpFitConfig::default();
        assert!(matches!(
            fit_length_scale(&[vec![0.5]], &[1.0], 1.0, &cfg),
            Err(GpError::InvalidInput(_))
        ));
        assert!(matches!(
            fit_length_scale(&[vec![1.5], vec![0.0]], &[1.0, 0.0], 1.0, &cfg),
            Err(GpError::InvalidInput(_))
        ));
        assert!(matches!(
            fit_length_scale(&[vec![0.5], vec![0.0]], &[1.0, 0.0], 1e6, &cfg),
            Err(GpError::InvalidInput(_))
        ));
    }
}
