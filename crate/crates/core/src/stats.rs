//! Binomial intervals, overlap ranking and small-sample regression.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntervalMethod {
    /// `p +- z * sqrt(p(1-p)/n)`, clamped to `[0, 1]`.
    #[default]
    Wald,
    Wilson,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProportionEstimate {
    pub p: f64,
    pub n: u64,
    /// Wald standard error.
    pub sigma: f64,
    pub lo: f64,
    pub hi: f64,
}

impl ProportionEstimate {
    /// Wald interval from an explicit proportion and standard error.
    pub fn from_sigma(p: f64, n: u64, sigma: f64, z: f64) -> Self {
        ProportionEstimate {
            p,
            n,
            sigma,
            lo: (p - z * sigma).max(0.0),
            hi: (p + z * sigma).min(1.0),
        }
    }

    pub fn intersects(&self, other: &ProportionEstimate) -> bool {
        self.lo <= other.hi && other.lo <= self.hi
    }
}

pub fn proportion_ci(k: u64, n: u64, z: f64) -> Result<ProportionEstimate> {
    proportion_ci_with(k, n, z, IntervalMethod::Wald)
}

pub fn proportion_ci_with(
    k: u64,
    n: u64,
    z: f64,
    method: IntervalMethod,
) -> Result<ProportionEstimate> {
    if n == 0 || k > n {
        return Err(Error::InvalidCounts { k, n });
    }
    let nf = n as f64;
    let p = k as f64 / nf;
    let sigma = (p * (1.0 - p) / nf).sqrt();
    Ok(match method {
        IntervalMethod::Wald => ProportionEstimate::from_sigma(p, n, sigma, z),
        IntervalMethod::Wilson => {
            let z2 = z * z;
            let denom = 1.0 + z2 / nf;
            let centre = (p + z2 / (2.0 * nf)) / denom;
            let half = z * (p * (1.0 - p) / nf + z2 / (4.0 * nf * nf)).sqrt() / denom;
            ProportionEstimate {
                p,
                n,
                sigma,
                lo: (centre - half).max(0.0),
                hi: (centre + half).min(1.0),
            }
        }
    })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankResult {
    /// Tie groups, best first; models inside a group by descending accuracy.
    pub groups: Vec<Vec<String>>,
}

impl RankResult {
    /// 1-based group rank of a model.
    pub fn rank_of(&self, model: &str) -> Option<usize> {
        self.groups
            .iter()
            .position(|g| g.iter().any(|m| m == model))
            .map(|i| i + 1)
    }
}

/// Groups models whose intervals are connected through pairwise
/// intersections, ordered by accuracy.
pub fn rank_models(estimates: &[(String, ProportionEstimate)]) -> RankResult {
    let mut by_lo: Vec<usize> = (0..estimates.len()).collect();
    by_lo.sort_by(|&a, &b| {
        estimates[a]
            .1
            .lo
            .total_cmp(&estimates[b].1.lo)
            .then_with(|| estimates[a].0.cmp(&estimates[b].0))
    });
    let mut components: Vec<Vec<usize>> = Vec::new();
    let mut reach = f64::NEG_INFINITY;
    for i in by_lo {
        let e = &estimates[i].1;
        match components.last_mut() {
            Some(c) if e.lo <= reach => {
                c.push(i);
                reach = reach.max(e.hi);
            }
            _ => {
                components.push(vec![i]);
                reach = e.hi;
            }
        }
    }
    let by_p = |a: &usize, b: &usize| {
        estimates[*b]
            .1
            .p
            .total_cmp(&estimates[*a].1.p)
            .then_with(|| estimates[*a].0.cmp(&estimates[*b].0))
    };
    for c in &mut components {
        c.sort_by(by_p);
    }
    components.sort_by(|a, b| by_p(&a[0], &b[0]));
    RankResult {
        groups: components
            .into_iter()
            .map(|c| c.into_iter().map(|i| estimates[i].0.clone()).collect())
            .collect(),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub pearson_r: f64,
    /// Two-sided p-value for zero slope; `None` when `n < 3`.
    pub p_value: Option<f64>,
    pub n: usize,
}

struct Moments {
    mean_x: f64,
    mean_y: f64,
    sxx: f64,
    syy: f64,
    sxy: f64,
}

fn moments(x: &[f64], y: &[f64]) -> Moments {
    let n = x.len() as f64;
    let mean_x = x.iter().sum::<f64>() / n;
    let mean_y = y.iter().sum::<f64>() / n;
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mean_x, b - mean_y);
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    Moments {
        mean_x,
        mean_y,
        sxx,
        syy,
        sxy,
    }
}

/// Ordinary least squares `y = slope * x + intercept`.
pub fn linear_fit(x: &[f64], y: &[f64]) -> Result<LinearFit> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch(x.len(), y.len()));
    }
    if x.len() < 2 {
        return Err(Error::InvalidArgument(
            "linear fit needs at least two points".into(),
        ));
    }
    let m = moments(x, y);
    if m.sxx == 0.0 {
        return Err(Error::ConstantRegressor);
    }
    let slope = m.sxy / m.sxx;
    let intercept = m.mean_y - slope * m.mean_x;
    let r = if m.syy == 0.0 {
        0.0
    } else {
        (m.sxy / (m.sxx.sqrt() * m.syy.sqrt())).clamp(-1.0, 1.0)
    };
    let n = x.len();
    let p_value = (n >= 3).then(|| correlation_p_value(r, n));
    Ok(LinearFit {
        slope,
        intercept,
        pearson_r: r,
        p_value,
        n,
    })
}

/// Two-sided p-value of `t = r sqrt((n-2)/(1-r^2))` under Student's t with
/// `n - 2` degrees of freedom.
pub fn correlation_p_value(r: f64, n: usize) -> f64 {
    let df = (n - 2) as f64;
    let one_minus = 1.0 - r * r;
    if one_minus <= 0.0 {
        return 0.0;
    }
    let t = r * (df / one_minus).sqrt();
    student_t_two_sided(t, df)
}

/// `P(|T| >= |t|)` for Student's t with `df` degrees of freedom.
pub fn student_t_two_sided(t: f64, df: f64) -> f64 {
    if t == 0.0 {
        return 1.0;
    }
    regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t))
}

pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch(x.len(), y.len()));
    }
    let m = moments(x, y);
    if m.sxx == 0.0 || m.syy == 0.0 {
        return Err(Error::ConstantRegressor);
    }
    Ok((m.sxy / (m.sxx.sqrt() * m.syy.sqrt())).clamp(-1.0, 1.0))
}

/// Correlation of `x` and `y` after removing the linear effect of `z`.
pub fn partial_correlation(x: &[f64], y: &[f64], z: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(Error::LengthMismatch(x.len(), y.len()));
    }
    if x.len() != z.len() {
        return Err(Error::LengthMismatch(x.len(), z.len()));
    }
    if x.len() < 3 {
        return Err(Error::InvalidArgument(
            "partial correlation needs at least three points".into(),
        ));
    }
    let rxy = pearson(x, y)?;
    let rxz = pearson(x, z)?;
    let ryz = pearson(y, z)?;
    let dx = 1.0 - rxz * rxz;
    let dy = 1.0 - ryz * ryz;
    if dx <= 1e-12 || dy <= 1e-12 {
        return Err(Error::DegenerateControl);
    }
    Ok(((rxy - rxz * ryz) / (dx * dy).sqrt()).clamp(-1.0, 1.0))
}

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_93,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_13,
    -176.615_029_162_140_59,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_571_6e-6,
    1.505_632_735_149_311_6e-7,
];

/// `ln Gamma(x)` for `x > 0`.
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut acc = LANCZOS[0];
    for (i, c) in LANCZOS.iter().enumerate().skip(1) {
        acc += c / (x + i as f64);
    }
    let t = x + LANCZOS_G + 0.5;
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
}

/// `I_x(a, b)`, evaluated with the continued fraction on whichever tail
/// converges fastest.
pub fn regularized_incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_continued_fraction(a, b, x) / a
    } else {
        1.0 - ln_front.exp() * beta_continued_fraction(b, a, 1.0 - x) / b
    }
}

/// Modified Lentz evaluation of the incomplete-beta continued fraction.
fn beta_continued_fraction(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=500 {
        let m = f64::from(m);
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}
