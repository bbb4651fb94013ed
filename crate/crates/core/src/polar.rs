//! Instance-anchored polar distributions: a Gaussian over the distance from
//! an anchor and a von Mises over the bearing, mixed across scene objects.

use crate::bessel;
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Upper clamp on the angular concentration.
pub const KAPPA_MAX: f64 = 500.0;
/// Lower floor on the distance variance.
pub const VAR_MIN: f64 = 1e-6;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// A point in the workspace frame (+x right, +y up). Serialized as `[x, y]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn dist(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl From<[f64; 2]> for Point {
    fn from([x, y]: [f64; 2]) -> Self {
        Self { x, y }
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

/// Wraps an angle into `[-π, π)`.
pub fn wrap_angle(a: f64) -> f64 {
    (a + PI).rem_euclid(2.0 * PI) - PI
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PolarParams {
    pub mu_d: f64,
    pub var_d: f64,
    pub mu_phi: f64,
    pub kappa_phi: f64,
}

impl PolarParams {
    /// Validates and normalizes: `mu_phi` is wrapped, `var_d` floored at
    /// [`VAR_MIN`] and `kappa_phi` clamped to `[0, KAPPA_MAX]`.
    pub fn new(mu_d: f64, var_d: f64, mu_phi: f64, kappa_phi: f64) -> Result<Self> {
        if !(mu_d >= 0.0) || !mu_d.is_finite() {
            return Err(Error::Domain(format!("mu_d must be finite and >= 0, got {mu_d}")));
        }
        if !(var_d > 0.0) || !var_d.is_finite() {
            return Err(Error::Domain(format!("var_d must be finite and > 0, got {var_d}")));
        }
        if !mu_phi.is_finite() {
            return Err(Error::Domain(format!("mu_phi must be finite, got {mu_phi}")));
        }
        if !(kappa_phi >= 0.0) {
            return Err(Error::Domain(format!("kappa_phi must be >= 0, got {kappa_phi}")));
        }
        Ok(Self {
            mu_d,
            var_d: var_d.max(VAR_MIN),
            mu_phi: wrap_angle(mu_phi),
            kappa_phi: kappa_phi.min(KAPPA_MAX),
        })
    }

    /// The point of highest score relative to `anchor`.
    pub fn mode(&self, anchor: Point) -> Point {
        Point::new(
            anchor.x + self.mu_d * self.mu_phi.cos(),
            anchor.y + self.mu_d * self.mu_phi.sin(),
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureComponent {
    pub weight: f64,
    pub params: PolarParams,
    pub anchor: Point,
    pub node_id: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpatialMixture {
    pub components: Vec<MixtureComponent>,
}

impl SpatialMixture {
    pub fn new(components: Vec<MixtureComponent>) -> Self {
        Self { components }
    }

    pub fn weight_sum(&self) -> f64 {
        self.components.iter().map(|c| c.weight).sum()
    }

    /// Rescales weights onto the simplex.
    pub fn normalized(&self) -> Result<SpatialMixture> {
        if self.components.is_empty() {
            return Err(Error::Domain("mixture has no components".into()));
        }
        if self.components.iter().any(|c| !(c.weight >= 0.0) || !c.anchor.is_finite()) {
            return Err(Error::Domain("mixture weights must be >= 0 with finite anchors".into()));
        }
        let total = self.weight_sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::ZeroWeights);
        }
        let mut out = self.clone();
        for c in &mut out.components {
            c.weight /= total;
        }
        Ok(out)
    }

    /// Index of the heaviest component; ties go to the lowest index.
    pub fn argmax_weight(&self) -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (i, c) in self.components.iter().enumerate() {
            if best.is_none_or(|(_, w)| c.weight > w) {
                best = Some((i, c.weight));
            }
        }
        best.map(|(i, _)| i)
    }
}

pub fn gaussian_pdf(d: f64, mu_d: f64, var_d: f64) -> Result<f64> {
    Ok(gaussian_log_pdf(d, mu_d, var_d)?.exp())
}

pub fn gaussian_log_pdf(d: f64, mu_d: f64, var_d: f64) -> Result<f64> {
    if !(var_d > 0.0) {
        return Err(Error::Domain(format!("var_d must be > 0, got {var_d}")));
    }
    let z = d - mu_d;
    Ok(-0.5 * (LN_2PI + var_d.ln()) - z * z / (2.0 * var_d))
}

pub fn von_mises_pdf(phi: f64, mu_phi: f64, kappa_phi: f64) -> Result<f64> {
    Ok(von_mises_log_pdf(phi, mu_phi, kappa_phi)?.exp())
}

pub fn von_mises_log_pdf(phi: f64, mu_phi: f64, kappa_phi: f64) -> Result<f64> {
    if !(kappa_phi >= 0.0) || !kappa_phi.is_finite() {
        return Err(Error::Domain(format!("kappa_phi must be finite and >= 0, got {kappa_phi}")));
    }
    Ok(kappa_phi * (phi - mu_phi).cos() - LN_2PI - bessel::log_i0(kappa_phi))
}

/// Distance and bearing of `x` seen from `anchor`. The bearing at the
/// anchor itself is defined as 0.
pub fn to_polar(x: Point, anchor: Point) -> (f64, f64) {
    let dx = x.x - anchor.x;
    let dy = x.y - anchor.y;
    let d = dx.hypot(dy);
    let phi = if d == 0.0 { 0.0 } else { dy.atan2(dx) };
    (d, phi)
}

pub fn polar_log_score(x: Point, comp: &MixtureComponent) -> Result<f64> {
    if !x.is_finite() {
        return Err(Error::Domain("evaluation point must be finite".into()));
    }
    let (d, phi) = to_polar(x, comp.anchor);
    let p = &comp.params;
    Ok(gaussian_log_pdf(d, p.mu_d, p.var_d)? + von_mises_log_pdf(phi, p.mu_phi, p.kappa_phi)?)
}

/// Weighted sum of component scores with weights normalized to sum to one.
pub fn mixture_score(x: Point, mix: &SpatialMixture) -> Result<f64> {
    let total = checked_weight_total(mix)?;
    let mut acc = 0.0;
    for c in &mix.components {
        if c.weight > 0.0 {
            acc += c.weight / total * polar_log_score(x, c)?.exp();
        }
    }
    Ok(acc)
}

pub(crate) fn checked_weight_total(mix: &SpatialMixture) -> Result<f64> {
    if mix.components.is_empty() {
        return Err(Error::Domain("mixture has no components".into()));
    }
    if mix.components.iter().any(|c| !(c.weight >= 0.0)) {
        return Err(Error::Domain("mixture weights must be >= 0".into()));
    }
    let total = mix.weight_sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::ZeroWeights);
    }
    Ok(total)
}

/// Maximum-likelihood polar parameters from `(d, phi)` samples.
///
/// The concentration solves `I1(k)/I0(k) = R` for the mean resultant
/// length `R`, starting from the Banerjee approximation and refining with
/// Newton steps.
pub fn fit_polar_mle(samples: &[(f64, f64)]) -> Result<PolarParams> {
    if samples.len() < 2 {
        return Err(Error::Domain(format!(
            "fit_polar_mle needs at least 2 samples, got {}",
            samples.len()
        )));
    }
    if let Some(&(d, _)) = samples.iter().find(|(d, _)| !(*d >= 0.0) || !d.is_finite()) {
        return Err(Error::Domain(format!("distance samples must be >= 0, got {d}")));
    }
    if samples.iter().any(|(_, phi)| !phi.is_finite()) {
        return Err(Error::Domain("angle samples must be finite".into()));
    }
    let n = samples.len() as f64;
    let mu_d = samples.iter().map(|s| s.0).sum::<f64>() / n;
    let var_d = samples.iter().map(|s| (s.0 - mu_d).powi(2)).sum::<f64>() / (n - 1.0);
    let (sin_sum, cos_sum) = samples
        .iter()
        .fold((0.0, 0.0), |(s, c), &(_, phi)| (s + phi.sin(), c + phi.cos()));
    let (s_bar, c_bar) = (sin_sum / n, cos_sum / n);
    let mu_phi = s_bar.atan2(c_bar);
    let r_bar = s_bar.hypot(c_bar).min(1.0);
    Ok(PolarParams {
        mu_d,
        var_d: var_d.max(VAR_MIN),
        mu_phi: wrap_angle(mu_phi),
        kappa_phi: solve_kappa(r_bar),
    })
}

/// Inverts the mean resultant length `A(k) = I1(k)/I0(k)`.
pub fn solve_kappa(r_bar: f64) -> f64 {
    if r_bar <= 0.0 {
        return 0.0;
    }
    if r_bar >= bessel::i1_over_i0(KAPPA_MAX) {
        return KAPPA_MAX;
    }
    let r2 = r_bar * r_bar;
    let mut kappa = (r_bar * (2.0 - r2) / (1.0 - r2)).min(KAPPA_MAX);
    for _ in 0..20 {
        let a = bessel::i1_over_i0(kappa);
        let slope = if kappa < 1e-8 { 0.5 } else { 1.0 - a / kappa - a * a };
        if slope <= 0.0 {
            break;
        }
        let next = (kappa - (a - r_bar) / slope).clamp(0.0, KAPPA_MAX);
        let done = (next - kappa).abs() <= 1e-14 * kappa.max(1e-300);
        kappa = next;
        if done {
            break;
        }
    }
    kappa
}

/// Draws `n` samples: the distance from a Gaussian truncated at zero
/// (negative draws are redrawn), the bearing by Best-Fisher rejection.
/// `params` is used as given, so concentrations above [`KAPPA_MAX`] work.
pub fn sample_polar(params: &PolarParams, n: usize, seed: u64) -> Vec<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(params.mu_d, params.var_d.sqrt()).expect("var_d > 0");
    (0..n)
        .map(|_| {
            let d = loop {
                let d: f64 = normal.sample(&mut rng);
                if d >= 0.0 {
                    break d;
                }
            };
            let phi = sample_von_mises(&mut rng, params.mu_phi, params.kappa_phi);
            (d, phi)
        })
        .collect()
}

fn sample_von_mises<R: Rng>(rng: &mut R, mu: f64, kappa: f64) -> f64 {
    if kappa < 1e-8 {
        return wrap_angle(rng.gen_range(-PI..PI));
    }
    let tau = 1.0 + (1.0 + 4.0 * kappa * kappa).sqrt();
    let rho = (tau - (2.0 * tau).sqrt()) / (2.0 * kappa);
    let r = (1.0 + rho * rho) / (2.0 * rho);
    loop {
        let u1: f64 = rng.gen();
        let u2: f64 = rng.gen();
        let u3: f64 = rng.gen();
        let z = (PI * u1).cos();
        let f = (1.0 + r * z) / (r + z);
        let c = kappa * (r - f);
        if c * (2.0 - c) - u2 > 0.0 || (c / u2).ln() + 1.0 - c >= 0.0 {
            let theta = f.clamp(-1.0, 1.0).acos();
            let signed = if u3 > 0.5 { theta } else { -theta };
            return wrap_angle(mu + signed);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn comp(anchor: Point, params: PolarParams) -> MixtureComponent {
        MixtureComponent { weight: 1.0, params, anchor, node_id: 0 }
    }

    fn trapezoid(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let inner: f64 = (1..n).map(|i| f(a + i as f64 * h)).sum();
        h * (0.5 * (f(a) + f(b)) + inner)
    }

    #[test]
    fn gaussian_values() {
        assert!((gaussian_pdf(0.5, 0.5, 1.0).unwrap() - 0.398_942_280_4).abs() < 1e-9);
        let one_sigma = (-0.5f64).exp() / (2.0 * PI).sqrt();
        assert!((gaussian_pdf(1.5, 0.5, 1.0).unwrap() - one_sigma).abs() < 1e-15);
        assert!((one_sigma - 0.241_970_7).abs() < 1e-7);
        assert!((gaussian_pdf(0.5, 0.5, 0.25).unwrap() - 0.797_884_560_8).abs() < 1e-9);
        assert!(gaussian_pdf(0.0, 0.0, 0.0).is_err());
        assert!(gaussian_pdf(0.0, 0.0, -1.0).is_err());
    }

    #[test]
    fn von_mises_values() {
        for phi in [-3.0, 0.0, 1.0, 2.5] {
            assert!((von_mises_pdf(phi, 0.0, 0.0).unwrap() - 1.0 / (2.0 * PI)).abs() < 1e-15);
        }
        // e^2 / (2π I0(2)) with I0(2) = 2.2795853023360673 from the series.
        let want = 2f64.exp() / (2.0 * PI * 2.279_585_302_336_067_3);
        let got = von_mises_pdf(PI / 2.0, PI / 2.0, 2.0).unwrap();
        assert!((got - want).abs() < 1e-12);
        assert!((got - 0.5159).abs() < 1e-4);
        let a = von_mises_pdf(PI, -PI, 5.0).unwrap();
        let b = von_mises_pdf(PI, PI, 5.0).unwrap();
        assert!((a - b).abs() < 1e-12 * b);
        assert!(von_mises_pdf(0.0, 0.0, -0.1).is_err());
    }

    #[test]
    fn densities_integrate_to_one() {
        for kappa in [0.0, 0.5, 2.0, 10.0, 50.0] {
            let total = trapezoid(|p| von_mises_pdf(p, 0.3, kappa).unwrap(), -PI, PI, 10_000);
            assert!((total - 1.0).abs() < 1e-6, "kappa {kappa}: {total}");
        }
        for (mu, var) in [(0.0, 1.0), (0.5, 0.01), (3.0, 4.0)] {
            let s = f64::sqrt(var);
            let total = trapezoid(|d| gaussian_pdf(d, mu, var).unwrap(), mu - 8.0 * s, mu + 8.0 * s, 10_000);
            assert!((total - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn polar_log_score_cases() {
        let a = Point::new(0.2, -0.1);
        let c = comp(a, PolarParams::new(0.5, 1.0, 0.0, 0.0).unwrap());
        let got = polar_log_score(Point::new(0.7, -0.1), &c).unwrap();
        let want = (0.398_942_280_401_432_7f64 * 0.159_154_943_091_895_34).ln();
        assert!((got - want).abs() < 1e-12);

        // At the anchor the bearing is 0: matches a point on the +x ray at d = 0.
        let c = comp(a, PolarParams::new(0.3, 0.2, 0.0, 3.0).unwrap());
        let at = polar_log_score(a, &c).unwrap();
        let expected = gaussian_log_pdf(0.0, 0.3, 0.2).unwrap() + von_mises_log_pdf(0.0, 0.0, 3.0).unwrap();
        assert!((at - expected).abs() < 1e-12);
    }

    #[test]
    fn ring_maximum_points_along_mean_bearing() {
        let a = Point::new(0.0, 0.0);
        let c = comp(a, PolarParams::new(0.3, 0.01, PI / 2.0, 4.0).unwrap());
        let (mut best, mut best_angle) = (f64::NEG_INFINITY, 0.0);
        for i in 0..3600 {
            let t = -PI + i as f64 * (2.0 * PI / 3600.0);
            let s = polar_log_score(Point::new(0.3 * t.cos(), 0.3 * t.sin()), &c).unwrap();
            if s > best {
                best = s;
                best_angle = t;
            }
        }
        assert!((best_angle - PI / 2.0).abs() < 2e-3);
        let top = polar_log_score(Point::new(0.0, 0.3), &c).unwrap();
        assert!(top >= best - 1e-12);
    }

    #[test]
    fn mixture_identities() {
        let p = PolarParams::new(0.4, 0.05, 0.7, 3.0).unwrap();
        let x = Point::new(0.5, 0.6);
        let single = SpatialMixture::new(vec![comp(Point::new(0.1, 0.2), p)]);
        let direct = polar_log_score(x, &single.components[0]).unwrap().exp();
        assert!((mixture_score(x, &single).unwrap() - direct).abs() < 1e-15);

        let mut half = single.components[0].clone();
        half.weight = 0.5;
        let twin = SpatialMixture::new(vec![half.clone(), half]);
        assert!((mixture_score(x, &twin).unwrap() - direct).abs() < 1e-14);

        let sym = PolarParams::new(0.3, 0.02, PI / 2.0, 2.0).unwrap();
        let mix = SpatialMixture::new(vec![
            comp(Point::new(0.0, 0.0), sym),
            MixtureComponent { node_id: 1, ..comp(Point::new(2.0, 0.0), sym) },
        ]);
        let left = mixture_score(Point::new(0.0, 0.3), &mix).unwrap();
        let right = mixture_score(Point::new(2.0, 0.3), &mix).unwrap();
        assert!((left - right).abs() < 1e-12 * left);

        let zero = SpatialMixture::new(vec![MixtureComponent { weight: 0.0, ..comp(Point::new(0.0, 0.0), sym) }]);
        assert!(matches!(mixture_score(x, &zero), Err(Error::ZeroWeights)));
    }

    #[test]
    fn fit_degenerate_cases() {
        let uniform: Vec<(f64, f64)> = (0..360)
            .map(|i| (0.5, -PI + i as f64 * 2.0 * PI / 360.0))
            .collect();
        let fit = fit_polar_mle(&uniform).unwrap();
        assert!((fit.mu_d - 0.5).abs() < 1e-12);
        assert!(fit.kappa_phi <= 1e-6);
        assert_eq!(fit.var_d, VAR_MIN);

        let same: Vec<(f64, f64)> = (0..10).map(|i| (i as f64 * 0.1, 1.0)).collect();
        let fit = fit_polar_mle(&same).unwrap();
        assert!((fit.mu_phi - 1.0).abs() < 1e-12);
        assert_eq!(fit.kappa_phi, KAPPA_MAX);

        assert!(fit_polar_mle(&[(1.0, 0.0)]).is_err());
        assert!(fit_polar_mle(&[(1.0, 0.0), (-0.1, 0.0)]).is_err());
    }

    #[test]
    fn fit_recovers_sampled_parameters() {
        let truth = PolarParams::new(1.0, 0.04, 0.7, 2.0).unwrap();
        let samples = sample_polar(&truth, 10_000, 11);
        let fit = fit_polar_mle(&samples).unwrap();
        assert!((fit.kappa_phi - 2.0).abs() / 2.0 < 0.05, "{fit:?}");
        assert!((fit.mu_phi - 0.7).abs() < 0.05);
        assert!((fit.mu_d - 1.0).abs() < 0.05);
    }

    #[test]
    fn sampling_is_deterministic_and_concentrates() {
        let sharp = PolarParams { mu_d: 1.0, var_d: 1e-6, mu_phi: 0.0, kappa_phi: 1e6 };
        let draws = sample_polar(&sharp, 3, 5);
        assert_eq!(draws.len(), 3);
        for (d, phi) in &draws {
            assert!((d - 1.0).abs() < 1e-2 && phi.abs() < 1e-2, "{d} {phi}");
        }
        let p = PolarParams::new(0.2, 0.01, -2.0, 2.0).unwrap();
        assert_eq!(sample_polar(&p, 50, 9), sample_polar(&p, 50, 9));
        assert_ne!(sample_polar(&p, 50, 9), sample_polar(&p, 50, 10));
        let big = sample_polar(&p, 10_000, 3);
        let (s, c) = big.iter().fold((0.0, 0.0), |(s, c), (_, t)| (s + t.sin(), c + t.cos()));
        assert!((s.atan2(c) - (-2.0)).abs() < 0.05);
    }

    #[test]
    fn kappa_inversion_round_trips() {
        for kappa in [0.01, 0.5, 1.0, 2.0, 7.5, 20.0, 100.0, 400.0] {
            let r = bessel::i1_over_i0(kappa);
            let back = solve_kappa(r);
            assert!((back - kappa).abs() / kappa < 1e-8, "{kappa} -> {back}");
        }
    }

    #[test]
    fn params_are_normalized() {
        let p = PolarParams::new(1.0, 1e-12, 3.0 * PI, 1e4).unwrap();
        assert_eq!(p.var_d, VAR_MIN);
        assert_eq!(p.kappa_phi, KAPPA_MAX);
        assert!((p.mu_phi.abs() - PI).abs() < 1e-12);
        assert!(PolarParams::new(-1.0, 1.0, 0.0, 0.0).is_err());
        assert!(PolarParams::new(1.0, 0.0, 0.0, 0.0).is_err());
        assert!(PolarParams::new(1.0, 1.0, 0.0, -1.0).is_err());
    }
}
