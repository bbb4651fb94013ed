//! Discretized location scores over the workspace.

use crate::error::{Error, Result};
use crate::polar::{checked_weight_total, gaussian_log_pdf, to_polar, von_mises_log_pdf, Point, SpatialMixture};
use serde::{Deserialize, Serialize};

/// Rectangular workspace extent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
}

impl Bounds {
    pub const UNIT: Bounds = Bounds { x_min: 0.0, x_max: 1.0, y_min: 0.0, y_max: 1.0 };

    pub fn grid(&self, resolution: usize) -> GridSpec {
        GridSpec { x_min: self.x_min, x_max: self.x_max, y_min: self.y_min, y_max: self.y_max, resolution }
    }

    pub fn contains(&self, p: Point) -> bool {
        p.x >= self.x_min && p.x <= self.x_max && p.y >= self.y_min && p.y <= self.y_max
    }

    /// Maps `p` affinely onto `[-1, 1]^2`.
    pub fn normalize(&self, p: Point) -> Point {
        Point::new(
            2.0 * (p.x - self.x_min) / (self.x_max - self.x_min) - 1.0,
            2.0 * (p.y - self.y_min) / (self.y_max - self.y_min) - 1.0,
        )
    }
}

impl Default for Bounds {
    fn default() -> Self {
        Bounds::UNIT
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub x_min: f64,
    pub x_max: f64,
    pub y_min: f64,
    pub y_max: f64,
    pub resolution: usize,
}

impl GridSpec {
    pub fn new(x_min: f64, x_max: f64, y_min: f64, y_max: f64, resolution: usize) -> Result<Self> {
        let g = Self { x_min, x_max, y_min, y_max, resolution };
        g.validate()?;
        Ok(g)
    }

    /// The unit square at the given resolution.
    pub fn unit(resolution: usize) -> Self {
        Self { x_min: 0.0, x_max: 1.0, y_min: 0.0, y_max: 1.0, resolution }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.x_min, self.x_max, self.y_min, self.y_max]
            .iter()
            .all(|v| v.is_finite());
        if !finite || !(self.x_max > self.x_min) || !(self.y_max > self.y_min) {
            return Err(Error::Domain(format!("grid bounds are empty or non-finite: {self:?}")));
        }
        if self.resolution < 2 {
            return Err(Error::Domain(format!("grid resolution must be >= 2, got {}", self.resolution)));
        }
        Ok(())
    }

    pub fn bounds(&self) -> Bounds {
        Bounds { x_min: self.x_min, x_max: self.x_max, y_min: self.y_min, y_max: self.y_max }
    }

    pub fn with_resolution(&self, resolution: usize) -> Self {
        Self { resolution, ..*self }
    }

    pub fn cell_width(&self) -> f64 {
        (self.x_max - self.x_min) / self.resolution as f64
    }

    pub fn cell_height(&self) -> f64 {
        (self.y_max - self.y_min) / self.resolution as f64
    }

    pub fn len(&self) -> usize {
        self.resolution * self.resolution
    }

    pub fn is_empty(&self) -> bool {
        self.resolution == 0
    }

    /// Center of the cell at `row` (y index, from `y_min`) and `col`.
    pub fn cell_center(&self, row: usize, col: usize) -> Point {
        Point::new(
            self.x_min + (col as f64 + 0.5) * self.cell_width(),
            self.y_min + (row as f64 + 0.5) * self.cell_height(),
        )
    }

    /// Center of the cell at a flat row-major index.
    pub fn center_of(&self, index: usize) -> Point {
        self.cell_center(index / self.resolution, index % self.resolution)
    }

    pub fn centers(&self) -> impl Iterator<Item = Point> + '_ {
        (0..self.len()).map(move |i| self.center_of(i))
    }

    /// Row-major index of the cell containing `p`, if inside the bounds.
    pub fn cell_of(&self, p: Point) -> Option<usize> {
        if !(p.x >= self.x_min && p.x <= self.x_max && p.y >= self.y_min && p.y <= self.y_max) {
            return None;
        }
        let col = (((p.x - self.x_min) / self.cell_width()) as usize).min(self.resolution - 1);
        let row = (((p.y - self.y_min) / self.cell_height()) as usize).min(self.resolution - 1);
        Some(row * self.resolution + col)
    }

    pub fn contains(&self, p: Point) -> bool {
        self.cell_of(p).is_some()
    }
}

/// Row-major grid of non-negative scores; row 0 lies along `y_min`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreField {
    pub grid: GridSpec,
    pub values: Vec<f64>,
}

impl ScoreField {
    pub fn new(grid: GridSpec, values: Vec<f64>) -> Result<Self> {
        grid.validate()?;
        if values.len() != grid.len() {
            return Err(Error::Domain(format!(
                "field has {} values, grid needs {}",
                values.len(),
                grid.len()
            )));
        }
        if values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(Error::Domain("field values must be finite and >= 0".into()));
        }
        Ok(Self { grid, values })
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.grid.resolution + col]
    }

    pub fn max(&self) -> f64 {
        self.values.iter().copied().fold(0.0, f64::max)
    }

    /// Rescaled so the peak is 1.
    pub fn max_normalized(&self) -> Result<ScoreField> {
        let m = self.max();
        if !(m > 0.0) {
            return Err(Error::EmptyField);
        }
        Ok(ScoreField { grid: self.grid, values: self.values.iter().map(|v| v / m).collect() })
    }

    /// The field read as a discrete distribution over cells.
    pub fn to_distribution(&self) -> Result<Vec<f64>> {
        let total: f64 = self.values.iter().sum();
        if !(total > 0.0) {
            return Err(Error::EmptyField);
        }
        Ok(self.values.iter().map(|v| v / total).collect())
    }
}

/// Evaluates the mixture at every cell center.
pub fn score_field(mix: &SpatialMixture, grid: &GridSpec) -> Result<ScoreField> {
    grid.validate()?;
    let total = checked_weight_total(mix)?;
    // Per-component log weight plus both log normalizers, hoisted out of the cell loop.
    let mut active = Vec::new();
    for c in mix.components.iter().filter(|c| c.weight > 0.0) {
        let p = &c.params;
        let offset = gaussian_log_pdf(p.mu_d, p.mu_d, p.var_d)? + von_mises_log_pdf(0.0, 0.0, p.kappa_phi)?
            - p.kappa_phi
            + (c.weight / total).ln();
        active.push((c, offset));
    }
    let mut values = Vec::with_capacity(grid.len());
    for x in grid.centers() {
        let mut acc = 0.0;
        for (c, offset) in &active {
            let (d, phi) = to_polar(x, c.anchor);
            let p = &c.params;
            let z = d - p.mu_d;
            acc += (offset - z * z / (2.0 * p.var_d) + p.kappa_phi * (phi - p.mu_phi).cos()).exp();
        }
        values.push(acc);
    }
    Ok(ScoreField { grid: *grid, values })
}

/// Pointwise product of the fields, rescaled so the peak is 1. The product
/// is accumulated as a sum of logarithms.
pub fn combine_score_fields(fields: &[ScoreField]) -> Result<ScoreField> {
    let first = fields
        .first()
        .ok_or_else(|| Error::Domain("combine_score_fields needs at least one field".into()))?;
    for f in &fields[1..] {
        if f.grid != first.grid {
            return Err(Error::GridMismatch(format!("{:?} vs {:?}", first.grid, f.grid)));
        }
    }
    let n = first.values.len();
    let mut logs = vec![0.0f64; n];
    for f in fields {
        if f.values.len() != n {
            return Err(Error::GridMismatch("value count differs from grid".into()));
        }
        let peak = f.max();
        if !(peak > 0.0) {
            return Err(Error::Contradiction("an input field is zero everywhere".into()));
        }
        let log_peak = peak.ln();
        for (acc, v) in logs.iter_mut().zip(&f.values) {
            *acc += v.ln() - log_peak;
        }
    }
    let top = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !top.is_finite() {
        return Err(Error::Contradiction("product of fields is zero everywhere".into()));
    }
    let values: Vec<f64> = logs.iter().map(|l| (l - top).exp()).collect();
    Ok(ScoreField { grid: first.grid, values })
}

/// Cell center and value of the maximum; ties go to the lowest row-major index.
pub fn grid_argmax(field: &ScoreField) -> Result<(Point, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, &v) in field.values.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::Domain(format!("non-finite field value at cell {i}")));
        }
        if v > 0.0 && best.is_none_or(|(_, b)| v > b) {
            best = Some((i, v));
        }
    }
    let (i, v) = best.ok_or(Error::EmptyField)?;
    Ok((field.grid.center_of(i), v))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::polar::{mixture_score, polar_log_score, MixtureComponent, PolarParams};
    use std::f64::consts::PI;

    fn one(anchor: Point, p: PolarParams) -> SpatialMixture {
        SpatialMixture::new(vec![MixtureComponent { weight: 1.0, params: p, anchor, node_id: 0 }])
    }

    #[test]
    fn constant_mixture_gives_constant_field() {
        // A huge variance and zero concentration make the score flat.
        let mix = one(Point::new(0.5, 0.5), PolarParams::new(0.0, 1e12, 0.0, 0.0).unwrap());
        let f = score_field(&mix, &GridSpec::unit(2)).unwrap();
        let c = f.values[0];
        assert!(f.values.iter().all(|v| (v - c).abs() <= 1e-12 * c));
    }

    #[test]
    fn cells_match_pointwise_mixture_score() {
        let mix = SpatialMixture::new(vec![
            MixtureComponent { weight: 2.0, params: PolarParams::new(0.2, 0.01, 1.0, 4.0).unwrap(), anchor: Point::new(0.3, 0.3), node_id: 0 },
            MixtureComponent { weight: 1.0, params: PolarParams::new(0.1, 0.3, -2.0, 0.0).unwrap(), anchor: Point::new(0.7, 0.6), node_id: 1 },
            MixtureComponent { weight: 0.0, params: PolarParams::new(0.1, 0.3, -2.0, 9.0).unwrap(), anchor: Point::new(0.1, 0.6), node_id: 2 },
        ]);
        let grid = GridSpec::new(-0.5, 1.5, 0.0, 1.0, 9).unwrap();
        let f = score_field(&mix, &grid).unwrap();
        for (i, p) in grid.centers().enumerate() {
            let direct = mixture_score(p, &mix).unwrap();
            assert!((f.values[i] - direct).abs() <= 1e-12 * direct, "cell {i}");
        }
    }

    #[test]
    fn sharp_component_peaks_at_its_mode() {
        let anchor = Point::new(0.3, 0.4);
        let p = PolarParams::new(0.25, 1e-4, PI / 4.0, 50.0).unwrap();
        let grid = GridSpec::unit(64);
        let f = score_field(&one(anchor, p), &grid).unwrap();
        let (at, _) = grid_argmax(&f).unwrap();
        assert_eq!(grid.cell_of(at), grid.cell_of(p.mode(anchor)));
    }

    #[test]
    fn refinement_moves_argmax_less_than_a_coarse_cell() {
        let mix = SpatialMixture::new(vec![
            MixtureComponent { weight: 0.7, params: PolarParams::new(0.2, 0.01, 1.0, 4.0).unwrap(), anchor: Point::new(0.3, 0.3), node_id: 0 },
            MixtureComponent { weight: 0.3, params: PolarParams::new(0.3, 0.02, -2.0, 2.0).unwrap(), anchor: Point::new(0.7, 0.6), node_id: 1 },
        ]);
        let coarse = GridSpec::unit(32);
        let (a, _) = grid_argmax(&score_field(&mix, &coarse).unwrap()).unwrap();
        let (b, _) = grid_argmax(&score_field(&mix, &coarse.with_resolution(64)).unwrap()).unwrap();
        assert!((a.x - b.x).abs() < coarse.cell_width() && (a.y - b.y).abs() < coarse.cell_height());
    }

    #[test]
    fn argmax_tie_break_and_errors() {
        let grid = GridSpec::unit(4);
        let uniform = ScoreField::new(grid, vec![1.0; 16]).unwrap();
        let (p, _) = grid_argmax(&uniform).unwrap();
        assert_eq!(p, grid.cell_center(0, 0));

        let mut v = vec![0.0; 16];
        v[9] = 0.3;
        let (p, s) = grid_argmax(&ScoreField::new(grid, v).unwrap()).unwrap();
        assert_eq!((p, s), (grid.cell_center(2, 1), 0.3));

        let zero = ScoreField::new(grid, vec![0.0; 16]).unwrap();
        assert!(matches!(grid_argmax(&zero), Err(Error::EmptyField)));
    }

    #[test]
    fn combine_single_and_mismatch() {
        let grid = GridSpec::unit(3);
        let f = ScoreField::new(grid, (0..9).map(|i| i as f64 * 0.5).collect()).unwrap();
        let c = combine_score_fields(std::slice::from_ref(&f)).unwrap();
        let want = f.max_normalized().unwrap();
        for (a, b) in c.values.iter().zip(&want.values) {
            assert!((a - b).abs() <= 1e-15);
        }
        let other = ScoreField::new(GridSpec::unit(4), vec![1.0; 16]).unwrap();
        assert!(matches!(combine_score_fields(&[f.clone(), other]), Err(Error::GridMismatch(_))));
        assert!(combine_score_fields(&[]).is_err());

        let mut a = vec![0.0; 9];
        a[0] = 1.0;
        let mut b = vec![0.0; 9];
        b[8] = 1.0;
        let disjoint = [ScoreField::new(grid, a).unwrap(), ScoreField::new(grid, b).unwrap()];
        assert!(matches!(combine_score_fields(&disjoint), Err(Error::Contradiction(_))));
    }

    #[test]
    fn right_of_one_left_of_other_meets_in_the_middle() {
        // "right of" the object at (0,0) and "left of" the object at (1,0).
        let right = one(Point::new(0.0, 0.0), PolarParams::new(0.5, 0.04, 0.0, 4.0).unwrap());
        let left = MixtureComponent { node_id: 1, ..one(Point::new(1.0, 0.0), PolarParams::new(0.5, 0.04, PI, 4.0).unwrap()).components[0].clone() };
        let left = SpatialMixture::new(vec![left]);
        let grid = GridSpec::new(-0.5, 1.5, -1.0, 1.0, 80).unwrap();
        let product = combine_score_fields(&[
            score_field(&right, &grid).unwrap(),
            score_field(&left, &grid).unwrap(),
        ])
        .unwrap();
        let (p, _) = grid_argmax(&product).unwrap();

        // Brute-force oracle: maximize the product of direct evaluations.
        let (mut best, mut best_p) = (f64::NEG_INFINITY, Point::new(0.0, 0.0));
        for i in 0..=400 {
            for j in 0..=400 {
                let q = Point::new(-0.5 + 2.0 * i as f64 / 400.0, -1.0 + 2.0 * j as f64 / 400.0);
                let s = polar_log_score(q, &right.components[0]).unwrap()
                    + polar_log_score(q, &left.components[0]).unwrap();
                if s > best {
                    best = s;
                    best_p = q;
                }
            }
        }
        assert!((best_p.x - 0.5).abs() < 0.01 && best_p.y.abs() < 0.01);
        assert!((p.x - 0.5).abs() <= grid.cell_width() && p.y.abs() <= grid.cell_height());
    }

    #[test]
    fn distribution_sums_to_one() {
        let mix = one(Point::new(0.2, 0.2), PolarParams::new(0.3, 0.05, 0.5, 1.0).unwrap());
        let f = score_field(&mix, &GridSpec::unit(50)).unwrap().max_normalized().unwrap();
        let total: f64 = f.to_distribution().unwrap().iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
    }
}
