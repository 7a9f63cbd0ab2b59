//! Cosine Fourier basis on a box domain, trajectory and distribution
//! coefficients, Sobolev-type frequency weights, and the ergodic metric.
//!
//! Coefficients are stored densely over the full lattice `{0..=K}^n` in
//! row-major order (the last dimension varies fastest).

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box the distribution lives on.
///
/// Periodic dimensions are wrapped into the box before basis evaluation;
/// other dimensions are clamped. The periodic flags are a property of the
/// system the domain is used with and are not serialized.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "DomainRepr")]
pub struct Domain {
    lower: Vec<f64>,
    lengths: Vec<f64>,
    #[serde(skip)]
    periodic: Vec<bool>,
}

#[derive(Deserialize)]
struct DomainRepr {
    lower: Vec<f64>,
    lengths: Vec<f64>,
}

impl TryFrom<DomainRepr> for Domain {
    type Error = Error;

    fn try_from(r: DomainRepr) -> Result<Self> {
        Domain::new(r.lower, r.lengths)
    }
}

impl Domain {
    pub fn new(lower: Vec<f64>, lengths: Vec<f64>) -> Result<Self> {
        if lower.is_empty() {
            return Err(Error::InvalidDomain("domain needs at least one dimension".into()));
        }
        if lower.len() != lengths.len() {
            return Err(Error::DimensionMismatch {
                expected: lower.len(),
                got: lengths.len(),
            });
        }
        if lower.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidDomain("non-finite lower bound".into()));
        }
        if lengths.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(Error::InvalidDomain(format!(
                "lengths must be positive, got {lengths:?}"
            )));
        }
        let periodic = vec![false; lower.len()];
        Ok(Self {
            lower,
            lengths,
            periodic,
        })
    }

    /// Unit box `[0, 1]^n`.
    pub fn unit(n: usize) -> Self {
        Self::new(vec![0.0; n], vec![1.0; n]).expect("unit box is valid")
    }

    pub fn with_periodic(mut self, periodic: Vec<bool>) -> Result<Self> {
        if periodic.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: periodic.len(),
            });
        }
        self.periodic = periodic;
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn lengths(&self) -> &[f64] {
        &self.lengths
    }

    pub fn upper(&self, i: usize) -> f64 {
        self.lower[i] + self.lengths[i]
    }

    pub fn periodic(&self) -> &[bool] {
        &self.periodic
    }

    pub fn volume(&self) -> f64 {
        self.lengths.iter().product()
    }

    pub fn contains(&self, p: &[f64]) -> bool {
        p.len() == self.dim()
            && p
                .iter()
                .enumerate()
                .all(|(i, v)| *v >= self.lower[i] && *v <= self.upper(i))
    }

    pub fn center(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|i| self.lower[i] + 0.5 * self.lengths[i])
            .collect()
    }

    /// Wraps periodic coordinates and clamps the rest into the box, in place.
    /// Returns a bitmask of the dimensions that had to be clamped.
    pub fn fold(&self, p: &mut [f64]) -> u32 {
        let mut clamped = 0u32;
        for (i, v) in p.iter_mut().enumerate() {
            let lo = self.lower[i];
            let hi = lo + self.lengths[i];
            if *v >= lo && *v <= hi {
                continue;
            }
            if self.periodic[i] {
                *v = lo + (*v - lo).rem_euclid(self.lengths[i]);
            } else {
                *v = v.clamp(lo, hi);
                clamped |= 1 << i;
            }
        }
        clamped
    }
}

/// Per-dimension frequency tuple selecting one basis function.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MultiIndex(pub Vec<usize>);

impl MultiIndex {
    pub fn zero(n: usize) -> Self {
        Self(vec![0; n])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm_squared(&self) -> usize {
        self.0.iter().map(|k| k * k).sum()
    }
}

impl From<&[usize]> for MultiIndex {
    fn from(k: &[usize]) -> Self {
        Self(k.to_vec())
    }
}

/// Number of lattice points in `{0..=order}^dim`.
pub fn lattice_len(order: usize, dim: usize) -> usize {
    (order + 1).pow(dim as u32)
}

/// Row-major position of `k` in the lattice.
pub fn lattice_position(k: &[usize], order: usize) -> usize {
    k.iter().fold(0, |acc, &ki| acc * (order + 1) + ki)
}

/// All multi-indices of the lattice, in storage order.
pub fn lattice(order: usize, dim: usize) -> impl Iterator<Item = MultiIndex> {
    let side = order + 1;
    (0..lattice_len(order, dim)).map(move |mut flat| {
        let mut k = vec![0; dim];
        for d in (0..dim).rev() {
            k[d] = flat % side;
            flat /= side;
        }
        MultiIndex(k)
    })
}

/// Normalizing factor giving each basis function unit L2 norm on the box.
pub fn normalizer(k: &MultiIndex, domain: &Domain) -> Result<f64> {
    check_dim(domain.dim(), k.dim())?;
    Ok(k.0
        .iter()
        .zip(domain.lengths())
        .map(|(&ki, &l)| if ki == 0 { l.sqrt() } else { (l / 2.0).sqrt() })
        .product())
}

/// `F_k(x) = (1/h_k) prod_i cos(k_i pi (x_i - lower_i) / L_i)`.
///
/// `x` is folded into the domain first.
pub fn basis_eval(k: &MultiIndex, x: &[f64], domain: &Domain) -> Result<f64> {
    check_dim(domain.dim(), x.len())?;
    let h = normalizer(k, domain)?;
    let mut p = x.to_vec();
    domain.fold(&mut p);
    let prod: f64 = (0..domain.dim())
        .map(|i| (k.0[i] as f64 * PI * (p[i] - domain.lower()[i]) / domain.lengths()[i]).cos())
        .product();
    Ok(prod / h)
}

/// Fourier coefficients over the full lattice.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoefficientSet {
    order: usize,
    dim: usize,
    values: Vec<f64>,
}

impl CoefficientSet {
    pub fn zeros(order: usize, dim: usize) -> Self {
        Self {
            order,
            dim,
            values: vec![0.0; lattice_len(order, dim)],
        }
    }

    pub fn from_values(order: usize, dim: usize, values: Vec<f64>) -> Result<Self> {
        let expected = lattice_len(order, dim);
        if values.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                got: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("coefficient values"));
        }
        Ok(Self { order, dim, values })
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn get(&self, k: &[usize]) -> f64 {
        self.values[lattice_position(k, self.order)]
    }

    pub fn same_lattice(&self, other: &CoefficientSet) -> Result<()> {
        if self.order != other.order || self.dim != other.dim {
            return Err(Error::LatticeMismatch {
                left_order: self.order,
                left_dim: self.dim,
                right_order: other.order,
                right_dim: other.dim,
            });
        }
        Ok(())
    }

    /// `self += w * other`
    pub fn add_scaled(&mut self, w: f64, other: &CoefficientSet) -> Result<()> {
        self.same_lattice(other)?;
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += w * b;
        }
        Ok(())
    }

    pub fn max_abs_diff(&self, other: &CoefficientSet) -> Result<f64> {
        self.same_lattice(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }
}

/// Frequency weights `(1 + |k|^2)^(-(n+1)/2)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyWeights {
    order: usize,
    dim: usize,
    values: Vec<f64>,
}

impl FrequencyWeights {
    pub fn new(order: usize, dim: usize) -> Self {
        let s = Self::exponent_for(dim);
        let values = lattice(order, dim)
            .map(|k| (1.0 + k.norm_squared() as f64).powf(-s))
            .collect();
        Self { order, dim, values }
    }

    pub fn exponent_for(dim: usize) -> f64 {
        (dim as f64 + 1.0) / 2.0
    }

    pub fn exponent(&self) -> f64 {
        Self::exponent_for(self.dim)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, k: &[usize]) -> f64 {
        self.values[lattice_position(k, self.order)]
    }
}

pub fn frequency_weights(order: usize, dim: usize) -> FrequencyWeights {
    FrequencyWeights::new(order, dim)
}

/// Precomputed evaluator for every basis function of one lattice on one
/// domain. Points passed in must already be folded into the domain.
#[derive(Debug, Clone)]
pub struct Basis {
    domain: Domain,
    order: usize,
    inv_h: Vec<f64>,
    // lattice point j, dimension d -> offset d * (order + 1) + k_d into the tables
    offsets: Vec<usize>,
    freq: Vec<f64>,
}

/// Scratch tables reused across evaluations.
#[derive(Debug, Clone, Default)]
pub struct BasisScratch {
    cos: Vec<f64>,
    dsin: Vec<f64>,
}

impl Basis {
    pub fn new(domain: Domain, order: usize) -> Self {
        let dim = domain.dim();
        let side = order + 1;
        let mut inv_h = Vec::with_capacity(lattice_len(order, dim));
        let mut offsets = Vec::with_capacity(lattice_len(order, dim) * dim);
        for k in lattice(order, dim) {
            inv_h.push(1.0 / normalizer(&k, &domain).expect("lattice matches domain"));
            for (d, &kd) in k.0.iter().enumerate() {
                offsets.push(d * side + kd);
            }
        }
        let freq = (0..dim)
            .flat_map(|d| (0..side).map(move |j| (d, j)))
            .map(|(d, j)| j as f64 * PI / domain.lengths()[d])
            .collect();
        Self {
            domain,
            order,
            inv_h,
            offsets,
            freq,
        }
    }

    pub fn domain(&self) -> &Domain {
        &self.domain
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn dim(&self) -> usize {
        self.domain.dim()
    }

    pub fn len(&self) -> usize {
        self.inv_h.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inv_h.is_empty()
    }

    pub fn scratch(&self) -> BasisScratch {
        let n = self.dim() * (self.order + 1);
        BasisScratch {
            cos: vec![0.0; n],
            dsin: vec![0.0; n],
        }
    }

    fn fill_tables(&self, p: &[f64], s: &mut BasisScratch, with_derivative: bool) {
        let side = self.order + 1;
        for d in 0..self.dim() {
            let arg = PI * (p[d] - self.domain.lower[d]) / self.domain.lengths[d];
            let (s1, c1) = arg.sin_cos();
            let (mut sj, mut cj) = (0.0, 1.0);
            for j in 0..side {
                s.cos[d * side + j] = cj;
                if with_derivative {
                    s.dsin[d * side + j] = -self.freq[d * side + j] * sj;
                }
                let c_next = cj * c1 - sj * s1;
                sj = sj * c1 + cj * s1;
                cj = c_next;
            }
        }
    }

    /// `acc[k] += weight * F_k(p)` for every lattice point.
    pub fn accumulate(&self, p: &[f64], weight: f64, s: &mut BasisScratch, acc: &mut [f64]) {
        self.fill_tables(p, s, false);
        let dim = self.dim();
        for (j, a) in acc.iter_mut().enumerate() {
            let offs = &self.offsets[j * dim..(j + 1) * dim];
            let mut v = self.inv_h[j] * weight;
            for &o in offs {
                v *= s.cos[o];
            }
            *a += v;
        }
    }

    /// Writes `F_k(p)` for every lattice point into `out`.
    pub fn eval_into(&self, p: &[f64], s: &mut BasisScratch, out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        self.accumulate(p, 1.0, s, out);
    }

    /// `grad[d] = sum_k a[k] dF_k/dp_d`.
    pub fn weighted_gradient(&self, p: &[f64], a: &[f64], s: &mut BasisScratch, grad: &mut [f64]) {
        self.fill_tables(p, s, true);
        let dim = self.dim();
        grad.iter_mut().for_each(|g| *g = 0.0);
        for (j, &aj) in a.iter().enumerate() {
            if aj == 0.0 {
                continue;
            }
            let offs = &self.offsets[j * dim..(j + 1) * dim];
            let scale = aj * self.inv_h[j];
            for (d, g) in grad.iter_mut().enumerate() {
                let mut v = scale * s.dsin[offs[d]];
                for (e, &o) in offs.iter().enumerate() {
                    if e != d {
                        v *= s.cos[o];
                    }
                }
                *g += v;
            }
        }
    }
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::DimensionMismatch { expected, got });
    }
    Ok(())
}

/// Projects a full state onto the ergodic subspace and folds it into the box.
/// Returns the clamp bitmask from [`Domain::fold`].
pub fn project_point(state: &[f64], projection: &[usize], domain: &Domain, out: &mut [f64]) -> u32 {
    for (o, &i) in out.iter_mut().zip(projection) {
        *o = state[i];
    }
    domain.fold(out)
}

/// Time-averaged coefficients of a sampled trajectory, trapezoid rule.
///
/// Also returns the number of samples that had a clamped coordinate.
pub fn traj_coefficients_counted(
    times: &[f64],
    states: &[Vec<f64>],
    projection: &[usize],
    order: usize,
    domain: &Domain,
) -> Result<(CoefficientSet, usize)> {
    if times.len() != states.len() {
        return Err(Error::DimensionMismatch {
            expected: times.len(),
            got: states.len(),
        });
    }
    if times.len() < 2 {
        return Err(Error::TooFewSamples(times.len()));
    }
    check_dim(domain.dim(), projection.len())?;
    for (i, w) in times.windows(2).enumerate() {
        if !(w[1] > w[0]) {
            return Err(Error::TimeRegression {
                index: i + 1,
                prev: w[0],
                next: w[1],
            });
        }
    }
    for x in states {
        if let Some(&bad) = projection.iter().find(|&&i| i >= x.len()) {
            return Err(Error::DimensionMismatch {
                expected: bad + 1,
                got: x.len(),
            });
        }
    }
    let basis = Basis::new(domain.clone(), order);
    let mut scratch = basis.scratch();
    let mut acc = vec![0.0; basis.len()];
    let mut p = vec![0.0; domain.dim()];
    let mut clamped = 0;
    let last = times.len() - 1;
    for (i, x) in states.iter().enumerate() {
        let w = match i {
            0 => 0.5 * (times[1] - times[0]),
            _ if i == last => 0.5 * (times[last] - times[last - 1]),
            _ => 0.5 * (times[i + 1] - times[i - 1]),
        };
        if project_point(x, projection, domain, &mut p) != 0 {
            clamped += 1;
        }
        basis.accumulate(&p, w, &mut scratch, &mut acc);
    }
    if clamped > 0 {
        log::warn!("{clamped} trajectory samples clamped into the ergodic domain");
    }
    let duration = times[last] - times[0];
    acc.iter_mut().for_each(|v| *v /= duration);
    acc[0] = basis.inv_h[0];
    Ok((CoefficientSet::from_values(order, domain.dim(), acc)?, clamped))
}

/// Coefficients `c_k = (1/T) int F_k(x(t)) dt` of a sampled trajectory.
pub fn traj_coefficients(
    times: &[f64],
    states: &[Vec<f64>],
    projection: &[usize],
    order: usize,
    domain: &Domain,
) -> Result<CoefficientSet> {
    traj_coefficients_counted(times, states, projection, order, domain).map(|(c, _)| c)
}

/// Coefficients of a Dirac delta at `x_star` (already in projected coordinates).
pub fn delta_coefficients(x_star: &[f64], order: usize, domain: &Domain) -> Result<CoefficientSet> {
    check_dim(domain.dim(), x_star.len())?;
    let basis = Basis::new(domain.clone(), order);
    let mut p = x_star.to_vec();
    domain.fold(&mut p);
    let mut out = vec![0.0; basis.len()];
    basis.eval_into(&p, &mut basis.scratch(), &mut out);
    CoefficientSet::from_values(order, domain.dim(), out)
}

/// Coefficients of the uniform distribution on the box.
pub fn uniform_coefficients(order: usize, domain: &Domain) -> CoefficientSet {
    let mut c = CoefficientSet::zeros(order, domain.dim());
    c.values[0] = 1.0 / domain.lengths().iter().map(|l| l.sqrt()).product::<f64>();
    c
}

/// Weighted squared distance between two coefficient sets.
pub fn ergodic_metric(c: &CoefficientSet, phi: &CoefficientSet, w: &FrequencyWeights) -> Result<f64> {
    c.same_lattice(phi)?;
    if w.order != c.order || w.dim != c.dim {
        return Err(Error::LatticeMismatch {
            left_order: c.order,
            left_dim: c.dim,
            right_order: w.order,
            right_dim: w.dim,
        });
    }
    Ok(c.values
        .iter()
        .zip(&phi.values)
        .zip(&w.values)
        .map(|((a, b), l)| l * (a - b) * (a - b))
        .sum())
}

/// Density evaluated at cell centers of a regular grid over the domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DensityGrid {
    pub resolution: Vec<usize>,
    pub lower: Vec<f64>,
    pub cell: Vec<f64>,
    /// Row-major, last dimension fastest.
    pub values: Vec<f64>,
}

impl DensityGrid {
    pub fn cell_volume(&self) -> f64 {
        self.cell.iter().product()
    }

    pub fn mass(&self) -> f64 {
        self.values.iter().sum::<f64>() * self.cell_volume()
    }

    pub fn cell_center(&self, flat: usize) -> Vec<f64> {
        let mut rest = flat;
        let mut idx = vec![0; self.resolution.len()];
        for d in (0..self.resolution.len()).rev() {
            idx[d] = rest % self.resolution[d];
            rest /= self.resolution[d];
        }
        idx.iter()
            .enumerate()
            .map(|(d, &i)| self.lower[d] + (i as f64 + 0.5) * self.cell[d])
            .collect()
    }

    pub fn argmax(&self) -> Vec<f64> {
        let (best, _) = self
            .values
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) });
        self.cell_center(best)
    }

    pub fn min(&self) -> f64 {
        self.values.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Nearest-cell lookup.
    pub fn value_at(&self, p: &[f64]) -> f64 {
        let mut flat = 0;
        for d in 0..self.resolution.len() {
            let i = ((p[d] - self.lower[d]) / self.cell[d]).floor();
            let i = (i.max(0.0) as usize).min(self.resolution[d] - 1);
            flat = flat * self.resolution[d] + i;
        }
        self.values[flat]
    }
}

/// Evaluates `phi(x) = sum_k phi_k F_k(x)` on a `resolution^n` cell-centered
/// grid. With `clip_negative`, negative values are floored at zero and the
/// grid is renormalized to unit mass.
pub fn reconstruct_density(
    phi: &CoefficientSet,
    domain: &Domain,
    resolution: usize,
    clip_negative: bool,
) -> Result<DensityGrid> {
    if resolution < 2 {
        return Err(Error::InvalidConfig(format!("grid resolution {resolution} < 2")));
    }
    check_dim(domain.dim(), phi.dim())?;
    let dim = domain.dim();
    let basis = Basis::new(domain.clone(), phi.order());
    let mut scratch = basis.scratch();
    let cell: Vec<f64> = domain.lengths().iter().map(|l| l / resolution as f64).collect();
    let total = resolution.pow(dim as u32);
    let mut grid = DensityGrid {
        resolution: vec![resolution; dim],
        lower: domain.lower().to_vec(),
        cell,
        values: Vec::with_capacity(total),
    };
    let mut fk = vec![0.0; basis.len()];
    for flat in 0..total {
        let p = grid.cell_center(flat);
        basis.eval_into(&p, &mut scratch, &mut fk);
        grid.values
            .push(fk.iter().zip(phi.values()).map(|(f, c)| f * c).sum());
    }
    if clip_negative {
        grid.values.iter_mut().for_each(|v| *v = v.max(0.0));
        let mass = grid.mass();
        if mass > 0.0 {
            grid.values.iter_mut().for_each(|v| *v /= mass);
        }
    }
    Ok(grid)
}
