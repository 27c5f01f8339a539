//! Stochastic views `x̂ = x + ε_eff·δ` with unit-norm directions `δ`, and the
//! exact second-moment matrices `Σ_x = E[δδᵀ]` of discrete augmentation
//! distributions.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{axpy, dot, norm, scale, Matrix, SymmetricEigen};
use crate::rng::{content_hash, mix, Rng};

/// Retries after a degenerate (zero-norm) perturbation before giving up.
pub const MAX_RESAMPLES: usize = 8;

const STREAM_SCORE: u64 = 0xA11C_E5C0_4E00_0001;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AugmentationFamily {
    /// Additive `N(μ·1, σ²I)` noise, scaled by `ε`.
    GaussianNoise { mu: f64, sigma: f64 },
    /// `δ` drawn uniformly from a fixed table of directions (normalised on
    /// use), or uniformly from the sphere when the table is absent.
    UnitDirection {
        #[serde(default)]
        directions: Option<Vec<Vec<f64>>>,
    },
    /// Each coordinate zeroed independently with probability `drop_fraction`.
    Masking { drop_fraction: f64 },
    /// Multiplies the input by `s ~ U[low, high]`.
    Scaling { low: f64, high: f64 },
}

/// How per-example augmentation streams are keyed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SeedPolicy {
    /// Hash of the input's bit pattern: exact duplicates get identical views.
    #[default]
    ContentHash,
    /// Position in the dataset.
    Index,
}

fn default_draws() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationSpec {
    pub family: AugmentationFamily,
    pub epsilon: f64,
    #[serde(default)]
    pub orthogonalize: bool,
    #[serde(default)]
    pub seed: u64,
    /// Number of independent views averaged when scoring an example.
    #[serde(default = "default_draws")]
    pub draws: usize,
    #[serde(default)]
    pub seeding: SeedPolicy,
}

impl Default for AugmentationSpec {
    fn default() -> Self {
        Self::gaussian(0.05, 0.2)
    }
}

impl AugmentationSpec {
    /// Gaussian noise at unit scale; `gaussian(0.05, 0.2)` is the standard
    /// configuration.
    pub fn gaussian(mu: f64, sigma: f64) -> Self {
        Self {
            family: AugmentationFamily::GaussianNoise { mu, sigma },
            epsilon: 1.0,
            orthogonalize: false,
            seed: 0,
            draws: 1,
            seeding: SeedPolicy::ContentHash,
        }
    }

    pub fn unit_direction(epsilon: f64, directions: Option<Vec<Vec<f64>>>) -> Self {
        Self {
            family: AugmentationFamily::UnitDirection { directions },
            epsilon,
            ..Self::default()
        }
    }

    pub fn masking(drop_fraction: f64) -> Self {
        Self {
            family: AugmentationFamily::Masking { drop_fraction },
            ..Self::default()
        }
    }

    pub fn scaling(low: f64, high: f64) -> Self {
        Self {
            family: AugmentationFamily::Scaling { low, high },
            ..Self::default()
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn with_seeding(mut self, seeding: SeedPolicy) -> Self {
        self.seeding = seeding;
        self
    }

    pub fn with_draws(mut self, draws: usize) -> Self {
        self.draws = draws;
        self
    }

    pub fn orthogonalized(mut self) -> Self {
        self.orthogonalize = true;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::Config("epsilon must be finite and non-negative".into()));
        }
        if self.draws == 0 {
            return Err(Error::Config("draws must be at least 1".into()));
        }
        match &self.family {
            AugmentationFamily::GaussianNoise { mu, sigma } => {
                if !mu.is_finite() || !(*sigma >= 0.0) || !sigma.is_finite() {
                    return Err(Error::Config("gaussian noise needs finite mu and sigma >= 0".into()));
                }
            }
            AugmentationFamily::UnitDirection { directions: Some(table) } => {
                if table.is_empty() {
                    return Err(Error::Config("direction table is empty".into()));
                }
                if table.iter().any(|d| norm(d) == 0.0 || d.iter().any(|v| !v.is_finite())) {
                    return Err(Error::Config("direction table contains a zero or non-finite row".into()));
                }
            }
            AugmentationFamily::UnitDirection { directions: None } => {}
            AugmentationFamily::Masking { drop_fraction } => {
                if !(0.0..=1.0).contains(drop_fraction) {
                    return Err(Error::Config("drop_fraction must lie in [0, 1]".into()));
                }
            }
            AugmentationFamily::Scaling { low, high } => {
                if !(low <= high) || !low.is_finite() || !high.is_finite() {
                    return Err(Error::Config("scaling range must satisfy low <= high".into()));
                }
            }
        }
        Ok(())
    }

    /// Stream for view `draw` of example `index` with content `x`.
    pub fn example_rng(&self, x: &[f64], index: usize, draw: usize) -> Rng {
        let key = match self.seeding {
            SeedPolicy::ContentHash => content_hash(x),
            SeedPolicy::Index => index as u64,
        };
        Rng::derive(self.seed, mix(mix(key, STREAM_SCORE), draw as u64))
    }
}

/// One augmented view.
#[derive(Clone, Debug, PartialEq)]
pub struct Augmented {
    pub x_hat: Vec<f64>,
    /// Unit direction (zero only when `ε_eff = 0`).
    pub delta: Vec<f64>,
    pub eps_eff: f64,
}

/// View `draw` of example `index`, using the example's own stream.
pub fn example_view(spec: &AugmentationSpec, x: &[f64], index: usize, draw: usize) -> Result<Augmented> {
    augment(spec, x, &mut spec.example_rng(x, index, draw))
}

/// Draws `x̂ = x + ε_eff·δ`. Raw perturbations that are not unit norm are
/// decomposed as `n = ‖n‖·δ`, so `ε_eff = ε·‖n‖` and `δ` is always a unit
/// vector.
pub fn augment(spec: &AugmentationSpec, x: &[f64], rng: &mut Rng) -> Result<Augmented> {
    let d = x.len();
    if let AugmentationFamily::UnitDirection { directions: Some(table) } = &spec.family {
        if let Some(bad) = table.iter().find(|row| row.len() != d) {
            return Err(Error::shape("augment direction table", d, bad.len()));
        }
    }
    for _ in 0..=MAX_RESAMPLES {
        let raw = raw_perturbation(spec, x, rng);
        let magnitude = norm(&raw);
        if magnitude == 0.0 || !magnitude.is_finite() {
            continue;
        }
        let mut delta = scale(1.0 / magnitude, &raw);
        if spec.orthogonalize {
            match orthogonal_to(&delta, x) {
                Some(v) => delta = v,
                None => continue,
            }
        }
        let unit_family = matches!(spec.family, AugmentationFamily::UnitDirection { .. });
        let eps_eff = if unit_family { spec.epsilon } else { spec.epsilon * magnitude };
        let mut x_hat = x.to_vec();
        axpy(eps_eff, &delta, &mut x_hat);
        return Ok(Augmented { x_hat, delta, eps_eff });
    }
    Err(Error::Numeric(format!(
        "augmentation produced a zero-norm perturbation {} times in a row",
        MAX_RESAMPLES + 1
    )))
}

fn raw_perturbation(spec: &AugmentationSpec, x: &[f64], rng: &mut Rng) -> Vec<f64> {
    match &spec.family {
        AugmentationFamily::GaussianNoise { mu, sigma } => {
            (0..x.len()).map(|_| mu + sigma * rng.normal()).collect()
        }
        AugmentationFamily::UnitDirection { directions: Some(table) } => table[rng.below(table.len())].clone(),
        AugmentationFamily::UnitDirection { directions: None } => rng.normal_vec(x.len()),
        AugmentationFamily::Masking { drop_fraction } => x
            .iter()
            .map(|&v| if rng.uniform() < *drop_fraction { -v } else { 0.0 })
            .collect(),
        AugmentationFamily::Scaling { low, high } => {
            let s = rng.uniform_range(*low, *high);
            scale(s - 1.0, x)
        }
    }
}

/// Projects `delta` onto the orthogonal complement of `x` and renormalises.
/// `None` when the projection vanishes.
pub fn orthogonal_to(delta: &[f64], x: &[f64]) -> Option<Vec<f64>> {
    let nx = norm(x);
    if nx == 0.0 {
        return Some(delta.to_vec());
    }
    let mut v = delta.to_vec();
    // two passes of Gram-Schmidt keep δᵀx at round-off level
    for _ in 0..2 {
        let c = dot(&v, x) / (nx * nx);
        axpy(-c, x, &mut v);
    }
    let nv = norm(&v);
    if nv < 1e-12 {
        return None;
    }
    Some(scale(1.0 / nv, &v))
}

/// One outcome of a discrete augmentation distribution: a direction for
/// every input, with its probability.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct XiOutcome {
    pub directions: Vec<Vec<f64>>,
    pub probability: f64,
}

/// Finite distribution over augmentation randomness `ξ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteXi {
    outcomes: Vec<XiOutcome>,
}

impl DiscreteXi {
    pub fn new(outcomes: Vec<XiOutcome>) -> Result<Self> {
        let first = outcomes
            .first()
            .ok_or_else(|| Error::Config("discrete xi needs at least one outcome".into()))?;
        let n_inputs = first.directions.len();
        let dim = first.directions.first().map_or(0, Vec::len);
        if n_inputs == 0 || dim == 0 {
            return Err(Error::Config("discrete xi outcomes need directions".into()));
        }
        let mut total = 0.0;
        for o in &outcomes {
            if o.directions.len() != n_inputs || o.directions.iter().any(|d| d.len() != dim) {
                return Err(Error::shape("DiscreteXi", format!("{n_inputs} directions of length {dim}"), "ragged outcome"));
            }
            if !(o.probability >= 0.0) {
                return Err(Error::Config("probabilities must be non-negative".into()));
            }
            total += o.probability;
        }
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::Config(format!("probabilities sum to {total}, not 1")));
        }
        Ok(Self { outcomes })
    }

    /// Distribution for a single input: `(direction, probability)` pairs.
    pub fn single_input(pairs: &[(Vec<f64>, f64)]) -> Result<Self> {
        Self::new(
            pairs
                .iter()
                .map(|(d, p)| XiOutcome {
                    directions: vec![d.clone()],
                    probability: *p,
                })
                .collect(),
        )
    }

    /// Equal-weight empirical distribution of `count` views of one input.
    pub fn from_draws(spec: &AugmentationSpec, x: &[f64], rng: &mut Rng, count: usize) -> Result<Self> {
        if count == 0 {
            return Err(Error::Config("need at least one draw".into()));
        }
        let p = 1.0 / count as f64;
        let mut pairs = Vec::with_capacity(count);
        for _ in 0..count {
            pairs.push((augment(spec, x, rng)?.delta, p));
        }
        // equal weights may miss 1.0 by a few ulps; renormalise the last one
        let head: f64 = pairs[..count - 1].iter().map(|(_, p)| p).sum();
        pairs[count - 1].1 = 1.0 - head;
        Self::single_input(&pairs)
    }

    pub fn outcomes(&self) -> &[XiOutcome] {
        &self.outcomes
    }

    pub fn n_inputs(&self) -> usize {
        self.outcomes[0].directions.len()
    }

    pub fn dim(&self) -> usize {
        self.outcomes[0].directions[0].len()
    }
}

/// Symmetric positive semi-definite second-moment matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentMatrix {
    matrix: Matrix,
}

impl MomentMatrix {
    pub fn new(matrix: Matrix) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::shape("MomentMatrix", "square", format!("{}x{}", matrix.rows(), matrix.cols())));
        }
        if matrix.asymmetry() > 1e-12 {
            return Err(Error::Contract("moment matrix is not symmetric".into()));
        }
        let eig = SymmetricEigen::new(&matrix)?;
        if eig.min() < -1e-10 {
            return Err(Error::Contract(format!(
                "moment matrix has negative eigenvalue {:e}",
                eig.min()
            )));
        }
        Ok(Self { matrix })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.rows()
    }

    /// `λ_max / λ_min`; infinite for singular matrices. Reported as a
    /// diagnostic of how well-conditioned the augmentation distribution is.
    pub fn condition_number(&self) -> f64 {
        match SymmetricEigen::new(&self.matrix) {
            Ok(e) if e.min() > 0.0 => e.max() / e.min(),
            _ => f64::INFINITY,
        }
    }
}

/// `Σ_x = Σ_k p_k δ_k δ_kᵀ` for input `index`, or the average of `Σ_x` over
/// all inputs when `index` is `None`.
pub fn moment_matrix(xi: &DiscreteXi, index: Option<usize>) -> Result<MomentMatrix> {
    let dim = xi.dim();
    let inputs: Vec<usize> = match index {
        Some(i) if i >= xi.n_inputs() => return Err(Error::shape("moment_matrix index", xi.n_inputs(), i)),
        Some(i) => vec![i],
        None => (0..xi.n_inputs()).collect(),
    };
    let weight = 1.0 / inputs.len() as f64;
    let mut acc = Matrix::zeros(dim, dim);
    for &i in &inputs {
        for o in xi.outcomes() {
            let delta = &o.directions[i];
            let w = weight * o.probability;
            for r in 0..dim {
                let dr = w * delta[r];
                for c in 0..dim {
                    acc[(r, c)] += dr * delta[c];
                }
            }
        }
    }
    acc.symmetrize();
    MomentMatrix::new(acc)
}
