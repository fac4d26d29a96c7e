//! Selecting, tuning and maintaining singular directions of a pretrained weight.
//!
//! - The rank budget is `alpha × entropy_rank(W)`, rounded half away from zero
//!   and clamped to `[min_rank, floor(max_rank_fraction · K)]`.
//! - Task-aware directions are the `r` components with the largest residual
//!   projection `|u_iᵀ ΔW v_i|`; ties go to the smaller index.
//! - The adapter starts as `B = U_I √Σ_I`, `A = √Σ_I V_Iᵀ` over the frozen base
//!   `W0 = W − U_I Σ_I V_Iᵀ`, so `W0 + BA = W` exactly at initialization.
//! - Leading directions up to the stable-rank cutoff that were not selected are
//!   protected by the penalty `Σ_{i∈P} |σ_i u_iᵀ (BA) v_i|`, averaged over layers.
//!
//! Direction indices are zero-based in memory and one-based in plan files.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::eranks::{self, DEFAULT_GAMMA};
use crate::error::{ensure, Error, Result};
use crate::spectral::{self, decompose, project_residual, DirectionSet, SvdFactors};
use crate::tensorio::{self, MatrixBundle};
use crate::Matrix;

/// Integerization applied to the real-valued stable rank to get the protection cutoff.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProtectionRule {
    #[default]
    Ceil,
    Floor,
    Round,
}

/// Slack that keeps values like `2.0000000000000004` from crossing an integer boundary.
const INTEGERIZE_TOL: f64 = 1e-9;

impl ProtectionRule {
    pub fn apply(self, stable_rank: f64) -> usize {
        let tol = INTEGERIZE_TOL * stable_rank.abs().max(1.0);
        let v = match self {
            ProtectionRule::Ceil => (stable_rank - tol).ceil(),
            ProtectionRule::Floor => (stable_rank + tol).floor(),
            ProtectionRule::Round => stable_rank.round(),
        };
        v.max(0.0) as usize
    }
}

impl fmt::Display for ProtectionRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProtectionRule::Ceil => "ceil",
            ProtectionRule::Floor => "floor",
            ProtectionRule::Round => "round",
        })
    }
}

impl FromStr for ProtectionRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ceil" => Ok(ProtectionRule::Ceil),
            "floor" => Ok(ProtectionRule::Floor),
            "round" => Ok(ProtectionRule::Round),
            other => Err(Error::Validation(format!(
                "unknown protection rule {other:?} (expected ceil, floor or round)"
            ))),
        }
    }
}

/// Knobs of the selecting phase.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StmConfig {
    /// Scale from entropy rank to rank budget.
    pub alpha: f64,
    pub gamma: f64,
    pub protection_rule: ProtectionRule,
    pub min_rank: usize,
    /// Budget cap as a fraction of `K`.
    pub max_rank_fraction: f64,
}

impl StmConfig {
    /// `alpha` has no sensible default; everything else takes the usual values.
    pub fn new(alpha: f64) -> Self {
        Self {
            alpha,
            gamma: DEFAULT_GAMMA,
            protection_rule: ProtectionRule::default(),
            min_rank: 1,
            max_rank_fraction: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(
            self.alpha.is_finite() && self.alpha > 0.0,
            "alpha must be positive, got {}",
            self.alpha
        );
        ensure!(
            self.gamma.is_finite() && self.gamma > 0.0,
            "gamma must be positive, got {}",
            self.gamma
        );
        ensure!(self.min_rank >= 1, "min_rank must be at least 1");
        ensure!(
            self.max_rank_fraction > 0.0 && self.max_rank_fraction <= 1.0,
            "max_rank_fraction must lie in (0, 1], got {}",
            self.max_rank_fraction
        );
        Ok(())
    }

    /// `floor(max_rank_fraction · K)`, checked against `min_rank`.
    pub fn rank_cap(&self, k: usize) -> Result<usize> {
        let cap = (self.max_rank_fraction * k as f64 + INTEGERIZE_TOL).floor() as usize;
        ensure!(
            self.min_rank <= cap,
            "min_rank {} exceeds the rank cap {cap} (max_rank_fraction {} of K = {k})",
            self.min_rank,
            self.max_rank_fraction
        );
        Ok(cap)
    }
}

/// Selection result for one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct StmPlan {
    pub r: usize,
    pub selected: DirectionSet,
    /// `{i < cutoff} \ selected`
    pub protected: DirectionSet,
    pub protect_cutoff: usize,
    pub entropy_rank: f64,
    pub stable_rank: f64,
    /// Selected directions whose singular value is zero; their adapter slices start at zero.
    pub null_directions: DirectionSet,
    pub config: StmConfig,
}

#[derive(Serialize, Deserialize)]
struct PlanFile {
    r: usize,
    selected: Vec<usize>,
    protected: Vec<usize>,
    protect_cutoff: usize,
    entropy_rank: f64,
    stable_rank: f64,
    null_directions: Vec<usize>,
    config: StmConfig,
}

impl StmPlan {
    /// JSON sidecar with one-based direction numbers.
    pub fn to_json(&self) -> Result<String> {
        let file = PlanFile {
            r: self.r,
            selected: self.selected.to_one_based(),
            protected: self.protected.to_one_based(),
            protect_cutoff: self.protect_cutoff,
            entropy_rank: self.entropy_rank,
            stable_rank: self.stable_rank,
            null_directions: self.null_directions.to_one_based(),
            config: self.config,
        };
        let mut text = serde_json::to_string_pretty(&file)?;
        text.push('\n');
        Ok(text)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: PlanFile = serde_json::from_str(text)?;
        let plan = Self {
            r: file.r,
            selected: DirectionSet::from_one_based(file.selected)?,
            protected: DirectionSet::from_one_based(file.protected)?,
            protect_cutoff: file.protect_cutoff,
            entropy_rank: file.entropy_rank,
            stable_rank: file.stable_rank,
            null_directions: DirectionSet::from_one_based(file.null_directions)?,
            config: file.config,
        };
        ensure!(plan.selected.len() == plan.r, "plan r does not match |selected|");
        ensure!(
            plan.protected.intersection_len(&plan.selected) == 0,
            "plan protects a selected direction"
        );
        Ok(plan)
    }
}

/// A frozen base plus a tunable low-rank branch: `W' = W0 + B·A`.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedLayer {
    w0: Matrix,
    b: Matrix,
    a: Matrix,
    plan: StmPlan,
    frozen: SvdFactors,
}

impl AdaptedLayer {
    /// Assembles a layer from explicit parts, checking shape consistency.
    pub fn from_parts(
        w0: Matrix,
        b: Matrix,
        a: Matrix,
        plan: StmPlan,
        frozen: SvdFactors,
    ) -> Result<Self> {
        let (m, n) = w0.shape();
        ensure!(
            frozen.rows() == m && frozen.cols() == n,
            "frozen factors are {}x{}, base is {m}x{n}",
            frozen.rows(),
            frozen.cols()
        );
        check_adapter_shapes(m, n, &b, &a)?;
        plan.selected.check_within(frozen.k())?;
        plan.protected.check_within(frozen.k())?;
        ensure!(
            plan.protected.intersection_len(&plan.selected) == 0,
            "protected and selected directions overlap"
        );
        Ok(Self {
            w0,
            b,
            a,
            plan,
            frozen,
        })
    }

    pub fn w0(&self) -> &Matrix {
        &self.w0
    }

    pub fn b(&self) -> &Matrix {
        &self.b
    }

    pub fn a(&self) -> &Matrix {
        &self.a
    }

    pub fn plan(&self) -> &StmPlan {
        &self.plan
    }

    /// Factors of the original pretrained weight.
    pub fn frozen(&self) -> &SvdFactors {
        &self.frozen
    }

    pub fn rows(&self) -> usize {
        self.w0.nrows()
    }

    pub fn cols(&self) -> usize {
        self.w0.ncols()
    }

    /// Adapter rank (columns of `B`).
    pub fn rank(&self) -> usize {
        self.b.ncols()
    }

    pub fn delta(&self) -> Matrix {
        &self.b * &self.a
    }

    /// Replaces the tunable factors; shapes must not change.
    pub fn set_adapter(&mut self, b: Matrix, a: Matrix) -> Result<()> {
        ensure!(
            b.shape() == self.b.shape() && a.shape() == self.a.shape(),
            "adapter shapes must stay {:?} / {:?}",
            self.b.shape(),
            self.a.shape()
        );
        self.b = b;
        self.a = a;
        Ok(())
    }

    /// One gradient-descent update of `B` and `A`.
    pub fn step(&mut self, grad_b: &Matrix, grad_a: &Matrix, learning_rate: f64) -> Result<()> {
        ensure!(
            grad_b.shape() == self.b.shape() && grad_a.shape() == self.a.shape(),
            "gradient shapes {:?} / {:?} do not match adapter",
            grad_b.shape(),
            grad_a.shape()
        );
        self.b -= grad_b * learning_rate;
        self.a -= grad_a * learning_rate;
        Ok(())
    }

    /// Bundle entries `W0`, `B`, `A`. Fails for an empty adapter.
    pub fn to_bundle(&self) -> Result<MatrixBundle> {
        let mut bundle = MatrixBundle::new();
        bundle.insert("W0", self.w0.clone())?;
        bundle.insert("B", self.b.clone())?;
        bundle.insert("A", self.a.clone())?;
        Ok(bundle)
    }
}

fn check_adapter_shapes(m: usize, n: usize, b: &Matrix, a: &Matrix) -> Result<()> {
    ensure!(
        b.nrows() == m && a.ncols() == n && b.ncols() == a.nrows(),
        "adapter B {:?} · A {:?} does not fit a {m}x{n} base",
        b.shape(),
        a.shape()
    );
    Ok(())
}

pub const PLAN_FILE: &str = "plan.json";

/// Writes `W0`, `B`, `A` as a bundle in `dir` plus the plan sidecar.
pub fn write_layer(dir: impl AsRef<Path>, layer: &AdaptedLayer) -> Result<()> {
    let dir = dir.as_ref();
    tensorio::write_bundle(dir, &layer.to_bundle()?)?;
    let path = dir.join(PLAN_FILE);
    fs::write(&path, layer.plan.to_json()?).map_err(|e| Error::io(&path, e))
}

/// Matrices and plan read back from a layer directory.
#[derive(Debug, Clone, PartialEq)]
pub struct StoredLayer {
    pub w0: Matrix,
    pub b: Matrix,
    pub a: Matrix,
    pub plan: StmPlan,
}

impl StoredLayer {
    /// Re-attaches the pretrained weight whose factors drive the penalty.
    pub fn into_layer(self, pretrained: &Matrix) -> Result<AdaptedLayer> {
        let frozen = decompose(pretrained)?;
        AdaptedLayer::from_parts(self.w0, self.b, self.a, self.plan, frozen)
    }
}

pub fn read_layer(dir: impl AsRef<Path>) -> Result<StoredLayer> {
    let dir = dir.as_ref();
    let bundle = tensorio::read_bundle(dir)?;
    let take = |name: &str| {
        bundle
            .get(name)
            .cloned()
            .ok_or_else(|| Error::Corruption(format!("layer bundle lacks {name}")))
    };
    let path = dir.join(PLAN_FILE);
    let text = fs::read_to_string(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::NotFound(path.clone()),
        _ => Error::io(&path, e),
    })?;
    Ok(StoredLayer {
        w0: take("W0")?,
        b: take("B")?,
        a: take("A")?,
        plan: StmPlan::from_json(&text)?,
    })
}

/// Rank budget from an already computed spectrum.
pub fn select_rank_from_spectrum(sigma: &[f64], cfg: &StmConfig) -> Result<usize> {
    cfg.validate()?;
    let cap = cfg.rank_cap(sigma.len())?;
    let en = eranks::entropy_rank(sigma, cfg.gamma)?;
    let raw = (cfg.alpha * en).round() as usize;
    Ok(raw.clamp(cfg.min_rank, cap))
}

pub fn select_rank(w: &Matrix, cfg: &StmConfig) -> Result<usize> {
    cfg.validate()?;
    let f = decompose(w)?;
    select_rank_from_spectrum(f.sigma(), cfg)
}

/// The `r` directions with the largest residual projections, in ascending order.
pub fn select_directions(f: &SvdFactors, delta_w: &Matrix, r: usize) -> Result<DirectionSet> {
    ensure!(
        r >= 1 && r <= f.k(),
        "rank budget {r} outside 1..={}",
        f.k()
    );
    let d = project_residual(f, delta_w)?;
    let d = d.as_slice();
    let mut order: Vec<usize> = (0..d.len()).collect();
    order.sort_by(|&i, &j| d[j].total_cmp(&d[i]).then(i.cmp(&j)));
    order.truncate(r);
    DirectionSet::new(order)
}

/// Protection cutoff and protected set for a given selection.
fn protection(
    sigma: &[f64],
    selected: &DirectionSet,
    cfg: &StmConfig,
) -> Result<(usize, DirectionSet, f64, f64)> {
    let en = eranks::entropy_rank(sigma, cfg.gamma)?;
    let st = eranks::stable_rank(sigma, cfg.gamma)?;
    let cutoff = cfg.protection_rule.apply(st).min(sigma.len());
    let protected = DirectionSet::leading(cutoff).difference(selected);
    Ok((cutoff, protected, en, st))
}

pub fn initialize_adapter(
    w: &Matrix,
    selected: &DirectionSet,
    cfg: &StmConfig,
) -> Result<AdaptedLayer> {
    let f = decompose(w)?;
    initialize_adapter_with_factors(w, f, selected, cfg)
}

/// Same as [`initialize_adapter`] with precomputed factors of `w`.
pub fn initialize_adapter_with_factors(
    w: &Matrix,
    f: SvdFactors,
    selected: &DirectionSet,
    cfg: &StmConfig,
) -> Result<AdaptedLayer> {
    cfg.validate()?;
    ensure!(
        w.shape() == (f.rows(), f.cols()),
        "factors do not belong to a {}x{} matrix",
        w.nrows(),
        w.ncols()
    );
    selected.check_within(f.k())?;
    let (cutoff, protected, en, st) = protection(f.sigma(), selected, cfg)?;

    let null_directions = DirectionSet::new(selected.iter().filter(|&i| f.sigma()[i] == 0.0))?;
    if !null_directions.is_empty() {
        log::warn!(
            "selected directions {:?} have zero singular value; their adapter slices start at zero",
            null_directions.to_one_based()
        );
    }

    let (b, a_t) = spectral::scaled_components(&f, selected, f64::sqrt);
    let sqrt_sigma: Vec<f64> = selected.iter().map(|i| f.sigma()[i].sqrt()).collect();
    let mut a = a_t;
    for (j, s) in sqrt_sigma.iter().enumerate() {
        a.row_mut(j).scale_mut(*s);
    }
    let w0 = w - &b * &a;

    let plan = StmPlan {
        r: selected.len(),
        selected: selected.clone(),
        protected,
        protect_cutoff: cutoff,
        entropy_rank: en,
        stable_rank: st,
        null_directions,
        config: *cfg,
    };
    AdaptedLayer::from_parts(w0, b, a, plan, f)
}

/// Full selecting phase for one layer: budget, directions, initialization.
pub fn plan_layer(w: &Matrix, delta_w: &Matrix, cfg: &StmConfig) -> Result<AdaptedLayer> {
    cfg.validate()?;
    let f = decompose(w)?;
    let r = select_rank_from_spectrum(f.sigma(), cfg)?;
    let selected = select_directions(&f, delta_w, r)?;
    initialize_adapter_with_factors(w, f, &selected, cfg)
}

/// `(Bᵀu_i, A v_i)` for a frozen direction `i`.
fn direction_factors(layer: &AdaptedLayer, i: usize) -> (nalgebra::DVector<f64>, nalgebra::DVector<f64>) {
    let u = layer.frozen.u().column(i);
    let vt = layer.frozen.vt().row(i);
    (layer.b.tr_mul(&u), &layer.a * vt.transpose())
}

/// `σ_i u_iᵀ (BA) v_i` for each protected direction.
fn protected_terms(layer: &AdaptedLayer) -> impl Iterator<Item = (usize, f64)> + '_ {
    layer.plan.protected.iter().map(move |i| {
        let (ub, av) = direction_factors(layer, i);
        (i, layer.frozen.sigma()[i] * ub.dot(&av))
    })
}

/// Penalty of a single layer, before averaging.
pub fn layer_penalty(layer: &AdaptedLayer) -> f64 {
    protected_terms(layer).map(|(_, t)| t.abs()).sum()
}

/// Largest protected term `max_{i∈P} |σ_i u_iᵀ (BA) v_i|`, zero when nothing is protected.
pub fn protected_drift(layer: &AdaptedLayer) -> f64 {
    protected_terms(layer).fold(0.0, |m, (_, t)| m.max(t.abs()))
}

/// Mean over layers of the protected-direction penalty.
pub fn maintaining_penalty(layers: &[AdaptedLayer]) -> Result<f64> {
    ensure!(!layers.is_empty(), "maintaining penalty needs at least one layer");
    let total: f64 = layers.iter().map(layer_penalty).sum();
    Ok(total / layers.len() as f64)
}

/// Subgradient sign with `sign(0) = 0`.
fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Gradient of [`layer_penalty`] with respect to `B` and `A`.
///
/// For a term `|σ (uᵀB)(Av)|` with sign `s`:
/// `∂/∂B = σ s · u (Av)ᵀ` and `∂/∂A = σ s · (Bᵀu) vᵀ`.
pub fn maintaining_penalty_grad(layer: &AdaptedLayer) -> (Matrix, Matrix) {
    let mut grad_b = Matrix::zeros(layer.b.nrows(), layer.b.ncols());
    let mut grad_a = Matrix::zeros(layer.a.nrows(), layer.a.ncols());
    for i in layer.plan.protected.iter() {
        let sigma = layer.frozen.sigma()[i];
        let (ub, av) = direction_factors(layer, i);
        let coef = sigma * sign(sigma * ub.dot(&av));
        if coef == 0.0 {
            continue;
        }
        let u = layer.frozen.u().column(i);
        let vt = layer.frozen.vt().row(i);
        grad_b.ger(coef, &u, &av, 1.0);
        grad_a += (ub * vt) * coef;
    }
    (grad_b, grad_a)
}
