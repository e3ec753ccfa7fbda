//! Final consolidation of adapters into a single weight update, and the
//! baseline mergers it is compared against.

use serde::{Deserialize, Serialize};

use crate::adapters::{delta_weight, GroupRegistry, LayerAdapter};
use crate::backbone::FrozenBackbone;
use crate::error::{HamError, Result};
use crate::rng::{streams, RngState};
use crate::tasks::Classifier;
use crate::tensor::{top_magnitude_indices, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MergeAlgorithm {
    Ham,
    Linear,
    Ties,
    DareTies,
}

impl std::str::FromStr for MergeAlgorithm {
    type Err = HamError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ham" => Ok(MergeAlgorithm::Ham),
            "linear" => Ok(MergeAlgorithm::Linear),
            "ties" => Ok(MergeAlgorithm::Ties),
            "dare_ties" | "dare-ties" | "dare" => Ok(MergeAlgorithm::DareTies),
            other => Err(HamError::Config(format!("unknown merge algorithm '{other}'"))),
        }
    }
}

impl std::fmt::Display for MergeAlgorithm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MergeAlgorithm::Ham => "ham",
            MergeAlgorithm::Linear => "linear",
            MergeAlgorithm::Ties => "ties",
            MergeAlgorithm::DareTies => "dare_ties",
        })
    }
}

/// Knobs for the baseline mergers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MergeParams {
    pub ties_trim: f64,
    pub ties_lambda: f64,
    pub dare_drop: f64,
    pub seed: u64,
}

impl Default for MergeParams {
    fn default() -> Self {
        MergeParams {
            ties_trim: 0.2,
            ties_lambda: 1.0,
            dare_drop: 0.5,
            seed: 0,
        }
    }
}

impl MergeParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.ties_trim > 0.0 && self.ties_trim <= 1.0) {
            return Err(HamError::Config(format!("ties_trim must lie in (0, 1], got {}", self.ties_trim)));
        }
        if !self.ties_lambda.is_finite() {
            return Err(HamError::Config("ties_lambda must be finite".into()));
        }
        if !(0.0..1.0).contains(&self.dare_drop) {
            return Err(HamError::Config(format!("dare_drop must lie in [0, 1), got {}", self.dare_drop)));
        }
        Ok(())
    }
}

/// One merged update per adapted layer. HAM merges also keep the factored
/// form, whose rank is the summed rank of all groups.
#[derive(Debug, Clone, PartialEq)]
pub struct MergedDelta {
    pub layers: Vec<Matrix>,
    pub factors: Option<Vec<LayerAdapter>>,
    /// (group or adapter id, scalar) of every contributor.
    pub provenance: Vec<(usize, f64)>,
}

impl MergedDelta {
    pub fn zeros(shapes: &[(usize, usize)]) -> Self {
        MergedDelta {
            layers: shapes.iter().map(|&(d, k)| Matrix::zeros(d, k)).collect(),
            factors: None,
            provenance: Vec::new(),
        }
    }

    pub fn rank(&self) -> Option<usize> {
        self.factors.as_ref().and_then(|f| f.first()).map(LayerAdapter::rank)
    }
}

/// `(1/M) Σ α_G · B_G·A_G` per layer. The registry is left untouched.
pub fn merge_ham(registry: &GroupRegistry) -> Result<MergedDelta> {
    if registry.is_empty() {
        return Err(HamError::State("cannot merge an empty registry".into()));
    }
    let m = registry.len() as f64;
    let n_layers = registry.groups[0].layers.len();
    let mut layers = Vec::with_capacity(n_layers);
    let mut factors = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let (d, k) = registry.groups[0].layers[l].weight_shape();
        let mut acc = Matrix::zeros(d, k);
        let mut cat = LayerAdapter::empty(d, k);
        for g in &registry.groups {
            let layer = g
                .layers
                .get(l)
                .ok_or_else(|| HamError::Shape("groups disagree on layer count".into()))?;
            let scale = g.alpha_g / m;
            acc.add_scaled(&delta_weight(layer)?, scale)?;
            cat = LayerAdapter {
                b: cat.b.hconcat(&layer.b.scale(scale))?,
                a: cat.a.vconcat(&layer.a)?,
            };
        }
        layers.push(acc);
        factors.push(cat);
    }
    Ok(MergedDelta {
        layers,
        factors: Some(factors),
        provenance: registry.groups.iter().map(|g| (g.group_id, g.alpha_g)).collect(),
    })
}

fn check_same_shapes(deltas: &[Matrix]) -> Result<(usize, usize)> {
    let first = deltas
        .first()
        .ok_or_else(|| HamError::Input("nothing to merge".into()))?;
    for d in deltas {
        first.check_same_shape(d)?;
    }
    Ok(first.shape())
}

/// `Σ w_i D_i / Σ w_i`.
pub fn merge_linear(deltas: &[Matrix], weights: &[f64]) -> Result<Matrix> {
    let (rows, cols) = check_same_shapes(deltas)?;
    if deltas.len() != weights.len() {
        return Err(HamError::Shape(format!("{} deltas but {} weights", deltas.len(), weights.len())));
    }
    let total: f64 = weights.iter().sum();
    if total == 0.0 || !total.is_finite() {
        return Err(HamError::Config("merge weights must have a finite nonzero sum".into()));
    }
    let mut out = Matrix::zeros(rows, cols);
    for (d, w) in deltas.iter().zip(weights) {
        out.add_scaled(d, w / total)?;
    }
    Ok(out)
}

/// Trim each delta to its top `trim` magnitudes, elect a sign per entry from
/// the trimmed sum, average the entries that agree with it, scale by
/// `lambda`.
pub fn merge_ties(deltas: &[Matrix], trim: f64, lambda: f64) -> Result<Matrix> {
    let (rows, cols) = check_same_shapes(deltas)?;
    let trimmed = deltas
        .iter()
        .map(|d| {
            let keep = top_magnitude_indices(d.as_slice(), trim)?;
            let mut t = Matrix::zeros(rows, cols);
            for i in keep {
                t.as_mut_slice()[i] = d.as_slice()[i];
            }
            Ok(t)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut out = Matrix::zeros(rows, cols);
    for (idx, o) in out.as_mut_slice().iter_mut().enumerate() {
        let total: f64 = trimmed.iter().map(|t| t.as_slice()[idx]).sum();
        if total == 0.0 {
            continue;
        }
        let sign = total.signum();
        let (sum, count) = trimmed
            .iter()
            .map(|t| t.as_slice()[idx])
            .filter(|v| *v != 0.0 && v.signum() == sign)
            .fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
        if count > 0 {
            *o = lambda * sum / count as f64;
        }
    }
    Ok(out)
}

/// Drops each entry with probability `drop` and rescales survivors by
/// `1 / (1 - drop)`.
pub fn dare_mask(delta: &Matrix, drop: f64, rng: &mut RngState) -> Result<Matrix> {
    if !(0.0..1.0).contains(&drop) {
        return Err(HamError::Config(format!("drop probability must lie in [0, 1), got {drop}")));
    }
    let scale = 1.0 / (1.0 - drop);
    let data = delta
        .as_slice()
        .iter()
        .map(|&v| if rng.uniform() < drop { 0.0 } else { v * scale })
        .collect();
    Matrix::from_vec(delta.rows(), delta.cols(), data)
}

pub fn merge_dare_ties(deltas: &[Matrix], drop: f64, trim: f64, lambda: f64, seed: u64) -> Result<Matrix> {
    let mut rng = RngState::substream(seed, streams::MERGE);
    merge_dare_ties_with(deltas, drop, trim, lambda, &mut rng)
}

fn merge_dare_ties_with(deltas: &[Matrix], drop: f64, trim: f64, lambda: f64, rng: &mut RngState) -> Result<Matrix> {
    check_same_shapes(deltas)?;
    let masked = deltas
        .iter()
        .map(|d| dare_mask(d, drop, rng))
        .collect::<Result<Vec<_>>>()?;
    merge_ties(&masked, trim, lambda)
}

/// Runs a baseline merger layer by layer over per-adapter dense deltas
/// (`adapters[i][l]` is adapter `i`'s update on layer `l`), equal weights.
pub fn merge_baseline(
    algo: MergeAlgorithm,
    adapters: &[Vec<Matrix>],
    ids: &[usize],
    params: &MergeParams,
) -> Result<MergedDelta> {
    params.validate()?;
    let n_layers = adapters
        .first()
        .ok_or_else(|| HamError::Input("nothing to merge".into()))?
        .len();
    if adapters.iter().any(|a| a.len() != n_layers) {
        return Err(HamError::Shape("adapters disagree on layer count".into()));
    }
    let mut rng = RngState::substream(params.seed, streams::MERGE);
    let mut layers = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let deltas: Vec<Matrix> = adapters.iter().map(|a| a[l].clone()).collect();
        let merged = match algo {
            MergeAlgorithm::Linear | MergeAlgorithm::Ham => merge_linear(&deltas, &vec![1.0; deltas.len()])?,
            MergeAlgorithm::Ties => merge_ties(&deltas, params.ties_trim, params.ties_lambda)?,
            MergeAlgorithm::DareTies => {
                merge_dare_ties_with(&deltas, params.dare_drop, params.ties_trim, params.ties_lambda, &mut rng)?
            }
        };
        layers.push(merged);
    }
    Ok(MergedDelta {
        layers,
        factors: None,
        provenance: ids.iter().map(|&i| (i, 1.0)).collect(),
    })
}

/// The evaluation model `W₀ + ΔW_merged`.
#[derive(Debug, Clone)]
pub struct FinalModel<'a> {
    backbone: &'a FrozenBackbone,
    merged: Vec<Matrix>,
}

impl<'a> FinalModel<'a> {
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        self.backbone.forward_final(x, &self.merged)
    }
}

impl Classifier for FinalModel<'_> {
    fn logits(&self, x: &Matrix) -> Result<Matrix> {
        self.forward(x)
    }

    fn num_classes(&self) -> usize {
        self.backbone.num_classes_seen()
    }
}

pub fn finalize<'a>(backbone: &'a FrozenBackbone, merged: &MergedDelta) -> Result<FinalModel<'a>> {
    let shapes = backbone.adapted_shapes();
    if merged.layers.len() != shapes.len() || merged.layers.iter().zip(&shapes).any(|(m, s)| m.shape() != *s) {
        return Err(HamError::Shape("merged delta does not match the backbone's adapted layers".into()));
    }
    Ok(FinalModel {
        backbone,
        merged: merged.layers.clone(),
    })
}
