//! Per-task consolidation: pick a group for the freshly trained adapter,
//! prune it, and concatenate it into that group.

use serde::{Deserialize, Serialize};

use crate::adapters::{delta_weight, AdapterGroup, GroupRegistry, LayerAdapter, TaskAdapter};
use crate::error::{HamError, Result};
use crate::tensor::{abs_cosine, prune_matrix, vectorize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupingRule {
    /// Join the most similar group once similarity reaches the threshold.
    Similarity,
    /// Join the least similar group once similarity falls to the threshold.
    Orthogonality,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityScope {
    LastLayer,
    MeanOverLayers,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConsolidationConfig {
    pub keep_fraction: f64,
    pub grouping: GroupingRule,
    pub scope: SimilarityScope,
}

impl Default for ConsolidationConfig {
    fn default() -> Self {
        ConsolidationConfig {
            keep_fraction: 0.6,
            grouping: GroupingRule::Similarity,
            scope: SimilarityScope::LastLayer,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    Join(usize),
    CreateNew,
}

fn layer_similarity(a: &LayerAdapter, b: &LayerAdapter) -> Result<f64> {
    let da = delta_weight(a)?;
    let db = delta_weight(b)?;
    if da.shape() != db.shape() {
        return Err(HamError::Shape(format!(
            "similarity between {:?} and {:?} deltas",
            da.shape(),
            db.shape()
        )));
    }
    abs_cosine(&vectorize(&da), &vectorize(&db))
}

/// Absolute cosine between the adapter's and the group's weight updates on
/// the last adapted layer (or averaged over all layers).
pub fn similarity(adapter: &TaskAdapter, group: &AdapterGroup, scope: SimilarityScope) -> Result<f64> {
    if adapter.layers.is_empty() || adapter.layers.len() != group.layers.len() {
        return Err(HamError::Shape("adapter and group layer counts differ or are zero".into()));
    }
    match scope {
        SimilarityScope::LastLayer => layer_similarity(adapter.layers.last().unwrap(), group.layers.last().unwrap()),
        SimilarityScope::MeanOverLayers => {
            let mut sum = 0.0;
            for (a, g) in adapter.layers.iter().zip(&group.layers) {
                sum += layer_similarity(a, g)?;
            }
            Ok(sum / adapter.layers.len() as f64)
        }
    }
}

/// Group choice for a new adapter. With the similarity rule: the most
/// similar group if it clears `tau_sim`, else a new group while under
/// `g_max`, else the most similar group regardless. The orthogonality rule
/// mirrors this with the least similar group and `≤ tau_sim`.
pub fn assign_group(
    adapter: &TaskAdapter,
    registry: &GroupRegistry,
    rule: GroupingRule,
    scope: SimilarityScope,
) -> Result<Decision> {
    if registry.is_empty() {
        return Ok(Decision::CreateNew);
    }
    let scores = registry
        .groups
        .iter()
        .map(|g| Ok((g.group_id, similarity(adapter, g, scope)?)))
        .collect::<Result<Vec<_>>>()?;
    // First index wins ties on both rules.
    let pick = |better: fn(f64, f64) -> bool| {
        scores
            .iter()
            .skip(1)
            .fold(scores[0], |best, &s| if better(s.1, best.1) { s } else { best })
    };
    let (best_id, passes) = match rule {
        GroupingRule::Similarity => {
            let (id, s) = pick(|a, b| a > b);
            (id, s >= registry.tau_sim)
        }
        GroupingRule::Orthogonality => {
            let (id, s) = pick(|a, b| a < b);
            (id, s <= registry.tau_sim)
        }
    };
    if passes || registry.len() >= registry.g_max {
        Ok(Decision::Join(best_id))
    } else {
        Ok(Decision::CreateNew)
    }
}

/// Running-average update of the group scalar with one more member.
pub fn update_group_alpha(group: &mut AdapterGroup, alpha_j: f64) {
    if group.member_count == 0 {
        group.alpha_g = alpha_j;
    } else {
        group.alpha_g += (alpha_j - group.alpha_g) / (group.member_count as f64 + 1.0);
    }
    group.member_count += 1;
}

/// Keeps the top `keep_fraction` magnitudes of every `b` and `a`
/// independently. Shapes and `alpha` are unchanged.
pub fn prune(adapter: &TaskAdapter, keep_fraction: f64) -> Result<TaskAdapter> {
    let layers = adapter
        .layers
        .iter()
        .map(|l| {
            Ok(LayerAdapter {
                b: prune_matrix(&l.b, keep_fraction)?,
                a: prune_matrix(&l.a, keep_fraction)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TaskAdapter {
        task_id: adapter.task_id,
        layers,
        alpha: adapter.alpha,
    })
}

/// `B_G ← [B_G, B̂]`, `A_G ← [A_G; Â]` on every layer, then the scalar and
/// membership bookkeeping.
pub fn concat_into_group(group: &mut AdapterGroup, pruned: &TaskAdapter) -> Result<()> {
    if group.layers.len() != pruned.layers.len() {
        return Err(HamError::Shape(format!(
            "group has {} layers, adapter has {}",
            group.layers.len(),
            pruned.layers.len()
        )));
    }
    if group.member_count > 0 && pruned.rank() != group.base_rank {
        return Err(HamError::Shape(format!(
            "adapter rank {} differs from the group's member rank {}",
            pruned.rank(),
            group.base_rank
        )));
    }
    let mut grown = Vec::with_capacity(group.layers.len());
    for (g, p) in group.layers.iter().zip(&pruned.layers) {
        if g.weight_shape() != p.weight_shape() {
            return Err(HamError::Shape(format!(
                "group layer is {:?}, adapter layer is {:?}",
                g.weight_shape(),
                p.weight_shape()
            )));
        }
        grown.push(LayerAdapter {
            b: g.b.hconcat(&p.b)?,
            a: g.a.vconcat(&p.a)?,
        });
    }
    group.layers = grown;
    group.base_rank = pruned.rank();
    update_group_alpha(group, pruned.alpha);
    group.member_task_ids.push(pruned.task_id);
    Ok(())
}

/// Assign, prune, concatenate: the whole per-task consolidation step.
pub fn ham_consolidate(adapter: &TaskAdapter, registry: &mut GroupRegistry, cfg: &ConsolidationConfig) -> Result<Decision> {
    let decision = assign_group(adapter, registry, cfg.grouping, cfg.scope)?;
    let pruned = prune(adapter, cfg.keep_fraction)?;
    match decision {
        Decision::CreateNew => {
            let shapes: Vec<_> = adapter.layers.iter().map(LayerAdapter::weight_shape).collect();
            let id = registry.groups.iter().map(|g| g.group_id + 1).max().unwrap_or(0);
            let mut group = AdapterGroup::empty(id, &shapes, adapter.rank());
            concat_into_group(&mut group, &pruned)?;
            registry.groups.push(group);
        }
        Decision::Join(id) => {
            let group = registry
                .group_mut(id)
                .ok_or_else(|| HamError::State(format!("group {id} vanished")))?;
            concat_into_group(group, &pruned)?;
        }
    }
    Ok(decision)
}
