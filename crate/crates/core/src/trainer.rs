//! Per-task optimization of the current adapter, its scalar, the group
//! scalars and this task's head rows. Everything else stays frozen.

use serde::{Deserialize, Serialize};

use crate::adapters::{GroupRegistry, LayerAdapter, TaskAdapter};
use crate::backbone::{ForwardCache, ForwardContext, FrozenBackbone};
use crate::error::{HamError, Result};
use crate::optim::{AdamWConfig, OptimizerState, ParamSlot};
use crate::rng::RngState;
use crate::tasks::TaskDataset;
use crate::tensor::{matmul, matmul_tn, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    pub epochs: usize,
    pub rank: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: AdamWConfig::default(),
            batch_size: 64,
            epochs: 20,
            rank: 16,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub final_loss: f64,
    pub epoch_losses: Vec<f64>,
    pub adapter: TaskAdapter,
    pub group_alphas: Vec<f64>,
}

/// Gradients for exactly the trainable set. Head gradients cover only the
/// active classes, in the order they were passed.
#[derive(Debug, Clone)]
pub struct Gradients {
    /// d loss / d B (in `b`) and d loss / d A (in `a`) per layer; empty when
    /// there is no current adapter.
    pub layers: Vec<LayerAdapter>,
    pub alpha: f64,
    pub group_alphas: Vec<f64>,
    pub head_weight: Matrix,
    pub head_bias: Vec<f64>,
}

fn check_labels(y: &[usize], active: &[usize]) -> Result<Vec<usize>> {
    y.iter()
        .map(|label| {
            active
                .iter()
                .position(|c| c == label)
                .ok_or_else(|| HamError::Input(format!("label {label} is not among the active classes")))
        })
        .collect()
}

/// Mean cross-entropy with softmax restricted to `active` logits, plus the
/// per-example gradient with respect to the active logits.
fn masked_cross_entropy(logits: &Matrix, targets: &[usize], active: &[usize]) -> (f64, Matrix) {
    let n = logits.rows();
    let mut grad = Matrix::zeros(n, active.len());
    let mut loss = 0.0;
    for i in 0..n {
        let row = logits.row(i);
        let max = active.iter().map(|&c| row[c]).fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = active.iter().map(|&c| (row[c] - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[active[targets[i]]];
        let g = grad.row_mut(i);
        for (j, &c) in active.iter().enumerate() {
            g[j] = (row[c] - log_z).exp() / n as f64;
        }
        g[targets[i]] -= 1.0 / n as f64;
    }
    (loss / n as f64, grad)
}

/// Loss only; used by finite-difference checks.
pub fn batch_loss(
    backbone: &FrozenBackbone,
    ctx: &ForwardContext,
    x: &Matrix,
    y: &[usize],
    active: &[usize],
) -> Result<f64> {
    let targets = check_labels(y, active)?;
    let (logits, _) = backbone.forward_train(x, ctx)?;
    Ok(masked_cross_entropy(&logits, &targets, active).0)
}

/// Mean masked cross-entropy over the batch and its gradients.
pub fn loss_and_gradients(
    backbone: &FrozenBackbone,
    ctx: &ForwardContext,
    x: &Matrix,
    y: &[usize],
    active: &[usize],
) -> Result<(f64, Gradients)> {
    if x.rows() == 0 || x.rows() != y.len() {
        return Err(HamError::Input("batch must be nonempty with one label per row".into()));
    }
    if let Some(&c) = active.iter().find(|&&c| c >= backbone.num_classes_seen()) {
        return Err(HamError::Input(format!("class {c} has no head row")));
    }
    let targets = check_labels(y, active)?;
    let (logits, cache) = backbone.forward_train(x, ctx)?;
    let (loss, dlogits) = masked_cross_entropy(&logits, &targets, active);
    Ok((loss, backward(backbone, ctx, &cache, &dlogits, active)?))
}

fn backward(
    backbone: &FrozenBackbone,
    ctx: &ForwardContext,
    cache: &ForwardCache,
    dlogits: &Matrix,
    active: &[usize],
) -> Result<Gradients> {
    let head_rows = Matrix::from_fn(active.len(), backbone.feature_dim(), |i, j| backbone.head.weight.get(active[i], j));
    let head_weight = matmul_tn(dlogits, &cache.features)?;
    let head_bias = (0..active.len())
        .map(|j| (0..dlogits.rows()).map(|i| dlogits.get(i, j)).sum())
        .collect();
    let mut upstream = matmul(dlogits, &head_rows)?;

    let n_layers = backbone.layers().len();
    let mut layer_grads = Vec::with_capacity(n_layers);
    let mut alpha = 0.0;
    let mut group_alphas = vec![0.0; ctx.num_groups()];

    for l in (0..n_layers).rev() {
        let lc = &cache.layers[l];
        let mut gz = upstream;
        for (g, z) in gz.as_mut_slice().iter_mut().zip(lc.pre.as_slice()) {
            if *z <= 0.0 {
                *g = 0.0;
            }
        }

        for (j, out) in lc.group_out.iter().enumerate() {
            group_alphas[j] += dot_all(&gz, out);
        }

        let mut g_proj = None;
        if let (Some(adapter), Some(proj), Some(out)) = (&ctx.current, &lc.current_proj, &lc.current_out) {
            let la = &adapter.layers[l];
            alpha += dot_all(&gz, out);
            let db = matmul_tn(&gz, proj)?.scale(adapter.alpha);
            let gp = matmul(&gz, &la.b)?.scale(adapter.alpha);
            let da = matmul_tn(&gp, &lc.input)?;
            layer_grads.push(LayerAdapter { b: db, a: da });
            g_proj = Some(gp);
        }

        if l == 0 {
            break;
        }
        let mut next = matmul(&gz, &backbone.layers()[l].weight)?;
        for (deltas, &a_g) in ctx.group_deltas.iter().zip(&ctx.group_alphas) {
            next.add_scaled(&matmul(&gz, &deltas[l])?, a_g)?;
        }
        if let (Some(gp), Some(adapter)) = (g_proj, &ctx.current) {
            next.add_scaled(&matmul(&gp, &adapter.layers[l].a)?, 1.0)?;
        }
        upstream = next;
    }
    layer_grads.reverse();

    Ok(Gradients {
        layers: layer_grads,
        alpha,
        group_alphas,
        head_weight,
        head_bias,
    })
}

fn dot_all(a: &Matrix, b: &Matrix) -> f64 {
    crate::tensor::dot(a.as_slice(), b.as_slice())
}

/// Trains the adapter already placed in `ctx.current` on `dataset`.
/// Group deltas are read-only; the backbone's hidden layers are never
/// touched, only the head rows of the dataset's classes.
pub fn train_adapter(
    dataset: &TaskDataset,
    backbone: &mut FrozenBackbone,
    mut ctx: ForwardContext,
    cfg: &TrainConfig,
    rng: &mut RngState,
) -> Result<TrainReport> {
    let n = dataset.train_len();
    if n == 0 {
        return Err(HamError::Input(format!("task {} has no training examples", dataset.task_id)));
    }
    if cfg.batch_size == 0 {
        return Err(HamError::Config("batch size must be positive".into()));
    }
    if ctx.current.is_none() {
        return Err(HamError::State("no current adapter to train".into()));
    }
    let active = dataset.class_ids.clone();
    if let Some(&c) = active.iter().find(|&&c| c >= backbone.num_classes_seen()) {
        return Err(HamError::Input(format!("class {c} has no head row")));
    }

    let mut opt = OptimizerState::new(cfg.optimizer);
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let feature_dim = backbone.feature_dim();

    for epoch in 0..cfg.epochs {
        rng.shuffle(&mut order);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let x = Matrix::from_fn(chunk.len(), dataset.train_x.cols(), |i, j| dataset.train_x.get(chunk[i], j));
            let y: Vec<usize> = chunk.iter().map(|&i| dataset.train_y[i]).collect();
            let (loss, grads) = loss_and_gradients(backbone, &ctx, &x, &y, &active)?;
            if !loss.is_finite() {
                return Err(HamError::Training(format!(
                    "task {} epoch {epoch}: loss is {loss}",
                    dataset.task_id
                )));
            }
            total += loss * chunk.len() as f64;

            let mut head_rows =
                Matrix::from_fn(active.len(), feature_dim, |i, j| backbone.head.weight.get(active[i], j));
            let mut head_bias: Vec<f64> = active.iter().map(|&c| backbone.head.bias[c]).collect();
            {
                let ForwardContext {
                    current,
                    group_alphas,
                    group_alphas_trainable,
                    current_alpha_trainable,
                    ..
                } = &mut ctx;
                let adapter = current.as_mut().expect("checked above");
                let mut slots = Vec::with_capacity(2 * adapter.layers.len() + 4);
                for (layer, g) in adapter.layers.iter_mut().zip(&grads.layers) {
                    slots.push(ParamSlot { values: layer.b.as_mut_slice(), grads: g.b.as_slice(), decay: true });
                    slots.push(ParamSlot { values: layer.a.as_mut_slice(), grads: g.a.as_slice(), decay: true });
                }
                if *current_alpha_trainable {
                    slots.push(ParamSlot {
                        values: std::slice::from_mut(&mut adapter.alpha),
                        grads: std::slice::from_ref(&grads.alpha),
                        decay: false,
                    });
                }
                if *group_alphas_trainable && !group_alphas.is_empty() {
                    slots.push(ParamSlot { values: group_alphas.as_mut_slice(), grads: &grads.group_alphas, decay: false });
                }
                slots.push(ParamSlot { values: head_rows.as_mut_slice(), grads: grads.head_weight.as_slice(), decay: true });
                slots.push(ParamSlot { values: &mut head_bias, grads: &grads.head_bias, decay: false });
                opt.step(&mut slots);
            }
            for (i, &c) in active.iter().enumerate() {
                backbone.head.weight.row_mut(c).copy_from_slice(head_rows.row(i));
                backbone.head.bias[c] = head_bias[i];
            }
        }
        epoch_losses.push(total / n as f64);
    }

    let adapter = ctx.current.take().expect("checked above");
    if !adapter.layers.iter().all(|l| l.b.is_finite() && l.a.is_finite()) || !adapter.alpha.is_finite() {
        return Err(HamError::Training(format!("task {}: adapter went non-finite", dataset.task_id)));
    }
    Ok(TrainReport {
        final_loss: epoch_losses.last().copied().unwrap_or(f64::NAN),
        epoch_losses,
        adapter,
        group_alphas: ctx.group_alphas,
    })
}

/// Trains a fresh adapter for `dataset` on top of the registry's frozen
/// groups, with the group scalars trainable.
pub fn train_task(
    dataset: &TaskDataset,
    backbone: &mut FrozenBackbone,
    registry: &GroupRegistry,
    cfg: &TrainConfig,
    rng: &mut RngState,
) -> Result<TrainReport> {
    let adapter = TaskAdapter::init(dataset.task_id, &backbone.adapted_shapes(), cfg.rank, rng)?;
    let ctx = ForwardContext::new(registry, Some(adapter))?;
    train_adapter(dataset, backbone, ctx, cfg, rng)
}
