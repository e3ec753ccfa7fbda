//! The frozen base network and its two forward regimes.
//!
//! Hidden layers are `relu(W₀h + bias + Σ_j α_Gj·ΔW_Gj·h + α·B(A·h))`; the
//! head maps the last hidden features to one logit per class seen so far.
//! Weights follow the `out × in` convention, so a layer acts on a batch
//! `H` (n×in) as `H·Wᵀ`.

use std::hash::{Hash, Hasher};

use crate::adapters::{GroupRegistry, TaskAdapter};
use crate::error::{HamError, Result};
use crate::rng::{streams, RngState};
use crate::tensor::{matmul_nt, Matrix};

/// Standard deviation of freshly added head rows.
pub const HEAD_INIT_STD: f64 = 0.01;

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }
}

#[derive(Debug, Clone)]
pub struct FrozenBackbone {
    layers: Vec<DenseLayer>,
    pub head: DenseLayer,
    head_rng: RngState,
}

impl FrozenBackbone {
    /// He-initialized hidden stack `input_dim → hidden[0] → … → hidden[last]`
    /// with an empty head.
    pub fn new(input_dim: usize, hidden: &[usize], seed: u64) -> Result<Self> {
        if input_dim == 0 || hidden.is_empty() || hidden.contains(&0) {
            return Err(HamError::Config(
                "backbone needs a positive input dim and at least one positive hidden width".into(),
            ));
        }
        let mut rng = RngState::substream(seed, streams::BACKBONE);
        let mut layers = Vec::with_capacity(hidden.len());
        let mut fan_in = input_dim;
        for &width in hidden {
            let std = (2.0 / fan_in as f64).sqrt();
            layers.push(DenseLayer {
                weight: Matrix::from_fn(width, fan_in, |_, _| std * rng.normal()),
                bias: vec![0.0; width],
            });
            fan_in = width;
        }
        Ok(FrozenBackbone {
            layers,
            head: DenseLayer {
                weight: Matrix::zeros(0, fan_in),
                bias: Vec::new(),
            },
            head_rng: RngState::substream(seed, streams::HEAD),
        })
    }

    pub fn from_parts(layers: Vec<DenseLayer>, head: DenseLayer, seed: u64) -> Result<Self> {
        let mut prev = None;
        for l in layers.iter().chain(std::iter::once(&head)) {
            if l.bias.len() != l.out_dim() {
                return Err(HamError::Shape("bias length differs from layer width".into()));
            }
            if let Some(p) = prev {
                if l.in_dim() != p {
                    return Err(HamError::Shape("consecutive layers do not chain".into()));
                }
            }
            prev = Some(l.out_dim());
        }
        Ok(FrozenBackbone {
            layers,
            head,
            head_rng: RngState::substream(seed, streams::HEAD),
        })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.head.in_dim()
    }

    pub fn num_classes_seen(&self) -> usize {
        self.head.out_dim()
    }

    /// (d, k) of every adapted layer. The head is not adapted.
    pub fn adapted_shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| l.weight.shape()).collect()
    }

    /// Appends `new_classes` head rows; existing rows are untouched.
    pub fn expand_head(&mut self, new_classes: usize) -> Result<()> {
        if new_classes == 0 {
            return Err(HamError::Input("expand_head needs at least one class".into()));
        }
        let fan_in = self.feature_dim();
        let fresh = Matrix::from_fn(new_classes, fan_in, |_, _| HEAD_INIT_STD * self.head_rng.normal());
        self.head.weight = self.head.weight.vconcat(&fresh)?;
        self.head.bias.extend(std::iter::repeat_n(0.0, new_classes));
        Ok(())
    }

    /// Hash over every frozen weight and bias bit pattern (head excluded).
    pub fn frozen_checksum(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for l in &self.layers {
            l.weight.shape().hash(&mut h);
            for v in l.weight.as_slice().iter().chain(&l.bias) {
                v.to_bits().hash(&mut h);
            }
        }
        h.finish()
    }

    fn check_input(&self, x: &Matrix) -> Result<()> {
        if x.cols() != self.input_dim() {
            return Err(HamError::Shape(format!(
                "input has {} features, backbone expects {}",
                x.cols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Plain forward with the given effective per-layer weights.
    fn forward_with_weights(&self, x: &Matrix, weights: &[&Matrix]) -> Result<Matrix> {
        self.check_input(x)?;
        let mut h = x.clone();
        for (layer, w) in self.layers.iter().zip(weights) {
            let mut z = matmul_nt(&h, w)?;
            add_bias(&mut z, &layer.bias);
            relu_in_place(&mut z);
            h = z;
        }
        self.head_logits(&h)
    }

    fn head_logits(&self, features: &Matrix) -> Result<Matrix> {
        let mut logits = matmul_nt(features, &self.head.weight)?;
        add_bias(&mut logits, &self.head.bias);
        Ok(logits)
    }

    /// Forward through W₀ alone.
    pub fn forward_frozen(&self, x: &Matrix) -> Result<Matrix> {
        let w: Vec<&Matrix> = self.layers.iter().map(|l| &l.weight).collect();
        self.forward_with_weights(x, &w)
    }

    /// Forward with `W₀ + merged[l]` substituted in every adapted layer.
    pub fn forward_final(&self, x: &Matrix, merged: &[Matrix]) -> Result<Matrix> {
        let effective = self.effective_weights(merged)?;
        let w: Vec<&Matrix> = effective.iter().collect();
        self.forward_with_weights(x, &w)
    }

    pub(crate) fn effective_weights(&self, merged: &[Matrix]) -> Result<Vec<Matrix>> {
        if merged.len() != self.layers.len() {
            return Err(HamError::Shape(format!(
                "{} merged deltas for {} adapted layers",
                merged.len(),
                self.layers.len()
            )));
        }
        self.layers
            .iter()
            .zip(merged)
            .map(|(l, d)| {
                let mut w = l.weight.clone();
                w.add_scaled(d, 1.0)?;
                Ok(w)
            })
            .collect()
    }

    /// Training-time forward over a batch (one example per row of `x`).
    pub fn forward_train(&self, x: &Matrix, ctx: &ForwardContext) -> Result<(Matrix, ForwardCache)> {
        self.check_input(x)?;
        ctx.check_against(self)?;
        let mut layers = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut z = matmul_nt(&h, &layer.weight)?;
            add_bias(&mut z, &layer.bias);

            let mut group_out = Vec::with_capacity(ctx.group_deltas.len());
            for (deltas, &alpha) in ctx.group_deltas.iter().zip(&ctx.group_alphas) {
                let g = matmul_nt(&h, &deltas[l])?;
                z.add_scaled(&g, alpha)?;
                group_out.push(g);
            }

            let (current_proj, current_out) = match &ctx.current {
                Some(adapter) => {
                    let la = &adapter.layers[l];
                    let proj = matmul_nt(&h, &la.a)?;
                    let out = matmul_nt(&proj, &la.b)?;
                    z.add_scaled(&out, adapter.alpha)?;
                    (Some(proj), Some(out))
                }
                None => (None, None),
            };

            let mut next = z.clone();
            relu_in_place(&mut next);
            layers.push(LayerCache {
                input: std::mem::replace(&mut h, next),
                pre: z,
                group_out,
                current_proj,
                current_out,
            });
        }
        let logits = self.head_logits(&h)?;
        Ok((
            logits.clone(),
            ForwardCache {
                layers,
                features: h,
                logits,
            },
        ))
    }

    /// Single-example convenience wrapper around [`Self::forward_train`].
    pub fn forward_train_one(&self, x: &[f64], ctx: &ForwardContext) -> Result<Vec<f64>> {
        let xm = Matrix::from_vec(1, x.len(), x.to_vec())?;
        Ok(self.forward_train(&xm, ctx)?.0.into_vec())
    }
}

pub(crate) fn add_bias(z: &mut Matrix, bias: &[f64]) {
    for i in 0..z.rows() {
        for (v, b) in z.row_mut(i).iter_mut().zip(bias) {
            *v += b;
        }
    }
}

pub(crate) fn relu_in_place(z: &mut Matrix) {
    for v in z.as_mut_slice() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// What the training-time forward sees besides the backbone: frozen group
/// deltas with their (trainable) scalars and the current task adapter.
#[derive(Debug, Clone)]
pub struct ForwardContext {
    /// Dense `B_G·A_G` per group, per layer. Frozen.
    pub group_deltas: Vec<Vec<Matrix>>,
    pub group_alphas: Vec<f64>,
    pub current: Option<TaskAdapter>,
    pub group_alphas_trainable: bool,
    pub current_alpha_trainable: bool,
}

impl ForwardContext {
    pub fn new(registry: &GroupRegistry, current: Option<TaskAdapter>) -> Result<Self> {
        let group_deltas = registry
            .groups
            .iter()
            .map(|g| g.deltas())
            .collect::<Result<Vec<_>>>()?;
        Ok(ForwardContext {
            group_deltas,
            group_alphas: registry.alphas(),
            current,
            group_alphas_trainable: true,
            current_alpha_trainable: true,
        })
    }

    /// No groups, just the given adapter.
    pub fn solo(current: Option<TaskAdapter>) -> Self {
        ForwardContext {
            group_deltas: Vec::new(),
            group_alphas: Vec::new(),
            current,
            group_alphas_trainable: false,
            current_alpha_trainable: true,
        }
    }

    pub fn num_groups(&self) -> usize {
        self.group_deltas.len()
    }

    fn check_against(&self, backbone: &FrozenBackbone) -> Result<()> {
        let shapes = backbone.adapted_shapes();
        if self.group_alphas.len() != self.group_deltas.len() {
            return Err(HamError::Shape("one alpha per group required".into()));
        }
        for deltas in &self.group_deltas {
            if deltas.len() != shapes.len() || deltas.iter().zip(&shapes).any(|(d, s)| d.shape() != *s) {
                return Err(HamError::Shape("group delta shapes do not match the backbone".into()));
            }
        }
        if let Some(a) = &self.current {
            if a.layers.len() != shapes.len()
                || a.layers.iter().zip(&shapes).any(|(l, s)| l.weight_shape() != *s)
            {
                return Err(HamError::Shape("current adapter shapes do not match the backbone".into()));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct LayerCache {
    /// Layer input (n×k).
    pub input: Matrix,
    /// Pre-activation (n×d).
    pub pre: Matrix,
    /// Unscaled `ΔW_G·h` per group (n×d each).
    pub group_out: Vec<Matrix>,
    /// `A·h` for the current adapter (n×r).
    pub current_proj: Option<Matrix>,
    /// Unscaled `B·A·h` for the current adapter (n×d).
    pub current_out: Option<Matrix>,
}

#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub layers: Vec<LayerCache>,
    /// Output of the last hidden layer (n×feature_dim).
    pub features: Matrix,
    pub logits: Matrix,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{AdapterGroup, LayerAdapter};

    fn random_adapter(shapes: &[(usize, usize)], rank: usize, rng: &mut RngState) -> TaskAdapter {
        TaskAdapter {
            task_id: 0,
            layers: shapes
                .iter()
                .map(|&(d, k)| LayerAdapter {
                    b: Matrix::from_fn(d, rank, |_, _| rng.normal() * 0.3),
                    a: Matrix::from_fn(rank, k, |_, _| rng.normal() * 0.3),
                })
                .collect(),
            alpha: 0.5 + rng.uniform(),
        }
    }

    fn setup() -> (FrozenBackbone, Matrix, RngState) {
        let mut bb = FrozenBackbone::new(6, &[7, 5], 17).unwrap();
        bb.expand_head(3).unwrap();
        let mut rng = RngState::new(99);
        let x = Matrix::from_fn(4, 6, |_, _| rng.normal());
        (bb, x, rng)
    }

    fn registry_with(groups: Vec<TaskAdapter>) -> GroupRegistry {
        let mut reg = GroupRegistry::new(8, 0.3).unwrap();
        for (i, a) in groups.into_iter().enumerate() {
            reg.groups.push(AdapterGroup {
                group_id: i,
                base_rank: a.rank(),
                layers: a.layers,
                alpha_g: a.alpha,
                member_count: 1,
                member_task_ids: vec![i],
            });
        }
        reg
    }

    /// Materializes `W₀ + Σ α_G ΔW_G + α ΔW` per layer, then runs a plain
    /// per-example forward with explicit loops.
    fn materialized_oracle(bb: &FrozenBackbone, x: &Matrix, reg: &GroupRegistry, cur: Option<&TaskAdapter>) -> Matrix {
        let mut weights = Vec::new();
        for (l, layer) in bb.layers().iter().enumerate() {
            let (d, k) = layer.weight.shape();
            let mut w = layer.weight.clone();
            let mut add = |la: &LayerAdapter, s: f64| {
                for i in 0..d {
                    for j in 0..k {
                        let mut acc = 0.0;
                        for p in 0..la.rank() {
                            acc += la.b.get(i, p) * la.a.get(p, j);
                        }
                        w.set(i, j, w.get(i, j) + s * acc);
                    }
                }
            };
            for g in &reg.groups {
                add(&g.layers[l], g.alpha_g);
            }
            if let Some(c) = cur {
                add(&c.layers[l], c.alpha);
            }
            weights.push(w);
        }
        let mut out = Matrix::zeros(x.rows(), bb.num_classes_seen());
        for n in 0..x.rows() {
            let mut h: Vec<f64> = x.row(n).to_vec();
            for (layer, w) in bb.layers().iter().zip(&weights) {
                h = (0..w.rows())
                    .map(|i| {
                        let z: f64 = (0..w.cols()).map(|j| w.get(i, j) * h[j]).sum::<f64>() + layer.bias[i];
                        z.max(0.0)
                    })
                    .collect();
            }
            for c in 0..bb.num_classes_seen() {
                let z: f64 = (0..h.len()).map(|j| bb.head.weight.get(c, j) * h[j]).sum::<f64>() + bb.head.bias[c];
                out.set(n, c, z);
            }
        }
        out
    }

    #[test]
    fn zero_adapter_equals_plain_forward() {
        let (bb, x, mut rng) = setup();
        let adapter = TaskAdapter::init(0, &bb.adapted_shapes(), 2, &mut rng).unwrap();
        let ctx = ForwardContext::solo(Some(adapter));
        let (logits, _) = bb.forward_train(&x, &ctx).unwrap();
        assert_eq!(logits, bb.forward_frozen(&x).unwrap());
    }

    #[test]
    fn zero_group_alpha_annihilates_group() {
        let (bb, x, mut rng) = setup();
        let mut reg = registry_with(vec![random_adapter(&bb.adapted_shapes(), 2, &mut rng)]);
        reg.groups[0].alpha_g = 0.0;
        let ctx = ForwardContext::new(&reg, None).unwrap();
        let (logits, _) = bb.forward_train(&x, &ctx).unwrap();
        assert!(logits.max_abs_diff(&bb.forward_frozen(&x).unwrap()) < 1e-12);
    }

    #[test]
    fn train_forward_matches_materialized_oracle() {
        let (bb, x, mut rng) = setup();
        let shapes = bb.adapted_shapes();
        let reg = registry_with(vec![random_adapter(&shapes, 2, &mut rng), random_adapter(&shapes, 4, &mut rng)]);
        let cur = random_adapter(&shapes, 2, &mut rng);
        let ctx = ForwardContext::new(&reg, Some(cur.clone())).unwrap();
        let (logits, _) = bb.forward_train(&x, &ctx).unwrap();
        let oracle = materialized_oracle(&bb, &x, &reg, Some(&cur));
        assert!(logits.max_abs_diff(&oracle) < 1e-9);
        let one = bb.forward_train_one(x.row(0), &ctx).unwrap();
        assert!(one.iter().zip(oracle.row(0)).all(|(a, b)| (a - b).abs() < 1e-9));
    }

    #[test]
    fn final_forward_zero_delta_and_oracle() {
        let (bb, x, mut rng) = setup();
        let shapes = bb.adapted_shapes();
        let zeros: Vec<Matrix> = shapes.iter().map(|&(d, k)| Matrix::zeros(d, k)).collect();
        assert_eq!(bb.forward_final(&x, &zeros).unwrap(), bb.forward_frozen(&x).unwrap());

        let reg = registry_with(vec![
            random_adapter(&shapes, 2, &mut rng),
            random_adapter(&shapes, 2, &mut rng),
            random_adapter(&shapes, 4, &mut rng),
        ]);
        let m = reg.len() as f64;
        let merged: Vec<Matrix> = (0..shapes.len())
            .map(|l| {
                let mut acc = Matrix::zeros(shapes[l].0, shapes[l].1);
                for g in &reg.groups {
                    acc.add_scaled(&crate::adapters::delta_weight(&g.layers[l]).unwrap(), g.alpha_g / m).unwrap();
                }
                acc
            })
            .collect();
        let mut scaled = reg.clone();
        for g in &mut scaled.groups {
            g.alpha_g /= m;
        }
        let oracle = materialized_oracle(&bb, &x, &scaled, None);
        assert!(bb.forward_final(&x, &merged).unwrap().max_abs_diff(&oracle) < 1e-9);
    }

    #[test]
    fn current_term_is_linear_in_alpha() {
        let (bb, x, mut rng) = setup();
        let shapes = bb.adapted_shapes();
        let mut cur = random_adapter(&shapes, 2, &mut rng);
        let base = bb.forward_train(&x, &ForwardContext::solo(None)).unwrap().1;
        let one = bb.forward_train(&x, &ForwardContext::solo(Some(cur.clone()))).unwrap().1;
        cur.alpha *= 2.0;
        let two = bb.forward_train(&x, &ForwardContext::solo(Some(cur))).unwrap().1;
        // First layer: inputs identical, so pre-activation contributions compare directly.
        let mut c1 = one.layers[0].pre.clone();
        c1.add_scaled(&base.layers[0].pre, -1.0).unwrap();
        let mut c2 = two.layers[0].pre.clone();
        c2.add_scaled(&base.layers[0].pre, -1.0).unwrap();
        assert!(c2.max_abs_diff(&c1.scale(2.0)) < 1e-12);
    }

    #[test]
    fn head_growth_keeps_old_rows() {
        let mut bb = FrozenBackbone::new(4, &[5], 3).unwrap();
        assert_eq!(bb.num_classes_seen(), 0);
        bb.expand_head(2).unwrap();
        let x = Matrix::from_fn(3, 4, |i, j| (i as f64) - (j as f64) * 0.5);
        let before = bb.forward_frozen(&x).unwrap();
        bb.expand_head(2).unwrap();
        assert_eq!(bb.num_classes_seen(), 4);
        let after = bb.forward_frozen(&x).unwrap();
        for n in 0..3 {
            for c in 0..2 {
                assert_eq!(before.get(n, c).to_bits(), after.get(n, c).to_bits());
            }
        }
        let mut again = FrozenBackbone::new(4, &[5], 3).unwrap();
        again.expand_head(2).unwrap();
        again.expand_head(2).unwrap();
        assert_eq!(again.head, bb.head);
        assert!(bb.expand_head(0).is_err());
    }

    #[test]
    fn shape_errors() {
        let (bb, _, _) = setup();
        let bad = Matrix::zeros(2, 5);
        assert!(matches!(bb.forward_frozen(&bad), Err(HamError::Shape(_))));
        assert!(matches!(bb.forward_final(&Matrix::zeros(1, 6), &[]), Err(HamError::Shape(_))));
    }
}
