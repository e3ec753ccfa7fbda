//! Task adapters, group adapters and the registry that holds the groups.
//!
//! Every adapter stores, per adapted layer, a down factor `b` (d×r) and an up
//! factor `a` (r×k); the layer's weight update is `b·a`. A group adapter is
//! the column/row concatenation of its pruned members, so its rank grows by
//! `r` with each insertion.

use crate::error::{HamError, Result};
use crate::rng::RngState;
use crate::tensor::{matmul, Matrix};

/// Standard deviation of the Gaussian used for fresh `b` factors.
pub const B_INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq)]
pub struct LayerAdapter {
    pub b: Matrix,
    pub a: Matrix,
}

impl LayerAdapter {
    pub fn new(b: Matrix, a: Matrix) -> Result<Self> {
        if b.cols() != a.rows() {
            return Err(HamError::Shape(format!(
                "adapter factors disagree on rank: b is {}x{}, a is {}x{}",
                b.rows(),
                b.cols(),
                a.rows(),
                a.cols()
            )));
        }
        Ok(LayerAdapter { b, a })
    }

    /// Zero-rank adapter for a d×k layer; the neutral element of concatenation.
    pub fn empty(d: usize, k: usize) -> Self {
        LayerAdapter {
            b: Matrix::zeros(d, 0),
            a: Matrix::zeros(0, k),
        }
    }

    pub fn rank(&self) -> usize {
        self.b.cols()
    }

    /// (d, k) of the weight this adapter modifies.
    pub fn weight_shape(&self) -> (usize, usize) {
        (self.b.rows(), self.a.cols())
    }

    pub fn nonzero_count(&self) -> usize {
        self.b.count_nonzero() + self.a.count_nonzero()
    }
}

/// `b·a`, the dense weight update of one layer.
pub fn delta_weight(layer: &LayerAdapter) -> Result<Matrix> {
    matmul(&layer.b, &layer.a)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskAdapter {
    pub task_id: usize,
    pub layers: Vec<LayerAdapter>,
    pub alpha: f64,
}

impl TaskAdapter {
    /// Fresh adapter for layers of the given (d, k) shapes: Gaussian `b`,
    /// zero `a`, so the initial update is exactly zero. `alpha` starts at 1.
    pub fn init(task_id: usize, shapes: &[(usize, usize)], rank: usize, rng: &mut RngState) -> Result<Self> {
        if rank == 0 {
            return Err(HamError::Config("adapter rank must be at least 1".into()));
        }
        let mut layers = Vec::with_capacity(shapes.len());
        for &(d, k) in shapes {
            if rank > d.min(k) {
                return Err(HamError::Config(format!(
                    "rank {rank} exceeds min({d}, {k}) for a task adapter"
                )));
            }
            let b = Matrix::from_fn(d, rank, |_, _| B_INIT_STD * rng.normal());
            layers.push(LayerAdapter {
                b,
                a: Matrix::zeros(rank, k),
            });
        }
        Ok(TaskAdapter {
            task_id,
            layers,
            alpha: 1.0,
        })
    }

    pub fn rank(&self) -> usize {
        self.layers.first().map_or(0, LayerAdapter::rank)
    }

    pub fn deltas(&self) -> Result<Vec<Matrix>> {
        self.layers.iter().map(delta_weight).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterGroup {
    pub group_id: usize,
    pub layers: Vec<LayerAdapter>,
    pub alpha_g: f64,
    pub member_count: usize,
    pub member_task_ids: Vec<usize>,
    /// Rank contributed by each member.
    pub base_rank: usize,
}

impl AdapterGroup {
    /// A group with no members yet; layers have rank zero.
    pub fn empty(group_id: usize, shapes: &[(usize, usize)], base_rank: usize) -> Self {
        AdapterGroup {
            group_id,
            layers: shapes.iter().map(|&(d, k)| LayerAdapter::empty(d, k)).collect(),
            alpha_g: 0.0,
            member_count: 0,
            member_task_ids: Vec::new(),
            base_rank,
        }
    }

    pub fn rank(&self) -> usize {
        self.layers.first().map_or(0, LayerAdapter::rank)
    }

    pub fn deltas(&self) -> Result<Vec<Matrix>> {
        self.layers.iter().map(delta_weight).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupRegistry {
    pub groups: Vec<AdapterGroup>,
    pub g_max: usize,
    pub tau_sim: f64,
}

impl GroupRegistry {
    pub fn new(g_max: usize, tau_sim: f64) -> Result<Self> {
        if g_max == 0 {
            return Err(HamError::Config("g_max must be at least 1".into()));
        }
        if !tau_sim.is_finite() {
            return Err(HamError::Config("tau_sim must be finite".into()));
        }
        Ok(GroupRegistry {
            groups: Vec::new(),
            g_max,
            tau_sim,
        })
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn alphas(&self) -> Vec<f64> {
        self.groups.iter().map(|g| g.alpha_g).collect()
    }

    pub fn group(&self, group_id: usize) -> Option<&AdapterGroup> {
        self.groups.iter().find(|g| g.group_id == group_id)
    }

    pub fn group_mut(&mut self, group_id: usize) -> Option<&mut AdapterGroup> {
        self.groups.iter_mut().find(|g| g.group_id == group_id)
    }
}

/// Anything made of low-rank layer factors.
pub trait LowRank {
    fn layer_factors(&self) -> &[LayerAdapter];

    /// Entries with nonzero value across every `b` and `a`.
    fn nonzero_parameter_count(&self) -> usize {
        self.layer_factors().iter().map(LayerAdapter::nonzero_count).sum()
    }
}

impl LowRank for TaskAdapter {
    fn layer_factors(&self) -> &[LayerAdapter] {
        &self.layers
    }
}

impl LowRank for AdapterGroup {
    fn layer_factors(&self) -> &[LayerAdapter] {
        &self.layers
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::prune_matrix;

    #[test]
    fn zero_b_gives_zero_delta() {
        let layer = LayerAdapter::new(Matrix::zeros(3, 2), Matrix::from_fn(2, 4, |i, j| (i + j) as f64)).unwrap();
        assert_eq!(delta_weight(&layer).unwrap(), Matrix::zeros(3, 4));
    }

    #[test]
    fn rank_one_outer_product() {
        let layer = LayerAdapter::new(
            Matrix::from_rows(&[&[1.0], &[2.0]]),
            Matrix::from_rows(&[&[3.0, 4.0]]),
        )
        .unwrap();
        assert_eq!(
            delta_weight(&layer).unwrap(),
            Matrix::from_rows(&[&[3.0, 4.0], &[6.0, 8.0]])
        );
    }

    #[test]
    fn delta_matches_naive_loop() {
        let mut rng = RngState::new(5);
        let b = Matrix::from_fn(6, 2, |_, _| rng.normal());
        let a = Matrix::from_fn(2, 5, |_, _| rng.normal());
        let layer = LayerAdapter::new(b.clone(), a.clone()).unwrap();
        let delta = delta_weight(&layer).unwrap();
        for i in 0..6 {
            for j in 0..5 {
                let expect: f64 = (0..2).map(|p| b.get(i, p) * a.get(p, j)).sum();
                assert!((delta.get(i, j) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mismatched_factors_rejected() {
        assert!(matches!(
            LayerAdapter::new(Matrix::zeros(3, 2), Matrix::zeros(3, 4)),
            Err(HamError::Shape(_))
        ));
    }

    #[test]
    fn parameter_counts() {
        let mut rng = RngState::new(1);
        let mut adapter = TaskAdapter::init(0, &[(64, 64)], 16, &mut rng).unwrap();
        adapter.layers[0].a = Matrix::from_fn(16, 64, |_, _| rng.normal());
        assert_eq!(adapter.nonzero_parameter_count(), 16 * (64 + 64));

        for layer in &mut adapter.layers {
            layer.b = prune_matrix(&layer.b, 0.5).unwrap();
            layer.a = prune_matrix(&layer.a, 0.5).unwrap();
        }
        assert_eq!(adapter.nonzero_parameter_count(), 512 + 512);

        let zero = TaskAdapter {
            task_id: 0,
            layers: vec![LayerAdapter::new(Matrix::zeros(4, 2), Matrix::zeros(2, 4)).unwrap()],
            alpha: 1.0,
        };
        assert_eq!(zero.nonzero_parameter_count(), 0);
    }

    #[test]
    fn fresh_adapter_has_zero_delta_and_unit_alpha() {
        let mut rng = RngState::new(9);
        let adapter = TaskAdapter::init(3, &[(8, 6), (5, 8)], 2, &mut rng).unwrap();
        assert_eq!(adapter.alpha, 1.0);
        assert_eq!(adapter.rank(), 2);
        for d in adapter.deltas().unwrap() {
            assert_eq!(d.count_nonzero(), 0);
        }
        assert!(TaskAdapter::init(0, &[(4, 4)], 5, &mut rng).is_err());
    }
}
