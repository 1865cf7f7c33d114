//! Learned velocity-residual corrector: a single graph-convolution
//! aggregation over the vertex graph wrapping a small MLP. The network
//! reads per-vertex position, velocity, and material features, and emits a
//! per-vertex velocity correction (m/s) that the integrator adds inside
//! the position update, absorbing discretization error the analytic model
//! misses.
//!
//! The graph structure is fixed per topology: vertices are nodes, edges
//! follow the branch chains plus one link per junction, and every node
//! carries a self-loop. Aggregation uses the symmetrically normalized
//! adjacency `Ã = D^{-1/2} A D^{-1/2}`. A per-node mask supports uniform
//! padded layouts: masked slots contribute nothing to aggregation,
//! always emit zero, and generate exactly zero weight gradient. The
//! runtime corrector operates on the flat vertex list with an all-ones
//! mask; masked construction is exposed for padded batching.
//!
//! Training is one-step teacher-forced: each optimization target is the
//! squared distance between a ground-truth frame and the simulator's
//! one-step prediction from the previous ground-truth frame with the
//! residual enabled. The network output enters the position update
//! linearly (scaled by the time step), and the gradient treats the
//! constraint projection as locally constant, so backpropagation touches
//! only the residual path. The output layer starts at zero, making an
//! untrained network exactly equivalent to the pure physics model.

use std::cell::RefCell;

use nalgebra::{DMatrix, DVector, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dynamics::{
    deft_step, replay_gauges, BdloState, GaugeReplay, GraspSpec, StepConfig, VelocityCorrector,
};
use crate::error::{SimError, SimResult};
use crate::rod::MaterialParams;
use crate::topology::{Adjacency, BdloTopology};

/// Per-node input width: position (3), velocity (3), mass-matrix trace,
/// mean bend-stiffness eigenvalue of the incident edges, mean twist
/// stiffness of the incident edges.
pub const FEATURE_DIM: usize = 9;
/// Hidden width of the two-layer MLP.
pub const HIDDEN_WIDTH: usize = 32;
/// Floor applied to per-feature standard deviations before standardizing.
pub const FEATURE_STD_FLOOR: f64 = 1e-8;

/// Symmetrically normalized adjacency `Ã_ij = A_ij / √(d_i d_j)` with
/// degrees taken from the self-loop-carrying rows.
pub fn normalize_adjacency(adj: &Adjacency) -> DMatrix<f64> {
    let n = adj.n();
    let inv_sqrt_deg: Vec<f64> = (0..n).map(|i| 1.0 / adj.degree(i).sqrt()).collect();
    let mut m = adj.matrix().clone();
    for i in 0..n {
        for j in 0..n {
            m[(i, j)] *= inv_sqrt_deg[i] * inv_sqrt_deg[j];
        }
    }
    m
}

/// Raw (unstandardized) per-node feature rows, one per flat vertex.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    rows: DMatrix<f64>,
}

impl FeatureMatrix {
    pub fn node_count(&self) -> usize {
        self.rows.nrows()
    }

    pub fn row(&self, i: usize) -> Vec<f64> {
        self.rows.row(i).iter().copied().collect()
    }
}

/// Assemble the feature matrix for a state: per node `[x, v, tr M,
/// mean incident bend eigenvalue, mean incident twist stiffness]`.
pub fn features(
    x: &[Vec<Vector3<f64>>],
    v: &[Vec<Vector3<f64>>],
    topo: &BdloTopology,
    params: &MaterialParams,
) -> SimResult<FeatureMatrix> {
    let nb = topo.branch_count();
    if x.len() != nb || v.len() != nb || params.branches.len() != nb {
        return Err(SimError::Shape(format!(
            "feature inputs cover {}/{}/{} branches for a {nb}-branch topology",
            x.len(),
            v.len(),
            params.branches.len()
        )));
    }
    let mut rows = DMatrix::<f64>::zeros(topo.total_vertices(), FEATURE_DIM);
    for b in 0..nb {
        let n = topo.branch(b).vertex_count;
        if x[b].len() != n || v[b].len() != n {
            return Err(SimError::Shape(format!(
                "branch '{}' state sizes do not match its {n} vertices",
                topo.branch(b).id
            )));
        }
        let mat = &params.branches[b];
        for i in 0..n {
            let g = topo.global_vertex(b, i);
            for c in 0..3 {
                rows[(g, c)] = x[b][i][c];
                rows[(g, 3 + c)] = v[b][i][c];
            }
            rows[(g, 6)] = mat.mass[i].trace();
            // Mean over the incident edges (one at the ends, two inside)
            // of the bend-stiffness eigenvalue mean and twist stiffness.
            let lo = i.saturating_sub(1).min(n - 2);
            let hi = i.min(n - 2);
            let edges = (hi - lo + 1) as f64;
            let mut bend = 0.0;
            let mut twist = 0.0;
            for e in lo..=hi {
                bend += mat.bend_stiffness[e].trace() / 2.0;
                twist += mat.twist_stiffness[e];
            }
            rows[(g, 7)] = bend / edges;
            rows[(g, 8)] = twist / edges;
        }
    }
    Ok(FeatureMatrix { rows })
}

/// Graph-convolution residual network with a fixed normalized adjacency,
/// a per-node mask, stored feature-standardization statistics, and a
/// two-layer MLP (tanh hidden layer) mapping features to one 3-vector
/// per node.
#[derive(Debug, Clone, PartialEq)]
pub struct ResidualNet {
    pub(crate) a_hat: DMatrix<f64>,
    pub(crate) mask: DVector<f64>,
    pub(crate) feat_mean: DVector<f64>,
    pub(crate) feat_std: DVector<f64>,
    pub(crate) w1: DMatrix<f64>,
    pub(crate) b1: DVector<f64>,
    pub(crate) w2: DMatrix<f64>,
    pub(crate) b2: DVector<f64>,
}

impl ResidualNet {
    /// Network for a topology with every node live. The hidden layer is
    /// seeded small and random; the output layer starts at zero, so a
    /// fresh network emits exactly zero.
    pub fn new(topo: &BdloTopology, seed: u64) -> Self {
        Self::with_mask(topo, &vec![true; topo.total_vertices()], seed)
    }

    /// Network whose weights are all zero: forward output is exactly the
    /// zero field regardless of input.
    pub fn zeroed(topo: &BdloTopology) -> Self {
        let mut net = Self::new(topo, 0);
        net.w1.fill(0.0);
        net
    }

    /// Network with selected nodes masked out, as arises when branches
    /// are padded to uniform length: masked rows and columns of the
    /// normalized adjacency are zeroed, so masked nodes neither receive
    /// nor emit aggregation.
    pub fn with_mask(topo: &BdloTopology, live: &[bool], seed: u64) -> Self {
        let n = topo.total_vertices();
        assert_eq!(live.len(), n, "mask length must equal the vertex count");
        let mut a_hat = normalize_adjacency(&topo.adjacency());
        for i in 0..n {
            if !live[i] {
                for j in 0..n {
                    a_hat[(i, j)] = 0.0;
                    a_hat[(j, i)] = 0.0;
                }
            }
        }
        let mask = DVector::from_iterator(n, live.iter().map(|&m| if m { 1.0 } else { 0.0 }));
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (FEATURE_DIM as f64).sqrt();
        let w1 = DMatrix::from_fn(HIDDEN_WIDTH, FEATURE_DIM, |_, _| {
            rng.gen_range(-scale..scale)
        });
        ResidualNet {
            a_hat,
            mask,
            feat_mean: DVector::zeros(FEATURE_DIM),
            feat_std: DVector::from_element(FEATURE_DIM, 1.0),
            w1,
            b1: DVector::zeros(HIDDEN_WIDTH),
            w2: DMatrix::zeros(3, HIDDEN_WIDTH),
            b2: DVector::zeros(3),
        }
    }

    pub fn node_count(&self) -> usize {
        self.a_hat.nrows()
    }

    fn check_finite(&self) -> SimResult<()> {
        let finite = self.w1.iter().all(|w| w.is_finite())
            && self.b1.iter().all(|w| w.is_finite())
            && self.w2.iter().all(|w| w.is_finite())
            && self.b2.iter().all(|w| w.is_finite());
        if finite {
            Ok(())
        } else {
            Err(SimError::Numeric("residual network weights are not finite".into()))
        }
    }

    /// Standardized, masked feature row for node `i`.
    fn standardized_row(&self, f: &FeatureMatrix, i: usize) -> DVector<f64> {
        let mut row = DVector::zeros(FEATURE_DIM);
        if self.mask[i] == 0.0 {
            return row;
        }
        for c in 0..FEATURE_DIM {
            row[c] = (f.rows[(i, c)] - self.feat_mean[c]) / self.feat_std[c];
        }
        row
    }

    /// Per-node MLP outputs (columns of a 3×n matrix). Masked nodes keep
    /// zero columns; the aggregation never reads them.
    fn mlp_outputs(&self, f: &FeatureMatrix) -> (DMatrix<f64>, DMatrix<f64>) {
        let n = self.node_count();
        let mut hidden = DMatrix::<f64>::zeros(HIDDEN_WIDTH, n);
        let mut z = DMatrix::<f64>::zeros(3, n);
        for i in 0..n {
            if self.mask[i] == 0.0 {
                continue;
            }
            let row = self.standardized_row(f, i);
            let h = (&self.w1 * row + &self.b1).map(f64::tanh);
            let zi = &self.w2 * &h + &self.b2;
            hidden.set_column(i, &h);
            z.set_column(i, &zi);
        }
        (hidden, z)
    }

    /// One velocity correction per node: masked aggregation of the MLP
    /// outputs over the normalized adjacency.
    pub fn forward(&self, f: &FeatureMatrix) -> SimResult<Vec<Vector3<f64>>> {
        if f.node_count() != self.node_count() {
            return Err(SimError::Shape(format!(
                "{} feature rows for a {}-node network",
                f.node_count(),
                self.node_count()
            )));
        }
        self.check_finite()?;
        let (_, z) = self.mlp_outputs(f);
        let mut out = vec![Vector3::zeros(); self.node_count()];
        for i in 0..self.node_count() {
            if self.mask[i] == 0.0 {
                continue;
            }
            let mut acc = Vector3::zeros();
            for j in 0..self.node_count() {
                let a = self.a_hat[(i, j)];
                if a != 0.0 {
                    acc += a * Vector3::new(z[(0, j)], z[(1, j)], z[(2, j)]);
                }
            }
            out[i] = acc;
        }
        Ok(out)
    }
}

/// Split a flat per-node vector field back into per-branch arrays.
fn scatter(topo: &BdloTopology, flat: &[Vector3<f64>]) -> Vec<Vec<Vector3<f64>>> {
    (0..topo.branch_count())
        .map(|b| {
            (0..topo.branch(b).vertex_count)
                .map(|i| flat[topo.global_vertex(b, i)])
                .collect()
        })
        .collect()
}

impl VelocityCorrector for ResidualNet {
    fn correct(
        &self,
        x: &[Vec<Vector3<f64>>],
        v: &[Vec<Vector3<f64>>],
        topo: &BdloTopology,
        params: &MaterialParams,
    ) -> SimResult<Vec<Vec<Vector3<f64>>>> {
        if topo.total_vertices() != self.node_count() {
            return Err(SimError::Shape(format!(
                "network built for {} nodes, topology has {}",
                self.node_count(),
                topo.total_vertices()
            )));
        }
        let f = features(x, v, topo, params)?;
        Ok(scatter(topo, &self.forward(&f)?))
    }
}

/// Weight-shaped gradient accumulator.
#[derive(Debug, Clone)]
struct Gradients {
    w1: DMatrix<f64>,
    b1: DVector<f64>,
    w2: DMatrix<f64>,
    b2: DVector<f64>,
}

impl Gradients {
    fn zeros() -> Self {
        Gradients {
            w1: DMatrix::zeros(HIDDEN_WIDTH, FEATURE_DIM),
            b1: DVector::zeros(HIDDEN_WIDTH),
            w2: DMatrix::zeros(3, HIDDEN_WIDTH),
            b2: DVector::zeros(3),
        }
    }
}

/// Backpropagate a per-node output cotangent through the aggregation and
/// the MLP, accumulating weight gradients. Masked nodes contribute
/// nothing: the zeroed adjacency columns cut them out of the chain.
fn backprop(net: &ResidualNet, f: &FeatureMatrix, d_out: &[Vector3<f64>], grads: &mut Gradients) {
    let n = net.node_count();
    let (hidden, _) = net.mlp_outputs(f);
    // d L / d z_j = Σ_i Ã_ij (mask_i ⊙ d_out_i)
    for j in 0..n {
        if net.mask[j] == 0.0 {
            continue;
        }
        let mut dz = Vector3::zeros();
        for i in 0..n {
            let a = net.a_hat[(i, j)];
            if a != 0.0 && net.mask[i] != 0.0 {
                dz += a * d_out[i];
            }
        }
        if dz == Vector3::zeros() {
            continue;
        }
        let h = hidden.column(j);
        for r in 0..3 {
            for c in 0..HIDDEN_WIDTH {
                grads.w2[(r, c)] += dz[r] * h[c];
            }
            grads.b2[r] += dz[r];
        }
        // d L / d h = W2ᵀ dz, through tanh: ⊙ (1 − h²)
        let row = net.standardized_row(f, j);
        for c in 0..HIDDEN_WIDTH {
            let dh = (net.w2[(0, c)] * dz[0] + net.w2[(1, c)] * dz[1] + net.w2[(2, c)] * dz[2])
                * (1.0 - h[c] * h[c]);
            if dh == 0.0 {
                continue;
            }
            for k in 0..FEATURE_DIM {
                grads.w1[(c, k)] += dh * row[k];
            }
            grads.b1[c] += dh;
        }
    }
}

/// Optimizer choice for training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    /// Adam with bias correction (β₁ = 0.9, β₂ = 0.999, ε = 1e-8).
    Adam,
    /// Plain gradient descent; with a small enough rate the loss is
    /// monotone on smooth objectives.
    Sgd,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOptions {
    pub epochs: usize,
    pub learning_rate: f64,
    pub optimizer: Optimizer,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions {
            epochs: 400,
            learning_rate: 1e-2,
            optimizer: Optimizer::Adam,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean squared one-step position error before the first update.
    pub initial_loss: f64,
    /// Mean squared one-step position error after the last update.
    pub final_loss: f64,
    pub epochs_run: usize,
    /// Loss after each epoch's update, evaluated on the next pass.
    pub loss_history: Vec<f64>,
}

/// Records the feature matrix the corrector saw, so training can
/// recompute forward intermediates for backpropagation.
struct RecordingCorrector<'a> {
    net: &'a ResidualNet,
    seen: RefCell<Option<FeatureMatrix>>,
}

impl VelocityCorrector for RecordingCorrector<'_> {
    fn correct(
        &self,
        x: &[Vec<Vector3<f64>>],
        v: &[Vec<Vector3<f64>>],
        topo: &BdloTopology,
        params: &MaterialParams,
    ) -> SimResult<Vec<Vec<Vector3<f64>>>> {
        let f = features(x, v, topo, params)?;
        let out = self.net.forward(&f)?;
        *self.seen.borrow_mut() = Some(f);
        Ok(scatter(topo, &out))
    }
}

/// Ground-truth state at frame `t`: velocities seeded by backward finite
/// differences of the recorded positions, gauge state (reference seeds
/// and orientation history) replayed from the trajectory so the step
/// matches what a recursive rollout would do at this frame.
fn teacher_state(
    topo: &BdloTopology,
    prev: &[Vec<Vector3<f64>>],
    curr: &[Vec<Vector3<f64>>],
    dt: f64,
    gauge: &GaugeReplay,
) -> SimResult<BdloState> {
    let mut state = BdloState::at_rest(topo, curr)?;
    for b in 0..topo.branch_count() {
        for i in 0..curr[b].len() {
            state.v[b][i] = (curr[b][i] - prev[b][i]) / dt;
        }
    }
    gauge.apply_to(&mut state);
    Ok(state)
}

struct EpochResult {
    loss: f64,
    grads: Gradients,
}

/// One full pass over the teacher-forced pairs: accumulates the mean
/// squared one-step position error and its weight gradient.
#[allow(clippy::too_many_arguments)]
fn epoch_pass(
    net: &ResidualNet,
    topo: &BdloTopology,
    params: &MaterialParams,
    grasp: &GraspSpec,
    frames: &[Vec<Vec<Vector3<f64>>>],
    inputs: &[Vec<Vector3<f64>>],
    gauges: &[GaugeReplay],
    cfg: &StepConfig,
) -> SimResult<EpochResult> {
    let pairs = frames.len() - 2;
    let live: usize = (0..net.node_count())
        .filter(|&i| net.mask[i] != 0.0)
        .count();
    let norm = (pairs * live) as f64;
    let mut grads = Gradients::zeros();
    let mut loss = 0.0;
    let mut d_out = vec![Vector3::zeros(); net.node_count()];

    for t in 1..frames.len() - 1 {
        let mut state = teacher_state(topo, &frames[t - 1], &frames[t], cfg.dt, &gauges[t])?;
        let recorder = RecordingCorrector {
            net,
            seen: RefCell::new(None),
        };
        deft_step(
            &mut state,
            grasp,
            &inputs[t],
            topo,
            params,
            cfg,
            Some(&recorder),
        )?;
        let f = recorder.seen.into_inner().ok_or_else(|| {
            SimError::Numeric("residual corrector was not consulted during training".into())
        })?;

        for d in d_out.iter_mut() {
            *d = Vector3::zeros();
        }
        for b in 0..topo.branch_count() {
            for i in 0..frames[t + 1][b].len() {
                let g = topo.global_vertex(b, i);
                if net.mask[g] == 0.0 {
                    continue;
                }
                let err = state.x[b][i] - frames[t + 1][b][i];
                loss += err.norm_squared() / norm;
                // The network output enters the position update scaled by
                // the time step; the constraint projection is treated as
                // locally constant.
                d_out[g] = err * (2.0 * cfg.dt / norm);
            }
        }
        backprop(net, &f, &d_out, &mut grads);
    }
    Ok(EpochResult { loss, grads })
}

/// Fit the standardization statistics from the teacher states of the
/// dataset (live nodes only).
fn fit_standardization(
    net: &mut ResidualNet,
    topo: &BdloTopology,
    params: &MaterialParams,
    frames: &[Vec<Vec<Vector3<f64>>>],
    gauges: &[GaugeReplay],
    dt: f64,
) -> SimResult<()> {
    let mut mean = DVector::<f64>::zeros(FEATURE_DIM);
    let mut sq = DVector::<f64>::zeros(FEATURE_DIM);
    let mut count = 0.0;
    for t in 1..frames.len() - 1 {
        let state = teacher_state(topo, &frames[t - 1], &frames[t], dt, &gauges[t])?;
        let f = features(&state.x, &state.v, topo, params)?;
        for i in 0..net.node_count() {
            if net.mask[i] == 0.0 {
                continue;
            }
            count += 1.0;
            for c in 0..FEATURE_DIM {
                mean[c] += f.rows[(i, c)];
                sq[c] += f.rows[(i, c)] * f.rows[(i, c)];
            }
        }
    }
    mean /= count;
    for c in 0..FEATURE_DIM {
        let var = (sq[c] / count - mean[c] * mean[c]).max(0.0);
        net.feat_std[c] = var.sqrt().max(FEATURE_STD_FLOOR);
    }
    net.feat_mean = mean;
    Ok(())
}

/// Train the network on a recorded trajectory by one-step teacher
/// forcing. `frames` holds T+1 consecutive ground-truth position frames
/// (velocities are seeded by finite differences, so optimization pairs
/// start at the second frame); `inputs[t]` are the grasp targets that
/// advanced frame t to frame t+1. Standardization statistics are refit
/// from the dataset. The caller's residual flag is overridden: training
/// always steps with the residual enabled.
#[allow(clippy::too_many_arguments)]
pub fn train(
    net: &mut ResidualNet,
    topo: &BdloTopology,
    params: &MaterialParams,
    grasp: &GraspSpec,
    frames: &[Vec<Vec<Vector3<f64>>>],
    inputs: &[Vec<Vector3<f64>>],
    cfg: &StepConfig,
    opts: &TrainOptions,
) -> SimResult<TrainReport> {
    if frames.len() < 3 {
        return Err(SimError::Params(format!(
            "training needs at least 3 consecutive frames, got {}",
            frames.len()
        )));
    }
    if inputs.len() != frames.len() - 1 {
        return Err(SimError::Shape(format!(
            "{} input rows for {} frames; expected one per transition",
            inputs.len(),
            frames.len()
        )));
    }
    if topo.total_vertices() != net.node_count() {
        return Err(SimError::Shape(format!(
            "network built for {} nodes, topology has {}",
            net.node_count(),
            topo.total_vertices()
        )));
    }
    let cfg = StepConfig {
        use_residual: true,
        ..cfg.clone()
    };
    cfg.validate()?;

    // Replay the rollout's hidden frame state along the trajectory once,
    // so every teacher-forced step starts from the gauge a recursive
    // rollout would actually carry at that frame.
    let gauges = replay_gauges(topo, frames)?;

    fit_standardization(net, topo, params, frames, &gauges, cfg.dt)?;

    let mut adam_m = Gradients::zeros();
    let mut adam_v = Gradients::zeros();
    let (beta1, beta2, eps): (f64, f64, f64) = (0.9, 0.999, 1e-8);

    let mut report = TrainReport {
        initial_loss: f64::NAN,
        final_loss: f64::NAN,
        epochs_run: 0,
        loss_history: Vec::with_capacity(opts.epochs),
    };

    for epoch in 0..opts.epochs {
        let pass = epoch_pass(net, topo, params, grasp, frames, inputs, &gauges, &cfg)?;
        if !pass.loss.is_finite() {
            return Err(SimError::Numeric(format!(
                "training diverged at epoch {epoch}: loss {}",
                pass.loss
            )));
        }
        if epoch == 0 {
            report.initial_loss = pass.loss;
        }
        report.loss_history.push(pass.loss);
        report.final_loss = pass.loss;
        report.epochs_run = epoch + 1;

        match opts.optimizer {
            Optimizer::Sgd => {
                net.w1 -= opts.learning_rate * &pass.grads.w1;
                net.b1 -= opts.learning_rate * &pass.grads.b1;
                net.w2 -= opts.learning_rate * &pass.grads.w2;
                net.b2 -= opts.learning_rate * &pass.grads.b2;
            }
            Optimizer::Adam => {
                let t = (epoch + 1) as i32;
                let bc1 = 1.0 - beta1.powi(t);
                let bc2 = 1.0 - beta2.powi(t);
                let update =
                    |w: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
                        *m = beta1 * *m + (1.0 - beta1) * g;
                        *v = beta2 * *v + (1.0 - beta2) * g * g;
                        let mh = *m / bc1;
                        let vh = *v / bc2;
                        *w -= opts.learning_rate * mh / (vh.sqrt() + eps);
                    };
                for (w, (g, (m, v))) in net.w1.iter_mut().zip(
                    pass.grads.w1.iter().zip(adam_m.w1.iter_mut().zip(adam_v.w1.iter_mut())),
                ) {
                    update(w, *g, m, v);
                }
                for (w, (g, (m, v))) in net.b1.iter_mut().zip(
                    pass.grads.b1.iter().zip(adam_m.b1.iter_mut().zip(adam_v.b1.iter_mut())),
                ) {
                    update(w, *g, m, v);
                }
                for (w, (g, (m, v))) in net.w2.iter_mut().zip(
                    pass.grads.w2.iter().zip(adam_m.w2.iter_mut().zip(adam_v.w2.iter_mut())),
                ) {
                    update(w, *g, m, v);
                }
                for (w, (g, (m, v))) in net.b2.iter_mut().zip(
                    pass.grads.b2.iter().zip(adam_m.b2.iter_mut().zip(adam_v.b2.iter_mut())),
                ) {
                    update(w, *g, m, v);
                }
            }
        }
        net.check_finite().map_err(|_| {
            SimError::Numeric(format!("training diverged at epoch {epoch}: non-finite weights"))
        })?;
    }
    Ok(report)
}
