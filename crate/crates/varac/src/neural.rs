//! Deep ReLU networks with 1/√m layer scaling, a frozen ±1 output layer, and
//! per-layer Frobenius-ball projection around the initialization.
//!
//! The function computed is
//! `u(x) = bᵀ x^(H)` with `x^(0) = x`, `x^(h) = (1/√m)·ReLU(W_hᵀ x^(h−1))`,
//! where `W_1` is d×m and later layers are m×m. Only the `W_h` train; `b` is
//! fixed at its random ±1 draw. The trainable weights are constrained to
//! per-layer Frobenius balls of radius `R` centered at the initialization, and
//! projection is the radial scaling onto each ball, which is the exact
//! Euclidean projection because the constraint set is a product of balls.

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdp::TabularMdp;
use crate::rng::{rng_from_seed, RngCore};

/// ReLU derivative with the subgradient at exactly 0 taken as 0.
#[inline]
fn relu_active(pre: f64) -> bool {
    pre > 0.0
}

/// A ReLU network of depth `H` and width `m` with frozen output signs and an
/// initialization anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct DeepNet {
    input_dim: usize,
    width: usize,
    /// Trainable layer matrices: `layers[0]` is d×m, the rest m×m.
    layers: Vec<Array2<f64>>,
    /// Output layer b with entries exactly ±1; never trained.
    output_signs: Array1<f64>,
    /// Snapshot of `layers` at initialization; center of the projection balls.
    anchor: Vec<Array2<f64>>,
    radius: f64,
}

/// Per-layer gradient of the scalar output with respect to each `W_h`.
pub type NetGradient = Vec<Array2<f64>>;

impl DeepNet {
    /// Random initialization: standard-normal weights, uniform ±1 output
    /// signs, anchor frozen at the drawn weights. Deterministic given `seed`.
    pub fn init(input_dim: usize, width: usize, depth: usize, radius: f64, seed: u64) -> Self {
        assert!(input_dim >= 1 && width >= 1 && depth >= 1, "degenerate net shape");
        assert!(radius >= 0.0, "negative projection radius");
        let mut rng = rng_from_seed(seed);
        let mut layers = Vec::with_capacity(depth);
        for h in 0..depth {
            let rows = if h == 0 { input_dim } else { width };
            let layer = Array2::from_shape_fn((rows, width), |_| {
                rng.sample::<f64, _>(rand_distr::StandardNormal)
            });
            layers.push(layer);
        }
        let output_signs = Array1::from_shape_fn(width, |_| {
            if rng.random::<bool>() {
                1.0
            } else {
                -1.0
            }
        });
        let anchor = layers.clone();
        Self {
            input_dim,
            width,
            layers,
            output_signs,
            anchor,
            radius,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn layers(&self) -> &[Array2<f64>] {
        &self.layers
    }

    pub fn output_signs(&self) -> &Array1<f64> {
        &self.output_signs
    }

    pub fn anchor(&self) -> &[Array2<f64>] {
        &self.anchor
    }

    /// Distance of layer `h` from its anchor in Frobenius norm.
    pub fn layer_anchor_distance(&self, h: usize) -> f64 {
        let diff = &self.layers[h] - &self.anchor[h];
        diff.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// True when every layer satisfies the ball constraint within `slack`.
    pub fn within_ball(&self, slack: f64) -> bool {
        (0..self.depth()).all(|h| self.layer_anchor_distance(h) <= self.radius + slack)
    }

    fn check_input(&self, x: &Array1<f64>) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch(format!(
                "input has dimension {}, net expects {}",
                x.len(),
                self.input_dim
            )));
        }
        Ok(())
    }

    /// Forward pass returning the scalar output.
    pub fn forward(&self, x: &Array1<f64>) -> Result<f64> {
        self.check_input(x)?;
        Ok(self.forward_trace(x).output)
    }

    /// Forward pass that keeps pre-activations for reverse mode.
    fn forward_trace(&self, x: &Array1<f64>) -> ForwardTrace {
        let scale = 1.0 / (self.width as f64).sqrt();
        let mut activations = Vec::with_capacity(self.depth() + 1);
        activations.push(x.clone());
        let mut pre_activations = Vec::with_capacity(self.depth());
        for layer in &self.layers {
            let prev = activations.last().unwrap();
            let pre = layer.t().dot(prev);
            let act = pre.mapv(|v| if relu_active(v) { scale * v } else { 0.0 });
            pre_activations.push(pre);
            activations.push(act);
        }
        let output = self.output_signs.dot(activations.last().unwrap());
        ForwardTrace {
            activations,
            pre_activations,
            output,
        }
    }

    /// Exact reverse-mode gradient of the scalar output with respect to all
    /// layer matrices.
    pub fn gradient(&self, x: &Array1<f64>) -> Result<NetGradient> {
        self.check_input(x)?;
        Ok(self.gradient_traced(x).1)
    }

    /// Output and gradient from a single forward pass.
    pub fn value_and_gradient(&self, x: &Array1<f64>) -> Result<(f64, NetGradient)> {
        self.check_input(x)?;
        Ok(self.gradient_traced(x))
    }

    fn gradient_traced(&self, x: &Array1<f64>) -> (f64, NetGradient) {
        let trace = self.forward_trace(x);
        let scale = 1.0 / (self.width as f64).sqrt();
        let depth = self.depth();
        // delta_h = d out / d pre_h, masked by the active set.
        let mut delta = Array1::from_shape_fn(self.width, |j| {
            if relu_active(trace.pre_activations[depth - 1][j]) {
                scale * self.output_signs[j]
            } else {
                0.0
            }
        });
        let mut grads: Vec<Array2<f64>> = vec![Array2::zeros((0, 0)); depth];
        for h in (0..depth).rev() {
            let input = &trace.activations[h];
            let mut g = Array2::zeros((input.len(), self.width));
            for (i, &xi) in input.iter().enumerate() {
                if xi == 0.0 {
                    continue;
                }
                for (j, &dj) in delta.iter().enumerate() {
                    g[[i, j]] = xi * dj;
                }
            }
            grads[h] = g;
            if h > 0 {
                let back = self.layers[h].dot(&delta);
                delta = Array1::from_shape_fn(self.width, |j| {
                    if relu_active(trace.pre_activations[h - 1][j]) {
                        scale * back[j]
                    } else {
                        0.0
                    }
                });
            }
        }
        (trace.output, grads)
    }

    /// Takes one gradient step `W_h ← W_h − step·G_h` without projecting.
    pub fn step_in_place(&mut self, step: f64, grads: &NetGradient) {
        for (layer, g) in self.layers.iter_mut().zip(grads) {
            if g.is_empty() {
                continue;
            }
            layer.scaled_add(-step, g);
        }
    }

    /// Projects every layer onto its Frobenius ball around the anchor.
    /// Projects every layer back into its Frobenius ball. Returns whether the
    /// post-projection state verifiably satisfies the ball invariant (with
    /// 1e-9 relative slack); layers that needed no clipping are within the
    /// ball by the distance just computed, clipped layers are re-measured.
    pub fn project_in_place(&mut self) -> bool {
        let mut ok = true;
        for h in 0..self.depth() {
            let dist = self.layer_anchor_distance(h);
            if dist <= self.radius || dist == 0.0 {
                continue;
            }
            let shrink = self.radius / dist;
            {
                let anchor = &self.anchor[h];
                let layer = &mut self.layers[h];
                layer.zip_mut_with(anchor, |w, &w0| {
                    *w = w0 + (*w - w0) * shrink;
                });
            }
            if self.layer_anchor_distance(h) > self.radius * (1.0 + 1e-9) {
                ok = false;
            }
        }
        ok
    }

    /// Non-mutating projection.
    pub fn project(&self) -> Self {
        let mut net = self.clone();
        net.project_in_place();
        net
    }

    /// Replaces trainable weights elementwise by the running mean of the given
    /// parameter sum (used for path averaging in the learner).
    pub fn with_layers(&self, layers: Vec<Array2<f64>>) -> Self {
        assert_eq!(layers.len(), self.depth());
        Self {
            layers,
            ..self.clone()
        }
    }

    /// Serializes to a versioned JSON snapshot.
    pub fn to_snapshot(&self) -> String {
        let snap = NetSnapshot {
            version: 1,
            input_dim: self.input_dim,
            width: self.width,
            radius: self.radius,
            layers: self.layers.iter().map(matrix_to_rows).collect(),
            output_signs: self.output_signs.to_vec(),
            anchor: self.anchor.iter().map(matrix_to_rows).collect(),
        };
        serde_json::to_string(&snap).expect("serialization of plain numbers cannot fail")
    }

    /// Restores a snapshot produced by [`DeepNet::to_snapshot`].
    pub fn from_snapshot(text: &str) -> Result<Self> {
        let snap: NetSnapshot = serde_json::from_str(text).map_err(|e| Error::JsonSyntax {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        if snap.version != 1 {
            return Err(Error::SchemaViolation {
                field: "version".into(),
                message: format!("unsupported snapshot version {}", snap.version),
            });
        }
        if snap.layers.is_empty() || snap.layers.len() != snap.anchor.len() {
            return Err(Error::SchemaViolation {
                field: "layers".into(),
                message: "layer/anchor counts disagree or are empty".into(),
            });
        }
        if snap.output_signs.len() != snap.width
            || snap.output_signs.iter().any(|&b| b != 1.0 && b != -1.0)
        {
            return Err(Error::SchemaViolation {
                field: "output_signs".into(),
                message: "entries must be exactly +1 or -1, one per width".into(),
            });
        }
        let parse_stack = |name: &str, stack: &[Vec<Vec<f64>>]| -> Result<Vec<Array2<f64>>> {
            stack
                .iter()
                .enumerate()
                .map(|(h, rows)| {
                    let expect_rows = if h == 0 { snap.input_dim } else { snap.width };
                    rows_to_matrix(rows, expect_rows, snap.width).map_err(|msg| {
                        Error::SchemaViolation {
                            field: format!("{name}[{h}]"),
                            message: msg,
                        }
                    })
                })
                .collect()
        };
        Ok(Self {
            input_dim: snap.input_dim,
            width: snap.width,
            layers: parse_stack("layers", &snap.layers)?,
            output_signs: Array1::from_vec(snap.output_signs),
            anchor: parse_stack("anchor", &snap.anchor)?,
            radius: snap.radius,
        })
    }
}

struct ForwardTrace {
    /// activations[0] = x, activations[h] = x^(h).
    activations: Vec<Array1<f64>>,
    pre_activations: Vec<Array1<f64>>,
    output: f64,
}

#[derive(Serialize, Deserialize)]
struct NetSnapshot {
    version: u32,
    input_dim: usize,
    width: usize,
    radius: f64,
    layers: Vec<Vec<Vec<f64>>>,
    output_signs: Vec<f64>,
    anchor: Vec<Vec<Vec<f64>>>,
}

fn matrix_to_rows(m: &Array2<f64>) -> Vec<Vec<f64>> {
    m.outer_iter().map(|row| row.to_vec()).collect()
}

fn rows_to_matrix(
    rows: &[Vec<f64>],
    expect_rows: usize,
    expect_cols: usize,
) -> std::result::Result<Array2<f64>, String> {
    if rows.len() != expect_rows {
        return Err(format!("{} rows, expected {expect_rows}", rows.len()));
    }
    let mut m = Array2::zeros((expect_rows, expect_cols));
    for (i, row) in rows.iter().enumerate() {
        if row.len() != expect_cols {
            return Err(format!("row {i} has {} entries, expected {expect_cols}", row.len()));
        }
        for (j, &v) in row.iter().enumerate() {
            m[[i, j]] = v;
        }
    }
    Ok(m)
}

/// One-hot unit-sphere embedding of a state-action pair.
pub fn embed(mdp: &TabularMdp, s: usize, a: usize) -> Result<Array1<f64>> {
    if s >= mdp.n_states() || a >= mdp.n_actions() {
        return Err(Error::IndexOutOfRange(format!(
            "(s={s}, a={a}) outside {}x{}",
            mdp.n_states(),
            mdp.n_actions()
        )));
    }
    let mut x = Array1::zeros(mdp.embed_dim());
    x[mdp.embed_index(s, a)] = 1.0;
    Ok(x)
}
