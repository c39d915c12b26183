//! The task network: a fully connected classifier whose hidden layers grow
//! per task.
//!
//! Every unit carries the id of the task that created it. A unit only ever
//! receives connections from units at least as old as itself, old parameters
//! are never touched by later training, and inference for task `t`
//! reconstructs exactly the shape the network had when task `t` was learned.
//! Together these make no-forgetting exact rather than approximate.

use crate::error::{Error, Result};
use crate::layers::{sgd_step, SgdConfig};
use crate::numeric::{axpy, dot, RngStream, Tensor};
use serde::{Deserialize, Serialize};

pub type TaskId = usize;

const SNAPSHOT_FORMAT_VERSION: u32 = 1;

/// One hidden unit: its creation task, incoming weights (covering every
/// unit of the previous layer visible at creation time), and bias.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Unit {
    stamp: TaskId,
    weights: Vec<f64>,
    bias: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct HiddenLayer {
    units: Vec<Unit>, // creation order, so stamps are non-decreasing
}

/// Outgoing weights of one last-hidden unit into the (fixed-size) output
/// layer. Stamped with the task that created the unit.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct OutputRow {
    stamp: TaskId,
    weights: Vec<f64>, // length = class count
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct OutputLayer {
    rows: Vec<OutputRow>,
    bias: Vec<f64>, // created with the base network, frozen afterwards
}

/// Per-task shape record: how much of the network task `t` sees.
///
/// The trained parameter values for task `t` are the network entries with
/// stamp `<= t`; a snapshot plus the owning network reconstructs them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskSnapshot {
    pub task_id: TaskId,
    /// Visible unit count per hidden layer.
    pub hidden_units: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExpandableNetwork {
    input_dim: usize,
    class_count: usize,
    layers: Vec<HiddenLayer>,
    output: OutputLayer,
    snapshots: Vec<TaskSnapshot>,
}

/// Total units added by an action string: `C_t = sum(k_i)`.
pub fn added_count(actions: &[usize]) -> usize {
    actions.iter().sum()
}

impl ExpandableNetwork {
    /// Builds the base network for the first task. `layer_sizes` runs from
    /// input dimension through hidden sizes to class count; all units are
    /// stamped task 1. Hidden activations are ReLU.
    pub fn init_base(layer_sizes: &[usize], rng: &mut RngStream) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least input and output sizes, got {layer_sizes:?}"
            )));
        }
        if layer_sizes.iter().any(|&s| s == 0) {
            return Err(Error::InvalidArgument(format!(
                "layer sizes must be positive, got {layer_sizes:?}"
            )));
        }
        let input_dim = layer_sizes[0];
        let class_count = *layer_sizes.last().unwrap();
        let hidden_sizes = &layer_sizes[1..layer_sizes.len() - 1];

        let mut layers = Vec::with_capacity(hidden_sizes.len());
        let mut prev = input_dim;
        for &size in hidden_sizes {
            let bound = (6.0 / (prev + size) as f64).sqrt();
            let units = (0..size)
                .map(|_| Unit {
                    stamp: 1,
                    weights: (0..prev).map(|_| rng.uniform(-bound, bound)).collect(),
                    bias: 0.0,
                })
                .collect();
            layers.push(HiddenLayer { units });
            prev = size;
        }
        let bound = (6.0 / (prev + class_count) as f64).sqrt();
        let rows = (0..prev)
            .map(|_| OutputRow {
                stamp: 1,
                weights: (0..class_count).map(|_| rng.uniform(-bound, bound)).collect(),
            })
            .collect();
        let hidden_units = hidden_sizes.to_vec();
        Ok(ExpandableNetwork {
            input_dim,
            class_count,
            layers,
            output: OutputLayer {
                rows,
                bias: vec![0.0; class_count],
            },
            snapshots: vec![TaskSnapshot {
                task_id: 1,
                hidden_units,
            }],
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// Number of hidden layers (the length an action string must have).
    pub fn hidden_layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn latest_task(&self) -> TaskId {
        self.snapshots.last().map(|s| s.task_id).unwrap_or(0)
    }

    pub fn snapshots(&self) -> &[TaskSnapshot] {
        &self.snapshots
    }

    fn snapshot(&self, task: TaskId) -> Result<&TaskSnapshot> {
        self.snapshots
            .iter()
            .find(|s| s.task_id == task)
            .ok_or(Error::UnknownTask(task))
    }

    /// Grows the network for `task`: `actions[i]` fresh units are appended
    /// to hidden layer `i`, stamped `task`. Each new unit is wired to every
    /// unit of the layer below that `task` can see (old and new alike);
    /// pre-existing units receive no new incoming connections. New
    /// last-hidden units also gain trainable rows into the output layer.
    pub fn expand(&self, actions: &[usize], task: TaskId, rng: &mut RngStream) -> Result<Self> {
        if task != self.latest_task() + 1 {
            return Err(Error::InvalidArgument(format!(
                "task ids must be consecutive: latest is {}, got {task}",
                self.latest_task()
            )));
        }
        if actions.len() != self.layers.len() {
            return Err(Error::InvalidArgument(format!(
                "action string has {} entries for {} hidden layers",
                actions.len(),
                self.layers.len()
            )));
        }
        let mut net = self.clone();
        let mut prev_visible = net.input_dim;
        for (li, &k) in actions.iter().enumerate() {
            let layer_visible = net.layers[li].units.len() + k;
            let bound = (6.0 / (prev_visible + layer_visible) as f64).sqrt();
            for _ in 0..k {
                net.layers[li].units.push(Unit {
                    stamp: task,
                    weights: (0..prev_visible).map(|_| rng.uniform(-bound, bound)).collect(),
                    bias: 0.0,
                });
            }
            prev_visible = layer_visible;
        }
        if let Some(&k_last) = actions.last() {
            let bound = (6.0 / (prev_visible + net.class_count) as f64).sqrt();
            for _ in 0..k_last {
                net.output.rows.push(OutputRow {
                    stamp: task,
                    weights: (0..net.class_count)
                        .map(|_| rng.uniform(-bound, bound))
                        .collect(),
                });
            }
        }
        net.snapshots.push(TaskSnapshot {
            task_id: task,
            hidden_units: net.layers.iter().map(|l| l.units.len()).collect(),
        });
        Ok(net)
    }

    /// Forward pass through the sub-network task `task` sees, returning all
    /// hidden activations plus the logits. Old units compute over exactly
    /// the same weights and inputs regardless of later expansion, so
    /// per-task results are bit-stable forever.
    fn forward_visible(&self, x: &Tensor, snapshot: &TaskSnapshot) -> (Vec<Tensor>, Tensor) {
        let batch = x.rows();
        let mut acts: Vec<Tensor> = Vec::with_capacity(self.layers.len());
        for (li, layer) in self.layers.iter().enumerate() {
            let visible = snapshot.hidden_units[li];
            let mut out = Tensor::zeros(batch, visible);
            for b in 0..batch {
                let prev_row: &[f64] = if li == 0 { x.row(b) } else { acts[li - 1].row(b) };
                let out_row = out.row_mut(b);
                for (u, unit) in layer.units[..visible].iter().enumerate() {
                    let z = dot(&prev_row[..unit.weights.len()], &unit.weights) + unit.bias;
                    out_row[u] = z.max(0.0);
                }
            }
            acts.push(out);
        }
        let last_visible = *snapshot.hidden_units.last().unwrap_or(&0);
        let mut logits = Tensor::zeros(batch, self.class_count);
        for b in 0..batch {
            let last_row: &[f64] = if self.layers.is_empty() {
                x.row(b)
            } else {
                acts[self.layers.len() - 1].row(b)
            };
            let logit_row = logits.row_mut(b);
            logit_row.copy_from_slice(&self.output.bias);
            let visible_rows = if self.layers.is_empty() { self.input_dim } else { last_visible };
            for u in 0..visible_rows {
                axpy(logit_row, last_row[u], &self.output.rows[u].weights);
            }
        }
        (acts, logits)
    }

    /// Logits for `x` using only units and connections task `task` can see.
    pub fn forward_task(&self, x: &Tensor, task: TaskId) -> Result<Tensor> {
        if x.cols() != self.input_dim {
            return Err(Error::Shape {
                op: "forward_task",
                lhs: format!("input dim {}", self.input_dim),
                rhs: format!("{} features", x.cols()),
            });
        }
        let snapshot = self.snapshot(task)?;
        Ok(self.forward_visible(x, snapshot).1)
    }

    /// Minibatch SGD on cross-entropy over the given samples, updating only
    /// parameters stamped `task`. Everything older is frozen; it is not even
    /// read-modified, so freeze is bitwise.
    pub fn train_new(
        &mut self,
        features: &Tensor,
        labels: &[usize],
        task: TaskId,
        epochs: usize,
        batch_size: usize,
        cfg: &SgdConfig,
        rng: &mut RngStream,
    ) -> Result<()> {
        if features.rows() == 0 {
            return Err(Error::EmptyDataset("train_new".into()));
        }
        if task != self.latest_task() {
            return Err(Error::InvalidArgument(format!(
                "can only train the latest task {}, got {task}",
                self.latest_task()
            )));
        }
        if self.layers.is_empty() {
            return Err(Error::InvalidArgument(
                "training needs at least one hidden layer".into(),
            ));
        }
        assert!(epochs >= 1, "epochs must be >= 1");
        let batch_size = batch_size.max(1);
        let mut order: Vec<usize> = (0..features.rows()).collect();
        for _ in 0..epochs {
            rng.shuffle(&mut order);
            for chunk in order.chunks(batch_size) {
                let mut xb = Tensor::zeros(chunk.len(), self.input_dim);
                let mut yb = Vec::with_capacity(chunk.len());
                for (r, &idx) in chunk.iter().enumerate() {
                    xb.row_mut(r).copy_from_slice(features.row(idx));
                    yb.push(labels[idx]);
                }
                self.train_step(&xb, &yb, task, cfg)?;
            }
        }
        Ok(())
    }

    /// One SGD step on a batch. Gradients flow only through units stamped
    /// `task`: older units never read newer activations, so their outputs
    /// are constants with respect to every trainable parameter.
    fn train_step(&mut self, xb: &Tensor, yb: &[usize], task: TaskId, cfg: &SgdConfig) -> Result<()> {
        let snapshot = self.snapshot(task)?.clone();
        let (acts, logits) = self.forward_visible(xb, &snapshot);
        let (_, d_logits) = crate::layers::softmax_xent(&logits, yb)?;
        let batch = xb.rows();

        // Range of trainable (stamp == task) units per hidden layer. Units
        // are stored in stamp order, so this is always a suffix of the
        // visible prefix.
        let new_range: Vec<(usize, usize)> = self
            .layers
            .iter()
            .enumerate()
            .map(|(li, layer)| {
                let vis = snapshot.hidden_units[li];
                let start = layer.units[..vis].partition_point(|u| u.stamp < task);
                (start, vis)
            })
            .collect();

        // Output layer: rows stamped `task` are trainable; the bias only
        // belongs to the base network.
        let last = self.layers.len();
        let mut d_act: Option<Tensor> = None; // grad wrt new units of the layer being processed
        if last > 0 {
            let (lo, hi) = new_range[last - 1];
            let mut d = Tensor::zeros(batch, hi - lo);
            for b in 0..batch {
                let dl = d_logits.row(b);
                for (j, u) in (lo..hi).enumerate() {
                    d.set(b, j, dot(dl, &self.output.rows[u].weights));
                }
            }
            // update output rows after reading them for the gradient above
            let last_acts = &acts[last - 1];
            for u in lo..hi {
                let mut g = vec![0.0; self.class_count];
                for b in 0..batch {
                    axpy(&mut g, last_acts.get(b, u), d_logits.row(b));
                }
                sgd_step(&mut self.output.rows[u].weights, &g, cfg)?;
            }
            d_act = Some(d);
        }
        if task == 1 {
            let mut g_bias = vec![0.0; self.class_count];
            for b in 0..batch {
                axpy(&mut g_bias, 1.0, d_logits.row(b));
            }
            sgd_step(&mut self.output.bias, &g_bias, cfg)?;
        }

        // Walk hidden layers top-down. For layer li, `d_act` holds the loss
        // gradient with respect to its trainable units' activations.
        for li in (0..last).rev() {
            let (lo, hi) = new_range[li];
            let d = d_act.take().unwrap();
            if hi == lo {
                // no new units here, so nothing below has a gradient path
                if li > 0 {
                    let (plo, phi) = new_range[li - 1];
                    d_act = Some(Tensor::zeros(batch, phi - plo));
                }
                continue;
            }
            // dz = d_act * relu'(pre); relu makes act > 0 equivalent to pre > 0
            let mut dz = Tensor::zeros(batch, hi - lo);
            for b in 0..batch {
                for (j, u) in (lo..hi).enumerate() {
                    if acts[li].get(b, u) > 0.0 {
                        dz.set(b, j, d.get(b, j));
                    }
                }
            }
            // propagate into the previous layer's trainable units before
            // updating this layer's weights
            if li > 0 {
                let (plo, phi) = new_range[li - 1];
                let mut dp = Tensor::zeros(batch, phi - plo);
                for b in 0..batch {
                    for (j, u) in (lo..hi).enumerate() {
                        let dzv = dz.get(b, j);
                        if dzv != 0.0 {
                            let w = &self.layers[li].units[u].weights;
                            for (pj, p) in (plo..phi).enumerate() {
                                dp.set(b, pj, dp.get(b, pj) + dzv * w[p]);
                            }
                        }
                    }
                }
                d_act = Some(dp);
            }
            // weight and bias updates for this layer's new units
            for (j, u) in (lo..hi).enumerate() {
                let w_len = self.layers[li].units[u].weights.len();
                let mut gw = vec![0.0; w_len];
                let mut gb = 0.0;
                for b in 0..batch {
                    let dzv = dz.get(b, j);
                    if dzv == 0.0 {
                        continue;
                    }
                    gb += dzv;
                    let prev_row: &[f64] = if li == 0 { xb.row(b) } else { acts[li - 1].row(b) };
                    axpy(&mut gw, dzv, &prev_row[..w_len]);
                }
                let unit = &mut self.layers[li].units[u];
                sgd_step(&mut unit.weights, &gw, cfg)?;
                unit.bias -= cfg.learning_rate * gb;
            }
        }
        Ok(())
    }

    /// Fraction of argmax-correct predictions on a split, using the masked
    /// forward pass for `task`.
    pub fn evaluate(&self, features: &Tensor, labels: &[usize], task: TaskId) -> Result<f64> {
        if features.rows() == 0 {
            return Err(Error::EmptyDataset("evaluate".into()));
        }
        let logits = self.forward_task(features, task)?;
        let mut correct = 0usize;
        for (r, &label) in labels.iter().enumerate() {
            let row = logits.row(r);
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            if argmax == label {
                correct += 1;
            }
        }
        Ok(correct as f64 / labels.len() as f64)
    }

    /// Connections plus biases with stamp `<= task`.
    pub fn param_count(&self, task: TaskId) -> Result<usize> {
        let snapshot = self.snapshot(task)?;
        let mut count = 0;
        for (li, layer) in self.layers.iter().enumerate() {
            for unit in &layer.units[..snapshot.hidden_units[li]] {
                count += unit.weights.len() + 1;
            }
        }
        let visible_rows = if self.layers.is_empty() {
            self.input_dim
        } else {
            *snapshot.hidden_units.last().unwrap()
        };
        for row in &self.output.rows[..visible_rows] {
            count += row.weights.len();
        }
        count += self.output.bias.len();
        Ok(count)
    }

    /// Versioned JSON dump sufficient to reload and bit-reproduce
    /// `forward_task` for every recorded snapshot.
    pub fn to_json(&self) -> String {
        let envelope = SnapshotEnvelope {
            format_version: SNAPSHOT_FORMAT_VERSION,
            network: self.clone(),
        };
        serde_json::to_string(&envelope).expect("network serialization cannot fail")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let envelope: SnapshotEnvelope = serde_json::from_str(s)
            .map_err(|e| Error::InvalidArgument(format!("bad network dump: {e}")))?;
        if envelope.format_version != SNAPSHOT_FORMAT_VERSION {
            return Err(Error::InvalidArgument(format!(
                "unsupported network dump version {}",
                envelope.format_version
            )));
        }
        Ok(envelope.network)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct SnapshotEnvelope {
    format_version: u32,
    network: ExpandableNetwork,
}
