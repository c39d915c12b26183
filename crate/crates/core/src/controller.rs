//! The controller: an autoregressive LSTM that emits, per hidden layer, a
//! distribution over how many units to add, plus the one-layer critic used
//! as a variance-reducing baseline.
//!
//! Step 1 consumes a fixed all-zeros start embedding; step `i+1` consumes
//! the *probability vector* emitted at step `i` (zero-padded to the widest
//! action space, then linearly projected into the LSTM input). The sampled
//! action never feeds back, so the step distributions are deterministic
//! given the parameters and the joint policy factorizes as
//! `pi(a) = prod_i p_i[a_i]`.

use crate::error::{Error, Result};
use crate::layers::{lstm_backward, lstm_step, DenseGrads, LstmCache, LstmCellParams, LstmGrads};
use crate::numeric::{axpy, dot, log_softmax, softmax, RngStream, Tensor};

/// Sampled per-layer expansion counts along with the step distributions
/// they were drawn from.
#[derive(Debug, Clone)]
pub struct ActionString {
    pub actions: Vec<usize>,
    pub step_probs: Vec<Vec<f64>>,
}

/// Controller parameters.
#[derive(Debug, Clone)]
pub struct PolicyParams {
    spaces: Vec<usize>,
    hidden: usize,
    embed: usize,
    /// The "state" fed to step 1; all zeros and never trained.
    start_embedding: Vec<f64>,
    /// `max_n x embed` projection applied to the padded step distribution.
    input_proj: Tensor,
    cells: [LstmCellParams; 2],
    /// One logits head per layer position, `hidden x n_i` plus bias.
    head_weights: Vec<Tensor>,
    head_bias: Vec<Vec<f64>>,
}

/// Gradients aligned with [`PolicyParams::to_flat`].
#[derive(Debug, Clone)]
pub struct PolicyGrads {
    cells: [LstmGrads; 2],
    input_proj: Tensor,
    heads: Vec<DenseGrads>,
}

impl PolicyGrads {
    fn zeros(p: &PolicyParams) -> Self {
        PolicyGrads {
            cells: [LstmGrads::zeros(&p.cells[0]), LstmGrads::zeros(&p.cells[1])],
            input_proj: Tensor::zeros(p.input_proj.rows(), p.input_proj.cols()),
            heads: p
                .spaces
                .iter()
                .enumerate()
                .map(|(i, &n)| DenseGrads {
                    weights: Tensor::zeros(p.hidden, n),
                    bias: vec![0.0; p.head_bias[i].len()],
                })
                .collect(),
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = self.cells[0].to_flat();
        out.extend(self.cells[1].to_flat());
        out.extend_from_slice(self.input_proj.data());
        for h in &self.heads {
            out.extend_from_slice(h.weights.data());
            out.extend_from_slice(&h.bias);
        }
        out
    }
}

/// Per-step forward intermediates kept for backpropagation.
struct StepTrace {
    cache1: LstmCache,
    cache2: LstmCache,
    top_hidden: Vec<f64>,
    probs: Vec<f64>,
    padded: Vec<f64>,
}

enum Select<'a> {
    Sample(&'a mut RngStream),
    Given(&'a [usize]),
    Greedy,
}

impl PolicyParams {
    /// Two LSTM layers of the given hidden size; projection and recurrent
    /// weights uniform in +-0.08. Heads start at zero so the initial policy
    /// is exactly uniform over every action space.
    pub fn new(spaces: &[usize], hidden: usize, embed: usize, rng: &mut RngStream) -> Self {
        assert!(!spaces.is_empty(), "need at least one layer position");
        assert!(spaces.iter().all(|&n| n >= 1), "action spaces must be non-empty");
        let max_n = *spaces.iter().max().unwrap();
        let input_proj = Tensor::from_vec(
            max_n,
            embed,
            (0..max_n * embed).map(|_| rng.uniform(-0.08, 0.08)).collect(),
        );
        let cells = [
            LstmCellParams::init(embed, hidden, rng),
            LstmCellParams::init(hidden, hidden, rng),
        ];
        PolicyParams {
            spaces: spaces.to_vec(),
            hidden,
            embed,
            start_embedding: vec![0.0; embed],
            input_proj,
            cells,
            head_weights: spaces.iter().map(|&n| Tensor::zeros(hidden, n)).collect(),
            head_bias: spaces.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// Paper-scale controller: two layers, hidden size 100.
    pub fn default_for(spaces: &[usize], rng: &mut RngStream) -> Self {
        Self::new(spaces, 100, 16, rng)
    }

    pub fn spaces(&self) -> &[usize] {
        &self.spaces
    }

    pub fn start_embedding(&self) -> &[f64] {
        &self.start_embedding
    }

    fn head_logits(&self, pos: usize, h: &[f64]) -> Vec<f64> {
        let w = &self.head_weights[pos];
        let mut logits = self.head_bias[pos].clone();
        for (k, &hv) in h.iter().enumerate() {
            if hv != 0.0 {
                axpy(&mut logits, hv, w.row(k));
            }
        }
        logits
    }

    fn project(&self, probs: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let max_n = self.input_proj.rows();
        let mut padded = vec![0.0; max_n];
        padded[..probs.len()].copy_from_slice(probs);
        let mut x = vec![0.0; self.embed];
        for (k, &pv) in padded.iter().enumerate() {
            if pv != 0.0 {
                axpy(&mut x, pv, self.input_proj.row(k));
            }
        }
        (x, padded)
    }

    /// One pass over all layer positions, selecting actions per `mode`.
    fn run(&self, mut mode: Select) -> Result<(Vec<usize>, Vec<Vec<f64>>, Vec<StepTrace>)> {
        let mut h1 = vec![0.0; self.hidden];
        let mut c1 = vec![0.0; self.hidden];
        let mut h2 = vec![0.0; self.hidden];
        let mut c2 = vec![0.0; self.hidden];
        let mut x = self.start_embedding.clone();
        let mut actions = Vec::with_capacity(self.spaces.len());
        let mut all_probs = Vec::with_capacity(self.spaces.len());
        let mut traces = Vec::with_capacity(self.spaces.len());
        for (i, &n) in self.spaces.iter().enumerate() {
            let (nh1, nc1, cache1) = lstm_step(&self.cells[0], &x, &h1, &c1)?;
            let (nh2, nc2, cache2) = lstm_step(&self.cells[1], &nh1, &h2, &c2)?;
            let probs = softmax(&self.head_logits(i, &nh2))?;
            let action = match &mut mode {
                Select::Sample(rng) => rng.categorical(&probs),
                Select::Greedy => {
                    probs
                        .iter()
                        .enumerate()
                        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                        .unwrap()
                        .0
                }
                Select::Given(given) => {
                    let a = *given.get(i).ok_or_else(|| {
                        Error::InvalidArgument(format!(
                            "action string has {} entries for {} positions",
                            given.len(),
                            self.spaces.len()
                        ))
                    })?;
                    if a >= n {
                        return Err(Error::InvalidArgument(format!(
                            "action {a} out of range for space {n} at position {i}"
                        )));
                    }
                    a
                }
            };
            let (next_x, padded) = self.project(&probs);
            traces.push(StepTrace {
                cache1,
                cache2,
                top_hidden: nh2.clone(),
                probs: probs.clone(),
                padded,
            });
            actions.push(action);
            all_probs.push(probs);
            h1 = nh1;
            c1 = nc1;
            h2 = nh2;
            c2 = nc2;
            x = next_x;
        }
        Ok((actions, all_probs, traces))
    }

    /// Draws one action string, recording every step distribution.
    pub fn sample(&self, rng: &mut RngStream) -> ActionString {
        let (actions, step_probs, _) = self
            .run(Select::Sample(rng))
            .expect("sampling cannot fail on a well-formed policy");
        ActionString { actions, step_probs }
    }

    /// Most probable action at each step.
    pub fn greedy_decode(&self) -> Vec<usize> {
        self.run(Select::Greedy).expect("greedy decode cannot fail").0
    }

    /// `log pi(a_{1:m} | s)` recomputed by a fresh forward pass.
    pub fn log_prob(&self, actions: &[usize]) -> Result<f64> {
        let (_, _, traces) = self.run(Select::Given(actions))?;
        let mut total = 0.0;
        for (i, trace) in traces.iter().enumerate() {
            let logits = self.head_logits(i, &trace.top_hidden);
            total += log_softmax(&logits)?[actions[i]];
        }
        Ok(total)
    }

    /// Gradient of `advantage * log pi(a)` with respect to the trainable
    /// parameters (the start embedding is fixed). This is one summand of
    /// the Monte-Carlo policy gradient, oriented for ascent.
    pub fn policy_grad(&self, actions: &[usize], advantage: f64) -> Result<PolicyGrads> {
        let (_, _, traces) = self.run(Select::Given(actions))?;
        let m = self.spaces.len();
        let mut grads = PolicyGrads::zeros(self);
        let mut d_h1 = vec![0.0; self.hidden];
        let mut d_c1 = vec![0.0; self.hidden];
        let mut d_h2 = vec![0.0; self.hidden];
        let mut d_c2 = vec![0.0; self.hidden];
        // gradient flowing into step i's padded probability vector from the
        // projection consumed at step i+1
        let mut d_padded_next: Option<Vec<f64>> = None;
        for i in (0..m).rev() {
            let trace = &traces[i];
            let n = self.spaces[i];
            // d logits from the log-prob term: advantage * (onehot - p)
            let mut d_logits: Vec<f64> = (0..n)
                .map(|j| {
                    advantage * ((if j == actions[i] { 1.0 } else { 0.0 }) - trace.probs[j])
                })
                .collect();
            // plus the softmax-Jacobian pullback of the gradient arriving
            // through the autoregressive input of step i+1
            if let Some(d_padded) = d_padded_next.take() {
                let d_p = &d_padded[..n];
                let inner = dot(&trace.probs, d_p);
                for j in 0..n {
                    d_logits[j] += trace.probs[j] * (d_p[j] - inner);
                }
            }
            // head backward
            let w = &self.head_weights[i];
            let gh = &mut grads.heads[i];
            let mut d_top = vec![0.0; self.hidden];
            for k in 0..self.hidden {
                let hv = trace.top_hidden[k];
                axpy(gh.weights.row_mut(k), hv, &d_logits);
                d_top[k] = dot(&d_logits, w.row(k));
            }
            axpy(&mut gh.bias, 1.0, &d_logits);
            // two-layer LSTM backward for this step
            axpy(&mut d_h2, 1.0, &d_top);
            let (g2, d_h1_from2, nh2, nc2) =
                lstm_backward(&self.cells[1], &trace.cache2, &d_h2, &d_c2)?;
            grads.cells[1].add_assign(&g2);
            axpy(&mut d_h1, 1.0, &d_h1_from2);
            let (g1, d_x, nh1, nc1) = lstm_backward(&self.cells[0], &trace.cache1, &d_h1, &d_c1)?;
            grads.cells[0].add_assign(&g1);
            d_h1 = nh1;
            d_c1 = nc1;
            d_h2 = nh2;
            d_c2 = nc2;
            // the step input was proj(padded probs of step i-1); step 0
            // consumed the fixed start embedding instead
            if i > 0 {
                let prev_padded = &traces[i - 1].padded;
                let max_n = self.input_proj.rows();
                let mut d_padded = vec![0.0; max_n];
                for k in 0..max_n {
                    if prev_padded[k] != 0.0 {
                        axpy(grads.input_proj.row_mut(k), prev_padded[k], &d_x);
                    }
                    d_padded[k] = dot(&d_x, self.input_proj.row(k));
                }
                d_padded_next = Some(d_padded);
            }
        }
        Ok(grads)
    }

    pub fn flat_len(&self) -> usize {
        self.cells[0].flat_len()
            + self.cells[1].flat_len()
            + self.input_proj.data().len()
            + self
                .spaces
                .iter()
                .map(|&n| self.hidden * n + n)
                .sum::<usize>()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = self.cells[0].to_flat();
        out.extend(self.cells[1].to_flat());
        out.extend_from_slice(self.input_proj.data());
        for (w, b) in self.head_weights.iter().zip(&self.head_bias) {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b);
        }
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.flat_len());
        let mut at = 0;
        let n0 = self.cells[0].flat_len();
        self.cells[0].assign_flat(&flat[at..at + n0]);
        at += n0;
        let n1 = self.cells[1].flat_len();
        self.cells[1].assign_flat(&flat[at..at + n1]);
        at += n1;
        let np = self.input_proj.data().len();
        self.input_proj.data_mut().copy_from_slice(&flat[at..at + np]);
        at += np;
        for (w, b) in self.head_weights.iter_mut().zip(&mut self.head_bias) {
            let nw = w.data().len();
            w.data_mut().copy_from_slice(&flat[at..at + nw]);
            at += nw;
            let nb = b.len();
            b.copy_from_slice(&flat[at..at + nb]);
            at += nb;
        }
    }
}

/// The critic: a single dense layer over the start embedding.
#[derive(Debug, Clone)]
pub struct ValueParams {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl ValueParams {
    pub fn new(embed: usize, rng: &mut RngStream) -> Self {
        let bound = (6.0 / (embed + 1) as f64).sqrt();
        ValueParams {
            weights: (0..embed).map(|_| rng.uniform(-bound, bound)).collect(),
            bias: 0.0,
        }
    }

    /// `V(s) = w . s + b`.
    pub fn value(&self, s: &[f64]) -> f64 {
        dot(&self.weights, &s[..self.weights.len()]) + self.bias
    }

    /// Exact gradient of `L_v = (1/N) sum_i (V(s) - R_i)^2`, including the
    /// factor `2/N`.
    pub fn value_grad(&self, s: &[f64], targets: &[f64]) -> (Vec<f64>, f64) {
        assert!(!targets.is_empty(), "critic update needs at least one target");
        let v = self.value(s);
        let scale = 2.0 / targets.len() as f64;
        let residual: f64 = targets.iter().map(|&r| v - r).sum();
        let mut grad_w = vec![0.0; self.weights.len()];
        axpy(&mut grad_w, scale * residual, &s[..self.weights.len()]);
        (grad_w, scale * residual)
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = self.weights.clone();
        out.push(self.bias);
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.weights.len() + 1);
        let nw = self.weights.len();
        self.weights.copy_from_slice(&flat[..nw]);
        self.bias = flat[nw];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::fd_gradient;

    fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }

    /// Small non-degenerate policy: heads perturbed away from zero so the
    /// step distributions are not uniform.
    fn perturbed_policy(spaces: &[usize], seed: u64) -> PolicyParams {
        let mut rng = RngStream::new(seed, 0);
        let mut p = PolicyParams::new(spaces, 6, 4, &mut rng);
        let mut flat = p.to_flat();
        for v in &mut flat {
            *v += rng.uniform(-0.5, 0.5);
        }
        p.assign_flat(&flat);
        p
    }

    #[test]
    fn singleton_spaces_are_deterministic() {
        let mut rng = RngStream::new(1, 0);
        let p = PolicyParams::new(&[1, 1, 1], 5, 3, &mut rng);
        let a = p.sample(&mut rng);
        assert_eq!(a.actions, vec![0, 0, 0]);
        assert_eq!(p.log_prob(&a.actions).unwrap(), 0.0);
    }

    #[test]
    fn fresh_policy_samples_uniformly() {
        let mut rng = RngStream::new(2, 0);
        let p = PolicyParams::new(&[4, 3], 8, 4, &mut rng);
        let draws = 10_000;
        let mut counts = [[0usize; 4], [0usize; 4]];
        for _ in 0..draws {
            let a = p.sample(&mut rng);
            counts[0][a.actions[0]] += 1;
            counts[1][a.actions[1]] += 1;
        }
        for (i, &n) in [4usize, 3].iter().enumerate() {
            let expected = draws as f64 / n as f64;
            let sigma = (draws as f64 * (1.0 / n as f64) * (1.0 - 1.0 / n as f64)).sqrt();
            for &c in counts[i].iter().take(n) {
                assert!(
                    (c as f64 - expected).abs() <= 3.0 * sigma,
                    "step {i}: count {c} vs expected {expected}"
                );
            }
        }
    }

    #[test]
    fn equal_streams_sample_identically() {
        let mut init = RngStream::new(3, 0);
        let p = perturbed_policy(&[4, 2, 3], 3);
        let _ = &mut init;
        let mut r1 = RngStream::new(99, 7);
        let mut r2 = RngStream::new(99, 7);
        let a = p.sample(&mut r1);
        let b = p.sample(&mut r2);
        assert_eq!(a.actions, b.actions);
        assert_eq!(a.step_probs, b.step_probs);
    }

    #[test]
    fn log_prob_uniform_case() {
        let mut rng = RngStream::new(4, 0);
        let p = PolicyParams::new(&[4, 4, 4], 6, 4, &mut rng);
        let lp = p.log_prob(&[1, 2, 3]).unwrap();
        assert!((lp - (1.0f64 / 64.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn log_prob_matches_recorded_step_probabilities() {
        let p = perturbed_policy(&[3, 4, 2], 11);
        let mut rng = RngStream::new(5, 0);
        for _ in 0..20 {
            let a = p.sample(&mut rng);
            let recorded: f64 = a
                .actions
                .iter()
                .zip(&a.step_probs)
                .map(|(&ai, probs)| probs[ai])
                .product();
            let lp = p.log_prob(&a.actions).unwrap();
            assert!((lp.exp() - recorded).abs() < 1e-9);
        }
    }

    #[test]
    fn log_prob_rejects_inconsistent_actions() {
        let p = perturbed_policy(&[3, 2], 12);
        assert!(p.log_prob(&[0]).is_err());
        assert!(p.log_prob(&[0, 5]).is_err());
    }

    #[test]
    fn step_probs_sum_to_one() {
        let p = perturbed_policy(&[5, 3, 4], 13);
        let mut rng = RngStream::new(6, 0);
        let a = p.sample(&mut rng);
        for probs in &a.step_probs {
            assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn exhaustive_log_probs_normalize() {
        let p = perturbed_policy(&[4, 4, 4], 14);
        let mut total = 0.0;
        for a0 in 0..4 {
            for a1 in 0..4 {
                for a2 in 0..4 {
                    total += p.log_prob(&[a0, a1, a2]).unwrap().exp();
                }
            }
        }
        assert!((total - 1.0).abs() < 1e-6, "sum = {total}");
    }

    #[test]
    fn zero_advantage_gives_zero_gradient() {
        let p = perturbed_policy(&[3, 4], 15);
        let g = p.policy_grad(&[1, 2], 0.0).unwrap();
        assert!(g.to_flat().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gradient_is_linear_in_advantage() {
        let p = perturbed_policy(&[3, 4, 2], 16);
        let g1 = p.policy_grad(&[2, 0, 1], 0.7).unwrap().to_flat();
        let g2 = p.policy_grad(&[2, 0, 1], 1.4).unwrap().to_flat();
        for (a, b) in g1.iter().zip(&g2) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn policy_grad_matches_fd() {
        for seed in [21, 22, 23] {
            let p = perturbed_policy(&[3, 2, 4], seed);
            let actions = [1usize, 0, 3];
            let advantage = 0.85;
            let flat0 = p.to_flat();
            let fd = fd_gradient(
                |flat| {
                    let mut q = p.clone();
                    q.assign_flat(flat);
                    advantage * q.log_prob(&actions).unwrap()
                },
                &flat0,
                1e-5,
            )
            .unwrap();
            let analytic = p.policy_grad(&actions, advantage).unwrap().to_flat();
            let err = max_rel_err(&analytic, &fd);
            assert!(err < 1e-4, "seed {seed}: max rel err {err}");
        }
    }

    #[test]
    fn ascent_step_increases_log_prob() {
        let p = perturbed_policy(&[4, 3], 30);
        let actions = [2usize, 1];
        let before = p.log_prob(&actions).unwrap();
        let g = p.policy_grad(&actions, 1.0).unwrap().to_flat();
        let mut flat = p.to_flat();
        for (x, gv) in flat.iter_mut().zip(&g) {
            *x += 1e-3 * gv;
        }
        let mut stepped = p.clone();
        stepped.assign_flat(&flat);
        let after = stepped.log_prob(&actions).unwrap();
        assert!(after > before, "{after} vs {before}");
    }

    #[test]
    fn sampling_matches_step_distributions_chi_square() {
        let p = perturbed_policy(&[4, 4], 31);
        let mut rng = RngStream::new(8, 0);
        let draws = 10_000;
        let mut counts = [[0usize; 4]; 2];
        let mut step_probs: Option<Vec<Vec<f64>>> = None;
        for _ in 0..draws {
            let a = p.sample(&mut rng);
            counts[0][a.actions[0]] += 1;
            counts[1][a.actions[1]] += 1;
            step_probs.get_or_insert(a.step_probs);
        }
        // critical value for chi-square, df = 3, p = 0.01
        let critical = 11.345;
        for (i, probs) in step_probs.unwrap().iter().enumerate() {
            let chi2: f64 = probs
                .iter()
                .enumerate()
                .map(|(j, &pj)| {
                    let expected = pj * draws as f64;
                    let observed = counts[i][j] as f64;
                    (observed - expected).powi(2) / expected
                })
                .sum();
            assert!(chi2 < critical, "step {i}: chi2 = {chi2}");
        }
    }

    #[test]
    fn critic_with_zero_weights_is_its_bias() {
        let v = ValueParams {
            weights: vec![0.0; 4],
            bias: 0.37,
        };
        assert_eq!(v.value(&[1.0, -2.0, 0.5, 3.0]), 0.37);
    }

    #[test]
    fn critic_gradient_vanishes_at_the_minimum() {
        let v = ValueParams {
            weights: vec![0.0; 3],
            bias: 0.8,
        };
        let s = [0.0, 0.0, 0.0];
        let (gw, gb) = v.value_grad(&s, &[0.8, 0.8, 0.8]);
        assert!(gw.iter().all(|&x| x == 0.0));
        assert_eq!(gb, 0.0);
    }

    #[test]
    fn critic_gradient_matches_fd() {
        let mut rng = RngStream::new(9, 0);
        let mut v = ValueParams::new(4, &mut rng);
        v.bias = 0.3;
        let s: Vec<f64> = (0..4).map(|_| rng.uniform(-1.0, 1.0)).collect();
        let targets: Vec<f64> = (0..6).map(|_| rng.uniform(0.0, 1.0)).collect();
        let flat0 = v.to_flat();
        let fd = fd_gradient(
            |flat| {
                let mut q = v.clone();
                q.assign_flat(flat);
                let val = q.value(&s);
                targets.iter().map(|&r| (val - r).powi(2)).sum::<f64>() / targets.len() as f64
            },
            &flat0,
            1e-5,
        )
        .unwrap();
        let (gw, gb) = v.value_grad(&s, &targets);
        let mut analytic = gw;
        analytic.push(gb);
        assert!(max_rel_err(&analytic, &fd) < 1e-4);
    }
}
