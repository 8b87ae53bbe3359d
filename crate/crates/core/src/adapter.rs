//! Sparsely routed mixture of bottleneck adapters.
//!
//! Each hooked transformer layer owns `n` bottleneck experts
//! (`relu(x·W_down + b_down)·W_up + b_up`) and a router. Per token, the
//! router scores all experts, keeps the top `K` logits, renormalizes them
//! with a softmax over *only those K*, and the layer output adds the
//! weighted sum of the selected experts' contributions. Only selected
//! experts are evaluated (sparsity contract). A domain-aware router shifts
//! every token's logits by the same learned vector `s`, computed from a
//! small set of trainable prompt vectors.
//!
//! The load-balance penalty `Σ f_i · p_i` (assignment fraction × mean gate
//! weight) discourages routing collapse; `f` is a hard count treated as a
//! constant, so gradient reaches the router only through `p`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{gaussian_vec, stream_rng, Binding, ParamId, ParamStore};
use crate::tensor::{topk_indices, Tape, TensorId};

/// Router flavor: plain token gating, or token gating shifted by a learned
/// domain vector shared across tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RouterMode {
    Standard,
    Domain,
}

/// Which tensor the experts read: the raw residual stream entering the MLP
/// sublayer (default), or that stream after the sublayer's layer norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdapterInput {
    #[default]
    Residual,
    Normalized,
}

impl std::fmt::Display for RouterMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RouterMode::Standard => write!(f, "standard"),
            RouterMode::Domain => write!(f, "domain"),
        }
    }
}

/// Mixture-of-adapters hyperparameters (shared by both encoder branches).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MoaConfig {
    /// Expert count `n`.
    pub n_experts: usize,
    /// Experts selected per token `K`.
    pub top_k: usize,
    /// Bottleneck reduction: adapter hidden width m = d / reduction.
    pub reduction: usize,
    pub router: RouterMode,
    /// Number of domain prompt vectors (domain router only).
    pub prompt_count: usize,
    /// Expert input wiring (see [`AdapterInput`]).
    #[serde(default)]
    pub adapter_input: AdapterInput,
}

impl Default for MoaConfig {
    fn default() -> Self {
        MoaConfig {
            n_experts: 6,
            top_k: 2,
            reduction: 8,
            router: RouterMode::Domain,
            prompt_count: 4,
            adapter_input: AdapterInput::Residual,
        }
    }
}

impl MoaConfig {
    pub fn validate(&self, d_model: usize) -> Result<()> {
        if self.n_experts == 0 {
            return Err(Error::Config("n_experts must be >= 1".into()));
        }
        if self.top_k == 0 || self.top_k > self.n_experts {
            return Err(Error::Config(format!(
                "top_k must satisfy 1 <= top_k <= n_experts, got top_k = {}, n_experts = {}",
                self.top_k, self.n_experts
            )));
        }
        if self.reduction == 0 || d_model % self.reduction != 0 {
            return Err(Error::Config(format!(
                "reduction {} must divide d_model {}",
                self.reduction, d_model
            )));
        }
        if self.router == RouterMode::Domain && self.prompt_count == 0 {
            return Err(Error::Config(
                "domain router requires prompt_count >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn bottleneck(&self, d_model: usize) -> usize {
        d_model / self.reduction
    }
}

/// Parameter handles for one bottleneck expert.
#[derive(Debug, Clone)]
pub struct AdapterExpert {
    pub w_down: ParamId,
    pub b_down: ParamId,
    pub w_up: ParamId,
    pub b_up: ParamId,
}

/// Parameter handles for one layer's router.
#[derive(Debug, Clone)]
pub struct DomainRouter {
    /// `[d, n]` token gating matrix.
    pub w: ParamId,
    /// Domain parts: `[d, n]` shift matrix and `[m_p, d]` prompts.
    pub domain: Option<DomainParams>,
}

#[derive(Debug, Clone)]
pub struct DomainParams {
    pub w_d: ParamId,
    pub prompts: ParamId,
}

/// One hooked layer: `n` experts plus a router.
#[derive(Debug, Clone)]
pub struct MoaLayer {
    pub experts: Vec<AdapterExpert>,
    pub router: DomainRouter,
}

/// Build and register one layer's mixture parameters under
/// `{prefix}.moa.` (e.g. `image.block2.moa.expert0.w_down`). Experts start
/// as exact identities: `w_up` and both biases are zero, `w_down` is seeded
/// Gaussian.
pub fn build_moa_layer(
    store: &mut ParamStore,
    prefix: &str,
    d: usize,
    cfg: &MoaConfig,
    seed: u64,
) -> Result<MoaLayer> {
    cfg.validate(d)?;
    let m = cfg.bottleneck(d);
    let mut experts = Vec::with_capacity(cfg.n_experts);
    for i in 0..cfg.n_experts {
        let base = format!("{prefix}.moa.expert{i}");
        let mut rng = stream_rng(seed, &format!("{base}.w_down"));
        let w_down = store.add(
            format!("{base}.w_down"),
            gaussian_vec(&mut rng, d * m, 0.02),
            &[d, m],
            true,
        )?;
        let b_down = store.add(format!("{base}.b_down"), vec![0.0; m], &[m], true)?;
        let w_up = store.add(format!("{base}.w_up"), vec![0.0; m * d], &[m, d], true)?;
        let b_up = store.add(format!("{base}.b_up"), vec![0.0; d], &[d], true)?;
        experts.push(AdapterExpert {
            w_down,
            b_down,
            w_up,
            b_up,
        });
    }
    let mut rng = stream_rng(seed, &format!("{prefix}.moa.router.w"));
    let w = store.add(
        format!("{prefix}.moa.router.w"),
        gaussian_vec(&mut rng, d * cfg.n_experts, 0.02),
        &[d, cfg.n_experts],
        true,
    )?;
    let domain = if cfg.router == RouterMode::Domain {
        let mut rng = stream_rng(seed, &format!("{prefix}.moa.router.w_d"));
        let w_d = store.add(
            format!("{prefix}.moa.router.w_d"),
            gaussian_vec(&mut rng, d * cfg.n_experts, 0.02),
            &[d, cfg.n_experts],
            true,
        )?;
        let mut rng = stream_rng(seed, &format!("{prefix}.moa.router.prompts"));
        let prompts = store.add(
            format!("{prefix}.moa.router.prompts"),
            gaussian_vec(&mut rng, cfg.prompt_count * d, 0.02),
            &[cfg.prompt_count, d],
            true,
        )?;
        Some(DomainParams { w_d, prompts })
    } else {
        None
    };
    Ok(MoaLayer {
        experts,
        router: DomainRouter { w, domain },
    })
}

/// Bottleneck forward on a `[T, d]` token matrix:
/// `relu(x·W_down + b_down)·W_up + b_up`. The residual add is the caller's
/// job (see [`sma_forward`]).
pub fn adapter_forward(
    tape: &mut Tape,
    binding: &Binding,
    x: TensorId,
    expert: &AdapterExpert,
) -> Result<TensorId> {
    let z = tape.matmul(x, binding.id(expert.w_down))?;
    let z = tape.add_row(z, binding.id(expert.b_down))?;
    let r = tape.relu(z)?;
    let u = tape.matmul(r, binding.id(expert.w_up))?;
    tape.add_row(u, binding.id(expert.b_up))
}

/// Routing result for one token batch at one layer.
#[derive(Debug, Clone)]
pub struct RoutingOutcome {
    /// Per token: the K selected expert ids, ordered by descending logit.
    pub indices: Vec<Vec<usize>>,
    /// Per token: dense length-n weight vector (zeros off the selected set).
    pub weights: Vec<Vec<f64>>,
    /// Assignment fraction per expert: |{t : i selected}| / T.
    pub f: Vec<f64>,
    /// Mean routing weight per expert (value snapshot of `p_avg_node`).
    pub p_avg: Vec<f64>,
    /// Differentiable `[n]` node for the mean routing weight.
    pub p_avg_node: TensorId,
    /// Per token: differentiable `[K]` node of renormalized selected weights
    /// (aligned with `indices`).
    pub selected_weight_nodes: Vec<TensorId>,
    /// Per token: differentiable dense `[n]` weight node.
    pub weight_row_nodes: Vec<TensorId>,
    /// Smallest gap between the K-th and (K+1)-th logit over the batch
    /// (+inf when K = n). Finite-difference checks reject near-tie batches.
    pub min_selection_margin: f64,
}

/// Score and route every row of a `[T, d]` token matrix.
///
/// Logits are `x·W`, plus — in domain mode — a shift `s` shared by every
/// token, where `s = mean_j(prompt_j · W_d)`. Per token the top-K logits are
/// selected (ties to the lower index) and renormalized by a softmax over
/// just those K. Gradient flows through the selected logits and through `s`,
/// never through the selection itself.
pub fn gate(
    tape: &mut Tape,
    binding: &Binding,
    x: TensorId,
    layer: &MoaLayer,
    cfg: &MoaConfig,
) -> Result<RoutingOutcome> {
    let n = layer.experts.len();
    if n != cfg.n_experts {
        return Err(Error::Config(format!(
            "layer has {n} experts but config says {}",
            cfg.n_experts
        )));
    }
    if cfg.top_k > n {
        return Err(Error::Config(format!(
            "top_k {} exceeds expert count {n}",
            cfg.top_k
        )));
    }
    let t_count = tape.shape(x)[0];
    let mut logits = tape.matmul(x, binding.id(layer.router.w))?;
    if let Some(dp) = &layer.router.domain {
        let shift = domain_shift(tape, binding, dp, cfg.prompt_count)?;
        logits = tape.add_row(logits, shift)?;
    }

    let k = cfg.top_k;
    let mut indices = Vec::with_capacity(t_count);
    let mut weights = Vec::with_capacity(t_count);
    let mut selected_weight_nodes = Vec::with_capacity(t_count);
    let mut weight_row_nodes = Vec::with_capacity(t_count);
    let mut min_margin = f64::INFINITY;
    let mut row_sum: Option<TensorId> = None;
    let mut counts = vec![0u64; n];

    for t in 0..t_count {
        let row = tape.row(logits, t)?;
        let row_data = tape.data(row).to_vec();
        let sel = topk_indices(&row_data, k)?;
        if k < n {
            // Gap between the weakest selected and strongest unselected logit.
            let mut sorted = row_data.clone();
            sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite logits"));
            let margin = sorted[k - 1] - sorted[k];
            if margin < min_margin {
                min_margin = margin;
            }
        }
        let picked = tape.gather(row, &sel)?;
        let renorm = tape.softmax(picked, 0)?;
        let dense = tape.scatter_to(renorm, &sel, n)?;
        for &i in &sel {
            counts[i] += 1;
        }
        row_sum = Some(match row_sum {
            None => dense,
            Some(acc) => tape.add(acc, dense)?,
        });
        indices.push(sel);
        weights.push(tape.data(dense).to_vec());
        selected_weight_nodes.push(renorm);
        weight_row_nodes.push(dense);
    }

    let p_avg_node = tape.scale(row_sum.expect("T >= 1"), 1.0 / t_count as f64)?;
    let f: Vec<f64> = counts.iter().map(|&c| c as f64 / t_count as f64).collect();
    Ok(RoutingOutcome {
        indices,
        weights,
        f,
        p_avg: tape.data(p_avg_node).to_vec(),
        p_avg_node,
        selected_weight_nodes,
        weight_row_nodes,
        min_selection_margin: min_margin,
    })
}

/// The domain logit shift: mean over prompts of `prompt_j · W_d`, one `[n]`
/// vector applied identically to every token.
fn domain_shift(
    tape: &mut Tape,
    binding: &Binding,
    dp: &DomainParams,
    prompt_count: usize,
) -> Result<TensorId> {
    let per_prompt = tape.matmul(binding.id(dp.prompts), binding.id(dp.w_d))?; // [m_p, n]
    let ones = tape.constant(vec![1.0; prompt_count], &[1, prompt_count])?;
    let summed = tape.matmul(ones, per_prompt)?; // [1, n]
    let mean = tape.scale(summed, 1.0 / prompt_count as f64)?;
    tape.row(mean, 0)
}

/// Mixture forward for one layer: `y = h_o + Σ weight_i · expert_i(x)`,
/// summed per token over its K selected experts only. `x` is the residual
/// stream entering the MLP sublayer; `h_o` is that sublayer's output.
pub fn sma_forward(
    tape: &mut Tape,
    binding: &Binding,
    x: TensorId,
    h_o: TensorId,
    layer: &MoaLayer,
    cfg: &MoaConfig,
) -> Result<(TensorId, RoutingOutcome)> {
    if tape.shape(x) != tape.shape(h_o) {
        return Err(Error::ShapeMismatch {
            op: "sma_forward",
            left: tape.shape(x).to_vec(),
            right: tape.shape(h_o).to_vec(),
        });
    }
    let outcome = gate(tape, binding, x, layer, cfg)?;
    let t_count = tape.shape(x)[0];
    let mut mixture: Option<TensorId> = None;
    for t in 0..t_count {
        let x_row = tape.gather_rows(x, &[t])?; // [1, d]
        let mut token_mix: Option<TensorId> = None;
        for (j, &expert_id) in outcome.indices[t].iter().enumerate() {
            let w_j = tape.gather(outcome.selected_weight_nodes[t], &[j])?; // [1]
            let contrib = adapter_forward(tape, binding, x_row, &layer.experts[expert_id])?;
            let weighted = tape.mul_scalar(w_j, contrib)?;
            token_mix = Some(match token_mix {
                None => weighted,
                Some(acc) => tape.add(acc, weighted)?,
            });
        }
        let token_mix = token_mix.expect("K >= 1");
        mixture = Some(match mixture {
            None => token_mix,
            Some(acc) => tape.concat_rows(acc, token_mix)?,
        });
    }
    let y = tape.add(h_o, mixture.expect("T >= 1"))?;
    Ok((y, outcome))
}

/// Unscaled balance penalty `Σ_i f_i · p_avg_i`. `f` enters as a constant;
/// gradient reaches the router through `p_avg` only. The loss weight α is
/// applied once, in the total objective.
pub fn load_balance_loss(tape: &mut Tape, outcome: &RoutingOutcome) -> Result<TensorId> {
    let f_const = tape.constant(outcome.f.clone(), &[outcome.f.len()])?;
    let prod = tape.mul(f_const, outcome.p_avg_node)?;
    tape.sum_all(prod)
}

/// Assignment fractions and mean routing weights from per-token routing
/// rows: `f_i = |{t : i selected}| / T`, `p_avg_i = mean_t weights[t][i]`.
pub fn routing_stats(indices: &[Vec<usize>], weights: &[Vec<f64>]) -> Result<(Vec<f64>, Vec<f64>)> {
    if indices.is_empty() || indices.len() != weights.len() {
        return Err(Error::InvalidArgument {
            op: "routing_stats",
            msg: format!(
                "need matching nonempty token lists, got {} index rows and {} weight rows",
                indices.len(),
                weights.len()
            ),
        });
    }
    let n = weights[0].len();
    let t_count = weights.len() as f64;
    let mut f = vec![0.0; n];
    let mut p = vec![0.0; n];
    for (sel, row) in indices.iter().zip(weights) {
        if row.len() != n {
            return Err(Error::InvalidArgument {
                op: "routing_stats",
                msg: "ragged weight rows".into(),
            });
        }
        for &i in sel {
            f[i] += 1.0;
        }
        for (acc, &w) in p.iter_mut().zip(row) {
            *acc += w;
        }
    }
    for v in f.iter_mut() {
        *v /= t_count;
    }
    for v in p.iter_mut() {
        *v /= t_count;
    }
    Ok((f, p))
}

/// Shannon entropy (natural log) of a routing-weight vector; `0·ln 0 = 0`.
/// Ranges over `[0, ln n]`; low values signal expert collapse.
pub fn usage_entropy(p: &[f64]) -> f64 {
    -p.iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| v * v.ln())
        .sum::<f64>()
}

// --------------------------------------------------- batch-level aggregation

/// Accumulates routing across the sequences of a batch, per hooked layer,
/// so the balance penalty and usage statistics cover every token the branch
/// routed that step.
#[derive(Debug, Default)]
pub struct BranchRouting {
    layers: Vec<LayerAccum>,
}

#[derive(Debug)]
struct LayerAccum {
    counts: Vec<u64>,
    tokens: u64,
    /// Σ over sequences of (p_avg_node · T): the un-normalized weight sum.
    weight_sum_node: TensorId,
}

impl BranchRouting {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fold one sequence's outcome at hooked-layer position `layer_pos`.
    pub fn record(
        &mut self,
        tape: &mut Tape,
        layer_pos: usize,
        outcome: &RoutingOutcome,
    ) -> Result<()> {
        let t = outcome.indices.len() as u64;
        let scaled = tape.scale(outcome.p_avg_node, t as f64)?;
        if layer_pos == self.layers.len() {
            let n = outcome.f.len();
            let mut counts = vec![0u64; n];
            for sel in &outcome.indices {
                for &i in sel {
                    counts[i] += 1;
                }
            }
            self.layers.push(LayerAccum {
                counts,
                tokens: t,
                weight_sum_node: scaled,
            });
            return Ok(());
        }
        let acc = self
            .layers
            .get_mut(layer_pos)
            .ok_or_else(|| Error::Contract(format!("routing layer {layer_pos} out of order")))?;
        for sel in &outcome.indices {
            for &i in sel {
                acc.counts[i] += 1;
            }
        }
        acc.tokens += t;
        acc.weight_sum_node = tape.add(acc.weight_sum_node, scaled)?;
        Ok(())
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    /// Per-layer batch-wide (f, p_avg) snapshots.
    pub fn layer_stats(&self, tape: &Tape) -> Vec<(Vec<f64>, Vec<f64>)> {
        self.layers
            .iter()
            .map(|l| {
                let t = l.tokens as f64;
                let f: Vec<f64> = l.counts.iter().map(|&c| c as f64 / t).collect();
                let p: Vec<f64> = tape
                    .data(l.weight_sum_node)
                    .iter()
                    .map(|&w| w / t)
                    .collect();
                (f, p)
            })
            .collect()
    }

    /// Branch balance penalty: arithmetic mean over hooked layers of
    /// `Σ f_i·p_i`, each layer aggregated over every routed token.
    pub fn balance_loss(&self, tape: &mut Tape) -> Result<Option<TensorId>> {
        if self.layers.is_empty() {
            return Ok(None);
        }
        let mut total: Option<TensorId> = None;
        for l in &self.layers {
            let t = l.tokens as f64;
            let p_avg = tape.scale(l.weight_sum_node, 1.0 / t)?;
            let f: Vec<f64> = l.counts.iter().map(|&c| c as f64 / t).collect();
            let f_const = tape.constant(f, &[l.counts.len()])?;
            let prod = tape.mul(f_const, p_avg)?;
            let lb = tape.sum_all(prod)?;
            total = Some(match total {
                None => lb,
                Some(acc) => tape.add(acc, lb)?,
            });
        }
        let mean = tape.scale(total.expect("nonempty"), 1.0 / self.layers.len() as f64)?;
        Ok(Some(mean))
    }

    /// Entropy of the layer-averaged mean routing weights — the branch's
    /// single usage-balance diagnostic.
    pub fn usage_entropy(&self, tape: &Tape) -> f64 {
        if self.layers.is_empty() {
            return 0.0;
        }
        let n = self.layers[0].counts.len();
        let mut mean_p = vec![0.0; n];
        for l in &self.layers {
            let t = l.tokens as f64;
            for (acc, &w) in mean_p.iter_mut().zip(tape.data(l.weight_sum_node)) {
                *acc += w / t;
            }
        }
        for v in mean_p.iter_mut() {
            *v /= self.layers.len() as f64;
        }
        usage_entropy(&mean_p)
    }
}

// ----------------------------------------------------------- cost accounting

/// Inputs for the closed-form trainable-parameter count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CountSpec {
    pub d_image: usize,
    pub d_text: usize,
    pub layers_image: usize,
    pub layers_text: usize,
    pub n_experts: usize,
    pub reduction: usize,
    pub prompt_count: usize,
    pub router: RouterMode,
}

/// The published full-scale configuration this library's counting claim is
/// checked against: ViT-B/16-style vision width 768, text width 512, 12+12
/// layers, 6 experts, reduction 8, 4 prompts, domain router.
pub fn full_scale_preset() -> CountSpec {
    CountSpec {
        d_image: 768,
        d_text: 512,
        layers_image: 12,
        layers_text: 12,
        n_experts: 6,
        reduction: 8,
        prompt_count: 4,
        router: RouterMode::Domain,
    }
}

/// Per-branch breakdown of the trainable-parameter count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CountBreakdown {
    pub adapters_image: u64,
    pub router_image: u64,
    pub adapters_text: u64,
    pub router_text: u64,
}

impl CountBreakdown {
    pub fn total(&self) -> u64 {
        self.adapters_image + self.router_image + self.adapters_text + self.router_text
    }
}

/// Closed-form trainable parameter count. Per layer per branch:
/// adapters `n·(d·m + m + m·d + d)` with `m = d / reduction`;
/// router `d·n`, plus `d·n + m_p·d` in domain mode.
pub fn count_trainable_params(spec: &CountSpec) -> Result<CountBreakdown> {
    let branch = |d: usize, layers: usize| -> Result<(u64, u64)> {
        if spec.reduction == 0 || d % spec.reduction != 0 {
            return Err(Error::Config(format!(
                "reduction {} must divide width {d}",
                spec.reduction
            )));
        }
        let m = d / spec.reduction;
        let adapters_per_layer = spec.n_experts as u64 * (d * m + m + m * d + d) as u64;
        let mut router_per_layer = (d * spec.n_experts) as u64;
        if spec.router == RouterMode::Domain {
            router_per_layer += (d * spec.n_experts) as u64 + (spec.prompt_count * d) as u64;
        }
        Ok((
            adapters_per_layer * layers as u64,
            router_per_layer * layers as u64,
        ))
    };
    let (adapters_image, router_image) = branch(spec.d_image, spec.layers_image)?;
    let (adapters_text, router_text) = branch(spec.d_text, spec.layers_text)?;
    Ok(CountBreakdown {
        adapters_image,
        router_image,
        adapters_text,
        router_text,
    })
}

/// Per-token multiply-add cost (counted as 2 flops each), per hooked layer:
/// experts run K down+up projections; the router scores n experts once per
/// token. The domain shift is computed once per layer, not per token, so it
/// does not appear here.
pub fn flop_count_per_token(d: usize, cfg: &MoaConfig) -> (u64, u64) {
    let m = (d / cfg.reduction) as u64;
    let expert_flops = cfg.top_k as u64 * 2 * (d as u64) * m * 2;
    let router_flops = 2 * (d as u64) * cfg.n_experts as u64;
    (expert_flops, router_flops)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, DEFAULT_FD_STEP};
    use rand::Rng;

    fn test_cfg(n: usize, k: usize, router: RouterMode) -> MoaConfig {
        MoaConfig {
            n_experts: n,
            top_k: k,
            reduction: 4,
            router,
            prompt_count: 2,
            adapter_input: AdapterInput::Residual,
        }
    }

    /// Store + layer with non-degenerate (post-init randomized) weights so
    /// gradients and mixtures are nontrivial.
    fn randomized_layer(d: usize, cfg: &MoaConfig, seed: u64) -> (ParamStore, MoaLayer) {
        let mut store = ParamStore::new();
        let layer = build_moa_layer(&mut store, "test", d, cfg, seed).unwrap();
        let mut rng = stream_rng(seed, "randomize");
        for id in 0..store.len() {
            let p = store.get_mut(id);
            if p.data.iter().all(|&v| v == 0.0) {
                p.data = gaussian_vec(&mut rng, p.numel(), 0.1);
            }
        }
        (store, layer)
    }

    fn random_tokens(tape: &mut Tape, t: usize, d: usize, seed: u64) -> TensorId {
        let mut rng = stream_rng(seed, "tokens");
        let data = gaussian_vec(&mut rng, t * d, 1.0);
        tape.leaf(data, &[t, d], false).unwrap()
    }

    #[test]
    fn expert_starts_as_exact_identity_contribution() {
        let cfg = test_cfg(3, 2, RouterMode::Standard);
        let mut store = ParamStore::new();
        let layer = build_moa_layer(&mut store, "b", 8, &cfg, 0).unwrap();
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape, false).unwrap();
        let x = random_tokens(&mut tape, 4, 8, 1);
        let out = adapter_forward(&mut tape, &binding, x, &layer.experts[0]).unwrap();
        assert!(tape.data(out).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn adapter_hand_value_d1() {
        // d=1, m=1, W_down=[2], biases 0, W_up=[0.5], x=1.5:
        // relu(1.5 * 2) * 0.5 = 1.5
        let mut store = ParamStore::new();
        let w_down = store.add("e.w_down", vec![2.0], &[1, 1], true).unwrap();
        let b_down = store.add("e.b_down", vec![0.0], &[1], true).unwrap();
        let w_up = store.add("e.w_up", vec![0.5], &[1, 1], true).unwrap();
        let b_up = store.add("e.b_up", vec![0.0], &[1], true).unwrap();
        let expert = AdapterExpert { w_down, b_down, w_up, b_up };
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape, false).unwrap();
        let x = tape.constant(vec![1.5], &[1, 1]).unwrap();
        let out = adapter_forward(&mut tape, &binding, x, &expert).unwrap();
        assert_eq!(tape.data(out), &[1.5]);
    }

    #[test]
    fn all_negative_preactivation_yields_bias_only() {
        let mut store = ParamStore::new();
        let w_down = store.add("e.w_down", vec![1.0], &[1, 1], true).unwrap();
        let b_down = store.add("e.b_down", vec![0.0], &[1], true).unwrap();
        let w_up = store.add("e.w_up", vec![3.0], &[1, 1], true).unwrap();
        let b_up = store.add("e.b_up", vec![0.25], &[1], true).unwrap();
        let expert = AdapterExpert { w_down, b_down, w_up, b_up };
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape, false).unwrap();
        let x = tape.constant(vec![-2.0], &[1, 1]).unwrap();
        let out = adapter_forward(&mut tape, &binding, x, &expert).unwrap();
        assert_eq!(tape.data(out), &[0.25]);
    }

    #[test]
    fn gate_hand_value_closed_form() {
        // Router forced to produce logits [2,1,0,-1] for a single token:
        // top-2 = {0,1}, softmax([2,1]) = [e/(1+e), 1/(1+e)].
        let d = 4;
        let cfg = test_cfg(4, 2, RouterMode::Standard);
        let mut store = ParamStore::new();
        let layer = build_moa_layer(&mut store, "g", d, &cfg, 0).unwrap();
        // Overwrite router weights: x = e_0, W row 0 = [2,1,0,-1].
        store.get_mut(layer.router.w).data = {
            let mut w = vec![0.0; d * 4];
            w[0..4].copy_from_slice(&[2.0, 1.0, 0.0, -1.0]);
            w
        };
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape, false).unwrap();
        let x = tape.constant(vec![1.0, 0.0, 0.0, 0.0], &[1, d]).unwrap();
        let out = gate(&mut tape, &binding, x, &layer, &cfg).unwrap();
        assert_eq!(out.indices[0], vec![0, 1]);
        let e = std::f64::consts::E;
        let w = &out.weights[0];
        assert!((w[0] - e / (1.0 + e)).abs() < 1e-12, "got {w:?}");
        assert!((w[1] - 1.0 / (1.0 + e)).abs() < 1e-12);
        assert_eq!(w[2], 0.0);
        assert_eq!(w[3], 0.0);
        assert!((out.min_selection_margin - 1.0).abs() < 1e-12);
    }

    #[test]
    fn gate_all_equal_logits_ties_to_lowest_indices() {
        let d = 4;
        let cfg = test_cfg(4, 2, RouterMode::Standard);
        let mut store = ParamStore::new();
        let layer = build_moa_layer(&mut store, "g", d, &cfg, 0).unwrap();
        store.get_mut(layer.router.w).data = vec![0.0; d * 4];
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape, false).unwrap();
        let x = tape.constant(vec![1.0; d], &[1, d]).unwrap();
        let out = gate(&mut tape, &binding, x, &layer, &cfg).unwrap();
        assert_eq!(out.indices[0], vec![0, 1]);
        assert_eq!(out.weights[0], vec![0.5, 0.5, 0.0, 0.0]);
    }

    #[test]
    fn domain_router_with_zero_prompts_matches_standard() {
        let d = 8;
        let t = 5;
        let cfg_d = test_cfg(4, 2, RouterMode::Domain);
        let cfg_s = test_cfg(4, 2, RouterMode::Standard);
        // Same seed => same router.w stream (name-keyed), prompts zeroed.
        let (mut store_d, layer_d) = {
            let mut store = ParamStore::new();
            let layer = build_moa_layer(&mut store, "b", d, &cfg_d, 3).unwrap();
            (store, layer)
        };
        if let Some(dp) = &layer_d.router.domain {
            store_d.get_mut(dp.prompts).data = vec![0.0; cfg_d.prompt_count * d];
        }
        let mut store_s = ParamStore::new();
        let layer_s = build_moa_layer(&mut store_s, "b", d, &cfg_s, 3).unwrap();

        let mut tape_d = Tape::new();
        let bind_d = store_d.bind(&mut tape_d, false).unwrap();
        let x_d = random_tokens(&mut tape_d, t, d, 7);
        let out_d = gate(&mut tape_d, &bind_d, x_d, &layer_d, &cfg_d).unwrap();

        let mut tape_s = Tape::new();
        let bind_s = store_s.bind(&mut tape_s, false).unwrap();
        let x_s = random_tokens(&mut tape_s, t, d, 7);
        let out_s = gate(&mut tape_s, &bind_s, x_s, &layer_s, &cfg_s).unwrap();

        assert_eq!(out_d.indices, out_s.indices);
        assert_eq!(out_d.weights, out_s.weights);
    }

    #[test]
    fn domain_shift_is_identical_for_every_token() {
        let d = 8;
        let t = 6;
        let cfg = test_cfg(4, 2, RouterMode::Domain);
        let (store, layer) = randomized_layer(d, &cfg, 11);

        // Compute logits with and without the domain part directly.
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape, false).unwrap();
        let x = random_tokens(&mut tape, t, d, 12);
        let base = tape.matmul(x, binding.id(layer.router.w)).unwrap();
        let dp = layer.router.domain.as_ref().unwrap();
        let shift = domain_shift(&mut tape, &binding, dp, cfg.prompt_count).unwrap();
        let shifted = tape.add_row(base, shift).unwrap();
        let n = cfg.n_experts;
        for tok in 0..t {
            for i in 0..n {
                let diff = tape.data(shifted)[tok * n + i] - tape.data(base)[tok * n + i];
                let want = tape.data(shift)[i];
                assert!((diff - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gate_contract_on_random_tokens() {
        let d = 16;
        let cfg = test_cfg(6, 2, RouterMode::Domain);
        let (store, layer) = randomized_layer(d, &cfg, 5);
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape, false).unwrap();
        let x = random_tokens(&mut tape, 200, d, 6);
        let out = gate(&mut tape, &binding, x, &layer, &cfg).unwrap();
        for (sel, row) in out.indices.iter().zip(&out.weights) {
            assert_eq!(sel.len(), 2);
            let nonzero = row.iter().filter(|&&w| w != 0.0).count();
            assert_eq!(nonzero, 2);
            assert!(row.iter().all(|&w| w >= 0.0));
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-6);
        }
        let sum_f: f64 = out.f.iter().sum();
        let sum_p: f64 = out.p_avg.iter().sum();
        assert!((sum_f - 2.0).abs() < 1e-9);
        assert!((sum_p - 1.0).abs() < 1e-6);
    }

    #[test]
    fn selection_and_weights_are_logit_shift_invariant() {
        // Both stages of the gate ignore a constant added to every logit:
        // top-K compares relative order, and the softmax subtracts the max.
        let mut rng = stream_rng(13, "logits");
        for _ in 0..50 {
            let row: Vec<f64> = (0..6).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let shifted: Vec<f64> = row.iter().map(|v| v + 7.5).collect();
            assert_eq!(topk_indices(&row, 2).unwrap(), topk_indices(&shifted, 2).unwrap());

            let softmax2 = |a: f64, b: f64| {
                let m = a.max(b);
                let (ea, eb) = ((a - m).exp(), (b - m).exp());
                (ea / (ea + eb), eb / (ea + eb))
            };
            let sel = topk_indices(&row, 2).unwrap();
            let (w0, w1) = softmax2(row[sel[0]], row[sel[1]]);
            let (s0, s1) = softmax2(shifted[sel[0]], shifted[sel[1]]);
            assert!((w0 - s0).abs() < 1e-12 && (w1 - s1).abs() < 1e-12);
        }
    }

    #[test]
    fn sma_zero_init_is_exact_noop() {
        let d = 8;
        let cfg = test_cfg(4, 2, RouterMode::Domain);
        let mut store = ParamStore::new();
        let layer = build_moa_layer(&mut store, "b", d, &cfg, 21).unwrap();
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape, false).unwrap();
        let x = random_tokens(&mut tape, 5, d, 22);
        let h_o = random_tokens(&mut tape, 5, d, 23);
        let (y, _) = sma_forward(&mut tape, &binding, x, h_o, &layer, &cfg).unwrap();
        // Bitwise: mixture contributions are exactly 0.0.
        assert_eq!(tape.data(y), tape.data(h_o));
    }

    #[test]
    fn sma_single_expert_reduces_to_plain_adapter() {
        let d = 8;
        let cfg = test_cfg(1, 1, RouterMode::Standard);
        let (store, layer) = randomized_layer(d, &cfg, 31);
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape, false).unwrap();
        let x = random_tokens(&mut tape, 4, d, 32);
        let h_o = random_tokens(&mut tape, 4, d, 33);
        let (y, out) = sma_forward(&mut tape, &binding, x, h_o, &layer, &cfg).unwrap();
        for row in &out.weights {
            assert_eq!(row, &vec![1.0]);
        }
        let direct = adapter_forward(&mut tape, &binding, x, &layer.experts[0]).unwrap();
        let expect = tape.add(h_o, direct).unwrap();
        for (a, b) in tape.data(y).iter().zip(tape.data(expect)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    /// Plain-Rust dense mixture: softmax over ALL logits, every expert
    /// evaluated, no tape involved.
    fn dense_mixture_oracle(
        store: &ParamStore,
        layer: &MoaLayer,
        x: &[f64],
        h_o: &[f64],
        t_count: usize,
        d: usize,
    ) -> Vec<f64> {
        let n = layer.experts.len();
        let w = &store.get(layer.router.w).data;
        let mut y = h_o.to_vec();
        for t in 0..t_count {
            let xt = &x[t * d..(t + 1) * d];
            let mut logits = vec![0.0; n];
            for i in 0..n {
                for a in 0..d {
                    logits[i] += xt[a] * w[a * n + i];
                }
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let z: f64 = exps.iter().sum();
            for (i, expert) in layer.experts.iter().enumerate() {
                let weight = exps[i] / z;
                let wd = &store.get(expert.w_down).data;
                let bd = &store.get(expert.b_down).data;
                let wu = &store.get(expert.w_up).data;
                let bu = &store.get(expert.b_up).data;
                let m = bd.len();
                let mut hidden = vec![0.0; m];
                for j in 0..m {
                    let mut s = bd[j];
                    for a in 0..d {
                        s += xt[a] * wd[a * m + j];
                    }
                    hidden[j] = s.max(0.0);
                }
                for a in 0..d {
                    let mut s = bu[a];
                    for j in 0..m {
                        s += hidden[j] * wu[j * d + a];
                    }
                    y[t * d + a] += weight * s;
                }
            }
        }
        y
    }

    #[test]
    fn sparse_equals_dense_oracle_when_k_equals_n() {
        for &(n, seed) in &[(2usize, 41u64), (3, 42)] {
            let d = 8;
            let cfg = test_cfg(n, n, RouterMode::Standard);
            let (store, layer) = randomized_layer(d, &cfg, seed);
            let mut tape = Tape::new();
            let binding = store.bind(&mut tape, false).unwrap();
            let t_count = 6;
            let x = random_tokens(&mut tape, t_count, d, seed + 100);
            let h_o = random_tokens(&mut tape, t_count, d, seed + 200);
            let x_data = tape.data(x).to_vec();
            let h_data = tape.data(h_o).to_vec();
            let (y, _) = sma_forward(&mut tape, &binding, x, h_o, &layer, &cfg).unwrap();
            let want = dense_mixture_oracle(&store, &layer, &x_data, &h_data, t_count, d);
            for (got, want) in tape.data(y).iter().zip(&want) {
                assert!((got - want).abs() < 1e-10, "n={n}: {got} vs {want}");
            }
        }
    }

    #[test]
    fn unselected_experts_are_never_evaluated() {
        // Poison one expert with NaN weights; as long as routing never picks
        // it, the output must stay finite. A dense implementation would
        // contaminate everything via 0·NaN.
        let d = 8;
        let cfg = test_cfg(3, 1, RouterMode::Standard);
        let mut store = ParamStore::new();
        let layer = build_moa_layer(&mut store, "b", d, &cfg, 51).unwrap();
        // Router steers every token to expert 0: W column 0 large.
        let mut w = vec![0.0; d * 3];
        for a in 0..d {
            w[a * 3] = 1.0;
        }
        store.get_mut(layer.router.w).data = w;
        let poisoned = layer.experts[2].w_down;
        store.get_mut(poisoned).data = vec![f64::NAN; d * (d / 4)];

        let mut tape = Tape::new();
        let binding = store.bind(&mut tape, false).unwrap();
        let mut rng = stream_rng(52, "x");
        let x_data: Vec<f64> = gaussian_vec(&mut rng, 4 * d, 1.0)
            .iter()
            .map(|v| v.abs() + 0.1) // keep x·W column 0 strictly dominant
            .collect();
        let x = tape.leaf(x_data, &[4, d], false).unwrap();
        let h_o = random_tokens(&mut tape, 4, d, 53);
        let (y, out) = sma_forward(&mut tape, &binding, x, h_o, &layer, &cfg).unwrap();
        for sel in &out.indices {
            assert_eq!(sel, &vec![0]);
        }
        assert!(tape.data(y).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn expert_permutation_equivariance_bitwise() {
        let d = 8;
        let n = 4;
        let cfg = test_cfg(n, 2, RouterMode::Domain);
        let (store, layer) = randomized_layer(d, &cfg, 61);

        // Permuted copy: experts reordered, router columns (w, w_d) permuted
        // the same way.
        let perm = [2usize, 0, 3, 1];
        let mut store_p = ParamStore::new();
        let layer_p = build_moa_layer(&mut store_p, "test", d, &cfg, 61).unwrap();
        for (new_pos, &old_pos) in perm.iter().enumerate() {
            for field in 0..4 {
                let (src, dst) = match field {
                    0 => (layer.experts[old_pos].w_down, layer_p.experts[new_pos].w_down),
                    1 => (layer.experts[old_pos].b_down, layer_p.experts[new_pos].b_down),
                    2 => (layer.experts[old_pos].w_up, layer_p.experts[new_pos].w_up),
                    _ => (layer.experts[old_pos].b_up, layer_p.experts[new_pos].b_up),
                };
                store_p.get_mut(dst).data = store.get(src).data.clone();
            }
        }
        let permute_cols = |src: &[f64]| -> Vec<f64> {
            let mut out = vec![0.0; src.len()];
            for a in 0..d {
                for (new_pos, &old_pos) in perm.iter().enumerate() {
                    out[a * n + new_pos] = src[a * n + old_pos];
                }
            }
            out
        };
        store_p.get_mut(layer_p.router.w).data = permute_cols(&store.get(layer.router.w).data);
        let dp = layer.router.domain.as_ref().unwrap();
        let dp_p = layer_p.router.domain.as_ref().unwrap();
        store_p.get_mut(dp_p.w_d).data = permute_cols(&store.get(dp.w_d).data);
        store_p.get_mut(dp_p.prompts).data = store.get(dp.prompts).data.clone();

        let run = |store: &ParamStore, layer: &MoaLayer| -> Vec<f64> {
            let mut tape = Tape::new();
            let binding = store.bind(&mut tape, false).unwrap();
            let x = random_tokens(&mut tape, 5, d, 62);
            let h_o = random_tokens(&mut tape, 5, d, 63);
            let (y, _) = sma_forward(&mut tape, &binding, x, h_o, layer, &cfg).unwrap();
            tape.data(y).to_vec()
        };
        let base = run(&store, &layer);
        let permuted = run(&store_p, &layer_p);
        assert_eq!(base, permuted, "permuting experts+columns must be a no-op");
    }

    #[test]
    fn load_balance_hand_values() {
        // Uniform routing, n=6, K=2: f = 1/3 each, p = 1/6 each => 1/3.
        let mut tape = Tape::new();
        let p = tape.leaf(vec![1.0 / 6.0; 6], &[6], false).unwrap();
        let outcome = RoutingOutcome {
            indices: vec![],
            weights: vec![],
            f: vec![1.0 / 3.0; 6],
            p_avg: vec![1.0 / 6.0; 6],
            p_avg_node: p,
            selected_weight_nodes: vec![],
            weight_row_nodes: vec![],
            min_selection_margin: f64::INFINITY,
        };
        let lb = load_balance_loss(&mut tape, &outcome).unwrap();
        assert!((tape.value(lb) - 1.0 / 3.0).abs() < 1e-12);

        // Collapse onto experts {0,1} with equal weights: f=[1,1,0..],
        // p=[.5,.5,0..] => 1.
        let mut tape = Tape::new();
        let mut p_data = vec![0.0; 6];
        p_data[0] = 0.5;
        p_data[1] = 0.5;
        let p = tape.leaf(p_data.clone(), &[6], false).unwrap();
        let mut f = vec![0.0; 6];
        f[0] = 1.0;
        f[1] = 1.0;
        let outcome = RoutingOutcome {
            indices: vec![],
            weights: vec![],
            f,
            p_avg: p_data,
            p_avg_node: p,
            selected_weight_nodes: vec![],
            weight_row_nodes: vec![],
            min_selection_margin: f64::INFINITY,
        };
        let lb = load_balance_loss(&mut tape, &outcome).unwrap();
        assert!((tape.value(lb) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn load_balance_is_one_when_all_experts_selected() {
        // K = n: f_i = 1 for all i, so the loss is Σ p_i = 1 regardless of
        // how the weights distribute.
        let d = 8;
        let cfg = test_cfg(3, 3, RouterMode::Standard);
        let (store, layer) = randomized_layer(d, &cfg, 71);
        let mut tape = Tape::new();
        let binding = store.bind(&mut tape, false).unwrap();
        let x = random_tokens(&mut tape, 9, d, 72);
        let out = gate(&mut tape, &binding, x, &layer, &cfg).unwrap();
        let lb = load_balance_loss(&mut tape, &out).unwrap();
        assert!((tape.value(lb) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn routing_stats_hand_examples() {
        // Single token, K=2: f mirrors membership, p mirrors the weights.
        let (f, p) = routing_stats(&[vec![0, 1]], &[vec![0.7, 0.3, 0.0, 0.0]]).unwrap();
        assert_eq!(f, vec![1.0, 1.0, 0.0, 0.0]);
        assert_eq!(p, vec![0.7, 0.3, 0.0, 0.0]);

        // Two tokens on disjoint pairs, uniform weights.
        let (f, p) = routing_stats(
            &[vec![0, 1], vec![2, 3]],
            &[vec![0.5, 0.5, 0.0, 0.0], vec![0.0, 0.0, 0.5, 0.5]],
        )
        .unwrap();
        assert_eq!(f, vec![0.5, 0.5, 0.5, 0.5]);
        assert_eq!(p, vec![0.25, 0.25, 0.25, 0.25]);
    }

    #[test]
    fn usage_entropy_bounds() {
        assert_eq!(usage_entropy(&[1.0, 0.0, 0.0]), 0.0);
        let n = 6;
        let uniform = vec![1.0 / n as f64; n];
        assert!((usage_entropy(&uniform) - (n as f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn count_matches_parameter_enumeration() {
        // Toy config: formula vs actually registered tensors.
        let d = 64;
        let cfg = MoaConfig {
            n_experts: 6,
            top_k: 2,
            reduction: 8,
            router: RouterMode::Standard,
            prompt_count: 4,
            ..MoaConfig::default()
        };
        let mut store = ParamStore::new();
        for branch in ["image", "text"] {
            for l in 0..4 {
                build_moa_layer(&mut store, &format!("{branch}.block{l}"), d, &cfg, 0).unwrap();
            }
        }
        let enumerated = store.count_trainable();
        let spec = CountSpec {
            d_image: d,
            d_text: d,
            layers_image: 4,
            layers_text: 4,
            n_experts: 6,
            reduction: 8,
            prompt_count: 4,
            router: RouterMode::Standard,
        };
        assert_eq!(count_trainable_params(&spec).unwrap().total(), enumerated);

        // Same check in domain mode (adds w_d + prompts).
        let cfg_d = MoaConfig { router: RouterMode::Domain, ..cfg };
        let mut store_d = ParamStore::new();
        for branch in ["image", "text"] {
            for l in 0..4 {
                build_moa_layer(&mut store_d, &format!("{branch}.block{l}"), d, &cfg_d, 0).unwrap();
            }
        }
        let spec_d = CountSpec { router: RouterMode::Domain, ..spec };
        assert_eq!(
            count_trainable_params(&spec_d).unwrap().total(),
            store_d.count_trainable()
        );
    }

    #[test]
    fn full_scale_count_in_published_range() {
        let total = count_trainable_params(&full_scale_preset()).unwrap().total();
        assert!(
            (15_000_000..=17_000_000).contains(&total),
            "total {total} outside [15M, 17M]"
        );
    }

    #[test]
    fn single_expert_count_is_plain_adapter_count() {
        // n=1, standard router still carries its d·n gate; the degenerate
        // "one adapter, no routing choice" count is adapters alone.
        let spec = CountSpec {
            d_image: 64,
            d_text: 64,
            layers_image: 4,
            layers_text: 4,
            n_experts: 1,
            reduction: 8,
            prompt_count: 4,
            router: RouterMode::Standard,
        };
        let got = count_trainable_params(&spec).unwrap();
        let d = 64u64;
        let m = 8u64;
        let per_layer_adapters = d * m + m + m * d + d;
        assert_eq!(got.adapters_image, per_layer_adapters * 4);
        assert_eq!(got.router_image, 64 * 1 * 4);
    }

    #[test]
    fn flop_formulas() {
        let base = test_cfg(6, 2, RouterMode::Standard);
        let d = 64;
        // Expert flops do not depend on n.
        let reference = flop_count_per_token(d, &MoaConfig { n_experts: 2, top_k: 2, ..base }).0;
        for n in [2, 4, 6, 8, 10] {
            let (e, r) = flop_count_per_token(d, &MoaConfig { n_experts: n, top_k: 2, ..base });
            assert_eq!(e, reference);
            assert_eq!(r, 2 * 64 * n as u64);
        }
        // Router flops double when n doubles.
        let r4 = flop_count_per_token(d, &MoaConfig { n_experts: 4, ..base }).1;
        let r8 = flop_count_per_token(d, &MoaConfig { n_experts: 8, ..base }).1;
        assert_eq!(r8, 2 * r4);
        // K scales expert flops linearly: 1 vs 2 is exactly 1:2.
        let e1 = flop_count_per_token(d, &MoaConfig { top_k: 1, ..base }).0;
        let e2 = flop_count_per_token(d, &MoaConfig { top_k: 2, ..base }).0;
        assert_eq!(2 * e1, e2);
    }

    #[test]
    fn gate_gradients_match_finite_differences() {
        let d = 8;
        let t_count = 3;
        let cfg = test_cfg(4, 2, RouterMode::Domain);
        let (store, layer) = randomized_layer(d, &cfg, 81);
        // Pull the trainable values out as gradcheck parameter blocks.
        let ids: Vec<_> = store.trainable_ids();
        let params: Vec<(Vec<f64>, Vec<usize>)> = ids
            .iter()
            .map(|&i| (store.get(i).data.clone(), store.get(i).shape.clone()))
            .collect();
        let mut rng = stream_rng(82, "x");
        let x_data = gaussian_vec(&mut rng, t_count * d, 1.0);
        let h_data = gaussian_vec(&mut rng, t_count * d, 1.0);

        let store_ref = &store;
        let layer_ref = &layer;
        let cfg_ref = &cfg;
        let ids_ref = &ids;
        let report = grad_check(&params, DEFAULT_FD_STEP, move |tape, leaf_ids| {
            // Rebuild a store whose trainable params take the leaf values;
            // binding maps ParamId -> leaf node directly.
            let mut full_ids = Vec::with_capacity(store_ref.len());
            let mut next = 0;
            for pid in 0..store_ref.len() {
                if ids_ref.contains(&pid) {
                    full_ids.push(leaf_ids[next]);
                    next += 1;
                } else {
                    let p = store_ref.get(pid);
                    full_ids.push(tape.leaf(p.data.clone(), &p.shape, false)?);
                }
            }
            let binding = binding_from_ids(full_ids);
            let x = tape.leaf(x_data.clone(), &[t_count, d], false)?;
            let h_o = tape.leaf(h_data.clone(), &[t_count, d], false)?;
            let (y, outcome) = sma_forward(tape, &binding, x, h_o, layer_ref, cfg_ref)?;
            assert!(outcome.min_selection_margin > 1e-3, "near-tie logits");
            let lb = load_balance_loss(tape, &outcome)?;
            let sq = tape.mul(y, y)?;
            let s = tape.sum_all(sq)?;
            let lb_scaled = tape.scale(lb, 0.5)?;
            tape.add(s, lb_scaled)
        })
        .unwrap();
        assert!(report.passes(1e-5), "max rel err {}", report.max_rel_err);
    }

    // Test-only helper: a Binding built from raw tensor ids.
    fn binding_from_ids(ids: Vec<TensorId>) -> Binding {
        Binding::from_raw(ids)
    }
}
