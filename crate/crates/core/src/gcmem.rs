//! Graph-convolutional memory layer.
//!
//! Row layout: every tensor of node states stacks `blocks` windows of `N`
//! node rows, so node-axis operations (attention, support aggregation) act
//! block by block while row-wise operations see all `blocks · N` rows.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numcore::{BnMode, BnStats, GatherRows, ParamId, ParamStore, Tape, Tensor, Var};
use crate::patterns::MatchResult;

/// One learnable `|ℙ| x d_h` memory matrix per layer boundary, `L + 1` in
/// total. Layer `l` reads bank `l` for attention and bank `l + 1` for the
/// graph convolution, so neighbouring layers share a bank.
#[derive(Debug, Clone)]
pub struct MemoryBank {
    pub banks: Vec<ParamId>,
}

impl MemoryBank {
    pub fn init(
        store: &mut ParamStore,
        layers: usize,
        num_patterns: usize,
        d_h: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let banks = (0..=layers)
            .map(|l| store.add_xavier(format!("bank.{l}"), num_patterns, d_h, rng))
            .collect::<Result<_>>()?;
        Ok(MemoryBank { banks })
    }

    pub fn layers(&self) -> usize {
        self.banks.len() - 1
    }
}

/// Learnable node embeddings behind `Ã = softmax(relu(E₁ E₂ᵀ))`.
#[derive(Debug, Clone, Copy)]
pub struct AdaptiveAdjacency {
    pub e1: ParamId,
    pub e2: ParamId,
}

impl AdaptiveAdjacency {
    pub fn init(store: &mut ParamStore, nodes: usize, d_e: usize, rng: &mut impl Rng) -> Result<Self> {
        Ok(AdaptiveAdjacency {
            e1: store.add_xavier("adaptive.e1", nodes, d_e, rng)?,
            e2: store.add_xavier("adaptive.e2", nodes, d_e, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore) -> Result<Var> {
        let e1 = tape.param(store, self.e1);
        let e2 = tape.param(store, self.e2);
        let s = tape.matmul_nt(e1, e2)?;
        let s = tape.relu(s)?;
        tape.softmax_rows(s)
    }
}

/// Per-layer weights: one `d_h x d_h` matrix per head and support, plus
/// batch-norm affine parameters.
#[derive(Debug, Clone)]
pub struct GcMemLayer {
    pub w_a: Vec<ParamId>,
    pub w_adaptive: Vec<ParamId>,
    pub w_c: Vec<ParamId>,
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl GcMemLayer {
    /// With `simple_mem` only the attention support is built.
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        heads: usize,
        d_h: usize,
        simple_mem: bool,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if heads == 0 {
            return Err(Error::invalid("head count must be at least 1"));
        }
        let mut mats = |store: &mut ParamStore, tag: &str| -> Result<Vec<ParamId>> {
            (0..heads)
                .map(|i| store.add_xavier(format!("{prefix}.{tag}.{i}"), d_h, d_h, rng))
                .collect()
        };
        let (w_a, w_adaptive) = if simple_mem {
            (Vec::new(), Vec::new())
        } else {
            (mats(store, "w_a")?, mats(store, "w_adaptive")?)
        };
        let w_c = mats(store, "w_c")?;
        let gamma = store.add(format!("{prefix}.bn_gamma"), Tensor::filled(1, d_h, 1.0))?;
        let beta = store.add(format!("{prefix}.bn_beta"), Tensor::zeros(1, d_h))?;
        Ok(GcMemLayer {
            w_a,
            w_adaptive,
            w_c,
            gamma,
            beta,
        })
    }

    pub fn is_simple(&self) -> bool {
        self.w_a.is_empty()
    }
}

/// Static graph supports shared by every layer of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Supports {
    /// Row-normalized road adjacency, `N x N` constant.
    pub a_norm: Var,
    /// Adaptive adjacency, absent in SimpleMem mode.
    pub adaptive: Option<Var>,
}

/// Σ over heads of the given matrices, on the tape.
fn head_sum(tape: &mut Tape, store: &ParamStore, ids: &[ParamId]) -> Result<Var> {
    let mut acc = tape.param(store, ids[0]);
    for &id in &ids[1..] {
        let w = tape.param(store, id);
        acc = tape.add(acc, w)?;
    }
    Ok(acc)
}

/// Memory read for every row: `M_i = Σ_j softmax(−d_j) m_j` over the row's k
/// matches.
pub fn select_memory(
    tape: &mut Tape,
    store: &ParamStore,
    bank: ParamId,
    matches: &[MatchResult],
) -> Result<Var> {
    let rows = store.value(bank).rows();
    let gather: GatherRows = matches.iter().map(MatchResult::memory_weights).collect();
    if let Some(&(id, _)) = gather.iter().flatten().find(|(id, _)| *id >= rows) {
        return Err(Error::invalid(format!(
            "pattern id {id} outside memory bank of {rows} rows"
        )));
    }
    let table = tape.param(store, bank);
    tape.weighted_gather(table, gather)
}

/// `C = softmax_j(h_i · M_j / √d_h)` within each block.
pub fn pattern_attention(tape: &mut Tape, h: Var, memory: Var, blocks: usize) -> Result<Var> {
    let d_h = tape.value(h).cols();
    let scores = tape.block_nt(h, memory, blocks)?;
    let scaled = tape.scale(scores, 1.0 / (d_h as f64).sqrt())?;
    tape.softmax_rows(scaled)
}

/// `(A_norm M) ΣW_A + (Ã M) ΣW_Ã`: the graph-convolution terms that do not
/// depend on the hidden state. `None` for SimpleMem layers.
pub fn static_graph_terms(
    tape: &mut Tape,
    store: &ParamStore,
    layer: &GcMemLayer,
    memory_next: Var,
    supports: &Supports,
    blocks: usize,
) -> Result<Option<Var>> {
    if layer.is_simple() {
        return Ok(None);
    }
    let adaptive = supports
        .adaptive
        .ok_or_else(|| Error::invalid("full GCMem layer needs the adaptive adjacency"))?;
    let wa = head_sum(tape, store, &layer.w_a)?;
    let wt = head_sum(tape, store, &layer.w_adaptive)?;
    let am = tape.block_mix(supports.a_norm, memory_next, blocks)?;
    let am = tape.matmul(am, wa)?;
    let tm = tape.block_mix(adaptive, memory_next, blocks)?;
    let tm = tape.matmul(tm, wt)?;
    Ok(Some(tape.add(am, tm)?))
}

/// `o = relu(Σ_heads [(A M)W_A + (Ã M)W_Ã + (C M)W_C])`, with the first two
/// terms supplied precomputed by [`static_graph_terms`].
pub fn graph_conv(
    tape: &mut Tape,
    store: &ParamStore,
    layer: &GcMemLayer,
    memory_next: Var,
    attention: Var,
    static_terms: Option<Var>,
    blocks: usize,
) -> Result<Var> {
    let wc = head_sum(tape, store, &layer.w_c)?;
    let cm = tape.block_mix(attention, memory_next, blocks)?;
    let mut pre = tape.matmul(cm, wc)?;
    if let Some(s) = static_terms {
        pre = tape.add(s, pre)?;
    }
    tape.relu(pre)
}

/// Memory reads for one layer, fixed for the whole forward pass.
#[derive(Debug, Clone, Copy)]
pub struct LayerMemory {
    /// `M^l`, attention keys.
    pub current: Var,
    /// `M^{l+1}`, convolved values.
    pub next: Var,
    pub static_terms: Option<Var>,
}

#[derive(Debug, Clone, Copy)]
pub struct LayerOutput {
    pub hidden: Var,
    /// Graph-convolution output before batch normalization.
    pub conv: Var,
    pub attention: Var,
}

/// `H^l = H^{l−1} + BN(o^l)`.
pub fn gcmem_forward(
    tape: &mut Tape,
    store: &ParamStore,
    layer: &GcMemLayer,
    bn: &mut BnStats,
    memory: &LayerMemory,
    h_prev: Var,
    blocks: usize,
    mode: BnMode,
) -> Result<LayerOutput> {
    let attention = pattern_attention(tape, h_prev, memory.current, blocks)?;
    let conv = graph_conv(tape, store, layer, memory.next, attention, memory.static_terms, blocks)?;
    let gamma = tape.param(store, layer.gamma);
    let beta = tape.param(store, layer.beta);
    let normed = tape.batch_norm(conv, gamma, beta, bn, mode)?;
    let hidden = tape.add(h_prev, normed)?;
    Ok(LayerOutput {
        hidden,
        conv,
        attention,
    })
}
