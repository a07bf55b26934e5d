//! Attention primitives: additive scoring and multi-head self-attention.
//!
//! Multi-head attention here is self-attention over encoder states: the
//! `[t, m]` state matrix serves as queries, keys, and values at once. Each
//! of the `h` heads projects into width `d = m / h`, scores with scaled
//! dot products, and the head outputs are joined column-wise in head order
//! before a final output projection back to width `m`.
//!
//! The Bayesian variant samples every projection from its Gaussian
//! posterior once per forward pass and reports the matching KL terms. The
//! additive (Bahdanau-style) score is provided as a standalone primitive
//! with one attention row per decoding query.

use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor, Var};
use crate::variational::{
    sample_weight, BoundGaussian, GaussianVariational, KlSink, NoiseSource, PriorSpec,
    VariationalError,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AttentionError {
    #[error("{name}: {detail}")]
    BadShapes { name: String, detail: String },
    #[error("model width {width} is not divisible by {heads} heads")]
    HeadsDontDivide { width: usize, heads: usize },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Variational(#[from] VariationalError),
}

/// Parameters of the additive score `e_j = v_e^T tanh(W_e s + U_e h_j)`.
///
/// `W_e` maps the query state `s` and `U_e` maps each encoder state `h_j`
/// into a shared attention width; `v_e` reduces the activated sum to a
/// scalar score, so `W_e` and `U_e` must agree on their row count and
/// `v_e` must match it.
#[derive(Debug, Clone, PartialEq)]
pub struct AdditiveAttentionParams {
    pub v_e: Tensor,
    pub w_e: Tensor,
    pub u_e: Tensor,
}

impl AdditiveAttentionParams {
    pub fn new(v_e: Tensor, w_e: Tensor, u_e: Tensor) -> Result<Self, AttentionError> {
        if w_e.rank() != 2 || u_e.rank() != 2 || v_e.rank() != 1 {
            return Err(AttentionError::BadShapes {
                name: "additive".into(),
                detail: "W_e and U_e must be rank 2, v_e rank 1".into(),
            });
        }
        if w_e.rows() != u_e.rows() || v_e.len() != w_e.rows() {
            return Err(AttentionError::BadShapes {
                name: "additive".into(),
                detail: format!(
                    "W_e rows {}, U_e rows {} and v_e length {} must all match",
                    w_e.rows(),
                    u_e.rows(),
                    v_e.len()
                ),
            });
        }
        Ok(AdditiveAttentionParams { v_e, w_e, u_e })
    }

    pub fn bind(&self, tape: &mut Tape) -> AdditiveAttentionVars {
        AdditiveAttentionVars {
            v_e: tape.leaf(self.v_e.clone()),
            w_e: tape.leaf(self.w_e.clone()),
            u_e: tape.leaf(self.u_e.clone()),
        }
    }
}

/// Tape handles for bound additive-attention parameters.
#[derive(Debug, Clone, Copy)]
pub struct AdditiveAttentionVars {
    pub v_e: Var,
    pub w_e: Var,
    pub u_e: Var,
}

/// Additive attention over encoder states `h` (`[t, m]`) for one query
/// state `s_prev`. Returns the context vector and the attention weights.
pub fn additive_attention(
    tape: &mut Tape,
    s_prev: Var,
    h: Var,
    vars: &AdditiveAttentionVars,
) -> Result<(Var, Var), AttentionError> {
    let steps = tape.value(h).rows();
    let ws = tape.matvec(vars.w_e, s_prev)?;
    let u_t = tape.transpose(vars.u_e)?;
    let proj = tape.matmul(h, u_t)?;
    // Broadcast W_e s across steps by explicit row replication; gradients
    // for ws accumulate once per step.
    let ws_rows = tape.stack_rows(&vec![ws; steps])?;
    let pre = tape.add(ws_rows, proj)?;
    let act = tape.tanh(pre);
    let scores = tape.matvec(act, vars.v_e)?;
    let alpha = tape.softmax_rows(scores)?;
    let h_t = tape.transpose(h)?;
    let context = tape.matvec(h_t, alpha)?;
    Ok((context, alpha))
}

/// One scaled dot-product attention head.
///
/// `q`, `k`, `v` are `[rows, d]` matrices sharing the key width `d`; the
/// scores are `q k^T / sqrt(d)`, softmax-normalized per query row.
/// Returns `(weights * v, weights)`.
pub fn scaled_dot_head(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
) -> Result<(Var, Var), AttentionError> {
    let (qs, ks, vs) = (
        tape.value(q).shape().to_vec(),
        tape.value(k).shape().to_vec(),
        tape.value(v).shape().to_vec(),
    );
    if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 {
        return Err(AttentionError::BadShapes {
            name: "scaled_dot_head".into(),
            detail: format!("expected rank-2 q/k/v, got {qs:?}, {ks:?}, {vs:?}"),
        });
    }
    let d = qs[1];
    if d == 0 || ks[1] != d {
        return Err(AttentionError::BadShapes {
            name: "scaled_dot_head".into(),
            detail: format!("key width mismatch: q {qs:?} vs k {ks:?}"),
        });
    }
    if vs[0] != ks[0] {
        return Err(AttentionError::BadShapes {
            name: "scaled_dot_head".into(),
            detail: format!("v rows {} must match k rows {}", vs[0], ks[0]),
        });
    }
    let k_t = tape.transpose(k)?;
    let raw = tape.matmul(q, k_t)?;
    let scores = tape.scale(raw, 1.0 / (d as f64).sqrt());
    let weights = tape.softmax_rows(scores)?;
    let head = tape.matmul(weights, v)?;
    Ok((head, weights))
}

/// Point-valued projections of one head: each is `[d, m]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadProjections {
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
}

/// Gaussian-posterior projections of one head.
#[derive(Debug, Clone, PartialEq)]
pub struct VariationalHead {
    pub w_q: GaussianVariational,
    pub w_k: GaussianVariational,
    pub w_v: GaussianVariational,
}

/// Point-valued multi-head self-attention parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct PointMultiHeadParams {
    pub name: String,
    pub heads: Vec<HeadProjections>,
    /// Output projection `[m, m]` applied to the concatenated heads.
    pub w_c: Tensor,
}

impl PointMultiHeadParams {
    pub fn new(
        name: impl Into<String>,
        heads: Vec<HeadProjections>,
        w_c: Tensor,
    ) -> Result<Self, AttentionError> {
        let p = PointMultiHeadParams {
            name: name.into(),
            heads,
            w_c,
        };
        let shapes: Vec<[&Tensor; 3]> = p
            .heads
            .iter()
            .map(|h| [&h.w_q, &h.w_k, &h.w_v])
            .collect();
        validate_multihead(&p.name, &shapes, &p.w_c)?;
        Ok(p)
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    pub fn model_width(&self) -> usize {
        self.w_c.rows()
    }
}

/// Multi-head self-attention with a Gaussian posterior per projection.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiHeadParams {
    pub name: String,
    pub heads: Vec<VariationalHead>,
    pub w_c: GaussianVariational,
}

impl MultiHeadParams {
    pub fn new(
        name: impl Into<String>,
        heads: Vec<VariationalHead>,
        w_c: GaussianVariational,
    ) -> Result<Self, AttentionError> {
        let p = MultiHeadParams {
            name: name.into(),
            heads,
            w_c,
        };
        let shapes: Vec<[&Tensor; 3]> = p
            .heads
            .iter()
            .map(|h| [&h.w_q.mu, &h.w_k.mu, &h.w_v.mu])
            .collect();
        validate_multihead(&p.name, &shapes, &p.w_c.mu)?;
        Ok(p)
    }

    pub fn head_count(&self) -> usize {
        self.heads.len()
    }

    pub fn model_width(&self) -> usize {
        self.w_c.mu.rows()
    }

    /// Collapses every posterior to its mean.
    pub fn to_point(&self) -> PointMultiHeadParams {
        PointMultiHeadParams {
            name: self.name.clone(),
            heads: self
                .heads
                .iter()
                .map(|h| HeadProjections {
                    w_q: h.w_q.mu.clone(),
                    w_k: h.w_k.mu.clone(),
                    w_v: h.w_v.mu.clone(),
                })
                .collect(),
            w_c: self.w_c.mu.clone(),
        }
    }
}

fn validate_multihead(
    name: &str,
    heads: &[[&Tensor; 3]],
    w_c: &Tensor,
) -> Result<(), AttentionError> {
    if heads.is_empty() {
        return Err(AttentionError::BadShapes {
            name: name.to_string(),
            detail: "at least one head is required".into(),
        });
    }
    if w_c.rank() != 2 || w_c.rows() != w_c.cols() {
        return Err(AttentionError::BadShapes {
            name: name.to_string(),
            detail: format!("output projection must be square, got {:?}", w_c.shape()),
        });
    }
    let m = w_c.rows();
    let h = heads.len();
    if m % h != 0 {
        return Err(AttentionError::HeadsDontDivide { width: m, heads: h });
    }
    let d = m / h;
    for (i, tensors) in heads.iter().enumerate() {
        for (proj, t) in ["w_q", "w_k", "w_v"].iter().zip(tensors) {
            if t.rank() != 2 || t.rows() != d || t.cols() != m {
                return Err(AttentionError::BadShapes {
                    name: name.to_string(),
                    detail: format!(
                        "head {i} {proj} is {:?}, expected [{d}, {m}]",
                        t.shape()
                    ),
                });
            }
        }
    }
    Ok(())
}

/// Multi-head parameters in either flavour.
#[derive(Debug, Clone, PartialEq)]
pub enum MultiHeadWeights {
    Point(PointMultiHeadParams),
    Variational(MultiHeadParams),
}

impl MultiHeadWeights {
    pub fn name(&self) -> &str {
        match self {
            MultiHeadWeights::Point(p) => &p.name,
            MultiHeadWeights::Variational(p) => &p.name,
        }
    }

    pub fn head_count(&self) -> usize {
        match self {
            MultiHeadWeights::Point(p) => p.head_count(),
            MultiHeadWeights::Variational(p) => p.head_count(),
        }
    }

    pub fn model_width(&self) -> usize {
        match self {
            MultiHeadWeights::Point(p) => p.model_width(),
            MultiHeadWeights::Variational(p) => p.model_width(),
        }
    }

    /// Collapses a variational parameter set to its posterior means;
    /// point parameters are returned unchanged.
    pub fn to_point(&self) -> MultiHeadWeights {
        match self {
            MultiHeadWeights::Point(p) => MultiHeadWeights::Point(p.clone()),
            MultiHeadWeights::Variational(p) => MultiHeadWeights::Point(p.to_point()),
        }
    }

    pub fn is_variational(&self) -> bool {
        matches!(self, MultiHeadWeights::Variational(_))
    }

    /// Named parameter tensors: heads in index order (`w_q`, `w_k`, `w_v`
    /// each), then the output projection.
    pub fn param_entries(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        match self {
            MultiHeadWeights::Point(p) => {
                for (i, head) in p.heads.iter().enumerate() {
                    out.push((format!("{}.h{i}.w_q", p.name), &head.w_q));
                    out.push((format!("{}.h{i}.w_k", p.name), &head.w_k));
                    out.push((format!("{}.h{i}.w_v", p.name), &head.w_v));
                }
                out.push((format!("{}.w_c", p.name), &p.w_c));
            }
            MultiHeadWeights::Variational(p) => {
                for (i, head) in p.heads.iter().enumerate() {
                    for (proj, gv) in
                        [("w_q", &head.w_q), ("w_k", &head.w_k), ("w_v", &head.w_v)]
                    {
                        out.push((format!("{}.h{i}.{proj}.mu", p.name), &gv.mu));
                        out.push((format!("{}.h{i}.{proj}.rho", p.name), &gv.rho));
                    }
                }
                out.push((format!("{}.w_c.mu", p.name), &p.w_c.mu));
                out.push((format!("{}.w_c.rho", p.name), &p.w_c.rho));
            }
        }
        out
    }

    /// Mutable variant of [`MultiHeadWeights::param_entries`], same order.
    pub fn param_entries_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        match self {
            MultiHeadWeights::Point(p) => {
                let name = p.name.clone();
                for (i, head) in p.heads.iter_mut().enumerate() {
                    out.push((format!("{name}.h{i}.w_q"), &mut head.w_q));
                    out.push((format!("{name}.h{i}.w_k"), &mut head.w_k));
                    out.push((format!("{name}.h{i}.w_v"), &mut head.w_v));
                }
                out.push((format!("{name}.w_c"), &mut p.w_c));
            }
            MultiHeadWeights::Variational(p) => {
                let name = p.name.clone();
                for (i, head) in p.heads.iter_mut().enumerate() {
                    for (proj, gv) in [
                        ("w_q", &mut head.w_q),
                        ("w_k", &mut head.w_k),
                        ("w_v", &mut head.w_v),
                    ] {
                        out.push((format!("{name}.h{i}.{proj}.mu"), &mut gv.mu));
                        out.push((format!("{name}.h{i}.{proj}.rho"), &mut gv.rho));
                    }
                }
                out.push((format!("{name}.w_c.mu"), &mut p.w_c.mu));
                out.push((format!("{name}.w_c.rho"), &mut p.w_c.rho));
            }
        }
        out
    }

    /// Registers the parameters on a tape.
    pub fn bind(&self, tape: &mut Tape) -> Result<BoundMultiHead, AttentionError> {
        match self {
            MultiHeadWeights::Point(p) => Ok(BoundMultiHead::Point(
                p.heads
                    .iter()
                    .map(|h| HeadVars {
                        w_q: tape.leaf(h.w_q.clone()),
                        w_k: tape.leaf(h.w_k.clone()),
                        w_v: tape.leaf(h.w_v.clone()),
                    })
                    .collect(),
                tape.leaf(p.w_c.clone()),
            )),
            MultiHeadWeights::Variational(p) => {
                let mut heads = Vec::with_capacity(p.heads.len());
                for h in &p.heads {
                    heads.push(BoundVariationalHead {
                        w_q: h.w_q.bind(tape)?,
                        w_k: h.w_k.bind(tape)?,
                        w_v: h.w_v.bind(tape)?,
                    });
                }
                Ok(BoundMultiHead::Variational {
                    heads,
                    w_c: p.w_c.bind(tape)?,
                })
            }
        }
    }
}

/// Realized projections of one head on a tape.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
}

pub struct BoundVariationalHead {
    pub w_q: BoundGaussian,
    pub w_k: BoundGaussian,
    pub w_v: BoundGaussian,
}

/// Multi-head parameters bound to a tape.
pub enum BoundMultiHead {
    Point(Vec<HeadVars>, Var),
    Variational {
        heads: Vec<BoundVariationalHead>,
        w_c: BoundGaussian,
    },
}

impl BoundMultiHead {
    /// Produces projection nodes for one forward pass, sampling (and
    /// pushing KL terms) in the variational case.
    pub fn realize(
        &self,
        tape: &mut Tape,
        noise: &mut NoiseSource,
        kl: &mut KlSink,
        prior: &PriorSpec,
    ) -> Result<(Vec<HeadVars>, Var), AttentionError> {
        match self {
            BoundMultiHead::Point(heads, w_c) => Ok((heads.clone(), *w_c)),
            BoundMultiHead::Variational { heads, w_c } => {
                let draw = |tape: &mut Tape,
                            kl: &mut KlSink,
                            noise: &mut NoiseSource,
                            bound: &BoundGaussian|
                 -> Result<Var, AttentionError> {
                    let sample = sample_weight(tape, bound, noise)?;
                    let term = crate::variational::kl_sample_term(tape, &sample, bound, prior)?;
                    kl.push(term);
                    Ok(sample.w)
                };
                let mut realized = Vec::with_capacity(heads.len());
                for h in heads {
                    realized.push(HeadVars {
                        w_q: draw(tape, kl, noise, &h.w_q)?,
                        w_k: draw(tape, kl, noise, &h.w_k)?,
                        w_v: draw(tape, kl, noise, &h.w_v)?,
                    });
                }
                let w_c = draw(tape, kl, noise, w_c)?;
                Ok((realized, w_c))
            }
        }
    }
}

/// Context produced by multi-head self-attention.
#[derive(Debug)]
pub struct ContextMatrix {
    /// `[t, m]` context, one row per encoder step.
    pub c: Var,
    /// Per-head outputs `[t, d]`, in head order.
    pub head_outputs: Vec<Var>,
    /// Per-head attention weights `[t, t]`, rows summing to one.
    pub weights: Vec<Var>,
}

/// Core multi-head computation over realized projection nodes.
pub fn multihead_from_vars(
    tape: &mut Tape,
    h: Var,
    heads: &[HeadVars],
    w_c: Var,
) -> Result<ContextMatrix, AttentionError> {
    if heads.is_empty() {
        return Err(AttentionError::BadShapes {
            name: "multihead".into(),
            detail: "at least one head is required".into(),
        });
    }
    let mut head_outputs = Vec::with_capacity(heads.len());
    let mut weights = Vec::with_capacity(heads.len());
    for hv in heads {
        let wq_t = tape.transpose(hv.w_q)?;
        let wk_t = tape.transpose(hv.w_k)?;
        let wv_t = tape.transpose(hv.w_v)?;
        let q = tape.matmul(h, wq_t)?;
        let k = tape.matmul(h, wk_t)?;
        let v = tape.matmul(h, wv_t)?;
        let (head, w) = scaled_dot_head(tape, q, k, v)?;
        head_outputs.push(head);
        weights.push(w);
    }
    let joined = tape.concat_cols(&head_outputs)?;
    let wc_t = tape.transpose(w_c)?;
    let c = tape.matmul(joined, wc_t)?;
    Ok(ContextMatrix {
        c,
        head_outputs,
        weights,
    })
}

/// Multi-head self-attention with sampled projections.
///
/// Every projection is drawn from its posterior exactly once; the KL terms
/// are pushed into `kl` in sampling order.
pub fn bayesian_multihead(
    tape: &mut Tape,
    h: Var,
    params: &MultiHeadParams,
    noise: &mut NoiseSource,
    kl: &mut KlSink,
    prior: &PriorSpec,
) -> Result<ContextMatrix, AttentionError> {
    let bound = MultiHeadWeights::Variational(params.clone()).bind(tape)?;
    let (heads, w_c) = bound.realize(tape, noise, kl, prior)?;
    multihead_from_vars(tape, h, &heads, w_c)
}

/// Multi-head self-attention with point projections.
pub fn deterministic_multihead(
    tape: &mut Tape,
    h: Var,
    params: &PointMultiHeadParams,
) -> Result<ContextMatrix, AttentionError> {
    let bound = MultiHeadWeights::Point(params.clone()).bind(tape)?;
    let mut noise = NoiseSource::zero();
    let mut kl = KlSink::new();
    let (heads, w_c) = bound.realize(tape, &mut noise, &mut kl, &PriorSpec::default())?;
    multihead_from_vars(tape, h, &heads, w_c)
}
