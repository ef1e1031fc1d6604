//! Image-specific global tokens: a handful of learnable meta queries read the
//! full token field through one-way cross-attention and come back as compact
//! scene-level summaries. The token grid itself passes through unchanged.
//!
//! Two cheaper substitutes (mean-pooled tokens, a single attended cls token)
//! plug into the same slot for the ablation harness.

use rand::Rng;

use crate::basetok::TokenGrid;
use crate::error::{Error, Result};
use crate::impl_grad_checkable;
use crate::layers::{uniform_fan_in, AttentionVals, AttentionWeights, LayerNorm, LayerNormVals};
use crate::tape::{Tape, Val};
use crate::tensor::Tensor;

/// Learnable meta query tokens plus their per-slot positional embeddings.
#[derive(Debug, Clone)]
pub struct MetaQueries {
    pub queries: Tensor,    // [n_g x d]
    pub positional: Tensor, // [n_g x d]
}

impl MetaQueries {
    pub fn new(n_g: usize, d: usize, rng: &mut impl Rng) -> Self {
        MetaQueries {
            queries: uniform_fan_in(n_g, d, rng),
            positional: uniform_fan_in(n_g, d, rng),
        }
    }

    pub fn count(&self) -> usize {
        self.queries.rows()
    }
}

/// The extracted global summary, always n_g rows of width d.
#[derive(Debug, Clone, PartialEq)]
pub struct GlobalTokens {
    pub values: Tensor,
}

impl GlobalTokens {
    pub fn count(&self) -> usize {
        self.values.rows()
    }
}

/// How global tokens are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GlobalKind {
    Meta,
    MeanPool,
    Cls,
}

impl GlobalKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "meta" => Ok(GlobalKind::Meta),
            "mean_pool" => Ok(GlobalKind::MeanPool),
            "cls" => Ok(GlobalKind::Cls),
            other => Err(Error::Config(format!(
                "unknown global token kind {other:?} (expected meta, mean_pool, or cls)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            GlobalKind::Meta => "meta",
            GlobalKind::MeanPool => "mean_pool",
            GlobalKind::Cls => "cls",
        }
    }
}

/// One extractor per kind; all variants produce n_g x d global tokens and
/// drop into identical pipeline slots.
#[derive(Debug, Clone)]
pub enum GlobalExtractor {
    Meta {
        queries: MetaQueries,
        attn: AttentionWeights,
        ln: LayerNorm,
    },
    MeanPool {
        n_g: usize,
    },
    Cls {
        query: Tensor, // [1 x d]
        ln: LayerNorm,
        n_g: usize,
    },
}

pub struct GlobalExtractorVals {
    meta: Option<(Val, Val, AttentionVals, LayerNormVals)>,
    cls: Option<(Val, LayerNormVals)>,
}

impl GlobalExtractor {
    pub fn new(kind: GlobalKind, n_g: usize, d: usize, heads: usize, rng: &mut impl Rng) -> Self {
        match kind {
            GlobalKind::Meta => GlobalExtractor::Meta {
                queries: MetaQueries::new(n_g, d, rng),
                attn: AttentionWeights::new(d, heads, rng),
                ln: LayerNorm::new(d),
            },
            GlobalKind::MeanPool => GlobalExtractor::MeanPool { n_g },
            GlobalKind::Cls => GlobalExtractor::Cls {
                query: uniform_fan_in(1, d, rng),
                ln: LayerNorm::new(d),
                n_g,
            },
        }
    }

    pub fn kind(&self) -> GlobalKind {
        match self {
            GlobalExtractor::Meta { .. } => GlobalKind::Meta,
            GlobalExtractor::MeanPool { .. } => GlobalKind::MeanPool,
            GlobalExtractor::Cls { .. } => GlobalKind::Cls,
        }
    }

    pub fn count(&self) -> usize {
        match self {
            GlobalExtractor::Meta { queries, .. } => queries.count(),
            GlobalExtractor::MeanPool { n_g } => *n_g,
            GlobalExtractor::Cls { n_g, .. } => *n_g,
        }
    }

    pub fn register(&self, tape: &mut Tape, prefix: &str) -> GlobalExtractorVals {
        match self {
            GlobalExtractor::Meta { queries, attn, ln } => GlobalExtractorVals {
                meta: Some((
                    tape.param(&format!("{prefix}.queries"), &queries.queries),
                    tape.param(&format!("{prefix}.query_pos"), &queries.positional),
                    attn.register(tape, &format!("{prefix}.attn")),
                    ln.register(tape, &format!("{prefix}.ln")),
                )),
                cls: None,
            },
            GlobalExtractor::MeanPool { .. } => GlobalExtractorVals {
                meta: None,
                cls: None,
            },
            GlobalExtractor::Cls { query, ln, .. } => GlobalExtractorVals {
                meta: None,
                cls: Some((
                    tape.param(&format!("{prefix}.cls_query"), query),
                    ln.register(tape, &format!("{prefix}.ln")),
                )),
            },
        }
    }

    pub fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor)) {
        match self {
            GlobalExtractor::Meta { queries, attn, ln } => {
                f(format!("{prefix}.queries"), &queries.queries);
                f(format!("{prefix}.query_pos"), &queries.positional);
                attn.visit(&format!("{prefix}.attn"), f);
                ln.visit(&format!("{prefix}.ln"), f);
            }
            GlobalExtractor::MeanPool { .. } => {}
            GlobalExtractor::Cls { query, ln, .. } => {
                f(format!("{prefix}.cls_query"), query);
                ln.visit(&format!("{prefix}.ln"), f);
            }
        }
    }

    pub fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        match self {
            GlobalExtractor::Meta { queries, attn, ln } => {
                f(format!("{prefix}.queries"), &mut queries.queries);
                f(format!("{prefix}.query_pos"), &mut queries.positional);
                attn.visit_mut(&format!("{prefix}.attn"), f);
                ln.visit_mut(&format!("{prefix}.ln"), f);
            }
            GlobalExtractor::MeanPool { .. } => {}
            GlobalExtractor::Cls { query, ln, .. } => {
                f(format!("{prefix}.cls_query"), query);
                ln.visit_mut(&format!("{prefix}.ln"), f);
            }
        }
    }

    /// Global tokens as a tape value; `x` is the full token grid, returned
    /// untouched by contract (the extractor never writes through it).
    pub fn extract_on_tape(
        &self,
        tape: &mut Tape,
        vals: &GlobalExtractorVals,
        x: Val,
    ) -> Result<Val> {
        let t = tape.dims(x)[0];
        if t == 0 {
            return Err(Error::shape(
                "extract_globals",
                "empty token grid".to_string(),
            ));
        }
        match self {
            GlobalExtractor::Meta { .. } => {
                let (queries, query_pos, attn, ln) = vals.meta.as_ref().expect("meta vals");
                let q_in = tape.add(*queries, *query_pos)?;
                let attended = attn.attend(tape, q_in, x, false)?;
                let residual = tape.add(*queries, attended)?;
                ln.apply(tape, residual)
            }
            GlobalExtractor::MeanPool { n_g } => {
                let d = tape.dims(x)[1];
                let ones = tape.constant(&[1, t], vec![1.0 / t as f64; t]);
                let mean = tape.matmul(ones, x)?;
                let _ = d;
                tape.gather_rows(mean, &vec![0; *n_g])
            }
            GlobalExtractor::Cls { n_g, .. } => {
                let (query, ln) = vals.cls.as_ref().expect("cls vals");
                let d = tape.dims(x)[1];
                let xt = tape.transpose(x)?;
                let scores = tape.matmul(*query, xt)?;
                let scores = tape.scale(scores, 1.0 / (d as f64).sqrt())?;
                let weights = tape.softmax_rows(scores)?;
                let attended = tape.matmul(weights, x)?;
                let residual = tape.add(*query, attended)?;
                let normed = ln.apply(tape, residual)?;
                tape.gather_rows(normed, &vec![0; *n_g])
            }
        }
    }

    pub fn extract(&self, x: &TokenGrid) -> Result<GlobalTokens> {
        let mut tape = Tape::new();
        let vals = self.register(&mut tape, "globals");
        let xv = tape.leaf(&x.tokens);
        let g = self.extract_on_tape(&mut tape, &vals, xv)?;
        Ok(GlobalTokens {
            values: tape.to_tensor(g),
        })
    }
}

impl_grad_checkable!(GlobalExtractor, "globals");

/// Meta-token extraction in its free-standing form: attention from the
/// positioned queries over the token field, then residual and layer norm on
/// the meta branch.
pub fn extract_globals(
    x: &TokenGrid,
    q: &MetaQueries,
    w: &AttentionWeights,
    ln: &LayerNorm,
) -> Result<GlobalTokens> {
    let extractor = GlobalExtractor::Meta {
        queries: q.clone(),
        attn: w.clone(),
        ln: ln.clone(),
    };
    extractor.extract(x)
}

/// Baseline global-token formation for the ablation harness.
pub fn global_token_baseline(
    kind: GlobalKind,
    x: &TokenGrid,
    n_g: usize,
    rng: &mut impl Rng,
) -> Result<GlobalTokens> {
    if kind == GlobalKind::Meta {
        return Err(Error::Config(
            "meta is the primary extractor, not a baseline".to_string(),
        ));
    }
    let extractor = GlobalExtractor::new(kind, n_g, x.embed_dim(), 1, rng);
    extractor.extract(x)
}
