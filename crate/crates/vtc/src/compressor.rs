//! Local-stream compression and the discrete wire format.
//!
//! The token grid is shortened by non-overlapping average pooling (stride s
//! keeps 1/s^2 of the tokens), and the compact pair of global and local index
//! streams travels between components as
//!
//!   [IMG_BOS], global indices, [IMG_SEP], local indices, [IMG_EOS]
//!
//! with the three specials occupying reserved vocabulary ids directly above
//! the codebook range.

use crate::basetok::TokenGrid;
use crate::error::{Error, Result};
use crate::globals::GlobalTokens;
use crate::pooling;
use crate::tensor::Tensor;

/// The pooled (H/s) x (W/s) token field.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressedGrid {
    pub grid_h: usize,
    pub grid_w: usize,
    pub stride: usize,
    pub tokens: Tensor,
}

impl CompressedGrid {
    pub fn token_count(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

/// Fraction of local tokens kept at stride s: exactly 1/s^2.
pub fn keep_ratio(stride: usize) -> Result<(u32, u32)> {
    if stride == 0 {
        return Err(Error::Config("stride must be at least 1".to_string()));
    }
    Ok((1, (stride * stride) as u32))
}

/// Mean over each non-overlapping s x s block in raster order; s = 1 is the
/// identity.
pub fn avg_pool_grid(x: &TokenGrid, stride: usize) -> Result<CompressedGrid> {
    check_stride(x, stride)?;
    let d = x.embed_dim();
    let data = pooling::avg_pool_forward(x.tokens.data(), x.grid_h, x.grid_w, d, stride);
    let grid_h = x.grid_h / stride;
    let grid_w = x.grid_w / stride;
    Ok(CompressedGrid {
        grid_h,
        grid_w,
        stride,
        tokens: Tensor::from_vec(vec![grid_h * grid_w, d], data)?,
    })
}

/// Per-channel max over each block; ships only for the compressor ablation.
pub fn max_pool_grid(x: &TokenGrid, stride: usize) -> Result<CompressedGrid> {
    check_stride(x, stride)?;
    let d = x.embed_dim();
    let (data, _) = pooling::max_pool_forward(x.tokens.data(), x.grid_h, x.grid_w, d, stride);
    let grid_h = x.grid_h / stride;
    let grid_w = x.grid_w / stride;
    Ok(CompressedGrid {
        grid_h,
        grid_w,
        stride,
        tokens: Tensor::from_vec(vec![grid_h * grid_w, d], data)?,
    })
}

fn check_stride(x: &TokenGrid, stride: usize) -> Result<()> {
    if stride == 0 || x.grid_h % stride != 0 || x.grid_w % stride != 0 {
        return Err(Error::shape(
            "avg_pool_grid",
            format!(
                "grid H={} W={} not divisible by stride s={}",
                x.grid_h, x.grid_w, stride
            ),
        ));
    }
    Ok(())
}

/// Copy every pooled token back over its s x s block. Re-pooling the result
/// reproduces the pooled grid bit-identically.
pub fn upsample_nearest(xc: &CompressedGrid) -> TokenGrid {
    let d = xc.tokens.cols();
    let (h, w, s) = (xc.grid_h * xc.stride, xc.grid_w * xc.stride, xc.stride);
    let mut data = vec![0.0; h * w * d];
    for y in 0..h {
        for x in 0..w {
            let src = xc.tokens.row((y / s) * xc.grid_w + x / s);
            data[(y * w + x) * d..(y * w + x + 1) * d].copy_from_slice(src);
        }
    }
    TokenGrid::new(h, w, Tensor::from_vec(vec![h * w, d], data).unwrap()).unwrap()
}

// ── discrete wire format ────────────────────────────────────────────────

/// One element of the discrete visual sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SeqToken {
    Bos,
    Sep,
    Eos,
    Global(u32),
    Local(u32),
}

/// Declared segment lengths of a sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SequenceLayout {
    pub n_g: usize,
    pub t_local: usize,
}

impl SequenceLayout {
    pub fn total_len(&self) -> usize {
        self.n_g + self.t_local + 3
    }
}

/// The discrete wire format: declared layout plus the token items. Items are
/// not validated on construction; [`parse_sequence`] is the gatekeeper.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IndexSequence {
    pub layout: SequenceLayout,
    pub items: Vec<SeqToken>,
}

impl IndexSequence {
    /// Raw, unvalidated constructor (fixtures, fuzzing, text ingest).
    pub fn from_items(layout: SequenceLayout, items: Vec<SeqToken>) -> Self {
        IndexSequence { layout, items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Space-separated text line: specials spelled out, indices as decimals.
    pub fn to_text_line(&self) -> String {
        self.items
            .iter()
            .map(|t| match t {
                SeqToken::Bos => "<BOS>".to_string(),
                SeqToken::Sep => "<SEP>".to_string(),
                SeqToken::Eos => "<EOS>".to_string(),
                SeqToken::Global(k) | SeqToken::Local(k) => k.to_string(),
            })
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Parse a text line against a declared layout and codebook size. Index
    /// kinds are assigned by position relative to the first `<SEP>`.
    pub fn from_text_line(line: &str, layout: SequenceLayout, k: usize) -> Result<Self> {
        let mut items = Vec::new();
        let mut seen_sep = false;
        for (position, tok) in line.split_whitespace().enumerate() {
            let item = match tok {
                "<BOS>" => SeqToken::Bos,
                "<SEP>" => {
                    seen_sep = true;
                    SeqToken::Sep
                }
                "<EOS>" => SeqToken::Eos,
                other => {
                    let idx: u32 = other.parse().map_err(|_| Error::SequenceParse {
                        position,
                        detail: format!("unrecognized token {other:?}"),
                    })?;
                    if idx == 0 || idx as usize > k {
                        return Err(Error::SequenceParse {
                            position,
                            detail: format!("index {idx} outside 1..={k}"),
                        });
                    }
                    if seen_sep {
                        SeqToken::Local(idx)
                    } else {
                        SeqToken::Global(idx)
                    }
                }
            };
            items.push(item);
        }
        let seq = IndexSequence::from_items(layout, items);
        parse_sequence(&seq)?;
        Ok(seq)
    }
}

/// Build the wire sequence from the two index streams. Both segments must be
/// present; lengths are taken from the inputs.
pub fn assemble_sequence(zg: &[u32], zx: &[u32]) -> Result<IndexSequence> {
    if zg.is_empty() {
        return Err(Error::SequenceParse {
            position: 1,
            detail: "global segment is empty; the format requires both segments".to_string(),
        });
    }
    if zx.is_empty() {
        return Err(Error::SequenceParse {
            position: zg.len() + 2,
            detail: "local segment is empty; the format requires both segments".to_string(),
        });
    }
    assemble_with_layout(
        SequenceLayout {
            n_g: zg.len(),
            t_local: zx.len(),
        },
        zg,
        zx,
    )
}

/// Layout-aware assembly; a declared n_g of 0 (empty global segment) is the
/// uncompressed-baseline encoding and is allowed here.
pub fn assemble_with_layout(
    layout: SequenceLayout,
    zg: &[u32],
    zx: &[u32],
) -> Result<IndexSequence> {
    if zg.len() != layout.n_g || zx.len() != layout.t_local {
        return Err(Error::SequenceParse {
            position: 0,
            detail: format!(
                "stream lengths ({}, {}) do not match declared layout ({}, {})",
                zg.len(),
                zx.len(),
                layout.n_g,
                layout.t_local
            ),
        });
    }
    for (offset, &idx) in zg.iter().enumerate() {
        if idx == 0 {
            return Err(Error::SequenceParse {
                position: 1 + offset,
                detail: "index 0 is reserved; codebook indices start at 1".to_string(),
            });
        }
    }
    for (offset, &idx) in zx.iter().enumerate() {
        if idx == 0 {
            return Err(Error::SequenceParse {
                position: layout.n_g + 2 + offset,
                detail: "index 0 is reserved; codebook indices start at 1".to_string(),
            });
        }
    }
    let mut items = Vec::with_capacity(layout.total_len());
    items.push(SeqToken::Bos);
    items.extend(zg.iter().map(|&k| SeqToken::Global(k)));
    items.push(SeqToken::Sep);
    items.extend(zx.iter().map(|&k| SeqToken::Local(k)));
    items.push(SeqToken::Eos);
    Ok(IndexSequence::from_items(layout, items))
}

/// Validate the grammar against the declared layout and split at IMG_SEP.
/// Any deviation is rejected with the 0-based item position.
pub fn parse_sequence(seq: &IndexSequence) -> Result<(Vec<u32>, Vec<u32>)> {
    let layout = seq.layout;
    let expect_len = layout.total_len();
    let fail =
        |position: usize, detail: String| -> Error { Error::SequenceParse { position, detail } };

    let mut zg = Vec::with_capacity(layout.n_g);
    let mut zx = Vec::with_capacity(layout.t_local);
    for (position, &item) in seq.items.iter().enumerate() {
        if position >= expect_len {
            return Err(fail(
                position,
                format!("sequence longer than the declared {expect_len} items"),
            ));
        }
        let expected_kind: &str;
        if position == 0 {
            expected_kind = "IMG_BOS";
            if item == SeqToken::Bos {
                continue;
            }
        } else if position <= layout.n_g {
            expected_kind = "GlobalIndex";
            if let SeqToken::Global(k) = item {
                if k == 0 {
                    return Err(fail(
                        position,
                        "index 0 outside the codebook range".to_string(),
                    ));
                }
                zg.push(k);
                continue;
            }
            if matches!(item, SeqToken::Sep) {
                return Err(fail(
                    position,
                    format!(
                        "IMG_SEP after {} global indices, expected {}",
                        zg.len(),
                        layout.n_g
                    ),
                ));
            }
        } else if position == layout.n_g + 1 {
            expected_kind = "IMG_SEP";
            if item == SeqToken::Sep {
                continue;
            }
            if matches!(item, SeqToken::Global(_)) {
                return Err(fail(
                    position,
                    format!("more than the expected {} global indices", layout.n_g),
                ));
            }
        } else if position <= layout.n_g + 1 + layout.t_local {
            expected_kind = "LocalIndex";
            if let SeqToken::Local(k) = item {
                if k == 0 {
                    return Err(fail(
                        position,
                        "index 0 outside the codebook range".to_string(),
                    ));
                }
                zx.push(k);
                continue;
            }
        } else {
            expected_kind = "IMG_EOS";
            if item == SeqToken::Eos {
                continue;
            }
        }
        return Err(fail(
            position,
            format!("expected {expected_kind}, found {item:?}"),
        ));
    }
    if seq.items.len() < expect_len {
        return Err(fail(
            seq.items.len(),
            format!(
                "sequence ends after {} items, declared layout needs {}",
                seq.items.len(),
                expect_len
            ),
        ));
    }
    Ok((zg, zx))
}

// ── vocabulary ids for the sequence model ───────────────────────────────

/// Id assignment over the discrete vocabulary: 0 is reserved, codebook
/// indices keep their 1-based values, the three specials sit directly above
/// the codebook range, class-prompt tokens above those.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Vocab {
    pub codebook_size: usize,
    pub classes: usize,
}

impl Vocab {
    pub fn size(&self) -> usize {
        1 + self.codebook_size + 3 + self.classes
    }

    pub fn code_id(&self, k: u32) -> usize {
        debug_assert!(k >= 1 && k as usize <= self.codebook_size);
        k as usize
    }

    pub fn bos_id(&self) -> usize {
        self.codebook_size + 1
    }

    pub fn sep_id(&self) -> usize {
        self.codebook_size + 2
    }

    pub fn eos_id(&self) -> usize {
        self.codebook_size + 3
    }

    pub fn class_id(&self, class: usize) -> usize {
        debug_assert!(class < self.classes);
        self.codebook_size + 4 + class
    }

    /// Inverse of `code_id` for ids inside the codebook range.
    pub fn id_as_code(&self, id: usize) -> Option<u32> {
        if id >= 1 && id <= self.codebook_size {
            Some(id as u32)
        } else {
            None
        }
    }

    pub fn sequence_ids(&self, seq: &IndexSequence) -> Vec<usize> {
        seq.items
            .iter()
            .map(|t| match t {
                SeqToken::Bos => self.bos_id(),
                SeqToken::Sep => self.sep_id(),
                SeqToken::Eos => self.eos_id(),
                SeqToken::Global(k) | SeqToken::Local(k) => self.code_id(*k),
            })
            .collect()
    }
}

/// Continuous embeddings ordered exactly like the wire format, with the given
/// special embeddings (rows bos, sep, eos of a 3 x d matrix) substituted for
/// the markers. No quantization is applied.
pub fn embed_sequence_for_understanding(
    g: &GlobalTokens,
    xc: &CompressedGrid,
    specials: &Tensor,
) -> Result<Tensor> {
    let d = g.values.cols();
    if specials.dims() != [3, d] || xc.tokens.cols() != d {
        return Err(Error::shape(
            "embed_sequence_for_understanding",
            format!(
                "specials {:?} / locals {:?} do not match width {}",
                specials.dims(),
                xc.tokens.dims(),
                d
            ),
        ));
    }
    let n_g = g.values.rows();
    let t_local = xc.tokens.rows();
    let mut data = Vec::with_capacity((n_g + t_local + 3) * d);
    data.extend_from_slice(specials.row(0));
    data.extend_from_slice(g.values.data());
    data.extend_from_slice(specials.row(1));
    data.extend_from_slice(xc.tokens.data());
    data.extend_from_slice(specials.row(2));
    Tensor::from_vec(vec![n_g + t_local + 3, d], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{rand_tensor, rng};
    use rand::Rng;

    fn grid(h: usize, w: usize, d: usize, seed: u64) -> TokenGrid {
        let mut r = rng(seed);
        TokenGrid::new(h, w, rand_tensor(&[h * w, d], &mut r)).unwrap()
    }

    #[test]
    fn pooling_shrinks_256_to_64_at_stride_2() {
        let x = grid(16, 16, 4, 301);
        let xc = avg_pool_grid(&x, 2).unwrap();
        assert_eq!(xc.token_count(), 64);
        assert_eq!((xc.grid_h, xc.grid_w), (8, 8));
    }

    #[test]
    fn stride_one_pooling_is_bit_identical() {
        let x = grid(4, 4, 5, 303);
        let xc = avg_pool_grid(&x, 1).unwrap();
        for (a, b) in xc.tokens.data().iter().zip(x.tokens.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn two_by_two_block_pools_to_its_mean() {
        // vectors {a, b, c, d} -> (a+b+c+d)/4, computed by hand
        let a = [1.0, 0.0];
        let b = [0.0, 2.0];
        let c = [3.0, 3.0];
        let d = [0.0, 7.0];
        let x = TokenGrid::new(
            2,
            2,
            Tensor::from_vec(vec![4, 2], [a, b, c, d].concat()).unwrap(),
        )
        .unwrap();
        let xc = avg_pool_grid(&x, 2).unwrap();
        assert_eq!(xc.tokens.data(), &[1.0, 3.0]);
    }

    #[test]
    fn constant_grid_pools_to_constant() {
        for s in [1, 2, 4] {
            let x = TokenGrid::new(4, 4, Tensor::filled(&[16, 3], 0.37)).unwrap();
            let xc = avg_pool_grid(&x, s).unwrap();
            assert!(
                xc.tokens.data().iter().all(|&v| (v - 0.37).abs() < 1e-15),
                "stride {s}"
            );
        }
    }

    #[test]
    fn pooling_rejects_non_divisible_strides() {
        let x = grid(4, 4, 2, 307);
        let err = avg_pool_grid(&x, 3).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("H=4") && msg.contains("W=4") && msg.contains("s=3"));
    }

    #[test]
    fn keep_ratio_grid_matches_strides() {
        assert_eq!(keep_ratio(2).unwrap(), (1, 4));
        assert_eq!(keep_ratio(1).unwrap(), (1, 1));
        let expect = [(1u32, 1u32), (1, 4), (1, 16), (1, 64)];
        for (s, e) in [1usize, 2, 4, 8].iter().zip(expect) {
            assert_eq!(keep_ratio(*s).unwrap(), e);
        }
        assert!(keep_ratio(0).is_err());
    }

    #[test]
    fn pooling_is_linear() {
        let mut r = rng(311);
        let x = grid(4, 4, 3, 313);
        let y = grid(4, 4, 3, 317);
        let (a, b): (f64, f64) = (r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0));
        let mixed_tokens = Tensor::from_vec(
            vec![16, 3],
            x.tokens
                .data()
                .iter()
                .zip(y.tokens.data())
                .map(|(&u, &v)| a * u + b * v)
                .collect(),
        )
        .unwrap();
        let mixed = TokenGrid::new(4, 4, mixed_tokens).unwrap();
        let pm = avg_pool_grid(&mixed, 2).unwrap();
        let px = avg_pool_grid(&x, 2).unwrap();
        let py = avg_pool_grid(&y, 2).unwrap();
        for i in 0..pm.tokens.numel() {
            let expect = a * px.tokens.data()[i] + b * py.tokens.data()[i];
            assert!((pm.tokens.data()[i] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_then_repool_is_bit_identical() {
        let x = grid(8, 8, 4, 319);
        let pooled = avg_pool_grid(&x, 2).unwrap();
        let up = upsample_nearest(&pooled);
        let again = avg_pool_grid(&up, 2).unwrap();
        for (a, b) in pooled.tokens.data().iter().zip(again.tokens.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn max_and_avg_agree_on_constant_grids() {
        let x = TokenGrid::new(4, 4, Tensor::filled(&[16, 2], 0.5)).unwrap();
        let a = avg_pool_grid(&x, 2).unwrap();
        let m = max_pool_grid(&x, 2).unwrap();
        assert_eq!(a.tokens.data(), m.tokens.data());
    }

    #[test]
    fn assembled_lengths_follow_the_format() {
        let seq = assemble_sequence(&[1, 2, 3, 4], &(1..=16).collect::<Vec<u32>>()).unwrap();
        assert_eq!(seq.len(), 23);
        let seq = assemble_sequence(&[1, 2, 3, 4], &vec![5; 64]).unwrap();
        assert_eq!(seq.len(), 71);
        assert_eq!(seq.layout.total_len(), 71);
    }

    #[test]
    fn assemble_rejects_empty_segments() {
        assert!(assemble_sequence(&[], &[1, 2]).is_err());
        assert!(assemble_sequence(&[1], &[]).is_err());
    }

    #[test]
    fn parse_inverts_assemble() {
        let mut r = rng(331);
        for _ in 0..50 {
            let n_g = r.gen_range(1..6);
            let t_local = r.gen_range(1..20);
            let zg: Vec<u32> = (0..n_g).map(|_| r.gen_range(1..=64)).collect();
            let zx: Vec<u32> = (0..t_local).map(|_| r.gen_range(1..=64)).collect();
            let seq = assemble_sequence(&zg, &zx).unwrap();
            let (g2, x2) = parse_sequence(&seq).unwrap();
            assert_eq!(g2, zg);
            assert_eq!(x2, zx);
        }
    }

    #[test]
    fn missing_separator_is_rejected_at_first_local_position() {
        let layout = SequenceLayout { n_g: 2, t_local: 3 };
        let items = vec![
            SeqToken::Bos,
            SeqToken::Global(1),
            SeqToken::Global(2),
            SeqToken::Local(5), // IMG_SEP should be here
            SeqToken::Local(6),
            SeqToken::Local(7),
            SeqToken::Eos,
        ];
        let err = parse_sequence(&IndexSequence::from_items(layout, items)).unwrap_err();
        match err {
            Error::SequenceParse { position, .. } => assert_eq!(position, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn surplus_global_index_cites_expected_count() {
        let layout = SequenceLayout { n_g: 2, t_local: 2 };
        let items = vec![
            SeqToken::Bos,
            SeqToken::Global(1),
            SeqToken::Global(2),
            SeqToken::Global(3),
            SeqToken::Sep,
            SeqToken::Local(1),
            SeqToken::Local(2),
            SeqToken::Eos,
        ];
        let err = parse_sequence(&IndexSequence::from_items(layout, items)).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("expected") || msg.contains("more than"),
            "{msg}"
        );
        assert!(msg.contains('2'), "{msg}");
    }

    #[test]
    fn empty_global_segment_parses_when_declared() {
        // the uncompressed-baseline encoding: BOS SEP locals EOS
        let layout = SequenceLayout { n_g: 0, t_local: 4 };
        let seq = assemble_with_layout(layout, &[], &[1, 2, 3, 4]).unwrap();
        assert_eq!(seq.len(), 7);
        let (zg, zx) = parse_sequence(&seq).unwrap();
        assert!(zg.is_empty());
        assert_eq!(zx, vec![1, 2, 3, 4]);
    }

    #[test]
    fn single_token_mutations_are_rejected() {
        let mut r = rng(337);
        let zg: Vec<u32> = (0..4).map(|_| r.gen_range(1..=64)).collect();
        let zx: Vec<u32> = (0..16).map(|_| r.gen_range(1..=64)).collect();
        let valid = assemble_sequence(&zg, &zx).unwrap();
        for _ in 0..1000 {
            let mut items = valid.items.clone();
            let pos = r.gen_range(0..items.len());
            match r.gen_range(0..5) {
                // structural edits only: a code index swapped for another
                // code index of the same kind is a different valid sequence
                0 => items[pos] = SeqToken::Sep,
                1 => items[pos] = SeqToken::Bos,
                2 => {
                    items[pos] = match items[pos] {
                        SeqToken::Global(k) => SeqToken::Local(k),
                        SeqToken::Local(k) => SeqToken::Global(k),
                        _ => SeqToken::Global(9),
                    }
                }
                3 => {
                    items.remove(pos);
                }
                _ => items.insert(pos, SeqToken::Local(3)),
            }
            if items == valid.items {
                continue;
            }
            let mutated = IndexSequence::from_items(valid.layout, items);
            assert!(
                parse_sequence(&mutated).is_err(),
                "mutation at {pos} slipped through"
            );
        }
    }

    #[test]
    fn text_line_round_trip() {
        let seq = assemble_sequence(&[7, 9], &[1, 64, 3]).unwrap();
        let line = seq.to_text_line();
        assert_eq!(line, "<BOS> 7 9 <SEP> 1 64 3 <EOS>");
        let back = IndexSequence::from_text_line(&line, seq.layout, 64).unwrap();
        assert_eq!(back, seq);
    }

    #[test]
    fn text_line_rejects_out_of_range_and_junk() {
        let layout = SequenceLayout { n_g: 1, t_local: 1 };
        let err = IndexSequence::from_text_line("<BOS> 65 <SEP> 1 <EOS>", layout, 64).unwrap_err();
        assert!(matches!(err, Error::SequenceParse { position: 1, .. }));
        let err = IndexSequence::from_text_line("<BOS> x <SEP> 1 <EOS>", layout, 64).unwrap_err();
        assert!(matches!(err, Error::SequenceParse { position: 1, .. }));
    }

    #[test]
    fn vocabulary_ids_tile_without_overlap() {
        let v = Vocab {
            codebook_size: 64,
            classes: 4,
        };
        assert_eq!(v.size(), 72);
        assert_eq!(v.code_id(1), 1);
        assert_eq!(v.code_id(64), 64);
        assert_eq!(v.bos_id(), 65);
        assert_eq!(v.sep_id(), 66);
        assert_eq!(v.eos_id(), 67);
        assert_eq!(v.class_id(0), 68);
        assert_eq!(v.class_id(3), 71);
        assert_eq!(v.id_as_code(64), Some(64));
        assert_eq!(v.id_as_code(65), None);
        assert_eq!(v.id_as_code(0), None);
    }

    #[test]
    fn understanding_rows_follow_the_wire_order() {
        let mut r = rng(341);
        let g = GlobalTokens {
            values: rand_tensor(&[4, 8], &mut r),
        };
        let xc = CompressedGrid {
            grid_h: 4,
            grid_w: 4,
            stride: 2,
            tokens: rand_tensor(&[16, 8], &mut r),
        };
        let specials = rand_tensor(&[3, 8], &mut r);
        let rows = embed_sequence_for_understanding(&g, &xc, &specials).unwrap();
        assert_eq!(rows.dims(), &[23, 8]);
        // rows 2..5 (1-indexed) hold the global tokens
        for i in 0..4 {
            assert_eq!(rows.row(1 + i), g.values.row(i));
        }
        assert_eq!(rows.row(0), specials.row(0));
        assert_eq!(rows.row(5), specials.row(1));
        assert_eq!(rows.row(22), specials.row(2));

        // zeroed special embeddings leave zero rows at the marker positions
        let zs = Tensor::zeros(&[3, 8]);
        let rows = embed_sequence_for_understanding(&g, &xc, &zs).unwrap();
        assert!(rows.row(0).iter().all(|&v| v == 0.0));
        assert!(rows.row(5).iter().all(|&v| v == 0.0));
        assert!(rows.row(22).iter().all(|&v| v == 0.0));
    }
}
