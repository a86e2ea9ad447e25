//! Hierarchical dialog encoder with optional position-indicator markers.
//!
//! Utterance level: a bidirectional GRU over token encodings, pooled by a
//! learned attention scorer. Dialog level: a unidirectional GRU over pooled
//! utterance features (augmented with learned position vectors relative to
//! the marked utterances), pooled again into a single dialog vector.

use super::params::{Init, ParamId, ParamSet};
use super::tape::{gru_step, score_rows, GruWeights, MlpScorer, NodeId, Tape};
use super::vocab::{Vocab, E1_CLOSE, E1_OPEN, E2_CLOSE, E2_OPEN};
use crate::data::{Entity, Utterance};
use crate::scalar::Scalar;
use ndarray::Array1;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy)]
pub struct EncoderConfig {
    /// Token embedding size and hidden width (must be even).
    pub emb: usize,
    /// Width of each learned position vector.
    pub pos_dim: usize,
    /// Number of marked target entities (0, 1 or 2).
    pub markers: usize,
    /// Utterance-distance clip for position vectors.
    pub pos_clip: i64,
}

#[derive(Debug, Clone)]
pub struct DialogEncoderWeights {
    pub tok_emb: ParamId,
    pub tag_emb: ParamId,
    pub utt_fwd: GruWeights,
    pub utt_bwd: GruWeights,
    pub utt_pool: MlpScorer,
    pub dlg_gru: GruWeights,
    pub dlg_pool: MlpScorer,
    pub pos_tables: Vec<ParamId>,
    pub cfg: EncoderConfig,
}

fn add_gru<S: Scalar>(
    params: &mut ParamSet<S>,
    prefix: &str,
    input: usize,
    hidden: usize,
    rng: &mut ChaCha8Rng,
) -> GruWeights {
    let g = Init::Glorot { scale: 1.0 };
    GruWeights {
        w_r: params.add_matrix(format!("{prefix}.w_r"), hidden, input, g, rng),
        u_r: params.add_matrix(format!("{prefix}.u_r"), hidden, hidden, g, rng),
        b_r: params.add_vector(format!("{prefix}.b_r"), hidden, Init::Zeros, rng),
        w_z: params.add_matrix(format!("{prefix}.w_z"), hidden, input, g, rng),
        u_z: params.add_matrix(format!("{prefix}.u_z"), hidden, hidden, g, rng),
        b_z: params.add_vector(format!("{prefix}.b_z"), hidden, Init::Zeros, rng),
        w_n: params.add_matrix(format!("{prefix}.w_n"), hidden, input, g, rng),
        u_n: params.add_matrix(format!("{prefix}.u_n"), hidden, hidden, g, rng),
        b_n: params.add_vector(format!("{prefix}.b_n"), hidden, Init::Zeros, rng),
    }
}

pub(crate) fn add_scorer<S: Scalar>(
    params: &mut ParamSet<S>,
    prefix: &str,
    input: usize,
    hidden: usize,
    rng: &mut ChaCha8Rng,
) -> MlpScorer {
    let g = Init::Glorot { scale: 1.0 };
    MlpScorer {
        w1: params.add_matrix(format!("{prefix}.w1"), hidden, input, g, rng),
        b1: params.add_vector(format!("{prefix}.b1"), hidden, Init::Zeros, rng),
        w2: params.add_vector(format!("{prefix}.w2"), hidden, g, rng),
        b2: params.add_vector(format!("{prefix}.b2"), 1, Init::Zeros, rng),
    }
}

impl DialogEncoderWeights {
    pub fn new<S: Scalar>(
        params: &mut ParamSet<S>,
        cfg: EncoderConfig,
        vocab: &Vocab,
        prefix: &str,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        assert!(cfg.emb % 2 == 0, "hidden width must be even for the BiGRU");
        let emb_init = Init::Uniform(0.1);
        let tok_emb = params.add_matrix(
            format!("{prefix}.tok_emb"),
            vocab.n_tokens(),
            cfg.emb,
            emb_init,
            rng,
        );
        let tag_emb = params.add_matrix(
            format!("{prefix}.tag_emb"),
            vocab.n_tags(),
            cfg.emb,
            emb_init,
            rng,
        );
        let half = cfg.emb / 2;
        let utt_fwd = add_gru(params, &format!("{prefix}.utt_fwd"), cfg.emb, half, rng);
        let utt_bwd = add_gru(params, &format!("{prefix}.utt_bwd"), cfg.emb, half, rng);
        let utt_pool = add_scorer(params, &format!("{prefix}.utt_pool"), cfg.emb, half, rng);
        let dlg_in = cfg.emb + cfg.markers * cfg.pos_dim;
        let dlg_gru = add_gru(params, &format!("{prefix}.dlg_gru"), dlg_in, cfg.emb, rng);
        let dlg_pool = add_scorer(params, &format!("{prefix}.dlg_pool"), cfg.emb, half, rng);
        let pos_tables = (0..cfg.markers)
            .map(|k| {
                params.add_matrix(
                    format!("{prefix}.pos{k}"),
                    (2 * cfg.pos_clip as usize) + 1,
                    cfg.pos_dim,
                    emb_init,
                    rng,
                )
            })
            .collect();
        DialogEncoderWeights {
            tok_emb,
            tag_emb,
            utt_fwd,
            utt_bwd,
            utt_pool,
            dlg_gru,
            dlg_pool,
            pos_tables,
            cfg,
        }
    }
}

/// One token after marker infusion: vocab id plus tag id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PreparedToken {
    pub token: usize,
    pub tag: usize,
}

/// A dialog ready for encoding: marker tokens inserted, tags resolved, and
/// the marked positions remembered.
#[derive(Debug, Clone)]
pub struct PreparedDialog {
    pub utterances: Vec<Vec<PreparedToken>>,
    /// Utterance indices containing each marker's occurrences.
    pub marker_utts: Vec<Vec<usize>>,
    /// First marked occurrence per marker as (utterance, token) position.
    pub marker_pos: Vec<(usize, usize)>,
    /// Flattened (utterance, token, vocab id) triples in encoding order,
    /// aligned with the rows of [`DialogEncoding::flat_tokens`].
    pub flat_index: Vec<(usize, usize, usize)>,
}

/// Inserts `<e1>`/`</e1>` (and `<e2>`/`</e2>`) around every occurrence of
/// the target entities and resolves token/tag ids. All entity mentions are
/// tagged with their type regardless of marking.
pub fn prepare_dialog(utterances: &[Utterance], targets: &[&Entity], vocab: &Vocab) -> PreparedDialog {
    assert!(targets.len() <= 2, "at most two marked entities");
    let opens = [E1_OPEN, E2_OPEN];
    let closes = [E1_CLOSE, E2_CLOSE];
    let mut out = PreparedDialog {
        utterances: Vec::with_capacity(utterances.len()),
        marker_utts: vec![Vec::new(); targets.len()],
        marker_pos: vec![(usize::MAX, usize::MAX); targets.len()],
        flat_index: Vec::new(),
    };
    for (ui, utt) in utterances.iter().enumerate() {
        let mut tag_of: Vec<Option<&str>> = vec![None; utt.tokens.len()];
        let mut marker_at: Vec<Option<usize>> = vec![None; utt.tokens.len()];
        for m in &utt.mentions {
            for t in m.start..m.end {
                tag_of[t] = Some(m.entity.etype.as_str());
            }
            for (k, target) in targets.iter().enumerate() {
                if m.entity == **target {
                    marker_at[m.start] = Some(k);
                }
            }
        }
        let mut toks: Vec<PreparedToken> = Vec::with_capacity(utt.tokens.len() + 4);
        for (ti, tok) in utt.tokens.iter().enumerate() {
            if let Some(k) = marker_at[ti] {
                toks.push(PreparedToken {
                    token: vocab.token_id(opens[k]),
                    tag: 0,
                });
            }
            let prepared = PreparedToken {
                token: vocab.token_id(tok),
                tag: vocab.tag_id(tag_of[ti]),
            };
            if let Some(k) = marker_at[ti] {
                if out.marker_pos[k].0 == usize::MAX {
                    out.marker_pos[k] = (ui, toks.len());
                }
                if out.marker_utts[k].last() != Some(&ui) {
                    out.marker_utts[k].push(ui);
                }
            }
            toks.push(prepared);
            if let Some(k) = marker_at[ti] {
                toks.push(PreparedToken {
                    token: vocab.token_id(closes[k]),
                    tag: 0,
                });
            }
        }
        for (ti, t) in toks.iter().enumerate() {
            out.flat_index.push((ui, ti, t.token));
        }
        out.utterances.push(toks);
    }
    out
}

/// Forward output: per-token features, pooled utterance features, dialog
/// recurrence states and the attention-pooled dialog vector.
pub struct DialogEncoding {
    pub token_mats: Vec<NodeId>,
    pub flat_tokens: NodeId,
    pub utt_feats: Vec<NodeId>,
    pub dlg_states: Vec<NodeId>,
    pub dlg_state_mat: NodeId,
    pub c: NodeId,
    pub utt_attention: Vec<NodeId>,
    pub dlg_attention: NodeId,
}

/// Signed distance from utterance `i` to the nearest marked utterance,
/// clipped. Ties resolve to the earlier marked utterance.
fn clipped_distance(i: usize, marked: &[usize], clip: i64) -> usize {
    let mut best: Option<(i64, i64)> = None; // (abs, signed)
    for &j in marked {
        let signed = i as i64 - j as i64;
        let abs = signed.abs();
        match best {
            Some((ba, _)) if ba <= abs => {}
            _ => best = Some((abs, signed)),
        }
    }
    let signed = best.map(|(_, s)| s).unwrap_or(0);
    (signed.clamp(-clip, clip) + clip) as usize
}

pub fn encode_dialog<S: Scalar>(
    tape: &mut Tape<S>,
    params: &ParamSet<S>,
    w: &DialogEncoderWeights,
    prepared: &PreparedDialog,
) -> DialogEncoding {
    assert!(
        !prepared.utterances.is_empty(),
        "cannot encode an empty dialog"
    );
    assert!(prepared.utterances.iter().all(|u| !u.is_empty()));
    let cfg = &w.cfg;
    let half = cfg.emb / 2;

    let mut token_mats = Vec::with_capacity(prepared.utterances.len());
    let mut utt_feats = Vec::with_capacity(prepared.utterances.len());
    let mut utt_attention = Vec::with_capacity(prepared.utterances.len());

    for utt in &prepared.utterances {
        // Token encodings: token embedding + tag embedding.
        let xs: Vec<NodeId> = utt
            .iter()
            .map(|t| {
                let te = tape.embed_row(params, w.tok_emb, t.token);
                let ge = tape.embed_row(params, w.tag_emb, t.tag);
                tape.add(te, ge)
            })
            .collect();
        // Bidirectional recurrence.
        let mut fwd = Vec::with_capacity(xs.len());
        let mut h = tape.leaf_v(Array1::zeros(half));
        for &x in &xs {
            h = gru_step(tape, params, &w.utt_fwd, x, h);
            fwd.push(h);
        }
        let mut bwd = vec![NodeId(0); xs.len()];
        let mut hb = tape.leaf_v(Array1::zeros(half));
        for (k, &x) in xs.iter().enumerate().rev() {
            hb = gru_step(tape, params, &w.utt_bwd, x, hb);
            bwd[k] = hb;
        }
        let feats: Vec<NodeId> = fwd
            .iter()
            .zip(bwd.iter())
            .map(|(&f, &b)| tape.concat(f, b))
            .collect();
        let mat = tape.stack_rows(feats);
        // Attention pooling within the utterance.
        let scores = score_rows(tape, params, &w.utt_pool, mat);
        let alpha = tape.softmax(scores);
        let pooled = tape.rows_weighted_sum(mat, alpha);
        token_mats.push(mat);
        utt_feats.push(pooled);
        utt_attention.push(alpha);
    }

    let flat_tokens = tape.concat_rows(token_mats.clone());

    // Dialog-level recurrence over pooled features plus position vectors.
    let mut dlg_states = Vec::with_capacity(utt_feats.len());
    let mut h = tape.leaf_v(Array1::zeros(cfg.emb));
    for (i, &feat) in utt_feats.iter().enumerate() {
        let mut x = feat;
        for (k, table) in w.pos_tables.iter().enumerate() {
            let d = clipped_distance(i, &prepared.marker_utts[k], cfg.pos_clip);
            let pos = tape.embed_row(params, *table, d);
            x = tape.concat(x, pos);
        }
        h = gru_step(tape, params, &w.dlg_gru, x, h);
        dlg_states.push(h);
    }
    let dlg_state_mat = tape.stack_rows(dlg_states.clone());
    let scores = score_rows(tape, params, &w.dlg_pool, dlg_state_mat);
    let beta = tape.softmax(scores);
    let c = tape.rows_weighted_sum(dlg_state_mat, beta);

    DialogEncoding {
        token_mats,
        flat_tokens,
        utt_feats,
        dlg_states,
        dlg_state_mat,
        c,
        utt_attention,
        dlg_attention: beta,
    }
}

impl DialogEncoding {
    /// Token feature of a marked occurrence, addressed through the prepared
    /// dialog's `marker_pos`.
    pub fn token_feature<S: Scalar>(
        &self,
        tape: &mut Tape<S>,
        pos: (usize, usize),
    ) -> NodeId {
        tape.pick_row(self.token_mats[pos.0], pos.1)
    }
}
