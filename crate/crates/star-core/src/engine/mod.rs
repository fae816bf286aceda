//! The streaming READ/YIELD loop with pluggable policies.
//!
//! Frames are read one at a time into a segment buffer. A policy decides
//! when the buffer constitutes a segment; the buffer is then encoded
//! against the cached history (the last frame anchor-flagged for the
//! anchor method), compressed into decoder-visible keys, and — subject
//! to wait-k — one token is decoded per segment. Stream exhaustion
//! flushes the remaining buffer as a final segment and drains the
//! decoder until EOS or the output cap.

mod account;
mod trace;

pub use account::{flop_account, memory_account, CacheReport, FlopReport};
pub use trace::{EventKind, StreamEvent, TraceLog};

use crate::error::{Result, StarError};
use crate::model::{
    decode_step, encode_causal, greedy_pick, il_mask_by_segment, vocab, EncoderState, KeySet,
    Method, TransducerModel, VisMask,
};
use crate::segmentation::{anchors_from_rate, select_top_k};

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PolicyKind {
    /// Accumulate gates; yield on threshold; reset the accumulator.
    StarThreshold { beta: f64 },
    /// Accumulate gates; yield on threshold; carry the residual.
    CifThreshold { beta: f64 },
    /// Yield every `width` frames.
    FixedStride { width: usize },
    /// Read everything, then select top k = t_x/rate anchors offline.
    OfflineTopK { rate: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Policy {
    pub kind: PolicyKind,
    pub wait_k: usize,
}

impl Policy {
    pub fn new(kind: PolicyKind, wait_k: usize) -> Self {
        Policy { kind, wait_k }
    }

    fn validate(&self, model: &TransducerModel) -> Result<()> {
        if self.wait_k < 1 {
            return Err(StarError::InvalidArgument("wait-k must be at least 1".into()));
        }
        let ok = match self.kind {
            PolicyKind::StarThreshold { beta } => beta > 0.0 && model.method == Method::Star,
            PolicyKind::CifThreshold { beta } => beta > 0.0 && model.method == Method::Cif,
            PolicyKind::FixedStride { width } => {
                width >= 1 && matches!(model.method, Method::None | Method::Star | Method::Cif)
            }
            PolicyKind::OfflineTopK { rate } => rate >= 1.0 && model.method == Method::Star,
        };
        if !ok {
            return Err(StarError::InvalidArgument(format!(
                "policy {:?} does not fit a model trained with method {}",
                self.kind,
                model.method.as_str()
            )));
        }
        Ok(())
    }

    fn needs_gates(&self) -> bool {
        matches!(self.kind, PolicyKind::StarThreshold { .. } | PolicyKind::CifThreshold { .. })
    }
}

/// Result of a full streaming run.
#[derive(Clone, Debug)]
pub struct StreamOutcome {
    pub hypothesis: Vec<u32>,
    pub trace: TraceLog,
    /// Frame indices at which segments ended (trigger positions).
    pub boundaries: Vec<usize>,
}

pub struct Engine<'m> {
    model: &'m TransducerModel,
    policy: Policy,
    max_out: usize,
    /// Never emit EOS; used by accounting benchmarks that need a fixed
    /// number of yields.
    force_full_output: bool,
    /// Frames are scored on arrival: required by threshold policies and
    /// by anchor/CIF compression even under a fixed-stride policy.
    use_gates: bool,
    buffer: Vec<f64>,
    buffer_scores: Vec<f64>,
    buffer_gates: Vec<f64>,
    acc: f64,
    enc_state: EncoderState,
    keys: KeySet,
    segments: usize,
    emitted: Vec<u32>,
    trace: TraceLog,
    reads: u64,
    boundaries: Vec<usize>,
    done: bool,
    cif_prev_row: Option<Vec<f64>>,
    cif_prev_right: f64,
}

impl<'m> Engine<'m> {
    pub fn new(model: &'m TransducerModel, policy: Policy, max_out: usize) -> Result<Self> {
        policy.validate(model)?;
        if max_out < 1 {
            return Err(StarError::InvalidArgument("max output length must be >= 1".into()));
        }
        let use_gates =
            policy.needs_gates() || matches!(model.method, Method::Star | Method::Cif);
        if use_gates && model.segmenter().is_none() {
            return Err(StarError::InvalidArgument("policy needs a segmenter".into()));
        }
        Ok(Engine {
            model,
            policy,
            max_out,
            force_full_output: false,
            use_gates,
            buffer: Vec::new(),
            buffer_scores: Vec::new(),
            buffer_gates: Vec::new(),
            acc: 0.0,
            enc_state: EncoderState::new(model.config.enc_layers),
            keys: KeySet::default(),
            segments: 0,
            emitted: Vec::new(),
            trace: TraceLog::default(),
            reads: 0,
            boundaries: Vec::new(),
            done: false,
            cif_prev_row: None,
            cif_prev_right: 0.0,
        })
    }

    pub fn force_full_output(mut self) -> Self {
        self.force_full_output = true;
        self
    }

    /// READ one frame; may trigger a segment yield.
    pub fn step(&mut self, frame: &[f64]) -> Result<Vec<StreamEvent>> {
        if self.done {
            return Ok(Vec::new());
        }
        let din = self.model.config.frame_dim;
        if frame.len() != din {
            return Err(StarError::shape(
                "engine-step",
                format!("frame of {} values, model wants {din}", frame.len()),
            ));
        }
        let before = self.trace.events.len();
        let frame_idx = self.reads;
        self.reads += 1;
        self.trace.push(EventKind::Read, frame_idx, self.reads);
        self.buffer.extend_from_slice(frame);
        if self.use_gates {
            let (scores, gates) = self
                .model
                .score_and_gate(frame)
                .ok_or_else(|| StarError::InvalidArgument("model has no segmenter".into()))?;
            self.acc += gates[0];
            self.buffer_scores.push(scores[0]);
            self.buffer_gates.push(gates[0]);
        }
        let fire = match self.policy.kind {
            PolicyKind::StarThreshold { beta } | PolicyKind::CifThreshold { beta } => {
                self.acc >= beta
            }
            PolicyKind::FixedStride { width } => self.buffer.len() / din == width,
            PolicyKind::OfflineTopK { .. } => false,
        };
        if fire {
            match self.policy.kind {
                PolicyKind::StarThreshold { .. } => self.acc = 0.0,
                PolicyKind::CifThreshold { beta } => self.acc -= beta,
                _ => {}
            }
            self.trigger(false)?;
        }
        Ok(self.trace.events[before..].to_vec())
    }

    /// Encode the buffered segment, append its compressed keys, and emit
    /// any tokens wait-k allows.
    fn trigger(&mut self, at_flush: bool) -> Result<()> {
        let din = self.model.config.frame_dim;
        let d = self.model.config.d_model;
        let frames_in_buffer = self.buffer.len() / din;
        debug_assert!(frames_in_buffer > 0);
        self.segments += 1;
        self.boundaries.push(self.reads as usize - 1);
        let mut flags = vec![false; frames_in_buffer];
        if self.model.method == Method::Star {
            flags[frames_in_buffer - 1] = true;
        }
        let rows = encode_causal(self.model, &self.buffer, &flags, &mut self.enc_state)?;
        match self.model.method {
            Method::Star => {
                let inject = *self.buffer_scores.last().unwrap_or(&0.0);
                self.keys.push_key(&rows[(frames_in_buffer - 1) * d..], self.segments, Some(inject));
            }
            Method::Cif => {
                let mut c = vec![0.0; d];
                if let Some(prev) = &self.cif_prev_row {
                    for (cv, pv) in c.iter_mut().zip(prev.iter()) {
                        *cv += self.cif_prev_right * pv;
                    }
                }
                // interior frames carry their gate; the trigger frame is
                // split against the threshold only when the threshold
                // caused the fire (flushes and fixed windows take it whole)
                let total = self.acc; // residual already subtracted for cif
                let last_gate = *self.buffer_gates.last().unwrap();
                let threshold_fire =
                    !at_flush && matches!(self.policy.kind, PolicyKind::CifThreshold { .. });
                let (left, right) = if threshold_fire {
                    (last_gate - total, total)
                } else {
                    (last_gate, 0.0)
                };
                for t in 0..frames_in_buffer {
                    let w = if t + 1 == frames_in_buffer { left } else { self.buffer_gates[t] };
                    for (cv, hv) in c.iter_mut().zip(&rows[t * d..(t + 1) * d]) {
                        *cv += w * hv;
                    }
                }
                self.cif_prev_row = Some(rows[(frames_in_buffer - 1) * d..].to_vec());
                self.cif_prev_right = right;
                self.keys.data.extend_from_slice(&c);
                self.keys.rows += 1;
                self.keys.segments.push(self.segments);
            }
            Method::None | Method::Cnn => {
                for t in 0..frames_in_buffer {
                    self.keys.push_key(&rows[t * d..(t + 1) * d], self.segments, None);
                }
            }
        }
        self.buffer.clear();
        self.buffer_scores.clear();
        self.buffer_gates.clear();
        if !at_flush {
            let emittable = self.segments.saturating_sub(self.policy.wait_k - 1);
            while !self.done && self.emitted.len() < emittable && self.emitted.len() < self.max_out
            {
                self.decode_one(None)?;
            }
            if self.emitted.len() >= self.max_out {
                self.done = true;
            }
        }
        Ok(())
    }

    fn decode_one(&mut self, visibility: Option<&VisMask>) -> Result<()> {
        let mut prefix = Vec::with_capacity(self.emitted.len() + 1);
        prefix.push(vocab::BOS);
        prefix.extend_from_slice(&self.emitted);
        if prefix.len() >= self.model.config.max_tgt_positions {
            self.done = true;
            return Ok(());
        }
        let mask = match visibility {
            Some(m) => m.clone(),
            None => il_mask_by_segment(prefix.len(), &self.keys.segments, self.policy.wait_k),
        };
        let logits = decode_step(self.model, &prefix, &self.keys, &mask)?;
        let tok = if self.force_full_output {
            greedy_content(&logits)
        } else {
            greedy_pick(&logits)
        };
        if tok == vocab::EOS {
            self.done = true;
            return Ok(());
        }
        self.emitted.push(tok);
        self.trace.push(EventKind::Yield, tok as u64, self.reads);
        Ok(())
    }

    /// Flush the remaining buffer as a final segment and decode to EOS
    /// or the output cap.
    pub fn finish(&mut self) -> Result<StreamOutcome> {
        let din = self.model.config.frame_dim;
        let leftover = self.buffer.len() / din;
        self.trace.push(EventKind::Flush, leftover as u64, self.reads);
        if leftover > 0 && !self.done {
            self.trigger(true)?;
        }
        while !self.done && self.emitted.len() < self.max_out && self.keys.rows > 0 {
            self.decode_one(None)?;
        }
        self.trace.push(EventKind::Eos, self.reads, self.reads);
        Ok(StreamOutcome {
            hypothesis: self.emitted.clone(),
            trace: self.trace.clone(),
            boundaries: self.boundaries.clone(),
        })
    }

    pub fn anchors(&self) -> usize {
        self.keys.rows
    }

    pub fn segments(&self) -> usize {
        self.segments
    }
}

fn greedy_content(logits: &[f64]) -> u32 {
    let mut best = vocab::SPECIAL_TOKENS as u32;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in logits.iter().enumerate().skip(vocab::SPECIAL_TOKENS) {
        if v > best_v {
            best_v = v;
            best = i as u32;
        }
    }
    best
}

/// Run a policy over a finite frame stream.
pub fn run_stream(
    model: &TransducerModel,
    policy: Policy,
    frames: &[f64],
    max_out: usize,
) -> Result<StreamOutcome> {
    run_stream_opts(model, policy, frames, max_out, false)
}

pub fn run_stream_opts(
    model: &TransducerModel,
    policy: Policy,
    frames: &[f64],
    max_out: usize,
    force_full_output: bool,
) -> Result<StreamOutcome> {
    if let PolicyKind::OfflineTopK { rate } = policy.kind {
        return run_offline_topk(model, rate, frames, max_out);
    }
    let mut engine = Engine::new(model, policy, max_out)?;
    if force_full_output {
        engine = engine.force_full_output();
    }
    let din = model.config.frame_dim;
    if frames.len() % din != 0 {
        return Err(StarError::shape(
            "run-stream",
            format!("{} values over frame dim {din}", frames.len()),
        ));
    }
    for frame in frames.chunks(din) {
        if engine.done {
            break;
        }
        engine.step(frame)?;
    }
    engine.finish()
}

/// Fully observed stream: score everything, keep the top k = t_x/rate
/// anchor positions, and decode offline with full visibility.
fn run_offline_topk(
    model: &TransducerModel,
    rate: f64,
    frames: &[f64],
    max_out: usize,
) -> Result<StreamOutcome> {
    let din = model.config.frame_dim;
    let t_x = frames.len() / din;
    let mut trace = TraceLog::default();
    for i in 0..t_x {
        trace.push(EventKind::Read, i as u64, i as u64 + 1);
    }
    trace.push(EventKind::Flush, 0, t_x as u64);
    let mut hypothesis = Vec::new();
    let mut boundaries = Vec::new();
    if t_x > 0 {
        let (scores, _) = model
            .score_and_gate(frames)
            .ok_or_else(|| StarError::InvalidArgument("model has no segmenter".into()))?;
        let k = anchors_from_rate(t_x, rate);
        let picked = select_top_k(&scores, k)?;
        let mut flags = vec![false; t_x];
        for &i in &picked {
            flags[i] = true;
        }
        let mut state = EncoderState::new(model.config.enc_layers);
        let h = encode_causal(model, frames, &flags, &mut state)?;
        let d = model.config.d_model;
        let mut keys = KeySet::default();
        for (ord, &i) in picked.iter().enumerate() {
            keys.push_key(&h[i * d..(i + 1) * d], ord + 1, Some(scores[i]));
        }
        boundaries = picked;
        hypothesis =
            crate::model::greedy_decode(model, &keys, crate::model::Visibility::Full, max_out)?;
        for &tok in &hypothesis {
            trace.push(EventKind::Yield, tok as u64, t_x as u64);
        }
    }
    trace.push(EventKind::Eos, t_x as u64, t_x as u64);
    Ok(StreamOutcome { hypothesis, trace, boundaries })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn tiny_model(method: Method) -> TransducerModel {
        let cfg = ModelConfig {
            d_model: 16,
            enc_layers: 1,
            dec_layers: 1,
            heads: 2,
            ffn_dim: 32,
            vocab: 11,
            max_src_positions: 128,
            max_tgt_positions: 32,
            frame_dim: 4,
        };
        let mut m = TransducerModel::new_uncompressed(cfg, 7).unwrap();
        if method != Method::None {
            m.enable_compression(method, 3.0, 9).unwrap();
        }
        m
    }

    fn rand_stream(t: usize, d: usize, seed: u64) -> Vec<f64> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..t * d).map(|_| crate::autodiff::adam::gaussian(&mut rng) * 0.5).collect()
    }

    #[test]
    fn fixed_stride_yields_every_w_frames() {
        let model = tiny_model(Method::None);
        let frames = rand_stream(6, 4, 3);
        let out = run_stream_opts(
            &model,
            Policy::new(PolicyKind::FixedStride { width: 2 }, 1),
            &frames,
            16,
            true,
        )
        .unwrap();
        assert_eq!(out.boundaries, vec![1, 3, 5]);
        assert_eq!(out.trace.yields(), 3);
        // yields land right after frames 2, 4, 6 are read
        let steps: Vec<u64> = out
            .trace
            .events
            .iter()
            .filter(|e| e.kind == EventKind::Yield)
            .map(|e| e.step)
            .collect();
        assert_eq!(steps, vec![2, 4, 6]);
    }

    #[test]
    fn empty_stream_is_bookkeeping_only() {
        let model = tiny_model(Method::None);
        let out = run_stream(
            &model,
            Policy::new(PolicyKind::FixedStride { width: 2 }, 1),
            &[],
            8,
        )
        .unwrap();
        assert!(out.hypothesis.is_empty());
        let kinds: Vec<EventKind> = out.trace.events.iter().map(|e| e.kind).collect();
        assert_eq!(kinds, vec![EventKind::Flush, EventKind::Eos]);
    }

    #[test]
    fn wait_k_delays_first_token() {
        let model = tiny_model(Method::None);
        let frames = rand_stream(8, 4, 5);
        let out = run_stream_opts(
            &model,
            Policy::new(PolicyKind::FixedStride { width: 2 }, 3),
            &frames,
            16,
            true,
        )
        .unwrap();
        // 4 segments; first token only after 3 segments exist
        let yield_steps: Vec<u64> = out
            .trace
            .events
            .iter()
            .filter(|e| e.kind == EventKind::Yield)
            .map(|e| e.step)
            .collect();
        assert_eq!(yield_steps.first(), Some(&6));
    }

    #[test]
    fn star_policy_needs_star_model() {
        let model = tiny_model(Method::None);
        let err = Engine::new(&model, Policy::new(PolicyKind::StarThreshold { beta: 1.0 }, 1), 8);
        assert!(err.is_err());
    }

    #[test]
    fn accumulator_semantics_differ_between_star_and_cif() {
        // gates near 0.7: reset yields one boundary, residual carry two
        let star = tiny_model(Method::Star);
        let cif = tiny_model(Method::Cif);
        // engineer gates by bypassing the learned segmenter: use the same
        // frames for both, but compare boundary counts under forced gates
        // via the segmentation primitives instead.
        let gates = [0.7, 0.7, 0.7];
        let mut acc = 0.0;
        let mut star_fires = Vec::new();
        for (i, g) in gates.iter().enumerate() {
            acc += g;
            if acc >= 1.0 {
                star_fires.push(i);
                acc = 0.0;
            }
        }
        let seg = crate::segmentation::cif_segment(&gates, 1.0, crate::segmentation::TailRule::AlwaysDrop);
        assert_eq!(star_fires, vec![1]);
        assert_eq!(seg.boundary_frames(), vec![1, 2]);
        // and the engines accept their own policies
        assert!(Engine::new(&star, Policy::new(PolicyKind::StarThreshold { beta: 1.0 }, 1), 8).is_ok());
        assert!(Engine::new(&cif, Policy::new(PolicyKind::CifThreshold { beta: 1.0 }, 1), 8).is_ok());
    }

    #[test]
    fn anchor_count_matches_triggers() {
        let model = tiny_model(Method::Star);
        let frames = rand_stream(12, 4, 11);
        let policy = Policy::new(PolicyKind::StarThreshold { beta: 1.0 }, 1);
        let mut engine = Engine::new(&model, policy, 16).unwrap().force_full_output();
        for frame in frames.chunks(4) {
            engine.step(frame).unwrap();
            assert_eq!(engine.anchors(), engine.segments());
        }
        let out = engine.finish().unwrap();
        assert_eq!(out.boundaries.len(), out.trace.yields());
    }

    #[test]
    fn offline_topk_equals_manual_pipeline() {
        let model = tiny_model(Method::Star);
        let frames = rand_stream(9, 4, 13);
        let out = run_stream(
            &model,
            Policy::new(PolicyKind::OfflineTopK { rate: 3.0 }, 1),
            &frames,
            16,
        )
        .unwrap();
        // manual: score, top-k, encode flagged, gather, decode fully visible
        let (scores, _) = model.score_and_gate(&frames).unwrap();
        let picked = select_top_k(&scores, 3).unwrap();
        let mut flags = vec![false; 9];
        for &i in &picked {
            flags[i] = true;
        }
        let h = crate::model::encode_full(&model, &frames, &flags).unwrap();
        let mut keys = KeySet::default();
        for (ord, &i) in picked.iter().enumerate() {
            keys.push_key(&h[i * 16..(i + 1) * 16], ord + 1, Some(scores[i]));
        }
        let hyp =
            crate::model::greedy_decode(&model, &keys, crate::model::Visibility::Full, 16).unwrap();
        assert_eq!(out.hypothesis, hyp);
        assert_eq!(out.boundaries, picked);
    }
}
