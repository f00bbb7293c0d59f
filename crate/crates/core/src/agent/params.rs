//! Model parameters, segment layout, and checkpoint serialization.
//!
//! All parameters live in named flat segments so that flatten/unflatten is
//! bit-exact and aggregation rules can address the weight portion and each
//! prompt vector separately.

use std::io::{Read, Write};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::agent::AgentError;
use crate::rng;

/// Segment indices. The first [`NUM_WEIGHT_SEGMENTS`] form the "weight"
/// portion `w`; prompt vectors are uploaded and aggregated separately.
pub const SEG_TOKEN_EMB: usize = 0;
pub const SEG_POS_EMB: usize = 1;
pub const SEG_VIEW_W: usize = 2;
pub const SEG_VIEW_B: usize = 3;
pub const SEG_ATTN_WU: usize = 4;
pub const SEG_ATTN_W: usize = 5;
pub const SEG_SCORER: usize = 6;
pub const SEG_CRITIC_W: usize = 7;
pub const SEG_CRITIC_B: usize = 8;
pub const SEG_STOP_FEATURE: usize = 9;
pub const SEG_PROMPT_V: usize = 10;
pub const SEG_PROMPT_L: usize = 11;
pub const SEG_PROMPT_V_IN: usize = 12;
pub const SEG_PROMPT_L_IN: usize = 13;

pub const NUM_WEIGHT_SEGMENTS: usize = 10;
pub const NUM_SEGMENTS: usize = 14;

const CHECKPOINT_MAGIC: &[u8; 4] = b"FVLN";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub vocab: usize,
    pub d_u: usize,
    pub l_max: usize,
    /// View feature dimension D.
    pub feature_dim: usize,
    pub d_h: usize,
}

impl Default for Dims {
    fn default() -> Self {
        Self {
            vocab: crate::envgen::VOCAB_SIZE,
            d_u: 32,
            l_max: crate::envgen::MAX_INSTRUCTION_LEN,
            feature_dim: 16,
            d_h: 32,
        }
    }
}

impl Dims {
    /// `(name, length)` for every segment, in layout order.
    pub fn segment_shapes(&self) -> [(&'static str, usize); NUM_SEGMENTS] {
        let d = self.feature_dim;
        [
            ("token_embeddings", self.vocab * self.d_u),
            ("positional_embeddings", self.l_max * self.d_u),
            ("view_encoder_w", self.d_h * (2 * d + self.d_h)),
            ("view_encoder_b", self.d_h),
            ("attention_w_u", self.d_u * self.d_h),
            ("attention_w", self.d_h * (self.d_u + self.d_h)),
            ("action_scorer", d * self.d_h),
            ("critic_w", self.d_h),
            ("critic_b", 1),
            ("stop_feature", d),
            ("prompt_v", self.d_h),
            ("prompt_l", self.d_u),
            ("prompt_v_in", d),
            ("prompt_l_in", self.d_u),
        ]
    }

    pub fn total_len(&self) -> usize {
        self.segment_shapes().iter().map(|(_, n)| n).sum()
    }

    pub fn weight_len(&self) -> usize {
        self.segment_shapes()[..NUM_WEIGHT_SEGMENTS].iter().map(|(_, n)| n).sum()
    }

    /// Offset of a weight segment inside the flattened weight vector.
    pub fn weight_segment_range(&self, seg: usize) -> std::ops::Range<usize> {
        assert!(seg < NUM_WEIGHT_SEGMENTS);
        let shapes = self.segment_shapes();
        let start: usize = shapes[..seg].iter().map(|(_, n)| n).sum();
        start..start + shapes[seg].1
    }
}

/// Full agent parameter set, segmented by named layer. Doubles as the
/// gradient container since gradients share the layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub dims: Dims,
    segments: Vec<Vec<f64>>,
}

impl ModelParams {
    pub fn zeros(dims: Dims) -> Self {
        let segments = dims.segment_shapes().iter().map(|&(_, n)| vec![0.0; n]).collect();
        Self { dims, segments }
    }

    pub fn seg(&self, idx: usize) -> &[f64] {
        &self.segments[idx]
    }

    pub fn seg_mut(&mut self, idx: usize) -> &mut [f64] {
        &mut self.segments[idx]
    }

    pub fn segment_name(idx: usize) -> &'static str {
        Dims::default().segment_shapes()[idx].0
    }

    /// Flatten every segment into one vector, in layout order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dims.total_len());
        for s in &self.segments {
            out.extend_from_slice(s);
        }
        out
    }

    pub fn from_flat(dims: Dims, flat: &[f64]) -> Self {
        assert_eq!(flat.len(), dims.total_len());
        let mut segments = Vec::with_capacity(NUM_SEGMENTS);
        let mut off = 0;
        for (_, n) in dims.segment_shapes() {
            segments.push(flat[off..off + n].to_vec());
            off += n;
        }
        Self { dims, segments }
    }

    /// The weight portion `w` (everything except the prompt vectors).
    pub fn weight_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dims.weight_len());
        for s in &self.segments[..NUM_WEIGHT_SEGMENTS] {
            out.extend_from_slice(s);
        }
        out
    }

    pub fn add_weight_delta(&mut self, delta: &[f64], scale: f64) {
        assert_eq!(delta.len(), self.dims.weight_len());
        let mut off = 0;
        for s in &mut self.segments[..NUM_WEIGHT_SEGMENTS] {
            for x in s.iter_mut() {
                *x += scale * delta[off];
                off += 1;
            }
        }
    }

    /// In-place `self += scale * other` over every segment.
    pub fn axpy(&mut self, scale: f64, other: &ModelParams) {
        for (a, b) in self.segments.iter_mut().zip(&other.segments) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    /// Error with the offending layer name if any coordinate is non-finite.
    pub fn check_finite(&self) -> Result<(), AgentError> {
        for (idx, s) in self.segments.iter().enumerate() {
            if s.iter().any(|x| !x.is_finite()) {
                return Err(AgentError::NonFinite { layer: Self::segment_name(idx) });
            }
        }
        Ok(())
    }

    /// Write the checkpoint: a segment-table header followed by the flat
    /// little-endian f64 array.
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        out.write_all(CHECKPOINT_MAGIC)?;
        out.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        for v in [
            self.dims.vocab,
            self.dims.d_u,
            self.dims.l_max,
            self.dims.feature_dim,
            self.dims.d_h,
        ] {
            out.write_all(&(v as u32).to_le_bytes())?;
        }
        out.write_all(&(NUM_SEGMENTS as u32).to_le_bytes())?;
        for (name, n) in self.dims.segment_shapes() {
            out.write_all(&(name.len() as u32).to_le_bytes())?;
            out.write_all(name.as_bytes())?;
            out.write_all(&(n as u64).to_le_bytes())?;
        }
        for s in &self.segments {
            for x in s {
                out.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut input: R) -> std::io::Result<Self> {
        let bad = |m: &str| std::io::Error::new(std::io::ErrorKind::InvalidData, m.to_string());
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("bad checkpoint magic"));
        }
        let mut u32buf = [0u8; 4];
        input.read_exact(&mut u32buf)?;
        if u32::from_le_bytes(u32buf) != CHECKPOINT_VERSION {
            return Err(bad("unsupported checkpoint version"));
        }
        let read_u32 = |input: &mut R| -> std::io::Result<u32> {
            let mut b = [0u8; 4];
            input.read_exact(&mut b)?;
            Ok(u32::from_le_bytes(b))
        };
        let dims = Dims {
            vocab: read_u32(&mut input)? as usize,
            d_u: read_u32(&mut input)? as usize,
            l_max: read_u32(&mut input)? as usize,
            feature_dim: read_u32(&mut input)? as usize,
            d_h: read_u32(&mut input)? as usize,
        };
        let n_segments = read_u32(&mut input)? as usize;
        if n_segments != NUM_SEGMENTS {
            return Err(bad("unexpected segment count"));
        }
        for (name, n) in dims.segment_shapes() {
            let name_len = read_u32(&mut input)? as usize;
            let mut name_buf = vec![0u8; name_len];
            input.read_exact(&mut name_buf)?;
            if name_buf != name.as_bytes() {
                return Err(bad("segment table mismatch"));
            }
            let mut b = [0u8; 8];
            input.read_exact(&mut b)?;
            if u64::from_le_bytes(b) as usize != n {
                return Err(bad("segment length mismatch"));
            }
        }
        let mut segments = Vec::with_capacity(NUM_SEGMENTS);
        for (_, n) in dims.segment_shapes() {
            let mut s = Vec::with_capacity(n);
            let mut b = [0u8; 8];
            for _ in 0..n {
                input.read_exact(&mut b)?;
                s.push(f64::from_le_bytes(b));
            }
            segments.push(s);
        }
        Ok(Self { dims, segments })
    }
}

/// Uniform(-0.08, 0.08) init for every weight matrix; prompts start at zero
/// so prompt injection is the identity until training moves them.
pub fn init_params(seed: u64, dims: Dims) -> ModelParams {
    let mut rng = rng::stream(seed, "init", 0, 0);
    let mut params = ModelParams::zeros(dims);
    for idx in 0..NUM_WEIGHT_SEGMENTS {
        for x in params.seg_mut(idx) {
            *x = rng.gen_range(-0.08..=0.08);
        }
    }
    params
}
