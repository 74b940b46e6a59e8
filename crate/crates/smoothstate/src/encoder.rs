//! Observation encoders: a convolutional query encoder trained by gradient
//! descent and a key encoder of identical architecture updated only by an
//! exponential moving average of the query weights.
//!
//! Each frame is encoded independently. The conv stack (ReLU between layers)
//! feeds a linear projection to the state dimension, followed by layer
//! normalization.

use rand::Rng;

use crate::error::Error;
use crate::layers::{conv_out_side, Conv2dLayer, LayerNormLayer, Linear};
use crate::param::{ParamId, ParamStore};
use crate::tape::{Tape, VarId};
use crate::tensor::Tensor;

/// Architecture of one encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub channels: Vec<usize>,
    pub kernels: Vec<usize>,
    pub strides: Vec<usize>,
    /// State embedding dimension d.
    pub d: usize,
}

impl EncoderConfig {
    /// Desk-scale default: 3 conv layers (8, 16, 16 channels, 3x3 kernels,
    /// strides 2/2/1), d = 32.
    pub fn desk_default(in_h: usize, in_w: usize) -> Self {
        EncoderConfig {
            in_channels: 1,
            in_h,
            in_w,
            channels: vec![8, 16, 16],
            kernels: vec![3, 3, 3],
            strides: vec![2, 2, 1],
            d: 32,
        }
    }

    pub fn conv_depth(&self) -> usize {
        self.channels.len()
    }

    /// (h, w) after each conv layer; errors if any stage collapses to zero.
    pub fn validate(&self) -> Result<(usize, usize), Error> {
        if self.d < 1 {
            return Err(Error::Config("embed.dim must be >= 1".into()));
        }
        if self.channels.is_empty() {
            return Err(Error::Config("encoder needs at least one conv layer".into()));
        }
        if self.channels.len() != self.kernels.len() || self.channels.len() != self.strides.len() {
            return Err(Error::Config(format!(
                "encoder channels/kernels/strides lengths differ: {}/{}/{}",
                self.channels.len(),
                self.kernels.len(),
                self.strides.len()
            )));
        }
        let (mut h, mut w) = (self.in_h, self.in_w);
        for (i, (&k, &s)) in self.kernels.iter().zip(&self.strides).enumerate() {
            if s == 0 {
                return Err(Error::Config(format!("encoder.strides[{i}] must be >= 1")));
            }
            if k > h || k > w {
                return Err(Error::Config(format!(
                    "encoder conv layer {i}: kernel {k} exceeds input {h}x{w}"
                )));
            }
            h = conv_out_side(h, k, s);
            w = conv_out_side(w, k, s);
        }
        Ok((h, w))
    }

    pub fn flat_features(&self) -> usize {
        let (h, w) = self.validate().expect("invalid encoder config");
        self.channels.last().unwrap() * h * w
    }
}

/// One CNN encoder. Parameter names carry the given prefix so the store can
/// be partitioned per component for checkpoints and optimizers.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    convs: Vec<Conv2dLayer>,
    fc: Linear,
    ln: LayerNormLayer,
}

impl Encoder {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, cfg: EncoderConfig, rng: &mut R) -> Self {
        cfg.validate().expect("invalid encoder config");
        let mut convs = Vec::new();
        let mut c_in = cfg.in_channels;
        for (i, ((&c_out, &k), &s)) in
            cfg.channels.iter().zip(&cfg.kernels).zip(&cfg.strides).enumerate()
        {
            convs.push(Conv2dLayer::new(store, &format!("{prefix}.conv{i}"), c_in, c_out, k, s, rng));
            c_in = c_out;
        }
        let flat = cfg.flat_features();
        let fc = Linear::new(store, &format!("{prefix}.fc"), flat, cfg.d, rng);
        let ln = LayerNormLayer::new(store, &format!("{prefix}.ln"), cfg.d);
        Encoder { cfg, convs, fc, ln }
    }

    /// frames (B, F, c, H, W) -> states (B, F, d). Frames are encoded
    /// independently; no cross-frame mixing happens here.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, frames: &Tensor) -> VarId {
        assert_eq!(frames.shape.len(), 5, "encode: frames must be (B,F,c,H,W), got {:?}", frames.shape);
        let (b, f) = (frames.shape[0], frames.shape[1]);
        assert_eq!(
            &frames.shape[2..],
            &[self.cfg.in_channels, self.cfg.in_h, self.cfg.in_w],
            "encode: frame dims {:?} do not match encoder config",
            &frames.shape[2..]
        );
        let x = tape.constant(frames.clone());
        let x = tape.reshape(x, vec![b * f, self.cfg.in_channels, self.cfg.in_h, self.cfg.in_w]);
        self.encode_from(tape, store, x, b, f)
    }

    /// Same as `encode` but starting from an existing tape node
    /// of shape (B*F, c, H, W), so masking can stay on-tape upstream.
    pub fn encode_from(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        mut x: VarId,
        b: usize,
        f: usize,
    ) -> VarId {
        for conv in &self.convs {
            x = conv.forward(tape, store, x);
            x = tape.relu(x);
        }
        let flat = self.cfg.flat_features();
        let x = tape.reshape(x, vec![b * f, flat]);
        let x = self.fc.forward(tape, store, x);
        let x = self.ln.forward(tape, store, x);
        tape.reshape(x, vec![b, f, self.cfg.d])
    }

    /// Convenience for off-tape use (key path, evaluation): runs on a
    /// scratch tape and returns the value.
    pub fn encode_value(&self, store: &ParamStore, frames: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let out = self.encode(&mut tape, store, frames);
        tape.value(out).clone()
    }

    pub fn param_ids(&self, store: &ParamStore, prefix: &str) -> Vec<ParamId> {
        store.ids_with_prefix(prefix)
    }
}

/// Query encoder plus EMA-coupled key encoder.
pub struct EncoderPair {
    pub query: Encoder,
    pub key: Encoder,
    pub m: f64,
    query_ids: Vec<ParamId>,
    key_ids: Vec<ParamId>,
}

impl EncoderPair {
    /// Builds both encoders; key parameters start as exact copies of query.
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: EncoderConfig, m: f64, rng: &mut R) -> Self {
        assert!((0.0..1.0).contains(&m), "ema momentum m={m} outside [0, 1)");
        let query = Encoder::new(store, "enc_q", cfg.clone(), rng);
        let key = Encoder::new(store, "enc_k", cfg, rng);
        let query_ids = store.ids_with_prefix("enc_q.");
        let key_ids = store.ids_with_prefix("enc_k.");
        assert_eq!(query_ids.len(), key_ids.len());
        let pair = EncoderPair { query, key, m, query_ids, key_ids };
        pair.copy_query_to_key(store);
        pair
    }

    fn copy_query_to_key(&self, store: &mut ParamStore) {
        for (&q, &k) in self.query_ids.iter().zip(&self.key_ids) {
            let qv = store.value(q).clone();
            *store.value_mut(k) = qv;
        }
    }

    pub fn query_ids(&self) -> &[ParamId] {
        &self.query_ids
    }

    pub fn key_ids(&self) -> &[ParamId] {
        &self.key_ids
    }

    /// key <- m * key + (1 - m) * query, elementwise. Touches no gradients
    /// and records nothing on any tape.
    pub fn ema_update(&self, store: &mut ParamStore) {
        for (&q, &k) in self.query_ids.iter().zip(&self.key_ids) {
            let qv = store.value(q).data.clone();
            let kv = &mut store.value_mut(k).data;
            for (kx, qx) in kv.iter_mut().zip(qv) {
                *kx = self.m * *kx + (1.0 - self.m) * qx;
            }
        }
    }
}
