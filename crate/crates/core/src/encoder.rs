//! Pre-LN transformer encoder shared by the camera, lidar and fusion stages,
//! together with the class-token / positional-embedding front end.

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{Error, Result};
use crate::nn::{activate, Activation, Forward, Init, LayerNorm, Linear, ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub depth: usize,
    pub width: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub dropout: f64,
    pub activation: Activation,
}

impl Default for EncoderConfig {
    /// ViT-Base geometry at width 768.
    fn default() -> Self {
        Self {
            depth: 12,
            width: 768,
            heads: 12,
            mlp_hidden: 3072,
            dropout: 0.3,
            activation: Activation::Gelu,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "encoder width {} must be a positive multiple of heads {}",
                self.width, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.mlp_hidden == 0 {
            return Err(Error::Config("encoder mlp_hidden must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

/// A `S × D` token matrix on the tape. When `has_class_token` is set, row 0
/// is the class token.
#[derive(Clone, Copy, Debug)]
pub struct TokenSequence {
    pub var: Var,
    pub has_class_token: bool,
}

impl TokenSequence {
    pub fn len(&self, f: &Forward) -> usize {
        f.tape.shape(self.var).0
    }

    pub fn width(&self, f: &Forward) -> usize {
        f.tape.shape(self.var).1
    }
}

/// Learned input projection, class token and positional table.
#[derive(Clone, Debug)]
pub struct TokenEmbedding {
    pub projection: Linear,
    pub class_token: ParamId,
    pub positions: ParamId,
    pub width: usize,
    /// Positional table length; sequences of up to `max_len - 1` features fit.
    pub max_len: usize,
}

impl TokenEmbedding {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        in_dim: usize,
        width: usize,
        max_tokens: usize,
    ) -> Self {
        let projection = Linear::new(store, init, &format!("{name}.projection"), in_dim, width);
        let class_token = store.add(format!("{name}.class_token"), init.trunc_normal(1, width), true);
        let positions = store.add(
            format!("{name}.positions"),
            init.trunc_normal(max_tokens + 1, width),
            true,
        );
        Self {
            projection,
            class_token,
            positions,
            width,
            max_len: max_tokens + 1,
        }
    }

    /// `out[0] = class + pos[0]`, `out[i] = projection(features[i-1]) + pos[i]`.
    pub fn embed(&self, f: &mut Forward, features: Var) -> Result<TokenSequence> {
        let (s, d_in) = f.tape.shape(features);
        if d_in != self.projection.in_dim {
            return Err(Error::Config(format!(
                "feature width {d_in} does not match projection input {}",
                self.projection.in_dim
            )));
        }
        if self.projection.out_dim != self.width {
            return Err(Error::Config(format!(
                "projection output {} does not match class token width {}",
                self.projection.out_dim, self.width
            )));
        }
        if s + 1 > self.max_len {
            return Err(Error::Contract(format!(
                "sequence of {s} tokens exceeds positional table of {}",
                self.max_len
            )));
        }
        let projected = self.projection.forward(f, features);
        let cls = f.param(self.class_token);
        let tokens = f.tape.concat_rows(&[cls, projected]);
        let table = f.param(self.positions);
        let pos = f.tape.slice_rows(table, 0, s + 1);
        let var = f.tape.add(tokens, pos);
        Ok(TokenSequence {
            var,
            has_class_token: true,
        })
    }
}

#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub norm_attn: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub out: Linear,
    pub norm_mlp: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl EncoderBlock {
    fn new(store: &mut ParamStore, init: &mut Init, name: &str, cfg: &EncoderConfig) -> Self {
        let d = cfg.width;
        Self {
            norm_attn: LayerNorm::new(store, &format!("{name}.norm_attn"), d),
            query: Linear::new(store, init, &format!("{name}.query"), d, d),
            key: Linear::new(store, init, &format!("{name}.key"), d, d),
            value: Linear::new(store, init, &format!("{name}.value"), d, d),
            out: Linear::new(store, init, &format!("{name}.out"), d, d),
            norm_mlp: LayerNorm::new(store, &format!("{name}.norm_mlp"), d),
            fc1: Linear::new(store, init, &format!("{name}.fc1"), d, cfg.mlp_hidden),
            fc2: Linear::new(store, init, &format!("{name}.fc2"), cfg.mlp_hidden, d),
        }
    }

    /// Scaled dot-product multi-head self-attention.
    pub fn attention(&self, f: &mut Forward, x: Var, cfg: &EncoderConfig) -> Var {
        let q = self.query.forward(f, x);
        let k = self.key.forward(f, x);
        let v = self.value.forward(f, x);
        let dh = cfg.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads = Vec::with_capacity(cfg.heads);
        for h in 0..cfg.heads {
            let (qh, kh, vh) = if cfg.heads == 1 {
                (q, k, v)
            } else {
                (
                    f.tape.slice_cols(q, h * dh, dh),
                    f.tape.slice_cols(k, h * dh, dh),
                    f.tape.slice_cols(v, h * dh, dh),
                )
            };
            let logits = f.tape.matmul_t(qh, kh, false, true);
            let logits = f.tape.scale(logits, scale);
            let weights = f.tape.softmax(logits);
            let weights = f.dropout(weights, cfg.dropout);
            heads.push(f.tape.matmul(weights, vh));
        }
        let merged = if heads.len() == 1 {
            heads[0]
        } else {
            f.tape.concat_cols(&heads)
        };
        self.out.forward(f, merged)
    }

    pub fn forward(&self, f: &mut Forward, z: Var, cfg: &EncoderConfig) -> Var {
        let n = self.norm_attn.forward(f, z);
        let a = self.attention(f, n, cfg);
        let z = f.tape.add(a, z);
        let n = self.norm_mlp.forward(f, z);
        let hdn = self.fc1.forward(f, n);
        let hdn = activate(f, hdn, cfg.activation);
        let hdn = f.dropout(hdn, cfg.dropout);
        let m = self.fc2.forward(f, hdn);
        f.tape.add(m, z)
    }
}

#[derive(Clone, Debug)]
pub struct TransformerEncoder {
    pub cfg: EncoderConfig,
    pub blocks: Vec<EncoderBlock>,
    pub final_norm: LayerNorm,
}

impl TransformerEncoder {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, cfg: &EncoderConfig) -> Result<Self> {
        cfg.validate()?;
        let blocks = (0..cfg.depth)
            .map(|i| EncoderBlock::new(store, init, &format!("{name}.block{i}"), cfg))
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            blocks,
            final_norm: LayerNorm::new(store, &format!("{name}.final_norm"), cfg.width),
        })
    }

    pub fn encode(&self, f: &mut Forward, z0: TokenSequence) -> Result<TokenSequence> {
        let width = z0.width(f);
        if width != self.cfg.width {
            return Err(Error::Config(format!(
                "token width {width} does not match encoder width {}",
                self.cfg.width
            )));
        }
        let mut z = z0.var;
        for b in &self.blocks {
            z = b.forward(f, z, &self.cfg);
        }
        Ok(TokenSequence {
            var: z,
            has_class_token: z0.has_class_token,
        })
    }

    /// `LN(z[0])`, the pooled representation.
    pub fn readout(&self, f: &mut Forward, z: TokenSequence) -> Result<Var> {
        if !z.has_class_token {
            return Err(Error::Contract("readout needs a class token".into()));
        }
        let cls = f.tape.slice_rows(z.var, 0, 1);
        Ok(self.final_norm.forward(f, cls))
    }

    /// Layer-normalised tokens: `(non-class sequence, class readout)`.
    pub fn finish(&self, f: &mut Forward, z: TokenSequence) -> Result<(Var, Var)> {
        if !z.has_class_token {
            return Err(Error::Contract("finish needs a class token".into()));
        }
        let s = z.len(f);
        let normed = self.final_norm.forward(f, z.var);
        let readout = f.tape.slice_rows(normed, 0, 1);
        let seq = f.tape.slice_rows(normed, 1, s - 1);
        Ok((seq, readout))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Mode;
    use crate::tensor::Matrix;

    fn small_cfg(depth: usize) -> EncoderConfig {
        EncoderConfig {
            depth,
            width: 8,
            heads: 2,
            mlp_hidden: 16,
            dropout: 0.0,
            activation: Activation::Gelu,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = small_cfg(1);
        c.heads = 3;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = small_cfg(1);
        c.dropout = 1.0;
        assert!(c.validate().is_err());
        assert!(small_cfg(1).validate().is_ok());
    }

    #[test]
    fn zero_projection_leaves_bias() {
        let mut store = ParamStore::new();
        let mut init = Init::new(0, 0.02);
        let emb = TokenEmbedding::new(&mut store, &mut init, "e", 3, 4, 8);
        *store.get_mut(emb.projection.weight) = Matrix::zeros(3, 4);
        *store.get_mut(emb.projection.bias) = Matrix::row_vector(vec![1.0, 2.0, 3.0, 4.0]);
        *store.get_mut(emb.positions) = Matrix::zeros(9, 4);
        let mut f = Forward::new(&store, Mode::Eval, 0);
        let x = f.tape.constant(Matrix::filled(5, 3, 7.0));
        let z = emb.embed(&mut f, x).unwrap();
        let v = f.tape.value(z.var);
        assert_eq!(v.rows(), 6);
        for i in 1..6 {
            assert_eq!(v.row(i), &[1.0, 2.0, 3.0, 4.0]);
        }
        assert_eq!(v.row(0), store.get(emb.class_token).data());
    }

    #[test]
    fn identity_projection_copies_feature() {
        let mut store = ParamStore::new();
        let mut init = Init::new(0, 0.02);
        let emb = TokenEmbedding::new(&mut store, &mut init, "e", 3, 3, 4);
        let mut eye = Matrix::zeros(3, 3);
        for i in 0..3 {
            eye.set(i, i, 1.0);
        }
        *store.get_mut(emb.projection.weight) = eye;
        *store.get_mut(emb.positions) = Matrix::zeros(5, 3);
        let mut f = Forward::new(&store, Mode::Eval, 0);
        let x = f.tape.constant(Matrix::row_vector(vec![0.3, -1.0, 2.5]));
        let z = emb.embed(&mut f, x).unwrap();
        assert_eq!(f.tape.value(z.var).row(1), &[0.3, -1.0, 2.5]);
    }

    #[test]
    fn embed_rejects_overlong_sequences_and_bad_widths() {
        let mut store = ParamStore::new();
        let mut init = Init::new(0, 0.02);
        let emb = TokenEmbedding::new(&mut store, &mut init, "e", 3, 4, 2);
        let mut f = Forward::new(&store, Mode::Eval, 0);
        let x = f.tape.constant(Matrix::zeros(3, 3));
        assert!(matches!(emb.embed(&mut f, x), Err(Error::Contract(_))));
        let x = f.tape.constant(Matrix::zeros(1, 5));
        assert!(matches!(emb.embed(&mut f, x), Err(Error::Config(_))));
    }

    #[test]
    fn camera_scale_sequence_length() {
        let mut store = ParamStore::new();
        let mut init = Init::new(0, 0.02);
        let emb = TokenEmbedding::new(&mut store, &mut init, "e", 16, 768, 1024);
        let mut f = Forward::inference(&store);
        let x = f.tape.constant(Matrix::zeros(49, 16));
        let z = emb.embed(&mut f, x).unwrap();
        assert_eq!(f.tape.shape(z.var), (50, 768));
    }

    #[test]
    fn empty_stack_is_identity_and_readout_is_layer_norm() {
        let mut store = ParamStore::new();
        let mut init = Init::new(1, 0.02);
        let enc = TransformerEncoder::new(&mut store, &mut init, "enc", &small_cfg(0)).unwrap();
        let mut f = Forward::new(&store, Mode::Eval, 0);
        let m = init.trunc_normal(4, 8);
        let x = f.tape.constant(m.clone());
        let z = TokenSequence { var: x, has_class_token: true };
        let out = enc.encode(&mut f, z).unwrap();
        assert_eq!(f.tape.value(out.var), &m);
        let r = enc.readout(&mut f, out).unwrap();
        let row = m.row(0);
        let mean = row.iter().sum::<f64>() / 8.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 8.0;
        for (o, v) in f.tape.value(r).data().iter().zip(row) {
            assert!((o - (v - mean) / (var + crate::nn::LN_EPS).sqrt()).abs() < 1e-12);
        }
    }

    #[test]
    fn readout_of_constant_token_is_bias() {
        let mut store = ParamStore::new();
        let mut init = Init::new(1, 0.02);
        let enc = TransformerEncoder::new(&mut store, &mut init, "enc", &small_cfg(0)).unwrap();
        *store.get_mut(enc.final_norm.bias) = Matrix::row_vector((0..8).map(f64::from).collect());
        let mut f = Forward::new(&store, Mode::Eval, 0);
        let x = f.tape.constant(Matrix::filled(2, 8, 3.0));
        let r = enc
            .readout(&mut f, TokenSequence { var: x, has_class_token: true })
            .unwrap();
        assert_eq!(f.tape.value(r).data(), store.get(enc.final_norm.bias).data());
        assert_eq!(f.tape.shape(r), (1, 8));
    }

    #[test]
    fn readout_requires_class_token() {
        let mut store = ParamStore::new();
        let mut init = Init::new(1, 0.02);
        let enc = TransformerEncoder::new(&mut store, &mut init, "enc", &small_cfg(1)).unwrap();
        let mut f = Forward::new(&store, Mode::Eval, 0);
        let x = f.tape.constant(Matrix::zeros(2, 8));
        let r = enc.readout(&mut f, TokenSequence { var: x, has_class_token: false });
        assert!(matches!(r, Err(Error::Contract(_))));
        let narrow = f.tape.constant(Matrix::zeros(4, 4));
        let r = enc.encode(&mut f, TokenSequence { var: narrow, has_class_token: true });
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn single_token_attention_is_value_then_output_projection() {
        let mut store = ParamStore::new();
        let mut init = Init::new(2, 0.3);
        let enc = TransformerEncoder::new(&mut store, &mut init, "enc", &small_cfg(1)).unwrap();
        let blk = &enc.blocks[0];
        let x = init.trunc_normal(1, 8);
        let mut f = Forward::new(&store, Mode::Eval, 0);
        let xv = f.tape.constant(x.clone());
        let n = blk.norm_attn.forward(&mut f, xv);
        let att = blk.attention(&mut f, n, &enc.cfg);
        let v = blk.value.forward(&mut f, n);
        let expect = blk.out.forward(&mut f, v);
        let (a, e) = (f.tape.value(att), f.tape.value(expect));
        for (p, q) in a.data().iter().zip(e.data()) {
            assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn zeroed_branches_make_encoder_identity() {
        let mut store = ParamStore::new();
        let mut init = Init::new(3, 0.02);
        let enc = TransformerEncoder::new(&mut store, &mut init, "enc", &small_cfg(2)).unwrap();
        for b in &enc.blocks {
            for l in [&b.query, &b.key, &b.value, &b.out, &b.fc1, &b.fc2] {
                let (r, c) = store.get(l.weight).shape();
                *store.get_mut(l.weight) = Matrix::zeros(r, c);
                let (r, c) = store.get(l.bias).shape();
                *store.get_mut(l.bias) = Matrix::zeros(r, c);
            }
        }
        let m = init.trunc_normal(5, 8);
        let mut f = Forward::new(&store, Mode::Eval, 0);
        let x = f.tape.constant(m.clone());
        let out = enc.encode(&mut f, TokenSequence { var: x, has_class_token: true }).unwrap();
        assert_eq!(f.tape.value(out.var), &m);
    }
}
