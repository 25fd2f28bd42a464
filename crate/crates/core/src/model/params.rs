//! Named parameter storage and its typed layout.
//!
//! Each tensor lives once in [`AlifuseParams`]; the grounded encoders reuse
//! the unimodal encoders' block ids, so self-attention and FFN weights are
//! stored a single time and only the cross-attention layers are separate.

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{GradientTape, RngStream, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug)]
pub struct LinearIds {
    pub w: ParamId,
    pub b: ParamId,
}

#[derive(Clone, Debug)]
pub struct NormIds {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Clone, Debug)]
pub struct AttentionIds {
    pub q: LinearIds,
    /// Key projection weight. A key bias would shift every score of a query
    /// row equally and cancel in the softmax, so there is none.
    pub k: ParamId,
    pub v: LinearIds,
    pub o: LinearIds,
}

#[derive(Clone, Debug)]
pub struct BlockIds {
    pub norm1: NormIds,
    pub attn: AttentionIds,
    pub norm2: NormIds,
    pub fc1: LinearIds,
    pub fc2: LinearIds,
}

/// A cross-attention layer with its own pre-norm.
#[derive(Clone, Debug)]
pub struct CrossIds {
    pub norm: NormIds,
    pub attn: AttentionIds,
}

#[derive(Clone, Debug)]
pub struct Layout {
    pub image_proj: LinearIds,
    pub image_cls: ParamId,
    pub image_mask: ParamId,
    pub image_pos: ParamId,
    /// Token table; rows `CLS_ID` and `MASK_ID` are the text `[CLS]` and
    /// `[MASK]` embeddings.
    pub text_tok: ParamId,
    pub text_pos: ParamId,
    pub image_enc: Vec<BlockIds>,
    pub text_enc: Vec<BlockIds>,
    pub image_cross: Vec<CrossIds>,
    pub text_cross: Vec<CrossIds>,
    pub image_dec: Vec<BlockIds>,
    pub image_head: LinearIds,
    pub text_dec: Vec<BlockIds>,
    pub text_head: LinearIds,
    pub fusion_fc1: LinearIds,
    pub fusion_fc2: LinearIds,
    pub log_tau: ParamId,
}

#[derive(Clone, Copy)]
enum Init {
    /// Truncated at two standard deviations.
    Normal(f64),
    Zeros,
    Ones,
    Const(f64),
}

struct Builder<'a> {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    rng: &'a mut RngStream,
}

const INIT_STD: f64 = 0.02;
/// Embedding tables, `[CLS]`/`[MASK]` vectors and positions start at unit
/// scale so that positions are visible through the first layer norm.
const EMBED_STD: f64 = 1.0;
/// The fusion MLP is small enough that 0.02 leaves the classification
/// gradient negligible next to the contrastive one.
const FUSION_STD: f64 = 0.1;

impl Builder<'_> {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> ParamId {
        let t = match init {
            Init::Normal(std) => {
                let n = shape.iter().product();
                let data = (0..n).map(|_| self.rng.trunc_normal(std)).collect();
                Tensor::new(shape.to_vec(), data).expect("positive shape")
            }
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
            Init::Const(c) => Tensor::full(shape, c),
        };
        self.names.push(name);
        self.tensors.push(t);
        ParamId(self.tensors.len() - 1)
    }

    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> LinearIds {
        self.linear_std(name, fan_in, fan_out, INIT_STD)
    }

    fn linear_std(&mut self, name: &str, fan_in: usize, fan_out: usize, std: f64) -> LinearIds {
        LinearIds {
            w: self.add(format!("{name}.w"), &[fan_in, fan_out], Init::Normal(std)),
            b: self.add(format!("{name}.b"), &[fan_out], Init::Zeros),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> NormIds {
        NormIds {
            gamma: self.add(format!("{name}.gamma"), &[d], Init::Ones),
            beta: self.add(format!("{name}.beta"), &[d], Init::Zeros),
        }
    }

    fn attention(&mut self, name: &str, d: usize) -> AttentionIds {
        AttentionIds {
            q: self.linear(&format!("{name}.q"), d, d),
            k: self.add(format!("{name}.k.w"), &[d, d], Init::Normal(INIT_STD)),
            v: self.linear(&format!("{name}.v"), d, d),
            o: self.linear(&format!("{name}.o"), d, d),
        }
    }

    fn block(&mut self, name: &str, d: usize, hidden: usize) -> BlockIds {
        BlockIds {
            norm1: self.norm(&format!("{name}.norm1"), d),
            attn: self.attention(&format!("{name}.attn"), d),
            norm2: self.norm(&format!("{name}.norm2"), d),
            fc1: self.linear(&format!("{name}.fc1"), d, hidden),
            fc2: self.linear(&format!("{name}.fc2"), hidden, d),
        }
    }

    fn stack(&mut self, name: &str, layers: usize, d: usize, hidden: usize) -> Vec<BlockIds> {
        (0..layers).map(|i| self.block(&format!("{name}.{i}"), d, hidden)).collect()
    }

    fn cross(&mut self, name: &str, layers: usize, d: usize) -> Vec<CrossIds> {
        (0..layers)
            .map(|i| CrossIds {
                norm: self.norm(&format!("{name}.{i}.norm"), d),
                attn: self.attention(&format!("{name}.{i}.attn"), d),
            })
            .collect()
    }
}

/// Every trainable tensor of the network.
#[derive(Clone, Debug)]
pub struct AlifuseParams {
    config: ModelConfig,
    names: Vec<String>,
    tensors: Vec<Tensor>,
    layout: Layout,
}

/// Parameters recorded on a tape for one forward pass.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl std::ops::Index<ParamId> for Bound {
    type Output = Var;

    fn index(&self, id: ParamId) -> &Var {
        &self.vars[id.0]
    }
}

impl AlifuseParams {
    /// Truncated-normal weights (std 0.02; 1 for embeddings, 0.1 for the
    /// fusion MLP), zero biases, unit norm gains and `log_tau = ln(tau_init)`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = RngStream::new(seed);
        let c = config;
        let d = c.d_model;
        let hidden = d * c.ffn_mult;
        let mut b = Builder { names: Vec::new(), tensors: Vec::new(), rng: &mut rng };
        let layout = Layout {
            image_proj: b.linear("image.proj", c.patch_voxels(), d),
            image_cls: b.add("image.cls".into(), &[1, d], Init::Normal(EMBED_STD)),
            image_mask: b.add("image.mask".into(), &[1, d], Init::Normal(EMBED_STD)),
            image_pos: b.add("image.pos".into(), &[c.num_patches() + 1, d], Init::Normal(EMBED_STD)),
            text_tok: b.add("text.tok".into(), &[c.vocab_size, d], Init::Normal(EMBED_STD)),
            text_pos: b.add("text.pos".into(), &[c.max_len, d], Init::Normal(EMBED_STD)),
            image_enc: b.stack("image_enc", c.n_enc_layers, d, hidden),
            text_enc: b.stack("text_enc", c.n_enc_layers, d, hidden),
            image_cross: b.cross("image_cross", c.n_enc_layers, d),
            text_cross: b.cross("text_cross", c.n_enc_layers, d),
            image_dec: b.stack("image_dec", c.n_dec_layers, d, hidden),
            image_head: b.linear("image_dec.head", d, c.patch_voxels()),
            text_dec: b.stack("text_dec", c.n_dec_layers, d, hidden),
            text_head: b.linear("text_dec.head", d, c.vocab_size),
            fusion_fc1: b.linear_std("fusion.fc1", 2 * d, c.fusion_hidden, FUSION_STD),
            fusion_fc2: b.linear_std("fusion.fc2", c.fusion_hidden, c.n_classes, FUSION_STD),
            log_tau: b.add("log_tau".into(), &[1], Init::Const(c.tau_init.ln())),
        };
        let Builder { names, tensors, .. } = b;
        Ok(AlifuseParams { config: config.clone(), names, tensors, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::numel).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.names.iter().position(|n| n == name).map(move |i| &mut self.tensors[i])
    }

    /// Replaces all tensors, e.g. from a checkpoint. Names and shapes must
    /// match this layout exactly.
    pub fn load_tensors(&mut self, named: Vec<(String, Tensor)>) -> Result<()> {
        if named.len() != self.tensors.len() {
            return Err(Error::Compatibility(format!(
                "expected {} parameter tensors, found {}",
                self.tensors.len(),
                named.len()
            )));
        }
        for (i, (name, t)) in named.iter().enumerate() {
            if *name != self.names[i] || t.shape() != self.tensors[i].shape() {
                return Err(Error::Compatibility(format!(
                    "parameter {i}: expected {} {:?}, found {name} {:?}",
                    self.names[i],
                    self.tensors[i].shape(),
                    t.shape()
                )));
            }
        }
        self.tensors = named.into_iter().map(|(_, t)| t).collect();
        Ok(())
    }

    /// Concatenation of every parameter value.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data().iter().copied()).collect()
    }

    pub fn unflatten(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_scalars() {
            return Err(Error::dim(format!("{} values for {} parameters", flat.len(), self.num_scalars())));
        }
        let mut offset = 0;
        for t in &mut self.tensors {
            let n = t.numel();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// Records every tensor as a trainable leaf.
    pub fn bind(&self, tape: &mut GradientTape) -> Bound {
        Bound { vars: self.tensors.iter().map(|t| tape.param(t.clone())).collect() }
    }

    /// Records every tensor as a constant (no gradients).
    pub fn bind_frozen(&self, tape: &mut GradientTape) -> Bound {
        Bound { vars: self.tensors.iter().map(|t| tape.constant(t.clone())).collect() }
    }

    /// Binds a flat parameter vector that already lives on the tape as a
    /// single leaf, slicing it into the layout's tensors.
    pub fn bind_flat(&self, tape: &mut GradientTape, flat: Var) -> Result<Bound> {
        let total = self.num_scalars();
        if tape.shape(flat) != [1, total] {
            return Err(Error::dim(format!("flat parameter leaf must be 1x{total}")));
        }
        let mut vars = Vec::with_capacity(self.tensors.len());
        let mut offset = 0;
        for t in &self.tensors {
            let n = t.numel();
            let piece = tape.slice_cols(flat, offset, n)?;
            vars.push(reshape_var(tape, piece, t.shape())?);
            offset += n;
        }
        Ok(Bound { vars })
    }
}

/// Reshape through a row gather: a `1×n` slice becomes `r×c` by viewing it
/// as a table of `r` rows.
fn reshape_var(tape: &mut GradientTape, piece: Var, shape: &[usize]) -> Result<Var> {
    match shape {
        [_] => Ok(piece),
        [r, c] => {
            let rows: Vec<Var> = (0..*r).map(|i| tape.slice_cols(piece, i * c, *c)).collect::<Result<_>>()?;
            tape.concat_rows(&rows)
        }
        s => Err(Error::dim(format!("unsupported parameter rank {s:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            n_enc_layers: 1,
            n_dec_layers: 1,
            patch_size: 2,
            volume_side: 4,
            vocab_size: 12,
            max_len: 6,
            fusion_hidden: 8,
            ..ModelConfig::desk()
        }
    }

    #[test]
    fn init_is_seeded() {
        let a = AlifuseParams::init(&tiny(), 1).unwrap();
        let b = AlifuseParams::init(&tiny(), 1).unwrap();
        let c = AlifuseParams::init(&tiny(), 2).unwrap();
        assert_eq!(a.tensors(), b.tensors());
        assert_ne!(a.tensors(), c.tensors());
    }

    #[test]
    fn names_are_unique_and_shapes_follow_config() {
        let p = AlifuseParams::init(&tiny(), 0).unwrap();
        let mut names = p.names().to_vec();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), p.len());
        assert_eq!(p.get(p.layout().image_pos).shape(), &[9, 8]);
        assert_eq!(p.get(p.layout().text_tok).shape(), &[12, 8]);
        assert_eq!(p.get(p.layout().image_head.w).shape(), &[8, 8]);
        assert_eq!(p.get(p.layout().fusion_fc1.w).shape(), &[16, 8]);
        assert!((p.get(p.layout().log_tau).data()[0] - 0.07f64.ln()).abs() < 1e-15);
        // weights bounded by the truncation at two deviations
        assert!(p.get(p.layout().image_proj.w).data().iter().all(|v| v.abs() <= 0.04));
        assert!(p.get(p.layout().image_proj.b).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grounded_encoders_have_no_private_block_weights() {
        let p = AlifuseParams::init(&tiny(), 0).unwrap();
        let grounded_only: Vec<&String> = p.names().iter().filter(|n| n.contains("grounded")).collect();
        assert!(grounded_only.is_empty());
        assert_eq!(p.layout().image_cross.len(), 1);
    }

    #[test]
    fn flatten_roundtrip_and_flat_binding() {
        let mut p = AlifuseParams::init(&tiny(), 3).unwrap();
        let flat = p.flatten();
        p.unflatten(&flat).unwrap();
        assert_eq!(p.flatten(), flat);

        let mut tape = GradientTape::new();
        let leaf = tape.param(Tensor::matrix(1, flat.len(), flat).unwrap());
        let bound = p.bind_flat(&mut tape, leaf).unwrap();
        for (i, t) in p.tensors().iter().enumerate() {
            assert_eq!(tape.value(bound.vars()[i]).data(), t.data());
        }
    }
}
