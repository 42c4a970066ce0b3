//! Victim classifier architectures exposing logits and the last-layer
//! feature, plus bit-exact checkpoint serialization.
//!
//! All three architectures share feature width 48 so collapse metrics and
//! attacks are comparable across models. The last-layer feature is the
//! post-activation input of the final linear layer; logits are exactly
//! `W·h + b`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::binio::{
    meta_get, meta_parse, metadata_doc, parse_metadata, ContainerReader, ContainerWriter,
};
use crate::dataset::Image;
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"UAPCKPT1";

pub const FEATURE_DIM: usize = 48;
const CONV1_FILTERS: usize = 8;
const CONV2_FILTERS: usize = 16;
const CONV_KERNEL: usize = 3;
const MLP_HIDDEN: usize = 128;
const PATCH: usize = 4;
const EMBED_DIM: usize = 32;

/// Inference batches are processed in chunks of this many samples.
const EVAL_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Arch {
    Convnet,
    Mlp,
    Attnnet,
}

impl Arch {
    pub const ALL: [Arch; 3] = [Arch::Convnet, Arch::Mlp, Arch::Attnnet];

    pub fn tag(self) -> &'static str {
        match self {
            Arch::Convnet => "convnet",
            Arch::Mlp => "mlp",
            Arch::Attnnet => "attnnet",
        }
    }

    pub fn parse(s: &str) -> Result<Arch> {
        match s {
            "convnet" => Ok(Arch::Convnet),
            "mlp" => Ok(Arch::Mlp),
            "attnnet" => Ok(Arch::Attnnet),
            other => Err(Error::UnknownArch(other.to_string())),
        }
    }
}

/// Training bookkeeping carried inside a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainMeta {
    pub epochs: usize,
    pub final_train_acc: f64,
    pub seed: u64,
}

impl Default for TrainMeta {
    fn default() -> Self {
        TrainMeta {
            epochs: 0,
            final_train_acc: 0.0,
            seed: 0,
        }
    }
}

/// A layered classifier. Parameters are held in a fixed, named order so
/// every iteration, update, and serialization is deterministic.
#[derive(Clone, Debug)]
pub struct Model {
    arch: Arch,
    num_classes: usize,
    input_dims: [usize; 3],
    params: Vec<(String, Tensor)>,
    init_seed: u64,
}

/// Batch-level predictions: anything that maps images to class indices.
/// Lets the evaluation metrics run against stub models in tests.
pub trait Classifier {
    fn num_classes(&self) -> usize;
    fn predict_images(&self, images: &[Image]) -> Result<Vec<usize>>;
}

impl Classifier for Model {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn predict_images(&self, images: &[Image]) -> Result<Vec<usize>> {
        let mut preds = Vec::with_capacity(images.len());
        for chunk in images.chunks(EVAL_CHUNK) {
            let x = stack_images(chunk)?;
            let (logits, _) = self.forward_with_features(&x)?;
            preds.extend(argmax_rows(&logits));
        }
        Ok(preds)
    }
}

fn stack_images(images: &[Image]) -> Result<Tensor> {
    let [c, h, w] = images.first().ok_or(Error::EmptyDataset)?.dims();
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        data.extend_from_slice(img.pixels().data());
    }
    Tensor::new(vec![images.len(), c, h, w], data)
}

/// Argmax per row; ties break to the lowest class index.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = *logits.dims().last().expect("rank >= 1");
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

struct ParamSpec {
    name: &'static str,
    dims: Vec<usize>,
    fan_in: usize,
}

fn conv_out(side: usize) -> usize {
    // conv k3 s1 p0 then 2×2 max pool, twice
    let a = side - CONV_KERNEL + 1;
    let a = (a - 2) / 2 + 1;
    let b = a - CONV_KERNEL + 1;
    (b - 2) / 2 + 1
}

fn param_specs(arch: Arch, num_classes: usize, input: [usize; 3]) -> Result<Vec<ParamSpec>> {
    let [c, h, w] = input;
    let spec = |name, dims: Vec<usize>, fan_in| ParamSpec { name, dims, fan_in };
    let mut v = Vec::new();
    match arch {
        Arch::Convnet => {
            if h < 12 || w < 12 {
                return Err(Error::InvalidArgument(format!(
                    "convnet needs input side >= 12, got {h}x{w}"
                )));
            }
            let flat = CONV2_FILTERS * conv_out(h) * conv_out(w);
            let k2 = CONV_KERNEL * CONV_KERNEL;
            v.push(spec("conv1.weight", vec![CONV1_FILTERS, c, CONV_KERNEL, CONV_KERNEL], c * k2));
            v.push(spec("conv1.bias", vec![CONV1_FILTERS], 0));
            v.push(spec(
                "conv2.weight",
                vec![CONV2_FILTERS, CONV1_FILTERS, CONV_KERNEL, CONV_KERNEL],
                CONV1_FILTERS * k2,
            ));
            v.push(spec("conv2.bias", vec![CONV2_FILTERS], 0));
            v.push(spec("fc1.weight", vec![FEATURE_DIM, flat], flat));
            v.push(spec("fc1.bias", vec![FEATURE_DIM], 0));
        }
        Arch::Mlp => {
            let flat = c * h * w;
            v.push(spec("fc1.weight", vec![MLP_HIDDEN, flat], flat));
            v.push(spec("fc1.bias", vec![MLP_HIDDEN], 0));
            v.push(spec("fc2.weight", vec![FEATURE_DIM, MLP_HIDDEN], MLP_HIDDEN));
            v.push(spec("fc2.bias", vec![FEATURE_DIM], 0));
        }
        Arch::Attnnet => {
            if h % PATCH != 0 || w % PATCH != 0 {
                return Err(Error::InvalidArgument(format!(
                    "attnnet needs sides divisible by {PATCH}, got {h}x{w}"
                )));
            }
            let patch_dim = c * PATCH * PATCH;
            v.push(spec("embed.weight", vec![EMBED_DIM, patch_dim], patch_dim));
            v.push(spec("embed.bias", vec![EMBED_DIM], 0));
            for name in ["attn.q", "attn.k", "attn.v", "attn.o"] {
                v.push(ParamSpec {
                    name: match name {
                        "attn.q" => "attn.q.weight",
                        "attn.k" => "attn.k.weight",
                        "attn.v" => "attn.v.weight",
                        _ => "attn.o.weight",
                    },
                    dims: vec![EMBED_DIM, EMBED_DIM],
                    fan_in: EMBED_DIM,
                });
                v.push(ParamSpec {
                    name: match name {
                        "attn.q" => "attn.q.bias",
                        "attn.k" => "attn.k.bias",
                        "attn.v" => "attn.v.bias",
                        _ => "attn.o.bias",
                    },
                    dims: vec![EMBED_DIM],
                    fan_in: 0,
                });
            }
            v.push(spec("fc1.weight", vec![FEATURE_DIM, EMBED_DIM], EMBED_DIM));
            v.push(spec("fc1.bias", vec![FEATURE_DIM], 0));
        }
    }
    v.push(spec("head.weight", vec![num_classes, FEATURE_DIM], FEATURE_DIM));
    v.push(spec("head.bias", vec![num_classes], 0));
    Ok(v)
}

impl Model {
    /// Build with the default 1×24×24 input.
    pub fn build(arch: Arch, num_classes: usize, seed: u64) -> Result<Model> {
        Model::build_for_input(arch, num_classes, seed, [1, 24, 24])
    }

    pub fn build_for_input(
        arch: Arch,
        num_classes: usize,
        seed: u64,
        input_dims: [usize; 3],
    ) -> Result<Model> {
        if num_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        let specs = param_specs(arch, num_classes, input_dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(specs.len());
        for s in specs {
            // He-style uniform for weights, zeros for biases
            let t = if s.fan_in > 0 {
                let limit = (6.0 / s.fan_in as f64).sqrt();
                Tensor::uniform(&s.dims, -limit, limit, &mut rng)
            } else {
                Tensor::zeros(&s.dims)
            };
            params.push((s.name.to_string(), t));
        }
        Ok(Model {
            arch,
            num_classes,
            input_dims,
            params,
            init_seed: seed,
        })
    }

    pub fn arch(&self) -> Arch {
        self.arch
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn feature_dim(&self) -> usize {
        FEATURE_DIM
    }

    pub fn input_dims(&self) -> [usize; 3] {
        self.input_dims
    }

    pub fn init_seed(&self) -> u64 {
        self.init_seed
    }

    pub fn id(&self) -> String {
        format!("{}-s{}", self.arch.tag(), self.init_seed)
    }

    pub fn params(&self) -> &[(String, Tensor)] {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut Vec<(String, Tensor)> {
        &mut self.params
    }

    /// The final linear layer `(W[K,d], b[K])`.
    pub fn final_layer(&self) -> (&Tensor, &Tensor) {
        let n = self.params.len();
        (&self.params[n - 2].1, &self.params[n - 1].1)
    }

    fn param_index(&self, name: &str) -> usize {
        self.params
            .iter()
            .position(|(n, _)| n == name)
            .expect("parameter names are fixed per arch")
    }

    /// Register every parameter on `tape` in declaration order.
    pub fn params_on_tape(&self, tape: &Tape, requires_grad: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|(_, t)| {
                let t = if requires_grad {
                    t.clone().with_grad()
                } else {
                    t.clone()
                };
                tape.leaf(t)
            })
            .collect()
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let [c, h, w] = self.input_dims;
        match x.dims() {
            [_, xc, xh, xw] if *xc == c && *xh == h && *xw == w => Ok(()),
            other => Err(Error::ShapeMismatch {
                op: "forward",
                lhs: other.to_vec(),
                rhs: vec![0, c, h, w],
            }),
        }
    }

    /// Build the forward graph for `x` on `tape`, returning
    /// `(logits[N,K], features[N,d])`. `pvars` must come from
    /// [`Model::params_on_tape`].
    pub fn forward_on_tape(&self, tape: &Tape, pvars: &[Var], x: Var) -> Result<(Var, Var)> {
        self.check_input(&tape.value(x))?;
        let p = |name: &str| pvars[self.param_index(name)];
        let features = match self.arch {
            Arch::Convnet => {
                let c1 = tape.conv2d(x, p("conv1.weight"), 1, 0)?;
                let c1 = tape.channel_bias(c1, p("conv1.bias"))?;
                let r1 = tape.relu(c1)?;
                let p1 = tape.max_pool2d(r1, 2, 2)?;
                let c2 = tape.conv2d(p1, p("conv2.weight"), 1, 0)?;
                let c2 = tape.channel_bias(c2, p("conv2.bias"))?;
                let r2 = tape.relu(c2)?;
                let p2 = tape.max_pool2d(r2, 2, 2)?;
                let d = tape.dims(p2);
                let flat = tape.reshape(p2, &[d[0], d[1] * d[2] * d[3]])?;
                let f1 = tape.linear(flat, p("fc1.weight"), p("fc1.bias"))?;
                tape.relu(f1)?
            }
            Arch::Mlp => {
                let d = tape.dims(x);
                let flat = tape.reshape(x, &[d[0], d[1] * d[2] * d[3]])?;
                let f1 = tape.linear(flat, p("fc1.weight"), p("fc1.bias"))?;
                let r1 = tape.relu(f1)?;
                let f2 = tape.linear(r1, p("fc2.weight"), p("fc2.bias"))?;
                tape.relu(f2)?
            }
            Arch::Attnnet => {
                let pooled = self.attn_pooled(tape, pvars, x)?;
                let f1 = tape.linear(pooled, p("fc1.weight"), p("fc1.bias"))?;
                tape.relu(f1)?
            }
        };
        let logits = tape.linear(features, p("head.weight"), p("head.bias"))?;
        Ok((logits, features))
    }

    /// Patch embedding, one residual self-attention block, and mean pooling
    /// over tokens: `[N,C,H,W] -> [N,EMBED_DIM]`.
    fn attn_pooled(&self, tape: &Tape, pvars: &[Var], x: Var) -> Result<Var> {
        let (tokens, n, pcount) = self.attn_tokens(tape, pvars, x)?;
        let weights = self.attn_scores(tape, pvars, tokens, n, pcount)?;
        let p = |name: &str| pvars[self.param_index(name)];
        let flat = tape.reshape(tokens, &[n * pcount, EMBED_DIM])?;
        let v = tape.linear(flat, p("attn.v.weight"), p("attn.v.bias"))?;
        let v = tape.reshape(v, &[n, pcount, EMBED_DIM])?;
        let ctx = tape.matmul(weights, v)?;
        let ctx_flat = tape.reshape(ctx, &[n * pcount, EMBED_DIM])?;
        let o = tape.linear(ctx_flat, p("attn.o.weight"), p("attn.o.bias"))?;
        let o = tape.reshape(o, &[n, pcount, EMBED_DIM])?;
        let res = tape.add(tokens, o)?;
        tape.mean_pool(res)
    }

    fn attn_tokens(&self, tape: &Tape, pvars: &[Var], x: Var) -> Result<(Var, usize, usize)> {
        let p = |name: &str| pvars[self.param_index(name)];
        let patches = tape.extract_patches(x, PATCH)?;
        let d = tape.dims(patches);
        let (n, pcount, pdim) = (d[0], d[1], d[2]);
        let flat = tape.reshape(patches, &[n * pcount, pdim])?;
        let emb = tape.linear(flat, p("embed.weight"), p("embed.bias"))?;
        // token activation: without it, mean pooling of linear tokens
        // collapses to a linear map of the mean patch and the pooled path
        // carries no patch statistics at all
        let emb = tape.relu(emb)?;
        let tokens = tape.reshape(emb, &[n, pcount, EMBED_DIM])?;
        Ok((tokens, n, pcount))
    }

    fn attn_scores(
        &self,
        tape: &Tape,
        pvars: &[Var],
        tokens: Var,
        n: usize,
        pcount: usize,
    ) -> Result<Var> {
        let p = |name: &str| pvars[self.param_index(name)];
        let flat = tape.reshape(tokens, &[n * pcount, EMBED_DIM])?;
        let q = tape.linear(flat, p("attn.q.weight"), p("attn.q.bias"))?;
        let k = tape.linear(flat, p("attn.k.weight"), p("attn.k.bias"))?;
        let q = tape.reshape(q, &[n, pcount, EMBED_DIM])?;
        let k = tape.reshape(k, &[n, pcount, EMBED_DIM])?;
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scaled = tape.mul_scalar(scores, 1.0 / (EMBED_DIM as f64).sqrt())?;
        tape.softmax(scaled)
    }

    /// Post-softmax attention weights `[N,P,P]` (attnnet only).
    pub fn attention_weights(&self, x: &Tensor) -> Result<Tensor> {
        if self.arch != Arch::Attnnet {
            return Err(Error::ArchitectureMismatch(format!(
                "attention weights are only defined for attnnet, not {}",
                self.arch.tag()
            )));
        }
        self.check_input(x)?;
        let tape = Tape::new();
        let pvars = self.params_on_tape(&tape, false);
        let xv = tape.leaf(x.clone());
        let (tokens, n, pcount) = self.attn_tokens(&tape, &pvars, xv)?;
        let w = self.attn_scores(&tape, &pvars, tokens, n, pcount)?;
        Ok(tape.value(w))
    }

    /// No-grad forward pass: `(logits[N,K], features[N,d])`.
    pub fn forward_with_features(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let tape = Tape::new();
        let pvars = self.params_on_tape(&tape, false);
        let xv = tape.leaf(x.clone());
        let (logits, features) = self.forward_on_tape(&tape, &pvars, xv)?;
        Ok((tape.value(logits), tape.value(features)))
    }

    /// Predicted class of a single image.
    pub fn predict(&self, img: &Image) -> Result<usize> {
        Ok(self.predict_images(std::slice::from_ref(img))?[0])
    }

    // ── Checkpoint I/O ──────────────────────────────────────────────────

    pub fn save_checkpoint(&self, path: &Path, meta: &TrainMeta) -> Result<()> {
        let doc = metadata_doc(&[
            ("arch", self.arch.tag().to_string()),
            ("num_classes", self.num_classes.to_string()),
            ("feature_dim", FEATURE_DIM.to_string()),
            ("input_c", self.input_dims[0].to_string()),
            ("input_h", self.input_dims[1].to_string()),
            ("input_w", self.input_dims[2].to_string()),
            ("init_seed", self.init_seed.to_string()),
            ("epochs", meta.epochs.to_string()),
            ("final_train_acc", format!("{:?}", meta.final_train_acc)),
            ("train_seed", meta.seed.to_string()),
        ]);
        let mut w = ContainerWriter::new(MAGIC);
        w.block(&doc);
        w.u32(self.params.len() as u32);
        for (name, t) in &self.params {
            w.block(name.as_bytes());
            w.tensor(t);
        }
        w.write(path)
    }

    pub fn load_checkpoint(path: &Path) -> Result<(Model, TrainMeta)> {
        let mut r = ContainerReader::open(path, MAGIC, "checkpoint")?;
        let meta = parse_metadata(&r.block("metadata")?)?;
        let arch = Arch::parse(meta_get(&meta, "arch")?)?;
        let num_classes: usize = meta_parse(&meta, "num_classes")?;
        let input_dims = [
            meta_parse(&meta, "input_c")?,
            meta_parse(&meta, "input_h")?,
            meta_parse(&meta, "input_w")?,
        ];
        let init_seed: u64 = meta_parse(&meta, "init_seed")?;
        let train_meta = TrainMeta {
            epochs: meta_parse(&meta, "epochs")?,
            final_train_acc: meta_parse(&meta, "final_train_acc")?,
            seed: meta_parse(&meta, "train_seed")?,
        };

        let specs = param_specs(arch, num_classes, input_dims)?;
        let count = r.u32("tensor count")? as usize;
        if count != specs.len() {
            return Err(Error::TensorCountMismatch {
                expected: specs.len(),
                found: count,
            });
        }
        let mut params = Vec::with_capacity(count);
        for spec in &specs {
            let name = String::from_utf8(r.block("tensor name")?)
                .map_err(|_| Error::MalformedMetadata("tensor name not UTF-8".into()))?;
            let t = r.tensor("tensor payload")?;
            if name != spec.name || t.dims() != spec.dims.as_slice() {
                return Err(Error::ArchitectureMismatch(format!(
                    "expected tensor {:?} with dims {:?}, found {:?} with dims {:?}",
                    spec.name,
                    spec.dims,
                    name,
                    t.dims()
                )));
            }
            params.push((name, t));
        }
        r.finish()?;
        Ok((
            Model {
                arch,
                num_classes,
                input_dims,
                params,
                init_seed,
            },
            train_meta,
        ))
    }
}
