//! Universal perturbation crafting.
//!
//! The feature-gathering attack drives down the batch-mean cosine
//! similarity between clean and perturbed last-layer features with Adam,
//! clamping the perturbation to the L∞ budget after every step. A
//! logit-space variant of the same loop serves as the comparison baseline.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::adam::{adam_step, AdamState};
use crate::binio::{
    meta_get, meta_parse, metadata_doc, parse_metadata, ContainerReader, ContainerWriter,
};
use crate::dataset::{Image, LabeledDataset};
use crate::error::{Error, Result};
use crate::models::Model;
use crate::tape::Tape;
use crate::tensor::{cosine, Tensor};

const MAGIC: &[u8; 8] = b"UAPPERT1";

/// Paper-default L∞ budget in pixel units.
pub const DEFAULT_XI: f64 = 10.0 / 255.0;

/// The exact zero initialization is a critical point of the cosine loss
/// (clean and perturbed features coincide, so the gradient vanishes
/// identically). A one-time seeded jitter of this fraction of the budget
/// breaks the tie deterministically before the first gradient step.
const INIT_JITTER_FRACTION: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttackMode {
    Untargeted,
    Targeted(usize),
}

impl AttackMode {
    pub fn tag(self) -> String {
        match self {
            AttackMode::Untargeted => "untargeted".to_string(),
            AttackMode::Targeted(c) => format!("targeted:{c}"),
        }
    }

    pub fn parse(s: &str) -> Result<AttackMode> {
        if s == "untargeted" {
            return Ok(AttackMode::Untargeted);
        }
        if let Some(c) = s.strip_prefix("targeted:") {
            let class = c.parse().map_err(|_| {
                Error::InvalidArgument(format!("bad targeted class in mode {s:?}"))
            })?;
            return Ok(AttackMode::Targeted(class));
        }
        Err(Error::InvalidArgument(format!("unknown attack mode {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttackMethod {
    /// Cosine similarity of last-layer features (the feature-gathering loss).
    Fg,
    /// Cosine similarity of logit vectors.
    LogitCosine,
}

impl AttackMethod {
    pub fn tag(self) -> &'static str {
        match self {
            AttackMethod::Fg => "fg",
            AttackMethod::LogitCosine => "logit-cosine",
        }
    }

    pub fn parse(s: &str) -> Result<AttackMethod> {
        match s {
            "fg" => Ok(AttackMethod::Fg),
            "logit-cosine" => Ok(AttackMethod::LogitCosine),
            other => Err(Error::InvalidArgument(format!(
                "unknown attack method {other:?} (expected fg or logit-cosine)"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AttackConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub xi: f64,
    pub mode: AttackMode,
    pub seed: u64,
}

impl AttackConfig {
    /// The paper defaults: b=32, m=10, lr=0.02, ξ=10/255.
    pub fn paper_default() -> AttackConfig {
        AttackConfig {
            batch_size: 32,
            epochs: 10,
            learning_rate: 0.02,
            xi: DEFAULT_XI,
            mode: AttackMode::Untargeted,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::InvalidArgument("batch size must be >= 1".into()));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::InvalidArgument("learning rate must be > 0".into()));
        }
        if self.xi < 0.0 {
            return Err(Error::InvalidArgument("xi must be >= 0".into()));
        }
        Ok(())
    }
}

/// A crafted universal perturbation with its provenance.
#[derive(Clone, Debug)]
pub struct Perturbation {
    delta: Tensor,
    pub xi: f64,
    pub mode: AttackMode,
    pub method: AttackMethod,
    pub surrogate: String,
    pub seed: u64,
}

impl Perturbation {
    pub fn new(
        delta: Tensor,
        xi: f64,
        mode: AttackMode,
        method: AttackMethod,
        surrogate: String,
        seed: u64,
    ) -> Result<Self> {
        if delta.rank() != 3 {
            return Err(Error::InvalidArgument(format!(
                "perturbation must be rank 3 [C,H,W], got {:?}",
                delta.dims()
            )));
        }
        let max_abs = delta.max_abs();
        if max_abs > xi {
            return Err(Error::BudgetViolation { max_abs, xi });
        }
        Ok(Perturbation {
            delta,
            xi,
            mode,
            method,
            surrogate,
            seed,
        })
    }

    pub fn delta(&self) -> &Tensor {
        &self.delta
    }

    pub fn id(&self) -> String {
        format!("{}-{}-s{}", self.method.tag(), self.mode.tag(), self.seed)
    }

    /// Perturb and re-validate: `clamp(x + δ, 0, 1)` is always a valid image.
    pub fn apply(&self, img: &Image) -> Result<Image> {
        let x = img.pixels();
        if x.dims() != self.delta.dims() {
            return Err(Error::ShapeMismatch {
                op: "apply",
                lhs: x.dims().to_vec(),
                rhs: self.delta.dims().to_vec(),
            });
        }
        Image::new(x.add(&self.delta)?.clamp(0.0, 1.0)?)
    }

    // ── Container I/O ───────────────────────────────────────────────────

    pub fn save(&self, path: &Path) -> Result<()> {
        let doc = metadata_doc(&[
            ("method", self.method.tag().to_string()),
            ("mode", self.mode.tag()),
            ("xi", format!("{:?}", self.xi)),
            ("surrogate", self.surrogate.clone()),
            ("seed", self.seed.to_string()),
        ]);
        let mut w = ContainerWriter::new(MAGIC);
        w.block(&doc);
        w.tensor(&self.delta);
        w.write(path)
    }

    pub fn load(path: &Path) -> Result<Perturbation> {
        let mut r = ContainerReader::open(path, MAGIC, "perturbation")?;
        let meta = parse_metadata(&r.block("metadata")?)?;
        let method = AttackMethod::parse(meta_get(&meta, "method")?)?;
        let mode = AttackMode::parse(meta_get(&meta, "mode")?)?;
        let xi: f64 = meta_parse(&meta, "xi")?;
        let surrogate = meta_get(&meta, "surrogate")?.to_string();
        let seed: u64 = meta_parse(&meta, "seed")?;
        let delta = r.tensor("delta payload")?;
        r.finish()?;
        // budget is re-validated so a tampered file cannot smuggle an
        // over-budget perturbation in
        Perturbation::new(delta, xi, mode, method, surrogate, seed)
    }
}

/// Per-epoch mean loss trace of one crafting run.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct AttackLog {
    pub method: String,
    pub mode: String,
    pub epoch_mean_loss: Vec<f64>,
}

/// The feature-gathering loss: cosine similarity of clean and adversarial
/// features. Rank-1 inputs give the pair loss; rank-2 `[N,d]` inputs give
/// the batch mean.
pub fn fg_loss(h: &Tensor, h_adv: &Tensor) -> Result<f64> {
    if h.dims() != h_adv.dims() {
        return Err(Error::ShapeMismatch {
            op: "fg_loss",
            lhs: h.dims().to_vec(),
            rhs: h_adv.dims().to_vec(),
        });
    }
    match h.dims() {
        [_] => cosine(h.data(), h_adv.data()),
        [n, d] => {
            let mut acc = 0.0;
            for i in 0..*n {
                acc += cosine(
                    &h.data()[i * d..(i + 1) * d],
                    &h_adv.data()[i * d..(i + 1) * d],
                )?;
            }
            Ok(acc / *n as f64)
        }
        other => Err(Error::ShapeMismatch {
            op: "fg_loss",
            lhs: other.to_vec(),
            rhs: other.to_vec(),
        }),
    }
}

/// Targeted variant: the attack minimizes `fg_loss − logits_adv[target]`,
/// driving features together while pushing the target logit up.
pub fn targeted_fg_loss(
    h: &Tensor,
    h_adv: &Tensor,
    logits_adv: &Tensor,
    target: usize,
) -> Result<f64> {
    let k = *logits_adv.dims().last().ok_or(Error::ShapeMismatch {
        op: "targeted_fg_loss",
        lhs: vec![],
        rhs: vec![0],
    })?;
    if target >= k {
        return Err(Error::ClassOutOfRange {
            class: target,
            num_classes: k,
        });
    }
    let base = fg_loss(h, h_adv)?;
    let rows = logits_adv.numel() / k;
    let mean_target: f64 = (0..rows)
        .map(|i| logits_adv.data()[i * k + target])
        .sum::<f64>()
        / rows as f64;
    Ok(base - mean_target)
}

/// Craft a feature-gathering UAP with the paper's loop: δ ← 0, then for m
/// epochs take one Adam step per batch on the batch-mean loss gradient and
/// clamp δ to `[−ξ, ξ]`.
pub fn craft_uap(
    model: &Model,
    ds: &LabeledDataset,
    cfg: &AttackConfig,
) -> Result<(Perturbation, AttackLog)> {
    craft_with_observer(model, ds, cfg, AttackMethod::Fg, |_| {})
}

/// Identical loop with the cosine taken between clean and adversarial logit
/// vectors instead of features.
pub fn craft_logit_cosine_baseline(
    model: &Model,
    ds: &LabeledDataset,
    cfg: &AttackConfig,
) -> Result<(Perturbation, AttackLog)> {
    craft_with_observer(model, ds, cfg, AttackMethod::LogitCosine, |_| {})
}

/// Crafting loop with a per-step observer (tests use it to watch the budget
/// invariant after every optimizer step).
pub fn craft_with_observer(
    model: &Model,
    ds: &LabeledDataset,
    cfg: &AttackConfig,
    method: AttackMethod,
    mut observer: impl FnMut(&Tensor),
) -> Result<(Perturbation, AttackLog)> {
    cfg.validate()?;
    ds.validate()?;
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let [c, h, w] = ds.image_dims()?;
    if [c, h, w] != model.input_dims() {
        return Err(Error::ShapeMismatch {
            op: "craft_uap",
            lhs: vec![c, h, w],
            rhs: model.input_dims().to_vec(),
        });
    }
    if let AttackMode::Targeted(t) = cfg.mode {
        if t >= model.num_classes() {
            return Err(Error::ClassOutOfRange {
                class: t,
                num_classes: model.num_classes(),
            });
        }
    }

    // Clean references never change during the attack; cache them once.
    let clean = cache_clean_outputs(model, ds, method)?;
    let ref_dim = clean.len() / ds.len();

    let mut delta = Tensor::zeros(&[c, h, w]);
    let mut state = AdamState::new(&delta);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = AttackLog {
        method: method.tag().to_string(),
        mode: cfg.mode.tag(),
        epoch_mean_loss: Vec::with_capacity(cfg.epochs),
    };
    let mut first_step = true;

    for _ in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..ds.len()).collect();
        for i in (1..order.len()).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            if first_step {
                delta = add_init_jitter(&delta, cfg)?;
                first_step = false;
            }

            let tape = Tape::new();
            let pvars = model.params_on_tape(&tape, false);
            let xb = tape.leaf(ds.batch_tensor(batch)?);
            let dv = tape.leaf(delta.clone().with_grad());
            let adv = tape.add_image_batch(xb, dv)?;
            let (logits_adv, feats_adv) = model.forward_on_tape(&tape, &pvars, adv)?;

            let reference = match method {
                AttackMethod::Fg => feats_adv,
                AttackMethod::LogitCosine => logits_adv,
            };
            let clean_batch = tape.leaf(gather_rows(&clean, ref_dim, batch)?);
            let sims = tape.cosine_similarity(clean_batch, reference)?;
            let mean_sim = tape.mean_all(sims)?;
            let loss = match cfg.mode {
                AttackMode::Untargeted => mean_sim,
                AttackMode::Targeted(t) => {
                    let target_logits = tape.column(logits_adv, t)?;
                    let mean_target = tape.mean_all(target_logits)?;
                    tape.sub(mean_sim, mean_target)?
                }
            };

            epoch_loss += tape.item(loss) * batch.len() as f64;
            tape.backward(loss)?;
            let grad = tape.grad(dv).expect("delta requires grad");
            delta = adam_step(&delta, &grad, &mut state, cfg.learning_rate)?;
            delta = delta.clamp(-cfg.xi, cfg.xi)?;
            debug_assert!(delta.max_abs() <= cfg.xi);
            observer(&delta);
        }
        log.epoch_mean_loss.push(epoch_loss / ds.len() as f64);
    }

    let p = Perturbation::new(
        delta,
        cfg.xi,
        cfg.mode,
        method,
        model.id(),
        cfg.seed,
    )?;
    Ok((p, log))
}

fn add_init_jitter(delta: &Tensor, cfg: &AttackConfig) -> Result<Tensor> {
    let amp = cfg.xi * INIT_JITTER_FRACTION;
    if amp == 0.0 {
        return Ok(delta.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(u64::MAX); // disjoint from the shuffle stream
    let jitter = Tensor::uniform(delta.dims(), -amp, amp, &mut rng);
    delta.add(&jitter)
}

/// Flattened clean reference vectors (features or logits) for every sample.
fn cache_clean_outputs(model: &Model, ds: &LabeledDataset, method: AttackMethod) -> Result<Vec<f64>> {
    let mut out = Vec::new();
    let idxs: Vec<usize> = (0..ds.len()).collect();
    for chunk in idxs.chunks(64) {
        let x = ds.batch_tensor(chunk)?;
        let (logits, feats) = model.forward_with_features(&x)?;
        let t = match method {
            AttackMethod::Fg => feats,
            AttackMethod::LogitCosine => logits,
        };
        out.extend_from_slice(t.data());
    }
    Ok(out)
}

fn gather_rows(flat: &[f64], dim: usize, idxs: &[usize]) -> Result<Tensor> {
    let mut data = Vec::with_capacity(idxs.len() * dim);
    for &i in idxs {
        data.extend_from_slice(&flat[i * dim..(i + 1) * dim]);
    }
    Tensor::new(vec![idxs.len(), dim], data)
}
