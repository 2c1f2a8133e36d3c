//! Two-stage training.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::error::{Error, Result};
use crate::numerics::checkpoint::validate_shapes;
use crate::numerics::optim::clip_grad_norm;
use crate::numerics::{Adam, Container, Graph, ParamStore, RngState, Tensor};
use crate::score::{F0Stats, Song};

use super::config::{ModelConfig, TrainConfig};
use super::model::{Example, Model, POSTNET_PREFIX};

/// Trained parameters plus what is needed to rebuild and run them.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub f0_stats: F0Stats,
    pub stage: u8,
    pub steps: usize,
    pub seed: u64,
    pub params: ParamStore,
}

impl Checkpoint {
    pub fn to_container(&self) -> Result<Container> {
        Ok(Container::new(
            json!({
                "model": self.model,
                "f0_stats": self.f0_stats,
                "stage": self.stage,
                "steps": self.steps,
                "seed": self.seed,
            }),
            self.params.clone(),
        ))
    }

    pub fn from_container(c: Container) -> Result<Self> {
        let field = |k: &str| {
            c.metadata
                .get(k)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("metadata lacks `{k}`")))
        };
        let bad = |k: &str, e: serde_json::Error| Error::Checkpoint(format!("metadata `{k}`: {e}"));
        let model: ModelConfig = serde_json::from_value(field("model")?).map_err(|e| bad("model", e))?;
        let ck = Self {
            f0_stats: serde_json::from_value(field("f0_stats")?).map_err(|e| bad("f0_stats", e))?,
            stage: serde_json::from_value(field("stage")?).map_err(|e| bad("stage", e))?,
            steps: serde_json::from_value(field("steps")?).map_err(|e| bad("steps", e))?,
            seed: serde_json::from_value(field("seed")?).map_err(|e| bad("seed", e))?,
            params: c.tensors,
            model,
        };
        let reference = Model::new(ck.model.clone())?.init(&RngState::new(0));
        validate_shapes(&ck.params, &reference)?;
        Ok(ck)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_container()?.to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_container(Container::from_bytes(bytes)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container()?.save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(Container::load(path)?)
    }

    pub fn build(&self) -> Result<Model> {
        Model::new(self.model.clone())
    }
}

/// Per-step loss values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub terms: BTreeMap<String, f64>,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

impl TrainLog {
    /// Mean of each term over the last `n` rows.
    pub fn tail_means(&self, n: usize) -> BTreeMap<String, f64> {
        let rows = &self.rows[self.rows.len().saturating_sub(n)..];
        let mut out: BTreeMap<String, f64> = BTreeMap::new();
        for r in rows {
            for (k, v) in &r.terms {
                *out.entry(k.clone()).or_default() += v / rows.len() as f64;
            }
        }
        out
    }
}

fn pick(examples: &[Example], crop_words: usize, rng: &mut RngState) -> Result<Example> {
    let ex = &examples[rng.below(examples.len())];
    let words = ex.spans.len();
    if crop_words == 0 || words <= crop_words {
        return Ok(ex.clone());
    }
    let w0 = rng.below(words - crop_words + 1);
    ex.window(w0, w0 + crop_words)
}

fn check_finite(step: usize, name: &str, v: f64) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged {
            step,
            term: name.to_string(),
        })
    }
}

fn accumulate(acc: &mut BTreeMap<String, Tensor>, grads: BTreeMap<String, Tensor>, keep: impl Fn(&str) -> bool) {
    for (k, g) in grads {
        if !keep(&k) {
            continue;
        }
        match acc.get_mut(&k) {
            Some(a) => a.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
            None => {
                acc.insert(k, g);
            }
        }
    }
}

fn average(acc: &mut BTreeMap<String, Tensor>, n: usize) {
    let s = 1.0 / n as f32;
    for g in acc.values_mut() {
        g.data_mut().iter_mut().for_each(|v| *v *= s);
    }
}

/// Frame range of a random window of `crop_words` words, if cropping applies.
fn crop_frames(spans: &[usize], crop_words: usize, rng: &mut RngState) -> Option<(usize, usize)> {
    if crop_words == 0 || spans.len() <= crop_words {
        return None;
    }
    let w0 = rng.below(spans.len() - crop_words + 1);
    let t0: usize = spans[..w0].iter().sum();
    let t1 = t0 + spans[w0..w0 + crop_words].iter().sum::<usize>();
    Some((t0, t1))
}

fn rows(x: &Tensor, r0: usize, r1: usize) -> Result<Tensor> {
    let c = x.cols();
    Tensor::new(vec![r1 - r0, c], x.data()[r0 * c..r1 * c].to_vec())
}

fn clip(step: usize, cfg: &TrainConfig, grads: &mut BTreeMap<String, Tensor>) -> Result<()> {
    let norm = clip_grad_norm(grads, cfg.grad_clip.unwrap_or(f64::INFINITY));
    check_finite(step, "gradient norm", norm)
}

/// Map a forward-pass failure on non-finite values to a divergence report.
fn diverged_at(step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite { op, .. } => Error::Diverged {
            step,
            term: format!("forward pass ({op})"),
        },
        e => e,
    }
}

/// Stage 1: every module but the post-net, on the unweighted sum of the
/// four terms.
pub fn train_stage1(
    cfg: &TrainConfig,
    train: &[Song],
    mut on_log: impl FnMut(&LogRow),
) -> Result<(Checkpoint, TrainLog)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::arg("no training songs"));
    }
    let model = Model::new(cfg.model_config()?)?;
    let root = RngState::new(cfg.seed);
    let stats = F0Stats::from_tracks(train.iter().map(|s| &s.pitch))?;
    let examples = train
        .iter()
        .map(|s| Example::new(s, &stats))
        .collect::<Result<Vec<_>>>()?;
    let mut params = model.init(&root);
    let mut adam = Adam::new(cfg.learning_rate);
    let mut data_rng = root.named("data");
    let noise_root = root.named("noise");
    let mut log = TrainLog::default();

    for step in 1..=cfg.steps {
        let mut acc = BTreeMap::new();
        let mut terms: BTreeMap<String, f64> = BTreeMap::new();
        let mut noise = noise_root.substream(step as u64);
        for _ in 0..cfg.batch_size {
            let ex = pick(&examples, cfg.crop_words, &mut data_rng)?;
            let mut g = Graph::new();
            let t = model
                .stage1_terms_with(&mut g, &params, &ex, cfg.diffusion_draws, &mut noise)
                .map_err(diverged_at(step))?;
            for (name, node) in t.names.iter().zip(t.nodes) {
                let v = g.value(node).item() as f64;
                check_finite(step, name, v)?;
                *terms.entry(name.to_string()).or_default() += v / cfg.batch_size as f64;
            }
            let total = t.total(&mut g)?;
            let grads = g.backward(total).map_err(diverged_at(step))?;
            accumulate(&mut acc, grads, |k| !k.starts_with(POSTNET_PREFIX));
        }
        average(&mut acc, cfg.batch_size);
        clip(step, cfg, &mut acc)?;
        adam.lr = cfg.lr_at(step);
        adam.step(&mut params, &acc);
        let row = LogRow {
            step,
            total: terms.values().sum(),
            terms,
        };
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step == cfg.steps) {
            on_log(&row);
        }
        log.rows.push(row);
    }
    Ok((
        Checkpoint {
            model: model.cfg.clone(),
            f0_stats: stats,
            stage: 1,
            steps: cfg.steps,
            seed: cfg.seed,
            params,
        },
        log,
    ))
}

/// Stage 2: only `post.*` parameters move; everything else is copied
/// through untouched.
pub fn train_stage2(
    cfg: &TrainConfig,
    init: &Checkpoint,
    train: &[Song],
    mut on_log: impl FnMut(&LogRow),
) -> Result<(Checkpoint, TrainLog)> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::arg("no training songs"));
    }
    let model = init.build()?;
    let root = RngState::new(cfg.seed);
    // (mel_g, teacher-forced coarse mel) per song from the frozen network
    let pairs = train
        .iter()
        .map(|s| {
            let ex = Example::new(s, &init.f0_stats)?;
            let coarse = model.coarse_teacher_forced(&init.params, &ex)?;
            Ok((ex.spans, ex.mel, coarse))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut params = init.params.clone();
    let mut adam = Adam::new(cfg.learning_rate);
    let mut data_rng = root.named("post-data");
    let noise_root = root.named("post-noise");
    let post = model.postnet();
    let mut log = TrainLog::default();

    for step in 1..=cfg.steps {
        let mut acc = BTreeMap::new();
        let mut loss = 0.0;
        let mut noise = noise_root.substream(step as u64);
        for _ in 0..cfg.batch_size {
            let (spans, target, coarse) = &pairs[data_rng.below(pairs.len())];
            let (target, coarse) = match crop_frames(spans, cfg.crop_words, &mut data_rng) {
                Some((t0, t1)) => (rows(target, t0, t1)?, rows(coarse, t0, t1)?),
                None => (target.clone(), coarse.clone()),
            };
            let mut g = Graph::new();
            let c = g.constant(coarse);
            let t = 1 + noise.below(model.sched.steps());
            let l = post
                .loss(&mut g, &params, &model.sched, &target, c, t, &mut noise)
                .map_err(diverged_at(step))?;
            let v = g.value(l).item() as f64;
            check_finite(step, "post", v)?;
            loss += v / cfg.batch_size as f64;
            let grads = g.backward(l).map_err(diverged_at(step))?;
            accumulate(&mut acc, grads, |k| k.starts_with(POSTNET_PREFIX));
        }
        average(&mut acc, cfg.batch_size);
        clip(step, cfg, &mut acc)?;
        adam.lr = cfg.lr_at(step);
        adam.step(&mut params, &acc);
        let row = LogRow {
            step,
            terms: BTreeMap::from([("post".to_string(), loss)]),
            total: loss,
        };
        if cfg.log_every > 0 && (step % cfg.log_every == 0 || step == cfg.steps) {
            on_log(&row);
        }
        log.rows.push(row);
    }
    Ok((
        Checkpoint {
            stage: 2,
            steps: cfg.steps,
            seed: cfg.seed,
            params,
            ..init.clone()
        },
        log,
    ))
}

/// Every parameter outside the post-net is bit-identical in `a` and `b`.
pub fn frozen_parameters_match(a: &ParamStore, b: &ParamStore) -> bool {
    let outside = |s: &ParamStore| {
        s.iter()
            .filter(|(k, _)| !k.starts_with(POSTNET_PREFIX))
            .map(|(k, t)| (k.clone(), t.shape().to_vec(), t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()))
            .collect::<Vec<_>>()
    };
    outside(a) == outside(b)
}
