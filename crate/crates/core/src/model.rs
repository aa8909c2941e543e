//! The embedding network: parallel multi-scale convolution branches, two deep
//! convolution blocks, a γ-gated self-attention block, then pooling, a linear
//! map to the embedding space and L2 normalisation. A linear classifier head
//! sits on top of the normalised embedding.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{load_checkpoint, save_checkpoint, BatchNormState, BnMode, ParamStore, Real, Tape, Tensor, Var};
use crate::data_io::{read_bytes, write_bytes};
use crate::error::{Error, Result};

pub const MODEL_JSON: &str = "model.json";

/// Denominator guard of the final L2 normalisation.
pub const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub branch_kernels: Vec<usize>,
    pub branch_channels: usize,
    pub deep_channels: Vec<usize>,
    pub attention_reduction: usize,
    pub embedding_dim: usize,
    pub n_subjects: usize,
    pub use_multi_scale: bool,
    pub use_deep_conv: bool,
    pub use_attention: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            branch_kernels: vec![3, 5, 7, 11],
            branch_channels: 64,
            deep_channels: vec![256, 512],
            attention_reduction: 8,
            embedding_dim: 128,
            n_subjects: 45,
            use_multi_scale: true,
            use_deep_conv: true,
            use_attention: true,
        }
    }
}

/// Ablation configurations A1–A5.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Ablation {
    A1,
    A2,
    A3,
    A4,
    A5,
}

impl Ablation {
    pub const ALL: [Ablation; 5] = [Ablation::A1, Ablation::A2, Ablation::A3, Ablation::A4, Ablation::A5];

    /// `(multi-scale, deep conv, attention)`.
    pub fn flags(self) -> (bool, bool, bool) {
        match self {
            Ablation::A1 => (true, true, true),
            Ablation::A2 => (false, true, true),
            Ablation::A3 => (true, false, true),
            Ablation::A4 => (true, true, false),
            Ablation::A5 => (false, true, false),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Ablation::A1 => "A1",
            Ablation::A2 => "A2",
            Ablation::A3 => "A3",
            Ablation::A4 => "A4",
            Ablation::A5 => "A5",
        }
    }
}

impl std::str::FromStr for Ablation {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Ablation::ALL
            .into_iter()
            .find(|a| a.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown ablation '{s}' (expected A1..A5)"))
    }
}

impl ModelConfig {
    /// Desk-scale network: same topology, narrow channels.
    pub fn desk(n_subjects: usize) -> Self {
        ModelConfig {
            branch_channels: 4,
            deep_channels: vec![16, 32],
            n_subjects,
            ..ModelConfig::default()
        }
    }

    pub fn with_ablation(mut self, a: Ablation) -> Self {
        (self.use_multi_scale, self.use_deep_conv, self.use_attention) = a.flags();
        self
    }

    pub fn ablation(&self) -> Option<Ablation> {
        let f = (self.use_multi_scale, self.use_deep_conv, self.use_attention);
        Ablation::ALL.into_iter().find(|a| a.flags() == f)
    }

    /// Width after the multi-scale stage (or its replacement).
    pub fn stem_channels(&self) -> usize {
        self.deep_channels.first().copied().unwrap_or(0)
    }

    pub fn feature_channels(&self) -> usize {
        self.deep_channels.get(1).copied().unwrap_or(0)
    }

    pub fn attention_channels(&self) -> usize {
        self.feature_channels() / self.attention_reduction.max(1)
    }

    /// Every violated constraint, as `field: reason` strings.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.branch_kernels.is_empty() {
            errs.push("model.branch_kernels: must not be empty".to_string());
        }
        for &k in &self.branch_kernels {
            if k % 2 == 0 {
                errs.push(format!("model.branch_kernels: kernel {k} is not odd"));
            }
        }
        if self.branch_channels == 0 {
            errs.push("model.branch_channels: must be positive".to_string());
        }
        if self.deep_channels.len() != 2 || self.deep_channels.contains(&0) {
            errs.push(format!("model.deep_channels: need two positive widths, got {:?}", self.deep_channels));
        } else if self.use_multi_scale && self.deep_channels[0] != self.branch_channels * self.branch_kernels.len() {
            errs.push(format!(
                "model.deep_channels: first width {} must equal branch_channels x branches = {}",
                self.deep_channels[0],
                self.branch_channels * self.branch_kernels.len()
            ));
        }
        if self.attention_reduction == 0
            || self.feature_channels() % self.attention_reduction != 0
            || self.feature_channels() < self.attention_reduction
        {
            errs.push(format!(
                "model.attention_reduction: {} must divide the feature width {}",
                self.attention_reduction,
                self.feature_channels()
            ));
        }
        if self.embedding_dim == 0 {
            errs.push("model.embedding_dim: must be positive".to_string());
        }
        if self.n_subjects < 2 {
            errs.push(format!("model.n_subjects: need at least 2, got {}", self.n_subjects));
        }
        errs
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_bytes(path, &serde_json::to_vec_pretty(self).expect("config serialises"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        serde_json::from_slice(&read_bytes(path)?).map_err(|e| Error::MalformedHeader {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }
}

#[derive(Debug, Clone)]
struct ConvBn {
    w: usize,
    b: usize,
    gamma: usize,
    beta: usize,
    bn: usize,
}

#[derive(Debug, Clone)]
struct Attention {
    qw: usize,
    qb: usize,
    kw: usize,
    kb: usize,
    vw: usize,
    vb: usize,
    gamma: usize,
}

#[derive(Debug, Clone)]
struct Layout {
    stem: Vec<ConvBn>,
    deep: Vec<ConvBn>,
    lift: Option<(usize, usize)>,
    attention: Option<Attention>,
    embed: (usize, usize),
    classifier: (usize, usize),
    bn_names: Vec<String>,
}

/// Outputs of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub embedding: Var,
    pub logits: Var,
}

/// Every intermediate of an eval-mode forward pass.
#[derive(Debug, Clone)]
pub struct Trace<T: Real> {
    pub multi_scale: Tensor<T>,
    pub deep: Tensor<T>,
    pub attention_weights: Option<Tensor<T>>,
    pub attended: Tensor<T>,
    pub pooled: Tensor<T>,
    pub embedding: Tensor<T>,
    pub logits: Tensor<T>,
}

/// Network parameters, batch-norm statistics and the config that shaped them.
#[derive(Debug, Clone)]
pub struct Model<T: Real = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub bn: Vec<BatchNormState<T>>,
    layout: Layout,
}

struct Init<'a, T: Real> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
    bn: Vec<BatchNormState<T>>,
    bn_names: Vec<String>,
}

impl<T: Real> Init<'_, T> {
    fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> Result<usize> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| T::lit(self.rng.random_range(-bound..bound)));
        self.store.add(name, t)
    }

    fn conv(&mut self, name: &str, cout: usize, cin: usize, k: usize) -> Result<(usize, usize)> {
        let w = self.uniform(&format!("{name}.w"), &[cout, cin, k], cin * k)?;
        let b = self.uniform(&format!("{name}.b"), &[cout], cin * k)?;
        Ok((w, b))
    }

    fn conv_bn(&mut self, name: &str, cout: usize, cin: usize, k: usize) -> Result<ConvBn> {
        let (w, b) = self.conv(&format!("{name}.conv"), cout, cin, k)?;
        let gamma = self.store.add(&format!("{name}.bn.gamma"), Tensor::full(&[cout], T::one()))?;
        let beta = self.store.add(&format!("{name}.bn.beta"), Tensor::zeros(&[cout]))?;
        self.bn.push(BatchNormState::new(cout));
        self.bn_names.push(format!("{name}.bn"));
        Ok(ConvBn {
            w,
            b,
            gamma,
            beta,
            bn: self.bn.len() - 1,
        })
    }

    fn linear(&mut self, name: &str, fin: usize, fout: usize) -> Result<(usize, usize)> {
        let w = self.uniform(&format!("{name}.w"), &[fin, fout], fin)?;
        let b = self.uniform(&format!("{name}.b"), &[fout], fin)?;
        Ok((w, b))
    }
}

fn conv_bn_relu<T: Real>(
    tape: &mut Tape<T>,
    p: &[Var],
    bn: &mut [BatchNormState<T>],
    l: &ConvBn,
    x: Var,
    mode: BnMode,
) -> Result<Var> {
    let c = tape.conv1d(x, p[l.w], p[l.b])?;
    let n = tape.batchnorm1d(c, p[l.gamma], p[l.beta], &mut bn[l.bn], mode)?;
    Ok(tape.relu(n))
}

struct Stages<T: Real> {
    multi_scale: Var,
    deep: Var,
    attention_weights: Option<Tensor<T>>,
    attended: Var,
    pooled: Var,
    out: Forward,
}

impl<T: Real> Model<T> {
    /// Fresh network: fan-in uniform weights, BN γ=1 β=0, attention γ=0.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let errs = config.validate();
        if !errs.is_empty() {
            return Err(Error::ConfigError(errs));
        }
        let mut store = ParamStore::new();
        let mut init = Init {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(seed),
            bn: Vec::new(),
            bn_names: Vec::new(),
        };
        let (c0, c1) = (config.stem_channels(), config.feature_channels());
        let stem = if config.use_multi_scale {
            config
                .branch_kernels
                .iter()
                .enumerate()
                .map(|(i, &k)| init.conv_bn(&format!("branch{i}"), config.branch_channels, 1, k))
                .collect::<Result<Vec<_>>>()?
        } else {
            vec![init.conv_bn("stem", c0, 1, 3)?]
        };
        let (deep, lift) = if config.use_deep_conv {
            (vec![init.conv_bn("deep1", c0, c0, 3)?, init.conv_bn("deep2", c1, c0, 3)?], None)
        } else {
            (Vec::new(), Some(init.conv("lift", c1, c0, 1)?))
        };
        let attention = if config.use_attention {
            let d = config.attention_channels();
            let (qw, qb) = init.conv("attn.q", d, c1, 1)?;
            let (kw, kb) = init.conv("attn.k", d, c1, 1)?;
            let (vw, vb) = init.conv("attn.v", c1, c1, 1)?;
            let gamma = init.store.add("attn.gamma", Tensor::zeros(&[1]))?;
            Some(Attention {
                qw,
                qb,
                kw,
                kb,
                vw,
                vb,
                gamma,
            })
        } else {
            None
        };
        let embed = init.linear("embed", c1, config.embedding_dim)?;
        let classifier = init.linear("classifier", config.embedding_dim, config.n_subjects)?;
        let (bn, bn_names) = (init.bn, init.bn_names);
        Ok(Model {
            config,
            params: store,
            bn,
            layout: Layout {
                stem,
                deep,
                lift,
                attention,
                embed,
                classifier,
                bn_names,
            },
        })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    fn stages(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        bn: &mut [BatchNormState<T>],
        x: Var,
        mode: BnMode,
        keep_weights: bool,
    ) -> Result<Stages<T>> {
        let xs = tape.shape(x);
        if xs.len() != 3 || xs[1] != 1 {
            return Err(Error::ShapeMismatch(format!("model input must be [B,1,L], got {xs:?}")));
        }
        let ly = &self.layout;
        let branches = ly
            .stem
            .iter()
            .map(|l| conv_bn_relu(tape, p, bn, l, x, mode))
            .collect::<Result<Vec<_>>>()?;
        let multi_scale = if branches.len() == 1 { branches[0] } else { tape.concat(&branches)? };

        let deep = match ly.lift {
            Some((w, b)) => tape.conv1d(multi_scale, p[w], p[b])?,
            None => {
                let h = conv_bn_relu(tape, p, bn, &ly.deep[0], multi_scale, mode)?;
                conv_bn_relu(tape, p, bn, &ly.deep[1], h, mode)?
            }
        };

        let (attended, attention_weights) = match &ly.attention {
            Some(a) => {
                let q = tape.conv1d(deep, p[a.qw], p[a.qb])?;
                let k = tape.conv1d(deep, p[a.kw], p[a.kb])?;
                let v = tape.conv1d(deep, p[a.vw], p[a.vb])?;
                let d = T::from_usize(self.config.attention_channels()).unwrap();
                let scale = T::one() / d.sqrt();
                let mixed = tape.attention(q, k, v, scale)?;
                let weights = if keep_weights { Some(tape.attention_weights(q, k, scale)?) } else { None };
                let gated = tape.scale(p[a.gamma], mixed)?;
                (tape.add(gated, deep)?, weights)
            }
            None => (deep, None),
        };

        let pooled = tape.global_avg_pool(attended)?;
        let h = tape.linear(pooled, p[ly.embed.0], p[ly.embed.1])?;
        let embedding = tape.l2_normalize(h, T::lit(NORM_EPS))?;
        let logits = tape.linear(embedding, p[ly.classifier.0], p[ly.classifier.1])?;
        Ok(Stages {
            multi_scale,
            deep,
            attention_weights,
            attended,
            pooled,
            out: Forward { embedding, logits },
        })
    }

    /// Forward pass on parameters already recorded on the tape (see [`ParamStore::bind`]).
    pub fn forward_bound(
        &self,
        tape: &mut Tape<T>,
        params: &[Var],
        bn: &mut [BatchNormState<T>],
        x: Var,
        mode: BnMode,
    ) -> Result<Forward> {
        Ok(self.stages(tape, params, bn, x, mode, false)?.out)
    }

    /// Binds the parameters as differentiable leaves and runs the forward pass.
    /// Train mode updates the batch-norm running statistics.
    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: BnMode) -> Result<(Vec<Var>, Forward)> {
        let params = self.params.bind(tape);
        let mut bn = std::mem::take(&mut self.bn);
        let out = self.forward_bound(tape, &params, &mut bn, x, mode);
        self.bn = bn;
        Ok((params, out?))
    }

    fn constants(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params.values().iter().map(|v| tape.constant(v.clone())).collect()
    }

    /// Eval-mode pass keeping every intermediate.
    pub fn trace(&self, x: &Tensor<T>) -> Result<Trace<T>> {
        let mut tape = Tape::new();
        let p = self.constants(&mut tape);
        let xv = tape.constant(x.clone());
        let mut bn = self.bn.clone();
        let s = self.stages(&mut tape, &p, &mut bn, xv, BnMode::Eval, true)?;
        let get = |v: Var| tape.value(v).clone();
        Ok(Trace {
            multi_scale: get(s.multi_scale),
            deep: get(s.deep),
            attention_weights: s.attention_weights,
            attended: get(s.attended),
            pooled: get(s.pooled),
            embedding: get(s.out.embedding),
            logits: get(s.out.logits),
        })
    }

    /// Eval-mode embeddings `[B,E]` and logits `[B,n_subjects]` of `x [B,1,L]`.
    pub fn infer(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let p = self.constants(&mut tape);
        let xv = tape.constant(x.clone());
        let mut bn = self.bn.clone();
        let out = self.forward_bound(&mut tape, &p, &mut bn, xv, BnMode::Eval)?;
        Ok((tape.value(out.embedding).clone(), tape.value(out.logits).clone()))
    }

    /// Eval-mode unit-norm embeddings of `x [B,1,L]`.
    pub fn embed(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.infer(x)?.0)
    }

    /// Classifier logits of embeddings `e [B,E]`.
    pub fn classify(&self, e: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let ev = tape.constant(e.clone());
        let (w, b) = self.layout.classifier;
        let wv = tape.constant(self.params.value(w).clone());
        let bv = tape.constant(self.params.value(b).clone());
        let y = tape.linear(ev, wv, bv)?;
        Ok(tape.value(y).clone())
    }

    /// Parameter id of the attention gate γ, if attention is enabled.
    pub fn attention_gamma_id(&self) -> Option<usize> {
        self.layout.attention.as_ref().map(|a| a.gamma)
    }

    pub fn classifier_ids(&self) -> (usize, usize) {
        self.layout.classifier
    }

    /// Same network in another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            bn: self
                .bn
                .iter()
                .map(|s| BatchNormState {
                    running_mean: s.running_mean.iter().map(|v| U::lit(v.to_f64().unwrap())).collect(),
                    running_var: s.running_var.iter().map(|v| U::lit(v.to_f64().unwrap())).collect(),
                    momentum: s.momentum,
                    eps: s.eps,
                })
                .collect(),
            layout: self.layout.clone(),
        }
    }

    /// Writes `model.json`, `checkpoint.json` and `checkpoint.bin` into `dir`.
    pub fn save(&self, dir: &Path, metadata: serde_json::Value) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.config.save(&dir.join(MODEL_JSON))?;
        let mut store = self.params.clone();
        for (name, st) in self.layout.bn_names.iter().zip(&self.bn) {
            let c = st.running_mean.len();
            store.set_buffer(&format!("{name}.running_mean"), Tensor::new(&[c], st.running_mean.clone())?)?;
            store.set_buffer(&format!("{name}.running_var"), Tensor::new(&[c], st.running_var.clone())?)?;
        }
        save_checkpoint(dir, &store, metadata)
    }

    /// Restores a model written by [`save`](Self::save).
    pub fn load(dir: &Path) -> Result<(Self, serde_json::Value)> {
        let config = ModelConfig::load(&dir.join(MODEL_JSON))?;
        let mut model = Model::new(config, 0)?;
        let (store, manifest) = load_checkpoint::<T>(dir)?;
        let bad = |reason: String| Error::MalformedHeader {
            path: dir.join(crate::autodiff::CHECKPOINT_JSON),
            reason,
        };
        if store.names() != model.params.names() {
            return Err(bad("parameter names do not match model.json".into()));
        }
        for (i, v) in store.values().iter().enumerate() {
            if v.shape() != model.params.value(i).shape() {
                return Err(bad(format!("parameter {} has shape {:?}", store.name(i), v.shape())));
            }
            *model.params.value_mut(i) = v.clone();
        }
        for (name, st) in model.layout.bn_names.iter().zip(model.bn.iter_mut()) {
            for (suffix, dst) in [("running_mean", &mut st.running_mean), ("running_var", &mut st.running_var)] {
                let key = format!("{name}.{suffix}");
                let t = store.buffer(&key).ok_or_else(|| bad(format!("missing buffer {key}")))?;
                if t.len() != dst.len() {
                    return Err(bad(format!("buffer {key} has {} values", t.len())));
                }
                dst.copy_from_slice(t.data());
            }
        }
        Ok((model, manifest.metadata))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_is_valid() {
        assert!(ModelConfig::default().validate().is_empty());
        assert!(ModelConfig::desk(10).validate().is_empty());
    }

    #[test]
    fn validation_lists_every_problem() {
        let cfg = ModelConfig {
            branch_kernels: vec![3, 4],
            deep_channels: vec![100, 30],
            attention_reduction: 7,
            n_subjects: 1,
            ..ModelConfig::default()
        };
        let errs = cfg.validate();
        assert_eq!(errs.len(), 4, "{errs:?}");
    }

    #[test]
    fn ablation_flags() {
        assert_eq!(Ablation::A1.flags(), (true, true, true));
        assert_eq!(Ablation::A5.flags(), (false, true, false));
        for a in Ablation::ALL {
            let cfg = ModelConfig::desk(4).with_ablation(a);
            assert_eq!(cfg.ablation(), Some(a));
            assert!(Model::<f64>::new(cfg, 1).is_ok());
        }
    }

    #[test]
    fn gamma_starts_at_zero() {
        let m = Model::<f32>::new(ModelConfig::desk(3), 9).unwrap();
        let id = m.attention_gamma_id().unwrap();
        assert_eq!(m.params.value(id).data(), &[0.0]);
    }
}
