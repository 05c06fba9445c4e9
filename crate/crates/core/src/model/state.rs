use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::{InstructionSet, ModelConfig};
use super::ModelError;
use crate::tensor::{Real, Tape, Tensor, Var};
use crate::text::Vocab;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Normal(f64),
    Zeros,
    Ones,
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn block_specs(out: &mut Vec<ParamSpec>, prefix: &str, d: usize, ff: usize) {
    let mut p = |name: &str, shape: Vec<usize>, init| {
        out.push(ParamSpec {
            name: format!("{prefix}.{name}"),
            shape,
            init,
        })
    };
    let wstd = 1.0 / (d as f64).sqrt();
    p("ln1.g", vec![d], Init::Ones);
    p("ln1.b", vec![d], Init::Zeros);
    for w in ["wq", "wk", "wv", "wo"] {
        p(w, vec![d, d], Init::Normal(wstd));
    }
    for b in ["bq", "bk", "bv", "bo"] {
        p(b, vec![d], Init::Zeros);
    }
    p("ln2.g", vec![d], Init::Ones);
    p("ln2.b", vec![d], Init::Zeros);
    p("ff.w1", vec![d, ff], Init::Normal(wstd));
    p("ff.b1", vec![ff], Init::Zeros);
    p("ff.w2", vec![ff, d], Init::Normal(1.0 / (ff as f64).sqrt()));
    p("ff.b2", vec![d], Init::Zeros);
}

/// Ordered parameter layout; a pure function of the config.
fn layout(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    let (de, dw, da) = (cfg.d_enc, cfg.d_w, cfg.d_align);
    let p = |out: &mut Vec<ParamSpec>, name: &str, shape: Vec<usize>, init| {
        out.push(ParamSpec {
            name: name.to_string(),
            shape,
            init,
        })
    };
    let pd = cfg.patch_dim();
    p(
        &mut out,
        "enc.patch.w",
        vec![pd, de],
        Init::Normal(1.0 / (pd as f64).sqrt()),
    );
    p(&mut out, "enc.patch.b", vec![de], Init::Zeros);
    p(
        &mut out,
        "enc.pos",
        vec![cfg.patches(), de],
        Init::Normal(0.1),
    );
    for l in 0..cfg.enc_layers {
        block_specs(&mut out, &format!("enc.{l}"), de, cfg.enc_ff);
    }
    p(&mut out, "enc.ln_f.g", vec![de], Init::Ones);
    p(&mut out, "enc.ln_f.b", vec![de], Init::Zeros);
    p(
        &mut out,
        "proj.w",
        vec![de, dw],
        Init::Normal(1.0 / (de as f64).sqrt()),
    );
    p(&mut out, "proj.b", vec![dw], Init::Zeros);
    p(
        &mut out,
        "dec.tok",
        vec![cfg.vocab_size, dw],
        Init::Normal(0.1),
    );
    p(
        &mut out,
        "dec.pos",
        vec![cfg.max_positions(), dw],
        Init::Normal(0.1),
    );
    for l in 0..cfg.dec_layers {
        block_specs(&mut out, &format!("dec.{l}"), dw, cfg.dec_ff);
    }
    p(&mut out, "dec.ln_f.g", vec![dw], Init::Ones);
    p(&mut out, "dec.ln_f.b", vec![dw], Init::Zeros);
    p(
        &mut out,
        "head.w",
        vec![dw, cfg.vocab_size],
        Init::Normal(1.0 / (dw as f64).sqrt()),
    );
    p(&mut out, "head.b", vec![cfg.vocab_size], Init::Zeros);
    let cells = ModelConfig::SEG_CELLS * ModelConfig::SEG_CELLS;
    p(
        &mut out,
        "seg.w",
        vec![de, cells],
        Init::Normal(1.0 / (de as f64).sqrt()),
    );
    p(&mut out, "seg.b", vec![cells], Init::Zeros);
    for (name, din) in [
        ("map.ve", de),
        ("map.te", dw),
        ("map.vt", de),
        ("map.tt", dw),
    ] {
        p(
            &mut out,
            &format!("{name}.w"),
            vec![din, da],
            Init::Normal(1.0 / (din as f64).sqrt()),
        );
        p(&mut out, &format!("{name}.b"), vec![da], Init::Zeros);
    }
    out
}

/// Total learnable scalars for a config.
pub fn parameter_count(cfg: &ModelConfig) -> usize {
    layout(cfg)
        .iter()
        .map(|s| s.shape.iter().product::<usize>())
        .sum()
}

/// All learnable arrays plus the vocabulary and instruction sequences they
/// were trained with.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState<T> {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub instructions: InstructionSet,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ModelState<T> {
    pub fn init(
        config: ModelConfig,
        vocab: Vocab,
        instructions: InstructionSet,
    ) -> Result<Self, ModelError> {
        config.validate().map_err(ModelError::Config)?;
        if vocab.len() != config.vocab_size {
            return Err(ModelError::Config(format!(
                "vocab has {} tokens, config expects {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        for seq in [&instructions.representation, &instructions.generation] {
            if seq.is_empty() || seq.len() > config.max_instruction_len {
                return Err(ModelError::Config("instruction length out of range".into()));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let specs = layout(&config);
        let mut names = Vec::with_capacity(specs.len());
        let mut params = Vec::with_capacity(specs.len());
        for s in specs {
            let n: usize = s.shape.iter().product();
            let data: Vec<T> = match s.init {
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
                Init::Normal(std) => {
                    let dist = Normal::new(0.0, std).expect("positive std");
                    (0..n)
                        .map(|_| T::from_f64_lossy(dist.sample(&mut rng)))
                        .collect()
                }
            };
            names.push(s.name);
            params.push(Tensor::new(s.shape, data)?);
        }
        Ok(Self::from_parts(config, vocab, instructions, names, params))
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        vocab: Vocab,
        instructions: InstructionSet,
        names: Vec<String>,
        params: Vec<Tensor<T>>,
    ) -> Self {
        let index = names
            .iter()
            .enumerate()
            .map(|(i, n)| (n.clone(), i))
            .collect();
        Self {
            config,
            vocab,
            instructions,
            names,
            params,
            index,
        }
    }

    /// Checks names and shapes against the config layout.
    pub(crate) fn check_layout(&self) -> Result<(), ModelError> {
        let specs = layout(&self.config);
        if specs.len() != self.params.len() {
            return Err(ModelError::ConfigMismatch(format!(
                "{} arrays stored, layout has {}",
                self.params.len(),
                specs.len()
            )));
        }
        for (s, (n, p)) in specs.iter().zip(self.names.iter().zip(&self.params)) {
            if &s.name != n || s.shape != p.shape() {
                return Err(ModelError::ConfigMismatch(format!(
                    "array {n} {:?} does not match layout {} {:?}",
                    p.shape(),
                    s.name,
                    s.shape
                )));
            }
        }
        Ok(())
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(Tensor::is_finite)
    }

    pub fn cast<U: Real>(&self) -> ModelState<U> {
        ModelState::from_parts(
            self.config.clone(),
            self.vocab.clone(),
            self.instructions.clone(),
            self.names.clone(),
            self.params.iter().map(Tensor::cast).collect(),
        )
    }

    /// Records every array on `tape`; trainable leaves collect gradients.
    pub fn bind<'s>(&'s self, tape: &mut Tape<T>, trainable: bool) -> Params<'s, T> {
        let vars = self
            .params
            .iter()
            .map(|p| {
                let mut t = p.clone();
                t.set_requires_grad(trainable);
                tape.leaf(t)
            })
            .collect();
        Params { state: self, vars }
    }
}

/// Parameters bound to one tape.
pub struct Params<'s, T> {
    pub state: &'s ModelState<T>,
    pub vars: Vec<Var>,
}

impl<T: Real> Params<'_, T> {
    pub fn get(&self, name: &str) -> Var {
        let i = self
            .state
            .param_index(name)
            .unwrap_or_else(|| panic!("no parameter named {name}"));
        self.vars[i]
    }

    pub fn config(&self) -> &ModelConfig {
        &self.state.config
    }
}
