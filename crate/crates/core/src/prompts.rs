//! Learnable dual prompts and their assembly into complete prompt pairs.
//!
//! Each bank holds context, state and class tokens. Prototypes are added to
//! the state tokens and a sampled class token is added (broadcast) to every
//! class token; the normal and anomaly prompts of a pair share that sample.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{CopsError, Result};
use crate::params::{param_struct, Bind};
use crate::tensor::Tensor;

/// Standard deviation of the initial prompt tokens.
pub const PROMPT_INIT_STD: f64 = 0.02;

param_struct! {
    pub struct PromptBank => PromptBankVars {
        pub context: Tensor,
        pub state: Tensor,
        pub class: Tensor,
    }
}

param_struct! {
    pub struct DualPromptParams => DualPromptVars {
        pub normal: PromptBank,
        pub anomaly: PromptBank,
    }
}

impl PromptBank {
    fn random(k: usize, m: usize, n: usize, c: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            context: Tensor::randn(k, c, PROMPT_INIT_STD, rng),
            state: Tensor::randn(m, c, PROMPT_INIT_STD, rng),
            class: Tensor::randn(n, c, PROMPT_INIT_STD, rng),
        }
    }
}

impl DualPromptParams {
    pub fn context_len(&self) -> usize {
        self.normal.context.rows()
    }

    pub fn state_len(&self) -> usize {
        self.normal.state.rows()
    }

    pub fn class_len(&self) -> usize {
        self.normal.class.rows()
    }

    pub fn prompt_len(&self) -> usize {
        self.context_len() + self.state_len() + self.class_len()
    }

    pub fn dim(&self) -> usize {
        self.normal.context.cols()
    }
}

pub fn init_dual_prompts(k: usize, m: usize, n: usize, c: usize, seed: u64) -> Result<DualPromptParams> {
    if k == 0 || m == 0 || n == 0 || c == 0 {
        return Err(CopsError::InvalidArgument(format!(
            "prompt sizes must be positive (K={k}, M={m}, N={n}, C={c})"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = PromptBank::random(k, m, n, c, &mut rng);
    let anomaly = PromptBank::random(k, m, n, c, &mut rng);
    Ok(DualPromptParams { normal, anomaly })
}

/// The `i`-th complete normal/anomaly prompt pair, each `L × C`.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptPair {
    pub normal: Tensor,
    pub anomaly: Tensor,
    pub index: usize,
}

impl PromptBankVars {
    /// `R` prompts stacked into `(R·L) × C`. Without a sample the class
    /// tokens stay raw and `r` must be 1.
    fn assemble(&self, tape: &mut Tape, prototypes: Option<Var>, samples: Option<Var>, r: usize) -> Var {
        let (k, m) = (tape.value(self.context).rows(), tape.value(self.state).rows());
        let n = tape.value(self.class).rows();
        let state = match prototypes {
            Some(p) => tape.add(self.state, p),
            None => self.state,
        };
        let class = match samples {
            Some(s) => {
                let w = tape.gather_rows(self.class, (0..r * n).map(|j| j % n).collect());
                let s = tape.gather_rows(s, (0..r * n).map(|j| j / n).collect());
                tape.add(w, s)
            }
            None => self.class,
        };
        let pool = tape.concat(&[self.context, state, class]);
        let mut index = Vec::with_capacity(r * (k + m + n));
        for i in 0..r {
            index.extend(0..k + m);
            index.extend((0..n).map(|j| k + m + i * n + j));
        }
        tape.gather_rows(pool, index)
    }
}

impl DualPromptVars {
    /// Stacked prompts on the tape: first the `R` normal prompts, then the `R`
    /// anomaly prompts, `(2·R·L) × C` in total.
    pub fn assemble(
        &self,
        tape: &mut Tape,
        prototypes: Option<(Var, Var)>,
        samples: Option<Var>,
        r: usize,
    ) -> Var {
        assert!(samples.is_some() || r == 1, "raw class tokens give exactly one pair");
        let normal = self.normal.assemble(tape, prototypes.map(|p| p.0), samples, r);
        let anomaly = self.anomaly.assemble(tape, prototypes.map(|p| p.1), samples, r);
        tape.concat(&[normal, anomaly])
    }
}

pub fn assemble_prompts(
    params: &DualPromptParams,
    p_n: &Tensor,
    p_a: &Tensor,
    s: &Tensor,
) -> Result<Vec<PromptPair>> {
    let (m, c) = (params.state_len(), params.dim());
    for (name, p) in [("normal prototypes", p_n), ("anomaly prototypes", p_a)] {
        if p.shape() != (m, c) {
            return Err(CopsError::shape(
                "assemble_prompts",
                format!("{name} are {}x{}, expected {m}x{c}", p.rows(), p.cols()),
            ));
        }
    }
    if s.cols() != c {
        return Err(CopsError::shape("assemble_prompts", format!("samples have width {}, expected {c}", s.cols())));
    }
    let r = s.rows();
    if r == 0 {
        return Ok(Vec::new());
    }
    let l = params.prompt_len();
    let mut tape = Tape::new();
    let vars = params.bind(&mut tape, false);
    let pn = tape.constant(p_n.clone());
    let pa = tape.constant(p_a.clone());
    let sv = tape.constant(s.clone());
    let stacked = vars.assemble(&mut tape, Some((pn, pa)), Some(sv), r);
    let all = tape.value(stacked);
    Ok((0..r)
        .map(|i| PromptPair {
            normal: all.slice_rows(i * l, l),
            anomaly: all.slice_rows((r + i) * l, l),
            index: i,
        })
        .collect())
}
