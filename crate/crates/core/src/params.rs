//! Named parameter traversal and tape binding.
//!
//! Weight structs are declared through [`param_struct!`], which derives a
//! stable name for every tensor (used by checkpoints and the optimizer) and a
//! mirror struct of tape [`Var`]s with the same layout.

use crate::autodiff::{Tape, Var};
use crate::tensor::Tensor;

pub trait Params {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>);
    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>);

    fn named(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.visit(prefix, &mut out);
        out
    }

    fn named_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.visit_mut(prefix, &mut out);
        out
    }

    fn num_scalars(&self) -> usize {
        self.named("").iter().map(|(_, t)| t.len()).sum()
    }
}

/// Put a value's tensors on a tape, trainable or constant.
pub trait Bind {
    type Vars;
    fn bind(&self, tape: &mut Tape, trainable: bool) -> Self::Vars;
}

/// Flatten bound vars in the same order as [`Params::visit`].
pub trait VarList {
    fn collect_vars(&self, out: &mut Vec<Var>);

    fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        self.collect_vars(&mut out);
        out
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

impl Params for Tensor {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((prefix.to_string(), self));
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((prefix.to_string(), self));
    }
}

impl Bind for Tensor {
    type Vars = Var;
    fn bind(&self, tape: &mut Tape, trainable: bool) -> Var {
        if trainable {
            tape.param(self.clone())
        } else {
            tape.constant(self.clone())
        }
    }
}

impl VarList for Var {
    fn collect_vars(&self, out: &mut Vec<Var>) {
        out.push(*self);
    }
}

impl<T: Params> Params for Vec<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (i, x) in self.iter().enumerate() {
            x.visit(&join(prefix, &i.to_string()), out);
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        for (i, x) in self.iter_mut().enumerate() {
            x.visit_mut(&join(prefix, &i.to_string()), out);
        }
    }
}

impl<T: Bind> Bind for Vec<T> {
    type Vars = Vec<T::Vars>;
    fn bind(&self, tape: &mut Tape, trainable: bool) -> Self::Vars {
        self.iter().map(|x| x.bind(tape, trainable)).collect()
    }
}

impl<V: VarList> VarList for Vec<V> {
    fn collect_vars(&self, out: &mut Vec<Var>) {
        for v in self {
            v.collect_vars(out);
        }
    }
}

macro_rules! param_struct {
    (
        $(#[$meta:meta])*
        pub struct $name:ident => $vars:ident {
            $( $(#[$fmeta:meta])* pub $field:ident : $ty:ty ),* $(,)?
        }
    ) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name {
            $( $(#[$fmeta])* pub $field: $ty ),*
        }

        #[derive(Clone, Debug)]
        pub struct $vars {
            $( pub $field: <$ty as $crate::params::Bind>::Vars ),*
        }

        impl $crate::params::Params for $name {
            fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a $crate::tensor::Tensor)>) {
                $( self.$field.visit(&$crate::params::join(prefix, stringify!($field)), out); )*
            }

            fn visit_mut<'a>(
                &'a mut self,
                prefix: &str,
                out: &mut Vec<(String, &'a mut $crate::tensor::Tensor)>,
            ) {
                $( self.$field.visit_mut(&$crate::params::join(prefix, stringify!($field)), out); )*
            }
        }

        impl $crate::params::Bind for $name {
            type Vars = $vars;
            fn bind(&self, tape: &mut $crate::autodiff::Tape, trainable: bool) -> $vars {
                $vars { $( $field: self.$field.bind(tape, trainable) ),* }
            }
        }

        impl $crate::params::VarList for $vars {
            fn collect_vars(&self, out: &mut Vec<$crate::autodiff::Var>) {
                $( self.$field.collect_vars(out); )*
            }
        }
    };
}

pub(crate) use param_struct;

param_struct! {
    /// Affine map `x · w + b`.
    pub struct Linear => LinearVars {
        pub w: Tensor,
        pub b: Tensor,
    }
}

impl Linear {
    pub fn new<R: rand::Rng + ?Sized>(fan_in: usize, fan_out: usize, std: f64, rng: &mut R) -> Self {
        Self { w: Tensor::randn(fan_in, fan_out, std, rng), b: Tensor::zeros(1, fan_out) }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self { w: Tensor::zeros(fan_in, fan_out), b: Tensor::zeros(1, fan_out) }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let mut y = x.matmul(&self.w);
        for r in 0..y.rows() {
            for (o, b) in y.row_slice_mut(r).iter_mut().zip(self.b.data()) {
                *o += b;
            }
        }
        y
    }
}

impl LinearVars {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Var {
        tape.linear(x, self.w, self.b)
    }
}

param_struct! {
    /// Two affine maps with a GELU in between.
    pub struct Mlp => MlpVars {
        pub fc1: Linear,
        pub fc2: Linear,
    }
}

impl Mlp {
    pub fn new<R: rand::Rng + ?Sized>(dim: usize, hidden: usize, std: f64, rng: &mut R) -> Self {
        Self { fc1: Linear::new(dim, hidden, std, rng), fc2: Linear::new(hidden, dim, std, rng) }
    }
}

impl MlpVars {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Var {
        let h = self.fc1.apply(tape, x);
        let h = tape.gelu(h);
        self.fc2.apply(tape, h)
    }
}

param_struct! {
    pub struct LayerNorm => LayerNormVars {
        pub gamma: Tensor,
        pub beta: Tensor,
    }
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(dim: usize) -> Self {
        Self { gamma: Tensor::ones(1, dim), beta: Tensor::zeros(1, dim) }
    }
}

impl LayerNormVars {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Var {
        tape.layer_norm(x, self.gamma, self.beta, LayerNorm::EPS)
    }
}
