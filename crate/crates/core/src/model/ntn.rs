//! Neural tensor network block: `h = x_qᵀ W[1:k] x_t + V [x_q; x_t] + b`.

use crate::params::ParamStore;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

use super::{glorot, ModelError};

/// Named parameter group `{prefix}.W` (`[k, d, m]`), `{prefix}.V`
/// (`[k, d + m]`), `{prefix}.b` and `{prefix}.u` (both `[k]`).
#[derive(Clone, Copy, Debug)]
pub struct NtnBlock<'p> {
    pub prefix: &'p str,
}

impl<'p> NtnBlock<'p> {
    pub fn new(prefix: &'p str) -> Self {
        NtnBlock { prefix }
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{part}", self.prefix)
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64, d: usize, m: usize, k: usize) {
        let w = self.name("W");
        let v = self.name("V");
        store.insert(&w, glorot(seed, &w, &[k, d, m], d, m));
        store.insert(&v, glorot(seed, &v, &[k, d + m], d + m, k));
        store.insert(&self.name("b"), Tensor::zeros(&[k]));
        store.insert(&self.name("u"), Tensor::zeros(&[k]));
    }

    fn id(&self, store: &ParamStore, part: &str) -> crate::params::ParamId {
        let name = self.name(part);
        store
            .id(&name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    /// Internal feature representation `h` (`[B, k]`).
    pub fn hidden<'a>(
        &self,
        tape: &mut Tape<'a>,
        store: &ParamStore,
        xq: Var,
        xt: Var,
    ) -> Result<Var, ModelError> {
        let w = tape.param(self.id(store, "W"));
        let v = tape.param(self.id(store, "V"));
        let b = tape.param(self.id(store, "b"));
        let bil = tape.bilinear(xq, w, xt)?;
        let z = tape.concat(&[xq, xt])?;
        let lin = tape.linear(z, v)?;
        let h = tape.add(bil, lin)?;
        Ok(tape.add_bias(h, b)?)
    }

    /// `uᵀ tanh(h)` from an already activated `tanh(h)`.
    pub fn project(
        &self,
        tape: &mut Tape<'_>,
        store: &ParamStore,
        act: Var,
    ) -> Result<Var, ModelError> {
        let u = tape.param(self.id(store, "u"));
        Ok(tape.row_dot(act, u)?)
    }
}
