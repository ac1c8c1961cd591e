use rand::Rng;

use super::{Activation, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};

/// Stack of affine layers with an activation between them.
///
/// The last layer is affine only.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    /// `(weight [in x out], bias [out])` per layer.
    pub layers: Vec<(ParamId, ParamId)>,
    pub activation: Activation,
}

impl Mlp {
    /// Registers weights for the width chain `widths[0] -> ... -> widths[n]`.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        widths: &[usize],
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(widths.len() >= 2, "an MLP needs at least one layer");
        let layers = widths
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                let bound = (6.0 / (w[0] + w[1]) as f64).sqrt();
                let weight = store.add_uniform(format!("{prefix}.{i}.weight"), &[w[0], w[1]], bound, rng);
                let bias = store.add_filled(format!("{prefix}.{i}.bias"), &[w[1]], 0.0);
                (weight, bias)
            })
            .collect();
        Self { layers, activation }
    }

    pub fn from_layers(layers: Vec<(ParamId, ParamId)>, activation: Activation) -> Self {
        Self { layers, activation }
    }

    pub fn input_width(&self, store: &ParamStore) -> usize {
        store.get(self.layers[0].0).value.rows()
    }

    pub fn output_width(&self, store: &ParamStore) -> usize {
        store.get(self.layers[self.layers.len() - 1].0).value.cols()
    }

    /// Checks that consecutive layer widths chain.
    pub fn validate(&self, store: &ParamStore) -> Result<()> {
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let (wv, bv) = (&store.get(w).value, &store.get(b).value);
            if bv.len() != wv.cols() {
                return Err(Error::Dimension {
                    op: "mlp bias",
                    lhs: wv.shape().to_vec(),
                    rhs: bv.shape().to_vec(),
                });
            }
            if let Some(&(next, _)) = self.layers.get(i + 1) {
                let nv = &store.get(next).value;
                if nv.rows() != wv.cols() {
                    return Err(Error::Dimension {
                        op: "mlp chain",
                        lhs: wv.shape().to_vec(),
                        rhs: nv.shape().to_vec(),
                    });
                }
            }
        }
        Ok(())
    }

    /// `x` is `rows x in`; returns `rows x out`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        self.validate(store)?;
        let mut h = x;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let wv = tape.param(store, w);
            let bv = tape.param(store, b);
            h = tape.matmul(h, wv)?;
            h = tape.add_row(h, bv)?;
            if i + 1 < self.layers.len() {
                h = tape.activate(h, self.activation)?;
            }
        }
        Ok(h)
    }
}
