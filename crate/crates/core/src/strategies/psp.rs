//! Parameter superposition with ±1 context keys.

use crate::error::{Error, Result};
use crate::nets::{LayerSpec, Network};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// One ±1 key per parametric layer, acting on that layer's input: per feature
/// for linear layers, per channel for convolutions.
#[derive(Debug, Clone, PartialEq)]
pub struct PspKeys {
    keys: Vec<Tensor>,
}

fn key_shape(layer: &LayerSpec) -> Option<Vec<usize>> {
    match *layer {
        LayerSpec::Linear { in_features, .. } => Some(vec![in_features]),
        LayerSpec::Conv2d { in_channels, .. } => Some(vec![in_channels, 1, 1]),
        _ => None,
    }
}

impl PspKeys {
    pub fn random(net: &Network, rng: &mut Rng) -> Self {
        let keys = net
            .spec()
            .layers
            .iter()
            .filter_map(key_shape)
            .map(|shape| {
                let n = shape.iter().product();
                let data = (0..n).map(|_| if rng.coin() { 1.0 } else { -1.0 }).collect();
                Tensor::new(shape, data).expect("key shape is valid")
            })
            .collect();
        PspKeys { keys }
    }

    pub fn keys(&self) -> &[Tensor] {
        &self.keys
    }

    /// Forward pass with every parametric layer's input multiplied by its key.
    pub fn forward(&self, net: &Network, tape: &mut Tape, x: Var) -> Result<Var> {
        let mut h = x;
        let mut k = 0;
        for (i, layer) in net.spec().layers.iter().enumerate() {
            if layer.has_params() {
                let key = tape.constant(self.keys[k].clone())?;
                h = tape.mul(h, key)?;
                k += 1;
            }
            h = net.forward_layer(tape, i, h)?;
        }
        Ok(h)
    }
}

/// Folds keys into the weights: scales each weight's input dimension by the
/// key. Applying the same keys twice restores the weights exactly.
pub fn psp_apply_key(net: &mut Network, keys: &PspKeys) -> Result<()> {
    let layers = net.param_layers();
    if layers.len() != keys.keys.len() {
        return Err(Error::contract(format!(
            "{} keys for {} parametric layers",
            keys.keys.len(),
            layers.len()
        )));
    }
    for (&i, key) in layers.iter().zip(&keys.keys) {
        let name = net.weight_name(i);
        let k = key.data();
        let w = &mut net.params_mut().get_mut(&name).expect("weight exists").value;
        let shape = w.shape().to_vec();
        let data = w.data_mut();
        if shape.len() == 2 {
            // Linear: in × out, rows are inputs.
            for (row, &kv) in data.chunks_mut(shape[1]).zip(k) {
                row.iter_mut().for_each(|v| *v *= kv);
            }
        } else {
            // Conv: out × in × kh × kw.
            let inner = shape[2] * shape[3];
            for (j, block) in data.chunks_mut(inner).enumerate() {
                let kv = k[j % shape[1]];
                block.iter_mut().for_each(|v| *v *= kv);
            }
        }
    }
    Ok(())
}
