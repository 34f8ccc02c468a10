use crate::diffcore::{Graph, NodeId, ParamId, ParamStore, Tensor, Unary};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Activation {
    Relu,
    /// `softplus(beta·x)/beta`, a smooth ReLU.
    Softplus(f64),
}

/// Affine layer `x·W + b` with `W: in×out`, `b: 1×out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, weight: Tensor, bias: Tensor) -> Self {
        let (in_dim, out_dim) = (weight.rows(), weight.cols());
        assert_eq!(bias.shape().cols, out_dim);
        Linear {
            weight: store.add(format!("{name}.weight"), weight),
            bias: store.add(format!("{name}.bias"), bias),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        self.forward_act(g, store, x, None)
    }

    /// `act(x·W + b)` as one fused graph op.
    pub fn forward_act(&self, g: &mut Graph, store: &ParamStore, x: NodeId, act: Option<Activation>) -> Result<NodeId> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let act = act.map(|a| match a {
            Activation::Relu => Unary::Relu,
            Activation::Softplus(beta) => Unary::Softplus(beta),
        });
        g.dense(x, w, b, act)
    }
}

/// Stack of linear layers with a shared hidden activation and a linear head.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    pub fn hidden_layers(&self) -> usize {
        self.layers.len().saturating_sub(1)
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim).unwrap_or(0)
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let act = (i < last).then_some(self.activation);
            h = layer.forward_act(g, store, h, act)?;
        }
        Ok(h)
    }
}
