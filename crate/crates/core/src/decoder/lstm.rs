use crate::nn::{Conv2d, ConvOpts, Ctx, ParamStore};
use crate::tensor::{Float, Tensor};

/// Convolutional LSTM cell with 3x3 gates over `[x, h]`.
#[derive(Clone, Debug)]
pub struct ConvLstmCell {
    gates: Conv2d,
    hidden: usize,
}

impl ConvLstmCell {
    pub fn new(ps: &mut ParamStore, name: &str, input: usize, hidden: usize) -> Self {
        let gates = Conv2d::new(ps, &format!("{name}.gates"), input + hidden, 4 * hidden, 3, ConvOpts::default());
        // forget gate starts open
        let b = gates.bias.expect("gate bias");
        ps.get_mut(b).value[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
        ConvLstmCell { gates, hidden }
    }

    pub fn forward<T: Float>(&self, ctx: &Ctx<T>, x: &Tensor<T>, h: &Tensor<T>, c: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
        let n = self.hidden;
        let g = self.gates.forward(ctx, &Tensor::cat(&[x.clone(), h.clone()], 1));
        let i = g.narrow(1, 0, n).sigmoid();
        let f = g.narrow(1, n, n).sigmoid();
        let o = g.narrow(1, 2 * n, n).sigmoid();
        let u = g.narrow(1, 3 * n, n).tanh();
        let c = f.mul(c).add(&i.mul(&u));
        let h = o.mul(&c.tanh());
        (h, c)
    }
}
