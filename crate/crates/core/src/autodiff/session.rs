use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use super::{broadcast_shape, AutodiffError, Bindings, NodeId, Op, Result, Tape};

/// One forward/backward evaluation of a tape over a fixed set of bindings.
pub struct Session<'t, 'b> {
    tape: &'t Tape,
    bindings: &'b Bindings<'b>,
    values: Vec<Option<Array2<f64>>>,
    forwarded: bool,
}

/// Gradients of the loss with respect to every parameter, in
/// [`Tape::params`] order.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    ids: Vec<NodeId>,
    grads: Vec<Array2<f64>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Array2<f64>> {
        self.ids
            .iter()
            .position(|&p| p == id)
            .map(|i| &self.grads[i])
    }

    pub fn as_slice(&self) -> &[Array2<f64>] {
        &self.grads
    }

    pub fn into_vec(self) -> Vec<Array2<f64>> {
        self.grads
    }
}

impl<'t, 'b> Session<'t, 'b> {
    pub fn new(tape: &'t Tape, bindings: &'b Bindings<'b>) -> Self {
        Self {
            tape,
            bindings,
            values: vec![None; tape.len()],
            forwarded: false,
        }
    }

    pub fn value(&self, id: NodeId) -> Option<&Array2<f64>> {
        if self.tape.nodes[id.0].op.is_leaf() {
            self.bindings.get(id)
        } else {
            self.values[id.0].as_ref()
        }
    }

    fn val(&self, id: NodeId) -> &Array2<f64> {
        self.value(id).expect("value computed in topological order")
    }

    /// Evaluates every node in topological order and returns the loss, if
    /// the tape has one.
    pub fn forward(&mut self) -> Result<Option<f64>> {
        for (idx, node) in self.tape.nodes.iter().enumerate() {
            if node.op.is_leaf() {
                if self.bindings.get(NodeId(idx)).is_none() {
                    return Err(AutodiffError::Unbound {
                        node: idx,
                        label: node.label.clone(),
                    });
                }
                continue;
            }
            let out = self.eval(idx)?;
            self.values[idx] = Some(out);
        }
        self.forwarded = true;
        match self.tape.loss() {
            Some(_) => self.loss().map(Some),
            None => Ok(None),
        }
    }

    pub fn loss(&self) -> Result<f64> {
        if !self.forwarded {
            return Err(AutodiffError::State);
        }
        let id = self.tape.loss().ok_or(AutodiffError::NoLoss)?;
        let v = self.val(id);
        if v.dim() != (1, 1) {
            return Err(AutodiffError::NonScalarLoss(v.nrows(), v.ncols()));
        }
        Ok(v[[0, 0]])
    }

    fn shape_err(&self, idx: usize, detail: String) -> AutodiffError {
        AutodiffError::Shape {
            node: idx,
            op: self.tape.nodes[idx].op.name(),
            detail,
        }
    }

    fn eval(&self, idx: usize) -> Result<Array2<f64>> {
        let node = &self.tape.nodes[idx];
        let inp = |k: usize| self.val(node.inputs[k]);
        let out = match &node.op {
            Op::Input | Op::Parameter => unreachable!("leaves are bound, not evaluated"),
            Op::Add | Op::Sub | Op::Mul | Op::Div => {
                let (a, b) = (inp(0), inp(1));
                if broadcast_shape(a.dim(), b.dim()).is_none() {
                    return Err(self.shape_err(idx, format!("{:?} vs {:?}", a.dim(), b.dim())));
                }
                match node.op {
                    Op::Add => a + b,
                    Op::Sub => a - b,
                    Op::Mul => a * b,
                    _ => a / b,
                }
            }
            Op::MatMul => {
                let (a, b) = (inp(0), inp(1));
                if a.ncols() != b.nrows() {
                    return Err(self.shape_err(idx, format!("{:?} x {:?}", a.dim(), b.dim())));
                }
                a.dot(b)
            }
            Op::Sigmoid => inp(0).mapv(sigmoid),
            Op::Tanh => inp(0).mapv(f64::tanh),
            Op::LeakyRelu(alpha) => {
                let alpha = *alpha;
                inp(0).mapv(|x| if x > 0.0 { x } else { alpha * x })
            }
            Op::Softplus => inp(0).mapv(softplus),
            Op::Log => inp(0).mapv(f64::ln),
            Op::Square => inp(0).mapv(|x| x * x),
            Op::Scale(c) => inp(0) * *c,
            Op::Offset(c) => inp(0) + *c,
            Op::SliceCols { start, end } => {
                let a = inp(0);
                if *end > a.ncols() {
                    return Err(
                        self.shape_err(idx, format!("cols {start}..{end} of {:?}", a.dim()))
                    );
                }
                a.slice(s![.., *start..*end]).to_owned()
            }
            Op::ConcatCols | Op::ConcatRows => {
                let axis = if node.op == Op::ConcatCols {
                    Axis(1)
                } else {
                    Axis(0)
                };
                let views: Vec<ArrayView2<f64>> =
                    node.inputs.iter().map(|&i| self.val(i).view()).collect();
                ndarray::concatenate(axis, &views)
                    .map_err(|e| self.shape_err(idx, e.to_string()))?
            }
            Op::Dropout { .. } => {
                let (x, mask) = (inp(0), inp(1));
                if x.dim() != mask.dim() {
                    return Err(
                        self.shape_err(idx, format!("mask {:?} vs {:?}", mask.dim(), x.dim()))
                    );
                }
                x * mask
            }
            Op::Sum => Array2::from_elem((1, 1), inp(0).sum()),
            Op::Mean => {
                let a = inp(0);
                Array2::from_elem((1, 1), a.sum() / a.len() as f64)
            }
        };
        Ok(out)
    }

    /// Propagates the loss gradient back to every parameter. Parameters with
    /// no path to the loss get exact zeros.
    pub fn backward(&self) -> Result<Gradients> {
        if !self.forwarded {
            return Err(AutodiffError::State);
        }
        let loss = self.tape.loss().ok_or(AutodiffError::NoLoss)?;
        let lv = self.val(loss);
        if lv.dim() != (1, 1) {
            return Err(AutodiffError::NonScalarLoss(lv.nrows(), lv.ncols()));
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.tape.len()];
        grads[loss.0] = Some(Array2::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            let node = &self.tape.nodes[idx];
            if node.op.is_leaf() || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
        }

        let ids = self.tape.params().to_vec();
        let grads = ids
            .iter()
            .map(|&id| {
                grads[id.0]
                    .take()
                    .unwrap_or_else(|| Array2::zeros(self.val(id).dim()))
            })
            .collect();
        Ok(Gradients { ids, grads })
    }

    fn propagate(&self, idx: usize, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let node = &self.tape.nodes[idx];
        let needs = |k: usize| self.tape.nodes[node.inputs[k].0].requires_grad;
        let inp = |k: usize| self.val(node.inputs[k]);
        let out = || self.values[idx].as_ref().expect("forward value");
        let mut send = |k: usize, gi: Array2<f64>| {
            let id = node.inputs[k];
            let target = self.val(id).dim();
            let gi = reduce_to(gi, target);
            match &mut grads[id.0] {
                Some(acc) => *acc += &gi,
                slot @ None => *slot = Some(gi),
            }
        };

        match &node.op {
            Op::Input | Op::Parameter => {}
            Op::Add => {
                if needs(0) {
                    send(0, g.clone());
                }
                if needs(1) {
                    send(1, g.clone());
                }
            }
            Op::Sub => {
                if needs(0) {
                    send(0, g.clone());
                }
                if needs(1) {
                    send(1, -g);
                }
            }
            Op::Mul => {
                if needs(0) {
                    send(0, g * inp(1));
                }
                if needs(1) {
                    send(1, g * inp(0));
                }
            }
            Op::Div => {
                let (a, b) = (inp(0), inp(1));
                if needs(0) {
                    send(0, g / b);
                }
                if needs(1) {
                    let gb = -(g * a) / &b.mapv(|v| v * v);
                    send(1, gb);
                }
            }
            Op::MatMul => {
                let (a, b) = (inp(0), inp(1));
                if needs(0) {
                    send(0, g.dot(&b.t()));
                }
                if needs(1) {
                    send(1, a.t().dot(g));
                }
            }
            Op::Sigmoid => {
                let mut gi = g.clone();
                Zip::from(&mut gi)
                    .and(out())
                    .for_each(|gi, &y| *gi *= y * (1.0 - y));
                send(0, gi);
            }
            Op::Tanh => {
                let mut gi = g.clone();
                Zip::from(&mut gi)
                    .and(out())
                    .for_each(|gi, &y| *gi *= 1.0 - y * y);
                send(0, gi);
            }
            Op::LeakyRelu(alpha) => {
                let mut gi = g.clone();
                Zip::from(&mut gi).and(inp(0)).for_each(|gi, &x| {
                    if x <= 0.0 {
                        *gi *= alpha
                    }
                });
                send(0, gi);
            }
            Op::Softplus => {
                let mut gi = g.clone();
                Zip::from(&mut gi)
                    .and(inp(0))
                    .for_each(|gi, &x| *gi *= sigmoid(x));
                send(0, gi);
            }
            Op::Log => send(0, g / inp(0)),
            Op::Square => send(0, g * &(inp(0) * 2.0)),
            Op::Scale(c) => send(0, g * *c),
            Op::Offset(_) => send(0, g.clone()),
            Op::SliceCols { start, end } => {
                let mut gi = Array2::zeros(inp(0).dim());
                gi.slice_mut(s![.., *start..*end]).assign(g);
                send(0, gi);
            }
            Op::ConcatCols | Op::ConcatRows => {
                let mut offset = 0;
                for k in 0..node.inputs.len() {
                    let dim = inp(k).dim();
                    let (part, width) = if node.op == Op::ConcatCols {
                        (g.slice(s![.., offset..offset + dim.1]), dim.1)
                    } else {
                        (g.slice(s![offset..offset + dim.0, ..]), dim.0)
                    };
                    if needs(k) {
                        send(k, part.to_owned());
                    }
                    offset += width;
                }
            }
            Op::Dropout { .. } => {
                if needs(0) {
                    send(0, g * inp(1));
                }
            }
            Op::Sum => send(0, Array2::from_elem(inp(0).dim(), g[[0, 0]])),
            Op::Mean => {
                let a = inp(0);
                send(0, Array2::from_elem(a.dim(), g[[0, 0]] / a.len() as f64));
            }
        }
    }
}

/// Sums a broadcast gradient back down to the operand's shape.
fn reduce_to(g: Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    if g.dim() == shape {
        g
    } else if shape == (1, 1) {
        Array2::from_elem((1, 1), g.sum())
    } else {
        debug_assert_eq!(shape.0, 1);
        g.sum_axis(Axis(0)).insert_axis(Axis(0))
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn scalar(v: f64) -> Array2<f64> {
        Array2::from_elem((1, 1), v)
    }

    #[test]
    fn product_of_scalars() {
        let mut tape = Tape::new();
        let x = tape.input("x");
        let y = tape.input("y");
        let p = tape.mul(x, y);
        tape.set_loss(p);
        let mut b = Bindings::new(&tape);
        b.bind(x, scalar(3.0)).bind(y, scalar(4.0));
        let mut s = Session::new(&tape, &b);
        assert_eq!(s.forward().unwrap(), Some(12.0));
    }

    #[test]
    fn activation_values() {
        let mut tape = Tape::new();
        let x = tape.input("x");
        let sp = tape.softplus(x);
        let lr = tape.leaky_relu(x, 0.1);
        let mut b = Bindings::new(&tape);
        b.bind(x, array![[0.0, -2.0]]);
        let mut s = Session::new(&tape, &b);
        s.forward().unwrap();
        assert!((s.value(sp).unwrap()[[0, 0]] - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((s.value(lr).unwrap()[[0, 1]] + 0.2).abs() < 1e-15);
        assert_eq!(softplus(-1000.0), 0.0);
        assert_eq!(softplus(1000.0), 1000.0);
    }

    #[test]
    fn square_and_sigmoid_gradients() {
        let mut tape = Tape::new();
        let x = tape.parameter("x");
        let sq = tape.square(x);
        tape.set_loss(sq);
        let xv = scalar(3.0);
        let mut b = Bindings::new(&tape);
        b.bind_ref(x, &xv);
        let mut s = Session::new(&tape, &b);
        s.forward().unwrap();
        assert_eq!(s.backward().unwrap().get(x).unwrap()[[0, 0]], 6.0);

        let mut tape = Tape::new();
        let x = tape.parameter("x");
        let sg = tape.sigmoid(x);
        tape.set_loss(sg);
        let mut b = Bindings::new(&tape);
        b.bind(x, scalar(0.0));
        let mut s = Session::new(&tape, &b);
        s.forward().unwrap();
        assert_eq!(s.backward().unwrap().get(x).unwrap()[[0, 0]], 0.25);
    }

    #[test]
    fn backward_before_forward_is_state_error() {
        let mut tape = Tape::new();
        let x = tape.parameter("x");
        tape.set_loss(x);
        let mut b = Bindings::new(&tape);
        b.bind(x, scalar(1.0));
        let s = Session::new(&tape, &b);
        assert_eq!(s.backward().unwrap_err(), AutodiffError::State);
    }

    #[test]
    fn shape_mismatch_reported() {
        let mut tape = Tape::new();
        let a = tape.input("a");
        let b = tape.input("b");
        let m = tape.matmul(a, b);
        tape.set_loss(m);
        let mut bind = Bindings::new(&tape);
        bind.bind(a, Array2::zeros((2, 3)))
            .bind(b, Array2::zeros((2, 3)));
        let mut s = Session::new(&tape, &bind);
        assert!(matches!(
            s.forward(),
            Err(AutodiffError::Shape { op: "matmul", .. })
        ));
    }

    #[test]
    fn unbound_input_rejected() {
        let mut tape = Tape::new();
        let a = tape.input("a");
        tape.set_loss(a);
        let b = Bindings::new(&tape);
        let mut s = Session::new(&tape, &b);
        assert!(matches!(
            s.forward(),
            Err(AutodiffError::Unbound { node: 0, .. })
        ));
    }

    #[test]
    fn disconnected_parameter_gets_exact_zero() {
        let mut tape = Tape::new();
        let used = tape.parameter("used");
        let unused = tape.parameter("unused");
        let l = tape.sum(used);
        tape.set_loss(l);
        let mut b = Bindings::new(&tape);
        b.bind(used, array![[1.0, 2.0]])
            .bind(unused, array![[3.0], [4.0]]);
        let mut s = Session::new(&tape, &b);
        s.forward().unwrap();
        let g = s.backward().unwrap();
        assert_eq!(g.get(unused).unwrap(), &Array2::<f64>::zeros((2, 1)));
        assert_eq!(g.get(used).unwrap(), &array![[1.0, 1.0]]);
    }

    #[test]
    fn row_broadcast_bias_gradient_sums_rows() {
        let mut tape = Tape::new();
        let x = tape.input("x");
        let bias = tape.parameter("b");
        let y = tape.add(x, bias);
        let l = tape.sum(y);
        tape.set_loss(l);
        let mut b = Bindings::new(&tape);
        b.bind(x, Array2::zeros((3, 2)))
            .bind(bias, array![[1.0, 2.0]]);
        let mut s = Session::new(&tape, &b);
        assert_eq!(s.forward().unwrap(), Some(9.0));
        assert_eq!(
            s.backward().unwrap().get(bias).unwrap(),
            &array![[3.0, 3.0]]
        );
    }
}
