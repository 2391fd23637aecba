//! Reverse-mode differentiation on an append-only operation tape.
//!
//! Every operation appends one node recording its opcode, input node ids,
//! and the evaluated value. `gradient` walks the nodes in reverse and builds
//! each vector-Jacobian product out of the same primitive set, so adjoint
//! expressions land on the tape as ordinary differentiable nodes. That
//! closure under differentiation is what makes gradients-of-gradients and
//! Hessian-vector products work without special casing.
//!
//! Tapes are single-writer by construction (`RefCell`, no `Sync`); distinct
//! tapes over separate tensors can run on separate threads freely.

use std::cell::RefCell;

use crate::error::{Error, Result};

use super::tensor::Tensor;

// ── Opcodes ──

#[derive(Debug, Clone, PartialEq)]
enum OpKind {
    Leaf,
    /// Value carrier that blocks gradient flow (detached or literal data).
    Constant,
    Add,
    Sub,
    Mul,
    Matmul,
    Scale(f64),
    Sum,
    Mean,
    Square,
    Relu,
    Tanh,
    Exp,
    Log,
    Recip,
    Transpose,
    Concat,
    Slice { start: usize, len: usize },
    Broadcast { shape: Vec<usize> },
    Reduce { shape: Vec<usize> },
}

impl OpKind {
    fn name(&self) -> &'static str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Constant => "constant",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Matmul => "matmul",
            OpKind::Scale(_) => "scale",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::Square => "square",
            OpKind::Relu => "relu",
            OpKind::Tanh => "tanh",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::Recip => "recip",
            OpKind::Transpose => "transpose",
            OpKind::Concat => "concat",
            OpKind::Slice { .. } => "slice",
            OpKind::Broadcast { .. } => "broadcast",
            OpKind::Reduce { .. } => "reduce",
        }
    }
}

fn eval_op(kind: &OpKind, inputs: &[&Tensor]) -> Result<Tensor> {
    match kind {
        OpKind::Leaf | OpKind::Constant => Err(Error::Config(
            "leaf and constant nodes carry their own value".to_string(),
        )),
        OpKind::Add => inputs[0].add(inputs[1]),
        OpKind::Sub => inputs[0].sub(inputs[1]),
        OpKind::Mul => inputs[0].mul(inputs[1]),
        OpKind::Matmul => inputs[0].matmul(inputs[1]),
        OpKind::Scale(c) => Ok(inputs[0].scale(*c)),
        OpKind::Sum => Ok(inputs[0].sum()),
        OpKind::Mean => Ok(inputs[0].mean()),
        OpKind::Square => Ok(inputs[0].map(|v| v * v)),
        OpKind::Relu => Ok(inputs[0].map(|v| if v > 0.0 { v } else { 0.0 })),
        OpKind::Tanh => Ok(inputs[0].map(f64::tanh)),
        OpKind::Exp => Ok(inputs[0].map(f64::exp)),
        OpKind::Log => Ok(inputs[0].map(f64::ln)),
        OpKind::Recip => Ok(inputs[0].map(f64::recip)),
        OpKind::Transpose => inputs[0].transpose2d(),
        OpKind::Concat => Tensor::concat_last(inputs),
        OpKind::Slice { start, len } => inputs[0].slice_last(*start, *len),
        OpKind::Broadcast { shape } => inputs[0].broadcast_to(shape),
        OpKind::Reduce { shape } => inputs[0].reduce_to(shape),
    }
}

struct Node {
    kind: OpKind,
    inputs: Vec<usize>,
    value: Tensor,
}

/// Append-only record of primitive operations over tensors.
///
/// Nodes are topologically ordered: inputs always precede consumers, and
/// adjoint nodes built by `gradient` always follow the output they
/// differentiate, so a backward sweep bounded by the output id never
/// revisits them.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to one tape node. Cheap to copy; never outlives its tape.
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Tape {
        Tape::default()
    }

    pub fn node_count(&self) -> usize {
        self.nodes.borrow().len()
    }

    /// Record a differentiable input.
    pub fn var(&self, value: Tensor) -> Result<Var<'_>> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        Ok(self.push_raw(OpKind::Leaf, Vec::new(), value))
    }

    /// Record a value that never receives gradient.
    pub fn constant(&self, value: Tensor) -> Result<Var<'_>> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: "constant" });
        }
        Ok(self.push_raw(OpKind::Constant, Vec::new(), value))
    }

    /// Recompute every non-leaf node from its inputs and compare bits
    /// against the stored values. A divergence would mean an operation
    /// depends on hidden state.
    pub fn replay_check(&self) -> Result<()> {
        let count = self.node_count();
        for i in 0..count {
            let (kind, inputs) = self.node_meta(i);
            if matches!(kind, OpKind::Leaf | OpKind::Constant) {
                continue;
            }
            let recomputed = {
                let nodes = self.nodes.borrow();
                let refs: Vec<&Tensor> = inputs.iter().map(|&j| &nodes[j].value).collect();
                eval_op(&kind, &refs)?
            };
            let nodes = self.nodes.borrow();
            let stored = &nodes[i].value;
            let identical = recomputed.shape() == stored.shape()
                && recomputed
                    .data()
                    .iter()
                    .zip(stored.data())
                    .all(|(a, b)| a.to_bits() == b.to_bits());
            if !identical {
                return Err(Error::Config(format!(
                    "replay diverged at node {i} ({})",
                    kind.name()
                )));
            }
        }
        Ok(())
    }

    fn push_raw(&self, kind: OpKind, inputs: Vec<usize>, value: Tensor) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            kind,
            inputs,
            value,
        });
        Var { tape: self, id }
    }

    fn push(&self, kind: OpKind, inputs: Vec<usize>) -> Result<Var<'_>> {
        let value = {
            let nodes = self.nodes.borrow();
            let refs: Vec<&Tensor> = inputs.iter().map(|&j| &nodes[j].value).collect();
            eval_op(&kind, &refs)?
        };
        if !value.all_finite() {
            return Err(Error::NonFinite { op: kind.name() });
        }
        Ok(self.push_raw(kind, inputs, value))
    }

    fn node_meta(&self, id: usize) -> (OpKind, Vec<usize>) {
        let nodes = self.nodes.borrow();
        (nodes[id].kind.clone(), nodes[id].inputs.clone())
    }

    fn shape_of(&self, id: usize) -> Vec<usize> {
        self.nodes.borrow()[id].value.shape().to_vec()
    }

    fn value_of(&self, id: usize) -> Tensor {
        self.nodes.borrow()[id].value.clone()
    }

    fn is_constant(&self, id: usize) -> bool {
        matches!(self.nodes.borrow()[id].kind, OpKind::Constant)
    }
}

impl<'t> Var<'t> {
    pub(crate) fn tape_ref(self) -> &'t Tape {
        self.tape
    }

    pub fn value(self) -> Tensor {
        self.tape.value_of(self.id)
    }

    pub fn shape(self) -> Vec<usize> {
        self.tape.shape_of(self.id)
    }

    pub fn scalar_value(self) -> Result<f64> {
        self.value().scalar_value()
    }

    fn same_tape(self, other: Var<'t>, op: &'static str) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::UnknownVar(format!(
                "{op} operand was recorded on a different tape"
            )))
        }
    }

    /// Align shapes for elementwise ops: exact match passes through, a
    /// scalar operand is broadcast to the other side, anything else errors.
    fn coerced(
        self,
        rhs: Var<'t>,
        op: &'static str,
    ) -> Result<(Var<'t>, Var<'t>)> {
        self.same_tape(rhs, op)?;
        let (ls, rs) = (self.shape(), rhs.shape());
        if ls == rs {
            Ok((self, rhs))
        } else if rs.iter().product::<usize>() == 1 && rs.len() <= 1 {
            Ok((self, rhs.broadcast(&ls)?))
        } else if ls.iter().product::<usize>() == 1 && ls.len() <= 1 {
            Ok((self.broadcast(&rs)?, rhs))
        } else {
            Err(Error::ShapeMismatch {
                op,
                lhs: ls,
                rhs: rs,
            })
        }
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.coerced(rhs, "add")?;
        a.tape.push(OpKind::Add, vec![a.id, b.id])
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.coerced(rhs, "sub")?;
        a.tape.push(OpKind::Sub, vec![a.id, b.id])
    }

    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let (a, b) = self.coerced(rhs, "mul")?;
        a.tape.push(OpKind::Mul, vec![a.id, b.id])
    }

    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(rhs, "matmul")?;
        self.tape.push(OpKind::Matmul, vec![self.id, rhs.id])
    }

    pub fn scale(self, c: f64) -> Result<Var<'t>> {
        if !c.is_finite() {
            return Err(Error::NonFinite { op: "scale" });
        }
        self.tape.push(OpKind::Scale(c), vec![self.id])
    }

    pub fn sum(self) -> Result<Var<'t>> {
        self.tape.push(OpKind::Sum, vec![self.id])
    }

    pub fn mean(self) -> Result<Var<'t>> {
        self.tape.push(OpKind::Mean, vec![self.id])
    }

    pub fn square(self) -> Result<Var<'t>> {
        self.tape.push(OpKind::Square, vec![self.id])
    }

    pub fn relu(self) -> Result<Var<'t>> {
        self.tape.push(OpKind::Relu, vec![self.id])
    }

    pub fn tanh(self) -> Result<Var<'t>> {
        self.tape.push(OpKind::Tanh, vec![self.id])
    }

    pub fn exp(self) -> Result<Var<'t>> {
        self.tape.push(OpKind::Exp, vec![self.id])
    }

    pub fn log(self) -> Result<Var<'t>> {
        self.tape.push(OpKind::Log, vec![self.id])
    }

    pub fn recip(self) -> Result<Var<'t>> {
        self.tape.push(OpKind::Recip, vec![self.id])
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        self.tape.push(OpKind::Transpose, vec![self.id])
    }

    pub fn broadcast(self, shape: &[usize]) -> Result<Var<'t>> {
        self.tape.push(
            OpKind::Broadcast {
                shape: shape.to_vec(),
            },
            vec![self.id],
        )
    }

    /// Adjoint of `broadcast`: sum entries back down to `shape`.
    pub fn reduce_to(self, shape: &[usize]) -> Result<Var<'t>> {
        self.tape.push(
            OpKind::Reduce {
                shape: shape.to_vec(),
            },
            vec![self.id],
        )
    }

    pub fn concat(parts: &[Var<'t>]) -> Result<Var<'t>> {
        let first = *parts.first().ok_or_else(|| {
            Error::Config("concat requires at least one operand".to_string())
        })?;
        for p in parts {
            first.same_tape(*p, "concat")?;
        }
        first
            .tape
            .push(OpKind::Concat, parts.iter().map(|p| p.id).collect())
    }

    pub fn slice_last(self, start: usize, len: usize) -> Result<Var<'t>> {
        self.tape.push(OpKind::Slice { start, len }, vec![self.id])
    }

    /// Same value, recorded as a constant: gradient flow stops here.
    pub fn detach(self) -> Var<'t> {
        self.tape
            .push_raw(OpKind::Constant, Vec::new(), self.value())
    }

    /// Reverse-mode gradients of a scalar output.
    ///
    /// Returns one var per requested input, aligned with `wrt`. Inputs with
    /// no differentiable path to the output (including constants) get zero
    /// tensors of matching shape. The returned vars live on the same tape
    /// and are themselves differentiable.
    pub fn gradient(self, wrt: &[Var<'t>]) -> Result<Vec<Var<'t>>> {
        let tape = self.tape;
        for w in wrt {
            if !std::ptr::eq(w.tape, tape) {
                return Err(Error::UnknownVar(
                    "gradient target was recorded on a different tape".to_string(),
                ));
            }
        }
        let out_shape = self.shape();
        if out_shape.iter().product::<usize>() != 1 || out_shape.len() > 1 {
            return Err(Error::NonScalarOutput { shape: out_shape });
        }

        // Forward sweep: which nodes lie on a path from some wrt var.
        let n = self.id + 1;
        let mut needs = vec![false; n];
        for w in wrt {
            if w.id < n && !tape.is_constant(w.id) {
                needs[w.id] = true;
            }
        }
        for i in 0..n {
            if needs[i] {
                continue;
            }
            let nodes = tape.nodes.borrow();
            if nodes[i].inputs.iter().any(|&j| needs[j]) {
                drop(nodes);
                needs[i] = true;
            }
        }

        // Backward sweep over the frozen prefix; VJP nodes appended here get
        // ids > self.id and are never revisited.
        let mut adjoint: Vec<Option<Var<'t>>> = vec![None; n];
        if needs[self.id] {
            adjoint[self.id] = Some(tape.constant(Tensor::ones(&out_shape))?);
        }
        for i in (0..n).rev() {
            let Some(g) = adjoint[i] else { continue };
            let (kind, inputs) = tape.node_meta(i);
            let out = Var { tape, id: i };
            let mut contribs: Vec<(usize, Var<'t>)> = Vec::new();
            match kind {
                OpKind::Leaf | OpKind::Constant => {}
                OpKind::Add => {
                    if needs[inputs[0]] {
                        contribs.push((inputs[0], g));
                    }
                    if needs[inputs[1]] {
                        contribs.push((inputs[1], g));
                    }
                }
                OpKind::Sub => {
                    if needs[inputs[0]] {
                        contribs.push((inputs[0], g));
                    }
                    if needs[inputs[1]] {
                        contribs.push((inputs[1], g.scale(-1.0)?));
                    }
                }
                OpKind::Mul => {
                    let a = Var { tape, id: inputs[0] };
                    let b = Var { tape, id: inputs[1] };
                    if needs[inputs[0]] {
                        contribs.push((inputs[0], g.mul(b)?));
                    }
                    if needs[inputs[1]] {
                        contribs.push((inputs[1], g.mul(a)?));
                    }
                }
                OpKind::Matmul => {
                    let a = Var { tape, id: inputs[0] };
                    let b = Var { tape, id: inputs[1] };
                    if needs[inputs[0]] {
                        contribs.push((inputs[0], g.matmul(b.transpose()?)?));
                    }
                    if needs[inputs[1]] {
                        contribs.push((inputs[1], a.transpose()?.matmul(g)?));
                    }
                }
                OpKind::Scale(c) => {
                    if needs[inputs[0]] {
                        contribs.push((inputs[0], g.scale(c)?));
                    }
                }
                OpKind::Sum => {
                    if needs[inputs[0]] {
                        let target = tape.shape_of(inputs[0]);
                        contribs.push((inputs[0], g.broadcast(&target)?));
                    }
                }
                OpKind::Mean => {
                    if needs[inputs[0]] {
                        let target = tape.shape_of(inputs[0]);
                        let numel: usize = target.iter().product();
                        contribs.push((
                            inputs[0],
                            g.scale(1.0 / numel as f64)?.broadcast(&target)?,
                        ));
                    }
                }
                OpKind::Square => {
                    if needs[inputs[0]] {
                        let a = Var { tape, id: inputs[0] };
                        contribs.push((inputs[0], g.mul(a)?.scale(2.0)?));
                    }
                }
                OpKind::Relu => {
                    if needs[inputs[0]] {
                        // Subgradient 0 at the kink; mask is data, not graph.
                        let mask = tape
                            .value_of(inputs[0])
                            .map(|v| if v > 0.0 { 1.0 } else { 0.0 });
                        let mask = tape.constant(mask)?;
                        contribs.push((inputs[0], g.mul(mask)?));
                    }
                }
                OpKind::Tanh => {
                    if needs[inputs[0]] {
                        let ones = tape.constant(Tensor::ones(&out.shape()))?;
                        contribs.push((inputs[0], g.mul(ones.sub(out.square()?)?)?));
                    }
                }
                OpKind::Exp => {
                    if needs[inputs[0]] {
                        contribs.push((inputs[0], g.mul(out)?));
                    }
                }
                OpKind::Log => {
                    if needs[inputs[0]] {
                        let a = Var { tape, id: inputs[0] };
                        contribs.push((inputs[0], g.mul(a.recip()?)?));
                    }
                }
                OpKind::Recip => {
                    if needs[inputs[0]] {
                        contribs.push((inputs[0], g.mul(out.square()?)?.scale(-1.0)?));
                    }
                }
                OpKind::Transpose => {
                    if needs[inputs[0]] {
                        contribs.push((inputs[0], g.transpose()?));
                    }
                }
                OpKind::Concat => {
                    let mut start = 0usize;
                    for &inp in &inputs {
                        let w = *tape
                            .shape_of(inp)
                            .last()
                            .expect("concat operands have positive rank");
                        if needs[inp] {
                            contribs.push((inp, g.slice_last(start, w)?));
                        }
                        start += w;
                    }
                }
                OpKind::Slice { start, len } => {
                    if needs[inputs[0]] {
                        // Zero-pad back to the source width.
                        let src_shape = tape.shape_of(inputs[0]);
                        let w = *src_shape.last().expect("slice source has positive rank");
                        let mut pad_shape = src_shape.clone();
                        let mut parts: Vec<Var<'t>> = Vec::new();
                        if start > 0 {
                            *pad_shape.last_mut().unwrap() = start;
                            parts.push(tape.constant(Tensor::zeros(&pad_shape))?);
                        }
                        parts.push(g);
                        if start + len < w {
                            *pad_shape.last_mut().unwrap() = w - start - len;
                            parts.push(tape.constant(Tensor::zeros(&pad_shape))?);
                        }
                        let padded = if parts.len() == 1 {
                            g
                        } else {
                            Var::concat(&parts)?
                        };
                        contribs.push((inputs[0], padded));
                    }
                }
                OpKind::Broadcast { .. } => {
                    if needs[inputs[0]] {
                        let target = tape.shape_of(inputs[0]);
                        contribs.push((inputs[0], g.reduce_to(&target)?));
                    }
                }
                OpKind::Reduce { .. } => {
                    if needs[inputs[0]] {
                        let target = tape.shape_of(inputs[0]);
                        contribs.push((inputs[0], g.broadcast(&target)?));
                    }
                }
            }
            for (target, c) in contribs {
                adjoint[target] = Some(match adjoint[target] {
                    None => c,
                    Some(prev) => prev.add(c)?,
                });
            }
        }

        let mut grads = Vec::with_capacity(wrt.len());
        for w in wrt {
            let found = if w.id < n && !tape.is_constant(w.id) {
                adjoint[w.id]
            } else {
                None
            };
            grads.push(match found {
                Some(g) => g,
                None => tape.constant(Tensor::zeros(&w.shape()))?,
            });
        }
        Ok(grads)
    }

    /// Gradient values as plain tensors.
    pub fn gradient_values(self, wrt: &[Var<'t>]) -> Result<Vec<Tensor>> {
        Ok(self.gradient(wrt)?.into_iter().map(Var::value).collect())
    }

    /// d/d`wrt2` of (d`self`/d`wrt`); the first derivative must be scalar.
    pub fn gradient_of_gradient(self, wrt: Var<'t>, wrt2: Var<'t>) -> Result<Var<'t>> {
        let g = self.gradient(&[wrt])?[0];
        let g_shape = g.shape();
        if g_shape.iter().product::<usize>() != 1 || g_shape.len() > 1 {
            return Err(Error::NonScalarOutput { shape: g_shape });
        }
        Ok(g.gradient(&[wrt2])?[0])
    }

    /// Hessian-vector product: d/d`wrt` of ⟨∇self, direction⟩.
    pub fn hvp(self, wrt: &[Var<'t>], direction: &[Tensor]) -> Result<Vec<Var<'t>>> {
        if wrt.is_empty() || wrt.len() != direction.len() {
            return Err(Error::Config(format!(
                "hvp needs matching nonempty lists, got {} vars and {} directions",
                wrt.len(),
                direction.len()
            )));
        }
        let grads = self.gradient(wrt)?;
        let mut dot: Option<Var<'t>> = None;
        for (g, d) in grads.iter().zip(direction) {
            if g.shape() != d.shape() {
                return Err(Error::ShapeMismatch {
                    op: "hvp",
                    lhs: g.shape(),
                    rhs: d.shape().to_vec(),
                });
            }
            let c = self.tape.constant(d.clone())?;
            let term = g.mul(c)?.sum()?;
            dot = Some(match dot {
                None => term,
                Some(p) => p.add(term)?,
            });
        }
        dot.expect("nonempty checked above").gradient(wrt)
    }
}
