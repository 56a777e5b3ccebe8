use ndarray::Array2;

/// Dense row-major matrix, the only tensor type the tape knows about.
pub type Mat = Array2<f64>;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Everything a backward closure may look at.
pub(crate) struct BackCtx<'a> {
    pub grad: &'a Mat,
    pub out: &'a Mat,
    pub inputs: Vec<&'a Mat>,
    pub needs: Vec<bool>,
}

pub(crate) type BackwardFn = Box<dyn Fn(&BackCtx<'_>) -> Vec<Option<Mat>>>;

struct Node {
    value: Mat,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    needs_grad: bool,
}

/// Append-only record of a computation. Values are computed eagerly when an
/// op is pushed; [`Tape::backward`] walks the record in reverse.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.nodes.push(Node { value, parents: Vec::new(), backward: None, needs_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// Records a differentiable input (parameter or checked input).
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.nodes.push(Node { value, parents: Vec::new(), backward: None, needs_grad: true });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Scalar read of a 1×1 value.
    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub(crate) fn push_op(&mut self, value: Mat, parents: &[Var], backward: BackwardFn) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: if needs_grad { Some(backward) } else { None },
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a 1×1 root seeded with 1.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward root must be a scalar");
        self.backward_with(root, Mat::from_elem((1, 1), 1.0))
    }

    /// Reverse sweep from an arbitrary root with an explicit seed gradient.
    pub fn backward_with(&self, root: Var, seed: Mat) -> Gradients {
        assert_eq!(self.shape(root), seed.dim(), "seed shape mismatch");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            let Some(backward) = node.backward.as_ref() else {
                continue;
            };
            let Some(grad) = grads[i].take() else {
                continue;
            };
            let ctx = BackCtx {
                grad: &grad,
                out: &node.value,
                inputs: node.parents.iter().map(|&p| &self.nodes[p].value).collect(),
                needs: node.parents.iter().map(|&p| self.nodes[p].needs_grad).collect(),
            };
            let parent_grads = backward(&ctx);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (&p, pg) in node.parents.iter().zip(parent_grads) {
                let Some(pg) = pg else { continue };
                if !self.nodes[p].needs_grad {
                    continue;
                }
                debug_assert_eq!(pg.dim(), self.nodes[p].value.dim(), "grad shape at node {p}");
                match &mut grads[p] {
                    Some(acc) => *acc += &pg,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Gradients { grads }
    }
}

/// Gradients of a backward sweep, retained for leaves only.
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Mat> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}
