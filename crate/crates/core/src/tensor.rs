//! Reverse-mode autodiff over dynamically shaped f64 arrays.
//!
//! Each op builds a node holding its value, its parent tensors and a closure
//! that maps the upstream gradient to per-parent gradients. Nodes whose
//! parents all have `requires_grad == false` are constants and carry no
//! closure, so eval-mode forwards (frozen encoder) build no tape.

use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

use ndarray::{ArrayD, IxDyn};

use crate::params::ParameterStore;

pub type Arr = ArrayD<f64>;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

/// Gradient function: (upstream grad, parent values) -> gradient per parent.
/// `None` entries skip parents that do not require grad.
pub(crate) type BackFn = Box<dyn Fn(&Arr, &[&Arr]) -> Vec<Option<Arr>>>;

pub(crate) struct Node {
    id: u64,
    value: Arr,
    requires_grad: bool,
    grad: RefCell<Option<Arr>>,
    parents: Vec<Tensor>,
    backward: Option<BackFn>,
}

#[derive(Clone)]
pub struct Tensor {
    pub(crate) node: Rc<Node>,
}

impl Tensor {
    /// Constant: never tracked by the tape.
    pub fn lit(value: Arr) -> Tensor {
        Tensor {
            node: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                value,
                requires_grad: false,
                grad: RefCell::new(None),
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    /// Leaf parameter: participates in backward and accumulates a gradient.
    pub fn var(value: Arr) -> Tensor {
        Tensor {
            node: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                value,
                requires_grad: true,
                grad: RefCell::new(None),
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::lit(Arr::from_elem(IxDyn(&[]), v))
    }

    /// Internal node constructor. Downgrades to a constant when no parent
    /// requires grad.
    pub(crate) fn from_op(value: Arr, parents: Vec<Tensor>, backward: BackFn) -> Tensor {
        let track = parents.iter().any(|p| p.node.requires_grad);
        Tensor {
            node: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                value,
                requires_grad: track,
                grad: RefCell::new(None),
                parents: if track { parents } else { Vec::new() },
                backward: if track { Some(backward) } else { None },
            }),
        }
    }

    pub fn value(&self) -> &Arr {
        &self.node.value
    }

    pub fn shape(&self) -> &[usize] {
        self.node.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// Gradient accumulated by the latest `backward` call, if any.
    pub fn grad(&self) -> Option<Arr> {
        self.node.grad.borrow().clone()
    }

    /// Cut the tape: same value, no history.
    pub fn detach(&self) -> Tensor {
        Tensor::lit(self.node.value.clone())
    }

    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.node.value.len(), 1);
        *self.node.value.iter().next().expect("empty tensor")
    }

    /// Backpropagate from a scalar output. Accumulates into the `grad` cell
    /// of every reachable tensor that requires grad.
    pub fn backward(&self) {
        assert_eq!(
            self.node.value.len(),
            1,
            "backward() needs a scalar output, got shape {:?}",
            self.shape()
        );
        if !self.node.requires_grad {
            return;
        }

        // Iterative DFS topological order over the DAG.
        let mut order: Vec<Rc<Node>> = Vec::new();
        let mut visited: HashSet<u64> = HashSet::new();
        let mut stack: Vec<(Rc<Node>, bool)> = vec![(self.node.clone(), false)];
        while let Some((node, expanded)) = stack.pop() {
            if expanded {
                order.push(node);
                continue;
            }
            if !visited.insert(node.id) {
                continue;
            }
            stack.push((node.clone(), true));
            for p in &node.parents {
                if p.node.requires_grad && !visited.contains(&p.node.id) {
                    stack.push((p.node.clone(), false));
                }
            }
        }

        let mut grads: HashMap<u64, Arr> = HashMap::new();
        grads.insert(self.node.id, Arr::from_elem(IxDyn(self.shape()), 1.0));

        for node in order.iter().rev() {
            let Some(g) = grads.remove(&node.id) else {
                continue;
            };
            if node.parents.is_empty() {
                // Leaf: expose the gradient.
                let mut cell = node.grad.borrow_mut();
                match cell.as_mut() {
                    Some(acc) => *acc += &g,
                    None => *cell = Some(g),
                }
                continue;
            }
            let backward = node.backward.as_ref().expect("interior node without backward");
            let parent_values: Vec<&Arr> = node.parents.iter().map(|p| &p.node.value).collect();
            let parent_grads = backward(&g, &parent_values);
            debug_assert_eq!(parent_grads.len(), node.parents.len());
            for (p, pg) in node.parents.iter().zip(parent_grads) {
                if !p.node.requires_grad {
                    continue;
                }
                let Some(pg) = pg else { continue };
                debug_assert_eq!(
                    pg.shape(),
                    p.shape(),
                    "gradient shape mismatch for node {}",
                    p.node.id
                );
                match grads.get_mut(&p.node.id) {
                    Some(acc) => *acc += &pg,
                    None => {
                        grads.insert(p.node.id, pg);
                    }
                }
            }
        }
    }
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("shape", &self.shape())
            .field("requires_grad", &self.node.requires_grad)
            .finish()
    }
}

/// One training step's view of a `ParameterStore`: each entry bound either as
/// a differentiable leaf or as a constant (frozen entries and buffers).
/// After `backward`, `grads` collects leaf gradients keyed by path.
pub struct Bindings {
    map: std::collections::BTreeMap<String, Tensor>,
}

impl Bindings {
    /// Trainable entries become leaves; frozen entries and buffers constants.
    pub fn train(store: &ParameterStore) -> Bindings {
        let mut map = std::collections::BTreeMap::new();
        for (path, entry) in store.iter() {
            let t = if entry.frozen || entry.buffer {
                Tensor::lit(entry.value.clone())
            } else {
                Tensor::var(entry.value.clone())
            };
            map.insert(path.clone(), t);
        }
        Bindings { map }
    }

    /// Everything constant: inference-only forward, builds no tape.
    pub fn eval(store: &ParameterStore) -> Bindings {
        let mut map = std::collections::BTreeMap::new();
        for (path, entry) in store.iter() {
            map.insert(path.clone(), Tensor::lit(entry.value.clone()));
        }
        Bindings { map }
    }

    pub fn get(&self, path: &str) -> Tensor {
        self.map
            .get(path)
            .unwrap_or_else(|| panic!("no parameter bound at `{path}`"))
            .clone()
    }

    pub fn try_get(&self, path: &str) -> Option<Tensor> {
        self.map.get(path).cloned()
    }

    pub fn contains(&self, path: &str) -> bool {
        self.map.contains_key(path)
    }

    /// Leaf gradients accumulated by the latest backward pass.
    pub fn grads(&self) -> std::collections::BTreeMap<String, Arr> {
        let mut out = std::collections::BTreeMap::new();
        for (path, t) in &self.map {
            if let Some(g) = t.grad() {
                out.insert(path.clone(), g);
            }
        }
        out
    }
}

/// NumPy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0usize; n];
    for i in 0..n {
        let da = if i < n - a.len() { 1 } else { a[i - (n - a.len())] };
        let db = if i < n - b.len() { 1 } else { b[i - (n - b.len())] };
        out[i] = if da == db {
            da
        } else if da == 1 {
            db
        } else if db == 1 {
            da
        } else {
            return None;
        };
    }
    Some(out)
}

/// Sum `g` down to `target` shape (inverse of broadcasting).
pub(crate) fn reduce_to_shape(g: &Arr, target: &[usize]) -> Arr {
    let mut out = g.clone();
    // Collapse extra leading axes.
    while out.ndim() > target.len() {
        out = out.sum_axis(ndarray::Axis(0));
    }
    // Sum axes that were broadcast from 1.
    for ax in 0..target.len() {
        if target[ax] == 1 && out.shape()[ax] != 1 {
            let summed = out.sum_axis(ndarray::Axis(ax));
            out = summed.insert_axis(ndarray::Axis(ax));
        }
    }
    out
}
