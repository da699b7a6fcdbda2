//! Parameter trees generic over their leaf type.
//!
//! Every learnable structure is written once as `Foo<P>` and instantiated
//! as `Foo<Tensor>` (stored weights), `Foo<Var>` (weights bound on a tape)
//! or `Foo<Vec<f64>>` (gradients and optimizer moments). Visiting order is
//! fixed by field order, so flattened views line up across instantiations.

use crate::autodiff::{Gradients, Tape, Var};
use crate::tensor::Tensor;

pub trait ParamTree<P> {
    type With<Q>: ParamTree<Q>;

    fn map_leaves<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> Self::With<Q>;

    /// Visits leaves in canonical order with a dotted path name.
    fn visit<'a>(&'a self, path: &str, f: &mut dyn FnMut(&str, &'a P));

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut P));

    fn leaves(&self) -> Vec<&P> {
        let mut out = Vec::new();
        self.visit("", &mut |_, p| out.push(p));
        out
    }

    fn named_leaves(&self) -> Vec<(String, &P)> {
        let mut out = Vec::new();
        self.visit("", &mut |n, p| out.push((n.to_string(), p)));
        out
    }

    fn leaf_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, _| n += 1);
        n
    }

    /// Rebuilds a tree of the same structure from a flat leaf list.
    fn from_flat<Q>(&self, flat: Vec<Q>) -> Self::With<Q> {
        let mut it = flat.into_iter();
        self.map_leaves(&mut |_| it.next().expect("flat list shorter than tree"))
    }
}

pub(crate) fn join(path: &str, name: &str) -> String {
    if path.is_empty() {
        name.to_string()
    } else {
        format!("{path}.{name}")
    }
}

/// Implements [`ParamTree`] for a struct whose fields are all trees or leaves.
#[macro_export]
#[doc(hidden)]
macro_rules! param_tree {
    ($name:ident { $($field:ident),* $(,)? }) => {
        impl<P> $crate::params::ParamTree<P> for $name<P> {
            type With<Q> = $name<Q>;

            fn map_leaves<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> $name<Q> {
                $name { $($field: $crate::params::ParamTree::map_leaves(&self.$field, f)),* }
            }

            fn visit<'a>(&'a self, path: &str, f: &mut dyn FnMut(&str, &'a P)) {
                $($crate::params::ParamTree::visit(
                    &self.$field,
                    &$crate::params::join(path, stringify!($field)),
                    f,
                );)*
            }

            fn visit_mut(&mut self, f: &mut dyn FnMut(&mut P)) {
                $($crate::params::ParamTree::visit_mut(&mut self.$field, f);)*
            }
        }
    };
}

/// A single leaf.
#[derive(Clone, Debug, PartialEq)]
pub struct Leaf<P>(pub P);

impl<P> ParamTree<P> for Leaf<P> {
    type With<Q> = Leaf<Q>;

    fn map_leaves<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> Leaf<Q> {
        Leaf(f(&self.0))
    }

    fn visit<'a>(&'a self, path: &str, f: &mut dyn FnMut(&str, &'a P)) {
        f(path, &self.0)
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut P)) {
        f(&mut self.0)
    }
}

impl<P, T: ParamTree<P>> ParamTree<P> for Vec<T> {
    type With<Q> = Vec<T::With<Q>>;

    fn map_leaves<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> Vec<T::With<Q>> {
        self.iter().map(|t| t.map_leaves(f)).collect()
    }

    fn visit<'a>(&'a self, path: &str, f: &mut dyn FnMut(&str, &'a P)) {
        for (i, t) in self.iter().enumerate() {
            t.visit(&join(path, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut P)) {
        for t in self {
            t.visit_mut(f);
        }
    }
}

/// Binds every stored tensor onto `tape` as a differentiable leaf.
pub fn bind<T: ParamTree<Tensor>>(tree: &T, tape: &mut Tape) -> T::With<Var> {
    tree.map_leaves(&mut |t| tape.param(t))
}

/// Binds every stored tensor as a constant (no gradient recorded).
pub fn bind_const<T: ParamTree<Tensor>>(tree: &T, tape: &mut Tape) -> T::With<Var> {
    tree.map_leaves(&mut |t| tape.constant(t.clone()))
}

/// Pulls the gradient for every bound leaf; unused leaves get zeros.
pub fn collect_grads<T: ParamTree<Var>>(bound: &T, grads: &Gradients) -> T::With<Vec<f64>> {
    bound.map_leaves(&mut |v| grads.wrt(*v))
}

pub fn zeros_like<T: ParamTree<Tensor>>(tree: &T) -> T::With<Vec<f64>> {
    tree.map_leaves(&mut |t| vec![0.0; t.len()])
}

pub fn total_len<T: ParamTree<Tensor>>(tree: &T) -> usize {
    tree.leaves().iter().map(|t| t.len()).sum()
}

/// `acc += other` leafwise.
pub fn accumulate<T: ParamTree<Vec<f64>>>(acc: &mut T, other: &T) {
    let src: Vec<Vec<f64>> = other.leaves().into_iter().cloned().collect();
    let mut it = src.iter();
    acc.visit_mut(&mut |dst| {
        for (d, s) in dst.iter_mut().zip(it.next().unwrap()) {
            *d += s;
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Clone, Debug, PartialEq)]
    struct Pair<P> {
        a: Leaf<P>,
        rest: Vec<Leaf<P>>,
    }
    crate::param_tree!(Pair { a, rest });

    #[test]
    fn names_follow_field_order() {
        let p = Pair {
            a: Leaf(1),
            rest: vec![Leaf(2), Leaf(3)],
        };
        let names: Vec<_> = p.named_leaves().into_iter().map(|(n, v)| (n, *v)).collect();
        assert_eq!(
            names,
            vec![
                ("a".to_string(), 1),
                ("rest.0".to_string(), 2),
                ("rest.1".to_string(), 3)
            ]
        );
        let doubled = p.from_flat(vec![10, 20, 30]);
        assert_eq!(doubled.rest[1].0, 30);
    }
}
