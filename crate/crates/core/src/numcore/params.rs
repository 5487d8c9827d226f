//! Structured parameter groups.
//!
//! Parameter structs are generic over their leaf type so the same layout can
//! hold tensors, tape handles, gradients or optimiser moments.

use rand::RngExt;

use super::tensor::Tensor;

/// A tree of named leaves that can be mapped, visited and zipped.
pub trait ParamTree<P> {
    type Mapped<Q>;

    fn map_ref<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> Self::Mapped<Q>;

    /// Visits leaves in a fixed order with dotted path names.
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a P));

    /// Same order as [`ParamTree::visit`].
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P));

    fn leaves(&self) -> Vec<&P> {
        let mut out = Vec::new();
        self.visit("", &mut |_, p| out.push(p));
        out
    }

    fn leaf_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit("", &mut |n, _| out.push(n.to_string()));
        out
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Implements [`ParamTree`] for a struct generic over `P`.
///
/// `meta` fields are cloned, `leaf` fields are `P`, `list` fields are
/// `Vec<P>` and `group` fields are nested parameter trees.
macro_rules! param_tree {
    ($name:ident;
     meta: [$($meta:ident),* $(,)?];
     leaf: [$($leaf:ident),* $(,)?];
     list: [$($list:ident),* $(,)?];
     group: [$($group:ident),* $(,)?]) => {
        impl<P> $crate::numcore::params::ParamTree<P> for $name<P> {
            type Mapped<Q> = $name<Q>;

            fn map_ref<Q>(&self, f: &mut dyn FnMut(&P) -> Q) -> $name<Q> {
                $name {
                    $($meta: self.$meta.clone(),)*
                    $($leaf: f(&self.$leaf),)*
                    $($list: self.$list.iter().map(|x| f(x)).collect(),)*
                    $($group: self.$group.map_ref(f),)*
                }
            }

            #[allow(unused_variables)]
            fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a P)) {
                use $crate::numcore::params::join;
                $(f(&join(prefix, stringify!($leaf)), &self.$leaf);)*
                $(for (i, x) in self.$list.iter().enumerate() {
                    f(&join(prefix, &format!("{}.{i}", stringify!($list))), x);
                })*
                $(self.$group.visit(&join(prefix, stringify!($group)), f);)*
            }

            #[allow(unused_variables)]
            fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut P)) {
                use $crate::numcore::params::join;
                $(f(&join(prefix, stringify!($leaf)), &mut self.$leaf);)*
                $(for (i, x) in self.$list.iter_mut().enumerate() {
                    f(&join(prefix, &format!("{}.{i}", stringify!($list))), x);
                })*
                $(self.$group.visit_mut(&join(prefix, stringify!($group)), f);)*
            }
        }
    };
}
pub(crate) use param_tree;

/// Uniform `(-1/√fan_in, 1/√fan_in)` matrix for a bias-free linear map.
pub fn init_linear<R: rand::Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Tensor {
    let bound = 1.0 / (fan_in.max(1) as f32).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::matrix(fan_in, fan_out, data).expect("consistent shape")
}

/// Identity-truncation projection `[rows × cols]`: ones on the main diagonal.
pub fn identity_projection(rows: usize, cols: usize) -> Tensor {
    let mut t = Tensor::zeros(vec![rows, cols]);
    for i in 0..rows.min(cols) {
        t.set(i, i, 1.0);
    }
    t
}
