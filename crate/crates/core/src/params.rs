//! Named, enumerable parameter sets.
//!
//! Parameter groups are generic over their payload so one layout serves
//! values (`Tensor`), tape handles (`Var`) and gradients alike.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

macro_rules! param_group {
    ($(#[$meta:meta])* $name:ident { $($field:ident),* $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name<T> {
            $(pub $field: T,)*
        }

        impl<T> $name<T> {
            pub const NAMES: &'static [&'static str] = &[$(stringify!($field)),*];

            pub fn map<'s, U>(&'s self, mut f: impl FnMut(&str, &'s T) -> U) -> $name<U> {
                $name { $($field: f(stringify!($field), &self.$field),)* }
            }

            pub fn entries(&self) -> Vec<(&'static str, &T)> {
                vec![$((stringify!($field), &self.$field)),*]
            }

            pub fn entries_mut(&mut self) -> Vec<(&'static str, &mut T)> {
                vec![$((stringify!($field), &mut self.$field)),*]
            }
        }
    };
}

param_group! {
    /// Attribute-side encoder: attention projections, group-compact gate
    /// and activation MLP.
    ImseParams {
        q_w, q_b, k_w, k_b, v_w, v_b,
        gate_w1, gate_b1, gate_w2, gate_b2,
        mlp_w1, mlp_b1, mlp_w2, mlp_b2,
    }
}

param_group! {
    /// Patch-side decoder: attention projections, inverted-residual patch
    /// mixer and output MLP.
    SmidParams {
        q_w, q_b, k_w, k_b, v_w, v_b,
        ex_w, ex_b, se_w, se_b, na_w, na_b,
        mlp_w1, mlp_b1, mlp_w2, mlp_b2,
    }
}

param_group! {
    /// Average-pooled features to attribute space: `D → N_s`.
    HeadParams { w, b }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DsvtmParams<T> {
    pub imse: ImseParams<T>,
    pub smid: SmidParams<T>,
}

impl<T> DsvtmParams<T> {
    pub fn map<'s, U>(&'s self, mut f: impl FnMut(&str, &'s T) -> U) -> DsvtmParams<U> {
        DsvtmParams {
            imse: self.imse.map(|n, t| f(&format!("imse.{n}"), t)),
            smid: self.smid.map(|n, t| f(&format!("smid.{n}"), t)),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub head: HeadParams<T>,
    /// One parameter set per granularity, coarse to fine.
    pub dsvtm: Vec<DsvtmParams<T>>,
}

impl<T> ModelParams<T> {
    /// Maps every parameter, passing its full name (e.g. `g2.smid.ex_w`).
    pub fn map<'s, U>(&'s self, mut f: impl FnMut(&str, &'s T) -> U) -> ModelParams<U> {
        ModelParams {
            head: self.head.map(|n, t| f(&format!("head.{n}"), t)),
            dsvtm: self
                .dsvtm
                .iter()
                .enumerate()
                .map(|(g, d)| d.map(|n, t| f(&format!("g{}.{n}", g + 1), t)))
                .collect(),
        }
    }

    /// All parameters in canonical order with their full names.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out: Vec<(String, &T)> = self.head.entries().into_iter().map(|(n, t)| (format!("head.{n}"), t)).collect();
        for (g, d) in self.dsvtm.iter().enumerate() {
            for (n, t) in d.imse.entries() {
                out.push((format!("g{}.imse.{n}", g + 1), t));
            }
            for (n, t) in d.smid.entries() {
                out.push((format!("g{}.smid.{n}", g + 1), t));
            }
        }
        out
    }

    pub fn values(&self) -> Vec<&T> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    pub fn values_mut(&mut self) -> Vec<&mut T> {
        let mut out: Vec<&mut T> = self.head.entries_mut().into_iter().map(|(_, t)| t).collect();
        for d in &mut self.dsvtm {
            out.extend(d.imse.entries_mut().into_iter().map(|(_, t)| t));
            out.extend(d.smid.entries_mut().into_iter().map(|(_, t)| t));
        }
        out
    }

    pub fn len(&self) -> usize {
        HeadParams::<T>::NAMES.len() + self.dsvtm.len() * (ImseParams::<T>::NAMES.len() + SmidParams::<T>::NAMES.len())
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

impl<T: Clone> ModelParams<T> {
    /// Rebuilds a parameter set with this layout from values in canonical order.
    pub fn with_values<U: Clone>(&self, values: &[U]) -> ModelParams<U> {
        assert_eq!(values.len(), self.len(), "value count matches layout");
        let mut it = values.iter();
        self.map(|_, _| it.next().expect("length checked").clone())
    }
}

/// Shapes of every learnable matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelLayout {
    pub dim: usize,
    pub attributes: usize,
    /// `ceil(N_s / ℏ)`, the width of the group-compact gate.
    pub gate_hidden: usize,
    pub patch_counts: Vec<usize>,
    /// Expanded patch dimension `N_h` per granularity.
    pub hidden: Vec<usize>,
}

impl ModelLayout {
    pub fn new(dim: usize, attributes: usize, groups: usize, patch_counts: Vec<usize>, hidden_ratio: usize) -> Self {
        ModelLayout {
            dim,
            attributes,
            gate_hidden: attributes.div_ceil(groups),
            hidden: patch_counts.iter().map(|n| n * hidden_ratio).collect(),
            patch_counts,
        }
    }

    pub fn shapes(&self) -> ModelParams<Vec<usize>> {
        let (d, n_s, h) = (self.dim, self.attributes, self.gate_hidden);
        let dsvtm = self
            .patch_counts
            .iter()
            .zip(&self.hidden)
            .map(|(&n_v, &n_h)| DsvtmParams {
                imse: ImseParams {
                    q_w: vec![d, d],
                    q_b: vec![d],
                    k_w: vec![d, d],
                    k_b: vec![d],
                    v_w: vec![d, d],
                    v_b: vec![d],
                    gate_w1: vec![n_s, h],
                    gate_b1: vec![h],
                    gate_w2: vec![h, n_s],
                    gate_b2: vec![n_s],
                    mlp_w1: vec![d, d],
                    mlp_b1: vec![d],
                    mlp_w2: vec![d, d],
                    mlp_b2: vec![d],
                },
                smid: SmidParams {
                    q_w: vec![d, d],
                    q_b: vec![d],
                    k_w: vec![d, d],
                    k_b: vec![d],
                    v_w: vec![d, d],
                    v_b: vec![d],
                    ex_w: vec![n_v, n_h],
                    ex_b: vec![n_h],
                    se_w: vec![n_h, n_h],
                    se_b: vec![n_h],
                    na_w: vec![n_h, n_v],
                    na_b: vec![n_v],
                    mlp_w1: vec![d, d],
                    mlp_b1: vec![d],
                    mlp_w2: vec![d, d],
                    mlp_b2: vec![d],
                },
            })
            .collect();
        ModelParams {
            head: HeadParams {
                w: vec![d, n_s],
                b: vec![n_s],
            },
            dsvtm,
        }
    }

    pub fn zeros(&self) -> ModelParams<Tensor> {
        self.shapes().map(|_, s| Tensor::zeros(s.clone()))
    }

    /// Random initialisation: weights `N(0, 1/fan_in)`, biases zero. Matrices
    /// that close a residual branch are further scaled by `branch_scale`,
    /// query and key projections by `attention_scale`.
    pub fn init<R: Rng>(&self, rng: &mut R, branch_scale: f64, attention_scale: f64) -> ModelParams<Tensor> {
        self.shapes().map(|name, shape| {
            if shape.len() == 1 {
                return Tensor::zeros(shape.clone());
            }
            let fan_in = shape[0] as f64;
            let closes_branch = ["v_w", "mlp_w2", "na_w"].iter().any(|s| name.ends_with(s));
            let query_key = name.ends_with("q_w") || name.ends_with("k_w");
            let extra = if closes_branch {
                branch_scale
            } else if query_key {
                attention_scale
            } else {
                1.0
            };
            let std = fan_in.sqrt().recip() * extra;
            let n = shape[0] * shape[1];
            Tensor::new(shape.clone(), (0..n).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect())
                .expect("shape")
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique_and_ordered() {
        let layout = ModelLayout::new(4, 6, 3, vec![4, 16, 64], 2);
        let shapes = layout.shapes();
        let names: Vec<String> = shapes.named().into_iter().map(|(n, _)| n).collect();
        assert_eq!(names.len(), shapes.len());
        assert_eq!(names[0], "head.w");
        assert_eq!(names[2], "g1.imse.q_w");
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
        let mapped = shapes.map(|n, _| n.to_string());
        assert_eq!(mapped.values().into_iter().cloned().collect::<Vec<_>>(), names);
    }

    #[test]
    fn gate_width_uses_ceiling() {
        assert_eq!(ModelLayout::new(4, 7, 3, vec![4], 2).gate_hidden, 3);
        assert_eq!(ModelLayout::new(4, 312, 28, vec![4], 2).gate_hidden, 12);
    }

    #[test]
    fn hidden_exceeds_patches() {
        let layout = ModelLayout::new(4, 6, 3, vec![4, 16, 64], 2);
        assert!(layout.hidden.iter().zip(&layout.patch_counts).all(|(h, v)| h > v));
    }
}
