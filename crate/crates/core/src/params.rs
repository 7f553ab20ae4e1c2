use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Scalar, Tensor};

/// Which component owns a parameter. Keys from different components never
/// collide, so one gradient map can carry the whole pipeline.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamGroup {
    Melt,
    Head,
    Word,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamKey {
    pub group: ParamGroup,
    pub index: usize,
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Ordered, named parameter collection. Insertion order is the manifest
/// order used by checkpoints.
#[derive(Clone, Debug)]
pub struct ParamSet<T> {
    group: ParamGroup,
    params: Vec<Param<T>>,
}

pub type Grads<T> = BTreeMap<ParamKey, Tensor<T>>;

impl<T: Scalar> ParamSet<T> {
    pub fn new(group: ParamGroup) -> Self {
        Self {
            group,
            params: Vec::new(),
        }
    }

    pub fn group(&self) -> ParamGroup {
        self.group
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamKey {
        self.params.push(Param {
            name: name.into(),
            value,
            trainable: true,
        });
        self.key(self.params.len() - 1)
    }

    pub fn key(&self, index: usize) -> ParamKey {
        ParamKey {
            group: self.group,
            index,
        }
    }

    pub fn get(&self, key: ParamKey) -> &Tensor<T> {
        debug_assert_eq!(key.group, self.group);
        &self.params[key.index].value
    }

    pub fn get_mut(&mut self, key: ParamKey) -> &mut Tensor<T> {
        debug_assert_eq!(key.group, self.group);
        &mut self.params[key.index].value
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    pub fn manifest(&self) -> Vec<(String, Vec<usize>)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.value.shape().to_vec()))
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> ParamSet<U> {
        ParamSet {
            group: self.group,
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    trainable: p.trainable,
                })
                .collect(),
        }
    }
}

pub(crate) fn gaussian<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor<T> {
    let normal = Normal::new(0.0, std).expect("valid std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::c(normal.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}
