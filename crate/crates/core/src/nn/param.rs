use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use super::tape::Tape;
use super::{NnError, Scalar, Tensor};

/// Learning-rate group of a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Backbone,
    Head,
}

impl std::fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::Head => "head",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<T>,
    pub grad: Option<Tensor<T>>,
    /// Momentum buffer, created on the first optimizer step.
    pub velocity: Option<Vec<T>>,
}

/// Named, grouped collection of trainable tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        value: Tensor<T>,
    ) -> Result<ParamId, NnError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(NnError::DuplicateParam(name));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter {
            name,
            group,
            value,
            grad: None,
            velocity: None,
        });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn by_name(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of scalar weights.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Add the parameter gradients held by `tape` into each parameter's
    /// `grad`, creating it when absent. Parameters the tape never reached
    /// get a zero gradient.
    pub fn accumulate_grads(&mut self, tape: &Tape<T>) {
        for (id, g) in tape.param_grads() {
            let p = &mut self.params[id.0];
            match &mut p.grad {
                Some(existing) => {
                    for (d, v) in existing.data_mut().iter_mut().zip(g) {
                        *d += v;
                    }
                }
                None => {
                    p.grad = Some(Tensor::from_vec(p.value.shape(), g).expect("grad shape"));
                }
            }
        }
        for p in &mut self.params {
            if p.grad.is_none() {
                p.grad = Some(Tensor::zeros(p.value.shape()));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut store = ParamStore::<f64>::new();
        store
            .add("a", ParamGroup::Backbone, Tensor::zeros(&[1]))
            .unwrap();
        assert!(matches!(
            store.add("a", ParamGroup::Head, Tensor::zeros(&[1])),
            Err(NnError::DuplicateParam(_))
        ));
    }

    #[test]
    fn sum_of_squares_gradient_and_accumulation() {
        let mut store = ParamStore::<f64>::new();
        let id = store
            .add(
                "p",
                ParamGroup::Head,
                Tensor::from_vec(&[3], vec![1.0, -2.0, 0.5]).unwrap(),
            )
            .unwrap();
        let other = store
            .add("q", ParamGroup::Head, Tensor::full(&[2], 7.0))
            .unwrap();
        for round in 1..=2 {
            let mut tape = Tape::new();
            let p = tape.param(id, &store.get(id).value);
            let _q = tape.param(other, &store.get(other).value);
            let loss = tape.sum_squares(p);
            tape.backward(loss).unwrap();
            store.accumulate_grads(&tape);
            let g = store.get(id).grad.as_ref().unwrap().data().to_vec();
            let expected: Vec<f64> = [2.0, -4.0, 1.0].iter().map(|v| v * round as f64).collect();
            assert_eq!(g, expected);
            assert_eq!(store.get(other).grad.as_ref().unwrap().data(), &[0.0, 0.0]);
        }
    }
}
