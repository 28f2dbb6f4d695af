use serde::{Deserialize, Serialize};

use super::Real;

/// Parameter partition used for phase freezing and checkpoint bookkeeping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Extractor,
    AnatomicalBranch,
    AagModules,
    DiagHead,
    ManifHead,
    Segmenter,
}

impl ParamGroup {
    pub const CLASSIFIER: [ParamGroup; 5] = [
        ParamGroup::Extractor,
        ParamGroup::AnatomicalBranch,
        ParamGroup::AagModules,
        ParamGroup::DiagHead,
        ParamGroup::ManifHead,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Extractor => "extractor",
            ParamGroup::AnatomicalBranch => "anatomical_branch",
            ParamGroup::AagModules => "aag_modules",
            ParamGroup::DiagHead => "diag_head",
            ParamGroup::ManifHead => "manif_head",
            ParamGroup::Segmenter => "segmenter",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One named tensor in the store. Non-trainable entries hold running
/// statistics and are never touched by the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub group: ParamGroup,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub value: Vec<T>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        shape: Vec<usize>,
        trainable: bool,
        value: Vec<T>,
    ) -> ParamId {
        let name = name.into();
        assert_eq!(
            shape.iter().product::<usize>(),
            value.len(),
            "param `{name}` value length disagrees with shape"
        );
        assert!(
            self.params.iter().all(|p| p.name != name),
            "duplicate param name `{name}`"
        );
        self.params.push(Param {
            name,
            group,
            shape,
            trainable,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &[T] {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn num_trainable(&self) -> usize {
        self.params
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.value.len())
            .sum()
    }

    /// Flattened copy of every value belonging to `group`, in store order.
    pub fn group_values(&self, group: ParamGroup) -> Vec<T> {
        self.params
            .iter()
            .filter(|p| p.group == group)
            .flat_map(|p| p.value.iter().copied())
            .collect()
    }

    pub fn zero_group(&mut self, group: ParamGroup) {
        for p in self.params.iter_mut().filter(|p| p.group == group) {
            p.value.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    shape: p.shape.clone(),
                    trainable: p.trainable,
                    value: p
                        .value
                        .iter()
                        .map(|v| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                        .collect(),
                })
                .collect(),
        }
    }

    pub fn zeros_like(&self) -> Grads<T> {
        Grads {
            values: self
                .params
                .iter()
                .map(|p| vec![T::zero(); p.value.len()])
                .collect(),
        }
    }
}

/// Gradient buffers parallel to a [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads<T> {
    values: Vec<Vec<T>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, id: ParamId) -> &[T] {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.values[id.0]
    }

    pub fn all(&self) -> &[Vec<T>] {
        &self.values
    }

    pub fn scale(&mut self, s: T) {
        for v in self.values.iter_mut().flatten() {
            *v *= s;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().flatten().all(|v| v.is_finite())
    }
}
