//! Named parameter registry with wave/cache partition tags.
//!
//! Every trainable tensor in a model is one entry here. The tag drives
//! two-phase training: the wave set is the recurrent-scan parameter group,
//! the cache set is everything else (embeddings, cache projections, FFN,
//! norms, lm head, reference beams).

use std::collections::HashMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamTag {
    Wave,
    Cache,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub tag: ParamTag,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamSet {
    entries: Vec<ParamEntry>,
    by_name: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, tag: ParamTag, shape: &[usize], values: Vec<f64>) -> ParamId {
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "param {name}: shape {shape:?} vs {} values",
            values.len()
        );
        assert!(!self.by_name.contains_key(name), "duplicate parameter name {name}");
        let id = self.entries.len();
        self.by_name.insert(name.to_string(), id);
        self.entries.push(ParamEntry { name: name.to_string(), tag, shape: shape.to_vec(), values });
        ParamId(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn values(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].values
    }

    pub fn values_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.entries[id.0].values
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &ParamEntry)> {
        self.entries.iter().enumerate().map(|(i, e)| (ParamId(i), e))
    }

    /// Total scalar count in one tag set, or overall with `None`.
    pub fn count_scalars(&self, tag: Option<ParamTag>) -> usize {
        self.entries
            .iter()
            .filter(|e| tag.map_or(true, |t| e.tag == t))
            .map(|e| e.values.len())
            .sum()
    }

    pub fn ids_with_tag(&self, tag: ParamTag) -> Vec<ParamId> {
        self.entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.tag == tag)
            .map(|(i, _)| ParamId(i))
            .collect()
    }
}

/// Which parameters receive gradients in a given forward pass. Everything
/// else is snapshotted as a constant: no gradient is recorded for it at all.
#[derive(Clone, Debug)]
pub enum Trainable {
    All,
    TagOnly(ParamTag),
    Subset(std::collections::HashSet<usize>),
}

impl Trainable {
    pub fn subset(ids: impl IntoIterator<Item = ParamId>) -> Self {
        Trainable::Subset(ids.into_iter().map(|p| p.0).collect())
    }

    pub fn includes(&self, id: ParamId, tag: ParamTag) -> bool {
        match self {
            Trainable::All => true,
            Trainable::TagOnly(t) => tag == *t,
            Trainable::Subset(s) => s.contains(&id.0),
        }
    }

    /// Ids selected from a parameter set, ascending.
    pub fn ids(&self, params: &ParamSet) -> Vec<ParamId> {
        params.iter().filter(|(id, e)| self.includes(*id, e.tag)).map(|(id, _)| id).collect()
    }
}

/// Per-parameter gradient accumulator aligned with a `ParamSet`.
#[derive(Clone, Debug)]
pub struct GradMap {
    grads: Vec<Option<Vec<f64>>>,
}

impl GradMap {
    pub fn new(params: &ParamSet) -> Self {
        GradMap { grads: vec![None; params.len()] }
    }

    pub fn accumulate(&mut self, id: usize, grad: &[f64]) {
        match &mut self.grads[id] {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(grad) {
                    *gi += ci;
                }
            }
            slot @ None => *slot = Some(grad.to_vec()),
        }
    }

    /// Fold another accumulator in, in index order (deterministic reduce).
    pub fn merge(&mut self, other: &GradMap) {
        for (id, g) in other.grads.iter().enumerate() {
            if let Some(g) = g {
                self.accumulate(id, g);
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.grads.iter_mut().flatten() {
            for v in g.iter_mut() {
                *v *= c;
            }
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.grads[id.0].as_deref()
    }

    pub fn ids_with_grad(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.grads.iter().enumerate().filter(|(_, g)| g.is_some()).map(|(i, _)| ParamId(i))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_partition_exactly() {
        let mut ps = ParamSet::new();
        ps.add("a", ParamTag::Wave, &[2, 3], vec![0.0; 6]);
        ps.add("b", ParamTag::Cache, &[4], vec![0.0; 4]);
        ps.add("c", ParamTag::Cache, &[1], vec![0.0; 1]);
        assert_eq!(ps.count_scalars(Some(ParamTag::Wave)), 6);
        assert_eq!(ps.count_scalars(Some(ParamTag::Cache)), 5);
        assert_eq!(ps.count_scalars(None), 11);
    }

    #[test]
    #[should_panic(expected = "duplicate parameter name")]
    fn rejects_duplicate_names() {
        let mut ps = ParamSet::new();
        ps.add("w", ParamTag::Wave, &[1], vec![0.0]);
        ps.add("w", ParamTag::Cache, &[1], vec![0.0]);
    }

    #[test]
    fn grad_map_merge_is_additive() {
        let mut ps = ParamSet::new();
        let a = ps.add("a", ParamTag::Wave, &[2], vec![0.0; 2]);
        let mut g1 = GradMap::new(&ps);
        g1.accumulate(a.0, &[1.0, 2.0]);
        let mut g2 = GradMap::new(&ps);
        g2.accumulate(a.0, &[10.0, 20.0]);
        g1.merge(&g2);
        assert_eq!(g1.get(a).unwrap(), &[11.0, 22.0]);
    }
}
