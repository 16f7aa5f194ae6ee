use std::collections::HashMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Real;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Zeros,
    Ones,
    /// Normal with the given std, redrawn outside two standard deviations.
    TruncNormal(f64),
    /// He-style normal with std `sqrt(2 / fan_in)`.
    Kaiming { fan_in: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
    /// Subject to weight decay.
    pub decay: bool,
}

/// Named parameter tensors in registration order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    index: HashMap<String, usize>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], init: Init, rng: &mut impl Rng) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        let n: usize = shape.iter().product();
        let data = match init {
            Init::Zeros => vec![T::zero(); n],
            Init::Ones => vec![T::one(); n],
            Init::TruncNormal(std) => {
                let dist = Normal::new(0.0, 1.0).unwrap();
                (0..n)
                    .map(|_| loop {
                        let v: f64 = dist.sample(rng);
                        if v.abs() <= 2.0 {
                            break T::of(v * std);
                        }
                    })
                    .collect()
            }
            Init::Kaiming { fan_in } => {
                let dist = Normal::new(0.0, (2.0 / fan_in.max(1) as f64).sqrt()).unwrap();
                (0..n).map(|_| T::of(dist.sample(rng))).collect()
            }
        };
        let decay = shape.len() >= 2 && !matches!(init, Init::Zeros | Init::Ones);
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry {
            name,
            shape: shape.to_vec(),
            data,
            decay,
        });
        ParamId(self.entries.len() - 1)
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &[T] {
        &self.entries[id.0].data
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.entries[id.0].data
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry<T>] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    /// Scalar count of parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| e.data.len())
            .sum()
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    shape: e.shape.clone(),
                    data: e.data.iter().map(|&v| U::of(v.f64())).collect(),
                    decay: e.decay,
                })
                .collect(),
            index: self.index.clone(),
        }
    }

    /// Overwrites values from `other`, matching by name and shape.
    pub fn load_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        for e in &mut self.entries {
            let i = other
                .index
                .get(&e.name)
                .ok_or_else(|| Error::invalid(format!("missing parameter {}", e.name)))?;
            let src = &other.entries[*i];
            if src.shape != e.shape {
                return Err(Error::invalid(format!(
                    "shape mismatch for {}: {:?} vs {:?}",
                    e.name, src.shape, e.shape
                )));
            }
            e.data.copy_from_slice(&src.data);
        }
        Ok(())
    }

    /// Copies every parameter whose name exists in `other` with the same shape;
    /// returns the number copied.
    pub fn load_matching(&mut self, other: &ParamStore<T>) -> usize {
        let mut n = 0;
        for e in &mut self.entries {
            if let Some(&i) = other.index.get(&e.name) {
                if other.entries[i].shape == e.shape {
                    e.data.copy_from_slice(&other.entries[i].data);
                    n += 1;
                }
            }
        }
        n
    }
}

/// Gradient buffers aligned with a [`ParamStore`]; allocated on first touch.
#[derive(Debug, Clone)]
pub struct Grads<T> {
    sizes: Vec<usize>,
    slots: Vec<Option<Vec<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn new(store: &ParamStore<T>) -> Self {
        Self {
            sizes: store.entries.iter().map(|e| e.data.len()).collect(),
            slots: vec![None; store.len()],
        }
    }

    #[inline]
    pub fn slot(&mut self, id: ParamId) -> &mut [T] {
        let n = self.sizes[id.0];
        self.slots[id.0].get_or_insert_with(|| vec![T::zero(); n])
    }

    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.slots[id.0].as_deref()
    }

    pub fn add(&mut self, other: &Grads<T>) {
        for (i, s) in other.slots.iter().enumerate() {
            if let Some(src) = s {
                let dst = self.slot(ParamId(i));
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d += v;
                }
            }
        }
    }

    pub fn scale(&mut self, f: T) {
        for s in self.slots.iter_mut().flatten() {
            for v in s {
                *v = *v * f;
            }
        }
    }

    pub fn clear(&mut self) {
        for s in self.slots.iter_mut().flatten() {
            s.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn all_finite(&self) -> bool {
        self.slots.iter().flatten().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registration_and_counts() {
        let mut rng = crate::rng::stream(0);
        let mut ps = ParamStore::<f32>::new();
        let w = ps.add("enc.w", &[3, 4], Init::TruncNormal(0.02), &mut rng);
        let b = ps.add("enc.b", &[3], Init::Zeros, &mut rng);
        ps.add("head.w", &[2, 3], Init::Kaiming { fan_in: 3 }, &mut rng);
        assert_eq!(ps.num_scalars(), 12 + 3 + 6);
        assert_eq!(ps.count_prefix("enc."), 15);
        assert!(ps.get(w).iter().all(|v| v.abs() <= 0.04));
        assert!(ps.entries()[w.0].decay && !ps.entries()[b.0].decay);
        let mut g = Grads::new(&ps);
        assert!(g.get(b).is_none());
        g.slot(b)[1] = 2.0;
        let mut g2 = g.clone();
        g2.add(&g);
        assert_eq!(g2.get(b).unwrap(), &[0.0, 4.0, 0.0]);
    }
}
