//! Finite labeled spaces.
//!
//! A [`FiniteSpace`] is an ordered set of distinct labels. Product spaces pair
//! labels row-major as `(x|y)`; sum spaces (used for the cartesian product of
//! value spaces, `B(X) x B(Z) = B(X + Z)`) tag labels with `0:` and `1:`.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Structure {
    Plain,
    Product(FiniteSpace, FiniteSpace),
    Sum(FiniteSpace, FiniteSpace),
}

#[derive(Debug)]
struct Inner {
    name: String,
    labels: Vec<String>,
    index: HashMap<String, usize>,
    structure: Structure,
}

#[derive(Clone)]
pub struct FiniteSpace(Arc<Inner>);

impl FiniteSpace {
    pub fn new<S: Into<String>>(name: impl Into<String>, labels: impl IntoIterator<Item = S>) -> Result<Self> {
        Self::with_structure(name.into(), labels.into_iter().map(Into::into).collect(), Structure::Plain)
    }

    /// A space whose labels are `prefix0, prefix1, ...`.
    pub fn indexed(name: impl Into<String>, prefix: &str, n: usize) -> Result<Self> {
        Self::new(name, (0..n).map(|i| format!("{prefix}{i}")))
    }

    /// The one-point space, the unit of the product.
    pub fn unit() -> Self {
        Self::new("I", ["*"]).expect("unit space is valid")
    }

    fn with_structure(name: String, labels: Vec<String>, structure: Structure) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::InvalidSpace(format!("space `{name}` has no elements")));
        }
        let mut index = HashMap::with_capacity(labels.len());
        for (i, l) in labels.iter().enumerate() {
            if index.insert(l.clone(), i).is_some() {
                return Err(Error::InvalidSpace(format!(
                    "space `{name}` has duplicate label `{l}`"
                )));
            }
        }
        Ok(Self(Arc::new(Inner {
            name,
            labels,
            index,
            structure,
        })))
    }

    /// Cartesian product with row-major pairing: `(i, j)` sits at `i * |b| + j`.
    pub fn product(a: &FiniteSpace, b: &FiniteSpace) -> FiniteSpace {
        let labels = a
            .labels()
            .iter()
            .flat_map(|x| b.labels().iter().map(move |y| format!("({x}|{y})")))
            .collect();
        Self::with_structure(
            format!("{}*{}", a.name(), b.name()),
            labels,
            Structure::Product(a.clone(), b.clone()),
        )
        .expect("product of valid spaces is valid")
    }

    /// Disjoint union; elements of `a` come first.
    pub fn sum(a: &FiniteSpace, b: &FiniteSpace) -> FiniteSpace {
        let labels = a
            .labels()
            .iter()
            .map(|x| format!("0:{x}"))
            .chain(b.labels().iter().map(|y| format!("1:{y}")))
            .collect();
        Self::with_structure(
            format!("{}+{}", a.name(), b.name()),
            labels,
            Structure::Sum(a.clone(), b.clone()),
        )
        .expect("sum of valid spaces is valid")
    }

    pub fn name(&self) -> &str {
        &self.0.name
    }

    pub fn labels(&self) -> &[String] {
        &self.0.labels
    }

    pub fn size(&self) -> usize {
        self.0.labels.len()
    }

    pub fn label(&self, i: usize) -> &str {
        &self.0.labels[i]
    }

    pub fn index_of(&self, label: &str) -> Option<usize> {
        self.0.index.get(label).copied()
    }

    pub fn structure(&self) -> &Structure {
        &self.0.structure
    }

    /// Factors of a product space.
    pub fn factors(&self) -> Option<(&FiniteSpace, &FiniteSpace)> {
        match &self.0.structure {
            Structure::Product(a, b) => Some((a, b)),
            _ => None,
        }
    }

    /// Summands of a sum space.
    pub fn summands(&self) -> Option<(&FiniteSpace, &FiniteSpace)> {
        match &self.0.structure {
            Structure::Sum(a, b) => Some((a, b)),
            _ => None,
        }
    }

    pub fn ensure_eq(&self, other: &FiniteSpace) -> Result<()> {
        if self == other {
            Ok(())
        } else {
            Err(Error::mismatch(self, other))
        }
    }
}

impl PartialEq for FiniteSpace {
    fn eq(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.0, &other.0)
            || (self.0.name == other.0.name
                && self.0.labels == other.0.labels
                && self.0.structure == other.0.structure)
    }
}

impl Eq for FiniteSpace {}

impl fmt::Debug for FiniteSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "FiniteSpace({}, n={})", self.name(), self.size())
    }
}

impl fmt::Display for FiniteSpace {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}[{}]", self.name(), self.size())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn labels_must_be_unique() {
        assert!(FiniteSpace::new("S", ["a", "a"]).is_err());
        assert!(FiniteSpace::new("S", Vec::<String>::new()).is_err());
    }

    #[test]
    fn product_is_row_major() {
        let a = FiniteSpace::new("X", ["x0", "x1"]).unwrap();
        let b = FiniteSpace::new("Y", ["y0", "y1", "y2"]).unwrap();
        let p = FiniteSpace::product(&a, &b);
        assert_eq!(p.size(), 6);
        assert_eq!(p.label(4), "(x1|y1)");
        assert_eq!(p.index_of("(x0|y2)"), Some(2));
        assert_eq!(p.factors(), Some((&a, &b)));
        assert_eq!(p, FiniteSpace::product(&a, &b));
    }

    #[test]
    fn sum_keeps_duplicated_summands_distinct() {
        let s = FiniteSpace::indexed("S", "s", 2).unwrap();
        let ss = FiniteSpace::sum(&s, &s);
        assert_eq!(ss.labels(), ["0:s0", "0:s1", "1:s0", "1:s1"]);
        assert_ne!(ss, FiniteSpace::product(&s, &s));
    }
}
