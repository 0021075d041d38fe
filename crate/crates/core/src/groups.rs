use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

/// Partition of concept indices `0..k` into mutually exclusive groups.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<usize>>", into = "Vec<Vec<usize>>")]
pub struct Groups {
    members: Vec<Vec<usize>>,
    group_of: Vec<usize>,
}

impl Groups {
    pub fn new(members: Vec<Vec<usize>>) -> Result<Self> {
        let k: usize = members.iter().map(Vec::len).sum();
        let mut group_of = vec![usize::MAX; k];
        for (g, m) in members.iter().enumerate() {
            if m.is_empty() {
                return Err(config_err(format!("group {g} is empty")));
            }
            for &i in m {
                if i >= k {
                    return Err(config_err(format!("concept {i} in group {g} is outside 0..{k}")));
                }
                if group_of[i] != usize::MAX {
                    return Err(config_err(format!("concept {i} appears in groups {} and {g}", group_of[i])));
                }
                group_of[i] = g;
            }
        }
        Ok(Self { members, group_of })
    }

    /// One group per concept.
    pub fn singletons(k: usize) -> Self {
        Self::new((0..k).map(|i| vec![i]).collect()).expect("singletons partition 0..k")
    }

    /// Consecutive groups of the given sizes.
    pub fn contiguous(sizes: &[usize]) -> Result<Self> {
        let mut start = 0;
        let mut members = Vec::with_capacity(sizes.len());
        for &s in sizes {
            members.push((start..start + s).collect());
            start += s;
        }
        Self::new(members)
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn n_concepts(&self) -> usize {
        self.group_of.len()
    }

    pub fn members(&self, g: usize) -> &[usize] {
        &self.members[g]
    }

    pub fn all(&self) -> &[Vec<usize>] {
        &self.members
    }

    pub fn group_of(&self, concept: usize) -> usize {
        self.group_of[concept]
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.members.iter().map(Vec::len).collect()
    }

    /// Row-major `[groups, concepts]` 0/1 membership matrix.
    pub fn membership_matrix(&self) -> Vec<f64> {
        let k = self.n_concepts();
        let mut m = vec![0.0; self.len() * k];
        for (g, mem) in self.members.iter().enumerate() {
            for &i in mem {
                m[g * k + i] = 1.0;
            }
        }
        m
    }

    /// Drops the listed groups and renumbers the surviving concepts densely,
    /// preserving order. Returns the new partition and, for each surviving
    /// concept, its index in the old numbering.
    pub fn without(&self, drop: &[usize]) -> Result<(Self, Vec<usize>)> {
        if let Some(&g) = drop.iter().find(|&&g| g >= self.len()) {
            return Err(config_err(format!("group {g} out of range 0..{}", self.len())));
        }
        let kept_concepts: Vec<usize> = (0..self.n_concepts())
            .filter(|&i| !drop.contains(&self.group_of[i]))
            .collect();
        let mut new_index = vec![usize::MAX; self.n_concepts()];
        for (new, &old) in kept_concepts.iter().enumerate() {
            new_index[old] = new;
        }
        let members = self
            .members
            .iter()
            .enumerate()
            .filter(|(g, _)| !drop.contains(g))
            .map(|(_, m)| m.iter().map(|&i| new_index[i]).collect())
            .collect();
        Ok((Self::new(members)?, kept_concepts))
    }
}

impl TryFrom<Vec<Vec<usize>>> for Groups {
    type Error = crate::error::Error;

    fn try_from(v: Vec<Vec<usize>>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<Groups> for Vec<Vec<usize>> {
    fn from(g: Groups) -> Self {
        g.members
    }
}
