use std::collections::{BTreeMap, BTreeSet};

use super::{Jaw, RigidMotion, Tooth, ToothLabel, Vec3};
use crate::{Error, Result};

/// Both jaws of one case: labeled teeth plus the pair graphs used by the
/// collision term.
#[derive(Clone, Debug, PartialEq)]
pub struct Dentition {
    teeth: BTreeMap<ToothLabel, Tooth>,
    neighbor_pairs: BTreeSet<(ToothLabel, ToothLabel)>,
    occlusal_pairs: BTreeSet<(ToothLabel, ToothLabel)>,
}

fn ordered(a: ToothLabel, b: ToothLabel) -> (ToothLabel, ToothLabel) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

impl Dentition {
    /// Builds a dentition with the standard pair graphs: mesial/distal neighbors
    /// in the same jaw (including across the midline) and same-position opposing
    /// teeth, restricted to labels that are present.
    pub fn new(teeth: impl IntoIterator<Item = Tooth>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for tooth in teeth {
            let label = tooth.label();
            if map.insert(label, tooth).is_some() {
                return Err(Error::Shape(format!("duplicate tooth {label}")));
            }
        }
        let mut neighbor_pairs = BTreeSet::new();
        let mut occlusal_pairs = BTreeSet::new();
        for &label in map.keys() {
            if label.position() < 7 {
                let next = ToothLabel::from_parts(label.quadrant(), label.position() + 1)?;
                if map.contains_key(&next) {
                    neighbor_pairs.insert(ordered(label, next));
                }
            }
            if label.position() == 1 && matches!(label.quadrant(), 1 | 3) {
                let across = ToothLabel::from_parts(label.quadrant() + 1, 1)?;
                if map.contains_key(&across) {
                    neighbor_pairs.insert(ordered(label, across));
                }
            }
            if label.jaw() == Jaw::Upper && map.contains_key(&label.opposing()) {
                occlusal_pairs.insert(ordered(label, label.opposing()));
            }
        }
        Ok(Dentition {
            teeth: map,
            neighbor_pairs,
            occlusal_pairs,
        })
    }

    /// Builds a dentition with caller-supplied pair graphs.
    pub fn with_pairs(
        teeth: impl IntoIterator<Item = Tooth>,
        neighbor_pairs: impl IntoIterator<Item = (ToothLabel, ToothLabel)>,
        occlusal_pairs: impl IntoIterator<Item = (ToothLabel, ToothLabel)>,
    ) -> Result<Self> {
        let mut d = Dentition::new(teeth)?;
        d.neighbor_pairs = neighbor_pairs.into_iter().map(|(a, b)| ordered(a, b)).collect();
        d.occlusal_pairs = occlusal_pairs.into_iter().map(|(a, b)| ordered(a, b)).collect();
        for &(a, b) in &d.neighbor_pairs {
            if a.jaw() != b.jaw() || a == b {
                return Err(Error::Shape(format!("neighbor pair {a}-{b} must share a jaw")));
            }
        }
        for &(a, b) in &d.occlusal_pairs {
            if a.jaw() == b.jaw() {
                return Err(Error::Shape(format!("occlusal pair {a}-{b} must span jaws")));
            }
        }
        for &(a, b) in d.neighbor_pairs.iter().chain(&d.occlusal_pairs) {
            for l in [a, b] {
                if !d.teeth.contains_key(&l) {
                    return Err(Error::Shape(format!("pair references missing tooth {l}")));
                }
            }
        }
        Ok(d)
    }

    pub fn teeth(&self) -> impl Iterator<Item = &Tooth> {
        self.teeth.values()
    }

    pub fn teeth_map(&self) -> &BTreeMap<ToothLabel, Tooth> {
        &self.teeth
    }

    pub fn labels(&self) -> impl Iterator<Item = ToothLabel> + '_ {
        self.teeth.keys().copied()
    }

    pub fn get(&self, label: ToothLabel) -> Option<&Tooth> {
        self.teeth.get(&label)
    }

    pub fn len(&self) -> usize {
        self.teeth.len()
    }

    pub fn is_empty(&self) -> bool {
        self.teeth.is_empty()
    }

    pub fn neighbor_pairs(&self) -> &BTreeSet<(ToothLabel, ToothLabel)> {
        &self.neighbor_pairs
    }

    pub fn occlusal_pairs(&self) -> &BTreeSet<(ToothLabel, ToothLabel)> {
        &self.occlusal_pairs
    }

    /// Neighbor pairs followed by occlusal pairs, each in label order.
    pub fn all_pairs(&self) -> impl Iterator<Item = (ToothLabel, ToothLabel)> + '_ {
        self.neighbor_pairs.iter().chain(&self.occlusal_pairs).copied()
    }

    /// Per-tooth motions applied; teeth without an entry stay in place. The
    /// pair graphs are kept.
    pub fn moved(&self, motions: &BTreeMap<ToothLabel, RigidMotion>) -> Result<Dentition> {
        let mut teeth = BTreeMap::new();
        for (&label, tooth) in &self.teeth {
            let t = match motions.get(&label) {
                Some(m) => tooth.moved(m)?,
                None => tooth.clone(),
            };
            teeth.insert(label, t);
        }
        Ok(Dentition {
            teeth,
            neighbor_pairs: self.neighbor_pairs.clone(),
            occlusal_pairs: self.occlusal_pairs.clone(),
        })
    }

    /// The same motion applied to every tooth.
    pub fn moved_rigidly(&self, motion: &RigidMotion) -> Result<Dentition> {
        let all = self.teeth.keys().map(|&l| (l, *motion)).collect();
        self.moved(&all)
    }

    /// Replaces the tooth stored under `tooth.label()`.
    pub fn replace(&mut self, tooth: Tooth) -> Result<()> {
        match self.teeth.get_mut(&tooth.label()) {
            Some(slot) => {
                *slot = tooth;
                Ok(())
            }
            None => Err(Error::Shape(format!("no tooth {} to replace", tooth.label()))),
        }
    }
}

/// Translates the case so the origin sits at the mean barycenter of the central
/// incisors {11, 21, 31, 41}. Cases are expected to be axis-aligned already
/// (x lateral, y anterior, z occlusal), so the returned motion is a pure
/// translation.
pub fn normalize_case(dentition: &Dentition) -> Result<(Dentition, RigidMotion)> {
    let mut origin = Vec3::zeros();
    for fdi in [11, 21, 31, 41] {
        let label = ToothLabel::new(fdi)?;
        let tooth = dentition.get(label).ok_or(Error::MissingAnchor(label))?;
        origin += tooth.barycenter();
    }
    origin /= 4.0;
    let motion = RigidMotion::translation(-origin);
    Ok((dentition.moved_rigidly(&motion)?, motion))
}
