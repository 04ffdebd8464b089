use std::fmt;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Two-digit FDI tooth code: quadrant (1..=4) then position (1..=7).
///
/// Quadrants 1 and 2 are the upper jaw, 3 and 4 the lower jaw. Quadrants 1 and 4
/// sit on the `-x` side of the normalized frame, 2 and 3 on the `+x` side.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u32", into = "u32")]
pub struct ToothLabel(u8);

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Category {
    Incisor,
    Cuspid,
    Bicuspid,
    Molar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Jaw {
    Upper,
    Lower,
}

/// Side of the midsagittal plane. `Left` is the `-x` half (quadrants 1 and 4).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ArchSide {
    Left,
    Right,
}

impl ToothLabel {
    pub fn new(fdi: u32) -> Result<Self> {
        let quadrant = fdi / 10;
        let position = fdi % 10;
        if (1..=4).contains(&quadrant) && (1..=7).contains(&position) {
            Ok(ToothLabel(fdi as u8))
        } else {
            Err(Error::InvalidLabel(fdi))
        }
    }

    pub fn from_parts(quadrant: u8, position: u8) -> Result<Self> {
        Self::new(quadrant as u32 * 10 + position as u32)
    }

    /// All 28 labels in ascending order.
    pub fn all() -> impl Iterator<Item = ToothLabel> {
        (1..=4u8).flat_map(|q| (1..=7u8).map(move |p| ToothLabel(q * 10 + p)))
    }

    pub fn fdi(self) -> u32 {
        self.0 as u32
    }

    pub fn quadrant(self) -> u8 {
        self.0 / 10
    }

    pub fn position(self) -> u8 {
        self.0 % 10
    }

    pub fn category(self) -> Category {
        match self.position() {
            1 | 2 => Category::Incisor,
            3 => Category::Cuspid,
            4 | 5 => Category::Bicuspid,
            _ => Category::Molar,
        }
    }

    pub fn jaw(self) -> Jaw {
        match self.quadrant() {
            1 | 2 => Jaw::Upper,
            _ => Jaw::Lower,
        }
    }

    pub fn side(self) -> ArchSide {
        match self.quadrant() {
            1 | 4 => ArchSide::Left,
            _ => ArchSide::Right,
        }
    }

    /// The biting counterpart in the opposite jaw (same position, mirrored quadrant).
    pub fn opposing(self) -> ToothLabel {
        let q = match self.quadrant() {
            1 => 4,
            2 => 3,
            3 => 2,
            _ => 1,
        };
        ToothLabel(q * 10 + self.position())
    }
}

impl TryFrom<u32> for ToothLabel {
    type Error = Error;

    fn try_from(value: u32) -> Result<Self> {
        ToothLabel::new(value)
    }
}

impl From<ToothLabel> for u32 {
    fn from(label: ToothLabel) -> u32 {
        label.fdi()
    }
}

impl fmt::Display for ToothLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_and_invalid_codes() {
        assert!(ToothLabel::new(11).is_ok());
        assert!(ToothLabel::new(47).is_ok());
        for bad in [0, 10, 18, 51, 38, 5] {
            assert!(matches!(ToothLabel::new(bad), Err(Error::InvalidLabel(_))), "{bad}");
        }
        assert_eq!(ToothLabel::all().count(), 28);
    }

    #[test]
    fn categories_follow_second_digit() {
        let cat = |n| ToothLabel::new(n).unwrap().category();
        assert_eq!(cat(11), Category::Incisor);
        assert_eq!(cat(22), Category::Incisor);
        assert_eq!(cat(33), Category::Cuspid);
        assert_eq!(cat(44), Category::Bicuspid);
        assert_eq!(cat(15), Category::Bicuspid);
        assert_eq!(cat(26), Category::Molar);
        assert_eq!(cat(47), Category::Molar);
    }

    #[test]
    fn opposing_is_an_involution_across_jaws() {
        for l in ToothLabel::all() {
            let o = l.opposing();
            assert_ne!(l.jaw(), o.jaw());
            assert_eq!(l.side(), o.side());
            assert_eq!(o.opposing(), l);
        }
    }

    #[test]
    fn serde_as_number() {
        let l = ToothLabel::new(36).unwrap();
        assert_eq!(serde_json::to_string(&l).unwrap(), "36");
        assert_eq!(serde_json::from_str::<ToothLabel>("36").unwrap(), l);
        assert!(serde_json::from_str::<ToothLabel>("39").is_err());
    }
}
