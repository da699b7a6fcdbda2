//! Modality identifiers and raw per-modality feature streams.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Audio,
    Visual,
    Text,
}

impl Modality {
    /// Canonical order used for every per-modality array: audio, visual, text.
    pub const ALL: [Modality; 3] = [Modality::Audio, Modality::Visual, Modality::Text];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Modality {
        Self::ALL[i]
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Audio => "audio",
            Modality::Visual => "visual",
            Modality::Text => "text",
        }
    }

    /// The two other modalities, in canonical order.
    pub fn others(self) -> [Modality; 2] {
        match self {
            Modality::Audio => [Modality::Visual, Modality::Text],
            Modality::Visual => [Modality::Audio, Modality::Text],
            Modality::Text => [Modality::Audio, Modality::Visual],
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Modality {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "audio" | "a" => Ok(Modality::Audio),
            "visual" | "v" => Ok(Modality::Visual),
            "text" | "t" => Ok(Modality::Text),
            other => Err(Error::config("modality", format!("unknown modality `{other}`"))),
        }
    }
}

/// Raw features of one modality over a session: `raw` is `[T × D_m]`.
///
/// Rows whose `present` flag is false are all-zero.
#[derive(Clone, Debug, PartialEq)]
pub struct ModalityStream {
    pub modality: Modality,
    pub raw: Tensor,
    pub present: Vec<bool>,
}

impl ModalityStream {
    pub fn new(modality: Modality, raw: Tensor) -> Result<Self> {
        if raw.shape().len() != 2 {
            return Err(Error::dim(format!(
                "modality stream must be [T × D], got {:?}",
                raw.shape()
            )));
        }
        let t = raw.rows();
        Ok(ModalityStream {
            modality,
            raw,
            present: vec![true; t],
        })
    }

    pub fn len(&self) -> usize {
        self.present.len()
    }

    pub fn is_empty(&self) -> bool {
        self.present.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.raw.cols()
    }

    /// Zeroes every row where `mask` is false. Idempotent.
    pub fn apply_missing_mask(&self, mask: &[bool]) -> Result<ModalityStream> {
        if mask.len() != self.len() {
            return Err(Error::dim(format!(
                "mask length {} does not match stream length {}",
                mask.len(),
                self.len()
            )));
        }
        let mut out = self.clone();
        let d = self.dim();
        for (t, &keep) in mask.iter().enumerate() {
            if !keep {
                out.raw.data_mut()[t * d..(t + 1) * d].fill(0.0);
                out.present[t] = false;
            }
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stream() -> ModalityStream {
        let raw = Tensor::from_vec(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        ModalityStream::new(Modality::Audio, raw).unwrap()
    }

    #[test]
    fn mask_identity_all_false_and_idempotence() {
        let s = stream();
        assert_eq!(s.apply_missing_mask(&[true; 3]).unwrap(), s);
        let z = s.apply_missing_mask(&[false; 3]).unwrap();
        assert!(z.raw.data().iter().all(|v| *v == 0.0));
        assert_eq!(z.present, vec![false; 3]);
        let m = [true, false, true];
        let once = s.apply_missing_mask(&m).unwrap();
        assert_eq!(once.apply_missing_mask(&m).unwrap(), once);
        assert_eq!(once.raw.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn mask_length_mismatch() {
        assert!(matches!(
            stream().apply_missing_mask(&[true]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn others_excludes_self() {
        for m in Modality::ALL {
            assert!(!m.others().contains(&m));
            assert_eq!(m.name().parse::<Modality>().unwrap(), m);
        }
    }
}
