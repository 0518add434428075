//! Labeled datasets with train/verify splits.

use super::{InputShape, NnError, Result, Value};

#[derive(Debug, Clone)]
pub struct Example {
    pub input: Value,
    pub label: usize,
}

#[derive(Debug, Clone)]
pub struct LabeledDataset {
    /// Number of classes `d`; labels lie in `0..d`.
    pub classes: usize,
    pub train: Vec<Example>,
    pub verify: Vec<Example>,
}

impl LabeledDataset {
    pub fn new(classes: usize, train: Vec<Example>, verify: Vec<Example>) -> Result<Self> {
        let ds = LabeledDataset { classes, train, verify };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let mut shape: Option<InputShape> = None;
        for ex in self.train.iter().chain(&self.verify) {
            if ex.label >= self.classes {
                return Err(NnError::Dataset(format!(
                    "label {} out of range for {} classes",
                    ex.label, self.classes
                )));
            }
            let s = ex.input.shape();
            match shape {
                None => shape = Some(s),
                Some(prev) if prev != s => {
                    return Err(NnError::Dataset(format!(
                        "inconsistent input shapes: {prev:?} vs {s:?}"
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn input_shape(&self) -> Option<InputShape> {
        self.train.first().or_else(|| self.verify.first()).map(|e| e.input.shape())
    }

    /// Labels actually present in the training split, ascending.
    pub fn present_labels(&self) -> Vec<usize> {
        let mut seen = vec![false; self.classes];
        for ex in &self.train {
            seen[ex.label] = true;
        }
        seen.iter().enumerate().filter(|(_, &s)| s).map(|(i, _)| i).collect()
    }
}
