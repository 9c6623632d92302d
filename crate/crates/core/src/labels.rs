use crate::error::{Error, Result};

/// Label value excluded from the loss and from every metric.
pub const IGNORE_LABEL: u8 = 255;

/// Per-pixel class ids, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || labels.len() != height * width {
            return Err(Error::shape(format!(
                "label map {height}x{width} given {} labels",
                labels.len()
            )));
        }
        Ok(LabelMap {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Result<Self> {
        Self::new(height, width, vec![label; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.labels
    }

    pub fn as_mut_slice(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    /// Fails if any label other than [`IGNORE_LABEL`] is `>= num_classes`.
    pub fn check_classes(&self, num_classes: usize) -> Result<()> {
        match self
            .labels
            .iter()
            .position(|&l| l != IGNORE_LABEL && l as usize >= num_classes)
        {
            Some(i) => Err(Error::Data(format!(
                "label {} at pixel {i} is outside 0..{num_classes}",
                self.labels[i]
            ))),
            None => Ok(()),
        }
    }
}
