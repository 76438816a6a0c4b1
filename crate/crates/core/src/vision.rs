//! Synthetic frames and the frozen encoder standing in for a pretrained
//! image tower.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::{Module, Parameter};
use crate::tensor::Tensor;

/// Background plus one symbol per object name.
pub const SYMBOLS: usize = 11;

/// A `size x size` grid of symbol ids, row-major. Symbol 0 is background.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Frame {
    pub cells: Vec<Vec<u8>>,
}

impl Frame {
    pub fn blank(size: usize) -> Self {
        Self {
            cells: vec![vec![0; size]; size],
        }
    }

    pub fn size(&self) -> usize {
        self.cells.len()
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.cells[row][col]
    }

    pub fn set(&mut self, row: usize, col: usize, symbol: u8) {
        self.cells[row][col] = symbol;
    }

    pub fn flat(&self) -> impl Iterator<Item = u8> + '_ {
        self.cells.iter().flatten().copied()
    }

    pub fn validate(&self) -> Result<()> {
        let g = self.size();
        if g == 0 || self.cells.iter().any(|r| r.len() != g) {
            return Err(Error::contract("frame must be a non-empty square grid"));
        }
        if let Some(s) = self.flat().find(|&s| s as usize >= SYMBOLS) {
            return Err(Error::contract(format!("symbol {s} is outside the alphabet")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ImageEncoder {
    grid: usize,
    symbols: Parameter,
    positions: Parameter,
}

impl ImageEncoder {
    pub fn new(grid: usize, width: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let symbols = Tensor::randn(&[SYMBOLS, width], 1.0, &mut rng);
        let positions = Tensor::randn(&[grid * grid, width], 0.5, &mut rng);
        Self {
            grid,
            symbols: Parameter::new("encoder.symbols", symbols, false),
            positions: Parameter::new("encoder.positions", positions, false),
        }
    }

    pub fn width(&self) -> usize {
        self.symbols.value().cols()
    }

    pub fn grid(&self) -> usize {
        self.grid
    }

    pub fn patches(&self) -> usize {
        self.grid * self.grid
    }

    pub fn encode_frame(&self, frame: &Frame) -> Result<Tensor> {
        frame.validate()?;
        if frame.size() != self.grid {
            return Err(Error::shape("encode_frame", &[frame.size(), frame.size()], &[self.grid, self.grid]));
        }
        let d = self.width();
        let mut data = Vec::with_capacity(self.patches() * d);
        for (cell, s) in frame.flat().enumerate() {
            let sym = self.symbols.value().row(s as usize);
            let pos = self.positions.value().row(cell);
            data.extend(sym.iter().zip(pos).map(|(a, b)| a + b));
        }
        Tensor::new(vec![self.patches(), d], data)
    }

    /// Per-frame encodings stacked in frame order.
    pub fn encode_video(&self, frames: &[Frame]) -> Result<Tensor> {
        if frames.is_empty() {
            return Err(Error::contract("cannot encode an empty frame sequence"));
        }
        let mut data = Vec::with_capacity(frames.len() * self.patches() * self.width());
        for f in frames {
            data.extend(self.encode_frame(f)?.into_data());
        }
        Tensor::new(vec![frames.len() * self.patches(), self.width()], data)
    }
}

impl Module for ImageEncoder {
    fn visit(&self, f: &mut dyn FnMut(&Parameter)) {
        f(&self.symbols);
        f(&self.positions);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter)) {
        f(&mut self.symbols);
        f(&mut self.positions);
    }
}
