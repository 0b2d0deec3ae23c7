use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use robustsim_autodiff::Tensor;

use crate::embedding::Embedding;
use crate::error::{contract, Error, Result};

/// One learned embedding per class, standing in for encoded class prompts.
/// Class ids are zero-based.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptTable {
    table: Tensor,
}

impl PromptTable {
    /// `K x D` table with rows drawn on the unit sphere.
    pub fn init(classes: usize, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = Vec::with_capacity(classes * dim);
        for _ in 0..classes {
            let row: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            data.extend(row.iter().map(|v| v / norm));
        }
        Self {
            table: Tensor::new(vec![classes, dim], data).expect("sized"),
        }
    }

    pub fn from_tensor(table: Tensor) -> Result<Self> {
        if table.ndim() != 2 || table.shape()[0] == 0 {
            return contract(format!("prompt table needs shape [K, D], got {:?}", table.shape()));
        }
        if !table.all_finite() {
            return contract("prompt table is not finite");
        }
        Ok(Self { table })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return contract("prompt rows differ in length");
        }
        Self::from_tensor(Tensor::new(vec![rows.len(), dim], rows.concat())?)
    }

    pub fn classes(&self) -> usize {
        self.table.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.table.shape()[1]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.table
    }

    pub(crate) fn set_tensor(&mut self, t: Tensor) {
        debug_assert_eq!(t.shape(), self.table.shape());
        self.table = t;
    }

    /// Stored embedding of `class`.
    pub fn embed(&self, class: usize) -> Result<Embedding> {
        if class >= self.classes() {
            return Err(Error::Lookup(format!("class {class} not in a table of {}", self.classes())));
        }
        let d = self.dim();
        Ok(Embedding::new(self.table.data()[class * d..(class + 1) * d].to_vec()))
    }

    pub fn embeddings(&self) -> Vec<Embedding> {
        self.table
            .data()
            .chunks(self.dim())
            .map(|r| Embedding::new(r.to_vec()))
            .collect()
    }
}
