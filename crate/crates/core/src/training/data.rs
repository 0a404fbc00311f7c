use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::field::FieldStrength;
use crate::synthdata::{augment_flip, DatasetManifest, Split};
use crate::tensor::Tensor;

/// One aligned axial slice pair, each stored as `[1, 1, H, W]`.
#[derive(Clone, Debug)]
pub struct SliceItem {
    pub case_id: String,
    pub slice_index: usize,
    pub field: FieldStrength,
    pub x: Tensor,
    pub y: Tensor,
}

#[derive(Clone, Debug, Default)]
pub struct SliceDataset {
    pub items: Vec<SliceItem>,
}

impl SliceDataset {
    /// All slices of the cases in `split`, optionally restricted to some field strengths.
    pub fn from_manifest(
        m: &DatasetManifest,
        split: Split,
        fields: Option<&[FieldStrength]>,
    ) -> Result<Self> {
        let mut items = Vec::new();
        for e in m
            .split(split)
            .filter(|e| fields.is_none_or(|f| f.contains(&e.field)))
        {
            let (x, y) = m.load_pair(e)?;
            let d = x.dims();
            for k in 0..d.d {
                items.push(SliceItem {
                    case_id: e.case_id.clone(),
                    slice_index: k,
                    field: e.field,
                    x: Tensor::new(vec![1, 1, d.h, d.w], x.slice(k).to_vec())?,
                    y: Tensor::new(vec![1, 1, d.h, d.w], y.slice(k).to_vec())?,
                });
            }
        }
        Ok(SliceDataset { items })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Stacks the given items into `[B, 1, H, W]` inputs and targets.
    pub fn stack(&self, indices: &[usize]) -> Result<(Tensor, Tensor)> {
        let xs: Vec<Tensor> = indices.iter().map(|&i| self.items[i].x.clone()).collect();
        let ys: Vec<Tensor> = indices.iter().map(|&i| self.items[i].y.clone()).collect();
        Ok((Tensor::stack_batch(&xs)?, Tensor::stack_batch(&ys)?))
    }
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub flipped: Vec<bool>,
    pub x: Tensor,
    pub y: Tensor,
}

/// Seeded shuffled stream of batch indices with per-sample flips.
///
/// The order is reshuffled each time it is exhausted. A full-pass epoch
/// starts on a fresh shuffle and ends with a possibly short batch; with a
/// fixed step count batches run on across reshuffles.
#[derive(Clone, Debug)]
pub struct BatchStream {
    pub order: Vec<usize>,
    pub pos: usize,
    pub rng: ChaCha8Rng,
}

impl BatchStream {
    pub fn new(n: usize, rng: ChaCha8Rng) -> Self {
        BatchStream {
            order: (0..n).collect(),
            pos: n,
            rng,
        }
    }

    fn reshuffle(&mut self) {
        self.order.sort_unstable();
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    pub fn next_batch(
        &mut self,
        ds: &SliceDataset,
        batch_size: usize,
        augment: bool,
        allow_partial: bool,
    ) -> Result<Batch> {
        if self.order.len() != ds.len() || ds.is_empty() {
            return Err(Error::invalid(
                "batch_stream",
                format!(
                    "stream over {} items used with {} slices",
                    self.order.len(),
                    ds.len()
                ),
            ));
        }
        let mut indices = Vec::with_capacity(batch_size);
        while indices.len() < batch_size {
            if self.pos == self.order.len() {
                if allow_partial && !indices.is_empty() {
                    break;
                }
                self.reshuffle();
            }
            indices.push(self.order[self.pos]);
            self.pos += 1;
        }
        let mut xs = Vec::with_capacity(indices.len());
        let mut ys = Vec::with_capacity(indices.len());
        let mut flipped = Vec::with_capacity(indices.len());
        for &i in &indices {
            let item = &ds.items[i];
            if augment {
                let (x, y, f) = augment_flip(&item.x, &item.y, &mut self.rng);
                xs.push(x);
                ys.push(y);
                flipped.push(f);
            } else {
                xs.push(item.x.clone());
                ys.push(item.y.clone());
                flipped.push(false);
            }
        }
        Ok(Batch {
            indices,
            flipped,
            x: Tensor::stack_batch(&xs)?,
            y: Tensor::stack_batch(&ys)?,
        })
    }

    /// Steps that make one pass over `n` items.
    pub fn steps_per_pass(n: usize, batch_size: usize) -> usize {
        n.div_ceil(batch_size)
    }
}
