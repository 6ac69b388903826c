//! Episodic memory made of independent per-task mini-memory blocks.
//!
//! After task `T` finishes, its reference split is stored as block `T`. While
//! training task `T`, a reference batch is taken from one block chosen
//! uniformly among `1..T`, then sampled without replacement inside that block.
//! Blocks are never evicted or modified.

use rand::seq::index;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::Example;

#[derive(Debug, Clone, PartialEq)]
pub struct MiniMemoryBlock {
    task_id: usize,
    examples: Vec<Example>,
}

impl MiniMemoryBlock {
    pub fn task_id(&self) -> usize {
        self.task_id
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Up to `batch_size` distinct examples drawn uniformly without replacement.
    /// A request at least as large as the block returns the whole block.
    pub fn sample<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Vec<Example> {
        if batch_size >= self.examples.len() {
            return self.examples.clone();
        }
        index::sample(rng, self.examples.len(), batch_size)
            .into_iter()
            .map(|i| self.examples[i].clone())
            .collect()
    }

    fn sample_indices<R: Rng + ?Sized>(&self, batch_size: usize, rng: &mut R) -> Vec<usize> {
        if batch_size >= self.examples.len() {
            return (0..self.examples.len()).collect();
        }
        index::sample(rng, self.examples.len(), batch_size).into_vec()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EpisodicMemory {
    blocks: Vec<MiniMemoryBlock>,
}

impl EpisodicMemory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn blocks(&self) -> &[MiniMemoryBlock] {
        &self.blocks
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn last_task_id(&self) -> Option<usize> {
        self.blocks.last().map(|b| b.task_id)
    }

    pub fn block(&self, task_id: usize) -> Option<&MiniMemoryBlock> {
        // ids are 1..=n in order
        task_id
            .checked_sub(1)
            .and_then(|i| self.blocks.get(i))
            .filter(|b| b.task_id == task_id)
    }

    /// Appends `ref_data` as the block of `task_id`, which must be the next id.
    pub fn push_block(&mut self, ref_data: Vec<Example>, task_id: usize) -> Result<()> {
        let expected = self.last_task_id().map_or(1, |id| id + 1);
        if task_id != expected {
            return Err(Error::state(format!(
                "memory holds blocks up to {:?}; cannot store block {task_id} (expected {expected})",
                self.last_task_id()
            )));
        }
        if ref_data.is_empty() {
            return Err(Error::input(format!("reference split of task {task_id} is empty")));
        }
        self.blocks.push(MiniMemoryBlock {
            task_id,
            examples: ref_data,
        });
        Ok(())
    }

    /// Memory with the block for `task_id` appended.
    pub fn update_eps_mem(mut self, ref_data: Vec<Example>, task_id: usize) -> Result<Self> {
        self.push_block(ref_data, task_id)?;
        Ok(self)
    }

    fn check_reference_available(&self, current_task: usize) -> Result<()> {
        if current_task < 2 {
            return Err(Error::state(
                "no reference gradient exists for the first task; use the task gradient directly",
            ));
        }
        if self.blocks.len() < current_task - 1 {
            return Err(Error::state(format!(
                "task {current_task} needs blocks 1..{} but memory holds {}",
                current_task - 1,
                self.blocks.len()
            )));
        }
        Ok(())
    }

    /// Uniformly picks a block id in `1..current_task`.
    pub fn choose_block<R: Rng + ?Sized>(&self, current_task: usize, rng: &mut R) -> Result<usize> {
        self.check_reference_available(current_task)?;
        Ok(rng.random_range(1..current_task))
    }

    /// Reference batch for task `current_task`: one block chosen uniformly
    /// among the earlier tasks, then `min(ref_batch_size, |block|)` of its
    /// examples without replacement.
    pub fn cal_gref_sample<R: Rng + ?Sized>(
        &self,
        current_task: usize,
        ref_batch_size: usize,
        rng: &mut R,
    ) -> Result<(usize, Vec<Example>)> {
        let id = self.choose_block(current_task, rng)?;
        let block = &self.blocks[id - 1];
        Ok((id, block.sample(ref_batch_size, rng)))
    }
}

/// Monte-Carlo selection frequency of every stored example under the
/// reference sampling used while training `current_task`.
///
/// Each trial picks one block uniformly and `round(q * |block|)` of its
/// examples. Result `[b][i]` is the frequency with which example `i` of block
/// `b + 1` was selected; it should approach `q / (current_task - 1)`.
pub fn membership_expectation_check(
    mem: &EpisodicMemory,
    current_task: usize,
    q: f64,
    trials: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    if !(0.0..=1.0).contains(&q) {
        return Err(Error::config(format!("within-block rate must lie in [0,1], got {q}")));
    }
    mem.check_reference_available(current_task)?;
    let eligible = &mem.blocks[..current_task - 1];
    let mut counts: Vec<Vec<u64>> = eligible.iter().map(|b| vec![0; b.len()]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..trials {
        let id = mem.choose_block(current_task, &mut rng)?;
        let block = &eligible[id - 1];
        let batch = (q * block.len() as f64).round() as usize;
        for i in block.sample_indices(batch, &mut rng) {
            counts[id - 1][i] += 1;
        }
    }
    let denom = trials.max(1) as f64;
    Ok(counts
        .into_iter()
        .map(|c| c.into_iter().map(|n| n as f64 / denom).collect())
        .collect())
}
