use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Endless reshuffled passes over a list of indices; empty lists yield
/// nothing.
#[derive(Debug, Clone)]
pub struct EpochCycler {
    order: Vec<usize>,
    pos: usize,
    rng: ChaCha8Rng,
}

impl EpochCycler {
    pub fn new(items: Vec<usize>, rng: ChaCha8Rng) -> Self {
        let pos = items.len();
        EpochCycler { order: items, pos, rng }
    }
}

impl Iterator for EpochCycler {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        if self.order.is_empty() {
            return None;
        }
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        Some(self.order[self.pos - 1])
    }
}

/// Picks a sub-stream by weight for every item.
#[derive(Debug, Clone)]
pub struct WeightedStream {
    streams: Vec<EpochCycler>,
    pick: WeightedIndex<f64>,
    rng: ChaCha8Rng,
}

impl WeightedStream {
    /// Weights must be nonnegative with at least one positive.
    pub fn new(streams: Vec<(f64, EpochCycler)>, rng: ChaCha8Rng) -> Self {
        let pick = WeightedIndex::new(streams.iter().map(|(w, _)| *w)).expect("valid weights");
        WeightedStream { streams: streams.into_iter().map(|(_, s)| s).collect(), pick, rng }
    }
}

impl Iterator for WeightedStream {
    type Item = usize;

    fn next(&mut self) -> Option<usize> {
        let i = self.pick.sample(&mut self.rng);
        self.streams[i].next()
    }
}

/// Batches whose slots come from `pure` with probability `ratio` and from
/// `image_text` otherwise. Ends when a drawn stream is exhausted.
#[derive(Debug, Clone)]
pub struct MixedBatches<A, B> {
    image_text: A,
    pure: B,
    ratio: f64,
    batch_size: usize,
    rng: ChaCha8Rng,
}

pub fn mix_batches<T, A, B>(image_text: A, pure: B, ratio: f64, seed: u64, batch_size: usize) -> MixedBatches<A, B>
where
    A: Iterator<Item = T>,
    B: Iterator<Item = T>,
{
    MixedBatches { image_text, pure, ratio, batch_size, rng: ChaCha8Rng::seed_from_u64(seed) }
}

impl<T, A, B> Iterator for MixedBatches<A, B>
where
    A: Iterator<Item = T>,
    B: Iterator<Item = T>,
{
    type Item = Vec<T>;

    fn next(&mut self) -> Option<Vec<T>> {
        let mut batch = Vec::with_capacity(self.batch_size);
        for _ in 0..self.batch_size {
            let from_pure = self.ratio > 0.0 && self.rng.gen::<f64>() < self.ratio;
            batch.push(if from_pure { self.pure.next()? } else { self.image_text.next()? });
        }
        Some(batch)
    }
}
