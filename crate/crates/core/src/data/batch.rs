use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::vocab::{EOS, PAD};

/// Source/target pair of token ids, without EOS.
pub type IdPair = (Vec<usize>, Vec<usize>);

/// Width of the length buckets used to group similar-length pairs.
pub const BUCKET_WIDTH: usize = 4;

/// Padded id matrix with a 0/1 mask; every row ends in EOS at its last real
/// position.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedIds {
    pub ids: Vec<Vec<usize>>,
    pub mask: Vec<Vec<f64>>,
}

impl PaddedIds {
    /// Appends EOS to every sequence and pads to the longest.
    pub fn new(seqs: &[&[usize]]) -> Self {
        let width = seqs.iter().map(|s| s.len() + 1).max().unwrap_or(0);
        let mut ids = Vec::with_capacity(seqs.len());
        let mut mask = Vec::with_capacity(seqs.len());
        for s in seqs {
            let mut row: Vec<usize> = s.to_vec();
            row.push(EOS);
            let real = row.len();
            row.resize(width, PAD);
            ids.push(row);
            mask.push((0..width).map(|j| if j < real { 1.0 } else { 0.0 }).collect());
        }
        PaddedIds { ids, mask }
    }

    pub fn rows(&self) -> usize {
        self.ids.len()
    }

    pub fn width(&self) -> usize {
        self.ids.first().map_or(0, Vec::len)
    }

    pub fn column(&self, t: usize) -> Vec<usize> {
        self.ids.iter().map(|r| r[t]).collect()
    }

    pub fn mask_column(&self, t: usize) -> Vec<f64> {
        self.mask.iter().map(|r| r[t]).collect()
    }

    /// Row-major `rows x width` mask.
    pub fn flat_mask(&self) -> Vec<f64> {
        self.mask.iter().flatten().copied().collect()
    }

    /// Number of real (unmasked) tokens.
    pub fn real_tokens(&self) -> usize {
        self.mask.iter().flatten().filter(|&&m| m != 0.0).count()
    }

    /// Real ids of row `r` (EOS included).
    pub fn row(&self, r: usize) -> &[usize] {
        let n = self.mask[r].iter().filter(|&&m| m != 0.0).count();
        &self.ids[r][..n]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub src: PaddedIds,
    pub tgt: PaddedIds,
}

impl Batch {
    pub fn from_pairs(pairs: &[IdPair]) -> Self {
        let src: Vec<&[usize]> = pairs.iter().map(|p| p.0.as_slice()).collect();
        let tgt: Vec<&[usize]> = pairs.iter().map(|p| p.1.as_slice()).collect();
        Batch {
            src: PaddedIds::new(&src),
            tgt: PaddedIds::new(&tgt),
        }
    }

    pub fn size(&self) -> usize {
        self.src.rows()
    }
}

/// Groups pairs into length-bucketed, padded batches in a seeded order.
/// Every pair lands in exactly one batch.
pub fn make_batches(pairs: &[IdPair], batch_size: usize, shuffle_seed: u64) -> Vec<Batch> {
    if pairs.is_empty() || batch_size == 0 {
        return Vec::new();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(shuffle_seed);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut rng);
    order.sort_by_key(|&i| pairs[i].0.len().max(pairs[i].1.len()) / BUCKET_WIDTH);
    let mut batches: Vec<Batch> = order
        .chunks(batch_size)
        .map(|chunk| {
            let members: Vec<IdPair> = chunk.iter().map(|&i| pairs[i].clone()).collect();
            Batch::from_pairs(&members)
        })
        .collect();
    batches.shuffle(&mut rng);
    batches
}
