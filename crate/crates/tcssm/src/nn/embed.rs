use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::Parameters;

/// Bag-of-tokens text encoder: lowercase alphanumeric tokens are hashed into
/// a fixed number of buckets and their learned rows are summed.
#[derive(Debug, Clone, PartialEq)]
pub struct HashedEmbedder {
    pub buckets: usize,
    pub dim: usize,
    /// `(buckets, dim)`
    pub table: Vec<f64>,
}

fn fnv1a(s: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in s.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl HashedEmbedder {
    pub fn random<R: Rng>(buckets: usize, dim: usize, rng: &mut R) -> Self {
        let table = (0..buckets * dim).map(|_| StandardNormal.sample(&mut *rng)).collect();
        Self { buckets, dim, table }
    }

    /// Bucket ids of the tokens of `text`, in order of appearance.
    pub fn token_ids(&self, text: &str) -> Vec<usize> {
        text.split(|c: char| !c.is_alphanumeric())
            .filter(|t| !t.is_empty())
            .map(|t| (fnv1a(&t.to_lowercase()) % self.buckets as u64) as usize)
            .collect()
    }

    /// Sum of the rows for `ids`; the zero vector for an empty bag.
    pub fn embed_ids(&self, ids: &[usize]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for &id in ids {
            for (o, v) in out.iter_mut().zip(&self.table[id * self.dim..(id + 1) * self.dim]) {
                *o += v;
            }
        }
        out
    }

    pub fn embed(&self, text: &str) -> Vec<f64> {
        self.embed_ids(&self.token_ids(text))
    }

    pub fn backward(&self, ids: &[usize], grad: &[f64], grads: &mut HashedEmbedder) {
        for &id in ids {
            for (g, v) in grads.table[id * self.dim..(id + 1) * self.dim].iter_mut().zip(grad) {
                *g += v;
            }
        }
    }
}

impl Parameters for HashedEmbedder {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        f("table", &self.table);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        f("table", &mut self.table);
    }
}
